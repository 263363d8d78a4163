use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::time::Duration;

use anyhow::{Context, Result};
use replaykit::benchmark::{self, SplitSpec};
use replaykit::metrics;
use replaykit::provider::{caption_key, FileEmbedder, HttpConfig, HttpEmbedder, TextEmbedder};
use replaykit::replay::{self, ReplayOptions};
use replaykit::{io, validate_inventory, AssetRecord, ClassInventory, Direction, EmbeddingTable};
use replaykit::{AllocationPlan, ErrorKind, ReplayParams, Split, Strategy};
use serde::Serialize;

use crate::{
    AllocateArgs, ClipArgs, Command, DirectionArg, EmbedArgs, EvalCommand, FdArgs, ForgettingArgs,
    HttpArgs, ProviderMode, ReplayArgs, SelectArgs, SourceArgs, SplitArgs, StatsArgs, StrategyArg,
};

/// Bad invocation detected after argument parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

/// 1 usage, 2 data, 3 service.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<replaykit::Error>() {
            return match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Service => 3,
            };
        }
    }
    2
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Split(args) => split(args),
        Command::Embed(args) => embed(args),
        Command::Replay(args) => replay(args),
        Command::Allocate(args) => allocate(args),
        Command::Select(args) => select(args),
        Command::Eval(EvalCommand::Clip(args)) => eval_clip(args),
        Command::Eval(EvalCommand::Fd(args)) => eval_fd(args),
        Command::Eval(EvalCommand::Forgetting(args)) => eval_forgetting(args),
        Command::Eval(EvalCommand::Report(args)) => crate::report::run(args),
        Command::Stats(args) => stats(args),
    }
}

fn digest(path: &Path) -> Result<String> {
    io::sha256_file(path).with_context(|| format!("reading {}", path.display()))
}

fn load_metadata(path: &Path) -> Result<Vec<AssetRecord>> {
    io::load_metadata(path).with_context(|| format!("reading {}", path.display()))
}

fn read_class_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(benchmark::parse_class_list(&text)?)
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Base-stage inventory with test-tagged records removed.
fn training_inventory(records: Vec<AssetRecord>) -> Result<ClassInventory> {
    Ok(validate_inventory(
        records.into_iter().filter(|r| r.split != Split::Test),
    )?)
}

fn strategy(arg: StrategyArg) -> Strategy {
    match arg {
        StrategyArg::Kcenter => Strategy::Kcenter,
        StrategyArg::Random => Strategy::Random,
    }
}

fn http_embedder(args: &HttpArgs) -> Result<HttpEmbedder> {
    let Some(endpoint) = &args.endpoint else {
        return usage(
            "no embedding source: pass --embeddings or --endpoint (or set REPLAYKIT_ENDPOINT)",
        );
    };
    let config = HttpConfig {
        batch_size: args.batch_size,
        max_in_flight: args.max_in_flight,
        timeout: Duration::from_secs(args.timeout_secs),
        ..HttpConfig::new(endpoint.clone())
    };
    Ok(HttpEmbedder::new(config, args.cache.clone())?)
}

/// A file table wins over the service when both are given.
fn open_source(
    source: &SourceArgs,
    digests: &mut BTreeMap<String, String>,
) -> Result<Box<dyn TextEmbedder>> {
    if let Some(path) = &source.embeddings {
        digests.insert("embeddings".into(), digest(path)?);
        let table =
            FileEmbedder::open(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(Box::new(table));
    }
    Ok(Box::new(http_embedder(&source.http)?))
}

fn split(args: SplitArgs) -> Result<()> {
    let mut spec: SplitSpec = match &args.spec {
        Some(path) => io::load_json(path).with_context(|| format!("reading {}", path.display()))?,
        None => SplitSpec::new(Vec::new(), Vec::new()),
    };
    if let Some(path) = &args.base_classes {
        spec.base_classes = read_class_list(path)?;
    }
    if let Some(path) = &args.novel_classes {
        spec.novel_classes = read_class_list(path)?;
    }
    spec.min_class_size = args.min_class_size.unwrap_or(spec.min_class_size);
    spec.max_classes = args.max_classes.unwrap_or(spec.max_classes);
    spec.test_per_class = args.test_per_class.unwrap_or(spec.test_per_class);
    spec.seed = args.seed.unwrap_or(spec.seed);

    let records = load_metadata(&args.metadata)?;
    let inventory = benchmark::filter_classes(records, spec.min_class_size, spec.max_classes)?;
    let splits = benchmark::build_splits(&inventory, &spec)?;

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    io::save_metadata(args.out.join("base.jsonl"), splits.base())?;
    io::save_metadata(args.out.join("novel.jsonl"), splits.novel())?;
    let stats = benchmark::split_stats(&splits);
    io::save_json(args.out.join("stats.json"), &stats)?;
    println!(
        "base: {} classes, {} train, {} test; novel: {} classes, {} train, {} test; seed {}",
        stats.base.classes,
        stats.base.train,
        stats.base.test,
        stats.novel.classes,
        stats.novel.train,
        stats.novel.test,
        stats.seed
    );
    Ok(())
}

fn embed(args: EmbedArgs) -> Result<()> {
    if args.max_captions == 0 {
        return usage("--max-captions must be positive");
    }
    let records = load_metadata(&args.metadata)?;
    // unique captions, ordered by key so the output does not depend on record order
    let captions: BTreeMap<String, String> = records
        .iter()
        .flat_map(|r| r.valid_captions(args.max_captions))
        .map(|c| (caption_key(c), c.to_string()))
        .collect();
    let texts: Vec<String> = captions.values().cloned().collect();

    let mut embedder: Box<dyn TextEmbedder> = match args.provider {
        ProviderMode::File => {
            let path = args
                .table
                .as_ref()
                .expect("clap requires --table in file mode");
            Box::new(
                FileEmbedder::open(path).with_context(|| format!("reading {}", path.display()))?,
            )
        }
        ProviderMode::Http => Box::new(http_embedder(&args.http)?),
    };
    let vectors = embedder.embed_texts(&texts)?;
    if args.http.cache.is_some() {
        embedder.cache_flush()?;
    }

    let dim = vectors.first().map_or(0, Vec::len);
    let mut table = EmbeddingTable::new(dim);
    for (key, v) in captions.keys().zip(&vectors) {
        table.insert(key.clone(), v)?;
    }
    io::save_embeddings(&args.out, &table)?;
    println!(
        "{} captions embedded (dim {dim}) -> {}",
        table.len(),
        args.out.display()
    );
    Ok(())
}

fn replay(args: ReplayArgs) -> Result<()> {
    let mut digests = BTreeMap::new();
    digests.insert("metadata".to_string(), digest(&args.metadata)?);
    let base_records = load_metadata(&args.metadata)?;
    let base = training_inventory(base_records.clone())?;

    let novel_records = match &args.novel_metadata {
        Some(path) => {
            digests.insert("novel_metadata".to_string(), digest(path)?);
            Some(load_metadata(path)?)
        }
        None => None,
    };
    let novel_size = match (args.novel_size, &novel_records) {
        (Some(n), _) => n,
        (None, Some(records)) => records.iter().filter(|r| r.split != Split::Test).count(),
        (None, None) => return usage("pass --novel-size or --novel-metadata"),
    };

    let params = ReplayParams {
        replay_pct: args.replay_pct,
        m_min: args.caps.m_min,
        m_max: args.caps.m_max,
        p_max: args.caps.p_max,
        max_captions: args.max_captions,
        strategy: strategy(args.strategy),
        seed: args.seed,
    };
    params.validate()?;

    let mut embedder = match params.strategy {
        Strategy::Kcenter => Some(open_source(&args.source, &mut digests)?),
        Strategy::Random => None,
    };
    let options = ReplayOptions {
        threads: args.threads,
        input_digests: digests,
    };
    let manifest = replay::create_replay_set(
        &base,
        novel_size,
        &params,
        embedder
            .as_mut()
            .map(|e| e.as_mut() as &mut dyn TextEmbedder),
        &options,
    )?;
    if let Some(e) = embedder.as_mut() {
        if args.source.embeddings.is_none() && args.source.http.cache.is_some() {
            e.cache_flush()?;
        }
    }
    io::save_manifest(&manifest, &args.out)?;

    if let Some(path) = &args.mix_out {
        let novel = novel_records.as_deref().unwrap_or_default();
        let mixed = replay::mix_training_view(&manifest, &base_records, novel)?;
        io::save_metadata(path, &mixed)?;
    }

    let plan = &manifest.allocation;
    println!(
        "budget {} allocated {} across {} classes (shortfall {}), strategy {}, seed {} -> {}",
        plan.budget,
        plan.allocated(),
        plan.classes.len(),
        plan.shortfall,
        params.strategy,
        params.seed,
        args.out.display()
    );
    for label in &manifest.metadata.degenerate_mean_classes {
        eprintln!(
            "warning: class `{label}` has a vanishing mean embedding; seeded by smallest asset id"
        );
    }
    Ok(())
}

fn allocate(args: AllocateArgs) -> Result<()> {
    let inventory = training_inventory(load_metadata(&args.metadata)?)?;
    let budget = match (args.budget, args.novel_size) {
        (Some(b), _) => b,
        (None, Some(n)) => {
            if !(args.replay_pct > 0.0 && args.replay_pct <= 100.0) {
                return usage(format!("--replay-pct {} not in (0, 100]", args.replay_pct));
            }
            replay::replay_budget(args.replay_pct, n, inventory.total())
        }
        (None, None) => return usage("pass --budget or --novel-size"),
    };
    let plan = replaykit::allocation::allocate_budget(
        &inventory,
        budget,
        args.caps.m_min,
        args.caps.m_max,
        args.caps.p_max,
    )?;
    write_output(args.out.as_deref(), &io::to_canonical_json(&plan)?)?;
    if plan.shortfall > 0 {
        eprintln!(
            "warning: caps exhausted, {} of {} slots unallocated",
            plan.shortfall, plan.budget
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct SelectOutput<'a> {
    strategy: Strategy,
    seed: u64,
    selections: &'a BTreeMap<String, Vec<String>>,
    degenerate_mean_classes: &'a [String],
}

fn select(args: SelectArgs) -> Result<()> {
    if args.max_captions == 0 {
        return usage("--max-captions must be positive");
    }
    let inventory = training_inventory(load_metadata(&args.metadata)?)?;
    let plan: AllocationPlan =
        io::load_json(&args.plan).with_context(|| format!("reading {}", args.plan.display()))?;
    plan.check()?;
    let strategy = strategy(args.strategy);
    let mut embedder = match strategy {
        Strategy::Kcenter => Some(open_source(&args.source, &mut BTreeMap::new())?),
        Strategy::Random => None,
    };
    let selections = replay::select_for_plan(
        &inventory,
        &plan,
        strategy,
        args.seed,
        args.max_captions,
        embedder
            .as_mut()
            .map(|e| e.as_mut() as &mut dyn TextEmbedder),
        args.threads,
    )?;
    let output = SelectOutput {
        strategy,
        seed: args.seed,
        selections: &selections.by_class,
        degenerate_mean_classes: &selections.degenerate_mean_classes,
    };
    write_output(args.out.as_deref(), &io::to_canonical_json(&output)?)
}

fn load_table(path: &Path) -> Result<EmbeddingTable> {
    io::load_embeddings(path).with_context(|| format!("reading {}", path.display()))
}

/// Renders named `<asset_id>/<view>` are grouped under their asset id.
fn group_by_prefix(renders: &EmbeddingTable) -> Result<BTreeMap<String, Vec<String>>> {
    let mut grouping: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for id in renders.ids() {
        let Some((asset, _)) = id.rsplit_once('/') else {
            return usage(format!(
                "render id `{id}` is not `<asset_id>/<view>`; pass --grouping"
            ));
        };
        grouping
            .entry(asset.to_string())
            .or_default()
            .push(id.clone());
    }
    Ok(grouping)
}

fn eval_clip(args: ClipArgs) -> Result<()> {
    let text = load_table(&args.text)?;
    let renders = load_table(&args.renders)?;
    let grouping = match &args.grouping {
        Some(path) => io::load_json(path).with_context(|| format!("reading {}", path.display()))?,
        None => group_by_prefix(&renders)?,
    };
    let score = metrics::clip_score(&text, &renders, &grouping)?;
    if let Some(path) = &args.out {
        io::save_json(path, &score.per_asset)?;
    }
    println!("{:.2}", score.score);
    Ok(())
}

fn eval_fd(args: FdArgs) -> Result<()> {
    let generated = metrics::FeatureSet::from_table("generated", &load_table(&args.generated)?);
    let reference = metrics::FeatureSet::from_table("reference", &load_table(&args.reference)?);
    let fd = metrics::frechet_distance(
        &metrics::moments(&generated)?,
        &metrics::moments(&reference)?,
    )?;
    if fd.regularized {
        eprintln!(
            "warning: singular covariance, added {:e} to both diagonals",
            metrics::COVARIANCE_EPS
        );
    }
    println!("{:.4}", fd.value);
    Ok(())
}

fn eval_forgetting(args: ForgettingArgs) -> Result<()> {
    let direction = match args.direction {
        DirectionArg::Higher => Direction::HigherBetter,
        DirectionArg::Lower => Direction::LowerBetter,
    };
    println!(
        "{:.2}",
        metrics::forgetting(args.before, args.after, direction)?
    );
    Ok(())
}

#[derive(Serialize)]
struct StatsOutput {
    #[serde(flatten)]
    all: benchmark::StageStats,
    stages: Option<BTreeMap<&'static str, benchmark::StageStats>>,
}

fn stats(args: StatsArgs) -> Result<()> {
    let records = load_metadata(&args.metadata)?;
    validate_inventory(records.iter().cloned())?;
    let stages = match (&args.base_classes, &args.novel_classes) {
        (Some(b), Some(n)) => {
            let base: BTreeSet<String> = read_class_list(b)?.into_iter().collect();
            let novel: BTreeSet<String> = read_class_list(n)?.into_iter().collect();
            let pick = |set: &BTreeSet<String>| {
                benchmark::stage_stats(records.iter().filter(|r| set.contains(&r.class_label)))
            };
            Some(BTreeMap::from([
                ("base", pick(&base)),
                ("novel", pick(&novel)),
            ]))
        }
        _ => None,
    };
    let output = StatsOutput {
        all: benchmark::stage_stats(&records),
        stages,
    };
    print!("{}", io::to_canonical_json(&output)?);
    Ok(())
}
