mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Replay-memory construction and evaluation for class-incremental
/// text-to-3D training.
#[derive(Debug, Parser)]
#[command(name = "replaykit", version, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build base/novel train/test splits from asset metadata.
    Split(SplitArgs),
    /// Embed captions into an embedding table.
    Embed(EmbedArgs),
    /// Build a replay manifest (allocation + per-class selection).
    Replay(ReplayArgs),
    /// Compute per-class replay quotas only.
    Allocate(AllocateArgs),
    /// Select exemplars for an existing allocation plan.
    Select(SelectArgs),
    /// Evaluation metrics.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Per-class and per-split statistics of a metadata file.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
struct SplitArgs {
    /// JSON-lines asset metadata.
    #[arg(long)]
    metadata: PathBuf,
    /// JSON split specification; flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Base class list (one label per line, or a JSON array).
    #[arg(long, required_unless_present = "spec")]
    base_classes: Option<PathBuf>,
    /// Novel class list (one label per line, or a JSON array).
    #[arg(long, required_unless_present = "spec")]
    novel_classes: Option<PathBuf>,
    /// Drop classes with fewer assets [default: 15].
    #[arg(long)]
    min_class_size: Option<usize>,
    /// Keep at most this many of the largest classes [default: 90].
    #[arg(long)]
    max_classes: Option<usize>,
    /// Test assets drawn per class [default: 5].
    #[arg(long)]
    test_per_class: Option<usize>,
    /// Seed for test draws [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for base.jsonl, novel.jsonl and stats.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProviderMode {
    File,
    Http,
}

#[derive(Debug, Args)]
struct HttpArgs {
    /// Embedding service base URL.
    #[arg(long, env = "REPLAYKIT_ENDPOINT")]
    endpoint: Option<String>,
    /// Write-through cache of fetched vectors (embedding table file).
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
    #[arg(long, default_value_t = 60)]
    timeout_secs: u64,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    metadata: PathBuf,
    #[arg(long, value_enum, default_value_t = ProviderMode::Http)]
    provider: ProviderMode,
    /// Source table for file mode.
    #[arg(long, required_if_eq("provider", "file"))]
    table: Option<PathBuf>,
    #[command(flatten)]
    http: HttpArgs,
    #[arg(long, default_value_t = 11)]
    max_captions: usize,
    /// Output table, rows keyed by caption SHA-256.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CapsArgs {
    #[arg(long, default_value_t = 3)]
    m_min: usize,
    #[arg(long, default_value_t = 20)]
    m_max: usize,
    /// Per-class fraction cap; "30" and "0.30" both mean 30%.
    #[arg(long, default_value = "0.30", value_parser = parse_fraction)]
    p_max: f64,
}

#[derive(Debug, Args)]
struct SourceArgs {
    /// Caption embedding table (file provider).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[command(flatten)]
    http: HttpArgs,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    /// Base-stage metadata; records tagged `test` are excluded.
    #[arg(long)]
    metadata: PathBuf,
    /// Novel training-set size.
    #[arg(long, required_unless_present = "novel_metadata")]
    novel_size: Option<usize>,
    /// Novel-stage metadata; its non-test records give the novel size.
    #[arg(long)]
    novel_metadata: Option<PathBuf>,
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long, default_value_t = 20.0)]
    replay_pct: f64,
    #[command(flatten)]
    caps: CapsArgs,
    #[arg(long, default_value_t = 11)]
    max_captions: usize,
    #[arg(long, value_enum, default_value_t = StrategyArg::Kcenter)]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads for selection; output does not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value = "manifest.json")]
    out: PathBuf,
    /// Also write replayed base assets plus novel training assets as metadata.
    #[arg(long, requires = "novel_metadata")]
    mix_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Kcenter,
    Random,
}

#[derive(Debug, Args)]
struct AllocateArgs {
    #[arg(long)]
    metadata: PathBuf,
    /// Global budget; otherwise derived from --replay-pct and --novel-size.
    #[arg(long, conflicts_with_all = ["novel_size"])]
    budget: Option<usize>,
    #[arg(long, default_value_t = 20.0)]
    replay_pct: f64,
    #[arg(long, required_unless_present = "budget")]
    novel_size: Option<usize>,
    #[command(flatten)]
    caps: CapsArgs,
    /// Write the plan here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[arg(long)]
    metadata: PathBuf,
    /// Allocation plan JSON from `allocate`.
    #[arg(long)]
    plan: PathBuf,
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long, default_value_t = 11)]
    max_captions: usize,
    #[arg(long, value_enum, default_value_t = StrategyArg::Kcenter)]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum EvalCommand {
    /// 100 x mean text/render cosine, averaged over views then assets.
    Clip(ClipArgs),
    /// Fréchet distance between two feature tables.
    Fd(FdArgs),
    /// Relative base-class change in percent.
    Forgetting(ForgettingArgs),
    /// Assemble a base/novel/all/forgetting table from a JSON config.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct ClipArgs {
    /// Text features keyed by asset id.
    #[arg(long)]
    text: PathBuf,
    /// Render features.
    #[arg(long)]
    renders: PathBuf,
    /// JSON object asset id -> render ids; defaults to `<asset_id>/<view>` naming.
    #[arg(long)]
    grouping: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FdArgs {
    #[arg(long)]
    generated: PathBuf,
    #[arg(long)]
    reference: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DirectionArg {
    Higher,
    Lower,
}

#[derive(Debug, Args)]
struct ForgettingArgs {
    #[arg(long, allow_negative_numbers = true)]
    before: f64,
    #[arg(long, allow_negative_numbers = true)]
    after: f64,
    #[arg(long, value_enum)]
    direction: DirectionArg,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    config: PathBuf,
    /// Write the rows as JSON here as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    metadata: PathBuf,
    #[arg(long, requires = "novel_classes")]
    base_classes: Option<PathBuf>,
    #[arg(long, requires = "base_classes")]
    novel_classes: Option<PathBuf>,
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    let v = if v > 1.0 { v / 100.0 } else { v };
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!(
            "`{s}` is not a fraction in (0, 1] or a percentage in (0, 100]"
        ))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let missing =
                e.kind() == clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand;
            return if e.use_stderr() || missing {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
