//! End-to-end replay-set creation: budget, allocation, per-class selection,
//! manifest.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;

use crate::allocation::allocate_budget;
use crate::error::{Error, Result};
use crate::model::{
    AllocationPlan, AssetRecord, ClassInventory, ManifestMetadata, ReplayManifest, ReplayParams,
    Split, Strategy,
};
use crate::provider::TextEmbedder;
use crate::selection::{embed_assets, select_kcenter, select_random, AssetEmbedding};

/// `floor(replay_pct / 100 * novel_size)`, clamped to `available`.
pub fn replay_budget(replay_pct: f64, novel_size: usize, available: usize) -> usize {
    // multiply first so integral percentages stay exact
    let raw = (replay_pct * novel_size as f64 / 100.0).floor();
    (raw.max(0.0) as usize).min(available)
}

#[derive(Debug, Clone, Default)]
pub struct ReplayOptions {
    /// Worker threads for per-class selection; `None` uses rayon's default.
    pub threads: Option<usize>,
    /// Recorded verbatim in the manifest.
    pub input_digests: BTreeMap<String, String>,
}

/// Per-class selections plus the classes whose k-center seed fell back.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Selections {
    pub by_class: BTreeMap<String, Vec<String>>,
    pub degenerate_mean_classes: Vec<String>,
}

fn run_in_pool<T: Send>(threads: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(job()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::InvalidParams(format!("thread pool: {e}")))?;
            Ok(pool.install(job))
        }
    }
}

/// Picks `plan`'s quota from every class. Classes are processed
/// independently and merged in label order, so the result is the same at
/// any thread count.
pub fn select_for_plan(
    inventory: &ClassInventory,
    plan: &AllocationPlan,
    strategy: Strategy,
    seed: u64,
    max_captions: usize,
    embedder: Option<&mut dyn TextEmbedder>,
    threads: Option<usize>,
) -> Result<Selections> {
    let mut work: Vec<(&str, &[AssetRecord], usize)> = Vec::new();
    for alloc in &plan.classes {
        let records = inventory
            .class(&alloc.class_label)
            .ok_or_else(|| Error::UnknownClass(alloc.class_label.clone()))?;
        work.push((&alloc.class_label, records, alloc.quota));
    }

    let mut out = Selections::default();
    match strategy {
        Strategy::Random => {
            let picked: Vec<Vec<String>> = run_in_pool(threads, || {
                work.par_iter()
                    .map(|&(label, records, k)| select_random(records, k, seed, label))
                    .collect()
            })?;
            for ((label, ..), ids) in work.iter().zip(picked) {
                out.by_class.insert(label.to_string(), ids);
            }
        }
        Strategy::Kcenter => {
            // only classes that actually need a choice are embedded
            let to_embed: Vec<AssetRecord> = work
                .iter()
                .filter(|&&(_, records, k)| k > 0 && k < records.len())
                .flat_map(|&(_, records, _)| records.iter().cloned())
                .collect();
            let mut embedded: HashMap<String, AssetEmbedding> = HashMap::new();
            if !to_embed.is_empty() {
                let embedder = embedder.ok_or_else(|| {
                    Error::InvalidParams("k-center selection needs an embedding provider".into())
                })?;
                for e in embed_assets(&to_embed, embedder, max_captions)? {
                    embedded.insert(e.asset_id.clone(), e);
                }
            }
            let embedded = &embedded;
            let picked: Vec<Result<(Vec<String>, bool)>> = run_in_pool(threads, || {
                work.par_iter()
                    .map(|&(_, records, k)| {
                        if k == 0 {
                            return Ok((Vec::new(), false));
                        }
                        if k >= records.len() {
                            let mut ids: Vec<String> =
                                records.iter().map(|r| r.asset_id.clone()).collect();
                            ids.sort();
                            return Ok((ids, false));
                        }
                        let assets: Vec<AssetEmbedding> = records
                            .iter()
                            .map(|r| embedded[&r.asset_id].clone())
                            .collect();
                        let sel = select_kcenter(&assets, k)?;
                        Ok((sel.ids, sel.degenerate_mean))
                    })
                    .collect()
            })?;
            for ((label, ..), result) in work.iter().zip(picked) {
                let (ids, degenerate) = result?;
                if degenerate {
                    out.degenerate_mean_classes.push(label.to_string());
                }
                out.by_class.insert(label.to_string(), ids);
            }
        }
    }
    Ok(out)
}

/// Builds a replay memory from the base-stage training inventory.
///
/// `base` must hold base-class training assets only. `embedder` is required
/// for the k-center strategy and ignored for random replay.
pub fn create_replay_set(
    base: &ClassInventory,
    novel_size: usize,
    params: &ReplayParams,
    embedder: Option<&mut dyn TextEmbedder>,
    options: &ReplayOptions,
) -> Result<ReplayManifest> {
    params.validate()?;
    if novel_size == 0 {
        return Err(Error::InvalidParams(
            "novel set size must be positive".into(),
        ));
    }
    if let Some(r) = base.records().find(|r| r.split == Split::Test) {
        return Err(Error::InvalidParams(format!(
            "test asset `{}` in replay inventory",
            r.asset_id
        )));
    }
    let budget = replay_budget(params.replay_pct, novel_size, base.total());
    let plan = allocate_budget(base, budget, params.m_min, params.m_max, params.p_max)?;
    let selections = select_for_plan(
        base,
        &plan,
        params.strategy,
        params.seed,
        params.max_captions,
        embedder,
        options.threads,
    )?;
    let manifest = ReplayManifest {
        params: params.clone(),
        allocation: plan,
        selections: selections.by_class,
        metadata: ManifestMetadata {
            tool_version: crate::TOOL_VERSION.to_string(),
            novel_size,
            input_digests: options.input_digests.clone(),
            degenerate_mean_classes: selections.degenerate_mean_classes,
        },
    };
    manifest.check(base)?;
    Ok(manifest)
}

/// Union of the replayed base assets and the novel training assets, sorted
/// by asset id, each id once. Replayed records are tagged `train`.
pub fn mix_training_view(
    manifest: &ReplayManifest,
    base_records: &[AssetRecord],
    novel_records: &[AssetRecord],
) -> Result<Vec<AssetRecord>> {
    let base: HashMap<&str, &AssetRecord> = base_records
        .iter()
        .map(|r| (r.asset_id.as_str(), r))
        .collect();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for id in manifest.selected_ids() {
        let record = base
            .get(id)
            .ok_or_else(|| Error::UnresolvedAssetId(id.to_string()))?;
        if seen.insert(id.to_string()) {
            out.push((*record).clone().with_split(Split::Train));
        }
    }
    for record in novel_records.iter().filter(|r| r.split != Split::Test) {
        if seen.insert(record.asset_id.clone()) {
            out.push(record.clone());
        }
    }
    out.sort_by(|a, b| a.asset_id.cmp(&b.asset_id));
    Ok(out)
}
