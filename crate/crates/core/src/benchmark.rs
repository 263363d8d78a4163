//! Class-incremental benchmark construction over a long-tailed inventory.
//!
//! Classes below a minimum size are dropped, the largest survivors are kept,
//! and each class of a caller-supplied base/novel partition gives up a few
//! seeded test assets.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{validate_inventory, AssetRecord, ClassInventory, Split};
use crate::rng::{keyed_rng, sample_indices};

/// Description of the test draw, echoed into outputs.
pub const TEST_SAMPLER: &str = "uniform without replacement, chacha20 keyed by (seed, class)";

fn default_min_class_size() -> usize {
    15
}
fn default_max_classes() -> usize {
    90
}
fn default_test_per_class() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub base_classes: Vec<String>,
    pub novel_classes: Vec<String>,
    #[serde(default = "default_min_class_size")]
    pub min_class_size: usize,
    #[serde(default = "default_max_classes")]
    pub max_classes: usize,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(base_classes: Vec<String>, novel_classes: Vec<String>) -> Self {
        Self {
            base_classes,
            novel_classes,
            min_class_size: default_min_class_size(),
            max_classes: default_max_classes(),
            test_per_class: default_test_per_class(),
            seed: 0,
        }
    }
}

/// Parses a class list: one label per line, blank lines and `#` comments
/// ignored. A document starting with `[` is read as a JSON string array.
pub fn parse_class_list(text: &str) -> Result<Vec<String>> {
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()));
    }
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

/// Drops classes smaller than `min_class_size`, then keeps the
/// `max_classes` largest (ties by label).
pub fn filter_classes(
    records: impl IntoIterator<Item = AssetRecord>,
    min_class_size: usize,
    max_classes: usize,
) -> Result<ClassInventory> {
    let mut inventory = validate_inventory(records)?;
    inventory.retain(|_, recs| recs.len() >= min_class_size);
    if inventory.num_classes() > max_classes {
        let mut ranked: Vec<(&str, usize)> = inventory.counts().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let keep: BTreeSet<String> = ranked[..max_classes]
            .iter()
            .map(|(l, _)| l.to_string())
            .collect();
        inventory.retain(|label, _| keep.contains(label));
    }
    Ok(inventory)
}

/// The four record sets of a two-stage benchmark, with split tags set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Splits {
    pub base_train: Vec<AssetRecord>,
    pub base_test: Vec<AssetRecord>,
    pub novel_train: Vec<AssetRecord>,
    pub novel_test: Vec<AssetRecord>,
    pub seed: u64,
    pub sampler: String,
}

impl Splits {
    /// Base records (train then test, each sorted by id).
    pub fn base(&self) -> impl Iterator<Item = &AssetRecord> {
        self.base_train.iter().chain(&self.base_test)
    }

    pub fn novel(&self) -> impl Iterator<Item = &AssetRecord> {
        self.novel_train.iter().chain(&self.novel_test)
    }
}

fn split_class(
    records: &[AssetRecord],
    test_per_class: usize,
    seed: u64,
    label: &str,
) -> (Vec<AssetRecord>, Vec<AssetRecord>) {
    let mut sorted: Vec<&AssetRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.asset_id.cmp(&b.asset_id));
    let n = sorted.len();
    let n_test = test_per_class.min(n.saturating_sub(1));
    let mut rng = keyed_rng("benchmark-test", seed, label);
    let mut is_test = vec![false; n];
    for i in sample_indices(&mut rng, n, n_test) {
        is_test[i] = true;
    }
    let mut train = Vec::with_capacity(n - n_test);
    let mut test = Vec::with_capacity(n_test);
    for (record, t) in sorted.into_iter().zip(is_test) {
        if t {
            test.push(record.clone().with_split(Split::Test));
        } else {
            train.push(record.clone().with_split(Split::Train));
        }
    }
    (train, test)
}

/// Partitions `inventory` into base/novel train/test sets. Each class gives
/// `min(test_per_class, n_c - 1)` assets to test.
pub fn build_splits(inventory: &ClassInventory, spec: &SplitSpec) -> Result<Splits> {
    let base: BTreeSet<&str> = spec.base_classes.iter().map(String::as_str).collect();
    let novel: BTreeSet<&str> = spec.novel_classes.iter().map(String::as_str).collect();
    let overlap: Vec<String> = base.intersection(&novel).map(|s| s.to_string()).collect();
    if !overlap.is_empty() {
        return Err(Error::OverlappingSplits(overlap));
    }
    if let Some(missing) = base
        .iter()
        .chain(&novel)
        .find(|c| inventory.class(c).is_none())
    {
        return Err(Error::UnknownClass(missing.to_string()));
    }

    let mut splits = Splits {
        seed: spec.seed,
        sampler: TEST_SAMPLER.to_string(),
        ..Default::default()
    };
    for (classes, train_out, test_out) in [
        (&base, &mut splits.base_train, &mut splits.base_test),
        (&novel, &mut splits.novel_train, &mut splits.novel_test),
    ] {
        for &label in classes {
            let records = inventory.class(label).expect("checked above");
            let (train, test) = split_class(records, spec.test_per_class, spec.seed, label);
            train_out.extend(train);
            test_out.extend(test);
        }
        train_out.sort_by(|a, b| a.asset_id.cmp(&b.asset_id));
        test_out.sort_by(|a, b| a.asset_id.cmp(&b.asset_id));
    }
    Ok(splits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub train: usize,
    pub test: usize,
    pub total: usize,
}

/// Counts for one stage (or any set of records).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageStats {
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    pub total: usize,
    pub per_class: BTreeMap<String, ClassCounts>,
    /// `(label, total)` sorted by descending count, then label; the long-tail profile.
    pub frequencies: Vec<(String, usize)>,
}

/// Tallies records by class and split tag. Unassigned records count toward
/// the total only.
pub fn stage_stats<'a>(records: impl IntoIterator<Item = &'a AssetRecord>) -> StageStats {
    let mut per_class: BTreeMap<String, ClassCounts> = BTreeMap::new();
    for r in records {
        let c = per_class.entry(r.class_label.clone()).or_default();
        match r.split {
            Split::Train => c.train += 1,
            Split::Test => c.test += 1,
            Split::Unassigned => {}
        }
        c.total += 1;
    }
    let mut frequencies: Vec<(String, usize)> = per_class
        .iter()
        .map(|(l, c)| (l.clone(), c.total))
        .collect();
    frequencies.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    StageStats {
        classes: per_class.len(),
        train: per_class.values().map(|c| c.train).sum(),
        test: per_class.values().map(|c| c.test).sum(),
        total: per_class.values().map(|c| c.total).sum(),
        per_class,
        frequencies,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitStats {
    pub base: StageStats,
    pub novel: StageStats,
    pub seed: u64,
    pub sampler: String,
}

pub fn split_stats(splits: &Splits) -> SplitStats {
    SplitStats {
        base: stage_stats(splits.base()),
        novel: stage_stats(splits.novel()),
        seed: splits.seed,
        sampler: splits.sampler.clone(),
    }
}
