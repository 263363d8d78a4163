//! Domain types shared across the crate.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which partition of a stage an asset belongs to.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    #[default]
    Unassigned,
}

/// One captioned 3D asset. The mesh itself is never loaded; `asset_id` is
/// the handle a trainer resolves it through.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetRecord {
    pub asset_id: String,
    pub class_label: String,
    /// Captions in source order.
    pub captions: Vec<String>,
    #[serde(default)]
    pub split: Split,
}

impl AssetRecord {
    pub fn new(
        asset_id: impl Into<String>,
        class_label: impl Into<String>,
        captions: impl IntoIterator<Item = impl Into<String>>,
    ) -> Self {
        Self {
            asset_id: asset_id.into(),
            class_label: class_label.into(),
            captions: captions.into_iter().map(Into::into).collect(),
            split: Split::Unassigned,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// The first `max` captions that are non-empty after whitespace trimming,
    /// in source order. Returned untrimmed.
    pub fn valid_captions(&self, max: usize) -> impl Iterator<Item = &str> {
        self.captions
            .iter()
            .map(String::as_str)
            .filter(|c| !c.trim().is_empty())
            .take(max)
    }

    /// Checks the per-record invariants: non-empty label, at least one valid caption.
    pub fn validate(&self) -> Result<()> {
        if self.class_label.is_empty() {
            return Err(Error::EmptyClassLabel(self.asset_id.clone()));
        }
        if self.valid_captions(usize::MAX).next().is_none() {
            return Err(Error::EmptyCaptions(self.asset_id.clone()));
        }
        Ok(())
    }
}

/// Records grouped by class label. Labels compare byte-exact.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClassInventory {
    classes: BTreeMap<String, Vec<AssetRecord>>,
}

impl ClassInventory {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Number of assets in `class`, 0 if absent.
    pub fn count(&self, class: &str) -> usize {
        self.classes.get(class).map_or(0, Vec::len)
    }

    /// `(label, n_c)` pairs in label order.
    pub fn counts(&self) -> impl Iterator<Item = (&str, usize)> {
        self.classes.iter().map(|(k, v)| (k.as_str(), v.len()))
    }

    pub fn total(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.classes.keys().map(String::as_str)
    }

    pub fn class(&self, label: &str) -> Option<&[AssetRecord]> {
        self.classes.get(label).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[AssetRecord])> {
        self.classes.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// All records, class by class in label order.
    pub fn records(&self) -> impl Iterator<Item = &AssetRecord> {
        self.classes.values().flatten()
    }

    /// Keeps only classes for which `keep` returns true.
    pub fn retain(&mut self, mut keep: impl FnMut(&str, &[AssetRecord]) -> bool) {
        self.classes.retain(|k, v| keep(k, v));
    }

    /// Restricts every class to records whose split is not `Test`; empty
    /// classes are dropped.
    pub fn training_view(&self) -> ClassInventory {
        let classes = self
            .classes
            .iter()
            .filter_map(|(k, v)| {
                let kept: Vec<_> = v
                    .iter()
                    .filter(|r| r.split != Split::Test)
                    .cloned()
                    .collect();
                (!kept.is_empty()).then(|| (k.clone(), kept))
            })
            .collect();
        ClassInventory { classes }
    }
}

/// Groups records by class after validating them. Duplicate ids are rejected.
pub fn validate_inventory<I>(records: I) -> Result<ClassInventory>
where
    I: IntoIterator<Item = AssetRecord>,
{
    let mut seen = HashSet::new();
    let mut classes: BTreeMap<String, Vec<AssetRecord>> = BTreeMap::new();
    for record in records {
        record.validate()?;
        if !seen.insert(record.asset_id.clone()) {
            return Err(Error::DuplicateAssetId(record.asset_id));
        }
        match classes.get_mut(&record.class_label) {
            Some(members) => members.push(record),
            None => {
                classes.insert(record.class_label.clone(), vec![record]);
            }
        }
    }
    Ok(ClassInventory { classes })
}

/// Id-keyed dense matrix of `f32` vectors, all of the same dimension.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingTable {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Default::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Row ids in insertion order.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Row-major body.
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: &[f32]) -> Result<()> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: vector.len(),
            });
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(id));
        }
        if self.index.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(vector);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index
            .get(id)
            .map(|&row| &self.data[row * self.dim..(row + 1) * self.dim])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids.iter().enumerate().map(move |(row, id)| {
            (
                id.as_str(),
                &self.data[row * self.dim..(row + 1) * self.dim],
            )
        })
    }
}

/// How exemplars are picked inside each class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Kcenter,
    Random,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kcenter" => Ok(Strategy::Kcenter),
            "random" => Ok(Strategy::Random),
            other => Err(Error::InvalidParams(format!("unknown strategy `{other}`"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Kcenter => "kcenter",
            Strategy::Random => "random",
        })
    }
}

/// Knobs for replay-set creation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayParams {
    /// Replay budget as a percentage of the novel-set size, in (0, 100].
    pub replay_pct: f64,
    pub m_min: usize,
    pub m_max: usize,
    /// Fractional per-class cap, in (0, 1].
    pub p_max: f64,
    /// Maximum captions averaged per asset.
    pub max_captions: usize,
    pub strategy: Strategy,
    pub seed: u64,
}

impl Default for ReplayParams {
    fn default() -> Self {
        Self {
            replay_pct: 20.0,
            m_min: 3,
            m_max: 20,
            p_max: 0.30,
            max_captions: 11,
            strategy: Strategy::Kcenter,
            seed: 0,
        }
    }
}

impl ReplayParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        if !(self.replay_pct > 0.0 && self.replay_pct <= 100.0) {
            return bad(format!("replay_pct {} not in (0, 100]", self.replay_pct));
        }
        if self.m_min == 0 {
            return bad("m_min must be positive".into());
        }
        if self.m_max < self.m_min {
            return bad(format!("m_max {} < m_min {}", self.m_max, self.m_min));
        }
        if !(self.p_max > 0.0 && self.p_max <= 1.0) {
            return bad(format!("p_max {} not in (0, 1]", self.p_max));
        }
        if self.max_captions == 0 {
            return bad("max_captions must be positive".into());
        }
        Ok(())
    }
}

/// Quota for one class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassAllocation {
    pub class_label: String,
    /// Available assets `n_c`.
    pub count: usize,
    /// Effective cap `u_c`.
    pub cap: usize,
    /// Assigned quota `k_c`.
    pub quota: usize,
}

/// Per-class replay quotas produced by [`crate::allocation::allocate_budget`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub budget: usize,
    /// Scale factor applied to `sqrt(n_c)` before clipping.
    pub alpha: f64,
    /// Sorted by class label.
    pub classes: Vec<ClassAllocation>,
    /// `budget - sum(quota)`.
    pub shortfall: usize,
}

impl AllocationPlan {
    pub fn allocated(&self) -> usize {
        self.classes.iter().map(|c| c.quota).sum()
    }

    pub fn quota(&self, class: &str) -> Option<usize> {
        self.classes
            .iter()
            .find(|c| c.class_label == class)
            .map(|c| c.quota)
    }

    /// Checks `1 <= k_c <= u_c` (when `u_c >= 1`), `sum <= budget` and the shortfall bookkeeping.
    pub fn check(&self) -> Result<()> {
        for c in &self.classes {
            let ok = if c.cap >= 1 {
                c.quota >= 1 && c.quota <= c.cap
            } else {
                c.quota == 0
            };
            if !ok {
                return Err(Error::Schema(format!(
                    "class `{}` quota {} outside [1, {}]",
                    c.class_label, c.quota, c.cap
                )));
            }
        }
        let allocated = self.allocated();
        if allocated > self.budget || self.shortfall != self.budget - allocated {
            return Err(Error::Schema(format!(
                "allocated {allocated} with budget {} and shortfall {}",
                self.budget, self.shortfall
            )));
        }
        Ok(())
    }
}

/// Provenance carried alongside a replay selection.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ManifestMetadata {
    pub tool_version: String,
    pub novel_size: usize,
    /// Input name to lowercase hex SHA-256.
    #[serde(default)]
    pub input_digests: BTreeMap<String, String>,
    /// Classes whose embedding mean vanished; their seed fell back to the smallest id.
    #[serde(default)]
    pub degenerate_mean_classes: Vec<String>,
}

/// A selected replay memory and everything needed to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayManifest {
    pub params: ReplayParams,
    pub allocation: AllocationPlan,
    /// Class label to selected asset ids, in selection order.
    pub selections: BTreeMap<String, Vec<String>>,
    pub metadata: ManifestMetadata,
}

impl ReplayManifest {
    pub fn selected_ids(&self) -> impl Iterator<Item = &str> {
        self.selections.values().flatten().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.selections.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks selections against the plan and the inventory they came from.
    pub fn check(&self, inventory: &ClassInventory) -> Result<()> {
        self.allocation.check()?;
        let mut seen = HashSet::new();
        for alloc in &self.allocation.classes {
            let picked = self
                .selections
                .get(&alloc.class_label)
                .map_or(&[][..], Vec::as_slice);
            if picked.len() != alloc.quota {
                return Err(Error::Schema(format!(
                    "class `{}` has {} selections for quota {}",
                    alloc.class_label,
                    picked.len(),
                    alloc.quota
                )));
            }
            let members = inventory.class(&alloc.class_label).unwrap_or(&[]);
            for id in picked {
                if !members.iter().any(|r| &r.asset_id == id) {
                    return Err(Error::UnresolvedAssetId(id.clone()));
                }
                if !seen.insert(id.as_str()) {
                    return Err(Error::DuplicateAssetId(id.clone()));
                }
            }
        }
        if let Some(extra) = self
            .selections
            .keys()
            .find(|k| self.allocation.classes.iter().all(|c| &c.class_label != *k))
        {
            return Err(Error::Schema(format!(
                "selection for unplanned class `{extra}`"
            )));
        }
        Ok(())
    }
}

/// Whether larger metric values are better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

impl Direction {
    pub fn flipped(self) -> Self {
        match self {
            Direction::HigherBetter => Direction::LowerBetter,
            Direction::LowerBetter => Direction::HigherBetter,
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "higher" | "higher_better" => Ok(Direction::HigherBetter),
            "lower" | "lower_better" => Ok(Direction::LowerBetter),
            other => Err(Error::InvalidParams(format!("unknown direction `{other}`"))),
        }
    }
}

/// One row of an evaluation table: a metric on base, novel and pooled data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub direction: Direction,
    pub base: f64,
    pub novel: f64,
    pub all: f64,
    /// Base value before novel training, if known.
    pub base_before: Option<f64>,
    /// Relative base-class degradation in percent; negative means improvement.
    pub forgetting_pct: Option<f64>,
    /// How `all` was obtained.
    pub all_definition: String,
    /// Set when covariance regularization kicked in for any FD term.
    #[serde(default)]
    pub regularized: bool,
}
