//! Exemplar selection inside one class.
//!
//! Assets are embedded as the renormalized mean of their unit-normalized
//! caption embeddings. [`select_kcenter`] seeds with the asset closest to the
//! class mean direction and then repeatedly adds the asset farthest (in
//! cosine distance `1 - <a, b>`) from everything chosen so far.

use crate::error::{Error, Result};
use crate::model::AssetRecord;
use crate::provider::TextEmbedder;
use crate::rng::{keyed_rng, sample_indices};

/// Norm below which a mean direction is considered to have vanished.
pub const DEGENERATE_NORM: f64 = 1e-9;

/// Scores closer than this are treated as tied and resolved by asset id.
const TIE_EPS: f64 = 1e-12;

/// Unit-norm text-space representation of one asset.
#[derive(Debug, Clone, PartialEq)]
pub struct AssetEmbedding {
    pub asset_id: String,
    pub vector: Vec<f64>,
    /// Number of captions averaged.
    pub captions_used: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Builds an asset embedding from raw caption vectors: normalize each, average,
/// renormalize.
pub fn asset_embedding(asset_id: &str, caption_vectors: &[Vec<f32>]) -> Result<AssetEmbedding> {
    let Some(first) = caption_vectors.first() else {
        return Err(Error::NoValidCaptions(asset_id.to_string()));
    };
    let dim = first.len();
    let mut mean = vec![0f64; dim];
    for v in caption_vectors {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: v.len(),
            });
        }
        let z: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
        let n = norm(&z);
        if !n.is_finite() || n <= 0.0 {
            return Err(Error::ZeroVector(asset_id.to_string()));
        }
        for (m, x) in mean.iter_mut().zip(&z) {
            *m += x / n;
        }
    }
    let count = caption_vectors.len() as f64;
    mean.iter_mut().for_each(|m| *m /= count);
    let n = norm(&mean);
    if n < DEGENERATE_NORM {
        return Err(Error::DegenerateMean(asset_id.to_string()));
    }
    Ok(AssetEmbedding {
        asset_id: asset_id.to_string(),
        vector: mean.into_iter().map(|m| m / n).collect(),
        captions_used: caption_vectors.len(),
    })
}

/// Embeds one asset from its first `max_captions` valid captions.
pub fn embed_asset(
    record: &AssetRecord,
    embedder: &mut dyn TextEmbedder,
    max_captions: usize,
) -> Result<AssetEmbedding> {
    embed_assets(std::slice::from_ref(record), embedder, max_captions)?
        .pop()
        .ok_or_else(|| Error::NoValidCaptions(record.asset_id.clone()))
}

/// Embeds many assets with a single provider call.
pub fn embed_assets(
    records: &[AssetRecord],
    embedder: &mut dyn TextEmbedder,
    max_captions: usize,
) -> Result<Vec<AssetEmbedding>> {
    let mut texts = Vec::new();
    let mut spans = Vec::with_capacity(records.len());
    for record in records {
        let start = texts.len();
        texts.extend(record.valid_captions(max_captions).map(str::to_string));
        if texts.len() == start {
            return Err(Error::NoValidCaptions(record.asset_id.clone()));
        }
        spans.push(start..texts.len());
    }
    let vectors = embedder.embed_texts(&texts)?;
    if vectors.len() != texts.len() {
        return Err(Error::ServiceUnavailable(format!(
            "{} vectors for {} captions",
            vectors.len(),
            texts.len()
        )));
    }
    records
        .iter()
        .zip(spans)
        .map(|(record, span)| asset_embedding(&record.asset_id, &vectors[span]))
        .collect()
}

/// Outcome of [`select_kcenter`].
#[derive(Debug, Clone, PartialEq)]
pub struct KCenterSelection {
    /// Selected ids in pick order.
    pub ids: Vec<String>,
    /// True when the class mean vanished and the seed fell back to the smallest id.
    pub degenerate_mean: bool,
    /// Largest cosine distance from any asset to its nearest selected center.
    pub radius: f64,
}

/// Index of the maximum score, ties to the lowest index.
fn argmax(scores: impl Iterator<Item = (usize, f64)>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores {
        match best {
            Some((_, b)) if s <= b + TIE_EPS => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i)
}

/// Greedy k-center over `assets`. Ties go to the lexicographically smallest
/// id, so the result does not depend on input order.
pub fn select_kcenter(assets: &[AssetEmbedding], k: usize) -> Result<KCenterSelection> {
    if k == 0 {
        return Err(Error::InvalidParams("k must be positive".into()));
    }
    if assets.is_empty() {
        return Err(Error::InvalidParams("no assets to select from".into()));
    }
    let dim = assets[0].vector.len();
    if let Some(a) = assets.iter().find(|a| a.vector.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: a.vector.len(),
        });
    }

    let mut order: Vec<&AssetEmbedding> = assets.iter().collect();
    order.sort_by(|a, b| a.asset_id.cmp(&b.asset_id));
    if let Some(w) = order.windows(2).find(|w| w[0].asset_id == w[1].asset_id) {
        return Err(Error::DuplicateAssetId(w[0].asset_id.clone()));
    }
    let n = order.len();

    if k >= n {
        return Ok(KCenterSelection {
            ids: order.iter().map(|a| a.asset_id.clone()).collect(),
            degenerate_mean: false,
            radius: 0.0,
        });
    }

    let mut sum = vec![0f64; dim];
    for a in &order {
        for (s, x) in sum.iter_mut().zip(&a.vector) {
            *s += x;
        }
    }
    let sum_norm = norm(&sum);
    let degenerate_mean = sum_norm < DEGENERATE_NORM;
    let seed = if degenerate_mean {
        0
    } else {
        let mean: Vec<f64> = sum.iter().map(|s| s / sum_norm).collect();
        argmax(
            order
                .iter()
                .enumerate()
                .map(|(i, a)| (i, dot(&a.vector, &mean))),
        )
        .expect("non-empty")
    };

    let mut selected = vec![false; n];
    selected[seed] = true;
    let mut picks = vec![seed];
    let mut d_min: Vec<f64> = order
        .iter()
        .map(|a| 1.0 - dot(&a.vector, &order[seed].vector))
        .collect();

    for _ in 1..k {
        let u = argmax((0..n).filter(|&i| !selected[i]).map(|i| (i, d_min[i])))
            .expect("k < n leaves candidates");
        selected[u] = true;
        picks.push(u);
        for (i, a) in order.iter().enumerate() {
            let d = 1.0 - dot(&a.vector, &order[u].vector);
            if d < d_min[i] {
                d_min[i] = d;
            }
        }
    }

    let radius = (0..n)
        .filter(|&i| !selected[i])
        .map(|i| d_min[i])
        .fold(0.0, f64::max);

    Ok(KCenterSelection {
        ids: picks
            .into_iter()
            .map(|i| order[i].asset_id.clone())
            .collect(),
        degenerate_mean,
        radius,
    })
}

/// Uniform draw of `k` distinct assets without replacement, keyed by
/// `(seed, class_label)`. Returns every id (sorted) when `k >= N`.
pub fn select_random(
    assets: &[AssetRecord],
    k: usize,
    seed: u64,
    class_label: &str,
) -> Vec<String> {
    let mut ids: Vec<&str> = assets.iter().map(|a| a.asset_id.as_str()).collect();
    ids.sort_unstable();
    if k >= ids.len() {
        return ids.into_iter().map(str::to_string).collect();
    }
    let mut rng = random_replay_rng(seed, class_label);
    sample_indices(&mut rng, ids.len(), k)
        .into_iter()
        .map(|i| ids[i].to_string())
        .collect()
}

/// Generator behind [`select_random`], exposed so draws can be replayed.
pub fn random_replay_rng(seed: u64, class_label: &str) -> rand_chacha::ChaCha20Rng {
    keyed_rng("replay-random", seed, class_label)
}
