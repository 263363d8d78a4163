//! Seeded input generators shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use replaykit::selection::AssetEmbedding;
use replaykit::{validate_inventory, AssetRecord, ClassInventory};

/// `classes` long-tailed class sizes, each at least `min`.
pub fn long_tail_counts(classes: usize, min: usize, head: usize) -> Vec<(String, usize)> {
    let decay = classes as f64 / 5.0;
    (0..classes)
        .map(|i| {
            (
                format!("class{i:03}"),
                min + (head as f64 * (-(i as f64) / decay).exp()) as usize,
            )
        })
        .collect()
}

pub fn inventory(counts: &[(String, usize)]) -> ClassInventory {
    let records = counts.iter().flat_map(|(label, n)| {
        (0..*n)
            .map(move |i| AssetRecord::new(format!("{label}-{i:05}"), label.clone(), ["caption"]))
    });
    validate_inventory(records).expect("generated ids are unique")
}

/// `n` unit vectors in `dim` dimensions clustered around a few directions.
pub fn clustered_unit_vectors(n: usize, dim: usize, seed: u64) -> Vec<AssetEmbedding> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..8).map(|_| gaussian_row(&mut rng, dim, 0.0)).collect();
    (0..n)
        .map(|i| {
            let c = &centers[rng.random_range(0..centers.len())];
            let v: Vec<f64> = c.iter().map(|x| x + 0.3 * sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            AssetEmbedding {
                asset_id: format!("a{i:06}"),
                vector: v.iter().map(|x| x / norm).collect(),
                captions_used: 1,
            }
        })
        .collect()
}

fn sample(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_row(rng: &mut ChaCha8Rng, dim: usize, shift: f64) -> Vec<f64> {
    (0..dim).map(|_| shift + sample(rng)).collect()
}

/// `n` rows of `N(shift, I)` in `dim` dimensions.
pub fn gaussian_rows(n: usize, dim: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| gaussian_row(&mut rng, dim, shift)).collect()
}
