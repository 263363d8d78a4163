#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use replaykit::provider::caption_key;
use replaykit::{io, AssetRecord, EmbeddingTable};

pub const DIM: usize = 16;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_replaykit"))
}

/// Runs the binary with `REPLAYKIT_ENDPOINT` cleared.
pub fn run(args: &[&str]) -> Output {
    bin()
        .args(args)
        .env_remove("REPLAYKIT_ENDPOINT")
        .output()
        .expect("spawn replaykit")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// 45 long-tailed class sizes summing to 1352, smallest 10.
pub fn long_tail_sizes() -> Vec<usize> {
    let mut sizes: Vec<usize> = (0..45)
        .map(|i| 10 + (90.0 * (-(i as f64) / 9.0).exp()) as usize)
        .collect();
    sizes[0] += 1352 - sizes.iter().sum::<usize>();
    sizes
}

fn unit(rng: &mut ChaCha8Rng) -> Vec<f32> {
    let v: Vec<f64> = (0..DIM).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

/// Records with 1 to 11 captions each and a caption-keyed table where every
/// caption sits near its class direction.
pub fn synthetic(prefix: &str, sizes: &[usize], seed: u64) -> (Vec<AssetRecord>, EmbeddingTable) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut table = EmbeddingTable::new(DIM);
    for (c, &n) in sizes.iter().enumerate() {
        let label = format!("{prefix}{c:02}");
        let center = unit(&mut rng);
        for i in 0..n {
            let id = format!("{label}-{i:04}");
            let k = rng.random_range(1..=11);
            let captions: Vec<String> = (0..k)
                .map(|j| format!("a {label} object, asset {i}, view {j}"))
                .collect();
            for text in &captions {
                let noise = unit(&mut rng);
                let v: Vec<f32> = center
                    .iter()
                    .zip(&noise)
                    .map(|(a, b)| a + 0.6 * b)
                    .collect();
                table.insert(caption_key(text), &v).unwrap();
            }
            records.push(AssetRecord::new(id, label.clone(), captions));
        }
    }
    (records, table)
}

pub struct Dataset {
    pub metadata: PathBuf,
    pub embeddings: PathBuf,
}

/// Writes the 45-class long-tailed base set into `dir`.
pub fn write_long_tail(dir: &Path) -> Dataset {
    let (records, table) = synthetic("class", &long_tail_sizes(), 7);
    let metadata = dir.join("base.jsonl");
    let embeddings = dir.join("captions.emb");
    io::save_metadata(&metadata, &records).unwrap();
    io::save_embeddings(&embeddings, &table).unwrap();
    Dataset {
        metadata,
        embeddings,
    }
}
