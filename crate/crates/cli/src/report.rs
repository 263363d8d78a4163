//! `eval report`: a JSON config naming each metric's inputs.
//!
//! ```json
//! {
//!   "metrics": [
//!     {"name": "CLIP", "direction": "higher_better", "base_before": 29.64,
//!      "base_scores": [27.1, 25.3], "novel_scores": [30.2]},
//!     {"name": "FID", "direction": "lower_better",
//!      "base_generated": "fid/base_gen.emb", "base_reference": "fid/base_ref.emb",
//!      "novel_generated": "fid/novel_gen.emb", "novel_reference": "fid/novel_ref.emb"}
//!   ]
//! }
//! ```
//!
//! Relative paths resolve against the config file's directory.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use replaykit::metrics::{assemble_report, render_table, FeatureSet, SplitScores};
use replaykit::{io, Direction, MetricReport};
use serde::Deserialize;

use crate::commands::UsageError;
use crate::ReportArgs;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportConfig {
    metrics: Vec<MetricInput>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetricInput {
    name: String,
    direction: Direction,
    #[serde(default)]
    base_before: Option<f64>,
    #[serde(default)]
    base_scores: Option<Vec<f64>>,
    #[serde(default)]
    novel_scores: Option<Vec<f64>>,
    #[serde(default)]
    base_generated: Option<PathBuf>,
    #[serde(default)]
    base_reference: Option<PathBuf>,
    #[serde(default)]
    novel_generated: Option<PathBuf>,
    #[serde(default)]
    novel_reference: Option<PathBuf>,
}

fn features(root: &Path, path: &Path, label: &str) -> Result<FeatureSet> {
    let path = root.join(path);
    let table =
        io::load_embeddings(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(FeatureSet::from_table(label, &table))
}

fn side(root: &Path, m: &MetricInput, stage: &str) -> Result<SplitScores> {
    let (scores, generated, reference) = match stage {
        "base" => (&m.base_scores, &m.base_generated, &m.base_reference),
        _ => (&m.novel_scores, &m.novel_generated, &m.novel_reference),
    };
    match (scores, generated, reference) {
        (Some(s), None, None) => Ok(SplitScores::PerAsset(s.clone())),
        (None, Some(g), Some(r)) => Ok(SplitScores::Features {
            generated: features(root, g, &format!("{stage}-generated"))?,
            reference: features(root, r, &format!("{stage}-reference"))?,
        }),
        _ => Err(UsageError(format!(
            "metric `{}`: give either {stage}_scores or both {stage}_generated and {stage}_reference",
            m.name
        ))
        .into()),
    }
}

pub fn build(config_path: &Path) -> Result<Vec<MetricReport>> {
    let config: ReportConfig =
        io::load_json(config_path).with_context(|| format!("reading {}", config_path.display()))?;
    let root = config_path.parent().unwrap_or(Path::new("."));
    config
        .metrics
        .iter()
        .map(|m| {
            let base = side(root, m, "base")?;
            let novel = side(root, m, "novel")?;
            assemble_report(&m.name, m.direction, &base, &novel, m.base_before)
                .with_context(|| format!("metric `{}`", m.name))
        })
        .collect()
}

pub fn run(args: ReportArgs) -> Result<()> {
    let reports = build(&args.config)?;
    if let Some(path) = &args.out {
        io::save_json(path, &reports)?;
    }
    print!("{}", render_table(&reports));
    for r in reports.iter().filter(|r| r.regularized) {
        eprintln!("warning: `{}` used a regularized covariance", r.metric);
    }
    Ok(())
}
