//! Evaluation metrics: CLIP-score aggregation, Gaussian Fréchet distance and
//! forgetting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::{Direction, EmbeddingTable, MetricReport};

/// Diagonal loading applied to both covariances when either is singular.
pub const COVARIANCE_EPS: f64 = 1e-6;

/// Relative eigenvalue floor below which a covariance counts as singular.
const SINGULAR_RTOL: f64 = 1e-12;

const EIG_MAX_ITER: usize = 10_000;

/// Per-asset and aggregate CLIP scores, on the 0..100 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipScore {
    pub score: f64,
    pub per_asset: BTreeMap<String, f64>,
}

fn cosine(a: &[f32], b: &[f32], id: &str) -> Result<f64> {
    let (mut ab, mut aa, mut bb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::ZeroVector(id.to_string()));
    }
    Ok(ab / (aa.sqrt() * bb.sqrt()))
}

/// For each asset, averages `cos(text, render)` over its renders; the score
/// is 100 times the mean over assets.
pub fn clip_score(
    text_features: &EmbeddingTable,
    render_features: &EmbeddingTable,
    grouping: &BTreeMap<String, Vec<String>>,
) -> Result<ClipScore> {
    if text_features.dim() != render_features.dim() {
        return Err(Error::DimensionMismatch {
            expected: text_features.dim(),
            found: render_features.dim(),
        });
    }
    if grouping.is_empty() {
        return Err(Error::InvalidParams("no assets to score".into()));
    }
    let mut per_asset = BTreeMap::new();
    for (asset, renders) in grouping {
        let text = text_features
            .get(asset)
            .ok_or_else(|| Error::MissingFeature(asset.clone()))?;
        if renders.is_empty() {
            return Err(Error::MissingFeature(format!("{asset}: no renders")));
        }
        let mut sum = 0.0;
        for render in renders {
            let r = render_features
                .get(render)
                .ok_or_else(|| Error::MissingFeature(render.clone()))?;
            sum += cosine(text, r, render)?;
        }
        per_asset.insert(asset.clone(), 100.0 * sum / renders.len() as f64);
    }
    let score = per_asset.values().sum::<f64>() / per_asset.len() as f64;
    Ok(ClipScore { score, per_asset })
}

/// Rows of precomputed features (e.g. Inception or PointNet++ activations).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub label: String,
    /// `n x d`, one sample per row.
    pub data: DMatrix<f64>,
}

impl FeatureSet {
    pub fn from_rows(label: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let label = label.into();
        let d = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: r.len(),
            });
        }
        if rows.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(label));
        }
        let data = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
        Ok(Self { label, data })
    }

    pub fn from_table(label: impl Into<String>, table: &EmbeddingTable) -> Self {
        let data = DMatrix::from_fn(table.len(), table.dim(), |i, j| {
            f64::from(table.as_slice()[i * table.dim() + j])
        });
        Self {
            label: label.into(),
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Stacks two sets with the same dimension.
    pub fn concat(&self, other: &FeatureSet, label: impl Into<String>) -> Result<FeatureSet> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        let (n1, n2, d) = (self.len(), other.len(), self.dim());
        let data = DMatrix::from_fn(n1 + n2, d, |i, j| {
            if i < n1 {
                self.data[(i, j)]
            } else {
                other.data[(i - n1, j)]
            }
        });
        Ok(FeatureSet {
            label: label.into(),
            data,
        })
    }
}

/// Mean and covariance of a feature distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianMoments {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                found: cov.nrows(),
            });
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased (`n - 1`) covariance.
pub fn moments(features: &FeatureSet) -> Result<GaussianMoments> {
    let n = features.len();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let mean = features.data.row_mean().transpose();
    let mut centered = features.data.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok(GaussianMoments { mean, cov })
}

/// Fréchet distance between two Gaussians and whether regularization was needed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrechetDistance {
    pub value: f64,
    pub regularized: bool,
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    SymmetricEigen::try_new(m, f64::EPSILON, EIG_MAX_ITER).ok_or(Error::EigDecompositionFailure)
}

/// Eigenvalues only; skips accumulating eigenvectors. Inputs are finite and
/// symmetric, for which the QR iteration converges.
fn eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    m.symmetric_eigenvalues()
}

fn is_singular(eigenvalues: &DVector<f64>) -> bool {
    let max = eigenvalues.max();
    let min = eigenvalues.min();
    max <= 0.0 || min <= SINGULAR_RTOL * max
}

/// Square root of a symmetric PSD matrix; negative eigenvalues clamp to 0.
fn psd_sqrt(eig: &SymmetricEigen<f64, nalgebra::Dyn>) -> DMatrix<f64> {
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu1 - mu2|^2 + tr(S1) + tr(S2) - 2 tr((S1^1/2 S2 S1^1/2)^1/2)`, clamped at 0.
pub fn frechet_distance(a: &GaussianMoments, b: &GaussianMoments) -> Result<FrechetDistance> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let finite = |g: &GaussianMoments| g.mean.iter().chain(g.cov.iter()).all(|x| x.is_finite());
    if !finite(a) || !finite(b) {
        return Err(Error::NonFinite("moments".into()));
    }
    let mut s1 = symmetrize(&a.cov);
    let mut s2 = symmetrize(&b.cov);
    let mut e1 = eigen(s1.clone())?;
    let regularized = is_singular(&e1.eigenvalues) || is_singular(&eigenvalues(&s2));
    if regularized {
        let eye = DMatrix::<f64>::identity(a.dim(), a.dim()) * COVARIANCE_EPS;
        s1 += &eye;
        s2 += &eye;
        e1 = eigen(s1.clone())?;
    }
    let s1_half = psd_sqrt(&e1);
    let inner = symmetrize(&(&s1_half * &s2 * &s1_half));
    let tr_cross: f64 = eigenvalues(&inner).iter().map(|l| l.max(0.0).sqrt()).sum();
    let diff = &a.mean - &b.mean;
    let value = diff.norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_cross;
    Ok(FrechetDistance {
        value: value.max(0.0),
        regularized,
    })
}

/// Relative base-class change in percent. Positive means the metric got worse.
pub fn forgetting(before: f64, after: f64, direction: Direction) -> Result<f64> {
    if before == 0.0 {
        return Err(Error::DivisionByZero);
    }
    Ok(match direction {
        Direction::HigherBetter => 100.0 * (before - after) / before,
        Direction::LowerBetter => 100.0 * (after - before) / before,
    })
}

/// Inputs for one side (base or novel) of a report row.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitScores {
    /// Per-asset scores (e.g. CLIP), already on the reporting scale.
    PerAsset(Vec<f64>),
    /// Generated vs. reference features for a Fréchet distance.
    Features {
        generated: FeatureSet,
        reference: FeatureSet,
    },
}

fn mean(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::InvalidParams("no per-asset scores".into()));
    }
    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Builds one report row. `all` pools base and novel: the mean over all
/// per-asset scores, or the FD between pooled generated and pooled
/// reference features.
pub fn assemble_report(
    metric: &str,
    direction: Direction,
    base: &SplitScores,
    novel: &SplitScores,
    base_before: Option<f64>,
) -> Result<MetricReport> {
    let (base_value, novel_value, all, all_definition, regularized) = match (base, novel) {
        (SplitScores::PerAsset(b), SplitScores::PerAsset(n)) => {
            let pooled: Vec<f64> = b.iter().chain(n).copied().collect();
            (
                mean(b)?,
                mean(n)?,
                mean(&pooled)?,
                "mean of pooled per-asset scores",
                false,
            )
        }
        (
            SplitScores::Features {
                generated: gb,
                reference: rb,
            },
            SplitScores::Features {
                generated: gn,
                reference: rn,
            },
        ) => {
            let fd_base = frechet_distance(&moments(gb)?, &moments(rb)?)?;
            let fd_novel = frechet_distance(&moments(gn)?, &moments(rn)?)?;
            let gen_all = gb.concat(gn, "generated-all")?;
            let ref_all = rb.concat(rn, "reference-all")?;
            let fd_all = frechet_distance(&moments(&gen_all)?, &moments(&ref_all)?)?;
            (
                fd_base.value,
                fd_novel.value,
                fd_all.value,
                "distance between pooled generated and pooled reference features",
                fd_base.regularized || fd_novel.regularized || fd_all.regularized,
            )
        }
        _ => {
            return Err(Error::InvalidParams(format!(
                "metric `{metric}` mixes per-asset scores and features"
            )))
        }
    };
    let forgetting_pct = base_before
        .map(|before| forgetting(before, base_value, direction))
        .transpose()?;
    Ok(MetricReport {
        metric: metric.to_string(),
        direction,
        base: base_value,
        novel: novel_value,
        all,
        base_before,
        forgetting_pct,
        all_definition: all_definition.to_string(),
        regularized,
    })
}

/// Aligned plain-text table with one row per metric: base, novel, all, F (%).
pub fn render_table(reports: &[MetricReport]) -> String {
    let name_w = reports
        .iter()
        .map(|r| r.metric.len())
        .max()
        .unwrap_or(0)
        .max(6);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<name_w$}  {:>4}  {:>10}  {:>10}  {:>10}  {:>8}",
        "metric", "dir", "base", "novel", "all", "F (%)"
    );
    for r in reports {
        let dir = match r.direction {
            Direction::HigherBetter => "up",
            Direction::LowerBetter => "down",
        };
        let f = r
            .forgetting_pct
            .map_or_else(|| "-".to_string(), |f| format!("{f:.2}"));
        let _ = writeln!(
            out,
            "{:<name_w$}  {:>4}  {:>10.2}  {:>10.2}  {:>10.2}  {:>8}",
            r.metric, dir, r.base, r.novel, r.all, f
        );
    }
    out
}
