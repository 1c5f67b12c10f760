//! Integrated-gradients importance of the static features for the latent
//! model's adherence output.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{SequenceBatch, NUM_INTERVALS};
use crate::error::{Error, Result};
use crate::eval::mean_std;
use crate::nn::{Matrix, NoiseSource, Tape};
use crate::slvm::Slvm;
use crate::trajectory::replicate_rows;

pub const DEFAULT_PATH_STEPS: usize = 64;
pub const MIN_PATH_STEPS: usize = 8;
/// Frozen noise replicas averaged inside the target.
pub const DEFAULT_NOISE_SAMPLES: usize = 8;

/// Scalar output being explained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "step")]
pub enum Target {
    /// Mean of `P(y_t = 1)` over `t = 1..=5`.
    MeanAdherence,
    /// `P(y_t = 1)` at one-based step `t`.
    Adherence(usize),
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::MeanAdherence => f.write_str("mean_adherence"),
            Target::Adherence(t) => write!(f, "adherence_{t}"),
        }
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "mean_adherence" {
            return Ok(Target::MeanAdherence);
        }
        s.strip_prefix("adherence_")
            .and_then(|t| t.parse().ok())
            .map(Target::Adherence)
            .filter(|t| t.check().is_ok())
            .ok_or_else(|| Error::UnknownTarget(s.to_string()))
    }
}

impl Target {
    fn check(self) -> Result<()> {
        match self {
            Target::Adherence(t) if !(1..=NUM_INTERVALS).contains(&t) => Err(Error::UnknownTarget(self.to_string())),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionConfig {
    pub target: Target,
    pub path_steps: usize,
    pub noise_samples: usize,
    pub seed: u64,
    /// Path points evaluated per tape, bounding memory.
    pub chunk: usize,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            target: Target::MeanAdherence,
            path_steps: DEFAULT_PATH_STEPS,
            noise_samples: DEFAULT_NOISE_SAMPLES,
            seed: 0,
            chunk: 32,
        }
    }
}

/// Attributions in normalized feature units for one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub id: String,
    pub target: Target,
    pub attributions: Vec<f64>,
    pub input: Vec<f64>,
    pub baseline: Vec<f64>,
    pub path_steps: usize,
    pub f_input: f64,
    pub f_baseline: f64,
    /// `|sum(attributions) - (f_input - f_baseline)|`.
    pub residual: f64,
}

/// The same `base x cols` draws for every call index, tiled over however
/// many path points the call covers.
struct FrozenNoise {
    rng: ChaCha8Rng,
    base: usize,
    draws: Vec<Matrix>,
    cursor: usize,
}

impl FrozenNoise {
    fn new(seed: u64, base: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            base,
            draws: Vec::new(),
            cursor: 0,
        }
    }

    fn rewind(&mut self) {
        self.cursor = 0;
    }
}

impl NoiseSource for FrozenNoise {
    fn standard_normal(&mut self, rows: usize, cols: usize) -> Matrix {
        assert_eq!(rows % self.base, 0, "frozen noise rows must be a multiple of the replica count");
        if self.cursor == self.draws.len() {
            let rng = &mut self.rng;
            let draw = Matrix::from_shape_simple_fn((self.base, cols), || rand::Rng::sample(rng, StandardNormal));
            self.draws.push(draw);
        }
        let draw = &self.draws[self.cursor];
        assert_eq!(draw.ncols(), cols, "frozen noise width changed between evaluations");
        self.cursor += 1;
        Matrix::from_shape_fn((rows, cols), |(r, c)| draw[[r % self.base, c]])
    }
}

/// Integrated gradients of a batched scalar function by the midpoint rule.
///
/// `f` maps `n x S` inputs to `n` values and their `n x S` input gradients.
/// Returns the attributions and `f` at the input and the baseline, all three
/// from the same evaluations.
pub fn integrated_gradients_with<F>(mut f: F, x: &[f64], baseline: &[f64], m: usize, chunk: usize) -> Result<(Vec<f64>, f64, f64)>
where
    F: FnMut(&Matrix) -> Result<(Vec<f64>, Matrix)>,
{
    if x.len() != baseline.len() {
        return Err(Error::DimensionMismatch {
            context: "attribution baseline",
            expected: x.len(),
            actual: baseline.len(),
        });
    }
    if m < MIN_PATH_STEPS {
        return Err(Error::InvalidArgument(format!("need at least {MIN_PATH_STEPS} path steps, got {m}")));
    }
    let dims = x.len();
    // Path midpoints, then the two endpoints.
    let alphas: Vec<f64> = (0..m).map(|k| (k as f64 + 0.5) / m as f64).chain([1.0, 0.0]).collect();
    let mut grad_sum = vec![0.0; dims];
    let mut ends = [0.0; 2];
    for (c, block) in alphas.chunks(chunk.max(1)).enumerate() {
        let inputs = Matrix::from_shape_fn((block.len(), dims), |(r, i)| baseline[i] + block[r] * (x[i] - baseline[i]));
        let (values, grads) = f(&inputs)?;
        for (r, _) in block.iter().enumerate() {
            let idx = c * chunk.max(1) + r;
            if idx < m {
                for (i, g) in grad_sum.iter_mut().enumerate() {
                    *g += grads[[r, i]];
                }
            } else {
                ends[idx - m] = values[r];
            }
        }
    }
    let ig = (0..dims).map(|i| (x[i] - baseline[i]) * grad_sum[i] / m as f64).collect();
    Ok((ig, ends[0], ends[1]))
}

/// Attributes `config.target` to the normalized static features of every
/// patient in `batch`. `baseline` defaults to zeros, the training mean.
pub fn integrated_gradients(
    model: &Slvm,
    batch: &SequenceBatch,
    baseline: Option<&[f64]>,
    config: &AttributionConfig,
) -> Result<Vec<AttributionResult>> {
    config.target.check()?;
    let dims = batch.s.ncols();
    let zeros = vec![0.0; dims];
    let baseline = baseline.unwrap_or(&zeros);
    let k = config.noise_samples.max(1);
    let mut out = Vec::with_capacity(batch.len());
    for b in 0..batch.len() {
        let patient = batch.select(&[b]);
        let input = patient.s.row(0).to_vec();
        let mut noise = FrozenNoise::new(config.seed, k);
        let f = |points: &Matrix| -> Result<(Vec<f64>, Matrix)> {
            noise.rewind();
            let n = points.nrows();
            let mut rep = patient.select(&vec![0; n * k]);
            let rows = replicate_rows(n, k);
            rep.s = Matrix::from_shape_fn((n * k, dims), |(r, i)| points[[rows[r], i]]);
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape);
            let s = tape.leaf(rep.s.clone());
            let probs = model.adherence_probs_tape(&mut tape, &p, &rep, s, &mut noise)?;
            let per_row = match config.target {
                Target::MeanAdherence => {
                    let total = probs[1..].iter().fold(probs[0], |acc, &v| tape.add(acc, v));
                    tape.scale(total, 1.0 / probs.len() as f64)
                }
                Target::Adherence(t) => probs[t - 1],
            };
            let root = tape.sum_all(per_row);
            let root = tape.scale(root, 1.0 / k as f64);
            let grads = tape.backward(root);
            let g = grads.get_or_zeros(s, tape.value(s));
            let v = tape.value(per_row);
            let values = (0..n).map(|i| (0..k).map(|j| v[[i * k + j, 0]]).sum::<f64>() / k as f64).collect();
            let point_grads = Matrix::from_shape_fn((n, dims), |(i, c)| (0..k).map(|j| g[[i * k + j, c]]).sum());
            Ok((values, point_grads))
        };
        let (attributions, f_input, f_baseline) =
            integrated_gradients_with(f, &input, baseline, config.path_steps, config.chunk)?;
        let residual = (attributions.iter().sum::<f64>() - (f_input - f_baseline)).abs();
        out.push(AttributionResult {
            id: batch.ids[b].clone(),
            target: config.target,
            attributions,
            input,
            baseline: baseline.to_vec(),
            path_steps: config.path_steps,
            f_input,
            f_baseline,
            residual,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: String,
    pub mean_abs: f64,
    pub mean: f64,
    pub std: f64,
    /// One-based; 1 is the most important.
    pub rank: usize,
}

/// Orders features by mean absolute attribution across patients; ties keep
/// feature order.
pub fn rank_features(results: &[AttributionResult], names: &[String]) -> Result<Vec<FeatureImportance>> {
    if let Some(r) = results.iter().find(|r| r.attributions.len() != names.len()) {
        return Err(Error::DimensionMismatch {
            context: "attribution feature names",
            expected: names.len(),
            actual: r.attributions.len(),
        });
    }
    if results.is_empty() {
        return Ok(Vec::new());
    }
    let mut table: Vec<FeatureImportance> = names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let values: Vec<f64> = results.iter().map(|r| r.attributions[i]).collect();
            let abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
            let (mean, std) = mean_std(&values);
            FeatureImportance {
                feature: name.clone(),
                mean_abs: mean_std(&abs).0,
                mean,
                std,
                rank: 0,
            }
        })
        .collect();
    table.sort_by(|a, b| b.mean_abs.total_cmp(&a.mean_abs));
    for (i, row) in table.iter_mut().enumerate() {
        row.rank = i + 1;
    }
    Ok(table)
}

pub fn write_importance<W: Write>(table: &[FeatureImportance], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["feature", "mean_abs", "mean", "std", "rank"])?;
    for r in table {
        w.write_record([
            r.feature.clone(),
            r.mean_abs.to_string(),
            r.mean.to_string(),
            r.std.to_string(),
            r.rank.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<importance table>", e))?;
    Ok(())
}

/// Mean completeness residual over the batch at each path-step count, and
/// its log-log slope. Single-patient residuals jump around because the
/// integrand has kinks; the batch mean shows the trend.
pub fn completeness_slope(
    model: &Slvm,
    batch: &SequenceBatch,
    steps: &[usize],
    config: &AttributionConfig,
) -> Result<(Vec<f64>, f64)> {
    let mut residuals = Vec::with_capacity(steps.len());
    for &m in steps {
        let c = AttributionConfig {
            path_steps: m,
            ..config.clone()
        };
        let results = integrated_gradients(model, batch, None, &c)?;
        residuals.push(results.iter().map(|r| r.residual).sum::<f64>() / results.len().max(1) as f64);
    }
    let slope = log_log_slope(steps, &residuals);
    Ok((residuals, slope))
}

/// Least-squares slope of `ln(residual)` against `ln(m)`.
pub fn log_log_slope(steps: &[usize], residuals: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = steps
        .iter()
        .zip(residuals)
        .map(|(&m, &r)| ((m as f64).ln(), r.max(f64::MIN_POSITIVE).ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>();
    let sxx = pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    sxy / sxx
}
