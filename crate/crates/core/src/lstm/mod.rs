//! Autoregressive LSTM predicting `(x_{t+1}, y_t)` from `x_{1:t}`,
//! `y_{1:t-1}` and the static features.

mod train;

use rand::{Rng, RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::dataset::{NormalizationStats, SequenceBatch, NUM_INTERVALS, NUM_VISITS, SCORE_DIM, STATIC_DIM};
use crate::error::{Error, Result};
use crate::nn::loss::{bce_logits_tape, column_variance};
use crate::nn::tape::sigmoid;
use crate::nn::{grad_check, Bound, Dropout, GradCheckReport, LstmStack, Matrix, ParamStore, Tape, Var};
use crate::nn::layers::Linear;
use crate::trajectory::{
    check_step, ActionMode, AdherenceStep, OneStepPrediction, PredictionTrajectory, Provenance, ScoreStep,
    SequenceModel, DEFAULT_THRESHOLD,
};

pub use train::{fit, train_step, LstmEpoch, LstmHistory, LstmStepMetrics, LstmTrainConfig};

/// Label fed as `y_0`: treatment is ongoing at enrollment.
pub const INITIAL_LABEL: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmArch {
    pub static_dim: usize,
    pub score_dim: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl Default for LstmArch {
    fn default() -> Self {
        Self {
            static_dim: STATIC_DIM,
            score_dim: SCORE_DIM,
            hidden: 128,
            layers: 2,
        }
    }
}

impl LstmArch {
    /// `x_t`, `y_{t-1}` and `s` side by side.
    pub fn input_dim(&self) -> usize {
        self.score_dim + 1 + self.static_dim
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Nets {
    stack: LstmStack,
    score: Linear,
    adherence: Linear,
}

impl Nets {
    fn new<R: Rng + ?Sized>(arch: &LstmArch, store: &mut ParamStore, rng: &mut R) -> Self {
        Self {
            stack: LstmStack::new(store, "lstm", arch.input_dim(), arch.hidden, arch.layers, rng),
            score: Linear::new(store, "score_head", arch.hidden, arch.score_dim, rng),
            adherence: Linear::new(store, "adherence_head", arch.hidden, 1, rng),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Lstm {
    pub arch: LstmArch,
    pub params: ParamStore,
    pub stats: NormalizationStats,
    pub threshold: f64,
    /// Per-dim variance of the normalized training targets, the NMSE divisor.
    pub target_variance: Vec<f64>,
    nets: Nets,
}

/// Normalized outputs for steps `1..=t`: score predictions for visits
/// `2..=t+1` and adherence logits for intervals `1..=t`.
struct Unrolled {
    scores: Vec<Var>,
    logits: Vec<Var>,
}

/// Per-dim variance of the next-visit targets over all observed visits `2..=6`.
pub fn target_variance(batch: &SequenceBatch) -> Vec<f64> {
    let rows: Vec<usize> = (0..batch.len()).collect();
    let mut stacked = Vec::new();
    let mut valid = Vec::new();
    for t in 1..NUM_VISITS {
        for &b in &rows {
            stacked.extend(batch.x[t].row(b).iter().copied());
            valid.push(batch.obs[[b, t]] == 1.0);
        }
    }
    let d = batch.x[0].ncols();
    let m = Matrix::from_shape_vec((valid.len(), d), stacked).expect("stacked targets");
    column_variance(&m, &valid, crate::dataset::STD_EPSILON)
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(arch: LstmArch, stats: NormalizationStats, rng: &mut R) -> Result<Self> {
        if stats.static_dim() != arch.static_dim || stats.score_dim() != arch.score_dim {
            return Err(Error::DimensionMismatch {
                context: "lstm normalization stats",
                expected: arch.static_dim + arch.score_dim,
                actual: stats.static_dim() + stats.score_dim(),
            });
        }
        let mut params = ParamStore::new();
        let nets = Nets::new(&arch, &mut params, rng);
        let target_variance = vec![1.0; arch.score_dim];
        Ok(Self {
            arch,
            params,
            stats,
            threshold: DEFAULT_THRESHOLD,
            target_variance,
            nets,
        })
    }

    pub fn from_parts(
        arch: LstmArch,
        stats: NormalizationStats,
        params: ParamStore,
        threshold: f64,
        target_variance: Vec<f64>,
    ) -> Result<Self> {
        let mut template = Self::new(arch, stats, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        if template.params.shapes() != params.shapes() {
            return Err(Error::Artifact("parameter layout does not match the architecture".into()));
        }
        if target_variance.len() != template.arch.score_dim || target_variance.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Artifact("target variance must be positive per score dim".into()));
        }
        template.params = params;
        template.threshold = threshold;
        template.target_variance = target_variance;
        Ok(template)
    }

    fn check_batch(&self, batch: &SequenceBatch) -> Result<()> {
        let n = batch.len();
        let checks = [
            ("batch static dims", self.arch.static_dim, batch.s.ncols()),
            ("batch visits", NUM_VISITS, batch.x.len()),
            ("batch label rows", n, batch.y.nrows()),
            ("batch label steps", NUM_INTERVALS, batch.y.ncols()),
        ];
        for (context, expected, actual) in checks {
            if expected != actual {
                return Err(Error::DimensionMismatch {
                    context,
                    expected,
                    actual,
                });
            }
        }
        if let Some(x) = batch.x.iter().find(|x| x.ncols() != self.arch.score_dim || x.nrows() != n) {
            return Err(Error::DimensionMismatch {
                context: "batch score dims",
                expected: self.arch.score_dim,
                actual: x.ncols(),
            });
        }
        Ok(())
    }

    /// Runs one recurrent step on `[x, y_prev, s]`; returns the normalized
    /// score prediction, the adherence logit and the next state.
    fn step(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        y_prev: Var,
        s: Var,
        state: &crate::nn::LstmState,
        dropout: &mut Dropout<'_>,
    ) -> Result<(Var, Var, crate::nn::LstmState)> {
        let input = tape.concat(&[x, y_prev, s]);
        let (h, next) = self.nets.stack.step(tape, p, input, state, dropout)?;
        let score = self.nets.score.forward(tape, p, h);
        let logit = self.nets.adherence.forward(tape, p, h);
        Ok((score, logit, next))
    }

    /// Teacher-forced unroll through step `t` using observed scores and labels.
    fn unroll(&self, tape: &mut Tape, p: &Bound, batch: &SequenceBatch, t: usize, dropout: &mut Dropout<'_>) -> Result<Unrolled> {
        let rows = batch.len();
        let s = tape.leaf(batch.s.clone());
        let mut state = self.nets.stack.zero_state(tape, rows);
        let mut out = Unrolled {
            scores: Vec::with_capacity(t),
            logits: Vec::with_capacity(t),
        };
        for u in 0..t {
            let x = tape.leaf(batch.x[u].clone());
            let y_prev = if u == 0 {
                Matrix::from_elem((rows, 1), INITIAL_LABEL)
            } else {
                label_column(&batch.y, u - 1)
            };
            let y_prev = tape.leaf(y_prev);
            let (score, logit, next) = self.step(tape, p, x, y_prev, s, &state, dropout)?;
            out.scores.push(score);
            out.logits.push(logit);
            state = next;
        }
        Ok(out)
    }

    /// Summed NMSE and BCE over the batch on a tape.
    pub(crate) fn loss_tape(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &SequenceBatch,
        dropout: &mut Dropout<'_>,
    ) -> Result<(Var, Var)> {
        self.check_batch(batch)?;
        let out = self.unroll(tape, p, batch, NUM_INTERVALS, dropout)?;
        let d = self.arch.score_dim;
        let mut nmse_terms = Vec::with_capacity(NUM_INTERVALS);
        let mut bce_terms = Vec::with_capacity(NUM_INTERVALS);
        for u in 0..NUM_INTERVALS {
            let target = tape.leaf(batch.x[u + 1].clone());
            let diff = tape.sub(out.scores[u], target);
            let sq = tape.square(diff);
            let weights = Matrix::from_shape_fn((batch.len(), d), |(b, k)| {
                batch.obs[[b, u + 1]] / (self.target_variance[k] * d as f64)
            });
            let weighted = tape.mul_const(sq, weights);
            nmse_terms.push(tape.sum_all(weighted));
            let bce = bce_logits_tape(tape, out.logits[u], &label_column(&batch.y, u));
            bce_terms.push(tape.sum_all(bce));
        }
        let sum = |tape: &mut Tape, terms: &[Var]| terms[1..].iter().fold(terms[0], |acc, &v| tape.add(acc, v));
        Ok((sum(tape, &nmse_terms), sum(tape, &bce_terms)))
    }

    /// Finite-difference check of the summed NMSE and BCE.
    pub fn check_gradients(&self, batch: &SequenceBatch, tolerance: f64) -> Result<GradCheckReport> {
        self.check_batch(batch)?;
        Ok(grad_check(
            |params: &ParamStore| {
                let mut m = self.clone();
                m.params = params.clone();
                let mut tape = Tape::new();
                let p = m.params.bind(&mut tape);
                let (a, b) = m.loss_tape(&mut tape, &p, batch, &mut Dropout::Off).expect("batch checked above");
                let total = tape.add(a, b);
                let grads = tape.backward(total);
                (tape.scalar(total), m.params.collect_grads(&p, &grads))
            },
            &self.params,
            tolerance,
            None,
        ))
    }

    /// Per-patient NMSE and BCE, summed over steps, without dropout.
    pub fn loss_terms(&self, batch: &SequenceBatch) -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let (nmse, bce) = self.loss_tape(&mut tape, &p, batch, &mut Dropout::Off)?;
        let n = batch.len() as f64;
        Ok((tape.scalar(nmse) / n, tape.scalar(bce) / n))
    }

    /// Deterministic one-step prediction at step `t`: `x_{t+1}` in raw
    /// units and `P(y_t = 1)`.
    pub fn forward(&self, batch: &SequenceBatch, t: usize) -> Result<Vec<OneStepPrediction>> {
        check_step(t)?;
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let out = self.unroll(&mut tape, &p, batch, t, &mut Dropout::Off)?;
        let mean = self.stats.denormalize_scores(tape.value(out.scores[t - 1]))?;
        let logits = tape.value(out.logits[t - 1]);
        Ok((0..batch.len())
            .map(|b| OneStepPrediction {
                id: batch.ids[b].clone(),
                step: t,
                score_mean: mean.row(b).to_vec(),
                score_std: vec![0.0; self.arch.score_dim],
                adherence_prob: sigmoid(logits[[b, 0]]),
            })
            .collect())
    }

    /// Teacher-forced through step `t`, then feeds back its own score
    /// predictions and binarized labels; a fed-back 0 stays 0.
    pub fn rollout_autoregressive(&self, batch: &SequenceBatch, t: usize) -> Result<Vec<PredictionTrajectory>> {
        check_step(t)?;
        self.check_batch(batch)?;
        let rows = batch.len();
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let s = tape.leaf(batch.s.clone());
        let mut state = self.nets.stack.zero_state(&mut tape, rows);
        let mut alive = vec![INITIAL_LABEL; rows];
        let mut x = tape.leaf(batch.x[0].clone());
        let mut trajectories: Vec<PredictionTrajectory> = batch
            .ids
            .iter()
            .map(|id| PredictionTrajectory {
                id: id.clone(),
                start: t,
                samples: 1,
                scores: Vec::new(),
                adherence: Vec::new(),
            })
            .collect();

        for u in 0..NUM_INTERVALS {
            let y_prev = Matrix::from_shape_fn((rows, 1), |(b, _)| {
                if u == 0 {
                    INITIAL_LABEL
                } else if u < t {
                    batch.y[[b, u - 1]]
                } else {
                    alive[b]
                }
            });
            let y_prev = tape.leaf(y_prev);
            let (score, logit, next) = self.step(&mut tape, &p, x, y_prev, s, &state, &mut Dropout::Off)?;
            state = next;
            if u + 1 < t {
                x = tape.leaf(batch.x[u + 1].clone());
                continue;
            }
            if u + 1 == t {
                // The observed history fixes the starting status.
                for (b, a) in alive.iter_mut().enumerate() {
                    *a = (0..u).map(|k| batch.y[[b, k]]).fold(INITIAL_LABEL, f64::min);
                }
            }
            let probs: Vec<f64> = tape.value(logit).iter().map(|&l| sigmoid(l)).collect();
            for (b, a) in alive.iter_mut().enumerate() {
                *a = if *a == 1.0 && probs[b] >= self.threshold { 1.0 } else { 0.0 };
            }
            let mean = self.stats.denormalize_scores(tape.value(score))?;
            let provenance = if u + 1 == t { Provenance::Filtered } else { Provenance::Autoregressive };
            for (b, traj) in trajectories.iter_mut().enumerate() {
                traj.adherence.push(AdherenceStep {
                    interval: u,
                    prob: probs[b],
                    continued: alive[b],
                    provenance,
                });
                traj.scores.push(ScoreStep {
                    visit: u + 1,
                    mean: mean.row(b).to_vec(),
                    std: vec![0.0; self.arch.score_dim],
                    samples: None,
                    provenance: Provenance::Autoregressive,
                });
            }
            x = score;
        }
        Ok(trajectories)
    }
}

fn label_column(y: &Matrix, u: usize) -> Matrix {
    y.column(u).to_owned().insert_axis(ndarray::Axis(1))
}

impl SequenceModel for Lstm {
    fn kind(&self) -> &'static str {
        "lstm"
    }

    fn stats(&self) -> &NormalizationStats {
        &self.stats
    }

    fn threshold(&self) -> f64 {
        self.threshold
    }

    fn predict_one_step(
        &self,
        batch: &SequenceBatch,
        t: usize,
        _samples: usize,
        _rng: &mut dyn RngCore,
    ) -> Result<Vec<OneStepPrediction>> {
        self.forward(batch, t)
    }

    fn rollout(
        &self,
        batch: &SequenceBatch,
        t: usize,
        mode: &ActionMode,
        _samples: usize,
        _rng: &mut dyn RngCore,
    ) -> Result<Vec<PredictionTrajectory>> {
        match mode {
            ActionMode::Inferred => self.rollout_autoregressive(batch, t),
            ActionMode::Fixed(_) => Err(Error::InvalidArgument(
                "the lstm has no action input; only inferred rollouts are available".into(),
            )),
        }
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    pub fn tiny_lstm(static_dim: usize, score_dim: usize, seed: u64) -> Lstm {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Lstm::new(
            LstmArch {
                static_dim,
                score_dim,
                hidden: 8,
                layers: 1,
            },
            NormalizationStats::identity_with_dims(static_dim, score_dim),
            &mut rng,
        )
        .unwrap()
    }
}
