//! Two-level sequential latent variable model with constrained ELBO training.
//!
//! Inference: `z1_1 ~ q(.|x_1, s)`, `z2_1 ~ p(.|z1_1)`, then
//! `z1_{t+1} ~ q(.|x_{t+1}, z2_t, a_t)` and `z2_{t+1} ~ p(.|z1_{t+1}, z2_t, a_t)`.
//! Generation replaces the first-level posteriors with `p(z1_1) = N(0, I)`
//! and `p(z1_{t+1}|z2_t, a_t)`; the second level is shared. Scores and
//! adherence are read from `(z1_t, z2_t)`.

mod predict;
mod train;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::dataset::{NormalizationStats, SequenceBatch, NUM_INTERVALS, NUM_VISITS, SCORE_DIM, STATIC_DIM};
use crate::error::{Error, Result};
use crate::nn::loss::{bce_logits_tape, gaussian_nll_tape, kl_diag_tape, kl_standard_normal_tape};
use crate::nn::{
    grad_check, reparam, Bound, Dropout, GaussianNet, GradCheckReport, LogitNet, Matrix, NoiseSource, ParamStore,
    RecordingNoise, RngNoise, Tape, Var,
};
use crate::trajectory::DEFAULT_THRESHOLD;

pub use predict::{Scenario, ScenarioOutcome, SimulationOutcome};
pub use train::{
    default_targets, fit, train_step, EpochRecord, LagrangeConfig, LagrangeState, MultiplierMode,
    SlvmTrainConfig, StepMetrics, TrainingHistory,
};

/// Layer sizes of every network in the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlvmArch {
    pub static_dim: usize,
    pub score_dim: usize,
    pub latent1: usize,
    pub latent2: usize,
    pub hidden: Vec<usize>,
}

impl Default for SlvmArch {
    fn default() -> Self {
        Self {
            static_dim: STATIC_DIM,
            score_dim: SCORE_DIM,
            latent1: 32,
            latent2: 32,
            hidden: vec![128; 5],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Nets {
    q1_init: GaussianNet,
    q1_trans: GaussianNet,
    p1_trans: GaussianNet,
    p2_init: GaussianNet,
    /// Used by both inference and generation.
    p2_trans: GaussianNet,
    decoder: GaussianNet,
    adherence: LogitNet,
}

impl Nets {
    fn new<R: Rng + ?Sized>(arch: &SlvmArch, store: &mut ParamStore, rng: &mut R) -> Self {
        let SlvmArch {
            static_dim: s,
            score_dim: d,
            latent1: l1,
            latent2: l2,
            ref hidden,
        } = *arch;
        Self {
            q1_init: GaussianNet::new(store, "q1_init", d + s, hidden, l1, rng),
            q1_trans: GaussianNet::new(store, "q1_trans", d + l2 + 1, hidden, l1, rng),
            p1_trans: GaussianNet::new(store, "p1_trans", l2 + 1, hidden, l1, rng),
            p2_init: GaussianNet::new(store, "p2_init", l1, hidden, l2, rng),
            p2_trans: GaussianNet::new(store, "p2_trans", l1 + l2 + 1, hidden, l2, rng),
            decoder: GaussianNet::new(store, "decoder", l1 + l2, hidden, d, rng),
            adherence: LogitNet::new(store, "adherence", l1 + l2, hidden, rng),
        }
    }
}

/// A trained (or freshly initialized) model with the normalization it expects.
#[derive(Debug, Clone)]
pub struct Slvm {
    pub arch: SlvmArch,
    pub params: ParamStore,
    pub stats: NormalizationStats,
    pub threshold: f64,
    nets: Nets,
}

/// Latent sample and distribution parameters at one visit, `rows x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    /// Zero-based visit index.
    pub visit: usize,
    pub z1: Matrix,
    pub z1_mean: Matrix,
    pub z1_std: Matrix,
    pub z2: Matrix,
    pub z2_mean: Matrix,
    pub z2_std: Matrix,
}

/// Per-patient averages of the three training terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub kl: f64,
    pub score_nll: f64,
    pub adherence_nll: f64,
}

impl ElboTerms {
    /// `-(score_nll + kl)`, the evidence lower bound on the score likelihood.
    pub fn elbo(&self) -> f64 {
        -(self.score_nll + self.kl)
    }
}

#[derive(Clone, Copy)]
struct StepVars {
    z1: Var,
    z1_mean: Var,
    z1_std: Var,
    z2: Var,
    z2_mean: Var,
    z2_std: Var,
}

/// Filtered step plus its masked per-row KL (`rows x 1`).
struct FilterStep {
    vars: StepVars,
    kl: Var,
}

/// Tape-level sums over the batch, before averaging.
pub(crate) struct LossVars {
    pub kl: Var,
    pub score_nll: Var,
    pub adherence_nll: Var,
}

fn column(m: &Matrix, t: usize) -> Matrix {
    m.column(t).to_owned().insert_axis(ndarray::Axis(1))
}

impl Slvm {
    pub fn new<R: Rng + ?Sized>(arch: SlvmArch, stats: NormalizationStats, rng: &mut R) -> Result<Self> {
        if stats.static_dim() != arch.static_dim || stats.score_dim() != arch.score_dim {
            return Err(Error::DimensionMismatch {
                context: "slvm normalization stats",
                expected: arch.static_dim + arch.score_dim,
                actual: stats.static_dim() + stats.score_dim(),
            });
        }
        let mut params = ParamStore::new();
        let nets = Nets::new(&arch, &mut params, rng);
        Ok(Self {
            arch,
            params,
            stats,
            threshold: DEFAULT_THRESHOLD,
            nets,
        })
    }

    /// Rebuilds a model around stored parameters, checking every shape.
    pub fn from_parts(arch: SlvmArch, stats: NormalizationStats, params: ParamStore, threshold: f64) -> Result<Self> {
        let mut template = Self::new(arch, stats, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        if template.params.shapes() != params.shapes() {
            return Err(Error::Artifact("parameter layout does not match the architecture".into()));
        }
        template.params = params;
        template.threshold = threshold;
        Ok(template)
    }

    fn check_batch(&self, batch: &SequenceBatch) -> Result<()> {
        let n = batch.len();
        let checks = [
            ("batch static dims", self.arch.static_dim, batch.s.ncols()),
            ("batch visits", NUM_VISITS, batch.x.len()),
            ("batch obs rows", n, batch.obs.nrows()),
            ("batch action rows", n, batch.a.nrows()),
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

    fn sample_z2(
        &self,
        tape: &mut Tape,
        p: &Bound,
        input: Var,
        initial: bool,
        noise: &mut dyn NoiseSource,
        dropout: &mut Dropout<'_>,
    ) -> Result<(Var, Var, Var)> {
        let net = if initial { &self.nets.p2_init } else { &self.nets.p2_trans };
        let (mean, std) = net.forward(tape, p, input, dropout)?;
        let z = reparam(tape, mean, std, noise);
        Ok((z, mean, std))
    }

    /// Second-level transition `p(z2_{t+1} | z1_{t+1}, z2_t, a_t)`.
    fn z2_transition(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z1: Var,
        z2_prev: Var,
        action: Var,
        noise: &mut dyn NoiseSource,
        dropout: &mut Dropout<'_>,
    ) -> Result<(Var, Var, Var)> {
        let input = tape.concat(&[z1, z2_prev, action]);
        self.sample_z2(tape, p, input, false, noise, dropout)
    }

    /// Runs the inference chain over visits `0..=last`. Visits whose
    /// observation mask is zero fall back to the prior and contribute no KL.
    fn filter_tape(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &SequenceBatch,
        last: usize,
        noise: &mut dyn NoiseSource,
        dropout: &mut Dropout<'_>,
    ) -> Result<Vec<FilterStep>> {
        let s = tape.leaf(batch.s.clone());
        self.filter_tape_with_static(tape, p, batch, s, last, noise, dropout)
    }

    /// As `filter_tape`, reading static features from the tape variable `s`.
    #[allow(clippy::too_many_arguments)]
    fn filter_tape_with_static(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &SequenceBatch,
        s: Var,
        last: usize,
        noise: &mut dyn NoiseSource,
        dropout: &mut Dropout<'_>,
    ) -> Result<Vec<FilterStep>> {
        let rows = batch.len();
        let mut steps: Vec<FilterStep> = Vec::with_capacity(last + 1);

        let x0 = tape.leaf(batch.x[0].clone());
        let input = tape.concat(&[x0, s]);
        let (qm, qs) = self.nets.q1_init.forward(tape, p, input, dropout)?;
        let z1 = reparam(tape, qm, qs, noise);
        let kl = kl_standard_normal_tape(tape, qm, qs);
        let kl = tape.sum_cols(kl);
        let kl = tape.mul_const(kl, column(&batch.obs, 0));
        let (z2, z2m, z2s) = self.sample_z2(tape, p, z1, true, noise, dropout)?;
        steps.push(FilterStep {
            vars: StepVars {
                z1,
                z1_mean: qm,
                z1_std: qs,
                z2,
                z2_mean: z2m,
                z2_std: z2s,
            },
            kl,
        });

        for t in 0..last {
            let prev = steps[t].vars;
            let a = tape.leaf(column(&batch.a, t));
            let obs = column(&batch.obs, t + 1);
            let prior_in = tape.concat(&[prev.z2, a]);
            let (pm, ps) = self.nets.p1_trans.forward(tape, p, prior_in, dropout)?;
            let x = tape.leaf(batch.x[t + 1].clone());
            let post_in = tape.concat(&[x, prev.z2, a]);
            let (qm, qs) = self.nets.q1_trans.forward(tape, p, post_in, dropout)?;

            let kl = kl_diag_tape(tape, qm, qs, pm, ps);
            let kl = tape.sum_cols(kl);
            let kl = tape.mul_const(kl, obs.clone());

            let (mean, std) = if obs.iter().all(|&o| o == 1.0) {
                (qm, qs)
            } else {
                let hidden = obs.mapv(|o| 1.0 - o);
                let m_post = tape.mul_const(qm, obs.clone());
                let m_prior = tape.mul_const(pm, hidden.clone());
                let s_post = tape.mul_const(qs, obs);
                let s_prior = tape.mul_const(ps, hidden);
                (tape.add(m_post, m_prior), tape.add(s_post, s_prior))
            };
            let z1 = reparam(tape, mean, std, noise);
            let (z2, z2m, z2s) = self.z2_transition(tape, p, z1, prev.z2, a, noise, dropout)?;
            steps.push(FilterStep {
                vars: StepVars {
                    z1,
                    z1_mean: mean,
                    z1_std: std,
                    z2,
                    z2_mean: z2m,
                    z2_std: z2s,
                },
                kl,
            });
        }
        debug_assert_eq!(steps.len(), last + 1);
        debug_assert!(steps.iter().all(|s| tape.value(s.kl).nrows() == rows));
        Ok(steps)
    }

    fn latent(&self, tape: &mut Tape, z1: Var, z2: Var) -> Var {
        tape.concat(&[z1, z2])
    }

    /// Summed KL, score NLL and adherence NLL over the batch.
    pub(crate) fn loss_tape(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &SequenceBatch,
        noise: &mut dyn NoiseSource,
        dropout: &mut Dropout<'_>,
    ) -> Result<LossVars> {
        self.check_batch(batch)?;
        let steps = self.filter_tape(tape, p, batch, NUM_VISITS - 1, noise, dropout)?;
        let mut kl_terms = Vec::with_capacity(steps.len());
        let mut nll_terms = Vec::with_capacity(steps.len());
        let mut bce_terms = Vec::with_capacity(steps.len());
        for (t, step) in steps.iter().enumerate() {
            kl_terms.push(tape.sum_all(step.kl));
            let z = self.latent(tape, step.vars.z1, step.vars.z2);
            let (xm, xs) = self.nets.decoder.forward(tape, p, z, dropout)?;
            let nll = gaussian_nll_tape(tape, &batch.x[t], xm, xs);
            let nll = tape.sum_cols(nll);
            let nll = tape.mul_const(nll, column(&batch.obs, t));
            nll_terms.push(tape.sum_all(nll));
            if t < NUM_VISITS - 1 {
                let logit = self.nets.adherence.forward(tape, p, z, dropout)?;
                let bce = bce_logits_tape(tape, logit, &column(&batch.y, t));
                bce_terms.push(tape.sum_all(bce));
            }
        }
        let sum = |tape: &mut Tape, terms: &[Var]| {
            terms[1..].iter().fold(terms[0], |acc, &v| tape.add(acc, v))
        };
        Ok(LossVars {
            kl: sum(tape, &kl_terms),
            score_nll: sum(tape, &nll_terms),
            adherence_nll: sum(tape, &bce_terms),
        })
    }

    /// Single-sample estimate of the three loss terms, averaged per patient.
    pub fn elbo_terms(&self, batch: &SequenceBatch, noise: &mut dyn NoiseSource) -> Result<ElboTerms> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let vars = self.loss_tape(&mut tape, &p, batch, noise, &mut Dropout::Off)?;
        let n = batch.len() as f64;
        Ok(ElboTerms {
            kl: tape.scalar(vars.kl) / n,
            score_nll: tape.scalar(vars.score_nll) / n,
            adherence_nll: tape.scalar(vars.adherence_nll) / n,
        })
    }

    /// Finite-difference check of the weighted training loss
    /// `KL + w_score * NLL_x + w_adherence * NLL_y` with noise frozen from one
    /// draw of `rng`.
    pub fn check_gradients<R: Rng>(
        &self,
        batch: &SequenceBatch,
        weights: (f64, f64),
        tolerance: f64,
        rng: &mut R,
    ) -> Result<GradCheckReport> {
        let mut base = RngNoise(rng);
        let mut rec = RecordingNoise::new(&mut base);
        self.elbo_terms(batch, &mut rec)?;
        let noise = rec.into_replay();
        Ok(grad_check(
            |params: &ParamStore| {
                let mut m = self.clone();
                m.params = params.clone();
                let mut noise = noise.clone();
                noise.rewind();
                let mut tape = Tape::new();
                let p = m.params.bind(&mut tape);
                let v = m
                    .loss_tape(&mut tape, &p, batch, &mut noise, &mut Dropout::Off)
                    .expect("batch validated by the recording pass");
                let s = tape.scale(v.score_nll, weights.0);
                let a = tape.scale(v.adherence_nll, weights.1);
                let total = tape.add(v.kl, s);
                let total = tape.add(total, a);
                let grads = tape.backward(total);
                (tape.scalar(total), m.params.collect_grads(&p, &grads))
            },
            &self.params,
            tolerance,
            None,
        ))
    }

    /// Samples the latent chain through one-based step `t` (visits `1..=t`).
    pub fn filter_posterior(
        &self,
        batch: &SequenceBatch,
        t: usize,
        noise: &mut dyn NoiseSource,
    ) -> Result<Vec<LatentState>> {
        if !(1..=NUM_VISITS).contains(&t) {
            return Err(Error::StepOutOfRange {
                step: t,
                lo: 1,
                hi: NUM_VISITS,
            });
        }
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let steps = self.filter_tape(&mut tape, &p, batch, t - 1, noise, &mut Dropout::Off)?;
        Ok(steps
            .iter()
            .enumerate()
            .map(|(visit, s)| LatentState {
                visit,
                z1: tape.value(s.vars.z1).clone(),
                z1_mean: tape.value(s.vars.z1_mean).clone(),
                z1_std: tape.value(s.vars.z1_std).clone(),
                z2: tape.value(s.vars.z2).clone(),
                z2_mean: tape.value(s.vars.z2_mean).clone(),
                z2_std: tape.value(s.vars.z2_std).clone(),
            })
            .collect())
    }

    /// Filtered adherence probabilities `P(y_t = 1)` for `t = 1..=5`
    /// (each `rows x 1`) with static features taken from the tape variable
    /// `s`, so callers can differentiate with respect to them.
    pub(crate) fn adherence_probs_tape(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &SequenceBatch,
        s: Var,
        noise: &mut dyn NoiseSource,
    ) -> Result<Vec<Var>> {
        self.check_batch(batch)?;
        let steps = self.filter_tape_with_static(tape, p, batch, s, NUM_INTERVALS - 1, noise, &mut Dropout::Off)?;
        steps
            .iter()
            .map(|st| {
                let z = tape.concat(&[st.vars.z1, st.vars.z2]);
                let logit = self.nets.adherence.forward(tape, p, z, &mut Dropout::Off)?;
                Ok(tape.sigmoid(logit))
            })
            .collect()
    }

    /// Parameters of `p(z2_{t+1} | z1, z2, a)` for given inputs; exposes the
    /// shared transition block for inspection.
    pub fn z2_transition_params(&self, z1: &Matrix, z2: &Matrix, a: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let vars = [tape.leaf(z1.clone()), tape.leaf(z2.clone()), tape.leaf(a.clone())];
        let input = tape.concat(&vars);
        let (m, s) = self.nets.p2_trans.forward(&mut tape, &p, input, &mut Dropout::Off)?;
        Ok((tape.value(m).clone(), tape.value(s).clone()))
    }
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use crate::nn::loss::HALF_LN_2PI;
    use crate::nn::{ParamId, RecordingNoise, RngNoise, ZeroNoise};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn filter_length_and_range() {
        let model = tiny_model(3, 2, 0);
        let batch = random_batch(4, 3, 2, 1);
        let chain = model.filter_posterior(&batch, 1, &mut ZeroNoise).unwrap();
        assert_eq!(chain.len(), 1);
        assert_eq!(chain[0].z1.dim(), (4, 2));
        assert_eq!(model.filter_posterior(&batch, 6, &mut ZeroNoise).unwrap().len(), 6);
        assert!(matches!(
            model.filter_posterior(&batch, 7, &mut ZeroNoise),
            Err(Error::StepOutOfRange { step: 7, .. })
        ));
    }

    #[test]
    fn filter_is_deterministic_under_frozen_noise() {
        let model = tiny_model(3, 2, 0);
        let batch = random_batch(4, 3, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut base = RngNoise(&mut rng);
        let mut rec = RecordingNoise::new(&mut base);
        let first = model.filter_posterior(&batch, 4, &mut rec).unwrap();
        let mut replay = rec.into_replay();
        let second = model.filter_posterior(&batch, 4, &mut replay).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn missing_visit_uses_prior() {
        let model = tiny_model(3, 2, 0);
        let batch = random_batch(3, 3, 2, 1);
        assert_eq!(batch.obs[[1, 3]], 0.0);
        let chain = model.filter_posterior(&batch, 4, &mut ZeroNoise).unwrap();
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let z2 = tape.leaf(chain[2].z2.clone());
        let a = tape.leaf(column(&batch.a, 2));
        let input = tape.concat(&[z2, a]);
        let (pm, _) = model.nets.p1_trans.forward(&mut tape, &p, input, &mut Dropout::Off).unwrap();
        assert_eq!(chain[3].z1_mean.row(1), tape.value(pm).row(1));
        assert_ne!(chain[3].z1_mean.row(0), tape.value(pm).row(0));
    }

    #[test]
    fn shared_transition_block_agrees_with_filter() {
        let model = tiny_model(3, 2, 2);
        let batch = random_batch(4, 3, 2, 3);
        let chain = model.filter_posterior(&batch, 3, &mut ZeroNoise).unwrap();
        let (m, s) = model
            .z2_transition_params(&chain[2].z1, &chain[1].z2, &column(&batch.a, 1))
            .unwrap();
        assert_eq!(m, chain[2].z2_mean);
        assert_eq!(s, chain[2].z2_std);
        let p2 = model.params.find("p2_trans.l0.w").unwrap();
        assert_eq!(model.params.shapes().iter().filter(|s| s.name.starts_with("p2_trans")).count(), 6);
        assert!(model.params.get(p2).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn kl_vanishes_when_posterior_equals_prior() {
        // Zero the weights of the posterior and prior transition nets, so
        // both emit the same distribution, and make the initial posterior
        // standard normal: the total KL is then exactly zero.
        let mut model = tiny_model(3, 2, 4);
        let ids: Vec<ParamId> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            if name.starts_with("q1_") || name.starts_with("p1_trans") {
                model.params.get_mut(id).fill(0.0);
            }
            if (name.starts_with("q1_") || name.starts_with("p1_trans")) && name.ends_with("std.b") {
                // softplus(b) + floor = 1
                let b = (1.0f64 - crate::nn::layers::STD_FLOOR).exp_m1().ln();
                model.params.get_mut(id).fill(b);
            }
        }
        let batch = random_batch(5, 3, 2, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let terms = model.elbo_terms(&batch, &mut RngNoise(&mut rng)).unwrap();
        assert!(terms.kl.abs() < 1e-12, "{}", terms.kl);
    }

    #[test]
    fn perfect_unit_decoder_gives_closed_form_nll() {
        // Decoder output weights zeroed: mean = bias, std = softplus(bias)+floor.
        // Targets equal to the bias give 0.5 ln(2 pi) per observed cell.
        let mut model = tiny_model(3, 2, 4);
        let unit = (1.0f64 - crate::nn::layers::STD_FLOOR).exp_m1().ln();
        let target = [0.3, -0.7];
        for name in ["decoder.mean.w", "decoder.std.w"] {
            let id = model.params.find(name).unwrap();
            model.params.get_mut(id).fill(0.0);
        }
        let id = model.params.find("decoder.mean.b").unwrap();
        model.params.get_mut(id).assign(&ndarray::arr2(&[target]));
        let id = model.params.find("decoder.std.b").unwrap();
        model.params.get_mut(id).fill(unit);

        let mut batch = random_batch(4, 3, 2, 2);
        for t in 0..NUM_VISITS {
            for b in 0..4 {
                if batch.obs[[b, t]] == 1.0 {
                    batch.x[t][[b, 0]] = target[0];
                    batch.x[t][[b, 1]] = target[1];
                }
            }
        }
        let observed = batch.obs.sum();
        let terms = model.elbo_terms(&batch, &mut ZeroNoise).unwrap();
        let expected = HALF_LN_2PI * 2.0 * observed / 4.0;
        assert!((terms.score_nll - expected).abs() < 1e-9, "{} vs {expected}", terms.score_nll);
    }

    #[test]
    fn kl_is_nonnegative_on_random_batches() {
        for seed in 0..20 {
            let model = tiny_model(3, 2, seed);
            let batch = random_batch(6, 3, 2, seed + 100);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let terms = model.elbo_terms(&batch, &mut RngNoise(&mut rng)).unwrap();
            assert!(terms.kl >= 0.0);
        }
    }

    #[test]
    fn full_training_loss_passes_grad_check() {
        let model = tiny_model(3, 2, 11);
        let batch = random_batch(4, 3, 2, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let report = model.check_gradients(&batch, (1.7, 0.6), 1e-4, &mut rng).unwrap();
        assert!(report.checked > 200);
        assert!(report.passed(), "max rel {:.3e}: {:?}", report.max_rel_error, &report.failures[..report.failures.len().min(5)]);
    }
}
