use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Slvm;
use crate::dataset::{mixup_batch, SequenceBatch, DEFAULT_MIXUP_ALPHA, NUM_INTERVALS, NUM_VISITS};
use crate::error::{Error, Result};
use crate::nn::loss::{bce, HALF_LN_2PI};
use crate::nn::optim::clip_grad_norm;
use crate::nn::{Dropout, RAdam, RAdamConfig, RngNoise, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiplierMode {
    /// Multiplicative updates from the constraint moving average.
    Geco,
    /// Multipliers held at their initial values.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LagrangeConfig {
    pub mode: MultiplierMode,
    pub eta: f64,
    pub decay: f64,
    pub init_score: f64,
    pub init_adherence: f64,
    pub min: f64,
    pub max: f64,
    /// Fixed targets; `None` calibrates from the training data.
    pub xi_score: Option<f64>,
    pub xi_adherence: Option<f64>,
    /// Fraction of the constant-predictor loss used for calibrated targets.
    pub xi_fraction: f64,
}

impl Default for LagrangeConfig {
    fn default() -> Self {
        Self {
            mode: MultiplierMode::Geco,
            eta: 0.01,
            decay: 0.99,
            init_score: 1.0,
            init_adherence: 1.0,
            min: 1e-4,
            max: 1e4,
            xi_score: None,
            xi_adherence: None,
            xi_fraction: 0.9,
        }
    }
}

/// Multipliers, targets and constraint moving averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagrangeState {
    pub lambda_score: f64,
    pub lambda_adherence: f64,
    pub xi_score: f64,
    pub xi_adherence: f64,
    pub ma_score: Option<f64>,
    pub ma_adherence: Option<f64>,
    pub config: LagrangeConfig,
}

impl LagrangeState {
    pub fn new(config: LagrangeConfig, xi_score: f64, xi_adherence: f64) -> Self {
        Self {
            lambda_score: config.init_score,
            lambda_adherence: config.init_adherence,
            xi_score,
            xi_adherence,
            ma_score: None,
            ma_adherence: None,
            config,
        }
    }

    /// Folds one batch's constraint values into the moving averages and
    /// rescales the multipliers by `exp(eta * MA)`.
    pub fn update(&mut self, score_nll: f64, adherence_nll: f64) {
        if self.config.mode == MultiplierMode::Fixed {
            return;
        }
        let c = &self.config;
        let ema = |ma: Option<f64>, v: f64| Some(ma.map_or(v, |m| c.decay * m + (1.0 - c.decay) * v));
        self.ma_score = ema(self.ma_score, score_nll - self.xi_score);
        self.ma_adherence = ema(self.ma_adherence, adherence_nll - self.xi_adherence);
        let step = |lambda: f64, ma: f64| (lambda * (c.eta * ma).exp()).clamp(c.min, c.max);
        self.lambda_score = step(self.lambda_score, self.ma_score.unwrap_or(0.0));
        self.lambda_adherence = step(self.lambda_adherence, self.ma_adherence.unwrap_or(0.0));
    }
}

/// Constraint targets from constant predictors on `batch`: a unit-variance
/// Gaussian at the (normalized) training mean, and the base adherence rate.
pub fn default_targets(batch: &SequenceBatch, fraction: f64) -> (f64, f64) {
    let n = batch.len().max(1) as f64;
    let mut score = 0.0;
    for (t, x) in batch.x.iter().enumerate() {
        for b in 0..batch.len() {
            if batch.obs[[b, t]] > 0.0 {
                score += x.row(b).iter().map(|v| HALF_LN_2PI + 0.5 * v * v).sum::<f64>();
            }
        }
    }
    let rate = batch.y.mean().unwrap_or(0.5);
    let adherence: f64 = batch.y.iter().map(|&y| bce(rate, y)).sum();
    (fraction * score / n, fraction * adherence / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub kl: f64,
    pub score_nll: f64,
    pub adherence_nll: f64,
    pub loss: f64,
    pub lambda_score: f64,
    pub lambda_adherence: f64,
    pub grad_norm: f64,
}

/// One clipped RAdam step on
/// `KL + lambda_s (score_nll - xi_s) + lambda_a (adherence_nll - xi_a)`,
/// followed by the multiplier update.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut Slvm,
    lagrange: &mut LagrangeState,
    opt: &mut RAdam,
    batch: &SequenceBatch,
    dropout: f64,
    clip: f64,
    rng: &mut R,
) -> Result<StepMetrics> {
    let mut noise_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut drop_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let mut mode = Dropout::On {
        p: dropout,
        rng: &mut drop_rng,
    };
    let vars = model.loss_tape(&mut tape, &p, batch, &mut RngNoise(&mut noise_rng), &mut mode)?;
    let inv_n = 1.0 / batch.len() as f64;
    let kl = tape.scale(vars.kl, inv_n);
    let score = tape.scale(vars.score_nll, inv_n);
    let adh = tape.scale(vars.adherence_nll, inv_n);
    let (kl_v, score_v, adh_v) = (tape.scalar(kl), tape.scalar(score), tape.scalar(adh));
    if !(kl_v.is_finite() && score_v.is_finite() && adh_v.is_finite()) {
        return Err(Error::NonFiniteLoss(batch.ids.clone()));
    }
    let ws = tape.scale(score, lagrange.lambda_score);
    let wa = tape.scale(adh, lagrange.lambda_adherence);
    let total = tape.add(kl, ws);
    let total = tape.add(total, wa);
    let grads = tape.backward(total);
    let mut g = model.params.collect_grads(&p, &grads);
    drop(tape);
    let grad_norm = clip_grad_norm(&mut g, clip);
    opt.step(&mut model.params, &g)?;

    let loss = kl_v
        + lagrange.lambda_score * (score_v - lagrange.xi_score)
        + lagrange.lambda_adherence * (adh_v - lagrange.xi_adherence);
    lagrange.update(score_v, adh_v);
    Ok(StepMetrics {
        kl: kl_v,
        score_nll: score_v,
        adherence_nll: adh_v,
        loss,
        lambda_score: lagrange.lambda_score,
        lambda_adherence: lagrange.lambda_adherence,
        grad_norm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlvmTrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// `None` (written as 0) disables Mixup.
    #[serde(with = "crate::dataset::mixup::alpha_serde")]
    pub mixup_alpha: Option<f64>,
    pub dropout: f64,
    pub clip: f64,
    pub optimizer: RAdamConfig,
    pub lagrange: LagrangeConfig,
    /// Replicas per validation patient when scoring early stopping.
    pub val_samples: usize,
}

impl Default for SlvmTrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 500,
            patience: 50,
            batch_size: 64,
            mixup_alpha: Some(DEFAULT_MIXUP_ALPHA),
            dropout: 0.05,
            clip: 0.8,
            optimizer: RAdamConfig::default(),
            lagrange: LagrangeConfig::default(),
            val_samples: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub kl: f64,
    pub score_nll: f64,
    pub adherence_nll: f64,
    pub lambda_score: f64,
    pub lambda_adherence: f64,
    pub val_objective: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub lagrange: LagrangeState,
}

/// Validation objective `score_nll + adherence_nll` under fixed noise.
fn validation_objective(model: &Slvm, val: &SequenceBatch, replicas: usize) -> Result<f64> {
    let rep = val.select(&crate::trajectory::replicate_rows(val.len(), replicas.max(1)));
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let terms = model.elbo_terms(&rep, &mut RngNoise(&mut rng))?;
    Ok(terms.score_nll + terms.adherence_nll)
}

/// Trains with shuffled mini-batches, optional Mixup, and early stopping on
/// the validation objective; the best parameters are restored at the end.
pub fn fit<R: Rng + ?Sized>(
    model: &mut Slvm,
    train: &SequenceBatch,
    val: Option<&SequenceBatch>,
    config: &SlvmTrainConfig,
    rng: &mut R,
) -> Result<TrainingHistory> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    debug_assert_eq!(train.x.len(), NUM_VISITS);
    debug_assert_eq!(train.y.ncols(), NUM_INTERVALS);
    let (xi_s, xi_a) = default_targets(train, config.lagrange.xi_fraction);
    let mut lagrange = LagrangeState::new(
        config.lagrange.clone(),
        config.lagrange.xi_score.unwrap_or(xi_s),
        config.lagrange.xi_adherence.unwrap_or(xi_a),
    );
    let mut opt = RAdam::new(config.optimizer, &model.params);
    let mut best = (f64::INFINITY, model.params.clone(), 0usize);
    let mut epochs = Vec::new();
    let mut since_best = 0;

    for epoch in 0..config.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], rng);
        let mut sums = [0.0; 3];
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let mut batch = train.select(chunk);
            if let Some(alpha) = config.mixup_alpha {
                if batch.len() >= 2 {
                    batch = mixup_batch(&batch, alpha, rng)?;
                }
            }
            let m = train_step(model, &mut lagrange, &mut opt, &batch, config.dropout, config.clip, rng)?;
            sums[0] += m.kl;
            sums[1] += m.score_nll;
            sums[2] += m.adherence_nll;
            batches += 1;
        }
        let nb = batches as f64;
        let val_objective = val.map(|v| validation_objective(model, v, config.val_samples)).transpose()?;
        epochs.push(EpochRecord {
            epoch,
            kl: sums[0] / nb,
            score_nll: sums[1] / nb,
            adherence_nll: sums[2] / nb,
            lambda_score: lagrange.lambda_score,
            lambda_adherence: lagrange.lambda_adherence,
            val_objective,
        });
        if let Some(obj) = val_objective {
            if obj < best.0 {
                best = (obj, model.params.clone(), epoch);
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.patience {
                    log::info!("early stop at epoch {epoch}; best epoch {}", best.2);
                    break;
                }
            }
        } else {
            best = (f64::INFINITY, model.params.clone(), epoch);
        }
    }
    model.params = best.1;
    Ok(TrainingHistory {
        epochs,
        best_epoch: best.2,
        lagrange,
    })
}
