use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{target_variance, Lstm};
use crate::dataset::{mixup_batch, SequenceBatch, DEFAULT_MIXUP_ALPHA};
use crate::error::{Error, Result};
use crate::nn::optim::clip_grad_norm;
use crate::nn::{Dropout, RAdam, RAdamConfig, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmTrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// `None` (written as 0) disables Mixup.
    #[serde(with = "crate::dataset::mixup::alpha_serde")]
    pub mixup_alpha: Option<f64>,
    pub dropout: f64,
    pub clip: f64,
    pub optimizer: RAdamConfig,
}

impl Default for LstmTrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 500,
            patience: 50,
            batch_size: 64,
            mixup_alpha: Some(DEFAULT_MIXUP_ALPHA),
            dropout: 0.05,
            clip: 0.8,
            optimizer: RAdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LstmStepMetrics {
    pub nmse: f64,
    pub bce: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmEpoch {
    pub epoch: usize,
    pub nmse: f64,
    pub bce: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmHistory {
    pub epochs: Vec<LstmEpoch>,
    pub best_epoch: usize,
}

/// One clipped RAdam step on the per-patient `NMSE + BCE`.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut Lstm,
    opt: &mut RAdam,
    batch: &SequenceBatch,
    dropout: f64,
    clip: f64,
    rng: &mut R,
) -> Result<LstmStepMetrics> {
    let mut drop_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let mut mode = Dropout::On {
        p: dropout,
        rng: &mut drop_rng,
    };
    let (nmse, bce) = model.loss_tape(&mut tape, &p, batch, &mut mode)?;
    let inv_n = 1.0 / batch.len() as f64;
    let nmse = tape.scale(nmse, inv_n);
    let bce = tape.scale(bce, inv_n);
    let total = tape.add(nmse, bce);
    let (nmse_v, bce_v, loss) = (tape.scalar(nmse), tape.scalar(bce), tape.scalar(total));
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(batch.ids.clone()));
    }
    let grads = tape.backward(total);
    let mut g = model.params.collect_grads(&p, &grads);
    drop(tape);
    let grad_norm = clip_grad_norm(&mut g, clip);
    opt.step(&mut model.params, &g)?;
    Ok(LstmStepMetrics {
        nmse: nmse_v,
        bce: bce_v,
        loss,
        grad_norm,
    })
}

/// Teacher-forced training with early stopping on the validation loss.
/// Sets the model's NMSE divisor from `train` before the first step.
pub fn fit<R: Rng + ?Sized>(
    model: &mut Lstm,
    train: &SequenceBatch,
    val: Option<&SequenceBatch>,
    config: &LstmTrainConfig,
    rng: &mut R,
) -> Result<LstmHistory> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    model.target_variance = target_variance(train);
    let mut opt = RAdam::new(config.optimizer, &model.params);
    let mut best = (f64::INFINITY, model.params.clone(), 0usize);
    let mut epochs = Vec::new();
    let mut since_best = 0;

    for epoch in 0..config.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], rng);
        let (mut nmse, mut bce, mut batches) = (0.0, 0.0, 0);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let mut batch = train.select(chunk);
            if let Some(alpha) = config.mixup_alpha {
                if batch.len() >= 2 {
                    batch = mixup_batch(&batch, alpha, rng)?;
                }
            }
            let m = train_step(model, &mut opt, &batch, config.dropout, config.clip, rng)?;
            nmse += m.nmse;
            bce += m.bce;
            batches += 1;
        }
        let val_loss = val
            .map(|v| model.loss_terms(v).map(|(a, b)| a + b))
            .transpose()?;
        epochs.push(LstmEpoch {
            epoch,
            nmse: nmse / batches as f64,
            bce: bce / batches as f64,
            val_loss,
        });
        match val_loss {
            Some(v) if v < best.0 => {
                best = (v, model.params.clone(), epoch);
                since_best = 0;
            }
            Some(_) => {
                since_best += 1;
                if since_best >= config.patience {
                    log::info!("early stop at epoch {epoch}; best epoch {}", best.2);
                    break;
                }
            }
            None => best = (f64::INFINITY, model.params.clone(), epoch),
        }
    }
    model.params = best.1;
    Ok(LstmHistory {
        epochs,
        best_epoch: best.2,
    })
}

#[cfg(test)]
mod tests {
    use super::super::test_support::tiny_lstm;
    use super::*;
    use crate::dataset::NUM_VISITS;
    use crate::slvm::test_support::random_batch;

    fn fixture() -> SequenceBatch {
        let mut batch = random_batch(16, 3, 4, 22);
        for b in 0..16 {
            let level = batch.s[[b, 0]];
            for t in 0..NUM_VISITS {
                for d in 0..4 {
                    batch.x[t][[b, d]] = if batch.obs[[b, t]] == 1.0 { level + 0.2 * t as f64 - 0.5 } else { 0.0 };
                }
            }
        }
        batch
    }

    #[test]
    fn training_reduces_loss() {
        let batch = fixture();
        let mut model = Lstm::new(
            super::super::LstmArch {
                static_dim: 3,
                score_dim: 4,
                hidden: 32,
                layers: 2,
            },
            crate::dataset::NormalizationStats::identity_with_dims(3, 4),
            &mut ChaCha8Rng::seed_from_u64(21),
        )
        .unwrap();
        model.target_variance = target_variance(&batch);
        let (n0, b0) = model.loss_terms(&batch).unwrap();
        let mut opt = RAdam::new(RAdamConfig::default(), &model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            train_step(&mut model, &mut opt, &batch, 0.0, 0.8, &mut rng).unwrap();
        }
        let (n1, b1) = model.loss_terms(&batch).unwrap();
        assert!(n1 + b1 <= 0.8 * (n0 + b0), "{n0} {b0} -> {n1} {b1}");
    }

    #[test]
    fn non_finite_loss_leaves_params() {
        let mut model = tiny_lstm(2, 2, 0);
        let mut batch = random_batch(2, 2, 2, 0);
        batch.x[1][[1, 0]] = f64::INFINITY;
        let before = model.params.flatten();
        let mut opt = RAdam::new(RAdamConfig::default(), &model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = train_step(&mut model, &mut opt, &batch, 0.0, 0.8, &mut rng).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss(_)));
        assert_eq!(model.params.flatten(), before);
    }

    #[test]
    fn fit_is_reproducible() {
        let batch = fixture();
        let run = || {
            let mut model = tiny_lstm(3, 4, 1);
            let config = LstmTrainConfig {
                max_epochs: 5,
                batch_size: 8,
                ..Default::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let hist = fit(&mut model, &batch, Some(&batch), &config, &mut rng).unwrap();
            (model.params.flatten(), hist)
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
    }
}
