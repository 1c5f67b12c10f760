#![allow(dead_code)]

pub mod kalman;

use adhere_core::dataset::{NormalizationStats, SequenceBatch, NUM_VISITS};
use adhere_core::nn::RAdamConfig;
use adhere_core::slvm::{fit, LagrangeConfig, MultiplierMode, Slvm, SlvmArch, SlvmTrainConfig};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use kalman::{Sequence, System};

/// Packs synthetic sequences as a batch with one all-zero static feature.
pub fn to_batch(seqs: &[Sequence], prefix: &str) -> SequenceBatch {
    let n = seqs.len();
    let mut x = vec![Array2::zeros((n, 2)); NUM_VISITS];
    let mut a = Array2::zeros((n, NUM_VISITS - 1));
    for (b, seq) in seqs.iter().enumerate() {
        for t in 0..NUM_VISITS {
            x[t][[b, 0]] = seq.x[t][0];
            x[t][[b, 1]] = seq.x[t][1];
        }
        for t in 0..NUM_VISITS - 1 {
            a[[b, t]] = seq.a[t];
        }
    }
    SequenceBatch {
        ids: (0..n).map(|b| format!("{prefix}{b:04}")).collect(),
        s: Array2::zeros((n, 1)),
        x,
        obs: Array2::ones((n, NUM_VISITS)),
        y: a.clone(),
        a,
    }
}

/// Fits the latent model to the linear-Gaussian system by plain ELBO
/// maximization (unit score weight, no adherence term).
pub fn train_on_system(system: &System, n_train: usize, epochs: usize, seed: u64) -> Slvm {
    let train = to_batch(&system.simulate(n_train, seed), "train");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let arch = SlvmArch {
        static_dim: 1,
        score_dim: 2,
        latent1: 2,
        latent2: 2,
        hidden: vec![32],
    };
    let mut model = Slvm::new(arch, NormalizationStats::identity_with_dims(1, 2), &mut rng).unwrap();
    let config = SlvmTrainConfig {
        max_epochs: epochs,
        patience: epochs,
        batch_size: 64,
        mixup_alpha: None,
        dropout: 0.0,
        clip: 10.0,
        optimizer: RAdamConfig::default(),
        lagrange: LagrangeConfig {
            mode: MultiplierMode::Fixed,
            init_score: 1.0,
            init_adherence: 0.0,
            ..Default::default()
        },
        val_samples: 1,
    };
    fit(&mut model, &train, None, &config, &mut rng).unwrap();
    model
}
