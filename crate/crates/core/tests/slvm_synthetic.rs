//! The latent model against exact inference on a linear-Gaussian system.

mod support;

use adhere_core::nn::RngNoise;
use adhere_core::slvm::{Scenario, Slvm};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::LazyLock;

use support::kalman::System;
use support::{to_batch, train_on_system};

static MODEL: LazyLock<Slvm> = LazyLock::new(|| train_on_system(&System::default(), 1024, 400, 7));

#[test]
fn one_step_means_track_the_kalman_filter() {
    let sys = System::default();
    let seqs = sys.simulate(200, 99);
    let batch = to_batch(&seqs, "eval");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut sq = 0.0;
    let mut count = 0usize;
    for t in 1..=5 {
        let mut preds = Vec::new();
        for chunk in batch.chunks(8) {
            preds.extend(MODEL.predict_one_step_with(&chunk, t, 2000, &mut RngNoise(&mut rng)).unwrap());
        }
        for (p, seq) in preds.iter().zip(&seqs) {
            let (_, kf, _) = sys.filter(seq);
            for d in 0..2 {
                sq += (p.score_mean[d] - kf[t - 1][d]).powi(2);
                count += 1;
            }
        }
    }
    let rmse = (sq / count as f64).sqrt();
    eprintln!("one-step rmse vs kalman: {rmse:.4}");
    assert!(rmse < 0.1, "rmse {rmse}");
}

#[test]
fn elbo_is_close_to_exact_log_likelihood() {
    let sys = System::default();
    let seqs = sys.simulate(500, 123);
    let exact = seqs.iter().map(|s| sys.filter(s).2).sum::<f64>() / seqs.len() as f64;
    let batch = to_batch(&seqs, "eval");
    let rep = batch.select(&adhere_core::trajectory::replicate_rows(batch.len(), 20));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let elbo = MODEL.elbo_terms(&rep, &mut RngNoise(&mut rng)).unwrap().elbo();
    eprintln!("exact {exact:.4} elbo {elbo:.4} gap {:.4}", exact - elbo);
    assert!(elbo <= exact + 0.05, "bound violated: elbo {elbo} > log p {exact}");
    assert!(exact - elbo < 0.5, "gap {}", exact - elbo);
}

#[test]
fn intervention_delta_recovers_action_gain() {
    let sys = System::default();
    let mut seqs = sys.simulate(200, 5);
    for s in &mut seqs {
        s.a[0] = 1.0;
        s.a[1] = 1.0;
    }
    let batch = to_batch(&seqs, "sim");
    let scenarios = [
        Scenario { name: "on".into(), actions: vec![1.0; 3] },
        Scenario { name: "off".into(), actions: vec![0.0; 3] },
    ];
    let out = MODEL.simulate_interventions(&batch, 3, &scenarios, 200, 11).unwrap();
    let g = sys.action_gain(3);
    let delta = out.deltas[0][1];
    eprintln!("delta {delta:.4} gain {g:.4}");
    assert!((delta - g).abs() < 0.1 * g, "delta {delta} vs gain {g}");
}
