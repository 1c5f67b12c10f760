use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RAdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RAdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Rectified Adam state: moments per parameter block and the step count.
#[derive(Debug, Clone)]
pub struct RAdam {
    pub config: RAdamConfig,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl RAdam {
    pub fn new(config: RAdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = params
            .ids()
            .map(|id| Matrix::zeros(params.get(id).raw_dim()))
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Length of the approximated simple moving average at step `t`.
    pub fn rho(beta2: f64, t: u64) -> f64 {
        let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
        let b2t = beta2.powi(t as i32);
        rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t)
    }

    /// Applies one update. While the variance rectification is undefined
    /// (rho <= 5) the step is plain bias-corrected momentum.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Matrix]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::DimensionMismatch {
                context: "radam gradients",
                expected: params.len(),
                actual: grads.len(),
            });
        }
        for (id, g) in params.ids().zip(grads) {
            if g.dim() != params.get(id).dim() {
                return Err(Error::DimensionMismatch {
                    context: "radam gradient block",
                    expected: params.get(id).len(),
                    actual: g.len(),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(params.name(id).to_string()));
            }
        }

        self.step += 1;
        let RAdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step;
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);
        let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
        let rho_t = Self::rho(beta2, t);
        let rect = if rho_t > 5.0 {
            Some(
                ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf
                    / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                    .sqrt(),
            )
        } else {
            None
        };

        for (k, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = &grads[k];
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            let p = params.get_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bc1;
                    match rect {
                        Some(r) => {
                            let adaptive = bc2.sqrt() / (v.sqrt() + eps);
                            *p -= lr * m_hat * r * adaptive;
                        }
                        None => *p -= lr * m_hat,
                    }
                });
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    // The relative slack keeps a second call a no-op despite rounding.
    if norm > max_norm * (1.0 + 1e-12) {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::super::params::ParamId;
    use proptest::prelude::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Matrix::from_elem((1, 1), v));
        s
    }

    /// Scalar RAdam written from the published update rule.
    struct ScalarRAdam {
        m: f64,
        v: f64,
        t: i32,
    }

    impl ScalarRAdam {
        fn step(&mut self, theta: f64, g: f64, lr: f64) -> f64 {
            let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
            self.t += 1;
            self.m = b1 * self.m + (1.0 - b1) * g;
            self.v = b2 * self.v + (1.0 - b2) * g * g;
            let m_hat = self.m / (1.0 - b1.powi(self.t));
            let rho_inf = 2.0 / (1.0 - b2) - 1.0;
            let rho = rho_inf - 2.0 * self.t as f64 * b2.powi(self.t) / (1.0 - b2.powi(self.t));
            if rho > 5.0 {
                let l = (1.0 - b2.powi(self.t)).sqrt() / (self.v.sqrt() + eps);
                let r = ((rho - 4.0) * (rho - 2.0) * rho_inf
                    / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho))
                    .sqrt();
                theta - lr * m_hat * r * l
            } else {
                theta - lr * m_hat
            }
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = scalar_store(1.25);
        let mut opt = RAdam::new(RAdamConfig::default(), &store);
        for _ in 0..20 {
            opt.step(&mut store, &[Matrix::zeros((1, 1))]).unwrap();
        }
        assert_eq!(store.get(ParamId(0))[[0, 0]], 1.25);
        assert_eq!(opt.step_count(), 20);
    }

    #[test]
    fn quadratic_matches_scalar_oracle() {
        // f(w) = (w - 3)^2; the rectified branch starts at step 6, so run
        // past it as well as the first five momentum-only steps.
        let lr = 0.05;
        let mut store = scalar_store(0.0);
        let mut opt = RAdam::new(RAdamConfig { lr, ..Default::default() }, &store);
        let mut oracle = ScalarRAdam { m: 0.0, v: 0.0, t: 0 };
        let mut w_ref = 0.0;
        for _ in 0..12 {
            let w = store.get(ParamId(0))[[0, 0]];
            let g = 2.0 * (w - 3.0);
            opt.step(&mut store, &[Matrix::from_elem((1, 1), g)]).unwrap();
            w_ref = oracle.step(w_ref, 2.0 * (w_ref - 3.0), lr);
            assert!((store.get(ParamId(0))[[0, 0]] - w_ref).abs() < 1e-10);
        }
        assert!(RAdam::rho(0.999, 5) <= 5.0 && RAdam::rho(0.999, 6) > 5.0);
    }

    #[test]
    fn convex_quadratic_descends_after_warmup() {
        let mut store = ParamStore::new();
        store.add("w", Matrix::from_shape_vec((1, 3), vec![2.0, -1.0, 0.5]).unwrap());
        let mut opt = RAdam::new(RAdamConfig { lr: 0.01, ..Default::default() }, &store);
        let loss = |s: &ParamStore| s.get(ParamId(0)).iter().map(|v| v * v).sum::<f64>();
        let mut prev = f64::INFINITY;
        for step in 0..300 {
            let g = store.get(ParamId(0)).mapv(|v| 2.0 * v);
            opt.step(&mut store, &[g]).unwrap();
            let l = loss(&store);
            if step >= 5 {
                assert!(l < prev, "loss rose at step {step}: {l} >= {prev}");
            }
            prev = l;
        }
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut store = scalar_store(0.0);
        let mut opt = RAdam::new(RAdamConfig::default(), &store);
        let err = opt
            .step(&mut store, &[Matrix::from_elem((1, 1), f64::NAN)])
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn radam_is_bitwise_deterministic() {
        let run = || {
            let mut store = ParamStore::new();
            store.add("a", Matrix::from_shape_vec((2, 2), vec![0.1, 0.2, 0.3, 0.4]).unwrap());
            let mut opt = RAdam::new(RAdamConfig::default(), &store);
            for k in 0..10 {
                let g = store.get(ParamId(0)).mapv(|v| (v * k as f64).sin());
                opt.step(&mut store, &[g]).unwrap();
            }
            store.flatten()
        };
        let a: Vec<u64> = run().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = run().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn clip_examples() {
        let mut small = vec![Matrix::from_shape_vec((1, 2), vec![0.24, 0.32]).unwrap()];
        let before = small.clone();
        clip_grad_norm(&mut small, 0.8);
        assert_eq!(small, before);

        let mut big = vec![Matrix::from_shape_vec((1, 2), vec![4.8, 6.4]).unwrap()];
        let pre = clip_grad_norm(&mut big, 0.8);
        assert!((pre - 8.0).abs() < 1e-12);
        assert!((global_norm(&big) - 0.8).abs() < 1e-12);
        assert!((big[0][[0, 0]] / big[0][[0, 1]] - 0.75).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn clip_bounds_norm_and_is_idempotent(
            vals in proptest::collection::vec(-50.0f64..50.0, 1..40),
            split in 0usize..40,
        ) {
            let split = split.min(vals.len());
            let mut grads = vec![
                Matrix::from_shape_vec((1, split), vals[..split].to_vec()).unwrap(),
                Matrix::from_shape_vec((1, vals.len() - split), vals[split..].to_vec()).unwrap(),
            ];
            let orig = grads.clone();
            clip_grad_norm(&mut grads, 0.8);
            prop_assert!(global_norm(&grads) <= 0.8 + 1e-12);
            // Direction preserved: every entry scaled by the same factor.
            let n0 = global_norm(&orig);
            if n0 > 0.0 {
                let factor = global_norm(&grads) / n0;
                for (a, b) in grads.iter().flat_map(|g| g.iter()).zip(orig.iter().flat_map(|g| g.iter())) {
                    prop_assert!((a - b * factor).abs() < 1e-12);
                }
            }
            let once = grads.clone();
            clip_grad_norm(&mut grads, 0.8);
            prop_assert_eq!(once, grads);
        }
    }
}
