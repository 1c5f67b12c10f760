//! Exact inference for a 2-dim linear-Gaussian state space model with a
//! scalar binary input:
//!
//! z_1 ~ N(0, P0), z_{t+1} = A z_t + B a_t + w, w ~ N(0, Q), x_t = z_t + v, v ~ N(0, R).

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type V2 = [f64; 2];
pub type M2 = [[f64; 2]; 2];

pub const T: usize = 6;

#[derive(Debug, Clone, Copy)]
pub struct System {
    pub a: M2,
    pub b: V2,
    pub q: f64,
    pub r: f64,
    pub p0: f64,
}

impl Default for System {
    fn default() -> Self {
        Self {
            a: [[0.9, 0.2], [-0.2, 0.8]],
            b: [0.6, 0.4],
            q: 0.5,
            r: 0.02,
            p0: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sequence {
    pub x: Vec<V2>,
    pub a: Vec<f64>,
}

fn mv(m: &M2, v: &V2) -> V2 {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

fn mm(a: &M2, b: &M2) -> M2 {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

fn transpose(m: &M2) -> M2 {
    [[m[0][0], m[1][0]], [m[0][1], m[1][1]]]
}

fn add_diag(m: &M2, d: f64) -> M2 {
    [[m[0][0] + d, m[0][1]], [m[1][0], m[1][1] + d]]
}

fn det(m: &M2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

fn inv(m: &M2) -> M2 {
    let d = det(m);
    [[m[1][1] / d, -m[0][1] / d], [-m[1][0] / d, m[0][0] / d]]
}

impl System {
    pub fn simulate(&self, n: usize, seed: u64) -> Vec<Sequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = move |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
        (0..n)
            .map(|_| {
                let a: Vec<f64> = (0..T - 1).map(|_| f64::from(rng.random_range(0..2u8))).collect();
                let mut z = [self.p0.sqrt() * normal(&mut rng), self.p0.sqrt() * normal(&mut rng)];
                let mut x = Vec::with_capacity(T);
                for t in 0..T {
                    x.push([
                        z[0] + self.r.sqrt() * normal(&mut rng),
                        z[1] + self.r.sqrt() * normal(&mut rng),
                    ]);
                    if t + 1 < T {
                        let m = mv(&self.a, &z);
                        z = [
                            m[0] + self.b[0] * a[t] + self.q.sqrt() * normal(&mut rng),
                            m[1] + self.b[1] * a[t] + self.q.sqrt() * normal(&mut rng),
                        ];
                    }
                }
                Sequence { x, a }
            })
            .collect()
    }

    /// Filtered means `E[z_t | x_{1..t}]`, one-step predictive means
    /// `E[x_{t+1} | x_{1..t}]` for `t = 1..5`, and `log p(x_{1..6} | a)`.
    pub fn filter(&self, seq: &Sequence) -> (Vec<V2>, Vec<V2>, f64) {
        let mut m_pred = [0.0, 0.0];
        let mut p_pred: M2 = [[self.p0, 0.0], [0.0, self.p0]];
        let mut filtered = Vec::with_capacity(T);
        let mut predicted = Vec::with_capacity(T - 1);
        let mut loglik = 0.0;
        for t in 0..T {
            let s = add_diag(&p_pred, self.r);
            let s_inv = inv(&s);
            let e = [seq.x[t][0] - m_pred[0], seq.x[t][1] - m_pred[1]];
            let se = mv(&s_inv, &e);
            loglik += -(2.0 * std::f64::consts::PI).ln() - 0.5 * det(&s).ln() - 0.5 * (e[0] * se[0] + e[1] * se[1]);
            let k = mm(&p_pred, &s_inv);
            let ke = mv(&k, &e);
            let m = [m_pred[0] + ke[0], m_pred[1] + ke[1]];
            let kp = mm(&k, &p_pred);
            let p = [
                [p_pred[0][0] - kp[0][0], p_pred[0][1] - kp[0][1]],
                [p_pred[1][0] - kp[1][0], p_pred[1][1] - kp[1][1]],
            ];
            filtered.push(m);
            if t + 1 < T {
                let am = mv(&self.a, &m);
                m_pred = [am[0] + self.b[0] * seq.a[t], am[1] + self.b[1] * seq.a[t]];
                p_pred = add_diag(&mm(&mm(&self.a, &p), &transpose(&self.a)), self.q);
                predicted.push(m_pred);
            }
        }
        (filtered, predicted, loglik)
    }

    /// Mean over dims of `E[x_6]` under all-ones minus all-zeros actions on
    /// `a_{t..5}`, given a shared history.
    pub fn action_gain(&self, t: usize) -> f64 {
        let mut total = [0.0, 0.0];
        let mut power: M2 = [[1.0, 0.0], [0.0, 1.0]];
        for _ in t..T {
            let pb = mv(&power, &self.b);
            total = [total[0] + pb[0], total[1] + pb[1]];
            power = mm(&power, &self.a);
        }
        (total[0] + total[1]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loglik_matches_joint_gaussian_for_one_step() {
        // With T-step data the first factor is N(x_1; 0, (P0 + R) I).
        let sys = System::default();
        let seq = &sys.simulate(1, 3)[0];
        let (_, _, _) = sys.filter(seq);
        let v = sys.p0 + sys.r;
        let first = -(2.0 * std::f64::consts::PI * v).ln()
            - (seq.x[0][0].powi(2) + seq.x[0][1].powi(2)) / (2.0 * v);
        let mut one = seq.clone();
        one.x.truncate(1);
        let s = add_diag(&[[sys.p0, 0.0], [0.0, sys.p0]], sys.r);
        let e = one.x[0];
        let se = mv(&inv(&s), &e);
        let direct = -(2.0 * std::f64::consts::PI).ln() - 0.5 * det(&s).ln() - 0.5 * (e[0] * se[0] + e[1] * se[1]);
        assert!((first - direct).abs() < 1e-12);
    }

    #[test]
    fn gain_from_step_three() {
        let sys = System::default();
        // (I + A + A^2) B, averaged over dims.
        assert!((sys.action_gain(3) - 1.227).abs() < 1e-3, "{}", sys.action_gain(3));
    }
}
