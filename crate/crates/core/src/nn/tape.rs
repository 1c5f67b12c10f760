//! Minimal reverse-mode differentiation over row-major `f64` matrices.
//!
//! Every value on the tape is a 2-D matrix whose rows are batch items. A
//! forward pass records one node per operation; [`Tape::backward`] walks the
//! nodes in reverse and accumulates adjoints. Rows never interact except in
//! the explicit reductions ([`Tape::sum_all`]), so per-row gradients of a
//! summed objective are the gradients of each row's own contribution.

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MulConst(Var, Arc<Matrix>),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Softplus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    SumAll(Var),
    SumCols(Var),
}

#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Arc<Matrix>>,
    ops: Vec<Op>,
}

/// Adjoints of the leaves reached by [`Tape::backward`]; interior nodes are
/// released during the sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros shaped like `like` when it did not
    /// contribute to the objective.
    pub fn get_or_zeros(&self, var: Var, like: &Matrix) -> Matrix {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(like.raw_dim()))
    }

    pub fn take(&mut self, var: Var) -> Option<Matrix> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.values[var.0]
    }

    pub fn scalar(&self, var: Var) -> f64 {
        let v = self.value(var);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.values.push(Arc::new(value));
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a leaf sharing storage with `value` (used for parameters).
    pub fn leaf_shared(&mut self, value: Arc<Matrix>) -> Var {
        self.values.push(value);
        self.ops.push(Op::Leaf);
        Var(self.values.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a + bias` where `bias` is a single row broadcast over the rows of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let out = self.value(a) + self.value(bias);
        self.push(out, Op::AddBias(a, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) / self.value(b);
        self.push(out, Op::Div(a, b))
    }

    /// Elementwise product with a constant (masks, dropout keep-scales).
    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Var {
        let out = self.value(a) * &c;
        self.push(out, Op::MulConst(a, Arc::new(c)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        self.push(out, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) + k;
        self.push(out, Op::AddScalar(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).mapv(|x| leaky_relu(x, slope));
        self.push(out, Op::LeakyRelu(a, slope))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(softplus);
        self.push(out, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        self.push(out, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        self.push(out, Op::Square(a))
    }

    /// Column-wise concatenation; all parts must share the row count.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat: row counts differ");
        self.push(out, Op::Concat(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::Slice(a, start))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        self.push(Matrix::from_elem((1, 1), total), Op::SumAll(a))
    }

    /// Per-row sum, giving an `n x 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::SumCols(a))
    }

    /// Reverse sweep from a `1 x 1` objective.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.value(root).dim(),
            (1, 1),
            "backward requires a scalar root"
        );
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Matrix::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            if matches!(self.ops[idx], Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &self.ops[idx] {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddBias(a, bias) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *bias, gb);
                    accumulate(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let ga = &g / bv;
                    let mut gb = &ga * self.value(Var(idx));
                    gb.mapv_inplace(|v| -v);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MulConst(a, c) => accumulate(&mut grads, *a, &g * c.as_ref()),
                Op::Scale(a, k) => accumulate(&mut grads, *a, g * *k),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::LeakyRelu(a, slope) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|g, &x| {
                            if x <= 0.0 {
                                *g *= slope;
                            }
                        });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|g, &x| *g *= sigmoid(x));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(Var(idx)))
                        .for_each(|g, &y| *g *= y * (1.0 - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(Var(idx)))
                        .for_each(|g, &y| *g *= 1.0 - y * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g * self.value(Var(idx));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Ln(a) => {
                    let ga = g / self.value(*a);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = g * self.value(*a) * 2.0;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let width = self.value(p).ncols();
                        let gp = g.slice(s![.., offset..offset + width]).to_owned();
                        accumulate(&mut grads, p, gp);
                        offset += width;
                    }
                }
                Op::Slice(a, start) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.raw_dim());
                    let width = g.ncols();
                    ga.slice_mut(s![.., *start..*start + width]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let ga = Matrix::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumCols(a) => {
                    let src = self.value(*a);
                    let ga = g
                        .broadcast(src.raw_dim())
                        .expect("sum_cols adjoint broadcast")
                        .to_owned();
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], var: Var, g: Matrix) {
    match &mut grads[var.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}
