use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamId, ParamStore};
use super::tape::{Matrix, Tape, Var};
use crate::error::{Error, Result};

/// Negative slope of the hidden-layer activation.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Added to every softplus standard deviation so it stays strictly positive
/// even when softplus underflows.
pub const STD_FLOOR: f64 = 1e-5;

/// Dropout behaviour for one forward pass.
pub enum Dropout<'a> {
    Off,
    On { p: f64, rng: &'a mut dyn RngCore },
}

impl Dropout<'_> {
    /// Inverted dropout: kept units are scaled by 1/(1-p) so evaluation
    /// needs no rescaling.
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Dropout::Off => x,
            Dropout::On { p, .. } if *p <= 0.0 => x,
            Dropout::On { p, rng } => {
                let keep = 1.0 - *p;
                let (rows, cols) = tape.value(x).dim();
                let mask = Matrix::from_shape_simple_fn((rows, cols), || {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                tape.mul_const(x, mask)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.w"), in_dim, out_dim, in_dim, rng);
        let bias = store.add_uniform(format!("{name}.b"), 1, out_dim, in_dim, rng);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let h = tape.matmul(x, p.var(self.weight));
        tape.add_bias(h, p.var(self.bias))
    }
}

/// Fully connected hidden stack with leaky-ReLU activations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseStack {
    pub input_dim: usize,
    pub layers: Vec<Linear>,
}

impl DenseStack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut fan_in = input_dim;
        for (i, &width) in hidden.iter().enumerate() {
            layers.push(Linear::new(store, &format!("{name}.l{i}"), fan_in, width, rng));
            fan_in = width;
        }
        Self { input_dim, layers }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.out_dim)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        let cols = tape.value(x).ncols();
        if cols != self.input_dim {
            return Err(Error::DimensionMismatch {
                context: "dense stack input",
                expected: self.input_dim,
                actual: cols,
            });
        }
        let mut h = x;
        for layer in &self.layers {
            let pre = layer.forward(tape, p, h);
            let act = tape.leaky_relu(pre, LEAKY_SLOPE);
            h = dropout.apply(tape, act);
        }
        Ok(h)
    }
}

/// Diagonal Gaussian output: linear mean, softplus standard deviation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianHead {
    pub mean: Linear,
    pub std: Linear,
}

impl GaussianHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            mean: Linear::new(store, &format!("{name}.mean"), in_dim, out_dim, rng),
            std: Linear::new(store, &format!("{name}.std"), in_dim, out_dim, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.mean.out_dim
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, h: Var) -> (Var, Var) {
        let mean = self.mean.forward(tape, p, h);
        let raw = self.std.forward(tape, p, h);
        let sp = tape.softplus(raw);
        let std = tape.add_scalar(sp, STD_FLOOR);
        (mean, std)
    }
}

/// Dense stack followed by a Gaussian head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianNet {
    pub body: DenseStack,
    pub head: GaussianHead,
}

impl GaussianNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let body = DenseStack::new(store, name, input_dim, hidden, rng);
        let head = GaussianHead::new(store, name, body.output_dim(), out_dim, rng);
        Self { body, head }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        dropout: &mut Dropout<'_>,
    ) -> Result<(Var, Var)> {
        let h = self.body.forward(tape, p, x, dropout)?;
        Ok(self.head.forward(tape, p, h))
    }
}

/// Dense stack followed by a single logit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogitNet {
    pub body: DenseStack,
    pub head: Linear,
}

impl LogitNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Self {
        let body = DenseStack::new(store, name, input_dim, hidden, rng);
        let head = Linear::new(store, &format!("{name}.logit"), body.output_dim(), 1, rng);
        Self { body, head }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        let h = self.body.forward(tape, p, x, dropout)?;
        Ok(self.head.forward(tape, p, h))
    }
}

/// One LSTM layer; gates are packed as `[input, forget, candidate, output]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstmLayer {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstmStack {
    pub layers: Vec<LstmLayer>,
}

/// Hidden and cell state of every layer, as tape variables.
#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

impl LstmStack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(num_layers);
        let mut in_dim = input_dim;
        for l in 0..num_layers {
            let w_input =
                store.add_uniform(format!("{name}.l{l}.wx"), in_dim, 4 * hidden, hidden, rng);
            let w_hidden =
                store.add_uniform(format!("{name}.l{l}.wh"), hidden, 4 * hidden, hidden, rng);
            let bias = store.add_uniform(format!("{name}.l{l}.b"), 1, 4 * hidden, hidden, rng);
            layers.push(LstmLayer {
                w_input,
                w_hidden,
                bias,
                input_dim: in_dim,
                hidden,
            });
            in_dim = hidden;
        }
        Self { layers }
    }

    pub fn hidden(&self) -> usize {
        self.layers.first().map_or(0, |l| l.hidden)
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input_dim)
    }

    pub fn zero_state(&self, tape: &mut Tape, rows: usize) -> LstmState {
        let mut h = Vec::with_capacity(self.layers.len());
        let mut c = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            h.push(tape.leaf(Matrix::zeros((rows, layer.hidden))));
            c.push(tape.leaf(Matrix::zeros((rows, layer.hidden))));
        }
        LstmState { h, c }
    }

    /// Advances every layer by one time step; returns the top hidden state.
    ///
    /// `dropout` is applied between layers, never on the recurrent path.
    pub fn step(
        &self,
        tape: &mut Tape,
        p: &Bound,
        input: Var,
        state: &LstmState,
        dropout: &mut Dropout<'_>,
    ) -> Result<(Var, LstmState)> {
        let (rows, cols) = tape.value(input).dim();
        if cols != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "lstm input",
                expected: self.input_dim(),
                actual: cols,
            });
        }
        if state.h.len() != self.layers.len() || state.c.len() != self.layers.len() {
            return Err(Error::DimensionMismatch {
                context: "lstm state layers",
                expected: self.layers.len(),
                actual: state.h.len(),
            });
        }
        let mut next = LstmState {
            h: Vec::with_capacity(self.layers.len()),
            c: Vec::with_capacity(self.layers.len()),
        };
        let mut x = input;
        for (l, layer) in self.layers.iter().enumerate() {
            let (h_prev, c_prev) = (state.h[l], state.c[l]);
            if tape.value(h_prev).dim() != (rows, layer.hidden)
                || tape.value(c_prev).dim() != (rows, layer.hidden)
            {
                return Err(Error::DimensionMismatch {
                    context: "lstm state width",
                    expected: layer.hidden,
                    actual: tape.value(h_prev).ncols(),
                });
            }
            if l > 0 {
                x = dropout.apply(tape, x);
            }
            let hs = layer.hidden;
            let zx = tape.matmul(x, p.var(layer.w_input));
            let zh = tape.matmul(h_prev, p.var(layer.w_hidden));
            let z = tape.add(zx, zh);
            let z = tape.add_bias(z, p.var(layer.bias));
            let i_pre = tape.slice_cols(z, 0, hs);
            let f_pre = tape.slice_cols(z, hs, hs);
            let g_pre = tape.slice_cols(z, 2 * hs, hs);
            let o_pre = tape.slice_cols(z, 3 * hs, hs);
            let i = tape.sigmoid(i_pre);
            let f = tape.sigmoid(f_pre);
            let g = tape.tanh(g_pre);
            let o = tape.sigmoid(o_pre);
            let fc = tape.mul(f, c_prev);
            let ig = tape.mul(i, g);
            let c = tape.add(fc, ig);
            let tc = tape.tanh(c);
            let h = tape.mul(o, tc);
            next.h.push(h);
            next.c.push(c);
            x = h;
        }
        Ok((x, next))
    }
}
