//! Numerical kernels shared by both sequence models.

pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod noise;
pub mod optim;
pub mod params;
pub mod tape;

use rand::Rng;
use rand_distr::StandardNormal;

pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{DenseStack, Dropout, GaussianHead, GaussianNet, LogitNet, LstmStack, LstmState};
pub use loss::{bce, gaussian_kl_diag, gaussian_nll};
pub use noise::{NoiseSource, RecordingNoise, ReplayNoise, RngNoise, ZeroNoise};
pub use optim::{clip_grad_norm, RAdam, RAdamConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Matrix, Tape, Var};

use crate::error::{Error, Result};

/// Evaluates a dense stack outside of training bookkeeping.
pub fn dense_forward<R: Rng>(
    stack: &DenseStack,
    params: &ParamStore,
    input: &Matrix,
    training: bool,
    dropout_p: f64,
    rng: &mut R,
) -> Result<Matrix> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.leaf(input.clone());
    let mut dropout = if training {
        Dropout::On { p: dropout_p, rng }
    } else {
        Dropout::Off
    };
    let out = stack.forward(&mut tape, &bound, x, &mut dropout)?;
    Ok(tape.value(out).clone())
}

/// `mean + std * eps` with `eps ~ N(0, I)`; returns the sample and `eps`.
pub fn gaussian_sample<R: Rng + ?Sized>(
    mean: &Matrix,
    std: &Matrix,
    rng: &mut R,
) -> Result<(Matrix, Matrix)> {
    if mean.dim() != std.dim() {
        return Err(Error::DimensionMismatch {
            context: "gaussian_sample",
            expected: mean.len(),
            actual: std.len(),
        });
    }
    if std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument(
            "gaussian_sample requires positive standard deviations".into(),
        ));
    }
    let noise = Matrix::from_shape_simple_fn(mean.raw_dim(), || rng.sample(StandardNormal));
    Ok((mean + &(std * &noise), noise))
}

/// Reparameterized sample on the tape, drawing `eps` from `noise`.
pub fn reparam<N: NoiseSource + ?Sized>(
    tape: &mut Tape,
    mean: Var,
    std: Var,
    noise: &mut N,
) -> Var {
    let (rows, cols) = tape.value(mean).dim();
    let eps = noise.standard_normal(rows, cols);
    let scaled = tape.mul_const(std, eps);
    tape.add(mean, scaled)
}
