use rand::Rng;
use rand_distr::StandardNormal;

use super::tape::Matrix;

/// Source of standard-normal draws for reparameterized sampling.
///
/// Models never touch an RNG directly; swapping the source gives
/// deterministic (zero or replayed) noise for tests and attribution.
pub trait NoiseSource {
    fn standard_normal(&mut self, rows: usize, cols: usize) -> Matrix;
}

/// Draws from an RNG.
pub struct RngNoise<'a, R: Rng + ?Sized>(pub &'a mut R);

impl<R: Rng + ?Sized> NoiseSource for RngNoise<'_, R> {
    fn standard_normal(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_shape_simple_fn((rows, cols), || self.0.sample(StandardNormal))
    }
}

/// Always zero: every sample equals its mean.
#[derive(Debug, Default, Clone, Copy)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn standard_normal(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::zeros((rows, cols))
    }
}

/// Replays a fixed list of draws in order.
#[derive(Debug, Clone)]
pub struct ReplayNoise {
    draws: Vec<Matrix>,
    cursor: usize,
}

impl ReplayNoise {
    pub fn new(draws: Vec<Matrix>) -> Self {
        Self { draws, cursor: 0 }
    }

    /// Captures every draw the wrapped source produces, for later replay.
    pub fn record<N: NoiseSource>(inner: &mut N, shapes: &[(usize, usize)]) -> Self {
        Self::new(
            shapes
                .iter()
                .map(|&(r, c)| inner.standard_normal(r, c))
                .collect(),
        )
    }

    pub fn rewind(&mut self) {
        self.cursor = 0;
    }
}

impl NoiseSource for ReplayNoise {
    fn standard_normal(&mut self, rows: usize, cols: usize) -> Matrix {
        let draw = self
            .draws
            .get(self.cursor)
            .unwrap_or_else(|| panic!("replay noise exhausted after {} draws", self.cursor));
        assert_eq!(draw.dim(), (rows, cols), "replayed draw shape mismatch");
        self.cursor += 1;
        draw.clone()
    }
}

/// Records draws from an inner source as they happen.
pub struct RecordingNoise<'a, N: NoiseSource> {
    inner: &'a mut N,
    pub draws: Vec<Matrix>,
}

impl<'a, N: NoiseSource> RecordingNoise<'a, N> {
    pub fn new(inner: &'a mut N) -> Self {
        Self {
            inner,
            draws: Vec::new(),
        }
    }

    pub fn into_replay(self) -> ReplayNoise {
        ReplayNoise::new(self.draws)
    }
}

impl<N: NoiseSource> NoiseSource for RecordingNoise<'_, N> {
    fn standard_normal(&mut self, rows: usize, cols: usize) -> Matrix {
        let draw = self.inner.standard_normal(rows, cols);
        self.draws.push(draw.clone());
        draw
    }
}
