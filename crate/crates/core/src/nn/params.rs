use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Matrix, Tape, Var};
use crate::error::{Error, Result};

/// Index of a parameter block inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of parameter matrices.
///
/// Order is insertion order and is part of the serialized format.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Matrix>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let value = Matrix::from_shape_simple_fn((rows, cols), || dist.sample(rng));
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn shapes(&self) -> Vec<ParamShape> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(name, v)| ParamShape {
                name: name.clone(),
                rows: v.nrows(),
                cols: v.ncols(),
            })
            .collect()
    }

    /// Records every parameter as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .values
                .iter()
                .map(|v| tape.leaf_shared(Arc::clone(v)))
                .collect(),
        }
    }

    /// Gathers per-block gradients in store order, zeros for unused blocks.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Matrix> {
        self.values
            .iter()
            .zip(&bound.vars)
            .map(|(v, &var)| grads.get_or_zeros(var, v))
            .collect()
    }

    /// Flattened scalars in store order, row-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for v in &self.values {
            out.extend(v.iter().copied());
        }
        out
    }

    pub fn from_flat(shapes: &[ParamShape], flat: &[f64]) -> Result<Self> {
        let expected: usize = shapes.iter().map(|s| s.rows * s.cols).sum();
        if expected != flat.len() {
            return Err(Error::DimensionMismatch {
                context: "parameter payload",
                expected,
                actual: flat.len(),
            });
        }
        let mut store = ParamStore::new();
        let mut offset = 0;
        for shape in shapes {
            let n = shape.rows * shape.cols;
            let m = Matrix::from_shape_vec((shape.rows, shape.cols), flat[offset..offset + n].to_vec())
                .map_err(|e| Error::Artifact(e.to_string()))?;
            store.add(shape.name.clone(), m);
            offset += n;
        }
        Ok(store)
    }
}

/// Tape handles for every parameter of a store, valid for one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}
