//! Named parameter storage shared by every trainable module.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Ordered map from parameter name to matrix. Iteration order is insertion
/// order, which fixes checkpoint layout and optimizer traversal.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, m: Matrix) {
        let mut m = m;
        m.round_to_f32();
        self.tensors.insert(name.into(), m);
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Matrix::len).sum()
    }

    /// Number of scalars in parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Moves every entry of `other` into `self`.
    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    /// Creates graph leaves for every parameter. `trainable` selects which
    /// leaves receive gradients.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), g.leaf(v, trainable(k))))
            .collect();
        Bound { vars }
    }

    pub fn map_values(&self, f: impl Fn(&Matrix) -> Matrix) -> ParamStore {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), f(v))).collect(),
        }
    }
}

/// Parameter name → graph variable for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Replaces the variable used for `name` (LoRA views, frozen overrides).
    pub fn replace(&mut self, name: &str, v: Var) -> Result<()> {
        let slot = self
            .vars
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        *slot = v;
        Ok(())
    }

    pub fn insert(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    /// Collects gradients for every bound name that received one. Names
    /// without a gradient get zeros of the stored shape.
    pub fn gradients(&self, store: &ParamStore, grads: &mut Gradients) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, m) in store.iter() {
            let g = self
                .vars
                .get(name)
                .and_then(|&v| grads.take(v))
                .unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()));
            out.tensors.insert(name.to_string(), g);
        }
        out
    }
}

/// Seeded initializers. Values are drawn as `f32` so stored state stays
/// exactly representable in checkpoints.
pub struct Init<'r> {
    rng: &'r mut ChaCha8Rng,
}

impl<'r> Init<'r> {
    pub fn new(rng: &'r mut ChaCha8Rng) -> Self {
        Self { rng }
    }

    pub fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| {
            let z: f64 = StandardNormal.sample(self.rng);
            (z * std) as f32 as f64
        })
    }

    /// Fan-in scaled normal, the usual choice for linear layers.
    pub fn linear(&mut self, fan_in: usize, fan_out: usize) -> Matrix {
        self.normal(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
    }

    pub fn uniform(&mut self, rows: usize, cols: usize, bound: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| {
            (self.rng.random_range(-bound..bound)) as f32 as f64
        })
    }
}
