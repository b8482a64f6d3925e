use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named, shaped parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Ordered collection of network parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Param { name, shape, data });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    /// `(name, shape)` for every tensor, in construction order.
    pub fn shape_table(&self) -> Vec<(String, Vec<usize>)> {
        self.params.iter().map(|p| (p.name.clone(), p.shape.clone())).collect()
    }

    /// Replaces all tensors with `loaded`, which must match names and shapes.
    pub fn load(&mut self, loaded: Vec<Param>) -> Result<()> {
        if loaded.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.params.len(),
                loaded.len()
            )));
        }
        for (have, new) in self.params.iter().zip(&loaded) {
            if have.name != new.name || have.shape != new.shape || new.data.len() != have.numel() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    have.name, have.shape, new.name, new.shape
                )));
            }
        }
        self.params = loaded;
        Ok(())
    }

    pub fn zeros_like(&self) -> Grads {
        Grads {
            data: self.params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// Gradient buffers laid out like the [`ParamStore`] they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub(crate) data: Vec<Vec<f64>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.0]
    }

    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.data
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.data {
            for v in t {
                *v *= s;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|v| v.is_finite())
    }
}

/// Seeded source of initial weights: N(0, std) for weights, zero biases.
pub(crate) struct Initializer {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Initializer {
    pub fn new(seed: u64, std: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, std).expect("std must be finite and positive"),
        }
    }

    pub fn normal(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal.sample(&mut self.rng)).collect()
    }
}
