use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng as _;

use super::rng::{derive_seed, seeded_rng};
use crate::error::{Error, Result};

/// A named, freezable matrix with a gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
    pub frozen: bool,
}

impl Parameter {
    pub fn new(value: Array2<f64>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Self {
            value,
            grad,
            frozen: false,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Xavier-uniform matrix, a pure function of `(seed, name, shape)`.
pub fn xavier_uniform(seed: u64, name: &str, rows: usize, cols: usize) -> Array2<f64> {
    let mut rng = seeded_rng(derive_seed(seed, &format!("xavier/{name}/{rows}x{cols}")));
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..bound))
}

/// All parameters of a model, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Parameter>,
    seed: u64,
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.params.insert(name.into(), Parameter::new(value));
    }

    pub fn insert_parameter(&mut self, name: impl Into<String>, param: Parameter) {
        self.params.insert(name.into(), param);
    }

    /// Inserts a Xavier-initialized parameter keyed by this store's seed.
    pub fn insert_xavier(&mut self, name: &str, rows: usize, cols: usize) {
        let value = xavier_uniform(self.seed, name, rows, cols);
        self.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Array2<f64>> {
        Ok(&self.get(name)?.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn freeze_all(&mut self) {
        for p in self.params.values_mut() {
            p.frozen = true;
        }
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        self.get_mut(name)?.frozen = frozen;
        Ok(())
    }

    /// Names of parameters the optimizer may update.
    pub fn trainable_names(&self) -> Vec<&str> {
        self.iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(n, _)| n)
            .collect()
    }

    /// Number of scalar entries in unfrozen parameters.
    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| !p.frozen)
            .map(Parameter::len)
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }
}
