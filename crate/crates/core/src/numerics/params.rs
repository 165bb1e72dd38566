use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::GridTensor;
use crate::error::{Error, Result};

/// Named learnable tensors, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: BTreeMap<String, GridTensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a new entry; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: GridTensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    /// Inserts a tensor of i.i.d. `N(0, std²)` draws.
    pub fn insert_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let t = GridTensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        });
        self.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Result<&GridTensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut GridTensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &GridTensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut GridTensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all entries.
    pub fn parameter_count(&self) -> usize {
        self.entries.values().map(GridTensor::numel).sum()
    }

    /// Moves every entry of `other` into `self`.
    pub fn merge(&mut self, other: ParameterStore) -> Result<()> {
        for (k, v) in other.entries {
            self.insert(k, v)?;
        }
        Ok(())
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    entries: BTreeMap<String, GridTensor>,
}

impl ParamGrads {
    pub fn insert(&mut self, name: String, grad: GridTensor) {
        match self.entries.get_mut(&name) {
            Some(existing) => existing.add_assign(&grad),
            None => {
                self.entries.insert(name, grad);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&GridTensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &GridTensor)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds `scale·other` into `self`, entry by entry.
    pub fn accumulate(&mut self, other: &ParamGrads, scale: f64) {
        for (k, v) in &other.entries {
            self.insert(k.clone(), v.map(|x| x * scale));
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.entries.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(GridTensor::is_finite)
    }
}
