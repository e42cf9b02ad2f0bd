//! Named parameters with their AdamW state.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    /// First moment.
    pub m: Tensor,
    /// Second moment.
    pub v: Tensor,
    pub step: u64,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        Self { value, m, v, step: 0 }
    }
}

/// Insertion-ordered parameter collection. Shapes are fixed at insertion.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name.to_string(), Param::new(value));
        Ok(())
    }

    pub fn insert_param(&mut self, name: &str, param: Param) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name.to_string(), param);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    /// Overwrites a value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "ParamStore::set",
                format!("`{name}` is {:?}, got {:?}", p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Copy of the values only (fresh optimizer state), filtered by name.
    pub fn snapshot_where(&self, keep: impl Fn(&str) -> bool) -> ParamStore {
        let params = self
            .params
            .iter()
            .filter(|(k, _)| keep(k))
            .map(|(k, p)| (k.clone(), Param::new(p.value.clone())))
            .collect();
        ParamStore { params }
    }

    /// Uniform Glorot init for a `fan_in × fan_out` weight.
    pub fn init_weight(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Result<()> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        self.insert(name, Tensor::matrix(fan_in, fan_out, data)?)
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }
}
