use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub id: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// How a fresh parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` with `fan_in = shape[0]`.
    FanIn,
    /// Like `FanIn`, additionally multiplied by a constant.
    ScaledFanIn(f64),
    Normal(f64),
    Constant(f64),
}

/// Ordered collection of named parameters.
///
/// Insertion order is the canonical order for checkpoints and gradient checks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        id: impl Into<String>,
        value: Tensor,
        trainable: bool,
    ) -> Result<usize> {
        let id = id.into();
        if self.index.contains_key(&id) {
            return Err(Error::Config(format!("duplicate parameter id `{id}`")));
        }
        value.check_finite(&id)?;
        let i = self.params.len();
        self.index.insert(id.clone(), i);
        self.params.push(Param {
            id,
            value,
            trainable,
        });
        Ok(i)
    }

    /// Create a parameter whose initial value depends only on `(seed, id)`.
    pub fn init(
        &mut self,
        seed: u64,
        id: &str,
        shape: &[usize],
        init: Init,
        trainable: bool,
    ) -> Result<usize> {
        let value = initial_value(seed, id, shape, init);
        self.insert(id, value, trainable)
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

    pub fn ids(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.id.as_str()).collect()
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownParam(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn by_index(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub fn get(&self, id: &str) -> Result<&Param> {
        Ok(&self.params[self.index_of(id)?])
    }

    pub fn value(&self, id: &str) -> Result<&Tensor> {
        Ok(&self.get(id)?.value)
    }

    /// Replace a parameter's value; the shape must not change.
    pub fn set(&mut self, id: &str, value: Tensor) -> Result<()> {
        let i = self.index_of(id)?;
        let p = &mut self.params[i];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "ParamStore::set",
                p.value.shape(),
                value.shape(),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.id.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    /// Drop every parameter whose id starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|p| !p.id.starts_with(prefix));
        self.index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.id.clone(), i))
            .collect();
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Copy values for every id present in both stores.
    pub fn copy_shared_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in self.params.iter_mut() {
            if let Some(&j) = other.index.get(&p.id) {
                let src = &other.params[j].value;
                if src.shape() != p.value.shape() {
                    return Err(Error::shape(
                        "copy_shared_from",
                        p.value.shape(),
                        src.shape(),
                    ));
                }
                p.value = src.clone();
            }
        }
        Ok(())
    }
}

pub fn initial_value(seed: u64, id: &str, shape: &[usize], init: Init) -> Tensor {
    let fan_in = shape.first().copied().unwrap_or(1).max(1) as f64;
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, 1.0),
        Init::Constant(c) => Tensor::full(shape, c),
        Init::FanIn => RngStream::named(seed, id).uniform_tensor(shape, 1.0 / fan_in.sqrt()),
        Init::ScaledFanIn(s) => RngStream::named(seed, id).uniform_tensor(shape, s / fan_in.sqrt()),
        Init::Normal(std) => RngStream::named(seed, id).normal_tensor(shape, std),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_unique() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[2]), true).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[2]), true).is_err());
    }

    #[test]
    fn init_depends_only_on_seed_and_id() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        b.init(1, "other", &[3, 3], Init::FanIn, true).unwrap();
        a.init(1, "w", &[4, 2], Init::FanIn, true).unwrap();
        b.init(1, "w", &[4, 2], Init::FanIn, true).unwrap();
        assert_eq!(a.value("w").unwrap(), b.value("w").unwrap());
        let bound = 0.5;
        assert!(a
            .value("w")
            .unwrap()
            .data()
            .iter()
            .all(|v| v.abs() <= bound));
    }

    #[test]
    fn remove_prefix_reindexes() {
        let mut s = ParamStore::new();
        s.insert("geo.a", Tensor::zeros(&[1]), false).unwrap();
        s.insert("dit.b", Tensor::zeros(&[1]), true).unwrap();
        s.remove_prefix("geo.");
        assert_eq!(s.index_of("dit.b").unwrap(), 0);
        assert!(s.index_of("geo.a").is_err());
    }

    #[test]
    fn set_rejects_shape_change() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2, 2]), true).unwrap();
        assert!(s.set("w", Tensor::zeros(&[4])).is_err());
    }
}
