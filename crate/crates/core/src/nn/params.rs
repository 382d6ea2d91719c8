use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Which part of the model a parameter belongs to. Fine-tuning updates
/// only the context encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Backbone,
    ContextEncoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

/// Flat, ordered collection of named parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            group,
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.add(name, group, Tensor::uniform(shape, bound, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, group: ParamGroup, shape: &[usize]) -> ParamId {
        self.add(name, group, Tensor::zeros(shape))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Zeroes every parameter whose name starts with one of `prefixes`.
    pub fn zero_prefixed(&mut self, prefixes: &[&str]) {
        for e in &mut self.entries {
            if prefixes.iter().any(|p| e.name.starts_with(p)) {
                e.tensor.data_mut().fill(0.0);
            }
        }
    }

    /// Copies every parameter present in `other` by name and shape.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for e in &mut self.entries {
            if let Some(src) = other.entries.iter().find(|o| o.name == e.name) {
                if src.tensor.shape() != e.tensor.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{}: shape {:?} vs {:?}",
                        e.name,
                        src.tensor.shape(),
                        e.tensor.shape()
                    )));
                }
                e.tensor = src.tensor.clone();
                n += 1;
            }
        }
        Ok(n)
    }

    /// FNV-1a over the bit patterns of the selected parameters.
    pub fn fingerprint(&self, group: Option<ParamGroup>) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for e in &self.entries {
            if group.is_some_and(|g| g != e.group) {
                continue;
            }
            for b in e.name.bytes().chain(e.tensor.data().iter().flat_map(|x| x.to_bits().to_le_bytes())) {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}
