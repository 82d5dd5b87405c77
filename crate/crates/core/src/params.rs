//! Named parameter storage shared by every block.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::math;
use crate::ops::BatchStats;
use crate::tensor::{Shape, Tensor};

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learnable tensors receive gradients; buffers (running statistics) do not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Learnable,
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    kind: ParamKind,
    value: Tensor,
}

/// Flat, ordered collection of named tensors. Blocks hold [`ParamId`]s into it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            kind,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        self.entries[id.0].value = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, ParamKind, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), e.kind, &e.value))
    }

    /// Total number of learnable scalars.
    pub fn learnable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Learnable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Folds batch statistics into running `(mean, var)` buffers:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply_bn_update(&mut self, update: &BnUpdate, momentum: f64) {
        for (id, batch) in [
            (update.mean, &update.stats.mean),
            (update.var, &update.stats.var),
        ] {
            for (r, b) in self.get_mut(id).data_mut().iter_mut().zip(batch) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
}

/// Running-statistics update produced by a training-mode normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats,
}

/// Zero-mean uniform tensor with half-width `1 / sqrt(fan_in)`.
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: Shape, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / math::sqrt(fan_in.max(1) as f64);
    Tensor::uniform(shape, -bound, bound, rng)
}
