use alloc::vec::Vec;

use super::{LearnableLRTable, MetaConfig};
use crate::backbone::ModelSpec;
use crate::tensor::ParamSet;

/// A meta-model snapshot with its validation score.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub score: f64,
    pub epoch: usize,
    pub spec: ModelSpec,
    pub params: ParamSet,
    pub lr_table: LearnableLRTable,
    pub config: MetaConfig,
}

/// The best checkpoints seen so far, ordered by descending score; equal
/// scores keep the earlier epoch first.
#[derive(Debug, Clone)]
pub struct CheckpointRing {
    capacity: usize,
    entries: Vec<Checkpoint>,
}

pub const RING_CAPACITY: usize = 5;

impl Default for CheckpointRing {
    fn default() -> Self {
        Self::new()
    }
}

impl CheckpointRing {
    pub fn new() -> Self {
        Self::with_capacity(RING_CAPACITY)
    }

    pub fn with_capacity(capacity: usize) -> Self {
        CheckpointRing {
            capacity,
            entries: Vec::with_capacity(capacity + 1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Checkpoint] {
        &self.entries
    }

    pub fn best(&self) -> Option<&Checkpoint> {
        self.entries.first()
    }

    /// Inserts `ckpt` if it ranks among the best; returns whether it was kept.
    /// Non-finite scores are never kept.
    pub fn offer(&mut self, ckpt: Checkpoint) -> bool {
        if !ckpt.score.is_finite() || self.capacity == 0 {
            return false;
        }
        let pos = self
            .entries
            .iter()
            .position(|e| ckpt.score > e.score || (ckpt.score == e.score && ckpt.epoch < e.epoch))
            .unwrap_or(self.entries.len());
        if pos >= self.capacity {
            return false;
        }
        self.entries.insert(pos, ckpt);
        self.entries.truncate(self.capacity);
        true
    }
}
