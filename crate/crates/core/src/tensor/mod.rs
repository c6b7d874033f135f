//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! Every tensor produced from at least one tracked input records the
//! operation that made it. Backward rules are expressed with the same
//! operations, so the gradients returned by [`grad`] are themselves
//! differentiable and second-order derivatives come for free.
//!
//! Tensors are immutable. A "parameter update" always yields a new tensor,
//! which keeps pre-update values (for example meta-parameters during an
//! inner loop) intact.

mod autodiff;
mod finite_diff;
mod ops;
mod params;

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

pub use autodiff::{grad, grad_tensors};
pub use finite_diff::finite_diff_grad;
pub use ops::{sigmoid, ConvGeometry};
pub use params::ParamSet;

static NEXT_NODE_ID: AtomicU64 = AtomicU64::new(1);

/// Ids grow with creation order, so a node's parents always carry smaller ids.
fn next_node_id() -> u64 {
    NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone)]
pub struct Tensor {
    shape: Arc<[usize]>,
    data: Arc<[f64]>,
    node: Option<Arc<Node>>,
}

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) op: ops::Op,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a constant tensor. Extents must be positive; an empty shape
    /// denotes a scalar.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("new", shape, &[data.len()]));
        }
        if numel(shape) != data.len() {
            return Err(Error::shape("new", shape, &[data.len()]));
        }
        Ok(Self::raw(shape, data))
    }

    pub(crate) fn raw(shape: &[usize], data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(shape), data.len());
        Tensor {
            shape: Arc::from(shape),
            data: Arc::from(data),
            node: None,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(&[n], data)
    }

    pub fn scalar(value: f64) -> Self {
        Self::raw(&[], vec![value])
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        Self::new(shape, vec![value; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same values, no graph link.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    /// Same values as a fresh graph leaf, independent of any existing graph.
    pub fn to_leaf(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: Some(Arc::new(Node {
                id: next_node_id(),
                op: ops::Op::Leaf,
            })),
        }
    }

    /// True when shapes match and every element has the same bit pattern.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub(crate) fn node_id(&self) -> Option<u64> {
        self.node.as_ref().map(|n| n.id)
    }

    pub(crate) fn node(&self) -> Option<&Node> {
        self.node.as_deref()
    }

    /// Wraps a freshly computed result, linking it into the graph when any
    /// input was tracked.
    pub(crate) fn from_op(
        shape: &[usize],
        data: Vec<f64>,
        tracked: bool,
        op: impl FnOnce() -> ops::Op,
    ) -> Tensor {
        let mut t = Tensor::raw(shape, data);
        if tracked {
            t.node = Some(Arc::new(Node {
                id: next_node_id(),
                op: op(),
            }));
        }
        t
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &&self.shape[..]);
        if self.data.len() <= SHOWN {
            s.field("data", &&self.data[..]);
        } else {
            s.field("data[..8]", &&self.data[..SHOWN]);
        }
        s.field("tracked", &self.is_tracked()).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_sizes() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
        assert_eq!(Tensor::new(&[], vec![4.0]).unwrap().item(), 4.0);
    }

    #[test]
    fn leaves_get_increasing_ids() {
        let a = Tensor::scalar(1.0).to_leaf();
        let b = Tensor::scalar(1.0).to_leaf();
        assert!(a.node_id().unwrap() < b.node_id().unwrap());
        assert!(!a.detach().is_tracked());
    }

    #[test]
    fn tensors_are_send_and_sync() {
        fn check<T: Send + Sync>() {}
        check::<Tensor>();
        check::<ParamSet>();
    }
}
