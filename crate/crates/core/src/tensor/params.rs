use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::Tensor;
use crate::error::{Error, Result};
use crate::util::Fnv1a;

/// Ordered, uniquely named parameter tensors.
///
/// Holds both meta-parameters and inner-loop adapted parameters. Two sets
/// are congruent when names, order and shapes agree.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        for (i, (name, _)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::Spec(format!("duplicate parameter name {name}")));
            }
        }
        Ok(ParamSet { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.entries[index].1
    }

    pub fn name(&self, index: usize) -> &str {
        &self.entries[index].0
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn is_congruent(&self, other: &ParamSet) -> bool {
        self.check_congruent(other).is_ok()
    }

    pub fn check_congruent(&self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Congruence(format!(
                "{} entries vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.iter().zip(other.iter()) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::Congruence(format!(
                    "{na}{:?} vs {nb}{:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Applies `f` to every entry, keeping names and order.
    pub fn map(&self, mut f: impl FnMut(&str, &Tensor) -> Result<Tensor>) -> Result<ParamSet> {
        let entries = self
            .entries
            .iter()
            .map(|(n, t)| Ok((n.clone(), f(n, t)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamSet { entries })
    }

    pub fn detach(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.detach()))
                .collect(),
        }
    }

    /// Same values as fresh graph leaves.
    pub fn to_leaves(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.to_leaf()))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> ParamSet {
        self.map(|_, t| Tensor::zeros(t.shape()))
            .expect("shapes are valid")
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }

    /// All values concatenated in entry order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Constant set congruent with `self` holding `values` in flattened order.
    pub fn with_values(&self, values: &[f64]) -> Result<ParamSet> {
        if values.len() != self.num_scalars() {
            return Err(Error::Congruence(format!(
                "{} values for {} scalars",
                values.len(),
                self.num_scalars()
            )));
        }
        let mut offset = 0;
        self.map(|_, t| {
            let n = t.numel();
            let out = Tensor::new(t.shape(), values[offset..offset + n].to_vec());
            offset += n;
            out
        })
    }

    /// True when both sets are congruent and bit-identical.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.is_congruent(other)
            && self
                .tensors()
                .zip(other.tensors())
                .all(|(a, b)| a.bit_eq(b))
    }

    /// Stable 64-bit hash of names, shapes and value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv1a::new();
        for (name, t) in self.iter() {
            h.write(name.as_bytes());
            for &d in t.shape() {
                h.write(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }
}
