use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

/// Smallest rate the outer update may leave in the table.
pub const MIN_INNER_LR: f64 = 1e-8;

/// One learnable inner-loop step size per parameter tensor per inner step.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnableLRTable {
    names: Vec<String>,
    /// `rates[param][step]`.
    rates: Vec<Vec<f64>>,
}

impl LearnableLRTable {
    pub fn new(params: &ParamSet, steps: usize, init: f64) -> Result<Self> {
        if !(init > 0.0 && init.is_finite()) || steps == 0 {
            return Err(Error::Spec(format!(
                "inner rate table needs steps >= 1 and a positive rate, got {steps} and {init}"
            )));
        }
        Ok(LearnableLRTable {
            names: params.names().map(String::from).collect(),
            rates: vec![vec![init; steps]; params.len()],
        })
    }

    /// Builds a table from explicit non-negative rates.
    pub fn from_rates(names: Vec<String>, rates: Vec<Vec<f64>>) -> Result<Self> {
        let steps = rates.first().map_or(0, Vec::len);
        if names.len() != rates.len() || steps == 0 || rates.iter().any(|r| r.len() != steps) {
            return Err(Error::Spec(
                "inner rate table must be rectangular with one row per parameter".into(),
            ));
        }
        if rates
            .iter()
            .flatten()
            .any(|r| !(*r >= 0.0 && r.is_finite()))
        {
            return Err(Error::Spec(
                "inner rates must be finite and non-negative".into(),
            ));
        }
        Ok(LearnableLRTable { names, rates })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn rates(&self) -> &[Vec<f64>] {
        &self.rates
    }

    pub fn steps(&self) -> usize {
        self.rates[0].len()
    }

    pub fn get(&self, param: usize, step: usize) -> f64 {
        self.rates[param][step]
    }

    /// Copy with every rate replaced by `value`.
    pub fn filled(&self, value: f64) -> Self {
        LearnableLRTable {
            names: self.names.clone(),
            rates: vec![vec![value; self.steps()]; self.names.len()],
        }
    }

    pub fn check_matches(&self, params: &ParamSet) -> Result<()> {
        if self.names.iter().map(String::as_str).ne(params.names()) {
            return Err(Error::Congruence(format!(
                "inner rate table covers {:?}",
                self.names
            )));
        }
        Ok(())
    }

    /// Rates as scalar tensors; graph leaves when `tracked`.
    pub fn tensors(&self, tracked: bool) -> RateTensors {
        RateTensors {
            rates: self
                .rates
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|&r| {
                            let t = Tensor::scalar(r);
                            if tracked {
                                t.to_leaf()
                            } else {
                                t
                            }
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// Plain SGD on the rates, clamped at [`MIN_INNER_LR`].
    pub fn sgd_update(&mut self, grads: &[Vec<f64>], lr: f64) {
        for (row, grow) in self.rates.iter_mut().zip(grads) {
            for (r, g) in row.iter_mut().zip(grow) {
                *r = (*r - lr * g).max(MIN_INNER_LR);
            }
        }
    }
}

/// The rate table as tensors for one differentiable episode.
#[derive(Debug, Clone)]
pub struct RateTensors {
    pub(crate) rates: Vec<Vec<Tensor>>,
}

impl RateTensors {
    pub fn get(&self, param: usize, step: usize) -> &Tensor {
        &self.rates[param][step]
    }

    pub(crate) fn all(&self) -> impl Iterator<Item = &Tensor> {
        self.rates.iter().flatten()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn params() -> ParamSet {
        ParamSet::new(vec![
            ("a".to_string(), Tensor::zeros(&[2]).unwrap()),
            ("b".to_string(), Tensor::zeros(&[1]).unwrap()),
        ])
        .unwrap()
    }

    #[test]
    fn shape_and_init() {
        let t = LearnableLRTable::new(&params(), 3, 0.1).unwrap();
        assert_eq!(t.steps(), 3);
        assert_eq!(t.rates().len(), 2);
        assert!(t.rates().iter().flatten().all(|&r| r == 0.1));
        assert!(LearnableLRTable::new(&params(), 3, 0.0).is_err());
    }

    #[test]
    fn update_clamps_positive() {
        let mut t = LearnableLRTable::new(&params(), 1, 0.1).unwrap();
        t.sgd_update(&[vec![1000.0], vec![-1.0]], 1.0);
        assert_eq!(t.get(0, 0), MIN_INNER_LR);
        assert_eq!(t.get(1, 0), 1.1);
    }
}
