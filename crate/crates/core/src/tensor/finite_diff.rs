use alloc::format;
use alloc::vec::Vec;

use super::ParamSet;
use crate::error::{Error, Result};

/// Central-difference gradient `(f(θ+εe) − f(θ−εe)) / 2ε` for every scalar
/// entry of `params`. Used as an oracle for the reverse-mode engine.
pub fn finite_diff_grad(
    mut loss_fn: impl FnMut(&ParamSet) -> Result<f64>,
    params: &ParamSet,
    eps: f64,
) -> Result<ParamSet> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Spec(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let base = params.flatten();
    let mut probe = base.clone();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        probe[i] = base[i] + eps;
        let up = loss_fn(&params.with_values(&probe)?)?;
        probe[i] = base[i] - eps;
        let down = loss_fn(&params.with_values(&probe)?)?;
        probe[i] = base[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::non_finite(format!("loss at perturbed entry {i}")));
        }
        out.push((up - down) / (2.0 * eps));
    }
    params.with_values(&out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::string::ToString;
    use alloc::vec;

    fn one(x: f64) -> ParamSet {
        ParamSet::new(vec![("x".to_string(), Tensor::scalar(x))]).unwrap()
    }

    #[test]
    fn exact_for_quadratics() {
        let g = finite_diff_grad(|p| Ok(p.tensor(0).item().powi(2)), &one(3.0), 1e-5).unwrap();
        assert!((g.tensor(0).item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn cubic() {
        let g = finite_diff_grad(|p| Ok(p.tensor(0).item().powi(3)), &one(2.0), 1e-5).unwrap();
        assert!((g.tensor(0).item() - 12.0).abs() < 1e-4);
    }

    #[test]
    fn constant_function() {
        let g = finite_diff_grad(|_| Ok(4.0), &one(2.0), 1e-3).unwrap();
        assert_eq!(g.tensor(0).item(), 0.0);
    }

    #[test]
    fn rejects_bad_step_and_non_finite_loss() {
        assert!(finite_diff_grad(|_| Ok(0.0), &one(1.0), 0.0).is_err());
        let err = finite_diff_grad(
            |p| {
                Ok(if p.tensor(0).item() > 1.0 {
                    f64::INFINITY
                } else {
                    0.0
                })
            },
            &one(1.0),
            1e-3,
        );
        assert!(err.unwrap_err().is_non_finite());
    }
}
