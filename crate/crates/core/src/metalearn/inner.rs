use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{LearnableLRTable, MetaConfig, Order, RateTensors};
use crate::backbone::{batch_loss, Batch, ModelSpec};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::tensor::{grad, ParamSet, Tensor};

/// Anything with a differentiable loss over explicit parameters.
pub trait Learner {
    fn loss(&self, params: &ParamSet, batch: &Batch) -> Result<Tensor>;
}

impl Learner for ModelSpec {
    fn loss(&self, params: &ParamSet, batch: &Batch) -> Result<Tensor> {
        batch_loss(self, params, batch)
    }
}

/// Parameters and target losses along one inner loop.
#[derive(Debug, Clone)]
pub struct AdaptationTrace {
    /// `θ⁽⁰⁾ … θ⁽ˢ⁾`, detached; `θ⁽⁰⁾` is the meta-parameters themselves.
    pub params_per_step: Vec<ParamSet>,
    pub target_loss_per_step: Vec<f64>,
}

fn at_step(err: Error, step: usize) -> Error {
    match err {
        Error::NonFinite { context } => Error::non_finite(format!("inner step {step}: {context}")),
        other => other,
    }
}

/// One inner-loop step: `θ' = θ − lr[param][step] · ∇θ L_support(θ)`.
///
/// In second order the support gradient stays in the graph, so `θ'`
/// depends on `θ` through it; in first order the gradient is a constant
/// and `θ'` only depends on `θ` and the rates linearly.
pub fn inner_adapt<L: Learner + ?Sized>(
    learner: &L,
    params: &ParamSet,
    support: &Batch,
    rates: &RateTensors,
    step: usize,
    order: Order,
) -> Result<ParamSet> {
    // Constant inputs have no graph to differentiate through.
    let params = &params.map(|_, t| {
        Ok(if t.is_tracked() {
            t.clone()
        } else {
            t.to_leaf()
        })
    })?;
    let loss = learner
        .loss(params, support)
        .map_err(|e| at_step(e, step))?;
    let g = grad(&loss, params, order == Order::Second).map_err(|e| at_step(e, step))?;
    let mut index = 0;
    params.map(|_, theta| {
        let lr = rates.get(index, step);
        let gi = g.tensor(index);
        index += 1;
        theta
            .sub(&lr.expand(gi.shape())?.mul(gi)?)
            .map_err(|e| at_step(e, step))
    })
}

/// Multi-step loss weights over `inner_steps` target losses.
///
/// Uniform at epoch 0, annealed linearly so that from `anneal_epochs`
/// onward the final step carries all the weight.
pub fn msl_weights(epoch: usize, inner_steps: usize, anneal_epochs: usize) -> Vec<f64> {
    if inner_steps == 0 {
        return Vec::new();
    }
    let s = inner_steps as f64;
    let progress = if anneal_epochs == 0 {
        1.0
    } else {
        (epoch as f64 / anneal_epochs as f64).min(1.0)
    };
    let early = (1.0 - progress) / s;
    let mut w = vec![early; inner_steps];
    w[inner_steps - 1] = 1.0 - early * (s - 1.0);
    w
}

/// Weighted sum of the target losses after every inner step.
///
/// `meta_params` and `rates` should be graph leaves when the result is to
/// be differentiated. `epoch` selects the multi-step loss weights.
pub fn episode_loss<L: Learner + ?Sized>(
    learner: &L,
    meta_params: &ParamSet,
    episode: &Episode,
    rates: &RateTensors,
    config: &MetaConfig,
    epoch: usize,
) -> Result<(Tensor, AdaptationTrace)> {
    let weights = msl_weights(epoch, config.inner_steps, config.msl_anneal_epochs);
    let mut theta = meta_params.clone();
    let mut trace = AdaptationTrace {
        params_per_step: vec![meta_params.detach()],
        target_loss_per_step: Vec::with_capacity(config.inner_steps),
    };
    let mut total: Option<Tensor> = None;
    for (step, &w) in weights.iter().enumerate() {
        theta = inner_adapt(learner, &theta, &episode.support, rates, step, config.order)?;
        let target = learner
            .loss(&theta, &episode.target)
            .map_err(|e| at_step(e, step))?;
        trace.params_per_step.push(theta.detach());
        trace.target_loss_per_step.push(target.item());
        if w > 0.0 {
            let term = target.scale(w)?;
            total = Some(match total {
                Some(t) => t.add(&term)?,
                None => term,
            });
        }
    }
    let total = total.expect("the final step always has positive weight");
    Ok((total, trace))
}

/// Fine-tunes constant parameters on `support` with the learned rates for
/// `steps` inner steps and returns constant parameters.
pub fn adapt<L: Learner + ?Sized>(
    learner: &L,
    params: &ParamSet,
    support: &Batch,
    table: &LearnableLRTable,
    steps: usize,
) -> Result<ParamSet> {
    if steps > table.steps() {
        return Err(Error::Spec(format!(
            "{steps} adaptation steps requested, rate table has {}",
            table.steps()
        )));
    }
    let rates = table.tensors(false);
    let mut theta = params.detach();
    for step in 0..steps {
        theta = inner_adapt(learner, &theta, support, &rates, step, Order::First)?.detach();
    }
    Ok(theta)
}
