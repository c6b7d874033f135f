//! Functional binary classifiers. Parameters are passed explicitly so the
//! same forward pass serves meta-parameters and inner-loop adapted ones.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};
use crate::util::rng_stream;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelSpec {
    /// Fully connected network; `widths` runs from input features to the
    /// single output logit, e.g. `[16, 32, 1]`.
    Mlp { widths: Vec<usize> },
    /// Two conv3×3→relu→maxpool blocks, flatten, dense(hidden)→relu→dense(1),
    /// over single-channel `height × width` images.
    VggTiny {
        height: usize,
        width: usize,
        channels: [usize; 2],
        hidden: usize,
    },
}

pub const MLP_TAG: u8 = 1;
pub const VGG_TINY_TAG: u8 = 2;

impl ModelSpec {
    pub fn mlp(widths: &[usize]) -> Result<Self> {
        let spec = ModelSpec::Mlp {
            widths: widths.to_vec(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Default plan: channels 4 then 8, dense width 32.
    pub fn vgg_tiny(height: usize, width: usize) -> Result<Self> {
        let spec = ModelSpec::VggTiny {
            height,
            width,
            channels: [4, 8],
            hidden: 32,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Mlp { widths } => {
                if widths.len() < 2 {
                    return Err(Error::Spec(format!(
                        "mlp needs at least two widths, got {widths:?}"
                    )));
                }
                if widths.contains(&0) {
                    return Err(Error::Spec(format!("mlp has a zero width: {widths:?}")));
                }
                if widths[widths.len() - 1] != 1 {
                    return Err(Error::Spec(format!(
                        "mlp must end in one logit: {widths:?}"
                    )));
                }
            }
            ModelSpec::VggTiny {
                height,
                width,
                channels,
                hidden,
            } => {
                if *height < 4 || *width < 4 {
                    return Err(Error::Spec(format!(
                        "vgg_tiny input {height}x{width} is smaller than 4x4"
                    )));
                }
                if channels.contains(&0) || *hidden == 0 {
                    return Err(Error::Spec(
                        "vgg_tiny has a zero channel or hidden width".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn kind_tag(&self) -> u8 {
        match self {
            ModelSpec::Mlp { .. } => MLP_TAG,
            ModelSpec::VggTiny { .. } => VGG_TINY_TAG,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ModelSpec::Mlp { .. } => "mlp",
            ModelSpec::VggTiny { .. } => "vgg_tiny",
        }
    }

    /// Integer plan stored alongside the kind tag in checkpoints.
    pub fn plan(&self) -> Vec<usize> {
        match self {
            ModelSpec::Mlp { widths } => widths.clone(),
            ModelSpec::VggTiny {
                height,
                width,
                channels,
                hidden,
            } => vec![*height, *width, channels[0], channels[1], *hidden],
        }
    }

    pub fn from_record(tag: u8, plan: &[usize]) -> Result<Self> {
        let spec = match (tag, plan) {
            (MLP_TAG, _) => ModelSpec::Mlp {
                widths: plan.to_vec(),
            },
            (VGG_TINY_TAG, &[height, width, c0, c1, hidden]) => ModelSpec::VggTiny {
                height,
                width,
                channels: [c0, c1],
                hidden,
            },
            _ => {
                return Err(Error::Spec(format!(
                    "unknown model record tag {tag} plan {plan:?}"
                )))
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Per-example feature shape the model consumes.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            ModelSpec::Mlp { widths } => vec![widths[0]],
            ModelSpec::VggTiny { height, width, .. } => vec![*height, *width],
        }
    }

    /// `(name, shape, fan_in)` of every parameter tensor, in order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        let dense = |out: &mut Vec<_>, idx: usize, fan_in: usize, fan_out: usize| {
            out.push((format!("dense{idx}.weight"), vec![fan_in, fan_out], fan_in));
            out.push((format!("dense{idx}.bias"), vec![fan_out], fan_in));
        };
        match self {
            ModelSpec::Mlp { widths } => {
                for (i, w) in widths.windows(2).enumerate() {
                    dense(&mut out, i, w[0], w[1]);
                }
            }
            ModelSpec::VggTiny {
                height,
                width,
                channels,
                hidden,
            } => {
                let mut in_c = 1;
                for (i, &c) in channels.iter().enumerate() {
                    out.push((format!("conv{i}.weight"), vec![9 * in_c, c], 9 * in_c));
                    out.push((format!("conv{i}.bias"), vec![c], 9 * in_c));
                    in_c = c;
                }
                let flat = (height / 4) * (width / 4) * channels[1];
                dense(&mut out, 0, flat, *hidden);
                dense(&mut out, 1, *hidden, 1);
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_layout()
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }
}

/// Features and `{0, 1}` labels for a set of examples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Tensor,
}

impl Batch {
    pub fn new(features: Tensor, labels: Tensor) -> Result<Self> {
        if features.rank() < 2 || labels.shape() != [features.shape()[0]] {
            return Err(Error::shape("batch", features.shape(), labels.shape()));
        }
        if labels.data().iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::Spec("labels must be exactly 0 or 1".into()));
        }
        Ok(Batch {
            features: features.detach(),
            labels: labels.detach(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fan-in scaled uniform weights `U(±1/√fan_in)`, zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut rng = rng_stream(seed, 0x1417);
    let entries = spec
        .param_layout()
        .into_iter()
        .map(|(name, shape, fan_in)| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let bound = 1.0 / libm::sqrt(fan_in as f64);
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            Ok((name, Tensor::new(&shape, data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    ParamSet::new(entries)
}

/// One logit per example, linked to `params` when they are tracked.
pub fn forward(spec: &ModelSpec, params: &ParamSet, features: &Tensor) -> Result<Tensor> {
    check_params(spec, params)?;
    let n = features.shape().first().copied().unwrap_or(0);
    let mut expected = vec![n];
    expected.extend(spec.input_shape());
    if features.shape() != expected.as_slice() || n == 0 {
        return Err(Error::shape("forward", features.shape(), &expected));
    }
    let p = |i: usize| params.tensor(i);
    let logits = match spec {
        ModelSpec::Mlp { widths } => {
            let layers = widths.len() - 1;
            let mut h = features.clone();
            for l in 0..layers {
                h = h.matmul(p(2 * l))?.add_bias(p(2 * l + 1))?;
                if l + 1 < layers {
                    h = h.relu()?;
                }
            }
            h
        }
        ModelSpec::VggTiny { height, width, .. } => {
            let mut h = features.reshape(&[n, *height, *width, 1])?;
            for block in 0..2 {
                h = h
                    .conv2d(p(2 * block), p(2 * block + 1))?
                    .relu()?
                    .maxpool2d()?;
            }
            let flat = h.numel() / n;
            h.reshape(&[n, flat])?
                .matmul(p(4))?
                .add_bias(p(5))?
                .relu()?
                .matmul(p(6))?
                .add_bias(p(7))?
        }
    };
    logits.reshape(&[n])
}

/// Mean BCE of the model's logits on `batch`.
pub fn batch_loss(spec: &ModelSpec, params: &ParamSet, batch: &Batch) -> Result<Tensor> {
    forward(spec, params, &batch.features)?.bce_with_logits(&batch.labels)
}

fn check_params(spec: &ModelSpec, params: &ParamSet) -> Result<()> {
    let layout = spec.param_layout();
    if layout.len() != params.len() {
        return Err(Error::Congruence(format!(
            "{} expects {} tensors, got {}",
            spec.kind_name(),
            layout.len(),
            params.len()
        )));
    }
    for ((name, shape, _), (pn, pt)) in layout.iter().zip(params.iter()) {
        if name != pn || shape.as_slice() != pt.shape() {
            return Err(Error::Congruence(format!(
                "expected {name}{shape:?}, got {pn}{:?}",
                pt.shape()
            )));
        }
    }
    Ok(())
}
