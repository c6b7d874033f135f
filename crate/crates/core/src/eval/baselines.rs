use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use super::metrics::roc_auc;
use super::protocols::{
    score, split_site, zero_shot_params, EvalReport, SitePredictions, SiteSplit,
};
use crate::backbone::{batch_loss, forward, init_params, Batch, ModelSpec};
use crate::episodes::{gather_batch, Role, SiteTable};
use crate::error::{Error, Result};
use crate::metalearn::{AdamW, CosineSchedule, EarlyStopping};
use crate::tensor::{grad, ParamSet};
use crate::util::{rng_stream, Fnv1a};

/// Settings of the conventional supervised baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub batch_size: usize,
    pub pretrain_lr: f64,
    pub pretrain_epochs: usize,
    pub finetune_lr: f64,
    pub scratch_lr: f64,
    pub finetune_epochs: usize,
    pub weight_decay: f64,
    pub patience: usize,
    /// Meta-test sites used for fine-tuning and evaluation.
    pub n_sites: usize,
    pub k_support: usize,
    pub val_per_site: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            batch_size: 16,
            pretrain_lr: 3e-4,
            pretrain_epochs: 30,
            finetune_lr: 1e-4,
            scratch_lr: 3e-4,
            finetune_epochs: 30,
            weight_decay: 1e-4,
            patience: 20,
            n_sites: 3,
            k_support: 20,
            val_per_site: 5,
            seed: 0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Spec(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        for (name, v) in [
            ("pretrain_lr", self.pretrain_lr),
            ("finetune_lr", self.finetune_lr),
            ("scratch_lr", self.scratch_lr),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Spec(format!("{name} must be positive")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.n_sites == 0 {
            return bad("n_sites must be at least 1");
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.write(format!("{self:?}").as_bytes());
        h.finish()
    }
}

/// Minibatch supervised training with decoupled-decay Adam and a cosine
/// schedule. With a validation batch, keeps the parameters of the epoch
/// with the best validation AUC and stops after `patience` epochs without
/// improvement. With zero epochs the initial parameters come back as is.
#[allow(clippy::too_many_arguments)]
pub fn supervised_train(
    spec: &ModelSpec,
    init: &ParamSet,
    train: &Batch,
    val: Option<&Batch>,
    lr: f64,
    epochs: usize,
    config: &BaselineConfig,
    rng: &mut impl Rng,
) -> Result<ParamSet> {
    if train.is_empty() {
        return Err(Error::Precondition("no training examples".into()));
    }
    let n = train.len();
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let schedule = CosineSchedule {
        base: lr,
        total_steps: epochs * batches_per_epoch,
    };
    let mut adam = AdamW::new(init.num_scalars(), config.weight_decay);
    let mut params = init.detach();
    let mut best = params.clone();
    let mut stopper = EarlyStopping::new(config.patience.max(1));
    let mut best_auc = f64::NEG_INFINITY;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    let shape = train.features.shape()[1..].to_vec();
    let row = shape.iter().product::<usize>();

    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size) {
            let mut feats = Vec::with_capacity(chunk.len() * row);
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                feats.extend_from_slice(&train.features.data()[i * row..(i + 1) * row]);
                labels.push(train.labels.data()[i]);
            }
            let mut bshape = alloc::vec![chunk.len()];
            bshape.extend_from_slice(&shape);
            let batch = Batch::new(
                crate::Tensor::new(&bshape, feats)?,
                crate::Tensor::from_vec(labels)?,
            )?;
            let leaves = params.to_leaves();
            let loss = batch_loss(spec, &leaves, &batch)?;
            let g = grad(&loss, &leaves, false)?;
            let mut values = params.flatten();
            adam.step(&mut values, &g.flatten(), schedule.rate(step));
            params = params.with_values(&values)?;
            step += 1;
        }
        if let Some(v) = val {
            let logits = forward(spec, &params, &v.features)?;
            let labels: Vec<u8> = v.labels.data().iter().map(|&y| y as u8).collect();
            let auc = roc_auc(logits.data(), &labels)?;
            if auc > best_auc {
                best_auc = auc;
                best = params.clone();
            }
            if stopper.update(auc) {
                break;
            }
        } else {
            best = params.clone();
        }
    }
    Ok(best)
}

/// Reports of the two-stage transfer baseline.
#[derive(Debug, Clone)]
pub struct TransferReports {
    pub meta_test: EvalReport,
    pub zero_shot: EvalReport,
    pub pretrained: ParamSet,
}

fn eval_splits(
    table: &SiteTable,
    config: &BaselineConfig,
    rng: &mut impl Rng,
) -> Result<Vec<SiteSplit>> {
    let sites = table.role_sites(Role::MetaTest);
    if sites.len() < config.n_sites {
        return Err(Error::Precondition(format!(
            "{} meta-test sites requested, {} available",
            config.n_sites,
            sites.len()
        )));
    }
    sites[..config.n_sites]
        .iter()
        .map(|&id| split_site(table.site(id), config.k_support, config.val_per_site, rng))
        .collect()
}

fn pooled(
    table: &SiteTable,
    splits: &[SiteSplit],
    pick: impl Fn(&SiteSplit) -> &[usize],
) -> Result<Batch> {
    let parts: Vec<_> = splits
        .iter()
        .map(|s| (table.site(s.site_id), pick(s)))
        .collect();
    gather_batch(&parts)
}

/// Fine-tunes `init` on the pooled support of the evaluation sites and
/// scores each site's test examples.
fn finetune_and_score(
    spec: &ModelSpec,
    init: &ParamSet,
    table: &SiteTable,
    lr: f64,
    protocol: &str,
    config: &BaselineConfig,
    rng: &mut impl Rng,
) -> Result<EvalReport> {
    let splits = eval_splits(table, config, rng)?;
    let train = pooled(table, &splits, |s| &s.support)?;
    let val = if config.val_per_site > 0 {
        Some(pooled(table, &splits, |s| &s.validation)?)
    } else {
        None
    };
    let tuned = supervised_train(
        spec,
        init,
        &train,
        val.as_ref(),
        lr,
        config.finetune_epochs,
        config,
        rng,
    )?;
    let per_site = splits
        .iter()
        .map(|s| score(spec, &tuned, table.site(s.site_id), &s.test))
        .collect::<Result<Vec<SitePredictions>>>()?;
    EvalReport::from_predictions(protocol, per_site, config.fingerprint(), config.seed)
}

/// Pooled supervised pretraining on every meta-train site, early-stopped on
/// the meta-validation holdouts, followed by conventional fine-tuning on a
/// few meta-test sites. The pretrained model is also scored zero-shot.
pub fn transfer_baseline(
    table: &SiteTable,
    spec: &ModelSpec,
    config: &BaselineConfig,
) -> Result<TransferReports> {
    config.validate()?;
    spec.validate()?;
    if config.k_support == 0 {
        return Err(Error::Precondition("k_support must be at least 1".into()));
    }
    let train_sites = table.role_sites(Role::MetaTrain);
    if train_sites.is_empty() {
        return Err(Error::Precondition("meta_train role is empty".into()));
    }
    let train_idx: Vec<Vec<usize>> = train_sites
        .iter()
        .map(|&id| table.site(id).train_indices().collect())
        .collect();
    let hold_idx: Vec<Vec<usize>> = train_sites
        .iter()
        .map(|&id| table.site(id).holdout_indices().collect())
        .collect();
    let train = gather_batch(
        &train_sites
            .iter()
            .zip(&train_idx)
            .map(|(&id, ix)| (table.site(id), ix.as_slice()))
            .collect::<Vec<_>>(),
    )?;
    let val_parts: Vec<_> = train_sites
        .iter()
        .zip(&hold_idx)
        .filter(|(_, ix)| !ix.is_empty())
        .map(|(&id, ix)| (table.site(id), ix.as_slice()))
        .collect();
    let val = if val_parts.is_empty() {
        None
    } else {
        Some(gather_batch(&val_parts)?)
    };

    let mut rng = rng_stream(config.seed, 10);
    let init = init_params(spec, config.seed)?;
    let pretrained = supervised_train(
        spec,
        &init,
        &train,
        val.as_ref(),
        config.pretrain_lr,
        config.pretrain_epochs,
        config,
        &mut rng,
    )?;
    let mut eval_rng = rng_stream(config.seed, 11);
    let meta_test = finetune_and_score(
        spec,
        &pretrained,
        table,
        config.finetune_lr,
        "transfer",
        config,
        &mut eval_rng,
    )?;
    let zero_shot = zero_shot_params(
        spec,
        &pretrained,
        table,
        "transfer_zero_shot",
        config.fingerprint(),
        config.seed,
    )?;
    Ok(TransferReports {
        meta_test,
        zero_shot,
        pretrained,
    })
}

/// Trains a randomly initialised network on the few-shot support of the
/// evaluation sites alone.
pub fn scratch_baseline(
    table: &SiteTable,
    spec: &ModelSpec,
    config: &BaselineConfig,
) -> Result<EvalReport> {
    config.validate()?;
    spec.validate()?;
    if config.k_support == 0 {
        return Err(Error::Precondition("k_support must be at least 1".into()));
    }
    let init = init_params(spec, config.seed)?;
    // Same evaluation split as the transfer baseline.
    let mut eval_rng = rng_stream(config.seed, 11);
    finetune_and_score(
        spec,
        &init,
        table,
        config.scratch_lr,
        "scratch",
        config,
        &mut eval_rng,
    )
}
