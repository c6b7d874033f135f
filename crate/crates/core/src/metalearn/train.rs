use alloc::vec::Vec;

use rand::Rng;

use super::{
    adapt, episode_loss, AdamW, Checkpoint, CheckpointRing, CosineSchedule, LearnableLRTable,
    Learner, MetaConfig,
};
use crate::backbone::{forward, init_params, ModelSpec};
use crate::episodes::{sample_episode, Episode, Role, SiteTable};
use crate::error::{Error, Result};
use crate::eval::metrics::roc_auc;
use crate::tensor::{grad_tensors, ParamSet, Tensor};
use crate::util::rng_stream;

/// Meta-parameters together with their learned inner-loop rates.
#[derive(Debug, Clone)]
pub struct MetaModel {
    pub params: ParamSet,
    pub lr_table: LearnableLRTable,
}

impl MetaModel {
    pub fn init(spec: &ModelSpec, config: &MetaConfig) -> Result<Self> {
        let params = init_params(spec, config.seed)?;
        let lr_table = LearnableLRTable::new(&params, config.inner_steps, config.inner_lr_init)?;
        Ok(MetaModel { params, lr_table })
    }
}

/// Outer optimizer state: Adam moments and the schedule position.
#[derive(Debug, Clone)]
pub struct OuterState {
    pub adam: AdamW,
    pub schedule: CosineSchedule,
    pub lr_table_lr: f64,
    pub step: usize,
}

impl OuterState {
    pub fn new(config: &MetaConfig, n_params: usize) -> Self {
        OuterState {
            adam: AdamW::new(n_params, config.weight_decay),
            schedule: CosineSchedule {
                base: config.meta_lr,
                total_steps: config.total_steps(),
            },
            lr_table_lr: config.lr_table_lr,
            step: 0,
        }
    }

    /// Rate the next meta-update will use.
    pub fn current_rate(&self) -> f64 {
        self.schedule.rate(self.step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub outer_lr: f64,
}

/// One meta-update from a batch of episodes.
///
/// The mean episode loss is differentiated with respect to the
/// meta-parameters and the inner-loop rates. Parameters take a decoupled
/// weight-decay Adam step at the scheduled rate; the rates take a plain SGD
/// step and are clamped positive. Nothing is mutated when the loss or any
/// gradient is non-finite.
pub fn meta_step<L: Learner + ?Sized>(
    learner: &L,
    model: &mut MetaModel,
    episodes: &[Episode],
    config: &MetaConfig,
    epoch: usize,
    state: &mut OuterState,
) -> Result<StepStats> {
    if episodes.is_empty() {
        return Err(Error::Spec("meta_step needs at least one episode".into()));
    }
    let theta = model.params.to_leaves();
    let rates = model.lr_table.tensors(true);
    let mut total: Option<Tensor> = None;
    for ep in episodes {
        let (loss, _) = episode_loss(learner, &theta, ep, &rates, config, epoch)?;
        total = Some(match total {
            Some(t) => t.add(&loss)?,
            None => loss,
        });
    }
    let mean = total
        .expect("non-empty")
        .scale(1.0 / episodes.len() as f64)?;
    if !mean.is_finite() {
        return Err(Error::non_finite("meta loss"));
    }

    let mut wrt: Vec<&Tensor> = theta.tensors().collect();
    let n_theta = wrt.len();
    wrt.extend(rates.all());
    let grads = grad_tensors(&mean, &wrt, false)?;
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::non_finite(if i < n_theta {
            alloc::format!("meta-gradient of {}", theta.name(i))
        } else {
            "meta-gradient of inner rates".into()
        }));
    }

    let flat_grad: Vec<f64> = grads[..n_theta]
        .iter()
        .flat_map(|g| g.data().iter().copied())
        .collect();
    let mut values = model.params.flatten();
    let outer_lr = state.current_rate();
    state.adam.step(&mut values, &flat_grad, outer_lr);
    let steps = model.lr_table.steps();
    let rate_grads: Vec<Vec<f64>> = grads[n_theta..]
        .chunks(steps)
        .map(|c| c.iter().map(Tensor::item).collect())
        .collect();
    model.params = model.params.with_values(&values)?;
    model.lr_table.sgd_update(&rate_grads, state.lr_table_lr);
    state.step += 1;
    Ok(StepStats {
        loss: mean.item(),
        outer_lr,
    })
}

/// Stops after `patience` consecutive epochs without a strictly better score.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::NEG_INFINITY,
            since_best: 0,
        }
    }

    /// Records a score; returns true when training should stop.
    pub fn update(&mut self, score: f64) -> bool {
        if score > self.best {
            self.best = score;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub outer_lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub ring: CheckpointRing,
    pub log: Vec<EpochRecord>,
    pub final_model: MetaModel,
}

/// A run that ended in an error, with everything logged up to it.
#[derive(Debug, Clone)]
pub struct TrainFailure {
    pub error: Error,
    pub log: Vec<EpochRecord>,
    pub ring: CheckpointRing,
}

/// Adapts on each episode's support and scores its target.
/// Returns `(scores, labels)` pooled across episodes.
pub fn pooled_predictions(
    spec: &ModelSpec,
    model: &MetaModel,
    episodes: &[Episode],
    steps: usize,
) -> Result<(Vec<f64>, Vec<u8>)> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for ep in episodes {
        let adapted = adapt(spec, &model.params, &ep.support, &model.lr_table, steps)?;
        scores.extend_from_slice(forward(spec, &adapted, &ep.target.features)?.data());
        labels.extend(ep.target.labels.data().iter().map(|&y| y as u8));
    }
    Ok((scores, labels))
}

fn sample_batch(
    table: &SiteTable,
    role: Role,
    config: &MetaConfig,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Episode>> {
    (0..count)
        .map(|_| {
            sample_episode(
                table,
                role,
                config.n_sites_per_episode,
                config.k_support,
                config.t_target,
                rng,
            )
        })
        .collect()
}

/// Validation ROC-AUC on pooled meta-val target predictions. The same
/// validation episodes are drawn every epoch.
pub fn validation_auc(
    spec: &ModelSpec,
    model: &MetaModel,
    table: &SiteTable,
    config: &MetaConfig,
) -> Result<f64> {
    let mut rng = rng_stream(config.seed, 3);
    let episodes = sample_batch(table, Role::MetaVal, config, config.val_episodes, &mut rng)?;
    let (scores, labels) = pooled_predictions(spec, model, &episodes, config.inner_steps)?;
    roc_auc(&scores, &labels)
}

/// Full meta-training run.
///
/// Each epoch runs `episodes_per_epoch` meta-updates on meta-train sites,
/// then scores the model on meta-val episodes and offers it to the
/// checkpoint ring. Training ends at `max_epochs` or after
/// `early_stop_patience` epochs without a better validation AUC. A
/// non-finite meta-update is skipped; two in a row end the run.
pub fn meta_train(
    table: &SiteTable,
    spec: &ModelSpec,
    config: &MetaConfig,
) -> core::result::Result<TrainOutcome, TrainFailure> {
    let mut ring = CheckpointRing::new();
    let mut log = Vec::new();
    let fail = |error: Error, log: Vec<EpochRecord>, ring: CheckpointRing| TrainFailure {
        error,
        log,
        ring,
    };

    let setup = (|| {
        config.validate()?;
        spec.validate()?;
        if table.roles.meta_train.is_empty() {
            return Err(Error::Precondition("meta_train role is empty".into()));
        }
        if table
            .roles
            .meta_train
            .iter()
            .any(|&id| table.site(id).holdout == 0)
        {
            return Err(Error::Precondition(
                "meta-train sites need held-out validation examples".into(),
            ));
        }
        MetaModel::init(spec, config)
    })();
    let mut model = match setup {
        Ok(m) => m,
        Err(e) => return Err(fail(e, log, ring)),
    };
    let mut state = OuterState::new(config, model.params.num_scalars());
    let mut rng = rng_stream(config.seed, 2);
    let mut stopper = EarlyStopping::new(config.early_stop_patience);
    let mut consecutive_aborts = 0;

    for epoch in 0..config.max_epochs {
        let mut losses = Vec::with_capacity(config.episodes_per_epoch);
        let mut last_lr = state.current_rate();
        for _ in 0..config.episodes_per_epoch {
            let batch = match sample_batch(
                table,
                Role::MetaTrain,
                config,
                config.meta_batch_size,
                &mut rng,
            ) {
                Ok(b) => b,
                Err(e) => return Err(fail(e, log, ring)),
            };
            match meta_step(spec, &mut model, &batch, config, epoch, &mut state) {
                Ok(stats) => {
                    consecutive_aborts = 0;
                    losses.push(stats.loss);
                    last_lr = stats.outer_lr;
                }
                Err(e) if e.is_non_finite() => {
                    // The schedule still advances past the skipped update.
                    state.step += 1;
                    consecutive_aborts += 1;
                    if consecutive_aborts >= 2 {
                        return Err(fail(e, log, ring));
                    }
                }
                Err(e) => return Err(fail(e, log, ring)),
            }
        }
        let train_loss = if losses.is_empty() {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        let val_auc = match validation_auc(spec, &model, table, config) {
            Ok(v) => v,
            Err(e) => return Err(fail(e, log, ring)),
        };
        ring.offer(Checkpoint {
            score: val_auc,
            epoch,
            spec: spec.clone(),
            params: model.params.clone(),
            lr_table: model.lr_table.clone(),
            config: config.clone(),
        });
        log.push(EpochRecord {
            epoch,
            train_loss,
            val_auc,
            outer_lr: last_lr,
        });
        if stopper.update(val_auc) {
            break;
        }
    }
    Ok(TrainOutcome {
        ring,
        log,
        final_model: model,
    })
}
