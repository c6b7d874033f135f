//! Bilevel meta-learning over sites.
//!
//! The inner loop adapts a copy of the meta-parameters to one episode's
//! support set with learnable per-tensor, per-step rates. The target-set
//! loss after every inner step is combined with annealed weights and
//! differentiated (through the inner gradients in second order) to update
//! the meta-parameters with AdamW on a cosine schedule.

mod config;
mod inner;
mod lr_table;
mod optim;
mod ring;
mod train;

pub use config::{MetaConfig, Order};
pub use inner::{adapt, episode_loss, inner_adapt, msl_weights, AdaptationTrace, Learner};
pub use lr_table::{LearnableLRTable, RateTensors, MIN_INNER_LR};
pub use optim::{AdamW, CosineSchedule};
pub use ring::{Checkpoint, CheckpointRing, RING_CAPACITY};
pub use train::{
    meta_step, meta_train, pooled_predictions, validation_auc, EarlyStopping, EpochRecord,
    MetaModel, OuterState, StepStats, TrainFailure, TrainOutcome,
};
