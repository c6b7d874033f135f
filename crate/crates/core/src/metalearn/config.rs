use alloc::format;

use crate::error::{Error, Result};
use crate::util::Fnv1a;

/// Whether the meta-gradient differentiates through inner-loop gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Order {
    First,
    Second,
}

impl Order {
    pub fn name(self) -> &'static str {
        match self {
            Order::First => "first",
            Order::Second => "second",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "first" => Some(Order::First),
            "second" => Some(Order::Second),
            _ => None,
        }
    }
}

/// Meta-learning hyperparameters. Defaults: one site per episode with 20
/// support and 10 target examples, one episode per meta-update, Adam with
/// weight decay 1e-4.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaConfig {
    pub n_sites_per_episode: usize,
    pub k_support: usize,
    pub t_target: usize,
    pub inner_steps: usize,
    /// Initial value of every learnable inner-loop rate.
    pub inner_lr_init: f64,
    /// Peak outer (meta) learning rate of the cosine schedule.
    pub meta_lr: f64,
    /// Plain SGD rate for the learnable inner-loop rates.
    pub lr_table_lr: f64,
    pub weight_decay: f64,
    pub order: Order,
    pub msl_anneal_epochs: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub episodes_per_epoch: usize,
    /// Episodes per meta-update.
    pub meta_batch_size: usize,
    pub val_episodes: usize,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            n_sites_per_episode: 1,
            k_support: 20,
            t_target: 10,
            inner_steps: 5,
            inner_lr_init: 0.1,
            meta_lr: 1e-3,
            lr_table_lr: 1e-3,
            weight_decay: 1e-4,
            order: Order::Second,
            msl_anneal_epochs: 10,
            max_epochs: 30,
            early_stop_patience: 20,
            episodes_per_epoch: 20,
            meta_batch_size: 1,
            val_episodes: 10,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_sites_per_episode", self.n_sites_per_episode),
            ("k_support", self.k_support),
            ("t_target", self.t_target),
            ("inner_steps", self.inner_steps),
            ("max_epochs", self.max_epochs),
            ("early_stop_patience", self.early_stop_patience),
            ("episodes_per_epoch", self.episodes_per_epoch),
            ("meta_batch_size", self.meta_batch_size),
            ("val_episodes", self.val_episodes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Spec(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [
            ("inner_lr_init", self.inner_lr_init),
            ("meta_lr", self.meta_lr),
            ("lr_table_lr", self.lr_table_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Spec(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Spec(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.early_stop_patience > self.max_epochs {
            return Err(Error::Spec(format!(
                "early_stop_patience {} exceeds max_epochs {}",
                self.early_stop_patience, self.max_epochs
            )));
        }
        Ok(())
    }

    /// Stable hash of every field.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.write(format!("{self:?}").as_bytes());
        h.finish()
    }

    /// Total meta-updates over a full run; the cosine schedule spans these.
    pub fn total_steps(&self) -> usize {
        self.max_epochs * self.episodes_per_epoch
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = MetaConfig::default();
        c.validate().unwrap();
        assert_eq!(
            (c.n_sites_per_episode, c.k_support, c.t_target),
            (1, 20, 10)
        );
        assert_eq!(c.meta_batch_size, 1);
        assert_eq!(c.weight_decay, 1e-4);
    }

    #[test]
    fn invalid_configs() {
        let bad = |c: MetaConfig| c.validate().is_err();
        assert!(bad(MetaConfig {
            max_epochs: 0,
            ..MetaConfig::default()
        }));
        assert!(bad(MetaConfig {
            inner_steps: 0,
            ..MetaConfig::default()
        }));
        assert!(bad(MetaConfig {
            meta_lr: 0.0,
            ..MetaConfig::default()
        }));
        assert!(bad(MetaConfig {
            early_stop_patience: 40,
            ..MetaConfig::default()
        }));
    }

    #[test]
    fn fingerprint_tracks_fields() {
        let a = MetaConfig::default();
        let b = MetaConfig {
            seed: 1,
            ..a.clone()
        };
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
