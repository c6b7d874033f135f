//! Run configuration: a sectioned TOML file merged with command-line
//! overrides, resolved against built-in defaults.
//!
//! Every section field is optional. Resolution fills the gaps, and the
//! fully resolved configuration is written next to a command's outputs so
//! that it alone reproduces the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sitemeta_core::backbone::ModelSpec;
use sitemeta_core::episodes::SynthConfig;
use sitemeta_core::eval::{BaselineConfig, SearchSpace};
use sitemeta_core::metalearn::{MetaConfig, Order};

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

type Result<T> = std::result::Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError(msg.into()))
}

/// Declares a section of optional fields with a right-biased merge.
macro_rules! section {
    ($(#[$m:meta])* $name:ident { $($field:ident : $ty:ty),* $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct $name {
            $(#[serde(default, skip_serializing_if = "Option::is_none")] pub $field: Option<$ty>,)*
        }

        impl $name {
            /// Values set in `over` win.
            pub fn merge(self, over: Self) -> Self {
                $name { $($field: over.$field.or(self.$field),)* }
            }
        }
    };
}

section!(
    /// Paths and process-wide settings.
    CliSection {
        command: String,
        data: PathBuf,
        out: PathBuf,
        checkpoints: PathBuf,
        seed: u64,
        threads: usize,
        verbosity: u8,
    }
);

section!(
    /// Synthetic dataset generation.
    EpisodesSection {
        sites: usize,
        per_site: usize,
        heterogeneity: f64,
        feature_dim: usize,
        split: String,
        holdout_fraction: f64,
        class_separation: f64,
        volume: String,
    }
);

section!(
    /// Network choice; `kind` is `auto`, `mlp` or `vgg_tiny`.
    BackboneSection {
        kind: String,
        hidden: Vec<usize>,
    }
);

section!(MetalearnSection {
    n_sites_per_episode: usize,
    k_support: usize,
    t_target: usize,
    inner_steps: usize,
    inner_lr_init: f64,
    meta_lr: f64,
    lr_table_lr: f64,
    weight_decay: f64,
    order: String,
    msl_anneal_epochs: usize,
    max_epochs: usize,
    early_stop_patience: usize,
    episodes_per_epoch: usize,
    meta_batch_size: usize,
    val_episodes: usize,
});

section!(BaselineSection {
    batch_size: usize,
    pretrain_lr: f64,
    pretrain_epochs: usize,
    finetune_lr: f64,
    scratch_lr: f64,
    finetune_epochs: usize,
    weight_decay: f64,
    patience: usize,
    n_sites: usize,
    k_support: usize,
    val_per_site: usize,
});

section!(
    SearchSection {
        n_trials: usize,
        n_sites: Vec<usize>,
        k_support: Vec<usize>,
        t_target: Vec<usize>,
        budget_fraction: f64,
    }
);

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub cli: CliSection,
    #[serde(default)]
    pub episodes: EpisodesSection,
    #[serde(default)]
    pub backbone: BackboneSection,
    #[serde(default)]
    pub metalearn: MetalearnSection,
    #[serde(default)]
    pub baseline: BaselineSection,
    #[serde(default)]
    pub search: SearchSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ConfigError(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config sections always serialize")
    }

    /// Values set in `over` win.
    pub fn merge(self, over: RunConfig) -> RunConfig {
        RunConfig {
            cli: self.cli.merge(over.cli),
            episodes: self.episodes.merge(over.episodes),
            backbone: self.backbone.merge(over.backbone),
            metalearn: self.metalearn.merge(over.metalearn),
            baseline: self.baseline.merge(over.baseline),
            search: self.search.merge(over.search),
        }
    }

    /// Fills every unset field with its default.
    pub fn resolved(self) -> RunConfig {
        let meta = MetaConfig::default();
        let base = BaselineConfig::default();
        let space = SearchSpace::default();
        let synth = SynthConfig::default();
        let defaults = RunConfig {
            cli: CliSection {
                command: None,
                data: None,
                out: None,
                checkpoints: None,
                seed: Some(0),
                threads: Some(1),
                verbosity: Some(0),
            },
            episodes: EpisodesSection {
                sites: Some(synth.n_sites),
                per_site: Some(synth.n_per_site),
                heterogeneity: Some(synth.heterogeneity),
                feature_dim: Some(synth.feature_dim),
                split: Some(format_split(synth.split)),
                holdout_fraction: Some(synth.holdout_fraction),
                class_separation: Some(synth.class_separation),
                volume: None,
            },
            backbone: BackboneSection {
                kind: Some("auto".into()),
                hidden: Some(vec![32]),
            },
            metalearn: MetalearnSection {
                n_sites_per_episode: Some(meta.n_sites_per_episode),
                k_support: Some(meta.k_support),
                t_target: Some(meta.t_target),
                inner_steps: Some(meta.inner_steps),
                inner_lr_init: Some(meta.inner_lr_init),
                meta_lr: Some(meta.meta_lr),
                lr_table_lr: Some(meta.lr_table_lr),
                weight_decay: Some(meta.weight_decay),
                order: Some(meta.order.name().into()),
                msl_anneal_epochs: Some(meta.msl_anneal_epochs),
                max_epochs: Some(meta.max_epochs),
                early_stop_patience: Some(meta.early_stop_patience),
                episodes_per_epoch: Some(meta.episodes_per_epoch),
                meta_batch_size: Some(meta.meta_batch_size),
                val_episodes: Some(meta.val_episodes),
            },
            baseline: BaselineSection {
                batch_size: Some(base.batch_size),
                pretrain_lr: Some(base.pretrain_lr),
                pretrain_epochs: Some(base.pretrain_epochs),
                finetune_lr: Some(base.finetune_lr),
                scratch_lr: Some(base.scratch_lr),
                finetune_epochs: Some(base.finetune_epochs),
                weight_decay: Some(base.weight_decay),
                patience: Some(base.patience),
                n_sites: Some(base.n_sites),
                k_support: Some(base.k_support),
                val_per_site: Some(base.val_per_site),
            },
            search: SearchSection {
                n_trials: Some(space.n_trials),
                n_sites: Some(space.n_sites),
                k_support: Some(space.k_support),
                t_target: Some(space.t_target),
                budget_fraction: Some(space.budget_fraction),
            },
        };
        let patience_set = self.metalearn.early_stop_patience.is_some();
        let mut out = defaults.merge(self);
        if !patience_set {
            // An unset patience follows a shortened run.
            out.metalearn.early_stop_patience = out
                .metalearn
                .early_stop_patience
                .min(out.metalearn.max_epochs);
        }
        out
    }

    pub fn seed(&self) -> u64 {
        self.cli.seed.unwrap_or(0)
    }

    pub fn threads(&self) -> usize {
        self.cli.threads.unwrap_or(1)
    }

    pub fn data_path(&self) -> Result<&Path> {
        self.cli
            .data
            .as_deref()
            .ok_or_else(|| ConfigError("--data is required".into()))
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.cli
            .out
            .as_deref()
            .ok_or_else(|| ConfigError("--out is required".into()))
    }

    /// Checkpoint directory: `--checkpoints`, else `<out>/checkpoints`.
    pub fn checkpoint_dir(&self) -> Result<PathBuf> {
        match &self.cli.checkpoints {
            Some(p) => Ok(p.clone()),
            None => Ok(self.out_dir()?.join("checkpoints")),
        }
    }

    pub fn meta_config(&self) -> Result<MetaConfig> {
        let r = self.clone().resolved();
        let m = &r.metalearn;
        let order = m.order.as_deref().unwrap_or("second");
        let config = MetaConfig {
            n_sites_per_episode: m.n_sites_per_episode.unwrap_or_default(),
            k_support: m.k_support.unwrap_or_default(),
            t_target: m.t_target.unwrap_or_default(),
            inner_steps: m.inner_steps.unwrap_or_default(),
            inner_lr_init: m.inner_lr_init.unwrap_or_default(),
            meta_lr: m.meta_lr.unwrap_or_default(),
            lr_table_lr: m.lr_table_lr.unwrap_or_default(),
            weight_decay: m.weight_decay.unwrap_or_default(),
            order: Order::parse(order).ok_or_else(|| {
                ConfigError(format!("order must be first or second, got {order}"))
            })?,
            msl_anneal_epochs: m.msl_anneal_epochs.unwrap_or_default(),
            max_epochs: m.max_epochs.unwrap_or_default(),
            early_stop_patience: m.early_stop_patience.unwrap_or_default(),
            episodes_per_epoch: m.episodes_per_epoch.unwrap_or_default(),
            meta_batch_size: m.meta_batch_size.unwrap_or_default(),
            val_episodes: m.val_episodes.unwrap_or_default(),
            seed: r.seed(),
        };
        config.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(config)
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        let r = self.clone().resolved();
        let e = &r.episodes;
        let config = SynthConfig {
            n_sites: e.sites.unwrap_or_default(),
            n_per_site: e.per_site.unwrap_or_default(),
            heterogeneity: e.heterogeneity.unwrap_or_default(),
            feature_dim: e.feature_dim.unwrap_or_default(),
            split: parse_split(e.split.as_deref().unwrap_or_default())?,
            holdout_fraction: e.holdout_fraction.unwrap_or_default(),
            class_separation: e.class_separation.unwrap_or_default(),
            seed: r.seed(),
        };
        if config.split.iter().sum::<usize>() != config.n_sites {
            return err(format!(
                "split {} does not sum to {} sites",
                format_split(config.split),
                config.n_sites
            ));
        }
        Ok(config)
    }

    /// Volume extents when generating 3-D scans instead of feature vectors.
    pub fn volume_extents(&self) -> Result<Option<[usize; 3]>> {
        self.episodes
            .volume
            .as_deref()
            .map(parse_extents)
            .transpose()
    }

    pub fn baseline_config(&self) -> Result<BaselineConfig> {
        let r = self.clone().resolved();
        let b = &r.baseline;
        let config = BaselineConfig {
            batch_size: b.batch_size.unwrap_or_default(),
            pretrain_lr: b.pretrain_lr.unwrap_or_default(),
            pretrain_epochs: b.pretrain_epochs.unwrap_or_default(),
            finetune_lr: b.finetune_lr.unwrap_or_default(),
            scratch_lr: b.scratch_lr.unwrap_or_default(),
            finetune_epochs: b.finetune_epochs.unwrap_or_default(),
            weight_decay: b.weight_decay.unwrap_or_default(),
            patience: b.patience.unwrap_or_default(),
            n_sites: b.n_sites.unwrap_or_default(),
            k_support: b.k_support.unwrap_or_default(),
            val_per_site: b.val_per_site.unwrap_or_default(),
            seed: r.seed(),
        };
        config.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(config)
    }

    pub fn search_space(&self) -> Result<SearchSpace> {
        let r = self.clone().resolved();
        let s = r.search;
        let space = SearchSpace {
            n_trials: s.n_trials.unwrap_or_default(),
            n_sites: s.n_sites.unwrap_or_default(),
            k_support: s.k_support.unwrap_or_default(),
            t_target: s.t_target.unwrap_or_default(),
            budget_fraction: s.budget_fraction.unwrap_or_default(),
            seed: r.cli.seed.unwrap_or_default(),
        };
        space.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(space)
    }

    /// Network for inputs of `input_shape`: `[d]` vectors or `[h, w]` images.
    pub fn model_spec(&self, input_shape: &[usize]) -> Result<ModelSpec> {
        let r = self.clone().resolved();
        let kind = r.backbone.kind.as_deref().unwrap_or("auto");
        let kind = match (kind, input_shape.len()) {
            ("auto", 1) => "mlp",
            ("auto", 2) => "vgg_tiny",
            (k, _) => k,
        };
        let spec = match (kind, input_shape) {
            ("mlp", &[d]) => {
                let mut widths = vec![d];
                widths.extend(r.backbone.hidden.unwrap_or_default());
                widths.push(1);
                ModelSpec::mlp(&widths)
            }
            ("vgg_tiny", &[h, w]) => ModelSpec::vgg_tiny(h, w),
            ("mlp" | "vgg_tiny", shape) => {
                return err(format!("{kind} cannot take inputs of shape {shape:?}"))
            }
            (other, _) => return err(format!("unknown backbone kind {other}")),
        };
        spec.map_err(|e| ConfigError(e.to_string()))
    }
}

pub fn format_split(split: [usize; 3]) -> String {
    format!("{}/{}/{}", split[0], split[1], split[2])
}

pub fn parse_split(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = s.split('/').collect();
    let nums: Option<Vec<usize>> = parts.iter().map(|p| p.trim().parse().ok()).collect();
    match nums.as_deref() {
        Some(&[a, b, c]) => Ok([a, b, c]),
        _ => err(format!("split must look like 30/7/1, got {s}")),
    }
}

pub fn parse_extents(s: &str) -> Result<[usize; 3]> {
    let nums: Option<Vec<usize>> = s.split('x').map(|p| p.trim().parse().ok()).collect();
    match nums.as_deref() {
        Some(&[a, b, c]) if a > 1 && b > 1 && c > 1 => Ok([a, b, c]),
        _ => err(format!("volume extents must look like 32x32x32, got {s}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[metalearn]\nmax_epoch = 3\n").is_err());
        assert!(RunConfig::parse("[nosuch]\n").is_err());
        assert!(RunConfig::parse("[metalearn]\nmax_epochs = 3\n").is_ok());
    }

    #[test]
    fn overrides_win_and_defaults_fill() {
        let file = RunConfig::parse("[metalearn]\nmax_epochs = 3\nk_support = 12\n").unwrap();
        let mut cli = RunConfig::default();
        cli.metalearn.k_support = Some(10);
        let m = file.merge(cli).meta_config().unwrap();
        assert_eq!((m.max_epochs, m.k_support, m.t_target), (3, 10, 10));
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = RunConfig::default();
        c.cli.seed = Some(7);
        c.cli.out = Some("runs/a".into());
        let r = c.resolved();
        assert_eq!(RunConfig::parse(&r.to_toml()).unwrap(), r);
        assert_eq!(r.meta_config().unwrap().seed, 7);
    }

    #[test]
    fn invalid_values_are_reported() {
        let mut c = RunConfig::default();
        c.metalearn.max_epochs = Some(0);
        assert!(c.meta_config().is_err());
        assert!(parse_split("30/7").is_err());
        assert_eq!(parse_split("30/7/1").unwrap(), [30, 7, 1]);
        assert_eq!(parse_extents("32x16x8").unwrap(), [32, 16, 8]);
    }

    #[test]
    fn backbone_follows_the_data() {
        let c = RunConfig::default();
        assert_eq!(c.model_spec(&[16]).unwrap().kind_name(), "mlp");
        assert_eq!(c.model_spec(&[68, 432]).unwrap().kind_name(), "vgg_tiny");
        let mut m = RunConfig::default();
        m.backbone.kind = Some("mlp".into());
        assert!(m.model_spec(&[68, 432]).is_err());
    }
}
