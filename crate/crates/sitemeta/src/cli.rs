//! The `sitemeta` command line.
//!
//! Exit codes: 0 on success, 1 on a usage or configuration error, 2 when a
//! command fails at run time.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use sitemeta_core::episodes::{
    preprocess_volume, synth_generate, synth_volumes, SiteDataset, SiteTable,
};
use sitemeta_core::eval::{
    finetune_few_shot, random_search_with, run_trial, scratch_baseline, transfer_baseline,
    zero_shot_eval,
};
use sitemeta_core::metalearn::{meta_train, CheckpointRing};
use sitemeta_core::util::rng_stream;
use sitemeta_core::Tensor;

use crate::binfmt;
use crate::config::{ConfigError, RunConfig};
use crate::report;

pub const DATASET_FILE: &str = "dataset.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

#[derive(Debug, Parser)]
#[command(
    name = "sitemeta",
    version,
    about = "Meta-learning across data-collection sites"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-site dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataFlags,
    },
    /// Turn a dataset of 3-D volumes into z-scored 2-D mosaics.
    Preprocess {
        #[command(flatten)]
        common: Common,
    },
    /// Meta-train and keep the five best checkpoints.
    MetaTrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        meta: MetaFlags,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Few-shot evaluation of a checkpoint ring on the meta-test sites.
    MetaTest {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CheckpointFlags,
        #[command(flatten)]
        meta: MetaFlags,
    },
    /// Evaluate the best checkpoint on the zero-shot site without adaptation.
    ZeroShot {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CheckpointFlags,
    },
    /// Transfer-learning and from-scratch baselines.
    Baseline {
        #[command(flatten)]
        common: Common,
        /// Which baselines to run.
        #[arg(long, value_parser = ["transfer", "scratch", "both"], default_value = "both")]
        kind: String,
        #[command(flatten)]
        baseline: BaselineFlags,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Random search over episode shapes.
    Search {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        search: SearchFlags,
        #[command(flatten)]
        meta: MetaFlags,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Summarise report files as a table.
    Report {
        /// Report JSON files, or directories to scan for them.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Also write the table to `<out>/summary.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// Dataset file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 1 runs everything serially.
    #[arg(long)]
    pub threads: Option<usize>,
    /// TOML configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print progress to standard error.
    #[arg(short, long, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Args)]
pub struct CheckpointFlags {
    /// Directory holding rank0.ckpt, rank1.ckpt, ...; defaults to `<out>/checkpoints`.
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataFlags {
    #[arg(long)]
    pub sites: Option<usize>,
    #[arg(long)]
    pub per_site: Option<usize>,
    #[arg(long)]
    pub heterogeneity: Option<f64>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    /// Meta-train/meta-test/zero-shot site counts, e.g. 30/7/1.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub holdout_fraction: Option<f64>,
    #[arg(long)]
    pub class_separation: Option<f64>,
    /// Generate 3-D volumes of these extents, e.g. 32x32x32.
    #[arg(long)]
    pub volume: Option<String>,
}

#[derive(Debug, Args)]
pub struct MetaFlags {
    #[arg(long)]
    pub n_sites_per_episode: Option<usize>,
    #[arg(long)]
    pub k_support: Option<usize>,
    #[arg(long)]
    pub t_target: Option<usize>,
    #[arg(long)]
    pub inner_steps: Option<usize>,
    #[arg(long)]
    pub inner_lr_init: Option<f64>,
    #[arg(long)]
    pub meta_lr: Option<f64>,
    #[arg(long)]
    pub lr_table_lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long, value_parser = ["first", "second"])]
    pub order: Option<String>,
    #[arg(long)]
    pub msl_anneal_epochs: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub early_stop_patience: Option<usize>,
    #[arg(long)]
    pub episodes_per_epoch: Option<usize>,
    #[arg(long)]
    pub meta_batch_size: Option<usize>,
    #[arg(long)]
    pub val_episodes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    /// auto, mlp or vgg_tiny.
    #[arg(long, value_parser = ["auto", "mlp", "vgg_tiny"])]
    pub backbone: Option<String>,
    /// Hidden widths of the MLP, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct BaselineFlags {
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub pretrain_lr: Option<f64>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_lr: Option<f64>,
    #[arg(long)]
    pub scratch_lr: Option<f64>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Meta-test sites used for fine-tuning.
    #[arg(long)]
    pub n_sites: Option<usize>,
    #[arg(long)]
    pub k_support: Option<usize>,
    #[arg(long)]
    pub val_per_site: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SearchFlags {
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub budget_fraction: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub space_n_sites: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub space_k_support: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub space_t_target: Option<Vec<usize>>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.0)
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<binfmt::FormatError> for CliError {
    fn from(e: binfmt::FormatError) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<sitemeta_core::Error> for CliError {
    fn from(e: sitemeta_core::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T> = Result<T, CliError>;

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("Run `sitemeta help` for usage.");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

impl Common {
    /// Config file, then flags, with `extra` applied on top.
    fn resolve(&self, command: &str, extra: impl FnOnce(&mut RunConfig)) -> CliResult<RunConfig> {
        let file = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut over = RunConfig::default();
        over.cli.command = Some(command.into());
        over.cli.data = self.data.clone();
        over.cli.out = self.out.clone();
        over.cli.seed = self.seed;
        over.cli.threads = self.threads;
        if self.verbose > 0 {
            over.cli.verbosity = Some(self.verbose);
        }
        extra(&mut over);
        let config = file.merge(over).resolved();
        if config.threads() == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        Ok(config)
    }
}

impl MetaFlags {
    fn apply(&self, c: &mut RunConfig) {
        let m = &mut c.metalearn;
        m.n_sites_per_episode = self.n_sites_per_episode;
        m.k_support = self.k_support;
        m.t_target = self.t_target;
        m.inner_steps = self.inner_steps;
        m.inner_lr_init = self.inner_lr_init;
        m.meta_lr = self.meta_lr;
        m.lr_table_lr = self.lr_table_lr;
        m.weight_decay = self.weight_decay;
        m.order = self.order.clone();
        m.msl_anneal_epochs = self.msl_anneal_epochs;
        m.max_epochs = self.max_epochs;
        m.early_stop_patience = self.early_stop_patience;
        m.episodes_per_epoch = self.episodes_per_epoch;
        m.meta_batch_size = self.meta_batch_size;
        m.val_episodes = self.val_episodes;
    }
}

impl ModelFlags {
    fn apply(&self, c: &mut RunConfig) {
        c.backbone.kind = self.backbone.clone();
        c.backbone.hidden = self.hidden.clone();
    }
}

impl DataFlags {
    fn apply(&self, c: &mut RunConfig) {
        let e = &mut c.episodes;
        e.sites = self.sites;
        e.per_site = self.per_site;
        e.heterogeneity = self.heterogeneity;
        e.feature_dim = self.feature_dim;
        e.split = self.split.clone();
        e.holdout_fraction = self.holdout_fraction;
        e.class_separation = self.class_separation;
        e.volume = self.volume.clone();
    }
}

impl BaselineFlags {
    fn apply(&self, c: &mut RunConfig) {
        let b = &mut c.baseline;
        b.batch_size = self.batch_size;
        b.pretrain_lr = self.pretrain_lr;
        b.pretrain_epochs = self.pretrain_epochs;
        b.finetune_lr = self.finetune_lr;
        b.scratch_lr = self.scratch_lr;
        b.finetune_epochs = self.finetune_epochs;
        b.weight_decay = self.weight_decay;
        b.patience = self.patience;
        b.n_sites = self.n_sites;
        b.k_support = self.k_support;
        b.val_per_site = self.val_per_site;
    }
}

impl SearchFlags {
    fn apply(&self, c: &mut RunConfig) {
        let s = &mut c.search;
        s.n_trials = self.trials;
        s.budget_fraction = self.budget_fraction;
        s.n_sites = self.space_n_sites.clone();
        s.k_support = self.space_k_support.clone();
        s.t_target = self.space_t_target.clone();
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    if let Command::Report { inputs, out } = &command {
        return cmd_report(inputs, out.as_deref());
    }
    let config = match &command {
        Command::GenData { common, data } => common.resolve("gen-data", |c| data.apply(c))?,
        Command::Preprocess { common } => common.resolve("preprocess", |_| {})?,
        Command::MetaTrain {
            common,
            meta,
            model,
        } => common.resolve("meta-train", |c| {
            meta.apply(c);
            model.apply(c);
        })?,
        Command::MetaTest { common, ckpt, meta } => common.resolve("meta-test", |c| {
            meta.apply(c);
            c.cli.checkpoints = ckpt.checkpoints.clone();
        })?,
        Command::ZeroShot { common, ckpt } => common.resolve("zero-shot", |c| {
            c.cli.checkpoints = ckpt.checkpoints.clone();
        })?,
        Command::Baseline {
            common,
            baseline,
            model,
            ..
        } => common.resolve("baseline", |c| {
            baseline.apply(c);
            model.apply(c);
        })?,
        Command::Search {
            common,
            search,
            meta,
            model,
        } => common.resolve("search", |c| {
            search.apply(c);
            meta.apply(c);
            model.apply(c);
        })?,
        Command::Report { .. } => unreachable!("handled above"),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads())
        .build()
        .map_err(|e| CliError::Runtime(e.into()))?;
    pool.install(|| match &command {
        Command::GenData { .. } => cmd_gen_data(&config),
        Command::Preprocess { .. } => cmd_preprocess(&config),
        Command::MetaTrain { .. } => cmd_meta_train(&config),
        Command::MetaTest { .. } => cmd_meta_test(&config),
        Command::ZeroShot { .. } => cmd_zero_shot(&config),
        Command::Baseline { kind, .. } => cmd_baseline(&config, kind),
        Command::Search { .. } => cmd_search(&config),
        Command::Report { .. } => unreachable!("handled above"),
    })
}

/// File recording the resolved configuration of `command`.
pub fn resolved_config_name(command: &str) -> String {
    format!("{command}.config.toml")
}

/// Creates the output directory and records the resolved configuration.
fn prepare_out(config: &RunConfig) -> CliResult<PathBuf> {
    let out = config.out_dir()?.to_path_buf();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(resolved_config_name(
        config.cli.command.as_deref().unwrap_or("run"),
    ));
    std::fs::write(&path, config.to_toml())
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(out)
}

fn load_data(config: &RunConfig) -> CliResult<SiteTable> {
    let path = config.data_path()?;
    binfmt::load_dataset(path)
        .with_context(|| format!("loading dataset {}", path.display()))
        .map_err(CliError::Runtime)
}

fn load_checkpoints(config: &RunConfig) -> CliResult<CheckpointRing> {
    let dir = config.checkpoint_dir()?;
    let entries = binfmt::load_ring(&dir)
        .with_context(|| format!("loading checkpoints from {}", dir.display()))?;
    let mut ring = CheckpointRing::with_capacity(entries.len());
    for c in entries {
        ring.offer(c);
    }
    Ok(ring)
}

fn say(config: &RunConfig, msg: impl FnOnce() -> String) {
    if config.cli.verbosity.unwrap_or(0) > 0 {
        eprintln!("{}", msg());
    }
}

fn cmd_gen_data(config: &RunConfig) -> CliResult<()> {
    let synth = config.synth_config()?;
    let extents = config.volume_extents()?;
    let out = prepare_out(config)?;
    let table = match extents {
        Some(e) => synth_volumes(&synth, e)?,
        None => synth_generate(&synth)?,
    };
    binfmt::save_dataset(&out.join(DATASET_FILE), &table)?;
    say(config, || {
        format!(
            "wrote {} sites (roles {}/{}/{})",
            table.sites.len(),
            table.roles.meta_train.len(),
            table.roles.meta_test.len(),
            table.roles.zero_shot.len()
        )
    });
    Ok(())
}

fn preprocess_site(site: &SiteDataset) -> sitemeta_core::Result<SiteDataset> {
    let shape = site.feature_shape().to_vec();
    let per = shape.iter().product::<usize>();
    let mosaics = (0..site.len())
        .into_par_iter()
        .map(|i| {
            let volume = Tensor::new(
                &shape,
                site.features.data()[i * per..(i + 1) * per].to_vec(),
            )?;
            preprocess_volume(&volume)
        })
        .collect::<sitemeta_core::Result<Vec<Tensor>>>()?;
    let mosaic_shape = mosaics[0].shape().to_vec();
    let mut dims = vec![site.len()];
    dims.extend(&mosaic_shape);
    let data = mosaics
        .iter()
        .flat_map(|m| m.data().iter().copied())
        .collect();
    SiteDataset::new(
        site.site_id,
        Tensor::new(&dims, data)?,
        site.labels.clone(),
        site.holdout,
        site.generation.clone(),
    )
}

fn cmd_preprocess(config: &RunConfig) -> CliResult<()> {
    let table = load_data(config)?;
    if table.feature_shape().len() != 3 {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "preprocess expects 3-D volumes, dataset has feature shape {:?}",
            table.feature_shape()
        )));
    }
    let out = prepare_out(config)?;
    let sites = table
        .sites
        .iter()
        .map(preprocess_site)
        .collect::<sitemeta_core::Result<Vec<_>>>()?;
    let mosaics = SiteTable::new(sites, table.roles.clone())?;
    binfmt::save_dataset(&out.join(DATASET_FILE), &mosaics)?;
    Ok(())
}

fn save_ring(dir: &Path, ring: &CheckpointRing) -> CliResult<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for rank in 0.. {
        let path = dir.join(binfmt::checkpoint_name(rank));
        match ring.entries().get(rank) {
            Some(c) => binfmt::save_checkpoint(&path, c)?,
            None if path.exists() => {
                // Stale file from an earlier, longer ring.
                std::fs::remove_file(&path)
                    .with_context(|| format!("removing {}", path.display()))?;
            }
            None => break,
        }
    }
    Ok(())
}

fn cmd_meta_train(config: &RunConfig) -> CliResult<()> {
    let meta = config.meta_config()?;
    let table = load_data(config)?;
    let spec = config.model_spec(table.feature_shape())?;
    let out = prepare_out(config)?;
    let ckpt_dir = config.checkpoint_dir()?;
    match meta_train(&table, &spec, &meta) {
        Ok(outcome) => {
            report::write_training_log(&out.join(TRAIN_LOG_FILE), &outcome.log)?;
            save_ring(&ckpt_dir, &outcome.ring)?;
            say(config, || {
                let mut s = String::new();
                for r in &outcome.log {
                    s += &format!(
                        "epoch {} loss {:.4} val_auc {:.4}\n",
                        r.epoch, r.train_loss, r.val_auc
                    );
                }
                s.trim_end().to_string()
            });
            Ok(())
        }
        Err(failure) => {
            report::write_training_log(&out.join(TRAIN_LOG_FILE), &failure.log)?;
            save_ring(&ckpt_dir, &failure.ring)?;
            Err(CliError::Runtime(
                anyhow::Error::from(failure.error).context("meta-training stopped"),
            ))
        }
    }
}

fn cmd_meta_test(config: &RunConfig) -> CliResult<()> {
    let meta = config.meta_config()?;
    let table = load_data(config)?;
    let ring = load_checkpoints(config)?;
    let out = prepare_out(config)?;
    let mut rng = rng_stream(meta.seed, 7);
    let report = finetune_few_shot(&ring, &table, &meta, &mut rng)?;
    report::write_report(&out, &report)?;
    say(config, || {
        format!("meta_test pooled AUC {:.4}", report.pooled_auc)
    });
    Ok(())
}

fn cmd_zero_shot(config: &RunConfig) -> CliResult<()> {
    let table = load_data(config)?;
    let ring = load_checkpoints(config)?;
    let out = prepare_out(config)?;
    let best = ring.best().expect("load_ring never returns an empty ring");
    let report = zero_shot_eval(best, &table)?;
    report::write_report(&out, &report)?;
    say(config, || format!("zero_shot AUC {:.4}", report.pooled_auc));
    Ok(())
}

fn cmd_baseline(config: &RunConfig, kind: &str) -> CliResult<()> {
    let base = config.baseline_config()?;
    let table = load_data(config)?;
    let spec = config.model_spec(table.feature_shape())?;
    let out = prepare_out(config)?;
    let (transfer, scratch) = rayon::join(
        || (kind != "scratch").then(|| transfer_baseline(&table, &spec, &base)),
        || (kind != "transfer").then(|| scratch_baseline(&table, &spec, &base)),
    );
    if let Some(t) = transfer {
        let t = t?;
        report::write_report(&out, &t.meta_test)?;
        report::write_report(&out, &t.zero_shot)?;
    }
    if let Some(s) = scratch {
        report::write_report(&out, &s?)?;
    }
    Ok(())
}

fn cmd_search(config: &RunConfig) -> CliResult<()> {
    let space = config.search_space()?;
    let base = config.meta_config()?;
    let table = load_data(config)?;
    let spec = config.model_spec(table.feature_shape())?;
    let out = prepare_out(config)?;
    let result = random_search_with(&space, &base, |configs| {
        configs
            .par_iter()
            .map(|c| run_trial(&table, &spec, c))
            .collect()
    });
    let result = result?;
    report::write_trials(&out.join("search_trials.csv"), &result.trials)?;
    let mut best = config.clone();
    let m = &mut best.metalearn;
    m.n_sites_per_episode = Some(result.best.n_sites_per_episode);
    m.k_support = Some(result.best.k_support);
    m.t_target = Some(result.best.t_target);
    best.cli.command = Some("meta-train".into());
    std::fs::write(out.join("best_config.toml"), best.to_toml())
        .context("writing best_config.toml")?;
    say(config, || format!("best trial {}", result.best_index));
    Ok(())
}

fn collect_reports(inputs: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(input)
                .with_context(|| format!("reading {}", input.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    Ok(files)
}

fn cmd_report(inputs: &[PathBuf], out: Option<&Path>) -> CliResult<()> {
    let files = collect_reports(inputs)?;
    if files.is_empty() {
        return Err(CliError::Usage("no report files found".into()));
    }
    let reports = files
        .iter()
        .map(|p| report::read_report(p))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut table = Vec::new();
    report::summary_table(&reports, &mut table).context("formatting summary")?;
    std::io::stdout()
        .write_all(&table)
        .context("writing summary")?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join("summary.txt"), &table).context("writing summary.txt")?;
    }
    Ok(())
}
