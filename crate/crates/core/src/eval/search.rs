use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::backbone::ModelSpec;
use crate::episodes::SiteTable;
use crate::error::{Error, Result};
use crate::metalearn::{meta_train, MetaConfig};
use crate::util::rng_stream;

/// Episode-shape hyperparameters explored by random search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    pub n_sites: Vec<usize>,
    pub k_support: Vec<usize>,
    pub t_target: Vec<usize>,
    pub n_trials: usize,
    pub seed: u64,
    /// Fraction of the base `max_epochs` each trial trains for.
    pub budget_fraction: f64,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            n_sites: (1..=6).collect(),
            k_support: alloc::vec![10, 12, 15, 18, 20],
            t_target: alloc::vec![2, 5, 8, 10],
            n_trials: 10,
            seed: 0,
            budget_fraction: 0.2,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.n_sites.is_empty() || self.k_support.is_empty() || self.t_target.is_empty() {
            return Err(Error::Spec("search space axes must be non-empty".into()));
        }
        if self.n_trials == 0 {
            return Err(Error::Spec("n_trials must be at least 1".into()));
        }
        if !(self.budget_fraction > 0.0 && self.budget_fraction <= 1.0) {
            return Err(Error::Spec("budget_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Trial configurations: `base` with the episode shape drawn uniformly
/// from the space and a shortened training budget.
pub fn sample_trials(space: &SearchSpace, base: &MetaConfig) -> Result<Vec<MetaConfig>> {
    space.validate()?;
    let mut rng = rng_stream(space.seed, 20);
    let epochs = (libm::ceil(base.max_epochs as f64 * space.budget_fraction) as usize).max(1);
    Ok((0..space.n_trials)
        .map(|_| {
            let mut c = base.clone();
            c.n_sites_per_episode = space.n_sites[rng.random_range(0..space.n_sites.len())];
            c.k_support = space.k_support[rng.random_range(0..space.k_support.len())];
            c.t_target = space.t_target[rng.random_range(0..space.t_target.len())];
            c.max_epochs = epochs;
            c.early_stop_patience = c.early_stop_patience.min(epochs).max(1);
            c
        })
        .collect())
}

/// Best meta-validation AUC reached by a shortened training run.
pub fn run_trial(table: &SiteTable, spec: &ModelSpec, config: &MetaConfig) -> Result<f64> {
    let outcome = meta_train(table, spec, config).map_err(|f| f.error)?;
    outcome
        .ring
        .best()
        .map(|c| c.score)
        .ok_or_else(|| Error::Precondition("trial produced no checkpoint".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub index: usize,
    pub config: MetaConfig,
    pub score: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best_index: usize,
    pub best: MetaConfig,
    pub trials: Vec<TrialRecord>,
}

/// Picks the trial with the highest score; ties go to the lower index.
/// Failed trials are recorded and skipped.
pub fn select_best(trials: &[TrialRecord]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for t in trials {
        if let Some(s) = t.score {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((t.index, s));
            }
        }
    }
    best.map(|(i, _)| i).ok_or(Error::SearchExhausted {
        trials: trials.len(),
    })
}

/// Random search over episode shapes, running trials with `runner`.
/// The runner lets callers evaluate trials in parallel.
pub fn random_search_with(
    space: &SearchSpace,
    base: &MetaConfig,
    runner: impl FnOnce(&[MetaConfig]) -> Vec<Result<f64>>,
) -> Result<SearchResult> {
    let configs = sample_trials(space, base)?;
    let results = runner(&configs);
    if results.len() != configs.len() {
        return Err(Error::Spec(
            "runner returned the wrong number of results".into(),
        ));
    }
    let trials: Vec<TrialRecord> = configs
        .into_iter()
        .zip(results)
        .enumerate()
        .map(|(index, (config, r))| TrialRecord {
            index,
            config,
            score: r.as_ref().ok().copied(),
            error: r.err().map(|e| e.to_string()),
        })
        .collect();
    let best_index = select_best(&trials)?;
    Ok(SearchResult {
        best_index,
        best: trials[best_index].config.clone(),
        trials,
    })
}

/// Serial random search.
pub fn random_search(
    space: &SearchSpace,
    table: &SiteTable,
    spec: &ModelSpec,
    base: &MetaConfig,
) -> Result<SearchResult> {
    random_search_with(space, base, |configs| {
        configs.iter().map(|c| run_trial(table, spec, c)).collect()
    })
}
