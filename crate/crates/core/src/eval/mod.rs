//! Metrics, evaluation protocols, baselines and hyperparameter search.

mod baselines;
pub mod metrics;
mod protocols;
mod search;

pub use baselines::{
    scratch_baseline, supervised_train, transfer_baseline, BaselineConfig, TransferReports,
};
pub use metrics::{
    auc_permutation_p_value, balanced_accuracy, roc_auc, BALANCED_ACCURACY_THRESHOLD,
};
pub use protocols::{
    finetune_few_shot, split_site, zero_shot_eval, EvalReport, SitePredictions, SiteScore,
    SiteSplit,
};
pub use search::{
    random_search, random_search_with, run_trial, sample_trials, select_best, SearchResult,
    SearchSpace, TrialRecord,
};
