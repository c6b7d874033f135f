use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use super::metrics::{balanced_accuracy, roc_auc, BALANCED_ACCURACY_THRESHOLD};
use crate::backbone::{forward, ModelSpec};
use crate::episodes::{draw_balanced, Role, SiteDataset, SiteTable};
use crate::error::{Error, Result};
use crate::metalearn::{adapt, Checkpoint, CheckpointRing, MetaConfig};
use crate::tensor::ParamSet;

#[derive(Debug, Clone, PartialEq)]
pub struct SiteScore {
    pub site_id: usize,
    pub n: usize,
    /// `None` when the site's scored examples hold a single class.
    pub auc: Option<f64>,
    pub balanced_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub protocol: String,
    pub per_site: Vec<SiteScore>,
    pub pooled_auc: f64,
    pub pooled_balanced_accuracy: f64,
    pub n: usize,
    pub config_hash: u64,
    pub seed: u64,
    /// Ring position of the checkpoint that produced the scores, if any.
    pub selected_checkpoint: Option<usize>,
    /// Checkpoints that were fine-tuned and compared.
    pub candidates: usize,
    /// Scored examples per site, in `per_site` order.
    pub predictions: Vec<SitePredictions>,
}

/// Scores and labels of one site, in scoring order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SitePredictions {
    pub site_id: usize,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl EvalReport {
    /// Aggregates per-site predictions; sites are reported in id order.
    pub fn from_predictions(
        protocol: &str,
        mut sites: Vec<SitePredictions>,
        config_hash: u64,
        seed: u64,
    ) -> Result<Self> {
        sites.sort_by_key(|s| s.site_id);
        let mut all_scores = Vec::new();
        let mut all_labels = Vec::new();
        let mut per_site = Vec::with_capacity(sites.len());
        for s in &sites {
            per_site.push(SiteScore {
                site_id: s.site_id,
                n: s.scores.len(),
                auc: roc_auc(&s.scores, &s.labels).ok(),
                balanced_accuracy: balanced_accuracy(
                    &s.scores,
                    &s.labels,
                    BALANCED_ACCURACY_THRESHOLD,
                )
                .ok(),
            });
            all_scores.extend_from_slice(&s.scores);
            all_labels.extend_from_slice(&s.labels);
        }
        Ok(EvalReport {
            protocol: protocol.into(),
            per_site,
            pooled_auc: roc_auc(&all_scores, &all_labels)?,
            pooled_balanced_accuracy: balanced_accuracy(
                &all_scores,
                &all_labels,
                BALANCED_ACCURACY_THRESHOLD,
            )?,
            n: all_scores.len(),
            config_hash,
            seed,
            selected_checkpoint: None,
            candidates: 0,
            predictions: sites,
        })
    }
}

pub(crate) fn score(
    spec: &ModelSpec,
    params: &ParamSet,
    site: &SiteDataset,
    indices: &[usize],
) -> Result<SitePredictions> {
    let batch = site.batch(indices)?;
    let logits = forward(spec, params, &batch.features)?;
    Ok(SitePredictions {
        site_id: site.site_id,
        scores: logits.data().to_vec(),
        labels: indices.iter().map(|&i| site.labels[i]).collect(),
    })
}

/// Support, validation and test indices of one evaluation site.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteSplit {
    pub site_id: usize,
    pub support: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Class-balanced support of `k`, then `v` random validation examples, and
/// everything else as test, all disjoint.
pub fn split_site(site: &SiteDataset, k: usize, v: usize, rng: &mut impl Rng) -> Result<SiteSplit> {
    if k == 0 {
        return Err(Error::Precondition(
            "support size must be at least 1".into(),
        ));
    }
    if site.len() < k + v + 1 {
        return Err(Error::Episode {
            site: site.site_id,
            reason: format!(
                "{} examples cannot hold support {k}, validation {v} and a test example",
                site.len()
            ),
        });
    }
    let all: Vec<usize> = (0..site.len()).collect();
    let support = draw_balanced(site, &all, k, rng)?;
    let mut rest: Vec<usize> = all.into_iter().filter(|i| !support.contains(i)).collect();
    rest.shuffle(rng);
    let mut test = rest.split_off(v);
    test.sort_unstable();
    Ok(SiteSplit {
        site_id: site.site_id,
        support,
        validation: rest,
        test,
    })
}

fn adapted_for(ckpt: &Checkpoint, table: &SiteTable, split: &SiteSplit) -> Result<ParamSet> {
    let site = table.site(split.site_id);
    let support = site.batch(&split.support)?;
    adapt(
        &ckpt.spec,
        &ckpt.params,
        &support,
        &ckpt.lr_table,
        ckpt.lr_table.steps(),
    )
}

/// Few-shot meta-test over every meta-test site.
///
/// Every checkpoint in the ring is fine-tuned per site on `k_support`
/// examples with its learned inner-loop rule. When the ring holds more than
/// one checkpoint, `t_target` further examples per site pick the one with
/// the best pooled validation AUC. The chosen model then scores every
/// remaining example once, in chunks of `t_target`.
pub fn finetune_few_shot(
    ring: &CheckpointRing,
    table: &SiteTable,
    config: &MetaConfig,
    rng: &mut impl Rng,
) -> Result<EvalReport> {
    if ring.is_empty() {
        return Err(Error::Precondition("checkpoint ring is empty".into()));
    }
    let sites = table.role_sites(Role::MetaTest);
    if sites.is_empty() {
        return Err(Error::Precondition("meta_test role is empty".into()));
    }
    let val_size = if ring.len() > 1 { config.t_target } else { 0 };
    let splits = sites
        .iter()
        .map(|&id| split_site(table.site(id), config.k_support, val_size, rng))
        .collect::<Result<Vec<_>>>()?;

    let mut selected = 0;
    if ring.len() > 1 {
        let mut best = f64::NEG_INFINITY;
        for (i, ckpt) in ring.entries().iter().enumerate() {
            let mut scores = Vec::new();
            let mut labels = Vec::new();
            for split in &splits {
                let adapted = adapted_for(ckpt, table, split)?;
                let p = score(
                    &ckpt.spec,
                    &adapted,
                    table.site(split.site_id),
                    &split.validation,
                )?;
                scores.extend(p.scores);
                labels.extend(p.labels);
            }
            let auc = roc_auc(&scores, &labels)?;
            if auc > best {
                best = auc;
                selected = i;
            }
        }
    }

    let ckpt = &ring.entries()[selected];
    let chunk = config.t_target.max(1);
    let mut per_site = Vec::with_capacity(splits.len());
    for split in &splits {
        let adapted = adapted_for(ckpt, table, split)?;
        let site = table.site(split.site_id);
        let mut preds = SitePredictions {
            site_id: site.site_id,
            ..SitePredictions::default()
        };
        for part in split.test.chunks(chunk) {
            let p = score(&ckpt.spec, &adapted, site, part)?;
            preds.scores.extend(p.scores);
            preds.labels.extend(p.labels);
        }
        per_site.push(preds);
    }
    let mut report =
        EvalReport::from_predictions("meta_test", per_site, config.fingerprint(), config.seed)?;
    report.selected_checkpoint = Some(selected);
    report.candidates = ring.len();
    Ok(report)
}

/// Scores every example of the single zero-shot site with no adaptation.
pub fn zero_shot_eval(ckpt: &Checkpoint, table: &SiteTable) -> Result<EvalReport> {
    let mut report = zero_shot_params(
        &ckpt.spec,
        &ckpt.params,
        table,
        "zero_shot",
        ckpt.config.fingerprint(),
        ckpt.config.seed,
    )?;
    report.selected_checkpoint = Some(0);
    report.candidates = 1;
    Ok(report)
}

pub(crate) fn zero_shot_params(
    spec: &ModelSpec,
    params: &ParamSet,
    table: &SiteTable,
    protocol: &str,
    config_hash: u64,
    seed: u64,
) -> Result<EvalReport> {
    let sites = table.role_sites(Role::ZeroShot);
    if sites.len() != 1 {
        return Err(Error::Precondition(format!(
            "zero-shot role must hold exactly one site, has {}",
            sites.len()
        )));
    }
    let before = params.fingerprint();
    let site = table.site(sites[0]);
    let indices: Vec<usize> = (0..site.len()).collect();
    let preds = score(spec, params, site, &indices)?;
    if params.fingerprint() != before {
        return Err(Error::Precondition(
            "zero-shot evaluation changed the parameters".into(),
        ));
    }
    EvalReport::from_predictions(protocol, alloc::vec![preds], config_hash, seed)
}
