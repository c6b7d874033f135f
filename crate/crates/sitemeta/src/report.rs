//! Machine-readable outputs: evaluation reports (JSON and CSV), training
//! logs and search trial logs.
//!
//! Report JSON keeps its only non-deterministic value, the creation time,
//! in the `timestamp` field.

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sitemeta_core::eval::{EvalReport, TrialRecord};
use sitemeta_core::metalearn::EpochRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRow {
    pub site_id: usize,
    pub n: usize,
    pub auc: Option<f64>,
    pub balanced_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub protocol: String,
    pub pooled_auc: f64,
    pub pooled_balanced_accuracy: f64,
    pub n: usize,
    /// Hex fingerprint of the configuration that produced the report.
    pub config_hash: String,
    pub seed: u64,
    pub selected_checkpoint: Option<usize>,
    pub candidates: usize,
    pub per_site: Vec<SiteRow>,
    /// Seconds since the Unix epoch at creation.
    pub timestamp: u64,
}

impl ReportFile {
    pub fn from_report(r: &EvalReport) -> Self {
        ReportFile {
            protocol: r.protocol.clone(),
            pooled_auc: r.pooled_auc,
            pooled_balanced_accuracy: r.pooled_balanced_accuracy,
            n: r.n,
            config_hash: format!("{:016x}", r.config_hash),
            seed: r.seed,
            selected_checkpoint: r.selected_checkpoint,
            candidates: r.candidates,
            per_site: r
                .per_site
                .iter()
                .map(|s| SiteRow {
                    site_id: s.site_id,
                    n: s.n,
                    auc: s.auc,
                    balanced_accuracy: s.balanced_accuracy,
                })
                .collect(),
            timestamp: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `<dir>/<protocol>.json` and `<dir>/<protocol>.csv`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<ReportFile> {
    let file = ReportFile::from_report(report);
    let json_path = dir.join(format!("{}.json", file.protocol));
    let mut json = serde_json::to_string_pretty(&file)?;
    json.push('\n');
    std::fs::write(&json_path, json).with_context(|| format!("writing {}", json_path.display()))?;

    let csv_path = dir.join(format!("{}.csv", file.protocol));
    let mut w = csv::Writer::from_path(&csv_path)
        .with_context(|| format!("writing {}", csv_path.display()))?;
    w.write_record(["protocol", "site", "n", "auc", "balanced_accuracy"])?;
    for s in &file.per_site {
        w.write_record([
            file.protocol.clone(),
            s.site_id.to_string(),
            s.n.to_string(),
            opt(s.auc),
            opt(s.balanced_accuracy),
        ])?;
    }
    w.write_record([
        file.protocol.clone(),
        "pooled".into(),
        file.n.to_string(),
        file.pooled_auc.to_string(),
        file.pooled_balanced_accuracy.to_string(),
    ])?;
    w.flush()?;
    Ok(file)
}

pub fn read_report(path: &Path) -> Result<ReportFile> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_training_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["epoch", "train_loss", "val_auc", "outer_lr"])?;
    for r in log {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_auc.to_string(),
            r.outer_lr.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trials(path: &Path, trials: &[TrialRecord]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record([
        "trial",
        "n_sites_per_episode",
        "k_support",
        "t_target",
        "max_epochs",
        "val_auc",
        "error",
    ])?;
    for t in trials {
        w.write_record([
            t.index.to_string(),
            t.config.n_sites_per_episode.to_string(),
            t.config.k_support.to_string(),
            t.config.t_target.to_string(),
            t.config.max_epochs.to_string(),
            opt(t.score),
            t.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Plain-text table of pooled and per-site scores.
pub fn summary_table(reports: &[ReportFile], out: &mut impl Write) -> std::io::Result<()> {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
    writeln!(
        out,
        "{:<20} {:>6} {:>6} {:>8} {:>8}",
        "protocol", "site", "n", "auc", "bal_acc"
    )?;
    for r in reports {
        for s in &r.per_site {
            writeln!(
                out,
                "{:<20} {:>6} {:>6} {:>8} {:>8}",
                r.protocol,
                s.site_id,
                s.n,
                fmt(s.auc),
                fmt(s.balanced_accuracy)
            )?;
        }
        writeln!(
            out,
            "{:<20} {:>6} {:>6} {:>8} {:>8}",
            r.protocol,
            "pooled",
            r.n,
            fmt(Some(r.pooled_auc)),
            fmt(Some(r.pooled_balanced_accuracy))
        )?;
    }
    Ok(())
}
