//! Plot-ready CSV reports. Every number has a fixed format so reruns diff
//! cleanly: CER and sparsity with 2 decimals, losses with 6 significant
//! digits, IOU with 4 decimals.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{
    avg_downstream_language, avg_subnetwork_performance, MaskSource, MatchedCells, RunResult,
};
use crate::prune::{iou, Mask};

pub const GRID_HEADER: &str =
    "upstream,downstream,mask_source,sparsity,seed,cer,epochs_run,best_val_loss";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub upstream: String,
    pub downstream: String,
    pub mask_source: String,
    pub sparsity: f64,
    pub seed: u64,
    pub cer: Option<f64>,
    pub epochs_run: usize,
    pub best_val_loss: Option<f64>,
}

impl From<&RunResult> for ReportRow {
    fn from(r: &RunResult) -> Self {
        Self {
            upstream: r.upstream.clone(),
            downstream: r.downstream.clone(),
            mask_source: r.mask_source.to_string(),
            sparsity: r.sparsity,
            seed: r.seed,
            cer: r.cer,
            epochs_run: r.epochs_run(),
            best_val_loss: r.best_val_loss(),
        }
    }
}

/// Six significant digits in scientific notation.
pub fn fmt_loss(x: f64) -> String {
    format!("{x:.5e}")
}

pub fn fmt_cer(x: f64) -> String {
    format!("{x:.2}")
}

fn opt(v: Option<f64>, f: fn(f64) -> String) -> String {
    v.map_or_else(|| "NA".to_string(), f)
}

impl ReportRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{:.2},{},{},{},{}",
            self.upstream,
            self.downstream,
            self.mask_source,
            self.sparsity,
            self.seed,
            opt(self.cer, fmt_cer),
            self.epochs_run,
            opt(self.best_val_loss, fmt_loss),
        )
    }
}

/// One row per grid cell in the given order; failed cells report `NA`.
pub fn grid_csv(results: &[RunResult]) -> String {
    let mut out = String::from(GRID_HEADER);
    out.push('\n');
    for r in results {
        out.push_str(&ReportRow::from(r).to_csv());
        out.push('\n');
    }
    out
}

type AverageFn = fn(&[RunResult], &str, MatchedCells) -> Result<Vec<(f64, f64)>>;

/// Averages for every language on one axis. Languages whose averages cannot
/// be formed (missing or failed cells) are skipped and reported as messages.
fn averages_csv(
    results: &[RunResult],
    column: &str,
    languages: BTreeSet<&str>,
    avg: AverageFn,
) -> (String, Vec<String>) {
    let mut out = format!("{column},sparsity,mean_cer\n");
    let mut problems = Vec::new();
    for lang in languages {
        match avg(results, lang, MatchedCells::Exclude) {
            Ok(rows) => {
                for (s, c) in rows {
                    let _ = writeln!(out, "{lang},{s:.2},{}", fmt_cer(c));
                }
            }
            Err(e) => problems.push(format!("{column} {lang}: {e}")),
        }
    }
    (out, problems)
}

fn own_cells(results: &[RunResult]) -> impl Iterator<Item = &RunResult> {
    results.iter().filter(|r| r.mask_source == MaskSource::Own)
}

/// Mean CER of each upstream subnetwork over the other languages.
pub fn upstream_averages_csv(results: &[RunResult]) -> (String, Vec<String>) {
    let langs = own_cells(results).map(|r| r.upstream.as_str()).collect();
    averages_csv(results, "upstream", langs, avg_subnetwork_performance)
}

/// Mean CER on each downstream language over the other subnetworks.
pub fn downstream_averages_csv(results: &[RunResult]) -> (String, Vec<String>) {
    let langs = own_cells(results).map(|r| r.downstream.as_str()).collect();
    averages_csv(results, "downstream", langs, avg_downstream_language)
}

/// Symmetric IOU matrix with a header row of labels.
pub fn iou_matrix_csv(labels: &[String], masks: &[Mask]) -> Result<String> {
    if labels.len() != masks.len() {
        return Err(Error::LengthMismatch(labels.len(), masks.len()));
    }
    let mut out = String::from("mask");
    for l in labels {
        let _ = write!(out, ",{l}");
    }
    out.push('\n');
    for (i, a) in masks.iter().enumerate() {
        out.push_str(&labels[i]);
        for b in masks {
            let _ = write!(out, ",{:.4}", iou(a, b)?);
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_results_json(path: &Path, results: &[RunResult]) -> Result<()> {
    let text = serde_json::to_string_pretty(results)?;
    write_text(path, &(text + "\n"))
}

pub fn read_results_json(path: &Path) -> Result<Vec<RunResult>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
