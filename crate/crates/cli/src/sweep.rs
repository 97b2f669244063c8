//! Threshold and branch-count sweeps.

use serde::{Deserialize, Serialize};

use dore_core::backend::LanguageModel;
use dore_core::decoder::Selection;
use dore_core::eval::{EvalOptions, EvalReport};
use dore_core::triplet::MatchMode;

use crate::dataset::Dataset;
use crate::evaluate::{run_eval, EvaluateError};
use crate::extract::{run_extract, ExtractConfig, ExtractError, ExtractRun};

#[derive(Debug, thiserror::Error)]
pub enum SweepError {
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Evaluate(#[from] EvaluateError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_selected: usize,
    /// Mean cross-branch score of the selected relations, if any.
    pub mean_selected_score: Option<f64>,
}

impl SweepRow {
    fn new(setting: String, run: &ExtractRun, report: &EvalReport) -> Self {
        let mut scores = Vec::new();
        for o in &run.outputs {
            for r in o.prompts.iter().filter_map(|p| p.result.as_ref()) {
                for t in &r.selected {
                    let key = t.key();
                    if let Some(c) = r.cross_scores.iter().find(|c| c.key == key) {
                        scores.push(c.score);
                    }
                }
            }
        }
        let mean = (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64);
        Self {
            setting,
            precision: report.global.precision,
            recall: report.global.recall,
            f1: report.global.f1,
            n_selected: report.global.n_pred,
            mean_selected_score: mean,
        }
    }
}

/// Thresholds `0, step, 2 step, ..` up to and including 1.
pub fn threshold_grid(step: f64) -> Vec<f64> {
    let n = (1.0 / step).round() as usize;
    (0..=n).map(|i| (i as f64 * step).min(1.0)).collect()
}

fn score(
    run: &ExtractRun,
    dataset: &Dataset,
    mode: MatchMode,
    options: &EvalOptions,
) -> Result<EvalReport, EvaluateError> {
    run_eval(&run.predictions(), "sweep", dataset, mode, options)
}

/// Re-selects one cached decode under every threshold.
pub fn threshold_sweep(
    run: &ExtractRun,
    thresholds: &[f64],
    dataset: &Dataset,
    mode: MatchMode,
    options: &EvalOptions,
) -> Result<Vec<SweepRow>, SweepError> {
    thresholds
        .iter()
        .map(|&th| {
            let r = run.reselect(Selection::Threshold, th);
            let report = score(&r, dataset, mode, options)?;
            Ok(SweepRow::new(format!("threshold={th:.2}"), &r, &report))
        })
        .collect()
}

/// Decodes again for every branch count.
pub fn k_sweep(
    ks: &[usize],
    base: &ExtractConfig,
    dataset: &Dataset,
    backend: &dyn LanguageModel,
    options: &EvalOptions,
) -> Result<Vec<SweepRow>, SweepError> {
    ks.iter()
        .map(|&k| {
            let mut cfg = base.clone();
            cfg.decoder.k = k;
            let run = run_extract(dataset, &cfg, backend)?;
            let report = score(&run, dataset, cfg.decoder.match_mode, options)?;
            Ok(SweepRow::new(format!("k={k}"), &run, &report))
        })
        .collect()
}

pub fn to_table(rows: &[SweepRow]) -> String {
    let mut out = format!(
        "{:<16} {:>8} {:>9} {:>7} {:>9} {:>10}\n",
        "setting", "F1-Score", "Precision", "Recall", "selected", "mean score"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<16} {:>8.1} {:>9.1} {:>7.1} {:>9} {:>10}\n",
            r.setting,
            100.0 * r.f1,
            100.0 * r.precision,
            100.0 * r.recall,
            r.n_selected,
            r.mean_selected_score
                .map(|m| format!("{m:.4}"))
                .unwrap_or_else(|| "-".into())
        ));
    }
    out
}
