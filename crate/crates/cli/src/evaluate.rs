//! Scoring prediction files against the gold relations of a dataset.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use dore_core::eval::{compare_reports, evaluate, EvalError, EvalOptions, EvalReport};
use dore_core::stats::{welch_ttest, StatsError, TTest};
use dore_core::triplet::{canonical_term, MatchMode, TripletKey};

use crate::dataset::Dataset;
use crate::extract::PredictionLine;

#[derive(Debug, Error)]
pub enum EvaluateError {
    #[error("cannot read {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: dialogue {id:?} appears twice")]
    Duplicate { path: String, id: String },
    #[error("{path}: dialogue ids not in the gold file: {ids}")]
    UnknownIds { path: String, ids: String },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

pub type Predictions = BTreeMap<String, Vec<TripletKey>>;

/// Parses a predictions file, re-canonicalising every term under `mode`.
pub fn parse_predictions(text: &str, path: &str, mode: MatchMode) -> Result<Predictions, EvaluateError> {
    let mut out = Predictions::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictionLine = serde_json::from_str(line).map_err(|e| EvaluateError::Parse {
            path: path.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let keys = p
            .relations
            .into_iter()
            .map(|k| {
                TripletKey::new(
                    canonical_term(&k.head, mode),
                    k.relation,
                    canonical_term(&k.tail, mode),
                )
            })
            .collect();
        if out.insert(p.dialogue_id.clone(), keys).is_some() {
            return Err(EvaluateError::Duplicate {
                path: path.to_string(),
                id: p.dialogue_id,
            });
        }
    }
    Ok(out)
}

pub fn load_predictions(path: &Path, mode: MatchMode) -> Result<Predictions, EvaluateError> {
    let text = std::fs::read_to_string(path).map_err(|source| EvaluateError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_predictions(&text, &path.display().to_string(), mode)
}

/// Evaluates predictions against the dataset gold; ids absent from the
/// dataset are rejected.
pub fn run_eval(
    predictions: &Predictions,
    source: &str,
    dataset: &Dataset,
    mode: MatchMode,
    options: &EvalOptions,
) -> Result<EvalReport, EvaluateError> {
    let unknown: Vec<&str> = predictions
        .keys()
        .filter(|id| dataset.get(id).is_none())
        .map(String::as_str)
        .collect();
    if !unknown.is_empty() {
        return Err(EvaluateError::UnknownIds {
            path: source.to_string(),
            ids: unknown.into_iter().take(5).collect::<Vec<_>>().join(", "),
        });
    }
    Ok(evaluate(predictions, &dataset.gold(mode), options))
}

/// Paired comparison of two systems over the same dialogues.
pub fn compare(a: &EvalReport, b: &EvalReport) -> Result<TTest, EvaluateError> {
    Ok(compare_reports(a, b)?)
}

/// Welch test between the global F1 of two groups of runs.
pub fn compare_runs(a: &[EvalReport], b: &[EvalReport]) -> Result<TTest, EvaluateError> {
    let fa: Vec<f64> = a.iter().map(|r| r.global.f1).collect();
    let fb: Vec<f64> = b.iter().map(|r| r.global.f1).collect();
    Ok(welch_ttest(&fa, &fb)?)
}
