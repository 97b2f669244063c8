//! Confidence scores for decoded relations.
//!
//! A token's disparity is the gap between the two most likely next tokens.
//! Spans, triplets and branches are scored by averaging that gap, and the
//! final relation set is chosen either from the best branch or by keeping
//! relations whose average across branches clears a threshold.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::StepRecord;
use crate::triplet::{RelationTriplet, TripletKey};

/// Score given to a branch without any relation.
pub const EMPTY_BRANCH_SCORE: f64 = -1.0;

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("cannot score an empty span")]
    EmptySpan,
    #[error("no branches to select from")]
    NoBranches,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Median,
    Max,
    Min,
}

impl Aggregation {
    pub const ALL: [Aggregation; 4] = [
        Aggregation::Mean,
        Aggregation::Median,
        Aggregation::Max,
        Aggregation::Min,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Mean => "mean",
            Aggregation::Median => "median",
            Aggregation::Max => "max",
            Aggregation::Min => "min",
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown aggregation {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletDisparity {
    pub branch: usize,
    pub triplet: RelationTriplet,
    pub head: f64,
    pub relation: f64,
    pub tail: f64,
    pub aggregated: f64,
}

impl TripletDisparity {
    pub fn key(&self) -> TripletKey {
        self.triplet.key()
    }
}

/// A distinct relation of one branch with its within-branch mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRelation {
    pub key: TripletKey,
    pub triplet: RelationTriplet,
    pub disparity: f64,
    pub multiplicity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchScore {
    pub branch: usize,
    pub score: f64,
    pub n_relations: usize,
    pub relations: Vec<BranchRelation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossBranchScore {
    pub key: TripletKey,
    pub triplet: RelationTriplet,
    pub score: f64,
    pub n_branches: usize,
}

pub fn token_disparity(p_top: f64, p_next: f64) -> f64 {
    p_top - p_next
}

/// Mean token disparity over one component span.
pub fn span_disparity(steps: &[StepRecord]) -> Result<f64, ScoringError> {
    if steps.is_empty() {
        return Err(ScoringError::EmptySpan);
    }
    let sum: f64 = steps
        .iter()
        .map(|s| token_disparity(s.p_top, s.p_next))
        .sum();
    Ok(sum / steps.len() as f64)
}

pub fn aggregate_triplet(components: [f64; 3], strategy: Aggregation) -> f64 {
    let [h, r, t] = components;
    match strategy {
        Aggregation::Mean => (h + r + t) / 3.0,
        Aggregation::Median => {
            let mut v = components;
            v.sort_by(f64::total_cmp);
            v[1]
        }
        Aggregation::Max => h.max(r).max(t),
        Aggregation::Min => h.min(r).min(t),
    }
}

/// Collapses repeated relations of one branch into their mean, keeping the
/// order of first appearance.
pub fn distinct_relations(disparities: &[TripletDisparity]) -> Vec<BranchRelation> {
    let mut order: Vec<BranchRelation> = Vec::new();
    let mut index: BTreeMap<TripletKey, usize> = BTreeMap::new();
    for d in disparities {
        let key = d.key();
        match index.get(&key) {
            Some(&i) => {
                order[i].disparity += d.aggregated;
                order[i].multiplicity += 1;
            }
            None => {
                index.insert(key.clone(), order.len());
                order.push(BranchRelation {
                    key,
                    triplet: d.triplet.clone(),
                    disparity: d.aggregated,
                    multiplicity: 1,
                });
            }
        }
    }
    for r in &mut order {
        r.disparity /= r.multiplicity as f64;
    }
    order
}

/// Average disparity of a branch's distinct relations, or
/// [`EMPTY_BRANCH_SCORE`] when it has none.
pub fn branch_score(branch: usize, disparities: &[TripletDisparity]) -> BranchScore {
    let relations = distinct_relations(disparities);
    let score = if relations.is_empty() {
        EMPTY_BRANCH_SCORE
    } else {
        relations.iter().map(|r| r.disparity).sum::<f64>() / relations.len() as f64
    };
    BranchScore {
        branch,
        score,
        n_relations: relations.len(),
        relations,
    }
}

/// Position of the highest-scoring branch; ties go to the lowest position.
pub fn select_branch_argmax(scores: &[BranchScore]) -> Result<usize, ScoringError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if best.is_none_or(|(_, b)| s.score > b) {
            best = Some((i, s.score));
        }
    }
    best.map(|(i, _)| i).ok_or(ScoringError::NoBranches)
}

/// Mean disparity of every relation over the branches containing it.
///
/// Output follows the order of first appearance, scanning branches in order.
pub fn cross_branch_disparity(scores: &[BranchScore]) -> Vec<CrossBranchScore> {
    let mut out: Vec<CrossBranchScore> = Vec::new();
    let mut index: BTreeMap<&TripletKey, usize> = BTreeMap::new();
    for s in scores {
        for r in &s.relations {
            match index.get(&r.key) {
                Some(&i) => {
                    out[i].score += r.disparity;
                    out[i].n_branches += 1;
                }
                None => {
                    index.insert(&r.key, out.len());
                    out.push(CrossBranchScore {
                        key: r.key.clone(),
                        triplet: r.triplet.clone(),
                        score: r.disparity,
                        n_branches: 1,
                    });
                }
            }
        }
    }
    for c in &mut out {
        c.score /= c.n_branches as f64;
    }
    out
}

pub fn select_by_threshold(cross: &[CrossBranchScore], threshold: f64) -> Vec<RelationTriplet> {
    cross
        .iter()
        .filter(|c| c.score > threshold)
        .map(|c| c.triplet.clone())
        .collect()
}
