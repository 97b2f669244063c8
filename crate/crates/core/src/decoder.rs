//! Multi-branch decoding.
//!
//! The first response token is branched over the top-k candidates; every
//! branch then continues greedily, optionally under the triplet grammar.
//! Each generated token records the two largest probabilities of the
//! distribution it was chosen from, which is what the scores are built on.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, LanguageModel, RankedDistribution, Token, TokenId};
use crate::constraint::{
    mask_distribution, ConstraintError, ConstraintState, Phase, TokenSet, TripletGrammar,
};
use crate::scoring::{
    aggregate_triplet, branch_score, cross_branch_disparity, select_branch_argmax,
    select_by_threshold, span_disparity, Aggregation, BranchScore, CrossBranchScore,
    TripletDisparity,
};
use crate::triplet::{extract_triplets, MatchMode, RelationTriplet};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid decoder config: {0}")]
    Config(String),
    #[error("k={k} exceeds the {available} tokens reported for the first position")]
    InsufficientSupport { k: usize, available: usize },
    #[error("constrained decoding needs a non-empty term list")]
    NoTerms,
    #[error("backend returned a distribution without entries")]
    EmptyDistribution,
    #[error("branch {branch}: {source}")]
    Branch {
        branch: usize,
        #[source]
        source: Box<DecodeError>,
    },
    #[error("every branch failed: {0:?}")]
    AllBranchesFailed(Vec<String>),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisparitySource {
    #[default]
    Masked,
    Raw,
}

impl FromStr for DisparitySource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "masked" => Ok(Self::Masked),
            "raw" => Ok(Self::Raw),
            _ => Err(format!("unknown disparity source {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    BranchArgmax,
    Threshold,
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Selection::BranchArgmax => "branch_argmax",
            Selection::Threshold => "threshold",
        })
    }
}

impl FromStr for Selection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "branch_argmax" | "branch-argmax" | "argmax" => Ok(Self::BranchArgmax),
            "threshold" => Ok(Self::Threshold),
            _ => Err(format!("unknown selection {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub k: usize,
    /// Upper bound on generated tokens per branch, the branching token
    /// included.
    pub max_new_tokens: usize,
    /// Entries requested from the backend per step.
    pub top_m: usize,
    pub constrained: bool,
    pub disparity_source: DisparitySource,
    pub aggregation: Aggregation,
    pub selection: Selection,
    pub threshold: f64,
    pub match_mode: MatchMode,
    pub parallel: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            k: 5,
            max_new_tokens: 512,
            top_m: 32,
            constrained: false,
            disparity_source: DisparitySource::Masked,
            aggregation: Aggregation::Mean,
            selection: Selection::BranchArgmax,
            threshold: 0.5,
            match_mode: MatchMode::Normalized,
            parallel: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.k < 1 {
            return Err(DecodeError::Config("k must be at least 1".into()));
        }
        if self.max_new_tokens < 1 {
            return Err(DecodeError::Config("max_new_tokens must be at least 1".into()));
        }
        if self.top_m < 2 {
            return Err(DecodeError::Config("top_m must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(DecodeError::Config(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub position: usize,
    pub token: Token,
    pub p_top: f64,
    pub p_next: f64,
    pub phase: Phase,
    pub fallback: bool,
}

/// Step positions of one detected triplet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerSpan {
    pub triplet: RelationTriplet,
    pub head: Range<usize>,
    pub relation: Range<usize>,
    pub tail: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub index: usize,
    pub first_token: Token,
    pub steps: Vec<StepRecord>,
    pub text: String,
    pub answer_spans: Vec<AnswerSpan>,
    pub malformed: usize,
    pub fallbacks: usize,
    pub hit_max_tokens: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Branch {
    pub fn token_ids(&self) -> Vec<TokenId> {
        self.steps.iter().map(|s| s.token.id).collect()
    }
}

/// A branch holding only its first token and the distribution it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchSeed {
    pub index: usize,
    pub first: Token,
    pub p_top: f64,
    pub p_next: f64,
}

/// Seeds one branch per top-k candidate of the first response token.
pub fn branch_first_token<L: LanguageModel + ?Sized>(
    prompt: &[TokenId],
    k: usize,
    top_m: usize,
    backend: &L,
) -> Result<Vec<BranchSeed>, DecodeError> {
    let dist = backend.next_distribution(prompt, top_m.max(k).max(2))?;
    seeds_from(&dist, k)
}

fn seeds_from(dist: &RankedDistribution, k: usize) -> Result<Vec<BranchSeed>, DecodeError> {
    if dist.entries.len() < k {
        return Err(DecodeError::InsufficientSupport {
            k,
            available: dist.entries.len(),
        });
    }
    Ok(dist.entries[..k]
        .iter()
        .enumerate()
        .map(|(index, e)| BranchSeed {
            index,
            first: e.token.clone(),
            p_top: dist.p_top(),
            p_next: dist.p_next(),
        })
        .collect())
}

/// Extends a seed greedily until end-of-sequence or the token budget.
pub fn continue_greedy<L: LanguageModel + ?Sized>(
    prompt: &[TokenId],
    seed: &BranchSeed,
    grammar: Option<&TripletGrammar>,
    config: &DecoderConfig,
    backend: &L,
) -> Result<Branch, DecodeError> {
    let eos = backend.capabilities().eos.map(|t| t.id);
    let mut branch = Branch {
        index: seed.index,
        first_token: seed.first.clone(),
        steps: Vec::new(),
        text: String::new(),
        answer_spans: Vec::new(),
        malformed: 0,
        fallbacks: 0,
        hit_max_tokens: false,
        error: None,
    };
    if Some(seed.first.id) == eos {
        return Ok(branch);
    }
    let mut state = ConstraintState::free();
    branch.steps.push(StepRecord {
        position: 0,
        token: seed.first.clone(),
        p_top: seed.p_top,
        p_next: seed.p_next,
        phase: state.phase(),
        fallback: false,
    });
    if let Some(g) = grammar {
        state = g.advance(&state, seed.first.id)?;
    }
    let mut context: Vec<TokenId> = prompt.to_vec();
    context.push(seed.first.id);
    while branch.steps.len() < config.max_new_tokens {
        let raw = backend.next_distribution(&context, config.top_m)?;
        let legal = match grammar {
            Some(g) => g.legal_next_tokens(&state)?,
            None => TokenSet::All,
        };
        let masked = mask_distribution(&raw, &legal);
        let chosen = masked
            .dist
            .top()
            .ok_or(DecodeError::EmptyDistribution)?
            .token
            .clone();
        if Some(chosen.id) == eos {
            break;
        }
        let source = match config.disparity_source {
            DisparitySource::Masked => &masked.dist,
            DisparitySource::Raw => &raw,
        };
        branch.fallbacks += masked.fallback as usize;
        branch.steps.push(StepRecord {
            position: branch.steps.len(),
            token: chosen.clone(),
            p_top: source.p_top(),
            p_next: source.p_next(),
            phase: state.phase(),
            fallback: masked.fallback,
        });
        if let Some(g) = grammar {
            state = g.advance(&state, chosen.id)?;
        }
        context.push(chosen.id);
    }
    branch.hit_max_tokens = branch.steps.len() >= config.max_new_tokens;
    Ok(branch)
}

/// Detokenizes the branch and locates the step positions of every triplet.
pub fn detect_answer_spans<L: LanguageModel + ?Sized>(
    branch: &mut Branch,
    mode: MatchMode,
    backend: &L,
) -> Result<(), DecodeError> {
    let (text, offsets) = backend.detokenize_with_offsets(&branch.token_ids())?;
    let extraction = extract_triplets(&text, mode);
    let covering = |r: &Range<usize>| -> Range<usize> {
        let hits: Vec<usize> = offsets
            .iter()
            .enumerate()
            .filter(|(_, o)| o.start < r.end && r.start < o.end)
            .map(|(i, _)| i)
            .collect();
        match (hits.first(), hits.last()) {
            (Some(&a), Some(&b)) => a..b + 1,
            _ => 0..0,
        }
    };
    branch.answer_spans = extraction
        .triplets
        .into_iter()
        .map(|p| AnswerSpan {
            head: covering(&p.head),
            relation: covering(&p.relation),
            tail: covering(&p.tail),
            triplet: p.triplet,
        })
        .filter(|s| !s.head.is_empty() && !s.relation.is_empty() && !s.tail.is_empty())
        .collect();
    branch.malformed = extraction.malformed;
    branch.text = text;
    Ok(())
}

/// Component and aggregated disparities of every detected triplet.
pub fn triplet_disparities(branch: &Branch, aggregation: Aggregation) -> Vec<TripletDisparity> {
    branch
        .answer_spans
        .iter()
        .filter_map(|s| {
            let h = span_disparity(&branch.steps[s.head.clone()]).ok()?;
            let r = span_disparity(&branch.steps[s.relation.clone()]).ok()?;
            let t = span_disparity(&branch.steps[s.tail.clone()]).ok()?;
            Some(TripletDisparity {
                branch: branch.index,
                triplet: s.triplet.clone(),
                head: h,
                relation: r,
                tail: t,
                aggregated: aggregate_triplet([h, r, t], aggregation),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub branches: Vec<Branch>,
    pub disparities: Vec<Vec<TripletDisparity>>,
    pub branch_scores: Vec<BranchScore>,
    pub cross_scores: Vec<CrossBranchScore>,
    pub selection: Selection,
    pub threshold: f64,
    /// Branch chosen by argmax; also reported under threshold selection.
    pub selected_branch: usize,
    pub selected: Vec<RelationTriplet>,
    pub partial: bool,
    pub errors: Vec<String>,
}

impl DecodeResult {
    fn assemble(
        branches: Vec<Branch>,
        aggregation: Aggregation,
        selection: Selection,
        threshold: f64,
    ) -> Self {
        let disparities: Vec<_> = branches
            .iter()
            .map(|b| triplet_disparities(b, aggregation))
            .collect();
        let branch_scores: Vec<_> = branches
            .iter()
            .zip(&disparities)
            .map(|(b, d)| branch_score(b.index, d))
            .collect();
        let cross_scores = cross_branch_disparity(&branch_scores);
        let errors: Vec<String> = branches.iter().filter_map(|b| b.error.clone()).collect();
        let mut out = Self {
            partial: !errors.is_empty(),
            errors,
            branches,
            disparities,
            branch_scores,
            cross_scores,
            selection,
            threshold,
            selected_branch: 0,
            selected: Vec::new(),
        };
        out.reselect(selection, threshold);
        out
    }

    /// Recomputes the selected set from the cached scores.
    pub fn reselect(&mut self, selection: Selection, threshold: f64) {
        self.selection = selection;
        self.threshold = threshold;
        self.selected_branch = select_branch_argmax(&self.branch_scores).unwrap_or(0);
        self.selected = self.select(selection, threshold);
    }

    pub fn select(&self, selection: Selection, threshold: f64) -> Vec<RelationTriplet> {
        match selection {
            Selection::BranchArgmax => select_branch_argmax(&self.branch_scores)
                .map(|i| {
                    self.branch_scores[i]
                        .relations
                        .iter()
                        .map(|r| r.triplet.clone())
                        .collect()
                })
                .unwrap_or_default(),
            Selection::Threshold => select_by_threshold(&self.cross_scores, threshold),
        }
    }

    /// Re-scores with another aggregation without decoding again.
    pub fn rescore(&self, aggregation: Aggregation) -> Self {
        Self::assemble(
            self.branches.clone(),
            aggregation,
            self.selection,
            self.threshold,
        )
    }

    /// Every distinct relation found in any branch.
    pub fn all_relations(&self) -> Vec<RelationTriplet> {
        self.cross_scores.iter().map(|c| c.triplet.clone()).collect()
    }
}

fn decode_branch<L: LanguageModel + ?Sized>(
    prompt: &[TokenId],
    seed: &BranchSeed,
    grammar: Option<&TripletGrammar>,
    config: &DecoderConfig,
    backend: &L,
) -> Branch {
    let decoded = continue_greedy(prompt, seed, grammar, config, backend).and_then(|mut b| {
        detect_answer_spans(&mut b, config.match_mode, backend)?;
        Ok(b)
    });
    decoded.unwrap_or_else(|e| Branch {
        index: seed.index,
        first_token: seed.first.clone(),
        steps: Vec::new(),
        text: String::new(),
        answer_spans: Vec::new(),
        malformed: 0,
        fallbacks: 0,
        hit_max_tokens: false,
        error: Some(
            DecodeError::Branch {
                branch: seed.index,
                source: Box::new(e),
            }
            .to_string(),
        ),
    })
}

/// Branches, decodes, scores and selects.
pub fn decode_cot<S, L>(
    prompt: &[TokenId],
    terms: &[S],
    config: &DecoderConfig,
    backend: &L,
) -> Result<DecodeResult, DecodeError>
where
    S: AsRef<str>,
    L: LanguageModel + ?Sized,
{
    config.validate()?;
    let grammar = if config.constrained {
        if terms.is_empty() {
            return Err(DecodeError::NoTerms);
        }
        Some(TripletGrammar::new(terms, backend)?)
    } else {
        None
    };
    decode_with_grammar(prompt, grammar.as_ref(), config, backend)
}

/// Like [`decode_cot`] with a prebuilt grammar; `None` decodes unconstrained.
pub fn decode_with_grammar<L: LanguageModel + ?Sized>(
    prompt: &[TokenId],
    grammar: Option<&TripletGrammar>,
    config: &DecoderConfig,
    backend: &L,
) -> Result<DecodeResult, DecodeError> {
    config.validate()?;
    let seeds = branch_first_token(prompt, config.k, config.top_m, backend)?;
    let run = |s: &BranchSeed| decode_branch(prompt, s, grammar, config, backend);
    let branches: Vec<Branch> = if config.parallel && backend.capabilities().concurrent {
        seeds.par_iter().map(run).collect()
    } else {
        seeds.iter().map(run).collect()
    };
    if branches.iter().all(|b| b.error.is_some()) {
        return Err(DecodeError::AllBranchesFailed(
            branches.into_iter().filter_map(|b| b.error).collect(),
        ));
    }
    Ok(DecodeResult::assemble(
        branches,
        config.aggregation,
        config.selection,
        config.threshold,
    ))
}
