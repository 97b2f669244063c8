//! Uniform interface to a next-token language model.
//!
//! A backend exposes a tokenizer, a detokenizer and the next-token
//! distribution for a given context. Distributions travel as explicit top-m
//! lists with the remaining mass carried as a residual, which is all the
//! decoder needs to read the top two probabilities at each step.

pub mod http;
pub mod mock;
pub mod wire;

use std::cmp::Ordering;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpBackend;
pub use mock::{MockBackend, MockRule, MockScript};

pub type TokenId = u32;

/// Tolerance used when checking that a distribution is normalized.
pub const PROB_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub id: TokenId,
    pub surface: String,
}

impl Token {
    pub fn new(id: TokenId, surface: impl Into<String>) -> Self {
        Self {
            id,
            surface: surface.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub token: Token,
    pub prob: f64,
}

/// A next-token distribution truncated to its top entries.
///
/// Entries are sorted by descending probability, ties broken by ascending
/// token id. `residual` holds the mass of every token not listed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedDistribution {
    pub entries: Vec<RankedEntry>,
    pub residual: f64,
    pub context_length: usize,
}

impl RankedDistribution {
    /// Ranks `(token, prob)` pairs, drops zero-probability tokens and keeps
    /// the first `top_m`. Whatever is not kept becomes residual mass.
    pub fn from_probs(
        mut probs: Vec<(Token, f64)>,
        top_m: usize,
        context_length: usize,
    ) -> Self {
        probs.retain(|(_, p)| *p > 0.0);
        probs.sort_by(|(ta, pa), (tb, pb)| rank_order(ta.id, *pa, tb.id, *pb));
        probs.truncate(top_m);
        let kept: f64 = probs.iter().map(|(_, p)| p).sum();
        let residual = (1.0 - kept).max(0.0);
        Self {
            entries: probs
                .into_iter()
                .map(|(token, prob)| RankedEntry { token, prob })
                .collect(),
            residual,
            context_length,
        }
    }

    pub fn top(&self) -> Option<&RankedEntry> {
        self.entries.first()
    }

    /// Probability of the most likely token.
    pub fn p_top(&self) -> f64 {
        self.entries.first().map_or(0.0, |e| e.prob)
    }

    /// Probability of the second most likely token, 0 when absent.
    pub fn p_next(&self) -> f64 {
        self.entries.get(1).map_or(0.0, |e| e.prob)
    }

    pub fn prob_of(&self, id: TokenId) -> f64 {
        self.entries
            .iter()
            .find(|e| e.token.id == id)
            .map_or(0.0, |e| e.prob)
    }

    pub fn total_mass(&self) -> f64 {
        self.entries.iter().map(|e| e.prob).sum::<f64>() + self.residual
    }

    /// Checks ordering, bounds and normalization.
    pub fn validate(&self) -> Result<(), String> {
        for e in &self.entries {
            if !(0.0..=1.0 + PROB_EPS).contains(&e.prob) {
                return Err(format!("probability {} out of range", e.prob));
            }
        }
        for pair in self.entries.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if rank_order(a.token.id, a.prob, b.token.id, b.prob) != Ordering::Less {
                return Err(format!(
                    "entries out of order: {} ({}) before {} ({})",
                    a.token.id, a.prob, b.token.id, b.prob
                ));
            }
        }
        if !(-PROB_EPS..=1.0 + PROB_EPS).contains(&self.residual) {
            return Err(format!("residual {} out of range", self.residual));
        }
        let total = self.total_mass();
        if (total - 1.0).abs() > PROB_EPS {
            return Err(format!("total mass {total} is not 1"));
        }
        Ok(())
    }
}

/// Descending probability, then ascending token id.
pub fn rank_order(id_a: TokenId, p_a: f64, id_b: TokenId, p_b: f64) -> Ordering {
    p_b.partial_cmp(&p_a)
        .unwrap_or(Ordering::Equal)
        .then(id_a.cmp(&id_b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capabilities {
    /// End-of-sequence token, if the model has one.
    pub eos: Option<Token>,
    pub max_context: usize,
    pub vocab_size: Option<usize>,
    /// False when the backend must be driven by one request at a time.
    pub concurrent: bool,
    /// Chat-template wrapper placed around every rendered prompt.
    pub chat_wrapper: Option<(String, String)>,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("context of {length} tokens exceeds the backend limit of {limit}")]
    ContextTooLong { length: usize, limit: usize },
    #[error("text contains characters outside the vocabulary at byte {offset}: {fragment:?}")]
    UnknownCharacters { fragment: String, offset: usize },
    #[error("unknown token id {0}")]
    UnknownToken(TokenId),
    #[error("top_m must be at least 2, got {0}")]
    TopMTooSmall(usize),
    #[error("invalid mock script: {0}")]
    InvalidScript(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// A next-token language model.
pub trait LanguageModel: Send + Sync {
    fn tokenize(&self, text: &str) -> Result<Vec<Token>, BackendError>;

    /// Joins token surfaces and reports the byte range each token occupies
    /// in the returned text.
    fn detokenize_with_offsets(
        &self,
        tokens: &[TokenId],
    ) -> Result<(String, Vec<Range<usize>>), BackendError>;

    fn detokenize(&self, tokens: &[TokenId]) -> Result<String, BackendError> {
        self.detokenize_with_offsets(tokens).map(|(text, _)| text)
    }

    fn next_distribution(
        &self,
        context: &[TokenId],
        top_m: usize,
    ) -> Result<RankedDistribution, BackendError>;

    fn capabilities(&self) -> Capabilities;

    /// Short human-readable description recorded in run manifests.
    fn describe(&self) -> String;

    /// Resolves a surface that must tokenize to exactly one token.
    fn single_token(&self, surface: &str) -> Option<Token> {
        match self.tokenize(surface) {
            Ok(mut tokens) if tokens.len() == 1 => tokens.pop(),
            _ => None,
        }
    }
}

pub fn token_ids(tokens: &[Token]) -> Vec<TokenId> {
    tokens.iter().map(|t| t.id).collect()
}
