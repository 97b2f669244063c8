//! JSON message types for the model-server protocol.
//!
//! Every request is a `POST` with a single JSON object body, every response a
//! single JSON object followed by a newline.
//!
//! | endpoint          | request                          | response                                  |
//! |-------------------|----------------------------------|-------------------------------------------|
//! | `/v1/next`        | `{context, top_m}`               | `{entries: [[id, surface, p]], residual}` |
//! | `/v1/tokenize`    | `{text}`                         | `{tokens: [[id, surface]]}`               |
//! | `/v1/detokenize`  | `{tokens: [id]}`                 | `{text, offsets: [[start, end]]}`         |
//! | `/v1/info` (GET)  |                                  | `{eos, max_context, vocab_size, ...}`     |
//!
//! `context` is either a list of token ids or `{"text": "..."}`.
//! `/v1/detokenize` and `/v1/info` are optional; clients fall back to
//! concatenating surfaces and to conservative defaults.

use serde::{Deserialize, Serialize};

use super::{BackendError, Capabilities, RankedDistribution, RankedEntry, Token, TokenId};

pub const NEXT_PATH: &str = "/v1/next";
pub const TOKENIZE_PATH: &str = "/v1/tokenize";
pub const DETOKENIZE_PATH: &str = "/v1/detokenize";
pub const INFO_PATH: &str = "/v1/info";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Context {
    Ids(Vec<TokenId>),
    Text { text: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextRequest {
    pub context: Context,
    pub top_m: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextResponse {
    pub entries: Vec<(TokenId, String, f64)>,
    pub residual: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_length: Option<usize>,
}

impl From<&RankedDistribution> for NextResponse {
    fn from(d: &RankedDistribution) -> Self {
        Self {
            entries: d
                .entries
                .iter()
                .map(|e| (e.token.id, e.token.surface.clone(), e.prob))
                .collect(),
            residual: d.residual,
            context_length: Some(d.context_length),
        }
    }
}

impl NextResponse {
    pub fn into_distribution(self, context_length: usize) -> RankedDistribution {
        RankedDistribution {
            entries: self
                .entries
                .into_iter()
                .map(|(id, surface, prob)| RankedEntry {
                    token: Token::new(id, surface),
                    prob,
                })
                .collect(),
            residual: self.residual,
            context_length: self.context_length.unwrap_or(context_length),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizeRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizeResponse {
    pub tokens: Vec<(TokenId, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetokenizeRequest {
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetokenizeResponse {
    pub text: String,
    pub offsets: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoResponse {
    pub eos: Option<(TokenId, String)>,
    pub max_context: usize,
    #[serde(default)]
    pub vocab_size: Option<usize>,
    #[serde(default = "default_true")]
    pub concurrent: bool,
    #[serde(default)]
    pub chat_wrapper: Option<(String, String)>,
}

fn default_true() -> bool {
    true
}

impl From<&Capabilities> for InfoResponse {
    fn from(c: &Capabilities) -> Self {
        Self {
            eos: c.eos.as_ref().map(|t| (t.id, t.surface.clone())),
            max_context: c.max_context,
            vocab_size: c.vocab_size,
            concurrent: c.concurrent,
            chat_wrapper: c.chat_wrapper.clone(),
        }
    }
}

impl From<InfoResponse> for Capabilities {
    fn from(i: InfoResponse) -> Self {
        Self {
            eos: i.eos.map(|(id, s)| Token::new(id, s)),
            max_context: i.max_context,
            vocab_size: i.vocab_size,
            concurrent: i.concurrent,
            chat_wrapper: i.chat_wrapper,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ErrorBody {
    ContextTooLong { length: usize, limit: usize },
    UnknownCharacters { fragment: String, offset: usize },
    UnknownToken { id: TokenId },
    BadRequest { message: String },
}

impl From<&BackendError> for ErrorBody {
    fn from(e: &BackendError) -> Self {
        match e {
            BackendError::ContextTooLong { length, limit } => Self::ContextTooLong {
                length: *length,
                limit: *limit,
            },
            BackendError::UnknownCharacters { fragment, offset } => Self::UnknownCharacters {
                fragment: fragment.clone(),
                offset: *offset,
            },
            BackendError::UnknownToken(id) => Self::UnknownToken { id: *id },
            other => Self::BadRequest {
                message: other.to_string(),
            },
        }
    }
}

impl From<ErrorBody> for BackendError {
    fn from(e: ErrorBody) -> Self {
        match e {
            ErrorBody::ContextTooLong { length, limit } => {
                BackendError::ContextTooLong { length, limit }
            }
            ErrorBody::UnknownCharacters { fragment, offset } => {
                BackendError::UnknownCharacters { fragment, offset }
            }
            ErrorBody::UnknownToken { id } => BackendError::UnknownToken(id),
            ErrorBody::BadRequest { message } => BackendError::Protocol(message),
        }
    }
}
