//! Client for external model servers speaking the [`wire`](super::wire)
//! protocol.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::{OnceLock, RwLock};
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::wire::{
    Context, DetokenizeRequest, DetokenizeResponse, ErrorBody, InfoResponse, NextRequest,
    NextResponse, TokenizeRequest, TokenizeResponse, DETOKENIZE_PATH, INFO_PATH, NEXT_PATH,
    TOKENIZE_PATH,
};
use super::{BackendError, Capabilities, LanguageModel, RankedDistribution, Token, TokenId};

const FALLBACK_MAX_CONTEXT: usize = 4096;

pub struct HttpBackend {
    base: String,
    client: Client,
    info: OnceLock<Capabilities>,
    /// Surfaces seen in tokenize and next responses, used when the server
    /// has no detokenize endpoint.
    surfaces: RwLock<HashMap<TokenId, String>>,
}

impl HttpBackend {
    pub fn new(base_url: &str) -> Result<Self, BackendError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        Ok(Self {
            base: base_url.trim_end_matches('/').to_string(),
            client,
            info: OnceLock::new(),
            surfaces: RwLock::new(HashMap::new()),
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Option<Resp>, BackendError> {
        let resp = self
            .client
            .post(self.url(path))
            .json(body)
            .send()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        Self::decode(resp)
    }

    fn decode<Resp: DeserializeOwned>(
        resp: reqwest::blocking::Response,
    ) -> Result<Option<Resp>, BackendError> {
        let status = resp.status();
        if status == StatusCode::NOT_FOUND {
            return Ok(None);
        }
        let text = resp
            .text()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        if status.is_success() {
            return serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| BackendError::Protocol(format!("{e}: {text}")));
        }
        match serde_json::from_str::<ErrorBody>(&text) {
            Ok(body) => Err(body.into()),
            Err(_) if status.is_server_error() => {
                Err(BackendError::Unavailable(format!("{status}: {text}")))
            }
            Err(_) => Err(BackendError::Protocol(format!("{status}: {text}"))),
        }
    }

    fn remember<'a>(&self, tokens: impl IntoIterator<Item = (TokenId, &'a str)>) {
        let mut cache = self.surfaces.write().expect("surface cache poisoned");
        for (id, s) in tokens {
            cache.entry(id).or_insert_with(|| s.to_string());
        }
    }

    fn fetch_info(&self) -> Capabilities {
        let fetched = self
            .client
            .get(self.url(INFO_PATH))
            .send()
            .ok()
            .and_then(|r| Self::decode::<InfoResponse>(r).ok().flatten());
        match fetched {
            Some(info) => info.into(),
            None => Capabilities {
                eos: None,
                max_context: FALLBACK_MAX_CONTEXT,
                vocab_size: None,
                concurrent: true,
                chat_wrapper: None,
            },
        }
    }

    /// Next-token distribution for raw text, tokenized server-side.
    pub fn next_for_text(
        &self,
        text: &str,
        top_m: usize,
    ) -> Result<RankedDistribution, BackendError> {
        self.next(
            NextRequest {
                context: Context::Text {
                    text: text.to_string(),
                },
                top_m,
            },
            0,
        )
    }

    fn next(&self, req: NextRequest, len: usize) -> Result<RankedDistribution, BackendError> {
        if req.top_m < 2 {
            return Err(BackendError::TopMTooSmall(req.top_m));
        }
        let resp: NextResponse = self
            .post(NEXT_PATH, &req)?
            .ok_or_else(|| BackendError::Protocol(format!("{NEXT_PATH} not found")))?;
        self.remember(resp.entries.iter().map(|(id, s, _)| (*id, s.as_str())));
        let dist = resp.into_distribution(len);
        dist.validate().map_err(BackendError::Protocol)?;
        Ok(dist)
    }
}

impl LanguageModel for HttpBackend {
    fn tokenize(&self, text: &str) -> Result<Vec<Token>, BackendError> {
        let resp: TokenizeResponse = self
            .post(
                TOKENIZE_PATH,
                &TokenizeRequest {
                    text: text.to_string(),
                },
            )?
            .ok_or_else(|| BackendError::Protocol(format!("{TOKENIZE_PATH} not found")))?;
        self.remember(resp.tokens.iter().map(|(id, s)| (*id, s.as_str())));
        Ok(resp
            .tokens
            .into_iter()
            .map(|(id, s)| Token::new(id, s))
            .collect())
    }

    fn detokenize_with_offsets(
        &self,
        tokens: &[TokenId],
    ) -> Result<(String, Vec<Range<usize>>), BackendError> {
        let remote: Option<DetokenizeResponse> = self.post(
            DETOKENIZE_PATH,
            &DetokenizeRequest {
                tokens: tokens.to_vec(),
            },
        )?;
        if let Some(resp) = remote {
            return Ok((
                resp.text,
                resp.offsets.into_iter().map(|(s, e)| s..e).collect(),
            ));
        }
        let cache = self.surfaces.read().expect("surface cache poisoned");
        let mut text = String::new();
        let mut offsets = Vec::with_capacity(tokens.len());
        for id in tokens {
            let s = cache.get(id).ok_or(BackendError::UnknownToken(*id))?;
            let start = text.len();
            text.push_str(s);
            offsets.push(start..text.len());
        }
        Ok((text, offsets))
    }

    fn next_distribution(
        &self,
        context: &[TokenId],
        top_m: usize,
    ) -> Result<RankedDistribution, BackendError> {
        self.next(
            NextRequest {
                context: Context::Ids(context.to_vec()),
                top_m,
            },
            context.len(),
        )
    }

    fn capabilities(&self) -> Capabilities {
        self.info.get_or_init(|| self.fetch_info()).clone()
    }

    fn describe(&self) -> String {
        format!("http({})", self.base)
    }
}
