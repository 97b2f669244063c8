//! Backend selection from `mock:SCRIPT` / `http:URL` descriptors.

use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use dore_core::backend::{BackendError, HttpBackend, LanguageModel, MockBackend};

pub const BACKEND_URL_VAR: &str = "DORE_BACKEND_URL";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Mock(PathBuf),
    Http(String),
}

impl FromStr for BackendSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(path) = s.strip_prefix("mock:") {
            return Ok(Self::Mock(PathBuf::from(path)));
        }
        if let Some(url) = s.strip_prefix("http:") {
            if url.starts_with("//") {
                return Ok(Self::Http(s.to_string()));
            }
            return Ok(Self::Http(url.to_string()));
        }
        if s.starts_with("https:") {
            return Ok(Self::Http(s.to_string()));
        }
        Err(format!("backend must be mock:SCRIPT or http:URL, got {s:?}"))
    }
}

impl std::fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Mock(p) => write!(f, "mock:{}", p.display()),
            Self::Http(u) => write!(f, "http:{u}"),
        }
    }
}

impl BackendSpec {
    /// The explicit descriptor, else `DORE_BACKEND_URL`.
    pub fn resolve(explicit: Option<&str>) -> Result<Self, String> {
        match explicit {
            Some(s) => s.parse(),
            None => match std::env::var(BACKEND_URL_VAR) {
                Ok(url) if !url.is_empty() => Ok(Self::Http(url)),
                _ => Err(format!("no --backend given and {BACKEND_URL_VAR} is unset")),
            },
        }
    }

    pub fn connect(&self) -> Result<Arc<dyn LanguageModel>, BackendError> {
        Ok(match self {
            Self::Mock(path) => Arc::new(MockBackend::from_file(path)?),
            Self::Http(url) => Arc::new(HttpBackend::new(url)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_descriptors() {
        assert_eq!(
            "mock:fixtures/toy/script.json".parse::<BackendSpec>().unwrap(),
            BackendSpec::Mock("fixtures/toy/script.json".into())
        );
        assert_eq!(
            "http:http://localhost:8080".parse::<BackendSpec>().unwrap(),
            BackendSpec::Http("http://localhost:8080".into())
        );
        assert_eq!(
            "http://localhost:8080".parse::<BackendSpec>().unwrap(),
            BackendSpec::Http("http://localhost:8080".into())
        );
        assert!("gpu:0".parse::<BackendSpec>().is_err());
    }
}
