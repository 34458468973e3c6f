//! Model-service boundary.
//!
//! Every model the pipeline talks to (condensers, reasoner, query embedder)
//! is a [`Backend`]: something that answers generate, score and embed
//! requests. Implementations are an HTTP client ([`http::HttpBackend`]) and
//! a deterministic in-process [`mock::MockBackend`]. [`cache::CachedBackend`]
//! wraps either with an on-disk response cache and in-flight deduplication.

pub mod cache;
pub mod http;
pub mod mock;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{cached_call, canonical_json, request_key, CachedBackend, ResponseCache};

pub const DEFAULT_BEAM_SIZE: u32 = 5;
/// Concepts are one or two words.
pub const DEFAULT_CONCEPT_MAX_TOKENS: u32 = 10;
pub const DEFAULT_LONG_MAX_TOKENS: u32 = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendRole {
    CondenserVlm,
    CondenserLlm,
    Reasoner,
    Embedder,
}

impl BackendRole {
    pub fn supports(self, endpoint: Endpoint) -> bool {
        match self {
            Self::Embedder => endpoint == Endpoint::Embed,
            Self::CondenserVlm | Self::CondenserLlm | Self::Reasoner => endpoint != Endpoint::Embed,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::CondenserVlm => "condenser-vlm",
            Self::CondenserLlm => "condenser-llm",
            Self::Reasoner => "reasoner",
            Self::Embedder => "embedder",
        }
    }
}

impl fmt::Display for BackendRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Endpoint {
    Generate,
    Score,
    Embed,
}

impl Endpoint {
    pub fn path(self) -> &'static str {
        match self {
            Self::Generate => "v1/generate",
            Self::Score => "v1/score",
            Self::Embed => "v1/embed",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Generate => "generate",
            Self::Score => "score",
            Self::Embed => "embed",
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("backend '{backend}' ({role}) does not support {endpoint}")]
    Unsupported {
        backend: String,
        role: BackendRole,
        endpoint: &'static str,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend '{backend}' request {request_hash} failed after {attempts} attempt(s): {message}")]
    Transport {
        backend: String,
        request_hash: String,
        attempts: u32,
        message: String,
    },
    #[error("backend '{backend}' returned a malformed response: {message}")]
    Malformed { backend: String, message: String },
    #[error("backend configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub beam_size: u32,
    pub max_new_tokens: u32,
}

impl GenerateRequest {
    pub fn single(input: impl Into<String>) -> Self {
        Self {
            inputs: vec![input.into()],
            image_ref: None,
            beam_size: DEFAULT_BEAM_SIZE,
            max_new_tokens: DEFAULT_LONG_MAX_TOKENS,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.inputs.len() != 1 && self.inputs.len() != 3 {
            return Err(BackendError::InvalidRequest(format!(
                "generate takes 1 or 3 input sequences, got {}",
                self.inputs.len()
            )));
        }
        if self.beam_size == 0 || self.max_new_tokens == 0 {
            return Err(BackendError::InvalidRequest(
                "beam_size and max_new_tokens must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub target: String,
}

impl ScoreRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.target.is_empty() {
            return Err(BackendError::InvalidRequest("score target must be nonempty".into()));
        }
        if self.inputs.is_empty() {
            return Err(BackendError::InvalidRequest("score needs at least one input".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub output: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub logprob: f64,
    pub token_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Generate(GenerateRequest),
    Score(ScoreRequest),
    Embed(EmbedRequest),
}

impl Request {
    pub fn endpoint(&self) -> Endpoint {
        match self {
            Self::Generate(_) => Endpoint::Generate,
            Self::Score(_) => Endpoint::Score,
            Self::Embed(_) => Endpoint::Embed,
        }
    }

    /// JSON body as sent on the wire.
    pub fn to_json(&self) -> serde_json::Value {
        let v = match self {
            Self::Generate(r) => serde_json::to_value(r),
            Self::Score(r) => serde_json::to_value(r),
            Self::Embed(r) => serde_json::to_value(r),
        };
        v.expect("request types always serialize")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Generate(GenerateResponse),
    Score(ScoreResponse),
    Embed(EmbedResponse),
}

impl Response {
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let r = match self {
            Self::Generate(r) => serde_json::to_vec(r),
            Self::Score(r) => serde_json::to_vec(r),
            Self::Embed(r) => serde_json::to_vec(r),
        };
        r.expect("response types always serialize")
    }

    pub fn from_json_bytes(endpoint: Endpoint, bytes: &[u8]) -> Result<Self, serde_json::Error> {
        Ok(match endpoint {
            Endpoint::Generate => Self::Generate(serde_json::from_slice(bytes)?),
            Endpoint::Score => Self::Score(serde_json::from_slice(bytes)?),
            Endpoint::Embed => Self::Embed(serde_json::from_slice(bytes)?),
        })
    }

    /// Checks the response against the invariants of its endpoint.
    pub fn validate(&self, request: &Request) -> Result<(), String> {
        match (self, request) {
            (Self::Generate(_), Request::Generate(_)) => Ok(()),
            (Self::Score(s), Request::Score(_)) => {
                if !s.logprob.is_finite() || s.logprob > 0.0 {
                    Err(format!("logprob {} is not a finite value <= 0", s.logprob))
                } else if s.token_count == 0 {
                    Err("token_count must be positive".into())
                } else {
                    Ok(())
                }
            }
            (Self::Embed(e), Request::Embed(req)) => {
                if e.vectors.len() != req.texts.len() {
                    return Err(format!(
                        "{} vectors for {} texts",
                        e.vectors.len(),
                        req.texts.len()
                    ));
                }
                let dim = e.vectors.first().map(Vec::len).unwrap_or(0);
                if e.vectors.iter().any(|v| v.len() != dim || v.iter().any(|x| !x.is_finite())) {
                    return Err("embedding vectors are ragged or non-finite".into());
                }
                Ok(())
            }
            _ => Err("response kind does not match request".into()),
        }
    }
}

/// A model service.
///
/// Implementors provide [`Backend::call`]; the typed helpers check the role,
/// validate the request and unwrap the matching response kind.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn role(&self) -> BackendRole;
    fn call(&self, request: &Request) -> Result<Response, BackendError>;

    fn generate(&self, req: &GenerateRequest) -> Result<String, BackendError> {
        self.check(Endpoint::Generate)?;
        req.validate()?;
        let request = Request::Generate(req.clone());
        match self.call(&request)? {
            Response::Generate(r) => Ok(r.output),
            _ => Err(self.malformed("expected a generate response")),
        }
    }

    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        self.check(Endpoint::Score)?;
        req.validate()?;
        let request = Request::Score(req.clone());
        match self.call(&request)? {
            Response::Score(r) => Ok(r),
            _ => Err(self.malformed("expected a score response")),
        }
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        self.check(Endpoint::Embed)?;
        let request = Request::Embed(EmbedRequest {
            texts: texts.to_vec(),
        });
        match self.call(&request)? {
            Response::Embed(r) => Ok(r.vectors),
            _ => Err(self.malformed("expected an embed response")),
        }
    }

    #[doc(hidden)]
    fn check(&self, endpoint: Endpoint) -> Result<(), BackendError> {
        if self.role().supports(endpoint) {
            Ok(())
        } else {
            Err(BackendError::Unsupported {
                backend: self.id().to_string(),
                role: self.role(),
                endpoint: endpoint.name(),
            })
        }
    }

    #[doc(hidden)]
    fn malformed(&self, message: &str) -> BackendError {
        BackendError::Malformed {
            backend: self.id().to_string(),
            message: message.to_string(),
        }
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn role(&self) -> BackendRole {
        (**self).role()
    }
    fn call(&self, request: &Request) -> Result<Response, BackendError> {
        (**self).call(request)
    }
}

pub const MOCK_URL: &str = "mock";

/// Declaration of one backend in a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    pub id: String,
    pub role: BackendRole,
    /// Service base URL, or `"mock"` for the in-process mock.
    pub base_url: String,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub params: serde_json::Map<String, serde_json::Value>,
}

impl BackendSpec {
    pub fn mock(id: &str, role: BackendRole) -> Self {
        Self {
            id: id.into(),
            role,
            base_url: MOCK_URL.into(),
            params: Default::default(),
        }
    }

    pub fn is_mock(&self) -> bool {
        self.base_url == MOCK_URL
    }

    pub fn build(&self) -> Result<Arc<dyn Backend>, BackendError> {
        if self.id.is_empty() {
            return Err(BackendError::Config("backend id must be nonempty".into()));
        }
        if self.is_mock() {
            Ok(Arc::new(mock::MockBackend::from_params(&self.id, self.role, &self.params)?))
        } else {
            Ok(Arc::new(http::HttpBackend::from_params(
                &self.id,
                self.role,
                &self.base_url,
                &self.params,
            )?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roles_and_endpoints() {
        assert!(BackendRole::Embedder.supports(Endpoint::Embed));
        assert!(!BackendRole::Embedder.supports(Endpoint::Generate));
        assert!(BackendRole::Reasoner.supports(Endpoint::Score));
        assert!(!BackendRole::CondenserVlm.supports(Endpoint::Embed));
        let role: BackendRole = serde_json::from_str("\"condenser-llm\"").unwrap();
        assert_eq!(role, BackendRole::CondenserLlm);
    }

    #[test]
    fn request_validation() {
        let mut req = GenerateRequest::single("x");
        assert!(req.validate().is_ok());
        req.inputs = vec!["a".into(), "b".into()];
        assert!(req.validate().is_err());
        req.inputs = vec!["a".into(), "b".into(), "c".into()];
        assert!(req.validate().is_ok());
        req.beam_size = 0;
        assert!(req.validate().is_err());

        let score = ScoreRequest {
            inputs: vec!["a".into()],
            image_ref: None,
            target: String::new(),
        };
        assert!(score.validate().is_err());
    }

    #[test]
    fn wire_format_of_generate() {
        let req = GenerateRequest {
            inputs: vec!["question: q knowledge: p".into()],
            image_ref: Some("img/1.jpg".into()),
            beam_size: 5,
            max_new_tokens: 10,
        };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"inputs":["question: q knowledge: p"],"image_ref":"img/1.jpg","beam_size":5,"max_new_tokens":10}"#
        );
        let no_image = GenerateRequest::single("x");
        assert!(!serde_json::to_string(&no_image).unwrap().contains("image_ref"));
    }

    #[test]
    fn response_validation() {
        let score_req = Request::Score(ScoreRequest {
            inputs: vec!["a".into()],
            image_ref: None,
            target: "t".into(),
        });
        let bad = Response::Score(ScoreResponse { logprob: 0.5, token_count: 1 });
        assert!(bad.validate(&score_req).is_err());
        let zero_tokens = Response::Score(ScoreResponse { logprob: -1.0, token_count: 0 });
        assert!(zero_tokens.validate(&score_req).is_err());
        let ok = Response::Score(ScoreResponse { logprob: -1.0, token_count: 2 });
        assert!(ok.validate(&score_req).is_ok());

        let embed_req = Request::Embed(EmbedRequest { texts: vec!["a".into(), "b".into()] });
        let ragged = Response::Embed(EmbedResponse { vectors: vec![vec![1.0], vec![1.0, 2.0]] });
        assert!(ragged.validate(&embed_req).is_err());
    }

    #[test]
    fn spec_builds_mock() {
        let spec: BackendSpec = serde_json::from_str(
            r#"{"id":"vlm-a","role":"condenser-vlm","base_url":"mock","params":{"extra_stopwords":["plaid"]}}"#,
        )
        .unwrap();
        let backend = spec.build().unwrap();
        assert_eq!(backend.id(), "vlm-a");
        assert_eq!(backend.role(), BackendRole::CondenserVlm);
        let err = backend.embed(&["x".into()]).unwrap_err();
        assert!(matches!(err, BackendError::Unsupported { .. }));
    }
}
