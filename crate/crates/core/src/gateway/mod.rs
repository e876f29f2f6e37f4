//! Uniform text-generation interface over remote providers and a scripted
//! mock, with prompt templating, a content-addressed response cache and the
//! retry/rate-limit machinery shared with the retrieval client.

mod cache;
mod http;
mod limits;
mod mock;
mod runner;
pub mod templates;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{cache_key, cached_generate, CachedGenerator, ResponseCache};
pub use http::{HttpBackend, HttpBackendConfig, HttpCall, HttpTransport, RetryPolicy, API_KEY_ENV};
pub use limits::{ConcurrencyLimit, Limits, TokenBucket};
pub use mock::{CountingBackend, FnBackend, MockBackend, MockMode, MockRule, MockScript};
pub use runner::{SamplingParams, StepError, StepRunner};
pub use templates::{PromptTemplate, RenderError, Step, StepTemplate, TemplatePack};

/// Output budget used for hosted, proprietary-style backends.
pub const REMOTE_MAX_TOKENS: u32 = 1024;
/// Output budget used for locally served open-weight models.
pub const LOCAL_MAX_TOKENS: u32 = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorRequest {
    pub template_id: String,
    pub rendered_prompt: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Greedy decoding flag. Passed through alongside `temperature`; the
    /// gateway does not reconcile the two.
    #[serde(default)]
    pub greedy: bool,
}

impl GeneratorRequest {
    /// Request with hosted-backend defaults (temperature 1.0, top-p 1.0,
    /// 1024 output tokens).
    pub fn new(template_id: impl Into<String>, rendered_prompt: impl Into<String>) -> Self {
        GeneratorRequest {
            template_id: template_id.into(),
            rendered_prompt: rendered_prompt.into(),
            temperature: 1.0,
            top_p: 1.0,
            max_tokens: REMOTE_MAX_TOKENS,
            seed: None,
            greedy: false,
        }
    }

    /// Request with local-model defaults: 512 output tokens, greedy decoding.
    pub fn local(template_id: impl Into<String>, rendered_prompt: impl Into<String>) -> Self {
        GeneratorRequest {
            max_tokens: LOCAL_MAX_TOKENS,
            greedy: true,
            ..Self::new(template_id, rendered_prompt)
        }
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidRequest(m.to_string()));
        if self.rendered_prompt.trim().is_empty() {
            return bad("rendered prompt is empty");
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return bad("temperature must be >= 0");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must be in (0, 1]");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorResponse {
    pub text: String,
    pub backend_id: String,
    pub cached: bool,
    pub latency_ms: u64,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failed after {attempts} attempt(s) (last status {status:?}): {message}")]
    Transport {
        attempts: u32,
        status: Option<u16>,
        message: String,
    },
    #[error("credential error (status {status:?}): {message}")]
    Credential { status: Option<u16>, message: String },
    #[error("timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("unexpected response body: {0}")]
    Protocol(String),
    #[error("mock has no script entry for template '{template_id}' (prompt digest {digest})")]
    Unscripted { template_id: String, digest: String },
    #[error("cache error: {0}")]
    Cache(String),
}

/// A text generator. Implementations must tolerate concurrent calls.
pub trait Generator: Send + Sync {
    fn backend_id(&self) -> &str;

    fn generate(&self, request: &GeneratorRequest) -> Result<GeneratorResponse, GatewayError>;
}

impl<G: Generator + ?Sized> Generator for &G {
    fn backend_id(&self) -> &str {
        (**self).backend_id()
    }

    fn generate(&self, request: &GeneratorRequest) -> Result<GeneratorResponse, GatewayError> {
        (**self).generate(request)
    }
}

impl<G: Generator + ?Sized> Generator for Box<G> {
    fn backend_id(&self) -> &str {
        (**self).backend_id()
    }

    fn generate(&self, request: &GeneratorRequest) -> Result<GeneratorResponse, GatewayError> {
        (**self).generate(request)
    }
}

impl<G: Generator + ?Sized> Generator for std::sync::Arc<G> {
    fn backend_id(&self) -> &str {
        (**self).backend_id()
    }

    fn generate(&self, request: &GeneratorRequest) -> Result<GeneratorResponse, GatewayError> {
        (**self).generate(request)
    }
}

/// Validates the request and forwards it to the backend.
pub fn generate<G: Generator + ?Sized>(
    backend: &G,
    request: &GeneratorRequest,
) -> Result<GeneratorResponse, GatewayError> {
    request.validate()?;
    backend.generate(request)
}

/// Hex SHA-256 of a prompt's content.
pub fn prompt_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

pub(crate) fn elapsed_ms(start: Instant) -> u64 {
    start.elapsed().as_millis().try_into().unwrap_or(u64::MAX)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_inference_configuration() {
        let r = GeneratorRequest::new("t", "p");
        assert_eq!((r.temperature, r.top_p, r.max_tokens, r.greedy), (1.0, 1.0, 1024, false));
        let l = GeneratorRequest::local("t", "p");
        assert_eq!((l.temperature, l.top_p, l.max_tokens, l.greedy), (1.0, 1.0, 512, true));
    }

    #[test]
    fn validation_rejects_bad_knobs() {
        assert!(GeneratorRequest::new("t", "  ").validate().is_err());
        let mut r = GeneratorRequest::new("t", "p");
        r.top_p = 0.0;
        assert!(r.validate().is_err());
        r.top_p = 1.0;
        r.temperature = -0.1;
        assert!(r.validate().is_err());
        r.temperature = 0.0;
        r.max_tokens = 0;
        assert!(r.validate().is_err());
    }

    #[test]
    fn digest_is_stable() {
        assert_eq!(
            prompt_digest("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
