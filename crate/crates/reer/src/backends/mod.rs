//! Completion transports for generation and logprob-echo scoring.
//!
//! Everything speaks one request/reply shape. Scoring requests ask the
//! backend to echo the prompt with per-token logprobs and generate
//! nothing; generation requests do the opposite. Concrete transports:
//!
//! * [`HttpBackend`] — remote completion/chat endpoints.
//! * [`CachedBackend`] — content-addressed on-disk replies with
//!   single-flight deduplication.
//! * [`ScriptedBackend`] — replies keyed by request hash, with call
//!   counting; the offline test harness.
//! * [`SyntheticBackend`] — deterministic procedural generation keyed
//!   by request identity; drives fully offline pipeline runs.
//!
//! Wrappers compose: `Cached(Limited(Retrying(Http)))` is the usual
//! remote stack.

mod cache;
mod http;
mod retry;
mod scripted;

pub use cache::CachedBackend;
pub use http::{http_call_count, ApiFlavor, HttpBackend, RemoteConfig};
pub use retry::{ConcurrencyLimited, Retrying, RetryPolicy};
pub use scripted::{ScriptedBackend, SyntheticBackend};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::BackendError;

/// One completion call. `sampling` is passed through to the backend
/// untouched; it participates in the request hash, so any change to a
/// sampling parameter is a distinct cache entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    /// 0 for pure scoring.
    pub max_new_tokens: u32,
    pub echo: bool,
    pub want_logprobs: bool,
    pub sampling: BTreeMap<String, serde_json::Value>,
}

impl CompletionRequest {
    /// A scoring-shape request: echo the prompt with logprobs, generate
    /// nothing.
    pub fn scoring(model: impl Into<String>, prompt: impl Into<String>) -> CompletionRequest {
        CompletionRequest {
            model: model.into(),
            prompt: prompt.into(),
            max_new_tokens: 0,
            echo: true,
            want_logprobs: true,
            sampling: BTreeMap::new(),
        }
    }

    /// A generation-shape request.
    pub fn generation(
        model: impl Into<String>,
        prompt: impl Into<String>,
        max_new_tokens: u32,
    ) -> CompletionRequest {
        CompletionRequest {
            model: model.into(),
            prompt: prompt.into(),
            max_new_tokens,
            echo: false,
            want_logprobs: false,
            sampling: BTreeMap::new(),
        }
    }

    pub fn with_sampling(mut self, key: &str, value: serde_json::Value) -> CompletionRequest {
        self.sampling.insert(key.to_string(), value);
        self
    }

    pub fn is_scoring_shape(&self) -> bool {
        self.max_new_tokens == 0 && self.echo && self.want_logprobs
    }

    /// Hex SHA-256 over the canonical JSON serialization of all fields.
    /// Struct fields serialize in declaration order and the sampling
    /// map is ordered, so the digest is stable.
    pub fn request_hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("request serializes");
        let mut h = Sha256::new();
        h.update(&canonical);
        let digest = h.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}

/// One echoed token with its logprob and character offset into the
/// echoed prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
    pub char_offset: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
}

/// What came back from a backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendReply {
    pub text: Option<String>,
    pub echoed_token_logprobs: Option<Vec<TokenLogprob>>,
    pub usage: Usage,
    pub latency_ms: u64,
    /// How many attempts the call took, counting retries.
    pub attempts: u32,
}

impl BackendReply {
    /// A plain generated-text reply.
    pub fn from_text(text: impl Into<String>) -> BackendReply {
        let text = text.into();
        let completion_tokens = text.split_whitespace().count() as u32;
        BackendReply {
            text: Some(text),
            echoed_token_logprobs: None,
            usage: Usage {
                prompt_tokens: 0,
                completion_tokens,
            },
            latency_ms: 0,
            attempts: 1,
        }
    }

    /// An echo-scoring reply built from (token, logprob) pairs; offsets
    /// are the cumulative character lengths.
    pub fn from_token_logprobs(tokens: &[(&str, f64)]) -> BackendReply {
        let mut offset = 0usize;
        let mut echoed = Vec::with_capacity(tokens.len());
        for (token, logprob) in tokens {
            echoed.push(TokenLogprob {
                token: token.to_string(),
                logprob: *logprob,
                char_offset: offset,
            });
            offset += token.chars().count();
        }
        BackendReply {
            text: None,
            echoed_token_logprobs: Some(echoed),
            usage: Usage {
                prompt_tokens: tokens.len() as u32,
                completion_tokens: 0,
            },
            latency_ms: 0,
            attempts: 1,
        }
    }
}

/// A completion transport. Implementations must be safe to share
/// across worker threads and to invoke concurrently.
pub trait TextCompletion: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, req: &CompletionRequest) -> Result<BackendReply, BackendError>;
}

/// Runs a scoring-shape request and validates the echo contract:
/// logprobs present, offsets non-decreasing, and the echoed tokens
/// reconstruct the prompt exactly.
pub fn complete_with_logprobs(
    backend: &dyn TextCompletion,
    req: &CompletionRequest,
) -> Result<BackendReply, BackendError> {
    if !req.is_scoring_shape() {
        return Err(BackendError::Unsupported(
            "scoring requires max_new_tokens == 0, echo, and logprobs".into(),
        ));
    }
    let reply = backend.complete(req)?;
    let tokens = reply
        .echoed_token_logprobs
        .as_ref()
        .ok_or_else(|| BackendError::Protocol("reply is missing echoed logprobs".into()))?;
    let mut expected_offset = 0usize;
    let mut echoed = String::new();
    for t in tokens {
        if t.char_offset != expected_offset {
            return Err(BackendError::Protocol(format!(
                "token offset {} does not cover the echo (expected {})",
                t.char_offset, expected_offset
            )));
        }
        expected_offset += t.token.chars().count();
        echoed.push_str(&t.token);
    }
    if echoed != req.prompt {
        return Err(BackendError::Truncation);
    }
    Ok(reply)
}

/// Runs a generation-shape request and validates that text came back.
pub fn generate_text(
    backend: &dyn TextCompletion,
    req: &CompletionRequest,
) -> Result<BackendReply, BackendError> {
    if req.max_new_tokens == 0 {
        return Err(BackendError::Unsupported(
            "generation requires max_new_tokens > 0".into(),
        ));
    }
    let reply = backend.complete(req)?;
    if reply.text.is_none() {
        return Err(BackendError::Protocol("reply is missing generated text".into()));
    }
    Ok(reply)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_hash_is_stable_and_sampling_sensitive() {
        let a = CompletionRequest::generation("m", "p", 16);
        let b = CompletionRequest::generation("m", "p", 16);
        assert_eq!(a.request_hash(), b.request_hash());
        let c = b.with_sampling("temperature", serde_json::json!(0.7));
        assert_ne!(a.request_hash(), c.request_hash());
    }

    #[test]
    fn scoring_shape_invariant() {
        assert!(CompletionRequest::scoring("m", "p").is_scoring_shape());
        assert!(!CompletionRequest::generation("m", "p", 4).is_scoring_shape());
    }

    #[test]
    fn echo_reply_roundtrips_fixed_logprobs() {
        let backend = ScriptedBackend::new();
        let req = CompletionRequest::scoring("m", "ab");
        let reply = BackendReply::from_token_logprobs(&[("a", -0.1), ("b", -0.2)]);
        backend.insert(&req, reply.clone());
        let got = complete_with_logprobs(&backend, &req).unwrap();
        assert_eq!(got.echoed_token_logprobs, reply.echoed_token_logprobs);
    }

    #[test]
    fn missing_logprobs_is_a_protocol_error() {
        let backend = ScriptedBackend::new();
        let req = CompletionRequest::scoring("m", "ab");
        backend.insert(&req, BackendReply::from_text("not logprobs"));
        let err = complete_with_logprobs(&backend, &req).unwrap_err();
        assert!(matches!(err, BackendError::Protocol(_)));
    }

    #[test]
    fn echo_mismatch_is_truncation() {
        let backend = ScriptedBackend::new();
        let req = CompletionRequest::scoring("m", "abc");
        backend.insert(&req, BackendReply::from_token_logprobs(&[("a", -0.1), ("b", -0.2)]));
        let err = complete_with_logprobs(&backend, &req).unwrap_err();
        assert!(matches!(err, BackendError::Truncation));
    }

    #[test]
    fn generation_shape_is_enforced() {
        let backend = ScriptedBackend::new();
        let req = CompletionRequest::scoring("m", "p");
        assert!(matches!(
            generate_text(&backend, &req),
            Err(BackendError::Unsupported(_))
        ));
    }
}
