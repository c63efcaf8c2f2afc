//! Remote completion client with logprob echo.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::BackendError;

use super::retry::{ConcurrencyLimited, Retrying, RetryPolicy};
use super::{BackendReply, CachedBackend, CompletionRequest, TextCompletion, TokenLogprob, Usage};

static HTTP_CALLS: AtomicU64 = AtomicU64::new(0);

/// Process-wide count of HTTP calls issued by any [`HttpBackend`].
/// Offline paths assert this stays flat.
pub fn http_call_count() -> u64 {
    HTTP_CALLS.load(Ordering::SeqCst)
}

/// Which endpoint generation requests use. Scoring always goes through
/// the completion endpoint, the only one that echoes logprobs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiFlavor {
    #[default]
    Completion,
    Chat,
}

/// Remote backend configuration; lives in the run config file.
/// Credentials come only from the named environment variable.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    pub api_flavor: ApiFlavor,
    pub api_key_env: Option<String>,
    pub timeout_ms: u64,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    pub cache_dir: Option<PathBuf>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            endpoint: "http://127.0.0.1:8000/v1".into(),
            model: "default".into(),
            api_flavor: ApiFlavor::Completion,
            api_key_env: Some("REER_API_KEY".into()),
            timeout_ms: 120_000,
            retry: RetryPolicy::default(),
            max_in_flight: 8,
            cache_dir: None,
        }
    }
}

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_flavor: ApiFlavor,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(config: &RemoteConfig) -> Result<HttpBackend, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| BackendError::Protocol(format!("client build failed: {e}")))?;
        let api_key = config
            .api_key_env
            .as_ref()
            .and_then(|name| std::env::var(name).ok())
            .filter(|v| !v.is_empty());
        Ok(HttpBackend {
            client,
            endpoint: config.endpoint.trim_end_matches('/').to_string(),
            api_flavor: config.api_flavor,
            api_key,
        })
    }

    /// The usual remote stack: cache (when configured) over a
    /// concurrency limit over retries over HTTP.
    pub fn build_stack(config: &RemoteConfig) -> Result<Arc<dyn TextCompletion>, BackendError> {
        let http = HttpBackend::new(config)?;
        let limited = ConcurrencyLimited::new(Retrying::new(http, config.retry), config.max_in_flight);
        match &config.cache_dir {
            Some(dir) => Ok(Arc::new(CachedBackend::new(limited, dir.clone())?)),
            None => Ok(Arc::new(limited)),
        }
    }

    fn post(&self, url: &str, body: &serde_json::Value) -> Result<serde_json::Value, BackendError> {
        HTTP_CALLS.fetch_add(1, Ordering::SeqCst);
        let mut request = self.client.post(url).json(body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| BackendError::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        let status = response.status();
        let text = response.text().map_err(|e| BackendError::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        if status.as_u16() >= 500 || status.as_u16() == 429 {
            return Err(BackendError::Transport {
                attempts: 1,
                message: format!("status {status}: {}", snippet(&text)),
            });
        }
        if !status.is_success() {
            return Err(BackendError::Protocol(format!(
                "status {status}: {}",
                snippet(&text)
            )));
        }
        serde_json::from_str(&text)
            .map_err(|e| BackendError::Protocol(format!("invalid response json: {e}")))
    }
}

fn snippet(text: &str) -> &str {
    &text[..text.len().min(200)]
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Deserialize)]
struct WireLogprobs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u32,
    #[serde(default)]
    completion_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

impl TextCompletion for HttpBackend {
    fn id(&self) -> &str {
        "http"
    }

    fn complete(&self, req: &CompletionRequest) -> Result<BackendReply, BackendError> {
        let start = Instant::now();
        let use_chat = !req.is_scoring_shape() && self.api_flavor == ApiFlavor::Chat;

        let reply = if use_chat {
            let mut body = serde_json::json!({
                "model": req.model,
                "messages": [{"role": "user", "content": req.prompt}],
                "max_tokens": req.max_new_tokens,
            });
            merge_sampling(&mut body, req);
            let value = self.post(&format!("{}/chat/completions", self.endpoint), &body)?;
            let parsed: ChatResponse = serde_json::from_value(value)
                .map_err(|e| BackendError::Protocol(format!("chat response: {e}")))?;
            let choice = parsed
                .choices
                .into_iter()
                .next()
                .ok_or_else(|| BackendError::Protocol("no choices in chat response".into()))?;
            BackendReply {
                text: Some(choice.message.content),
                echoed_token_logprobs: None,
                usage: wire_usage(parsed.usage),
                latency_ms: 0,
                attempts: 1,
            }
        } else {
            let mut body = serde_json::json!({
                "model": req.model,
                "prompt": req.prompt,
                "max_tokens": req.max_new_tokens,
                "echo": req.echo,
            });
            if req.want_logprobs {
                body["logprobs"] = serde_json::json!(0);
            }
            merge_sampling(&mut body, req);
            let value = self.post(&format!("{}/completions", self.endpoint), &body)?;
            let parsed: CompletionResponse = serde_json::from_value(value)
                .map_err(|e| BackendError::Protocol(format!("completion response: {e}")))?;
            let choice = parsed
                .choices
                .into_iter()
                .next()
                .ok_or_else(|| BackendError::Protocol("no choices in completion response".into()))?;
            let echoed = match choice.logprobs {
                Some(lp) => {
                    if lp.tokens.len() != lp.token_logprobs.len()
                        || lp.tokens.len() != lp.text_offset.len()
                    {
                        return Err(BackendError::Protocol(
                            "logprob arrays have mismatched lengths".into(),
                        ));
                    }
                    Some(
                        lp.tokens
                            .into_iter()
                            .zip(lp.token_logprobs)
                            .zip(lp.text_offset)
                            .map(|((token, logprob), char_offset)| TokenLogprob {
                                token,
                                // servers return null for the context-free
                                // first token; it is never a scored one
                                logprob: logprob.unwrap_or(0.0),
                                char_offset,
                            })
                            .collect(),
                    )
                }
                None => None,
            };
            BackendReply {
                text: choice.text,
                echoed_token_logprobs: echoed,
                usage: wire_usage(parsed.usage),
                latency_ms: 0,
                attempts: 1,
            }
        };

        Ok(BackendReply {
            latency_ms: start.elapsed().as_millis() as u64,
            ..reply
        })
    }
}

fn merge_sampling(body: &mut serde_json::Value, req: &CompletionRequest) {
    if let Some(map) = body.as_object_mut() {
        for (k, v) in &req.sampling {
            map.insert(k.clone(), v.clone());
        }
    }
}

fn wire_usage(usage: Option<WireUsage>) -> Usage {
    match usage {
        Some(u) => Usage {
            prompt_tokens: u.prompt_tokens,
            completion_tokens: u.completion_tokens,
        },
        None => Usage::default(),
    }
}
