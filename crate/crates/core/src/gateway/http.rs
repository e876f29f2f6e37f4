use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{elapsed_ms, GatewayError, Generator, GeneratorRequest, GeneratorResponse, Limits};

/// Environment variable holding the remote provider credential.
pub const API_KEY_ENV: &str = "CORE_EVAL_API_KEY";

/// Exponential backoff with proportional jitter. Only timeouts, 429 and 5xx
/// responses are retried.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            base_delay: Duration::from_secs(1),
            jitter: 0.2,
        }
    }
}

impl RetryPolicy {
    /// Nominal delay before retry number `retry` (0-based): base × 2^retry.
    pub fn nominal_delay(&self, retry: u32) -> Duration {
        self.base_delay.saturating_mul(1u32 << retry.min(16))
    }

    pub fn delay(&self, retry: u32, rng: &mut impl Rng) -> Duration {
        let factor = if self.jitter > 0.0 {
            1.0 + rng.random_range(-self.jitter..=self.jitter)
        } else {
            1.0
        };
        self.nominal_delay(retry).mul_f64(factor.max(0.0))
    }

    pub fn is_retryable_status(status: u16) -> bool {
        status == 429 || (500..=599).contains(&status)
    }
}

pub enum HttpCall<'a> {
    Get {
        url: &'a str,
        query: &'a [(String, String)],
    },
    Post {
        url: &'a str,
        headers: &'a [(String, String)],
        body: &'a str,
    },
}

enum Attempt {
    Done(String),
    Retry { status: Option<u16>, timeout: bool, message: String },
    Fatal(GatewayError),
}

/// Blocking HTTP client shared by the generation backends and the live
/// retrieval client.
pub struct HttpTransport {
    agent: ureq::Agent,
    retry: RetryPolicy,
    limits: Arc<Limits>,
}

impl HttpTransport {
    pub fn new(timeout: Duration, retry: RetryPolicy, limits: Arc<Limits>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpTransport {
            agent,
            retry,
            limits,
        }
    }

    pub fn retry_policy(&self) -> &RetryPolicy {
        &self.retry
    }

    fn attempt(&self, call: &HttpCall<'_>) -> Attempt {
        self.limits.bucket.acquire();
        let _permit = self.limits.concurrency.acquire();
        let result = match call {
            HttpCall::Get { url, query } => {
                let mut req = self.agent.get(*url);
                for (k, v) in query.iter() {
                    req = req.query(k, v);
                }
                req.call()
            }
            HttpCall::Post { url, headers, body } => {
                let mut req = self
                    .agent
                    .post(*url)
                    .header("Content-Type", "application/json");
                for (k, v) in headers.iter() {
                    req = req.header(k.as_str(), v.as_str());
                }
                req.send(body.as_bytes())
            }
        };
        match result {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let body = resp.body_mut().read_to_string().unwrap_or_default();
                match status {
                    200..=299 => Attempt::Done(body),
                    401 | 403 => Attempt::Fatal(GatewayError::Credential {
                        status: Some(status),
                        message: truncate(&body),
                    }),
                    s if RetryPolicy::is_retryable_status(s) => Attempt::Retry {
                        status: Some(s),
                        timeout: false,
                        message: truncate(&body),
                    },
                    s => Attempt::Fatal(GatewayError::Transport {
                        attempts: 1,
                        status: Some(s),
                        message: truncate(&body),
                    }),
                }
            }
            Err(ureq::Error::Timeout(t)) => Attempt::Retry {
                status: None,
                timeout: true,
                message: t.to_string(),
            },
            Err(e) => Attempt::Fatal(GatewayError::Transport {
                attempts: 1,
                status: None,
                message: e.to_string(),
            }),
        }
    }

    /// Runs the call under the retry policy and returns the response body.
    pub fn execute(&self, call: &HttpCall<'_>) -> Result<String, GatewayError> {
        let mut rng = rand::rng();
        let max = self.retry.max_attempts.max(1);
        let mut last = (None, false, String::new());
        for attempt in 1..=max {
            match self.attempt(call) {
                Attempt::Done(body) => return Ok(body),
                Attempt::Fatal(GatewayError::Transport { status, message, .. }) => {
                    return Err(GatewayError::Transport {
                        attempts: attempt,
                        status,
                        message,
                    })
                }
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry {
                    status,
                    timeout,
                    message,
                } => {
                    tracing::debug!(attempt, ?status, timeout, "retryable failure");
                    last = (status, timeout, message);
                    if attempt < max {
                        std::thread::sleep(self.retry.delay(attempt - 1, &mut rng));
                    }
                }
            }
        }
        let (status, timeout, message) = last;
        if timeout {
            Err(GatewayError::Timeout { attempts: max })
        } else {
            Err(GatewayError::Transport {
                attempts: max,
                status,
                message,
            })
        }
    }
}

fn truncate(s: &str) -> String {
    s.chars().take(300).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    /// Full endpoint URL of an OpenAI-compatible chat completions API.
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_key_env() -> String {
    API_KEY_ENV.to_string()
}

fn default_timeout_secs() -> u64 {
    60
}

/// Remote chat-completions backend.
pub struct HttpBackend {
    id: String,
    config: HttpBackendConfig,
    api_key: String,
    transport: HttpTransport,
}

impl HttpBackend {
    /// Reads the credential from the configured environment variable.
    pub fn from_env(
        config: HttpBackendConfig,
        retry: RetryPolicy,
        limits: Arc<Limits>,
    ) -> Result<Self, GatewayError> {
        let api_key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| GatewayError::Credential {
                status: None,
                message: format!("environment variable {} is not set", config.api_key_env),
            })?;
        Ok(Self::with_key(config, api_key, retry, limits))
    }

    pub fn with_key(
        config: HttpBackendConfig,
        api_key: String,
        retry: RetryPolicy,
        limits: Arc<Limits>,
    ) -> Self {
        let transport = HttpTransport::new(Duration::from_secs(config.timeout_secs), retry, limits);
        HttpBackend {
            id: format!("http:{}", config.model),
            config,
            api_key,
            transport,
        }
    }

    fn body(&self, request: &GeneratorRequest) -> Value {
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.rendered_prompt}],
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        if request.greedy {
            body["do_sample"] = json!(false);
        }
        body
    }
}

impl Generator for HttpBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &GeneratorRequest) -> Result<GeneratorResponse, GatewayError> {
        request.validate()?;
        let start = Instant::now();
        let body = self.body(request).to_string();
        let headers = [("Authorization".to_string(), format!("Bearer {}", self.api_key))];
        let raw = self.transport.execute(&HttpCall::Post {
            url: &self.config.base_url,
            headers: &headers,
            body: &body,
        })?;
        let parsed: Value =
            serde_json::from_str(&raw).map_err(|e| GatewayError::Protocol(e.to_string()))?;
        let text = parsed["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| GatewayError::Protocol(truncate(&raw)))?
            .to_string();
        Ok(GeneratorResponse {
            text,
            backend_id: self.id.clone(),
            cached: false,
            latency_ms: elapsed_ms(start),
        })
    }
}
