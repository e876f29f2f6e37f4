use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{elapsed_ms, prompt_digest, GatewayError, Generator, GeneratorRequest, GeneratorResponse};
use crate::model::TaskKind;

/// A content rule: matches when the template id agrees (if given) and the
/// rendered prompt contains every listed fragment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default)]
    pub template: Option<String>,
    #[serde(default)]
    pub contains: Vec<String>,
    pub response: String,
}

impl MockRule {
    pub fn new(template: Option<&str>, contains: &[&str], response: impl Into<String>) -> Self {
        MockRule {
            template: template.map(String::from),
            contains: contains.iter().map(|s| s.to_string()).collect(),
            response: response.into(),
        }
    }

    fn matches(&self, request: &GeneratorRequest) -> bool {
        self.template
            .as_ref()
            .is_none_or(|t| *t == request.template_id)
            && self
                .contains
                .iter()
                .all(|frag| request.rendered_prompt.contains(frag.as_str()))
    }
}

/// Scripted responses. Lookup order: exact prompt digest, then the first
/// matching rule, then the fallback.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub exact: BTreeMap<String, String>,
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub fallback: Option<String>,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::InvalidRequest(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&raw)
            .map_err(|e| GatewayError::InvalidRequest(format!("{}: {e}", path.display())))
    }

    /// Scripts a response for one exact prompt.
    pub fn on_prompt(mut self, prompt: &str, response: impl Into<String>) -> Self {
        self.exact.insert(prompt_digest(prompt), response.into());
        self
    }

    pub fn rule(mut self, rule: MockRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn fallback(mut self, response: impl Into<String>) -> Self {
        self.fallback = Some(response.into());
        self
    }

    fn lookup(&self, request: &GeneratorRequest) -> Option<&str> {
        self.exact
            .get(&prompt_digest(&request.rendered_prompt))
            .or_else(|| {
                self.rules
                    .iter()
                    .find(|r| r.matches(request))
                    .map(|r| &r.response)
            })
            .or(self.fallback.as_ref())
            .map(String::as_str)
    }
}

#[derive(Debug, Clone)]
pub enum MockMode {
    Script(MockScript),
    /// Emits a label of `task` chosen by hashing the seed with the prompt.
    SeededLabels { seed: u64, task: TaskKind },
}

/// Deterministic offline backend: the response is a pure function of the
/// mode and the rendered prompt.
#[derive(Debug, Clone)]
pub struct MockBackend {
    id: String,
    mode: MockMode,
}

impl MockBackend {
    pub fn scripted(script: MockScript) -> Self {
        MockBackend {
            id: "mock".into(),
            mode: MockMode::Script(script),
        }
    }

    pub fn seeded_labels(seed: u64, task: TaskKind) -> Self {
        MockBackend {
            id: format!("mock-seeded-{seed}"),
            mode: MockMode::SeededLabels { seed, task },
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }
}

impl Generator for MockBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &GeneratorRequest) -> Result<GeneratorResponse, GatewayError> {
        let start = Instant::now();
        let text = match &self.mode {
            MockMode::Script(script) => script
                .lookup(request)
                .ok_or_else(|| GatewayError::Unscripted {
                    template_id: request.template_id.clone(),
                    digest: prompt_digest(&request.rendered_prompt),
                })?
                .to_string(),
            MockMode::SeededLabels { seed, task } => {
                let mut hasher = Sha256::new();
                hasher.update(seed.to_le_bytes());
                hasher.update(request.rendered_prompt.as_bytes());
                let digest = hasher.finalize();
                let pick = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
                let labels = task.labels();
                labels[(pick % labels.len() as u64) as usize].to_string()
            }
        };
        Ok(GeneratorResponse {
            text,
            backend_id: self.id.clone(),
            cached: false,
            latency_ms: elapsed_ms(start),
        })
    }
}

/// Adapts a closure into a backend. Handy for tests that need to compute a
/// response from the prompt.
pub struct FnBackend<F> {
    id: String,
    f: F,
}

impl<F> FnBackend<F>
where
    F: Fn(&GeneratorRequest) -> Result<String, GatewayError> + Send + Sync,
{
    pub fn new(id: impl Into<String>, f: F) -> Self {
        FnBackend { id: id.into(), f }
    }
}

impl<F> Generator for FnBackend<F>
where
    F: Fn(&GeneratorRequest) -> Result<String, GatewayError> + Send + Sync,
{
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &GeneratorRequest) -> Result<GeneratorResponse, GatewayError> {
        let start = Instant::now();
        let text = (self.f)(request)?;
        Ok(GeneratorResponse {
            text,
            backend_id: self.id.clone(),
            cached: false,
            latency_ms: elapsed_ms(start),
        })
    }
}

/// Wraps a backend and records every call that reaches it.
pub struct CountingBackend<G> {
    inner: G,
    calls: AtomicUsize,
    log: Mutex<Vec<GeneratorRequest>>,
}

impl<G: Generator> CountingBackend<G> {
    pub fn new(inner: G) -> Self {
        CountingBackend {
            inner,
            calls: AtomicUsize::new(0),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Calls made with the given template id.
    pub fn calls_for(&self, template_id: &str) -> usize {
        self.log
            .lock()
            .expect("log lock")
            .iter()
            .filter(|r| r.template_id == template_id)
            .count()
    }

    pub fn requests(&self) -> Vec<GeneratorRequest> {
        self.log.lock().expect("log lock").clone()
    }
}

impl<G: Generator> Generator for CountingBackend<G> {
    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }

    fn generate(&self, request: &GeneratorRequest) -> Result<GeneratorResponse, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.log.lock().expect("log lock").push(request.clone());
        self.inner.generate(request)
    }
}
