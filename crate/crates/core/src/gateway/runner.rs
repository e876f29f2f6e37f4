use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{generate, GatewayError, Generator, GeneratorRequest, RenderError, Step, TemplatePack};
use super::{LOCAL_MAX_TOKENS, REMOTE_MAX_TOKENS};

/// Decoding knobs applied to every pipeline-step request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub greedy: bool,
    pub seed: Option<u64>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 1.0,
            top_p: 1.0,
            max_tokens: REMOTE_MAX_TOKENS,
            greedy: false,
            seed: None,
        }
    }
}

impl SamplingParams {
    pub fn local() -> Self {
        SamplingParams {
            max_tokens: LOCAL_MAX_TOKENS,
            greedy: true,
            ..Self::default()
        }
    }

    pub fn request(&self, template_id: &str, prompt: String) -> GeneratorRequest {
        GeneratorRequest {
            template_id: template_id.to_string(),
            rendered_prompt: prompt,
            temperature: self.temperature,
            top_p: self.top_p,
            max_tokens: self.max_tokens,
            seed: self.seed,
            greedy: self.greedy,
        }
    }
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Renders a step template and sends it to the backend.
#[derive(Clone, Copy)]
pub struct StepRunner<'a> {
    pub backend: &'a dyn Generator,
    pub pack: &'a TemplatePack,
    pub params: SamplingParams,
}

impl<'a> StepRunner<'a> {
    pub fn new(backend: &'a dyn Generator, pack: &'a TemplatePack) -> Self {
        StepRunner {
            backend,
            pack,
            params: SamplingParams::default(),
        }
    }

    pub fn with_params(mut self, params: SamplingParams) -> Self {
        self.params = params;
        self
    }

    pub fn run(&self, step: Step, values: &[(&str, String)]) -> Result<String, StepError> {
        let prompt = self.pack.step(step)?.render(values)?;
        let request = self.params.request(step.id(), prompt);
        Ok(generate(self.backend, &request)?.text)
    }
}
