//! Prompt templates: the evaluation prompt pack (three per task) and the
//! pipeline step prompts, both stored as text files with a small
//! `key: value` front-matter block.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Sample, TaskKind};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RenderError {
    #[error("template '{template}' is for {expected} but the sample is {found}")]
    TaskMismatch {
        template: String,
        expected: TaskKind,
        found: TaskKind,
    },
    #[error("template '{template}': no value for placeholder {{{name}}}")]
    MissingValue { template: String, name: String },
    #[error("template '{template}': placeholder {{{name}}} is not allowed here")]
    Disallowed { template: String, name: String },
    #[error("template file {file}: {message}")]
    Format { file: String, message: String },
    #[error("template pack has no '{0}' template")]
    Missing(String),
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z][a-z0-9_]*)\}").expect("valid regex"))
}

/// Names of every `{name}` placeholder in `body`, in order of appearance.
pub fn placeholders(body: &str) -> Vec<String> {
    placeholder_re()
        .captures_iter(body)
        .map(|c| c[1].to_string())
        .collect()
}

/// Substitutes every placeholder in a single pass, so substituted values are
/// never re-scanned.
fn substitute(
    template: &str,
    body: &str,
    lookup: impl Fn(&str) -> Option<String>,
) -> Result<String, RenderError> {
    let mut out = String::with_capacity(body.len());
    let mut last = 0;
    for caps in placeholder_re().captures_iter(body) {
        let whole = caps.get(0).expect("match");
        let name = &caps[1];
        let value = lookup(name).ok_or_else(|| RenderError::MissingValue {
            template: template.to_string(),
            name: name.to_string(),
        })?;
        out.push_str(&body[last..whole.start()]);
        out.push_str(&value);
        last = whole.end();
    }
    out.push_str(&body[last..]);
    Ok(out)
}

/// Placeholders an evaluation template for `task` may use.
pub fn allowed_placeholders(task: TaskKind) -> &'static [&'static str] {
    match task {
        TaskKind::Emotion | TaskKind::Irony => &["text"],
        TaskKind::Stance => &["text", "target"],
        TaskKind::Mrpc => &["text", "text2", "sentence1", "sentence2"],
        TaskKind::Rte => &["text", "text2", "premise", "hypothesis"],
    }
}

/// An evaluation prompt bound to one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub task: TaskKind,
    pub body: String,
}

impl PromptTemplate {
    pub fn new(
        id: impl Into<String>,
        task: TaskKind,
        body: impl Into<String>,
    ) -> Result<Self, RenderError> {
        let t = PromptTemplate {
            id: id.into(),
            task,
            body: body.into(),
        };
        let allowed = allowed_placeholders(task);
        if let Some(bad) = placeholders(&t.body)
            .into_iter()
            .find(|p| !allowed.contains(&p.as_str()))
        {
            return Err(RenderError::Disallowed {
                template: t.id,
                name: bad,
            });
        }
        Ok(t)
    }

    /// Fills the template from a sample of the same task.
    pub fn render(&self, sample: &Sample) -> Result<String, RenderError> {
        render_prompt(self, sample)
    }
}

pub fn render_prompt(template: &PromptTemplate, sample: &Sample) -> Result<String, RenderError> {
    if template.task != sample.task {
        return Err(RenderError::TaskMismatch {
            template: template.id.clone(),
            expected: template.task,
            found: sample.task,
        });
    }
    let allowed = allowed_placeholders(template.task);
    substitute(&template.id, &template.body, |name| {
        if !allowed.contains(&name) {
            return None;
        }
        match name {
            "text" | "sentence1" | "premise" => Some(sample.text.clone()),
            "text2" | "sentence2" | "hypothesis" => sample.text2.clone(),
            "target" => sample.target.clone(),
            _ => None,
        }
    })
}

/// Pipeline prompt kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    ExtractEntities,
    SummarizeKnowledge,
    ExtractTriples,
    UpdateTriples,
    SemanticRewrite,
    SemanticRewritePair,
    Synthesize,
    SynthesizePair,
    CheckFactuality,
    CheckLabel,
}

impl Step {
    pub const ALL: [Step; 10] = [
        Step::ExtractEntities,
        Step::SummarizeKnowledge,
        Step::ExtractTriples,
        Step::UpdateTriples,
        Step::SemanticRewrite,
        Step::SemanticRewritePair,
        Step::Synthesize,
        Step::SynthesizePair,
        Step::CheckFactuality,
        Step::CheckLabel,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Step::ExtractEntities => "extract_entities",
            Step::SummarizeKnowledge => "summarize_knowledge",
            Step::ExtractTriples => "extract_triples",
            Step::UpdateTriples => "update_triples",
            Step::SemanticRewrite => "semantic_rewrite",
            Step::SemanticRewritePair => "semantic_rewrite_pair",
            Step::Synthesize => "synthesize",
            Step::SynthesizePair => "synthesize_pair",
            Step::CheckFactuality => "check_factuality",
            Step::CheckLabel => "check_label",
        }
    }

    /// Placeholders the step supplies when rendering.
    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            Step::ExtractEntities => &["text"],
            Step::SummarizeKnowledge => &["entities", "start", "end", "records"],
            Step::ExtractTriples => &["text", "max_triples"],
            Step::UpdateTriples => &["triples", "summary"],
            Step::SemanticRewrite => &["text", "triples"],
            Step::SemanticRewritePair => &["text", "text2", "triples"],
            Step::Synthesize => &[
                "text",
                "substituted",
                "updates",
                "semantic",
                "label_context",
                "feedback",
                "attempt",
            ],
            Step::SynthesizePair => &[
                "text",
                "text2",
                "substituted",
                "substituted2",
                "updates",
                "semantic",
                "semantic2",
                "label_context",
                "feedback",
                "attempt",
            ],
            Step::CheckFactuality => &["summary", "candidate"],
            Step::CheckLabel => &["task", "labels", "label", "context", "candidate"],
        }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Step {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Step::ALL
            .into_iter()
            .find(|step| step.id() == s.trim())
            .ok_or_else(|| format!("unknown step '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepTemplate {
    pub step: Step,
    pub body: String,
}

impl StepTemplate {
    pub fn new(step: Step, body: impl Into<String>) -> Result<Self, RenderError> {
        let body = body.into();
        if let Some(bad) = placeholders(&body)
            .into_iter()
            .find(|p| !step.placeholders().contains(&p.as_str()))
        {
            return Err(RenderError::Disallowed {
                template: step.id().to_string(),
                name: bad,
            });
        }
        Ok(StepTemplate { step, body })
    }

    pub fn render(&self, values: &[(&str, String)]) -> Result<String, RenderError> {
        let map: HashMap<&str, &String> = values.iter().map(|(k, v)| (*k, v)).collect();
        substitute(self.step.id(), &self.body, |name| map.get(name).map(|v| (*v).clone()))
    }
}

/// Evaluation templates plus one template per pipeline step.
#[derive(Debug, Clone)]
pub struct TemplatePack {
    eval: Vec<PromptTemplate>,
    steps: BTreeMap<Step, StepTemplate>,
}

const BUILTIN: &[(&str, &str)] = &[
    ("emotion-1.txt", include_str!("../../templates/eval/emotion-1.txt")),
    ("emotion-2.txt", include_str!("../../templates/eval/emotion-2.txt")),
    ("emotion-3.txt", include_str!("../../templates/eval/emotion-3.txt")),
    ("irony-1.txt", include_str!("../../templates/eval/irony-1.txt")),
    ("irony-2.txt", include_str!("../../templates/eval/irony-2.txt")),
    ("irony-3.txt", include_str!("../../templates/eval/irony-3.txt")),
    ("stance-1.txt", include_str!("../../templates/eval/stance-1.txt")),
    ("stance-2.txt", include_str!("../../templates/eval/stance-2.txt")),
    ("stance-3.txt", include_str!("../../templates/eval/stance-3.txt")),
    ("mrpc-1.txt", include_str!("../../templates/eval/mrpc-1.txt")),
    ("mrpc-2.txt", include_str!("../../templates/eval/mrpc-2.txt")),
    ("mrpc-3.txt", include_str!("../../templates/eval/mrpc-3.txt")),
    ("rte-1.txt", include_str!("../../templates/eval/rte-1.txt")),
    ("rte-2.txt", include_str!("../../templates/eval/rte-2.txt")),
    ("rte-3.txt", include_str!("../../templates/eval/rte-3.txt")),
    ("extract_entities.txt", include_str!("../../templates/steps/extract_entities.txt")),
    ("summarize_knowledge.txt", include_str!("../../templates/steps/summarize_knowledge.txt")),
    ("extract_triples.txt", include_str!("../../templates/steps/extract_triples.txt")),
    ("update_triples.txt", include_str!("../../templates/steps/update_triples.txt")),
    ("semantic_rewrite.txt", include_str!("../../templates/steps/semantic_rewrite.txt")),
    ("semantic_rewrite_pair.txt", include_str!("../../templates/steps/semantic_rewrite_pair.txt")),
    ("synthesize.txt", include_str!("../../templates/steps/synthesize.txt")),
    ("synthesize_pair.txt", include_str!("../../templates/steps/synthesize_pair.txt")),
    ("check_factuality.txt", include_str!("../../templates/steps/check_factuality.txt")),
    ("check_label.txt", include_str!("../../templates/steps/check_label.txt")),
];

enum Parsed {
    Eval(PromptTemplate),
    Step(StepTemplate),
}

fn parse_file(file: &str, contents: &str) -> Result<Parsed, RenderError> {
    let format_err = |message: &str| RenderError::Format {
        file: file.to_string(),
        message: message.to_string(),
    };
    let contents = contents.replace("\r\n", "\n");
    let rest = contents
        .strip_prefix("---\n")
        .ok_or_else(|| format_err("missing front-matter"))?;
    let end = rest
        .find("\n---\n")
        .ok_or_else(|| format_err("unterminated front-matter"))?;
    let mut meta = HashMap::new();
    for line in rest[..end].lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once(':')
            .ok_or_else(|| format_err("front-matter lines must be 'key: value'"))?;
        meta.insert(k.trim().to_string(), v.trim().to_string());
    }
    let body = rest[end + 5..].trim_end_matches('\n').to_string();
    if let Some(step) = meta.get("step") {
        let step: Step = step.parse().map_err(|e: String| format_err(&e))?;
        return Ok(Parsed::Step(StepTemplate::new(step, body)?));
    }
    let id = meta.get("id").ok_or_else(|| format_err("missing 'id'"))?;
    let task: TaskKind = meta
        .get("task")
        .ok_or_else(|| format_err("missing 'task' or 'step'"))?
        .parse()
        .map_err(|e: String| format_err(&e))?;
    Ok(Parsed::Eval(PromptTemplate::new(id.clone(), task, body)?))
}

impl TemplatePack {
    /// The shipped pack: the three evaluation prompts per task plus the
    /// default pipeline step prompts.
    pub fn builtin() -> Self {
        let mut pack = TemplatePack {
            eval: Vec::new(),
            steps: BTreeMap::new(),
        };
        for (file, contents) in BUILTIN {
            pack.insert(parse_file(file, contents).expect("builtin template parses"));
        }
        pack
    }

    /// Builtin pack overridden by every `*.txt` file found (recursively) in
    /// `dir`. Files replace builtins with the same id or step.
    pub fn load_dir(dir: &Path) -> Result<Self, RenderError> {
        let mut pack = Self::builtin();
        let mut files = Vec::new();
        collect_txt(dir, &mut files).map_err(|e| RenderError::Format {
            file: dir.display().to_string(),
            message: e.to_string(),
        })?;
        files.sort();
        for path in files {
            let name = path.display().to_string();
            let contents = std::fs::read_to_string(&path).map_err(|e| RenderError::Format {
                file: name.clone(),
                message: e.to_string(),
            })?;
            pack.insert(parse_file(&name, &contents)?);
        }
        Ok(pack)
    }

    fn insert(&mut self, parsed: Parsed) {
        match parsed {
            Parsed::Eval(t) => {
                self.eval.retain(|e| e.id != t.id);
                self.eval.push(t);
            }
            Parsed::Step(t) => {
                self.steps.insert(t.step, t);
            }
        }
    }

    pub fn eval_templates(&self, task: TaskKind) -> Vec<&PromptTemplate> {
        self.eval.iter().filter(|t| t.task == task).collect()
    }

    pub fn step(&self, step: Step) -> Result<&StepTemplate, RenderError> {
        self.steps
            .get(&step)
            .ok_or_else(|| RenderError::Missing(step.id().to_string()))
    }
}

fn collect_txt(dir: &Path, out: &mut Vec<std::path::PathBuf>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_txt(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "txt") {
            out.push(path);
        }
    }
    Ok(())
}
