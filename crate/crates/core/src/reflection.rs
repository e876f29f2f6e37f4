//! Verification of synthesized samples and the bounded regeneration loop.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::gateway::{Step, StepError, StepRunner};
use crate::knowledge::KnowledgeSummary;
use crate::model::Sample;
use crate::recontext::{apply_candidate, synthesize_updated_text, CandidateText, TripleUpdate};
use crate::text::first_balanced;

pub const DEFAULT_MAX_ROUNDS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Regenerate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionVerdict {
    pub factuality_ok: bool,
    pub label_ok: bool,
    pub rationale: String,
    pub decision: Decision,
}

impl ReflectionVerdict {
    pub fn new(factuality_ok: bool, label_ok: bool, rationale: impl Into<String>) -> Self {
        let decision = if factuality_ok && label_ok {
            Decision::Accept
        } else {
            Decision::Regenerate
        };
        ReflectionVerdict {
            factuality_ok,
            label_ok,
            rationale: rationale.into(),
            decision,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionConfig {
    pub max_rounds: u32,
}

impl Default for ReflectionConfig {
    fn default() -> Self {
        ReflectionConfig {
            max_rounds: DEFAULT_MAX_ROUNDS,
        }
    }
}

impl ReflectionConfig {
    pub fn new(max_rounds: u32) -> Result<Self, String> {
        if max_rounds == 0 {
            return Err("max_rounds must be at least 1".into());
        }
        Ok(ReflectionConfig { max_rounds })
    }
}

#[derive(Debug, Error)]
pub enum VerdictError {
    #[error("unparseable verdict: {raw:?}")]
    Unparseable { raw: String },
    #[error(transparent)]
    Step(#[from] StepError),
}

/// Reads `{"pass": bool, "rationale": str}`, falling back to a leading
/// yes/no (or pass/fail, true/false) token, in which case the whole text is
/// the rationale.
pub fn parse_verdict(raw: &str) -> Result<(bool, String), VerdictError> {
    if let Some(block) = first_balanced(raw, '{', '}') {
        if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(block) {
            let pass = map.iter().find(|(k, _)| k.eq_ignore_ascii_case("pass")).and_then(|(_, v)| match v {
                Value::Bool(b) => Some(*b),
                Value::String(s) => leading_answer(s),
                _ => None,
            });
            if let Some(pass) = pass {
                let rationale = map
                    .iter()
                    .find(|(k, _)| k.eq_ignore_ascii_case("rationale"))
                    .and_then(|(_, v)| v.as_str())
                    .unwrap_or_default()
                    .trim()
                    .to_string();
                return Ok((pass, rationale));
            }
        }
    }
    leading_answer(raw)
        .map(|pass| (pass, raw.trim().to_string()))
        .ok_or_else(|| VerdictError::Unparseable { raw: raw.to_string() })
}

fn leading_answer(s: &str) -> Option<bool> {
    let word: String = s
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .chars()
        .take_while(|c| c.is_alphanumeric())
        .collect::<String>()
        .to_lowercase();
    match word.as_str() {
        "yes" | "pass" | "true" => Some(true),
        "no" | "fail" | "false" => Some(false),
        _ => None,
    }
}

/// Does the candidate only state facts consistent with the knowledge?
pub fn check_incorrect_information(
    candidate: &CandidateText,
    summary: &KnowledgeSummary,
    runner: &StepRunner<'_>,
) -> Result<(bool, String), VerdictError> {
    let raw = runner.run(
        Step::CheckFactuality,
        &[
            ("summary", summary.text.clone()),
            ("candidate", candidate.for_review()),
        ],
    )?;
    parse_verdict(&raw)
}

/// Does the candidate still carry `sample`'s label?
pub fn check_label_alignment(
    candidate: &CandidateText,
    sample: &Sample,
    runner: &StepRunner<'_>,
) -> Result<(bool, String), VerdictError> {
    let labels = sample
        .task
        .labels()
        .iter()
        .map(|l| format!("\"{l}\""))
        .collect::<Vec<_>>()
        .join(", ");
    let context = match &sample.target {
        Some(target) => format!("target: {target}"),
        None => String::new(),
    };
    let raw = runner.run(
        Step::CheckLabel,
        &[
            ("task", sample.task.display_name().to_string()),
            ("labels", labels),
            ("label", sample.label.clone()),
            ("context", context),
            ("candidate", candidate.for_review()),
        ],
    )?;
    parse_verdict(&raw)
}

/// One reflection round as written to provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: u32,
    pub factuality_ok: bool,
    pub label_ok: bool,
    pub rationale: String,
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<CandidateText>,
}

/// Everything synthesis needs besides the sample itself.
#[derive(Debug, Clone, Copy)]
pub struct RefineContext<'a> {
    pub substituted: &'a CandidateText,
    pub updates: &'a [TripleUpdate],
    pub semantic: &'a CandidateText,
    pub summary: &'a KnowledgeSummary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Refined {
    Accepted {
        sample: Sample,
        candidate: CandidateText,
    },
    Unresolved {
        id: String,
        last_rationales: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineOutcome {
    pub result: Refined,
    pub rounds: Vec<RoundLog>,
}

impl RefineOutcome {
    /// Synthesis attempts made, one per round.
    pub fn attempts(&self) -> usize {
        self.rounds.len()
    }
}

fn check_both(
    candidate: &CandidateText,
    sample: &Sample,
    summary: &KnowledgeSummary,
    runner: &StepRunner<'_>,
) -> ReflectionVerdict {
    let outcome = |r: Result<(bool, String), VerdictError>| match r {
        Ok(v) => v,
        Err(e) => (false, e.to_string()),
    };
    let (fact_ok, fact_why) = if candidate.is_blank() {
        (false, "empty candidate".to_string())
    } else {
        outcome(check_incorrect_information(candidate, summary, runner))
    };
    let (label_ok, label_why) = if candidate.is_blank() {
        (false, "empty candidate".to_string())
    } else {
        outcome(check_label_alignment(candidate, sample, runner))
    };
    let mut rationale = Vec::new();
    if !fact_why.is_empty() {
        rationale.push(format!("factuality: {fact_why}"));
    }
    if !label_why.is_empty() {
        rationale.push(format!("label: {label_why}"));
    }
    ReflectionVerdict::new(fact_ok, label_ok, rationale.join("\n"))
}

/// Synthesizes, checks, and regenerates with the rejection rationale until
/// both checks pass or `max_rounds` attempts are spent. A synthesis error
/// (including a failed containment check) counts as a failed round.
pub fn reflect_and_refine(
    sample: &Sample,
    ctx: RefineContext<'_>,
    config: ReflectionConfig,
    runner: &StepRunner<'_>,
) -> RefineOutcome {
    let mut rounds = Vec::new();
    let mut feedback: Option<String> = None;
    for round in 1..=config.max_rounds.max(1) {
        let synthesized = synthesize_updated_text(
            sample,
            ctx.substituted,
            ctx.updates,
            ctx.semantic,
            feedback.as_deref(),
            round,
            runner,
        );
        let (verdict, candidate) = match synthesized {
            Ok(candidate) => (check_both(&candidate, sample, ctx.summary, runner), Some(candidate)),
            Err(e) => (ReflectionVerdict::new(false, false, format!("synthesis: {e}")), None),
        };
        tracing::debug!(id = %sample.id, round, decision = ?verdict.decision, "reflection round");
        rounds.push(RoundLog {
            round,
            factuality_ok: verdict.factuality_ok,
            label_ok: verdict.label_ok,
            rationale: verdict.rationale.clone(),
            decision: verdict.decision,
            candidate: candidate.clone(),
        });
        if verdict.decision == Decision::Accept {
            let candidate = candidate.expect("accepted rounds have a candidate");
            return RefineOutcome {
                result: Refined::Accepted {
                    sample: apply_candidate(sample, &candidate),
                    candidate,
                },
                rounds,
            };
        }
        feedback = Some(verdict.rationale);
    }
    RefineOutcome {
        result: Refined::Unresolved {
            id: sample.id.clone(),
            last_rationales: rounds.last().map(|r| vec![r.rationale.clone()]).unwrap_or_default(),
        },
        rounds,
    }
}
