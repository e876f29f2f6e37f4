//! Triple extraction and update, the deterministic replacement operation,
//! semantic rewriting and synthesis of the updated text.

use std::collections::HashSet;

use regex::RegexBuilder;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Step, StepError, StepRunner};
use crate::knowledge::KnowledgeSummary;
use crate::model::{Dataset, Sample, TaskKind, Variant};
use crate::text::{contains_ci, first_balanced, is_word_char};

pub const DEFAULT_MAX_TRIPLES: usize = 5;

/// Which text of a sample a triple was read from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    #[default]
    Text,
    Text2,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
    #[serde(default)]
    pub origin: Origin,
}

impl Triple {
    pub fn new(
        head: impl Into<String>,
        relation: impl Into<String>,
        tail: impl Into<String>,
    ) -> Result<Self, RecontextError> {
        let t = Triple {
            head: head.into().trim().to_string(),
            relation: relation.into().trim().to_string(),
            tail: tail.into().trim().to_string(),
            origin: Origin::Text,
        };
        for (field, value) in [("head", &t.head), ("relation", &t.relation), ("tail", &t.tail)] {
            if value.is_empty() {
                return Err(RecontextError::EmptyField { field });
            }
        }
        Ok(t)
    }

    pub fn with_origin(mut self, origin: Origin) -> Self {
        self.origin = origin;
        self
    }

    fn same_fact(&self, other: &Triple) -> bool {
        self.head == other.head && self.relation == other.relation && self.tail == other.tail
    }

    fn as_array(&self) -> [&str; 3] {
        [&self.head, &self.relation, &self.tail]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleSet {
    pub triples: Vec<Triple>,
    pub source_sample: String,
}

impl TripleSet {
    /// Drops exact duplicates and keeps the first `max_triples`.
    pub fn new(source_sample: impl Into<String>, triples: Vec<Triple>, max_triples: usize) -> Self {
        let mut seen = HashSet::new();
        let triples = triples
            .into_iter()
            .filter(|t| seen.insert((t.head.clone(), t.relation.clone(), t.tail.clone())))
            .take(max_triples)
            .collect();
        TripleSet {
            triples,
            source_sample: source_sample.into(),
        }
    }

    pub fn empty(source_sample: impl Into<String>) -> Self {
        TripleSet {
            triples: Vec::new(),
            source_sample: source_sample.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleUpdate {
    pub original: Triple,
    pub replacement: Triple,
}

impl TripleUpdate {
    pub fn new(original: Triple, replacement: Triple) -> Result<Self, RecontextError> {
        if original.same_fact(&replacement) {
            return Err(RecontextError::Unchanged { index: 0 });
        }
        Ok(TripleUpdate {
            original,
            replacement,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Substituted,
    Semantic,
    Final,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateText {
    pub stage: Stage,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_second: Option<String>,
}

impl CandidateText {
    /// Both texts joined, for containment checks and review prompts.
    pub fn combined(&self) -> String {
        match &self.pair_second {
            Some(second) => format!("{}\n{}", self.text, second),
            None => self.text.clone(),
        }
    }

    pub fn is_blank(&self) -> bool {
        self.text.trim().is_empty()
            || self.pair_second.as_deref().is_some_and(|s| s.trim().is_empty())
    }

    /// Review rendering: pair candidates are labelled by sentence.
    pub fn for_review(&self) -> String {
        match &self.pair_second {
            Some(second) => format!("\nsentence1: {}\nsentence2: {}", self.text, second),
            None => self.text.clone(),
        }
    }
}

#[derive(Debug, Error)]
pub enum RecontextError {
    #[error("triple has an empty {field}")]
    EmptyField { field: &'static str },
    #[error("no parseable triple in response: {raw:?}")]
    Extraction { raw: String },
    #[error("alignment mismatch: expected {expected} replacement(s), got {got}")]
    AlignmentMismatch { expected: usize, got: usize },
    #[error("replacement {index} is identical to its original")]
    Unchanged { index: usize },
    #[error("could not parse replacements from response: {raw:?}")]
    UpdateParse { raw: String },
    #[error("triple update needs a non-empty triple set and knowledge")]
    NothingToUpdate,
    #[error("expected JSON with sentence1 and sentence2, got: {raw:?}")]
    PairFormat { raw: String },
    #[error("synthesized text is missing replacement term(s): {}", .missing.join(", "))]
    MissingTerms { missing: Vec<String> },
    #[error(transparent)]
    Step(#[from] StepError),
}

/// Reads `[[h, r, t], ...]` JSON, falling back to `h | r | t` lines.
/// Returns `Ok(None)` when neither format is present.
pub fn parse_triples(raw: &str) -> Result<Option<Vec<Triple>>, RecontextError> {
    if let Some(block) = first_balanced(raw, '[', ']') {
        if let Ok(rows) = serde_json::from_str::<Vec<Vec<String>>>(block) {
            if rows.iter().all(|r| r.len() == 3) {
                return rows
                    .into_iter()
                    .map(|r| {
                        let [h, rel, t]: [String; 3] = r.try_into().expect("length checked");
                        Triple::new(h, rel, t)
                    })
                    .collect::<Result<Vec<_>, _>>()
                    .map(Some);
            }
        }
    }
    let rows: Vec<Vec<&str>> = raw
        .lines()
        .map(|l| l.trim().trim_start_matches(['-', '*']).trim())
        .filter(|l| l.matches('|').count() == 2)
        .map(|l| l.split('|').collect())
        .collect();
    if rows.is_empty() {
        return Ok(None);
    }
    rows.into_iter()
        .map(|r| Triple::new(r[0], r[1], r[2]))
        .collect::<Result<Vec<_>, _>>()
        .map(Some)
}

fn extract_from(
    text: &str,
    origin: Origin,
    runner: &StepRunner<'_>,
    max_triples: usize,
) -> Result<Vec<Triple>, RecontextError> {
    let raw = runner.run(
        Step::ExtractTriples,
        &[("text", text.to_string()), ("max_triples", max_triples.to_string())],
    )?;
    let triples = parse_triples(&raw)?.ok_or(RecontextError::Extraction { raw })?;
    Ok(triples.into_iter().map(|t| t.with_origin(origin)).collect())
}

/// Relational triples of the sample. Pair samples are read sentence by
/// sentence; the cap applies to the combined set, first sentence first.
pub fn extract_triples(
    sample: &Sample,
    runner: &StepRunner<'_>,
    max_triples: usize,
) -> Result<TripleSet, RecontextError> {
    let mut triples = extract_from(&sample.text, Origin::Text, runner, max_triples)?;
    if let Some(second) = &sample.text2 {
        triples.extend(extract_from(second, Origin::Text2, runner, max_triples)?);
    }
    let set = TripleSet::new(&sample.id, triples, max_triples);
    if set.is_empty() {
        return Err(RecontextError::Extraction { raw: String::new() });
    }
    Ok(set)
}

fn triples_listing(triples: &[Triple]) -> String {
    triples
        .iter()
        .enumerate()
        .map(|(i, t)| {
            format!(
                "{}. {}",
                i + 1,
                serde_json::to_string(&t.as_array()).expect("strings serialize")
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// One replacement per input triple, aligned by index.
pub fn update_triples(
    triples: &TripleSet,
    summary: &KnowledgeSummary,
    runner: &StepRunner<'_>,
) -> Result<Vec<TripleUpdate>, RecontextError> {
    if triples.is_empty() || summary.record_count == 0 {
        return Err(RecontextError::NothingToUpdate);
    }
    let raw = runner.run(
        Step::UpdateTriples,
        &[
            ("triples", triples_listing(&triples.triples)),
            ("summary", summary.text.clone()),
        ],
    )?;
    let replacements = parse_triples(&raw)?.ok_or(RecontextError::UpdateParse { raw })?;
    if replacements.len() != triples.len() {
        return Err(RecontextError::AlignmentMismatch {
            expected: triples.len(),
            got: replacements.len(),
        });
    }
    triples
        .triples
        .iter()
        .zip(replacements)
        .enumerate()
        .map(|(index, (original, replacement))| {
            TripleUpdate::new(original.clone(), replacement.with_origin(original.origin))
                .map_err(|_| RecontextError::Unchanged { index })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateHits {
    pub head: usize,
    pub tail: usize,
}

impl UpdateHits {
    pub fn unanchored(&self) -> bool {
        self.head == 0 && self.tail == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substitution {
    pub candidate: CandidateText,
    /// Hit counts per update, index-aligned with the updates.
    pub hits: Vec<UpdateHits>,
}

impl Substitution {
    pub fn unanchored(&self) -> Vec<usize> {
        (0..self.hits.len())
            .filter(|&i| self.hits[i].unanchored())
            .collect()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Slot {
    Head,
    Tail,
}

struct Term<'a> {
    original: &'a str,
    replacement: &'a str,
    update: usize,
    slot: Slot,
}

/// Substitution order: longer originals first, then update order, heads
/// before tails.
fn ordered_terms(updates: &[TripleUpdate]) -> Vec<Term<'_>> {
    let mut terms: Vec<Term<'_>> = updates
        .iter()
        .enumerate()
        .flat_map(|(i, u)| {
            [
                Term {
                    original: &u.original.head,
                    replacement: &u.replacement.head,
                    update: i,
                    slot: Slot::Head,
                },
                Term {
                    original: &u.original.tail,
                    replacement: &u.replacement.tail,
                    update: i,
                    slot: Slot::Tail,
                },
            ]
        })
        .collect();
    terms.sort_by(|a, b| {
        b.original
            .chars()
            .count()
            .cmp(&a.original.chars().count())
            .then(a.update.cmp(&b.update))
            .then((a.slot == Slot::Tail).cmp(&(b.slot == Slot::Tail)))
    });
    terms
}

/// Byte ranges of case-insensitive occurrences of `term` in `text` that sit
/// on word boundaries. Occurrences may overlap; the caller resolves claims.
fn occurrences(text: &str, term: &str) -> Vec<(usize, usize)> {
    if term.is_empty() {
        return Vec::new();
    }
    let re = RegexBuilder::new(&regex::escape(term))
        .case_insensitive(true)
        .build()
        .expect("escaped literal compiles");
    let need_start = term.chars().next().is_some_and(is_word_char);
    let need_end = term.chars().last().is_some_and(is_word_char);
    let mut found = Vec::new();
    let mut pos = 0;
    while pos <= text.len() {
        let Some(m) = re.find_at(text, pos) else { break };
        let before_ok = !need_start || !text[..m.start()].chars().next_back().is_some_and(is_word_char);
        let after_ok = !need_end || !text[m.end()..].chars().next().is_some_and(is_word_char);
        if before_ok && after_ok {
            found.push((m.start(), m.end()));
        }
        // restart one character in so overlapping candidates are still seen
        pos = m.start() + text[m.start()..].chars().next().map_or(1, char::len_utf8);
    }
    found
}

fn substitute_text(text: &str, terms: &[Term<'_>], hits: &mut [UpdateHits]) -> String {
    let mut claimed: Vec<(usize, usize, &str)> = Vec::new();
    for term in terms {
        for (start, end) in occurrences(text, term.original) {
            if claimed.iter().any(|&(s, e, _)| start < e && s < end) {
                continue;
            }
            claimed.push((start, end, term.replacement));
            let h = &mut hits[term.update];
            match term.slot {
                Slot::Head => h.head += 1,
                Slot::Tail => h.tail += 1,
            }
        }
    }
    claimed.sort_by_key(|&(s, _, _)| s);
    let mut out = String::with_capacity(text.len());
    let mut cursor = 0;
    for (start, end, replacement) in claimed {
        out.push_str(&text[cursor..start]);
        out.push_str(replacement);
        cursor = end;
    }
    out.push_str(&text[cursor..]);
    out
}

/// The replacement operation: swaps every word-bounded, case-insensitive
/// occurrence of each original head and tail for its replacement. Longer
/// originals claim text first and a claimed span is never rewritten again.
/// Relations are left alone.
pub fn substitute_triples(sample: &Sample, updates: &[TripleUpdate]) -> Substitution {
    let terms = ordered_terms(updates);
    let mut hits = vec![UpdateHits::default(); updates.len()];
    let text = substitute_text(&sample.text, &terms, &mut hits);
    let pair_second = sample
        .text2
        .as_ref()
        .map(|t| substitute_text(t, &terms, &mut hits));
    Substitution {
        candidate: CandidateText {
            stage: Stage::Substituted,
            text,
            pair_second,
        },
        hits,
    }
}

#[derive(Deserialize)]
struct PairJson {
    sentence1: String,
    sentence2: String,
}

fn parse_pair(raw: &str) -> Result<(String, String), RecontextError> {
    first_balanced(raw, '{', '}')
        .and_then(|block| serde_json::from_str::<PairJson>(block).ok())
        .map(|p| (p.sentence1.trim().to_string(), p.sentence2.trim().to_string()))
        .ok_or_else(|| RecontextError::PairFormat { raw: raw.to_string() })
}

/// Style-only restatement preserving the sample's triples. An empty response
/// gives an empty candidate, which later checks reject.
pub fn semantic_rewrite(
    sample: &Sample,
    triples: &TripleSet,
    runner: &StepRunner<'_>,
) -> Result<CandidateText, RecontextError> {
    let listing = if triples.is_empty() {
        "(none)".to_string()
    } else {
        triples_listing(&triples.triples)
    };
    match &sample.text2 {
        None => {
            let raw = runner.run(
                Step::SemanticRewrite,
                &[("text", sample.text.clone()), ("triples", listing)],
            )?;
            Ok(CandidateText {
                stage: Stage::Semantic,
                text: raw.trim().to_string(),
                pair_second: None,
            })
        }
        Some(second) => {
            let raw = runner.run(
                Step::SemanticRewritePair,
                &[
                    ("text", sample.text.clone()),
                    ("text2", second.clone()),
                    ("triples", listing),
                ],
            )?;
            let (text, second) = if raw.trim().is_empty() {
                (String::new(), String::new())
            } else {
                parse_pair(&raw)?
            };
            Ok(CandidateText {
                stage: Stage::Semantic,
                text,
                pair_second: Some(second),
            })
        }
    }
}

/// Instruction telling the writer which label the text must keep.
pub fn label_context(sample: &Sample) -> String {
    let label = &sample.label;
    match sample.task {
        TaskKind::Emotion => format!("The text must still express the emotion \"{label}\"."),
        TaskKind::Irony if label == "irony" => "The text must remain ironic.".to_string(),
        TaskKind::Irony => "The text must remain non-ironic.".to_string(),
        TaskKind::Stance => format!(
            "The text must keep the stance \"{label}\" toward \"{}\".",
            sample.target.as_deref().unwrap_or_default()
        ),
        TaskKind::Mrpc => format!("The two sentences must remain \"{label}\"."),
        TaskKind::Rte => {
            format!("The relation between sentence1 and sentence2 must remain \"{label}\".")
        }
    }
}

/// Replacement heads and tails missing from `text` (case-insensitive).
pub fn missing_terms(text: &str, updates: &[TripleUpdate]) -> Vec<String> {
    let mut missing = Vec::new();
    for u in updates {
        for term in [&u.replacement.head, &u.replacement.tail] {
            if !contains_ci(text, term) && !missing.contains(term) {
                missing.push(term.clone());
            }
        }
    }
    missing
}

/// Writes the updated text from the original, the substituted text, the
/// replacement facts and the semantic rewrite. `feedback` carries the last
/// rejection rationale; `attempt` is 1-based.
pub fn synthesize_updated_text(
    sample: &Sample,
    substituted: &CandidateText,
    updates: &[TripleUpdate],
    semantic: &CandidateText,
    feedback: Option<&str>,
    attempt: u32,
    runner: &StepRunner<'_>,
) -> Result<CandidateText, RecontextError> {
    let listing = triples_listing(
        &updates
            .iter()
            .map(|u| u.replacement.clone())
            .collect::<Vec<_>>(),
    );
    let feedback = feedback
        .map(|r| format!("A previous attempt was rejected for this reason: {r}\n"))
        .unwrap_or_default();
    let mut values = vec![
        ("text", sample.text.clone()),
        ("substituted", substituted.text.clone()),
        ("updates", listing),
        ("semantic", semantic.text.clone()),
        ("label_context", label_context(sample)),
        ("feedback", feedback),
        ("attempt", attempt.to_string()),
    ];
    let candidate = match &sample.text2 {
        None => {
            let raw = runner.run(Step::Synthesize, &values)?;
            CandidateText {
                stage: Stage::Final,
                text: raw.trim().to_string(),
                pair_second: None,
            }
        }
        Some(second) => {
            values.push(("text2", second.clone()));
            values.push(("substituted2", substituted.pair_second.clone().unwrap_or_default()));
            values.push(("semantic2", semantic.pair_second.clone().unwrap_or_default()));
            let raw = runner.run(Step::SynthesizePair, &values)?;
            let (text, second) = parse_pair(&raw)?;
            CandidateText {
                stage: Stage::Final,
                text,
                pair_second: Some(second),
            }
        }
    };
    let missing = missing_terms(&candidate.combined(), updates);
    if !missing.is_empty() {
        return Err(RecontextError::MissingTerms { missing });
    }
    Ok(candidate)
}

/// The sample with its texts swapped for the candidate's; id, task, target
/// and label are carried over unchanged.
pub fn apply_candidate(sample: &Sample, candidate: &CandidateText) -> Sample {
    Sample {
        text: candidate.text.clone(),
        text2: candidate.pair_second.clone().or_else(|| sample.text2.clone()),
        ..sample.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Omission {
    pub id: String,
    pub reason: String,
}

/// Semantic rewrite of every sample. Triple extraction failures fall back to
/// an empty triple set; samples whose rewrite fails or comes back empty are
/// omitted and reported.
pub fn build_semantic_dataset(
    dataset: &Dataset,
    runner: &StepRunner<'_>,
    max_triples: usize,
) -> (Dataset, Vec<Omission>) {
    let mut samples = Vec::new();
    let mut omitted = Vec::new();
    for sample in dataset.samples() {
        let triples = extract_triples(sample, runner, max_triples)
            .unwrap_or_else(|_| TripleSet::empty(&sample.id));
        match semantic_rewrite(sample, &triples, runner) {
            Ok(c) if !c.is_blank() => samples.push(apply_candidate(sample, &c)),
            Ok(_) => omitted.push(Omission {
                id: sample.id.clone(),
                reason: "empty rewrite".into(),
            }),
            Err(e) => omitted.push(Omission {
                id: sample.id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    for o in &omitted {
        tracing::warn!(id = %o.id, reason = %o.reason, "semantic rewrite omitted");
    }
    let semantic = Dataset::new(dataset.task, dataset.split, Variant::Semantic, samples)
        .expect("rewritten samples keep validated fields");
    (semantic, omitted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{CountingBackend, MockBackend, MockRule, MockScript, TemplatePack};
    use crate::knowledge::TimeWindow;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn t(h: &str, r: &str, tl: &str) -> Triple {
        Triple::new(h, r, tl).unwrap()
    }

    fn upd(o: (&str, &str, &str), n: (&str, &str, &str)) -> TripleUpdate {
        TripleUpdate::new(t(o.0, o.1, o.2), t(n.0, n.1, n.2)).unwrap()
    }

    fn emotion(text: &str) -> Sample {
        Sample::new("e1", TaskKind::Emotion, text, None, None, "joy").unwrap()
    }

    fn mrpc() -> Sample {
        Sample::new(
            "m1",
            TaskKind::Mrpc,
            "Clinton gave a speech.",
            Some("Clinton spoke.".into()),
            None,
            "semantically equivalent",
        )
        .unwrap()
    }

    fn summary(n: usize) -> KnowledgeSummary {
        let d = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
        KnowledgeSummary {
            text: "Harris held a rally".into(),
            record_count: n,
            window: TimeWindow::new(d, d).unwrap(),
        }
    }

    fn with_mock<R>(script: MockScript, f: impl FnOnce(&StepRunner<'_>) -> R) -> R {
        let pack = TemplatePack::builtin();
        let mock = MockBackend::scripted(script);
        f(&StepRunner::new(&mock, &pack))
    }

    #[test]
    fn extracts_and_caps_triples() {
        let one = with_mock(MockScript::default().fallback(r#"[["Clinton","delivered","speech"]]"#), |r| {
            extract_triples(&emotion("Clinton delivered a speech"), r, 5)
        })
        .unwrap();
        assert_eq!(one.len(), 1);
        let seven: Vec<_> = (0..7).map(|i| vec![format!("h{i}"), "r".into(), format!("t{i}")]).collect();
        let resp = serde_json::to_string(&seven).unwrap();
        let capped = with_mock(MockScript::default().fallback(resp), |r| {
            extract_triples(&emotion("x"), r, 5)
        })
        .unwrap();
        assert_eq!(capped.len(), 5);
        assert_eq!(capped.triples[4].head, "h4");
    }

    #[test]
    fn empty_field_and_garbage_are_errors() {
        let err = with_mock(MockScript::default().fallback(r#"[["","likes","x"]]"#), |r| {
            extract_triples(&emotion("x"), r, 5)
        });
        assert!(matches!(err, Err(RecontextError::EmptyField { field: "head" })));
        let err = with_mock(MockScript::default().fallback("no triples here"), |r| {
            extract_triples(&emotion("x"), r, 5)
        });
        assert!(matches!(err, Err(RecontextError::Extraction { .. })));
    }

    #[test]
    fn pipe_fallback_and_pair_origins() {
        let parsed = parse_triples("- A | founded | B\nnoise\nC | runs | D").unwrap().unwrap();
        assert_eq!(parsed, vec![t("A", "founded", "B"), t("C", "runs", "D")]);
        let script = MockScript::default()
            .rule(MockRule::new(Some("extract_triples"), &["Clinton gave"], r#"[["Clinton","gave","speech"]]"#))
            .rule(MockRule::new(Some("extract_triples"), &["Clinton spoke"], r#"[["Clinton","spoke","public"]]"#));
        let set = with_mock(script, |r| extract_triples(&mrpc(), r, 5)).unwrap();
        assert_eq!(set.triples[0].origin, Origin::Text);
        assert_eq!(set.triples[1].origin, Origin::Text2);
    }

    #[test]
    fn update_alignment_rules() {
        let set = TripleSet::new("e1", vec![t("Clinton", "delivered", "speech"), t("a", "b", "c")], 5);
        let ok = with_mock(
            MockScript::default().fallback(r#"[["Harris","delivered","rally"],["a","b","d"]]"#),
            |r| update_triples(&set, &summary(3), r),
        )
        .unwrap();
        assert_eq!(ok.len(), 2);
        assert_eq!(ok[0].replacement.head, "Harris");
        let same = with_mock(
            MockScript::default().fallback(r#"[["Harris","delivered","rally"],["a","b","c"]]"#),
            |r| update_triples(&set, &summary(3), r),
        );
        assert!(matches!(same, Err(RecontextError::Unchanged { index: 1 })));
        let three = TripleSet::new("e1", vec![t("a", "b", "c"), t("d", "e", "f"), t("g", "h", "i")], 5);
        let short = with_mock(
            MockScript::default().fallback(r#"[["x","b","c"],["y","e","f"]]"#),
            |r| update_triples(&three, &summary(3), r),
        );
        let err = short.unwrap_err();
        assert!(err.to_string().contains("alignment mismatch"));
        let no_knowledge = with_mock(MockScript::default(), |r| update_triples(&set, &summary(0), r));
        assert!(matches!(no_knowledge, Err(RecontextError::NothingToUpdate)));
    }

    #[test]
    fn substitution_example() {
        let s = emotion("I love Clinton's speech");
        let out = substitute_triples(
            &s,
            &[upd(("Clinton", "delivered", "speech"), ("Harris", "delivered", "rally"))],
        );
        assert_eq!(out.candidate.text, "I love Harris's rally");
        assert_eq!(out.hits, vec![UpdateHits { head: 1, tail: 1 }]);
        assert_eq!(out.candidate.stage, Stage::Substituted);
    }

    #[test]
    fn unanchored_updates_leave_text() {
        let s = emotion("nothing relevant here");
        let out = substitute_triples(&s, &[upd(("Paris", "is in", "France"), ("Rome", "is in", "Italy"))]);
        assert_eq!(out.candidate.text, s.text);
        assert_eq!(out.unanchored(), vec![0]);
    }

    #[test]
    fn longest_original_wins() {
        let s = emotion("I moved to new york, not York.");
        let out = substitute_triples(
            &s,
            &[
                upd(("I", "moved to", "York"), ("I", "moved to", "Leeds")),
                upd(("I", "live in", "New York"), ("I", "live in", "Boston")),
            ],
        );
        assert_eq!(out.candidate.text, "I moved to Boston, not Leeds.");
        assert_eq!(out.hits[1].tail, 1);
        assert_eq!(out.hits[0].tail, 1);
    }

    #[test]
    fn word_boundaries_are_respected() {
        let s = emotion("Anna and Annabel");
        let out = substitute_triples(&s, &[upd(("Anna", "knows", "Annabel"), ("Eva", "knows", "Zoe"))]);
        assert_eq!(out.candidate.text, "Eva and Zoe");
        let s = emotion("Dr. Who? dr. who!");
        let out = substitute_triples(&s, &[upd(("Dr. Who", "is", "x"), ("The Doctor", "is", "x"))]);
        assert_eq!(out.candidate.text, "The Doctor? The Doctor!");
    }

    #[test]
    fn synthesis_containment() {
        let s = emotion("I love Clinton's speech");
        let updates = [upd(("Clinton", "delivered", "speech"), ("Harris", "delivered", "rally"))];
        let sub = substitute_triples(&s, &updates).candidate;
        let sem = CandidateText {
            stage: Stage::Semantic,
            text: "The speech by Clinton thrilled me".into(),
            pair_second: None,
        };
        let ok = with_mock(MockScript::default().fallback("Harris's RALLY thrilled me"), |r| {
            synthesize_updated_text(&s, &sub, &updates, &sem, None, 1, r)
        })
        .unwrap();
        assert_eq!(ok.stage, Stage::Final);
        let err = with_mock(MockScript::default().fallback("Harris thrilled me"), |r| {
            synthesize_updated_text(&s, &sub, &updates, &sem, None, 1, r)
        });
        match err {
            Err(RecontextError::MissingTerms { missing }) => assert_eq!(missing, ["rally"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pair_rewrite_keeps_second_text() {
        let sem = with_mock(
            MockScript::default().fallback(r#"{"sentence1": "A speech was given by Clinton.", "sentence2": "Clinton talked."}"#),
            |r| semantic_rewrite(&mrpc(), &TripleSet::empty("m1"), r),
        )
        .unwrap();
        assert_eq!(sem.pair_second.as_deref(), Some("Clinton talked."));
        let empty = with_mock(MockScript::default().fallback(""), |r| {
            semantic_rewrite(&emotion("x"), &TripleSet::empty("e1"), r)
        })
        .unwrap();
        assert!(empty.is_blank());
    }

    #[test]
    fn semantic_dataset_omits_failures() {
        let samples: Vec<_> = (0..10)
            .map(|i| Sample::new(format!("s{i}"), TaskKind::Emotion, format!("text {i}"), None, None, "joy").unwrap())
            .collect();
        let ds = Dataset::new(TaskKind::Emotion, crate::Split::Test, Variant::Original, samples).unwrap();
        let script = MockScript::default()
            .rule(MockRule::new(Some("extract_triples"), &[], r#"[["a","b","c"]]"#))
            .rule(MockRule::new(Some("semantic_rewrite"), &["text: text 3"], ""))
            .rule(MockRule::new(Some("semantic_rewrite"), &[], "rewritten"));
        let pack = TemplatePack::builtin();
        let mock = CountingBackend::new(MockBackend::scripted(script));
        let (sem, omitted) = build_semantic_dataset(&ds, &StepRunner::new(&mock, &pack), 5);
        assert_eq!(sem.len(), 9);
        assert_eq!(sem.variant, Variant::Semantic);
        assert_eq!(omitted.len(), 1);
        assert_eq!(omitted[0].id, "s3");
        assert!(sem.samples().iter().all(|s| s.label == "joy"));
    }

    proptest! {
        #[test]
        fn substitution_is_idempotent(
            words in proptest::collection::vec("[a-z]{2,6}", 3..12),
            picks in proptest::collection::vec((0usize..12, 0usize..12), 1..4),
        ) {
            let text = words.join(" ");
            let s = emotion(&text);
            let updates: Vec<_> = picks
                .iter()
                .map(|&(h, tl)| {
                    let h = &words[h % words.len()];
                    let tl = &words[tl % words.len()];
                    upd((h, "r", tl), (&format!("NEWH{h}X"), "r", &format!("NEWT{tl}X")))
                })
                .collect();
            let once = substitute_triples(&s, &updates);
            let again = substitute_triples(&emotion(&once.candidate.text), &updates);
            prop_assert_eq!(&again.candidate.text, &once.candidate.text);
            prop_assert_eq!(substitute_triples(&s, &updates), once);
        }
    }
}
