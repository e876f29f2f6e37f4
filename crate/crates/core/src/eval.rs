//! Prediction parsing and scoring, run manifests, delta reports, proportion
//! sweeps and the synthetic memorizing model.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::{self, confusion_counts, macro_f1_from_counts};
use crate::model::{nested_stratified_order, stratified_sample, Dataset, DatasetError, TaskKind, Variant};
use crate::text::{canonical, first_balanced};
use crate::{Scalar, Score};

/// A parsed answer: a label of the task's space, or nothing usable.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Option<String>", into = "Option<String>")]
pub enum ParsedLabel {
    Label(String),
    Invalid,
}

impl From<Option<String>> for ParsedLabel {
    fn from(v: Option<String>) -> Self {
        v.map_or(ParsedLabel::Invalid, ParsedLabel::Label)
    }
}

impl From<ParsedLabel> for Option<String> {
    fn from(v: ParsedLabel) -> Self {
        match v {
            ParsedLabel::Label(l) => Some(l),
            ParsedLabel::Invalid => None,
        }
    }
}

impl ParsedLabel {
    pub fn label(&self) -> Option<&str> {
        match self {
            ParsedLabel::Label(l) => Some(l),
            ParsedLabel::Invalid => None,
        }
    }

    pub fn is_invalid(&self) -> bool {
        matches!(self, ParsedLabel::Invalid)
    }
}

impl fmt::Display for ParsedLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label().unwrap_or("<invalid>"))
    }
}

fn key_matches(key: &str, answer_key: &str) -> bool {
    canonical(&key.replace(['_', '-'], " ")) == answer_key
}

/// Reads a model answer.
///
/// The first balanced `{...}` block is tried as JSON under the task's answer
/// key. Otherwise the text, minus any spelling of the answer key, is
/// scanned for label mentions: a mention lying
/// inside a longer label's mention is discarded, and the earliest remaining
/// one wins (the longer label on a tie).
pub fn parse_prediction(raw_output: &str, task: TaskKind) -> ParsedLabel {
    let space = task.labels();
    if let Some(block) = first_balanced(raw_output, '{', '}') {
        if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(block) {
            let answer = map
                .iter()
                .find(|(k, _)| key_matches(k, task.answer_key()))
                .and_then(|(_, v)| v.as_str())
                .map(canonical);
            if let Some(label) = answer.filter(|a| space.contains(&a.as_str())) {
                return ParsedLabel::Label(label);
            }
        }
    }
    scan_labels(raw_output, space, task.answer_key())
}

fn scan_labels(raw: &str, space: &[&str], answer_key: &str) -> ParsedLabel {
    // the answer key names the question, not an answer ("irony detection")
    let mut text = canonical(raw);
    for key in [answer_key.to_string(), answer_key.replace(' ', "_"), answer_key.replace(' ', "-")] {
        text = text.replace(&key, &" ".repeat(key.len()));
    }
    let mut hits: Vec<(usize, usize, &str)> = Vec::new();
    for label in space {
        for (start, m) in text.match_indices(label) {
            hits.push((start, start + m.len(), label));
        }
    }
    let kept = hits.iter().filter(|&&(s, e, _)| {
        !hits
            .iter()
            .any(|&(s2, e2, _)| s2 <= s && e <= e2 && (e2 - s2) > (e - s))
    });
    kept.min_by(|a, b| a.0.cmp(&b.0).then((b.1 - b.0).cmp(&(a.1 - a.0))))
        .map_or(ParsedLabel::Invalid, |&(_, _, l)| ParsedLabel::Label(l.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub template_id: String,
    pub raw_output: String,
    pub parsed_label: ParsedLabel,
}

impl PredictionRecord {
    pub fn parse(
        sample_id: impl Into<String>,
        template_id: impl Into<String>,
        raw_output: impl Into<String>,
        task: TaskKind,
    ) -> Self {
        let raw_output = raw_output.into();
        PredictionRecord {
            sample_id: sample_id.into(),
            template_id: template_id.into(),
            parsed_label: parse_prediction(&raw_output, task),
            raw_output,
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("template {template}: {}", describe_alignment(.missing, .duplicate, .unknown))]
    Alignment {
        template: String,
        missing: Vec<String>,
        duplicate: Vec<String>,
        unknown: Vec<String>,
    },
    #[error("no predictions to evaluate")]
    Empty,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

fn describe_alignment(missing: &[String], duplicate: &[String], unknown: &[String]) -> String {
    let mut parts = Vec::new();
    for (what, ids) in [("missing", missing), ("duplicate", duplicate), ("unknown", unknown)] {
        if !ids.is_empty() {
            parts.push(format!("{what} prediction ids [{}]", ids.join(", ")));
        }
    }
    parts.join("; ")
}

impl EvalError {
    /// Sample ids implicated in an alignment error.
    pub fn offending_ids(&self) -> Vec<String> {
        match self {
            EvalError::Alignment {
                missing,
                duplicate,
                unknown,
                ..
            } => missing.iter().chain(duplicate).chain(unknown).cloned().collect(),
            EvalError::Dataset(e) => e.offending_ids(),
            _ => Vec::new(),
        }
    }
}

#[derive(Deserialize)]
struct PredictionLine {
    sample_id: String,
    template_id: String,
    raw_output: String,
}

/// Reads `{sample_id, template_id, raw_output}` JSONL and parses each output.
pub fn load_predictions(path: &Path, task: TaskKind) -> Result<Vec<PredictionRecord>, EvalError> {
    let raw = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let line: PredictionLine = serde_json::from_str(l).map_err(|e| EvalError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            Ok(PredictionRecord::parse(line.sample_id, line.template_id, line.raw_output, task))
        })
        .collect()
}

pub fn save_predictions(path: &Path, records: &[PredictionRecord]) -> Result<(), EvalError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Gold and predicted label indices for one template, checking that every
/// gold sample has exactly one prediction.
fn align(
    predictions: &[&PredictionRecord],
    gold: &Dataset,
    template: &str,
) -> Result<(Vec<usize>, Vec<Option<usize>>), EvalError> {
    let space = gold.task.label_space();
    let mut by_id: HashMap<&str, &PredictionRecord> = HashMap::new();
    let mut duplicate = BTreeSet::new();
    let mut unknown = BTreeSet::new();
    let gold_ids: HashSet<&str> = gold.ids().collect();
    for p in predictions {
        if !gold_ids.contains(p.sample_id.as_str()) {
            unknown.insert(p.sample_id.clone());
        } else if by_id.insert(&p.sample_id, p).is_some() {
            duplicate.insert(p.sample_id.clone());
        }
    }
    let missing: Vec<String> = gold
        .ids()
        .filter(|id| !by_id.contains_key(id))
        .map(String::from)
        .collect();
    if !missing.is_empty() || !duplicate.is_empty() || !unknown.is_empty() {
        return Err(EvalError::Alignment {
            template: template.to_string(),
            missing,
            duplicate: duplicate.into_iter().collect(),
            unknown: unknown.into_iter().collect(),
        });
    }
    let mut g = Vec::with_capacity(gold.len());
    let mut p = Vec::with_capacity(gold.len());
    for sample in gold.samples() {
        g.push(space.index_of(&sample.label).expect("validated gold label"));
        p.push(by_id[sample.id.as_str()].parsed_label.label().and_then(|l| space.index_of(l)));
    }
    Ok((g, p))
}

/// Macro-F1 (percent) of one template's predictions, in any scalar.
pub fn macro_f1_as<S: Scalar>(predictions: &[PredictionRecord], gold: &Dataset) -> Result<S, EvalError> {
    let template = predictions.first().map_or("", |p| p.template_id.as_str());
    let refs: Vec<&PredictionRecord> = predictions.iter().collect();
    let (g, p) = align(&refs, gold, template)?;
    Ok(macro_f1_from_counts(&confusion_counts(&g, &p, gold.task.labels().len())))
}

pub fn macro_f1(predictions: &[PredictionRecord], gold: &Dataset) -> Result<Score, EvalError> {
    macro_f1_as(predictions, gold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_template_f1: BTreeMap<String, Score>,
    pub averaged_f1: Score,
    pub n_samples: usize,
    pub n_invalid: usize,
}

/// Per-template macro-F1 and their mean. Every template must cover every
/// gold sample exactly once.
pub fn evaluate_run(predictions: &[PredictionRecord], gold: &Dataset) -> Result<EvalReport, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut by_template: BTreeMap<&str, Vec<&PredictionRecord>> = BTreeMap::new();
    for p in predictions {
        by_template.entry(&p.template_id).or_default().push(p);
    }
    let k = gold.task.labels().len();
    let mut per_template_f1 = BTreeMap::new();
    for (template, preds) in &by_template {
        let (g, p) = align(preds, gold, template)?;
        per_template_f1.insert(template.to_string(), macro_f1_from_counts::<Score>(&confusion_counts(&g, &p, k)));
    }
    let scores: Vec<Score> = per_template_f1.values().copied().collect();
    Ok(EvalReport {
        averaged_f1: metrics::mean(&scores).expect("at least one template"),
        per_template_f1,
        n_samples: gold.len(),
        n_invalid: predictions.iter().filter(|p| p.parsed_label.is_invalid()).count(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunRole {
    Zero,
    TestTuned,
    TrainTuned,
    TrainTestTuned,
}

impl RunRole {
    pub fn as_str(self) -> &'static str {
        match self {
            RunRole::Zero => "zero",
            RunRole::TestTuned => "test_tuned",
            RunRole::TrainTuned => "train_tuned",
            RunRole::TrainTestTuned => "train_test_tuned",
        }
    }

    /// The role this one is paired with in a delta.
    pub fn counterpart(self) -> RunRole {
        match self {
            RunRole::Zero => RunRole::TestTuned,
            RunRole::TestTuned => RunRole::Zero,
            RunRole::TrainTuned => RunRole::TrainTestTuned,
            RunRole::TrainTestTuned => RunRole::TrainTuned,
        }
    }
}

impl fmt::Display for RunRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContaminationMode {
    #[default]
    LabelsAndText,
    TextOnly,
}

/// Fine-tuning settings recorded for provenance. The harness never trains;
/// these fields only describe how an externally produced run was made.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_rank: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_dropout: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<u32>,
}

fn default_proportion() -> f64 {
    1.0
}

fn default_model() -> String {
    "model".into()
}

/// Describes one evaluated run. `report`, `predictions` and `gold` point at
/// the run's artifacts, relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub role: RunRole,
    pub task: TaskKind,
    #[serde(default = "default_variant")]
    pub dataset_variant: Variant,
    #[serde(default)]
    pub contamination_mode: ContaminationMode,
    #[serde(default = "default_proportion")]
    pub proportion: f64,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune: Option<FinetuneConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictions: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<PathBuf>,
}

fn default_variant() -> Variant {
    Variant::Original
}

impl RunManifest {
    pub fn new(role: RunRole, task: TaskKind, model: impl Into<String>) -> Self {
        RunManifest {
            role,
            task,
            dataset_variant: Variant::Original,
            contamination_mode: ContaminationMode::LabelsAndText,
            proportion: 1.0,
            model: model.into(),
            finetune: None,
            report: None,
            predictions: None,
            gold: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.proportion > 0.0 && self.proportion <= 1.0) {
            return Err(format!("proportion {} outside (0, 1]", self.proportion));
        }
        Ok(())
    }

    fn key(&self) -> RunKey {
        RunKey {
            contamination_mode: self.contamination_mode,
            model: self.model.clone(),
            dataset_variant: self.dataset_variant,
            task: self.task,
            proportion_ppm: proportion_ppm(self.proportion),
        }
    }
}

fn proportion_ppm(p: f64) -> u64 {
    (p * 1e6).round() as u64
}

/// What a delta pairs on. Field order is the report's row order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct RunKey {
    contamination_mode: ContaminationMode,
    model: String,
    dataset_variant: Variant,
    task: TaskKind,
    proportion_ppm: u64,
}

impl fmt::Display for RunKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "model {}, task {}, variant {}, mode {:?}, proportion {}",
            self.model,
            self.task,
            self.dataset_variant.short(),
            self.contamination_mode,
            self.proportion_ppm as f64 / 1e6
        )
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReportError {
    #[error("missing role: {role} ({key})")]
    MissingRole { role: RunRole, key: String },
    #[error("duplicate role: {role} ({key})")]
    DuplicateRole { role: RunRole, key: String },
    #[error("invalid manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub model: String,
    pub task: TaskKind,
    pub dataset_variant: Variant,
    pub contamination_mode: ContaminationMode,
    pub proportion: f64,
    pub p_zero: Option<Score>,
    pub p_test: Option<Score>,
    pub delta1: Option<Score>,
    pub p_train: Option<Score>,
    pub p_train_test: Option<Score>,
    pub delta2: Option<Score>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub rows: Vec<DeltaRow>,
}

impl DeltaReport {
    pub fn section(&self, mode: ContaminationMode) -> impl Iterator<Item = &DeltaRow> {
        self.rows.iter().filter(move |r| r.contamination_mode == mode)
    }
}

/// Pairs runs into δ1 (zero / test_tuned) and δ2 (train_tuned /
/// train_test_tuned) on matching model, task, variant, mode and proportion.
pub fn contamination_report(runs: &[(RunManifest, EvalReport)]) -> Result<DeltaReport, ReportError> {
    let mut groups: BTreeMap<RunKey, BTreeMap<RunRole, Score>> = BTreeMap::new();
    for (manifest, report) in runs {
        manifest.validate().map_err(ReportError::Manifest)?;
        let key = manifest.key();
        let roles = groups.entry(key.clone()).or_default();
        if roles.insert(manifest.role, report.averaged_f1).is_some() {
            return Err(ReportError::DuplicateRole {
                role: manifest.role,
                key: key.to_string(),
            });
        }
    }
    let mut rows = Vec::new();
    for (key, roles) in groups {
        for &role in roles.keys() {
            let other = role.counterpart();
            if !roles.contains_key(&other) {
                return Err(ReportError::MissingRole {
                    role: other,
                    key: key.to_string(),
                });
            }
        }
        let get = |r: RunRole| roles.get(&r).copied();
        let pair = |a: Option<Score>, b: Option<Score>| a.zip(b).map(|(a, b)| metrics::delta1(a, b));
        rows.push(DeltaRow {
            model: key.model.clone(),
            task: key.task,
            dataset_variant: key.dataset_variant,
            contamination_mode: key.contamination_mode,
            proportion: key.proportion_ppm as f64 / 1e6,
            p_zero: get(RunRole::Zero),
            p_test: get(RunRole::TestTuned),
            delta1: pair(get(RunRole::TestTuned), get(RunRole::Zero)),
            p_train: get(RunRole::TrainTuned),
            p_train_test: get(RunRole::TrainTestTuned),
            delta2: pair(get(RunRole::TrainTestTuned), get(RunRole::TrainTuned)),
        });
    }
    Ok(DeltaReport { rows })
}

/// Two-decimal rendering with a leading minus for negatives and "-" for a
/// missing value.
pub fn format_score(v: Option<Score>) -> String {
    match v {
        None => "-".into(),
        Some(v) => {
            let s = format!("{v:.2}");
            if s == "-0.00" {
                "0.00".into()
            } else {
                s
            }
        }
    }
}

/// Plain-text table, one row per (model, variant, task). Text-only runs get
/// their own section.
pub fn render_table(report: &DeltaReport) -> String {
    let mut out = String::from("Data contamination resistance (%)\n");
    let sections = [
        (ContaminationMode::LabelsAndText, None),
        (ContaminationMode::TextOnly, Some("text-only")),
    ];
    for (mode, title) in sections {
        let rows: Vec<&DeltaRow> = report.section(mode).collect();
        if rows.is_empty() {
            continue;
        }
        if let Some(title) = title {
            out.push('\n');
            out.push_str(title);
            out.push('\n');
        }
        out.push_str("model variant task δ1 δ2\n");
        for r in rows {
            out.push_str(&format!(
                "{} {} {} {} {}",
                r.model,
                r.dataset_variant.short(),
                r.task.display_name(),
                format_score(r.delta1),
                format_score(r.delta2)
            ));
            if proportion_ppm(r.proportion) != 1_000_000 {
                out.push_str(&format!(" @{}%", (r.proportion * 100.0).round()));
            }
            out.push('\n');
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaKind {
    Delta1,
    Delta2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub value: Score,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSeries {
    pub model: String,
    pub task: TaskKind,
    pub dataset_variant: Variant,
    pub contamination_mode: ContaminationMode,
    pub delta: DeltaKind,
    pub points: Vec<SweepPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seed: u64,
    pub fractions: Vec<f64>,
    pub series: Vec<SweepSeries>,
}

pub const DEFAULT_FRACTIONS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("fractions must be ascending values in (0, 1]: {0:?}")]
    Fractions(Vec<f64>),
    #[error("run {role} ({model}) has no predictions and gold to re-score at fraction {fraction}")]
    NotRescorable {
        role: RunRole,
        model: String,
        fraction: f64,
    },
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// A run whose raw predictions are available for re-scoring.
#[derive(Debug, Clone)]
pub struct RecordedRun {
    pub manifest: RunManifest,
    pub predictions: Option<Vec<PredictionRecord>>,
    pub gold: Option<Dataset>,
    pub report: EvalReport,
}

fn check_fractions(fractions: &[f64]) -> Result<(), SweepError> {
    let ok = !fractions.is_empty()
        && fractions.iter().all(|&f| f > 0.0 && f <= 1.0)
        && fractions.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(SweepError::Fractions(fractions.to_vec()))
    }
}

/// Delta series over data proportions.
///
/// At each fraction, runs recorded at that proportion are used as they are.
/// Otherwise the full-data runs are re-scored on the stratified subset of
/// their gold set drawn with `seed`, which is the same subset for every role.
pub fn proportion_sweep(runs: &[RecordedRun], fractions: &[f64], seed: u64) -> Result<SweepReport, SweepError> {
    check_fractions(fractions)?;
    let mut series: BTreeMap<(RunKey, DeltaKind), Vec<SweepPoint>> = BTreeMap::new();
    for &fraction in fractions {
        let ppm = proportion_ppm(fraction);
        let recorded: Vec<&RecordedRun> = runs
            .iter()
            .filter(|r| proportion_ppm(r.manifest.proportion) == ppm)
            .collect();
        let mut scored: Vec<(RunManifest, EvalReport)> = Vec::new();
        // recorded runs at this proportion take precedence over re-scoring
        let covered: HashSet<(RunKey, RunRole)> = recorded
            .iter()
            .map(|r| {
                let mut k = r.manifest.key();
                k.proportion_ppm = 0;
                (k, r.manifest.role)
            })
            .collect();
        for r in &recorded {
            scored.push((r.manifest.clone(), r.report.clone()));
        }
        for r in runs.iter().filter(|r| proportion_ppm(r.manifest.proportion) == 1_000_000) {
            let mut k = r.manifest.key();
            k.proportion_ppm = 0;
            if ppm == 1_000_000 || covered.contains(&(k, r.manifest.role)) {
                continue;
            }
            let (Some(preds), Some(gold)) = (&r.predictions, &r.gold) else {
                return Err(SweepError::NotRescorable {
                    role: r.manifest.role,
                    model: r.manifest.model.clone(),
                    fraction,
                });
            };
            let subset = stratified_sample(gold, fraction, seed).map_err(EvalError::from)?;
            let keep: HashSet<&str> = subset.ids().collect();
            let preds: Vec<PredictionRecord> = preds
                .iter()
                .filter(|p| keep.contains(p.sample_id.as_str()))
                .cloned()
                .collect();
            let report = evaluate_run(&preds, &subset)?;
            let mut manifest = r.manifest.clone();
            manifest.proportion = fraction;
            scored.push((manifest, report));
        }
        let report = contamination_report(&scored)?;
        for row in report.rows {
            let key = RunKey {
                contamination_mode: row.contamination_mode,
                model: row.model.clone(),
                dataset_variant: row.dataset_variant,
                task: row.task,
                proportion_ppm: 0,
            };
            for (kind, value) in [(DeltaKind::Delta1, row.delta1), (DeltaKind::Delta2, row.delta2)] {
                if let Some(value) = value {
                    series
                        .entry((key.clone(), kind))
                        .or_default()
                        .push(SweepPoint { fraction, value });
                }
            }
        }
    }
    Ok(SweepReport {
        seed,
        fractions: fractions.to_vec(),
        series: series
            .into_iter()
            .map(|((key, delta), points)| SweepSeries {
                model: key.model,
                task: key.task,
                dataset_variant: key.dataset_variant,
                contamination_mode: key.contamination_mode,
                delta,
                points,
            })
            .collect(),
    })
}

fn unit_draw(seed: u64, id: &str, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update([0]);
    h.update(id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub const SYNTHETIC_TEMPLATE: &str = "synthetic";

/// Predictions of a model that memorized a stratified `memorized_fraction`
/// of `gold` and otherwise answers correctly with probability
/// `base_accuracy`. Every draw is keyed by (seed, sample id), so a sample's
/// fate never depends on the fraction and memorized sets are nested.
pub fn simulate_memorizing_model(
    gold: &Dataset,
    memorized_fraction: f64,
    base_accuracy: f64,
    seed: u64,
) -> Result<Vec<PredictionRecord>, DatasetError> {
    if !(0.0..=1.0).contains(&memorized_fraction) {
        return Err(DatasetError::Fraction(memorized_fraction));
    }
    if !(0.0..=1.0).contains(&base_accuracy) {
        return Err(DatasetError::Fraction(base_accuracy));
    }
    // A prefix of the nested order, so memorized sets grow with the fraction.
    let k = (memorized_fraction * gold.len() as f64 + 1e-9).round() as usize;
    let memorized: HashSet<&str> = nested_stratified_order(gold, seed)[..k]
        .iter()
        .map(|&pos| gold.samples()[pos].id.as_str())
        .collect();
    let labels = gold.task.labels();
    Ok(gold
        .samples()
        .iter()
        .map(|s| {
            let u = unit_draw(seed, &s.id, "correct") as f64 / (u64::MAX as f64 + 1.0);
            let label = if memorized.contains(s.id.as_str()) || u < base_accuracy {
                s.label.clone()
            } else {
                let others: Vec<&str> = labels.iter().copied().filter(|l| *l != s.label).collect();
                let pick = unit_draw(seed, &s.id, "wrong") % others.len() as u64;
                others[pick as usize].to_string()
            };
            let raw = serde_json::json!({ gold.task.answer_key(): label }).to_string();
            PredictionRecord {
                sample_id: s.id.clone(),
                template_id: SYNTHETIC_TEMPLATE.into(),
                raw_output: raw,
                parsed_label: ParsedLabel::Label(label),
            }
        })
        .collect())
}

/// δ1 series of the synthetic model: the zero-shot run memorizes nothing
/// and the tuned run memorizes each fraction of the test set.
pub fn synthetic_sweep(
    gold: &Dataset,
    fractions: &[f64],
    base_accuracy: f64,
    seed: u64,
) -> Result<SweepReport, SweepError> {
    check_fractions(fractions)?;
    let sim = |f: f64| -> Result<Score, SweepError> {
        let preds = simulate_memorizing_model(gold, f, base_accuracy, seed).map_err(EvalError::from)?;
        Ok(macro_f1(&preds, gold)?)
    };
    let p_zero = sim(0.0)?;
    let points = fractions
        .iter()
        .map(|&f| {
            Ok(SweepPoint {
                fraction: f,
                value: metrics::delta1(sim(f)?, p_zero),
            })
        })
        .collect::<Result<Vec<_>, SweepError>>()?;
    Ok(SweepReport {
        seed,
        fractions: fractions.to_vec(),
        series: vec![SweepSeries {
            model: format!("synthetic@{base_accuracy}"),
            task: gold.task,
            dataset_variant: gold.variant,
            contamination_mode: ContaminationMode::LabelsAndText,
            delta: DeltaKind::Delta1,
            points,
        }],
    })
}
