//! Task, sample and dataset model with JSONL I/O and stratified sampling.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::canonical;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Emotion,
    Irony,
    Stance,
    Mrpc,
    Rte,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Emotion,
        TaskKind::Irony,
        TaskKind::Stance,
        TaskKind::Mrpc,
        TaskKind::Rte,
    ];

    /// Canonical labels, in the order the benchmark tables list them.
    pub fn labels(self) -> &'static [&'static str] {
        match self {
            TaskKind::Emotion => &["joy", "optimism", "sadness", "anger"],
            TaskKind::Irony => &["irony", "not irony"],
            TaskKind::Stance => &["favor", "against", "neutral"],
            TaskKind::Mrpc => &["semantically equivalent", "not semantically equivalent"],
            TaskKind::Rte => &["entailment", "not entailment"],
        }
    }

    pub fn label_space(self) -> LabelSpace {
        LabelSpace {
            labels: self.labels().iter().map(|l| l.to_string()).collect(),
        }
    }

    /// Sentence-pair tasks carry a second text.
    pub fn is_pair(self) -> bool {
        matches!(self, TaskKind::Mrpc | TaskKind::Rte)
    }

    /// JSON key the evaluation prompts ask the model to answer under.
    pub fn answer_key(self) -> &'static str {
        match self {
            TaskKind::Emotion => "emotion",
            TaskKind::Irony => "irony detection",
            TaskKind::Stance => "stance",
            TaskKind::Mrpc => "mrpc",
            TaskKind::Rte => "rte",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Emotion => "emotion",
            TaskKind::Irony => "irony",
            TaskKind::Stance => "stance",
            TaskKind::Mrpc => "mrpc",
            TaskKind::Rte => "rte",
        }
    }

    /// Column heading used in rendered delta tables.
    pub fn display_name(self) -> &'static str {
        match self {
            TaskKind::Emotion => "Emotion",
            TaskKind::Irony => "Irony",
            TaskKind::Stance => "Stance",
            TaskKind::Mrpc => "MRPC",
            TaskKind::Rte => "RTE",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match canonical(s).as_str() {
            "emotion" => Ok(TaskKind::Emotion),
            "irony" => Ok(TaskKind::Irony),
            "stance" => Ok(TaskKind::Stance),
            "mrpc" => Ok(TaskKind::Mrpc),
            "rte" => Ok(TaskKind::Rte),
            other => Err(format!("unknown task '{other}'")),
        }
    }
}

/// Ordered, duplicate-free set of canonical label strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    labels: Vec<String>,
}

impl LabelSpace {
    pub fn new<I, S>(labels: I) -> Result<Self, String>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for label in labels {
            let label = canonical(label.as_ref());
            if label.is_empty() {
                return Err("empty label".into());
            }
            if !seen.insert(label.clone()) {
                return Err(format!("duplicate label '{label}'"));
            }
            out.push(label);
        }
        if out.is_empty() {
            return Err("label space is empty".into());
        }
        Ok(LabelSpace { labels: out })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        let label = canonical(label);
        self.labels.iter().position(|l| *l == label)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index_of(label).is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match canonical(s).as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Original,
    Semantic,
    Updated,
}

impl Variant {
    /// Short row tag used in rendered tables.
    pub fn short(self) -> &'static str {
        match self {
            Variant::Original => "orig",
            Variant::Semantic => "semt",
            Variant::Updated => "ours",
        }
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match canonical(s).as_str() {
            "original" | "orig" => Ok(Variant::Original),
            "semantic" | "semt" => Ok(Variant::Semantic),
            "updated" | "ours" => Ok(Variant::Updated),
            other => Err(format!("unknown dataset variant '{other}'")),
        }
    }
}

/// One labeled instance. Pair tasks keep their second sentence in `text2`,
/// stance samples keep their target in `target`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub task: TaskKind,
    pub text: String,
    #[serde(default)]
    pub text2: Option<String>,
    #[serde(default)]
    pub target: Option<String>,
    pub label: String,
}

/// A single validation failure, tied to a sample id and field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SampleIssue {
    pub id: String,
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for SampleIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}]: {}", self.id, self.field, self.message)
    }
}

impl Sample {
    /// Builds a sample, canonicalising the label.
    pub fn new(
        id: impl Into<String>,
        task: TaskKind,
        text: impl Into<String>,
        text2: Option<String>,
        target: Option<String>,
        label: &str,
    ) -> Result<Self, Vec<SampleIssue>> {
        let sample = Sample {
            id: id.into(),
            task,
            text: text.into(),
            text2,
            target,
            label: canonical(label),
        };
        let issues = sample.issues();
        if issues.is_empty() {
            Ok(sample)
        } else {
            Err(issues)
        }
    }

    pub fn issues(&self) -> Vec<SampleIssue> {
        let mut issues = Vec::new();
        let mut push = |field: &'static str, message: String| {
            issues.push(SampleIssue {
                id: self.id.clone(),
                field,
                message,
            })
        };
        if self.id.trim().is_empty() {
            push("id", "empty id".into());
        }
        if self.text.trim().is_empty() {
            push("text", "empty text".into());
        }
        if !self.task.label_space().contains(&self.label) {
            push(
                "label",
                format!(
                    "'{}' not in {{{}}}",
                    self.label,
                    self.task.labels().join(", ")
                ),
            );
        }
        let has_text2 = self.text2.as_deref().is_some_and(|t| !t.trim().is_empty());
        match (self.task.is_pair(), has_text2) {
            (true, false) => push("text2", format!("required for {} samples", self.task)),
            (false, true) => push("text2", format!("not allowed for {} samples", self.task)),
            _ => {}
        }
        let has_target = self.target.as_deref().is_some_and(|t| !t.trim().is_empty());
        match (self.task == TaskKind::Stance, has_target) {
            (true, false) => push("target", "required for stance samples".into()),
            (false, true) => push("target", format!("not allowed for {} samples", self.task)),
            _ => {}
        }
        issues
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("invalid samples: {}", format_issues(.0))]
    Invalid(Vec<SampleIssue>),
    #[error("fraction {0} outside (0, 1]")]
    Fraction(f64),
    #[error("cannot sample from an empty dataset")]
    Empty,
}

fn format_issues(issues: &[SampleIssue]) -> String {
    issues
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl DatasetError {
    /// Ids named by a validation error, deduplicated in first-seen order.
    pub fn offending_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        match self {
            DatasetError::Invalid(issues) => issues
                .iter()
                .filter(|i| seen.insert(i.id.clone()))
                .map(|i| i.id.clone())
                .collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub task: TaskKind,
    pub split: Split,
    pub variant: Variant,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(
        task: TaskKind,
        split: Split,
        variant: Variant,
        samples: Vec<Sample>,
    ) -> Result<Self, DatasetError> {
        let mut issues = Vec::new();
        let mut ids = HashSet::new();
        for s in &samples {
            if s.task != task {
                issues.push(SampleIssue {
                    id: s.id.clone(),
                    field: "task",
                    message: format!("expected {task}, found {}", s.task),
                });
            }
            issues.extend(s.issues());
            if !ids.insert(s.id.as_str()) {
                issues.push(SampleIssue {
                    id: s.id.clone(),
                    field: "id",
                    message: "duplicate id".into(),
                });
            }
        }
        if !issues.is_empty() {
            return Err(DatasetError::Invalid(issues));
        }
        Ok(Dataset {
            task,
            split,
            variant,
            samples,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// Keeps the samples whose id is in `keep`, preserving order.
    pub fn retain_ids(&self, keep: &HashSet<String>) -> Dataset {
        Dataset {
            task: self.task,
            split: self.split,
            variant: self.variant,
            samples: self
                .samples
                .iter()
                .filter(|s| keep.contains(&s.id))
                .cloned()
                .collect(),
        }
    }
}

/// Reads a JSONL dataset file. Every line must be one sample record.
pub fn load_dataset(path: &Path, task: TaskKind, split: Split) -> Result<Dataset, DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |e: serde_json::Error| DatasetError::Malformed {
            line: idx + 1,
            message: e.to_string(),
        };
        // a missing `task` means the task being loaded
        let mut value: serde_json::Value = serde_json::from_str(&line).map_err(malformed)?;
        if let Some(obj) = value.as_object_mut() {
            obj.entry("task").or_insert_with(|| task.as_str().into());
        }
        let mut sample: Sample = serde_json::from_value(value).map_err(malformed)?;
        sample.label = canonical(&sample.label);
        samples.push(sample);
    }
    Dataset::new(task, split, Variant::Original, samples)
}

/// Writes a dataset as JSONL; `load_dataset` reads it back unchanged.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<PathBuf, DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for sample in dataset.samples() {
        let line = serde_json::to_string(sample).expect("sample serializes");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)?;
    Ok(path.to_path_buf())
}

const ROUNDING_SLACK: f64 = 1e-9;

/// Hamilton apportionment: per-stratum floor of `fraction × count`, with the
/// remaining seats handed to the largest remainders so the total is
/// `round(fraction × n)`. Ties go to the earlier stratum.
pub fn largest_remainder_quotas(fraction: f64, counts: &[usize]) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    let total = ((fraction * n as f64) + ROUNDING_SLACK).round() as usize;
    let exact: Vec<f64> = counts.iter().map(|&c| fraction * c as f64).collect();
    let mut quotas: Vec<usize> = exact
        .iter()
        .zip(counts)
        .map(|(&x, &c)| ((x + ROUNDING_SLACK).floor() as usize).min(c))
        .collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    let remainder = |i: usize| exact[i] - quotas[i] as f64;
    order.sort_by(|&a, &b| {
        remainder(b)
            .partial_cmp(&remainder(a))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut missing = total.saturating_sub(quotas.iter().sum());
    for i in order {
        if missing == 0 {
            break;
        }
        if quotas[i] < counts[i] {
            quotas[i] += 1;
            missing -= 1;
        }
    }
    quotas
}

/// Positions grouped by label (label-space order), each group shuffled by
/// one generator seeded from `seed`.
fn shuffled_strata(dataset: &Dataset, seed: u64) -> Vec<Vec<usize>> {
    let space = dataset.task.label_space();
    let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (pos, s) in dataset.samples().iter().enumerate() {
        let label = space.index_of(&s.label).expect("validated label");
        strata.entry(label).or_default().push(pos);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    strata
        .into_values()
        .map(|mut positions| {
            positions.shuffle(&mut rng);
            positions
        })
        .collect()
}

/// Sample positions in an order whose every prefix is stratified.
///
/// Seats go one at a time by the Balinski-Young quota method: among labels
/// still under the upper quota for the new prefix length, the largest
/// `count / (taken + 1)` wins (ties to the earlier label). Each prefix of
/// length k keeps every label within floor/ceil of `k * count / n`, and
/// prefixes only grow, which largest-remainder rounding cannot promise.
/// Within a label the order is the same shuffle `stratified_sample` uses.
pub fn nested_stratified_order(dataset: &Dataset, seed: u64) -> Vec<usize> {
    let strata = shuffled_strata(dataset, seed);
    let n = dataset.len() as u128;
    let mut taken = vec![0usize; strata.len()];
    let mut order = Vec::with_capacity(dataset.len());
    for h in 1..=n {
        let mut best: Option<usize> = None;
        for (i, s) in strata.iter().enumerate() {
            let c = s.len() as u128;
            let upper = (h * c).div_ceil(n);
            if taken[i] == s.len() || taken[i] as u128 + 1 > upper {
                continue;
            }
            // c_i / (q_i + 1) > c_b / (q_b + 1)
            let better = best.is_none_or(|b| {
                c * (taken[b] as u128 + 1) > strata[b].len() as u128 * (taken[i] as u128 + 1)
            });
            if better {
                best = Some(i);
            }
        }
        let i = best.expect("quota method always has an eligible label");
        order.push(strata[i][taken[i]]);
        taken[i] += 1;
    }
    order
}

/// Seeded stratified subset preserving per-label proportions.
///
/// Each label's samples are shuffled once by a generator seeded from `seed`
/// and the first `quota` are kept, so for a fixed seed the subsets are nested
/// across increasing fractions. Output keeps input order.
pub fn stratified_sample(
    dataset: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<Dataset, DatasetError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DatasetError::Fraction(fraction));
    }
    if dataset.is_empty() {
        return Err(DatasetError::Empty);
    }
    let strata = shuffled_strata(dataset, seed);
    let counts: Vec<usize> = strata.iter().map(Vec::len).collect();
    let quotas = largest_remainder_quotas(fraction, &counts);

    let mut keep = vec![false; dataset.len()];
    for (shuffled, quota) in strata.iter().zip(quotas) {
        for &pos in &shuffled[..quota] {
            keep[pos] = true;
        }
    }
    let samples = dataset
        .samples()
        .iter()
        .zip(keep)
        .filter(|&(_, k)| k)
        .map(|(s, _)| s.clone())
        .collect();
    Ok(Dataset {
        task: dataset.task,
        split: dataset.split,
        variant: dataset.variant,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn emotion(id: &str, label: &str) -> Sample {
        Sample::new(id, TaskKind::Emotion, format!("text {id}"), None, None, label).unwrap()
    }

    fn two_label_dataset(n_each: usize) -> Dataset {
        let mut samples = Vec::new();
        for i in 0..n_each {
            samples.push(
                Sample::new(format!("a{i}"), TaskKind::Irony, "t", None, None, "irony").unwrap(),
            );
            samples.push(
                Sample::new(format!("b{i}"), TaskKind::Irony, "t", None, None, "not irony")
                    .unwrap(),
            );
        }
        Dataset::new(TaskKind::Irony, Split::Test, Variant::Original, samples).unwrap()
    }

    #[test]
    fn label_spaces_match_benchmark_table() {
        assert_eq!(TaskKind::Emotion.labels(), ["joy", "optimism", "sadness", "anger"]);
        assert_eq!(TaskKind::Irony.labels(), ["irony", "not irony"]);
        assert_eq!(TaskKind::Stance.labels(), ["favor", "against", "neutral"]);
        assert_eq!(
            TaskKind::Mrpc.labels(),
            ["semantically equivalent", "not semantically equivalent"]
        );
        assert_eq!(TaskKind::Rte.labels(), ["entailment", "not entailment"]);
        for task in TaskKind::ALL {
            LabelSpace::new(task.labels()).unwrap();
        }
    }

    #[test]
    fn label_space_rejects_duplicates_and_empty() {
        assert!(LabelSpace::new(["a", " A "]).is_err());
        assert!(LabelSpace::new(Vec::<String>::new()).is_err());
        assert!(LabelSpace::new(["ok", "  "]).is_err());
    }

    #[test]
    fn label_outside_space_is_rejected() {
        let err = Sample::new("x1", TaskKind::Emotion, "t", None, None, "fear").unwrap_err();
        assert_eq!(err[0].field, "label");
        assert!(err[0].message.contains("joy, optimism, sadness, anger"));
    }

    #[test]
    fn stance_requires_target_and_pairs_require_text2() {
        let err = Sample::new("s1", TaskKind::Stance, "t", None, None, "favor").unwrap_err();
        assert_eq!(err[0].field, "target");
        let err = Sample::new("m1", TaskKind::Mrpc, "a", None, None, "semantically equivalent")
            .unwrap_err();
        assert_eq!(err[0].field, "text2");
        let err = Sample::new("e1", TaskKind::Emotion, "a", Some("b".into()), None, "joy")
            .unwrap_err();
        assert_eq!(err[0].field, "text2");
    }

    #[test]
    fn dataset_rejects_duplicate_ids_and_mixed_tasks() {
        let err = Dataset::new(
            TaskKind::Emotion,
            Split::Test,
            Variant::Original,
            vec![emotion("a", "joy"), emotion("a", "anger")],
        )
        .unwrap_err();
        assert_eq!(err.offending_ids(), vec!["a"]);
        let irony = Sample::new("b", TaskKind::Irony, "t", None, None, "irony").unwrap();
        assert!(Dataset::new(TaskKind::Emotion, Split::Test, Variant::Original, vec![irony])
            .is_err());
    }

    #[test]
    fn quotas_use_largest_remainder() {
        assert_eq!(largest_remainder_quotas(0.2, &[50, 50]), vec![10, 10]);
        // 0.5 × [3, 3, 3] = 1.5 each, total round(4.5) = 5
        assert_eq!(largest_remainder_quotas(0.5, &[3, 3, 3]), vec![2, 2, 1]);
        assert_eq!(largest_remainder_quotas(1.0, &[7, 1]), vec![7, 1]);
        for f in [0.2, 0.4, 0.6, 0.8, 1.0] {
            let q = largest_remainder_quotas(f, &[13, 7, 5, 1]);
            assert_eq!(q.iter().sum::<usize>(), (f * 26.0 + 1e-9).round() as usize);
        }
    }

    #[test]
    fn stratified_two_label_example() {
        let ds = two_label_dataset(50);
        let sub = stratified_sample(&ds, 0.2, 7).unwrap();
        assert_eq!(sub.len(), 20);
        let irony = sub.samples().iter().filter(|s| s.label == "irony").count();
        assert_eq!(irony, 10);
    }

    #[test]
    fn stratified_full_fraction_is_identity() {
        let ds = two_label_dataset(9);
        assert_eq!(stratified_sample(&ds, 1.0, 123).unwrap(), ds);
    }

    #[test]
    fn stratified_rejects_bad_fraction() {
        let ds = two_label_dataset(3);
        assert!(matches!(stratified_sample(&ds, 0.0, 1), Err(DatasetError::Fraction(_))));
        assert!(matches!(stratified_sample(&ds, 1.5, 1), Err(DatasetError::Fraction(_))));
        assert!(matches!(stratified_sample(&ds, f64::NAN, 1), Err(DatasetError::Fraction(_))));
        let empty = Dataset::new(TaskKind::Irony, Split::Test, Variant::Original, vec![]).unwrap();
        assert!(matches!(stratified_sample(&empty, 0.5, 1), Err(DatasetError::Empty)));
    }

    #[test]
    fn stratified_subsets_are_nested() {
        let ds = two_label_dataset(40);
        let mut prev: HashSet<String> = HashSet::new();
        for f in [0.2, 0.4, 0.6, 0.8, 1.0] {
            let ids: HashSet<String> = stratified_sample(&ds, f, 99)
                .unwrap()
                .ids()
                .map(String::from)
                .collect();
            assert!(prev.is_subset(&ids));
            prev = ids;
        }
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        let ds = Dataset::new(TaskKind::Rte, Split::Train, Variant::Original, vec![]).unwrap();
        save_dataset(&ds, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "");
        assert_eq!(load_dataset(&path, TaskKind::Rte, Split::Train).unwrap(), ds);
    }

    #[test]
    fn malformed_line_is_reported_by_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&emotion("a", "joy")).unwrap();
        std::fs::write(&path, format!("{good}\n{{not json\n")).unwrap();
        match load_dataset(&path, TaskKind::Emotion, Split::Test) {
            Err(DatasetError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn task_field_defaults_to_loaded_task() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.jsonl");
        std::fs::write(&path, "{\"id\": \"a\", \"text\": \"x\", \"label\": \"Joy\"}\n").unwrap();
        let ds = load_dataset(&path, TaskKind::Emotion, Split::Test).unwrap();
        assert_eq!((ds.samples()[0].task, ds.samples()[0].label.as_str()), (TaskKind::Emotion, "joy"));
        std::fs::write(&path, "{\"id\": \"a\", \"task\": \"rte\", \"text\": \"x\", \"text2\": \"y\", \"label\": \"entailment\"}\n").unwrap();
        assert!(load_dataset(&path, TaskKind::Emotion, Split::Test).is_err());
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        (
            0usize..5,
            proptest::collection::vec(("\\PC{1,40}", "\\PC{1,20}", 0usize..4), 0..12),
        )
            .prop_map(|(t, rows)| {
                let task = TaskKind::ALL[t];
                let labels = task.labels();
                let samples = rows
                    .into_iter()
                    .enumerate()
                    .map(|(i, (text, extra, l))| {
                        let (text2, target) = match task {
                            TaskKind::Mrpc | TaskKind::Rte => (Some(format!("y{extra}")), None),
                            TaskKind::Stance => (None, Some(format!("t{extra}"))),
                            _ => (None, None),
                        };
                        let label = labels[l % labels.len()];
                        Sample::new(format!("id{i}"), task, format!("x{text}"), text2, target, label)
                            .unwrap()
                    })
                    .collect();
                Dataset::new(task, Split::Test, Variant::Original, samples).unwrap()
            })
    }

    proptest! {
        #[test]
        fn save_load_round_trip(ds in arb_dataset()) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("d.jsonl");
            save_dataset(&ds, &path).unwrap();
            prop_assert_eq!(load_dataset(&path, ds.task, Split::Test).unwrap(), ds);
        }

        #[test]
        fn stratified_is_deterministic_subset(seed in any::<u64>(), f in 0.05f64..=1.0, n in 1usize..60) {
            let samples: Vec<Sample> = (0..n)
                .map(|i| emotion(&format!("s{i}"), TaskKind::Emotion.labels()[(i * 7 + i / 3) % 4]))
                .collect();
            let ds = Dataset::new(TaskKind::Emotion, Split::Test, Variant::Original, samples).unwrap();
            let a = stratified_sample(&ds, f, seed).unwrap();
            let b = stratified_sample(&ds, f, seed).unwrap();
            prop_assert_eq!(&a, &b);
            let all: HashSet<&str> = ds.ids().collect();
            prop_assert!(a.ids().all(|id| all.contains(id)));

            let mut per_label: HashMap<&str, usize> = HashMap::new();
            for s in ds.samples() { *per_label.entry(s.label.as_str()).or_default() += 1; }
            let mut picked: HashMap<&str, usize> = HashMap::new();
            for s in a.samples() { *picked.entry(s.label.as_str()).or_default() += 1; }
            for (label, count) in per_label {
                let got = picked.get(label).copied().unwrap_or(0) as f64;
                prop_assert!((got - f * count as f64).abs() < 1.0 + 1e-9);
            }
            prop_assert_eq!(a.len(), (f * n as f64 + 1e-9).round() as usize);
        }
    
        #[test]
        fn nested_order_prefixes_stay_within_quota(seed in any::<u64>(), n in 1usize..60, skew in 1usize..6) {
            let labels = TaskKind::Emotion.labels();
            let samples: Vec<Sample> = (0..n)
                .map(|i| emotion(&format!("s{i}"), labels[(i / skew + i % 3) % 4]))
                .collect();
            let ds = Dataset::new(TaskKind::Emotion, Split::Test, Variant::Original, samples).unwrap();
            let order = nested_stratified_order(&ds, seed);
            let mut sorted = order.clone();
            sorted.sort();
            prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            let mut totals: HashMap<&str, usize> = HashMap::new();
            for s in ds.samples() { *totals.entry(s.label.as_str()).or_default() += 1; }
            let mut taken: HashMap<&str, usize> = HashMap::new();
            for (k, &pos) in order.iter().enumerate() {
                *taken.entry(ds.samples()[pos].label.as_str()).or_default() += 1;
                for (label, &c) in &totals {
                    let exact = (k + 1) as f64 * c as f64 / n as f64;
                    let got = taken.get(label).copied().unwrap_or(0) as f64;
                    prop_assert!(got >= exact.floor() - 1e-9 && got <= exact.ceil() + 1e-9);
                }
            }
        }
    }
}
