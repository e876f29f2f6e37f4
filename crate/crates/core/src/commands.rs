//! Run configuration and the command implementations behind the CLI.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{
    evaluate_run, load_predictions, proportion_sweep, render_table, synthetic_sweep,
    contamination_report, DeltaReport, EvalError, EvalReport, RecordedRun, ReportError,
    RunManifest, SweepError, SweepReport, DEFAULT_FRACTIONS,
};
use crate::gateway::{
    CachedGenerator, Generator, HttpBackend, HttpBackendConfig, Limits, MockBackend, MockScript,
    ResponseCache, RetryPolicy, SamplingParams, StepRunner, TemplatePack, API_KEY_ENV,
};
use crate::knowledge::{
    write_fixture_file, FixtureRetriever, GdeltClient, Retriever, TimeWindow,
    DEFAULT_MAX_ENTITIES, DEFAULT_MAX_RECORDS, GDELT_DOC_ENDPOINT,
};
use crate::metrics::{fleiss_kappa, AgreementMatrix, KappaError};
use crate::model::{load_dataset, save_dataset, DatasetError, Split, TaskKind};
use crate::pipeline::{run_pipeline, PipelineConfig, RunCounts};
use crate::recontext::DEFAULT_MAX_TRIPLES;
use crate::reflection::{ReflectionConfig, DEFAULT_MAX_ROUNDS};

#[derive(Debug, Error)]
pub enum CommandError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {message}")]
    Data { message: String, ids: Vec<String> },
    #[error(transparent)]
    MissingRole(ReportError),
    #[error("matrix: {0}")]
    Matrix(#[from] KappaError),
    #[error("{0}")]
    Io(String),
}

impl CommandError {
    /// Process exit code: 2 config, 3 data alignment, 4 missing run role,
    /// 5 agreement matrix, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Config(_) => 2,
            CommandError::Data { .. } => 3,
            CommandError::MissingRole(_) => 4,
            CommandError::Matrix(_) => 5,
            CommandError::Io(_) => 1,
        }
    }
}

impl From<DatasetError> for CommandError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => CommandError::Io(e.to_string()),
            other => CommandError::Data {
                ids: other.offending_ids(),
                message: other.to_string(),
            },
        }
    }
}

impl From<EvalError> for CommandError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io { .. } => CommandError::Io(e.to_string()),
            EvalError::Dataset(d) => d.into(),
            other => CommandError::Data {
                ids: other.offending_ids(),
                message: other.to_string(),
            },
        }
    }
}

impl From<ReportError> for CommandError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Manifest(m) => CommandError::Config(m),
            other => CommandError::MissingRole(other),
        }
    }
}

impl From<SweepError> for CommandError {
    fn from(e: SweepError) -> Self {
        match e {
            SweepError::Fractions(_) => CommandError::Config(e.to_string()),
            SweepError::NotRescorable { .. } => CommandError::Config(e.to_string()),
            SweepError::Report(r) => r.into(),
            SweepError::Eval(e) => e.into(),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CommandError {
    CommandError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Http,
}

/// Generation backend. `mock` needs `script` (a JSON mock script) or
/// `seeded` (seeded label mode); `http` needs `base_url` and `model`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    pub kind: BackendKind,
    #[serde(default)]
    pub script: Option<PathBuf>,
    #[serde(default)]
    pub seeded: Option<u64>,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub timeout_secs: Option<u64>,
    /// Local-model decoding defaults (greedy, 512 output tokens).
    #[serde(default)]
    pub local: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GdeltKind {
    Fixture,
    Live,
}

/// Retrieval source and the query window. `t_end` defaults to today.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GdeltSpec {
    pub kind: GdeltKind,
    #[serde(default)]
    pub fixtures: Option<PathBuf>,
    #[serde(default)]
    pub endpoint: Option<String>,
    pub t_start: NaiveDate,
    #[serde(default)]
    pub t_end: Option<NaiveDate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineKnobs {
    pub max_entities: usize,
    pub max_records: usize,
    pub max_triples: usize,
    pub max_rounds: u32,
    pub parallelism: usize,
}

impl Default for PipelineKnobs {
    fn default() -> Self {
        PipelineKnobs {
            max_entities: DEFAULT_MAX_ENTITIES,
            max_records: DEFAULT_MAX_RECORDS,
            max_triples: DEFAULT_MAX_TRIPLES,
            max_rounds: DEFAULT_MAX_ROUNDS,
            parallelism: 4,
        }
    }
}

fn default_split() -> Split {
    Split::Test
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Everything an update run needs, read from one TOML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    pub input: PathBuf,
    #[serde(default = "default_split")]
    pub split: Split,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub templates: Option<PathBuf>,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    pub backend: BackendSpec,
    pub gdelt: GdeltSpec,
    #[serde(default)]
    pub pipeline: PipelineKnobs,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub input: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub parallelism: Option<usize>,
    pub max_rounds: Option<u32>,
    pub t_start: Option<NaiveDate>,
    pub t_end: Option<NaiveDate>,
    pub script: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(raw: &str) -> Result<Self, CommandError> {
        toml::from_str(raw).map_err(|e| CommandError::Config(e.to_string()))
    }

    /// Reads the file and resolves its relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CommandError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| CommandError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml(&raw)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.input);
        fix(&mut self.output_dir);
        for p in [
            self.templates.as_mut(),
            self.cache_dir.as_mut(),
            self.backend.script.as_mut(),
            self.gdelt.fixtures.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn apply(&mut self, o: Overrides) {
        if let Some(v) = o.input {
            self.input = v;
        }
        if let Some(v) = o.output_dir {
            self.output_dir = v;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.parallelism {
            self.pipeline.parallelism = v;
        }
        if let Some(v) = o.max_rounds {
            self.pipeline.max_rounds = v;
        }
        if let Some(v) = o.t_start {
            self.gdelt.t_start = v;
        }
        if let Some(v) = o.t_end {
            self.gdelt.t_end = Some(v);
        }
        if let Some(v) = o.script {
            self.backend.script = Some(v);
        }
    }

    pub fn window(&self) -> Result<TimeWindow, CommandError> {
        let t_end = self
            .gdelt
            .t_end
            .unwrap_or_else(|| chrono::Local::now().date_naive());
        TimeWindow::new(self.gdelt.t_start, t_end).map_err(|e| CommandError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), CommandError> {
        let bad = |m: String| Err(CommandError::Config(m));
        if !self.input.is_file() {
            return bad(format!("input {} does not exist", self.input.display()));
        }
        let p = &self.pipeline;
        if p.parallelism == 0 || p.max_rounds == 0 || p.max_entities == 0 || p.max_records == 0 || p.max_triples == 0 {
            return bad("pipeline knobs must be at least 1".into());
        }
        self.window()?;
        match self.backend.kind {
            BackendKind::Mock => match (&self.backend.script, self.backend.seeded) {
                (Some(s), _) if !s.is_file() => return bad(format!("mock script {} does not exist", s.display())),
                (None, None) => return bad("mock backend needs 'script' or 'seeded'".into()),
                _ => {}
            },
            BackendKind::Http => {
                if self.backend.base_url.is_none() || self.backend.model.is_none() {
                    return bad("http backend needs 'base_url' and 'model'".into());
                }
            }
        }
        if self.gdelt.kind == GdeltKind::Fixture {
            match &self.gdelt.fixtures {
                Some(f) if f.exists() => {}
                Some(f) => return bad(format!("fixtures {} do not exist", f.display())),
                None => return bad("fixture retrieval needs 'fixtures'".into()),
            }
        }
        if let Some(t) = &self.templates {
            if !t.is_dir() {
                return bad(format!("template directory {} does not exist", t.display()));
            }
        }
        Ok(())
    }

    fn template_pack(&self) -> Result<TemplatePack, CommandError> {
        match &self.templates {
            Some(dir) => TemplatePack::load_dir(dir).map_err(|e| CommandError::Config(e.to_string())),
            None => Ok(TemplatePack::builtin()),
        }
    }

    fn backend(&self, limits: &Arc<Limits>) -> Result<Box<dyn Generator>, CommandError> {
        let b = &self.backend;
        let backend: Box<dyn Generator> = match b.kind {
            BackendKind::Mock => match &b.script {
                Some(path) => Box::new(MockBackend::scripted(
                    MockScript::load(path).map_err(|e| CommandError::Config(e.to_string()))?,
                )),
                None => Box::new(MockBackend::seeded_labels(b.seeded.unwrap_or(0), self.task)),
            },
            BackendKind::Http => {
                let config = HttpBackendConfig {
                    base_url: b.base_url.clone().unwrap_or_default(),
                    model: b.model.clone().unwrap_or_default(),
                    api_key_env: API_KEY_ENV.to_string(),
                    timeout_secs: b.timeout_secs.unwrap_or(60),
                };
                Box::new(
                    HttpBackend::from_env(config, RetryPolicy::default(), limits.clone())
                        .map_err(|e| CommandError::Config(e.to_string()))?,
                )
            }
        };
        match &self.cache_dir {
            Some(dir) => {
                let cache = ResponseCache::open(dir).map_err(|e| CommandError::Config(e.to_string()))?;
                Ok(Box::new(CachedGenerator::new(backend, cache)))
            }
            None => Ok(backend),
        }
    }

    fn retriever(&self, limits: &Arc<Limits>) -> Result<Box<dyn Retriever>, CommandError> {
        Ok(match self.gdelt.kind {
            GdeltKind::Fixture => {
                let path = self.gdelt.fixtures.as_ref().expect("validated");
                Box::new(FixtureRetriever::load(path).map_err(|e| CommandError::Config(e.to_string()))?)
            }
            GdeltKind::Live => Box::new(GdeltClient::new(
                self.gdelt.endpoint.clone().unwrap_or_else(|| GDELT_DOC_ENDPOINT.to_string()),
                RetryPolicy::default(),
                limits.clone(),
            )),
        })
    }

    fn sampling(&self) -> SamplingParams {
        let base = if self.backend.local {
            SamplingParams::local()
        } else {
            SamplingParams::default()
        };
        SamplingParams {
            seed: Some(self.seed),
            ..base
        }
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig, CommandError> {
        Ok(PipelineConfig {
            max_entities: self.pipeline.max_entities,
            max_records: self.pipeline.max_records,
            max_triples: self.pipeline.max_triples,
            reflection: ReflectionConfig::new(self.pipeline.max_rounds).map_err(CommandError::Config)?,
            parallelism: self.pipeline.parallelism,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateSummary {
    pub task: TaskKind,
    pub seed: u64,
    pub window: TimeWindow,
    #[serde(flatten)]
    pub counts: RunCounts,
}

pub const UPDATED_FILE: &str = "updated.jsonl";
pub const SEMANTIC_FILE: &str = "semantic.jsonl";
pub const PROVENANCE_FILE: &str = "provenance.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CommandError> {
    let mut body = serde_json::to_string_pretty(value).expect("report serializes");
    body.push('\n');
    std::fs::write(path, body).map_err(|e| io_err(path, e))
}

/// Runs the update pipeline and writes the updated and semantic datasets,
/// the provenance log and the summary counts into the output directory.
pub fn cmd_update(config: &RunConfig) -> Result<UpdateSummary, CommandError> {
    config.validate()?;
    let window = config.window()?;
    let dataset = load_dataset(&config.input, config.task, config.split)?;
    let pack = config.template_pack()?;
    let limits = Arc::new(Limits::default());
    let backend = config.backend(&limits)?;
    let retriever = config.retriever(&limits)?;
    let runner = StepRunner::new(backend.as_ref(), &pack).with_params(config.sampling());
    let pipeline = config.pipeline_config()?;
    tracing::info!(samples = dataset.len(), parallelism = pipeline.parallelism, "update run");
    let out = run_pipeline(&dataset, &runner, retriever.as_ref(), &window, &pipeline)
        .map_err(|e| CommandError::Io(e.to_string()))?;

    let dir = &config.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    save_dataset(&out.updated, &dir.join(UPDATED_FILE))?;
    save_dataset(&out.semantic, &dir.join(SEMANTIC_FILE))?;
    let mut prov = String::new();
    for record in &out.provenance {
        prov.push_str(&serde_json::to_string(record).expect("provenance serializes"));
        prov.push('\n');
    }
    let prov_path = dir.join(PROVENANCE_FILE);
    std::fs::write(&prov_path, prov).map_err(|e| io_err(&prov_path, e))?;
    let summary = UpdateSummary {
        task: config.task,
        seed: config.seed,
        window,
        counts: out.counts,
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Scores a prediction file against gold and writes the report.
pub fn cmd_eval(
    task: TaskKind,
    predictions: &Path,
    gold: &Path,
    output: Option<&Path>,
) -> Result<EvalReport, CommandError> {
    let gold = load_dataset(gold, task, Split::Test)?;
    let preds = load_predictions(predictions, task)?;
    let report = evaluate_run(&preds, &gold)?;
    if let Some(path) = output {
        write_json(path, &report)?;
    }
    Ok(report)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_relative() {
        base.join(p)
    } else {
        p.to_path_buf()
    }
}

/// Reads every `*.manifest.json` in `dir` (sorted by name) together with its
/// report, or evaluates its predictions against its gold file.
pub fn load_runs(dir: &Path) -> Result<Vec<RecordedRun>, CommandError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CommandError::Config(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(".manifest.json")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CommandError::Config(format!("no *.manifest.json files in {}", dir.display())));
    }
    let mut runs = Vec::new();
    for path in paths {
        let raw = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let manifest: RunManifest = serde_json::from_str(&raw)
            .map_err(|e| CommandError::Config(format!("{}: {e}", path.display())))?;
        manifest
            .validate()
            .map_err(|e| CommandError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let gold = match &manifest.gold {
            Some(g) => Some(load_dataset(&resolve(base, g), manifest.task, Split::Test)?),
            None => None,
        };
        let predictions = match &manifest.predictions {
            Some(p) => Some(load_predictions(&resolve(base, p), manifest.task)?),
            None => None,
        };
        let report = match (&manifest.report, &predictions, &gold) {
            (Some(r), _, _) => {
                let r = resolve(base, r);
                let raw = std::fs::read_to_string(&r).map_err(|e| io_err(&r, e))?;
                serde_json::from_str::<EvalReport>(&raw)
                    .map_err(|e| CommandError::Data {
                        message: format!("{}: {e}", r.display()),
                        ids: Vec::new(),
                    })?
            }
            (None, Some(p), Some(g)) => evaluate_run(p, g)?,
            _ => {
                return Err(CommandError::Config(format!(
                    "{}: needs 'report' or both 'predictions' and 'gold'",
                    path.display()
                )))
            }
        };
        runs.push(RecordedRun {
            manifest,
            predictions,
            gold,
            report,
        });
    }
    Ok(runs)
}

/// Builds the delta report for a manifest directory. Returns the report and
/// its rendered table; writes `<output>` (JSON) and the table beside it.
pub fn cmd_report(dir: &Path, output: Option<&Path>) -> Result<(DeltaReport, String), CommandError> {
    let runs = load_runs(dir)?;
    let pairs: Vec<_> = runs.into_iter().map(|r| (r.manifest, r.report)).collect();
    let report = contamination_report(&pairs)?;
    let table = render_table(&report);
    let json_path = output.map_or_else(|| dir.join("delta_report.json"), Path::to_path_buf);
    write_json(&json_path, &report)?;
    let txt = json_path.with_extension("txt");
    std::fs::write(&txt, &table).map_err(|e| io_err(&txt, e))?;
    Ok((report, table))
}

pub fn cmd_sweep(
    dir: &Path,
    fractions: Option<&[f64]>,
    seed: u64,
    output: &Path,
) -> Result<SweepReport, CommandError> {
    let runs = load_runs(dir)?;
    let report = proportion_sweep(&runs, fractions.unwrap_or(&DEFAULT_FRACTIONS), seed)?;
    write_json(output, &report)?;
    Ok(report)
}

/// Sweep of the synthetic memorizing model over a gold file.
pub fn cmd_sweep_synthetic(
    task: TaskKind,
    gold: &Path,
    fractions: Option<&[f64]>,
    base_accuracy: f64,
    seed: u64,
    output: &Path,
) -> Result<SweepReport, CommandError> {
    if !(0.0..=1.0).contains(&base_accuracy) {
        return Err(CommandError::Config(format!("base accuracy {base_accuracy} outside [0, 1]")));
    }
    let gold = load_dataset(gold, task, Split::Test)?;
    let report = synthetic_sweep(&gold, fractions.unwrap_or(&DEFAULT_FRACTIONS), base_accuracy, seed)?;
    write_json(output, &report)?;
    Ok(report)
}

pub fn cmd_kappa(matrix: &Path) -> Result<f64, CommandError> {
    let m = AgreementMatrix::from_csv(matrix)?;
    Ok(fleiss_kappa::<f64>(&m)?)
}

/// Records live retrieval results for later offline replay. Writes the raw
/// records exactly as the API returned them.
pub fn capture_fixtures(
    entities: &[String],
    window: &TimeWindow,
    max_records: usize,
    endpoint: Option<&str>,
    output: &Path,
) -> Result<usize, CommandError> {
    if entities.is_empty() {
        return Err(CommandError::Config("at least one entity is required".into()));
    }
    let client = GdeltClient::new(
        endpoint.unwrap_or(GDELT_DOC_ENDPOINT),
        RetryPolicy::default(),
        Arc::new(Limits::default()),
    );
    let records = client
        .fetch(entities, window, max_records)
        .map_err(|e| CommandError::Io(e.to_string()))?;
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    write_fixture_file(output, &records).map_err(|e| CommandError::Io(e.to_string()))?;
    Ok(records.len())
}

/// Per-template table for the eval command's console output.
pub fn describe_eval(report: &EvalReport) -> String {
    let mut lines: BTreeMap<&str, String> = BTreeMap::new();
    for (t, v) in &report.per_template_f1 {
        lines.insert(t, format!("{t}: {v:.2}"));
    }
    let mut out: Vec<String> = lines.into_values().collect();
    out.push(format!(
        "averaged macro-F1: {:.2} ({} samples, {} invalid)",
        report.averaged_f1, report.n_samples, report.n_invalid
    ));
    out.join("\n")
}
