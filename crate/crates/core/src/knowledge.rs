//! Entity extraction, event retrieval and knowledge summarization.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use chrono::{Days, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{GatewayError, HttpCall, HttpTransport, Limits, RetryPolicy, Step, StepError, StepRunner};
use crate::model::{Sample, TaskKind};
use crate::text::{first_balanced, is_word_char};

pub const DEFAULT_MAX_ENTITIES: usize = 8;
pub const DEFAULT_MAX_RECORDS: usize = 25;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySet {
    pub entities: Vec<String>,
    pub source_sample: String,
}

impl EntitySet {
    /// Trims, drops empties, dedups case-insensitively (first spelling wins)
    /// and caps the list.
    pub fn new(
        source_sample: impl Into<String>,
        raw: impl IntoIterator<Item = String>,
        max_entities: usize,
    ) -> Self {
        let mut seen = HashSet::new();
        let entities = raw
            .into_iter()
            .map(|e| e.trim().to_string())
            .filter(|e| !e.is_empty() && seen.insert(e.to_lowercase()))
            .take(max_entities)
            .collect();
        EntitySet {
            entities,
            source_sample: source_sample.into(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// Flag set when extraction found nothing to search for.
    pub fn no_entities(&self) -> bool {
        self.entities.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeWindow {
    pub t_start: NaiveDate,
    pub t_end: NaiveDate,
}

impl TimeWindow {
    pub fn new(t_start: NaiveDate, t_end: NaiveDate) -> Result<Self, KnowledgeError> {
        if t_start > t_end {
            return Err(KnowledgeError::Window { t_start, t_end });
        }
        Ok(TimeWindow { t_start, t_end })
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        self.t_start <= date && date <= self.t_end
    }

    pub fn span_days(&self) -> u64 {
        (self.t_end - self.t_start).num_days() as u64
    }

    /// Doubles the span by moving the start backward; a single-day window
    /// grows by one day.
    pub fn widened(&self) -> TimeWindow {
        let span = self.span_days().max(1);
        TimeWindow {
            t_start: self
                .t_end
                .checked_sub_days(Days::new(2 * span))
                .unwrap_or(NaiveDate::MIN),
            t_end: self.t_end,
        }
    }
}

/// An unranked record as stored in fixture files or returned by the live API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    #[serde(with = "flexible_date")]
    pub date: NaiveDate,
    pub title: String,
    pub url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tone: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeRecord {
    pub event_date: NaiveDate,
    pub headline: String,
    pub source_url: String,
    pub matched_entities: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tone: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeSummary {
    pub text: String,
    pub record_count: usize,
    pub window: TimeWindow,
}

impl KnowledgeSummary {
    pub fn is_empty(&self) -> bool {
        self.record_count == 0
    }
}

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("window start {t_start} is after end {t_end}")]
    Window { t_start: NaiveDate, t_end: NaiveDate },
    #[error("could not parse entities from response: {raw:?}")]
    Extraction { raw: String },
    #[error("retrieval needs at least one entity")]
    NoEntities,
    #[error("retrieval failed: {0}")]
    Retrieval(#[source] GatewayError),
    #[error("unexpected retrieval response: {0}")]
    Protocol(String),
    #[error("{path}: {message}")]
    Fixture { path: PathBuf, message: String },
    #[error(transparent)]
    Step(#[from] StepError),
}

/// Asks the backend for the sample's entities.
///
/// The response is read as a JSON array of strings, or failing that one
/// entity per line. Stance samples always lead with their target.
pub fn extract_entities(
    sample: &Sample,
    runner: &StepRunner<'_>,
    max_entities: usize,
) -> Result<EntitySet, KnowledgeError> {
    let mut text = sample.text.clone();
    if let Some(second) = &sample.text2 {
        text = format!("{text}\n{second}");
    }
    let raw = runner.run(Step::ExtractEntities, &[("text", text)])?;
    let mut entities = parse_entity_list(&raw).ok_or(KnowledgeError::Extraction { raw })?;
    if sample.task == TaskKind::Stance {
        if let Some(target) = &sample.target {
            entities.insert(0, target.clone());
        }
    }
    Ok(EntitySet::new(&sample.id, entities, max_entities))
}

pub(crate) fn parse_entity_list(raw: &str) -> Option<Vec<String>> {
    if let Some(block) = first_balanced(raw, '[', ']') {
        if let Ok(list) = serde_json::from_str::<Vec<String>>(block) {
            return Some(list);
        }
    }
    let lines: Vec<String> = raw
        .lines()
        .map(|l| {
            l.trim()
                .trim_start_matches(['-', '*', '•'])
                .trim()
                .trim_matches('"')
                .to_string()
        })
        .filter(|l| !l.is_empty())
        .collect();
    // A line-per-entity answer has short lines; prose is not an entity list.
    if lines.is_empty() || lines.iter().any(|l| l.split_whitespace().count() > 8 || l.contains(['[', '{'])) {
        return None;
    }
    Some(lines)
}

/// Source of candidate records for an entity query.
pub trait Retriever: Send + Sync {
    /// Candidate records for the entities within the window. Implementations
    /// may over-return; [`query_gdelt`] applies the filter and ranking.
    fn fetch(
        &self,
        entities: &[String],
        window: &TimeWindow,
        max_records: usize,
    ) -> Result<Vec<RawRecord>, KnowledgeError>;
}

/// Entities occurring in `headline` as whole words, case-insensitively.
pub fn matched_entities(headline: &str, entities: &[String]) -> Vec<String> {
    entities
        .iter()
        .filter(|e| contains_word_ci(headline, e))
        .cloned()
        .collect()
}

fn contains_word_ci(haystack: &str, needle: &str) -> bool {
    let hay = haystack.to_lowercase();
    let needle = needle.trim().to_lowercase();
    if needle.is_empty() {
        return false;
    }
    let edge_start = needle.chars().next().is_some_and(is_word_char);
    let edge_end = needle.chars().last().is_some_and(is_word_char);
    hay.match_indices(&needle).any(|(i, m)| {
        let before_ok = !edge_start || !hay[..i].chars().next_back().is_some_and(is_word_char);
        let after_ok = !edge_end || !hay[i + m.len()..].chars().next().is_some_and(is_word_char);
        before_ok && after_ok
    })
}

/// Filters raw records to the window and to at least one entity match,
/// dedups by url, sorts by (match count desc, date desc, url asc) and keeps
/// the top `max_records`.
pub fn rank_records(
    raw: Vec<RawRecord>,
    entities: &[String],
    window: &TimeWindow,
    max_records: usize,
) -> Vec<KnowledgeRecord> {
    let mut by_url: BTreeMap<String, KnowledgeRecord> = BTreeMap::new();
    for r in raw {
        if !window.contains(r.date) {
            continue;
        }
        let matched = matched_entities(&r.title, entities);
        if matched.is_empty() {
            continue;
        }
        let record = KnowledgeRecord {
            event_date: r.date,
            headline: r.title,
            source_url: r.url,
            matched_entities: matched,
            tone: r.tone,
        };
        // duplicate urls: keep the earliest-sorting copy so output is order independent
        match by_url.get(&record.source_url) {
            Some(existing) if relevance_cmp(existing, &record).is_le() => {}
            _ => {
                by_url.insert(record.source_url.clone(), record);
            }
        }
    }
    let mut records: Vec<KnowledgeRecord> = by_url.into_values().collect();
    records.sort_by(relevance_cmp);
    records.truncate(max_records);
    records
}

fn relevance_cmp(a: &KnowledgeRecord, b: &KnowledgeRecord) -> std::cmp::Ordering {
    b.matched_entities
        .len()
        .cmp(&a.matched_entities.len())
        .then(b.event_date.cmp(&a.event_date))
        .then(a.source_url.cmp(&b.source_url))
        .then(a.headline.cmp(&b.headline))
}

/// Records about `entities` within `window`, ranked and truncated. An empty
/// result means no knowledge was found.
pub fn query_gdelt(
    client: &dyn Retriever,
    entities: &EntitySet,
    window: &TimeWindow,
    max_records: usize,
) -> Result<Vec<KnowledgeRecord>, KnowledgeError> {
    if entities.is_empty() {
        return Err(KnowledgeError::NoEntities);
    }
    let raw = client.fetch(&entities.entities, window, max_records)?;
    Ok(rank_records(raw, &entities.entities, window, max_records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub records: Vec<KnowledgeRecord>,
    /// Window the records came from (the widened one if widening happened).
    pub window: TimeWindow,
    pub widened: bool,
}

impl Retrieval {
    pub fn no_knowledge(&self) -> bool {
        self.records.is_empty()
    }
}

/// Queries the window and, on a miss, the window widened once.
pub fn retrieve_with_fallback(
    client: &dyn Retriever,
    entities: &EntitySet,
    window: &TimeWindow,
    max_records: usize,
) -> Result<Retrieval, KnowledgeError> {
    let records = query_gdelt(client, entities, window, max_records)?;
    if !records.is_empty() {
        return Ok(Retrieval {
            records,
            window: *window,
            widened: false,
        });
    }
    let wide = window.widened();
    let records = query_gdelt(client, entities, &wide, max_records)?;
    Ok(Retrieval {
        records,
        window: wide,
        widened: true,
    })
}

/// One backend call summarizing every record. No records, no call.
pub fn summarize_knowledge(
    records: &[KnowledgeRecord],
    entities: &EntitySet,
    window: &TimeWindow,
    runner: &StepRunner<'_>,
) -> Result<KnowledgeSummary, KnowledgeError> {
    if records.is_empty() {
        return Ok(KnowledgeSummary {
            text: String::new(),
            record_count: 0,
            window: *window,
        });
    }
    let listing = records
        .iter()
        .map(|r| format!("- {} | {} | {}", r.event_date, r.headline, r.source_url))
        .collect::<Vec<_>>()
        .join("\n");
    let text = runner.run(
        Step::SummarizeKnowledge,
        &[
            ("entities", entities.entities.join(", ")),
            ("start", window.t_start.to_string()),
            ("end", window.t_end.to_string()),
            ("records", listing),
        ],
    )?;
    Ok(KnowledgeSummary {
        text: text.trim().to_string(),
        record_count: records.len(),
        window: *window,
    })
}

/// Offline retriever over a directory (or single file) of exported records.
/// Every `.json`, `.jsonl` and `.csv` file is read; records are unioned and
/// deduplicated by url.
#[derive(Debug, Clone, Default)]
pub struct FixtureRetriever {
    records: Vec<RawRecord>,
}

impl FixtureRetriever {
    pub fn new(records: Vec<RawRecord>) -> Self {
        let mut seen = HashSet::new();
        let records = records
            .into_iter()
            .filter(|r| seen.insert(r.url.clone()))
            .collect();
        FixtureRetriever { records }
    }

    pub fn load(path: &Path) -> Result<Self, KnowledgeError> {
        let mut files = Vec::new();
        if path.is_dir() {
            let entries = std::fs::read_dir(path).map_err(|e| fixture_err(path, e))?;
            for entry in entries {
                let p = entry.map_err(|e| fixture_err(path, e))?.path();
                let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("");
                if p.is_file() && matches!(ext, "json" | "jsonl" | "csv") {
                    files.push(p);
                }
            }
            files.sort();
        } else {
            files.push(path.to_path_buf());
        }
        let mut records = Vec::new();
        for file in files {
            records.extend(read_fixture_file(&file)?);
        }
        Ok(Self::new(records))
    }

    pub fn records(&self) -> &[RawRecord] {
        &self.records
    }
}

impl Retriever for FixtureRetriever {
    fn fetch(
        &self,
        _entities: &[String],
        _window: &TimeWindow,
        _max_records: usize,
    ) -> Result<Vec<RawRecord>, KnowledgeError> {
        Ok(self.records.clone())
    }
}

fn fixture_err(path: &Path, e: impl ToString) -> KnowledgeError {
    KnowledgeError::Fixture {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn read_fixture_file(path: &Path) -> Result<Vec<RawRecord>, KnowledgeError> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    if ext == "csv" {
        let mut reader = csv::Reader::from_path(path).map_err(|e| fixture_err(path, e))?;
        return reader
            .deserialize()
            .collect::<Result<Vec<RawRecord>, _>>()
            .map_err(|e| fixture_err(path, e));
    }
    let raw = std::fs::read_to_string(path).map_err(|e| fixture_err(path, e))?;
    if raw.trim_start().starts_with('[') {
        return serde_json::from_str(&raw).map_err(|e| fixture_err(path, e));
    }
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| fixture_err(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Writes records as JSONL in the fixture format.
pub fn write_fixture_file(path: &Path, records: &[RawRecord]) -> Result<(), KnowledgeError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| fixture_err(path, e))
}

pub const GDELT_DOC_ENDPOINT: &str = "https://api.gdeltproject.org/api/v2/doc/doc";

/// Live client for the GDELT DOC 2.0 article search.
pub struct GdeltClient {
    endpoint: String,
    transport: HttpTransport,
}

impl GdeltClient {
    pub fn new(endpoint: impl Into<String>, retry: RetryPolicy, limits: Arc<Limits>) -> Self {
        GdeltClient {
            endpoint: endpoint.into(),
            transport: HttpTransport::new(Duration::from_secs(30), retry, limits),
        }
    }

    /// OR query over the entities; multi-word entities are quoted.
    pub fn compose_query(entities: &[String]) -> String {
        let terms: Vec<String> = entities
            .iter()
            .map(|e| {
                let e = e.replace('"', "");
                if e.contains(char::is_whitespace) {
                    format!("\"{e}\"")
                } else {
                    e
                }
            })
            .collect();
        if terms.len() == 1 {
            terms[0].clone()
        } else {
            format!("({})", terms.join(" OR "))
        }
    }

    pub fn query_params(entities: &[String], window: &TimeWindow, max_records: usize) -> Vec<(String, String)> {
        vec![
            ("query".into(), Self::compose_query(entities)),
            ("mode".into(), "ArtList".into()),
            ("format".into(), "json".into()),
            ("maxrecords".into(), max_records.clamp(1, 250).to_string()),
            ("startdatetime".into(), format!("{}000000", window.t_start.format("%Y%m%d"))),
            ("enddatetime".into(), format!("{}235959", window.t_end.format("%Y%m%d"))),
            ("sort".into(), "DateDesc".into()),
        ]
    }

    pub fn parse_response(body: &str) -> Result<Vec<RawRecord>, KnowledgeError> {
        #[derive(Deserialize)]
        struct Article {
            url: String,
            title: String,
            seendate: String,
            #[serde(default)]
            tone: Option<f64>,
        }
        #[derive(Deserialize)]
        struct Response {
            #[serde(default)]
            articles: Vec<Article>,
        }
        if body.trim().is_empty() {
            return Ok(Vec::new());
        }
        let parsed: Response = serde_json::from_str(body)
            .map_err(|_| KnowledgeError::Protocol(body.chars().take(200).collect()))?;
        parsed
            .articles
            .into_iter()
            .map(|a| {
                let date = parse_date(&a.seendate).ok_or_else(|| {
                    KnowledgeError::Protocol(format!("bad seendate {:?}", a.seendate))
                })?;
                Ok(RawRecord {
                    date,
                    title: a.title,
                    url: a.url,
                    tone: a.tone,
                })
            })
            .collect()
    }
}

impl Retriever for GdeltClient {
    fn fetch(
        &self,
        entities: &[String],
        window: &TimeWindow,
        max_records: usize,
    ) -> Result<Vec<RawRecord>, KnowledgeError> {
        let query = Self::query_params(entities, window, max_records);
        let body = self
            .transport
            .execute(&HttpCall::Get {
                url: &self.endpoint,
                query: &query,
            })
            .map_err(KnowledgeError::Retrieval)?;
        Self::parse_response(&body)
    }
}

/// Accepts `YYYY-MM-DD`, `YYYYMMDD`, GDELT's `YYYYMMDDTHHMMSSZ`,
/// `YYYYMMDDHHMMSS` and RFC 3339 timestamps.
pub fn parse_date(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .or_else(|_| NaiveDate::parse_from_str(s, "%Y%m%d"))
        .ok()
        .or_else(|| NaiveDateTime::parse_from_str(s, "%Y%m%dT%H%M%SZ").ok().map(|d| d.date()))
        .or_else(|| NaiveDateTime::parse_from_str(s, "%Y%m%d%H%M%S").ok().map(|d| d.date()))
        .or_else(|| chrono::DateTime::parse_from_rfc3339(s).ok().map(|d| d.date_naive()))
}

mod flexible_date {
    use chrono::NaiveDate;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(date: &NaiveDate, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&date.format("%Y-%m-%d").to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NaiveDate, D::Error> {
        let raw = String::deserialize(d)?;
        super::parse_date(&raw)
            .ok_or_else(|| serde::de::Error::custom(format!("unrecognized date {raw:?}")))
    }
}
