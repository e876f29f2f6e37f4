//! Per-sample orchestration of the update pipeline and its provenance.

use serde::{Deserialize, Serialize};

use crate::gateway::StepRunner;
use crate::knowledge::{
    extract_entities, retrieve_with_fallback, summarize_knowledge, KnowledgeRecord, Retriever,
    TimeWindow, DEFAULT_MAX_ENTITIES, DEFAULT_MAX_RECORDS,
};
use crate::model::{Dataset, Sample, Variant};
use crate::recontext::{
    apply_candidate, extract_triples, semantic_rewrite, substitute_triples, update_triples,
    CandidateText, Triple, TripleSet, TripleUpdate, UpdateHits, DEFAULT_MAX_TRIPLES,
};
use crate::reflection::{reflect_and_refine, RefineContext, Refined, ReflectionConfig, RoundLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub max_entities: usize,
    pub max_records: usize,
    pub max_triples: usize,
    pub reflection: ReflectionConfig,
    pub parallelism: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            max_entities: DEFAULT_MAX_ENTITIES,
            max_records: DEFAULT_MAX_RECORDS,
            max_triples: DEFAULT_MAX_TRIPLES,
            reflection: ReflectionConfig::default(),
            parallelism: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Accepted,
    Unresolved,
    NoKnowledge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub original: Triple,
    pub replacement: Triple,
    pub hits: UpdateHits,
    pub unanchored: bool,
}

/// The chain d → E → K → K̂ → T → T̂ → d^u → d^s → d̂ for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub id: String,
    pub entities: Vec<String>,
    pub window: Option<TimeWindow>,
    pub widened: bool,
    pub records: Vec<KnowledgeRecord>,
    pub summary: String,
    pub triples: Vec<Triple>,
    pub updates: Vec<UpdateRecord>,
    pub d_u: Option<CandidateText>,
    pub d_s: Option<CandidateText>,
    pub d_hat: Option<CandidateText>,
    pub reflection: Vec<RoundLog>,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl ProvenanceRecord {
    fn new(id: &str) -> Self {
        ProvenanceRecord {
            id: id.to_string(),
            entities: Vec::new(),
            window: None,
            widened: false,
            records: Vec::new(),
            summary: String::new(),
            triples: Vec::new(),
            updates: Vec::new(),
            d_u: None,
            d_s: None,
            d_hat: None,
            reflection: Vec::new(),
            status: Status::Unresolved,
            notes: Vec::new(),
        }
    }

    /// True when every stage of the chain produced something.
    pub fn chain_complete(&self) -> bool {
        let nonblank = |c: &Option<CandidateText>| c.as_ref().is_some_and(|c| !c.is_blank());
        !self.entities.is_empty()
            && self.window.is_some()
            && !self.records.is_empty()
            && !self.summary.trim().is_empty()
            && !self.triples.is_empty()
            && !self.updates.is_empty()
            && nonblank(&self.d_u)
            && nonblank(&self.d_s)
            && nonblank(&self.d_hat)
            && !self.reflection.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub provenance: ProvenanceRecord,
    /// Rewritten sample for the updated dataset.
    pub updated: Option<Sample>,
    /// Style-only rewrite for the semantic dataset.
    pub semantic: Option<Sample>,
}

fn fail(mut prov: ProvenanceRecord, stage: &str, err: String, semantic: Option<Sample>) -> SampleOutcome {
    tracing::warn!(id = %prov.id, stage, error = %err, "sample failed");
    prov.notes.push(format!("{stage}: {err}"));
    prov.status = Status::Unresolved;
    SampleOutcome {
        provenance: prov,
        updated: None,
        semantic,
    }
}

fn no_knowledge(mut prov: ProvenanceRecord, why: &str, semantic: Option<Sample>) -> SampleOutcome {
    tracing::info!(id = %prov.id, stage = "retrieval", reason = why, "no knowledge");
    prov.notes.push(why.to_string());
    prov.status = Status::NoKnowledge;
    SampleOutcome {
        provenance: prov,
        updated: None,
        semantic,
    }
}

/// Runs every stage for one sample. Failures end the chain early and are
/// recorded in the provenance notes; they never panic or abort a run.
pub fn process_sample(
    sample: &Sample,
    runner: &StepRunner<'_>,
    retriever: &dyn Retriever,
    window: &TimeWindow,
    config: &PipelineConfig,
) -> SampleOutcome {
    let mut prov = ProvenanceRecord::new(&sample.id);

    // semantic branch: needs only the original triples
    let triples = match extract_triples(sample, runner, config.max_triples) {
        Ok(t) => Ok(t),
        Err(e) => {
            prov.notes.push(format!("extract_triples: {e}"));
            Err(e)
        }
    };
    let fallback_triples = TripleSet::empty(&sample.id);
    let semantic = match semantic_rewrite(sample, triples.as_ref().unwrap_or(&fallback_triples), runner) {
        Ok(c) if !c.is_blank() => Some(c),
        Ok(_) => {
            prov.notes.push("semantic_rewrite: empty rewrite".into());
            None
        }
        Err(e) => {
            prov.notes.push(format!("semantic_rewrite: {e}"));
            None
        }
    };
    tracing::info!(id = %sample.id, stage = "semantic", ok = semantic.is_some());
    let semantic_sample = semantic.as_ref().map(|c| apply_candidate(sample, c));
    prov.d_s = semantic.clone();
    if let Ok(t) = &triples {
        prov.triples = t.triples.clone();
    }

    let entities = match extract_entities(sample, runner, config.max_entities) {
        Ok(e) => e,
        Err(e) => return fail(prov, "extract_entities", e.to_string(), semantic_sample),
    };
    tracing::info!(id = %sample.id, stage = "entities", count = entities.entities.len());
    prov.entities = entities.entities.clone();
    if entities.no_entities() {
        return no_knowledge(prov, "no_entities", semantic_sample);
    }

    let retrieval = match retrieve_with_fallback(retriever, &entities, window, config.max_records) {
        Ok(r) => r,
        Err(e) => return fail(prov, "query_gdelt", e.to_string(), semantic_sample),
    };
    tracing::info!(id = %sample.id, stage = "retrieval", records = retrieval.records.len(), widened = retrieval.widened);
    prov.window = Some(retrieval.window);
    prov.widened = retrieval.widened;
    prov.records = retrieval.records.clone();
    if retrieval.no_knowledge() {
        return no_knowledge(prov, "no_knowledge", semantic_sample);
    }

    let summary = match summarize_knowledge(&retrieval.records, &entities, &retrieval.window, runner) {
        Ok(s) if !s.text.is_empty() => s,
        Ok(_) => return fail(prov, "summarize_knowledge", "empty summary".into(), semantic_sample),
        Err(e) => return fail(prov, "summarize_knowledge", e.to_string(), semantic_sample),
    };
    prov.summary = summary.text.clone();

    let triples = match triples {
        Ok(t) => t,
        Err(e) => return fail(prov, "extract_triples", e.to_string(), semantic_sample),
    };
    let updates: Vec<TripleUpdate> = match update_triples(&triples, &summary, runner) {
        Ok(u) => u,
        Err(e) => return fail(prov, "update_triples", e.to_string(), semantic_sample),
    };
    let substitution = substitute_triples(sample, &updates);
    prov.updates = updates
        .iter()
        .zip(&substitution.hits)
        .map(|(u, h)| UpdateRecord {
            original: u.original.clone(),
            replacement: u.replacement.clone(),
            hits: *h,
            unanchored: h.unanchored(),
        })
        .collect();
    prov.d_u = Some(substitution.candidate.clone());
    tracing::info!(id = %sample.id, stage = "substitute", unanchored = substitution.unanchored().len());

    let Some(semantic) = semantic else {
        return fail(prov, "semantic_rewrite", "no semantic rewrite to synthesize from".into(), None);
    };
    let ctx = RefineContext {
        substituted: &substitution.candidate,
        updates: &updates,
        semantic: &semantic,
        summary: &summary,
    };
    let outcome = reflect_and_refine(sample, ctx, config.reflection, runner);
    tracing::info!(id = %sample.id, stage = "reflection", attempts = outcome.attempts());
    prov.reflection = outcome.rounds;
    match outcome.result {
        Refined::Accepted { sample: updated, candidate } => {
            prov.d_hat = Some(candidate);
            prov.status = Status::Accepted;
            SampleOutcome {
                provenance: prov,
                updated: Some(updated),
                semantic: semantic_sample,
            }
        }
        Refined::Unresolved { .. } => {
            prov.d_hat = prov.reflection.iter().rev().find_map(|r| r.candidate.clone());
            prov.status = Status::Unresolved;
            SampleOutcome {
                provenance: prov,
                updated: None,
                semantic: semantic_sample,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub total: usize,
    pub accepted: usize,
    pub unresolved: usize,
    pub no_knowledge: usize,
    pub semantic: usize,
}

impl RunCounts {
    pub fn conserved(&self) -> bool {
        self.accepted + self.unresolved + self.no_knowledge == self.total
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub updated: Dataset,
    pub semantic: Dataset,
    pub provenance: Vec<ProvenanceRecord>,
    pub counts: RunCounts,
}

/// Runs the pipeline over a dataset on a pool of `config.parallelism`
/// workers. Results are assembled in input order, so the output does not
/// depend on scheduling.
pub fn run_pipeline(
    dataset: &Dataset,
    runner: &StepRunner<'_>,
    retriever: &dyn Retriever,
    window: &TimeWindow,
    config: &PipelineConfig,
) -> Result<PipelineOutput, rayon::ThreadPoolBuildError> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism.max(1))
        .build()?;
    let outcomes: Vec<SampleOutcome> = pool.install(|| {
        dataset
            .samples()
            .par_iter()
            .map(|s| process_sample(s, runner, retriever, window, config))
            .collect()
    });
    let mut counts = RunCounts {
        total: dataset.len(),
        ..RunCounts::default()
    };
    let mut updated = Vec::new();
    let mut semantic = Vec::new();
    let mut provenance = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        match o.provenance.status {
            Status::Accepted => counts.accepted += 1,
            Status::Unresolved => counts.unresolved += 1,
            Status::NoKnowledge => counts.no_knowledge += 1,
        }
        updated.extend(o.updated);
        semantic.extend(o.semantic);
        provenance.push(o.provenance);
    }
    counts.semantic = semantic.len();
    let build = |variant, samples| {
        Dataset::new(dataset.task, dataset.split, variant, samples)
            .expect("rewritten samples keep validated fields")
    };
    Ok(PipelineOutput {
        updated: build(Variant::Updated, updated),
        semantic: build(Variant::Semantic, semantic),
        provenance,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockBackend, MockRule, MockScript, TemplatePack};
    use crate::knowledge::{parse_date, FixtureRetriever, RawRecord};
    use crate::model::{Split, TaskKind};

    fn script(verdict: &str) -> MockScript {
        MockScript::default()
            .rule(MockRule::new(Some("extract_triples"), &[], r#"[["Clinton","delivered","speech"]]"#))
            .rule(MockRule::new(Some("semantic_rewrite"), &[], "The speech by Clinton thrilled me"))
            .rule(MockRule::new(Some("extract_entities"), &["nobody"], "[]"))
            .rule(MockRule::new(Some("extract_entities"), &[], r#"["Clinton"]"#))
            .rule(MockRule::new(Some("summarize_knowledge"), &[], "Harris held a rally."))
            .rule(MockRule::new(Some("update_triples"), &[], r#"[["Harris","delivered","rally"]]"#))
            .rule(MockRule::new(Some("synthesize"), &[], "Harris's rally thrilled me"))
            .rule(MockRule::new(Some("check_factuality"), &[], verdict))
            .rule(MockRule::new(Some("check_label"), &[], verdict))
    }

    fn dataset() -> Dataset {
        let texts = ["I love Clinton's speech", "nobody here", "Clinton again"];
        let samples = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Sample::new(format!("s{i}"), TaskKind::Emotion, *t, None, None, "joy").unwrap())
            .collect();
        Dataset::new(TaskKind::Emotion, Split::Test, Variant::Original, samples).unwrap()
    }

    fn retriever() -> FixtureRetriever {
        FixtureRetriever::new(vec![RawRecord {
            date: parse_date("2024-05-01").unwrap(),
            title: "Clinton yields stage to Harris".into(),
            url: "https://example.org/1".into(),
            tone: None,
        }])
    }

    fn window() -> TimeWindow {
        TimeWindow::new(parse_date("2024-04-01").unwrap(), parse_date("2024-06-01").unwrap()).unwrap()
    }

    #[test]
    fn routes_and_conserves() {
        let pack = TemplatePack::builtin();
        let mock = MockBackend::scripted(script(r#"{"pass": true, "rationale": "ok"}"#));
        let out = run_pipeline(&dataset(), &StepRunner::new(&mock, &pack), &retriever(), &window(), &PipelineConfig::default()).unwrap();
        assert_eq!(out.counts.accepted, 2);
        assert_eq!(out.counts.no_knowledge, 1);
        assert!(out.counts.conserved());
        assert_eq!(out.semantic.len(), 3);
        assert_eq!(out.updated.ids().collect::<Vec<_>>(), ["s0", "s2"]);
        assert!(out.provenance.iter().filter(|p| p.status == Status::Accepted).all(|p| p.chain_complete()));
        assert_eq!(out.updated.samples()[0].text, "Harris's rally thrilled me");
    }

    #[test]
    fn always_failing_reflection_is_unresolved() {
        let pack = TemplatePack::builtin();
        let mock = MockBackend::scripted(script(r#"{"pass": false, "rationale": "no"}"#));
        let out = run_pipeline(&dataset(), &StepRunner::new(&mock, &pack), &retriever(), &window(), &PipelineConfig::default()).unwrap();
        assert_eq!((out.counts.accepted, out.counts.unresolved, out.counts.no_knowledge), (0, 2, 1));
        assert!(out.updated.is_empty());
        assert!(out.provenance[0].reflection.len() == 3);
    }

    #[test]
    fn transport_errors_do_not_abort() {
        let pack = TemplatePack::builtin();
        let mock = MockBackend::scripted(MockScript::default());
        let out = run_pipeline(&dataset(), &StepRunner::new(&mock, &pack), &retriever(), &window(), &PipelineConfig::default()).unwrap();
        assert_eq!(out.counts.unresolved, 3);
        assert!(out.counts.conserved());
        assert!(out.provenance[0].notes.iter().any(|n| n.starts_with("extract_entities")));
    }
}
