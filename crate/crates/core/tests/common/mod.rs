//! A scripted world for end-to-end runs: each sample names its own mayor
//! and bridge, the fixtures report a successor, and the mock script answers
//! every pipeline step by matching those names.
//!
//! Sample `i` behaves by `i % 10`:
//! 0 no entities, 1 entity absent from the fixtures, 2 label check always
//! fails, 3 first two drafts fail the factuality check, 4 news only in the
//! widened window, anything else is accepted on the first round.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use coreeval::gateway::{MockRule, MockScript};
use coreeval::knowledge::{write_fixture_file, RawRecord, TimeWindow};
use coreeval::model::save_dataset;
use coreeval::{Dataset, Sample, Split, TaskKind, Variant};

pub const T_START: &str = "2024-07-01";
pub const T_END: &str = "2024-09-30";

pub fn date(s: &str) -> NaiveDate {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
}

pub fn window() -> TimeWindow {
    TimeWindow::new(date(T_START), date(T_END)).unwrap()
}

pub fn tag(i: usize) -> String {
    format!("{i:03}")
}

pub fn original_text(i: usize) -> String {
    let n = tag(i);
    format!("Mayor Alpha{n} opened the Bridge{n} today")
}

pub fn updated_text(i: usize) -> String {
    let n = tag(i);
    format!("Mayor Beta{n} opened the Tunnel{n} today")
}

pub fn dataset(n: usize) -> Dataset {
    let labels = TaskKind::Emotion.labels();
    let samples = (0..n)
        .map(|i| {
            Sample::new(
                format!("em-{}", tag(i)),
                TaskKind::Emotion,
                original_text(i),
                None,
                None,
                labels[i % labels.len()],
            )
            .unwrap()
        })
        .collect();
    Dataset::new(TaskKind::Emotion, Split::Test, Variant::Original, samples).unwrap()
}

const PASS: &str = r#"{"pass": true, "rationale": "consistent with the knowledge"}"#;

pub fn script(n: usize) -> MockScript {
    let mut s = MockScript::default();
    for i in 0..n {
        let t = tag(i);
        let alpha = format!("Alpha{t}");
        let beta = format!("Beta{t}");
        let rule = |step: &str, frags: &[&str], resp: String| MockRule::new(Some(step), frags, resp);
        s = s
            .rule(rule(
                "extract_triples",
                &[&alpha],
                format!(r#"[["Alpha{t}", "opened", "Bridge{t}"]]"#),
            ))
            .rule(rule(
                "semantic_rewrite",
                &[&alpha],
                format!("Today the Bridge{t} was opened by Mayor Alpha{t}"),
            ))
            .rule(rule(
                "extract_entities",
                &[&alpha],
                match i % 10 {
                    0 => "[]".to_string(),
                    1 => format!(r#"["Ghost{t}"]"#),
                    _ => format!(r#"["Alpha{t}", "Bridge{t}"]"#),
                },
            ))
            .rule(rule(
                "summarize_knowledge",
                &[&alpha],
                format!("Beta{t} replaced Alpha{t} and now runs the Tunnel{t}."),
            ))
            .rule(rule(
                "update_triples",
                &[&alpha],
                format!(r#"[["Beta{t}", "opened", "Tunnel{t}"]]"#),
            ));
        for attempt in 1..=5 {
            let text = if i % 10 == 3 && attempt < 3 {
                format!("{} draft {attempt}", updated_text(i))
            } else {
                updated_text(i)
            };
            let marker = format!("Attempt: {attempt}");
            s = s.rule(rule("synthesize", &[&alpha, &marker], text));
        }
        s = s
            .rule(rule(
                "check_factuality",
                &[&beta, "draft"],
                r#"{"pass": false, "rationale": "the draft adds an unsupported claim"}"#.into(),
            ))
            .rule(rule("check_factuality", &[&beta], PASS.into()))
            .rule(rule(
                "check_label",
                &[&beta],
                if i % 10 == 2 {
                    r#"{"pass": false, "rationale": "the emotion changed"}"#.into()
                } else {
                    PASS.into()
                },
            ));
    }
    s
}

pub fn fixtures(n: usize) -> Vec<RawRecord> {
    let mut out = Vec::new();
    for i in 0..n {
        if i % 10 <= 1 {
            continue;
        }
        let t = tag(i);
        let day = if i % 10 == 4 { "2024-05-20" } else { "2024-08-15" };
        out.push(RawRecord {
            date: date(day),
            title: format!("Alpha{t} hands Bridge{t} to Beta{t}"),
            url: format!("https://news.example/{t}"),
            tone: Some(-1.5),
        });
        // outside even the widened window
        out.push(RawRecord {
            date: date("2023-01-02"),
            title: format!("Alpha{t} elected"),
            url: format!("https://news.example/old/{t}"),
            tone: None,
        });
    }
    out.push(RawRecord {
        date: date("2024-08-01"),
        title: "Weather stays mild".into(),
        url: "https://news.example/weather".into(),
        tone: None,
    });
    out
}

pub struct Files {
    pub dataset: PathBuf,
    pub script: PathBuf,
    pub fixtures: PathBuf,
}

pub fn write_world(dir: &Path, n: usize) -> Files {
    let files = Files {
        dataset: dir.join("emotion_test.jsonl"),
        script: dir.join("mock_script.json"),
        fixtures: dir.join("gdelt_fixtures.jsonl"),
    };
    save_dataset(&dataset(n), &files.dataset).unwrap();
    std::fs::write(&files.script, serde_json::to_string_pretty(&script(n)).unwrap()).unwrap();
    write_fixture_file(&files.fixtures, &fixtures(n)).unwrap();
    files
}

/// TOML config for `update`, paths relative to the config's directory.
pub fn config_toml(parallelism: usize, output_dir: &str) -> String {
    format!(
        r#"task = "emotion"
input = "emotion_test.jsonl"
output_dir = "{output_dir}"
seed = 17

[backend]
kind = "mock"
script = "mock_script.json"

[gdelt]
kind = "fixture"
fixtures = "gdelt_fixtures.jsonl"
t_start = "{T_START}"
t_end = "{T_END}"

[pipeline]
max_rounds = 3
parallelism = {parallelism}
"#
    )
}
