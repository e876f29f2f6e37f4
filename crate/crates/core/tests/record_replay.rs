//! Capture GDELT responses from a stub server, then replay them offline.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::Arc;
use std::thread;

use chrono::NaiveDate;
use coreeval::commands::capture_fixtures;
use coreeval::gateway::{Limits, RetryPolicy};
use coreeval::knowledge::{query_gdelt, read_fixture_file, EntitySet, FixtureRetriever, GdeltClient, TimeWindow};

const BODY: &str = r#"{"articles": [
  {"url": "https://a.example/1", "title": "Harris rallies in Atlanta", "seendate": "20240801T101500Z", "tone": 1.25},
  {"url": "https://a.example/2", "title": "Harris and Walz tour Georgia", "seendate": "20240805T080000Z"},
  {"url": "https://a.example/3", "title": "Markets close higher", "seendate": "20240806T080000Z"}
]}"#;

/// Answers `count` GET requests with BODY and returns the request lines.
fn gdelt_stub(count: usize) -> (String, thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/api/v2/doc/doc", listener.local_addr().unwrap());
    let handle = thread::spawn(move || {
        let mut lines = Vec::new();
        for _ in 0..count {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut first = String::new();
            reader.read_line(&mut first).unwrap();
            loop {
                let mut l = String::new();
                reader.read_line(&mut l).unwrap();
                if l.trim().is_empty() {
                    break;
                }
            }
            lines.push(first);
            let mut out = stream;
            write!(
                out,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{BODY}",
                BODY.len()
            )
            .unwrap();
        }
        lines
    });
    (url, handle)
}

fn window() -> TimeWindow {
    TimeWindow::new(
        NaiveDate::from_ymd_opt(2024, 7, 23).unwrap(),
        NaiveDate::from_ymd_opt(2024, 8, 31).unwrap(),
    )
    .unwrap()
}

#[test]
fn captured_fixtures_replay_like_the_live_client() {
    let (url, handle) = gdelt_stub(2);
    let entities = vec!["Harris".to_string(), "Tim Walz".to_string()];
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fx/harris.jsonl");
    let n = capture_fixtures(&entities, &window(), 10, Some(&url), &out).unwrap();
    assert_eq!(n, 3);
    let raw = read_fixture_file(&out).unwrap();
    assert_eq!(raw[0].tone, Some(1.25));
    assert_eq!(raw[1].date, NaiveDate::from_ymd_opt(2024, 8, 5).unwrap());

    let set = EntitySet::new("s1", entities.clone(), 8);
    let live = GdeltClient::new(&url, RetryPolicy::default(), Arc::new(Limits::default()));
    let from_live = query_gdelt(&live, &set, &window(), 10).unwrap();
    let replay = FixtureRetriever::load(&dir.path().join("fx")).unwrap();
    let from_fixture = query_gdelt(&replay, &set, &window(), 10).unwrap();
    assert_eq!(from_live, from_fixture);
    assert_eq!(from_fixture.len(), 2);
    assert_eq!(from_fixture[0].source_url, "https://a.example/2");

    let requests = handle.join().unwrap();
    let q = &requests[0];
    assert!(q.starts_with("GET /api/v2/doc/doc?"), "{q}");
    for part in ["mode=ArtList", "format=json", "maxrecords=10", "startdatetime=20240723000000", "enddatetime=20240831235959"] {
        assert!(q.contains(part), "{part} missing from {q}");
    }
}

#[test]
fn fixture_formats_load_from_one_directory() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("a.csv"),
        "date,title,url\n2024-08-01,Harris speaks,https://c.example/1\n",
    )
    .unwrap();
    std::fs::write(
        dir.path().join("b.json"),
        r#"[{"date": "20240802", "title": "Harris again", "url": "https://c.example/2"}]"#,
    )
    .unwrap();
    std::fs::write(
        dir.path().join("c.jsonl"),
        "{\"date\": \"2024-08-03\", \"title\": \"dup\", \"url\": \"https://c.example/1\"}\n",
    )
    .unwrap();
    std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    let replay = FixtureRetriever::load(dir.path()).unwrap();
    let titles: Vec<&str> = replay.records().iter().map(|r| r.title.as_str()).collect();
    assert_eq!(titles, ["Harris speaks", "Harris again"]);
}
