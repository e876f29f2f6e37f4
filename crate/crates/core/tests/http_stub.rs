//! HTTP backend against a local stub server with scripted status codes.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use coreeval::gateway::{
    GatewayError, Generator, HttpBackend, HttpBackendConfig, Limits, RetryPolicy, SamplingParams,
};

struct Seen {
    auth: Option<String>,
    body: String,
}

/// Serves one response per connection from `script`, then stops.
fn stub(script: Vec<(u16, &'static str)>) -> (String, Arc<Mutex<Vec<Seen>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handle = thread::spawn(move || {
        for (status, body) in script {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = Some(line["authorization:".len()..].trim().to_string());
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen {
                auth,
                body: String::from_utf8(buf).unwrap(),
            });
            let mut out = stream;
            write!(
                out,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            out.flush().unwrap();
        }
    });
    (url, seen, handle)
}

fn backend(url: String) -> HttpBackend {
    let config = HttpBackendConfig {
        base_url: url,
        model: "stub-model".into(),
        api_key_env: "UNUSED".into(),
        timeout_secs: 5,
    };
    let retry = RetryPolicy {
        max_attempts: 4,
        base_delay: Duration::from_millis(5),
        jitter: 0.2,
    };
    HttpBackend::with_key(config, "secret".into(), retry, Arc::new(Limits::default()))
}

const OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":"{\"emotion\": \"joy\"}"}}]}"#;

#[test]
fn retries_rate_limits_then_succeeds() {
    let (url, seen, handle) = stub(vec![(429, "{}"), (429, "{}"), (200, OK)]);
    let params = SamplingParams {
        seed: Some(7),
        ..SamplingParams::local()
    };
    let response = backend(url).generate(&params.request("emotion-1", "hello".into())).unwrap();
    handle.join().unwrap();
    assert_eq!(response.text, "{\"emotion\": \"joy\"}");
    assert_eq!(response.backend_id, "http:stub-model");
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer secret"));
    let body: serde_json::Value = serde_json::from_str(&seen[2].body).unwrap();
    assert_eq!(body["model"], "stub-model");
    assert_eq!(body["messages"][0]["content"], "hello");
    assert_eq!(body["seed"], 7);
    assert_eq!(body["do_sample"], false);
}

#[test]
fn unauthorized_is_a_credential_error_without_retry() {
    let (url, seen, handle) = stub(vec![(401, "{}")]);
    let err = backend(url)
        .generate(&SamplingParams::default().request("t", "x".into()))
        .unwrap_err();
    handle.join().unwrap();
    assert!(matches!(err, GatewayError::Credential { status: Some(401), .. }), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn client_errors_fail_fast_and_server_errors_exhaust_attempts() {
    let (url, _, handle) = stub(vec![(400, "{}")]);
    let err = backend(url)
        .generate(&SamplingParams::default().request("t", "x".into()))
        .unwrap_err();
    handle.join().unwrap();
    assert!(matches!(err, GatewayError::Transport { attempts: 1, status: Some(400), .. }), "{err}");

    let (url, seen, handle) = stub(vec![(503, "{}"); 4]);
    let err = backend(url)
        .generate(&SamplingParams::default().request("t", "x".into()))
        .unwrap_err();
    handle.join().unwrap();
    assert!(matches!(err, GatewayError::Transport { attempts: 4, status: Some(503), .. }), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 4);
}

#[test]
fn malformed_success_body_is_a_protocol_error() {
    let (url, _, handle) = stub(vec![(200, r#"{"choices":[]}"#)]);
    let err = backend(url)
        .generate(&SamplingParams::default().request("t", "x".into()))
        .unwrap_err();
    handle.join().unwrap();
    assert!(matches!(err, GatewayError::Protocol(_)));
}
