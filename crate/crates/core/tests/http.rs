//! HTTP clients against a scripted local server.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use augpe::embed::{Embedder, HttpEmbedder};
use augpe::genapi::{chat_complete, OpenAiCompatible};
use augpe::retry::RetryPolicy;
use augpe::rng::StreamKey;
use augpe::Error;

#[derive(Debug, Clone)]
struct Seen {
    request_line: String,
    headers: BTreeMap<String, String>,
    body: String,
}

/// Serves the scripted `(status, body)` replies in order, one per
/// connection, and records what it received.
fn serve(script: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, body) in script {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut headers = BTreeMap::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    headers.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
                }
            }
            let len: usize = headers.get("content-length").map_or(0, |v| v.parse().unwrap());
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen {
                request_line: request_line.trim_end().to_string(),
                headers,
                body: String::from_utf8(buf).unwrap(),
            });
            let mut stream = stream;
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (addr, seen)
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        attempts: 5,
        base_delay_ms: 1,
        multiplier: 2.0,
    }
}

fn chat_client(endpoint: &str, key: Option<&str>) -> OpenAiCompatible {
    let mut headers = BTreeMap::new();
    headers.insert("x-team".to_string(), "synth".to_string());
    OpenAiCompatible::new(
        endpoint,
        "gpt-3.5-turbo",
        Duration::from_secs(5),
        fast_retry(),
        key.map(str::to_string),
        headers,
    )
    .unwrap()
}

fn reply(text: &str) -> String {
    serde_json::json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": text}}]}).to_string()
}

fn key() -> StreamKey {
    StreamKey::new(1, "all", 0, "variation_llm")
}

#[test]
fn sends_documented_request_and_reads_first_choice() {
    let (addr, seen) = serve(vec![(200, reply("a fresh review"))]);
    let client = chat_client(&format!("{addr}/v1/"), Some("sk-test"));
    let out = chat_complete(&client, "Please rephrase: good food", 1.2, 36, &key()).unwrap();
    assert_eq!(out, "a fresh review");

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].request_line, "POST /v1/chat/completions HTTP/1.1");
    assert_eq!(seen[0].headers["authorization"], "Bearer sk-test");
    assert_eq!(seen[0].headers["x-team"], "synth");
    assert!(seen[0].headers["content-type"].starts_with("application/json"));
    assert_eq!(
        seen[0].body,
        r#"{"model":"gpt-3.5-turbo","messages":[{"role":"user","content":"Please rephrase: good food"}],"temperature":1.2,"max_tokens":36,"n":1}"#
    );
}

#[test]
fn no_key_means_no_authorization_header() {
    let (addr, seen) = serve(vec![(200, reply("ok"))]);
    chat_complete(&chat_client(&addr, None), "hi", 1.0, 8, &key()).unwrap();
    assert!(!seen.lock().unwrap()[0].headers.contains_key("authorization"));
}

#[test]
fn retries_rate_limits_and_server_errors() {
    let (addr, seen) = serve(vec![
        (429, "{}".into()),
        (503, "{}".into()),
        (500, "{}".into()),
        (200, reply("finally")),
    ]);
    let out = chat_complete(&chat_client(&addr, None), "hi", 1.0, 8, &key()).unwrap();
    assert_eq!(out, "finally");
    assert_eq!(seen.lock().unwrap().len(), 4);
}

#[test]
fn gives_up_after_five_attempts() {
    let (addr, seen) = serve(vec![(503, "{}".into()); 6]);
    let err = chat_complete(&chat_client(&addr, None), "hi", 1.0, 8, &key()).unwrap_err();
    assert!(matches!(err, Error::Backend(_)), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 5);
}

#[test]
fn client_errors_are_not_retried() {
    let (addr, seen) = serve(vec![(400, r#"{"error":"bad"}"#.into()), (200, reply("unused"))]);
    let err = chat_complete(&chat_client(&addr, None), "hi", 1.0, 8, &key()).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn malformed_replies_are_protocol_errors() {
    let (addr, _) = serve(vec![(200, r#"{"choices":[]}"#.into())]);
    let err = chat_complete(&chat_client(&addr, None), "hi", 1.0, 8, &key()).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err}");

    let (addr, _) = serve(vec![(200, "not json".into())]);
    let err = chat_complete(&chat_client(&addr, None), "hi", 1.0, 8, &key()).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err}");
}

#[test]
fn unreachable_endpoint_is_a_backend_error() {
    // bind then drop: nothing listens on the port afterwards
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let client = OpenAiCompatible::new(
        &format!("http://127.0.0.1:{port}"),
        "m",
        Duration::from_secs(2),
        RetryPolicy {
            attempts: 2,
            base_delay_ms: 1,
            multiplier: 2.0,
        },
        None,
        BTreeMap::new(),
    )
    .unwrap();
    assert!(chat_complete(&client, "hi", 1.0, 8, &key()).unwrap_err().is_backend());
}

fn embedder(endpoint: &str, dimension: usize, batch: usize) -> HttpEmbedder {
    HttpEmbedder::new(
        endpoint.to_string(),
        "text-embedding-small".to_string(),
        dimension,
        true,
        batch,
        Duration::from_secs(5),
        fast_retry(),
        1,
        Some("sk-emb".to_string()),
    )
    .unwrap()
}

#[test]
fn embeddings_are_batched_reordered_and_normalized() {
    // the server answers out of index order
    let first = serde_json::json!({"data": [
        {"index": 1, "embedding": [0.0, 2.0]},
        {"index": 0, "embedding": [3.0, 4.0]}
    ]})
    .to_string();
    let second = serde_json::json!({"data": [{"index": 0, "embedding": [5.0, 0.0]}]}).to_string();
    let (addr, seen) = serve(vec![(200, first), (503, "{}".into()), (200, second)]);
    let e = embedder(&addr, 2, 2);
    let texts = vec!["a".to_string(), "b".to_string(), "c".to_string()];
    let m = e.embed_batch(&texts).unwrap();
    assert_eq!(m.row(0), &[0.6, 0.8]);
    assert_eq!(m.row(1), &[0.0, 1.0]);
    assert_eq!(m.row(2), &[1.0, 0.0]);

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert_eq!(seen[0].request_line, "POST /embeddings HTTP/1.1");
    assert_eq!(seen[0].headers["authorization"], "Bearer sk-emb");
    let body: serde_json::Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(body, serde_json::json!({"model": "text-embedding-small", "input": ["a", "b"]}));
}

#[test]
fn embedding_shape_mismatch_is_rejected() {
    let wrong = serde_json::json!({"data": [{"index": 0, "embedding": [1.0, 0.0, 0.0]}]}).to_string();
    let (addr, _) = serve(vec![(200, wrong)]);
    let err = embedder(&addr, 2, 4).embed_batch(&["a".to_string()]).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err}");
}
