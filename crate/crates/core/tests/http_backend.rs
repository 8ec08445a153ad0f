use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use slide_agent_core::backends::{
    BackendError, DecodingParams, EmbeddingBackend, EndpointConfig, HttpBackend, TextChatBackend, VisionChatBackend,
};
use slide_agent_core::slide_store::TileImage;

struct Reply {
    status: u16,
    body: String,
    delay: Duration,
}

fn reply(status: u16, body: Value) -> Reply {
    Reply {
        status,
        body: body.to_string(),
        delay: Duration::ZERO,
    }
}

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    authorization: Option<String>,
    body: Value,
}

/// Serves `replies` in order, one per connection, and records requests.
fn stub(replies: Vec<Reply>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for r in replies {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
            let (mut len, mut auth) = (0usize, None);
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                let h = h.trim_end();
                if h.is_empty() {
                    break;
                }
                let (name, value) = h.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => len = value.trim().parse().unwrap(),
                    "authorization" => auth = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push(Seen {
                path,
                authorization: auth,
                body: serde_json::from_slice(&body).unwrap_or(Value::Null),
            });
            thread::sleep(r.delay);
            let mut stream = stream;
            let _ = write!(
                stream,
                "HTTP/1.1 {} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                r.status,
                r.body.len(),
                r.body
            );
        }
    });
    (url, seen)
}

fn chat_body(text: &str) -> Value {
    json!({ "choices": [{ "message": { "role": "assistant", "content": text } }] })
}

fn backend(url: &str) -> HttpBackend {
    let mut cfg = EndpointConfig::new(url, "m1");
    cfg.backoff_ms = 10;
    cfg.api_key = Some("secret".into());
    HttpBackend::new(cfg).unwrap()
}

#[test]
fn echoes_canned_completion_and_sends_openai_shape() {
    let (url, seen) = stub(vec![reply(200, chat_body("canned text"))]);
    let b = backend(&url);
    let out = b.complete("sys", "user", &DecodingParams::default()).unwrap();
    assert_eq!(out, "canned text");
    let req = seen.lock().unwrap()[0].clone();
    assert_eq!(req.path, "/v1/chat/completions");
    assert_eq!(req.authorization.as_deref(), Some("Bearer secret"));
    assert_eq!(req.body["model"], "m1");
    assert_eq!(req.body["temperature"], 0.0);
    assert_eq!(req.body["max_tokens"], 1024);
    assert_eq!(req.body["messages"][0]["content"], "sys");
    assert_eq!(req.body["messages"][1]["content"], "user");
}

#[test]
fn describe_sends_base64_image() {
    let (url, seen) = stub(vec![reply(200, chat_body("glands"))]);
    let img = TileImage {
        bytes: vec![1, 2, 3],
        media_type: "image/png",
    };
    assert_eq!(backend(&url).describe(&img, "s", "u", &DecodingParams::default()).unwrap(), "glands");
    let body = &seen.lock().unwrap()[0].body;
    assert_eq!(body["messages"][1]["content"][1]["image_url"]["url"], "data:image/png;base64,AQID");
}

#[test]
fn embeddings_round_trip() {
    let (url, seen) = stub(vec![reply(200, json!({ "data": [{ "embedding": [0.5, -1.0, 2.0] }] }))]);
    assert_eq!(backend(&url).embed_text("query").unwrap(), vec![0.5, -1.0, 2.0]);
    let req = seen.lock().unwrap()[0].clone();
    assert_eq!(req.path, "/v1/embeddings");
    assert_eq!(req.body["input"], "query");
}

#[test]
fn two_server_errors_then_success_takes_three_attempts() {
    let (url, seen) = stub(vec![
        reply(500, json!({"error": "boom"})),
        reply(503, json!({"error": "busy"})),
        reply(200, chat_body("finally")),
    ]);
    assert_eq!(backend(&url).complete("s", "u", &DecodingParams::default()).unwrap(), "finally");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn unauthorized_is_not_retried() {
    let (url, seen) = stub(vec![reply(401, json!({"error": "no"})), reply(200, chat_body("never"))]);
    let err = backend(&url).complete("s", "u", &DecodingParams::default()).unwrap_err();
    assert!(matches!(err, BackendError::Status { status: 401, .. }), "{err}");
    assert!(!err.is_retryable());
    thread::sleep(Duration::from_millis(50));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn malformed_body_is_a_protocol_error() {
    let (url, _) = stub(vec![reply(200, json!({ "choices": [] }))]);
    let err = backend(&url).complete("s", "u", &DecodingParams::default()).unwrap_err();
    assert!(matches!(err, BackendError::Protocol { .. }), "{err}");
}

#[test]
fn slow_server_times_out() {
    let (url, _) = stub(vec![Reply {
        status: 200,
        body: chat_body("late").to_string(),
        delay: Duration::from_millis(2500),
    }]);
    let mut cfg = EndpointConfig::new(&url, "m1");
    cfg.timeout_secs = 1;
    let start = Instant::now();
    let err = HttpBackend::new(cfg).unwrap().complete("s", "u", &DecodingParams::default()).unwrap_err();
    assert!(matches!(err, BackendError::Timeout { .. }), "{err}");
    assert!(start.elapsed() < Duration::from_millis(2400));
}
