use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use featureloop::llm::{ChatBackend, ChatRequest, HttpBackend, HttpConfig, LlmError, RetryPolicy, TokenBucket};
use serde_json::Value;

type Seen = Arc<Mutex<Vec<(String, Value)>>>;

/// Serves one canned (status, body) per connection and records request
/// bodies and auth headers.
fn stub(responses: Vec<(u16, &'static str)>) -> (String, Seen) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen: Seen = Arc::default();
    let log = Arc::clone(&seen);
    std::thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let (mut length, mut auth) = (0usize, String::new());
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap_or((line, ""));
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => length = value.trim().parse().unwrap(),
                    "authorization" => auth = value.trim().to_string(),
                    _ => {}
                }
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push((auth, serde_json::from_slice(&buf).unwrap()));
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            reader.get_mut().write_all(reply.as_bytes()).unwrap();
        }
    });
    (base, seen)
}

fn backend(base: String) -> HttpBackend {
    HttpBackend::new(HttpConfig {
        api_base: base,
        api_key: "sk-test".into(),
        model: "tiny".into(),
        timeout: Duration::from_secs(5),
        requests_per_second: 100.0,
        retry: RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_millis(5),
            factor: 2.0,
        },
    })
}

fn request() -> ChatRequest {
    ChatRequest {
        system: "sys".into(),
        user: "hello".into(),
        temperature: 0.2,
        max_output_tokens: 64,
        model: String::new(),
    }
}

const OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":"a, b"}}],"usage":{"prompt_tokens":7,"completion_tokens":2}}"#;

#[test]
fn rate_limits_are_retried() {
    let (base, seen) = stub(vec![(429, "{}"), (429, "{}"), (200, OK)]);
    let b = backend(base);
    let reply = b.complete(&request()).unwrap();
    assert_eq!(reply.text, "a, b");
    assert_eq!((reply.input_tokens, reply.output_tokens), (7, 2));
    assert_eq!(b.requests_sent(), 3);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    let (auth, body) = &seen[0];
    assert_eq!(auth, "Bearer sk-test");
    assert_eq!(body["model"], "tiny");
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["content"], "hello");
    assert_eq!(body["temperature"], 0.2);
}

#[test]
fn auth_failure_is_not_retried() {
    let (base, _) = stub(vec![(401, "{}"), (200, OK)]);
    let b = backend(base);
    assert_eq!(b.complete(&request()), Err(LlmError::AuthFailed(401)));
    assert_eq!(b.requests_sent(), 1);
}

#[test]
fn server_errors_exhaust_the_attempt_budget() {
    let (base, _) = stub(vec![(503, "{}"); 5]);
    let b = backend(base);
    assert_eq!(b.complete(&request()), Err(LlmError::Server(503)));
    assert_eq!(b.requests_sent(), 5);
}

#[test]
fn malformed_payload_is_reported() {
    let (base, _) = stub(vec![(200, r#"{"choices":[]}"#)]);
    let b = backend(base);
    assert!(matches!(b.complete(&request()), Err(LlmError::MalformedResponse(_))));
}

#[test]
fn invalid_requests_never_reach_the_network() {
    let b = backend("http://127.0.0.1:9/v1".into());
    let mut r = request();
    r.temperature = 3.0;
    assert!(matches!(b.complete(&r), Err(LlmError::InvalidRequest(_))));
    assert_eq!(b.requests_sent(), 0);
}

#[test]
fn token_bucket_bounds_throughput() {
    let bucket = Arc::new(TokenBucket::new(50.0, 5.0));
    let started = Instant::now();
    std::thread::scope(|s| {
        for _ in 0..4 {
            let b = Arc::clone(&bucket);
            s.spawn(move || (0..10).for_each(|_| b.acquire()));
        }
    });
    // 40 tokens with 5 up front need at least 35 / 50 s.
    assert!(started.elapsed() >= Duration::from_millis(690), "{:?}", started.elapsed());
}
