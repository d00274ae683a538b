//! Network clients against a throwaway local HTTP server.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use decitool::backends::{
    ApiExecutor, BackendError, Binding, ExecError, HttpChatBackend, HttpChatConfig, Message, ModelBackend,
    RegistryExecutor,
};
use decitool::embedding::{EmbedError, EmbeddingProvider, RemoteEmbedder};
use decitool::http::RetryPolicy;
use decitool::runtime::CallCommand;

#[derive(Debug, Clone)]
struct Recorded {
    request_line: String,
    headers: BTreeMap<String, String>,
    body: String,
}

struct Server {
    url: String,
    seen: Arc<Mutex<Vec<Recorded>>>,
    handle: JoinHandle<()>,
}

impl Server {
    /// Serves one canned `(status, body)` per connection, in order.
    fn start(responses: Vec<(u16, &str)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&seen);
        let responses: Vec<(u16, String)> = responses.into_iter().map(|(s, b)| (s, b.to_string())).collect();
        let handle = std::thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
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
                let len: usize = headers.get("content-length").and_then(|v| v.parse().ok()).unwrap_or(0);
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                log.lock().unwrap().push(Recorded {
                    request_line: request_line.trim_end().to_string(),
                    headers,
                    body: String::from_utf8(buf).unwrap(),
                });
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        Self { url, seen, handle }
    }

    fn finish(self) -> Vec<Recorded> {
        self.handle.join().unwrap();
        Arc::try_unwrap(self.seen).unwrap().into_inner().unwrap()
    }
}

fn quick_retry() -> RetryPolicy {
    RetryPolicy {
        max_retries: 2,
        base_delay: Duration::from_millis(1),
        max_delay: Duration::from_millis(5),
    }
}

#[test]
fn remote_embedder_posts_batch_and_sends_key() {
    let server = Server::start(vec![(200, r#"{"embeddings": [[1.0, 0.0, 0.0], [0.0, 0.5, 0.5]]}"#)]);
    let emb = RemoteEmbedder::new(format!("{}/embed", server.url), 3, Duration::from_secs(5))
        .with_api_key(Some("secret".into()));
    let out = emb.embed_batch(&["weather", "stocks"]).unwrap();
    assert_eq!(out[1].values(), &[0.0, 0.5, 0.5]);
    let seen = server.finish();
    assert_eq!(seen[0].request_line, "POST /embed HTTP/1.1");
    assert_eq!(seen[0].headers["authorization"], "Bearer secret");
    let body: serde_json::Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(body, serde_json::json!({"input": ["weather", "stocks"]}));
}

#[test]
fn remote_embedder_retries_server_errors() {
    let server = Server::start(vec![(503, "busy"), (200, r#"{"embeddings": [[3.0, 4.0]]}"#)]);
    let emb = RemoteEmbedder::new(server.url.clone(), 2, Duration::from_secs(5)).with_retry(quick_retry());
    let out = emb.embed_batch(&["x"]).unwrap();
    assert_eq!(out[0].values(), &[3.0, 4.0]);
    assert_eq!((emb.stats().requests(), emb.stats().retries()), (2, 1));
    server.finish();
}

#[test]
fn remote_embedder_rejects_wrong_shapes() {
    let server = Server::start(vec![(200, r#"{"embeddings": [[1.0, 2.0]]}"#), (200, r#"{"embeddings": [[1.0]]}"#)]);
    let emb = RemoteEmbedder::new(server.url.clone(), 2, Duration::from_secs(5)).with_retry(RetryPolicy::none());
    assert!(matches!(emb.embed_batch(&["a", "b"]), Err(EmbedError::BadResponse(_))));
    assert!(matches!(emb.embed_batch(&["a"]), Err(EmbedError::DimMismatch(1, 2))));
    server.finish();
}

#[test]
fn chat_backend_round_trip() {
    let server = Server::start(vec![(200, r#"{"choices": [{"message": {"role": "assistant", "content": "[SEARCH]"}}]}"#)]);
    let mut cfg = HttpChatConfig::new(format!("{}/v1/chat/completions", server.url), "tiny-model");
    cfg.api_key = None;
    let backend = HttpChatBackend::new(cfg);
    let reply = backend
        .complete(&[Message::system("decide"), Message::user("weather in Oslo?")])
        .unwrap();
    assert_eq!(reply, "[SEARCH]");
    let seen = server.finish();
    assert!(!seen[0].headers.contains_key("authorization"));
    let body: serde_json::Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(body["model"], "tiny-model");
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["content"], "weather in Oslo?");
}

#[test]
fn chat_backend_folds_system_prompt_when_unsupported() {
    let server = Server::start(vec![(200, r#"{"choices": [{"message": {"content": "ok"}}]}"#)]);
    let mut cfg = HttpChatConfig::new(server.url.clone(), "m");
    cfg.supports_system_prompt = false;
    HttpChatBackend::new(cfg)
        .complete(&[Message::system("rules"), Message::user("hi")])
        .unwrap();
    let body: serde_json::Value = serde_json::from_str(&server.finish()[0].body).unwrap();
    let messages = body["messages"].as_array().unwrap();
    assert_eq!(messages.len(), 1);
    assert_eq!(messages[0]["content"], "rules\n\nhi");
}

#[test]
fn chat_backend_error_statuses() {
    let server = Server::start(vec![(400, "bad request"), (200, r#"{"choices": []}"#)]);
    let mut cfg = HttpChatConfig::new(server.url.clone(), "m");
    cfg.retry = RetryPolicy::none();
    let backend = HttpChatBackend::new(cfg);
    let msgs = [Message::user("hi")];
    assert!(matches!(backend.complete(&msgs), Err(BackendError::HttpError { status: Some(400), .. })));
    assert!(matches!(backend.complete(&msgs), Err(BackendError::BadResponse(_))));
    server.finish();
}

#[test]
fn executor_http_get_fills_and_encodes_template() {
    let server = Server::start(vec![(200, r#"{"temp_c": 18}"#)]);
    let mut binding = Binding::http_get(format!("{}/weather?city={{city}}&days={{days}}", server.url));
    binding.headers.insert("X-Token".into(), "fixed".into());
    let exec = RegistryExecutor::new(BTreeMap::from([("get_weather".to_string(), binding)]));
    let call = CallCommand::new("get_weather").arg("city", "São Paulo").arg("days", 3.0);
    let resp = exec.execute(&call).unwrap();
    assert_eq!((resp.status, resp.body.as_str(), resp.truncated), (200, r#"{"temp_c": 18}"#, false));
    let seen = server.finish();
    assert_eq!(seen[0].request_line, "GET /weather?city=S%C3%A3o%20Paulo&days=3 HTTP/1.1");
    assert_eq!(seen[0].headers["x-token"], "fixed");
    assert_eq!(exec.executed(), 1);
}

#[test]
fn executor_http_json_posts_arguments() {
    let server = Server::start(vec![(200, "{}"), (200, "{}")]);
    let plain = Binding::http_json(format!("{}/quote", server.url));
    let mut templated = Binding::http_json(format!("{}/convert", server.url));
    templated.body_template = Some(r#"{"from": {src}, "amount": {amount}}"#.into());
    let exec = RegistryExecutor::new(BTreeMap::from([("quote".to_string(), plain), ("convert".to_string(), templated)]));
    exec.execute(&CallCommand::new("quote").arg("ticker", "ACME").arg("live", true)).unwrap();
    exec.execute(&CallCommand::new("convert").arg("src", "EUR").arg("amount", 12.5)).unwrap();
    let seen = server.finish();
    assert_eq!(seen[0].request_line, "POST /quote HTTP/1.1");
    assert_eq!(seen[0].headers["content-type"], "application/json");
    let first: serde_json::Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(first, serde_json::json!({"ticker": "ACME", "live": true}));
    let second: serde_json::Value = serde_json::from_str(&seen[1].body).unwrap();
    assert_eq!(second, serde_json::json!({"from": "EUR", "amount": 12.5}));
}

#[test]
fn executor_truncates_and_reports_upstream_errors() {
    let big = "é".repeat(50);
    let server = Server::start(vec![(200, big.as_str()), (404, "no such city")]);
    let binding = Binding::http_get(format!("{}/x", server.url));
    let exec = RegistryExecutor::new(BTreeMap::from([("x".to_string(), binding)]))
        .with_max_body(11)
        .with_retry(RetryPolicy::none());
    let resp = exec.execute(&CallCommand::new("x")).unwrap();
    // 11 bytes would split a two-byte character
    assert_eq!((resp.body.as_str(), resp.truncated), ("ééééé", true));
    match exec.execute(&CallCommand::new("x")) {
        Err(ExecError::UpstreamError { status, body }) => {
            assert_eq!(status, Some(404));
            assert!(body.contains("no such city"));
        }
        other => panic!("expected upstream error, got {other:?}"),
    }
    server.finish();
}
