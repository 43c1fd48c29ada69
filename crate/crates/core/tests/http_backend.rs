use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use diagsynth_core::llm::{ChatMessage, HttpBackend, HttpConfig, LlmBackend, LlmError, LlmRequest, OpTag};

/// Serves the canned (status, body) replies in order, one per connection,
/// and records each request body.
fn stub(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, body) in replies {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        length = v.trim().parse().unwrap();
                    }
                }
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(String::from_utf8(buf).unwrap());
            let mut stream = stream;
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
        }
    });
    (format!("http://{addr}/v1"), seen)
}

fn backend(endpoint: String) -> HttpBackend {
    let mut cfg = HttpConfig::new(endpoint, "test-model");
    cfg.backoff_ms = 1;
    cfg.max_retries = 3;
    cfg.timeout_secs = 5;
    HttpBackend::new(cfg).unwrap()
}

fn request() -> LlmRequest {
    LlmRequest {
        op_tag: OpTag::DocGen,
        system_prompt: "You are a psychiatrist.".into(),
        messages: vec![ChatMessage::user("Open the interview.")],
        temperature: 0.8,
        max_tokens: 64,
    }
}

fn ok_body(text: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": 3, "completion_tokens": 2, "total_tokens": 5}
    })
    .to_string()
}

#[test]
fn completes_against_stub() {
    let (url, seen) = stub(vec![(200, ok_body("How are you feeling?"))]);
    let resp = backend(url).complete(&request()).unwrap();
    assert_eq!(resp.text, "How are you feeling?");
    assert_eq!(resp.usage.total_tokens, 5);
    let body: serde_json::Value = serde_json::from_str(&seen.lock().unwrap()[0]).unwrap();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["content"], "Open the interview.");
}

#[test]
fn retries_server_errors() {
    let (url, seen) = stub(vec![
        (500, "{}".into()),
        (503, "{}".into()),
        (200, ok_body("recovered")),
    ]);
    assert_eq!(backend(url).complete(&request()).unwrap().text, "recovered");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = stub(vec![(400, r#"{"error":"bad"}"#.into()), (200, ok_body("never"))]);
    let err = backend(url).complete(&request()).unwrap_err();
    assert!(matches!(err, LlmError::Status { status: 400, .. }), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn gives_up_after_bounded_retries() {
    let (url, seen) = stub(vec![(500, "{}".into()); 4]);
    let err = backend(url).complete(&request()).unwrap_err();
    assert!(matches!(err, LlmError::Transport { attempts: 4, .. }), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 4);
}

#[test]
fn rate_limits_are_retried() {
    let (url, _) = stub(vec![(429, "{}".into()), (200, ok_body("ok"))]);
    assert_eq!(backend(url).complete(&request()).unwrap().text, "ok");
}
