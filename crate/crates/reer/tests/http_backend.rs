//! HTTP transport against a local scripted server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::sync::Arc;

use reer::backends::{
    complete_with_logprobs, generate_text, ApiFlavor, CompletionRequest, HttpBackend,
    RemoteConfig, Retrying, RetryPolicy, TextCompletion,
};
use reer::error::BackendError;

/// One canned HTTP exchange: status line + JSON body.
struct Canned {
    status: &'static str,
    body: String,
}

/// Serves the given responses in order on a fresh port, capturing each
/// request body. Closes connections after every response.
fn serve(responses: Vec<Canned>) -> (String, mpsc::Receiver<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind localhost");
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for canned in responses {
            let (stream, _) = match listener.accept() {
                Ok(pair) => pair,
                Err(_) => return,
            };
            let mut reader = BufReader::new(stream);
            let mut content_length = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).is_err() || line == "\r\n" || line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(rest) = lower.strip_prefix("content-length:") {
                    content_length = rest.trim().parse().unwrap_or(0);
                }
            }
            let mut body = vec![0u8; content_length];
            reader.read_exact(&mut body).ok();
            let _ = tx.send(String::from_utf8_lossy(&body).into_owned());
            let mut stream = reader.into_inner();
            let response = format!(
                "HTTP/1.1 {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                canned.status,
                canned.body.len(),
                canned.body
            );
            let _ = stream.write_all(response.as_bytes());
        }
    });
    (format!("http://{addr}"), rx)
}

fn config(endpoint: &str, flavor: ApiFlavor) -> RemoteConfig {
    RemoteConfig {
        endpoint: endpoint.to_string(),
        model: "test-model".into(),
        api_flavor: flavor,
        api_key_env: None,
        timeout_ms: 5_000,
        retry: RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 1,
            max_delay_ms: 2,
        },
        max_in_flight: 2,
        cache_dir: None,
    }
}

fn echo_body(prompt: &str) -> String {
    // one token per character, logprob -0.5 each
    let tokens: Vec<String> = prompt.chars().map(|c| format!("\"{c}\"")).collect();
    let logprobs: Vec<&str> = prompt.chars().map(|_| "-0.5").collect();
    let offsets: Vec<String> = (0..prompt.chars().count()).map(|i| i.to_string()).collect();
    format!(
        r#"{{"choices":[{{"text":"{prompt}","logprobs":{{"tokens":[{}],"token_logprobs":[{}],"text_offset":[{}]}}}}],"usage":{{"prompt_tokens":{},"completion_tokens":0}}}}"#,
        tokens.join(","),
        logprobs.join(","),
        offsets.join(","),
        prompt.len()
    )
}

#[test]
fn completion_endpoint_echoes_logprobs() {
    let (endpoint, requests) = serve(vec![Canned {
        status: "200 OK",
        body: echo_body("abc"),
    }]);
    let backend = HttpBackend::new(&config(&endpoint, ApiFlavor::Completion)).unwrap();
    let req = CompletionRequest::scoring("test-model", "abc");
    let reply = complete_with_logprobs(&backend, &req).unwrap();
    let tokens = reply.echoed_token_logprobs.unwrap();
    assert_eq!(tokens.len(), 3);
    assert_eq!(tokens[2].char_offset, 2);
    assert_eq!(tokens[2].logprob, -0.5);
    assert_eq!(reply.usage.prompt_tokens, 3);

    let sent = requests.recv().unwrap();
    let body: serde_json::Value = serde_json::from_str(&sent).unwrap();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["prompt"], "abc");
    assert_eq!(body["echo"], true);
    assert_eq!(body["logprobs"], 0);
    assert_eq!(body["max_tokens"], 0);
}

#[test]
fn chat_endpoint_serves_generation() {
    let (endpoint, requests) = serve(vec![Canned {
        status: "200 OK",
        body: r#"{"choices":[{"message":{"role":"assistant","content":"generated text"}}],"usage":{"prompt_tokens":5,"completion_tokens":2}}"#.into(),
    }]);
    let backend = HttpBackend::new(&config(&endpoint, ApiFlavor::Chat)).unwrap();
    let req = CompletionRequest::generation("test-model", "write something", 64)
        .with_sampling("temperature", serde_json::json!(0.8));
    let reply = generate_text(&backend, &req).unwrap();
    assert_eq!(reply.text.as_deref(), Some("generated text"));

    let sent = requests.recv().unwrap();
    let body: serde_json::Value = serde_json::from_str(&sent).unwrap();
    assert_eq!(body["messages"][0]["content"], "write something");
    assert_eq!(body["temperature"], 0.8);
}

#[test]
fn transient_failure_retries_and_reports_attempts() {
    let (endpoint, _requests) = serve(vec![
        Canned {
            status: "500 Internal Server Error",
            body: r#"{"error":"boom"}"#.into(),
        },
        Canned {
            status: "200 OK",
            body: echo_body("xy"),
        },
    ]);
    let cfg = config(&endpoint, ApiFlavor::Completion);
    let backend = Retrying::new(HttpBackend::new(&cfg).unwrap(), cfg.retry);
    let req = CompletionRequest::scoring("test-model", "xy");
    let reply = backend.complete(&req).unwrap();
    assert_eq!(reply.attempts, 2);
}

#[test]
fn missing_logprobs_from_server_is_a_protocol_error() {
    let (endpoint, _requests) = serve(vec![Canned {
        status: "200 OK",
        body: r#"{"choices":[{"text":"abc"}]}"#.into(),
    }]);
    let backend = HttpBackend::new(&config(&endpoint, ApiFlavor::Completion)).unwrap();
    let req = CompletionRequest::scoring("test-model", "abc");
    let err = complete_with_logprobs(&backend, &req).unwrap_err();
    assert!(matches!(err, BackendError::Protocol(_)));
}

#[test]
fn truncated_echo_is_rejected() {
    let (endpoint, _requests) = serve(vec![Canned {
        status: "200 OK",
        body: echo_body("ab"),
    }]);
    let backend = HttpBackend::new(&config(&endpoint, ApiFlavor::Completion)).unwrap();
    let req = CompletionRequest::scoring("test-model", "abc");
    let err = complete_with_logprobs(&backend, &req).unwrap_err();
    assert!(matches!(err, BackendError::Truncation));
}

#[test]
fn full_stack_composes_with_cache() {
    let dir = tempfile::tempdir().unwrap();
    let (endpoint, _requests) = serve(vec![Canned {
        status: "200 OK",
        body: echo_body("zz"),
    }]);
    let mut cfg = config(&endpoint, ApiFlavor::Completion);
    cfg.cache_dir = Some(dir.path().join("cache"));
    let backend: Arc<dyn TextCompletion> = HttpBackend::build_stack(&cfg).unwrap();
    let req = CompletionRequest::scoring("test-model", "zz");
    let first = backend.complete(&req).unwrap();
    // server only serves one response; the second call must be a cache hit
    let second = backend.complete(&req).unwrap();
    assert_eq!(first, second);
}
