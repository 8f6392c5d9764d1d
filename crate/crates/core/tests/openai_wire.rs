//! Wire-format tests for the completions client against a scripted local
//! HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use promptorder_core::backend::{self, Backend, BackendError, GenParams, OpenAiBackend, OpenAiConfig};
use serde_json::{json, Value};

struct Recorded {
    body: Value,
    authorization: Option<String>,
    path: String,
}

/// Serve `replies` (status, body) in order, one per connection.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Recorded>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, reply) in replies {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let path = request_line.split_whitespace().nth(1).unwrap_or_default().to_string();
            let mut length = 0;
            let mut authorization = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => length = value.trim().parse().unwrap(),
                    "authorization" => authorization = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push(Recorded { body: serde_json::from_slice(&body).unwrap(), authorization, path });
            let mut stream = stream;
            let response = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
            stream.write_all(response.as_bytes()).unwrap();
        }
    });
    (format!("http://{addr}/v1"), seen)
}

fn client(base_url: String) -> OpenAiBackend {
    OpenAiBackend::new(OpenAiConfig {
        base_url,
        model: "test-model".into(),
        api_key: Some("sekrit".into()),
        backoff_base_ms: 1,
        timeout_secs: 5,
        ..Default::default()
    })
    .unwrap()
}

fn echo_choice(index: usize, context: &str, cont_tokens: &[(&str, f64)]) -> Value {
    let mut tokens = vec![context.to_string()];
    let mut logprobs = vec![Value::Null];
    let mut offsets = vec![0];
    let mut pos = context.chars().count();
    for (tok, lp) in cont_tokens {
        tokens.push(tok.to_string());
        logprobs.push(json!(lp));
        offsets.push(pos);
        pos += tok.chars().count();
    }
    // The generated token after the echo must be ignored.
    tokens.push("\n".into());
    logprobs.push(json!(-9.0));
    offsets.push(pos);
    json!({"index": index, "text": "", "logprobs": {"tokens": tokens, "token_logprobs": logprobs, "text_offset": offsets}})
}

#[test]
fn scoring_request_and_response() {
    let ctx = "Review: fine\nSentiment:";
    // Choices deliberately out of order.
    let reply = json!({"choices": [
        echo_choice(1, ctx, &[(" pos", -0.5), ("itive", -0.25)]),
        echo_choice(0, ctx, &[(" negative", -2.0)]),
    ]});
    let (url, seen) = serve(vec![(200, reply.to_string())]);
    let b = client(url);
    let conts = vec![" negative".to_string(), " positive".to_string()];
    let scores = b.score_continuations(ctx, &conts).unwrap();
    assert_eq!(scores, vec![-2.0, -0.75]);

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 1);
    let req = &seen[0];
    assert_eq!(req.path, "/v1/completions");
    assert_eq!(req.authorization.as_deref(), Some("Bearer sekrit"));
    assert_eq!(req.body["model"], "test-model");
    assert_eq!(req.body["prompt"], json!([format!("{ctx} negative"), format!("{ctx} positive")]));
    assert_eq!(req.body["echo"], json!(true));
    assert_eq!(req.body["logprobs"], json!(0));
    assert_eq!(req.body["max_tokens"], json!(1));
    assert_eq!(req.body["temperature"], json!(0.0));
}

#[test]
fn label_distribution_over_the_wire() {
    let ctx = "Review: x\nSentiment:";
    let reply = json!({"choices": [
        echo_choice(0, ctx, &[(" negative", -1.0)]),
        echo_choice(1, ctx, &[(" positive", -1.0)]),
    ]});
    let (url, _) = serve(vec![(200, reply.to_string())]);
    let d = backend::label_distribution(&client(url), ctx, &[" negative".into(), " positive".into()]).unwrap();
    assert_eq!(d.normalized, vec![0.5, 0.5]);
}

#[test]
fn generation_request_and_ngram_truncation() {
    let text = "\n\nReview: a b c d a b c d\nSentiment: positive";
    let reply = json!({"choices": [{"index": 0, "text": text}]});
    let (url, seen) = serve(vec![(200, reply.to_string())]);
    let b = client(url);
    let params = GenParams { seed: Some(9), ..Default::default() };
    let out = backend::generate(&b, "Review: z\nSentiment: negative", &params).unwrap();
    // The second "a b c d" repeats a 4-gram and is cut at its last token.
    assert_eq!(out, "\n\nReview: a b c d a b c");

    let seen = seen.lock().unwrap();
    let body = &seen[0].body;
    assert_eq!(body["prompt"], "Review: z\nSentiment: negative");
    assert_eq!(body["temperature"], json!(2.0));
    assert_eq!(body["max_tokens"], json!(128));
    assert_eq!(body["seed"], json!(9));
    assert!(body.get("echo").is_none());
}

#[test]
fn retries_server_errors() {
    let ok = json!({"choices": [{"index": 0, "text": "done"}]}).to_string();
    let (url, seen) = serve(vec![(500, "{}".into()), (503, "busy".into()), (200, ok)]);
    let out = client(url).generate("ctx", &GenParams::default()).unwrap();
    assert_eq!(out, "done");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn gives_up_after_max_attempts() {
    let (url, seen) = serve(vec![(502, "a".into()), (502, "b".into()), (502, "c".into()), (200, "{}".into())]);
    let err = client(url).generate("ctx", &GenParams::default()).unwrap_err();
    assert!(matches!(err, BackendError::Network { attempts: 3, .. }), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(vec![(400, "{\"error\":\"bad\"}".into()), (200, "{}".into())]);
    let err = client(url).generate("ctx", &GenParams::default()).unwrap_err();
    assert!(matches!(err, BackendError::Http { status: 400, .. }), "{err}");
    assert!(!err.is_retryable());
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn connection_refused_is_a_network_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = client(format!("http://127.0.0.1:{port}/v1")).generate("ctx", &GenParams::default()).unwrap_err();
    assert!(matches!(err, BackendError::Network { attempts: 3, .. }), "{err}");
}

#[test]
fn malformed_logprobs_are_protocol_errors() {
    let reply = json!({"choices": [{"index": 0, "text": "", "logprobs": {"tokens": ["a"], "token_logprobs": [], "text_offset": [0]}}]});
    let (url, _) = serve(vec![(200, reply.to_string())]);
    let err = client(url).score_continuations("a", &[" b".into()]).unwrap_err();
    assert!(matches!(err, BackendError::Protocol(_)), "{err}");
}
