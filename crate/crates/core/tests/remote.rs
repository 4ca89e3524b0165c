mod common;

use std::time::{Duration, Instant};

use serde_json::json;

use chop_core::composer::{Embedder, RemoteEmbedder, RemoteEmbedderConfig};
use chop_core::llm_gateway::{
    ChatRequest, Gateway, GatewayError, RecordingBackend, RemoteBackend, RemoteConfig, ScriptedBackend, Transcript,
};

use common::{chat_reply, user_prompt, StubServer};

#[test]
fn remote_retries_server_errors_then_succeeds() {
    let server = StubServer::start(|n, _| match n {
        0 | 1 => (500, "{\"error\":\"busy\"}".into()),
        _ => (200, chat_reply("{\"same\": true}")),
    });
    let gateway = Gateway::new(RemoteBackend::new(RemoteConfig::new(&server.url, "stub-model")).unwrap());
    let started = Instant::now();
    let resp = gateway.complete(&ChatRequest::new("judge this")).unwrap();
    assert_eq!(resp.text, "{\"same\": true}");
    assert_eq!(resp.attempts, 3);
    assert_eq!(server.hits(), 3);
    // 500 ms then 1000 ms of backoff
    assert!(started.elapsed() >= Duration::from_millis(1500));

    let body = &server.bodies()[2];
    assert_eq!(body["model"], "stub-model");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["max_tokens"], 512);
    assert_eq!(user_prompt(body), "judge this");
}

#[test]
fn client_errors_are_not_retried() {
    let server = StubServer::start(|_, _| (400, "{\"error\":\"bad request\"}".into()));
    let gateway = Gateway::new(RemoteBackend::new(RemoteConfig::new(&server.url, "m")).unwrap());
    let err = gateway.complete(&ChatRequest::new("x")).unwrap_err();
    assert!(matches!(err, GatewayError::Http { status: 400, .. }));
    assert_eq!(server.hits(), 1);
}

#[test]
fn retries_give_up_after_three_attempts() {
    let server = StubServer::start(|_, _| (503, String::new()));
    let mut config = RemoteConfig::new(&server.url, "m");
    config.retry.initial_backoff = Duration::from_millis(5);
    let gateway = Gateway::new(RemoteBackend::new(config).unwrap());
    assert!(matches!(
        gateway.complete(&ChatRequest::new("x")),
        Err(GatewayError::Http { status: 503, .. })
    ));
    assert_eq!(server.hits(), 3);
}

#[test]
fn recorded_transcript_replays_identically() {
    let server = StubServer::start(|_, body| (200, chat_reply(&format!("echo: {}", user_prompt(body)))));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    let remote = RemoteBackend::new(RemoteConfig::new(&server.url, "m")).unwrap();
    let recording = Gateway::new(RecordingBackend::new(remote, &path).unwrap());
    let prompts = ["first prompt", "second\r\nprompt", "third"];
    let live: Vec<String> = prompts
        .iter()
        .map(|p| recording.complete(&ChatRequest::new(*p)).unwrap().text)
        .collect();

    let replay = Gateway::new(ScriptedBackend::from_file(&path).unwrap());
    let hits_before = server.hits();
    for (p, expected) in prompts.iter().zip(&live) {
        assert_eq!(&replay.complete(&ChatRequest::new(*p)).unwrap().text, expected);
    }
    // line-ending variants share a digest
    assert_eq!(replay.complete(&ChatRequest::new("second\nprompt")).unwrap().text, live[1]);
    assert_eq!(server.hits(), hits_before);
    assert!(matches!(
        replay.complete(&ChatRequest::new("never recorded")),
        Err(GatewayError::MissingEntry { .. })
    ));
    assert_eq!(Transcript::load(&path).unwrap().len(), 3);
}

#[test]
fn remote_embedder_batches_and_reorders() {
    const DIM: usize = 8;
    let server = StubServer::start(|_, body| {
        let inputs = body["input"].as_array().cloned().unwrap_or_default();
        let mut data: Vec<_> = inputs
            .iter()
            .enumerate()
            .map(|(i, text)| {
                let len = text.as_str().unwrap_or_default().len() as f64;
                let mut v = vec![0.0; DIM];
                v[0] = len;
                v[1 + i % (DIM - 1)] = 1.0;
                json!({"index": i, "embedding": v})
            })
            .collect();
        data.reverse();
        (200, json!({ "data": data }).to_string())
    });
    let embedder = RemoteEmbedder::new(RemoteEmbedderConfig::new(&server.url, "emb", DIM)).unwrap();
    let texts: Vec<String> = (0..130).map(|i| "x".repeat(i + 1)).collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let vectors = embedder.embed_batch(&refs).unwrap();

    assert_eq!(vectors.len(), 130);
    let sizes: Vec<usize> = server.bodies().iter().map(|b| b["input"].as_array().unwrap().len()).collect();
    assert_eq!(sizes, [64, 64, 2]);
    assert!(server.bodies().iter().all(|b| b["model"] == "emb"));
    for (i, v) in vectors.iter().enumerate() {
        assert!((v.norm() - 1.0).abs() < 1e-12);
        // first component tracks the input length, so order is preserved
        let len = (i + 1) as f64;
        let expected = len / (len * len + 1.0).sqrt();
        assert!((v.values()[0] - expected).abs() < 1e-12, "vector {i} out of order");
    }
}

#[test]
fn remote_embedder_rejects_wrong_dimension() {
    let server = StubServer::start(|_, _| (200, json!({"data": [{"index": 0, "embedding": [1.0, 0.0]}]}).to_string()));
    let embedder = RemoteEmbedder::new(RemoteEmbedderConfig::new(&server.url, "emb", 3)).unwrap();
    assert!(embedder.embed("text").is_err());
}
