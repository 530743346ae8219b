//! HTTP clients against an in-process stand-in for the sidecar.

mod common;

use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use base64::Engine;
use serde_json::{json, Value};
use tiny_http::{Header, Method, Response, Server};

use common::{config, fixture, small};
use csegg::protocols::ScenarioKind;
use csegg::ras::{
    health, EmbeddingProvider, HttpEmbedder, HttpGenerator, ImageGenerator, MockEmbedder, MockGenerator,
    ProviderError, RetryPolicy,
};
use csegg::runner::{run_scenario, RunContext, RunOptions};

#[derive(Clone, Default)]
struct Behavior {
    /// Answer this many requests with 503 before serving.
    cold: usize,
    dim: usize,
    max_prompt: Option<usize>,
    /// Write images here and return their names instead of base64.
    shared: Option<PathBuf>,
}

struct Sidecar {
    url: String,
    hits: Arc<AtomicUsize>,
}

fn reply(status: u16, body: Value) -> Response<std::io::Cursor<Vec<u8>>> {
    Response::from_string(body.to_string())
        .with_status_code(status)
        .with_header(Header::from_bytes("Content-Type", "application/json").unwrap())
}

fn serve(b: Behavior) -> Sidecar {
    let server = Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://127.0.0.1:{}", server.server_addr().to_ip().unwrap().port());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    thread::spawn(move || {
        let embedder = MockEmbedder::default();
        let generator = MockGenerator::new();
        for mut req in server.incoming_requests() {
            let n = counter.fetch_add(1, Ordering::SeqCst);
            let mut text = String::new();
            std::io::Read::read_to_string(req.as_reader(), &mut text).unwrap();
            let body: Value = serde_json::from_str(&text).unwrap_or(Value::Null);
            let resp = if n < b.cold {
                reply(503, json!({"code": "Loading", "message": "models loading"}))
            } else {
                match (req.method(), req.url()) {
                    (Method::Get, "/health") => reply(200, json!({"mode": "mock", "models": {}, "dim": b.dim})),
                    (Method::Post, "/embed") => {
                        let texts: Vec<String> = serde_json::from_value(body["texts"].clone()).unwrap_or_default();
                        if texts.is_empty() {
                            reply(400, json!({"code": "EmptyInput", "message": "no texts"}))
                        } else {
                            let e = embedder.embed(&texts).unwrap();
                            let e: Vec<Vec<f64>> = e.into_iter().map(|v| v[..b.dim.min(v.len())].to_vec()).collect();
                            reply(200, json!({"embeddings": e, "dim": b.dim}))
                        }
                    }
                    (Method::Post, "/generate") => {
                        let prompt = body["prompt"].as_str().unwrap_or_default().to_string();
                        let count = body["n"].as_u64().unwrap_or(1) as usize;
                        let seed = body["seed"].as_u64();
                        if b.max_prompt.is_some_and(|m| prompt.len() > m) {
                            reply(413, json!({"code": "PromptTooLong", "message": "too long", "max_length": b.max_prompt}))
                        } else {
                            let imgs = generator.generate(&prompt, count, seed).unwrap();
                            let seeds: Vec<u64> = imgs.iter().map(|i| i.seed).collect();
                            let images: Vec<Value> = imgs
                                .iter()
                                .enumerate()
                                .map(|(i, img)| match &b.shared {
                                    Some(dir) => {
                                        let name = format!("g{n}-{i}.ppm");
                                        fs::write(dir.join(&name), &img.bytes).unwrap();
                                        json!({"format": img.format, "path": name})
                                    }
                                    None => json!({
                                        "format": img.format,
                                        "data": base64::engine::general_purpose::STANDARD.encode(&img.bytes),
                                    }),
                                })
                                .collect();
                            reply(200, json!({"images": images, "seeds": seeds}))
                        }
                    }
                    _ => reply(404, json!({"code": "NotFound", "message": "no route"})),
                }
            };
            let _ = req.respond(resp);
        }
    });
    Sidecar { url, hits }
}

fn fast() -> RetryPolicy {
    RetryPolicy { attempts: 3, initial_backoff_ms: 1, timeout_ms: 5_000 }
}

#[test]
fn embed_matches_the_mock_scheme() {
    let s = serve(Behavior { dim: 64, ..Default::default() });
    let h = health(&s.url, fast()).unwrap();
    assert_eq!((h.mode.as_str(), h.dim), ("mock", 64));
    let e = HttpEmbedder::connect(&s.url, fast()).unwrap();
    assert_eq!(e.dim(), 64);
    let texts = vec!["man on horse".to_string(), "house behind horse".to_string()];
    assert_eq!(e.embed(&texts).unwrap(), MockEmbedder::default().embed(&texts).unwrap());
}

#[test]
fn dimension_change_is_reported() {
    let s = serve(Behavior { dim: 32, ..Default::default() });
    let e = HttpEmbedder::with_dim(&s.url, 64, fast());
    assert!(matches!(
        e.embed(&["a b".to_string()]),
        Err(ProviderError::DimensionMismatch { expected: 64, got: 32 })
    ));
}

#[test]
fn generate_returns_n_images_base64_or_by_path() {
    let s = serve(Behavior { dim: 64, ..Default::default() });
    let g = HttpGenerator::new(&s.url, fast(), None);
    let imgs = g.generate("Realistic Image of man on horse", 10, Some(3)).unwrap();
    assert_eq!(imgs.len(), 10);
    assert_eq!(imgs, MockGenerator::new().generate("Realistic Image of man on horse", 10, Some(3)).unwrap());

    let shared = tempfile::tempdir().unwrap();
    let s = serve(Behavior { dim: 64, shared: Some(shared.path().to_path_buf()), ..Default::default() });
    let g = HttpGenerator::new(&s.url, fast(), Some(shared.path()));
    assert_eq!(g.generate("x", 2, Some(0)).unwrap(), MockGenerator::new().generate("x", 2, Some(0)).unwrap());
}

#[test]
fn cold_server_is_retried_with_backoff() {
    let s = serve(Behavior { dim: 64, cold: 2, ..Default::default() });
    let g = HttpGenerator::new(&s.url, fast(), None);
    assert_eq!(g.generate("x", 1, None).unwrap().len(), 1);
    assert_eq!(s.hits.load(Ordering::SeqCst), 3);

    let s = serve(Behavior { dim: 64, cold: 10, ..Default::default() });
    match health(&s.url, fast()) {
        Err(ProviderError::Unavailable { attempts, backoff_ms, .. }) => {
            assert_eq!(attempts, 3);
            assert_eq!(backoff_ms, vec![1, 2]);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn oversized_prompt_is_not_retried() {
    let s = serve(Behavior { dim: 64, max_prompt: Some(10), ..Default::default() });
    let g = HttpGenerator::new(&s.url, fast(), None);
    assert!(matches!(g.generate("a long prompt", 1, None), Err(ProviderError::PromptTooLong { limit: Some(10) })));
    assert_eq!(s.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn ras_run_over_http_matches_in_process_mocks() {
    let s = serve(Behavior { dim: 64, ..Default::default() });
    let tmp = tempfile::tempdir().unwrap();
    let f = fixture(tmp.path(), &small(300), ScenarioKind::S1, 3);
    let mut cfg = config(&f, "ras", "decay_oracle:0.5");
    cfg.ras.gamma = 2;
    let local = tmp.path().join("local");
    let ctx = RunContext::prepare(&cfg, 0, &local).unwrap();
    run_scenario(&cfg, &ctx, 0, &local, RunOptions::default()).unwrap();

    cfg.sidecar_url = Some(s.url.clone());
    cfg.retry = fast();
    let remote = tmp.path().join("remote");
    let ctx = RunContext::prepare(&cfg, 0, &remote).unwrap();
    run_scenario(&cfg, &ctx, 0, &remote, RunOptions::default()).unwrap();
    assert!(s.hits.load(Ordering::SeqCst) > 2);
    assert_eq!(fs::read(local.join("record.json")).unwrap(), fs::read(remote.join("record.json")).unwrap());
    // identical apart from the recorded generator name
    let a = fs::read_to_string(local.join("replay/task2.jsonl")).unwrap();
    let b = fs::read_to_string(remote.join("replay/task2.jsonl")).unwrap();
    assert!(b.contains(&format!("\"generator\":\"http:{}\"", s.url)));
    assert_eq!(a, b.replace(&format!("http:{}", s.url), "mock"));
}
