mod common;

use std::sync::mpsc as std_mpsc;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::http::{Method, StatusCode};
use serde_json::{json, Value};

use common::{app_from, mock_app, mock_config, send, send_raw};
use rit_core::generate::RemoteGenerator;
use rit_core::metrics::EVAL_REPORT_COLUMNS;
use rit_core::{EchoGenerator, GenerationConfig, Generator, Pipeline};

async fn add(app: &axum::Router, q: &str, a: &str, p: i64) -> Value {
    let (status, body) = send(app, Method::POST, "/v1/feedback", Some(json!({"query": q, "answer": a, "polarity": p}))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    body
}

#[tokio::test]
async fn query_on_empty_corpus_is_uncertain() {
    let app = mock_app(None);
    let (status, body) = send(&app, Method::POST, "/v1/query", Some(json!({"text": "Should I lie?"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["uncertain"], true);
    assert_eq!(body["contexts"], json!([]));
    assert_eq!(body["outcome"], "uncertain_no_context");
    assert_eq!(body["prompt"], "Question: Should I lie? Answer:");
}

#[tokio::test]
async fn feedback_then_query_returns_exact_context() {
    let app = mock_app(None);
    let first = add(&app, "Should I lie to my boss?", "No, lying is wrong.", -1).await;
    assert_eq!(first["created"], true);
    let again = add(&app, "should  I lie to my BOSS?", "No, never lie.", -1).await;
    assert_eq!(again["created"], false);
    assert_eq!(again["id"], first["id"]);

    let (_, body) = send(&app, Method::POST, "/v1/query", Some(json!({"text": "Should I lie to my boss?"}))).await;
    assert_eq!(body["uncertain"], false);
    assert_eq!(body["answer"], "No, never lie.");
    assert_eq!(body["polarity"], -1);
    let ctx = &body["contexts"][0];
    assert_eq!(ctx["id"], first["id"]);
    assert!((ctx["similarity"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(ctx["rank"], 1);
}

#[tokio::test]
async fn query_validation_errors() {
    let app = mock_app(None);
    let cases = [
        (json!({"text": "q", "t": 1.5}), StatusCode::BAD_REQUEST),
        (json!({"text": "q", "c": 0}), StatusCode::BAD_REQUEST),
        (json!({"text": "q", "template": "haiku"}), StatusCode::BAD_REQUEST),
        (json!({"nope": "q"}), StatusCode::BAD_REQUEST),
        (json!({"text": 3}), StatusCode::BAD_REQUEST),
        (json!({"text": "   "}), StatusCode::UNPROCESSABLE_ENTITY),
    ];
    for (body, expected) in cases {
        let (status, resp) = send(&app, Method::POST, "/v1/query", Some(body.clone())).await;
        assert_eq!(status, expected, "{body} -> {resp}");
        assert!(resp["error"].is_string() && resp["detail"].is_string(), "{resp}");
    }
    let (status, _) = send_raw(&app, Method::POST, "/v1/query", Some("{not json")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn query_overrides_apply_per_request() {
    let app = mock_app(None);
    add(&app, "Should I recycle bottles?", "Yes, it helps.", 1).await;
    let (_, body) = send(
        &app,
        Method::POST,
        "/v1/query",
        Some(json!({"text": "Should I recycle glass bottles?", "t": -1.0, "template": "context_statement"})),
    )
    .await;
    assert_eq!(body["uncertain"], false);
    assert_eq!(body["retrieval"]["template"], "context_statement");
    assert!(body["prompt"].as_str().unwrap().starts_with("Context: Should I recycle bottles? Yes, it helps. "));
}

#[tokio::test]
async fn marker_in_query_is_flagged() {
    let app = mock_app(None);
    let (status, body) = send(&app, Method::POST, "/v1/query", Some(json!({"text": "What is a Context: block?"}))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["warnings"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn feedback_validation_errors() {
    let app = mock_app(None);
    for p in [json!(2), json!(-2), json!("1"), json!(0.5)] {
        let (status, _) = send(&app, Method::POST, "/v1/feedback", Some(json!({"query": "q", "answer": "a", "polarity": p}))).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "polarity {p}");
    }
    let (status, _) = send(&app, Method::POST, "/v1/feedback", Some(json!({"query": "q", "answer": "a"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = send(&app, Method::POST, "/v1/feedback", Some(json!({"query": " ", "answer": "a", "polarity": 0}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn corpus_listing_and_pagination() {
    let app = mock_app(None);
    add(&app, "Should I help my neighbor?", "Yes.", 1).await;
    add(&app, "Should I steal bread?", "No.", -1).await;
    add(&app, "Can I sing loudly?", "It's okay.", 0).await;

    let (status, body) = send(&app, Method::GET, "/v1/corpus?limit=2", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["items"].as_array().unwrap().len(), 2);
    assert_eq!(body["total"], 3);

    let (_, body) = send(&app, Method::GET, "/v1/corpus?offset=2&limit=2", None).await;
    assert_eq!(body["items"].as_array().unwrap().len(), 1);

    let (_, body) = send(&app, Method::GET, "/v1/corpus?search=SHOULD%20I", None).await;
    assert_eq!(body["total"], 2);
    assert!(body["items"][0].get("embedding").is_none());

    for bad in ["/v1/corpus?limit=0", "/v1/corpus?limit=abc", "/v1/corpus?offset=-1", "/v1/corpus?limit=100000"] {
        let (status, body) = send(&app, Method::GET, bad, None).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{bad}");
        assert!(body["error"].is_string());
    }
}

#[tokio::test]
async fn delete_is_idempotent_but_reports_404() {
    let app = mock_app(None);
    let id = add(&app, "Should I help?", "Yes.", 1).await["id"].as_str().unwrap().to_owned();
    let uri = format!("/v1/corpus/{id}");
    let (status, _) = send(&app, Method::DELETE, &uri, None).await;
    assert_eq!(status, StatusCode::OK);
    let (status, body) = send(&app, Method::DELETE, &uri, None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "not_found");
    let (_, body) = send(&app, Method::GET, "/v1/corpus", None).await;
    assert_eq!(body["total"], 0);
}

#[tokio::test]
async fn patch_changes_what_queries_see() {
    let app = mock_app(None);
    let id = add(&app, "Should I eat meat?", "No, it is wrong.", -1).await["id"].as_str().unwrap().to_owned();
    let uri = format!("/v1/corpus/{id}");
    let (status, body) = send(&app, Method::PATCH, &uri, Some(json!({"polarity": 0, "answer": "It's okay."}))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["polarity"], 0);
    let (_, body) = send(&app, Method::POST, "/v1/query", Some(json!({"text": "Should I eat meat?"}))).await;
    assert_eq!(body["contexts"][0]["polarity"], 0);
    assert_eq!(body["polarity"], 0);

    let (status, _) = send(&app, Method::PATCH, "/v1/corpus/e99999999", Some(json!({"polarity": 1}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = send(&app, Method::PATCH, &uri, Some(json!({"polarity": 7}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn evaluate_inline_closed_loop() {
    let app = mock_app(None);
    add(&app, "Should I lie?", "No, it is wrong.", -1).await;
    add(&app, "Should I help?", "Yes, it is good.", 1).await;
    let examples = json!([
        {"query": "Should I lie?", "answer": "No, it is wrong.", "polarity": -1},
        {"query": "Should I help?", "answer": "Yes, it is good.", "polarity": 1},
    ]);
    let (status, body) = send(&app, Method::POST, "/v1/evaluate", Some(json!({"examples": examples}))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let report = body["report"].as_object().unwrap();
    assert_eq!(report["acc"], 1.0);
    assert_eq!(report["feedback"], 2);
    assert_eq!(report["n_contextualized"], 2);
    let keys: Vec<&str> = report.keys().map(String::as_str).collect();
    let mut expected: Vec<&str> = EVAL_REPORT_COLUMNS.to_vec();
    let mut got = keys.clone();
    expected.sort_unstable();
    got.sort_unstable();
    assert_eq!(got, expected);
}

#[tokio::test]
async fn evaluate_errors() {
    let app = mock_app(None);
    let (status, _) = send(&app, Method::POST, "/v1/evaluate", Some(json!({"examples": []}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let rows = json!([
        {"query": "ok", "answer": "Yes.", "polarity": 1},
        {"query": "bad", "answer": "Yes.", "polarity": 5},
    ]);
    let (status, body) = send(&app, Method::POST, "/v1/evaluate", Some(json!({"examples": rows}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["detail"].as_str().unwrap().starts_with("row 1"), "{body}");

    let (status, _) = send(&app, Method::POST, "/v1/evaluate", Some(json!({"dataset_path": "/no/such/file.jsonl"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    std::fs::write(&path, "{\"query\":\"q\",\"answer\":\"a\",\"polarity\":1}\n{oops\n").unwrap();
    let (status, body) = send(&app, Method::POST, "/v1/evaluate", Some(json!({"dataset_path": path}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["detail"].as_str().unwrap().contains("line 2"), "{body}");

    let (status, _) = send(&app, Method::POST, "/v1/evaluate", Some(json!({}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn evaluate_streams_progress_lines() {
    let app = mock_app(None);
    let examples: Vec<Value> = (0..30)
        .map(|i| json!({"query": format!("Should I do thing {i}?"), "answer": "It's okay.", "polarity": 0}))
        .collect();
    let body = json!({"examples": examples}).to_string();
    let (status, bytes) = send_raw(&app, Method::POST, "/v1/evaluate?stream=true", Some(&body)).await;
    assert_eq!(status, StatusCode::OK);
    let lines: Vec<Value> = String::from_utf8(bytes)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let progress: Vec<u64> = lines.iter().filter_map(|l| l["progress"]["done"].as_u64()).collect();
    assert!(!progress.is_empty());
    assert!(progress.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(*progress.last().unwrap(), 30);
    assert_eq!(lines.last().unwrap()["report"]["n_total"], 30);
}

/// Generator that blocks until released, so an evaluation stays in flight.
struct GatedGenerator {
    entered: Mutex<Option<std_mpsc::Sender<()>>>,
    release: Mutex<std_mpsc::Receiver<()>>,
}

impl Generator for GatedGenerator {
    fn generate(&self, prompt: &str, cfg: &GenerationConfig) -> rit_core::Result<String> {
        if let Some(tx) = self.entered.lock().unwrap().take() {
            tx.send(()).unwrap();
            self.release.lock().unwrap().recv().unwrap();
        }
        EchoGenerator::default().generate(prompt, cfg)
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn overlapping_evaluations_conflict() {
    let (entered_tx, entered_rx) = std_mpsc::channel();
    let (release_tx, release_rx) = std_mpsc::channel();
    let cfg = mock_config(None);
    let (embedder, _) = cfg.backends().unwrap();
    let engine = Arc::new(rit_core::RevisionEngine::new(embedder));
    let generator = GatedGenerator {
        entered: Mutex::new(Some(entered_tx)),
        release: Mutex::new(release_rx),
    };
    let app = app_from(&cfg, Pipeline::new(engine, Arc::new(generator)));
    let body = json!({"examples": [{"query": "q", "answer": "Yes.", "polarity": 1}]});

    let first = tokio::spawn({
        let app = app.clone();
        let body = body.clone();
        async move { send(&app, Method::POST, "/v1/evaluate", Some(body)).await }
    });
    tokio::task::spawn_blocking(move || entered_rx.recv_timeout(Duration::from_secs(10)).unwrap())
        .await
        .unwrap();
    let (status, resp) = send(&app, Method::POST, "/v1/evaluate", Some(body.clone())).await;
    assert_eq!(status, StatusCode::CONFLICT, "{resp}");
    // queries are not blocked by a running evaluation
    let (status, _) = send(&app, Method::GET, "/v1/health", None).await;
    assert_eq!(status, StatusCode::OK);

    release_tx.send(()).unwrap();
    let (status, _) = first.await.unwrap();
    assert_eq!(status, StatusCode::OK);
    let (status, _) = send(&app, Method::POST, "/v1/evaluate", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn config_roundtrip_and_validation() {
    let app = mock_app(None);
    let (status, body) = send(&app, Method::GET, "/v1/config", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["retrieval"], json!({"t": 0.875, "c": 1, "template": "qa_pair"}));
    assert_eq!(body["generation"]["top_k_fraction"], 0.1);
    assert_eq!(body["backend"], "mock");

    let (status, body) = send(&app, Method::PATCH, "/v1/config", Some(json!({"t": 0.3, "c": 2}))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["retrieval"]["t"], 0.3);
    assert_eq!(body["retrieval"]["c"], 2);

    for bad in [json!({"t": -1.5}), json!({"c": 0}), json!({"temperature": -1.0}), json!({"bogus": 1})] {
        let (status, _) = send(&app, Method::PATCH, "/v1/config", Some(bad.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{bad}");
    }
    let (_, body) = send(&app, Method::GET, "/v1/config", None).await;
    assert_eq!(body["retrieval"]["t"], 0.3);
}

#[tokio::test]
async fn raised_threshold_turns_a_hit_into_uncertainty() {
    let app = mock_app(None);
    add(&app, "Should I call my mother every day?", "Yes, it is kind.", 1).await;
    let probe = json!({"text": "Should I call my mother today?"});
    send(&app, Method::PATCH, "/v1/config", Some(json!({"t": 0.3}))).await;
    let (_, body) = send(&app, Method::POST, "/v1/query", Some(probe.clone())).await;
    let sim = body["contexts"][0]["similarity"].as_f64().expect("hit at t=0.3");
    assert!(sim < 1.0);
    send(&app, Method::PATCH, "/v1/config", Some(json!({"t": (sim + 1.0) / 2.0}))).await;
    let (_, body) = send(&app, Method::POST, "/v1/query", Some(probe)).await;
    assert_eq!(body["uncertain"], true);
}

#[tokio::test]
async fn health_reports_counts() {
    let app = mock_app(None);
    add(&app, "Should I help?", "Yes.", 1).await;
    let (status, body) = send(&app, Method::GET, "/v1/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
    assert_eq!(body["entries"], 1);
    assert_eq!(body["dim"], 64);
}

#[tokio::test]
async fn unreachable_generator_is_bad_gateway() {
    let cfg = mock_config(None);
    let (embedder, _) = cfg.backends().unwrap();
    let engine = Arc::new(rit_core::RevisionEngine::new(embedder));
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/", listener.local_addr().unwrap());
    drop(listener);
    let app = app_from(&cfg, Pipeline::new(engine, Arc::new(RemoteGenerator::new(url))));
    let (status, body) = send(&app, Method::POST, "/v1/query", Some(json!({"text": "Should I lie?"}))).await;
    assert_eq!(status, StatusCode::BAD_GATEWAY);
    assert_eq!(body["error"], "backend_unavailable");
}

#[tokio::test]
async fn unknown_route_is_json_404() {
    let app = mock_app(None);
    let (status, body) = send(&app, Method::GET, "/v2/query", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "not_found");
}

#[tokio::test]
async fn mutations_are_saved_to_the_corpus_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    let app = mock_app(Some(path.clone()));
    add(&app, "Should I help?", "Yes.", 1).await;
    add(&app, "Should I steal?", "No.", -1).await;
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 2);
    send(&app, Method::DELETE, "/v1/corpus/e00000002", None).await;
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 1);

    // a restarted service sees the same corpus
    let restarted = mock_app(Some(path));
    let (_, body) = send(&restarted, Method::GET, "/v1/corpus", None).await;
    assert_eq!(body["total"], 1);
    assert_eq!(body["items"][0]["query"], "Should I help?");
}
