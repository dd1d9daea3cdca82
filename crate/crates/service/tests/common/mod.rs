#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

use rit_core::engine::Clock;
use rit_core::Pipeline;
use rit_service::views::Settings;
use rit_service::{router, AppState, BackendMode, ServiceConfig};

pub const FIXED_CLOCK: i64 = 1_700_000_000;

pub fn mock_config(corpus: Option<PathBuf>) -> ServiceConfig {
    ServiceConfig {
        corpus_path: corpus,
        backend: BackendMode::Mock,
        clock: Clock::Fixed(FIXED_CLOCK),
        ..ServiceConfig::default()
    }
}

pub fn app_from(cfg: &ServiceConfig, pipeline: Pipeline) -> Router {
    let settings = Settings {
        retrieval: cfg.retrieval,
        generation: cfg.generation,
    };
    router(Arc::new(AppState::new(pipeline, settings, cfg.corpus_path.clone(), cfg.backend)))
}

pub fn mock_app(corpus: Option<PathBuf>) -> Router {
    let cfg = mock_config(corpus);
    let pipeline = cfg.build_pipeline().unwrap();
    app_from(&cfg, pipeline)
}

pub async fn send_raw(app: &Router, method: Method, uri: &str, body: Option<&str>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_owned()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

pub async fn send(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let text = body.map(|b| b.to_string());
    let (status, bytes) = send_raw(app, method, uri, text.as_deref()).await;
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into_owned()))
    };
    (status, value)
}

/// Runs the CLI in-process; returns (exit code, stdout, stderr).
pub fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("rit").chain(args.iter().copied());
    let code = rit_service::run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}
