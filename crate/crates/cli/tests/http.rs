use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use raad_cli::config::DEFAULT_BODY_LIMIT;
use raad_cli::server::{router, AppState};
use raad_core::{AdjustmentConfig, FpStore, Pipeline};
use serde_json::{json, Value};
use tower::ServiceExt;

const TOKEN: &str = "test-token";

fn app_with(store: FpStore, retention: usize, token: Option<&str>) -> Router {
    let pipeline = Pipeline::with_retention(Arc::new(store), AdjustmentConfig::default(), retention).unwrap();
    router(
        AppState::new(Arc::new(pipeline), token.map(String::from), None),
        DEFAULT_BODY_LIMIT,
    )
}

fn app() -> Router {
    app_with(FpStore::in_memory(), 1024, Some(TOKEN))
}

struct Reply {
    status: StatusCode,
    bytes: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap()
    }
}

async fn send_raw(app: &Router, method: Method, uri: &str, body: Vec<u8>, token: Option<&str>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    let resp = app.clone().oneshot(req.body(Body::from(body)).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, bytes }
}

async fn send(app: &Router, method: Method, uri: &str, body: &str) -> Reply {
    send_raw(app, method, uri, body.as_bytes().to_vec(), Some(TOKEN)).await
}

fn event(id: &str, embedding: &[f64], score: f64) -> String {
    json!({"event_id": id, "embedding": embedding, "score": score}).to_string()
}

fn ndjson(lines: &[String]) -> String {
    lines.join("\n") + "\n"
}

#[tokio::test]
async fn empty_body_gives_empty_batch() {
    let app = app();
    let r = send(&app, Method::POST, "/v1/batches", "").await;
    assert_eq!(r.status, StatusCode::OK);
    let v = r.json();
    assert_eq!(v["batch_id"], 0);
    assert_eq!(v["outcomes"], json!([]));
    assert_eq!(v["alerts"], json!([]));
    assert_eq!(v["rejects"], json!([]));
}

#[tokio::test]
async fn empty_store_leaves_scores_unchanged() {
    let app = app();
    let r = send(
        &app,
        Method::POST,
        "/v1/batches",
        &ndjson(&[event("a", &[0.2, 0.4], 0.83)]),
    )
    .await;
    assert_eq!(r.status, StatusCode::OK);
    let o = &r.json()["outcomes"][0];
    assert_eq!(o["event_id"], "a");
    assert_eq!(o["score_original"], 0.83);
    assert_eq!(o["score_adjusted"], 0.83);
    assert_eq!(o["fp_confidence"], 0.0);
    assert!(o.get("theta_closest").is_none());
    assert_eq!(r.json()["alerts"], json!(["a"]));
}

#[tokio::test]
async fn wrong_dimension_line_is_rejected() {
    let app = app();
    let body = ndjson(&[
        event("a", &[1.0, 0.0, 0.0], 0.9),
        event("b", &[1.0, 0.0], 0.9),
        event("c", &[0.0, 1.0, 0.0], 0.2),
        "{not json".to_string(),
    ]);
    let r = send(&app, Method::POST, "/v1/batches", &body).await;
    assert_eq!(r.status, StatusCode::OK);
    let v = r.json();
    assert_eq!(
        v["rejects"],
        json!([{"line": 2, "reason": "dimension_mismatch"}, {"line": 4, "reason": "invalid_json"}])
    );
    assert_eq!(v["outcomes"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn non_utf8_body_is_bad_request() {
    let app = app();
    let r = send_raw(&app, Method::POST, "/v1/batches", vec![0xff, 0xfe, b'\n'], Some(TOKEN)).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert!(r.json()["error"].as_str().unwrap().contains("UTF-8"));
}

#[tokio::test]
async fn token_is_required() {
    let app = app();
    for token in [None, Some("wrong")] {
        for (method, uri) in [
            (Method::POST, "/v1/batches"),
            (Method::GET, "/v1/config"),
            (Method::GET, "/v1/alerts"),
            (Method::POST, "/v1/annotations"),
        ] {
            let r = send_raw(&app, method, uri, Vec::new(), token).await;
            assert_eq!(r.status, StatusCode::UNAUTHORIZED, "{uri} with {token:?}");
        }
    }
    let open = app_with(FpStore::in_memory(), 8, None);
    let r = send_raw(&open, Method::GET, "/v1/config", Vec::new(), None).await;
    assert_eq!(r.status, StatusCode::OK);
}

#[tokio::test]
async fn annotation_suppresses_next_batch() {
    let app = app();
    let body = ndjson(&[event("fp", &[0.0, 3.0, 4.0], 0.9), event("tp", &[1.0, 0.0, 0.0], 0.95)]);
    let first = send(&app, Method::POST, "/v1/batches", &body).await.json();
    assert_eq!(first["alerts"], json!(["fp", "tp"]));

    let req = json!({"batch_id": 0, "event_id": "fp", "annotator": "ana", "note": "backup job"}).to_string();
    let r = send(&app, Method::POST, "/v1/annotations", &req).await;
    assert_eq!(r.status, StatusCode::CREATED);
    let id = r.json()["annotation_id"].as_u64().unwrap();

    let second = send(&app, Method::POST, "/v1/batches", &body).await.json();
    assert_eq!(second["batch_id"], 1);
    assert_eq!(second["alerts"], json!(["tp"]));
    let fp = &second["outcomes"][0];
    assert_eq!(fp["score_adjusted"], 0.0);
    assert_eq!(fp["fp_confidence"], 1.0);
    assert_eq!(fp["theta_closest"], 1.0);
    assert_eq!(fp["annotation_id"], id);

    // duplicates are allowed and get fresh ids
    let again = send(&app, Method::POST, "/v1/annotations", &req).await;
    assert_eq!(again.status, StatusCode::CREATED);
    assert_ne!(again.json()["annotation_id"].as_u64().unwrap(), id);
}

#[tokio::test]
async fn annotation_errors() {
    let app = app_with(FpStore::in_memory(), 2, Some(TOKEN));
    let body = ndjson(&[event("e", &[1.0, 2.0], 0.9)]);
    for _ in 0..3 {
        send(&app, Method::POST, "/v1/batches", &body).await;
    }
    let stale = json!({"batch_id": 0, "event_id": "e", "annotator": "a"}).to_string();
    assert_eq!(
        send(&app, Method::POST, "/v1/annotations", &stale).await.status,
        StatusCode::NOT_FOUND
    );
    let unknown = json!({"batch_id": 2, "event_id": "nope", "annotator": "a"}).to_string();
    assert_eq!(
        send(&app, Method::POST, "/v1/annotations", &unknown).await.status,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        send(&app, Method::POST, "/v1/annotations", "{oops").await.status,
        StatusCode::BAD_REQUEST
    );
    let missing = json!({"batch_id": 2}).to_string();
    assert_eq!(
        send(&app, Method::POST, "/v1/annotations", &missing).await.status,
        StatusCode::UNPROCESSABLE_ENTITY
    );
}

#[tokio::test]
async fn storage_failure_is_service_unavailable() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("gone");
    std::fs::create_dir(&sub).unwrap();
    let store = FpStore::open(sub.join("fp.store")).unwrap();
    let app = app_with(store, 8, Some(TOKEN));
    send(
        &app,
        Method::POST,
        "/v1/batches",
        &ndjson(&[event("e", &[1.0, 2.0], 0.9)]),
    )
    .await;
    std::fs::remove_dir(&sub).unwrap();
    let req = json!({"batch_id": 0, "event_id": "e", "annotator": "a"}).to_string();
    let r = send(&app, Method::POST, "/v1/annotations", &req).await;
    assert_eq!(r.status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn annotation_is_durable_before_response() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fp.store");
    let app = app_with(FpStore::open(&path).unwrap(), 8, Some(TOKEN));
    send(
        &app,
        Method::POST,
        "/v1/batches",
        &ndjson(&[event("e", &[1.0, 2.0], 0.9)]),
    )
    .await;
    let req = json!({"batch_id": 0, "event_id": "e", "annotator": "a"}).to_string();
    assert_eq!(
        send(&app, Method::POST, "/v1/annotations", &req).await.status,
        StatusCode::CREATED
    );
    let reopened = FpStore::open(&path).unwrap();
    assert_eq!(reopened.len(), 1);
    assert_eq!(reopened.snapshot().annotations().next().unwrap().source_event_id, "e");
}

#[tokio::test]
async fn retained_batches_read_back_verbatim() {
    let app = app();
    let body = ndjson(&[event("a", &[0.5, 0.5], 0.7), event("b", &[0.1, 0.9], 0.2)]);
    let posted = send(&app, Method::POST, "/v1/batches", &body).await;
    let got = send(&app, Method::GET, "/v1/batches/0", "").await;
    assert_eq!(got.status, StatusCode::OK);
    assert_eq!(got.bytes, posted.bytes);
    let again = send(&app, Method::GET, "/v1/batches/0", "").await;
    assert_eq!(again.bytes, got.bytes);

    let latest = send(&app, Method::GET, "/v1/alerts", "").await;
    assert_eq!(latest.bytes, posted.bytes);
    let by_id = send(&app, Method::GET, "/v1/alerts?batch_id=0", "").await;
    assert_eq!(by_id.bytes, posted.bytes);

    assert_eq!(
        send(&app, Method::GET, "/v1/batches/7", "").await.status,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        send(&app, Method::GET, "/v1/alerts?batch_id=7", "").await.status,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        send(&app, Method::GET, "/v1/batches/x", "").await.status,
        StatusCode::BAD_REQUEST
    );
}

#[tokio::test]
async fn alerts_before_any_batch_is_not_found() {
    assert_eq!(
        send(&app(), Method::GET, "/v1/alerts", "").await.status,
        StatusCode::NOT_FOUND
    );
}

#[tokio::test]
async fn old_batches_expire_past_retention() {
    let app = app();
    for _ in 0..2000 {
        send(&app, Method::POST, "/v1/batches", "").await;
    }
    assert_eq!(
        send(&app, Method::GET, "/v1/batches/0", "").await.status,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        send(&app, Method::GET, "/v1/batches/975", "").await.status,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        send(&app, Method::GET, "/v1/batches/976", "").await.status,
        StatusCode::OK
    );
    assert_eq!(
        send(&app, Method::GET, "/v1/batches/1999", "").await.status,
        StatusCode::OK
    );
}

#[tokio::test]
async fn config_round_trip_and_validation() {
    let app = app();
    let mnist = json!({"tau": 0.95, "alpha": 60.0, "delta": 1.0, "score_kind": "probability", "alert_threshold": 0.5});
    let r = send(&app, Method::PUT, "/v1/config", &mnist.to_string()).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(send(&app, Method::GET, "/v1/config", "").await.json(), mnist);

    let zdt = json!({"tau": 0.95, "alpha": 70.0, "score_kind": "probability", "alert_threshold": 0.5});
    assert_eq!(
        send(&app, Method::PUT, "/v1/config", &zdt.to_string()).await.status,
        StatusCode::OK
    );
    assert_eq!(send(&app, Method::GET, "/v1/config", "").await.json(), zdt);

    let bad = json!({"tau": 1.5, "alpha": 60.0, "score_kind": "probability", "alert_threshold": 0.5});
    let r = send(&app, Method::PUT, "/v1/config", &bad.to_string()).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(r.json()["error"].as_str().unwrap().contains("tau"));
    assert_eq!(send(&app, Method::GET, "/v1/config", "").await.json(), zdt);

    let partial = json!({"tau": 0.9});
    assert_eq!(
        send(&app, Method::PUT, "/v1/config", &partial.to_string()).await.status,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    assert_eq!(
        send(&app, Method::PUT, "/v1/config", "{").await.status,
        StatusCode::BAD_REQUEST
    );
}

#[tokio::test]
async fn config_change_governs_next_batch() {
    let app = app();
    let body = ndjson(&[event("a", &[1.0, 0.0], 0.6)]);
    let before = send(&app, Method::POST, "/v1/batches", &body).await.json();
    assert_eq!(before["alerts"], json!(["a"]));
    let cfg = json!({"tau": 0.95, "alpha": 60.0, "score_kind": "probability", "alert_threshold": 0.7});
    assert_eq!(
        send(&app, Method::PUT, "/v1/config", &cfg.to_string()).await.status,
        StatusCode::OK
    );
    let after = send(&app, Method::POST, "/v1/batches", &body).await.json();
    assert_eq!(after["alerts"], json!([]));
    // earlier batches keep the result they were computed with
    assert_eq!(send(&app, Method::GET, "/v1/batches/0", "").await.json(), before);
}

async fn preview(app: &Router, body: Value) -> Reply {
    send(app, Method::POST, "/v1/preview", &body.to_string()).await
}

#[tokio::test]
async fn preview_evaluates_without_side_effects() {
    let app = app();
    let r = preview(
        &app,
        json!({"theta": 0.5, "score": 0.9, "config": {"tau": 0.95, "alpha": 60.0}}),
    )
    .await;
    assert_eq!(r.status, StatusCode::OK);
    let adjusted = r.json()["score_adjusted"].as_f64().unwrap();
    assert!((adjusted - 0.9).abs() < 1e-12, "{adjusted}");

    let r = preview(&app, json!({"theta": 1.0, "d": 0.0, "score": 0.9})).await;
    assert_eq!(r.json()["score_adjusted"], 0.0);

    let r = preview(
        &app,
        json!({"theta": 0.99, "d": 0.5, "score": 0.9, "config": {"delta": 1.0}}),
    )
    .await;
    let v = r.json()["score_adjusted"].as_f64().unwrap();
    assert!((v - 0.009).abs() < 1e-12, "{v}");

    let loss = json!({"theta": 0.95, "d": 0.0, "score": 10.0, "config_override": {"score_kind": "loss", "alert_threshold": 2.0}});
    let r = preview(&app, loss).await;
    assert_eq!(r.status, StatusCode::OK);
    let v = r.json()["score_adjusted"].as_f64().unwrap();
    assert!((v - 5.0).abs() < 1e-12, "{v}");

    assert_eq!(
        send(&app, Method::GET, "/v1/config", "").await.json(),
        json!(AdjustmentConfig::default())
    );
    assert_eq!(
        send(&app, Method::GET, "/v1/alerts", "").await.status,
        StatusCode::NOT_FOUND
    );
}

#[tokio::test]
async fn preview_range_violations() {
    let app = app();
    for body in [
        json!({"theta": 1.5, "score": 0.9}),
        json!({"theta": 0.5, "score": 1.5}),
        json!({"theta": 0.5, "d": -1.0, "score": 0.5}),
        json!({"theta": 0.5, "score": 0.5, "config": {"tau": 1.2}}),
        json!({"theta": 0.5, "score": 0.5, "config": {"alpha": 0.0}}),
        json!({"theta": 0.5}),
    ] {
        let r = preview(&app, body.clone()).await;
        assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
    }
}

#[tokio::test]
async fn diagnostics_report() {
    let app = app();
    let mut lines = Vec::new();
    for i in 0..30 {
        let x = i as f64 * 0.01;
        lines.push(json!({"embedding": [x, 1.0 - x], "label": "benign"}).to_string());
        lines.push(json!({"embedding": [100.0 + x, 100.0], "label": "malicious"}).to_string());
    }
    let r = send(&app, Method::POST, "/v1/diagnostics?seed=3", &ndjson(&lines)).await;
    assert_eq!(r.status, StatusCode::OK);
    let v = r.json();
    assert_eq!(v["jaccard_max"], 0.0);
    assert!(v.get("warnings").is_none());

    let one_class = ndjson(&[json!({"embedding": [1.0], "label": "x"}).to_string()]);
    let r = send(&app, Method::POST, "/v1/diagnostics", &one_class).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
}
