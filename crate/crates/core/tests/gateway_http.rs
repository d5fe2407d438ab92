mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use cascadefer::calibration::CalibratorSet;
use cascadefer::config::CascadeConfig;
use cascadefer::engine::Cascade;
use cascadefer::gateway::{router, AppState, Gateway};
use cascadefer::solvers::{EndpointConfig, RemoteBackend, ReplayBackend, Solver};

fn app_with(dir: &std::path::Path, backend: Arc<dyn Solver>, token: Option<&str>) -> Router {
    let cascade = Cascade::new(CascadeConfig::default(), backend, CalibratorSet::default());
    router(AppState {
        gateway: Arc::new(Gateway::open(dir, cascade).unwrap()),
        token: token.map(Into::into),
    })
}

fn app(dir: &std::path::Path) -> Router {
    app_with(
        dir,
        Arc::new(ReplayBackend::new(common::traces(3, 12))),
        None,
    )
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX)
        .await
        .unwrap();
    (
        status,
        serde_json::from_slice(&bytes).unwrap_or(Value::Null),
    )
}

async fn submit(app: &Router, id: &str) -> (StatusCode, Value) {
    call(
        app,
        Method::POST,
        "/v1/query",
        Some(json!({"id": id, "prompt": "q", "choices": ["A", "B", "C", "D"]})),
    )
    .await
}

#[tokio::test]
async fn accept_and_escalate_paths() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (s, v) = submit(&app, "easy-0").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["answer"], "A");
    assert_eq!(v["terminal_stage"], 1);
    assert!(v["escalation_id"].is_null());

    let (s, v) = submit(&app, "hard-0").await;
    assert_eq!(s, StatusCode::OK);
    assert!(v["answer"].is_null());
    assert_eq!(v["status"], "pending");
    let id = v["escalation_id"].as_str().unwrap();
    let (s, e) = call(&app, Method::GET, &format!("/v1/escalations/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(e["decision_path"].as_array().unwrap().len(), 4);
    assert!(e["query"]["gold"].is_null());
}

#[tokio::test]
async fn malformed_requests_are_rejected_with_fields() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (s, v) = call(
        &app,
        Method::POST,
        "/v1/query",
        Some(json!({"prompt": "q", "choices": []})),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "validation_failed");
    assert_eq!(v["fields"][0]["path"], "choices");

    let (s, v) = call(&app, Method::POST, "/v1/query", Some(json!({"prompt": 3}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["fields"][0]["path"], "body");

    let (s, v) = submit(&app, "unknown-query").await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "query_aborted");
    assert!(v["message"].as_str().unwrap().contains("trace incomplete"));
}

#[tokio::test]
async fn feedback_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (_, v) = submit(&app, "hard-1").await;
    let id = v["escalation_id"].as_str().unwrap().to_string();
    let url = format!("/v1/escalations/{id}/feedback");

    let (s, v) = call(
        &app,
        Method::POST,
        "/v1/escalations/esc-404/feedback",
        Some(json!({"expert_answer": "A"})),
    )
    .await;
    assert_eq!(
        (s, v["code"].as_str()),
        (StatusCode::NOT_FOUND, Some("not_found"))
    );
    let (s, _) = call(
        &app,
        Method::POST,
        &url,
        Some(json!({"expert_answer": "a?"})),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, v) = call(
        &app,
        Method::POST,
        &url,
        Some(json!({"expert_answer": "F"})),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["fields"][0]["path"], "expert_answer");

    let (s, v) = call(
        &app,
        Method::POST,
        &url,
        Some(json!({"expert_answer": "B"})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["accepted"], true);
    assert_eq!(v["updated"], false);
    let (_, m) = call(&app, Method::GET, "/v1/metrics", None).await;
    assert_eq!(m["feedback_records"], 1);

    let (s, v) = call(
        &app,
        Method::POST,
        &url,
        Some(json!({"expert_answer": "B"})),
    )
    .await;
    assert_eq!(
        (s, v["code"].as_str()),
        (StatusCode::CONFLICT, Some("already_answered"))
    );
    let (_, m) = call(&app, Method::GET, "/v1/metrics", None).await;
    assert_eq!(m["feedback_records"], 1);
}

#[tokio::test]
async fn thresholds_move_after_a_full_batch() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (_, before) = call(&app, Method::GET, "/v1/thresholds", None).await;
    for s in before["thresholds"]["stages"].as_array().unwrap() {
        assert!((s["tau_d"].as_f64().unwrap() - 0.6).abs() < 1e-12);
    }
    let mut last = Value::Null;
    for i in 0..10 {
        let (_, v) = submit(&app, &format!("hard-{i}")).await;
        let url = format!(
            "/v1/escalations/{}/feedback",
            v["escalation_id"].as_str().unwrap()
        );
        let (s, v) = call(
            &app,
            Method::POST,
            &url,
            Some(json!({"expert_answer": "A"})),
        )
        .await;
        assert_eq!(s, StatusCode::OK);
        last = v;
    }
    assert_eq!(last["updated"], true);
    let taus = |v: &Value| -> Vec<f64> {
        v["stages"]
            .as_array()
            .unwrap()
            .iter()
            .map(|s| s["tau_d"].as_f64().unwrap())
            .collect()
    };
    let new = taus(&last["new_thresholds"]["thresholds"]);
    let old = taus(&before["thresholds"]);
    assert!(new.iter().zip(&old).any(|(a, b)| (a - b).abs() > 1e-9));
    let (_, now) = call(&app, Method::GET, "/v1/thresholds", None).await;
    assert_eq!(now, last["new_thresholds"]);
}

#[tokio::test]
async fn listing_pagination_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (s, empty) = call(&app, Method::GET, "/v1/escalations", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(empty["items"], json!([]));

    for i in 0..3 {
        submit(&app, &format!("hard-{i}")).await;
    }
    let (_, p1) = call(
        &app,
        Method::GET,
        "/v1/escalations?status=pending&limit=2",
        None,
    )
    .await;
    assert_eq!(p1["items"].as_array().unwrap().len(), 2);
    assert_eq!(p1["has_more"], true);
    let cursor = p1["next_cursor"].as_str().unwrap();
    let (_, p2) = call(
        &app,
        Method::GET,
        &format!("/v1/escalations?status=pending&limit=2&cursor={cursor}"),
        None,
    )
    .await;
    assert_eq!(p2["items"].as_array().unwrap().len(), 1);
    assert_eq!(p2["has_more"], false);

    let (s, v) = call(&app, Method::GET, "/v1/escalations?cursor=nothex", None).await;
    assert_eq!(
        (s, v["fields"][0]["path"].as_str()),
        (StatusCode::BAD_REQUEST, Some("cursor"))
    );
    let (s, _) = call(&app, Method::GET, "/v1/escalations?limit=0", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, Method::GET, "/v1/escalations?status=lost", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn metrics_snapshot_is_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    for id in ["easy-0", "easy-1", "hard-0", "hard-1", "hard-2"] {
        submit(&app, id).await;
    }
    let (_, a) = call(&app, Method::GET, "/v1/metrics", None).await;
    let (_, b) = call(&app, Method::GET, "/v1/metrics", None).await;
    assert_eq!(a, b);
    let total: u64 = a["histogram"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["count"].as_u64().unwrap())
        .sum();
    assert_eq!(total, 5);
    assert_eq!(a["pending_escalations"], 3);
}

#[tokio::test]
async fn bearer_token_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_with(
        dir.path(),
        Arc::new(ReplayBackend::new(common::traces(1, 1))),
        Some("s3cret"),
    );
    let (s, v) = call(&app, Method::GET, "/v1/thresholds", None).await;
    assert_eq!(
        (s, v["code"].as_str()),
        (StatusCode::UNAUTHORIZED, Some("unauthorized"))
    );
    let req = Request::get("/v1/thresholds")
        .header(header::AUTHORIZATION, "Bearer s3cret")
        .body(Body::empty())
        .unwrap();
    assert_eq!(
        app.clone().oneshot(req).await.unwrap().status(),
        StatusCode::OK
    );
}

#[tokio::test]
async fn backend_outage_is_503_with_retry_hint() {
    let dir = tempfile::tempdir().unwrap();
    let dead = RemoteBackend::new(EndpointConfig {
        base_url: "http://127.0.0.1:9/v1".into(),
        timeout_secs: 2,
        ..EndpointConfig::default()
    });
    let app = app_with(dir.path(), Arc::new(dead), None);
    let req = Request::post("/v1/query")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(
            json!({"prompt": "q", "choices": ["A", "B"]}).to_string(),
        ))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::SERVICE_UNAVAILABLE);
    assert!(resp.headers().contains_key(header::RETRY_AFTER));
    let (_, m) = call(&app, Method::GET, "/v1/metrics", None).await;
    assert_eq!(m["pending_escalations"], 0);
}
