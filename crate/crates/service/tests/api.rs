use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use graphal_core::data::{save_features, FeatureFormat};
use graphal_core::sim::{SynthKind, SynthSpec};
use graphal_service::{router, SessionStore};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn write_dataset(dir: &Path, n: usize) {
    let spec = SynthSpec {
        kind: SynthKind::Blobs,
        n,
        classes: 3,
        noise: 0.2,
        seed: 8,
        dim: Some(9),
    };
    let (x, y) = spec.generate().unwrap();
    save_features(&x, dir.join("x.csv"), FeatureFormat::Csv).unwrap();
    std::fs::write(dir.join("y.csv"), y.to_csv()).unwrap();
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

fn create_body(dir: &Path, acquisition: &str) -> Value {
    json!({
        "name": "blobs",
        "features": dir.join("x.csv"),
        "labels": dir.join("y.csv"),
        "classes": 3,
        "k": 10,
        "metric": "euclidean",
        "m": 30,
        "acquisition": acquisition,
        "seeds": [{"node": 0, "label": 0}, {"node": 1, "label": 1}, {"node": 2, "label": 2}],
    })
}

async fn create(app: &Router, dir: &Path, acquisition: &str) -> String {
    let (status, body) = call(app, "POST", "/sessions", Some(create_body(dir, acquisition))).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn labeling_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(tmp.path(), 90);
    let store = Arc::new(SessionStore::open(tmp.path().join("sessions")).unwrap());
    let app = router(store);
    let id = create(&app, tmp.path(), "vopt").await;

    let (status, desc) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(desc["labeled_count"], 3);
    assert_eq!(desc["pool_remaining"], 87);
    assert_eq!(desc["n"], 90);
    assert_eq!(desc["d"], 9);

    let (_, q1) = call(&app, "GET", &format!("/sessions/{id}/query"), None).await;
    let (_, q2) = call(&app, "GET", &format!("/sessions/{id}/query"), None).await;
    assert_eq!(q1, q2);
    let node = q1["node"].as_u64().unwrap() as usize;
    assert!(node > 2);
    for key in ["session_id", "node", "acquisition_value", "prediction", "confidence", "step"] {
        assert!(q1.get(key).is_some(), "missing {key}");
    }

    let other = if node == 3 { 4 } else { 3 };
    let (status, err) = call(&app, "POST", &format!("/sessions/{id}/labels"), Some(json!({"node": other, "label": 0}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["error_code"], "node_mismatch");

    let (status, err) = call(&app, "POST", &format!("/sessions/{id}/labels"), Some(json!({"node": node, "label": 3}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["error_code"], "label_out_of_range");

    let label = node % 3;
    let post = json!({"node": node, "label": label, "step": 3});
    let (status, done) = call(&app, "POST", &format!("/sessions/{id}/labels"), Some(post.clone())).await;
    assert_eq!(status, StatusCode::OK, "{done}");
    assert_eq!(done["step"], 4);
    assert_eq!(done["labeled_count"], 4);
    assert_eq!(done["committed"]["node"], node);
    assert_ne!(done["pending"]["node"], node);

    let (status, dup) = call(&app, "POST", &format!("/sessions/{id}/labels"), Some(post)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(dup["error_code"], "conflict");
    assert_eq!(dup["original"]["node"], node);
    assert_eq!(dup["original"]["step"], 3);

    let (_, preds) = call(&app, "GET", &format!("/sessions/{id}/predictions?nodes=0,{node}"), None).await;
    assert_eq!(preds["predictions"][0]["prediction"], 0);
    assert_eq!(preds["predictions"][0]["confidence"], 1.0);
    assert_eq!(preds["predictions"][1]["prediction"], label);
    let (_, all) = call(&app, "GET", &format!("/sessions/{id}/predictions"), None).await;
    assert_eq!(all["predictions"].as_array().unwrap().len(), 90);

    let (_, hist) = call(&app, "GET", &format!("/sessions/{id}/history"), None).await;
    let hist = hist["history"].as_array().unwrap();
    assert_eq!(hist.len(), 4);
    assert_eq!(hist[3]["source"], "human");
    assert_eq!(hist[0]["source"], "seed");

    let (status, acc) = call(&app, "GET", &format!("/sessions/{id}/accuracy"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(acc["series"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn unknown_session_and_bad_requests() {
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(tmp.path(), 60);
    let app = router(Arc::new(SessionStore::open(tmp.path().join("s")).unwrap()));
    let (status, err) = call(&app, "GET", "/sessions/nope/query", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["error_code"], "unknown_session");

    let mut body = create_body(tmp.path(), "eer");
    let (status, err) = call(&app, "POST", "/sessions", Some(body.clone())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(err["message"].as_str().unwrap().contains("mcvopt"));

    body["acquisition"] = json!("random");
    body["labels"] = Value::Null;
    let (status, created) = call(&app, "POST", "/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED);
    let id = created["session_id"].as_str().unwrap();
    let (status, err) = call(&app, "GET", &format!("/sessions/{id}/accuracy"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["error_code"], "no_ground_truth");
}

#[tokio::test]
async fn exhaustion_restart_and_isolation() {
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(tmp.path(), 24);
    let root = tmp.path().join("sessions");
    let app = router(Arc::new(SessionStore::open(&root).unwrap()));
    let a = create(&app, tmp.path(), "uncertainty").await;
    let b = create(&app, tmp.path(), "uncertainty").await;
    assert_ne!(a, b);

    for _ in 0..21 {
        let (_, q) = call(&app, "GET", &format!("/sessions/{a}/query"), None).await;
        let node = q["node"].as_u64().unwrap();
        let (status, _) = call(&app, "POST", &format!("/sessions/{a}/labels"), Some(json!({"node": node, "label": node % 3}))).await;
        assert_eq!(status, StatusCode::OK);
    }
    let (status, err) = call(&app, "GET", &format!("/sessions/{a}/query"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["error_code"], "pool_exhausted");

    let (_, desc_b) = call(&app, "GET", &format!("/sessions/{b}"), None).await;
    assert_eq!(desc_b["labeled_count"], 3);

    let (_, hist_a) = call(&app, "GET", &format!("/sessions/{a}/history"), None).await;
    let restarted = router(Arc::new(SessionStore::open(&root).unwrap()));
    let (_, hist_r) = call(&restarted, "GET", &format!("/sessions/{a}/history"), None).await;
    assert_eq!(hist_a, hist_r);
    let (_, list) = call(&restarted, "GET", "/sessions", None).await;
    assert_eq!(list["sessions"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn reads_do_not_wait_for_writer() {
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(tmp.path(), 60);
    let store = Arc::new(SessionStore::open(tmp.path().join("s")).unwrap());
    let app = router(store.clone());
    let id = create(&app, tmp.path(), "mc").await;
    let slot = store.get(&id).unwrap();
    let _held = slot.writer.lock().await;
    let uri = format!("/sessions/{id}/query");
    let read = tokio::time::timeout(Duration::from_secs(5), call(&app, "GET", &uri, None));
    let (status, _) = read.await.expect("read blocked behind the writer");
    assert_eq!(status, StatusCode::OK);
}
