use std::path::Path;
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use lesionaug_core::GrayImage;
use lesionaug_vtt::*;
use serde_json::{json, Value};
use tower::ServiceExt;

fn write_pool(dir: &Path, prefix: &str, n: usize) -> Vec<PoolEntry> {
    (0..n)
        .map(|i| {
            let path = dir.join(format!("{prefix}_{i:03}.png"));
            GrayImage::filled(8, 8, i as f32 / n as f32).save_png(&path).unwrap();
            PoolEntry {
                image_id: format!("{prefix}_{i:03}"),
                path,
            }
        })
        .collect()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: std::path::PathBuf,
    real: Vec<PoolEntry>,
    synth: Vec<PoolEntry>,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("vtt");
    let real = write_pool(dir.path(), "REAL", 12);
    let synth = write_pool(dir.path(), "SYN", 12);
    Fixture {
        _dir: dir,
        root,
        real,
        synth,
    }
}

impl Fixture {
    fn app(&self) -> Router {
        let store = VttStore::open(&self.root, self.real.clone(), self.synth.clone()).unwrap();
        router(Arc::new(store))
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => req
            .header("content-type", "application/json")
            .body(Body::from(v.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap())
}

async fn create(app: &Router, n: usize, seed: u64) -> (String, usize) {
    let (s, v) = call_json(app, "POST", "/api/sessions", Some(json!({"rater_id": "dr", "n_per_class": n, "seed": seed}))).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    (v["session_id"].as_str().unwrap().to_string(), v["total"].as_u64().unwrap() as usize)
}

fn assert_no_truth(v: &Value) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                assert!(!["truth", "image_id", "path", "judgment"].contains(&k.as_str()), "leaks {k}: {v}");
                assert_no_truth(x);
            }
        }
        Value::Array(a) => a.iter().for_each(assert_no_truth),
        Value::String(s) => {
            let l = s.to_lowercase();
            assert!(!l.contains("real") && !l.contains("syn"), "leaks {s}");
        }
        _ => {}
    }
}

#[tokio::test]
async fn full_session_flow() {
    let f = fixture();
    let app = f.app();
    let (id, total) = create(&app, 3, 7).await;
    assert_eq!(total, 6);

    let (s, next) = call_json(&app, "GET", &format!("/api/sessions/{id}/next"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(next["index"], 0);
    assert_eq!(next["total"], 6);
    let (_, again) = call_json(&app, "GET", &format!("/api/sessions/{id}/next"), None).await;
    assert_eq!(next, again);

    let (s, png) = call(&app, "GET", next["image_url"].as_str().unwrap(), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");

    let item0 = next["item_id"].as_str().unwrap().to_string();
    let rate = |item: &str, j: &str| json!({"item_id": item, "judgment": j, "elapsed_ms": 1200});
    let (s, ack) = call_json(&app, "POST", &format!("/api/sessions/{id}/ratings"), Some(rate(&item0, "real"))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(ack, json!({"accepted": true, "index": 0}));
    let (_, next1) = call_json(&app, "GET", &format!("/api/sessions/{id}/next"), None).await;
    assert_eq!(next1["index"], 1);

    // identical resubmission is acknowledged once, a different judgment conflicts
    let (s, ack) = call_json(&app, "POST", &format!("/api/sessions/{id}/ratings"), Some(rate(&item0, "real"))).await;
    assert_eq!((s, ack), (StatusCode::OK, json!({"accepted": true, "index": 0})));
    let (s, err) = call_json(&app, "POST", &format!("/api/sessions/{id}/ratings"), Some(rate(&item0, "synthetic"))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(err["error"], "conflicting_rating");
    let (_, rep) = call_json(&app, "GET", &format!("/api/sessions/{id}/report"), None).await;
    assert_eq!(rep["n_ratings"], 1);
    assert_eq!(rep["complete"], false);

    // skipping ahead is rejected and leaves the cursor alone
    let item3 = format!("{id}-0003");
    let (s, err) = call_json(&app, "POST", &format!("/api/sessions/{id}/ratings"), Some(rate(&item3, "real"))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(err["error"], "out_of_order");
    assert!(err["message"].is_string());
    let (_, still) = call_json(&app, "GET", &format!("/api/sessions/{id}/next"), None).await;
    assert_eq!(still["index"], 1);

    for k in 1..6 {
        let (_, n) = call_json(&app, "GET", &format!("/api/sessions/{id}/next"), None).await;
        assert_eq!(n["index"], k);
        let item = n["item_id"].as_str().unwrap();
        let (s, _) = call_json(&app, "POST", &format!("/api/sessions/{id}/ratings"), Some(rate(item, "synthetic"))).await;
        assert_eq!(s, StatusCode::OK);
        let (_, rep) = call_json(&app, "GET", &format!("/api/sessions/{id}/report"), None).await;
        let c = &rep["confusion"];
        let sum: u64 = ["real", "synthetic"]
            .iter()
            .flat_map(|t| ["real", "synthetic"].map(|j| c[t][j].as_u64().unwrap()))
            .sum();
        assert_eq!(sum as usize, k + 1);
    }
    let (_, done) = call_json(&app, "GET", &format!("/api/sessions/{id}/next"), None).await;
    assert_eq!(done, json!({"complete": true}));
    let (_, rep) = call_json(&app, "GET", &format!("/api/sessions/{id}/report"), None).await;
    assert_eq!(rep["complete"], true);
    assert_eq!(rep["n_items"], 6);
    let acc = rep["accuracy"].as_f64().unwrap();
    let c = &rep["confusion"];
    let correct = c["real"]["real"].as_u64().unwrap() + c["synthetic"]["synthetic"].as_u64().unwrap();
    assert!((acc - correct as f64 / 6.0).abs() < 1e-12);
}

#[tokio::test]
async fn errors_are_structured() {
    let f = fixture();
    let app = f.app();
    let cases = [
        ("POST", "/api/sessions".to_string(), Some(json!({"rater_id": "dr"})), 400, "malformed_request"),
        ("POST", "/api/sessions".to_string(), Some(json!({"rater_id": "dr", "n_per_class": 1, "x": 1})), 400, "malformed_request"),
        ("POST", "/api/sessions".to_string(), Some(json!({"rater_id": "dr", "n_per_class": 0})), 400, "invalid_request"),
        ("POST", "/api/sessions".to_string(), Some(json!({"rater_id": "dr", "n_per_class": 13})), 400, "insufficient_pool"),
        ("GET", "/api/sessions/nope/next".to_string(), None, 404, "unknown_session"),
        ("GET", "/api/sessions/nope/report".to_string(), None, 404, "unknown_session"),
        ("GET", "/api/images/nope-0000".to_string(), None, 404, "unknown_item"),
        ("GET", "/api/elsewhere".to_string(), None, 404, "not_found"),
    ];
    for (m, uri, body, status, code) in cases {
        let (s, v) = call_json(&app, m, &uri, body).await;
        assert_eq!(s.as_u16(), status, "{uri}: {v}");
        assert_eq!(v["error"], code);
        assert!(v["message"].as_str().is_some_and(|m| !m.is_empty()));
    }
    let (id, _) = create(&app, 1, 0).await;
    let uri = format!("/api/sessions/{id}/ratings");
    let (_, n) = call_json(&app, "GET", &format!("/api/sessions/{id}/next"), None).await;
    let item = n["item_id"].as_str().unwrap();
    for body in [
        json!({"item_id": item, "judgment": "maybe", "elapsed_ms": 5}),
        json!({"item_id": item, "judgment": "real", "elapsed_ms": -5}),
        json!({"item_id": item, "judgment": "real"}),
    ] {
        let (s, v) = call_json(&app, "POST", &uri, Some(body)).await;
        assert_eq!((s, v["error"].clone()), (StatusCode::BAD_REQUEST, json!("malformed_request")));
    }
    let (s, _) = call(&app, "POST", &uri, None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, v) = call_json(&app, "POST", &uri, Some(json!({"item_id": "zzz", "judgment": "real", "elapsed_ms": 1}))).await;
    assert_eq!((s, v["error"].clone()), (StatusCode::NOT_FOUND, json!("unknown_item")));
    let (s, _) = call_json(&app, "POST", "/api/sessions/nope/ratings", Some(json!({"item_id": item, "judgment": "real", "elapsed_ms": 1}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn rater_facing_bodies_never_carry_truth() {
    let f = fixture();
    let app = f.app();
    for seed in 0..5 {
        let (s, created) = call_json(&app, "POST", "/api/sessions", Some(json!({"rater_id": "dr", "n_per_class": 4, "seed": seed}))).await;
        assert_eq!(s, StatusCode::CREATED);
        assert_no_truth(&created);
        let id = created["session_id"].as_str().unwrap();
        loop {
            let (_, n) = call_json(&app, "GET", &format!("/api/sessions/{id}/next"), None).await;
            assert_no_truth(&n);
            let Some(item) = n["item_id"].as_str() else { break };
            let (_, ack) = call_json(&app, "POST", &format!("/api/sessions/{id}/ratings"), Some(json!({"item_id": item, "judgment": "real", "elapsed_ms": 1}))).await;
            assert_no_truth(&ack);
        }
    }
}

#[tokio::test]
async fn sessions_survive_restart() {
    let f = fixture();
    let app = f.app();
    let (id, _) = create(&app, 2, 11).await;
    for _ in 0..2 {
        let (_, n) = call_json(&app, "GET", &format!("/api/sessions/{id}/next"), None).await;
        let item = n["item_id"].as_str().unwrap();
        call_json(&app, "POST", &format!("/api/sessions/{id}/ratings"), Some(json!({"item_id": item, "judgment": "synthetic", "elapsed_ms": 9}))).await;
    }
    let (_, before) = call_json(&app, "GET", &format!("/api/sessions/{id}/report"), None).await;
    drop(app);
    let restarted = f.app();
    let (_, n) = call_json(&restarted, "GET", &format!("/api/sessions/{id}/next"), None).await;
    assert_eq!(n["index"], 2);
    let (_, after) = call_json(&restarted, "GET", &format!("/api/sessions/{id}/report"), None).await;
    assert_eq!(before, after);
    let log = std::fs::read_to_string(f.root.join("sessions").join(format!("{id}.ratings.jsonl"))).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn pool_from_saved_manifest() {
    use lesionaug_core::dataio::{generate_phantom_dataset, save_manifest, PhantomConfig};
    let dir = tempfile::tempdir().unwrap();
    let m = generate_phantom_dataset(&PhantomConfig {
        n_patients: 1,
        ..PhantomConfig::default()
    })
    .unwrap()
    .manifest;
    let path = save_manifest(&m, dir.path()).unwrap();
    let pool = pool_from_manifest(&path).unwrap();
    assert_eq!(pool.len(), m.records.len());
    assert!(pool.iter().all(|p| p.path.is_file()));
    assert_eq!(pool_from_manifest(dir.path()).unwrap(), pool);
}
