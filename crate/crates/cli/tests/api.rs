use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use gmn_cli::server::router;
use gmn_core::data::{generate_synthetic_scene, Image, SyntheticSceneSpec};
use gmn_core::model::{Gmn, ModelConfig, WidthMultiplier};
use gmn_core::service::{CountService, ServiceConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn service() -> Arc<CountService> {
    let model = Gmn::new(ModelConfig::with_width(WidthMultiplier::new(1, 16).unwrap()), 7).unwrap();
    Arc::new(CountService::new(model, "api-test", &ServiceConfig::default()))
}

async fn call(svc: &Arc<CountService>, req: Request<Body>) -> (StatusCode, Vec<u8>, axum::http::HeaderMap) {
    let resp = router(svc.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body, headers)
}

async fn json_call(svc: &Arc<CountService>, req: Request<Body>) -> (StatusCode, Value) {
    let (s, b, _) = call(svc, req).await;
    (s, serde_json::from_slice(&b).unwrap())
}

fn post(uri: &str, body: impl Into<Body>) -> Request<Body> {
    Request::post(uri).body(body.into()).unwrap()
}

fn post_json(uri: &str, v: Value) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(v.to_string()))
        .unwrap()
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn scene_png() -> Vec<u8> {
    let spec = SyntheticSceneSpec { width: 255, height: 255, count: 3, seed: 5, ..Default::default() };
    generate_synthetic_scene(&spec).unwrap().image.encode_png().unwrap()
}

async fn upload(svc: &Arc<CountService>, bytes: Vec<u8>) -> String {
    let (s, v) = json_call(svc, post("/images", bytes)).await;
    assert_eq!(s, StatusCode::CREATED);
    v["image_id"].as_str().unwrap().to_string()
}

async fn wait_done(svc: &Arc<CountService>, id: u64) -> Value {
    for _ in 0..2000 {
        let (s, v) = json_call(svc, get(&format!("/jobs/{id}"))).await;
        assert_eq!(s, StatusCode::OK);
        if v["status"] == "done" || v["status"] == "failed" {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("job {id} did not finish");
}

#[tokio::test]
async fn upload_is_idempotent_and_validated() {
    let svc = service();
    let bytes = scene_png();
    let a = upload(&svc, bytes.clone()).await;
    let b = upload(&svc, bytes).await;
    assert_eq!(a, b);
    let (s, v) = json_call(&svc, post("/images", Vec::<u8>::new())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("empty"));
    let (s, _) = json_call(&svc, post("/images", b"garbage".to_vec())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn count_job_lifecycle_and_cached_rethreshold() {
    let svc = service();
    let id = upload(&svc, scene_png()).await;
    let body = json!({ "image_id": id, "box": { "x": 96, "y": 96, "w": 63, "h": 63 }, "mode": "localmax", "threshold": -1e9 });

    // no workers yet: the job stays queued
    let (s, job) = json_call(&svc, post_json("/count", body.clone())).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    assert_eq!(job["status"], "queued");
    let first = job["id"].as_u64().unwrap();
    let (_, queued) = json_call(&svc, get(&format!("/jobs/{first}"))).await;
    assert_eq!(queued["status"], "queued");
    assert!(queued.get("result").is_none());

    let workers = svc.spawn_workers(1);
    let done = wait_done(&svc, first).await;
    assert_eq!(done["status"], "done");
    let r = &done["result"];
    assert_eq!(r["cache_hit"], false);
    assert_eq!((r["map_height"].as_u64(), r["map_width"].as_u64()), (Some(64), Some(64)));
    assert_eq!(r["count"].as_f64().unwrap() as usize, r["detections"]["detections"].as_array().unwrap().len());

    let mut higher = body.clone();
    higher["threshold"] = json!(1e9);
    let (_, job2) = json_call(&svc, post_json("/count", higher)).await;
    let done2 = wait_done(&svc, job2["id"].as_u64().unwrap()).await;
    assert_eq!(done2["result"]["cache_hit"], true);
    assert_eq!(done2["result"]["count"], 0.0);

    let (_, stats) = json_call(&svc, get("/stats")).await;
    assert_eq!(stats["counters"]["embedding_calls"], 1);
    assert_eq!(stats["counters"]["cache_hits"], 1);

    let (s, png, headers) = call(&svc, get(&format!("/maps/{first}.png"))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(headers["content-type"], "image/png");
    let heat = Image::decode(&png, "heat").unwrap();
    assert_eq!((heat.width(), heat.height()), (64, 64));
    let (s, gmnd, headers) = call(&svc, get(&format!("/maps/{first}.gmnd"))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&gmnd[..4], b"GMND");
    assert_eq!(gmnd.len(), 16 + 64 * 64 * 4);
    let grid: Value = serde_json::from_str(headers["x-map-grid"].to_str().unwrap()).unwrap();
    assert_eq!(grid["stride"], 4.0);

    svc.shutdown();
    for w in workers {
        w.join().unwrap();
    }
}

#[tokio::test]
async fn errors_map_to_client_statuses() {
    let svc = service();
    let (s, _) = json_call(&svc, post_json("/count", json!({ "image_id": "missing", "box": { "x": 0, "y": 0, "w": 10, "h": 10 } }))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let id = upload(&svc, scene_png()).await;
    let (s, v) = json_call(&svc, post_json("/count", json!({ "image_id": id, "box": { "x": 400, "y": 0, "w": 10, "h": 10 } }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("box"));
    let (s, _) = json_call(&svc, get("/jobs/999")).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = json_call(&svc, get("/maps/999.png")).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = json_call(&svc, get("/maps/abc.tiff")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn integral_job_on_a_three_object_scene_reports_a_finite_count() {
    let svc = service();
    let id = upload(&svc, scene_png()).await;
    let (_, job) = json_call(
        &svc,
        post_json("/count", json!({ "image_id": id, "box": { "x": 10, "y": 10, "w": 40, "h": 40 }, "mode": "integral" })),
    )
    .await;
    svc.drain();
    let done = wait_done(&svc, job["id"].as_u64().unwrap()).await;
    assert_eq!(done["result"]["mode"], "integral");
    assert!(done["result"]["count"].as_f64().unwrap().is_finite());
    assert!(done["result"].get("detections").is_none());
}
