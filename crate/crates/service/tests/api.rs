use std::sync::{Arc, OnceLock};

use adaor_core::sampler::relative_l2;
use adaor_core::train::{train, TrainConfig};
use adaor_core::TaskKind;
use adaor_service::{router, AppState};
use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use serde_json::Value;
use tower::ServiceExt;

fn state() -> Arc<AppState> {
    static STATE: OnceLock<Arc<AppState>> = OnceLock::new();
    STATE
        .get_or_init(|| {
            let out = train(&TrainConfig::for_task(TaskKind::Vec)).unwrap();
            Arc::new(AppState::from_net(out.net))
        })
        .clone()
}

async fn call(req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = router(state()).oneshot(req).await.unwrap();
    let status = resp.status();
    let body = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, body.to_vec())
}

async fn get(path: &str) -> (StatusCode, Value) {
    let (s, b) = call(Request::get(path).body(Body::empty()).unwrap()).await;
    (s, serde_json::from_slice(&b).unwrap())
}

async fn post_raw(body: &str) -> (StatusCode, Vec<u8>) {
    call(
        Request::post("/api/sweep")
            .header("content-type", "application/json")
            .body(Body::from(body.to_string()))
            .unwrap(),
    )
    .await
}

async fn post(body: &str) -> (StatusCode, Value) {
    let (s, b) = post_raw(body).await;
    (s, serde_json::from_slice(&b).unwrap())
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[tokio::test]
async fn health_reports_checkpoint() {
    let (s, v) = get("/api/health").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["task"], "vec");
    assert_eq!(v["checkpoint_id"].as_str().unwrap().len(), 64);
}

#[tokio::test]
async fn meta_lists_edits_variants_and_schedulers() {
    let (s, v) = get("/api/meta").await;
    assert_eq!(s, StatusCode::OK);
    let ins: Vec<&str> = v["instructions"].as_array().unwrap().iter().map(|x| x.as_str().unwrap()).collect();
    assert_eq!(ins.len(), 4);
    assert!(!ins.contains(&"null") && !ins.contains(&"id"));
    assert_eq!(v["variants"].as_array().unwrap().len(), 4);
    assert_eq!(v["schedulers"], serde_json::json!(["sqrt", "linear"]));
    assert_eq!(v["dim"], 8);
    assert_eq!(floats(&v["defaults"]["alphas"]).len(), 6);
}

#[tokio::test]
async fn zero_strength_returns_the_source() {
    let (_, meta) = get("/api/meta").await;
    let ins = meta["instructions"][0].as_str().unwrap();
    let (s, v) = post(&format!(r#"{{"instruction":"{ins}","alphas":[0]}}"#)).await;
    assert_eq!(s, StatusCode::OK);
    let src = floats(&v["source"]["values"]);
    let out = floats(&v["outputs"][0]["values"]);
    assert!(relative_l2(&out, &src) < 0.1);
    assert!(v["metrics"].is_null());
    assert_eq!(v["config"]["variant"], "adaor");
}

#[tokio::test]
async fn full_sweep_has_images_references_and_metrics() {
    let (_, meta) = get("/api/meta").await;
    let ins = meta["instructions"][1].as_str().unwrap();
    let (s, v) = post(&format!(r#"{{"instruction":"{ins}","variant":"cfg","scheduler":"linear"}}"#)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["outputs"].as_array().unwrap().len(), 6);
    assert_eq!(v["references"].as_array().unwrap().len(), 6);
    assert!(v["outputs"][3]["png"].as_str().unwrap().starts_with("iVBOR"));
    assert!(v["metrics"]["delta_smooth"].is_number());
    assert_eq!(v["config"]["scheduler"], "linear");
}

#[tokio::test]
async fn invalid_fields_are_named() {
    let (_, meta) = get("/api/meta").await;
    let ins = meta["instructions"][0].as_str().unwrap();
    let (s, v) = post(&format!(r#"{{"instruction":"{ins}","alphas":[0.2,1.5]}}"#)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["fields"][0]["field"], "alphas");
    let (s, v) = post(r#"{"instruction":"spin"}"#).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["fields"][0]["message"].as_str().unwrap().contains("available"));
}

#[tokio::test]
async fn repeated_requests_are_byte_identical() {
    let (_, meta) = get("/api/meta").await;
    let ins = meta["instructions"][2].as_str().unwrap();
    let body = format!(r#"{{"instruction":"{ins}","seed":7,"case_seed":3}}"#);
    let (s1, a) = post_raw(&body).await;
    let (s2, b) = post_raw(&body).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(a, b);
}

#[tokio::test]
async fn divergence_maps_to_unprocessable() {
    let (_, meta) = get("/api/meta").await;
    let ins = meta["instructions"][0].as_str().unwrap();
    let (s, v) = post(&format!(r#"{{"instruction":"{ins}","variant":"cfgid","w":100,"steps":1024,"alphas":[1]}}"#)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["variant"], "cfgid");
    assert_eq!(v["alpha"], 1.0);
    assert!(v["step"].as_u64().unwrap() < 1024);
}
