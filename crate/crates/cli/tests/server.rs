mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use videor4_cli::server::router;
use videor4_core::corpus::BoundingBox;
use videor4_core::qc::{QcService, CURATED_FILE, MANIFEST_FILE};
use videor4_core::trajectory::{ToolCall, Trajectory};

fn app(n: usize) -> (Router, Arc<QcService>, Vec<Trajectory>) {
    let (corpus, evidence, trajectories) = common::review_fixture(n);
    let svc = Arc::new(QcService::open(corpus, evidence, trajectories.clone(), None).unwrap());
    (router(svc.clone()), svc, trajectories)
}

async fn call(
    app: &Router,
    method: Method,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Vec<u8>, String) {
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
    let ctype = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_string())
        .unwrap_or_default();
    let bytes = resp
        .into_body()
        .collect()
        .await
        .unwrap()
        .to_bytes()
        .to_vec();
    (status, bytes, ctype)
}

async fn json_call(
    app: &Router,
    method: Method,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let (status, bytes, _) = call(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn decide(action: &str, version: u64) -> Value {
    json!({"action": action, "reviewer": "ann", "expected_version": version})
}

#[tokio::test]
async fn listing_filters_and_pages() {
    let (app, _, _) = app(20);
    let (s, v) = json_call(&app, Method::GET, "/items", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["total"], 20);
    assert!(v["items"]
        .as_array()
        .unwrap()
        .iter()
        .all(|i| i["status"] == "pending"));

    let (_, v) = json_call(&app, Method::GET, "/items?status=accepted", None).await;
    assert_eq!(v["total"], 0);
    assert!(v["items"].as_array().unwrap().is_empty());

    let (_, v) = json_call(&app, Method::GET, "/items?page=4&page_size=5", None).await;
    assert_eq!(v["pages"], 4);
    assert_eq!(v["items"].as_array().unwrap().len(), 5);

    let (s, v) = json_call(&app, Method::GET, "/items?status=maybe", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "bad_request");
    let (s, _) = json_call(&app, Method::GET, "/items?page_size=0", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn item_bundle_and_images() {
    let (app, _, trajectories) = app(3);
    let t = &trajectories[0];
    let (s, v) = json_call(&app, Method::GET, &format!("/items/{}", t.id), None).await;
    assert_eq!(s, StatusCode::OK);
    let clips = t
        .tool_calls()
        .filter(|c| matches!(c, ToolCall::Clip { .. }))
        .count();
    let crops = t.tool_calls().count() - clips;
    assert_eq!(v["bundle"]["clips"].as_array().unwrap().len(), clips);
    assert_eq!(v["bundle"]["crops"].as_array().unwrap().len(), crops);
    assert_eq!(v["item"]["version"], 1);

    let frame_url = v["bundle"]["crops"][0]["frame"]["url"]
        .as_str()
        .unwrap()
        .to_string();
    let (s, bytes, ctype) = call(&app, Method::GET, &frame_url, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(ctype, "image/png");
    assert_eq!(&bytes[1..4], b"PNG");
    let crop_url = v["bundle"]["crops"][0]["crop_url"]
        .as_str()
        .unwrap()
        .to_string();
    let (s, _, ctype) = call(&app, Method::GET, &crop_url, None).await;
    assert_eq!((s, ctype.as_str()), (StatusCode::OK, "image/png"));

    let (s, v) = json_call(&app, Method::GET, "/items/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "not_found");
    let (s, _, _) = call(
        &app,
        Method::GET,
        &format!("/items/{}/frames/99", t.id),
        None,
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _, _) = call(
        &app,
        Method::GET,
        &format!("/items/{}/crops/99", t.id),
        None,
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn decisions_use_optimistic_versions() {
    let (app, _, trajectories) = app(2);
    let uri = format!("/items/{}/decision", trajectories[0].id);
    let (s, v) = json_call(&app, Method::POST, &uri, Some(decide("accept", 1))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(
        (v["status"].clone(), v["version"].clone()),
        (json!("accepted"), json!(2))
    );

    let (s, v) = json_call(&app, Method::POST, &uri, Some(decide("drop", 1))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["code"], "conflict");
    let (_, v) = json_call(
        &app,
        Method::GET,
        &format!("/items/{}", trajectories[0].id),
        None,
    )
    .await;
    assert_eq!(v["item"]["status"], "accepted");
    assert_eq!(v["item"]["version"], 2);

    let (s, v) = json_call(&app, Method::POST, &uri, Some(json!({"action": "shrug"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "bad_request");
    let (s, _) = json_call(
        &app,
        Method::POST,
        "/items/nope/decision",
        Some(decide("accept", 1)),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn edits_are_validated() {
    let (app, _, trajectories) = app(2);
    let t = &trajectories[0];
    let uri = format!("/items/{}/body", t.id);

    let mut bad = t.clone();
    for turn in &mut bad.turns {
        if let Some(ToolCall::Crop { bbox, .. }) = &mut turn.tool_call {
            *bbox = BoundingBox::new(0, 0, 32, 32).unwrap();
        }
    }
    let body = json!({"trajectory": bad, "reviewer": "bo", "expected_version": 1});
    let (s, v) = json_call(&app, Method::PUT, &uri, Some(body)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "validation");
    assert!(v["violations"]
        .as_array()
        .unwrap()
        .iter()
        .any(|x| x["kind"] == "grounding"));

    let mut good = t.clone();
    good.turns[0].think = "Looking again at the sign.".into();
    let body = json!({"trajectory": good, "reviewer": "bo", "expected_version": 1});
    let (s, v) = json_call(&app, Method::PUT, &uri, Some(body.clone())).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "edited");
    assert_eq!(
        v["trajectory"]["turns"][0]["think"],
        "Looking again at the sign."
    );
    let (s, _) = json_call(&app, Method::PUT, &uri, Some(body)).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn export_counts_kept_items() {
    let (app, svc, trajectories) = app(20);
    for (i, t) in trajectories.iter().enumerate() {
        match i {
            0..12 => {
                let uri = format!("/items/{}/decision", t.id);
                assert_eq!(
                    json_call(&app, Method::POST, &uri, Some(decide("accept", 1)))
                        .await
                        .0,
                    StatusCode::OK
                );
            }
            12..15 => {
                let mut body = t.clone();
                body.turns[0].think = format!("edited {i}");
                let req = json!({"trajectory": body, "reviewer": "cy", "expected_version": 1});
                let uri = format!("/items/{}/body", t.id);
                assert_eq!(
                    json_call(&app, Method::PUT, &uri, Some(req)).await.0,
                    StatusCode::OK
                );
            }
            _ => {
                let uri = format!("/items/{}/decision", t.id);
                assert_eq!(
                    json_call(&app, Method::POST, &uri, Some(decide("drop", 1)))
                        .await
                        .0,
                    StatusCode::OK
                );
            }
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let dest = dir.path().join("curated");
    let (s, v) = json_call(&app, Method::POST, "/export", Some(json!({"path": dest}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["exported"], 15);
    assert_eq!(
        v["counts"],
        json!({"pending": 0, "accepted": 12, "dropped": 5, "edited": 3})
    );
    let curated = std::fs::read_to_string(dest.join(CURATED_FILE)).unwrap();
    assert_eq!(curated.lines().count(), 15);
    let manifest = std::fs::read_to_string(dest.join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest, svc.export().manifest_json());
}

#[tokio::test]
async fn fresh_export_is_empty() {
    let (app, _, _) = app(20);
    let dir = tempfile::tempdir().unwrap();
    let (s, v) = json_call(
        &app,
        Method::POST,
        "/export",
        Some(json!({"path": dir.path()})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["exported"], 0);
    assert_eq!(v["counts"]["pending"], 20);
}
