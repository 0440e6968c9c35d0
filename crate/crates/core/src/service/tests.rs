use axum::body::{to_bytes, Body};
use axum::http::Request;
use tower::ServiceExt;

use super::*;
use crate::model::ModelConfig;
use crate::propagation::gen_drifting_volume;

fn tiny_weights() -> Weights {
    let cfg = ModelConfig {
        patch_size: 2,
        embed_dim: 8,
        heads: vec![1, 2],
        window_size: 2,
        mlp_ratio: 2,
        decoder_dim: 8,
        height: 32,
        width: 32,
        click_radius: 3,
        ..ModelConfig::default()
    };
    // an init whose masks visibly change with each click
    Weights::init_with_std(cfg, 1, 0.6).unwrap()
}

fn app_at(dir: &Path) -> Router {
    router(
        Arc::new(AppState::new(dir, tiny_weights(), "test")),
        &ServiceConfig::default(),
    )
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn json(app: &Router, method: &str, uri: &str, body: serde_json::Value) -> (StatusCode, serde_json::Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let (status, bytes) = send(app, req).await;
    (
        status,
        serde_json::from_slice(&bytes).unwrap_or(serde_json::Value::Null),
    )
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

fn b64(img: &GrayF64) -> String {
    base64::engine::general_purpose::STANDARD.encode(img.to_png_bytes())
}

fn test_image() -> GrayF64 {
    let (vol, _) = gen_drifting_volume(1, 1, 32, 32).unwrap();
    vol.slices[0].clone()
}

async fn create_image(app: &Router) -> String {
    let (status, body) = json(
        app,
        "POST",
        "/sessions",
        serde_json::json!({ "image": b64(&test_image()) }),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED);
    body["session_id"].as_str().unwrap().to_string()
}

async fn create_volume(app: &Router, depth: usize) -> String {
    let (vol, _) = gen_drifting_volume(2, depth, 32, 32).unwrap();
    let slices: Vec<String> = vol.slices.iter().map(b64).collect();
    let (status, body) = json(app, "POST", "/sessions", serde_json::json!({ "volume": slices })).await;
    assert_eq!(status, StatusCode::CREATED);
    body["session_id"].as_str().unwrap().to_string()
}

async fn click(
    app: &Router,
    id: &str,
    slice: usize,
    row: i64,
    col: i64,
    polarity: &str,
) -> (StatusCode, serde_json::Value) {
    json(
        app,
        "POST",
        &format!("/sessions/{id}/clicks"),
        serde_json::json!({ "slice": slice, "row": row, "col": col, "polarity": polarity }),
    )
    .await
}

async fn undo(app: &Router, id: &str, slice: usize) -> (StatusCode, serde_json::Value) {
    let req = Request::delete(format!("/sessions/{id}/clicks/last?slice={slice}"))
        .body(Body::empty())
        .unwrap();
    let (status, bytes) = send(app, req).await;
    (
        status,
        serde_json::from_slice(&bytes).unwrap_or(serde_json::Value::Null),
    )
}

async fn mask(app: &Router, id: &str, slice: usize, version: Option<u64>) -> (StatusCode, Vec<u8>) {
    let uri = match version {
        Some(v) => format!("/sessions/{id}/mask?slice={slice}&version={v}"),
        None => format!("/sessions/{id}/mask?slice={slice}"),
    };
    get(app, &uri).await
}

const CLICKS: [(i64, i64, &str); 3] = [(16, 16, "positive"), (4, 27, "negative"), (20, 9, "positive")];

#[tokio::test]
async fn health_and_creation() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_at(dir.path());
    assert_eq!(get(&app, "/health").await, (StatusCode::OK, b"ok".to_vec()));
    let a = create_image(&app).await;
    let b = create_image(&app).await;
    assert_ne!(a, b);
    assert!(dir.path().join("sessions").join(&a).join("meta.json").is_file());

    let png = test_image().to_png_bytes();
    let truncated = base64::engine::general_purpose::STANDARD.encode(&png[..png.len() / 2]);
    for body in [
        serde_json::json!({ "image": truncated }),
        serde_json::json!({ "image": "not base64!" }),
        serde_json::json!({}),
        serde_json::json!({ "image": b64(&test_image()), "volume": [b64(&test_image())] }),
    ] {
        assert_eq!(json(&app, "POST", "/sessions", body).await.0, StatusCode::BAD_REQUEST);
    }
    let mixed = serde_json::json!({ "volume": [b64(&test_image()), b64(&GrayF64::new(8, 8, vec![0.0; 64]).unwrap())] });
    assert_eq!(json(&app, "POST", "/sessions", mixed).await.0, StatusCode::BAD_REQUEST);
    let garbage = Request::post("/sessions")
        .header("content-type", "application/json")
        .body(Body::from("{not json"))
        .unwrap();
    assert_eq!(send(&app, garbage).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn oversized_body_is_413() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_at(dir.path());
    let big = format!("{{\"image\": \"{}\"}}", "A".repeat(BODY_LIMIT));
    let req = Request::post("/sessions")
        .header("content-type", "application/json")
        .body(Body::from(big))
        .unwrap();
    assert_eq!(send(&app, req).await.0, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn clicks_versions_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_at(dir.path());
    let id = create_image(&app).await;
    let (_, fresh) = get(&app, &format!("/sessions/{id}")).await;
    let fresh: serde_json::Value = serde_json::from_slice(&fresh).unwrap();
    assert_eq!(fresh["slices"][0]["clicks"].as_array().unwrap().len(), 0);
    assert_eq!(fresh["propagation"]["status"], "none");

    let (status, body) = click(&app, &id, 0, 16, 16, "positive").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["mask_version"], 1);
    for (r, c) in [(32, 0), (0, 40), (-1, 3)] {
        assert_eq!(
            click(&app, &id, 0, r, c, "positive").await.0,
            StatusCode::UNPROCESSABLE_ENTITY
        );
    }
    assert_eq!(
        click(&app, &id, 1, 3, 3, "positive").await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    let (status, body) = click(&app, &id, 0, 5, 5, "negative").await;
    assert_eq!((status, body["mask_version"].as_u64()), (StatusCode::OK, Some(2)));

    let (_, summary) = get(&app, &format!("/sessions/{id}")).await;
    let summary: serde_json::Value = serde_json::from_slice(&summary).unwrap();
    assert_eq!(summary["events"], 2);
    let clicks = summary["slices"][0]["clicks"].as_array().unwrap();
    assert_eq!(clicks.len(), 2);
    assert_eq!(clicks[0]["row"], 16);
    assert_eq!(clicks[1]["polarity"], "negative");
    assert_eq!(clicks[1]["ordinal"], 1);

    assert_eq!(
        click(&app, "nosuch", 0, 1, 1, "positive").await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(get(&app, "/sessions/nosuch").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/sessions/..%2F..").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn mask_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_at(dir.path());
    let id = create_image(&app).await;
    click(&app, &id, 0, 16, 16, "positive").await;
    let resp = app
        .clone()
        .oneshot(
            Request::get(format!("/sessions/{id}/mask?slice=0"))
                .body(Body::empty())
                .unwrap(),
        )
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()[header::ETAG], "\"1\"");
    assert_eq!(resp.headers()[header::CONTENT_TYPE], "image/png");
    let (_, a) = mask(&app, &id, 0, None).await;
    let (_, b) = mask(&app, &id, 0, Some(1)).await;
    assert_eq!(a, b);
    let m = crate::mask::Mask2D::from_png_bytes(&a).unwrap();
    assert_eq!(m.dims(), (32, 32));
    let raw = image::load_from_memory(&a).unwrap().into_luma8();
    assert!(raw.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
    assert_eq!(mask(&app, &id, 0, Some(2)).await.0, StatusCode::NOT_FOUND);
    assert_eq!(mask(&app, &id, 3, None).await.0, StatusCode::NOT_FOUND);
    let (status, slice) = get(&app, &format!("/sessions/{id}/slices/0")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(slice, test_image().to_png_bytes());
}

#[tokio::test]
async fn undo_replays_from_remaining_clicks() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_at(dir.path());
    let id = create_image(&app).await;
    assert_eq!(undo(&app, &id, 0).await.0, StatusCode::CONFLICT);
    let (_, empty) = mask(&app, &id, 0, Some(0)).await;

    click(&app, &id, 0, CLICKS[0].0, CLICKS[0].1, CLICKS[0].2).await;
    let (_, one) = mask(&app, &id, 0, None).await;
    assert_ne!(one, empty);
    click(&app, &id, 0, CLICKS[1].0, CLICKS[1].1, CLICKS[1].2).await;
    let (status, body) = undo(&app, &id, 0).await;
    assert_eq!((status, body["mask_version"].as_u64()), (StatusCode::OK, Some(3)));
    let (_, two) = mask(&app, &id, 0, Some(2)).await;
    assert_ne!(two, one);
    assert_eq!(mask(&app, &id, 0, None).await.1, one);
    let (_, body) = undo(&app, &id, 0).await;
    assert_eq!(body["mask_version"], 4);
    assert_eq!(mask(&app, &id, 0, None).await.1, empty);
    // undo then identical re-click reproduces the undone mask
    click(&app, &id, 0, CLICKS[0].0, CLICKS[0].1, CLICKS[0].2).await;
    assert_eq!(mask(&app, &id, 0, None).await.1, one);
    assert_eq!(undo(&app, &id, 5).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn replay_and_restart_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_at(dir.path());
    let a = create_volume(&app, 4).await;
    let b = create_volume(&app, 4).await;
    for id in [&a, &b] {
        for (k, (r, c, p)) in CLICKS.iter().enumerate() {
            click(&app, id, k % 2, *r, *c, p).await;
        }
        undo(&app, id, 0).await;
        click(&app, id, 0, 8, 8, "positive").await;
        json(
            &app,
            "POST",
            &format!("/sessions/{id}/propagate"),
            serde_json::json!({}),
        )
        .await;
    }
    let mut before = Vec::new();
    for slice in 0..2 {
        for v in 0..=3 {
            let (sa, ma) = mask(&app, &a, slice, Some(v)).await;
            let (sb, mb) = mask(&app, &b, slice, Some(v)).await;
            assert_eq!((sa, &ma), (sb, &mb));
            before.push(ma);
        }
    }
    let (_, summary_before) = get(&app, &format!("/sessions/{a}")).await;

    // a new process over the same directory replays the log
    let restarted = app_at(dir.path());
    let mut after = Vec::new();
    for slice in 0..2 {
        for v in 0..=3 {
            after.push(mask(&restarted, &a, slice, Some(v)).await.1);
        }
    }
    assert_eq!(before, after);
    let (_, summary_after) = get(&restarted, &format!("/sessions/{a}")).await;
    let strip = |b: &[u8]| {
        let mut v: serde_json::Value = serde_json::from_slice(b).unwrap();
        v.as_object_mut().unwrap().remove("updated_at");
        v
    };
    assert_eq!(strip(&summary_before), strip(&summary_after));
    for k in 0..4 {
        assert_eq!(
            get(&app, &format!("/sessions/{a}/propagated/{k}")).await,
            get(&restarted, &format!("/sessions/{a}/propagated/{k}")).await
        );
    }
}

#[tokio::test]
async fn propagation_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_at(dir.path());
    let img = create_image(&app).await;
    click(&app, &img, 0, 16, 16, "positive").await;
    let uri = |id: &str| format!("/sessions/{id}/propagate");
    assert_eq!(
        json(&app, "POST", &uri(&img), serde_json::json!({})).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );

    let vol = create_volume(&app, 9).await;
    assert_eq!(
        json(&app, "POST", &uri(&vol), serde_json::json!({})).await.0,
        StatusCode::CONFLICT
    );
    assert_eq!(
        get(&app, &format!("/sessions/{vol}/propagated/0")).await.0,
        StatusCode::NOT_FOUND
    );
    click(&app, &vol, 4, 16, 16, "positive").await;
    let (status, body) = json(&app, "POST", &uri(&vol), serde_json::json!({})).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["job_status"], "done");
    let prov = body["provenance"].as_object().unwrap();
    assert_eq!(prov.len(), 9);
    assert!(prov.values().all(|v| v == 4));
    let (_, seed_png) = mask(&app, &vol, 4, None).await;
    assert_eq!(get(&app, &format!("/sessions/{vol}/propagated/4")).await.1, seed_png);

    // a named seed without clicks is a conflict
    let (status, _) = json(&app, "POST", &uri(&vol), serde_json::json!({ "seed_slices": [1, 4] })).await;
    assert_eq!(status, StatusCode::CONFLICT);

    click(&app, &vol, 0, 16, 16, "positive").await;
    click(&app, &vol, 8, 16, 16, "positive").await;
    let (_, summary) = get(&app, &format!("/sessions/{vol}")).await;
    let summary: serde_json::Value = serde_json::from_slice(&summary).unwrap();
    assert_eq!(summary["propagation"]["stale"], true);
    let (_, body) = json(&app, "POST", &uri(&vol), serde_json::json!({})).await;
    let got: Vec<u64> = (0..9)
        .map(|k| body["provenance"][k.to_string()].as_u64().unwrap())
        .collect();
    let want: Vec<u64> = crate::propagation::nearest_seeds(9, &[0, 4, 8])
        .into_iter()
        .map(|s| s as u64)
        .collect();
    assert_eq!(got, want);
    let provenance_file = dir
        .path()
        .join("sessions")
        .join(&vol)
        .join("masks")
        .join("provenance.json");
    let on_disk: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(provenance_file).unwrap()).unwrap();
    assert_eq!(on_disk, body["provenance"]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_at(dir.path());
    let id = create_image(&app).await;
    click(&app, &id, 0, 16, 16, "positive").await;

    let reads = (0..32).map(|_| {
        let app = app.clone();
        let uri = format!("/sessions/{id}");
        tokio::spawn(async move { get(&app, &uri).await })
    });
    let reads: Vec<_> = futures_join(reads).await;
    assert!(reads.iter().all(|r| r == &reads[0]));

    let writes = (0..8).map(|i| {
        let app = app.clone();
        let id = id.clone();
        tokio::spawn(async move { click(&app, &id, 0, 2 + i, 3, "negative").await })
    });
    let mut versions: Vec<u64> = futures_join(writes)
        .await
        .into_iter()
        .map(|(s, b)| {
            assert_eq!(s, StatusCode::OK);
            b["mask_version"].as_u64().unwrap()
        })
        .collect();
    versions.sort();
    assert_eq!(versions, (2..10).collect::<Vec<_>>());
    let (_, summary) = get(&app, &format!("/sessions/{id}")).await;
    let summary: serde_json::Value = serde_json::from_slice(&summary).unwrap();
    let ordinals: Vec<u64> = summary["slices"][0]["clicks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["ordinal"].as_u64().unwrap())
        .collect();
    assert_eq!(ordinals, (0..9).collect::<Vec<_>>());
}

async fn futures_join<T: Send + 'static>(handles: impl Iterator<Item = tokio::task::JoinHandle<T>>) -> Vec<T> {
    let mut out = Vec::new();
    for h in handles.collect::<Vec<_>>() {
        out.push(h.await.unwrap());
    }
    out
}

#[tokio::test]
async fn cors_layer_answers_preflight() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(
        Arc::new(AppState::new(dir.path(), tiny_weights(), "test")),
        &ServiceConfig {
            cors_origin: Some("http://localhost:5173".into()),
        },
    );
    let req = Request::builder()
        .method("OPTIONS")
        .uri("/sessions")
        .header("origin", "http://localhost:5173")
        .header("access-control-request-method", "POST")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "http://localhost:5173");
}
