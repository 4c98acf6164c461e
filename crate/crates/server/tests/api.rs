use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use concept_canvas::config::Config;
use concept_canvas::fixtures::write_offline_fixture;
use concept_canvas::pipeline::Pipeline;
use concept_canvas_server::{router, AppState};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const TOKEN: &str = "s3cret";

struct Harness {
    _tmp: tempfile::TempDir,
    state: Arc<AppState>,
    app: Router,
    corpus: String,
    images: String,
}

fn harness() -> Harness {
    let tmp = tempfile::tempdir().unwrap();
    let fixture = write_offline_fixture(&tmp.path().join("fixture")).unwrap();
    let state = Arc::new(AppState::new(
        Pipeline::new(tmp.path().join("runs")),
        Config::toy(),
        Some(TOKEN.into()),
    ));
    Harness {
        app: router(state.clone()),
        state,
        corpus: fixture.corpus.display().to_string(),
        images: fixture.images.display().to_string(),
        _tmp: tmp,
    }
}

struct Reply {
    status: StatusCode,
    content_type: String,
    bytes: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or_else(|e| panic!("not JSON ({e}): {:?}", String::from_utf8_lossy(&self.bytes)))
    }
}

async fn call(app: &Router, method: &str, uri: &str, token: Option<&str>, body: Option<Value>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let content_type = resp
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_string())
        .unwrap_or_default();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply {
        status,
        content_type,
        bytes,
    }
}

fn assert_error_schema(r: &Reply) {
    let v = r.json();
    assert!(v["code"].is_string(), "{v}");
    assert!(v["message"].is_string(), "{v}");
    assert!(v.get("details").is_some(), "{v}");
}

async fn create(h: &Harness, run_id: &str) -> Reply {
    call(
        &h.app,
        "POST",
        "/runs",
        Some(TOKEN),
        Some(json!({
            "run_id": run_id, "theme": "ai", "corpus": h.corpus, "toy": true,
            "config": {"provider.root": h.images},
        })),
    )
    .await
}

async fn wait_idle(h: &Harness, run_id: &str) {
    let start = Instant::now();
    while h.state.is_running(run_id) {
        assert!(start.elapsed() < Duration::from_secs(600), "stage never finished");
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}

/// Advances through automated stages until the run waits at a gate or is done.
async fn drive(h: &Harness, run_id: &str) -> String {
    loop {
        let r = call(&h.app, "POST", &format!("/runs/{run_id}/advance"), Some(TOKEN), None).await;
        match r.status {
            StatusCode::ACCEPTED => wait_idle(h, run_id).await,
            StatusCode::OK => return r.json()["stage"].as_str().unwrap().to_string(),
            StatusCode::CONFLICT => {
                let m = call(&h.app, "GET", &format!("/runs/{run_id}"), None, None).await.json();
                return m["stage"].as_str().unwrap().to_string();
            }
            other => panic!("advance answered {other}: {:?}", r.json()),
        }
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn full_lifecycle_over_http() {
    let h = harness();
    let r = create(&h, "life").await;
    assert_eq!(r.status, StatusCode::CREATED);
    assert_eq!(r.json(), json!({"run_id": "life", "stage": "CORPUS"}));

    let r = call(&h.app, "GET", "/runs/life/gates/current", None, None).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_error_schema(&r);

    let r = call(&h.app, "GET", "/runs/life/artifacts/final.png", None, None).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_error_schema(&r);

    // term review: approve as extracted
    assert_eq!(drive(&h, "life").await, "TERM_REVIEW");
    let gate = call(&h.app, "GET", "/runs/life/gates/current?size=100", None, None).await.json();
    assert_eq!(gate["gate"], "TERM_REVIEW");
    assert_eq!(gate["editable_terms"], true);
    let r = call(&h.app, "POST", "/runs/life/gates/TERM_REVIEW/selection", Some(TOKEN), Some(json!({}))).await;
    assert_eq!(r.status, StatusCode::OK);

    // concept selection
    assert_eq!(drive(&h, "life").await, "CONCEPT_SELECTION");
    let gate = call(&h.app, "GET", "/runs/life/gates/current", None, None).await.json();
    assert_eq!((gate["min_select"].as_u64(), gate["max_select"].as_u64()), (Some(1), Some(1)));
    let first = gate["candidates"][0].clone();
    let second = gate["candidates"][1]["id"].clone();
    assert!(first["thumbnail_url"].is_string());

    let thumb = call(&h.app, "GET", first["thumbnail_url"].as_str().unwrap(), None, None).await;
    assert_eq!(thumb.status, StatusCode::OK);
    assert_eq!(thumb.content_type, "image/png");
    let img = concept_canvas::imaging::decode_rgb(&thumb.bytes).unwrap();
    assert!(img.width() <= 256 && img.height() <= 256);

    let r = call(
        &h.app,
        "POST",
        "/runs/life/gates/CONCEPT_SELECTION/selection",
        Some(TOKEN),
        Some(json!({"ids": [first["id"], second]})),
    )
    .await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_error_schema(&r);

    let sel = json!({"ids": [first["id"]], "actor": "photo-desk"});
    let r = call(&h.app, "POST", "/runs/life/gates/CONCEPT_SELECTION/selection", Some(TOKEN), Some(sel.clone())).await;
    assert_eq!(r.status, StatusCode::OK);
    let m = r.json();
    assert_eq!(m["stage"], "CONCEPT_HARVEST");
    let decision = m["gate_decisions"].as_array().unwrap().last().unwrap().clone();
    assert_eq!(decision["gate"], "CONCEPT_SELECTION");
    assert_eq!(decision["actor"], "photo-desk");
    // read-your-writes: the GET shows exactly what the POST returned
    let after = call(&h.app, "GET", "/runs/life", None, None).await.json();
    assert_eq!(after, m);

    let r = call(&h.app, "POST", "/runs/life/gates/CONCEPT_SELECTION/selection", Some(TOKEN), Some(sel)).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_error_schema(&r);

    let r = call(&h.app, "POST", "/runs/life/gates/NOT_A_GATE/selection", Some(TOKEN), Some(json!({}))).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);

    // candidate selection lists generated samples with thumbnails
    assert_eq!(drive(&h, "life").await, "CANDIDATE_SELECTION");
    let gate = call(&h.app, "GET", "/runs/life/gates/current", None, None).await.json();
    let cands = gate["candidates"].as_array().unwrap();
    assert_eq!(cands.len(), 4);
    for c in cands {
        assert!(c["thumbnail_url"].as_str().unwrap().starts_with("/runs/life/thumbnails/"));
    }
    let ids: Vec<Value> = cands.iter().take(2).map(|c| c["id"].clone()).collect();
    let r = call(&h.app, "POST", "/runs/life/gates/CANDIDATE_SELECTION/selection", Some(TOKEN), Some(json!({"ids": ids}))).await;
    assert_eq!(r.status, StatusCode::OK);

    assert_eq!(drive(&h, "life").await, "FINAL_SELECTION");
    let gate = call(&h.app, "GET", "/runs/life/gates/current", None, None).await.json();
    let pick = gate["candidates"][0]["id"].clone();
    let r = call(&h.app, "POST", "/runs/life/gates/FINAL_SELECTION/selection", Some(TOKEN), Some(json!({"ids": [pick]}))).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json()["stage"], "DONE");

    let r = call(&h.app, "GET", "/runs/life/artifacts/final.png", None, None).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.content_type, "image/png");
    concept_canvas::imaging::decode_rgb(&r.bytes).unwrap();
    let r = call(&h.app, "GET", "/runs/life/artifacts/final/provenance.json", None, None).await;
    assert_eq!(r.content_type, "application/json");
    assert_eq!(r.json()["theme"], "ai");

    let r = call(&h.app, "POST", "/runs/life/advance", Some(TOKEN), None).await;
    assert_eq!(r.status, StatusCode::CONFLICT);

    // the event stream: strictly increasing, cursor honoured
    let all = call(&h.app, "GET", "/runs/life/events", None, None).await.json();
    let seqs: Vec<u64> = all["events"].as_array().unwrap().iter().map(|e| e["seq"].as_u64().unwrap()).collect();
    assert!(seqs.len() > 10);
    assert!(seqs.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(all["last_seq"].as_u64(), seqs.last().copied());
    let tail = call(&h.app, "GET", "/runs/life/events?after_seq=5", None, None).await.json();
    let tail: Vec<u64> = tail["events"].as_array().unwrap().iter().map(|e| e["seq"].as_u64().unwrap()).collect();
    assert_eq!(tail.first(), Some(&6));
    assert_eq!(tail, seqs.iter().copied().filter(|s| *s >= 6).collect::<Vec<_>>());
    let kinds: Vec<String> = all["events"].as_array().unwrap().iter().map(|e| e["kind"].as_str().unwrap().to_string()).collect();
    assert_eq!(kinds.last().map(String::as_str), Some("run_done"));

    // long-poll with nothing new returns empty after the wait
    let start = Instant::now();
    let last = seqs.last().unwrap();
    let r = call(&h.app, "GET", &format!("/runs/life/events?after_seq={last}&wait_ms=300"), None, None).await.json();
    assert!(r["events"].as_array().unwrap().is_empty());
    assert_eq!(r["last_seq"].as_u64(), Some(*last));
    assert!(start.elapsed() >= Duration::from_millis(250));

    let thumbs = std::fs::read_dir(h.state.pipeline().run_dir("life").unwrap().join("thumbnails")).unwrap().count();
    assert_eq!(thumbs, 1);
}

#[tokio::test]
async fn bad_token_creates_nothing() {
    let h = harness();
    for token in [None, Some("wrong")] {
        let r = call(
            &h.app,
            "POST",
            "/runs",
            token,
            Some(json!({"run_id": "nope", "theme": "ai", "corpus": h.corpus})),
        )
        .await;
        assert_eq!(r.status, StatusCode::UNAUTHORIZED);
        assert_error_schema(&r);
    }
    let list = call(&h.app, "GET", "/runs", None, None).await.json();
    assert_eq!(list["runs"], json!([]));
    assert!(!h.state.pipeline().root().join("nope").exists());

    let r = call(&h.app, "POST", "/runs/nope/advance", None, None).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
}

#[tokio::test]
async fn body_validation_names_the_field() {
    let h = harness();
    let r = call(&h.app, "POST", "/runs", Some(TOKEN), Some(json!({"corpus": h.corpus}))).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_error_schema(&r);
    assert_eq!(r.json()["details"]["field"], "theme");

    let r = call(
        &h.app,
        "POST",
        "/runs",
        Some(TOKEN),
        Some(json!({"theme": "ai", "corpus": h.corpus, "config": {"began.gamma": 7.0}})),
    )
    .await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(r.json()["details"]["field"], "config.began.gamma");

    let r = call(&h.app, "POST", "/runs", Some(TOKEN), Some(json!({"theme": "ai", "corpus": h.corpus, "mode": "SIDEWAYS"}))).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(r.json()["details"]["field"], "mode");
}

#[tokio::test]
async fn duplicate_and_unknown_runs() {
    let h = harness();
    assert_eq!(create(&h, "dup").await.status, StatusCode::CREATED);
    let r = create(&h, "dup").await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_error_schema(&r);
    let r = call(&h.app, "GET", "/runs/ghost", None, None).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_error_schema(&r);
    let r = call(&h.app, "GET", "/runs/dup/artifacts/manifest.json", None, None).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND, "only recorded artifacts are served");
    let r = call(&h.app, "GET", "/runs/dup/artifacts/../../etc/passwd", None, None).await;
    assert_ne!(r.status, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread")]
async fn gate_candidates_are_paginated() {
    let h = harness();
    let r = call(
        &h.app,
        "POST",
        "/runs",
        Some(TOKEN),
        Some(json!({"run_id": "pages", "theme": "ai", "corpus": h.corpus, "toy": true, "config": {"gates.term_review": "manual", "provider.root": h.images}})),
    )
    .await;
    assert_eq!(r.status, StatusCode::CREATED);
    assert_eq!(drive(&h, "pages").await, "TERM_REVIEW");
    let full = call(&h.app, "GET", "/runs/pages/gates/current?size=500", None, None).await.json();
    let all: Vec<Value> = full["candidates"].as_array().unwrap().clone();
    assert_eq!(full["total"].as_u64(), Some(all.len() as u64));
    assert!(all.len() > 10);

    let p2 = call(&h.app, "GET", "/runs/pages/gates/current?page=2&size=5", None, None).await.json();
    assert_eq!(p2["page"], 2);
    assert_eq!(p2["candidates"].as_array().unwrap(), &all[5..10].to_vec());
    let ranks: Vec<u64> = p2["candidates"].as_array().unwrap().iter().map(|c| c["rank"].as_u64().unwrap()).collect();
    assert_eq!(ranks, vec![6, 7, 8, 9, 10]);

    let r = call(&h.app, "GET", "/runs/pages/gates/current?page=0", None, None).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn bootstrap_endpoints() {
    let h = harness();
    let ui = call(&h.app, "GET", "/api/ui-config", None, None).await.json();
    assert_eq!(ui["auth_required"], true);
    assert!(!ui.to_string().contains(TOKEN), "the token is never served");
    let spec = call(&h.app, "GET", "/api/spec", None, None).await.json();
    assert!(spec["paths"]["/runs/{id}/gates/{gate}/selection"]["post"].is_object());
    let index = call(&h.app, "GET", "/", None, None).await;
    assert_eq!(index.status, StatusCode::OK);
    assert!(index.content_type.starts_with("text/html"));
}

#[tokio::test]
async fn protected_reads_need_the_token() {
    let tmp = tempfile::tempdir().unwrap();
    let state = Arc::new(AppState::new(Pipeline::new(tmp.path()), Config::toy(), Some(TOKEN.into())).protect_reads(true));
    let app = router(state);
    assert_eq!(call(&app, "GET", "/runs", None, None).await.status, StatusCode::UNAUTHORIZED);
    assert_eq!(call(&app, "GET", "/runs", Some(TOKEN), None).await.status, StatusCode::OK);
}
