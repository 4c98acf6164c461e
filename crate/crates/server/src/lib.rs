//! HTTP interface over concept-canvas runs and review gates.
//!
//! Mutating routes require the static bearer token when one is configured.
//! Stages run on blocking worker threads; `POST /runs/{id}/advance` answers
//! 202 at once and progress arrives through the events endpoint.

mod api_doc;
mod error;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Component, Path as FsPath, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use concept_canvas::config::Config;
use concept_canvas::control::Control;
use concept_canvas::imaging::{decode_rgb, encode_png, resize_exact};
use concept_canvas::pipeline::{Advance, Candidate, Manifest, Mode, NewRun, Pipeline, Selection, Stage, TermEdit};
use serde::Deserialize;
use serde_json::{json, Value};

pub use error::ApiError;

/// Environment variable holding the bearer token.
pub const TOKEN_ENV: &str = "CONCEPT_CANVAS_TOKEN";
pub const DEFAULT_LISTEN: &str = "127.0.0.1:8700";
pub const THUMBNAIL_SIDE: u32 = 256;
const DEFAULT_PAGE_SIZE: usize = 24;
const MAX_PAGE_SIZE: usize = 500;
const MAX_WAIT_MS: u64 = 30_000;
const POLL_INTERVAL: Duration = Duration::from_millis(100);

const PLACEHOLDER_INDEX: &str = "<!doctype html>
<html><head><meta charset=\"utf-8\"><title>concept-canvas</title></head>
<body><h1>concept-canvas</h1>
<p>No studio bundle is installed. The API description is at <a href=\"/api/spec\">/api/spec</a>.</p>
</body></html>
";

type ApiResult<T> = Result<T, ApiError>;

/// Shared server state.
pub struct AppState {
    pipeline: Pipeline,
    base_config: Config,
    token: Option<String>,
    protect_reads: bool,
    ui_dir: Option<PathBuf>,
    /// Runs with a stage executing in the background, with their cancel handle.
    running: Mutex<HashMap<String, Control>>,
}

impl AppState {
    /// `token: None` disables authentication entirely.
    pub fn new(pipeline: Pipeline, base_config: Config, token: Option<String>) -> Self {
        AppState {
            pipeline,
            base_config,
            token,
            protect_reads: false,
            ui_dir: None,
            running: Mutex::new(HashMap::new()),
        }
    }

    /// Require the token on read endpoints too.
    pub fn protect_reads(mut self, yes: bool) -> Self {
        self.protect_reads = yes;
        self
    }

    /// Serve a built studio bundle from this directory at `/`.
    pub fn ui_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.ui_dir = Some(dir.into());
        self
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    /// True while a background stage runs for `run_id`.
    pub fn is_running(&self, run_id: &str) -> bool {
        self.running.lock().unwrap().contains_key(run_id)
    }

    /// Asks every background stage to stop at its next checkpoint.
    pub fn cancel_all(&self) {
        for control in self.running.lock().unwrap().values() {
            control.cancel();
        }
    }

    fn authorize(&self, headers: &HeaderMap) -> ApiResult<()> {
        let Some(expected) = &self.token else { return Ok(()) };
        let given = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .unwrap_or("");
        if constant_time_eq(given.as_bytes(), expected.as_bytes()) {
            Ok(())
        } else {
            Err(ApiError::unauthorized())
        }
    }

    fn authorize_read(&self, headers: &HeaderMap) -> ApiResult<()> {
        if self.protect_reads {
            self.authorize(headers)
        } else {
            Ok(())
        }
    }
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/runs", get(list_runs).post(create_run))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/advance", post(advance))
        .route("/runs/{id}/gates/current", get(current_gate))
        .route("/runs/{id}/gates/{gate}/selection", post(select))
        .route("/runs/{id}/events", get(events))
        .route("/runs/{id}/artifacts/{*name}", get(artifact))
        .route("/runs/{id}/thumbnails/{*name}", get(thumbnail))
        .route("/api/spec", get(spec))
        .route("/api/ui-config", get(ui_config))
        .route("/", get(index))
        .fallback(static_asset)
        .with_state(state)
}

/// Binds `addr` and serves until Ctrl-C. Background stages are cancelled on
/// shutdown and stay resumable at the stage they were in.
pub async fn serve(addr: SocketAddr, state: Shared) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    let app = router(state.clone());
    let shutdown = async move {
        let _ = tokio::signal::ctrl_c().await;
        log::info!("shutting down; cancelling background stages");
        state.cancel_all();
    };
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}

/// Runs pipeline work off the async threads.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> concept_canvas::Result<T> + Send + 'static,
    T: Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())),
    }
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    let body: &[u8] = if body.is_empty() { b"{}" } else { body };
    serde_json::from_slice(body).map_err(|e| ApiError::bad_body(&e))
}

fn actor(headers: &HeaderMap, given: Option<String>) -> String {
    given
        .filter(|a| !a.trim().is_empty())
        .or_else(|| headers.get("x-client-id").and_then(|v| v.to_str().ok()).map(str::to_string))
        .unwrap_or_else(|| "api".into())
}

async fn list_runs(State(st): State<Shared>, headers: HeaderMap) -> ApiResult<Json<Value>> {
    st.authorize_read(&headers)?;
    let st2 = st.clone();
    let ids = blocking(move || st2.pipeline.list_runs()).await?;
    Ok(Json(json!({ "runs": ids })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRunBody {
    theme: String,
    corpus: PathBuf,
    #[serde(default)]
    mode: Option<String>,
    #[serde(default)]
    run_id: Option<String>,
    /// Dotted config keys to values, applied over the server's base config.
    #[serde(default)]
    config: BTreeMap<String, Value>,
    /// Start from the small preset instead of the server's base config.
    #[serde(default)]
    toy: bool,
}

async fn create_run(State(st): State<Shared>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    st.authorize(&headers)?;
    let body: CreateRunBody = parse_json(&body)?;
    let field_error = |field: &str, msg: String| {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_body", msg).with_details(json!({ "field": field }))
    };
    if body.theme.trim().is_empty() {
        return Err(field_error("theme", "theme must not be empty".into()));
    }
    let mode = match body.mode.as_deref() {
        None => Mode::Generative,
        Some(s) => Mode::parse(s).ok_or_else(|| field_error("mode", format!("unknown mode {s:?}")))?,
    };
    let mut config = if body.toy { Config::toy() } else { st.base_config.clone() };
    for (key, value) in body.config {
        config = config
            .with_value(&key, value)
            .map_err(|e| field_error(&format!("config.{key}"), e.to_string()))?;
    }
    let req = NewRun {
        run_id: body.run_id,
        theme: body.theme,
        corpus: body.corpus,
        mode,
        config,
    };
    let st2 = st.clone();
    let m = blocking(move || st2.pipeline.create_run(req)).await?;
    Ok((StatusCode::CREATED, Json(json!({"run_id": m.run_id, "stage": m.stage}))).into_response())
}

async fn get_run(State(st): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<Json<Manifest>> {
    st.authorize_read(&headers)?;
    let st2 = st.clone();
    Ok(Json(blocking(move || st2.pipeline.load(&id)).await?))
}

#[derive(Deserialize)]
struct PageQuery {
    page: Option<usize>,
    size: Option<usize>,
}

/// Items of a 1-based page.
fn page_of<T: Clone>(items: &[T], page: usize, size: usize) -> Vec<T> {
    let start = (page - 1).saturating_mul(size);
    items.iter().skip(start).take(size).cloned().collect()
}

async fn current_gate(
    State(st): State<Shared>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(q): Query<PageQuery>,
) -> ApiResult<Json<Value>> {
    st.authorize_read(&headers)?;
    let page = q.page.unwrap_or(1);
    let size = q.size.unwrap_or(DEFAULT_PAGE_SIZE);
    if page == 0 || size == 0 || size > MAX_PAGE_SIZE {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "invalid_query",
            format!("page must be >= 1 and size in 1..={MAX_PAGE_SIZE}"),
        ));
    }
    let st2 = st.clone();
    let run = id.clone();
    let desc = blocking(move || st2.pipeline.current_gate(&run)).await?;
    let total = desc.candidates.len();
    let candidates: Vec<Value> = page_of(&desc.candidates, page, size)
        .into_iter()
        .map(|c| candidate_json(&id, c))
        .collect();
    Ok(Json(json!({
        "gate": desc.gate,
        "min_select": desc.min_select,
        "max_select": desc.max_select,
        "editable_terms": desc.editable_terms,
        "page": page,
        "size": size,
        "total": total,
        "pages": total.div_ceil(size),
        "candidates": candidates,
    })))
}

fn candidate_json(run_id: &str, c: Candidate) -> Value {
    let urls = c.artifact.as_ref().map(|a| {
        (
            format!("/runs/{run_id}/artifacts/{a}"),
            format!("/runs/{run_id}/thumbnails/{a}"),
        )
    });
    let mut v = serde_json::to_value(&c).expect("candidate serializes");
    if let Some((artifact_url, thumbnail_url)) = urls {
        v["artifact_url"] = json!(artifact_url);
        v["thumbnail_url"] = json!(thumbnail_url);
    }
    v
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectionBody {
    #[serde(default)]
    ids: Vec<String>,
    #[serde(default)]
    terms: Option<TermEdit>,
    #[serde(default)]
    concept_query: Option<String>,
    #[serde(default)]
    actor: Option<String>,
}

async fn select(
    State(st): State<Shared>,
    headers: HeaderMap,
    Path((id, gate)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<Json<Manifest>> {
    st.authorize(&headers)?;
    let gate = Stage::parse(&gate).ok_or_else(|| ApiError::not_found(format!("gate {gate}")))?;
    let body: SelectionBody = parse_json(&body)?;
    let who = actor(&headers, body.actor);
    let selection = Selection {
        ids: body.ids,
        terms: body.terms,
        concept_query: body.concept_query,
    };
    let st2 = st.clone();
    let run = id.clone();
    let m = blocking(move || st2.pipeline.resolve_gate(&run, gate, selection, &who)).await?;
    if m.config.api.auto_advance && !m.stage.is_gate() && !m.stage.is_terminal() {
        start_background(&st, &id, true)?;
    }
    Ok(Json(m))
}

async fn advance(State(st): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<Response> {
    st.authorize(&headers)?;
    let st2 = st.clone();
    let run = id.clone();
    let m = blocking(move || st2.pipeline.load(&run)).await?;
    match m.stage {
        Stage::Done => return Err(ApiError::from(concept_canvas::Error::Conflict(format!("run {id} is DONE")))),
        Stage::Failed => {
            return Err(ApiError::from(concept_canvas::Error::Conflict(format!("run {id} FAILED"))));
        }
        s if s.is_gate() => {
            return Ok((StatusCode::OK, Json(json!({"status": "blocked", "stage": s}))).into_response());
        }
        _ => {}
    }
    start_background(&st, &id, false)?;
    Ok((StatusCode::ACCEPTED, Json(json!({"status": "started", "stage": m.stage}))).into_response())
}

/// Starts one stage (or every stage up to the next gate) on a worker thread.
/// At most one job runs per run; the pipeline's lock backs this up across
/// processes.
fn start_background(st: &Shared, run_id: &str, until_blocked: bool) -> ApiResult<()> {
    let control = Control::new();
    {
        let mut running = st.running.lock().unwrap();
        if running.contains_key(run_id) {
            return Err(ApiError::from(concept_canvas::Error::Busy(run_id.to_string())));
        }
        running.insert(run_id.to_string(), control.clone());
    }
    let st = st.clone();
    let run = run_id.to_string();
    tokio::task::spawn_blocking(move || {
        let result = if until_blocked {
            st.pipeline.run_until_blocked(&run, false, &control).map(|_| ())
        } else {
            st.pipeline.advance(&run, &control).map(|a| {
                if let Advance::Completed { from, to } = a {
                    log::debug!("run {run}: {from} -> {to}");
                }
            })
        };
        if let Err(e) = result {
            log::warn!("run {run}: background stage ended with: {e}");
        }
        st.running.lock().unwrap().remove(&run);
    });
    Ok(())
}

#[derive(Deserialize)]
struct EventsQuery {
    #[serde(default)]
    after_seq: u64,
    #[serde(default)]
    wait_ms: u64,
}

async fn events(
    State(st): State<Shared>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
) -> ApiResult<Json<Value>> {
    st.authorize_read(&headers)?;
    let deadline = tokio::time::Instant::now() + Duration::from_millis(q.wait_ms.min(MAX_WAIT_MS));
    loop {
        let st2 = st.clone();
        let run = id.clone();
        let after = q.after_seq;
        let batch = blocking(move || st2.pipeline.events(&run, after)).await?;
        if !batch.is_empty() || tokio::time::Instant::now() >= deadline {
            let last_seq = batch.last().map_or(q.after_seq, |e| e.seq);
            return Ok(Json(json!({"events": batch, "last_seq": last_seq})));
        }
        tokio::time::sleep(POLL_INTERVAL).await;
    }
}

fn content_type(name: &str) -> &'static str {
    match FsPath::new(name).extension().and_then(|e| e.to_str()).unwrap_or("") {
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "json" => "application/json",
        "jsonl" => "application/x-ndjson",
        "csv" => "text/csv; charset=utf-8",
        "toml" | "txt" | "log" => "text/plain; charset=utf-8",
        _ => "application/octet-stream",
    }
}

fn resolve_alias(name: &str) -> &str {
    match name {
        "final.png" => "final/final.png",
        "provenance.json" => "final/provenance.json",
        other => other,
    }
}

/// Only files recorded in the manifest are served, by run-relative path.
async fn recorded_artifact(st: &Shared, id: &str, name: &str) -> ApiResult<(PathBuf, String, String)> {
    let path = resolve_alias(name).to_string();
    let st2 = st.clone();
    let run = id.to_string();
    let (dir, m) = blocking(move || Ok((st2.pipeline.run_dir(&run)?, st2.pipeline.load(&run)?))).await?;
    let art = m
        .artifact(&path)
        .ok_or_else(|| ApiError::not_found(format!("artifact {name} of run {id}")))?;
    Ok((dir, path.clone(), art.sha256.clone()))
}

async fn artifact(
    State(st): State<Shared>,
    headers: HeaderMap,
    Path((id, name)): Path<(String, String)>,
) -> ApiResult<Response> {
    st.authorize_read(&headers)?;
    let (dir, path, sha) = recorded_artifact(&st, &id, &name).await?;
    let bytes = tokio::fs::read(dir.join(&path))
        .await
        .map_err(|e| ApiError::not_found(format!("artifact {name}: {e}")))?;
    let mut resp = (StatusCode::OK, bytes).into_response();
    resp.headers_mut()
        .insert(header::CONTENT_TYPE, HeaderValue::from_static(content_type(&path)));
    if let Ok(etag) = HeaderValue::from_str(&format!("\"{sha}\"")) {
        resp.headers_mut().insert(header::ETAG, etag);
    }
    Ok(resp)
}

/// Longest side scaled to `THUMBNAIL_SIDE`; smaller images are kept as is.
fn make_thumbnail(bytes: &[u8]) -> concept_canvas::Result<Vec<u8>> {
    let img = decode_rgb(bytes)?;
    let (w, h) = img.dimensions();
    let longest = w.max(h);
    if longest <= THUMBNAIL_SIDE {
        return Ok(encode_png(&img));
    }
    let scale = THUMBNAIL_SIDE as f64 / longest as f64;
    let tw = ((w as f64 * scale).round() as u32).max(1);
    let th = ((h as f64 * scale).round() as u32).max(1);
    Ok(encode_png(&resize_exact(&img, tw, th)))
}

/// Thumbnails are built on first request and cached under the artifact's hash.
async fn thumbnail(
    State(st): State<Shared>,
    headers: HeaderMap,
    Path((id, name)): Path<(String, String)>,
) -> ApiResult<Response> {
    st.authorize_read(&headers)?;
    let (dir, path, sha) = recorded_artifact(&st, &id, &name).await?;
    if !matches!(content_type(&path), "image/png" | "image/jpeg") {
        return Err(ApiError::not_found(format!("{name} is not an image")));
    }
    let bytes = blocking(move || {
        let cached = dir.join("thumbnails").join(format!("{sha}.png"));
        if let Ok(b) = std::fs::read(&cached) {
            return Ok(b);
        }
        let src = dir.join(&path);
        let original = std::fs::read(&src).map_err(|e| concept_canvas::Error::NotFound(format!("{}: {e}", src.display())))?;
        let thumb = make_thumbnail(&original)?;
        let tmp = cached.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            std::fs::create_dir_all(cached.parent().expect("has parent"))?;
            std::fs::write(&tmp, &thumb)?;
            std::fs::rename(&tmp, &cached)
        };
        if let Err(e) = write() {
            log::warn!("could not cache thumbnail {}: {e}", cached.display());
        }
        Ok(thumb)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn spec() -> Json<Value> {
    Json(api_doc::document())
}

/// Bootstrap settings for the studio UI. The token itself is never served;
/// the UI asks the editor for it when `auth_required` is set.
async fn ui_config(State(st): State<Shared>) -> Json<Value> {
    Json(json!({
        "api_base": "",
        "auth_required": st.token.is_some(),
        "reads_require_auth": st.token.is_some() && st.protect_reads,
        "token_env": TOKEN_ENV,
        "page_size": DEFAULT_PAGE_SIZE,
        "thumbnail_side": THUMBNAIL_SIDE,
        "events_wait_ms": 10_000,
        "version": env!("CARGO_PKG_VERSION"),
    }))
}

async fn index(State(st): State<Shared>) -> Response {
    if let Some(dir) = &st.ui_dir {
        if let Ok(b) = tokio::fs::read(dir.join("index.html")).await {
            return ([(header::CONTENT_TYPE, "text/html; charset=utf-8")], b).into_response();
        }
    }
    Html(PLACEHOLDER_INDEX).into_response()
}

/// Files of the studio bundle; anything that escapes the bundle dir is a 404.
async fn static_asset(State(st): State<Shared>, uri: axum::http::Uri) -> ApiResult<Response> {
    let missing = || ApiError::not_found(format!("no route for {}", uri.path()));
    let dir = st.ui_dir.as_ref().ok_or_else(missing)?;
    let rel = FsPath::new(uri.path().trim_start_matches('/'));
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Err(missing());
    }
    let bytes = tokio::fs::read(dir.join(rel)).await.map_err(|_| missing())?;
    let ct = match rel.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") => "text/javascript",
        Some("css") => "text/css",
        Some("svg") => "image/svg+xml",
        _ => content_type(uri.path()),
    };
    Ok(([(header::CONTENT_TYPE, ct)], bytes).into_response())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pages_are_one_based() {
        let items: Vec<u32> = (1..=25).collect();
        assert_eq!(page_of(&items, 2, 10), (11..=20).collect::<Vec<_>>());
        assert_eq!(page_of(&items, 3, 10), vec![21, 22, 23, 24, 25]);
        assert!(page_of(&items, 4, 10).is_empty());
    }

    #[test]
    fn token_comparison() {
        assert!(constant_time_eq(b"abc", b"abc"));
        assert!(!constant_time_eq(b"abc", b"abd"));
        assert!(!constant_time_eq(b"abc", b"abcd"));
    }

    #[test]
    fn thumbnails_keep_aspect() {
        let img = concept_canvas::imaging::RgbImage::new(1024, 512);
        let thumb = decode_rgb(&make_thumbnail(&encode_png(&img)).unwrap()).unwrap();
        assert_eq!(thumb.dimensions(), (256, 128));
    }
}
