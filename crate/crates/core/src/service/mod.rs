//! HTTP session service.
//!
//! Sessions live under `<data>/sessions/<id>/` and are loaded lazily by
//! replaying their event log. Mutations on one session are serialized
//! (FIFO through a fair lock); reads share the lock.

mod store;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use tokio::sync::RwLock;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use crate::clicks::Polarity;
use crate::mask::GrayF64;
use crate::model::Weights;
use crate::propagation::PropagationConfig;

pub use store::{Applied, Event, Session, SessionKind, SessionMeta, SessionSummary};

pub const DATA_DIR_ENV: &str = "ISEG_DATA_DIR";
pub const BODY_LIMIT: usize = 64 * 1024 * 1024;

/// `$ISEG_DATA_DIR`, else `./data`.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

#[derive(Debug)]
pub enum ApiError {
    BadRequest(String),
    NotFound(String),
    Conflict(String),
    Unprocessable(String),
    PayloadTooLarge,
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::PayloadTooLarge => StatusCode::PAYLOAD_TOO_LARGE,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        let message = match self {
            ApiError::BadRequest(m)
            | ApiError::NotFound(m)
            | ApiError::Conflict(m)
            | ApiError::Unprocessable(m)
            | ApiError::Internal(m) => m,
            ApiError::PayloadTooLarge => format!("request body over {BODY_LIMIT} bytes"),
        };
        (status, Json(serde_json::json!({ "error": message }))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        if r.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ApiError::PayloadTooLarge
        } else {
            ApiError::BadRequest(r.body_text())
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ServiceConfig {
    /// Origin allowed by CORS; `*` allows any.
    pub cors_origin: Option<String>,
}

pub struct AppState {
    root: PathBuf,
    weights: Arc<Weights>,
    weights_ref: String,
    sessions: Mutex<HashMap<String, Arc<RwLock<Session>>>>,
}

type Shared = Arc<AppState>;

impl AppState {
    pub fn new(data_dir: &Path, weights: Weights, weights_ref: impl Into<String>) -> Self {
        AppState {
            root: data_dir.join("sessions"),
            weights: Arc::new(weights),
            weights_ref: weights_ref.into(),
            sessions: Mutex::new(HashMap::new()),
        }
    }

    fn session_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    async fn session(self: &Arc<Self>, id: &str) -> Result<Arc<RwLock<Session>>, ApiError> {
        if let Some(s) = self.sessions.lock().expect("session map").get(id) {
            return Ok(s.clone());
        }
        let valid = !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric());
        let dir = self.session_dir(id);
        if !valid || !dir.join("meta.json").is_file() {
            return Err(ApiError::NotFound(format!("session {id}")));
        }
        let state = self.clone();
        let loaded = tokio::task::spawn_blocking(move || Session::load(dir, &state.weights))
            .await
            .map_err(|e| ApiError::Internal(e.to_string()))??;
        let mut map = self.sessions.lock().expect("session map");
        Ok(map
            .entry(id.to_string())
            .or_insert_with(|| Arc::new(RwLock::new(loaded)))
            .clone())
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
pub struct SessionOptions {
    pub propagation: Option<PropagationConfig>,
}

/// Either `image` (one base64 PNG) or `volume` (base64 PNG slices in order).
#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub image: Option<String>,
    pub volume: Option<Vec<String>>,
    #[serde(default)]
    pub config: SessionOptions,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
    pub kind: SessionKind,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Deserialize)]
pub struct ClickRequest {
    #[serde(default)]
    pub slice: usize,
    pub row: usize,
    pub col: usize,
    pub polarity: Polarity,
}

#[derive(Debug, Default, Deserialize)]
pub struct SliceQuery {
    #[serde(default)]
    pub slice: usize,
    pub version: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
pub struct PropagateRequest {
    pub seed_slices: Option<Vec<usize>>,
}

fn decode_png(b64: &str) -> Result<GrayF64, ApiError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64.trim())
        .map_err(|e| ApiError::BadRequest(format!("invalid base64: {e}")))?;
    GrayF64::from_png_bytes(&bytes).map_err(|e| ApiError::BadRequest(format!("invalid image: {e}")))
}

fn png_response(bytes: Vec<u8>, etag: Option<u64>) -> Response {
    let mut resp = ([(header::CONTENT_TYPE, "image/png")], bytes).into_response();
    if let Some(v) = etag {
        resp.headers_mut().insert(
            header::ETAG,
            HeaderValue::from_str(&format!("\"{v}\"")).expect("ascii etag"),
        );
    }
    resp
}

async fn health() -> &'static str {
    "ok"
}

async fn create_session(
    State(app): State<Shared>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<Created>), ApiError> {
    let Json(req) = body?;
    let (kind, encoded) = match (req.image, req.volume) {
        (Some(img), None) => (SessionKind::Image, vec![img]),
        (None, Some(v)) if !v.is_empty() => (SessionKind::Volume, v),
        _ => {
            return Err(ApiError::BadRequest(
                "send exactly one of `image` or a non-empty `volume`".into(),
            ))
        }
    };
    let propagation = req.config.propagation.unwrap_or_default();
    let session_id = format!("{:032x}", rand::random::<u128>());
    let dir = app.session_dir(&session_id);
    let weights_ref = app.weights_ref.clone();
    let id = session_id.clone();
    let session = tokio::task::spawn_blocking(move || {
        let images = encoded.iter().map(|s| decode_png(s)).collect::<Result<Vec<_>, _>>()?;
        let made = Session::create(dir.clone(), id, kind, images, weights_ref, propagation);
        if made.is_err() {
            let _ = std::fs::remove_dir_all(&dir);
        }
        made
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    let created = Created {
        session_id: session_id.clone(),
        kind,
        depth: session.meta.depth,
        height: session.meta.height,
        width: session.meta.width,
    };
    app.sessions
        .lock()
        .expect("session map")
        .insert(session_id, Arc::new(RwLock::new(session)));
    Ok((StatusCode::CREATED, Json(created)))
}

async fn get_session(
    State(app): State<Shared>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<SessionSummary>, ApiError> {
    let s = app.session(&id).await?;
    let summary = s.read().await.summary();
    Ok(Json(summary))
}

/// Runs one event on the blocking pool while holding the session's write
/// lock, so mutations queue in arrival order.
async fn mutate<F>(app: &Shared, id: &str, event: F) -> Result<Applied, ApiError>
where
    F: FnOnce(&Session) -> Event + Send + 'static,
{
    let s = app.session(id).await?;
    let mut guard = s.write_owned().await;
    let weights = app.weights.clone();
    tokio::task::spawn_blocking(move || {
        let ev = event(&guard);
        guard.record(ev, &weights)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?
}

async fn add_click(
    State(app): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<ClickRequest>, JsonRejection>,
) -> Result<Json<Applied>, ApiError> {
    let Json(c) = body.map_err(|r| match ApiError::from(r) {
        ApiError::BadRequest(m) => ApiError::Unprocessable(m),
        other => other,
    })?;
    let event = Event::Click {
        slice: c.slice,
        row: c.row,
        col: c.col,
        polarity: c.polarity,
    };
    Ok(Json(mutate(&app, &id, move |_| event).await?))
}

async fn undo_click(
    State(app): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<SliceQuery>,
) -> Result<Json<Applied>, ApiError> {
    let slice = q.slice;
    Ok(Json(mutate(&app, &id, move |_| Event::Undo { slice }).await?))
}

async fn propagate(
    State(app): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Option<Json<PropagateRequest>>,
) -> Result<Json<Applied>, ApiError> {
    let requested = body.and_then(|Json(b)| b.seed_slices);
    let event = move |s: &Session| Event::Propagate {
        seed_slices: requested.unwrap_or_else(|| s.clicked_slices()),
    };
    Ok(Json(mutate(&app, &id, event).await?))
}

async fn get_mask(
    State(app): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<SliceQuery>,
) -> Result<Response, ApiError> {
    let s = app.session(&id).await?;
    let (v, png) = s.read().await.mask_png(q.slice, q.version)?;
    Ok(png_response(png, Some(v)))
}

async fn get_slice(
    State(app): State<Shared>,
    UrlPath((id, k)): UrlPath<(String, usize)>,
) -> Result<Response, ApiError> {
    let s = app.session(&id).await?;
    let png = s.read().await.slice_png(k)?;
    Ok(png_response(png, None))
}

async fn get_propagated(
    State(app): State<Shared>,
    UrlPath((id, k)): UrlPath<(String, usize)>,
) -> Result<Response, ApiError> {
    let s = app.session(&id).await?;
    let png = s.read().await.propagated_png(k)?;
    Ok(png_response(png, None))
}

pub fn router(state: Arc<AppState>, config: &ServiceConfig) -> Router {
    let mut app = Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/clicks", post(add_click))
        .route("/sessions/{id}/clicks/last", delete(undo_click))
        .route("/sessions/{id}/mask", get(get_mask))
        .route("/sessions/{id}/slices/{k}", get(get_slice))
        .route("/sessions/{id}/propagate", post(propagate))
        .route("/sessions/{id}/propagated/{k}", get(get_propagated))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state);
    if let Some(origin) = &config.cors_origin {
        let allow = if origin == "*" {
            AllowOrigin::from(Any)
        } else {
            match HeaderValue::from_str(origin) {
                Ok(v) => AllowOrigin::exact(v),
                Err(_) => AllowOrigin::from(Any),
            }
        };
        app = app.layer(
            CorsLayer::new()
                .allow_origin(allow)
                .allow_methods(Any)
                .allow_headers(Any),
        );
    }
    app
}

/// Serves until Ctrl-C. State is written through on every mutation, so
/// there is nothing left to flush at shutdown.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>, config: ServiceConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state, &config))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[cfg(test)]
mod tests;
