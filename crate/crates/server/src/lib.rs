//! HTTP and WebSocket service behind the camera designer.
//!
//! | Method | Path | Result |
//! |---|---|---|
//! | `POST` | `/session` | open a scene, returns session info with its `id` |
//! | `GET` | `/session/{id}` | session info |
//! | `DELETE` | `/session/{id}` | close the session |
//! | `GET` | `/session/{id}/cloud?max_points=N` | binary point cloud (`RCP1`) |
//! | `PUT` | `/session/{id}/track` | set the keyframe track, returns the dense cameras |
//! | `GET` | `/session/{id}/track` | current keyframe track |
//! | `GET` | `/session/{id}/preview/{frame}` | PNG preview render |
//! | `GET` | `/session/{id}/stream` | WebSocket preview stream |
//!
//! Errors are JSON objects `{"error": ..., "validation_errors": [...]}`.
//! Track-dependent responses carry the track version in `x-track-version`.

pub mod session;
mod stream;

use std::collections::hash_map::RandomState;
use std::collections::HashMap;
use std::hash::BuildHasher;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::body::{Body, Bytes};
use axum::extract::ws::WebSocketUpgrade;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::header::{CONTENT_TYPE, HeaderName};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{AllowOrigin, CorsLayer};

use reshoot_core::trajectory::KeyframeTrackRecord;
use reshoot_core::{Error, ErrorKind, KeyframeTrack, RenderOptions, Rgb};

pub use session::{PreviewFrame, PreviewSettings, Session, TrackState};

pub const TRACK_VERSION_HEADER: &str = "x-track-version";

#[derive(Debug, Clone, Default)]
pub struct ServerConfig {
    /// Extra origins allowed by CORS. Origins on `localhost`, `127.0.0.1`
    /// and `[::1]` are always allowed.
    pub allowed_origins: Vec<String>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub details: Vec<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            details: Vec::new(),
        }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown session {id}"))
    }

    fn invalid(message: impl Into<String>, details: Vec<String>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: message.into(),
            details,
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": self.message, "validation_errors": self.details});
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: String,
    pub frames: usize,
    pub width: u32,
    pub height: u32,
    pub points: usize,
    pub preview_points: usize,
    pub preview: PreviewSettings,
    pub preview_width: u32,
    pub preview_height: u32,
    pub track_version: u64,
}

impl SessionInfo {
    pub fn of(s: &Session) -> Self {
        let (preview_width, preview_height) = s.settings.dims(s.base.width, s.base.height);
        Self {
            id: s.id.clone(),
            frames: s.cloud.frame_count(),
            width: s.base.width,
            height: s.base.height,
            points: s.cloud.len(),
            preview_points: s.preview_points(),
            preview: s.settings,
            preview_width,
            preview_height,
            track_version: s.current().version,
        }
    }
}

/// Body of `POST /session`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    /// A scene manifest, or a memory state directory.
    pub scene_path: PathBuf,
    #[serde(default)]
    pub preview_scale: Option<f64>,
    #[serde(default)]
    pub point_ratio: Option<f64>,
    #[serde(default)]
    pub point_radius: Option<u32>,
    #[serde(default)]
    pub background: Option<Rgb>,
}

impl CreateSession {
    pub fn settings(&self) -> PreviewSettings {
        let d = PreviewSettings::default();
        PreviewSettings {
            scale: self.preview_scale.unwrap_or(d.scale),
            point_ratio: self.point_ratio.unwrap_or(d.point_ratio),
        }
    }

    pub fn render_options(&self) -> RenderOptions {
        let d = RenderOptions::default();
        RenderOptions {
            point_radius: self.point_radius.unwrap_or(d.point_radius),
            background: self.background.unwrap_or(d.background),
            ..d
        }
    }
}

struct Inner {
    config: ServerConfig,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    counter: AtomicU64,
    ids: RandomState,
}

/// Shared server state. Cheap to clone.
#[derive(Clone)]
pub struct Server {
    inner: Arc<Inner>,
}

impl Server {
    pub fn new(config: ServerConfig) -> Self {
        Self {
            inner: Arc::new(Inner {
                config,
                sessions: RwLock::new(HashMap::new()),
                counter: AtomicU64::new(0),
                ids: RandomState::new(),
            }),
        }
    }

    fn next_id(&self) -> String {
        let n = self.inner.counter.fetch_add(1, Ordering::Relaxed);
        format!("{:016x}{:04x}", self.inner.ids.hash_one(n), n & 0xffff)
    }

    /// Loads a scene and registers a session for it. Blocking.
    pub fn open_session(&self, req: &CreateSession) -> reshoot_core::Result<Arc<Session>> {
        let settings = req.settings();
        let errs = settings.validation_errors();
        if !errs.is_empty() {
            return Err(Error::Config(errs.join("; ")));
        }
        let (cloud, cams) = session::load_source(&req.scene_path)?;
        let s = Arc::new(Session::new(
            self.next_id(),
            cloud,
            cams,
            settings,
            req.render_options(),
        )?);
        self.inner
            .sessions
            .write()
            .expect("session map lock")
            .insert(s.id.clone(), s.clone());
        log::info!("session {} opened from {}", s.id, req.scene_path.display());
        Ok(s)
    }

    pub fn session(&self, id: &str) -> Option<Arc<Session>> {
        self.inner.sessions.read().expect("session map lock").get(id).cloned()
    }

    pub fn close_session(&self, id: &str) -> bool {
        self.inner.sessions.write().expect("session map lock").remove(id).is_some()
    }

    fn get(&self, id: &str) -> ApiResult<Arc<Session>> {
        self.session(id).ok_or_else(|| ApiError::not_found(id))
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/session", post(create_session))
            .route("/session/{id}", get(session_info).delete(delete_session))
            .route("/session/{id}/cloud", get(get_cloud))
            .route("/session/{id}/track", get(get_track).put(put_track))
            .route("/session/{id}/preview/{frame}", get(get_preview))
            .route("/session/{id}/stream", get(stream))
            .layer(cors(&self.inner.config))
            .with_state(self.clone())
    }
}

/// Serves `server` on an already bound listener until the task is dropped.
pub async fn serve(listener: tokio::net::TcpListener, server: Server) -> std::io::Result<()> {
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, server.router()).await
}

fn is_local_origin(origin: &str) -> bool {
    let Some(rest) = origin
        .strip_prefix("http://")
        .or_else(|| origin.strip_prefix("https://"))
    else {
        return false;
    };
    let host = if rest.starts_with('[') {
        rest.split_inclusive(']').next().unwrap_or("")
    } else {
        rest.split(':').next().unwrap_or("")
    };
    matches!(host, "localhost" | "127.0.0.1" | "[::1]")
}

fn cors(config: &ServerConfig) -> CorsLayer {
    let extra = config.allowed_origins.clone();
    CorsLayer::new()
        .allow_origin(AllowOrigin::predicate(move |origin: &HeaderValue, _| {
            let o = origin.to_str().unwrap_or("");
            is_local_origin(o) || extra.iter().any(|e| e == o)
        }))
        .allow_methods([Method::GET, Method::POST, Method::PUT, Method::DELETE])
        .allow_headers([CONTENT_TYPE])
        .expose_headers([HeaderName::from_static(TRACK_VERSION_HEADER)])
}

fn core_error(e: Error, io_status: StatusCode) -> ApiError {
    match e.kind() {
        ErrorKind::Validation => ApiError::invalid(e.to_string(), vec![e.to_string()]),
        ErrorKind::Io => ApiError::new(io_status, e.to_string()),
        ErrorKind::Numeric => ApiError::internal(e.to_string()),
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &Bytes, what: &str) -> ApiResult<T> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::invalid(format!("invalid {what}"), vec![e.to_string()]))
}

fn with_version(version: u64, content_type: &'static str, body: impl Into<Body>) -> Response {
    (
        [
            (CONTENT_TYPE, HeaderValue::from_static(content_type)),
            (
                HeaderName::from_static(TRACK_VERSION_HEADER),
                HeaderValue::from(version),
            ),
        ],
        body.into(),
    )
        .into_response()
}

async fn create_session(State(server): State<Server>, body: Bytes) -> ApiResult<Response> {
    let req: CreateSession = parse_json(&body, "session request")?;
    let s = server.clone();
    let session = tokio::task::spawn_blocking(move || s.open_session(&req))
        .await
        .map_err(|e| ApiError::internal(format!("scene loading failed: {e}")))?
        .map_err(|e| core_error(e, StatusCode::BAD_REQUEST))?;
    Ok((StatusCode::CREATED, Json(SessionInfo::of(&session))).into_response())
}

async fn session_info(State(server): State<Server>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionInfo>> {
    let s = server.get(&id)?;
    Ok(Json(SessionInfo::of(&s)))
}

async fn delete_session(State(server): State<Server>, UrlPath(id): UrlPath<String>) -> ApiResult<StatusCode> {
    if server.close_session(&id) {
        Ok(StatusCode::NO_CONTENT)
    } else {
        Err(ApiError::not_found(&id))
    }
}

#[derive(Deserialize)]
struct CloudQuery {
    max_points: Option<usize>,
}

async fn get_cloud(
    State(server): State<Server>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<CloudQuery>,
) -> ApiResult<Response> {
    let s = server.get(&id)?;
    let max = q.max_points.unwrap_or(session::DEFAULT_MAX_POINTS);
    let bytes = tokio::task::spawn_blocking(move || session::encode_cloud(&s.cloud, max))
        .await
        .map_err(|e| ApiError::internal(format!("cloud encoding failed: {e}")))?;
    Ok(([(CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

async fn put_track(
    State(server): State<Server>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let s = server.get(&id)?;
    let record: KeyframeTrackRecord = parse_json(&body, "track")?;
    let state = s
        .set_track(KeyframeTrack::from_record(&record))
        .map_err(|errs| ApiError::invalid("invalid track", errs))?;
    Ok(with_version(state.version, "application/json", state.cams.to_json()))
}

async fn get_track(State(server): State<Server>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let s = server.get(&id)?;
    let state = s.current();
    match &state.track {
        Some(t) => Ok(with_version(state.version, "application/json", t.to_json())),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, format!("session {id} has no track yet"))),
    }
}

async fn get_preview(
    State(server): State<Server>,
    UrlPath((id, frame)): UrlPath<(String, usize)>,
) -> ApiResult<Response> {
    let s = server.get(&id)?;
    let state = s.current();
    if frame >= state.cams.len() {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            format!("frame {frame} outside the current track of {} frames", state.cams.len()),
        ));
    }
    let f = tokio::task::spawn_blocking(move || s.render_preview(&state, frame, None))
        .await
        .map_err(|e| ApiError::internal(format!("render failed: {e}")))?
        .map_err(|e| ApiError::internal(format!("render failed: {e}")))?
        .ok_or_else(|| ApiError::internal("render cancelled"))?;
    Ok(with_version(f.version, "image/png", f.png))
}

async fn stream(
    State(server): State<Server>,
    UrlPath(id): UrlPath<String>,
    ws: WebSocketUpgrade,
) -> ApiResult<Response> {
    let s = server.get(&id)?;
    Ok(ws.on_upgrade(move |socket| stream::run(socket, s)))
}
