use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, patch, post, put};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use layered_core::compositor::LayerStack;
use layered_core::Raster;
use layered_dit::ToyDit;
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex, Semaphore};

use crate::error::{ApiError, ApiResult};
use crate::generate::{generate, MAX_STEPS};
use crate::session::{sha256_hex, Composite, Digests, Generation, LayerPatch, NewLayer, Session, SessionExport};

pub const OPENAPI_YAML: &str = include_str!("../openapi.yaml");

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub max_image_side: usize,
    pub strict_sigma_zero: bool,
    /// Seed used when a generate request names none.
    pub seed: u64,
    pub default_steps: usize,
    pub generation_workers: usize,
    /// Directory served at `/`; typically the built canvas UI.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { max_image_side: 1024, strict_sigma_zero: false, seed: 0, default_steps: 20, generation_workers: 1, static_dir: None }
    }
}

pub struct LoadedModel {
    pub model: ToyDit,
    /// Identifies the checkpoint in generation metadata.
    pub tag: String,
}

impl LoadedModel {
    /// Tags a model with a short content hash of its serialized tensors.
    pub fn new(model: ToyDit) -> Self {
        let tag = sha256_hex(&layered_dit::checkpoint::to_bytes(&model))[..16].to_string();
        Self { model, tag }
    }
}

struct Inner {
    config: ServiceConfig,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    model: Option<Arc<LoadedModel>>,
    generation: Arc<Semaphore>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(config: ServiceConfig, model: Option<LoadedModel>) -> Self {
        let permits = config.generation_workers.max(1);
        Self(Arc::new(Inner {
            config,
            sessions: RwLock::new(HashMap::new()),
            model: model.map(Arc::new),
            generation: Arc::new(Semaphore::new(permits)),
        }))
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Mutex<Session>>> {
        self.0.sessions.read().expect("session map").get(id).cloned().ok_or_else(|| ApiError::not_found(format!("session `{id}`")))
    }

    fn insert(&self, session: Session) -> String {
        let id = session.id.clone();
        self.0.sessions.write().expect("session map").insert(id.clone(), Arc::new(Mutex::new(session)));
        id
    }

    fn new_id() -> String {
        uuid::Uuid::new_v4().simple().to_string()
    }

    fn decode_image(&self, b64: &str) -> ApiResult<Raster> {
        let bytes = STANDARD.decode(b64.trim()).map_err(|e| ApiError::bad_request(format!("image is not base64: {e}")))?;
        let img = Raster::from_png_bytes(&bytes)?;
        let max = self.0.config.max_image_side;
        if img.width() > max || img.height() > max {
            return Err(ApiError::too_large(format!("{}x{} exceeds the {max}px limit", img.width(), img.height())));
        }
        if img.width() == 0 || img.height() == 0 {
            return Err(ApiError::bad_request("image is empty"));
        }
        Ok(img.to_rgb())
    }

    /// Composite for the session's current revision, cached by revision.
    /// The flatten itself runs on a snapshot with the session unlocked.
    async fn composite(&self, session: &Arc<Mutex<Session>>) -> ApiResult<Arc<Composite>> {
        let snap = {
            let s = session.lock().await;
            if let Some(c) = s.cached_composite() {
                return Ok(c);
            }
            s.snapshot()
        };
        let c = tokio::task::spawn_blocking(move || Composite::build(&snap.base, &snap.stack, snap.revision))
            .await
            .map_err(|e| ApiError::internal(e.to_string()))??;
        let c = Arc::new(c);
        session.lock().await.store_composite(c.clone());
        Ok(c)
    }
}

fn body<T>(r: Result<Json<T>, JsonRejection>) -> ApiResult<T> {
    r.map(|Json(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

/// Reads `If-Match` as a revision number; accepts `3`, `"3"` and `W/"3"`.
pub fn if_match(headers: &HeaderMap) -> ApiResult<Option<u64>> {
    let Some(v) = headers.get(header::IF_MATCH) else { return Ok(None) };
    let s = v.to_str().map_err(|_| ApiError::bad_request("If-Match is not ASCII"))?.trim();
    if s == "*" {
        return Ok(None);
    }
    let s = s.strip_prefix("W/").unwrap_or(s).trim_matches('"');
    s.parse().map(Some).map_err(|_| ApiError::bad_request(format!("If-Match `{s}` is not a revision")))
}

fn etag(revision: u64) -> [(header::HeaderName, HeaderValue); 1] {
    [(header::ETAG, HeaderValue::from_str(&format!("\"{revision}\"")).expect("ascii"))]
}

fn b64(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

#[derive(Deserialize)]
pub struct CreateSession {
    /// Base64-encoded PNG.
    pub image: String,
}

#[derive(Serialize)]
pub struct SessionState {
    pub id: String,
    pub revision: u64,
    pub width: usize,
    pub height: usize,
    pub base: String,
    pub base_digest: String,
    pub stack: LayerStack,
    pub digests: Option<Digests>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub composite_error: Option<String>,
    pub last_generation: Option<Generation>,
}

#[derive(Serialize)]
pub struct MutationResponse {
    pub revision: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer_id: Option<String>,
    pub digests: Option<Digests>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub composite_error: Option<String>,
}

#[derive(Serialize)]
pub struct CompositeResponse {
    pub revision: u64,
    pub digests: Digests,
    pub strengths: std::collections::BTreeMap<String, f64>,
    pub y: String,
    pub mask: Option<String>,
    pub edges: Option<String>,
    pub colors: Option<String>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
}

#[derive(Serialize)]
pub struct GenerateResponse {
    #[serde(flatten)]
    pub meta: Generation,
    pub width: usize,
    pub height: usize,
    pub image: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetBase {
    pub image: Option<String>,
    #[serde(default)]
    pub from_result: bool,
}

async fn state_of(app: &AppState, session: &Arc<Mutex<Session>>) -> ApiResult<SessionState> {
    let composite = app.composite(session).await;
    let s = session.lock().await;
    let base_png = s.base().to_png_bytes()?;
    let (digests, composite_error) = match composite {
        Ok(c) => (Some(c.digests.clone()), None),
        Err(e) => (None, Some(e.message)),
    };
    Ok(SessionState {
        id: s.id.clone(),
        revision: s.revision(),
        width: s.base().width(),
        height: s.base().height(),
        base_digest: sha256_hex(&base_png),
        base: b64(&base_png),
        stack: s.stack().clone(),
        digests,
        composite_error,
        last_generation: s.last_generation.as_deref().cloned(),
    })
}

async fn mutation_response(app: &AppState, session: &Arc<Mutex<Session>>, revision: u64, layer_id: Option<String>) -> Response {
    let (digests, composite_error) = match app.composite(session).await {
        Ok(c) => (Some(c.digests.clone()), None),
        Err(e) => (None, Some(e.message)),
    };
    (etag(revision), Json(MutationResponse { revision, layer_id, digests, composite_error })).into_response()
}

async fn healthz(State(app): State<AppState>) -> Json<serde_json::Value> {
    let sessions = app.0.sessions.read().expect("session map").len();
    Json(serde_json::json!({
        "status": "ok",
        "checkpoint": app.0.model.as_ref().map(|m| m.tag.clone()),
        "sessions": sessions,
        "strict_sigma_zero": app.0.config.strict_sigma_zero,
    }))
}

async fn openapi() -> impl IntoResponse {
    ([(header::CONTENT_TYPE, "application/yaml")], OPENAPI_YAML)
}

async fn create_session(State(app): State<AppState>, req: Result<Json<CreateSession>, JsonRejection>) -> ApiResult<Response> {
    let req = body(req)?;
    let base = app.decode_image(&req.image)?;
    let id = app.insert(Session::new(AppState::new_id(), base));
    let session = app.session(&id)?;
    let st = state_of(&app, &session).await?;
    Ok((StatusCode::CREATED, etag(0), Json(st)).into_response())
}

async fn get_session(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let session = app.session(&id)?;
    let st = state_of(&app, &session).await?;
    Ok((etag(st.revision), Json(st)).into_response())
}

async fn add_layer(
    State(app): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    req: Result<Json<NewLayer>, JsonRejection>,
) -> ApiResult<Response> {
    let session = app.session(&id)?;
    let expected = if_match(&headers)?;
    let layer = body(req)?;
    let (rev, lid) = {
        let mut s = session.lock().await;
        s.check_revision(expected)?;
        let lid = s.add_layer(layer)?;
        (s.revision(), lid)
    };
    Ok((StatusCode::CREATED, mutation_response(&app, &session, rev, Some(lid)).await).into_response())
}

async fn update_layer(
    State(app): State<AppState>,
    Path((id, lid)): Path<(String, String)>,
    headers: HeaderMap,
    req: Result<Json<LayerPatch>, JsonRejection>,
) -> ApiResult<Response> {
    let session = app.session(&id)?;
    let expected = if_match(&headers)?;
    let patch = body(req)?;
    let rev = {
        let mut s = session.lock().await;
        s.check_revision(expected)?;
        s.update_layer(&lid, patch)?;
        s.revision()
    };
    Ok(mutation_response(&app, &session, rev, Some(lid)).await)
}

async fn delete_layer(State(app): State<AppState>, Path((id, lid)): Path<(String, String)>, headers: HeaderMap) -> ApiResult<Response> {
    let session = app.session(&id)?;
    let expected = if_match(&headers)?;
    let rev = {
        let mut s = session.lock().await;
        s.check_revision(expected)?;
        s.delete_layer(&lid)?;
        s.revision()
    };
    Ok(mutation_response(&app, &session, rev, None).await)
}

async fn set_base(
    State(app): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    req: Result<Json<SetBase>, JsonRejection>,
) -> ApiResult<Response> {
    let session = app.session(&id)?;
    let expected = if_match(&headers)?;
    let req = body(req)?;
    let new_base = match (req.image, req.from_result) {
        (Some(img), false) => Some(app.decode_image(&img)?),
        (None, true) => None,
        _ => return Err(ApiError::bad_request("give exactly one of `image` or `from_result: true`")),
    };
    let rev = {
        let mut s = session.lock().await;
        s.check_revision(expected)?;
        let base = match new_base {
            Some(b) => b,
            None => {
                let g = s.last_generation.clone().ok_or_else(|| ApiError::unprocessable("session has no generation result yet"))?;
                Raster::from_png_bytes(&g.png)?
            }
        };
        s.set_base(base)?;
        s.revision()
    };
    Ok(mutation_response(&app, &session, rev, None).await)
}

async fn composite(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let session = app.session(&id)?;
    let c = app.composite(&session).await?;
    let resp = CompositeResponse {
        revision: c.revision,
        digests: c.digests.clone(),
        strengths: c.strengths(),
        y: b64(&c.y),
        mask: c.mask.as_deref().map(b64),
        edges: c.edges.as_deref().map(b64),
        colors: c.colors.as_deref().map(b64),
    };
    Ok((etag(c.revision), Json(resp)).into_response())
}

fn png_response(bytes: Vec<u8>, revision: u64) -> Response {
    let digest = sha256_hex(&bytes);
    (
        [
            (header::CONTENT_TYPE, HeaderValue::from_static("image/png")),
            (header::ETAG, HeaderValue::from_str(&format!("\"{digest}\"")).expect("hex")),
            (header::HeaderName::from_static("x-revision"), HeaderValue::from(revision)),
        ],
        bytes,
    )
        .into_response()
}

async fn composite_map(State(app): State<AppState>, Path((id, name)): Path<(String, String)>) -> ApiResult<Response> {
    let session = app.session(&id)?;
    let c = app.composite(&session).await?;
    let name = name.strip_suffix(".png").unwrap_or(&name);
    let bytes = c.map(name).ok_or_else(|| ApiError::not_found(format!("map `{name}` (one of y, mask, edges, colors when present)")))?;
    Ok(png_response(bytes.to_vec(), c.revision))
}

async fn run_generate(
    State(app): State<AppState>,
    Path(id): Path<String>,
    req: Option<Json<GenerateRequest>>,
) -> ApiResult<Response> {
    let session = app.session(&id)?;
    let model = app.0.model.clone().ok_or_else(ApiError::no_checkpoint)?;
    let req = req.map(|Json(r)| r).unwrap_or_default();
    let cfg = &app.0.config;
    let seed = req.seed.unwrap_or(cfg.seed);
    let steps = req.steps.unwrap_or(cfg.default_steps);
    if steps == 0 || steps > MAX_STEPS {
        return Err(ApiError::bad_request(format!("steps must lie in 1..={MAX_STEPS}")));
    }
    let strict = cfg.strict_sigma_zero;
    let c = app.composite(&session).await?;
    // Fair semaphore: queued generations complete in arrival order.
    let permit = app.0.generation.clone().acquire_owned().await.map_err(|e| ApiError::internal(e.to_string()))?;
    let flat = c.flattened.clone();
    let m = model.clone();
    let image = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        generate(&m.model, &flat, seed, steps, strict)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    let png = image.to_png_bytes()?;
    let meta = Generation {
        revision: c.revision,
        seed,
        steps,
        sigmas: c.strengths(),
        checkpoint: model.tag.clone(),
        strict_sigma_zero: strict,
        digest: sha256_hex(&png),
        png: png.clone(),
    };
    session.lock().await.last_generation = Some(Arc::new(meta.clone()));
    let resp = GenerateResponse { meta, width: image.width(), height: image.height(), image: b64(&png) };
    Ok(Json(resp).into_response())
}

async fn last_result(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let session = app.session(&id)?;
    let s = session.lock().await;
    let g = s.last_generation.clone().ok_or_else(|| ApiError::not_found("no generation result yet"))?;
    Ok(png_response(g.png.clone(), g.revision))
}

async fn export_session(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionExport>> {
    let session = app.session(&id)?;
    let s = session.lock().await;
    Ok(Json(s.export()))
}

async fn import_session(State(app): State<AppState>, req: Result<Json<SessionExport>, JsonRejection>) -> ApiResult<Response> {
    let export = body(req)?;
    let max = app.0.config.max_image_side;
    if export.base.width() > max || export.base.height() > max {
        return Err(ApiError::too_large(format!("base exceeds the {max}px limit")));
    }
    let id = app.insert(Session::from_export(AppState::new_id(), export)?);
    let session = app.session(&id)?;
    let st = state_of(&app, &session).await?;
    Ok((StatusCode::CREATED, etag(st.revision), Json(st)).into_response())
}

const PLACEHOLDER_INDEX: &str = "<!doctype html><title>layered edit service</title>\
<p>The canvas UI bundle is not installed. Start the service with <code>--static-dir</code> \
pointing at a built UI, or use the HTTP API described in <a href=\"/openapi.yaml\">openapi.yaml</a>.</p>";

pub fn router(app: AppState) -> Router {
    let static_dir = app.0.config.static_dir.clone();
    let api = Router::new()
        .route("/healthz", get(healthz))
        .route("/openapi.yaml", get(openapi))
        .route("/sessions", post(create_session))
        .route("/sessions/import", post(import_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/export", get(export_session))
        .route("/sessions/{id}/base", put(set_base))
        .route("/sessions/{id}/layers", post(add_layer))
        .route("/sessions/{id}/layers/{lid}", patch(update_layer).delete(delete_layer))
        .route("/sessions/{id}/composite", post(composite))
        .route("/sessions/{id}/maps/{name}", get(composite_map))
        .route("/sessions/{id}/generate", post(run_generate))
        .route("/sessions/{id}/result", get(last_result))
        .layer(DefaultBodyLimit::max(64 * 1024 * 1024))
        .with_state(app);
    match static_dir {
        Some(dir) if dir.is_dir() => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        _ => api.route("/", get(|| async { Html(PLACEHOLDER_INDEX) })),
    }
}

/// Binds and serves until Ctrl-C.
pub async fn serve(addr: std::net::SocketAddr, app: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
