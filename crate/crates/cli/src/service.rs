//! HTTP JSON API over an immutable gallery. Sessions hold a fitted photo so
//! repeated syntheses against the same upload skip the fit.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use affectsynth::geom::LandmarkSet;
use affectsynth::mmfit::{FitConfig, MorphableModel};
use affectsynth::raster::Image;
use affectsynth::va_grid::{CellIndex, GRID_SIZE};
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::Deserialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Stage};
use crate::gallery::Gallery;
use crate::pipeline::{fit_photo, render_request, FittedPhoto};
use crate::synth::{synthesize, SynthRequest};

const MAX_UPLOAD: usize = 32 << 20;

pub struct AppState {
    pub gallery: Gallery,
    pub model: Option<MorphableModel>,
    pub fit: FitConfig,
    pub default_intensity: f64,
    pub preview_size: usize,
    sessions: RwLock<HashMap<String, Arc<FittedPhoto>>>,
}

impl AppState {
    pub fn new(
        gallery: Gallery,
        model: Option<MorphableModel>,
        fit: FitConfig,
        default_intensity: f64,
        preview_size: usize,
    ) -> Self {
        AppState {
            gallery,
            model,
            fit,
            default_intensity,
            preview_size,
            sessions: RwLock::new(HashMap::new()),
        }
    }

    /// Fits and registers a photo; the id is the SHA-256 of both uploads, so
    /// re-uploading the same pair returns the same session.
    pub fn create_session(&self, image_png: &[u8], landmarks_csv: &[u8]) -> Result<String, CliError> {
        let mut h = Sha256::new();
        h.update((image_png.len() as u64).to_le_bytes());
        h.update(image_png);
        h.update(landmarks_csv);
        let id = hex::encode(h.finalize());
        if self.sessions.read().expect("session lock").contains_key(&id) {
            return Ok(id);
        }
        let model = self
            .model
            .as_ref()
            .ok_or_else(|| CliError::field("session", "service was started without a morphable model"))?;
        let image = Image::from_png_bytes(image_png).map_err(|source| CliError::Stage {
            stage: Stage::LoadImage,
            source,
        })?;
        let landmarks =
            LandmarkSet::from_csv(landmarks_csv, "landmarks", model.mean().n_vertices()).map_err(|source| {
                CliError::Stage {
                    stage: Stage::LoadLandmarks,
                    source,
                }
            })?;
        let photo = fit_photo(image, landmarks, model, &self.fit)?;
        self.sessions
            .write()
            .expect("session lock")
            .insert(id.clone(), Arc::new(photo));
        Ok(id)
    }

    pub fn session(&self, id: &str) -> Result<Arc<FittedPhoto>, CliError> {
        self.sessions
            .read()
            .expect("session lock")
            .get(id)
            .cloned()
            .ok_or_else(|| CliError::UnknownSession(id.to_string()))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn bad_request(msg: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            body: json!({ "error": msg.into() }),
        }
    }

    fn field(field: &str, msg: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            body: json!({ "error": msg.into(), "field": field }),
        }
    }
}

fn is_input_error(e: &affectsynth::Error) -> bool {
    use affectsynth::Error as E;
    matches!(
        e,
        E::Parse { .. } | E::InvalidInput(_) | E::OutOfRange { .. } | E::NonFinite(_) | E::LengthMismatch { .. } | E::Image(_)
    )
}

impl From<CliError> for ApiError {
    fn from(e: CliError) -> Self {
        let error = e.to_string();
        match &e {
            CliError::Field { field, message } => ApiError::field(field, message.clone()),
            CliError::UnknownSession(_) => ApiError {
                status: StatusCode::NOT_FOUND,
                body: json!({ "error": error, "field": "session" }),
            },
            CliError::Stage { stage, source } => {
                let status = if matches!(stage, Stage::LoadImage | Stage::LoadLandmarks) || is_input_error(source) {
                    StatusCode::UNPROCESSABLE_ENTITY
                } else {
                    StatusCode::INTERNAL_SERVER_ERROR
                };
                ApiError {
                    status,
                    body: json!({ "error": error, "stage": stage.name() }),
                }
            }
            CliError::Core(source) if is_input_error(source) => ApiError {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                body: json!({ "error": error }),
            },
            _ => ApiError {
                status: StatusCode::INTERNAL_SERVER_ERROR,
                body: json!({ "error": error }),
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, CliError> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            body: json!({ "error": format!("worker failed: {e}") }),
        })?
        .map_err(ApiError::from)
}

fn number(body: &serde_json::Map<String, Value>, field: &str, default: Option<f64>) -> ApiResult<f64> {
    match body.get(field) {
        None | Some(Value::Null) => default.ok_or_else(|| ApiError::field(field, format!("missing required field '{field}'"))),
        Some(v) => v
            .as_f64()
            .ok_or_else(|| ApiError::field(field, format!("'{field}' must be a number"))),
    }
}

/// Field-by-field parse so every problem names the offending field.
pub fn parse_synth_body(bytes: &[u8], default_intensity: f64) -> ApiResult<(SynthRequest, Option<String>)> {
    let value: Value =
        serde_json::from_slice(bytes).map_err(|e| ApiError::bad_request(format!("malformed JSON body: {e}")))?;
    let Value::Object(body) = value else {
        return Err(ApiError::bad_request("request body must be a JSON object"));
    };
    if let Some(k) = body
        .keys()
        .find(|k| !["valence", "arousal", "intensity", "session"].contains(&k.as_str()))
    {
        return Err(ApiError::field(k, format!("unknown field '{k}'")));
    }
    let req = SynthRequest {
        valence: number(&body, "valence", None)?,
        arousal: number(&body, "arousal", None)?,
        intensity: number(&body, "intensity", Some(default_intensity))?,
    };
    req.validate()?;
    let session = match body.get("session") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(ApiError::field("session", "'session' must be a string")),
    };
    Ok((req, session))
}

async fn synthesize_handler(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<Value>> {
    let (req, session) = parse_synth_body(&body, state.default_intensity)?;
    let photo = session.as_deref().map(|id| state.session(id)).transpose()?;
    let st = state.clone();
    let (synth, png) = blocking(move || {
        let (s, image) = render_request(&st.gallery, photo.as_deref(), &req, st.preview_size)?;
        let png = image.to_png_bytes().map_err(|source| CliError::Stage {
            stage: Stage::WriteOutput,
            source,
        })?;
        Ok((s, png))
    })
    .await?;
    Ok(Json(json!({
        "mesh_url": format!(
            "/mesh?valence={}&arousal={}&intensity={}",
            req.valence, req.arousal, req.intensity
        ),
        "image_png_base64": base64::engine::general_purpose::STANDARD.encode(png),
        "cell": { "row": synth.cell.row, "col": synth.cell.col },
        "median_va": [synth.median_va.0, synth.median_va.1],
    })))
}

#[derive(Deserialize)]
struct MeshQuery {
    valence: f64,
    arousal: f64,
    intensity: Option<f64>,
}

async fn mesh_handler(State(state): State<Arc<AppState>>, Query(q): Query<MeshQuery>) -> ApiResult<Response> {
    let req = SynthRequest {
        valence: q.valence,
        arousal: q.arousal,
        intensity: q.intensity.unwrap_or(state.default_intensity),
    };
    let st = state.clone();
    let obj = blocking(move || Ok(synthesize(&st.gallery, &req)?.mesh.to_obj_string())).await?;
    Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], obj).into_response())
}

async fn session_handler(State(state): State<Arc<AppState>>, mut multipart: Multipart) -> ApiResult<Json<Value>> {
    let mut image = None;
    let mut landmarks = None;
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(format!("malformed multipart body: {e}")))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field
            .bytes()
            .await
            .map_err(|e| ApiError::bad_request(format!("reading part '{name}': {e}")))?;
        match name.as_str() {
            "image" => image = Some(bytes),
            "landmarks" => landmarks = Some(bytes),
            other => return Err(ApiError::field(other, format!("unknown part '{other}'"))),
        }
    }
    let image = image.ok_or_else(|| ApiError::field("image", "missing 'image' part (PNG)"))?;
    let landmarks = landmarks.ok_or_else(|| ApiError::field("landmarks", "missing 'landmarks' part (CSV)"))?;
    let st = state.clone();
    let id = blocking(move || st.create_session(&image, &landmarks)).await?;
    Ok(Json(json!({ "session": id })))
}

async fn grid_handler(State(state): State<Arc<AppState>>) -> Json<Value> {
    let counts = state.gallery.histogram();
    let medians: Vec<Vec<Value>> = (0..GRID_SIZE)
        .map(|row| {
            (0..GRID_SIZE)
                .map(|col| {
                    let cell = CellIndex { row, col };
                    state
                        .gallery
                        .cells
                        .get(&cell)
                        .map_or(Value::Null, |c| json!([c.median.0, c.median.1]))
                })
                .collect()
        })
        .collect();
    Json(json!({ "counts": counts, "medians": medians }))
}

async fn health_handler() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/synthesize", post(synthesize_handler))
        .route("/session", post(session_handler))
        .route("/grid", get(grid_handler))
        .route("/mesh", get(mesh_handler))
        .route("/health", get(health_handler))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: &str) -> Result<(), CliError> {
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|source| CliError::Bind {
        addr: addr.to_string(),
        source,
    })?;
    log::info!("listening on http://{}", listener.local_addr().map_err(|source| CliError::Bind {
        addr: addr.to_string(),
        source,
    })?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|source| CliError::Bind {
            addr: addr.to_string(),
            source,
        })
}
