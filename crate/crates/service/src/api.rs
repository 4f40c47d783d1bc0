//! Routes and JSON bodies.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use priorpath::checkpoint::Checkpoint;
use priorpath::infer::{infer_fine, infer_rgb, FineOptions, DEFAULT_BINARIZE_THRESHOLD};
use priorpath::BinaryMask;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::registry::{ModelEntry, Registry, Stage};
use crate::sessions::{artifact_url, NewEvent, SessionEvent, SessionStore};
use crate::{ServiceError, ServiceResult};

#[derive(Clone)]
pub struct AppState {
    pub registry: Arc<Registry>,
    pub sessions: Arc<SessionStore>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    code: &'a str,
    message: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match self {
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = ErrorBody {
            code: self.code(),
            message: self.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/models", get(list_models))
        .route("/generate/fine", post(generate_fine))
        .route("/generate/rgb", post(generate_rgb))
        .route("/generate/pipeline", post(generate_pipeline))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/artifacts/{session}/{file}", get(get_artifact))
        .fallback(|| async { ServiceError::NotFound("no such route".into()) })
        .with_state(state)
}

/// Body parsing that reports failures as `{code, message}` 400s instead of
/// axum's plain-text rejections.
fn parse<T: DeserializeOwned>(body: &Bytes) -> ServiceResult<T> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(format!("request body: {e}")))
}

fn decode_png(field: &str, b64: &str) -> ServiceResult<Vec<u8>> {
    let s = match b64.split_once(";base64,") {
        Some((prefix, rest)) if prefix.starts_with("data:") => rest,
        _ => b64,
    };
    STANDARD
        .decode(s.trim())
        .map_err(|e| ServiceError::BadRequest(format!("{field}: invalid base64: {e}")))
}

fn decode_mask(field: &str, b64: &str) -> ServiceResult<BinaryMask> {
    let bytes = decode_png(field, b64)?;
    BinaryMask::decode_png(&bytes)
        .map_err(|e| ServiceError::BadRequest(format!("{field}: not a decodable image: {e}")))
}

/// Nearest-neighbour resample to the model's native size. Masks stay binary,
/// so no separate re-binarisation pass is needed.
fn fit(mask: BinaryMask, entry: &ModelEntry) -> ServiceResult<(BinaryMask, bool)> {
    if mask.dims() == (entry.width, entry.height) {
        return Ok((mask, false));
    }
    Ok((mask.resize_nearest(entry.width, entry.height)?, true))
}

fn model(reg: &Registry, id: &str, stage: Stage) -> ServiceResult<(ModelEntry, Arc<Checkpoint>)> {
    let (entry, ck) = reg.get(id)?;
    if entry.stage != stage {
        return Err(ServiceError::Conflict(format!(
            "model `{id}` is a {:?} model, this route needs {:?}",
            entry.stage, stage
        )));
    }
    Ok((entry.clone(), ck))
}

fn png_rgb(img: &image::RgbImage) -> ServiceResult<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| ServiceError::Internal(e.to_string()))?;
    Ok(buf.into_inner())
}

fn fine_png(ck: &Checkpoint, coarse: &BinaryMask, seed: u64, threshold: f64) -> ServiceResult<(BinaryMask, Vec<u8>)> {
    let opts = FineOptions {
        threshold,
        ..FineOptions::new(seed)
    };
    let mask = infer_fine(ck, coarse, &opts)?
        .into_mask()
        .ok_or_else(|| ServiceError::Internal("generator returned a soft mask".into()))?;
    let png = mask.encode_png()?;
    Ok((mask, png))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> ServiceResult<T> + Send + 'static,
) -> ServiceResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(format!("worker failed: {e}")))?
}

async fn list_models(State(st): State<AppState>) -> Json<Vec<ModelEntry>> {
    Json(st.registry.list().to_vec())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FineRequest {
    model_id: String,
    coarse: String,
    #[serde(default)]
    seed: u64,
    threshold: Option<f64>,
    session_id: Option<String>,
}

#[derive(Serialize)]
pub struct ArtifactUrls {
    pub coarse: String,
    pub fine: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rgb: Option<String>,
}

impl ArtifactUrls {
    fn of(session: &str, e: &SessionEvent) -> Self {
        Self {
            coarse: artifact_url(session, &e.coarse),
            fine: artifact_url(session, &e.fine),
            rgb: e.rgb.as_deref().map(|r| artifact_url(session, r)),
        }
    }
}

#[derive(Serialize)]
struct Stored {
    session_id: String,
    event_index: u64,
    timestamp_ms: u64,
    urls: ArtifactUrls,
}

impl Stored {
    fn new(session_id: String, e: &SessionEvent) -> Self {
        Self {
            urls: ArtifactUrls::of(&session_id, e),
            session_id,
            event_index: e.index,
            timestamp_ms: e.timestamp_ms,
        }
    }
}

#[derive(Serialize)]
struct FineResponse {
    model_id: String,
    seed: u64,
    width: usize,
    height: usize,
    resampled: bool,
    fine: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    stored: Option<Stored>,
}

async fn generate_fine(State(st): State<AppState>, body: Bytes) -> ServiceResult<Json<FineResponse>> {
    let req: FineRequest = parse(&body)?;
    let (entry, ck) = model(&st.registry, &req.model_id, Stage::Fine)?;
    let coarse = decode_mask("coarse", &req.coarse)?;
    let threshold = req.threshold.unwrap_or(DEFAULT_BINARIZE_THRESHOLD);
    let sessions = Arc::clone(&st.sessions);
    blocking(move || {
        let (coarse, resampled) = fit(coarse, &entry)?;
        let (_, png) = fine_png(&ck, &coarse, req.seed, threshold)?;
        let stored = match req.session_id {
            Some(sid) => {
                let coarse_png = coarse.encode_png()?;
                let e = sessions.append(
                    &sid,
                    NewEvent {
                        seed: req.seed,
                        fine_model: &entry.model_id,
                        rgb_model: None,
                        coarse_png: &coarse_png,
                        fine_png: &png,
                        rgb_png: None,
                        resampled,
                    },
                )?;
                Some(Stored::new(sid, &e))
            }
            None => None,
        };
        Ok(Json(FineResponse {
            model_id: entry.model_id,
            seed: req.seed,
            width: entry.width,
            height: entry.height,
            resampled,
            fine: STANDARD.encode(&png),
            stored,
        }))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RgbRequest {
    model_id: String,
    fine: String,
}

#[derive(Serialize)]
struct RgbResponse {
    model_id: String,
    width: usize,
    height: usize,
    resampled: bool,
    rgb: String,
}

async fn generate_rgb(State(st): State<AppState>, body: Bytes) -> ServiceResult<Json<RgbResponse>> {
    let req: RgbRequest = parse(&body)?;
    let (entry, ck) = model(&st.registry, &req.model_id, Stage::Rgb)?;
    let fine = decode_mask("fine", &req.fine)?;
    blocking(move || {
        let (fine, resampled) = fit(fine, &entry)?;
        let png = png_rgb(&infer_rgb(&ck, &fine)?)?;
        Ok(Json(RgbResponse {
            model_id: entry.model_id,
            width: entry.width,
            height: entry.height,
            resampled,
            rgb: STANDARD.encode(&png),
        }))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PipelineRequest {
    fine_model_id: String,
    rgb_model_id: String,
    coarse: String,
    #[serde(default)]
    seed: u64,
    threshold: Option<f64>,
    session_id: Option<String>,
}

#[derive(Serialize)]
struct PipelineResponse {
    fine_model_id: String,
    rgb_model_id: String,
    seed: u64,
    width: usize,
    height: usize,
    resampled: bool,
    fine: String,
    rgb: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    stored: Option<Stored>,
}

async fn generate_pipeline(
    State(st): State<AppState>,
    body: Bytes,
) -> ServiceResult<Json<PipelineResponse>> {
    let req: PipelineRequest = parse(&body)?;
    let (fine_entry, fine_ck) = model(&st.registry, &req.fine_model_id, Stage::Fine)?;
    let (rgb_entry, rgb_ck) = model(&st.registry, &req.rgb_model_id, Stage::Rgb)?;
    let coarse = decode_mask("coarse", &req.coarse)?;
    let threshold = req.threshold.unwrap_or(DEFAULT_BINARIZE_THRESHOLD);
    let sessions = Arc::clone(&st.sessions);
    blocking(move || {
        let (coarse, r1) = fit(coarse, &fine_entry)?;
        let (fine, fine_bytes) = fine_png(&fine_ck, &coarse, req.seed, threshold)?;
        let (fine_for_rgb, r2) = fit(fine, &rgb_entry)?;
        let rgb_bytes = png_rgb(&infer_rgb(&rgb_ck, &fine_for_rgb)?)?;
        let resampled = r1 || r2;
        let stored = match req.session_id {
            Some(sid) => {
                let coarse_png = coarse.encode_png()?;
                let e = sessions.append(
                    &sid,
                    NewEvent {
                        seed: req.seed,
                        fine_model: &fine_entry.model_id,
                        rgb_model: Some(&rgb_entry.model_id),
                        coarse_png: &coarse_png,
                        fine_png: &fine_bytes,
                        rgb_png: Some(&rgb_bytes),
                        resampled,
                    },
                )?;
                Some(Stored::new(sid, &e))
            }
            None => None,
        };
        Ok(Json(PipelineResponse {
            fine_model_id: fine_entry.model_id,
            rgb_model_id: rgb_entry.model_id,
            seed: req.seed,
            width: rgb_entry.width,
            height: rgb_entry.height,
            resampled,
            fine: STANDARD.encode(&fine_bytes),
            rgb: STANDARD.encode(&rgb_bytes),
            stored,
        }))
    })
    .await
}

#[derive(Serialize)]
struct EventView {
    #[serde(flatten)]
    event: SessionEvent,
    urls: ArtifactUrls,
}

#[derive(Serialize)]
struct SessionView {
    session_id: String,
    events: Vec<EventView>,
}

async fn create_session(State(st): State<AppState>) -> ServiceResult<(StatusCode, Json<SessionView>)> {
    let s = blocking(move || st.sessions.create()).await?;
    Ok((
        StatusCode::CREATED,
        Json(SessionView {
            session_id: s.session_id,
            events: Vec::new(),
        }),
    ))
}

#[derive(Serialize)]
struct SessionList {
    sessions: Vec<String>,
}

async fn list_sessions(State(st): State<AppState>) -> ServiceResult<Json<SessionList>> {
    let sessions = blocking(move || st.sessions.list()).await?;
    Ok(Json(SessionList { sessions }))
}

async fn get_session(State(st): State<AppState>, Path(id): Path<String>) -> ServiceResult<Json<SessionView>> {
    let s = blocking(move || st.sessions.get(&id)).await?;
    let events = s
        .events
        .into_iter()
        .map(|event| EventView {
            urls: ArtifactUrls::of(&s.session_id, &event),
            event,
        })
        .collect();
    Ok(Json(SessionView {
        session_id: s.session_id,
        events,
    }))
}

async fn get_artifact(
    State(st): State<AppState>,
    Path((session, file)): Path<(String, String)>,
) -> ServiceResult<Response> {
    let bytes = blocking(move || st.sessions.artifact(&session, &file)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}
