//! HTTP routes over [`Engine`].
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/health` | model reference |
//! | GET | `/sessions` | all manifests |
//! | POST | `/sessions` | multipart upload, returns the manifest |
//! | GET, DELETE | `/sessions/{id}` | |
//! | POST | `/sessions/{id}/initial` | round 1 |
//! | POST | `/sessions/{id}/rounds` | `{"base_round": T, "strokes": [...]}` |
//! | GET | `/sessions/{id}/rounds/{T}` | round record |
//! | GET | `/sessions/{id}/rounds/{T}/mask` | `?format=rle` (default) or `raw` |
//! | GET | `/sessions/{id}/rounds/{T}/prob` | raw f32, class-major |
//! | GET | `/sessions/{id}/volumes/{name}/{plane}/{index}` | 8-bit slice of `reference` or `target` |
//! | POST | `/sessions/{id}/replay` | recompute and compare every round |
//!
//! Raw responses carry the grid shape in `x-shape` as comma-separated extents.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use longiseg_core::io::{read_binary_mask, read_labels, read_volume};
use longiseg_core::views::extract_slice;
use longiseg_core::{Plane, Volume};

use crate::error::{Result, ServiceError};
use crate::rle::encode;
use crate::session::{Engine, RoundRecord, SessionInputs};
use crate::stroke::Stroke;

/// Upload size ceiling; a 512³ f32 volume is 512 MiB.
pub const BODY_LIMIT: usize = 2 << 30;

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    locks: Arc<Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>>,
}

impl AppState {
    pub fn new(engine: Engine) -> Self {
        Self {
            engine: Arc::new(engine),
            locks: Arc::default(),
        }
    }

    fn lock_for(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.locks
            .lock()
            .expect("lock table poisoned")
            .entry(id.to_string())
            .or_default()
            .clone()
    }

    /// Runs `f` on the blocking pool while holding the session's lock.
    async fn exclusive<T: Send + 'static>(
        &self,
        id: &str,
        f: impl FnOnce(&Engine) -> Result<T> + Send + 'static,
    ) -> Result<T> {
        let guard = self.lock_for(id).lock_owned().await;
        let engine = self.engine.clone();
        let out = tokio::task::spawn_blocking(move || {
            let _guard = guard;
            f(&engine)
        })
        .await
        .map_err(|e| ServiceError::Io(std::io::Error::other(e)))?;
        out
    }

    async fn blocking<T: Send + 'static>(&self, f: impl FnOnce(&Engine) -> Result<T> + Send + 'static) -> Result<T> {
        let engine = self.engine.clone();
        tokio::task::spawn_blocking(move || f(&engine))
            .await
            .map_err(|e| ServiceError::Io(std::io::Error::other(e)))?
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/initial", post(run_initial))
        .route("/sessions/{id}/rounds", post(submit_round))
        .route("/sessions/{id}/rounds/{round}", get(get_round))
        .route("/sessions/{id}/rounds/{round}/mask", get(get_mask))
        .route("/sessions/{id}/rounds/{round}/prob", get(get_prob))
        .route("/sessions/{id}/volumes/{name}/{plane}/{index}", get(get_slice))
        .route("/sessions/{id}/replay", post(replay))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "model_ref": state.engine.model_ref() }))
}

async fn list_sessions(State(state): State<AppState>) -> Result<Response> {
    Ok(Json(state.blocking(|e| e.list()).await?).into_response())
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response> {
    Ok(Json(state.blocking(move |e| e.manifest(&id)).await?).into_response())
}

async fn delete_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<StatusCode> {
    let key = id.clone();
    state.exclusive(&key, move |e| e.delete(&id)).await?;
    Ok(StatusCode::NO_CONTENT)
}

const UPLOAD_FIELDS: [&str; 6] = [
    "reference",
    "reference_seg",
    "target",
    "target_seg",
    "reference_lung",
    "target_lung",
];

fn upload_name(field: &str, file_name: Option<&str>) -> Result<String> {
    let ext = match file_name {
        Some(n) if n.ends_with(".nii.gz") => ".nii.gz",
        Some(n) if n.ends_with(".nii") => ".nii",
        _ => {
            return Err(ServiceError::BadRequest(format!(
                "part `{field}` needs a .nii or .nii.gz file name"
            )))
        }
    };
    Ok(format!("{field}{ext}"))
}

/// Reads the uploaded parts from a scratch directory into session inputs.
fn parse_uploads(engine: &Engine, uploads: &[(String, Vec<u8>)]) -> Result<SessionInputs> {
    let scratch = engine
        .config
        .data_dir
        .join(format!(".upload-{}.partial", uuid::Uuid::new_v4()));
    std::fs::create_dir_all(&scratch)?;
    let result = (|| {
        let mut paths = HashMap::new();
        for (name, bytes) in uploads {
            let path = scratch.join(name);
            std::fs::write(&path, bytes)?;
            let field = name.split('.').next().unwrap_or_default().to_string();
            paths.insert(field, path);
        }
        let need = |f: &str| {
            paths
                .get(f)
                .ok_or_else(|| ServiceError::BadRequest(format!("missing upload part `{f}`")))
        };
        fn bad(f: &'static str) -> impl Fn(longiseg_core::Error) -> ServiceError {
            move |e| ServiceError::BadRequest(format!("part `{f}`: {e}"))
        }
        let reference: Volume<f32> = read_volume(need("reference")?).map_err(bad("reference"))?;
        let target: Volume<f32> = read_volume(need("target")?).map_err(bad("target"))?;
        let reference_seg = read_labels(need("reference_seg")?).map_err(bad("reference_seg"))?;
        let target_seg = paths
            .get("target_seg")
            .map(|p| read_labels(p).map_err(bad("target_seg")))
            .transpose()?;
        let lungs = match (paths.get("reference_lung"), paths.get("target_lung")) {
            (Some(r), Some(t)) => Some((
                read_binary_mask(r).map_err(bad("reference_lung"))?,
                read_binary_mask(t).map_err(bad("target_lung"))?,
            )),
            (None, None) => None,
            _ => {
                return Err(ServiceError::BadRequest(
                    "lung masks must be uploaded for both scans or neither".into(),
                ))
            }
        };
        Ok(SessionInputs {
            reference,
            reference_seg,
            target,
            target_seg,
            lungs,
        })
    })();
    let _ = std::fs::remove_dir_all(&scratch);
    result
}

async fn create_session(State(state): State<AppState>, mut multipart: Multipart) -> Result<Response> {
    let mut uploads = Vec::new();
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ServiceError::BadRequest(format!("multipart: {e}")))?
    {
        let name = field.name().unwrap_or_default().to_string();
        if !UPLOAD_FIELDS.contains(&name.as_str()) {
            return Err(ServiceError::BadRequest(format!("unexpected upload part `{name}`")));
        }
        if uploads.iter().any(|(n, _): &(String, Vec<u8>)| n.split('.').next() == Some(name.as_str())) {
            return Err(ServiceError::BadRequest(format!("duplicate upload part `{name}`")));
        }
        let file_name = upload_name(&name, field.file_name())?;
        let bytes = field
            .bytes()
            .await
            .map_err(|e| ServiceError::BadRequest(format!("multipart: {e}")))?;
        uploads.push((file_name, bytes.to_vec()));
    }
    let manifest = state
        .blocking(move |e| {
            let inputs = parse_uploads(e, &uploads)?;
            e.create(inputs, &uploads)
        })
        .await?;
    Ok((StatusCode::CREATED, Json(manifest)).into_response())
}

async fn run_initial(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<RoundRecord>> {
    let key = id.clone();
    Ok(Json(state.exclusive(&key, move |e| e.run_initial(&id)).await?))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SubmitRequest {
    /// Latest round the client has seen.
    pub base_round: usize,
    #[serde(default)]
    pub strokes: Vec<Stroke>,
}

async fn submit_round(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<RoundRecord>> {
    let req: SubmitRequest =
        serde_json::from_slice(&body).map_err(|e| ServiceError::BadRequest(format!("request body: {e}")))?;
    let key = id.clone();
    Ok(Json(
        state
            .exclusive(&key, move |e| e.submit(&id, req.base_round, req.strokes))
            .await?,
    ))
}

async fn get_round(State(state): State<AppState>, Path((id, round)): Path<(String, usize)>) -> Result<Response> {
    let record = state
        .blocking(move |e| {
            let m = e.manifest(&id)?;
            round
                .checked_sub(1)
                .and_then(|i| m.rounds.get(i).cloned())
                .ok_or_else(|| ServiceError::NotFound(format!("{id}/rounds/{round}")))
        })
        .await?;
    Ok(Json(record).into_response())
}

#[derive(Debug, Deserialize)]
struct MaskQuery {
    format: Option<String>,
}

fn shape_header(shape: &[usize]) -> HeaderValue {
    let text: Vec<String> = shape.iter().map(|n| n.to_string()).collect();
    HeaderValue::from_str(&text.join(",")).expect("digits and commas")
}

fn raw_response(shape: &[usize], bytes: Vec<u8>) -> Response {
    let mut resp = (
        [(header::CONTENT_TYPE, HeaderValue::from_static("application/octet-stream"))],
        bytes,
    )
        .into_response();
    resp.headers_mut().insert("x-shape", shape_header(shape));
    resp
}

async fn get_mask(
    State(state): State<AppState>,
    Path((id, round)): Path<(String, usize)>,
    Query(q): Query<MaskQuery>,
) -> Result<Response> {
    let labels = state.blocking(move |e| e.round_labels(&id, round)).await?;
    match q.format.as_deref().unwrap_or("rle") {
        "rle" => Ok(Json(encode(&labels)).into_response()),
        "raw" => Ok(raw_response(&labels.shape(), labels.into_grid().into_vec())),
        other => Err(ServiceError::BadRequest(format!("unknown mask format `{other}`"))),
    }
}

async fn get_prob(State(state): State<AppState>, Path((id, round)): Path<(String, usize)>) -> Result<Response> {
    let pred = state.blocking(move |e| e.round_prediction(&id, round)).await?;
    let shape = pred.prob.shape();
    let bytes = pred
        .prob
        .classes()
        .iter()
        .flat_map(|g| g.as_slice().iter().flat_map(|v| v.to_le_bytes()))
        .collect();
    Ok(raw_response(&[3, shape[0], shape[1], shape[2]], bytes))
}

async fn get_slice(
    State(state): State<AppState>,
    Path((id, name, plane, index)): Path<(String, String, String, usize)>,
) -> Result<Response> {
    let plane: Plane = plane.parse().map_err(|e: longiseg_core::Error| ServiceError::BadRequest(e.to_string()))?;
    let slice = state
        .blocking(move |e| {
            let p = e.load_patient(&id)?;
            let grid = match name.as_str() {
                "reference" => &p.reference,
                "target" => &p.target,
                other => return Err(ServiceError::NotFound(format!("{id}/volumes/{other}"))),
            };
            if index >= plane.slice_count(grid.shape()) {
                return Err(ServiceError::NotFound(format!("{id}/volumes/{name}/{}/{index}", plane.name())));
            }
            Ok(extract_slice(grid, plane, index))
        })
        .await?;
    let bytes = slice
        .as_slice()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(raw_response(&slice.shape(), bytes))
}

async fn replay(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response> {
    let key = id.clone();
    Ok(Json(state.exclusive(&key, move |e| e.verify_replay(&id)).await?).into_response())
}
