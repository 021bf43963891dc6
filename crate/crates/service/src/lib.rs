//! HTTP facade for the interactive viewer: views, renders, click and text
//! selection, and undoable instance edits over one in-memory scene.

mod error;
mod state;

use std::io::Cursor;
use std::sync::Arc;

use axum::extract::State;
use axum::http::header;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use splatseg::association::binarize;
use splatseg::edit::{insert_instance, recolor_instance, remove_instance};
use splatseg::io::{save_bundle, to_rgb8};
use splatseg::query::{click_select, text_select, SelectMode, DEFAULT_THRESHOLD};
use splatseg::render::{compute_blend_weights_subset, render_color, RgbImage};
use splatseg::scene::{Camera, GaussianPoint, InstanceId};

pub use error::ApiError;
pub use state::{AppState, Snapshot, UNDO_DEPTH};

/// Largest render, in pixels.
pub const MAX_PIXELS: u64 = 1024 * 1024;
/// Background of every render.
pub const BACKGROUND: [f64; 3] = [0.0, 0.0, 0.0];
/// Overlay pixels are blended halfway toward this color.
pub const TINT: [f64; 3] = [1.0, 0.15, 0.15];

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/views", get(list_views).post(add_view))
        .route("/render", post(render))
        .route("/click", post(click))
        .route("/query", post(query))
        .route("/edit", post(edit))
        .route("/undo", post(undo))
        .route("/save", post(save))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(state: Arc<AppState>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

fn parse_id(s: &str) -> ApiResult<InstanceId> {
    s.parse().map_err(ApiError::from)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ViewInfo {
    pub id: usize,
    /// `bundle` for cameras loaded at startup, `session` for added ones.
    pub source: String,
    #[serde(flatten)]
    pub camera: Camera,
}

async fn list_views(State(s): State<Arc<AppState>>) -> Json<Vec<ViewInfo>> {
    let n = s.bundle_cameras();
    Json(
        s.cameras()
            .into_iter()
            .enumerate()
            .map(|(id, camera)| ViewInfo {
                id,
                source: if id < n { "bundle" } else { "session" }.into(),
                camera,
            })
            .collect(),
    )
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ViewId {
    pub id: usize,
}

async fn add_view(State(s): State<Arc<AppState>>, Json(cam): Json<Camera>) -> ApiResult<Json<ViewId>> {
    cam.validate()?;
    Ok(Json(ViewId { id: s.add_camera(cam) }))
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct RenderRequest {
    pub view_id: Option<usize>,
    pub pose: Option<Camera>,
    pub width: Option<u32>,
    pub height: Option<u32>,
    pub overlay: Option<String>,
}

fn resolve_camera(s: &AppState, view_id: Option<usize>, pose: Option<Camera>) -> ApiResult<Camera> {
    match (view_id, pose) {
        (Some(id), None) => s.camera(id).ok_or_else(|| ApiError::not_found(format!("view {id}"))),
        (None, Some(cam)) => {
            cam.validate()?;
            Ok(cam)
        }
        _ => Err(ApiError::invalid("give exactly one of view_id and pose")),
    }
}

/// Color render, with the instance's binarized single-instance alpha
/// tinted when `overlay` is set.
pub fn render_view(snap: &Snapshot, cam: &Camera, overlay: Option<InstanceId>) -> ApiResult<RgbImage> {
    let mut img = render_color(&snap.scene, cam, BACKGROUND);
    if let Some(id) = overlay {
        let record = snap
            .table
            .get(id)
            .ok_or_else(|| ApiError::not_found(format!("no instance {id}")))?;
        let alpha = compute_blend_weights_subset(&snap.scene, cam, &record.members).alpha_map();
        let mask = binarize(&alpha, 0.5);
        for (px, hit) in img.data.iter_mut().zip(&mask.data) {
            if *hit {
                *px = std::array::from_fn(|c| 0.5 * px[c] + 0.5 * TINT[c]);
            }
        }
    }
    Ok(img)
}

fn png(img: &RgbImage) -> ApiResult<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    to_rgb8(img)
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(out.into_inner())
}

async fn render(State(s): State<Arc<AppState>>, Json(req): Json<RenderRequest>) -> ApiResult<impl IntoResponse> {
    let mut cam = resolve_camera(&s, req.view_id, req.pose)?;
    if req.width.is_some() || req.height.is_some() {
        let (w, h) = (req.width.unwrap_or(cam.width), req.height.unwrap_or(cam.height));
        if w == 0 || h == 0 {
            return Err(ApiError::invalid("image size must be nonzero"));
        }
        if u64::from(w) * u64::from(h) > MAX_PIXELS {
            return Err(ApiError::invalid(format!("{w}x{h} exceeds {MAX_PIXELS} pixels")));
        }
        cam = cam.resized(w, h)?;
    }
    if u64::from(cam.width) * u64::from(cam.height) > MAX_PIXELS {
        return Err(ApiError::invalid(format!("{}x{} exceeds {MAX_PIXELS} pixels", cam.width, cam.height)));
    }
    let overlay = req.overlay.as_deref().map(parse_id).transpose()?;
    let snap = s.snapshot();
    let bytes = blocking(move || png(&render_view(&snap, &cam, overlay)?)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClickRequest {
    pub view_id: usize,
    pub u: u32,
    pub v: u32,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct ClickResponse {
    pub instance_id: Option<String>,
    pub member_count: usize,
}

async fn click(State(s): State<Arc<AppState>>, Json(req): Json<ClickRequest>) -> ApiResult<Json<ClickResponse>> {
    let cam = s
        .camera(req.view_id)
        .ok_or_else(|| ApiError::not_found(format!("view {}", req.view_id)))?;
    let snap = s.snapshot();
    blocking(move || {
        let hit = click_select(&snap.scene, &snap.table, &cam, (req.u, req.v))?;
        Ok(Json(ClickResponse {
            member_count: hit.map_or(0, |id| snap.table.get(id).map_or(0, |r| r.members.len())),
            instance_id: hit.map(|id| id.to_string()),
        }))
    })
    .await
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct QueryRequest {
    pub embedding: Option<Vec<f64>>,
    pub class_name: Option<String>,
    /// `top1` or `threshold` (the default).
    pub mode: Option<String>,
    /// Cosine cutoff in threshold mode.
    pub theta: Option<f64>,
}

fn select_mode(mode: Option<&str>, theta: Option<f64>) -> ApiResult<SelectMode> {
    match mode.unwrap_or("threshold") {
        "top1" => Ok(SelectMode::Top1),
        "threshold" => Ok(SelectMode::Threshold(theta.unwrap_or(DEFAULT_THRESHOLD))),
        other => Err(ApiError::invalid(format!("unknown mode {other:?}"))),
    }
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryHit {
    pub id: String,
    pub cosine: f64,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub instances: Vec<QueryHit>,
    pub point_count: usize,
}

async fn query(State(s): State<Arc<AppState>>, Json(req): Json<QueryRequest>) -> ApiResult<Json<QueryResponse>> {
    let vector = match (req.embedding, req.class_name) {
        (Some(v), None) => v,
        (None, Some(name)) => s
            .embeddings
            .iter()
            .find(|e| e.label == name)
            .map(|e| e.vector.clone())
            .ok_or_else(|| ApiError::not_found(format!("class {name:?} is not in the embedding file")))?,
        _ => return Err(ApiError::invalid("give exactly one of embedding and class_name")),
    };
    let mode = select_mode(req.mode.as_deref(), req.theta)?;
    let snap = s.snapshot();
    if !snap.table.has_embeddings() {
        return Err(ApiError::conflict("no instance carries an embedding"));
    }
    let sel = text_select(&snap.table, &vector, mode)?;
    Ok(Json(QueryResponse {
        instances: sel
            .instances
            .into_iter()
            .map(|(id, cosine)| QueryHit {
                id: id.to_string(),
                cosine,
            })
            .collect(),
        point_count: sel.points.len(),
    }))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditRequest {
    Remove { instance: String },
    Recolor { instance: String, color: [f64; 3] },
    Insert { instance: String, points: Vec<GaussianPoint> },
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSummary {
    pub point_count: usize,
    pub instance_count: usize,
    pub undo_depth: usize,
}

fn summary(snap: &Snapshot, undo_depth: usize) -> Json<WorldSummary> {
    Json(WorldSummary {
        point_count: snap.scene.len(),
        instance_count: snap.table.len(),
        undo_depth,
    })
}

fn apply_edit(old: &Snapshot, req: &EditRequest) -> ApiResult<Snapshot> {
    Ok(match req {
        EditRequest::Remove { instance } => {
            let (scene, table) = remove_instance(&old.scene, &old.table, parse_id(instance)?)?;
            Snapshot {
                scene: Arc::new(scene),
                table: Arc::new(table),
                trained: None,
            }
        }
        EditRequest::Recolor { instance, color } => {
            let scene = recolor_instance(&old.scene, &old.table, parse_id(instance)?, *color)?;
            Snapshot {
                scene: Arc::new(scene),
                ..old.clone()
            }
        }
        EditRequest::Insert { instance, points } => {
            let (scene, table) = insert_instance(&old.scene, &old.table, points, parse_id(instance)?)?;
            Snapshot {
                scene: Arc::new(scene),
                table: Arc::new(table),
                trained: None,
            }
        }
    })
}

async fn edit(State(s): State<Arc<AppState>>, Json(req): Json<EditRequest>) -> ApiResult<Json<WorldSummary>> {
    let (snap, depth) = s.apply(|old| apply_edit(old, &req)).await?;
    Ok(summary(&snap, depth))
}

async fn undo(State(s): State<Arc<AppState>>) -> ApiResult<Json<WorldSummary>> {
    let (snap, depth) = s.undo().await.ok_or_else(|| ApiError::conflict("nothing to undo"))?;
    Ok(summary(&snap, depth))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SaveResponse {
    pub path: String,
}

async fn save(State(s): State<Arc<AppState>>) -> ApiResult<Json<SaveResponse>> {
    let path = s
        .save_path
        .clone()
        .ok_or_else(|| ApiError::conflict("service was started without a save path"))?;
    let bundle = s.bundle();
    let shown = path.display().to_string();
    blocking(move || Ok(save_bundle(&path, &bundle)?)).await?;
    Ok(Json(SaveResponse { path: shown }))
}
