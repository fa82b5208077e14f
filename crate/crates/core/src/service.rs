//! HTTP inference service: `POST /outpaint`, `GET /neighbors`, `GET /health`.
//!
//! The model and the reference index live behind atomic pointers so they can
//! be replaced between requests while handlers keep reading a consistent
//! snapshot. Requests never mutate either.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use arc_swap::ArcSwapOption;
use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelCheckpoint;
use crate::dataprep::{EmbeddingPlugin, RandomProjection, ReferenceIndex, DEFAULT_K};
use crate::error::{RegoError, Result};
use crate::generator::{outpaint, Generator};
use crate::imageio::{base64_png_rgb, decode_base64_image, tensor_to_rgb, ImageSample, Sketch};
use crate::tensor::Tensor;

/// Server-side binarization threshold for submitted sketches.
pub const SKETCH_THRESHOLD: f64 = 0.5;
pub const DEFAULT_PORT: u16 = 8080;

/// A checkpoint with its instantiated architecture.
pub struct LoadedModel {
    pub checkpoint: ModelCheckpoint,
    pub generator: Generator,
}

impl LoadedModel {
    pub fn new(checkpoint: ModelCheckpoint) -> Result<Self> {
        let generator = checkpoint.generator()?;
        Ok(LoadedModel { checkpoint, generator })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(ModelCheckpoint::load(path)?)
    }

    /// `(H, W)` of full images.
    pub fn resolution(&self) -> (usize, usize) {
        let g = self.generator.config();
        (g.height, g.width)
    }
}

/// The retrieval index plus the images its ids refer to.
pub struct IndexBundle {
    pub index: ReferenceIndex,
    pub embedder: RandomProjection,
    pub images: BTreeMap<String, ImageSample>,
}

impl IndexBundle {
    pub fn new(index: ReferenceIndex, images: Vec<ImageSample>) -> Result<Self> {
        let embedder = RandomProjection::from_id(index.embedder_id())?;
        let images = images.into_iter().map(|s| (s.id.clone(), s)).collect();
        Ok(IndexBundle { index, embedder, images })
    }

    /// Loads `index.json` and whatever of `images/<id>.png` exists next to it.
    pub fn load(index_path: &Path) -> Result<Self> {
        let index = ReferenceIndex::load(index_path)?;
        let dir = index_path.parent().unwrap_or(Path::new(".")).join("images");
        let mut images = Vec::new();
        for id in index.ids() {
            let p = dir.join(format!("{id}.png"));
            if p.exists() {
                let mut s = ImageSample::load(&p)?;
                s.id = id.clone();
                images.push(s);
            }
        }
        Self::new(index, images)
    }

    /// Ranked neighbors of an arbitrary image (typically a left half).
    pub fn query_image(&self, pixels: &Tensor, k: usize) -> Result<Vec<(String, f64)>> {
        self.index.query_embedding(&self.embedder.embed(pixels)?, k)
    }
}

#[derive(Default)]
pub struct AppState {
    model: ArcSwapOption<LoadedModel>,
    index: ArcSwapOption<IndexBundle>,
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_model(&self, model: LoadedModel) {
        self.model.store(Some(Arc::new(model)));
    }

    pub fn set_index(&self, index: IndexBundle) {
        self.index.store(Some(Arc::new(index)));
    }

    pub fn model(&self) -> Option<Arc<LoadedModel>> {
        self.model.load_full()
    }

    pub fn index(&self) -> Option<Arc<IndexBundle>> {
        self.index.load_full()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Sketch,
    Random,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutpaintRequest {
    pub left_image: String,
    #[serde(default)]
    pub sketch: Option<String>,
    #[serde(default)]
    pub reference_id: Option<String>,
    #[serde(default)]
    pub mode: Mode,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OutpaintResponse {
    pub composite: String,
    pub right_half: String,
    pub reference_id_used: String,
    pub latency_ms: f64,
}

/// Value of `reference_id_used` when no reference could be resolved.
pub const NO_REFERENCE: &str = "none";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NeighborEntry {
    pub id: String,
    pub similarity: f64,
    /// Base64 PNG of the indexed image, when it is available to the server.
    pub thumbnail: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub checkpoint_version: Option<u32>,
    pub index_size: Option<usize>,
}

#[derive(Debug, Deserialize)]
pub struct NeighborsQuery {
    pub image: String,
    pub k: Option<usize>,
}

/// An HTTP status with a JSON `{"error": ...}` body.
#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<RegoError> for ApiError {
    fn from(e: RegoError) -> Self {
        let status = match &e {
            RegoError::NotFound(_) => StatusCode::NOT_FOUND,
            RegoError::Shape(_)
            | RegoError::Config(_)
            | RegoError::InvalidValue(_)
            | RegoError::Image(_)
            | RegoError::Json(_)
            | RegoError::DegenerateEmbedding(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

fn unavailable(what: &str) -> ApiError {
    ApiError(StatusCode::SERVICE_UNAVAILABLE, format!("{what} not loaded"))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/outpaint", post(outpaint_handler))
        .route("/neighbors", get(neighbors_handler))
        .route("/health", get(health_handler))
        .with_state(state)
}

async fn health_handler(State(state): State<Arc<AppState>>) -> Json<HealthResponse> {
    let model = state.model();
    Json(HealthResponse {
        status: if model.is_some() { "ready" } else { "loading" }.into(),
        checkpoint_version: model.map(|m| m.checkpoint.version),
        index_size: state.index().map(|i| i.index.len()),
    })
}

fn decode_left(data: &str, (h, w): (usize, usize)) -> std::result::Result<Tensor, ApiError> {
    let img = decode_base64_image(data).map_err(|e| bad_request(format!("left_image: {e}")))?;
    let rgb = img.to_rgb8();
    if rgb.dimensions() != ((w / 2) as u32, h as u32) {
        return Err(bad_request(format!(
            "left_image is {}x{}, the model expects {}x{}",
            rgb.height(),
            rgb.width(),
            h,
            w / 2
        )));
    }
    Ok(ImageSample::from_rgb("request", &rgb).pixels().clone())
}

fn decode_sketch(data: &str, (h, w): (usize, usize)) -> std::result::Result<Sketch, ApiError> {
    let img = decode_base64_image(data).map_err(|e| bad_request(format!("sketch: {e}")))?;
    let gray = img.to_luma8();
    if gray.dimensions() != ((w / 2) as u32, h as u32) {
        return Err(bad_request(format!(
            "sketch is {}x{}, the model expects {}x{}",
            gray.height(),
            gray.width(),
            h,
            w / 2
        )));
    }
    Ok(Sketch::from_gray(&gray, SKETCH_THRESHOLD))
}

/// Runs one request against fixed model and index snapshots.
pub fn handle_outpaint(
    model: &LoadedModel,
    index: Option<&IndexBundle>,
    req: &OutpaintRequest,
) -> std::result::Result<OutpaintResponse, ApiError> {
    let start = Instant::now();
    let res = model.resolution();
    let left = decode_left(&req.left_image, res)?;
    let sketch = match (req.mode, &req.sketch) {
        (Mode::Random, _) => None,
        (Mode::Sketch, Some(s)) => Some(decode_sketch(s, res)?),
        (Mode::Sketch, None) => return Err(bad_request("mode \"sketch\" requires a sketch")),
    };
    let half = res.1 / 2;
    let (reference, reference_id) = match (&req.reference_id, index) {
        (Some(_), None) => return Err(unavailable("index")),
        (Some(id), Some(ix)) => {
            let img = ix
                .images
                .get(id)
                .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown reference_id `{id}`")))?;
            (Some(img.pixels().slice_width(half, half)), id.clone())
        }
        (None, Some(ix)) => {
            // top-1 neighbor of the submitted left half
            let ranked = ix.query_image(&left, ix.index.len())?;
            match ranked.into_iter().find(|(id, _)| ix.images.contains_key(id)) {
                Some((id, _)) => (Some(ix.images[&id].pixels().slice_width(half, half)), id),
                None => (None, NO_REFERENCE.to_string()),
            }
        }
        (None, None) => (None, NO_REFERENCE.to_string()),
    };
    if let Some(r) = &reference {
        if r.shape() != [1, 3, res.0, half] {
            return Err(bad_request(format!(
                "reference `{reference_id}` has shape {:?}, not the model's resolution",
                r.shape()
            )));
        }
    }
    let out = outpaint(
        &model.generator,
        &model.checkpoint.params,
        &left,
        sketch.as_ref(),
        reference.as_ref(),
    )?;
    Ok(OutpaintResponse {
        composite: base64_png_rgb(&tensor_to_rgb(&out.composite))?,
        right_half: base64_png_rgb(&tensor_to_rgb(&out.right))?,
        reference_id_used: reference_id,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

async fn outpaint_handler(State(state): State<Arc<AppState>>, body: Bytes) -> std::result::Result<Json<OutpaintResponse>, ApiError> {
    let model = state.model().ok_or_else(|| unavailable("model"))?;
    let index = state.index();
    let req: OutpaintRequest =
        serde_json::from_slice(&body).map_err(|e| bad_request(format!("malformed request: {e}")))?;
    let resp = tokio::task::spawn_blocking(move || handle_outpaint(&model, index.as_deref(), &req))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(resp))
}

/// Neighbors for an indexed id or a base64 image, most similar first.
pub fn handle_neighbors(ix: &IndexBundle, image: &str, k: usize) -> std::result::Result<Vec<NeighborEntry>, ApiError> {
    if k == 0 {
        return Err(bad_request("k must be >= 1"));
    }
    let ranked = if ix.index.contains(image) {
        if k > ix.index.len() - 1 {
            return Err(bad_request(format!("k = {k} exceeds the {} other indexed images", ix.index.len() - 1)));
        }
        ix.index.query_neighbors(image, k)?
    } else {
        if k > ix.index.len() {
            return Err(bad_request(format!("k = {k} exceeds the index size {}", ix.index.len())));
        }
        let img = decode_base64_image(image).map_err(|e| bad_request(format!("image is neither an indexed id nor a valid image: {e}")))?;
        let pixels = ImageSample::from_rgb("query", &img.to_rgb8()).pixels().clone();
        ix.query_image(&pixels, k)?
    };
    ranked
        .into_iter()
        .map(|(id, similarity)| {
            let thumbnail = match ix.images.get(&id) {
                Some(s) => Some(base64_png_rgb(&s.to_rgb())?),
                None => None,
            };
            Ok(NeighborEntry { id, similarity, thumbnail })
        })
        .collect::<Result<_>>()
        .map_err(ApiError::from)
}

async fn neighbors_handler(
    State(state): State<Arc<AppState>>,
    query: std::result::Result<Query<NeighborsQuery>, axum::extract::rejection::QueryRejection>,
) -> std::result::Result<Json<Vec<NeighborEntry>>, ApiError> {
    let Query(q) = query.map_err(|e| bad_request(e.body_text()))?;
    let ix = state.index().ok_or_else(|| unavailable("index"))?;
    let k = q.k.unwrap_or(DEFAULT_K);
    let out = tokio::task::spawn_blocking(move || handle_neighbors(&ix, &q.image, k))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(out))
}

#[derive(Clone, Debug, Default)]
pub struct ServeConfig {
    pub checkpoint: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub port: u16,
}

impl ServeConfig {
    /// Fills unset fields from `REGO_CHECKPOINT`, `REGO_INDEX` and `REGO_PORT`.
    pub fn with_env(mut self) -> Result<Self> {
        if self.checkpoint.is_none() {
            self.checkpoint = std::env::var_os("REGO_CHECKPOINT").map(PathBuf::from);
        }
        if self.index.is_none() {
            self.index = std::env::var_os("REGO_INDEX").map(PathBuf::from);
        }
        if self.port == 0 {
            self.port = match std::env::var("REGO_PORT") {
                Ok(p) => p
                    .parse()
                    .map_err(|_| RegoError::Config(format!("REGO_PORT `{p}` is not a port number")))?,
                Err(_) => DEFAULT_PORT,
            };
        }
        Ok(self)
    }
}

/// Binds, starts loading in the background and serves until Ctrl-C.
pub async fn serve(cfg: ServeConfig) -> Result<()> {
    let checkpoint = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| RegoError::Config("no checkpoint given (flag or REGO_CHECKPOINT)".into()))?;
    let state = Arc::new(AppState::new());
    let addr = SocketAddr::from(([0, 0, 0, 0], cfg.port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| RegoError::io(format!("port {}", cfg.port), e))?;
    log::info!("listening on {addr}");
    let loader = state.clone();
    let index = cfg.index.clone();
    let load = tokio::task::spawn_blocking(move || -> Result<()> {
        if let Some(p) = index {
            loader.set_index(IndexBundle::load(&p)?);
            log::info!("index loaded from {}", p.display());
        }
        loader.set_model(LoadedModel::load(&checkpoint)?);
        log::info!("model loaded from {}", checkpoint.display());
        Ok(())
    });
    let server = tokio::spawn(async move {
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    });
    match load.await {
        Ok(Ok(())) => {}
        Ok(Err(e)) => return Err(e),
        Err(e) => return Err(RegoError::Config(format!("loader failed: {e}"))),
    }
    match server.await {
        Ok(r) => r.map_err(|e| RegoError::io("server", e)),
        Err(e) => Err(RegoError::Config(format!("server task failed: {e}"))),
    }
}
