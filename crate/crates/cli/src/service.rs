//! HTTP inference service.
//!
//! `POST /segment` takes a multipart form with an `image` file and either a
//! `text` field, a `support_image` + `support_mask` pair, or both. Optional
//! fields: `recipe`, `threshold`, `a`. The reply carries the binary mask and
//! the 16-bit probability map as base64 PNGs, so clients can re-threshold
//! without another request.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use axum::extract::multipart::MultipartRejection;
use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::Rgb32FImage;
use promptseg_core::imaging::{decode_mask, decode_rgb, BinaryMask};
use promptseg_core::model::SegmentationModel;
use promptseg_core::visual_prompts::{RecipeRegistry, DEFAULT_RECIPE};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;

use crate::inference::{png_bytes, predict, Support, UserPrompt};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub checkpoint: Option<PathBuf>,
    pub host: String,
    pub port: u16,
    /// Largest accepted upload per image field, in bytes.
    pub max_image_bytes: usize,
    /// Largest accepted image side after decoding.
    pub max_image_side: u32,
    /// Requests computed concurrently.
    pub workers: usize,
    /// Requests allowed to wait for a worker; beyond that the service
    /// answers 503.
    pub queue: usize,
    pub default_threshold: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            host: "127.0.0.1".into(),
            port: 8080,
            max_image_bytes: 8 << 20,
            max_image_side: 4096,
            workers: 2,
            queue: 32,
            default_threshold: 0.5,
        }
    }
}

impl ServiceConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_yaml::from_str(&text)?)
    }

    /// Apply `PROMPTSEG_CHECKPOINT` and `PROMPTSEG_PORT`.
    pub fn with_env(mut self) -> anyhow::Result<Self> {
        if let Ok(c) = std::env::var("PROMPTSEG_CHECKPOINT") {
            self.checkpoint = Some(c.into());
        }
        if let Ok(p) = std::env::var("PROMPTSEG_PORT") {
            self.port = p
                .parse()
                .map_err(|_| anyhow::anyhow!("PROMPTSEG_PORT={p:?} is not a port number"))?;
        }
        Ok(self)
    }
}

pub struct AppState {
    model: Arc<SegmentationModel>,
    model_hash: String,
    recipes: RecipeRegistry,
    cfg: ServiceConfig,
    admitted: Arc<Semaphore>,
    running: Arc<Semaphore>,
}

impl AppState {
    pub fn new(model: SegmentationModel, model_hash: String, cfg: ServiceConfig) -> Arc<Self> {
        let workers = cfg.workers.max(1);
        Arc::new(Self {
            model: Arc::new(model),
            model_hash,
            recipes: RecipeRegistry::default(),
            admitted: Arc::new(Semaphore::new(workers + cfg.queue)),
            running: Arc::new(Semaphore::new(workers)),
            cfg,
        })
    }

    /// Load the checkpoint named in the config; its SHA-256 becomes the
    /// model hash reported by `/health`.
    pub fn load(cfg: ServiceConfig) -> anyhow::Result<Arc<Self>> {
        let path = cfg
            .checkpoint
            .clone()
            .ok_or_else(|| anyhow::anyhow!("no checkpoint given (flag, config or PROMPTSEG_CHECKPOINT)"))?;
        let bytes = std::fs::read(&path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        let hash = hex::encode(Sha256::digest(&bytes));
        let model = SegmentationModel::load(&path)?;
        Ok(Self::new(model, hash, cfg))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    // room for three images plus form overhead; per-field limits are
    // enforced while reading
    let body_limit = state.cfg.max_image_bytes.saturating_mul(3).saturating_add(64 << 10);
    Router::new()
        .route("/segment", post(segment))
        .route("/health", get(health))
        .route("/recipes", get(recipes))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>) -> anyhow::Result<()> {
    let addr = format!("{}:{}", state.cfg.host, state.cfg.port);
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    tracing::info!(%addr, model_hash = %state.model_hash, "listening");
    axum::serve(listener, router(state)).await?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_hash: String,
}

async fn health(State(st): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        model_hash: st.model_hash.clone(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Recipes {
    pub recipes: Vec<String>,
    pub default: String,
}

async fn recipes(State(st): State<Arc<AppState>>) -> Json<Recipes> {
    Json(Recipes {
        recipes: st.recipes.ids().map(str::to_string).collect(),
        default: DEFAULT_RECIPE.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default)]
    pub fields: Vec<FieldError>,
}

struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: error.into(),
                fields: vec![],
            },
        }
    }

    fn fields(status: StatusCode, fields: Vec<FieldError>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: "invalid form fields".into(),
                fields,
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

fn field(name: &str, message: impl Into<String>) -> FieldError {
    FieldError {
        field: name.into(),
        message: message.into(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub mask_png_base64: String,
    pub prob_map_png_base64: String,
    pub threshold: f64,
    pub latency_ms: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Default)]
struct Form {
    image: Option<Vec<u8>>,
    text: Option<String>,
    support_image: Option<Vec<u8>>,
    support_mask: Option<Vec<u8>>,
    recipe: Option<String>,
    threshold: Option<String>,
    a: Option<String>,
}

const FILE_FIELDS: [&str; 3] = ["image", "support_image", "support_mask"];

async fn read_form(mut mp: Multipart, max_bytes: usize) -> Result<Form, ApiError> {
    let mut form = Form::default();
    let mut problems = Vec::new();
    loop {
        let next = mp.next_field().await.map_err(|e| ApiError::new(e.status(), e.body_text()))?;
        let Some(f) = next else { break };
        let name = f.name().unwrap_or_default().to_string();
        let data = f.bytes().await.map_err(|e| ApiError::new(e.status(), e.body_text()))?;
        if FILE_FIELDS.contains(&name.as_str()) && data.len() > max_bytes {
            return Err(ApiError {
                status: StatusCode::PAYLOAD_TOO_LARGE,
                body: ErrorBody {
                    error: "image too large".into(),
                    fields: vec![field(&name, format!("{} bytes exceeds the limit of {max_bytes}", data.len()))],
                },
            });
        }
        let text = || String::from_utf8(data.to_vec()).map_err(|_| field(&name, "not valid UTF-8"));
        let slot = match name.as_str() {
            "image" => {
                form.image = Some(data.to_vec());
                continue;
            }
            "support_image" => {
                form.support_image = Some(data.to_vec());
                continue;
            }
            "support_mask" => {
                form.support_mask = Some(data.to_vec());
                continue;
            }
            "text" => &mut form.text,
            "recipe" => &mut form.recipe,
            "threshold" => &mut form.threshold,
            "a" => &mut form.a,
            other => {
                problems.push(field(other, "unknown field"));
                continue;
            }
        };
        match text() {
            Ok(t) => *slot = Some(t),
            Err(e) => problems.push(e),
        }
    }
    if problems.is_empty() {
        Ok(form)
    } else {
        Err(ApiError::fields(StatusCode::BAD_REQUEST, problems))
    }
}

struct Job {
    image: Rgb32FImage,
    prompt: UserPrompt,
    threshold: f64,
}

fn unit_interval(name: &str, raw: Option<&str>, open: bool, problems: &mut Vec<FieldError>) -> Option<f64> {
    let raw = raw?;
    match raw.trim().parse::<f64>() {
        Ok(v) if open && v > 0.0 && v < 1.0 => Some(v),
        Ok(v) if !open && (0.0..=1.0).contains(&v) => Some(v),
        Ok(v) => {
            let range = if open { "(0, 1)" } else { "[0, 1]" };
            problems.push(field(name, format!("{v} outside {range}")));
            None
        }
        Err(_) => {
            problems.push(field(name, format!("{raw:?} is not a number")));
            None
        }
    }
}

fn check_side(name: &str, dims: (u32, u32), max: u32) -> Result<(), ApiError> {
    if dims.0 > max || dims.1 > max {
        return Err(ApiError {
            status: StatusCode::PAYLOAD_TOO_LARGE,
            body: ErrorBody {
                error: "image too large".into(),
                fields: vec![field(name, format!("{}x{} exceeds the limit of {max} per side", dims.0, dims.1))],
            },
        });
    }
    Ok(())
}

fn validate(form: Form, st: &AppState) -> Result<Job, ApiError> {
    let mut problems = Vec::new();
    if form.image.is_none() {
        problems.push(field("image", "required"));
    }
    let threshold = unit_interval("threshold", form.threshold.as_deref(), true, &mut problems)
        .unwrap_or(st.cfg.default_threshold);
    let a = unit_interval("a", form.a.as_deref(), false, &mut problems);
    match (&form.support_image, &form.support_mask) {
        (Some(_), None) => problems.push(field("support_mask", "required with support_image")),
        (None, Some(_)) => problems.push(field("support_image", "required with support_mask")),
        _ => {}
    }
    let recipe = match st.recipes.resolve(form.recipe.as_deref().unwrap_or(DEFAULT_RECIPE)) {
        Ok(r) => Some(r),
        Err(e) => {
            problems.push(field("recipe", e.to_string()));
            None
        }
    };
    let decode_image = |name: &str, bytes: &[u8], problems: &mut Vec<FieldError>| match decode_rgb(bytes) {
        Ok(img) => Some(img),
        Err(e) => {
            problems.push(field(name, format!("not a readable image: {e}")));
            None
        }
    };
    let image = form.image.as_deref().and_then(|b| decode_image("image", b, &mut problems));
    let support_image = form
        .support_image
        .as_deref()
        .and_then(|b| decode_image("support_image", b, &mut problems));
    let support_mask: Option<BinaryMask> = form.support_mask.as_deref().and_then(|b| match decode_mask(b) {
        Ok(m) => Some(m),
        Err(e) => {
            problems.push(field("support_mask", e.to_string()));
            None
        }
    });
    let max = st.cfg.max_image_side;
    for (name, dims) in [
        ("image", image.as_ref().map(|i| i.dimensions())),
        ("support_image", support_image.as_ref().map(|i| i.dimensions())),
        ("support_mask", support_mask.as_ref().map(|m| m.dims())),
    ] {
        if let Some(d) = dims {
            check_side(name, d, max)?;
        }
    }
    if let (Some(i), Some(m)) = (&support_image, &support_mask) {
        if i.dimensions() != m.dims() {
            problems.push(field("support_mask", "size differs from support_image"));
        } else if m.is_empty() {
            problems.push(field("support_mask", "mask is empty"));
        }
    }
    if !problems.is_empty() {
        return Err(ApiError::fields(StatusCode::BAD_REQUEST, problems));
    }
    let support = match (support_image, support_mask, recipe) {
        (Some(image), Some(mask), Some(recipe)) => Some(Support { image, mask, recipe }),
        _ => None,
    };
    let prompt = UserPrompt {
        text: form.text,
        support,
        a,
    };
    if prompt.is_empty() {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "prompt missing: send `text`, or `support_image` with `support_mask`",
        ));
    }
    Ok(Job {
        image: image.expect("checked above"),
        prompt,
        threshold,
    })
}

async fn segment(State(st): State<Arc<AppState>>, mp: Result<Multipart, MultipartRejection>) -> Response {
    match segment_inner(st, mp).await {
        Ok(r) => Json(r).into_response(),
        Err(e) => {
            tracing::warn!(status = e.status.as_u16(), error = %e.body.error, "segment rejected");
            e.into_response()
        }
    }
}

async fn segment_inner(st: Arc<AppState>, mp: Result<Multipart, MultipartRejection>) -> Result<SegmentResponse, ApiError> {
    let start = Instant::now();
    let mp = mp.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
    let form = read_form(mp, st.cfg.max_image_bytes).await?;
    let job = validate(form, &st)?;
    let _admission = st
        .admitted
        .clone()
        .try_acquire_owned()
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "request queue is full"))?;
    let _worker = st
        .running
        .clone()
        .acquire_owned()
        .await
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "service shutting down"))?;
    let model = st.model.clone();
    let (w, h) = job.image.dimensions();
    let pred = tokio::task::spawn_blocking(move || predict(&model, &job.image, job.prompt, job.threshold))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| match e {
            promptseg_core::Error::DegenerateMask(_) | promptseg_core::Error::Input(_) => {
                ApiError::new(StatusCode::BAD_REQUEST, e.to_string())
            }
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        })?;
    let encode = |r: image::ImageResult<Vec<u8>>| {
        r.map(|b| B64.encode(b))
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
    };
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    tracing::info!(width = w, height = h, latency_ms, "segmented");
    Ok(SegmentResponse {
        mask_png_base64: encode(png_bytes(&pred.mask))?,
        prob_map_png_base64: encode(png_bytes(&pred.quantized))?,
        threshold: pred.threshold,
        latency_ms,
        width: w,
        height: h,
    })
}
