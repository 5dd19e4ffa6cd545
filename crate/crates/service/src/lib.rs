//! HTTP service for point-and-ask inference.
//!
//! | route | purpose |
//! |---|---|
//! | `POST /v1/answer` | answer a question about a point, with attention boxes |
//! | `GET /v1/images?page=&size=` | paginated image list ordered by id |
//! | `GET /v1/images/{id}` | metadata plus a deterministic PNG rendering |
//!
//! Points are in original image pixels; all scaling is the client's job.
//! State is immutable after startup, so any number of requests may run at
//! once and identical requests get identical bodies apart from `latency_ms`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use pointqa::features::{FeatureStore, Strategy};
use pointqa::inputs::InputBuilder;
use pointqa::models::{AnswerDistribution, Model};
use pointqa::store::ObjectAnnotation;
use pointqa::{AnnotationStore, BoundingBox, ImageAnnotation, Point, PointQAInstance, Split};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tower_http::cors::{AllowOrigin, CorsLayer};

mod raster;

pub use raster::rasterize;

/// Attention entries returned unless `?full=1` is given.
pub const TOP_K: usize = 20;
pub const DEFAULT_PAGE_SIZE: usize = 20;
pub const MAX_PAGE_SIZE: usize = 500;
/// Region capacity when a checkpoint does not record one.
pub const DEFAULT_MAX_REGIONS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedBox {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub weight: f64,
}

/// Raw output of an [`Answerer`]. Attention lists cover real regions only,
/// in region order; the handler sorts and truncates them.
#[derive(Debug, Clone, PartialEq)]
pub struct Answer {
    pub scores: AnswerDistribution,
    pub local: Vec<WeightedBox>,
    pub global: Option<Vec<WeightedBox>>,
}

#[derive(Debug, Error)]
pub enum AnswerError {
    #[error("unknown image {0}")]
    UnknownImage(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("inference failed: {0}")]
    Internal(String),
}

/// Anything that can answer a pointed question.
pub trait Answerer: Send + Sync {
    fn answer(&self, image: &ImageAnnotation, point: Point, question: &str) -> Result<Answer, AnswerError>;
}

/// Runs a checkpoint with `all_containing` region selection.
pub struct ModelAnswerer {
    model: Model,
    store: Arc<AnnotationStore>,
    features: Arc<FeatureStore>,
    max_regions: usize,
}

impl ModelAnswerer {
    pub fn new(model: Model, store: Arc<AnnotationStore>, features: Arc<FeatureStore>, max_regions: usize) -> Self {
        Self { model, store, features, max_regions }
    }
}

fn weighted(weights: &[f64], boxes: &[BoundingBox], mask: &[bool]) -> Vec<WeightedBox> {
    weights
        .iter()
        .zip(boxes)
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|((&weight, &bbox), _)| WeightedBox { bbox, weight })
        .collect()
}

impl Answerer for ModelAnswerer {
    fn answer(&self, image: &ImageAnnotation, point: Point, question: &str) -> Result<Answer, AnswerError> {
        let inputs = InputBuilder::new(&self.store, &self.features, self.max_regions, Strategy::AllContaining);
        let inst = PointQAInstance {
            qa_id: "request".into(),
            image_id: image.image_id.clone(),
            question: question.into(),
            point: Some(point),
            gt_box: None,
            answer: String::new(),
            split: Split::Test,
            meta: pointqa::dataset::InstanceMeta::new(pointqa::dataset::Task::Local),
        };
        let prepared = inputs.build(&self.model, &inst).map_err(|e| match e {
            pointqa::inputs::InputError::UnknownImage(id) | pointqa::inputs::InputError::NoFeatures(id) => {
                AnswerError::UnknownImage(id)
            }
            other => AnswerError::BadRequest(other.to_string()),
        })?;
        let (scores, record) = self.model.predict(&prepared.sample).map_err(|e| AnswerError::Internal(e.to_string()))?;
        let s = &prepared.sample;
        let local_regions = if self.model.needs_point() { s.point.as_ref() } else { s.image.as_ref() };
        let local = local_regions.map(|r| weighted(&record.local, &r.boxes, &r.mask)).unwrap_or_default();
        let global = match (&record.global, &s.image) {
            (Some(w), Some(r)) => Some(weighted(w, &r.boxes, &r.mask)),
            _ => None,
        };
        Ok(Answer { scores, local, global })
    }
}

/// Uniform scores over fixed labels; attention spread evenly over the
/// objects containing the point (or all objects when none does).
pub struct StubAnswerer {
    pub labels: Vec<String>,
}

impl Answerer for StubAnswerer {
    fn answer(&self, image: &ImageAnnotation, point: Point, _question: &str) -> Result<Answer, AnswerError> {
        let inside = |o: &&ObjectAnnotation| pointqa::geometry::contains(&o.bbox, point).unwrap_or(false);
        let mut hits: Vec<&ObjectAnnotation> = image.objects.iter().filter(inside).collect();
        if hits.is_empty() {
            hits = image.objects.iter().collect();
        }
        let w = 1.0 / hits.len().max(1) as f64;
        let n = self.labels.len().max(1) as f64;
        Ok(Answer {
            scores: AnswerDistribution { labels: self.labels.clone(), probs: vec![1.0 / n; self.labels.len()] },
            local: hits.iter().map(|o| WeightedBox { bbox: o.bbox, weight: w }).collect(),
            global: None,
        })
    }
}

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<AnnotationStore>,
    /// Images the answerer can serve; `None` means every annotated image.
    pub known: Option<Arc<FeatureStore>>,
    pub answerer: Arc<dyn Answerer>,
    /// Allowed CORS origins; empty allows any origin.
    pub cors_origins: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerRequest {
    pub image_id: String,
    pub point: Point,
    pub question: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Score {
    pub label: String,
    pub prob: f64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct AttentionBody {
    pub local: Vec<WeightedBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global: Option<Vec<WeightedBox>>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct AnswerResponse {
    pub answer: String,
    pub scores: Vec<Score>,
    pub attention: AttentionBody,
    pub latency_ms: f64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ImageSummary {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thumbnail_uri: Option<String>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ImagePage {
    pub images: Vec<ImageSummary>,
    pub page: usize,
    pub size: usize,
    pub total: usize,
    pub pages: usize,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ImageDetail {
    #[serde(flatten)]
    pub annotation: ImageAnnotation,
    /// Base64 PNG of the synthetic rendering.
    pub raster_png: String,
}

/// JSON error body `{"error": ...}` with a status code.
#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

fn bad(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

/// Sorts by descending weight (ties by position) and keeps the top `k`.
fn top(mut v: Vec<WeightedBox>, k: Option<usize>) -> Vec<WeightedBox> {
    // stable sort keeps region order among ties
    v.sort_by(|a, b| b.weight.total_cmp(&a.weight));
    if let Some(k) = k {
        v.truncate(k);
    }
    v
}

fn flag(q: &HashMap<String, String>, name: &str) -> Result<bool, ApiError> {
    match q.get(name).map(String::as_str) {
        None | Some("0") | Some("false") => Ok(false),
        Some("1") | Some("true") | Some("") => Ok(true),
        Some(other) => Err(bad(format!("{name} must be 0 or 1, got {other:?}"))),
    }
}

async fn answer(
    State(state): State<AppState>,
    Query(q): Query<HashMap<String, String>>,
    body: Bytes,
) -> Result<Json<AnswerResponse>, ApiError> {
    let start = Instant::now();
    let full = flag(&q, "full")?;
    let req: AnswerRequest = serde_json::from_slice(&body).map_err(|e| bad(format!("malformed body: {e}")))?;
    if req.question.trim().is_empty() {
        return Err(bad("question is empty"));
    }
    let not_found = || ApiError(StatusCode::NOT_FOUND, format!("unknown image {}", req.image_id));
    let image = state.store.get(&req.image_id).ok_or_else(not_found)?;
    if state.known.as_ref().is_some_and(|f| f.get(&req.image_id).is_none()) {
        return Err(not_found());
    }
    if !req.point.within(image.width, image.height) {
        return Err(ApiError(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("point ({}, {}) outside the {}x{} image", req.point.x, req.point.y, image.width, image.height),
        ));
    }
    let answerer = Arc::clone(&state.answerer);
    let image = image.clone();
    let out = tokio::task::spawn_blocking(move || answerer.answer(&image, req.point, &req.question))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| match e {
            AnswerError::UnknownImage(_) => ApiError(StatusCode::NOT_FOUND, e.to_string()),
            AnswerError::BadRequest(m) => bad(m),
            AnswerError::Internal(m) => ApiError(StatusCode::INTERNAL_SERVER_ERROR, m),
        })?;
    let k = (!full).then_some(TOP_K);
    let answer = out.scores.top().to_string();
    let scores = out.scores.labels.iter().zip(&out.scores.probs).map(|(l, p)| Score { label: l.clone(), prob: *p }).collect();
    Ok(Json(AnswerResponse {
        answer,
        scores,
        attention: AttentionBody { local: top(out.local, k), global: out.global.map(|g| top(g, k)) },
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
    }))
}

fn positive(q: &HashMap<String, String>, name: &str, default: usize) -> Result<usize, ApiError> {
    match q.get(name) {
        None => Ok(default),
        Some(s) => match s.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(bad(format!("{name} must be a positive integer, got {s:?}"))),
        },
    }
}

async fn list_images(State(state): State<AppState>, Query(q): Query<HashMap<String, String>>) -> Result<Json<ImagePage>, ApiError> {
    if let Some(k) = q.keys().find(|k| *k != "page" && *k != "size") {
        return Err(bad(format!("unknown query parameter {k:?}")));
    }
    let page = positive(&q, "page", 1)?;
    let size = positive(&q, "size", DEFAULT_PAGE_SIZE)?;
    if size > MAX_PAGE_SIZE {
        return Err(bad(format!("size must be at most {MAX_PAGE_SIZE}")));
    }
    let total = state.store.len();
    let images = state
        .store
        .iter()
        .skip((page - 1).saturating_mul(size))
        .take(size)
        .map(|img| ImageSummary {
            image_id: img.image_id.clone(),
            width: img.width,
            height: img.height,
            thumbnail_uri: img.image_uri.clone(),
        })
        .collect();
    Ok(Json(ImagePage { images, page, size, total, pages: total.div_ceil(size) }))
}

async fn image_detail(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<ImageDetail>, ApiError> {
    let img = state.store.get(&id).ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown image {id}")))?;
    let png = rasterize(img).map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(ImageDetail {
        annotation: img.clone(),
        raster_png: base64::engine::general_purpose::STANDARD.encode(png),
    }))
}

fn cors(origins: &[String]) -> CorsLayer {
    let allow = if origins.is_empty() {
        AllowOrigin::any()
    } else {
        AllowOrigin::list(origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
    };
    CorsLayer::new().allow_origin(allow).allow_methods(tower_http::cors::Any).allow_headers(tower_http::cors::Any)
}

pub fn router(state: AppState) -> Router {
    let layer = cors(&state.cors_origins);
    Router::new()
        .route("/v1/answer", post(answer))
        .route("/v1/images", get(list_images))
        .route("/v1/images/{id}", get(image_detail))
        .layer(layer)
        .with_state(state)
}

/// Binds and serves until the process is stopped.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, images = state.store.len(), "serving");
    axum::serve(listener, router(state)).await
}
