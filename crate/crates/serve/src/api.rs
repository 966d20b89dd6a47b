//! HTTP API: asynchronous prediction jobs over multipart uploads.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gliopipe::lossmetric::labels::raw_labels;
use gliopipe::lossmetric::RegionSource;
use gliopipe::modality::Modality;
use gliopipe::models::inference::{predict_methylation, MethylationPrediction};
use gliopipe::render::{render_slice, Axis, RenderError};
use gliopipe::trainer::evaluate::RegionDice;
use gliopipe::volio::{canonicalize, read_nifti, write_nifti, Volume3D};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;

use crate::bundle::ModelBundle;
use crate::study::{parse_study, require, summarize, SegmentationSummary, StudyError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    /// Jobs allowed to run at once.
    pub workers: usize,
    pub region_source: RegionSource,
    pub max_upload_bytes: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { workers: 1, region_source: RegionSource::EdemaPlusEnhancing, max_upload_bytes: 1 << 30 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Segmentation,
    Methylation,
}

#[derive(Clone, Debug, PartialEq)]
pub enum JobStatus {
    Pending,
    Running,
    Done,
    Failed(String),
}

impl JobStatus {
    fn name(&self) -> &'static str {
        match self {
            JobStatus::Pending => "pending",
            JobStatus::Running => "running",
            JobStatus::Done => "done",
            JobStatus::Failed(_) => "failed",
        }
    }
}

#[derive(Clone, Debug)]
pub enum JobResult {
    Segmentation { mask: Arc<Volume3D>, summary: SegmentationSummary },
    Methylation(MethylationPrediction),
}

#[derive(Clone, Debug)]
pub struct Job {
    pub id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub inputs: Arc<BTreeMap<Modality, Volume3D>>,
    pub result: Option<JobResult>,
}

#[derive(Clone)]
pub struct AppState {
    pub bundle: Arc<ModelBundle>,
    pub config: Arc<ServeConfig>,
    jobs: Arc<Mutex<HashMap<String, Job>>>,
    workers: Arc<Semaphore>,
}

impl AppState {
    pub fn new(bundle: ModelBundle, config: ServeConfig) -> Self {
        let workers = Arc::new(Semaphore::new(config.workers.max(1)));
        Self { bundle: Arc::new(bundle), config: Arc::new(config), jobs: Arc::default(), workers }
    }

    pub fn job(&self, id: &str) -> Option<Job> {
        self.jobs.lock().expect("job store").get(id).cloned()
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut Job)) {
        if let Some(j) = self.jobs.lock().expect("job store").get_mut(id) {
            f(j);
        }
    }

    fn submit<F>(&self, kind: JobKind, inputs: BTreeMap<Modality, Volume3D>, work: F) -> String
    where
        F: FnOnce(&BTreeMap<Modality, Volume3D>) -> Result<JobResult, String> + Send + 'static,
    {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let inputs = Arc::new(inputs);
        let job = Job { id: id.clone(), kind, status: JobStatus::Pending, inputs: inputs.clone(), result: None };
        self.jobs.lock().expect("job store").insert(id.clone(), job);
        let state = self.clone();
        let job_id = id.clone();
        tokio::spawn(async move {
            let _permit = state.workers.clone().acquire_owned().await.expect("semaphore open");
            state.update(&job_id, |j| j.status = JobStatus::Running);
            let outcome = tokio::task::spawn_blocking(move || work(&inputs)).await;
            state.update(&job_id, |j| match outcome {
                Ok(Ok(r)) => {
                    j.result = Some(r);
                    j.status = JobStatus::Done;
                }
                Ok(Err(e)) => j.status = JobStatus::Failed(e),
                Err(e) => j.status = JobStatus::Failed(format!("worker crashed: {e}")),
            });
        });
        id
    }
}

/// Error body: `{"error": <code>, "message": <text>}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "NotFound", message)
    }
}

impl From<StudyError> for ApiError {
    fn from(e: StudyError) -> Self {
        Self::new(StatusCode::BAD_REQUEST, e.code(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.code, "message": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    let limit = state.config.max_upload_bytes;
    Router::new()
        .route("/api/v1/health", get(health))
        .route("/api/v1/segment", post(post_segment))
        .route("/api/v1/methylation", post(post_methylation))
        .route("/api/v1/compare", post(post_compare))
        .route("/api/v1/jobs/{id}", get(get_job))
        .route("/api/v1/jobs/{id}/mask", get(get_mask))
        .route("/api/v1/jobs/{id}/slices/{axis}/{index}", get(get_slice))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

async fn health(State(s): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({
        "segmentation_loaded": s.bundle.segmentation.is_some(),
        "methylation_loaded": s.bundle.methylation.is_some(),
        "region_source": s.config.region_source,
    }))
}

async fn read_fields(mut mp: Multipart) -> ApiResult<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    loop {
        let field = mp.next_field().await.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "BadMultipart", e.to_string()))?;
        let Some(field) = field else { break };
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "BadMultipart", e.to_string()))?;
        out.push((name, bytes.to_vec()));
    }
    Ok(out)
}

fn model_missing(what: &str) -> ApiError {
    ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "ModelNotLoaded", format!("no {what} model is loaded"))
}

fn accepted(id: String) -> Response {
    (StatusCode::ACCEPTED, Json(json!({ "job_id": id, "status": "pending" }))).into_response()
}

async fn post_segment(State(s): State<AppState>, mp: Multipart) -> ApiResult<Response> {
    if s.bundle.segmentation.is_none() {
        return Err(model_missing("segmentation"));
    }
    let study = parse_study(read_fields(mp).await?)?;
    let model = s.bundle.clone();
    require(&study, &model.segmentation.as_ref().expect("checked").channel_order)?;
    let source = s.config.region_source;
    let id = s.submit(JobKind::Segmentation, study, move |vols| {
        let seg = model.segmentation.as_ref().expect("checked");
        let mask = seg.segment(vols).map_err(|e| e.to_string())?;
        let summary = summarize(&mask, source);
        Ok(JobResult::Segmentation { mask: Arc::new(mask), summary })
    });
    Ok(accepted(id))
}

async fn post_methylation(State(s): State<AppState>, mp: Multipart) -> ApiResult<Response> {
    if s.bundle.methylation.is_none() {
        return Err(model_missing("methylation"));
    }
    let study = parse_study(read_fields(mp).await?)?;
    let model = s.bundle.clone();
    let id = s.submit(JobKind::Methylation, study, move |vols| {
        let m = model.methylation.as_ref().expect("checked");
        predict_methylation(m, vols).map(JobResult::Methylation).map_err(|e| e.to_string())
    });
    Ok(accepted(id))
}

fn lookup(s: &AppState, id: &str) -> ApiResult<Job> {
    s.job(id).ok_or_else(|| ApiError::not_found(format!("unknown job {id}")))
}

async fn get_job(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let job = lookup(&s, &id)?;
    let mut body = json!({
        "job_id": job.id,
        "kind": job.kind,
        "status": job.status.name(),
        "modalities": job.inputs.keys().collect::<Vec<_>>(),
    });
    if let JobStatus::Failed(e) = &job.status {
        body["error"] = json!(e);
    }
    match &job.result {
        Some(JobResult::Segmentation { summary, .. }) => {
            body["result"] = json!({
                "mask": format!("/api/v1/jobs/{}/mask", job.id),
                "summary": summary,
            });
        }
        Some(JobResult::Methylation(p)) => {
            body["result"] = json!(p);
            body["probability"] = json!(p.probability);
            body["status_bit"] = json!(p.status_bit);
            body["per_modality"] = json!(p.per_modality);
        }
        None => {}
    }
    Ok(Json(body))
}

fn finished_mask(job: &Job) -> ApiResult<Arc<Volume3D>> {
    if job.kind != JobKind::Segmentation {
        return Err(ApiError::new(StatusCode::CONFLICT, "NotSegmentation", format!("job {} is not a segmentation", job.id)));
    }
    match (&job.status, &job.result) {
        (JobStatus::Done, Some(JobResult::Segmentation { mask, .. })) => Ok(mask.clone()),
        (st, _) => Err(ApiError::new(StatusCode::CONFLICT, "NotDone", format!("job {} is {}", job.id, st.name()))),
    }
}

async fn get_mask(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let mask = finished_mask(&lookup(&s, &id)?)?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], write_nifti(&mask)).into_response())
}

async fn post_compare(State(s): State<AppState>, mp: Multipart) -> ApiResult<Json<serde_json::Value>> {
    let fields = read_fields(mp).await?;
    let text = |n: &str| fields.iter().find(|(k, _)| k == n).map(|(_, v)| v);
    let id = text("job_id")
        .map(|v| String::from_utf8_lossy(v).trim().to_string())
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "MissingField", "job_id is required"))?;
    let truth = text("truth")
        .or_else(|| text("ground_truth"))
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "MissingField", "truth file is required"))?;
    let mask = finished_mask(&lookup(&s, &id)?)?;
    let truth = read_nifti(truth).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "UnsupportedFormat", e.to_string()))?;
    let truth = canonicalize(&truth);
    if truth.dims != mask.dims {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "DimMismatch",
            format!("truth dims {:?} differ from mask dims {:?}", truth.dims, mask.dims),
        ));
    }
    let gt = raw_labels(&truth).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "IllegalLabel", e.to_string()))?;
    let pred = raw_labels(&mask).expect("masks hold raw labels");
    let dice = RegionDice::compute(&pred, &gt, s.config.region_source);
    Ok(Json(json!({ "job_id": id, "region_source": s.config.region_source, "dice": dice })))
}

#[derive(Debug, Deserialize)]
pub struct SliceQuery {
    pub channel: Option<String>,
    /// Overlay alpha in [0, 1]; absent means no overlay.
    pub overlay: Option<f64>,
}

/// Lossless PNG of an RGBA raster.
pub fn encode_png(r: &gliopipe::render::Raster) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, r.width as u32, r.height as u32);
        enc.set_color(png::ColorType::Rgba);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().expect("in-memory write");
        w.write_image_data(&r.rgba).expect("in-memory write");
    }
    out
}

async fn get_slice(
    State(s): State<AppState>,
    Path((id, axis, index)): Path<(String, String, String)>,
    Query(q): Query<SliceQuery>,
) -> ApiResult<Response> {
    let job = lookup(&s, &id)?;
    if job.status != JobStatus::Done {
        return Err(ApiError::new(StatusCode::CONFLICT, "NotDone", format!("job {} is {}", job.id, job.status.name())));
    }
    let axis: Axis = axis.parse().map_err(|e: RenderError| ApiError::not_found(e.to_string()))?;
    let index: usize = index.parse().map_err(|_| ApiError::not_found(format!("bad slice index {index:?}")))?;
    let channel = match &q.channel {
        Some(c) => c.parse::<Modality>().map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, "UnknownChannel", format!("unknown channel {c:?}")))?,
        None => *job.inputs.keys().next().expect("studies are nonempty"),
    };
    let image = job
        .inputs
        .get(&channel)
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "UnknownChannel", format!("job has no {channel} input")))?;
    let labels = match (&job.result, q.overlay) {
        (Some(JobResult::Segmentation { mask, .. }), Some(_)) => Some(mask.clone()),
        _ => None,
    };
    let alpha = q.overlay.unwrap_or(0.0);
    let raster = render_slice(image, labels.as_deref(), axis, index, alpha).map_err(|e| match e {
        RenderError::BadAlpha(_) => ApiError::new(StatusCode::BAD_REQUEST, "BadAlpha", e.to_string()),
        e => ApiError::not_found(e.to_string()),
    })?;
    let body = Body::from(encode_png(&raster));
    Ok(([(header::CONTENT_TYPE, "image/png")], body).into_response())
}
