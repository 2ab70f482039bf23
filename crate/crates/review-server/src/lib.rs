//! HTTP front of the review workflow.
//!
//! Payloads are the core types serialized as JSON. Errors come back as
//! `{"error": <code>, "message": <text>}` with a status that tells the client
//! whether to retry (409), fix the payload (422/400) or give up (404).

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::{Deserialize, Serialize};
use serde_json::json;

use instruct_engine::ingest::{IngestError, ScreenVerdict, ScreeningQueue};
use instruct_engine::model::{BatchId, Domain, ImageId, RecordId, TaskId};
use instruct_engine::review::{
    select_unreviewed, ReviewError, ReviewService, Verdict, MIN_ROUNDS_FLOOR,
};
use instruct_engine::store::StoreError;

#[derive(Clone)]
pub struct AppState {
    pub review: Arc<ReviewService>,
    pub screening: Arc<ScreeningQueue>,
}

impl AppState {
    pub fn new(review: ReviewService) -> Self {
        Self {
            review: Arc::new(review),
            screening: Arc::new(ScreeningQueue::default()),
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/batches", get(list_batches).post(open_batch))
        .route("/batches/{id}", get(get_batch))
        .route("/batches/{id}/next-task", get(next_task))
        .route("/batches/{id}/advance", post(advance))
        .route("/tasks/{id}/verdict", post(verdict))
        .route("/records/{id}", get(get_record))
        .route("/images/{id}", get(get_image))
        .route("/blobs/{name}", get(get_blob))
        .route("/criteria/{domain}", get(criteria))
        .route("/screening", get(screening_pull))
        .route("/screening/{image_id}", post(screening_resolve))
        .with_state(state)
}

/// Binds `addr` and serves until ctrl-c.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("review service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    details: Option<serde_json::Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            details: None,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.code, "message": self.message });
        if let Some(d) = self.details {
            body["details"] = d;
        }
        (self.status, axum::Json(body)).into_response()
    }
}

fn store_error(e: StoreError) -> ApiError {
    match e {
        StoreError::NotFound { .. } => {
            ApiError::new(StatusCode::NOT_FOUND, "not_found", e.to_string())
        }
        StoreError::Conflict { .. } | StoreError::IllegalTransition { .. } => {
            ApiError::new(StatusCode::CONFLICT, "conflict", e.to_string())
        }
        _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "store", e.to_string()),
    }
}

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        use ReviewError::*;
        let (status, code) = match &e {
            BatchNotFound(_) => (StatusCode::NOT_FOUND, "batch_not_found"),
            TaskNotFound(_) => (StatusCode::NOT_FOUND, "task_not_found"),
            UnknownRecord(_) => (StatusCode::NOT_FOUND, "unknown_record"),
            AlreadyInReview(_) => (StatusCode::CONFLICT, "already_in_review"),
            BatchNotInRound(_) => (StatusCode::CONFLICT, "batch_not_in_round"),
            LeaseConflict(_) => (StatusCode::CONFLICT, "lease_conflict"),
            StaleLease(_) => (StatusCode::CONFLICT, "stale_lease"),
            RoundIncomplete { .. } => (StatusCode::CONFLICT, "round_incomplete"),
            InvalidCorrection(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_correction"),
            EmptyCorrection => (StatusCode::UNPROCESSABLE_ENTITY, "empty_correction"),
            EmptySelection => (StatusCode::UNPROCESSABLE_ENTITY, "empty_selection"),
            MinRoundsTooLow(_) => (StatusCode::UNPROCESSABLE_ENTITY, "min_rounds_too_low"),
            DomainMismatch { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "domain_mismatch"),
            Store(_) => {
                let Store(inner) = e else { unreachable!() };
                return store_error(inner);
            }
        };
        let details = match &e {
            InvalidCorrection(report) => serde_json::to_value(report).ok(),
            _ => None,
        };
        ApiError {
            details,
            ..ApiError::new(status, code, e.to_string())
        }
    }
}

impl From<IngestError> for ApiError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::EmptyQueue => {
                ApiError::new(StatusCode::NOT_FOUND, "empty_queue", e.to_string())
            }
            IngestError::StaleLease(_) => {
                ApiError::new(StatusCode::CONFLICT, "stale_lease", e.to_string())
            }
            IngestError::Store(s) => store_error(s),
            other => ApiError::new(StatusCode::BAD_REQUEST, "ingest", other.to_string()),
        }
    }
}

/// `Json` extractor whose rejections use the API error body.
pub struct Json<T>(pub T);

impl<S, T> FromRequest<S> for Json<T>
where
    axum::Json<T>: FromRequest<S, Rejection = JsonRejection>,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match axum::Json::<T>::from_request(req, state).await {
            Ok(axum::Json(v)) => Ok(Json(v)),
            Err(r) => Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "bad_request",
                r.body_text(),
            )),
        }
    }
}

impl<T: Serialize> IntoResponse for Json<T> {
    fn into_response(self) -> Response {
        axum::Json(self.0).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn parse_domain(s: &str) -> Result<Domain, ApiError> {
    s.parse().map_err(|_| {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            "bad_request",
            format!("unknown domain `{s}`"),
        )
    })
}

async fn list_batches(
    State(st): State<AppState>,
) -> ApiResult<Vec<instruct_engine::review::BatchSummary>> {
    Ok(Json(st.review.batches()))
}

fn default_limit() -> usize {
    50
}

fn default_min_rounds() -> u32 {
    MIN_ROUNDS_FLOOR
}

fn default_seed() -> u64 {
    42
}

fn default_actor() -> String {
    "api".into()
}

#[derive(Debug, Deserialize)]
pub struct OpenBatchBody {
    pub domain: String,
    /// Explicit records; when absent the first `limit` unreviewed ones in id order.
    #[serde(default)]
    pub record_ids: Option<Vec<RecordId>>,
    #[serde(default = "default_limit")]
    pub limit: usize,
    #[serde(default = "default_min_rounds")]
    pub min_rounds: u32,
    #[serde(default = "default_seed")]
    pub rng_seed: u64,
    #[serde(default = "default_actor")]
    pub opened_by: String,
}

async fn open_batch(
    State(st): State<AppState>,
    Json(body): Json<OpenBatchBody>,
) -> Result<Response, ApiError> {
    let domain = parse_domain(&body.domain)?;
    let ids = match body.record_ids {
        Some(ids) => ids,
        None => select_unreviewed(st.review.store(), domain, body.limit),
    };
    let batch = st.review.open_batch(
        domain,
        &ids,
        body.min_rounds,
        body.rng_seed,
        &body.opened_by,
    )?;
    Ok((StatusCode::CREATED, axum::Json(batch)).into_response())
}

async fn get_batch(
    State(st): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<instruct_engine::review::ReviewBatch> {
    Ok(Json(st.review.batch(&BatchId(id))?))
}

#[derive(Debug, Deserialize)]
pub struct ReviewerQuery {
    pub reviewer: String,
}

async fn next_task(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<ReviewerQuery>,
) -> ApiResult<instruct_engine::review::NextTask> {
    Ok(Json(st.review.next_task(&BatchId(id), &q.reviewer)?))
}

#[derive(Debug, Deserialize)]
pub struct VerdictBody {
    pub reviewer: String,
    #[serde(flatten)]
    pub verdict: Verdict,
}

async fn verdict(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<VerdictBody>,
) -> ApiResult<instruct_engine::review::VerdictOutcome> {
    Ok(Json(st.review.submit_verdict(
        &TaskId(id),
        &body.reviewer,
        &body.verdict,
    )?))
}

#[derive(Debug, Default, Deserialize)]
pub struct AdvanceBody {
    #[serde(default)]
    pub by: Option<String>,
}

async fn advance(
    State(st): State<AppState>,
    Path(id): Path<String>,
    body: axum::body::Bytes,
) -> ApiResult<instruct_engine::review::ReviewBatch> {
    let body: AdvanceBody = if body.iter().all(u8::is_ascii_whitespace) {
        AdvanceBody::default()
    } else {
        serde_json::from_slice(&body)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.to_string()))?
    };
    let by = body.by.unwrap_or_else(default_actor);
    Ok(Json(st.review.advance_round(&BatchId(id), &by)?))
}

async fn get_record(
    State(st): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<instruct_engine::model::InstructionRecord> {
    st.review
        .store()
        .instruction(&RecordId(id.clone()))
        .map(Json)
        .ok_or_else(|| {
            ApiError::new(
                StatusCode::NOT_FOUND,
                "unknown_record",
                format!("record `{id}` not found"),
            )
        })
}

fn content_type(name: &str) -> &'static str {
    match name
        .rsplit_once('.')
        .map(|(_, e)| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        _ => "application/octet-stream",
    }
}

/// Only plain file names inside `blobs/` are served.
fn blob_response(st: &AppState, rel: &str) -> Result<Response, ApiError> {
    let name = rel.strip_prefix("blobs/").unwrap_or(rel);
    let safe = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_')
        && !name.starts_with('.');
    if !safe {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "bad_request",
            "invalid blob name",
        ));
    }
    let path = format!("blobs/{name}");
    let bytes = st.review.store().read_blob(&path).map_err(|e| match e {
        StoreError::Io { .. } => ApiError::new(
            StatusCode::NOT_FOUND,
            "blob_not_found",
            format!("{path} not found"),
        ),
        other => store_error(other),
    })?;
    Ok(([(header::CONTENT_TYPE, content_type(name))], bytes).into_response())
}

async fn get_image(
    State(st): State<AppState>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let image = st
        .review
        .store()
        .image(&ImageId(id.clone()))
        .ok_or_else(|| {
            ApiError::new(
                StatusCode::NOT_FOUND,
                "image_not_found",
                format!("image `{id}` not found"),
            )
        })?;
    let blob = image.blob.ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "blob_not_found",
            format!("image `{id}` has no stored bytes"),
        )
    })?;
    blob_response(&st, &blob)
}

async fn get_blob(
    State(st): State<AppState>,
    Path(name): Path<String>,
) -> Result<Response, ApiError> {
    blob_response(&st, &name)
}

async fn criteria(
    State(st): State<AppState>,
    Path(domain): Path<String>,
) -> ApiResult<instruct_engine::review::AcceptanceCriteria> {
    Ok(Json(st.review.criteria(parse_domain(&domain)?)))
}

#[derive(Debug, Deserialize)]
pub struct ScreeningQuery {
    pub reviewer: String,
    #[serde(default = "default_limit")]
    pub limit: usize,
}

async fn screening_pull(
    State(st): State<AppState>,
    Query(q): Query<ScreeningQuery>,
) -> ApiResult<Vec<instruct_engine::model::ImageRecord>> {
    Ok(Json(st.screening.pull(
        st.review.store(),
        &q.reviewer,
        q.limit,
    )?))
}

#[derive(Debug, Deserialize)]
pub struct ScreeningBody {
    pub reviewer: String,
    #[serde(flatten)]
    pub verdict: ScreenVerdict,
}

async fn screening_resolve(
    State(st): State<AppState>,
    Path(image_id): Path<String>,
    Json(body): Json<ScreeningBody>,
) -> ApiResult<instruct_engine::model::ImageRecord> {
    Ok(Json(st.screening.resolve(
        st.review.store(),
        &ImageId(image_id),
        &body.reviewer,
        &body.verdict,
    )?))
}
