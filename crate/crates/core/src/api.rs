//! JSON-over-HTTP interface with bearer-token auth.
//!
//! Every error body is an [`ApiError`]. All routes except registration,
//! payment, login and password reset require `Authorization: Bearer`.

use crate::analytics::{time_csv, weak_modules_csv, DEFAULT_WEAK_THRESHOLD};
use crate::chat::{PromptMode, TurnFilter};
use crate::chunker::ChunkId;
use crate::courses::{Plan, Role, UserAccount, Visibility};
use crate::error::Error;
use crate::ingest::DocFormat;
use crate::service::{Job, Platform};
use axum::extract::rejection::{JsonRejection, PathRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, FromRequest, FromRequestParts, Multipart, State};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::Router;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

const MAX_UPLOAD_BYTES: usize = 32 * 1024 * 1024;

type AppState = Arc<Platform>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub http_status: u16,
    pub code: String,
    pub message: String,
}

/// HTTP status for each error.
pub fn status_for(err: &Error) -> StatusCode {
    use Error::*;
    match err {
        MalformedUrl | MalformedTranscript(_) | InvalidEncoding | EmptyDocument | EmptyInput | EmptyQuery
        | UnknownMode(_) | WeakPassword | LengthMismatch | EmptyText | InvalidArgument(_) | NotPrivateCourse
        | InvalidToken => StatusCode::BAD_REQUEST,
        Unauthorized | InvalidCredentials => StatusCode::UNAUTHORIZED,
        PaymentRequired | PaymentFailed => StatusCode::PAYMENT_REQUIRED,
        AccessDenied => StatusCode::FORBIDDEN,
        IndexNotFound | CourseNotFound | UserNotFound | JobNotFound | QuizNotFound => StatusCode::NOT_FOUND,
        UsernameTaken | DuplicateSlug => StatusCode::CONFLICT,
        UnsupportedFormat(_) => StatusCode::UNSUPPORTED_MEDIA_TYPE,
        EmptyTranscript | EmptyCourse | EmptyIndex | InsufficientContent(_) => StatusCode::UNPROCESSABLE_ENTITY,
        TranscriptUnavailable | LanguageUnavailable => StatusCode::FAILED_DEPENDENCY,
        LlmUnavailable(_) | ProviderUnreachable(_) | GatewayUnreachable(_) => StatusCode::BAD_GATEWAY,
        StoreUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
        DimensionMismatch { .. } | CorruptIndex(_) | SerializationFailure(_) | Database(_) | Internal(_) => {
            StatusCode::INTERNAL_SERVER_ERROR
        }
    }
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            http_status: status.as_u16(),
            code: code.to_owned(),
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(err: Error) -> Self {
        let status = status_for(&err);
        // upstream and internal failures are logged, never echoed
        let message = if status.is_server_error() {
            tracing::error!(code = err.code(), error = %err, "request failed");
            match err {
                Error::LlmUnavailable(_) => "language model unavailable".to_owned(),
                Error::ProviderUnreachable(_) => "transcript provider unreachable".to_owned(),
                Error::GatewayUnreachable(_) => "payment gateway unreachable".to_owned(),
                Error::StoreUnavailable(_) => "object store unavailable".to_owned(),
                _ => "internal error".to_owned(),
            }
        } else {
            err.to_string()
        };
        Self::new(status, err.code(), message)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(rejection: JsonRejection) -> Self {
        let status = match rejection {
            JsonRejection::MissingJsonContentType(_) => StatusCode::UNSUPPORTED_MEDIA_TYPE,
            _ => StatusCode::BAD_REQUEST,
        };
        Self::new(status, "invalid_argument", rejection.body_text())
    }
}

impl From<PathRejection> for ApiError {
    fn from(rejection: PathRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_argument", rejection.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(rejection: QueryRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_argument", rejection.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.http_status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, axum::Json(self)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(FromRequest)]
#[from_request(via(axum::Json), rejection(ApiError))]
struct Json<T>(T);

impl<T: Serialize> IntoResponse for Json<T> {
    fn into_response(self) -> Response {
        axum::Json(self.0).into_response()
    }
}

#[derive(FromRequestParts)]
#[from_request(via(axum::extract::Path), rejection(ApiError))]
struct Path<T>(T);

#[derive(FromRequestParts)]
#[from_request(via(axum::extract::Query), rejection(ApiError))]
struct Query<T>(T);

/// Run blocking platform work off the async executor.
async fn blocking<T, F>(platform: &AppState, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Platform) -> crate::Result<T> + Send + 'static,
{
    let platform = platform.clone();
    tokio::task::spawn_blocking(move || f(&platform))
        .await
        .map_err(|e| ApiError::from(Error::Internal(e.to_string())))?
        .map_err(ApiError::from)
}

/// The caller, resolved from the bearer token.
struct Caller {
    user: UserAccount,
    token: String,
}

impl FromRequestParts<AppState> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> ApiResult<Self> {
        let token = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(|t| t.trim().to_owned())
            .filter(|t| !t.is_empty())
            .ok_or_else(|| ApiError::from(Error::Unauthorized))?;
        let lookup = token.clone();
        let user = blocking(state, move |p| p.db.authenticate(&lookup)).await?;
        Ok(Caller { user, token })
    }
}

pub fn router(platform: Arc<Platform>) -> Router {
    Router::new()
        .route("/auth/register", post(register))
        .route("/auth/pay", post(pay))
        .route("/auth/login", post(login))
        .route("/auth/logout", post(logout))
        .route("/auth/me", get(me))
        .route("/auth/password-reset", post(request_reset))
        .route("/auth/password-reset/confirm", post(confirm_reset))
        .route("/courses", post(create_course).get(list_courses))
        .route("/courses/{id}", get(get_course))
        .route("/courses/{id}/grants", post(grant))
        .route("/courses/{id}/grants/{user_id}", delete(revoke))
        .route("/courses/{id}/documents", post(upload).get(list_documents))
        .route("/courses/{id}/youtube", post(youtube))
        .route("/jobs/{id}", get(get_job))
        .route("/courses/{id}/retrieve", post(retrieve))
        .route("/courses/{id}/chat", post(chat))
        .route("/courses/{id}/turns", get(turns))
        .route("/courses/{id}/analytics/weak-modules", get(weak_modules))
        .route("/courses/{id}/analytics/time", get(time_spent))
        .route("/courses/{id}/quizzes", post(create_quiz))
        .route("/quizzes/{id}", get(get_quiz))
        .route("/quizzes/{id}/attempts", post(attempt))
        .fallback(not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(platform)
}

/// Serve until ctrl-c.
pub async fn serve(platform: Arc<Platform>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(platform))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

async fn method_not_allowed() -> ApiError {
    ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed", "method not allowed on this route")
}

// ---- accounts -----------------------------------------------------------

#[derive(Deserialize)]
struct RegisterBody {
    username: String,
    email: String,
    password: String,
    role: Role,
    plan: Plan,
}

#[derive(Serialize)]
struct Registered {
    user_id: i64,
    status: &'static str,
}

async fn register(State(p): State<AppState>, Json(body): Json<RegisterBody>) -> ApiResult<(StatusCode, Json<Registered>)> {
    let user_id = blocking(&p, move |p| {
        p.db.register(&body.username, &body.email, &body.password, body.role, body.plan)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(Registered { user_id, status: "awaiting_payment" })))
}

#[derive(Deserialize)]
struct PayBody {
    username: String,
    password: String,
    plan: Plan,
}

async fn pay(State(p): State<AppState>, Json(body): Json<PayBody>) -> ApiResult<impl IntoResponse> {
    let record = blocking(&p, move |p| {
        let user = p.db.verify_credentials(&body.username, &body.password)?;
        p.db.process_payment(p.gateway.as_ref(), user.user_id, body.plan)
    })
    .await?;
    Ok(Json(record))
}

#[derive(Deserialize)]
struct LoginBody {
    username: String,
    password: String,
}

async fn login(State(p): State<AppState>, Json(body): Json<LoginBody>) -> ApiResult<impl IntoResponse> {
    let token = blocking(&p, move |p| p.db.login(&body.username, &body.password)).await?;
    Ok(Json(token))
}

async fn logout(State(p): State<AppState>, caller: Caller) -> ApiResult<StatusCode> {
    blocking(&p, move |p| p.db.logout(&caller.token)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn me(caller: Caller) -> Json<UserAccount> {
    Json(caller.user)
}

#[derive(Deserialize)]
struct ResetRequestBody {
    username: String,
}

async fn request_reset(State(p): State<AppState>, Json(body): Json<ResetRequestBody>) -> ApiResult<StatusCode> {
    blocking(&p, move |p| p.request_password_reset(&body.username)).await?;
    Ok(StatusCode::ACCEPTED)
}

#[derive(Deserialize)]
struct ResetConfirmBody {
    token: String,
    new_password: String,
}

async fn confirm_reset(State(p): State<AppState>, Json(body): Json<ResetConfirmBody>) -> ApiResult<StatusCode> {
    blocking(&p, move |p| p.db.reset_password(&body.token, &body.new_password)).await?;
    Ok(StatusCode::NO_CONTENT)
}

// ---- courses ------------------------------------------------------------

#[derive(Deserialize)]
struct CreateCourseBody {
    title: String,
    visibility: Visibility,
}

async fn create_course(
    State(p): State<AppState>,
    caller: Caller,
    Json(body): Json<CreateCourseBody>,
) -> ApiResult<impl IntoResponse> {
    let course = blocking(&p, move |p| p.db.create_course(&caller.user, &body.title, body.visibility)).await?;
    Ok((StatusCode::CREATED, Json(course)))
}

async fn list_courses(State(p): State<AppState>, caller: Caller) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(&p, move |p| p.db.list_accessible(&caller.user)).await?))
}

async fn get_course(State(p): State<AppState>, caller: Caller, Path(id): Path<i64>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(&p, move |p| p.db.readable_course(&caller.user, id)).await?))
}

#[derive(Deserialize)]
struct GrantBody {
    user_id: i64,
}

async fn grant(
    State(p): State<AppState>,
    caller: Caller,
    Path(id): Path<i64>,
    Json(body): Json<GrantBody>,
) -> ApiResult<impl IntoResponse> {
    let grant = blocking(&p, move |p| p.db.grant_access(&caller.user, id, body.user_id)).await?;
    Ok((StatusCode::CREATED, Json(grant)))
}

async fn revoke(State(p): State<AppState>, caller: Caller, Path((id, user_id)): Path<(i64, i64)>) -> ApiResult<StatusCode> {
    blocking(&p, move |p| p.db.revoke_access(&caller.user, id, user_id)).await?;
    Ok(StatusCode::NO_CONTENT)
}

// ---- ingestion ----------------------------------------------------------

#[derive(Serialize)]
struct Accepted {
    job_id: i64,
    status: crate::service::JobStatus,
}

/// Queue the job on the blocking pool and answer 202.
fn accept(p: &AppState, job: Job) -> (StatusCode, Json<Accepted>) {
    let platform = p.clone();
    let job_id = job.job_id;
    tokio::task::spawn_blocking(move || {
        if let Err(e) = platform.run_job(job_id) {
            tracing::error!(job_id, error = %e, "job bookkeeping failed");
        }
    });
    (StatusCode::ACCEPTED, Json(Accepted { job_id, status: job.status }))
}

async fn upload(
    State(p): State<AppState>,
    caller: Caller,
    Path(id): Path<i64>,
    mut multipart: Multipart,
) -> ApiResult<impl IntoResponse> {
    let bad = |m: String| ApiError::from(Error::InvalidArgument(m));
    let mut file: Option<(String, Vec<u8>)> = None;
    let mut declared: Option<String> = None;
    while let Some(field) = multipart.next_field().await.map_err(|e| bad(e.body_text()))? {
        match field.name() {
            Some("file") => {
                let name = field.file_name().unwrap_or("upload").to_owned();
                let bytes = field.bytes().await.map_err(|e| bad(e.body_text()))?;
                file = Some((name, bytes.to_vec()));
            }
            Some("declared_format") => declared = Some(field.text().await.map_err(|e| bad(e.body_text()))?),
            _ => {}
        }
    }
    let (filename, bytes) = file.ok_or_else(|| bad("multipart field \"file\" is required".into()))?;
    let format_name = declared.unwrap_or_else(|| filename.rsplit_once('.').map_or("", |(_, ext)| ext).to_owned());
    let format: DocFormat = format_name.parse().map_err(ApiError::from)?;
    let job = blocking(&p, move |p| p.submit_upload(&caller.user, id, &filename, &bytes, format)).await?;
    Ok(accept(&p, job))
}

#[derive(Deserialize)]
struct YoutubeBody {
    url: String,
    #[serde(default)]
    preferred_langs: Vec<String>,
}

async fn youtube(
    State(p): State<AppState>,
    caller: Caller,
    Path(id): Path<i64>,
    Json(body): Json<YoutubeBody>,
) -> ApiResult<impl IntoResponse> {
    let job = blocking(&p, move |p| p.submit_youtube(&caller.user, id, &body.url, &body.preferred_langs)).await?;
    Ok(accept(&p, job))
}

async fn get_job(State(p): State<AppState>, caller: Caller, Path(id): Path<i64>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(&p, move |p| p.job(&caller.user, id)).await?))
}

async fn list_documents(State(p): State<AppState>, caller: Caller, Path(id): Path<i64>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(&p, move |p| p.documents(&caller.user, id)).await?))
}

// ---- retrieval and chat -------------------------------------------------

#[derive(Deserialize)]
struct RetrieveBody {
    question: String,
    k: Option<usize>,
    alpha: Option<f64>,
}

async fn retrieve(
    State(p): State<AppState>,
    caller: Caller,
    Path(id): Path<i64>,
    Json(body): Json<RetrieveBody>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(
        blocking(&p, move |p| p.retrieve(&caller.user, id, &body.question, body.k, body.alpha)).await?,
    ))
}

#[derive(Deserialize)]
struct ChatBody {
    question: String,
    mode: String,
    k: Option<usize>,
}

#[derive(Serialize)]
struct ChatReply {
    answer: String,
    context_chunk_ids: Vec<ChunkId>,
    turn_id: i64,
}

async fn chat(
    State(p): State<AppState>,
    caller: Caller,
    Path(id): Path<i64>,
    Json(body): Json<ChatBody>,
) -> ApiResult<impl IntoResponse> {
    let turn = blocking(&p, move |p| {
        let mode = PromptMode::parse(&body.mode)?;
        p.answer(&caller.user, id, &body.question, mode, body.k)
    })
    .await?;
    Ok(Json(ChatReply {
        answer: turn.answer,
        context_chunk_ids: turn.context_chunk_ids,
        turn_id: turn.turn_id,
    }))
}

#[derive(Deserialize)]
struct TurnsQuery {
    user_id: Option<i64>,
    since: Option<DateTime<Utc>>,
    until: Option<DateTime<Utc>>,
}

async fn turns(
    State(p): State<AppState>,
    caller: Caller,
    Path(id): Path<i64>,
    Query(q): Query<TurnsQuery>,
) -> ApiResult<impl IntoResponse> {
    let filter = TurnFilter {
        user_id: q.user_id,
        since: q.since,
        until: q.until,
    };
    Ok(Json(blocking(&p, move |p| p.list_turns(&caller.user, id, &filter)).await?))
}

// ---- analytics ----------------------------------------------------------

#[derive(Deserialize)]
struct ReportQuery {
    threshold: Option<f64>,
    format: Option<String>,
}

fn wants_csv(format: &Option<String>) -> ApiResult<bool> {
    match format.as_deref() {
        None | Some("json") => Ok(false),
        Some("csv") => Ok(true),
        Some(other) => Err(Error::InvalidArgument(format!("format must be json or csv, got {other}")).into()),
    }
}

fn csv_response(body: String) -> Response {
    ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], body).into_response()
}

#[derive(Serialize)]
struct WeakModules {
    course_id: i64,
    threshold: f64,
    modules: std::collections::BTreeMap<String, usize>,
}

async fn weak_modules(
    State(p): State<AppState>,
    caller: Caller,
    Path(id): Path<i64>,
    Query(q): Query<ReportQuery>,
) -> ApiResult<Response> {
    let csv = wants_csv(&q.format)?;
    let threshold = q.threshold.unwrap_or(DEFAULT_WEAK_THRESHOLD);
    let modules = blocking(&p, move |p| p.weak_modules(&caller.user, id, threshold)).await?;
    if csv {
        return Ok(csv_response(weak_modules_csv(&modules)?));
    }
    Ok(Json(WeakModules { course_id: id, threshold, modules }).into_response())
}

#[derive(Serialize)]
struct TimeSpent {
    course_id: i64,
    avg_seconds: f64,
}

async fn time_spent(
    State(p): State<AppState>,
    caller: Caller,
    Path(id): Path<i64>,
    Query(q): Query<ReportQuery>,
) -> ApiResult<Response> {
    let csv = wants_csv(&q.format)?;
    let avg_seconds = blocking(&p, move |p| p.time_spent(&caller.user, id)).await?;
    if csv {
        return Ok(csv_response(time_csv(&[(id, avg_seconds)])?));
    }
    Ok(Json(TimeSpent { course_id: id, avg_seconds }).into_response())
}

#[derive(Deserialize)]
struct QuizBody {
    module_label: String,
    n_questions: usize,
    #[serde(default)]
    use_llm: bool,
}

async fn create_quiz(
    State(p): State<AppState>,
    caller: Caller,
    Path(id): Path<i64>,
    Json(body): Json<QuizBody>,
) -> ApiResult<impl IntoResponse> {
    let quiz = blocking(&p, move |p| {
        p.create_quiz(&caller.user, id, &body.module_label, body.n_questions, body.use_llm)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(quiz)))
}

async fn get_quiz(State(p): State<AppState>, caller: Caller, Path(id): Path<i64>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(&p, move |p| p.quiz(&caller.user, id)).await?))
}

#[derive(Deserialize)]
struct AttemptBody {
    answers: Vec<usize>,
}

async fn attempt(
    State(p): State<AppState>,
    caller: Caller,
    Path(id): Path<i64>,
    Json(body): Json<AttemptBody>,
) -> ApiResult<impl IntoResponse> {
    let attempt = blocking(&p, move |p| p.submit_attempt(&caller.user, id, &body.answers)).await?;
    Ok((StatusCode::CREATED, Json(attempt)))
}
