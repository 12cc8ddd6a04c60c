//! HTTP routes over a shared [`Engine`].

use std::sync::Arc;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dil_core::error::ErrorBody;
use dil_core::executor::ExecOptions;
use dil_core::planner::{DataPlan, Objective};
use dil_core::registry::{Level, SourceDescriptor};
use dil_core::session::{Stream, StreamMessage, MAIN_STREAM};
use dil_core::{Engine, Error, ErrorCode};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;

/// How long one blocking wait on a stream lasts before the follow loop
/// re-checks whether the session closed.
const FOLLOW_TICK: Duration = Duration::from_millis(500);
const DEFAULT_POLL_MS: u64 = 25_000;
const MAX_POLL_MS: u64 = 60_000;
const DEFAULT_SEARCH_K: usize = 10;

pub const NDJSON: &str = "application/x-ndjson";

/// An [`ErrorBody`] with its HTTP status.
#[derive(Debug)]
pub struct ApiError(pub ErrorBody);

impl ApiError {
    pub fn bad_request(message: impl Into<String>) -> Self {
        ApiError(ErrorBody {
            code: ErrorCode::BadRequest,
            message: message.into(),
            detail: None,
        })
    }

    pub fn status(&self) -> StatusCode {
        status_of(self.0.code)
    }
}

pub fn status_of(code: ErrorCode) -> StatusCode {
    match code {
        ErrorCode::BadRequest => StatusCode::BAD_REQUEST,
        ErrorCode::NotFound => StatusCode::NOT_FOUND,
        ErrorCode::Conflict => StatusCode::CONFLICT,
        ErrorCode::Infeasible | ErrorCode::VerificationFailed => StatusCode::UNPROCESSABLE_ENTITY,
        ErrorCode::BackendUnreachable => StatusCode::BAD_GATEWAY,
        ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(ErrorBody::from(&e))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.0)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("request body: {e}")))
}

/// Runs engine work off the async runtime.
async fn blocking<T, F>(engine: &Arc<Engine>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Engine) -> dil_core::Result<T> + Send + 'static,
{
    let engine = engine.clone();
    tokio::task::spawn_blocking(move || f(&engine))
        .await
        .map_err(|e| ApiError::from(Error::Internal(e.to_string())))?
        .map_err(ApiError::from)
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/query", post(query))
        .route("/sessions/{id}/stream", get(stream))
        .route("/sessions/{id}/answers", post(answer))
        .route("/plans/validate", post(validate_plan))
        .route("/plans/execute", post(execute_plan))
        .route("/plans/{id}", get(plan_view))
        .route("/registry/data", get(search))
        .route("/registry/data/sources", get(list_sources).post(register_source))
        .route("/registry/data/sources/{id}/sync", post(sync_source))
        .route("/registry/operators", get(list_operators))
        .fallback(|| async {
            ApiError(ErrorBody {
                code: ErrorCode::NotFound,
                message: "no such route".into(),
                detail: None,
            })
        })
        .with_state(engine)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct NewSession {
    namespace: Option<String>,
}

async fn create_session(State(engine): State<Arc<Engine>>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: NewSession = if body.is_empty() {
        NewSession::default()
    } else {
        parse(&body)?
    };
    let session = engine.create_session(req.namespace.as_deref());
    Ok((
        StatusCode::CREATED,
        Json(json!({ "session_id": session.session_id, "namespace": session.namespace })),
    ))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryRequest {
    question: String,
    #[serde(default)]
    objective: Option<Objective>,
}

async fn query(State(engine): State<Arc<Engine>>, Path(id): Path<String>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: QueryRequest = parse(&body)?;
    if req.question.trim().is_empty() {
        return Err(ApiError::bad_request("question must not be empty"));
    }
    let run = blocking(&engine, move |e| e.query(&id, &req.question, req.objective)).await?;
    Ok(Json(run))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnswerRequest {
    prompt_id: String,
    answer: serde_json::Value,
}

async fn answer(
    State(engine): State<Arc<Engine>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let req: AnswerRequest = parse(&body)?;
    let run = blocking(&engine, move |e| e.answer(&id, &req.prompt_id, &req.answer)).await?;
    Ok(Json(run))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
enum StreamMode {
    /// Long-lived response that keeps emitting until the session closes.
    #[default]
    Follow,
    /// Waits for at least one message, returns what is there and ends.
    Poll,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StreamParams {
    #[serde(default)]
    after: u64,
    #[serde(default)]
    mode: StreamMode,
    timeout_ms: Option<u64>,
    stream: Option<String>,
}

fn ndjson(messages: &[StreamMessage]) -> Vec<u8> {
    let mut out = Vec::new();
    for m in messages {
        serde_json::to_writer(&mut out, m).expect("stream messages serialize");
        out.push(b'\n');
    }
    out
}

async fn wait_on(stream: Arc<Stream>, after: u64, timeout: Duration) -> Vec<StreamMessage> {
    tokio::task::spawn_blocking(move || stream.wait_after(after, timeout))
        .await
        .unwrap_or_default()
}

async fn stream(
    State(engine): State<Arc<Engine>>,
    Path(id): Path<String>,
    Query(params): Query<StreamParams>,
) -> ApiResult<Response> {
    let session = engine.session(&id)?;
    let stream_id = params.stream.as_deref().unwrap_or(MAIN_STREAM);
    let stream = session
        .stream(stream_id)
        .ok_or_else(|| Error::not_found("stream", stream_id))?;

    if params.mode == StreamMode::Poll {
        let timeout = Duration::from_millis(params.timeout_ms.unwrap_or(DEFAULT_POLL_MS).min(MAX_POLL_MS));
        let messages = wait_on(stream, params.after, timeout).await;
        return Ok(([(header::CONTENT_TYPE, NDJSON)], ndjson(&messages)).into_response());
    }

    let state = (stream, session, params.after);
    let body = futures_util::stream::unfold(state, |(stream, session, after)| async move {
        loop {
            let batch = wait_on(stream.clone(), after, FOLLOW_TICK).await;
            if let Some(last) = batch.last() {
                let next = last.seq;
                return Some((
                    Ok::<_, std::convert::Infallible>(Bytes::from(ndjson(&batch))),
                    (stream, session, next),
                ));
            }
            if session.is_closed() {
                return None;
            }
        }
    });
    Ok(([(header::CONTENT_TYPE, NDJSON)], Body::from_stream(body)).into_response())
}

async fn plan_view(State(engine): State<Arc<Engine>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(engine.plan_view(&id)?))
}

async fn validate_plan(State(engine): State<Arc<Engine>>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let plan: DataPlan = parse(&body)?;
    let report = engine.validate_plan(&plan);
    Ok(Json(
        json!({ "valid": report.is_empty(), "violations": report.violations }),
    ))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExecuteEnvelope {
    plan: DataPlan,
    session_id: Option<String>,
    objective: Option<Objective>,
    options: Option<ExecOptions>,
}

/// `POST /plans/execute` takes either a bare plan or an envelope.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ExecuteRequest {
    Envelope(Box<ExecuteEnvelope>),
    Bare(Box<DataPlan>),
}

async fn execute_plan(State(engine): State<Arc<Engine>>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req = match parse::<ExecuteRequest>(&body)? {
        ExecuteRequest::Envelope(env) => *env,
        ExecuteRequest::Bare(plan) => ExecuteEnvelope {
            plan: *plan,
            session_id: None,
            objective: None,
            options: None,
        },
    };
    let run = blocking(&engine, move |e| {
        e.execute_plan(req.session_id.as_deref(), req.plan, req.objective, req.options)
    })
    .await?;
    Ok(Json(run))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SearchParams {
    #[serde(default)]
    query: String,
    level: Option<String>,
    k: Option<usize>,
}

async fn search(State(engine): State<Arc<Engine>>, Query(params): Query<SearchParams>) -> ApiResult<impl IntoResponse> {
    let level = match params.level.as_deref() {
        None | Some("") => None,
        Some(l) => Some(Level::parse(l).ok_or_else(|| ApiError::bad_request(format!("unknown level `{l}`")))?),
    };
    Ok(Json(engine.search(
        &params.query,
        level,
        params.k.unwrap_or(DEFAULT_SEARCH_K),
    )))
}

async fn list_sources(State(engine): State<Arc<Engine>>) -> impl IntoResponse {
    Json(engine.list_sources())
}

async fn register_source(State(engine): State<Arc<Engine>>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let desc: SourceDescriptor = parse(&body)?;
    let id = blocking(&engine, move |e| e.register_source(desc)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "source_id": id }))))
}

async fn sync_source(State(engine): State<Arc<Engine>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let entries = blocking(&engine, move |e| e.sync_source(&id)).await?;
    Ok(Json(entries))
}

async fn list_operators(State(engine): State<Arc<Engine>>) -> impl IntoResponse {
    Json(engine.list_operators())
}

/// Binds `addr` and serves until ctrl-c.
pub async fn serve(engine: Arc<Engine>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(engine))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
