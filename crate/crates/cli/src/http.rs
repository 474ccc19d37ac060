//! HTTP routes over [`Service`].

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use shiftflow::attention::LatentPolicy;
use shiftflow::bench::SuccessReport;
use shiftflow::geometry::TaskQuery;

use crate::bundle::{Bundle, ModelSummary};
use crate::service::{DemoRequest, JobRequest, ScenarioRequest, Service, ServiceError};
use crate::store::Collection;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ServiceError::NotFound(m) => (StatusCode::NOT_FOUND, json!({ "error": m })),
            ServiceError::Invalid(m) => (StatusCode::BAD_REQUEST, json!({ "error": m })),
            ServiceError::Conflict(job) => (StatusCode::CONFLICT, json!({ "error": "an identical job already exists", "job": job })),
            ServiceError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": m })),
        };
        (status, Json(body)).into_response()
    }
}

type Reply = Result<Response, ServiceError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::Invalid(format!("malformed request body: {e}")))
}

fn reply<T: Serialize>(status: StatusCode, value: &T) -> Reply {
    Ok((status, Json(value)).into_response())
}

/// Runs blocking store or model work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ServiceError::Internal(e.to_string()))?
}

async fn create_scenario(State(s): State<Service>, body: Bytes) -> Reply {
    let req: ScenarioRequest = parse(&body)?;
    let (record, created) = blocking(move || s.create_scenario(req)).await?;
    reply(if created { StatusCode::CREATED } else { StatusCode::OK }, &record)
}

async fn get_scenario(State(s): State<Service>, Path(id): Path<String>) -> Reply {
    reply(StatusCode::OK, &blocking(move || s.scenario(&id)).await?)
}

async fn add_demo(State(s): State<Service>, Path(id): Path<String>, body: Bytes) -> Reply {
    let req: DemoRequest = parse(&body)?;
    let receipt = blocking(move || s.add_demo(&id, req)).await?;
    reply(if receipt.duplicate { StatusCode::OK } else { StatusCode::CREATED }, &receipt)
}

async fn submit_job(State(s): State<Service>, body: Bytes) -> Reply {
    let req: JobRequest = parse(&body)?;
    reply(StatusCode::ACCEPTED, &blocking(move || s.submit(req)).await?)
}

async fn get_job(State(s): State<Service>, Path(id): Path<String>) -> Reply {
    reply(StatusCode::OK, &s.job(&id)?)
}

async fn list_jobs(State(s): State<Service>) -> Reply {
    reply(StatusCode::OK, &s.jobs())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateRequest {
    #[serde(default)]
    query: Option<TaskQuery>,
    /// Id of a stored scenario whose query to use.
    #[serde(default)]
    scenario: Option<String>,
    #[serde(default)]
    policy: Option<LatentPolicy>,
}

fn load_model(s: &Service, id: &str) -> Result<Bundle, ServiceError> {
    let text = s.store().get_raw(Collection::Models, id)?.ok_or_else(|| ServiceError::NotFound(format!("no model {id}")))?;
    Ok(Bundle::from_json(&text)?)
}

async fn generate(State(s): State<Service>, Path(id): Path<String>, body: Bytes) -> Reply {
    let req: GenerateRequest = parse(&body)?;
    let out = blocking(move || {
        let bundle = load_model(&s, &id)?;
        let query = match (req.query, req.scenario) {
            (Some(q), None) => q,
            (None, Some(sid)) => s.scenario(&sid)?.query,
            _ => return Err(ServiceError::Invalid("give exactly one of `query` and `scenario`".into())),
        };
        query.validate()?;
        Ok(bundle.generate(&query, req.policy.unwrap_or(LatentPolicy::Mean))?)
    })
    .await?;
    reply(StatusCode::OK, &out)
}

#[derive(Serialize)]
struct SummaryView {
    id: String,
    #[serde(flatten)]
    summary: ModelSummary,
}

async fn summary(State(s): State<Service>, Path(id): Path<String>) -> Reply {
    let summary = blocking(move || {
        let summary: ModelSummary = s.store().get(Collection::Summaries, &id)?.ok_or_else(|| ServiceError::NotFound(format!("no model {id}")))?;
        Ok(SummaryView { id, summary })
    })
    .await?;
    reply(StatusCode::OK, &summary)
}

async fn report(State(s): State<Service>, Path(id): Path<String>) -> Reply {
    let report = blocking(move || {
        let text = s.store().get_raw(Collection::Reports, &id)?.ok_or_else(|| ServiceError::NotFound(format!("no report {id}")))?;
        Ok(SuccessReport::from_json(&text)?)
    })
    .await?;
    reply(StatusCode::OK, &report)
}

async fn health() -> Reply {
    reply(StatusCode::OK, &json!({ "status": "ok" }))
}

pub fn router(service: Service) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/scenarios", post(create_scenario))
        .route("/scenarios/{id}", get(get_scenario))
        .route("/scenarios/{id}/demos", post(add_demo))
        .route("/jobs", post(submit_job).get(list_jobs))
        .route("/jobs/{id}", get(get_job))
        .route("/models/{id}/generate", post(generate))
        .route("/models/{id}/summary", get(summary))
        .route("/reports/{id}", get(report))
        .with_state(service)
}

/// Serves until the process is stopped.
pub async fn serve(service: Service, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    axum::serve(listener, router(service)).await
}
