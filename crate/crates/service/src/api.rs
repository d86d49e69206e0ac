use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use toothlabel::labeling::LabelBits;
use toothlabel::study::{kappa_per_condition, AnnotationRecord, RaterGroup};
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;

use crate::{AppState, LogEntry, ServiceError};

type Shared = State<Arc<AppState>>;

struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self.0 {
            ServiceError::UnknownRater(_) => (StatusCode::NOT_FOUND, "UnknownRater"),
            ServiceError::UnknownCrop(_) => (StatusCode::NOT_FOUND, "UnknownCrop"),
            ServiceError::BadVectorLength { .. } => (StatusCode::BAD_REQUEST, "BadVectorLength"),
            ServiceError::Study(_) => (StatusCode::BAD_REQUEST, "InvalidAnnotation"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "Internal"),
        };
        if status.is_server_error() {
            log::error!("{}", self.0);
        }
        let body = serde_json::json!({"error": kind, "message": self.0.to_string()});
        (status, Json(body)).into_response()
    }
}

#[derive(Serialize)]
struct ConditionEntry<'a> {
    index: usize,
    name: &'a str,
}

async fn conditions(State(state): Shared) -> impl IntoResponse {
    let list: Vec<ConditionEntry> = state
        .vocabulary
        .conditions
        .iter()
        .map(|c| ConditionEntry {
            index: c.index,
            name: &c.name,
        })
        .collect();
    Json(serde_json::json!({ "conditions": list }))
}

#[derive(Deserialize)]
struct RaterQuery {
    rater: String,
}

#[derive(Serialize)]
struct NextTask {
    done: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    crop_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_url: Option<String>,
    completed: usize,
    total: usize,
}

async fn next_task(
    State(state): Shared,
    Query(q): Query<RaterQuery>,
) -> Result<Json<NextTask>, ApiError> {
    let session = state
        .sessions
        .get(&q.rater)
        .ok_or_else(|| ServiceError::UnknownRater(q.rater.clone()))?;
    let (completed, next) = state.store.with_current(|set| {
        let labeled = |i: &usize| set.get(&q.rater, &state.items[*i]).is_some();
        let completed = session.order.iter().filter(|i| labeled(i)).count();
        (
            completed,
            session.order.iter().find(|i| !labeled(i)).copied(),
        )
    });
    let crop_id = next.map(|i| state.items[i].crop_id());
    Ok(Json(NextTask {
        done: crop_id.is_none(),
        image_url: crop_id.as_ref().map(|id| format!("/crops/{id}.png")),
        crop_id,
        completed,
        total: state.items.len(),
    }))
}

#[derive(Deserialize)]
struct Submission {
    rater: String,
    crop_id: String,
    labels: LabelBits,
}

async fn submit(
    State(state): Shared,
    Json(body): Json<Submission>,
) -> Result<Json<LogEntry>, ApiError> {
    let session = state
        .sessions
        .get(&body.rater)
        .ok_or_else(|| ServiceError::UnknownRater(body.rater.clone()))?;
    let crop = state
        .item(&body.crop_id)
        .ok_or_else(|| ServiceError::UnknownCrop(body.crop_id.clone()))?;
    if body.labels.len() != state.vocabulary.len() {
        return Err(ServiceError::BadVectorLength {
            expected: state.vocabulary.len(),
            found: body.labels.len(),
        }
        .into());
    }
    let entry = state.store.append(AnnotationRecord {
        rater_id: body.rater,
        group: session.rater.group,
        image_id: crop.image_id.clone(),
        tooth: crop.tooth,
        labels: body.labels,
    })?;
    Ok(Json(entry))
}

async fn export(State(state): Shared) -> impl IntoResponse {
    let body = state.store.with_current(|set| set.to_jsonl());
    ([(header::CONTENT_TYPE, "application/x-ndjson")], body)
}

#[derive(Deserialize)]
struct AgreementQuery {
    group: Option<RaterGroup>,
}

#[derive(Serialize)]
struct ConditionAgreement {
    index: usize,
    name: String,
    kappa: Option<f64>,
    degenerate: bool,
}

#[derive(Serialize)]
struct Agreement {
    total_items: usize,
    progress: BTreeMap<String, usize>,
    complete_raters: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    conditions: Option<Vec<ConditionAgreement>>,
}

async fn agreement(
    State(state): Shared,
    Query(q): Query<AgreementQuery>,
) -> Result<Json<Agreement>, ApiError> {
    let raters: Vec<&String> = state
        .sessions
        .iter()
        .filter(|(_, s)| q.group.is_none_or(|g| s.rater.group == g))
        .map(|(id, _)| id)
        .collect();
    let result = state
        .store
        .with_current(|set| -> Result<Agreement, ServiceError> {
            let progress: BTreeMap<String, usize> = raters
                .iter()
                .map(|r| {
                    (
                        (*r).clone(),
                        state
                            .items
                            .iter()
                            .filter(|c| set.get(r, c).is_some())
                            .count(),
                    )
                })
                .collect();
            let complete_raters: Vec<String> = progress
                .iter()
                .filter(|(_, n)| **n == state.items.len())
                .map(|(r, _)| r.clone())
                .collect();
            let conditions = if complete_raters.len() >= 2 {
                let kappas = kappa_per_condition(set, &complete_raters, &state.items)?;
                Some(
                    kappas
                        .into_iter()
                        .zip(&state.vocabulary.conditions)
                        .map(|(k, c)| ConditionAgreement {
                            index: c.index,
                            name: c.name.clone(),
                            kappa: k.kappa,
                            degenerate: k.degenerate,
                        })
                        .collect(),
                )
            } else {
                None
            };
            Ok(Agreement {
                total_items: state.items.len(),
                progress,
                complete_raters,
                conditions,
            })
        })?;
    Ok(Json(result))
}

async fn crop_image(
    State(state): Shared,
    UrlPath(file): UrlPath<String>,
) -> Result<Response, ApiError> {
    let id = file
        .strip_suffix(".png")
        .filter(|id| state.item(id).is_some())
        .ok_or_else(|| ServiceError::UnknownCrop(file.clone()))?;
    let path = state.crops_dir.join(format!("{id}.png"));
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ServiceError::io(&path, e))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

/// Builds the HTTP routes over `state`, optionally serving a static UI bundle
/// and allowing one cross-origin UI.
pub fn router(
    state: Arc<AppState>,
    static_dir: Option<&Path>,
    cors_origin: Option<&str>,
) -> Result<Router, ServiceError> {
    let mut app = Router::new()
        .route("/conditions", get(conditions))
        .route("/tasks/next", get(next_task))
        .route("/annotations", get(export).post(submit))
        .route("/agreement", get(agreement))
        .route("/crops/{file}", get(crop_image))
        .with_state(state);
    if let Some(dir) = static_dir {
        app = app.fallback_service(ServeDir::new(dir));
    }
    if let Some(origin) = cors_origin {
        let origin = HeaderValue::from_str(origin)
            .map_err(|_| ServiceError::Config(format!("invalid CORS origin {origin:?}")))?;
        app = app.layer(
            CorsLayer::new()
                .allow_origin(origin)
                .allow_methods(Any)
                .allow_headers(Any),
        );
    }
    Ok(app)
}
