//! HTTP routes. Turns run on the blocking pool under the session's lock.

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::config::BusyPolicy;
use crate::session::{CreateSession, Created, ServiceError, SessionView, Store, TurnPayload};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::UnknownSpec(_) | ServiceError::SessionNotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::SessionBusy(_) => StatusCode::CONFLICT,
            ServiceError::BackendInit(_) | ServiceError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(ErrorBody { code: self.code().into(), message: self.to_string() })).into_response()
    }
}

fn body<T>(r: Result<Json<T>, JsonRejection>) -> Result<T, ServiceError> {
    r.map(|Json(v)| v).map_err(|e| ServiceError::BadRequest(e.body_text()))
}

fn joined<T>(r: Result<Result<T, ServiceError>, tokio::task::JoinError>) -> Result<T, ServiceError> {
    r.map_err(|e| ServiceError::Storage(format!("worker failed: {e}")))?
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnRequest {
    pub utterance: String,
}

async fn create(State(store): State<Arc<Store>>, req: Result<Json<CreateSession>, JsonRejection>) -> Result<Json<Created>, ServiceError> {
    let req = body(req)?;
    let created = joined(tokio::task::spawn_blocking(move || store.create(&req)).await)?;
    Ok(Json(created))
}

async fn turn(
    State(store): State<Arc<Store>>,
    Path(id): Path<String>,
    req: Result<Json<TurnRequest>, JsonRejection>,
) -> Result<Json<TurnPayload>, ServiceError> {
    let handle = store.session(&id)?;
    let req = body(req)?;
    let guard = match store.config().busy {
        BusyPolicy::Wait => handle.lock_owned().await,
        BusyPolicy::Reject => handle.try_lock_owned().map_err(|_| ServiceError::SessionBusy(id.clone()))?,
    };
    let payload = joined(
        tokio::task::spawn_blocking(move || {
            let mut s = guard;
            s.take_turn(&req.utterance)
        })
        .await,
    )?;
    Ok(Json(payload))
}

async fn view(State(store): State<Arc<Store>>, Path(id): Path<String>) -> Result<Json<SessionView>, ServiceError> {
    let handle = store.session(&id)?;
    let s = handle.lock().await;
    Ok(Json(s.view()))
}

pub fn router(store: Arc<Store>) -> Router {
    Router::new()
        .route("/api/sessions", post(create))
        .route("/api/sessions/{id}/turns", post(turn))
        .route("/api/sessions/{id}", get(view))
        .with_state(store)
}

/// Bind and serve until the process is stopped.
pub async fn serve(store: Arc<Store>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(&store.config().bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(store)).await
}
