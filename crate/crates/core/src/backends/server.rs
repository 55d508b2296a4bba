//! Standalone mock backend speaking the same HTTP protocol as the real services.

use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};
use tokio::net::TcpListener;

use super::{MockScript, ServiceKind, TransportError};

pub fn mock_router(script: Arc<MockScript>) -> Router {
    Router::new()
        .route("/{kind}", post(handle))
        .with_state(script)
}

async fn handle(
    State(script): State<Arc<MockScript>>,
    Path(kind): Path<String>,
    Json(body): Json<Value>,
) -> Response {
    let Ok(kind) = kind.parse::<ServiceKind>() else {
        return (StatusCode::NOT_FOUND, Json(json!({"error": "unknown_route"}))).into_response();
    };
    match script.lookup(kind, &body) {
        Ok(v) => Json(v).into_response(),
        Err(TransportError::MockMiss { digest }) => {
            tracing::warn!(%kind, %digest, "mock miss");
            (
                StatusCode::NOT_FOUND,
                Json(json!({"error": "mock_miss", "digest": digest})),
            )
                .into_response()
        }
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

/// Serves `script` on `listener` until the task is dropped.
pub async fn serve_mock(script: Arc<MockScript>, listener: TcpListener) -> std::io::Result<()> {
    axum::serve(listener, mock_router(script)).await
}
