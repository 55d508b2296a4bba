//! Wire protocol and clients for the external model services.
//!
//! Five services sit behind plain JSON-over-HTTP routes: object detection,
//! depth estimation, region captioning, text completion and visual question
//! answering. [`ModelClient`] is the only way the pipeline talks to them; it
//! owns retries, telemetry and response validation so nothing outside the
//! contract reaches downstream stages. The [`Transport`] underneath is either
//! HTTP ([`HttpTransport`]) or an in-process scripted mock ([`MockTransport`]).

mod client;
mod http;
mod mock;
mod server;
pub mod wire;

use std::fmt;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use client::{EncodedImage, KindTelemetry, ModelClient, VqaAnswer, YesNo};
pub use http::{EndpointConfig, HttpTransport};
pub use mock::{canonical_json, request_digest, DefaultPolicy, MockScript, MockTransport};
pub use server::{mock_router, serve_mock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServiceKind {
    Detect,
    Depth,
    Caption,
    Complete,
    Vqa,
}

impl ServiceKind {
    pub const ALL: [ServiceKind; 5] = [
        ServiceKind::Detect,
        ServiceKind::Depth,
        ServiceKind::Caption,
        ServiceKind::Complete,
        ServiceKind::Vqa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ServiceKind::Detect => "detect",
            ServiceKind::Depth => "depth",
            ServiceKind::Caption => "caption",
            ServiceKind::Complete => "complete",
            ServiceKind::Vqa => "vqa",
        }
    }

    pub fn route(self) -> &'static str {
        match self {
            ServiceKind::Detect => "/detect",
            ServiceKind::Depth => "/depth",
            ServiceKind::Caption => "/caption",
            ServiceKind::Complete => "/complete",
            ServiceKind::Vqa => "/vqa",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ServiceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ServiceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        ServiceKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown service kind {s:?}"))
    }
}

/// Failure of a single request attempt below the client.
#[derive(Debug, Clone, Error)]
pub enum TransportError {
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("no scripted response for digest {digest}")]
    MockMiss { digest: String },
    #[error("undecodable response: {0}")]
    Decode(String),
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        match self {
            TransportError::Timeout(_) | TransportError::Connect(_) => true,
            TransportError::Status { status, .. } => *status >= 500 || *status == 429,
            TransportError::MockMiss { .. } | TransportError::Decode(_) => false,
        }
    }
}

#[derive(Debug, Clone, Error)]
pub enum BackendError {
    #[error("{kind} backend unavailable after {attempts} attempt(s): {last}")]
    Unavailable {
        kind: ServiceKind,
        attempts: u32,
        last: TransportError,
    },
    #[error("{kind} protocol error: {message}")]
    Protocol { kind: ServiceKind, message: String },
    #[error("{kind} mock has no response for digest {digest}")]
    MockMiss { kind: ServiceKind, digest: String },
    #[error("ambiguous yes/no answer: {raw:?}")]
    AmbiguousAnswer { raw: String },
    #[error("invalid request to {kind}: {message}")]
    BadRequest { kind: ServiceKind, message: String },
}

impl BackendError {
    pub(crate) fn protocol(kind: ServiceKind, message: impl Into<String>) -> Self {
        BackendError::Protocol {
            kind,
            message: message.into(),
        }
    }
}

/// Moves one JSON request to a service and returns its JSON response.
#[async_trait]
pub trait Transport: Send + Sync {
    async fn call(&self, kind: ServiceKind, body: &Value) -> Result<Value, TransportError>;
}
