use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ServiceKind, Transport, TransportError};
use crate::error::{Error, Result};

pub const DEFAULT_BASE_URL: &str = "http://127.0.0.1:8700";

/// Environment variable carrying a bearer token passed through to every service.
pub const BEARER_TOKEN_ENV: &str = "SGG_BEARER_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub detect: String,
    pub depth: String,
    pub caption: String,
    pub complete: String,
    pub vqa: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub retry_backoff_ms: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            detect: DEFAULT_BASE_URL.into(),
            depth: DEFAULT_BASE_URL.into(),
            caption: DEFAULT_BASE_URL.into(),
            complete: DEFAULT_BASE_URL.into(),
            vqa: DEFAULT_BASE_URL.into(),
            timeout_secs: 120.0,
            max_retries: 2,
            retry_backoff_ms: 250,
        }
    }
}

impl EndpointConfig {
    pub fn base_url(&self, kind: ServiceKind) -> &str {
        match kind {
            ServiceKind::Detect => &self.detect,
            ServiceKind::Depth => &self.depth,
            ServiceKind::Caption => &self.caption,
            ServiceKind::Complete => &self.complete,
            ServiceKind::Vqa => &self.vqa,
        }
    }

    fn base_url_mut(&mut self, kind: ServiceKind) -> &mut String {
        match kind {
            ServiceKind::Detect => &mut self.detect,
            ServiceKind::Depth => &mut self.depth,
            ServiceKind::Caption => &mut self.caption,
            ServiceKind::Complete => &mut self.complete,
            ServiceKind::Vqa => &mut self.vqa,
        }
    }

    /// Points every service at one base URL.
    pub fn all_at(url: &str) -> Self {
        let mut cfg = EndpointConfig::default();
        for kind in ServiceKind::ALL {
            *cfg.base_url_mut(kind) = url.to_string();
        }
        cfg
    }

    /// Name of the variable overriding the base URL for `kind`, e.g. `SGG_DETECT_URL`.
    pub fn env_var(kind: ServiceKind) -> String {
        format!("SGG_{}_URL", kind.as_str().to_ascii_uppercase())
    }

    pub fn apply_env(&mut self) {
        self.apply_overrides(|name| std::env::var(name).ok());
    }

    pub fn apply_overrides(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        for kind in ServiceKind::ALL {
            if let Some(url) = lookup(&Self::env_var(kind)).filter(|u| !u.trim().is_empty()) {
                *self.base_url_mut(kind) = url;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(Error::Config(format!(
                "endpoints.timeout_secs = {} must be > 0",
                self.timeout_secs
            )));
        }
        if self.max_retries > 10 {
            return Err(Error::Config(format!(
                "endpoints.max_retries = {} is above 10",
                self.max_retries
            )));
        }
        for kind in ServiceKind::ALL {
            let url = self.base_url(kind);
            reqwest::Url::parse(url)
                .map_err(|e| Error::Config(format!("endpoints.{kind} = {url:?}: {e}")))?;
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    pub fn backoff(&self) -> Duration {
        Duration::from_millis(self.retry_backoff_ms)
    }
}

/// JSON-over-HTTP transport, one POST route per service kind.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    client: reqwest::Client,
    endpoints: EndpointConfig,
    bearer: Option<String>,
}

impl HttpTransport {
    pub fn new(endpoints: EndpointConfig) -> Result<Self> {
        endpoints.validate()?;
        let client = reqwest::Client::builder()
            .timeout(endpoints.timeout())
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(HttpTransport {
            client,
            endpoints,
            bearer: std::env::var(BEARER_TOKEN_ENV).ok().filter(|t| !t.is_empty()),
        })
    }

    pub fn with_bearer_token(mut self, token: Option<String>) -> Self {
        self.bearer = token;
        self
    }

    fn url(&self, kind: ServiceKind) -> String {
        format!("{}{}", self.endpoints.base_url(kind).trim_end_matches('/'), kind.route())
    }
}

#[async_trait]
impl Transport for HttpTransport {
    async fn call(&self, kind: ServiceKind, body: &Value) -> Result<Value, TransportError> {
        let mut req = self.client.post(self.url(kind)).json(body);
        if let Some(token) = &self.bearer {
            req = req.bearer_auth(token);
        }
        let resp = req.send().await.map_err(classify)?;
        let status = resp.status();
        let text = resp.text().await.map_err(classify)?;
        if !status.is_success() {
            if status == reqwest::StatusCode::NOT_FOUND {
                if let Ok(v) = serde_json::from_str::<Value>(&text) {
                    if v.get("error").and_then(Value::as_str) == Some("mock_miss") {
                        let digest = v["digest"].as_str().unwrap_or_default().to_string();
                        return Err(TransportError::MockMiss { digest });
                    }
                }
            }
            return Err(TransportError::Status {
                status: status.as_u16(),
                body: text,
            });
        }
        serde_json::from_str(&text).map_err(|e| TransportError::Decode(e.to_string()))
    }
}

fn classify(e: reqwest::Error) -> TransportError {
    if e.is_timeout() {
        TransportError::Timeout(e.to_string())
    } else if e.is_decode() {
        TransportError::Decode(e.to_string())
    } else {
        TransportError::Connect(e.to_string())
    }
}
