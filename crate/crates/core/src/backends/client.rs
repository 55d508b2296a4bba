use std::collections::BTreeMap;
use std::io::Cursor;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use image::{ImageFormat, RgbImage};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use super::wire::{
    CaptionRequest, CompleteRequest, DepthRequest, DepthResponse, DetectRequest, DetectResponse,
    TextResponse, VqaRequest,
};
use super::{BackendError, ServiceKind, Transport, TransportError};
use crate::geometry::DepthGrid;
use crate::graph::{BBox, DetectedObject};

/// A PNG-encoded image ready for the wire, with its pixel dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedImage {
    pub width: u32,
    pub height: u32,
    pub png_b64: String,
}

impl EncodedImage {
    pub fn from_rgb(img: &RgbImage) -> Result<Self, image::ImageError> {
        let png = encode_png(img)?;
        Ok(EncodedImage {
            width: img.width(),
            height: img.height(),
            png_b64: STANDARD.encode(png),
        })
    }

    pub fn png_bytes(&self) -> Vec<u8> {
        // always produced by from_rgb, so the payload is valid base64
        STANDARD.decode(&self.png_b64).unwrap_or_default()
    }
}

pub(crate) fn encode_png(img: &RgbImage) -> Result<Vec<u8>, image::ImageError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum YesNo {
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VqaAnswer {
    pub answer: YesNo,
    pub raw_text: String,
}

impl VqaAnswer {
    /// Reads a yes/no decision out of free-form answer text.
    ///
    /// Case-folds and replaces punctuation with spaces. A leading "yes" or
    /// "no" token decides; otherwise exactly one of the two must occur
    /// anywhere in the text.
    pub fn decide(raw: &str) -> Result<VqaAnswer, BackendError> {
        let cleaned: String = raw
            .to_lowercase()
            .chars()
            .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
            .collect();
        let tokens: Vec<&str> = cleaned.split_whitespace().collect();
        let answer = match tokens.first() {
            Some(&"yes") => Some(YesNo::Yes),
            Some(&"no") => Some(YesNo::No),
            _ => {
                let yes = tokens.contains(&"yes");
                let no = tokens.contains(&"no");
                match (yes, no) {
                    (true, false) => Some(YesNo::Yes),
                    (false, true) => Some(YesNo::No),
                    _ => None,
                }
            }
        };
        answer
            .map(|answer| VqaAnswer {
                answer,
                raw_text: raw.to_string(),
            })
            .ok_or_else(|| BackendError::AmbiguousAnswer {
                raw: raw.to_string(),
            })
    }
}

#[derive(Default)]
struct Counters {
    calls: AtomicU64,
    attempts: AtomicU64,
    retries: AtomicU64,
    failures: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct KindTelemetry {
    pub calls: u64,
    pub attempts: u64,
    pub retries: u64,
    pub failures: u64,
}

/// Validating, retrying client over any [`Transport`]. Cheap to clone and
/// safe to share between tasks.
#[derive(Clone)]
pub struct ModelClient {
    transport: Arc<dyn Transport>,
    max_retries: u32,
    backoff: Duration,
    counters: Arc<[Counters; 5]>,
}

impl ModelClient {
    pub fn new(transport: Arc<dyn Transport>, max_retries: u32, backoff: Duration) -> Self {
        ModelClient {
            transport,
            max_retries,
            backoff,
            counters: Arc::new(Default::default()),
        }
    }

    pub fn telemetry(&self) -> BTreeMap<ServiceKind, KindTelemetry> {
        ServiceKind::ALL
            .into_iter()
            .map(|k| {
                let c = &self.counters[k.index()];
                (
                    k,
                    KindTelemetry {
                        calls: c.calls.load(Ordering::Relaxed),
                        attempts: c.attempts.load(Ordering::Relaxed),
                        retries: c.retries.load(Ordering::Relaxed),
                        failures: c.failures.load(Ordering::Relaxed),
                    },
                )
            })
            .collect()
    }

    async fn round_trip<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        kind: ServiceKind,
        req: &Req,
    ) -> Result<Resp, BackendError> {
        let body = serde_json::to_value(req).map_err(|e| BackendError::BadRequest {
            kind,
            message: e.to_string(),
        })?;
        let value = self.send(kind, &body).await?;
        serde_json::from_value(value).map_err(|e| BackendError::protocol(kind, e.to_string()))
    }

    async fn send(&self, kind: ServiceKind, body: &Value) -> Result<Value, BackendError> {
        let c = &self.counters[kind.index()];
        c.calls.fetch_add(1, Ordering::Relaxed);
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            c.attempts.fetch_add(1, Ordering::Relaxed);
            match self.transport.call(kind, body).await {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt <= self.max_retries => {
                    tracing::debug!(%kind, attempt, error = %e, "retrying backend call");
                    c.retries.fetch_add(1, Ordering::Relaxed);
                    if !self.backoff.is_zero() {
                        tokio::time::sleep(self.backoff * attempt).await;
                    }
                }
                Err(e) => {
                    c.failures.fetch_add(1, Ordering::Relaxed);
                    return Err(match e {
                        TransportError::MockMiss { digest } => BackendError::MockMiss { kind, digest },
                        TransportError::Decode(m) => BackendError::protocol(kind, m),
                        TransportError::Status { status, body } if (400..500).contains(&status) && status != 429 => {
                            BackendError::protocol(kind, format!("HTTP {status}: {body}"))
                        }
                        e => BackendError::Unavailable {
                            kind,
                            attempts: attempt,
                            last: e,
                        },
                    });
                }
            }
        }
    }

    /// Runs detection; node ids follow response order. Boxes are clamped to
    /// the image and labels lower-cased.
    pub async fn detect(&self, image: &EncodedImage) -> Result<Vec<DetectedObject>, BackendError> {
        let kind = ServiceKind::Detect;
        let resp: DetectResponse = self
            .round_trip(
                kind,
                &DetectRequest {
                    image_png_b64: image.png_b64.clone(),
                },
            )
            .await?;
        let (w, h) = (image.width as f64, image.height as f64);
        resp.objects
            .into_iter()
            .enumerate()
            .map(|(node_id, o)| {
                let label = o.label.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
                if label.is_empty() {
                    return Err(BackendError::protocol(kind, format!("object {node_id} has an empty label")));
                }
                let [x1, y1, x2, y2] = o.bbox;
                let raw = BBox { x1, y1, x2, y2 };
                raw.check()
                    .map_err(|e| BackendError::protocol(kind, format!("object {node_id}: {e}")))?;
                let bbox = BBox {
                    x1: x1.clamp(0.0, w),
                    y1: y1.clamp(0.0, h),
                    x2: x2.clamp(0.0, w),
                    y2: y2.clamp(0.0, h),
                };
                bbox.check().map_err(|_| {
                    BackendError::protocol(kind, format!("object {node_id}: {raw:?} lies outside the image"))
                })?;
                let score = o.score.unwrap_or(1.0);
                if !(0.0..=1.0).contains(&score) {
                    return Err(BackendError::protocol(kind, format!("object {node_id}: score {score} outside [0,1]")));
                }
                Ok(DetectedObject {
                    node_id,
                    label,
                    bbox,
                    score,
                })
            })
            .collect()
    }

    pub async fn depth(&self, image: &EncodedImage, max_side: u32) -> Result<DepthGrid, BackendError> {
        let kind = ServiceKind::Depth;
        if max_side < 16 {
            return Err(BackendError::BadRequest {
                kind,
                message: format!("max_side {max_side} is below 16"),
            });
        }
        let resp: DepthResponse = self
            .round_trip(
                kind,
                &DepthRequest {
                    image_png_b64: image.png_b64.clone(),
                    max_side,
                },
            )
            .await?;
        if resp.rows.max(resp.cols) > max_side as usize {
            return Err(BackendError::protocol(
                kind,
                format!("grid {}x{} exceeds max_side {max_side}", resp.rows, resp.cols),
            ));
        }
        DepthGrid::new(resp.rows, resp.cols, resp.values, image.width, image.height)
            .map_err(|e| BackendError::protocol(kind, e.to_string()))
    }

    pub async fn caption(&self, crop: &EncodedImage, prompt: &str) -> Result<String, BackendError> {
        let kind = ServiceKind::Caption;
        require_nonempty(kind, "prompt", prompt)?;
        let resp: TextResponse = self
            .round_trip(
                kind,
                &CaptionRequest {
                    image_png_b64: crop.png_b64.clone(),
                    prompt: prompt.to_string(),
                },
            )
            .await?;
        nonempty_text(kind, resp)
    }

    pub async fn complete(&self, prompt: &str, max_tokens: u32) -> Result<String, BackendError> {
        let kind = ServiceKind::Complete;
        require_nonempty(kind, "prompt", prompt)?;
        let resp: TextResponse = self
            .round_trip(
                kind,
                &CompleteRequest {
                    prompt: prompt.to_string(),
                    max_tokens,
                },
            )
            .await?;
        nonempty_text(kind, resp)
    }

    pub async fn vqa(&self, image: &EncodedImage, question: &str) -> Result<VqaAnswer, BackendError> {
        let kind = ServiceKind::Vqa;
        require_nonempty(kind, "question", question)?;
        let resp: TextResponse = self
            .round_trip(
                kind,
                &VqaRequest {
                    image_png_b64: image.png_b64.clone(),
                    question: question.to_string(),
                },
            )
            .await?;
        VqaAnswer::decide(&nonempty_text(kind, resp)?)
    }
}

fn require_nonempty(kind: ServiceKind, what: &str, s: &str) -> Result<(), BackendError> {
    if s.trim().is_empty() {
        return Err(BackendError::BadRequest {
            kind,
            message: format!("empty {what}"),
        });
    }
    Ok(())
}

fn nonempty_text(kind: ServiceKind, resp: TextResponse) -> Result<String, BackendError> {
    if resp.text.trim().is_empty() {
        return Err(BackendError::protocol(kind, "empty text"));
    }
    Ok(resp.text)
}
