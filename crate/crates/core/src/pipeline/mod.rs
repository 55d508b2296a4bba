//! Image-to-graph orchestration.
//!
//! Stages run as sequential barriers per image:
//! detect, depth, pair filter, caption, extract, validate, assemble.
//! Work inside a stage fans out across pairs, captions or triplets, with all
//! backend calls sharing one bounded in-flight budget. Results are collected
//! in input order, so output never depends on scheduling.

mod batch;
mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use futures::future::join_all;
use serde::Serialize;
use thiserror::Error;
use tokio::sync::Semaphore;

pub use batch::{load_manifest, BatchCounts, BatchReport, BatchResult, ImageReport, ManifestEntry};
pub use config::{load_config, PipelineConfig};

use crate::backends::{BackendError, EncodedImage, ModelClient, ServiceKind};
use crate::captioning::{caption_pair, plain_pair_crop, CaptionError, CaptionRecord, PairCrop};
use crate::error::Error;
use crate::extraction::{extract_triplets, DropRecord, ExtractionOptions, PairLabels, PredicateBlacklist};
use crate::geometry::{filter_pairs, PairCandidate};
use crate::graph::{assemble_graph, DetectedObject, ImageRecord, SceneGraph, Triplet, ValidationState};
use crate::validation::{accept_all, validate_triplet, ValidationRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Load,
    Detect,
    Depth,
    Filter,
    Caption,
    Extract,
    Validate,
    Assemble,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

#[derive(Debug, Error)]
#[error("image {image_id}: {stage} stage failed: {source}")]
pub struct PipelineError {
    pub image_id: String,
    pub stage: Stage,
    #[source]
    pub source: Error,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ImageTelemetry {
    pub objects: usize,
    pub pairs_total: usize,
    pub pairs_retained: usize,
    pub captions: usize,
    pub triplets_raw: usize,
    pub triplets_kept: usize,
    pub edges: usize,
    pub stage_ms: BTreeMap<Stage, f64>,
    pub backend_calls: BTreeMap<ServiceKind, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", content = "graph", rename_all = "snake_case")]
pub enum OutcomeStatus {
    Graph(SceneGraph),
    DiscardedNoObjects,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub image_id: String,
    pub status: OutcomeStatus,
    pub telemetry: ImageTelemetry,
    pub pairs: Vec<PairCandidate>,
    pub captions: Vec<CaptionRecord>,
    pub drops: Vec<DropRecord>,
    pub validations: Vec<ValidationRecord>,
    /// Only filled when `debug_artifacts` is on.
    pub crops: Vec<PairCrop>,
}

impl PipelineOutcome {
    pub fn graph(&self) -> Option<&SceneGraph> {
        match &self.status {
            OutcomeStatus::Graph(g) => Some(g),
            OutcomeStatus::DiscardedNoObjects => None,
        }
    }
}

pub struct Pipeline {
    cfg: PipelineConfig,
    client: ModelClient,
    permits: Arc<Semaphore>,
    extraction: ExtractionOptions,
}

struct StageClock {
    started: Instant,
    stage_ms: BTreeMap<Stage, f64>,
}

impl StageClock {
    fn new() -> Self {
        StageClock {
            started: Instant::now(),
            stage_ms: BTreeMap::new(),
        }
    }

    fn lap(&mut self, stage: Stage) {
        let now = Instant::now();
        let ms = now.duration_since(self.started).as_secs_f64() * 1e3;
        *self.stage_ms.entry(stage).or_default() += ms;
        self.started = now;
    }
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, client: ModelClient) -> crate::Result<Self> {
        cfg.validate()?;
        let mut blacklist = PredicateBlacklist::default();
        blacklist.extend(cfg.blacklist_extra.iter().map(String::as_str));
        Ok(Pipeline {
            permits: Arc::new(Semaphore::new(cfg.max_in_flight)),
            extraction: ExtractionOptions {
                two_call_mode: cfg.two_call_mode,
                max_tokens: cfg.completion_max_tokens,
                blacklist,
            },
            cfg,
            client,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn client(&self) -> &ModelClient {
        &self.client
    }

    async fn gated<T>(&self, fut: impl std::future::Future<Output = T>) -> T {
        // the semaphore is never closed
        let _permit = self.permits.acquire().await.expect("semaphore open");
        fut.await
    }

    pub async fn run_image(&self, image: &ImageRecord) -> Result<PipelineOutcome, PipelineError> {
        let fail = |stage: Stage| {
            let image_id = image.id.clone();
            move |source: Error| PipelineError {
                image_id: image_id.clone(),
                stage,
                source,
            }
        };
        let backend = |stage: Stage| {
            let f = fail(stage);
            move |e: BackendError| f(Error::Backend(e))
        };
        let mut clock = StageClock::new();
        let mut tel = ImageTelemetry::default();
        let mut calls = BTreeMap::new();

        let rgb = image.load_rgb().map_err(fail(Stage::Load))?;
        let full = EncodedImage::from_rgb(&rgb).map_err(|e| fail(Stage::Load)(Error::Image(e.to_string())))?;
        clock.lap(Stage::Load);

        *calls.entry(ServiceKind::Detect).or_insert(0) += 1;
        let objects = self
            .gated(self.client.detect(&full))
            .await
            .map_err(backend(Stage::Detect))?;
        clock.lap(Stage::Detect);
        tel.objects = objects.len();
        if objects.is_empty() {
            tel.stage_ms = clock.stage_ms;
            tel.backend_calls = calls;
            return Ok(PipelineOutcome {
                image_id: image.id.clone(),
                status: OutcomeStatus::DiscardedNoObjects,
                telemetry: tel,
                pairs: Vec::new(),
                captions: Vec::new(),
                drops: Vec::new(),
                validations: Vec::new(),
                crops: Vec::new(),
            });
        }

        *calls.entry(ServiceKind::Depth).or_insert(0) += 1;
        let depth = self
            .gated(self.client.depth(&full, self.cfg.depth_max_side))
            .await
            .map_err(backend(Stage::Depth))?;
        clock.lap(Stage::Depth);

        let pairs = filter_pairs(&objects, &depth, image, &self.cfg.filter).map_err(fail(Stage::Filter))?;
        tel.pairs_total = pairs.len();
        let retained: Vec<&PairCandidate> = pairs.iter().filter(|p| p.retained).collect();
        tel.pairs_retained = retained.len();
        clock.lap(Stage::Filter);

        let captioned = join_all(retained.iter().map(|p| {
            self.gated(caption_pair(p, &image.id, &rgb, &objects, &self.client, self.cfg.margin_frac))
        }))
        .await
        .into_iter()
        .collect::<Result<Vec<_>, CaptionError>>()
        .map_err(|e| match e {
            CaptionError::Backend { caption_id, source } => fail(Stage::Caption)(Error::at(caption_id, source.to_string())),
            CaptionError::Input { caption_id, source } => fail(Stage::Caption)(Error::at(caption_id, source.to_string())),
        })?;
        calls.insert(ServiceKind::Caption, captioned.len() as u64);
        tel.captions = captioned.len();
        let (captions, crops): (Vec<CaptionRecord>, Vec<PairCrop>) = captioned.into_iter().unzip();
        clock.lap(Stage::Caption);

        let label = |id: usize| -> &str {
            objects
                .iter()
                .find(|o| o.node_id == id)
                .map(|o| o.label.as_str())
                .unwrap_or_default()
        };
        let extracted = join_all(captions.iter().map(|c| {
            let pair = PairLabels {
                i: c.pair.0,
                label_i: label(c.pair.0).to_string(),
                j: c.pair.1,
                label_j: label(c.pair.1).to_string(),
            };
            async move {
                self.gated(extract_triplets(c, &pair, &self.client, &self.extraction))
                    .await
            }
        }))
        .await
        .into_iter()
        .collect::<Result<Vec<_>, BackendError>>()
        .map_err(backend(Stage::Extract))?;
        let mut raw: Vec<Triplet> = Vec::new();
        let mut drops = Vec::new();
        let mut completions = 0u64;
        for out in extracted {
            completions += out.completion_calls as u64;
            raw.extend(out.triplets);
            drops.extend(out.drops);
        }
        calls.insert(ServiceKind::Complete, completions);
        tel.triplets_raw = raw.len();
        clock.lap(Stage::Extract);

        let (settled, validations) = if self.cfg.validation_enabled {
            self.validate_all(&raw, &objects, &rgb, &full)
                .await
                .map_err(fail(Stage::Validate))?
        } else {
            (accept_all(&raw), Vec::new())
        };
        calls.insert(ServiceKind::Vqa, validations.len() as u64);
        let kept: Vec<Triplet> = settled
            .into_iter()
            .filter(|t| t.validated == ValidationState::Kept)
            .collect();
        tel.triplets_kept = kept.len();
        clock.lap(Stage::Validate);

        let graph = assemble_graph(image, &objects, &kept).map_err(fail(Stage::Assemble))?;
        tel.edges = graph.edges.len();
        clock.lap(Stage::Assemble);
        tel.stage_ms = clock.stage_ms;
        tel.backend_calls = calls;

        Ok(PipelineOutcome {
            image_id: image.id.clone(),
            status: OutcomeStatus::Graph(graph),
            telemetry: tel,
            pairs,
            captions,
            drops,
            validations,
            crops: if self.cfg.debug_artifacts { crops } else { Vec::new() },
        })
    }

    async fn validate_all(
        &self,
        triplets: &[Triplet],
        objects: &[DetectedObject],
        rgb: &image::RgbImage,
        full: &EncodedImage,
    ) -> crate::Result<(Vec<Triplet>, Vec<ValidationRecord>)> {
        let node = |id: usize| objects.iter().find(|o| o.node_id == id);
        let mut views = Vec::with_capacity(triplets.len());
        for t in triplets {
            let (s, o) = node(t.subject)
                .zip(node(t.object))
                .ok_or_else(|| Error::DanglingNode(t.source_caption_id.clone()))?;
            let view = if self.cfg.validate_on_crop {
                let crop = plain_pair_crop(rgb, &s.bbox, &o.bbox, self.cfg.margin_frac)?;
                Some(EncodedImage::from_rgb(&crop).map_err(|e| Error::Image(e.to_string()))?)
            } else {
                None
            };
            views.push((s.label.clone(), o.label.clone(), view));
        }
        let results = join_all(triplets.iter().zip(&views).map(|(t, (sl, ol, view))| {
            let img = view.as_ref().unwrap_or(full);
            self.gated(validate_triplet(t, sl, ol, img, &self.client))
        }))
        .await;
        let mut settled = Vec::with_capacity(triplets.len());
        let mut records = Vec::new();
        for r in results {
            let (t, rec) = r?;
            settled.push(t);
            records.extend(rec);
        }
        Ok((settled, records))
    }
}

/// One-shot convenience wrapper around [`Pipeline::run_image`].
pub async fn run_image(
    image: &ImageRecord,
    cfg: &PipelineConfig,
    client: &ModelClient,
) -> Result<PipelineOutcome, PipelineError> {
    let pipeline = Pipeline::new(cfg.clone(), client.clone()).map_err(|source| PipelineError {
        image_id: image.id.clone(),
        stage: Stage::Load,
        source,
    })?;
    pipeline.run_image(image).await
}
