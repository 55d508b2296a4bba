use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use super::{ImageTelemetry, OutcomeStatus, Pipeline, PipelineConfig, PipelineError, PipelineOutcome};
use crate::backends::{KindTelemetry, ServiceKind};
use crate::error::{Error, Result};
use crate::graph::{serialize_graph, GraphFormat, ImageRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
}

/// Reads a JSON-lines manifest of `{"id": .., "path": ..}` entries. Relative
/// paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<ImageRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(line)
            .map_err(|err| Error::at(format!("manifest line {}", n + 1), err.to_string()))?;
        if !seen.insert(e.id.clone()) {
            return Err(Error::at(format!("manifest line {}", n + 1), format!("duplicate id {:?}", e.id)));
        }
        let p = if e.path.is_absolute() { e.path } else { base.join(e.path) };
        out.push(ImageRecord::from_path(e.id, p)?);
    }
    if out.is_empty() {
        return Err(Error::Config(format!("{}: manifest is empty", path.display())));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageReport {
    pub image_id: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub telemetry: Option<ImageTelemetry>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BatchCounts {
    pub graphs: usize,
    pub discarded: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchReport {
    pub config: PipelineConfig,
    pub counts: BatchCounts,
    pub mean_image_ms: f64,
    pub total_backend_calls: BTreeMap<ServiceKind, u64>,
    pub client: BTreeMap<ServiceKind, KindTelemetry>,
    pub images: Vec<ImageReport>,
}

#[derive(Debug)]
pub struct BatchResult {
    pub report: BatchReport,
    pub outcomes: Vec<std::result::Result<PipelineOutcome, PipelineError>>,
}

impl BatchResult {
    /// One canonical-JSON graph per line, in manifest order.
    pub fn graphs_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for o in self.outcomes.iter().flatten() {
            if let Some(g) = o.graph() {
                out.push_str(std::str::from_utf8(&serialize_graph(g, GraphFormat::Json)?).expect("JSON is UTF-8"));
                out.push('\n');
            }
        }
        Ok(out)
    }

    pub fn has_failures(&self) -> bool {
        self.report.counts.failed > 0
    }

    /// Writes audit logs, and crops plus prompts when debugging, under `dir`.
    pub fn write_artifacts(&self, dir: &Path, include_crops: bool) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut extraction = fs::File::create(dir.join("extraction_audit.jsonl"))?;
        let mut validation = fs::File::create(dir.join("validation_audit.jsonl"))?;
        for o in self.outcomes.iter().flatten() {
            for d in &o.drops {
                writeln!(extraction, "{}", serde_json::to_string(d)?)?;
            }
            for v in &o.validations {
                let mut line = serde_json::to_value(v)?;
                line["image_id"] = o.image_id.clone().into();
                writeln!(validation, "{}", serde_json::to_string(&line)?)?;
            }
            if include_crops {
                let crops = dir.join("crops");
                fs::create_dir_all(&crops)?;
                for c in &o.crops {
                    let stem = sanitize(&format!("{}_{}-{}", o.image_id, c.pair.0, c.pair.1));
                    fs::write(crops.join(format!("{stem}.png")), c.encoded.png_bytes())?;
                    fs::write(crops.join(format!("{stem}.txt")), &c.prompt)?;
                }
            }
        }
        Ok(())
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

impl Pipeline {
    /// Runs every image, several at a time, keeping manifest order in the
    /// results. A failing image is recorded and the batch carries on.
    pub async fn run_batch(&self, manifest: &[ImageRecord]) -> Result<BatchResult> {
        if manifest.is_empty() {
            return Err(Error::Invalid("manifest is empty".into()));
        }
        let outcomes: Vec<_> = stream::iter(manifest)
            .map(|img| self.run_image(img))
            .buffered(self.config().max_in_flight)
            .collect()
            .await;

        let mut counts = BatchCounts::default();
        let mut totals: BTreeMap<ServiceKind, u64> = ServiceKind::ALL.into_iter().map(|k| (k, 0)).collect();
        let mut total_ms = 0.0;
        let mut images = Vec::with_capacity(outcomes.len());
        for (img, o) in manifest.iter().zip(&outcomes) {
            match o {
                Ok(out) => {
                    let status = match out.status {
                        OutcomeStatus::Graph(_) => {
                            counts.graphs += 1;
                            "graph"
                        }
                        OutcomeStatus::DiscardedNoObjects => {
                            counts.discarded += 1;
                            "discarded_no_objects"
                        }
                    };
                    for (k, n) in &out.telemetry.backend_calls {
                        *totals.entry(*k).or_default() += n;
                    }
                    total_ms += out.telemetry.stage_ms.values().sum::<f64>();
                    images.push(ImageReport {
                        image_id: img.id.clone(),
                        status: status.into(),
                        error: None,
                        telemetry: Some(out.telemetry.clone()),
                    });
                }
                Err(e) => {
                    counts.failed += 1;
                    tracing::warn!(image = %img.id, error = %e, "image failed");
                    images.push(ImageReport {
                        image_id: img.id.clone(),
                        status: "failed".into(),
                        error: Some(e.to_string()),
                        telemetry: None,
                    });
                }
            }
        }
        let finished = counts.graphs + counts.discarded;
        Ok(BatchResult {
            report: BatchReport {
                config: self.config().clone(),
                counts,
                mean_image_ms: if finished > 0 { total_ms / finished as f64 } else { 0.0 },
                total_backend_calls: totals,
                client: self.client().telemetry(),
                images,
            },
            outcomes,
        })
    }
}
