use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backends::EndpointConfig;
use crate::captioning::DEFAULT_MARGIN_FRAC;
use crate::error::{Error, Result};
use crate::extraction::DEFAULT_MAX_TOKENS;
use crate::geometry::FilterParams;

/// Resolved pipeline settings. Every field has a default, so an empty file
/// is a valid configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub filter: FilterParams,
    pub validation_enabled: bool,
    pub two_call_mode: bool,
    pub validate_on_crop: bool,
    pub margin_frac: f64,
    pub depth_max_side: u32,
    pub max_in_flight: usize,
    pub completion_max_tokens: u32,
    /// Phrases added to the built-in predicate blacklist.
    pub blacklist_extra: Vec<String>,
    pub endpoints: EndpointConfig,
    pub artifact_dir: Option<PathBuf>,
    pub debug_artifacts: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            filter: FilterParams::default(),
            validation_enabled: true,
            two_call_mode: false,
            validate_on_crop: false,
            margin_frac: DEFAULT_MARGIN_FRAC,
            depth_max_side: 512,
            max_in_flight: 8,
            completion_max_tokens: DEFAULT_MAX_TOKENS,
            blacklist_extra: Vec::new(),
            endpoints: EndpointConfig::default(),
            artifact_dir: None,
            debug_artifacts: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        self.endpoints.validate()?;
        if !(0.0..=0.5).contains(&self.margin_frac) {
            return Err(Error::Config(format!("margin_frac = {} must lie in [0, 0.5]", self.margin_frac)));
        }
        if self.depth_max_side < 16 {
            return Err(Error::Config(format!("depth_max_side = {} must be >= 16", self.depth_max_side)));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be >= 1".into()));
        }
        if self.completion_max_tokens == 0 {
            return Err(Error::Config("completion_max_tokens must be >= 1".into()));
        }
        Ok(())
    }

    /// Parses a JSON config document; blank input yields the defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = if text.trim().is_empty() {
            PipelineConfig::default()
        } else {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    PipelineConfig::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
