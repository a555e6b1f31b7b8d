//! Pipeline configuration, read from a flat TOML file.
//!
//! ```toml
//! entry_radius_m = 150.0
//! temporal_tolerance_s = 300.0
//! spatial_accept_m = 100.0
//! hysteresis_s = 60.0
//! ```
//!
//! Every key is optional; missing keys take their defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::CongestionThresholds;
use crate::inference::InferenceConfig;
use crate::trace::TraceConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config value {key} = {value}")]
    Range { key: &'static str, value: f64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(flatten)]
    pub trace: TraceConfig,
    #[serde(flatten)]
    pub inference: InferenceConfig,
    #[serde(flatten)]
    pub congestion: CongestionThresholds,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let non_negative = [
            ("max_accuracy_m", self.trace.max_accuracy_m),
            ("hysteresis_s", self.trace.hysteresis_s),
            ("merge_floor_s", self.trace.merge_floor_s),
            ("gap_cutoff_s", self.trace.gap_cutoff_s),
            ("entry_radius_m", self.inference.entry_radius_m),
            ("temporal_tolerance_s", self.inference.temporal_tolerance_s),
            ("spatial_accept_m", self.inference.spatial_accept_m),
        ];
        for (key, value) in non_negative {
            if !value.is_finite() || value < 0.0 {
                return Err(ConfigError::Range { key, value });
            }
        }
        let d = self.inference.transit_damping;
        if !(0.0..=1.0).contains(&d) {
            return Err(ConfigError::Range {
                key: "transit_damping",
                value: d,
            });
        }
        let c = &self.congestion;
        if !(0.0 <= c.heavy_below && c.heavy_below <= c.medium_below) {
            return Err(ConfigError::Range {
                key: "medium_below",
                value: c.medium_below,
            });
        }
        Ok(())
    }

    pub fn trace(&self) -> &TraceConfig {
        &self.trace
    }

    pub fn inference(&self) -> &InferenceConfig {
        &self.inference
    }
}
