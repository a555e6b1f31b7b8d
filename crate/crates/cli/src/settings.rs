//! Config file plus environment/flag overrides.
//!
//! The config file is flat TOML. Besides the pipeline keys it may set
//! `store`, `feed`, `key_file` and `listen`; relative paths resolve against
//! the file's directory. Flags and `MOBILITY_*` variables win over the file.

use std::path::{Path, PathBuf};

use mobility_core::config::PipelineConfig;
use serde::Deserialize;

use crate::error::{io, CliError};

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";

#[derive(Debug, Default, Deserialize)]
struct ConfigFile {
    store: Option<PathBuf>,
    feed: Option<PathBuf>,
    key_file: Option<PathBuf>,
    listen: Option<String>,
    #[serde(flatten)]
    pipeline: PipelineConfig,
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub store: Option<PathBuf>,
    pub feed: Option<PathBuf>,
    pub key_file: Option<PathBuf>,
    pub listen: String,
    pub pipeline: PipelineConfig,
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub feed: Option<PathBuf>,
    pub key_file: Option<PathBuf>,
    pub listen: Option<String>,
}

impl Settings {
    pub fn resolve(o: &Overrides) -> Result<Self, CliError> {
        let (file, base) = match &o.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
                let file: ConfigFile = toml::from_str(&text).map_err(|e| CliError::user("config", e.to_string()))?;
                (file, path.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (ConfigFile::default(), PathBuf::new()),
        };
        file.pipeline.validate()?;
        let rel = |p: Option<PathBuf>| p.map(|p| if p.is_absolute() { p } else { base.join(p) });
        Ok(Self {
            store: o.store.clone().or(rel(file.store)),
            feed: o.feed.clone().or(rel(file.feed)),
            key_file: o.key_file.clone().or(rel(file.key_file)),
            listen: o.listen.clone().or(file.listen).unwrap_or_else(|| DEFAULT_LISTEN.to_string()),
            pipeline: file.pipeline,
        })
    }

    pub fn store_dir(&self) -> Result<&Path, CliError> {
        self.store
            .as_deref()
            .ok_or_else(|| CliError::user("config", "no store directory: pass --store or set MOBILITY_STORE"))
    }

    /// Explicit feed directory, else the copy kept by `gtfs load`.
    pub fn feed_dir(&self) -> Option<PathBuf> {
        self.feed
            .clone()
            .or_else(|| self.store.as_ref().map(|s| s.join(crate::commands::STORE_FEED_DIR)))
            .filter(|d| d.is_dir())
    }
}
