//! Pipeline configuration file (TOML).
//!
//! ```toml
//! [change]
//! pixel_threshold = 0.15
//! change_fraction_threshold = 0.02
//!
//! [search]
//! nms_iou = 0.5
//! alpha_decay = 0.75
//! ratio = { base = 0.95, slope = 0.2 }
//!
//! [providers]
//! kind = "oracle"
//! dir = "oracle"
//! descriptor_dim = 32
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::change::ChangeParams;
use crate::detect::{DetectorProvider, FeatureProvider, OracleDetector, OracleFeatures};
use crate::search::SearchParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderConfig {
    /// Precomputed boxes and keypoints read from `<dir>/<rack key>.{boxes,features}.json`.
    Oracle { dir: PathBuf, descriptor_dim: usize },
    /// External inference and extraction processes.
    External {
        detector_program: PathBuf,
        #[serde(default)]
        detector_args: Vec<String>,
        model: PathBuf,
        #[serde(default = "default_input_side")]
        input_side: u32,
        feature_program: PathBuf,
        #[serde(default)]
        feature_args: Vec<String>,
        descriptor_dim: usize,
    },
}

fn default_input_side() -> u32 {
    crate::ingest::DETECTOR_SIDE
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig::Oracle { dir: PathBuf::from("oracle"), descriptor_dim: 32 }
    }
}

pub type Providers = (Box<dyn DetectorProvider>, Box<dyn FeatureProvider>);

impl ProviderConfig {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && p.components().count() > 0 {
                *p = base.join(&*p);
            }
        };
        match self {
            ProviderConfig::Oracle { dir, .. } => fix(dir),
            ProviderConfig::External { model, .. } => fix(model),
        }
    }

    pub fn build(&self) -> Result<Providers, ConfigError> {
        match self {
            ProviderConfig::Oracle { dir, descriptor_dim } => Ok((
                Box::new(OracleDetector::new(dir)),
                Box::new(OracleFeatures::new(dir, *descriptor_dim)),
            )),
            #[cfg(feature = "external-providers")]
            ProviderConfig::External {
                detector_program,
                detector_args,
                model,
                input_side,
                feature_program,
                feature_args,
                descriptor_dim,
            } => Ok((
                Box::new(crate::detect::providers::ExternalDetector {
                    program: detector_program.clone(),
                    args: detector_args.clone(),
                    model: model.clone(),
                    input_side: *input_side,
                }),
                Box::new(crate::detect::providers::ExternalFeatures {
                    program: feature_program.clone(),
                    args: feature_args.clone(),
                    dim: *descriptor_dim,
                }),
            )),
            #[cfg(not(feature = "external-providers"))]
            ProviderConfig::External { .. } => Err(ConfigError::Invalid(
                "external providers need the `external-providers` feature".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub change: ChangeParams,
    pub search: SearchParams,
    pub providers: ProviderConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Reads the file; relative provider paths are taken from its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|source| ConfigError::Parse { path: path.to_path_buf(), source })?;
        cfg.providers.resolve(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.change.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let s = &self.search;
        if !(s.alpha_decay > 0.0 && s.alpha_decay < 1.0) {
            return Err(ConfigError::Invalid(format!("alpha_decay must be in (0, 1), got {}", s.alpha_decay)));
        }
        if s.stall_limit == 0 {
            return Err(ConfigError::Invalid("stall_limit must be positive".into()));
        }
        if !(s.nms_iou > 0.0 && s.nms_iou <= 1.0) {
            return Err(ConfigError::Invalid(format!("nms_iou must be in (0, 1], got {}", s.nms_iou)));
        }
        if s.roi_expand < 0.0 {
            return Err(ConfigError::Invalid("roi_expand must be non-negative".into()));
        }
        Ok(())
    }
}
