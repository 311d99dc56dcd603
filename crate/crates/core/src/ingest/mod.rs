//! Shelf-image ingestion: store configuration, rack splitting and the
//! per-shelf processing job whose records the HTTP service persists.

pub mod imaging;
pub mod store;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::AlignmentReport;
use crate::detect::{DetectorProvider, FeatureProvider, RackImage};
use crate::model::{Catalog, Detection, ModelError, PlanogramSeq};
use crate::search::{run_search, IterationRecord, SearchError, SearchParams};

pub use imaging::{pad_for_detector, split_racks, LetterboxTransform, DETECTOR_SIDE, RACK_HEIGHT};
pub use store::{ContentHash, ObjectStore, ReportLog};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot split {height} rows into {count} racks")]
    RackCount { count: u32, height: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("object {0} not found")]
    NotFound(String),
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("unknown device {0:?}")]
    UnknownDevice(String),
    #[error("device {device:?}: {message}")]
    InvalidDevice { device: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("rack {rack}: {source}")]
    Search { rack: usize, source: SearchError },
}

/// Layout of one camera's view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub rack_count: u32,
    /// Reference planogram of each rack, top to bottom.
    pub racks: Vec<PlanogramSeq>,
}

/// Per-store settings: the shared upload token, the product catalog and the
/// registered devices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreConfig {
    pub token: String,
    /// Catalog JSON, relative paths resolved against the config file.
    pub catalog: PathBuf,
    #[serde(default)]
    pub devices: BTreeMap<String, DeviceConfig>,
}

impl StoreConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, IngestError> {
        toml::from_str(text).map_err(|e| IngestError::Config {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Reads the config and makes the catalog path absolute.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, IngestError> {
        let path = path.as_ref();
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?, path)?;
        if cfg.catalog.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.catalog = dir.join(&cfg.catalog);
            }
        }
        Ok(cfg)
    }

    pub fn device(&self, id: &str) -> Result<&DeviceConfig, IngestError> {
        self.devices.get(id).ok_or_else(|| IngestError::UnknownDevice(id.to_string()))
    }

    /// Checks every device layout against the catalog.
    pub fn validate(&self, catalog: &Catalog) -> Result<(), IngestError> {
        for (id, dev) in &self.devices {
            let bad = |message: String| IngestError::InvalidDevice { device: id.clone(), message };
            if dev.rack_count == 0 {
                return Err(bad("rack_count must be at least 1".into()));
            }
            if dev.racks.len() != dev.rack_count as usize {
                return Err(bad(format!(
                    "{} reference planograms for {} racks",
                    dev.racks.len(),
                    dev.rack_count
                )));
            }
            for (i, seq) in dev.racks.iter().enumerate() {
                seq.validate().map_err(|e| bad(format!("rack {i}: {e}")))?;
                for g in seq.iter() {
                    let label = g.label.product().unwrap_or_default();
                    catalog.require(label).map_err(|e| bad(format!("rack {i}: {e}")))?;
                }
            }
        }
        Ok(())
    }
}

/// Decodes an uploaded image. JPEG streams must end their last scan with an
/// end-of-image marker; the decoder alone would pad a truncated scan.
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage, IngestError> {
    if image::guess_format(bytes).ok() == Some(image::ImageFormat::Jpeg) {
        let last = |m: u8| bytes.windows(2).rposition(|w| w == [0xFF, m]);
        match (last(0xDA), last(0xD9)) {
            (Some(sos), Some(eoi)) if eoi > sos => {}
            _ => return Err(IngestError::Decode("truncated JPEG stream".into())),
        }
    }
    image::load_from_memory(bytes)
        .map(|img| img.to_rgb8())
        .map_err(|e| IngestError::Decode(e.to_string()))
}

/// Provider lookup key of rack `index` of a stored shelf image.
pub fn rack_key(hash: &ContentHash, index: usize) -> String {
    format!("{hash}/rack{index}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RackReport {
    pub index: usize,
    pub key: String,
    pub width: u32,
    pub height: u32,
    pub alignment: AlignmentReport,
    pub detections: Vec<Detection>,
    pub trace: Vec<IterationRecord>,
}

/// Stored outcome of one shelf upload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub image: ContentHash,
    pub device_id: String,
    /// Seconds since the Unix epoch.
    pub received_at: u64,
    pub matched: u64,
    pub required: u64,
    pub racks: Vec<RackReport>,
}

impl JobRecord {
    /// Compliance ratio over all racks of the shelf.
    pub fn mu(&self) -> f64 {
        if self.required == 0 {
            1.0
        } else {
            self.matched as f64 / self.required as f64
        }
    }
}

/// Splits a decoded shelf image and runs the search on every rack.
pub fn process_shelf(
    image: &RgbImage,
    hash: &ContentHash,
    device: &DeviceConfig,
    catalog: &Catalog,
    detector: &dyn DetectorProvider,
    features: &dyn FeatureProvider,
    params: &SearchParams,
) -> Result<Vec<RackReport>, IngestError> {
    let racks = split_racks(image, device.rack_count)?;
    racks
        .into_iter()
        .zip(&device.racks)
        .enumerate()
        .map(|(index, (img, reference))| {
            let rack = RackImage::new(rack_key(hash, index), img);
            let outcome = run_search(&rack, reference, catalog, detector, features, params)
                .map_err(|source| IngestError::Search { rack: index, source })?;
            Ok(RackReport {
                index,
                key: rack.key,
                width: rack.image.width(),
                height: rack.image.height(),
                alignment: outcome.result.report(),
                detections: outcome.detections,
                trace: outcome.trace,
            })
        })
        .collect()
}

/// Builds the job record for a processed shelf.
pub fn job_record(
    hash: &ContentHash,
    device_id: &str,
    received_at: u64,
    racks: Vec<RackReport>,
) -> JobRecord {
    let matched = racks.iter().map(|r| r.alignment.matched).sum();
    let required = racks.iter().map(|r| r.alignment.required).sum();
    JobRecord {
        job_id: hash.job_id(),
        image: hash.clone(),
        device_id: device_id.to_string(),
        received_at,
        matched,
        required,
        racks,
    }
}
