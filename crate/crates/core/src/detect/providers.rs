//! Pluggable sources of candidate boxes and local features.
//!
//! The pipeline only sees the two traits. File-backed oracles read
//! precomputed outputs keyed by rack image; the optional external adapters
//! (feature `external-providers`) run a separate inference or extraction
//! process and read its JSON output.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::imaging::pad_for_detector;
use crate::model::{CandidateBox, LocalFeature};

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("no precomputed output for image {0:?}")]
    Missing(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: serde_json::Error },
    #[error("external process failed: {0}")]
    External(String),
}

/// A rack image handed to the providers. `key` identifies the image for
/// providers that look up precomputed results.
#[derive(Debug, Clone)]
pub struct RackImage {
    pub key: String,
    pub image: image::RgbImage,
}

impl RackImage {
    pub fn new(key: impl Into<String>, image: image::RgbImage) -> Self {
        Self { key: key.into(), image }
    }

    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }
}

pub trait DetectorProvider: Send + Sync {
    /// Side of the square input the detector expects. `None` means the
    /// provider works on rack pixels directly and needs no letterboxing.
    fn input_side(&self) -> Option<u32>;

    /// Candidate boxes in the coordinates of the image passed in.
    fn detect(&self, image: &RackImage) -> Result<Vec<CandidateBox>, ProviderError>;
}

pub trait FeatureProvider: Send + Sync {
    fn descriptor_dim(&self) -> usize;

    /// Keypoints in rack pixel coordinates.
    fn extract(&self, image: &RackImage) -> Result<Vec<LocalFeature>, ProviderError>;
}

/// Runs a detector on a rack, letterboxing first when the detector asks for
/// a square input, and returns boxes in rack coordinates.
pub fn detect_in_rack(
    detector: &dyn DetectorProvider,
    rack: &RackImage,
) -> Result<Vec<CandidateBox>, ProviderError> {
    let Some(side) = detector.input_side() else {
        return detector.detect(rack);
    };
    let padded = pad_for_detector(&rack.image, side);
    let boxes = detector.detect(&RackImage::new(rack.key.clone(), padded.image))?;
    Ok(boxes
        .into_iter()
        .map(|b| {
            let rect = padded.transform.to_source_rect(&b.rect());
            let c = rect.center();
            CandidateBox::new(b.confidence, c.x, c.y, rect.width(), rect.height())
        })
        .collect())
}

/// On-disk record of precomputed detector output for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxFile {
    pub image: String,
    pub boxes: Vec<CandidateBox>,
}

/// On-disk record of precomputed keypoints for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFile {
    pub image: String,
    pub features: Vec<LocalFeature>,
}

pub fn box_file_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("{key}.boxes.json"))
}

pub fn feature_file_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("{key}.features.json"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, key: &str) -> Result<T, ProviderError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            ProviderError::Missing(key.to_string())
        } else {
            ProviderError::Io { path: path.to_path_buf(), source: e }
        }
    })?;
    serde_json::from_str(&text).map_err(|e| ProviderError::Format { path: path.to_path_buf(), source: e })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ProviderError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| ProviderError::Io { path: parent.to_path_buf(), source: e })?;
    }
    let text = serde_json::to_string(value)
        .map_err(|e| ProviderError::Format { path: path.to_path_buf(), source: e })?;
    std::fs::write(path, text).map_err(|e| ProviderError::Io { path: path.to_path_buf(), source: e })
}

/// Reads `<dir>/<key>.boxes.json`.
#[derive(Debug, Clone)]
pub struct OracleDetector {
    dir: PathBuf,
}

impl OracleDetector {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

impl DetectorProvider for OracleDetector {
    fn input_side(&self) -> Option<u32> {
        None
    }

    fn detect(&self, image: &RackImage) -> Result<Vec<CandidateBox>, ProviderError> {
        let file: BoxFile = read_json(&box_file_path(&self.dir, &image.key), &image.key)?;
        Ok(file.boxes)
    }
}

/// Reads `<dir>/<key>.features.json`.
#[derive(Debug, Clone)]
pub struct OracleFeatures {
    dir: PathBuf,
    dim: usize,
}

impl OracleFeatures {
    pub fn new(dir: impl Into<PathBuf>, descriptor_dim: usize) -> Self {
        Self { dir: dir.into(), dim: descriptor_dim }
    }
}

impl FeatureProvider for OracleFeatures {
    fn descriptor_dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, image: &RackImage) -> Result<Vec<LocalFeature>, ProviderError> {
        let file: FeatureFile = read_json(&feature_file_path(&self.dir, &image.key), &image.key)?;
        Ok(file.features)
    }
}

/// In-memory detector output keyed by image.
#[derive(Debug, Clone, Default)]
pub struct StaticDetector {
    pub boxes: HashMap<String, Vec<CandidateBox>>,
}

impl StaticDetector {
    pub fn single(key: impl Into<String>, boxes: Vec<CandidateBox>) -> Self {
        Self { boxes: HashMap::from([(key.into(), boxes)]) }
    }
}

impl DetectorProvider for StaticDetector {
    fn input_side(&self) -> Option<u32> {
        None
    }

    fn detect(&self, image: &RackImage) -> Result<Vec<CandidateBox>, ProviderError> {
        self.boxes
            .get(&image.key)
            .cloned()
            .ok_or_else(|| ProviderError::Missing(image.key.clone()))
    }
}

/// In-memory keypoints keyed by image.
#[derive(Debug, Clone, Default)]
pub struct StaticFeatures {
    pub dim: usize,
    pub features: HashMap<String, Vec<LocalFeature>>,
}

impl StaticFeatures {
    pub fn single(key: impl Into<String>, dim: usize, features: Vec<LocalFeature>) -> Self {
        Self { dim, features: HashMap::from([(key.into(), features)]) }
    }
}

impl FeatureProvider for StaticFeatures {
    fn descriptor_dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, image: &RackImage) -> Result<Vec<LocalFeature>, ProviderError> {
        self.features
            .get(&image.key)
            .cloned()
            .ok_or_else(|| ProviderError::Missing(image.key.clone()))
    }
}

#[cfg(feature = "external-providers")]
pub use external::{ExternalDetector, ExternalFeatures};

#[cfg(feature = "external-providers")]
mod external {
    //! Process adapters. The child is invoked as
    //! `<program> <args..> --model <model> --image <png>` (the model flag is
    //! omitted for feature extractors without one) and must print a JSON array
    //! of `{cs,cx,cy,w,h}` records (detector) or `{x,y,descriptor}` records
    //! (extractor) on stdout.

    use std::path::PathBuf;
    use std::process::Command;

    use super::{DetectorProvider, FeatureProvider, ProviderError, RackImage};
    use crate::model::{CandidateBox, LocalFeature};

    fn run_child<T: serde::de::DeserializeOwned>(
        program: &PathBuf,
        args: &[String],
        model: Option<&PathBuf>,
        image: &RackImage,
    ) -> Result<T, ProviderError> {
        let dir = std::env::temp_dir().join(format!("planogram-ext-{}", std::process::id()));
        std::fs::create_dir_all(&dir).map_err(|e| ProviderError::Io { path: dir.clone(), source: e })?;
        let png = dir.join(format!("{}.png", image.key.replace('/', "_")));
        image
            .image
            .save(&png)
            .map_err(|e| ProviderError::External(format!("writing {}: {e}", png.display())))?;
        let mut cmd = Command::new(program);
        cmd.args(args);
        if let Some(m) = model {
            cmd.arg("--model").arg(m);
        }
        cmd.arg("--image").arg(&png);
        let out = cmd
            .output()
            .map_err(|e| ProviderError::External(format!("spawning {}: {e}", program.display())))?;
        let _ = std::fs::remove_file(&png);
        if !out.status.success() {
            return Err(ProviderError::External(format!(
                "{} exited with {}: {}",
                program.display(),
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        serde_json::from_slice(&out.stdout)
            .map_err(|e| ProviderError::External(format!("parsing output of {}: {e}", program.display())))
    }

    /// Runs an external detector over an exported network file (e.g. ONNX).
    #[derive(Debug, Clone)]
    pub struct ExternalDetector {
        pub program: PathBuf,
        pub args: Vec<String>,
        pub model: PathBuf,
        pub input_side: u32,
    }

    impl DetectorProvider for ExternalDetector {
        fn input_side(&self) -> Option<u32> {
            Some(self.input_side)
        }

        fn detect(&self, image: &RackImage) -> Result<Vec<CandidateBox>, ProviderError> {
            run_child(&self.program, &self.args, Some(&self.model), image)
        }
    }

    #[derive(Debug, Clone)]
    pub struct ExternalFeatures {
        pub program: PathBuf,
        pub args: Vec<String>,
        pub dim: usize,
    }

    impl FeatureProvider for ExternalFeatures {
        fn descriptor_dim(&self) -> usize {
            self.dim
        }

        fn extract(&self, image: &RackImage) -> Result<Vec<LocalFeature>, ProviderError> {
            run_child(&self.program, &self.args, None, image)
        }
    }
}
