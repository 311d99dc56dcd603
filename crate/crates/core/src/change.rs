//! Frame-differencing change detector run on the camera node before it
//! decides to capture and transfer a full-resolution image.
//!
//! Each pixel pair `(ref, live)` is compared through the angle of the vector
//! `(ref, live)`: identical intensities sit on the diagonal, so the measure
//! `|pi/4 - atan2(live, ref)|` is 0 for no change and approaches `pi/4` as one
//! intensity dominates the other. A frame counts as changed when the fraction
//! of pixels whose measure exceeds the pixel threshold reaches the change
//! fraction threshold.

use std::f64::consts::FRAC_PI_4;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChangeError {
    #[error("frame size mismatch: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error("frame is {width}x{height} but has {len} pixels")]
    BadPixelCount { width: usize, height: usize, len: usize },
    #[error("invalid change parameters: {0}")]
    InvalidParams(String),
    #[error("pgm: {0}")]
    Pgm(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major grayscale frame with intensities in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayFrame {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl GrayFrame {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self, ChangeError> {
        if width * height != pixels.len() || pixels.is_empty() {
            return Err(ChangeError::BadPixelCount { width, height, len: pixels.len() });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self { width, height, pixels: vec![value; width * height] }
    }

    pub fn from_luma8(img: &image::GrayImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            pixels: img.as_raw().iter().map(|&p| f32::from(p)).collect(),
        }
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        let raw = self
            .pixels
            .iter()
            .map(|p| p.round().clamp(0.0, 255.0) as u8)
            .collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("dimensions match pixel count")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&p| f64::from(p)).sum::<f64>() / self.pixels.len() as f64
    }

    /// Parses an 8-bit binary (`P5`) or ASCII (`P2`) PGM.
    pub fn from_pgm_bytes(bytes: &[u8]) -> Result<Self, ChangeError> {
        let mut pos = 0usize;
        let mut next_token = |bytes: &[u8]| -> Result<String, ChangeError> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(ChangeError::Pgm("unexpected end of header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let magic = next_token(bytes)?;
        let parse = |s: String| {
            s.parse::<usize>()
                .map_err(|_| ChangeError::Pgm(format!("bad header field {s:?}")))
        };
        let width = parse(next_token(bytes)?)?;
        let height = parse(next_token(bytes)?)?;
        let maxval = parse(next_token(bytes)?)?;
        if maxval == 0 || maxval > 255 {
            return Err(ChangeError::Pgm(format!("unsupported maxval {maxval}")));
        }
        let scale = 255.0 / maxval as f32;
        let n = width * height;
        let pixels: Vec<f32> = match magic.as_str() {
            "P5" => {
                let data = bytes.get(pos + 1..pos + 1 + n).ok_or_else(|| {
                    ChangeError::Pgm("truncated raster".into())
                })?;
                data.iter().map(|&b| f32::from(b) * scale).collect()
            }
            "P2" => {
                let mut out = Vec::with_capacity(n);
                for _ in 0..n {
                    out.push(parse(next_token(bytes)?)? as f32 * scale);
                }
                out
            }
            other => return Err(ChangeError::Pgm(format!("unsupported magic {other:?}"))),
        };
        Self::new(width, height, pixels)
    }

    pub fn load_pgm(path: impl AsRef<Path>) -> Result<Self, ChangeError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_pgm_bytes(&bytes)
    }

    /// Binary `P5` encoding, rounding to 8 bits.
    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_luma8().into_raw());
        out
    }
}

/// Separable Gaussian kernel specification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlurKernel {
    pub size: usize,
    pub sigma: f64,
}

impl Default for BlurKernel {
    fn default() -> Self {
        Self { size: 5, sigma: 1.0 }
    }
}

impl BlurKernel {
    pub fn validate(&self) -> Result<(), ChangeError> {
        if self.size < 3 || self.size % 2 == 0 {
            return Err(ChangeError::InvalidParams(format!(
                "kernel size must be odd and >= 3, got {}",
                self.size
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(ChangeError::InvalidParams("kernel sigma must be positive".into()));
        }
        Ok(())
    }

    /// Normalised 1-D taps.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.size / 2) as i64;
        let w: Vec<f64> = (-r..=r)
            .map(|i| (-((i * i) as f64) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|v| v / total).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChangeParams {
    /// Per-pixel threshold on the angular measure, radians.
    pub pixel_threshold: f64,
    /// Fraction of pixels that must change for the frame to count as changed.
    pub change_fraction_threshold: f64,
    #[serde(default)]
    pub blur: BlurKernel,
}

impl Default for ChangeParams {
    fn default() -> Self {
        Self {
            pixel_threshold: 0.15,
            change_fraction_threshold: 0.02,
            blur: BlurKernel::default(),
        }
    }
}

impl ChangeParams {
    pub fn validate(&self) -> Result<(), ChangeError> {
        if !(self.pixel_threshold > 0.0 && self.pixel_threshold < FRAC_PI_4) {
            return Err(ChangeError::InvalidParams(format!(
                "pixel_threshold must be in (0, pi/4), got {}",
                self.pixel_threshold
            )));
        }
        if !(self.change_fraction_threshold > 0.0 && self.change_fraction_threshold < 1.0) {
            return Err(ChangeError::InvalidParams(format!(
                "change_fraction_threshold must be in (0, 1), got {}",
                self.change_fraction_threshold
            )));
        }
        self.blur.validate()
    }
}

/// Gaussian blur with edge replication at the borders.
pub fn gaussian_blur(frame: &GrayFrame, kernel: &BlurKernel) -> GrayFrame {
    let taps = kernel.taps();
    let r = (taps.len() / 2) as isize;
    let (w, h) = (frame.width as isize, frame.height as isize);
    let clamp = |v: isize, hi: isize| v.clamp(0, hi - 1) as usize;

    let mut tmp = vec![0f64; frame.pixels.len()];
    for y in 0..h {
        let row = y as usize * frame.width;
        for x in 0..w {
            let mut acc = 0.0;
            for (k, tap) in taps.iter().enumerate() {
                let sx = clamp(x + k as isize - r, w);
                acc += tap * f64::from(frame.pixels[row + sx]);
            }
            tmp[row + x as usize] = acc;
        }
    }
    let mut out = vec![0f32; frame.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, tap) in taps.iter().enumerate() {
                let sy = clamp(y + k as isize - r, h);
                acc += tap * tmp[sy * frame.width + x as usize];
            }
            out[y as usize * frame.width + x as usize] = acc as f32;
        }
    }
    GrayFrame { width: frame.width, height: frame.height, pixels: out }
}

/// Blurs a captured frame with the configured kernel.
pub fn preprocess(frame: &GrayFrame, params: &ChangeParams) -> GrayFrame {
    gaussian_blur(frame, &params.blur)
}

/// Angular change measure of a pixel pair, in `[0, pi/4]`.
///
/// Computed on the ordered pair `(min, max)` so the result is bit-identical
/// under swapping its arguments. `0/0` is defined as no change.
pub fn pixel_change_measure(a: f64, b: f64) -> f64 {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    if hi <= 0.0 {
        return 0.0;
    }
    (FRAC_PI_4 - lo.max(0.0).atan2(hi)).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChangeOutcome {
    pub changed: bool,
    pub changed_fraction: f64,
}

/// Compares two preprocessed frames of equal size.
pub fn detect_change(
    reference: &GrayFrame,
    live: &GrayFrame,
    params: &ChangeParams,
) -> Result<ChangeOutcome, ChangeError> {
    if reference.width != live.width || reference.height != live.height {
        return Err(ChangeError::SizeMismatch(
            reference.width,
            reference.height,
            live.width,
            live.height,
        ));
    }
    let changed_pixels = reference
        .pixels
        .iter()
        .zip(&live.pixels)
        .filter(|(&r, &l)| pixel_change_measure(f64::from(r), f64::from(l)) > params.pixel_threshold)
        .count();
    let changed_fraction = changed_pixels as f64 / reference.pixels.len() as f64;
    Ok(ChangeOutcome {
        changed: changed_fraction >= params.change_fraction_threshold,
        changed_fraction,
    })
}
