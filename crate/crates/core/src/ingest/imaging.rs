//! Rack splitting and detector letterboxing.

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::IngestError;
use crate::change::BlurKernel;
use crate::model::{BoxRect, Point};

/// Height every rack strip is normalised to.
pub const RACK_HEIGHT: u32 = 400;
/// Square input side of the detector.
pub const DETECTOR_SIDE: u32 = 640;

/// Row ranges `[start, end)` of `count` equal-height strips tiling `height`.
/// When the height does not divide evenly the first strips take one extra row.
pub fn strip_bounds(height: u32, count: u32) -> Result<Vec<(u32, u32)>, IngestError> {
    if count == 0 || count > height {
        return Err(IngestError::RackCount { count, height });
    }
    let (base, rem) = (height / count, height % count);
    let mut y = 0;
    Ok((0..count)
        .map(|i| {
            let h = base + u32::from(i < rem);
            let r = (y, y + h);
            y += h;
            r
        })
        .collect())
}

/// Splits a shelf image into `rack_count` horizontal strips and resizes each
/// to [`RACK_HEIGHT`] rows, keeping its aspect ratio.
pub fn split_racks(image: &RgbImage, rack_count: u32) -> Result<Vec<RgbImage>, IngestError> {
    let bounds = strip_bounds(image.height(), rack_count)?;
    Ok(bounds
        .into_iter()
        .map(|(y0, y1)| {
            let strip = imageops::crop_imm(image, 0, y0, image.width(), y1 - y0).to_image();
            let h = y1 - y0;
            if h == RACK_HEIGHT {
                return strip;
            }
            let w = ((f64::from(image.width()) * f64::from(RACK_HEIGHT) / f64::from(h)).round() as u32).max(1);
            imageops::resize(&strip, w, RACK_HEIGHT, FilterType::Triangle)
        })
        .collect())
}

/// Gaussian blur of an RGB image, borders replicated.
pub fn denoise(image: &RgbImage, kernel: &BlurKernel) -> RgbImage {
    let taps = kernel.taps();
    let r = (taps.len() / 2) as i64;
    let (w, h) = (i64::from(image.width()), i64::from(image.height()));
    let mut tmp = vec![[0f64; 3]; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0f64; 3];
            for (k, tap) in taps.iter().enumerate() {
                let sx = (x + k as i64 - r).clamp(0, w - 1);
                let p = image.get_pixel(sx as u32, y as u32);
                for c in 0..3 {
                    acc[c] += tap * f64::from(p[c]);
                }
            }
            tmp[(y * w + x) as usize] = acc;
        }
    }
    let mut out = RgbImage::new(image.width(), image.height());
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0f64; 3];
            for (k, tap) in taps.iter().enumerate() {
                let sy = (y + k as i64 - r).clamp(0, h - 1);
                let p = tmp[(sy * w + x) as usize];
                for c in 0..3 {
                    acc[c] += tap * p[c];
                }
            }
            out.put_pixel(
                x as u32,
                y as u32,
                Rgb(acc.map(|v| v.round().clamp(0.0, 255.0) as u8)),
            );
        }
    }
    out
}

/// Affine map from source (rack) pixels to detector-input pixels:
/// `dst = src * scale + offset` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LetterboxTransform {
    pub scale_x: f64,
    pub scale_y: f64,
    pub offset_x: f64,
    pub offset_y: f64,
}

impl LetterboxTransform {
    pub fn to_detector(&self, p: Point) -> Point {
        Point::new(p.x * self.scale_x + self.offset_x, p.y * self.scale_y + self.offset_y)
    }

    pub fn to_source(&self, p: Point) -> Point {
        Point::new((p.x - self.offset_x) / self.scale_x, (p.y - self.offset_y) / self.scale_y)
    }

    pub fn to_detector_rect(&self, r: &BoxRect) -> BoxRect {
        BoxRect::new(self.to_detector(r.tl), self.to_detector(r.br))
    }

    pub fn to_source_rect(&self, r: &BoxRect) -> BoxRect {
        BoxRect::new(self.to_source(r.tl), self.to_source(r.br))
    }
}

#[derive(Debug, Clone)]
pub struct Letterboxed {
    pub image: RgbImage,
    pub transform: LetterboxTransform,
}

/// Denoises, scales the longer side to `side` and pads the other axis
/// symmetrically (extra row/column goes to the bottom/right) with black.
pub fn pad_for_detector(image: &RgbImage, side: u32) -> Letterboxed {
    pad_for_detector_with(image, side, &BlurKernel::default())
}

/// Geometry of the letterbox for a `width x height` source and a square
/// detector input of `side` pixels.
pub fn letterbox_transform(width: u32, height: u32, side: u32) -> LetterboxTransform {
    let longest = width.max(height);
    let nw = ((f64::from(width) * f64::from(side) / f64::from(longest)).round() as u32).clamp(1, side);
    let nh = ((f64::from(height) * f64::from(side) / f64::from(longest)).round() as u32).clamp(1, side);
    LetterboxTransform {
        scale_x: f64::from(nw) / f64::from(width),
        scale_y: f64::from(nh) / f64::from(height),
        offset_x: f64::from((side - nw) / 2),
        offset_y: f64::from((side - nh) / 2),
    }
}

pub fn pad_for_detector_with(image: &RgbImage, side: u32, kernel: &BlurKernel) -> Letterboxed {
    let (w, h) = (image.width(), image.height());
    let transform = letterbox_transform(w, h, side);
    let nw = (transform.scale_x * f64::from(w)).round() as u32;
    let nh = (transform.scale_y * f64::from(h)).round() as u32;
    let clean = denoise(image, kernel);
    let scaled = if (nw, nh) == (w, h) {
        clean
    } else {
        imageops::resize(&clean, nw, nh, FilterType::Triangle)
    };
    let mut canvas = RgbImage::new(side, side);
    imageops::replace(&mut canvas, &scaled, transform.offset_x as i64, transform.offset_y as i64);
    Letterboxed { image: canvas, transform }
}
