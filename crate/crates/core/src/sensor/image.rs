//! Synthetic fingerprint rasters and the toy block-mean template.
//!
//! Images are procedural ridge fields, never real biometric data.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const FULL_SIDE: usize = 160;
pub const QUARTER_SIDE: usize = 80;
pub const FULL_DPI: u32 = 508;
pub const TEMPLATE_LEN: usize = 512;
const TEMPLATE_GRID: usize = 16;
const TEMPLATE_BLOCK: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Resolution {
    Full,
    Quarter,
}

impl Resolution {
    pub fn side(self) -> usize {
        match self {
            Resolution::Full => FULL_SIDE,
            Resolution::Quarter => QUARTER_SIDE,
        }
    }

    pub fn byte_len(self) -> usize {
        self.side() * self.side()
    }

    pub fn dpi(self) -> u32 {
        match self {
            Resolution::Full => FULL_DPI,
            Resolution::Quarter => FULL_DPI / 2,
        }
    }

    /// Resolution of a raster with the given pixel count, if it is one of ours.
    pub fn from_byte_len(len: usize) -> Option<Resolution> {
        [Resolution::Full, Resolution::Quarter]
            .into_iter()
            .find(|r| r.byte_len() == len)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("{width}x{height} raster needs {expected} bytes, got {actual}")]
    Size {
        width: usize,
        height: usize,
        expected: usize,
        actual: usize,
    },
    #[error("templates are extracted from full-resolution images only")]
    NotFullResolution,
}

/// 8-bit grayscale, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FingerprintImage {
    width: usize,
    height: usize,
    dpi: u32,
    pixels: Vec<u8>,
}

impl FingerprintImage {
    pub fn new(width: usize, height: usize, dpi: u32, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if pixels.len() != width * height {
            return Err(ImageError::Size {
                width,
                height,
                expected: width * height,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            dpi,
            pixels,
        })
    }

    /// Square raster at one of the sensor's native resolutions.
    pub fn from_raw(resolution: Resolution, pixels: Vec<u8>) -> Result<Self, ImageError> {
        let side = resolution.side();
        Self::new(side, side, resolution.dpi(), pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dpi(&self) -> u32 {
        self.dpi
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn resolution(&self) -> Option<Resolution> {
        Resolution::from_byte_len(self.pixels.len())
            .filter(|r| r.side() == self.width && r.side() == self.height)
    }

    /// 2x2 box average.
    pub fn downsample(&self) -> FingerprintImage {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut out = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let sum: u32 = [(0, 0), (1, 0), (0, 1), (1, 1)]
                    .iter()
                    .map(|&(dx, dy)| u32::from(self.pixel(2 * x + dx, 2 * y + dy)))
                    .sum();
                out.push(((sum + 2) / 4) as u8);
            }
        }
        FingerprintImage {
            width: w,
            height: h,
            dpi: self.dpi / 2,
            pixels: out,
        }
    }
}

/// One oriented sinusoid used to warp the ridge phase.
struct Warp {
    amplitude: f64,
    freq: f64,
    cos: f64,
    sin: f64,
    phase: f64,
}

/// Deterministic procedural fingerprint.
///
/// A loop-like ridge field around a seed-placed core, with its phase bent by
/// a few superposed oriented sinusoids and blended into a straight oriented
/// ridge train away from the core. Quarter resolution is the 2x2 average of
/// the full raster for the same seed.
pub fn generate_fingerprint(seed: u64, resolution: Resolution) -> FingerprintImage {
    let full = generate_full(seed);
    match resolution {
        Resolution::Full => full,
        Resolution::Quarter => full.downsample(),
    }
}

fn generate_full(seed: u64) -> FingerprintImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = FULL_SIDE as f64;
    let core_x = side / 2.0 + rng.gen_range(-15.0..15.0);
    let core_y = side / 2.0 + rng.gen_range(-20.0..10.0);
    // Ridge spacing of roughly 0.45 mm at 508 dpi.
    let period = rng.gen_range(8.0..10.5);
    let squash = rng.gen_range(1.1..1.5);
    let base_phase = rng.gen_range(0.0..TAU);
    let train_angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let train_phase = rng.gen_range(0.0..TAU);
    let warps: Vec<Warp> = (0..3)
        .map(|_| {
            let angle: f64 = rng.gen_range(0.0..TAU);
            Warp {
                amplitude: rng.gen_range(2.0..7.0),
                freq: 1.0 / rng.gen_range(25.0..70.0),
                cos: angle.cos(),
                sin: angle.sin(),
                phase: rng.gen_range(0.0..TAU),
            }
        })
        .collect();

    let (mask_cx, mask_cy) = (side / 2.0, side / 2.0 + 4.0);
    let (mask_rx, mask_ry) = (side * 0.44, side * 0.49);

    let mut pixels = Vec::with_capacity(FULL_SIDE * FULL_SIDE);
    for py in 0..FULL_SIDE {
        for px in 0..FULL_SIDE {
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            let ex = (x - mask_cx) / mask_rx;
            let ey = (y - mask_cy) / mask_ry;
            let edge = 1.0 - (ex * ex + ey * ey);
            if edge <= 0.0 {
                pixels.push(250);
                continue;
            }
            let warp: f64 = warps
                .iter()
                .map(|w| {
                    w.amplitude * (TAU * w.freq * (x * w.cos + y * w.sin) + w.phase).sin()
                })
                .sum();
            let dx = x - core_x;
            let dy = (y - core_y) * squash;
            let radius = (dx * dx + dy * dy).sqrt();
            let looped = (TAU * (radius + warp) / period + base_phase).sin();
            let along = x * train_angle.cos() + y * train_angle.sin();
            let train = (TAU * (along + warp) / period + train_phase).sin();
            let blend = (radius / (side * 0.45)).min(1.0);
            let ridge = looped * (1.0 - blend) + train * blend;
            // Contact pressure fades toward the edge of the pad.
            let contrast = (edge * 4.0).min(1.0);
            let value = 140.0 - 110.0 * ridge * contrast;
            pixels.push(value.round().clamp(0.0, 255.0) as u8);
        }
    }
    FingerprintImage::from_raw(Resolution::Full, pixels).expect("full raster size")
}

/// 512-byte feature vector: a 16x16 grid of 10x10 block means, each stored
/// as a little-endian u16 (row-major blocks).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Template(Vec<u8>);

impl Template {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn block(&self, bx: usize, by: usize) -> u16 {
        let i = 2 * (by * TEMPLATE_GRID + bx);
        u16::from_le_bytes([self.0[i], self.0[i + 1]])
    }
}

pub fn extract_template(image: &FingerprintImage) -> Result<Template, ImageError> {
    if image.resolution() != Some(Resolution::Full) {
        return Err(ImageError::NotFullResolution);
    }
    let mut out = Vec::with_capacity(TEMPLATE_LEN);
    for by in 0..TEMPLATE_GRID {
        for bx in 0..TEMPLATE_GRID {
            let rows = (by * TEMPLATE_BLOCK..(by + 1) * TEMPLATE_BLOCK)
                .map(|y| &image.pixels[y * FULL_SIDE + bx * TEMPLATE_BLOCK..][..TEMPLATE_BLOCK]);
            let sum: u32 = rows.flatten().map(|&p| u32::from(p)).sum();
            let mean = (sum / (TEMPLATE_BLOCK * TEMPLATE_BLOCK) as u32) as u16;
            out.extend_from_slice(&mean.to_le_bytes());
        }
    }
    Ok(Template(out))
}
