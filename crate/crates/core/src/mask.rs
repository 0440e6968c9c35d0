//! Binary masks, pixel metrics, and 8-bit grayscale raster I/O.

use std::path::Path;

use image::{GrayImage, ImageFormat, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major binary mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask2D {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask2D {
    pub fn new(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "mask dims must be positive");
        Mask2D {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(Error::DimMismatch(format!(
                "{} bits for a {height}x{width} mask",
                bits.len()
            )));
        }
        Ok(Mask2D { height, width, bits })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Mask2D::new(height, width);
        for r in 0..height {
            for c in 0..width {
                m.bits[r * width + c] = f(r, c);
            }
        }
        m
    }

    /// Foreground where `values[i] >= threshold` (strict `>` is not used so a
    /// probability of exactly 0.5 counts as foreground).
    pub fn threshold(height: usize, width: usize, values: &[f64], threshold: f64) -> Result<Self> {
        Self::from_bits(height, width, values.iter().map(|&v| v >= threshold).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn check_same_dims(&self, other: &Mask2D) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimMismatch(format!(
                "masks {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Mask2D, f: impl Fn(bool, bool) -> bool) -> Result<Mask2D> {
        self.check_same_dims(other)?;
        Ok(Mask2D {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn and(&self, other: &Mask2D) -> Result<Mask2D> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn or(&self, other: &Mask2D) -> Result<Mask2D> {
        self.zip_with(other, |a, b| a || b)
    }

    /// Pixels set here but not in `other`.
    pub fn and_not(&self, other: &Mask2D) -> Result<Mask2D> {
        self.zip_with(other, |a, b| a && !b)
    }

    /// 0.0 / 1.0 values, row-major.
    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as u8 as f64).collect()
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    /// Any nonzero pixel reads as foreground.
    pub fn from_gray(img: &GrayImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_bits(h, w, img.pixels().map(|p| p.0[0] != 0).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_gray(&load_gray(path)?)
    }

    /// Writes 0/255 8-bit grayscale; `.pgm` selects PGM, anything else PNG.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_gray(&self.to_gray(), path)
    }

    pub fn to_png_bytes(&self) -> Vec<u8> {
        encode_png(&self.to_gray())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_gray(&decode_gray(bytes)?)
    }
}

/// Row-major grayscale image with intensities in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrayF64 {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GrayF64 {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::DimMismatch(format!(
                "{} values for a {height}x{width} image",
                data.len()
            )));
        }
        Ok(GrayF64 { height, width, data })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        GrayF64 {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        }
    }

    /// Quantizes to 8 bits (round to nearest, clamped).
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.get(y as usize, x as usize).clamp(0.0, 1.0);
            Luma([(v * 255.0).round() as u8])
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_gray(&load_gray(path)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_gray(&self.to_gray(), path)
    }

    pub fn to_png_bytes(&self) -> Vec<u8> {
        encode_png(&self.to_gray())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(Self::from_gray(&decode_gray(bytes)?))
    }
}

pub(crate) fn load_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })?;
    Ok(img.into_luma8())
}

pub(crate) fn decode_gray(bytes: &[u8]) -> Result<GrayImage> {
    Ok(image::load_from_memory(bytes)?.into_luma8())
}

pub(crate) fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    let is_pgm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    let format = if is_pgm { ImageFormat::Pnm } else { ImageFormat::Png };
    img.save_with_format(path, format).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}

pub(crate) fn encode_png(img: &GrayImage) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .expect("in-memory PNG encoding");
    out.into_inner()
}

/// Confusion counts of a prediction against ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn of(pred: &Mask2D, gt: &Mask2D) -> Result<Self> {
        pred.check_same_dims(gt)?;
        let mut c = Confusion::default();
        c.add_bits(pred.bits(), gt.bits());
        Ok(c)
    }

    pub fn add_bits(&mut self, pred: &[bool], gt: &[bool]) {
        for (&p, &g) in pred.iter().zip(gt) {
            match (p, g) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, true) => self.fn_ += 1,
                (false, false) => self.tn += 1,
            }
        }
    }

    pub fn metrics(&self) -> MetricSet {
        let ratio = |num: u64, den: u64| {
            if den == 0 {
                1.0
            } else {
                num as f64 / den as f64
            }
        };
        MetricSet {
            iou: ratio(self.tp, self.tp + self.fp + self.fn_),
            dsc: ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_),
            sen: ratio(self.tp, self.tp + self.fn_),
            ppv: ratio(self.tp, self.tp + self.fp),
        }
    }
}

/// Overlap metrics. A zero denominator means both sides of the ratio are
/// vacuously empty and yields 1.0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub iou: f64,
    pub dsc: f64,
    pub sen: f64,
    pub ppv: f64,
}

/// Intersection over union; 1.0 when both masks are empty.
pub fn iou(pred: &Mask2D, gt: &Mask2D) -> Result<f64> {
    Ok(Confusion::of(pred, gt)?.metrics().iou)
}

pub fn metrics(pred: &Mask2D, gt: &Mask2D) -> Result<MetricSet> {
    Ok(Confusion::of(pred, gt)?.metrics())
}
