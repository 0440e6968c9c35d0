use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{GrayF64, Mask2D};

/// A stack of equally sized gray slices.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub slices: Vec<GrayF64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeDims {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

/// On-disk layout: a directory of ordered PNG slices, or one raw u8 blob
/// with a JSON sidecar of the same stem.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeLayout {
    PngDir,
    Raw,
}

impl VolumeLayout {
    pub fn of(path: &Path) -> Self {
        if path.is_dir() || path.extension().is_none() {
            VolumeLayout::PngDir
        } else {
            VolumeLayout::Raw
        }
    }
}

pub fn slice_file_name(index: usize) -> String {
    format!("{index:04}.png")
}

pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

impl Volume3D {
    pub fn new(slices: Vec<GrayF64>) -> Result<Self> {
        let first = slices.first().ok_or(Error::EmptyInput("volume slices"))?;
        let (height, width) = (first.height, first.width);
        if let Some((k, s)) = slices
            .iter()
            .enumerate()
            .find(|(_, s)| (s.height, s.width) != (height, width))
        {
            return Err(Error::DimMismatch(format!(
                "slice {k} is {}x{}, slice 0 is {height}x{width}",
                s.height, s.width
            )));
        }
        Ok(Volume3D {
            depth: slices.len(),
            height,
            width,
            slices,
        })
    }

    pub fn dims(&self) -> VolumeDims {
        VolumeDims {
            depth: self.depth,
            height: self.height,
            width: self.width,
        }
    }

    /// Reverses slice order.
    pub fn reversed(&self) -> Self {
        let mut v = self.clone();
        v.slices.reverse();
        v
    }

    pub fn load(path: &Path) -> Result<Self> {
        match VolumeLayout::of(path) {
            VolumeLayout::PngDir => {
                let slices = png_files(path)?
                    .iter()
                    .map(|p| GrayF64::load(p))
                    .collect::<Result<Vec<_>>>()?;
                Self::new(slices)
            }
            VolumeLayout::Raw => {
                let (dims, bytes) = read_raw(path)?;
                let plane = dims.height * dims.width;
                Self::new(
                    bytes
                        .chunks(plane)
                        .map(|c| GrayF64::new(dims.height, dims.width, c.iter().map(|&b| b as f64 / 255.0).collect()))
                        .collect::<Result<_>>()?,
                )
            }
        }
    }

    pub fn save(&self, path: &Path, layout: VolumeLayout) -> Result<()> {
        match layout {
            VolumeLayout::PngDir => {
                fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
                for (k, s) in self.slices.iter().enumerate() {
                    s.save(&path.join(slice_file_name(k)))?;
                }
                Ok(())
            }
            VolumeLayout::Raw => {
                let bytes = self
                    .slices
                    .iter()
                    .flat_map(|s| s.to_gray().into_raw())
                    .collect::<Vec<u8>>();
                write_raw(path, self.dims(), &bytes)
            }
        }
    }
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().and_then(|e| e.to_str()) == Some("png") {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::MalformedDataset(format!("{}: no PNG slices", dir.display())));
    }
    Ok(files)
}

fn read_raw(path: &Path) -> Result<(VolumeDims, Vec<u8>)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let dims: VolumeDims = serde_json::from_str(&text)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n = dims.depth * dims.height * dims.width;
    if n == 0 || bytes.len() != n {
        return Err(Error::MalformedDataset(format!(
            "{}: {} bytes for {}x{}x{}",
            path.display(),
            bytes.len(),
            dims.depth,
            dims.height,
            dims.width
        )));
    }
    Ok((dims, bytes))
}

fn write_raw(path: &Path, dims: VolumeDims, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string(&dims)?).map_err(|e| Error::io(&side, e))
}

/// Loads a stack of masks stored in either volume layout.
pub fn load_masks(path: &Path) -> Result<Vec<Mask2D>> {
    match VolumeLayout::of(path) {
        VolumeLayout::PngDir => png_files(path)?.iter().map(|p| Mask2D::load(p)).collect(),
        VolumeLayout::Raw => {
            let (dims, bytes) = read_raw(path)?;
            bytes
                .chunks(dims.height * dims.width)
                .map(|c| Mask2D::from_bits(dims.height, dims.width, c.iter().map(|&b| b >= 128).collect()))
                .collect()
        }
    }
}

pub fn save_masks(path: &Path, masks: &[Mask2D], layout: VolumeLayout) -> Result<()> {
    let first = masks.first().ok_or(Error::EmptyInput("mask slices"))?;
    let (height, width) = first.dims();
    if masks.iter().any(|m| m.dims() != (height, width)) {
        return Err(Error::DimMismatch("mask slices differ in size".into()));
    }
    match layout {
        VolumeLayout::PngDir => {
            fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
            for (k, m) in masks.iter().enumerate() {
                m.save(&path.join(slice_file_name(k)))?;
            }
            Ok(())
        }
        VolumeLayout::Raw => {
            let bytes: Vec<u8> = masks
                .iter()
                .flat_map(|m| m.bits().iter().map(|&b| if b { 255 } else { 0 }))
                .collect();
            let dims = VolumeDims {
                depth: masks.len(),
                height,
                width,
            };
            write_raw(path, dims, &bytes)
        }
    }
}

pub const VOLUME_NOISE_STD: f64 = 0.05;

/// One ellipse whose centre drifts, axes swell towards the middle slice and
/// orientation turns slowly through the stack. Returns the volume and its
/// ground truth.
pub fn gen_drifting_volume(seed: u64, depth: usize, height: usize, width: usize) -> Result<(Volume3D, Vec<Mask2D>)> {
    if depth == 0 || height < 16 || width < 16 {
        return Err(Error::InvalidConfig(format!(
            "drifting volume needs depth >= 1 and sides >= 16, got {depth}x{height}x{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = height.min(width) as f64;
    let (h, w) = (height as f64, width as f64);
    let a_mid = rng.random_range(0.16..0.28) * s;
    let b_mid = rng.random_range(0.11..0.2) * s;
    let drift_r = rng.random_range(-0.15..0.15) * s;
    let drift_c = rng.random_range(-0.15..0.15) * s;
    let c0 = (
        h / 2.0 + rng.random_range(-0.08..0.08) * s,
        w / 2.0 + rng.random_range(-0.08..0.08) * s,
    );
    let theta0 = rng.random_range(0.0..std::f64::consts::PI);
    let spin = rng.random_range(-0.6..0.6);
    let background = rng.random_range(0.25..0.75);
    let contrast = rng.random_range(0.25..0.4) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let noise = Normal::new(0.0, VOLUME_NOISE_STD).expect("valid std");

    let mut slices = Vec::with_capacity(depth);
    let mut masks = Vec::with_capacity(depth);
    for k in 0..depth {
        let t = if depth == 1 {
            0.0
        } else {
            k as f64 / (depth - 1) as f64 - 0.5
        };
        let swell = 0.65 + 0.35 * (std::f64::consts::PI * (t + 0.5)).sin();
        let (a, b) = (a_mid * swell, b_mid * swell);
        let (cr, cc) = (c0.0 + drift_r * t, c0.1 + drift_c * t);
        let (sin, cos) = (theta0 + spin * t).sin_cos();
        let gt = Mask2D::from_fn(height, width, |r, c| {
            let (dy, dx) = (r as f64 + 0.5 - cr, c as f64 + 0.5 - cc);
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            (u / a).powi(2) + (v / b).powi(2) <= 1.0
        });
        let data = gt
            .bits()
            .iter()
            .map(|&inside| {
                let base = background + if inside { contrast } else { 0.0 };
                (base + noise.sample(&mut rng)).clamp(0.0, 1.0)
            })
            .collect();
        slices.push(GrayF64::new(height, width, data)?);
        masks.push(gt);
    }
    Ok((Volume3D::new(slices)?, masks))
}
