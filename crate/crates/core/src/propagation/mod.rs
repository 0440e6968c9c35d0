//! Memory-affinity mask propagation through the slices of a volume.
//!
//! Every slice is summarized by a grid of L2-normalized keys. A seed slice
//! contributes its key grid and its mask, stored per grid cell as the
//! `stride x stride` block of pixels under that cell. A query slice reads
//! each cell as a softmax-weighted mix of the `top_k` nearest memory cells'
//! blocks, so the readout is a full-resolution soft mask.

mod volume;

use std::collections::{BTreeMap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{Confusion, GrayF64, Mask2D, MetricSet};
use crate::model::{forward_graph, Weights};
use crate::tensor::Graph;

pub use volume::{
    gen_drifting_volume, load_masks, save_masks, sidecar_path, slice_file_name, Volume3D, VolumeDims, VolumeLayout,
    VOLUME_NOISE_STD,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// Output of the second encoder stage of a trained model.
    EncoderStage2,
    /// Model-free patch statistics.
    RawPatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropagationConfig {
    pub feature_source: FeatureSource,
    pub top_k: usize,
    pub memory_capacity: usize,
    /// Affinity is `-(|q - k|^2 + locality * offset^2) / temperature`.
    pub temperature: f64,
    /// Weight of the squared cell offset between query and memory cell.
    pub locality: f64,
    /// Cell size of the raw-patch key grid.
    pub patch_size: usize,
    pub binarize: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig {
            feature_source: FeatureSource::RawPatch,
            top_k: 8,
            memory_capacity: 8,
            temperature: 0.002,
            locality: 0.003,
            patch_size: 4,
            binarize: 0.5,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.memory_capacity == 0 || self.patch_size == 0 {
            return Err(Error::InvalidConfig(
                "top_k, memory_capacity and patch_size must be positive".into(),
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.locality >= 0.0 && self.locality.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "locality must be non-negative, got {}",
                self.locality
            )));
        }
        Ok(())
    }

    /// Key-grid cell size and the multiple slices are padded to.
    fn geometry(&self, weights: Option<&Weights>) -> Result<(usize, usize)> {
        match self.feature_source {
            FeatureSource::RawPatch => Ok((self.patch_size, self.patch_size)),
            FeatureSource::EncoderStage2 => {
                let w = weights.ok_or(Error::MissingWeights)?;
                if w.config.stages() < 2 {
                    return Err(Error::InvalidConfig(
                        "encoder_stage2 keys need a model with at least two stages".into(),
                    ));
                }
                Ok((w.config.patch_size * 2, w.config.granularity()))
            }
        }
    }
}

/// Row-major grid of unit-length key vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyGrid {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl KeyGrid {
    fn cell(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Per grid cell, the `stride x stride` block of soft mask values under it.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueGrid {
    pub rows: usize,
    pub cols: usize,
    pub stride: usize,
    pub data: Vec<f64>,
}

impl ValueGrid {
    fn block(&self, i: usize) -> &[f64] {
        let n = self.stride * self.stride;
        &self.data[i * n..(i + 1) * n]
    }

    /// Space-to-depth of a mask whose sides are multiples of `stride`.
    pub fn from_mask(mask: &Mask2D, stride: usize) -> Result<Self> {
        let (h, w) = mask.dims();
        if stride == 0 || h % stride != 0 || w % stride != 0 {
            return Err(Error::DivisibilityViolation(format!(
                "{h}x{w} mask with cell size {stride}"
            )));
        }
        let (rows, cols) = (h / stride, w / stride);
        let mut data = Vec::with_capacity(h * w);
        for gr in 0..rows {
            for gc in 0..cols {
                for dr in 0..stride {
                    for dc in 0..stride {
                        data.push(mask.get(gr * stride + dr, gc * stride + dc) as u8 as f64);
                    }
                }
            }
        }
        Ok(ValueGrid {
            rows,
            cols,
            stride,
            data,
        })
    }

    /// Depth-to-space, cropped to `height x width`.
    pub fn to_pixels(&self, height: usize, width: usize) -> Vec<f64> {
        let s = self.stride;
        let mut out = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                let cell = (r / s) * self.cols + c / s;
                out.push(self.data[cell * s * s + (r % s) * s + c % s]);
            }
        }
        out
    }
}

/// Key/value pairs with the first (seed) entry pinned and FIFO eviction of
/// the rest.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    capacity: usize,
    seed: Option<(KeyGrid, ValueGrid)>,
    recent: VecDeque<(KeyGrid, ValueGrid)>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        MemoryBank {
            capacity,
            seed: None,
            recent: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.seed.is_some() as usize + self.recent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, key: KeyGrid, value: ValueGrid) -> Result<()> {
        if (key.rows, key.cols) != (value.rows, value.cols) {
            return Err(Error::DimMismatch(format!(
                "key grid {}x{} vs value grid {}x{}",
                key.rows, key.cols, value.rows, value.cols
            )));
        }
        if let Some((k0, v0)) = self.entries().next() {
            if (k0.rows, k0.cols, k0.dim, v0.stride) != (key.rows, key.cols, key.dim, value.stride) {
                return Err(Error::DimMismatch("memory entries differ in shape".into()));
            }
        }
        if self.seed.is_none() {
            self.seed = Some((key, value));
            return Ok(());
        }
        if self.capacity == 1 {
            return Ok(());
        }
        if self.len() == self.capacity {
            self.recent.pop_front();
        }
        self.recent.push_back((key, value));
        Ok(())
    }

    pub fn entries(&self) -> impl Iterator<Item = &(KeyGrid, ValueGrid)> {
        self.seed.iter().chain(self.recent.iter())
    }
}

/// Softmax weights of the `top_k` lowest `costs` at `-cost / temperature`,
/// lowest first; ties go to the lower index.
pub fn affinity_weights(costs: &[f64], top_k: usize, temperature: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<(f64, usize)> = costs.iter().copied().zip(0..).collect();
    let k = top_k.min(order.len());
    let by = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, by);
        order.truncate(k);
    }
    order.sort_unstable_by(by);
    let Some(&(lowest, _)) = order.first() else {
        return Vec::new();
    };
    let exps: Vec<f64> = order.iter().map(|(d, _)| (-(d - lowest) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    order.iter().zip(exps).map(|(&(_, j), e)| (j, e / total)).collect()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Reads every query cell from memory. The cost of a memory cell is its
/// squared key distance plus `locality` times its squared offset in cells.
pub fn readout(
    query: &KeyGrid,
    memory: &MemoryBank,
    top_k: usize,
    temperature: f64,
    locality: f64,
) -> Result<ValueGrid> {
    let (first_key, first_value) = memory.entries().next().ok_or(Error::EmptyMemory)?;
    if (first_key.dim, first_key.rows, first_key.cols) != (query.dim, query.rows, query.cols) {
        return Err(Error::DimMismatch(format!(
            "query grid {}x{}x{} vs memory {}x{}x{}",
            query.rows, query.cols, query.dim, first_key.rows, first_key.cols, first_key.dim
        )));
    }
    let cells = query.rows * query.cols;
    let cols = query.cols;
    let stride = first_value.stride;
    let block = stride * stride;
    let data: Vec<f64> = (0..cells)
        .into_par_iter()
        .flat_map_iter(|i| {
            let (qr, qc) = ((i / cols) as f64, (i % cols) as f64);
            let mut costs = Vec::with_capacity(memory.len() * cells);
            for (k, _) in memory.entries() {
                for j in 0..cells {
                    let (dr, dc) = ((j / cols) as f64 - qr, (j % cols) as f64 - qc);
                    costs.push(squared_distance(query.cell(i), k.cell(j)) + locality * (dr * dr + dc * dc));
                }
            }
            let mut out = vec![0.0; block];
            for (j, wt) in affinity_weights(&costs, top_k, temperature) {
                let (_, v) = memory.entries().nth(j / cells).expect("index within memory");
                for (o, x) in out.iter_mut().zip(v.block(j % cells)) {
                    *o += wt * x;
                }
            }
            out.into_iter().map(|v: f64| v.clamp(0.0, 1.0))
        })
        .collect();
    Ok(ValueGrid {
        rows: query.rows,
        cols: query.cols,
        stride,
        data,
    })
}

fn pad_image(img: &GrayF64, ph: usize, pw: usize) -> Result<GrayF64> {
    if (img.height, img.width) == (ph, pw) {
        return Ok(img.clone());
    }
    let mut data = vec![0.0; ph * pw];
    for r in 0..img.height {
        data[r * pw..r * pw + img.width].copy_from_slice(&img.data[r * img.width..(r + 1) * img.width]);
    }
    GrayF64::new(ph, pw, data)
}

fn pad_mask(m: &Mask2D, ph: usize, pw: usize) -> Mask2D {
    let (h, w) = m.dims();
    Mask2D::from_fn(ph, pw, |r, c| r < h && c < w && m.get(r, c))
}

fn padded(len: usize, align: usize) -> usize {
    len.div_ceil(align).max(1) * align
}

const ORIENTATION_BINS: usize = 8;
const BIAS_WEIGHT: f64 = 0.5;
const HIST_WEIGHT: f64 = 1.0;

/// Per cell: a constant, the mean, the standard deviation and a
/// magnitude-weighted histogram of gradient directions. The constant keeps
/// the descriptor of an all-black cell well defined.
fn raw_patch_keys(img: &GrayF64, p: usize) -> KeyGrid {
    let (h, w) = (img.height, img.width);
    let (rows, cols) = (h / p, w / p);
    let dim = 3 + ORIENTATION_BINS;
    let at = |r: isize, c: isize| img.get(r.clamp(0, h as isize - 1) as usize, c.clamp(0, w as isize - 1) as usize);
    let n = (p * p) as f64;
    let mut data = Vec::with_capacity(rows * cols * dim);
    for gr in 0..rows {
        for gc in 0..cols {
            let mut d = vec![0.0; dim];
            d[0] = BIAS_WEIGHT;
            let (mut sum, mut sq) = (0.0, 0.0);
            for dr in 0..p {
                for dc in 0..p {
                    let (r, c) = ((gr * p + dr) as isize, (gc * p + dc) as isize);
                    let v = at(r, c);
                    sum += v;
                    sq += v * v;
                    let gy = (at(r + 1, c) - at(r - 1, c)) / 2.0;
                    let gx = (at(r, c + 1) - at(r, c - 1)) / 2.0;
                    let mag = gx.hypot(gy);
                    if mag > 0.0 {
                        let angle = gy.atan2(gx).rem_euclid(std::f64::consts::TAU);
                        let bin = ((angle / std::f64::consts::TAU * ORIENTATION_BINS as f64) as usize)
                            .min(ORIENTATION_BINS - 1);
                        d[3 + bin] += HIST_WEIGHT * mag / n;
                    }
                }
            }
            let mean = sum / n;
            d[1] = mean;
            d[2] = (sq / n - mean * mean).max(0.0).sqrt();
            data.extend(normalize(d));
        }
    }
    KeyGrid { rows, cols, dim, data }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    } else {
        // only reachable for encoder features that are exactly zero
        v[0] = 1.0;
    }
    v
}

/// Key grid of one slice. The slice is zero-padded at the bottom and right
/// to the multiple its feature source requires.
pub fn extract_key(slice: &GrayF64, config: &PropagationConfig, weights: Option<&Weights>) -> Result<KeyGrid> {
    config.validate()?;
    let (_, align) = config.geometry(weights)?;
    let img = pad_image(slice, padded(slice.height, align), padded(slice.width, align))?;
    match config.feature_source {
        FeatureSource::RawPatch => Ok(raw_patch_keys(&img, config.patch_size)),
        FeatureSource::EncoderStage2 => {
            let weights = weights.ok_or(Error::MissingWeights)?;
            let mut g = Graph::new();
            let f = forward_graph(&mut g, weights, &img, None, false)?;
            let feat = g.value(f.stage_features[1]);
            let (rows, cols, dim) = match *feat.shape() {
                [r, c, d] => (r, c, d),
                ref s => return Err(Error::DimMismatch(format!("stage features of shape {s:?}"))),
            };
            let data = feat.data().chunks(dim).flat_map(|v| normalize(v.to_vec())).collect();
            Ok(KeyGrid { rows, cols, dim, data })
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Propagation {
    pub masks: Vec<Mask2D>,
    /// Seed slice each output came from.
    pub provenance: Vec<usize>,
}

impl Propagation {
    /// `{"slice": seed}` for every slice.
    pub fn provenance_map(&self) -> BTreeMap<usize, usize> {
        self.provenance.iter().copied().enumerate().collect()
    }
}

/// Nearest seed per slice; equidistant slices go to the lower seed.
pub fn nearest_seeds(depth: usize, seeds: &[usize]) -> Vec<usize> {
    (0..depth)
        .map(|k| {
            *seeds
                .iter()
                .min_by_key(|&&s| (s.abs_diff(k), s))
                .expect("at least one seed")
        })
        .collect()
}

/// `n` seed indices at depth fractions `(i + 1) / (n + 1)`.
pub fn evenly_spaced_seeds(depth: usize, n: usize) -> Vec<usize> {
    let mut s: Vec<usize> = (1..=n)
        .map(|i| ((depth * i) as f64 / (n + 1) as f64).round() as usize)
        .map(|k| k.min(depth.saturating_sub(1)))
        .collect();
    s.dedup();
    s
}

/// Sweeps outward from each seed through the slices nearest to it. Seed
/// masks are returned untouched.
pub fn propagate_volume(
    volume: &Volume3D,
    seeds: &[(usize, Mask2D)],
    config: &PropagationConfig,
    weights: Option<&Weights>,
) -> Result<Propagation> {
    config.validate()?;
    if seeds.is_empty() {
        return Err(Error::EmptyInput("seed slices"));
    }
    let mut seeds: Vec<&(usize, Mask2D)> = seeds.iter().collect();
    seeds.sort_by_key(|s| s.0);
    for pair in seeds.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(Error::InvalidConfig(format!("slice {} seeded twice", pair[0].0)));
        }
    }
    for (k, m) in &seeds {
        if *k >= volume.depth {
            return Err(Error::InvalidConfig(format!(
                "seed slice {k} outside a volume of depth {}",
                volume.depth
            )));
        }
        if m.dims() != (volume.height, volume.width) {
            return Err(Error::DimMismatch(format!(
                "seed mask {:?} for {}x{} slices",
                m.dims(),
                volume.height,
                volume.width
            )));
        }
    }
    let (stride, align) = config.geometry(weights)?;
    let (ph, pw) = (padded(volume.height, align), padded(volume.width, align));
    let indices: Vec<usize> = seeds.iter().map(|s| s.0).collect();
    let owner = nearest_seeds(volume.depth, &indices);

    let keys = volume
        .slices
        .par_iter()
        .map(|s| extract_key(s, config, weights))
        .collect::<Result<Vec<_>>>()?;

    let sweeps = seeds
        .par_iter()
        .map(|(s, mask)| {
            let seed_value = ValueGrid::from_mask(&pad_mask(mask, ph, pw), stride)?;
            let mut out = Vec::new();
            let forward = (*s + 1..volume.depth).take_while(|&k| owner[k] == *s);
            let backward = (0..*s).rev().take_while(|&k| owner[k] == *s);
            for range in [forward.collect::<Vec<_>>(), backward.collect()] {
                let mut memory = MemoryBank::new(config.memory_capacity);
                memory.push(keys[*s].clone(), seed_value.clone())?;
                for k in range {
                    let soft = readout(&keys[k], &memory, config.top_k, config.temperature, config.locality)?;
                    let probs = soft.to_pixels(ph, pw);
                    let full = Mask2D::threshold(ph, pw, &probs, config.binarize)?;
                    let cropped = Mask2D::from_fn(volume.height, volume.width, |r, c| full.get(r, c));
                    out.push((k, cropped));
                    memory.push(keys[k].clone(), soft)?;
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut masks: Vec<Option<Mask2D>> = vec![None; volume.depth];
    for (k, m) in &seeds {
        masks[*k] = Some(m.clone());
    }
    for (k, m) in sweeps.into_iter().flatten() {
        masks[k] = Some(m);
    }
    Ok(Propagation {
        masks: masks
            .into_iter()
            .map(|m| m.expect("every slice is owned by a seed"))
            .collect(),
        provenance: owner,
    })
}

/// Voxel-pooled overlap of two mask stacks.
pub fn evaluate_volume(pred: &[Mask2D], gt: &[Mask2D]) -> Result<MetricSet> {
    if pred.len() != gt.len() {
        return Err(Error::DimMismatch(format!(
            "{} predicted slices for {} ground-truth slices",
            pred.len(),
            gt.len()
        )));
    }
    let mut c = Confusion::default();
    for (p, g) in pred.iter().zip(gt) {
        p.check_same_dims(g)?;
        c.add_bits(p.bits(), g.bits());
    }
    Ok(c.metrics())
}

#[cfg(test)]
mod tests;
