//! Two-stage windowed-attention segmenter with click fusion.
//!
//! Image and click map are patch-embedded by two separate linear projections
//! and summed element-wise. The fused tokens pass through stages of
//! (shifted-)window attention blocks separated by patch merging; an MLP
//! decoder aggregates all stages at the first-stage resolution and the single
//! logit channel is upsampled bilinearly to the input size.

mod forward;
pub mod layers;

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clicks::DEFAULT_CLICK_RADIUS;
use crate::error::{Error, Result};
use crate::tensor::{io, Tensor};

pub use forward::{
    forward, forward_graph, forward_graph_with, forward_image_only, padded_dims, predict, predict_padded, Forward,
    ParamStore,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Gray input is replicated to this many channels.
    pub in_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window_size: usize,
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
    /// Training input size; inference accepts any size meeting [`ModelConfig::granularity`].
    pub height: usize,
    pub width: usize,
    pub click_radius: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            patch_size: 4,
            embed_dim: 32,
            depths: vec![2, 2],
            heads: vec![2, 4],
            window_size: 4,
            mlp_ratio: 4,
            decoder_dim: 64,
            height: 64,
            width: 64,
            click_radius: DEFAULT_CLICK_RADIUS,
        }
    }
}

impl ModelConfig {
    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    /// Input sides must be multiples of this.
    pub fn granularity(&self) -> usize {
        self.patch_size * (1 << (self.stages().saturating_sub(1))) * self.window_size
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let g = self.granularity();
        if height == 0 || width == 0 || !height.is_multiple_of(g) || !width.is_multiple_of(g) {
            return Err(Error::DivisibilityViolation(format!(
                "input {height}x{width} must be a positive multiple of {g}"
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.in_channels,
            self.patch_size,
            self.embed_dim,
            self.window_size,
            self.mlp_ratio,
            self.decoder_dim,
        ];
        if positive.contains(&0) {
            return Err(Error::InvalidConfig("model dims must be positive".into()));
        }
        if self.depths.is_empty() || self.depths.len() != self.heads.len() {
            return Err(Error::InvalidConfig(format!(
                "depths {:?} and heads {:?} must be non-empty and the same length",
                self.depths, self.heads
            )));
        }
        for (s, &h) in self.heads.iter().enumerate() {
            if h == 0 || !self.stage_dim(s).is_multiple_of(h) {
                return Err(Error::InvalidConfig(format!(
                    "stage {s} dim {} not divisible by {h} heads",
                    self.stage_dim(s)
                )));
            }
        }
        self.check_input(self.height, self.width)
    }

    /// Every parameter name with its shape, in a stable order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let p = self.patch_size;
        let d0 = self.embed_dim;
        out.push(("patch_embed.image.weight".into(), vec![p * p * self.in_channels, d0]));
        out.push(("patch_embed.image.bias".into(), vec![d0]));
        out.push(("patch_embed.clicks.weight".into(), vec![p * p * 2, d0]));
        out.push(("patch_embed.clicks.bias".into(), vec![d0]));
        for s in 0..self.stages() {
            let d = self.stage_dim(s);
            let hidden = d * self.mlp_ratio;
            if s > 0 {
                let prev = self.stage_dim(s - 1);
                let m = format!("merges.{s}");
                out.push((format!("{m}.norm.gamma"), vec![4 * prev]));
                out.push((format!("{m}.norm.beta"), vec![4 * prev]));
                out.push((format!("{m}.reduction.weight"), vec![4 * prev, d]));
                out.push((format!("{m}.reduction.bias"), vec![d]));
            }
            for b in 0..self.depths[s] {
                let k = format!("stages.{s}.blocks.{b}");
                out.push((format!("{k}.norm1.gamma"), vec![d]));
                out.push((format!("{k}.norm1.beta"), vec![d]));
                out.push((format!("{k}.attn.qkv.weight"), vec![d, 3 * d]));
                out.push((format!("{k}.attn.qkv.bias"), vec![3 * d]));
                out.push((format!("{k}.attn.proj.weight"), vec![d, d]));
                out.push((format!("{k}.attn.proj.bias"), vec![d]));
                out.push((format!("{k}.norm2.gamma"), vec![d]));
                out.push((format!("{k}.norm2.beta"), vec![d]));
                out.push((format!("{k}.mlp.fc1.weight"), vec![d, hidden]));
                out.push((format!("{k}.mlp.fc1.bias"), vec![hidden]));
                out.push((format!("{k}.mlp.fc2.weight"), vec![hidden, d]));
                out.push((format!("{k}.mlp.fc2.bias"), vec![d]));
            }
            out.push((format!("stages.{s}.norm.gamma"), vec![d]));
            out.push((format!("stages.{s}.norm.beta"), vec![d]));
            out.push((format!("decoder.stage{s}.weight"), vec![d, self.decoder_dim]));
            out.push((format!("decoder.stage{s}.bias"), vec![self.decoder_dim]));
        }
        let dec = self.decoder_dim;
        out.push(("decoder.fuse.weight".into(), vec![self.stages() * dec, dec]));
        out.push(("decoder.fuse.bias".into(), vec![dec]));
        out.push(("decoder.head.weight".into(), vec![dec, 1]));
        out.push(("decoder.head.bias".into(), vec![1]));
        out
    }
}

pub const INIT_STD: f64 = 0.02;

/// All learnable parameters of a model plus the config that shapes them.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl Weights {
    /// Truncated-normal (σ = 0.02, cut at 2σ) projections, zero biases, unit
    /// norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with_std(config, seed, INIT_STD)
    }

    pub fn init_with_std(config: ModelConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.parameter_shapes() {
            let t = if name.ends_with(".weight") {
                Tensor::from_fn(&shape, |_| loop {
                    let v: f64 = normal.sample(&mut rng);
                    if v.abs() <= 2.0 * std {
                        break v;
                    }
                })
            } else if name.ends_with(".gamma") {
                Tensor::full(&shape, 1.0)
            } else {
                Tensor::zeros(&shape)
            };
            tensors.insert(name, t);
        }
        Ok(Weights { config, tensors })
    }

    pub fn from_tensors(config: ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        if expected.len() != tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, shape) in expected {
            match tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Format(format!(
                        "{name}: shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Format(format!("missing tensor {name}"))),
            }
        }
        Ok(Weights { config, tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Adds `std * N(0, 1)` noise to every tensor; used to move away from the
    /// symmetric init in tests.
    pub fn jitter(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in self.tensors.values_mut() {
            for v in t.data_mut() {
                *v += std * (rng.random::<f64>() * 2.0 - 1.0);
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with_meta(path, serde_json::Value::Null)
    }

    /// `extra` lands under `meta.extra` next to the config.
    pub fn save_with_meta(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({ "config": self.config, "extra": extra });
        io::save(path, &self.tensors, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::load_with_meta(path)?.0)
    }

    pub fn load_with_meta(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (tensors, meta) = io::load(path)?;
        let config: ModelConfig = serde_json::from_value(
            meta.get("config")
                .cloned()
                .ok_or_else(|| Error::Format("manifest has no model config".into()))?,
        )?;
        let extra = meta.get("extra").cloned().unwrap_or(serde_json::Value::Null);
        Ok((Self::from_tensors(config, tensors)?, extra))
    }
}
