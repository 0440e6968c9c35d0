use std::collections::BTreeMap;

use super::layers::{self, AttentionParams, BlockParams, DecoderParams, Linear, Norm};
use super::{ModelConfig, Weights};
use crate::clicks::{encode_clicks, Click, ClickMap};
use crate::error::{Error, Result};
use crate::mask::GrayF64;
use crate::tensor::{Graph, Tensor, Var};

/// Lazily turns named weights into graph leaves, trainable or constant.
pub struct ParamStore<'w> {
    weights: &'w Weights,
    trainable: bool,
    vars: BTreeMap<String, Var>,
}

impl<'w> ParamStore<'w> {
    pub fn new(weights: &'w Weights, trainable: bool) -> Self {
        ParamStore {
            weights,
            trainable,
            vars: BTreeMap::new(),
        }
    }

    /// Uses the given leaves for the named parameters instead of creating new ones.
    pub fn with_vars(weights: &'w Weights, vars: BTreeMap<String, Var>) -> Self {
        ParamStore {
            weights,
            trainable: true,
            vars,
        }
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self
            .weights
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?
            .clone();
        let v = if self.trainable { g.param(t) } else { g.constant(t) };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn linear(&mut self, g: &mut Graph, prefix: &str) -> Result<Linear> {
        Ok(Linear {
            weight: self.get(g, &format!("{prefix}.weight"))?,
            bias: self.get(g, &format!("{prefix}.bias"))?,
        })
    }

    pub fn norm(&mut self, g: &mut Graph, prefix: &str) -> Result<Norm> {
        Ok(Norm {
            gamma: self.get(g, &format!("{prefix}.gamma"))?,
            beta: self.get(g, &format!("{prefix}.beta"))?,
        })
    }

    fn block(&mut self, g: &mut Graph, prefix: &str) -> Result<BlockParams> {
        Ok(BlockParams {
            norm1: self.norm(g, &format!("{prefix}.norm1"))?,
            attn: AttentionParams {
                qkv: self.linear(g, &format!("{prefix}.attn.qkv"))?,
                proj: self.linear(g, &format!("{prefix}.attn.proj"))?,
            },
            norm2: self.norm(g, &format!("{prefix}.norm2"))?,
            fc1: self.linear(g, &format!("{prefix}.mlp.fc1"))?,
            fc2: self.linear(g, &format!("{prefix}.mlp.fc2"))?,
        })
    }

    /// Every leaf created so far, by name.
    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn into_vars(self) -> BTreeMap<String, Var> {
        self.vars
    }
}

/// Handles into the graph of one forward pass.
pub struct Forward {
    /// `[h/p, w/p, 1]`
    pub logits_lowres: Var,
    /// `[h, w, 1]`
    pub logits: Var,
    /// `[h, w, 1]`, sigmoid of `logits`
    pub probs: Var,
    pub stage_features: Vec<Var>,
    pub params: BTreeMap<String, Var>,
}

/// Builds the full network on `g`. `clickmap` is `[h, w, 2]`; `None` runs the
/// image-only network with no click branch at all.
pub fn forward_graph(
    g: &mut Graph,
    weights: &Weights,
    image: &GrayF64,
    clickmap: Option<&ClickMap>,
    trainable: bool,
) -> Result<Forward> {
    forward_graph_with(g, ParamStore::new(weights, trainable), image, clickmap)
}

pub fn forward_graph_with(
    g: &mut Graph,
    mut ps: ParamStore<'_>,
    image: &GrayF64,
    clickmap: Option<&ClickMap>,
) -> Result<Forward> {
    let weights = ps.weights;
    let cfg = &weights.config;
    let (h, w) = (image.height, image.width);
    cfg.check_input(h, w)?;
    if image.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("image"));
    }
    let img = g.constant(layers::replicate_gray(h, w, &image.data, cfg.in_channels)?);
    let img_proj = ps.linear(g, "patch_embed.image")?;
    let mut x = layers::patch_embed_image(g, img, &img_proj, cfg.patch_size)?;
    if let Some(cm) = clickmap {
        if cm.positive.dims() != (h, w) {
            return Err(Error::DimMismatch(format!(
                "click map {:?} for {h}x{w} image",
                cm.positive.dims()
            )));
        }
        let clicks = g.constant(Tensor::new(vec![h, w, 2], cm.to_hwc())?);
        let click_proj = ps.linear(g, "patch_embed.clicks")?;
        let ct = layers::patch_embed_clicks(g, clicks, &click_proj, cfg.patch_size)?;
        x = layers::fuse(g, x, ct)?;
    }

    let mut features = Vec::with_capacity(cfg.stages());
    for s in 0..cfg.stages() {
        if s > 0 {
            let norm = ps.norm(g, &format!("merges.{s}.norm"))?;
            let red = ps.linear(g, &format!("merges.{s}.reduction"))?;
            x = layers::patch_merging(g, x, &norm, &red)?;
        }
        for b in 0..cfg.depths[s] {
            let params = ps.block(g, &format!("stages.{s}.blocks.{b}"))?;
            let shift = if b % 2 == 1 { cfg.window_size / 2 } else { 0 };
            x = layers::transformer_block(g, x, &params, cfg.heads[s], cfg.window_size, shift)?;
        }
        let out_norm = ps.norm(g, &format!("stages.{s}.norm"))?;
        features.push(out_norm.apply(g, x)?);
    }

    let decoder = DecoderParams {
        stages: (0..cfg.stages())
            .map(|s| ps.linear(g, &format!("decoder.stage{s}")))
            .collect::<Result<_>>()?,
        fuse: ps.linear(g, "decoder.fuse")?,
        head: ps.linear(g, "decoder.head")?,
    };
    let logits_lowres = layers::mlp_decoder(g, &features, &decoder)?;
    let logits = layers::upsample_bilinear(g, logits_lowres, h, w)?;
    let probs = g.sigmoid(logits);
    Ok(Forward {
        logits_lowres,
        logits,
        probs,
        stage_features: features,
        params: ps.into_vars(),
    })
}

/// Foreground probability per pixel, row-major.
pub fn forward(weights: &Weights, image: &GrayF64, clickmap: &ClickMap) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let f = forward_graph(&mut g, weights, image, Some(clickmap), false)?;
    Ok(g.value(f.probs).data().to_vec())
}

pub fn forward_image_only(weights: &Weights, image: &GrayF64) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let f = forward_graph(&mut g, weights, image, None, false)?;
    Ok(g.value(f.probs).data().to_vec())
}

/// Encodes `clicks` with the model's click radius and runs the network.
pub fn predict(weights: &Weights, image: &GrayF64, clicks: &[Click]) -> Result<Vec<f64>> {
    let cm = encode_clicks(clicks, image.height, image.width, weights.config.click_radius)?;
    forward(weights, image, &cm)
}

/// Like [`predict`] for any image size: the image is zero-padded at the
/// bottom and right to the model granularity and the output cropped back.
pub fn predict_padded(weights: &Weights, image: &GrayF64, clicks: &[Click]) -> Result<Vec<f64>> {
    let (h, w) = (image.height, image.width);
    for c in clicks {
        c.check_bounds(h, w)?;
    }
    let (ph, pw) = padded_dims(&weights.config, h, w);
    if (ph, pw) == (h, w) {
        return predict(weights, image, clicks);
    }
    let mut data = vec![0.0; ph * pw];
    for r in 0..h {
        data[r * pw..r * pw + w].copy_from_slice(&image.data[r * w..(r + 1) * w]);
    }
    let padded = GrayF64::new(ph, pw, data)?;
    let probs = predict(weights, &padded, clicks)?;
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        out.extend_from_slice(&probs[r * pw..r * pw + w]);
    }
    Ok(out)
}

pub fn padded_dims(cfg: &ModelConfig, height: usize, width: usize) -> (usize, usize) {
    let g = cfg.granularity();
    (height.div_ceil(g).max(1) * g, width.div_ceil(g).max(1) * g)
}
