//! Graph-level building blocks. Token grids are `[h, w, d]` tensors.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var, LAYER_NORM_EPS};

/// Added to attention scores across shifted-window region boundaries.
pub const ATTN_MASK_VALUE: f64 = -1e9;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.linear(x, self.weight, self.bias)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: Var,
    pub beta: Var,
}

impl Norm {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.layer_norm(x, self.gamma, self.beta, LAYER_NORM_EPS)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub qkv: Linear,
    pub proj: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub norm1: Norm,
    pub attn: AttentionParams,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum IndexKey {
    Patchify {
        h: usize,
        w: usize,
        c: usize,
        p: usize,
    },
    Partition {
        h: usize,
        w: usize,
        d: usize,
        ws: usize,
        shift: usize,
    },
    Reverse {
        h: usize,
        w: usize,
        d: usize,
        ws: usize,
        shift: usize,
    },
    SplitHeads {
        windows: usize,
        t: usize,
        d: usize,
        heads: usize,
        part: usize,
    },
    MergeHeads {
        windows: usize,
        t: usize,
        d: usize,
        heads: usize,
    },
    Merge2x2 {
        h: usize,
        w: usize,
        d: usize,
    },
}

fn cached_index(key: IndexKey, build: impl FnOnce() -> Vec<usize>) -> Arc<[usize]> {
    static CACHE: OnceLock<Mutex<HashMap<IndexKey, Arc<[usize]>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(hit) = cache.lock().expect("index cache poisoned").get(&key) {
        return hit.clone();
    }
    let built: Arc<[usize]> = build().into();
    cache
        .lock()
        .expect("index cache poisoned")
        .entry(key)
        .or_insert(built)
        .clone()
}

fn grid_dims(g: &Graph, x: Var) -> Result<(usize, usize, usize)> {
    match g.shape(x) {
        &[h, w, d] => Ok((h, w, d)),
        s => Err(Error::DimMismatch(format!("expected [h, w, d], got {s:?}"))),
    }
}

/// Gray image replicated to `channels`, laid out `[h, w, channels]`.
pub fn replicate_gray(height: usize, width: usize, gray: &[f64], channels: usize) -> Result<Tensor> {
    if gray.len() != height * width {
        return Err(Error::DimMismatch(format!(
            "{} values for {height}x{width}",
            gray.len()
        )));
    }
    let mut data = Vec::with_capacity(gray.len() * channels);
    for &v in gray {
        data.extend(std::iter::repeat_n(v, channels));
    }
    Tensor::new(vec![height, width, channels], data)
}

/// Non-overlapping `p x p` patches flattened in (row, col, channel) order and
/// projected to the token dim.
pub fn patch_embed(g: &mut Graph, input: Var, proj: &Linear, p: usize) -> Result<Var> {
    let (h, w, c) = grid_dims(g, input)?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::DivisibilityViolation(format!(
            "{h}x{w} input with patch size {p}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let index = cached_index(IndexKey::Patchify { h, w, c, p }, || {
        let mut idx = Vec::with_capacity(h * w * c);
        for py in 0..gh {
            for px in 0..gw {
                for i in 0..p {
                    for j in 0..p {
                        let base = ((py * p + i) * w + px * p + j) * c;
                        idx.extend(base..base + c);
                    }
                }
            }
        }
        idx
    });
    let patches = g.gather(input, index, &[gh, gw, p * p * c])?;
    proj.apply(g, patches)
}

pub fn patch_embed_image(g: &mut Graph, image: Var, proj: &Linear, p: usize) -> Result<Var> {
    patch_embed(g, image, proj, p)
}

pub fn patch_embed_clicks(g: &mut Graph, clickmap: Var, proj: &Linear, p: usize) -> Result<Var> {
    let (_, _, c) = grid_dims(g, clickmap)?;
    if c != 2 {
        return Err(Error::DimMismatch(format!("click map has {c} channels, expected 2")));
    }
    patch_embed(g, clickmap, proj, p)
}

pub fn fuse(g: &mut Graph, image_tokens: Var, click_tokens: Var) -> Result<Var> {
    g.add(image_tokens, click_tokens)
}

/// Multi-head attention inside non-overlapping windows of a cyclically
/// shifted grid. Returns the output tokens and the attention probabilities
/// `[windows * heads, t, t]` with `t = window_size^2`.
///
/// When one window covers the whole grid the shift is dropped.
pub fn window_attention(
    g: &mut Graph,
    x: Var,
    params: &AttentionParams,
    heads: usize,
    window_size: usize,
    shift: usize,
) -> Result<(Var, Var)> {
    let (h, w, d) = grid_dims(g, x)?;
    let ws = window_size;
    if ws == 0 || h % ws != 0 || w % ws != 0 {
        return Err(Error::DivisibilityViolation(format!("{h}x{w} grid with window {ws}")));
    }
    if shift >= ws {
        return Err(Error::InvalidConfig(format!("shift {shift} >= window {ws}")));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidConfig(format!("dim {d} with {heads} heads")));
    }
    let shift = if h.min(w) <= ws { 0 } else { shift };
    let t = ws * ws;
    let windows = (h / ws) * (w / ws);
    let hd = d / heads;

    let part = cached_index(IndexKey::Partition { h, w, d, ws, shift }, || {
        partition_index(h, w, d, ws, shift)
    });
    let xw = g.gather(x, part, &[windows * t, d])?;
    let qkv = params.qkv.apply(g, xw)?;
    let mut qkv_parts = [xw; 3];
    for (i, slot) in qkv_parts.iter_mut().enumerate() {
        let idx = cached_index(
            IndexKey::SplitHeads {
                windows,
                t,
                d,
                heads,
                part: i,
            },
            || split_heads_index(windows, t, d, heads, i),
        );
        *slot = g.gather(qkv, idx, &[windows * heads, t, hd])?;
    }
    let [q, k, v] = qkv_parts;
    let q = g.scale(q, 1.0 / (hd as f64).sqrt());
    let mut scores = g.bmm(q, k, true)?;
    if shift > 0 {
        let mask = g.constant(shift_mask(h, w, ws, shift, heads));
        scores = g.add(scores, mask)?;
    }
    let attn = g.softmax_lastdim(scores)?;
    let out = g.bmm(attn, v, false)?;
    let merge = cached_index(IndexKey::MergeHeads { windows, t, d, heads }, || {
        merge_heads_index(windows, t, d, heads)
    });
    let out = g.gather(out, merge, &[windows * t, d])?;
    let out = params.proj.apply(g, out)?;
    let rev = cached_index(IndexKey::Reverse { h, w, d, ws, shift }, || {
        reverse_index(h, w, d, ws, shift)
    });
    let out = g.gather(out, rev, &[h, w, d])?;
    Ok((out, attn))
}

/// Window `win`, slot `t` reads grid position `(y' + shift, x' + shift)`
/// (mod grid) where `(y', x')` is the slot in the unshifted layout.
fn partition_index(h: usize, w: usize, d: usize, ws: usize, shift: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(h * w * d);
    for wy in 0..h / ws {
        for wx in 0..w / ws {
            for i in 0..ws {
                for j in 0..ws {
                    let y = (wy * ws + i + shift) % h;
                    let x = (wx * ws + j + shift) % w;
                    let base = (y * w + x) * d;
                    idx.extend(base..base + d);
                }
            }
        }
    }
    idx
}

fn reverse_index(h: usize, w: usize, d: usize, ws: usize, shift: usize) -> Vec<usize> {
    let nwx = w / ws;
    let mut idx = Vec::with_capacity(h * w * d);
    for y in 0..h {
        for x in 0..w {
            let ys = (y + h - shift) % h;
            let xs = (x + w - shift) % w;
            let win = (ys / ws) * nwx + xs / ws;
            let t = (ys % ws) * ws + xs % ws;
            let base = (win * ws * ws + t) * d;
            idx.extend(base..base + d);
        }
    }
    idx
}

/// `[windows * t, 3d]` (q | k | v, heads contiguous) to `[windows * heads, t, hd]`.
fn split_heads_index(windows: usize, t: usize, d: usize, heads: usize, part: usize) -> Vec<usize> {
    let hd = d / heads;
    let mut idx = Vec::with_capacity(windows * t * d);
    for win in 0..windows {
        for head in 0..heads {
            for tok in 0..t {
                let base = (win * t + tok) * 3 * d + part * d + head * hd;
                idx.extend(base..base + hd);
            }
        }
    }
    idx
}

fn merge_heads_index(windows: usize, t: usize, d: usize, heads: usize) -> Vec<usize> {
    let hd = d / heads;
    let mut idx = Vec::with_capacity(windows * t * d);
    for win in 0..windows {
        for tok in 0..t {
            for head in 0..heads {
                let base = ((win * heads + head) * t + tok) * hd;
                idx.extend(base..base + hd);
            }
        }
    }
    idx
}

/// Tokens that were not neighbours before the cyclic shift may not attend to
/// each other. Regions are the three bands `[0, h-ws)`, `[h-ws, h-shift)`,
/// `[h-shift, h)` per axis of the shifted grid.
pub fn shift_mask(h: usize, w: usize, ws: usize, shift: usize, heads: usize) -> Tensor {
    let band = |v: usize, n: usize| -> usize {
        if v < n - ws {
            0
        } else if v < n - shift {
            1
        } else {
            2
        }
    };
    let t = ws * ws;
    let windows = (h / ws) * (w / ws);
    let mut data = Vec::with_capacity(windows * heads * t * t);
    for wy in 0..h / ws {
        for wx in 0..w / ws {
            let region: Vec<usize> = (0..t)
                .map(|s| {
                    let (y, x) = (wy * ws + s / ws, wx * ws + s % ws);
                    band(y, h) * 3 + band(x, w)
                })
                .collect();
            for _ in 0..heads {
                for a in 0..t {
                    for b in 0..t {
                        data.push(if region[a] == region[b] { 0.0 } else { ATTN_MASK_VALUE });
                    }
                }
            }
        }
    }
    Tensor::new(vec![windows * heads, t, t], data).expect("mask shape")
}

pub fn mlp(g: &mut Graph, x: Var, fc1: &Linear, fc2: &Linear) -> Result<Var> {
    let hidden = fc1.apply(g, x)?;
    let hidden = g.gelu(hidden);
    fc2.apply(g, hidden)
}

/// Pre-norm attention and MLP, each with a residual connection.
pub fn transformer_block(
    g: &mut Graph,
    x: Var,
    params: &BlockParams,
    heads: usize,
    window_size: usize,
    shift: usize,
) -> Result<Var> {
    let y = params.norm1.apply(g, x)?;
    let (y, _) = window_attention(g, y, &params.attn, heads, window_size, shift)?;
    let x = g.add(x, y)?;
    let y = params.norm2.apply(g, x)?;
    let y = mlp(g, y, &params.fc1, &params.fc2)?;
    g.add(x, y)
}

/// 2x2 neighbourhoods concatenated to `4d`, normalized, projected to `2d`.
pub fn patch_merging(g: &mut Graph, x: Var, norm: &Norm, reduction: &Linear) -> Result<Var> {
    let (h, w, d) = grid_dims(g, x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::DivisibilityViolation(format!(
            "patch merging needs even grid, got {h}x{w}"
        )));
    }
    let index = cached_index(IndexKey::Merge2x2 { h, w, d }, || {
        let mut idx = Vec::with_capacity(h * w * d);
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let base = ((2 * y + dy) * w + 2 * x + dx) * d;
                    idx.extend(base..base + d);
                }
            }
        }
        idx
    });
    let merged = g.gather(x, index, &[h / 2, w / 2, 4 * d])?;
    let merged = norm.apply(g, merged)?;
    reduction.apply(g, merged)
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub stages: Vec<Linear>,
    pub fuse: Linear,
    pub head: Linear,
}

/// Projects each stage to the decoder dim, resizes to the first stage grid,
/// concatenates, fuses (linear + GELU) and predicts one logit per token.
pub fn mlp_decoder(g: &mut Graph, features: &[Var], params: &DecoderParams) -> Result<Var> {
    if features.is_empty() || features.len() != params.stages.len() {
        return Err(Error::DimMismatch(format!(
            "{} feature grids for {} decoder stages",
            features.len(),
            params.stages.len()
        )));
    }
    let (h0, w0, _) = grid_dims(g, features[0])?;
    let mut parts = Vec::with_capacity(features.len());
    for (f, lin) in features.iter().zip(&params.stages) {
        let y = lin.apply(g, *f)?;
        let (h, w, _) = grid_dims(g, y)?;
        parts.push(if (h, w) == (h0, w0) {
            y
        } else {
            g.resize_bilinear(y, h0, w0)?
        });
    }
    let cat = g.concat_lastdim(&parts)?;
    let fused = params.fuse.apply(g, cat)?;
    let fused = g.gelu(fused);
    params.head.apply(g, fused)
}

pub fn upsample_bilinear(g: &mut Graph, logits: Var, height: usize, width: usize) -> Result<Var> {
    let (h, w, _) = grid_dims(g, logits)?;
    if height < h || width < w {
        return Err(Error::DimMismatch(format!(
            "upsample {h}x{w} to smaller {height}x{width}"
        )));
    }
    if (h, w) == (height, width) {
        return Ok(logits);
    }
    g.resize_bilinear(logits, height, width)
}
