//! Normalized-focal-loss training with simulated clicks.

mod adam;
pub mod synth;

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamParams, AdamState};
pub use synth::{augment, flip_horizontal, gen_synthetic, AugmentConfig, SynthSample};

use crate::clicks::{encode_clicks, perturb_click_with, simulate_next_click, Click};
use crate::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::mask::{iou, GrayF64, Mask2D};
use crate::model::{forward_graph, predict, ModelConfig, Weights};
use crate::tensor::{Graph, Tensor};

/// Normalized focal loss of a probability map against a mask.
pub fn nfl(probs: &[f64], gt: &Mask2D, gamma: f64) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(Tensor::new(vec![probs.len()], probs.to_vec())?);
    let target: Arc<[f64]> = gt.to_f64().into();
    let l = g.nfl(p, target, gamma)?;
    Ok(g.value(l).data()[0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Focal exponent.
    pub gamma: f64,
    pub crop_h: usize,
    pub crop_w: usize,
    /// Clicks per sample are drawn uniformly from `1..=max`.
    pub max_sim_clicks_per_sample: usize,
    pub perturb_offset: usize,
    pub rng_seed: u64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip: bool,
    /// Synthetic training set used when no dataset directory is given.
    pub num_samples: usize,
    pub synth_seed_start: u64,
    pub synth_h: usize,
    pub synth_w: usize,
    pub val_samples: usize,
    pub val_seed_start: u64,
    pub init_seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 55,
            batch_size: 8,
            learning_rate: 1e-3,
            gamma: 2.0,
            crop_h: 64,
            crop_w: 64,
            max_sim_clicks_per_sample: 3,
            perturb_offset: 2,
            rng_seed: 0,
            scale_min: 0.75,
            scale_max: 1.4,
            flip: true,
            num_samples: 500,
            synth_seed_start: 0,
            synth_h: 64,
            synth_w: 64,
            val_samples: 16,
            val_seed_start: 900_000,
            init_seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 || self.max_sim_clicks_per_sample == 0 {
            return bad("batch_size and max_sim_clicks_per_sample must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {}", self.learning_rate));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma {}", self.gamma));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return bad(format!("scale range [{}, {}]", self.scale_min, self.scale_max));
        }
        self.model.validate()?;
        self.model.check_input(self.crop_h, self.crop_w)
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            crop_h: self.crop_h,
            crop_w: self.crop_w,
            scale_min: self.scale_min,
            scale_max: self.scale_max,
            flip: self.flip,
        }
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.learning_rate,
            ..AdamParams::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Generated training set.
    pub fn synthetic_train_set(&self) -> Result<Vec<LabeledImage>> {
        synthetic_set(self.synth_seed_start, self.num_samples, self.synth_h, self.synth_w)
    }

    pub fn synthetic_val_set(&self) -> Result<Vec<LabeledImage>> {
        synthetic_set(self.val_seed_start, self.val_samples, self.crop_h, self.crop_w)
    }
}

pub fn synthetic_set(seed_start: u64, count: usize, h: usize, w: usize) -> Result<Vec<LabeledImage>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let s = gen_synthetic(seed_start + i, h, w)?;
            Ok(LabeledImage {
                id: format!("synth_{:06}", seed_start + i),
                image: s.image,
                gt: s.gt,
            })
        })
        .collect()
}

/// SplitMix64 finalizer chained over the parts; gives every
/// (seed, epoch, step, sample) its own random stream.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut x = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        x ^= p;
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

/// Clicks simulated one at a time against the model's own prediction, each
/// perturbed, starting from an empty prediction.
pub fn simulate_training_clicks(
    weights: &Weights,
    image: &GrayF64,
    gt: &Mask2D,
    count: usize,
    perturb: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Click>> {
    let (h, w) = gt.dims();
    let mut pred = Mask2D::new(h, w);
    let mut clicks = Vec::with_capacity(count);
    for i in 0..count {
        let click = match simulate_next_click(&pred, gt, i) {
            Ok(c) => c,
            Err(Error::NoMisclassifiedPixels) => break,
            Err(e) => return Err(e),
        };
        clicks.push(perturb_click_with(click, perturb, rng, h, w));
        if i + 1 < count {
            let probs = predict(weights, image, &clicks)?;
            pred = Mask2D::threshold(h, w, &probs, 0.5)?;
        }
    }
    Ok(clicks)
}

struct SampleGrad {
    loss: f64,
    grads: BTreeMap<String, Vec<f64>>,
}

fn sample_gradient(weights: &Weights, item: &LabeledImage, config: &TrainConfig, seed: u64) -> Result<SampleGrad> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (image, gt) = augment(&item.image, &item.gt, &config.augment_config(), &mut rng)?;
    if gt.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let k = rng.random_range(1..=config.max_sim_clicks_per_sample);
    let clicks = simulate_training_clicks(weights, &image, &gt, k, config.perturb_offset, &mut rng)?;
    let cm = encode_clicks(&clicks, image.height, image.width, weights.config.click_radius)?;
    let mut g = Graph::new();
    let f = forward_graph(&mut g, weights, &image, Some(&cm), true)?;
    let loss = g.nfl(f.probs, gt.to_f64().into(), config.gamma)?;
    g.backward(loss)?;
    let grads = f
        .params
        .iter()
        .map(|(name, &v)| {
            let n = g.value(v).numel();
            let grad = g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
            (name.clone(), grad)
        })
        .collect();
    Ok(SampleGrad {
        loss: g.value(loss).data()[0],
        grads,
    })
}

/// One optimizer step over `batch`. Per-sample work runs in parallel;
/// gradients are summed in batch order so the result does not depend on
/// thread count. Returns the mean batch loss.
pub fn train_step(
    weights: &mut Weights,
    adam: &mut AdamState,
    batch: &[&LabeledImage],
    config: &TrainConfig,
    epoch: usize,
    step: usize,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("training batch"));
    }
    let frozen: &Weights = weights;
    let results: Vec<SampleGrad> = batch
        .par_iter()
        .enumerate()
        .map(|(j, item)| {
            let seed = derive_seed(&[config.rng_seed, epoch as u64, step as u64, j as u64]);
            sample_gradient(frozen, item, config, seed)
        })
        .collect::<Result<_>>()?;
    let n = results.len() as f64;
    let mut loss = 0.0;
    let mut total: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in results {
        loss += r.loss;
        for (name, g) in r.grads {
            match total.get_mut(&name) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    total.insert(name, g);
                }
            }
        }
    }
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { epoch, step });
    }
    for g in total.values_mut() {
        g.iter_mut().for_each(|v| *v /= n);
    }
    adam.step(weights, &total, &config.adam())?;
    Ok(loss)
}

/// Mean IoU after a single simulated click on an empty prediction.
pub fn val_iou_1click(weights: &Weights, val: &[LabeledImage]) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::EmptyInput("validation set"));
    }
    let ious: Vec<f64> = val
        .par_iter()
        .map(|item| {
            let (h, w) = item.gt.dims();
            let click = simulate_next_click(&Mask2D::new(h, w), &item.gt, 0)?;
            let probs = crate::model::predict_padded(weights, &item.image, &[click])?;
            iou(&Mask2D::threshold(h, w, &probs, 0.5)?, &item.gt)
        })
        .collect::<Result<_>>()?;
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub val_iou_1click: Option<f64>,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "epoch,step,loss,val_iou_1click";

    pub fn to_csv(&self) -> String {
        let val = self.val_iou_1click.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!("{},{},{:.8},{}", self.epoch, self.step, self.loss, val)
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Per-epoch checkpoints land here as `epoch_NNNN.json` plus optimizer state.
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    /// Weights manifest of an earlier checkpoint to continue from.
    pub resume: Option<PathBuf>,
    pub on_row: Option<&'a (dyn Fn(&LogRow) + Sync)>,
}

pub struct TrainOutcome {
    pub weights: Weights,
    pub log: Vec<LogRow>,
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.json"))
}

/// Optimizer state stored next to a weights checkpoint.
pub fn optimizer_path(weights_path: &Path) -> PathBuf {
    weights_path.with_extension("optim.json")
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    epochs_done: usize,
    global_step: usize,
    train_config: TrainConfig,
}

fn save_checkpoint(dir: &Path, weights: &Weights, adam: &AdamState, meta: &CheckpointMeta) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = checkpoint_path(dir, meta.epochs_done);
    weights.save_with_meta(&path, serde_json::to_value(meta)?)?;
    adam.save(&optimizer_path(&path))?;
    Ok(path)
}

/// Runs `config.epochs` epochs over `data` (shuffled per epoch), logging the
/// loss every step and validation IoU at each epoch end.
pub fn train_loop(
    config: &TrainConfig,
    data: &[LabeledImage],
    val: &[LabeledImage],
    opts: &TrainOptions<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    if let Some(bad) = data.iter().find(|d| d.gt.is_empty()) {
        return Err(Error::MalformedDataset(format!("{}: empty ground truth", bad.id)));
    }
    let (mut weights, mut adam, start_epoch, mut global_step) = match &opts.resume {
        Some(path) => {
            let (w, extra) = Weights::load_with_meta(path)?;
            let meta: CheckpointMeta = serde_json::from_value(extra)
                .map_err(|e| Error::Format(format!("{}: checkpoint meta: {e}", path.display())))?;
            if w.config != config.model {
                return Err(Error::InvalidConfig(
                    "checkpoint model config differs from the training config".into(),
                ));
            }
            let adam = AdamState::load(&optimizer_path(path))?;
            adam.check_matches(&w)?;
            (w, adam, meta.epochs_done, meta.global_step)
        }
        None => {
            let w = Weights::init(config.model.clone(), config.init_seed)?;
            let adam = AdamState::new(&w);
            (w, adam, 0, 0)
        }
    };

    let mut log_file = match &opts.log_path {
        Some(p) => {
            let fresh = opts.resume.is_none() || !p.exists();
            let mut f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(p)
                .map_err(|e| Error::io(p.as_path(), e))?;
            if fresh {
                writeln!(f, "{}", LogRow::CSV_HEADER).map_err(|e| Error::io(p.as_path(), e))?;
            }
            Some((f, p.clone()))
        }
        None => None,
    };

    let mut log = Vec::new();
    let steps_per_epoch = data.len().div_ceil(config.batch_size);
    for epoch in start_epoch..config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[
            config.rng_seed,
            epoch as u64,
        ])));
        for (s, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&LabeledImage> = chunk.iter().map(|&i| &data[i]).collect();
            let loss = train_step(&mut weights, &mut adam, &batch, config, epoch, global_step)?;
            global_step += 1;
            let val_iou = if s + 1 == steps_per_epoch && !val.is_empty() {
                Some(val_iou_1click(&weights, val)?)
            } else {
                None
            };
            let row = LogRow {
                epoch,
                step: global_step,
                loss,
                val_iou_1click: val_iou,
            };
            if let Some((f, p)) = log_file.as_mut() {
                writeln!(f, "{}", row.to_csv()).map_err(|e| Error::io(p.as_path(), e))?;
            }
            if let Some(cb) = opts.on_row {
                cb(&row);
            }
            log.push(row);
        }
        if let Some(dir) = &opts.checkpoint_dir {
            let meta = CheckpointMeta {
                epochs_done: epoch + 1,
                global_step,
                train_config: config.clone(),
            };
            save_checkpoint(dir, &weights, &adam, &meta)?;
        }
    }
    Ok(TrainOutcome { weights, log })
}
