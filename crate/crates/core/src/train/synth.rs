//! Synthetic blob images and training-time augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{GrayF64, Mask2D};
use crate::tensor::resize_forward;

pub const NOISE_STD: f64 = 0.05;
pub const MIN_SYNTH_SIDE: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub image: GrayF64,
    pub gt: Mask2D,
    pub generator_seed: u64,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        theta: f64,
    },
    RoundedRect {
        cy: f64,
        cx: f64,
        hy: f64,
        hx: f64,
        radius: f64,
        theta: f64,
    },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        let local = |cy: f64, cx: f64, theta: f64| {
            let (dy, dx) = (y - cy, x - cx);
            let (s, c) = theta.sin_cos();
            (c * dy - s * dx, s * dy + c * dx)
        };
        match *self {
            Shape::Ellipse { cy, cx, ry, rx, theta } => {
                let (u, v) = local(cy, cx, theta);
                (u / ry).powi(2) + (v / rx).powi(2) <= 1.0
            }
            Shape::RoundedRect {
                cy,
                cx,
                hy,
                hx,
                radius,
                theta,
            } => {
                let (u, v) = local(cy, cx, theta);
                let qy = u.abs() - (hy - radius);
                let qx = v.abs() - (hx - radius);
                let outside = qy.max(0.0).hypot(qx.max(0.0));
                outside + qy.max(qx).min(0.0) <= radius
            }
        }
    }

    fn center(&self) -> (f64, f64) {
        match *self {
            Shape::Ellipse { cy, cx, .. } | Shape::RoundedRect { cy, cx, .. } => (cy, cx),
        }
    }
}

/// Intensity offset from `bg` by a contrast in `[0.25, 0.45]`, upward or
/// downward, staying inside `[0.05, 0.95]`.
fn contrast_intensity(bg: f64, rng: &mut ChaCha8Rng) -> f64 {
    let delta = rng.random_range(0.25..=0.45);
    let up_ok = bg + delta <= 0.95;
    let down_ok = bg - delta >= 0.05;
    let up = match (up_ok, down_ok) {
        (true, true) => rng.random_bool(0.5),
        (true, false) => true,
        (false, true) => false,
        (false, false) => bg < 0.5,
    };
    if up {
        bg + delta
    } else {
        bg - delta
    }
}

/// One target blob (ellipse or rounded rectangle) on a shaded background,
/// 0 to 3 non-touching distractor blobs that are not part of the ground
/// truth, and additive Gaussian noise. Deterministic per seed.
pub fn gen_synthetic(seed: u64, height: usize, width: usize) -> Result<SynthSample> {
    if height < MIN_SYNTH_SIDE || width < MIN_SYNTH_SIDE {
        return Err(Error::InvalidConfig(format!(
            "synthetic images need sides >= {MIN_SYNTH_SIDE}, got {height}x{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f64, width as f64);
    let s = h.min(w);

    let bg = rng.random_range(0.15..=0.85);
    let (gy, gx) = (rng.random_range(-0.1..=0.1), rng.random_range(-0.1..=0.1));

    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let (target, reach) = if rng.random_bool(0.5) {
        let ry = rng.random_range(0.1 * s..=0.3 * s);
        let rx = rng.random_range(0.1 * s..=0.3 * s);
        (
            Shape::Ellipse {
                cy: 0.0,
                cx: 0.0,
                ry,
                rx,
                theta,
            },
            ry.max(rx),
        )
    } else {
        let hy = rng.random_range(0.1 * s..=0.27 * s);
        let hx = rng.random_range(0.1 * s..=0.27 * s);
        let radius = rng.random_range(0.0..=0.5 * hy.min(hx));
        (
            Shape::RoundedRect {
                cy: 0.0,
                cx: 0.0,
                hy,
                hx,
                radius,
                theta,
            },
            hy.hypot(hx),
        )
    };
    let cy = rng.random_range(reach + 1.0..=h - 2.0 - reach);
    let cx = rng.random_range(reach + 1.0..=w - 2.0 - reach);
    let target = match target {
        Shape::Ellipse { ry, rx, theta, .. } => Shape::Ellipse { cy, cx, ry, rx, theta },
        Shape::RoundedRect {
            hy, hx, radius, theta, ..
        } => Shape::RoundedRect {
            cy,
            cx,
            hy,
            hx,
            radius,
            theta,
        },
    };
    let target_value = contrast_intensity(bg, &mut rng);

    let mut distractors: Vec<(Shape, f64)> = Vec::new();
    let count = rng.random_range(0..=3usize);
    for _ in 0..count {
        for _ in 0..20 {
            let ry = rng.random_range(0.05 * s..=0.15 * s);
            let rx = rng.random_range(0.05 * s..=0.15 * s);
            let r = ry.max(rx);
            let dy = rng.random_range(r..=h - 1.0 - r);
            let dx = rng.random_range(r..=w - 1.0 - r);
            let th = rng.random_range(0.0..std::f64::consts::PI);
            let clear_of = |c: (f64, f64), other: f64| (dy - c.0).hypot(dx - c.1) > r + other + 2.0;
            // distractors may overlap each other but never touch the target
            if clear_of(target.center(), reach) {
                let shape = Shape::Ellipse {
                    cy: dy,
                    cx: dx,
                    ry,
                    rx,
                    theta: th,
                };
                let value = contrast_intensity(bg, &mut rng);
                distractors.push((shape, value));
                break;
            }
        }
    }

    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut data = Vec::with_capacity(height * width);
    let mut gt = Mask2D::new(height, width);
    for r in 0..height {
        for c in 0..width {
            let (y, x) = (r as f64, c as f64);
            let mut v = bg + gy * (y / h - 0.5) + gx * (x / w - 0.5);
            for (shape, value) in &distractors {
                if shape.contains(y, x) {
                    v = *value;
                }
            }
            if target.contains(y, x) {
                v = target_value;
                gt.set(r, c, true);
            }
            v += noise.sample(&mut rng);
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Ok(SynthSample {
        image: GrayF64::new(height, width, data)?,
        gt,
        generator_seed: seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub crop_h: usize,
    pub crop_w: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_h: 64,
            crop_w: 64,
            scale_min: 0.75,
            scale_max: 1.4,
            flip: true,
        }
    }
}

pub const CROP_RETRIES: usize = 10;

pub fn flip_horizontal(image: &GrayF64, gt: &Mask2D) -> (GrayF64, Mask2D) {
    let (h, w) = (image.height, image.width);
    let data = (0..h * w).map(|i| image.data[(i / w) * w + (w - 1 - i % w)]).collect();
    let mask = Mask2D::from_fn(h, w, |r, c| gt.get(r, w - 1 - c));
    (
        GrayF64 {
            height: h,
            width: w,
            data,
        },
        mask,
    )
}

fn rescale(image: &GrayF64, gt: &Mask2D, nh: usize, nw: usize) -> (GrayF64, Mask2D) {
    let (h, w) = (image.height, image.width);
    let data = resize_forward(&image.data, h, w, 1, nh, nw);
    let soft = resize_forward(&gt.to_f64(), h, w, 1, nh, nw);
    let mask = Mask2D::threshold(nh, nw, &soft, 0.5).expect("dims from resize");
    (
        GrayF64 {
            height: nh,
            width: nw,
            data,
        },
        mask,
    )
}

/// Edge-replicates the image (mask stays background) so both sides are at
/// least the crop size, keeping the content centered.
fn pad_to(image: &GrayF64, gt: &Mask2D, min_h: usize, min_w: usize) -> (GrayF64, Mask2D) {
    let (h, w) = (image.height, image.width);
    let (ph, pw) = (h.max(min_h), w.max(min_w));
    if (ph, pw) == (h, w) {
        return (image.clone(), gt.clone());
    }
    let (oy, ox) = ((ph - h) / 2, (pw - w) / 2);
    let src = |r: usize, c: usize| {
        let rr = (r as isize - oy as isize).clamp(0, h as isize - 1) as usize;
        let cc = (c as isize - ox as isize).clamp(0, w as isize - 1) as usize;
        (rr, cc)
    };
    let data = (0..ph * pw)
        .map(|i| {
            let (rr, cc) = src(i / pw, i % pw);
            image.data[rr * w + cc]
        })
        .collect();
    let mask = Mask2D::from_fn(ph, pw, |r, c| {
        r >= oy && c >= ox && r - oy < h && c - ox < w && gt.get(r - oy, c - ox)
    });
    (
        GrayF64 {
            height: ph,
            width: pw,
            data,
        },
        mask,
    )
}

fn crop(image: &GrayF64, gt: &Mask2D, y: usize, x: usize, ch: usize, cw: usize) -> (GrayF64, Mask2D) {
    let w = image.width;
    let mut data = Vec::with_capacity(ch * cw);
    for r in y..y + ch {
        data.extend_from_slice(&image.data[r * w + x..r * w + x + cw]);
    }
    let mask = Mask2D::from_fn(ch, cw, |r, c| gt.get(y + r, x + c));
    (
        GrayF64 {
            height: ch,
            width: cw,
            data,
        },
        mask,
    )
}

/// Random flip, rescale and crop applied identically to image and mask.
///
/// Crops with an empty mask are redrawn up to [`CROP_RETRIES`] times; after
/// that the crop is centered on the foreground pixel nearest the mask
/// centroid.
pub fn augment(image: &GrayF64, gt: &Mask2D, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<(GrayF64, Mask2D)> {
    gt.check_same_dims(&Mask2D::new(image.height, image.width))?;
    if cfg.crop_h == 0 || cfg.crop_w == 0 || !(cfg.scale_min > 0.0 && cfg.scale_min <= cfg.scale_max) {
        return Err(Error::InvalidConfig(format!("augmentation {cfg:?}")));
    }
    let (mut img, mut mask) = if cfg.flip && rng.random_bool(0.5) {
        flip_horizontal(image, gt)
    } else {
        (image.clone(), gt.clone())
    };
    let scale = if cfg.scale_min == cfg.scale_max {
        cfg.scale_min
    } else {
        rng.random_range(cfg.scale_min..=cfg.scale_max)
    };
    let nh = ((img.height as f64 * scale).round() as usize).max(1);
    let nw = ((img.width as f64 * scale).round() as usize).max(1);
    if (nh, nw) != (img.height, img.width) {
        let (si, sm) = rescale(&img, &mask, nh, nw);
        // a blob that vanishes when shrunk keeps its original scale
        if !sm.is_empty() || mask.is_empty() {
            img = si;
            mask = sm;
        }
    }
    let (img, mask) = pad_to(&img, &mask, cfg.crop_h, cfg.crop_w);
    let (ch, cw) = (cfg.crop_h, cfg.crop_w);
    let (max_y, max_x) = (img.height - ch, img.width - cw);
    for _ in 0..CROP_RETRIES {
        let y = rng.random_range(0..=max_y);
        let x = rng.random_range(0..=max_x);
        let (ci, cm) = crop(&img, &mask, y, x, ch, cw);
        if !cm.is_empty() {
            return Ok((ci, cm));
        }
    }
    let (cy, cx) = anchor_pixel(&mask).unwrap_or((img.height / 2, img.width / 2));
    let y = cy.saturating_sub(ch / 2).min(max_y);
    let x = cx.saturating_sub(cw / 2).min(max_x);
    Ok(crop(&img, &mask, y, x, ch, cw))
}

fn anchor_pixel(mask: &Mask2D) -> Option<(usize, usize)> {
    let w = mask.width();
    let fg: Vec<(usize, usize)> = mask
        .bits()
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| (i / w, i % w))
        .collect();
    if fg.is_empty() {
        return None;
    }
    let n = fg.len() as f64;
    let my = fg.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let mx = fg.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    fg.into_iter().min_by(|a, b| {
        let da = (a.0 as f64 - my).hypot(a.1 as f64 - mx);
        let db = (b.0 as f64 - my).hypot(b.1 as f64 - mx);
        da.total_cmp(&db)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::components::{connected_components, Connectivity};

    #[test]
    fn same_seed_same_sample() {
        assert_eq!(gen_synthetic(17, 64, 64).unwrap(), gen_synthetic(17, 64, 64).unwrap());
        assert_ne!(gen_synthetic(17, 64, 64).unwrap(), gen_synthetic(18, 64, 64).unwrap());
    }

    #[test]
    fn too_small_rejected() {
        assert!(gen_synthetic(0, 31, 64).is_err());
    }

    #[test]
    fn generator_sweep_fraction_and_connectivity() {
        for (h, w) in [(64, 64), (48, 64)] {
            for seed in 0..1000 {
                let s = gen_synthetic(seed, h, w).unwrap();
                let frac = s.gt.count() as f64 / (h * w) as f64;
                assert!((0.02..=0.5).contains(&frac), "seed {seed} {h}x{w}: fraction {frac}");
                let cc = connected_components(&s.gt, Connectivity::Eight);
                assert_eq!(cc.len(), 1, "seed {seed} {h}x{w}");
                assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn identity_augmentation_is_noop() {
        let s = gen_synthetic(3, 64, 64).unwrap();
        let cfg = AugmentConfig {
            crop_h: 64,
            crop_w: 64,
            scale_min: 1.0,
            scale_max: 1.0,
            flip: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (img, gt) = augment(&s.image, &s.gt, &cfg, &mut rng).unwrap();
        assert_eq!(img, s.image);
        assert_eq!(gt, s.gt);
    }

    #[test]
    fn flip_is_an_involution() {
        let s = gen_synthetic(4, 40, 56).unwrap();
        let (i1, m1) = flip_horizontal(&s.image, &s.gt);
        assert_ne!(m1, s.gt);
        let (i2, m2) = flip_horizontal(&i1, &m1);
        assert_eq!((i2, m2), (s.image, s.gt));
    }

    #[test]
    fn augmented_masks_never_empty() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for seed in 0..1000 {
            let s = gen_synthetic(seed % 97, 64, 64).unwrap();
            let (img, gt) = augment(&s.image, &s.gt, &cfg, &mut rng).unwrap();
            assert_eq!((img.height, img.width), (64, 64));
            assert!(!gt.is_empty(), "draw {seed}");
        }
    }

    #[test]
    fn fallback_crop_centers_on_blob() {
        // a single foreground pixel in a corner of a large image
        let (h, w) = (200, 200);
        let image = GrayF64::new(h, w, vec![0.5; h * w]).unwrap();
        let gt = Mask2D::from_fn(h, w, |r, c| r == 190 && c == 7);
        let cfg = AugmentConfig {
            crop_h: 32,
            crop_w: 32,
            scale_min: 1.0,
            scale_max: 1.0,
            flip: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, m) = augment(&image, &gt, &cfg, &mut rng).unwrap();
        assert_eq!(m.count(), 1);
    }
}
