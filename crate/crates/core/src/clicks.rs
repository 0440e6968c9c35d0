//! Clicks: disk encoding into a two-channel map, error-driven click
//! simulation, and training-time perturbation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::components::{connected_components, Connectivity};
use crate::distance::distance_transform;
use crate::error::{Error, Result};
use crate::mask::Mask2D;

pub const DEFAULT_CLICK_RADIUS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    /// Channel index in a [`ClickMap`].
    pub fn channel(self) -> usize {
        match self {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Click {
    pub row: usize,
    pub col: usize,
    pub polarity: Polarity,
    /// 0-based placement index.
    pub ordinal: usize,
}

impl Click {
    pub fn positive(row: usize, col: usize, ordinal: usize) -> Self {
        Click {
            row,
            col,
            polarity: Polarity::Positive,
            ordinal,
        }
    }

    pub fn negative(row: usize, col: usize, ordinal: usize) -> Self {
        Click {
            row,
            col,
            polarity: Polarity::Negative,
            ordinal,
        }
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        if self.row >= height || self.col >= width {
            return Err(Error::OutOfBoundsClick {
                row: self.row,
                col: self.col,
                height,
                width,
            });
        }
        Ok(())
    }
}

/// Positive and negative disk channels, each `height x width`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClickMap {
    pub positive: Mask2D,
    pub negative: Mask2D,
}

impl ClickMap {
    pub fn empty(height: usize, width: usize) -> Self {
        ClickMap {
            positive: Mask2D::new(height, width),
            negative: Mask2D::new(height, width),
        }
    }

    pub fn channel(&self, polarity: Polarity) -> &Mask2D {
        match polarity {
            Polarity::Positive => &self.positive,
            Polarity::Negative => &self.negative,
        }
    }

    /// Interleaved `[H, W, 2]` values (positive channel first).
    pub fn to_hwc(&self) -> Vec<f64> {
        self.positive
            .bits()
            .iter()
            .zip(self.negative.bits())
            .flat_map(|(&p, &n)| [p as u8 as f64, n as u8 as f64])
            .collect()
    }
}

/// Rasterizes each click as a solid disk `{(r, c): (r-r0)^2 + (c-c0)^2 <= radius^2}`
/// into its polarity channel, clipped to the image.
pub fn encode_clicks(clicks: &[Click], height: usize, width: usize, radius: usize) -> Result<ClickMap> {
    let mut map = ClickMap::empty(height, width);
    let r2 = (radius * radius) as isize;
    let rad = radius as isize;
    for click in clicks {
        click.check_bounds(height, width)?;
        let channel = match click.polarity {
            Polarity::Positive => &mut map.positive,
            Polarity::Negative => &mut map.negative,
        };
        let (r0, c0) = (click.row as isize, click.col as isize);
        for dr in -rad..=rad {
            for dc in -rad..=rad {
                let (r, c) = (r0 + dr, c0 + dc);
                if dr * dr + dc * dc > r2 || r < 0 || c < 0 {
                    continue;
                }
                if (r as usize) < height && (c as usize) < width {
                    channel.set(r as usize, c as usize, true);
                }
            }
        }
    }
    Ok(map)
}

/// Places the next corrective click.
///
/// The polarity whose largest 8-connected error region (false negatives for
/// positive, false positives for negative) is bigger wins, positive on ties.
/// The click lands on that region's deepest pixel by distance transform,
/// raster-first on ties.
pub fn simulate_next_click(pred: &Mask2D, gt: &Mask2D, ordinal: usize) -> Result<Click> {
    simulate_next_click_with(pred, gt, ordinal, Connectivity::Eight)
}

pub fn simulate_next_click_with(
    pred: &Mask2D,
    gt: &Mask2D,
    ordinal: usize,
    connectivity: Connectivity,
) -> Result<Click> {
    pred.check_same_dims(gt)?;
    let fn_region = gt.and_not(pred)?;
    let fp_region = pred.and_not(gt)?;
    let fn_cc = connected_components(&fn_region, connectivity);
    let fp_cc = connected_components(&fp_region, connectivity);
    let fn_size = fn_cc.sizes().first().copied().unwrap_or(0);
    let fp_size = fp_cc.sizes().first().copied().unwrap_or(0);
    if fn_size == 0 && fp_size == 0 {
        return Err(Error::NoMisclassifiedPixels);
    }
    let (cc, polarity) = if fn_size >= fp_size {
        (fn_cc, Polarity::Positive)
    } else {
        (fp_cc, Polarity::Negative)
    };
    let region = cc.mask(1);
    let dist = distance_transform(&region);
    let mut best = 0;
    for (i, &d) in dist.iter().enumerate() {
        if d > dist[best] {
            best = i;
        }
    }
    let w = region.width();
    Ok(Click {
        row: best / w,
        col: best % w,
        polarity,
        ordinal,
    })
}

/// Shifts a click by a uniform offset in `[-max_offset, max_offset]^2`,
/// clamped to the image. Deterministic for a given seed.
pub fn perturb_click(click: Click, max_offset: usize, seed: u64, height: usize, width: usize) -> Click {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perturb_click_with(click, max_offset, &mut rng, height, width)
}

pub fn perturb_click_with<R: Rng>(click: Click, max_offset: usize, rng: &mut R, height: usize, width: usize) -> Click {
    if max_offset == 0 {
        return click;
    }
    let m = max_offset as i64;
    let dr = rng.random_range(-m..=m);
    let dc = rng.random_range(-m..=m);
    Click {
        row: (click.row as i64 + dr).clamp(0, height as i64 - 1) as usize,
        col: (click.col as i64 + dc).clamp(0, width as i64 - 1) as usize,
        ..click
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn radius_zero_sets_one_pixel() {
        let m = encode_clicks(&[Click::positive(3, 4, 0)], 8, 8, 0).unwrap();
        assert_eq!(m.positive.count(), 1);
        assert!(m.positive.get(3, 4));
        assert!(m.negative.is_empty());
    }

    #[test]
    fn disk_pixel_counts_match_offset_enumeration() {
        let enumerate = |r0: isize, c0: isize, rad: isize, h: isize, w: isize| {
            let mut n = 0;
            for dr in -rad..=rad {
                for dc in -rad..=rad {
                    let (r, c) = (r0 + dr, c0 + dc);
                    if dr * dr + dc * dc <= rad * rad && r >= 0 && c >= 0 && r < h && c < w {
                        n += 1;
                    }
                }
            }
            n
        };
        assert_eq!(enumerate(10, 10, 2, 32, 32), 13);
        assert_eq!(enumerate(0, 0, 2, 32, 32), 6);
        let interior = encode_clicks(&[Click::negative(10, 10, 0)], 32, 32, 2).unwrap();
        assert_eq!(interior.negative.count(), 13);
        let corner = encode_clicks(&[Click::positive(0, 0, 0)], 32, 32, 2).unwrap();
        assert_eq!(corner.positive.count(), 6);
    }

    #[test]
    fn out_of_bounds_click_is_rejected() {
        assert!(matches!(
            encode_clicks(&[Click::positive(8, 0, 0)], 8, 8, 2),
            Err(Error::OutOfBoundsClick { .. })
        ));
    }

    #[test]
    fn first_click_on_empty_prediction_hits_square_center() {
        let gt = Mask2D::from_fn(16, 16, |r, c| (4..9).contains(&r) && (6..11).contains(&c));
        let click = simulate_next_click(&Mask2D::new(16, 16), &gt, 0).unwrap();
        assert_eq!((click.row, click.col, click.polarity), (6, 8, Polarity::Positive));
    }

    #[test]
    fn bigger_false_positive_blob_gets_negative_click() {
        // FP: 3x3 block at (2..5, 2..5); FN: 2x2 block at (10..12, 10..12)
        let gt = Mask2D::from_fn(16, 16, |r, c| (10..12).contains(&r) && (10..12).contains(&c));
        let pred = Mask2D::from_fn(16, 16, |r, c| (2..5).contains(&r) && (2..5).contains(&c));
        let click = simulate_next_click(&pred, &gt, 3).unwrap();
        assert_eq!(click.polarity, Polarity::Negative);
        assert_eq!((click.row, click.col, click.ordinal), (3, 3, 3));
    }

    #[test]
    fn equal_sized_errors_prefer_positive() {
        let gt = Mask2D::from_fn(8, 8, |r, c| r == 1 && c == 1);
        let pred = Mask2D::from_fn(8, 8, |r, c| r == 6 && c == 6);
        let click = simulate_next_click(&pred, &gt, 0).unwrap();
        assert_eq!((click.row, click.col, click.polarity), (1, 1, Polarity::Positive));
    }

    #[test]
    fn perfect_prediction_has_no_click() {
        let gt = Mask2D::from_fn(8, 8, |r, _| r < 3);
        assert!(matches!(
            simulate_next_click(&gt, &gt, 0),
            Err(Error::NoMisclassifiedPixels)
        ));
    }

    #[test]
    fn perturbation_identity_and_determinism() {
        let c = Click::positive(5, 5, 2);
        assert_eq!(perturb_click(c, 0, 17, 10, 10), c);
        assert_eq!(perturb_click(c, 3, 17, 10, 10), perturb_click(c, 3, 17, 10, 10));
    }

    #[test]
    fn perturbation_stays_within_offset_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..1000 {
            let c = Click::negative(i % 7, (i * 3) % 7, 0);
            let p = perturb_click_with(c, 3, &mut rng, 7, 7);
            assert!(p.row.abs_diff(c.row) <= 3 && p.col.abs_diff(c.col) <= 3);
            assert!(p.row < 7 && p.col < 7);
            assert_eq!(p.polarity, c.polarity);
        }
    }

    fn click_strategy() -> impl Strategy<Value = Click> {
        (0usize..12, 0usize..12, any::<bool>()).prop_map(|(r, c, pos)| Click {
            row: r,
            col: c,
            polarity: if pos { Polarity::Positive } else { Polarity::Negative },
            ordinal: 0,
        })
    }

    proptest! {
        #[test]
        fn encoding_is_order_independent_and_idempotent(
            clicks in proptest::collection::vec(click_strategy(), 0..6),
            radius in 0usize..4,
        ) {
            let base = encode_clicks(&clicks, 12, 12, radius).unwrap();
            let mut rev = clicks.clone();
            rev.reverse();
            prop_assert_eq!(&encode_clicks(&rev, 12, 12, radius).unwrap(), &base);
            let mut doubled = clicks.clone();
            doubled.extend(clicks.iter().copied());
            prop_assert_eq!(&encode_clicks(&doubled, 12, 12, radius).unwrap(), &base);
        }

        #[test]
        fn simulated_click_lands_on_matching_error(
            pred_bits in proptest::collection::vec(any::<bool>(), 144),
            gt_bits in proptest::collection::vec(any::<bool>(), 144),
        ) {
            let pred = Mask2D::from_bits(12, 12, pred_bits).unwrap();
            let gt = Mask2D::from_bits(12, 12, gt_bits).unwrap();
            match simulate_next_click(&pred, &gt, 0) {
                Ok(c) => {
                    let (p, g) = (pred.get(c.row, c.col), gt.get(c.row, c.col));
                    prop_assert!(p != g);
                    prop_assert_eq!(c.polarity == Polarity::Positive, g && !p);
                }
                Err(Error::NoMisclassifiedPixels) => prop_assert_eq!(pred, gt),
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }
}
