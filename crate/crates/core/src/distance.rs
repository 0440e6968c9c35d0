//! Exact Euclidean distance transform.
//!
//! Separable lower-envelope-of-parabolas algorithm (one pass over columns,
//! one over rows) on squared distances. All intermediate squared distances are
//! integers held exactly in f64, so results are bit-identical to a brute-force
//! search.

use crate::mask::Mask2D;

const FAR: f64 = 1e20;

/// Per-pixel distance from each foreground pixel to the nearest pixel outside
/// the region. Pixels beyond the image border count as outside; background
/// pixels get 0.
pub fn distance_transform(mask: &Mask2D) -> Vec<f64> {
    squared_distance_transform(mask).into_iter().map(f64::sqrt).collect()
}

pub fn squared_distance_transform(mask: &Mask2D) -> Vec<f64> {
    let (h, w) = mask.dims();
    // one pixel of background padding on every side
    let (ph, pw) = (h + 2, w + 2);
    let mut grid = vec![0.0; ph * pw];
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) {
                grid[(r + 1) * pw + c + 1] = FAR;
            }
        }
    }
    let mut buf_f = vec![0.0; ph.max(pw)];
    let mut buf_d = vec![0.0; ph.max(pw)];
    let mut v = vec![0usize; ph.max(pw)];
    let mut z = vec![0.0; ph.max(pw) + 1];
    for c in 0..pw {
        for r in 0..ph {
            buf_f[r] = grid[r * pw + c];
        }
        envelope_1d(&buf_f[..ph], &mut buf_d[..ph], &mut v, &mut z);
        for r in 0..ph {
            grid[r * pw + c] = buf_d[r];
        }
    }
    for r in 0..ph {
        buf_f[..pw].copy_from_slice(&grid[r * pw..(r + 1) * pw]);
        envelope_1d(&buf_f[..pw], &mut buf_d[..pw], &mut v, &mut z);
        grid[r * pw..(r + 1) * pw].copy_from_slice(&buf_d[..pw]);
    }
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        out.extend_from_slice(&grid[(r + 1) * pw + 1..(r + 1) * pw + 1 + w]);
    }
    out
}

/// `d[q] = min_p (q - p)^2 + f[p]`.
fn envelope_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let qf = q as f64;
        loop {
            let p = v[k] as f64;
            let s = ((f[q] + qf * qf) - (f[v[k]] + p * p)) / (2.0 * qf - 2.0 * p);
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0: the new parabola dominates everything so far
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
            }
            break;
        }
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let p = v[k] as f64;
        *out = (qf - p) * (qf - p) + f[v[k]];
    }
}
