//! Connected-component labeling of binary masks.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::mask::Mask2D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
        }
    }
}

/// Labeled foreground. Label 0 is background; labels `1..=len()` are ordered
/// by decreasing size, ties broken by the raster-first pixel of the component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Components {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    sizes: Vec<usize>,
    seeds: Vec<(usize, usize)>,
}

impl Components {
    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn label_at(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Size of component `label` (1-based).
    pub fn size(&self, label: u32) -> usize {
        self.sizes[label as usize - 1]
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Raster-first pixel of component `label`.
    pub fn seed(&self, label: u32) -> (usize, usize) {
        self.seeds[label as usize - 1]
    }

    pub fn mask(&self, label: u32) -> Mask2D {
        Mask2D::from_bits(
            self.height,
            self.width,
            self.labels.iter().map(|&l| l == label).collect(),
        )
        .expect("dims come from a valid mask")
    }
}

pub fn connected_components(mask: &Mask2D, connectivity: Connectivity) -> Components {
    let (h, w) = mask.dims();
    let mut raw = vec![0u32; h * w];
    let mut sizes = Vec::new();
    let mut seeds = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.bits()[start] || raw[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        raw[start] = label;
        queue.push_back(start);
        let mut size = 0;
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (r, c) = ((p / w) as isize, (p % w) as isize);
            for &(dr, dc) in connectivity.offsets() {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let q = nr as usize * w + nc as usize;
                if mask.bits()[q] && raw[q] == 0 {
                    raw[q] = label;
                    queue.push_back(q);
                }
            }
        }
        sizes.push(size);
        seeds.push((start / w, start % w));
    }

    // Raster discovery order already breaks ties by seed; a stable sort on
    // size keeps it.
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]));
    let mut relabel = vec![0u32; sizes.len() + 1];
    for (new, &old) in order.iter().enumerate() {
        relabel[old + 1] = new as u32 + 1;
    }
    Components {
        height: h,
        width: w,
        labels: raw.iter().map(|&l| relabel[l as usize]).collect(),
        sizes: order.iter().map(|&i| sizes[i]).collect(),
        seeds: order.iter().map(|&i| seeds[i]).collect(),
    }
}
