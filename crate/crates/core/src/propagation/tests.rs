use proptest::prelude::*;

use super::*;

fn raw() -> PropagationConfig {
    PropagationConfig::default()
}

fn seeds_from(gt: &[Mask2D], at: &[usize]) -> Vec<(usize, Mask2D)> {
    at.iter().map(|&k| (k, gt[k].clone())).collect()
}

#[test]
fn raw_keys_are_unit_length_and_deterministic() {
    let (vol, _) = gen_drifting_volume(3, 4, 32, 36).unwrap();
    let k = extract_key(&vol.slices[0], &raw(), None).unwrap();
    assert_eq!((k.rows, k.cols), (8, 9));
    for i in 0..k.rows * k.cols {
        let n = k.cell(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
    assert_eq!(k, extract_key(&vol.slices[0], &raw(), None).unwrap());
}

#[test]
fn constant_slice_gives_equal_descriptors() {
    for v in [0.0, 0.4, 1.0] {
        let s = GrayF64::new(16, 16, vec![v; 256]).unwrap();
        let k = extract_key(&s, &raw(), None).unwrap();
        assert!((1..16).all(|i| k.cell(i) == k.cell(0)));
    }
}

#[test]
fn encoder_keys_need_weights() {
    let s = GrayF64::new(64, 64, vec![0.5; 4096]).unwrap();
    let cfg = PropagationConfig {
        feature_source: FeatureSource::EncoderStage2,
        ..raw()
    };
    assert!(matches!(extract_key(&s, &cfg, None), Err(Error::MissingWeights)));
    let w = Weights::init(crate::model::ModelConfig::default(), 0).unwrap();
    let k = extract_key(&s, &cfg, Some(&w)).unwrap();
    assert_eq!((k.rows, k.cols, k.dim), (8, 8, 64));
    for i in 0..64 {
        let n = k.cell(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}

fn grid(rows: usize, cols: usize, dim: usize, f: impl Fn(usize) -> Vec<f64>) -> KeyGrid {
    KeyGrid {
        rows,
        cols,
        dim,
        data: (0..rows * cols).flat_map(|i| normalize(f(i))).collect(),
    }
}

#[test]
fn readout_of_identical_key_with_top1_is_the_value() {
    let key = grid(2, 3, 4, |i| vec![1.0, i as f64, (i * i) as f64, 0.5]);
    let value = ValueGrid {
        rows: 2,
        cols: 3,
        stride: 2,
        data: (0..24).map(|i| (i % 5) as f64 / 4.0).collect(),
    };
    let mut mem = MemoryBank::new(8);
    mem.push(key.clone(), value.clone()).unwrap();
    assert_eq!(readout(&key, &mem, 1, 0.01, 0.0).unwrap(), value);
}

#[test]
fn all_ones_memory_reads_ones() {
    let key = grid(3, 3, 3, |i| vec![1.0, (i as f64).sin(), 0.2]);
    let query = grid(3, 3, 3, |i| vec![0.3, 1.0, i as f64]);
    let mut mem = MemoryBank::new(8);
    let ones = ValueGrid {
        rows: 3,
        cols: 3,
        stride: 2,
        data: vec![1.0; 36],
    };
    mem.push(key, ones).unwrap();
    assert!(readout(&query, &mem, 8, 0.5, 0.3)
        .unwrap()
        .data
        .iter()
        .all(|v| (v - 1.0).abs() < 1e-12));
}

#[test]
fn separated_keys_top1_takes_first_value() {
    // second key is far from the query and top_k = 1 drops it entirely
    let a = grid(1, 1, 2, |_| vec![1.0, 0.0]);
    let b = grid(1, 1, 2, |_| vec![0.0, 1.0]);
    let va = ValueGrid {
        rows: 1,
        cols: 1,
        stride: 1,
        data: vec![0.2],
    };
    let vb = ValueGrid {
        rows: 1,
        cols: 1,
        stride: 1,
        data: vec![0.9],
    };
    let mut mem = MemoryBank::new(8);
    mem.push(a.clone(), va).unwrap();
    mem.push(b, vb).unwrap();
    assert!((readout(&a, &mem, 1, 1.0, 0.0).unwrap().data[0] - 0.2).abs() < 1e-6);
    // with both kept the tail weight is 1 / (1 + e^(2 / 0.1))
    let both = readout(&a, &mem, 2, 0.1, 0.0).unwrap().data[0];
    let tail = 1.0 / (1.0 + 20f64.exp());
    assert!((both - (0.2 * (1.0 - tail) + 0.9 * tail)).abs() < 1e-12);
}

#[test]
fn empty_memory_is_an_error() {
    let q = grid(1, 1, 2, |_| vec![1.0, 0.0]);
    assert!(matches!(
        readout(&q, &MemoryBank::new(4), 1, 1.0, 0.0),
        Err(Error::EmptyMemory)
    ));
}

#[test]
fn memory_pins_seed_and_evicts_oldest() {
    let mk = |x: f64| {
        (
            grid(1, 1, 2, |_| vec![1.0, x]),
            ValueGrid {
                rows: 1,
                cols: 1,
                stride: 1,
                data: vec![x / 10.0],
            },
        )
    };
    let mut mem = MemoryBank::new(3);
    for x in 0..6 {
        let (k, v) = mk(x as f64);
        mem.push(k, v).unwrap();
    }
    assert_eq!(mem.len(), 3);
    let held: Vec<f64> = mem.entries().map(|(_, v)| v.data[0]).collect();
    assert_eq!(held, vec![0.0, 0.4, 0.5]);
    let (k, _) = mk(1.0);
    let bad = ValueGrid {
        rows: 2,
        cols: 1,
        stride: 1,
        data: vec![0.0; 2],
    };
    assert!(matches!(mem.push(k, bad), Err(Error::DimMismatch(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn affinity_rows_sum_to_one(
        costs in proptest::collection::vec(0.0f64..4.0, 1..40),
        top_k in 1usize..10,
        temp in 0.001f64..2.0,
    ) {
        let w = affinity_weights(&costs, top_k, temp);
        prop_assert_eq!(w.len(), top_k.min(costs.len()));
        let kept_max = w.iter().map(|&(j, _)| costs[j]).fold(f64::NEG_INFINITY, f64::max);
        let dropped = (0..costs.len()).filter(|j| w.iter().all(|x| x.0 != *j));
        for j in dropped {
            prop_assert!(costs[j] >= kept_max);
        }
        prop_assert!((w.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn readout_is_a_convex_combination(
        vals in proptest::collection::vec(0.0f64..=1.0, 2 * 4 * 4),
        qs in proptest::collection::vec(-1.0f64..1.0, 4 * 3),
        top_k in 1usize..12,
    ) {
        let mut mem = MemoryBank::new(4);
        for e in 0..2 {
            let key = grid(2, 2, 3, |i| vec![1.0, (e * 4 + i) as f64 * 0.3, -(i as f64)]);
            let v = ValueGrid { rows: 2, cols: 2, stride: 2, data: vals[e * 16..(e + 1) * 16].to_vec() };
            mem.push(key, v).unwrap();
        }
        let query = grid(2, 2, 3, |i| qs[i * 3..i * 3 + 3].to_vec());
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for v in readout(&query, &mem, top_k, 0.05, 0.1).unwrap().data {
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }
}

#[test]
fn value_grid_round_trip() {
    let m = Mask2D::from_fn(8, 12, |r, c| (r * 7 + c * 3) % 5 < 2);
    let v = ValueGrid::from_mask(&m, 4).unwrap();
    assert_eq!((v.rows, v.cols), (2, 3));
    assert_eq!(Mask2D::threshold(8, 12, &v.to_pixels(8, 12), 0.5).unwrap(), m);
    assert!(matches!(
        ValueGrid::from_mask(&m, 5),
        Err(Error::DivisibilityViolation(_))
    ));
}

#[test]
fn seed_helpers() {
    assert_eq!(evenly_spaced_seeds(32, 1), vec![16]);
    assert_eq!(evenly_spaced_seeds(32, 3), vec![8, 16, 24]);
    assert_eq!(evenly_spaced_seeds(160, 3), vec![40, 80, 120]);
    assert_eq!(evenly_spaced_seeds(32, 5), vec![5, 11, 16, 21, 27]);
    assert_eq!(nearest_seeds(7, &[1, 5]), vec![1, 1, 1, 1, 5, 5, 5]);
}

#[test]
fn identical_slices_reproduce_the_seed() {
    let (vol, gt) = gen_drifting_volume(11, 9, 30, 34).unwrap();
    let same = Volume3D::new(vec![vol.slices[4].clone(); 12]).unwrap();
    let out = propagate_volume(&same, &seeds_from(&vec![gt[4].clone(); 12], &[3]), &raw(), None).unwrap();
    for (k, m) in out.masks.iter().enumerate() {
        let diff = m.bits().iter().zip(gt[4].bits()).filter(|(a, b)| a != b).count();
        assert_eq!(diff, 0, "slice {k}");
    }
    assert_eq!(out.provenance, vec![3; 12]);
}

#[test]
fn seeding_every_slice_returns_seeds() {
    let (vol, gt) = gen_drifting_volume(2, 6, 32, 32).unwrap();
    let all: Vec<usize> = (0..6).collect();
    let out = propagate_volume(&vol, &seeds_from(&gt, &all), &raw(), None).unwrap();
    assert_eq!(out.masks, gt);
    assert_eq!(out.provenance, all);
}

#[test]
fn reversal_mirrors_output() {
    let (vol, gt) = gen_drifting_volume(5, 16, 32, 32).unwrap();
    let fwd = propagate_volume(&vol, &seeds_from(&gt, &[3, 10]), &raw(), None).unwrap();
    let mut rgt = gt.clone();
    rgt.reverse();
    let rev = propagate_volume(&vol.reversed(), &seeds_from(&rgt, &[5, 12]), &raw(), None).unwrap();
    let mut back = rev.masks.clone();
    back.reverse();
    assert_eq!(back, fwd.masks);
}

#[test]
fn seed_masks_are_kept_and_errors_reported() {
    let (vol, gt) = gen_drifting_volume(8, 10, 32, 32).unwrap();
    let odd = Mask2D::from_fn(32, 32, |r, _| r == 0);
    let out = propagate_volume(&vol, &[(2, odd.clone()), (7, gt[7].clone())], &raw(), None).unwrap();
    assert_eq!(out.masks[2], odd);
    assert_eq!(out.masks[7], gt[7]);
    assert!(matches!(
        propagate_volume(&vol, &[], &raw(), None),
        Err(Error::EmptyInput(_))
    ));
    assert!(propagate_volume(&vol, &seeds_from(&gt, &[1, 1]), &raw(), None).is_err());
    assert!(propagate_volume(&vol, &[(10, gt[0].clone())], &raw(), None).is_err());
}

#[test]
fn volume_metrics() {
    let (_, gt) = gen_drifting_volume(1, 5, 32, 32).unwrap();
    let m = evaluate_volume(&gt, &gt).unwrap();
    assert_eq!((m.dsc, m.iou, m.sen, m.ppv), (1.0, 1.0, 1.0, 1.0));
    let empty = vec![Mask2D::new(32, 32); 5];
    assert_eq!(evaluate_volume(&empty, &gt).unwrap().dsc, 0.0);
    assert!(matches!(evaluate_volume(&gt[..4], &gt), Err(Error::DimMismatch(_))));
}

#[test]
fn volume_io_round_trips_both_layouts() {
    let dir = tempfile::tempdir().unwrap();
    let (vol, gt) = gen_drifting_volume(4, 3, 20, 24).unwrap();
    let quantized = Volume3D::new(vol.slices.iter().map(|s| GrayF64::from_gray(&s.to_gray())).collect()).unwrap();
    for (path, layout) in [
        (dir.path().join("png"), VolumeLayout::PngDir),
        (dir.path().join("vol.raw"), VolumeLayout::Raw),
    ] {
        vol.save(&path, layout).unwrap();
        assert_eq!(VolumeLayout::of(&path), layout);
        assert_eq!(Volume3D::load(&path).unwrap(), quantized);
    }
    for (path, layout) in [
        (dir.path().join("masks"), VolumeLayout::PngDir),
        (dir.path().join("masks.raw"), VolumeLayout::Raw),
    ] {
        save_masks(&path, &gt, layout).unwrap();
        assert_eq!(load_masks(&path).unwrap(), gt);
    }
    assert!(dir.path().join("png").join("0002.png").exists());
    let side: VolumeDims =
        serde_json::from_str(&std::fs::read_to_string(sidecar_path(&dir.path().join("vol.raw"))).unwrap()).unwrap();
    assert_eq!(side, vol.dims());
}

#[test]
fn drifting_volumes_are_deterministic_and_nonempty() {
    let (a, ga) = gen_drifting_volume(9, 32, 64, 64).unwrap();
    let (b, gb) = gen_drifting_volume(9, 32, 64, 64).unwrap();
    assert_eq!((a, ga.clone()), (b, gb));
    assert!(ga.iter().all(|m| m.count() > 20));
    assert_ne!(ga[0], ga[31]);
}
