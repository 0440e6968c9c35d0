use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use iseg_ffi::*;

fn last_error() -> String {
    let p = iseg_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn new_model() -> *mut IsegModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { iseg_model_init(0, &mut m) }, IsegStatus::Ok);
    assert!(!m.is_null());
    m
}

fn stripes(h: usize, w: usize) -> Vec<f64> {
    (0..h * w).map(|i| if i % w < w / 2 { 0.2 } else { 0.8 }).collect()
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(iseg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_handles_are_rejected() {
    unsafe {
        assert_eq!(iseg_model_init(0, ptr::null_mut()), IsegStatus::NullPointer);
        assert_eq!(iseg_model_num_params(ptr::null()), 0);
        let img = stripes(32, 32);
        let mut out = vec![0.0; 32 * 32];
        let st = iseg_predict(ptr::null(), img.as_ptr(), 32, 32, ptr::null(), 0, out.as_mut_ptr());
        assert_eq!(st, IsegStatus::NullPointer);
        assert!(last_error().contains("model"));
        assert_eq!(iseg_session_undo(ptr::null_mut()), IsegStatus::NullPointer);
        iseg_model_free(ptr::null_mut());
        iseg_session_free(ptr::null_mut());
    }
}

#[test]
fn predict_matches_core_and_saves_round_trip() {
    let m = new_model();
    let (h, w) = (40, 24);
    let img = stripes(h, w);
    let clicks = [
        IsegClick {
            row: 3,
            col: 4,
            positive: 1,
        },
        IsegClick {
            row: 30,
            col: 20,
            positive: 0,
        },
    ];
    let mut probs = vec![0.0; h * w];
    unsafe {
        let st = iseg_predict(m, img.as_ptr(), h, w, clicks.as_ptr(), clicks.len(), probs.as_mut_ptr());
        assert_eq!(st, IsegStatus::Ok);
    }
    let weights = iseg::model::Weights::init(iseg::model::ModelConfig::default(), 0).unwrap();
    let image = iseg::mask::GrayF64::new(h, w, img.clone()).unwrap();
    let expected = iseg::model::predict_padded(
        &weights,
        &image,
        &[
            iseg::clicks::Click::positive(3, 4, 0),
            iseg::clicks::Click::negative(30, 20, 1),
        ],
    )
    .unwrap();
    assert_eq!(probs, expected);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("w.json").to_str().unwrap()).unwrap();
    let mut loaded = ptr::null_mut();
    unsafe {
        assert_eq!(iseg_model_save(m, path.as_ptr()), IsegStatus::Ok);
        assert_eq!(iseg_model_load(path.as_ptr(), &mut loaded), IsegStatus::Ok);
        assert_eq!(iseg_model_num_params(loaded), iseg_model_num_params(m));
        let mut again = vec![0.0; h * w];
        iseg_predict(loaded, img.as_ptr(), h, w, clicks.as_ptr(), 2, again.as_mut_ptr());
        assert_eq!(again, probs);
        iseg_model_free(loaded);
        iseg_model_free(m);
    }
}

#[test]
fn load_errors_carry_codes() {
    let missing = CString::new("/nonexistent/w.json").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { iseg_model_load(missing.as_ptr(), &mut m) }, IsegStatus::Io);
    assert!(m.is_null());
    assert!(last_error().contains("/nonexistent/w.json"));
}

#[test]
fn session_click_undo_cycle() {
    let m = new_model();
    let (h, w) = (32, 32);
    let img = stripes(h, w);
    let mut s = ptr::null_mut();
    unsafe {
        assert_eq!(iseg_session_new(m, img.as_ptr(), h, w, &mut s), IsegStatus::Ok);
        iseg_model_free(m);

        let mut empty = vec![9u8; h * w];
        assert_eq!(iseg_session_mask(s, 0.5, empty.as_mut_ptr(), h * w), IsegStatus::Ok);
        assert!(empty.iter().all(|&b| b == 0));

        assert_eq!(
            iseg_session_add_click(
                s,
                IsegClick {
                    row: 8,
                    col: 8,
                    positive: 1
                }
            ),
            IsegStatus::Ok
        );
        let mut one = vec![0.0; h * w];
        assert_eq!(iseg_session_probs(s, one.as_mut_ptr(), h * w), IsegStatus::Ok);
        assert_eq!(
            iseg_session_add_click(
                s,
                IsegClick {
                    row: 20,
                    col: 25,
                    positive: 0
                }
            ),
            IsegStatus::Ok
        );
        assert_eq!(iseg_session_click_count(s), 2);

        assert_eq!(
            iseg_session_add_click(
                s,
                IsegClick {
                    row: 0,
                    col: w,
                    positive: 1
                }
            ),
            IsegStatus::OutOfBounds
        );
        assert_eq!(iseg_session_click_count(s), 2);

        assert_eq!(iseg_session_undo(s), IsegStatus::Ok);
        let mut back = vec![0.0; h * w];
        iseg_session_probs(s, back.as_mut_ptr(), h * w);
        assert_eq!(back, one);

        assert_eq!(iseg_session_probs(s, back.as_mut_ptr(), 5), IsegStatus::DimMismatch);
        assert_eq!(iseg_session_undo(s), IsegStatus::Ok);
        assert_eq!(iseg_session_undo(s), IsegStatus::EmptyInput);
        iseg_session_free(s);
    }
}

#[test]
fn propagate_reproduces_fully_seeded_volume() {
    let (vol, gt) = iseg::propagation::gen_drifting_volume(4, 6, 32, 32).unwrap();
    let n = 32 * 32;
    let voxels: Vec<f64> = vol.slices.iter().flat_map(|s| s.data.iter().copied()).collect();
    let seeds: Vec<usize> = (0..6).collect();
    let seed_masks: Vec<u8> = gt.iter().flat_map(|m| m.bits().iter().map(|&b| u8::from(b))).collect();
    let mut out = vec![0u8; 6 * n];
    let mut prov = vec![99usize; 6];
    let st = unsafe {
        iseg_propagate(
            ptr::null(),
            IsegFeatureSource::RawPatch,
            voxels.as_ptr(),
            6,
            32,
            32,
            seeds.as_ptr(),
            seed_masks.as_ptr(),
            6,
            out.as_mut_ptr(),
            prov.as_mut_ptr(),
        )
    };
    assert_eq!(st, IsegStatus::Ok);
    assert_eq!(out, seed_masks);
    assert_eq!(prov, seeds);

    let st = unsafe {
        iseg_propagate(
            ptr::null(),
            IsegFeatureSource::EncoderStage2,
            voxels.as_ptr(),
            6,
            32,
            32,
            seeds.as_ptr(),
            seed_masks.as_ptr(),
            1,
            out.as_mut_ptr(),
            ptr::null_mut(),
        )
    };
    assert_eq!(st, IsegStatus::MissingWeights);

    let bad = [7usize];
    let st = unsafe {
        iseg_propagate(
            ptr::null(),
            IsegFeatureSource::RawPatch,
            voxels.as_ptr(),
            6,
            32,
            32,
            bad.as_ptr(),
            seed_masks.as_ptr(),
            1,
            out.as_mut_ptr(),
            ptr::null_mut(),
        )
    };
    assert_ne!(st, IsegStatus::Ok);
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

/// Directory holding the built `libiseg_ffi` next to this test binary.
fn lib_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    let deps = exe.parent().unwrap();
    for dir in [deps, deps.parent().unwrap()] {
        if dir.join("libiseg_ffi.a").is_file() {
            return dir.to_path_buf();
        }
    }
    panic!("libiseg_ffi.a not found near {}", exe.display());
}

fn cc(args: &[&str], cwd: &Path) {
    let st = Command::new("cc")
        .args(args)
        .current_dir(cwd)
        .status()
        .expect("cc on PATH");
    assert!(st.success(), "cc {args:?}");
}

#[test]
fn header_is_valid_c_and_cpp() {
    let inc = crate_dir().join("include");
    let hdr = inc.join("iseg.h");
    let text = std::fs::read_to_string(&hdr).unwrap();
    for sym in [
        "iseg_model_init",
        "iseg_session_add_click",
        "iseg_propagate",
        "ISEG_STATUS_OUT_OF_BOUNDS",
    ] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    cc(
        &[
            "-std=c99",
            "-Wall",
            "-Werror",
            "-fsyntax-only",
            "-x",
            "c",
            hdr.to_str().unwrap(),
        ],
        &inc,
    );
    cc(
        &["-Wall", "-Werror", "-fsyntax-only", "-x", "c++", hdr.to_str().unwrap()],
        &inc,
    );
}

#[test]
fn c_program_links_and_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let exe = tmp.path().join("smoke");
    let src = crate_dir().join("tests/c/smoke.c");
    let lib = lib_dir().join("libiseg_ffi.a");
    cc(
        &[
            "-std=c99",
            "-Wall",
            "-Werror",
            "-I",
            crate_dir().join("include").to_str().unwrap(),
            src.to_str().unwrap(),
            lib.to_str().unwrap(),
            "-lpthread",
            "-ldl",
            "-lm",
            "-o",
            exe.to_str().unwrap(),
        ],
        tmp.path(),
    );
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.trim(), format!("iseg {} ok", env!("CARGO_PKG_VERSION")));
}
