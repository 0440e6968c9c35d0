//! C ABI over the `iseg` engine.
//!
//! Every fallible call returns an [`IsegStatus`]; on failure the message is
//! available from [`iseg_last_error`] on the same thread. Objects are opaque
//! handles released with their `_free` function. Images are row-major `double`
//! buffers in [0, 1]; masks are row-major bytes, nonzero meaning foreground on
//! input and exactly 0 or 1 on output.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;
use std::sync::Arc;

use iseg::clicks::{Click, Polarity};
use iseg::mask::{GrayF64, Mask2D};
use iseg::model::{predict_padded, ModelConfig, Weights};
use iseg::propagation::{propagate_volume, FeatureSource, PropagationConfig, Volume3D};
use iseg::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IsegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimMismatch = 3,
    OutOfBounds = 4,
    EmptyInput = 5,
    Io = 6,
    Format = 7,
    MissingWeights = 8,
    Numeric = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IsegFeatureSource {
    RawPatch = 0,
    EncoderStage2 = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct IsegClick {
    pub row: usize,
    pub col: usize,
    /// Nonzero for a foreground click.
    pub positive: u8,
}

/// Loaded model weights.
pub struct IsegModel {
    weights: Arc<Weights>,
}

/// Single-image click session. Holds a reference to its model's weights, so
/// the model handle may be freed first.
pub struct IsegSession {
    weights: Arc<Weights>,
    image: GrayF64,
    clicks: Vec<Click>,
    probs: Vec<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(IsegStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::DimMismatch(_) | Error::DivisibilityViolation(_) => IsegStatus::DimMismatch,
            Error::OutOfBoundsClick { .. } => IsegStatus::OutOfBounds,
            Error::EmptyInput(_) | Error::EmptyGroundTruth | Error::EmptyMemory | Error::NoMisclassifiedPixels => {
                IsegStatus::EmptyInput
            }
            Error::InvalidConfig(_) => IsegStatus::InvalidArgument,
            Error::Io { .. } => IsegStatus::Io,
            Error::Format(_) | Error::Json(_) | Error::Image(_) | Error::MalformedDataset(_) => IsegStatus::Format,
            Error::MissingWeights => IsegStatus::MissingWeights,
            Error::NonFiniteInput(_) | Error::NonFiniteLoss { .. } | Error::NonScalarLoss(_) => IsegStatus::Numeric,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: IsegStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NUL removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> IsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IsegStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("internal panic: {msg}"));
            IsegStatus::Panic
        }
    }
}

unsafe fn in_slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(IsegStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(IsegStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(IsegStatus::NullPointer, format!("{what} is null")))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(fail(IsegStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| fail(IsegStatus::InvalidArgument, "path is not UTF-8"))
}

fn area(height: usize, width: usize) -> Result<usize, Failure> {
    if height == 0 || width == 0 {
        return Err(fail(IsegStatus::EmptyInput, "zero-sized image"));
    }
    height
        .checked_mul(width)
        .ok_or_else(|| fail(IsegStatus::InvalidArgument, "image size overflows"))
}

unsafe fn image_arg(data: *const f64, height: usize, width: usize) -> Result<GrayF64, Failure> {
    let n = area(height, width)?;
    let pixels = in_slice(data, n, "image")?;
    Ok(GrayF64::new(height, width, pixels.to_vec())?)
}

fn to_click(c: &IsegClick, ordinal: usize) -> Click {
    Click {
        row: c.row,
        col: c.col,
        polarity: if c.positive != 0 {
            Polarity::Positive
        } else {
            Polarity::Negative
        },
        ordinal,
    }
}

fn put_handle<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(IsegStatus::NullPointer, "output handle pointer is null"));
    }
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn iseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn iseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Fresh weights for the default architecture.
///
/// # Safety
/// `out` must be a valid pointer to a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn iseg_model_init(seed: u64, out: *mut *mut IsegModel) -> IsegStatus {
    guard(|| {
        let weights = Weights::init(ModelConfig::default(), seed)?;
        put_handle(
            out,
            IsegModel {
                weights: Arc::new(weights),
            },
        )
    })
}

/// Loads a weights manifest written by `iseg train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn iseg_model_load(path: *const c_char, out: *mut *mut IsegModel) -> IsegStatus {
    guard(|| {
        let weights = Weights::load(path_arg(path)?)?;
        put_handle(
            out,
            IsegModel {
                weights: Arc::new(weights),
            },
        )
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn iseg_model_save(model: *const IsegModel, path: *const c_char) -> IsegStatus {
    guard(|| {
        let m = handle(model, "model")?;
        Ok(m.weights.save(path_arg(path)?)?)
    })
}

/// Number of scalar parameters, 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn iseg_model_num_params(model: *const IsegModel) -> usize {
    model.as_ref().map_or(0, |m| m.weights.num_params())
}

/// # Safety
/// `model` must be null or an unfreed handle from this library.
#[no_mangle]
pub unsafe extern "C" fn iseg_model_free(model: *mut IsegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Foreground probabilities for `image` given `clicks` (ordinals follow the
/// array order). `out_probs` receives `height * width` values.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn iseg_predict(
    model: *const IsegModel,
    image: *const f64,
    height: usize,
    width: usize,
    clicks: *const IsegClick,
    n_clicks: usize,
    out_probs: *mut f64,
) -> IsegStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let img = image_arg(image, height, width)?;
        let clicks: Vec<Click> = in_slice(clicks, n_clicks, "clicks")?
            .iter()
            .enumerate()
            .map(|(i, c)| to_click(c, i))
            .collect();
        let probs = predict_padded(&m.weights, &img, &clicks)?;
        out_slice(out_probs, probs.len(), "out_probs")?.copy_from_slice(&probs);
        Ok(())
    })
}

/// Starts a click session on a copy of `image`.
///
/// # Safety
/// `image` must hold `height * width` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn iseg_session_new(
    model: *const IsegModel,
    image: *const f64,
    height: usize,
    width: usize,
    out: *mut *mut IsegSession,
) -> IsegStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let img = image_arg(image, height, width)?;
        let n = height * width;
        put_handle(
            out,
            IsegSession {
                weights: Arc::clone(&m.weights),
                image: img,
                clicks: Vec::new(),
                probs: vec![0.0; n],
            },
        )
    })
}

fn recompute(s: &mut IsegSession) -> Result<(), Failure> {
    s.probs = if s.clicks.is_empty() {
        vec![0.0; s.image.height * s.image.width]
    } else {
        predict_padded(&s.weights, &s.image, &s.clicks)?
    };
    Ok(())
}

/// Adds a click and reruns the model on the full click history.
///
/// # Safety
/// `session` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn iseg_session_add_click(session: *mut IsegSession, click: IsegClick) -> IsegStatus {
    guard(|| {
        let s = session
            .as_mut()
            .ok_or_else(|| fail(IsegStatus::NullPointer, "session is null"))?;
        let c = to_click(&click, s.clicks.len());
        c.check_bounds(s.image.height, s.image.width)?;
        s.clicks.push(c);
        if let Err(e) = recompute(s) {
            s.clicks.pop();
            return Err(e);
        }
        Ok(())
    })
}

/// Removes the last click; `ISEG_STATUS_EMPTY_INPUT` when there is none.
///
/// # Safety
/// `session` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn iseg_session_undo(session: *mut IsegSession) -> IsegStatus {
    guard(|| {
        let s = session
            .as_mut()
            .ok_or_else(|| fail(IsegStatus::NullPointer, "session is null"))?;
        if s.clicks.pop().is_none() {
            return Err(fail(IsegStatus::EmptyInput, "no click to undo"));
        }
        recompute(s)
    })
}

/// # Safety
/// `session` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn iseg_session_click_count(session: *const IsegSession) -> usize {
    session.as_ref().map_or(0, |s| s.clicks.len())
}

/// Current probabilities; `len` must equal `height * width`.
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn iseg_session_probs(session: *const IsegSession, out: *mut f64, len: usize) -> IsegStatus {
    guard(|| {
        let s = handle(session, "session")?;
        if len != s.probs.len() {
            return Err(fail(
                IsegStatus::DimMismatch,
                format!("buffer {len} != {}", s.probs.len()),
            ));
        }
        out_slice(out, len, "out")?.copy_from_slice(&s.probs);
        Ok(())
    })
}

/// Current mask thresholded at `threshold`, one byte per pixel.
///
/// # Safety
/// `out` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn iseg_session_mask(
    session: *const IsegSession,
    threshold: f64,
    out: *mut u8,
    len: usize,
) -> IsegStatus {
    guard(|| {
        let s = handle(session, "session")?;
        if len != s.probs.len() {
            return Err(fail(
                IsegStatus::DimMismatch,
                format!("buffer {len} != {}", s.probs.len()),
            ));
        }
        for (o, &p) in out_slice(out, len, "out")?.iter_mut().zip(&s.probs) {
            *o = u8::from(p >= threshold);
        }
        Ok(())
    })
}

/// # Safety
/// `session` must be null or an unfreed handle from this library.
#[no_mangle]
pub unsafe extern "C" fn iseg_session_free(session: *mut IsegSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Propagates seed masks through a `depth x height x width` volume with the
/// default settings. `seed_masks` holds `n_seeds` masks back to back;
/// `out_masks` receives `depth` masks and, when non-null, `out_provenance`
/// the seed slice each slice was propagated from. `model` may be null for
/// `ISEG_FEATURE_SOURCE_RAW_PATCH`.
///
/// # Safety
/// Buffers must hold the element counts described above.
#[no_mangle]
pub unsafe extern "C" fn iseg_propagate(
    model: *const IsegModel,
    feature_source: IsegFeatureSource,
    volume: *const f64,
    depth: usize,
    height: usize,
    width: usize,
    seed_slices: *const usize,
    seed_masks: *const u8,
    n_seeds: usize,
    out_masks: *mut u8,
    out_provenance: *mut usize,
) -> IsegStatus {
    guard(|| {
        let n = area(height, width)?;
        if depth == 0 {
            return Err(fail(IsegStatus::EmptyInput, "zero-depth volume"));
        }
        let total = n
            .checked_mul(depth)
            .ok_or_else(|| fail(IsegStatus::InvalidArgument, "volume size overflows"))?;
        let voxels = in_slice(volume, total, "volume")?;
        let slices = voxels
            .chunks(n)
            .map(|c| GrayF64::new(height, width, c.to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        let vol = Volume3D::new(slices)?;

        let idx = in_slice(seed_slices, n_seeds, "seed_slices")?;
        let bits = in_slice(seed_masks, n_seeds * n, "seed_masks")?;
        let seeds = idx
            .iter()
            .zip(bits.chunks(n))
            .map(|(&k, m)| {
                Ok((
                    k,
                    Mask2D::from_bits(height, width, m.iter().map(|&b| b != 0).collect())?,
                ))
            })
            .collect::<Result<Vec<_>, Error>>()?;

        let weights = model.as_ref().map(|m| &*m.weights);
        let config = PropagationConfig {
            feature_source: match feature_source {
                IsegFeatureSource::RawPatch => FeatureSource::RawPatch,
                IsegFeatureSource::EncoderStage2 => FeatureSource::EncoderStage2,
            },
            ..PropagationConfig::default()
        };
        let result = propagate_volume(&vol, &seeds, &config, weights)?;

        let out = out_slice(out_masks, total, "out_masks")?;
        for (dst, m) in out.chunks_mut(n).zip(&result.masks) {
            for (o, &b) in dst.iter_mut().zip(m.bits()) {
                *o = u8::from(b);
            }
        }
        if !out_provenance.is_null() {
            slice::from_raw_parts_mut(out_provenance, depth).copy_from_slice(&result.provenance);
        }
        Ok(())
    })
}
