//! C ABI over the `piza` library.
//!
//! Every fallible function returns a [`PizaStatus`]; on failure the message
//! is kept per thread and can be copied out with
//! [`piza_last_error_message`]. Handles are opaque and must be released
//! with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use piza::evaluation::{mean_accuracy_from_ious, window_count, WindowConfig};
use piza::geometry::{iou, BBox, ImageSize, RgbImage};
use piza::inference::{single_shot, zoom_infer, InferConfig};
use piza::localizer::ToyModel;
use piza::prior::{fit_kde, Bandwidth, RatioDistribution};
use piza::search::{build_process, ExponentMode, GenConfig};
use piza::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PizaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    BufferTooSmall = 5,
    Numeric = 6,
    Panic = 7,
}

/// Axis-aligned box in pixel coordinates, `x0 < x1`, `y0 < y1`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PizaBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<BBox> for PizaBox {
    fn from(b: BBox) -> Self {
        PizaBox {
            x0: b.x0,
            y0: b.y0,
            x1: b.x1,
            y1: b.y1,
        }
    }
}

impl PizaBox {
    fn to_bbox(self) -> piza::Result<BBox> {
        BBox::new(self.x0, self.y0, self.x1, self.y1)
    }
}

/// Search-process generation settings.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PizaGenParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda2_growth: f64,
    pub min_edge: f64,
    pub t_max: u32,
    pub max_retries: u32,
    /// Nonzero: unit exponents; zero: decaying-weight exponents.
    pub uniform_exponent: u8,
}

/// Fitted area-ratio distribution.
pub struct PizaPrior {
    dist: RatioDistribution,
}

/// Trained toy localizer, optionally with the zoom module.
pub struct PizaModel {
    model: ToyModel,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> PizaStatus {
    match e {
        Error::Io { .. } | Error::Image(_) => PizaStatus::Io,
        Error::Parse { .. } | Error::Json(_) => PizaStatus::Parse,
        Error::NonFinite(_) | Error::SamplingExhausted(_) => PizaStatus::Numeric,
        _ => PizaStatus::InvalidArgument,
    }
}

fn guard<F: FnOnce() -> Result<(), (PizaStatus, String)>>(f: F) -> PizaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PizaStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PizaStatus::Panic
        }
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, (PizaStatus, String)>;
}

impl<T> OrStatus<T> for piza::Result<T> {
    fn or_status(self) -> Result<T, (PizaStatus, String)> {
        self.map_err(|e| (status_of(&e), e.to_string()))
    }
}

fn null(what: &str) -> (PizaStatus, String) {
    (PizaStatus::NullPointer, format!("{what} is null"))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, (PizaStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (PizaStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (PizaStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn write_boxes(
    boxes: &[BBox],
    out: *mut PizaBox,
    cap: usize,
    len_out: *mut usize,
) -> Result<(), (PizaStatus, String)> {
    if len_out.is_null() {
        return Err(null("len_out"));
    }
    *len_out = boxes.len();
    if boxes.len() > cap {
        return Err((
            PizaStatus::BufferTooSmall,
            format!("{} boxes do not fit in {cap}", boxes.len()),
        ));
    }
    if out.is_null() {
        return Err(null("out"));
    }
    for (k, b) in boxes.iter().enumerate() {
        *out.add(k) = (*b).into();
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn piza_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (truncated,
/// always NUL-terminated when `cap > 0`) and returns its full length.
///
/// # Safety
/// `buf` must be valid for `cap` bytes or null.
#[no_mangle]
pub unsafe extern "C" fn piza_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// # Safety
/// `a`, `b` and `out` must point to valid objects.
#[no_mangle]
pub unsafe extern "C" fn piza_iou(a: *const PizaBox, b: *const PizaBox, out: *mut f64) -> PizaStatus {
    guard(|| {
        let a = deref(a, "a")?.to_bbox().or_status()?;
        let b = deref(b, "b")?.to_bbox().or_status()?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = iou(&a, &b).or_status()?;
        Ok(())
    })
}

/// Mean accuracy over the IoU thresholds 0.50, 0.55, …, 0.95.
///
/// # Safety
/// `ious` must be valid for `n` values and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn piza_mean_accuracy(ious: *const f64, n: usize, out: *mut f64) -> PizaStatus {
    guard(|| {
        if ious.is_null() || out.is_null() {
            return Err(null("ious or out"));
        }
        let v = std::slice::from_raw_parts(ious, n);
        *out = mean_accuracy_from_ious(v).or_status()?;
        Ok(())
    })
}

/// Number of sliding windows on a `width`×`height` image.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn piza_window_count(
    width: u32,
    height: u32,
    size: u32,
    stride: u32,
    out: *mut usize,
) -> PizaStatus {
    guard(|| {
        let img = ImageSize::new(width, height).or_status()?;
        let cfg = WindowConfig::new(size, stride).or_status()?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = window_count(img, cfg);
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn piza_gen_params_default() -> PizaGenParams {
    let g = GenConfig::default();
    PizaGenParams {
        lambda1: g.lambda1,
        lambda2: g.lambda2,
        lambda2_growth: g.lambda2_growth,
        min_edge: g.min_edge,
        t_max: g.t_max as u32,
        max_retries: g.max_retries as u32,
        uniform_exponent: (g.exponent_mode == ExponentMode::Uniform) as u8,
    }
}

/// Fits a prior on area ratios; `bandwidth <= 0` selects Silverman's rule.
///
/// # Safety
/// `ratios` must be valid for `n` values and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn piza_prior_fit(
    ratios: *const f64,
    n: usize,
    bandwidth: f64,
    out: *mut *mut PizaPrior,
) -> PizaStatus {
    guard(|| {
        if ratios.is_null() || out.is_null() {
            return Err(null("ratios or out"));
        }
        let v = std::slice::from_raw_parts(ratios, n);
        let bw = if bandwidth > 0.0 { Bandwidth::Fixed(bandwidth) } else { Bandwidth::Auto };
        let dist = fit_kde(v, bw).or_status()?;
        *out = Box::into_raw(Box::new(PizaPrior { dist }));
        Ok(())
    })
}

/// Loads a prior written by `piza fit-prior`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn piza_prior_load(path: *const c_char, out: *mut *mut PizaPrior) -> PizaStatus {
    guard(|| {
        let path = PathBuf::from(c_str(path, "path")?);
        if out.is_null() {
            return Err(null("out"));
        }
        let dist = RatioDistribution::load(&path).or_status()?;
        *out = Box::into_raw(Box::new(PizaPrior { dist }));
        Ok(())
    })
}

/// # Safety
/// `prior` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn piza_prior_free(prior: *mut PizaPrior) {
    if !prior.is_null() {
        drop(Box::from_raw(prior));
    }
}

/// Generates the ground-truth zoom path `b_0 ⊇ … ⊇ b_T = gt` into `out`.
/// `*len_out` receives the box count even when `cap` is too small.
///
/// # Safety
/// Pointers must be valid; `out` must hold `cap` boxes.
#[no_mangle]
pub unsafe extern "C" fn piza_build_process(
    prior: *const PizaPrior,
    params: *const PizaGenParams,
    gt: *const PizaBox,
    width: u32,
    height: u32,
    seed: u64,
    out: *mut PizaBox,
    cap: usize,
    len_out: *mut usize,
) -> PizaStatus {
    guard(|| {
        let prior = deref(prior, "prior")?;
        let p = deref(params, "params")?;
        let gt = deref(gt, "gt")?.to_bbox().or_status()?;
        let img = ImageSize::new(width, height).or_status()?;
        let cfg = GenConfig {
            lambda1: p.lambda1,
            lambda2: p.lambda2,
            lambda2_growth: p.lambda2_growth,
            min_edge: p.min_edge,
            t_max: p.t_max as usize,
            exponent_mode: if p.uniform_exponent != 0 { ExponentMode::Uniform } else { ExponentMode::AsPrinted },
            max_retries: p.max_retries as usize,
        };
        let g = build_process(&gt, img, &prior.dist, &cfg, seed).or_status()?;
        write_boxes(&g.process.boxes, out, cap, len_out)
    })
}

/// Loads a checkpoint written by `piza train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn piza_model_load(path: *const c_char, out: *mut *mut PizaModel) -> PizaStatus {
    guard(|| {
        let path = PathBuf::from(c_str(path, "path")?);
        if out.is_null() {
            return Err(null("out"));
        }
        let model = ToyModel::load(&path).or_status()?;
        *out = Box::into_raw(Box::new(PizaModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn piza_model_free(model: *mut PizaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// 1 when the model carries the zoom module, 0 otherwise or for null.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn piza_model_has_zoom(model: *const PizaModel) -> u8 {
    model.as_ref().map_or(0, |m| m.model.piza().is_some() as u8)
}

/// Localizes `expression` in a row-major RGB8 image. Models with the zoom
/// module search iteratively (`max_steps`, `eos_threshold`); others predict
/// once. Writes the path of boxes, the answer last.
///
/// # Safety
/// `rgb` must hold `width * height * 3` bytes, `expression` must be
/// NUL-terminated and `out` must hold `cap` boxes.
#[no_mangle]
pub unsafe extern "C" fn piza_model_localize(
    model: *const PizaModel,
    rgb: *const u8,
    width: u32,
    height: u32,
    expression: *const c_char,
    max_steps: u32,
    eos_threshold: f64,
    out: *mut PizaBox,
    cap: usize,
    len_out: *mut usize,
) -> PizaStatus {
    guard(|| {
        let m = &deref(model, "model")?.model;
        let expression = c_str(expression, "expression")?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        let size = ImageSize::new(width, height).or_status()?;
        let n = width as usize * height as usize * 3;
        let image = RgbImage::new(size, std::slice::from_raw_parts(rgb, n).to_vec()).or_status()?;
        let r = if m.piza().is_some() {
            let cfg = InferConfig {
                max_steps: max_steps as usize,
                eos_threshold,
            };
            zoom_infer(m, m, &image, expression, cfg).or_status()?
        } else {
            single_shot(m, &image, expression).or_status()?
        };
        write_boxes(&r.boxes, out, cap, len_out)
    })
}
