//! C ABI for the readood detector.
//!
//! Every fallible function returns a [`ReadoodStatus`]. On failure a message is
//! available from [`readood_last_error_message`] on the same thread. Detectors
//! are opaque handles created by [`readood_detector_load`] and released with
//! [`readood_detector_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use readood::io::checkpoint;
use readood::scoring::{Detector, Verdict};
use readood::{Error, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadoodStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    /// The checkpoint file could not be read or is malformed.
    Checkpoint = 4,
    Data = 5,
    /// The detector lacks class statistics, complexity bounds or calibration.
    Uncalibrated = 6,
    Shape = 7,
    Internal = 8,
}

/// Per-image detection result.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ReadoodScore {
    pub score_cla: f64,
    pub score_rec_raw: f64,
    pub complexity: f64,
    pub lambda: f64,
    pub final_score: f64,
    /// 1 when the image is judged in-distribution.
    pub is_id: u8,
    pub predicted_class: u32,
}

/// Opaque detector handle.
pub struct ReadoodDetector {
    inner: Detector,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> ReadoodStatus {
    match e {
        Error::Io(_) | Error::MissingArtifact { .. } => ReadoodStatus::Io,
        Error::Checkpoint(_) => ReadoodStatus::Checkpoint,
        Error::Data(_) => ReadoodStatus::Data,
        Error::Uncalibrated | Error::MissingStage { .. } => ReadoodStatus::Uncalibrated,
        Error::Shape(_) => ReadoodStatus::Shape,
        Error::InvalidArgument(_) | Error::Config(_) => ReadoodStatus::InvalidArgument,
        _ => ReadoodStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (ReadoodStatus, String)>) -> ReadoodStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ReadoodStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ReadoodStatus::Internal
        }
    }
}

fn lift(e: Error) -> (ReadoodStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (ReadoodStatus, String) {
    (ReadoodStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `ptr` must be null or valid for `len` reads.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], (ReadoodStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn readood_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread. Valid until the next failing
/// call on the same thread; empty when nothing has failed.
#[no_mangle]
pub extern "C" fn readood_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a detector checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn readood_detector_load(path: *const c_char, out: *mut *mut ReadoodDetector) -> ReadoodStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (ReadoodStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let inner = checkpoint::load_detector(Path::new(path)).map_err(lift)?;
        *out = Box::into_raw(Box::new(ReadoodDetector { inner }));
        Ok(())
    })
}

/// Releases a detector. Null is ignored.
///
/// # Safety
/// `det` must be null or a handle from [`readood_detector_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn readood_detector_free(det: *mut ReadoodDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}

/// Expected image layout `[channels, height, width]`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn readood_detector_input_shape(
    det: *const ReadoodDetector,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> ReadoodStatus {
    guard(|| {
        let det = det.as_ref().ok_or_else(|| null("detector"))?;
        if channels.is_null() || height.is_null() || width.is_null() {
            return Err(null("output"));
        }
        let [c, h, w] = det.inner.classifier().arch().input_shape();
        *channels = c;
        *height = h;
        *width = w;
        Ok(())
    })
}

/// Calibrated perturbation magnitude and threshold.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn readood_detector_calibration(
    det: *const ReadoodDetector,
    epsilon: *mut f64,
    tau: *mut f64,
) -> ReadoodStatus {
    guard(|| {
        let det = det.as_ref().ok_or_else(|| null("detector"))?;
        if epsilon.is_null() || tau.is_null() {
            return Err(null("output"));
        }
        let cal = det.inner.calibration().ok_or_else(|| lift(Error::Uncalibrated))?;
        *epsilon = cal.epsilon;
        *tau = cal.tau;
        Ok(())
    })
}

/// Scores `n` images laid out as contiguous `[n, C, H, W]` floats in `[0, 1]`.
/// `out` receives `n` results.
///
/// # Safety
/// `images` must hold `n * C * H * W` floats and `out` room for `n` results.
#[no_mangle]
pub unsafe extern "C" fn readood_detector_score(
    det: *const ReadoodDetector,
    images: *const f32,
    n: usize,
    out: *mut ReadoodScore,
) -> ReadoodStatus {
    guard(|| {
        let det = det.as_ref().ok_or_else(|| null("detector"))?;
        if n == 0 {
            return Err((ReadoodStatus::InvalidArgument, "no images to score".into()));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let [c, h, w] = det.inner.classifier().arch().input_shape();
        let data = slice(images, n * c * h * w, "images")?;
        let x = Tensor::new(vec![n, c, h, w], data.to_vec()).map_err(lift)?;
        let rows = det.inner.detect(&x).map_err(lift)?;
        let out = std::slice::from_raw_parts_mut(out, n);
        for (o, r) in out.iter_mut().zip(rows) {
            *o = ReadoodScore {
                score_cla: r.score_cla,
                score_rec_raw: r.score_rec_raw,
                complexity: r.complexity,
                lambda: r.lambda,
                final_score: r.final_score,
                is_id: (r.verdict == Verdict::Id) as u8,
                predicted_class: r.predicted_class as u32,
            };
        }
        Ok(())
    })
}

/// Area under the ROC curve with ID as the positive class.
///
/// # Safety
/// `id` and `ood` must hold `n_id` and `n_ood` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn readood_auroc(
    id: *const f64,
    n_id: usize,
    ood: *const f64,
    n_ood: usize,
    out: *mut f64,
) -> ReadoodStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = readood::evaluation::auroc(slice(id, n_id, "id")?, slice(ood, n_ood, "ood")?).map_err(lift)?;
        Ok(())
    })
}

/// OOD false-positive rate at the threshold keeping `tpr` of ID scores.
///
/// # Safety
/// `id` and `ood` must hold `n_id` and `n_ood` values; `fpr` and `tau` must be valid.
#[no_mangle]
pub unsafe extern "C" fn readood_fpr_at_tpr(
    id: *const f64,
    n_id: usize,
    ood: *const f64,
    n_ood: usize,
    tpr: f64,
    fpr: *mut f64,
    tau: *mut f64,
) -> ReadoodStatus {
    guard(|| {
        if fpr.is_null() || tau.is_null() {
            return Err(null("output"));
        }
        let op = readood::evaluation::fpr_at_tpr(slice(id, n_id, "id")?, slice(ood, n_ood, "ood")?, tpr)
            .map_err(lift)?;
        *fpr = op.fpr;
        *tau = op.tau;
        Ok(())
    })
}

/// Compressed bits per dimension of one image with values in `[0, 1]`.
///
/// # Safety
/// `image` must hold `len` floats and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn readood_complexity(image: *const f32, len: usize, out: *mut f64) -> ReadoodStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = readood::complexity::complexity(slice(image, len, "image")?).map_err(lift)?;
        Ok(())
    })
}
