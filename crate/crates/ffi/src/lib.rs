//! C interface to trained `dbn` classifiers.
//!
//! Every function returns a [`DbnStatus`]; on failure the message is
//! available from [`dbn_last_error`] on the same thread. Handles are opaque
//! and owned by the caller once returned, to be released with the matching
//! `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dbn::checkpoint::{Checkpoint, Provenance};
use dbn::combine::{average_weights, Ensemble};
use dbn::data::Dataset;
use dbn::dist::{max_workers, parameter_reduction};
use dbn::math::Matrix;
use dbn::net::{evaluate, predict, ModelWeights};
use dbn::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DbnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Format = 4,
    Io = 5,
    NonFinite = 6,
    Validation = 7,
    Panic = 8,
}

impl From<&Error> for DbnStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape { .. } => DbnStatus::Shape,
            Error::Format(_) | Error::Truncated { .. } => DbnStatus::Format,
            Error::Io { .. } => DbnStatus::Io,
            Error::NonFinite(_) => DbnStatus::NonFinite,
            Error::Validation(_) | Error::Worker(_) => DbnStatus::Validation,
            Error::Domain(_) | Error::Value(_) | Error::Range { .. } | Error::Config(_) => DbnStatus::InvalidArgument,
        }
    }
}

/// A classifier together with the dropout rates it was trained with.
pub struct DbnModel {
    weights: ModelWeights,
    provenance: Provenance,
}

/// Images and labels, pixels scaled to [0, 1].
pub struct DbnDataset {
    data: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(DbnStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(DbnStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(DbnStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, turning errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DbnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DbnStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            DbnStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Failure(DbnStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn model_ref<'a>(m: *const DbnModel) -> Result<&'a DbnModel, Failure> {
    m.as_ref().ok_or_else(|| null("model"))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dbn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a classifier checkpoint written by `dbn train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dbn_model_load(path: *const c_char, out: *mut *mut DbnModel) -> DbnStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let (weights, provenance) = Checkpoint::load(&path)?.into_classifier()?;
        *out = Box::into_raw(Box::new(DbnModel { weights, provenance }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dbn_model_save(model: *const DbnModel, path: *const c_char) -> DbnStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = path_arg(path, "path")?;
        Checkpoint::classifier(m.weights.clone(), m.provenance.clone()).save(&path)?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn dbn_model_free(model: *mut DbnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of pixels the model expects per image.
///
/// # Safety
/// `model` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dbn_model_input_size(model: *const DbnModel, out: *mut usize) -> DbnStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.weights.input_size();
        Ok(())
    })
}

/// Predicted digit for each of `n_rows` images of `n_cols` pixels, stored
/// row-major in `pixels`. Writes `n_rows` labels to `labels`.
///
/// # Safety
/// `pixels` must hold `n_rows * n_cols` doubles and `labels` room for
/// `n_rows` bytes.
#[no_mangle]
pub unsafe extern "C" fn dbn_model_predict(
    model: *const DbnModel,
    pixels: *const f64,
    n_rows: usize,
    n_cols: usize,
    labels: *mut u8,
) -> DbnStatus {
    guard(|| {
        let m = model_ref(model)?;
        if n_rows == 0 {
            return Ok(());
        }
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        if labels.is_null() {
            return Err(null("labels"));
        }
        let len = n_rows
            .checked_mul(n_cols)
            .ok_or_else(|| Failure(DbnStatus::InvalidArgument, "n_rows * n_cols overflows".into()))?;
        let images = Matrix::from_vec(n_rows, n_cols, std::slice::from_raw_parts(pixels, len).to_vec())?;
        let p = &m.provenance;
        let predicted = predict(&m.weights, &images, p.hidden_dropout_p, p.input_dropout_p)?;
        std::slice::from_raw_parts_mut(labels, n_rows).copy_from_slice(&predicted);
        Ok(())
    })
}

/// Fraction of misclassified examples in `data`.
///
/// # Safety
/// Handles must come from this library; `error_rate` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dbn_model_evaluate(
    model: *const DbnModel,
    data: *const DbnDataset,
    error_rate: *mut f64,
) -> DbnStatus {
    guard(|| {
        let m = model_ref(model)?;
        let d = data.as_ref().ok_or_else(|| null("data"))?;
        let out = error_rate.as_mut().ok_or_else(|| null("error_rate"))?;
        let p = &m.provenance;
        *out = evaluate(&m.weights, &d.data, p.hidden_dropout_p, p.input_dropout_p)?;
        Ok(())
    })
}

/// Element-wise mean of `n` models of identical shape. The result keeps the
/// dropout rates of the first model.
///
/// # Safety
/// `models` must point to `n` model handles from this library.
#[no_mangle]
pub unsafe extern "C" fn dbn_models_average(
    models: *const *const DbnModel,
    n: usize,
    out: *mut *mut DbnModel,
) -> DbnStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = ptr::null_mut();
        if models.is_null() {
            return Err(null("models"));
        }
        let handles = std::slice::from_raw_parts(models, n);
        let members = handles
            .iter()
            .map(|&h| model_ref(h).map(|m| m.weights.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let provenance = match handles.first() {
            Some(&h) => model_ref(h)?.provenance.clone(),
            None => Provenance::default(),
        };
        let weights = average_weights(&Ensemble::new(members)?);
        *out = Box::into_raw(Box::new(DbnModel { weights, provenance }));
        Ok(())
    })
}

/// Loads MNIST-format IDX image and label files (optionally gzipped).
///
/// # Safety
/// Paths must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dbn_dataset_load(
    images_path: *const c_char,
    labels_path: *const c_char,
    out: *mut *mut DbnDataset,
) -> DbnStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = ptr::null_mut();
        let images = path_arg(images_path, "images_path")?;
        let labels = path_arg(labels_path, "labels_path")?;
        let data = Dataset::load(&images, &labels)?;
        *out = Box::into_raw(Box::new(DbnDataset { data }));
        Ok(())
    })
}

/// # Safety
/// `data` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dbn_dataset_len(data: *const DbnDataset, out: *mut usize) -> DbnStatus {
    guard(|| {
        let d = data.as_ref().ok_or_else(|| null("data"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = d.data.len();
        Ok(())
    })
}

/// # Safety
/// `data` must come from this library and not be used afterwards. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn dbn_dataset_free(data: *mut DbnDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Largest number of workers that can train disjoint sub-networks when
/// hidden units are dropped with probability `p`.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dbn_max_workers(p: f64, out: *mut usize) -> DbnStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = max_workers(p)?;
        Ok(())
    })
}

/// Fraction of weights between two hidden layers that one worker does not
/// touch at dropout probability `p`.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dbn_parameter_reduction(p: f64, out: *mut f64) -> DbnStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = parameter_reduction(p)?;
        Ok(())
    })
}
