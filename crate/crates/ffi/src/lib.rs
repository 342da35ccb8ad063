//! C ABI over the q16 engine.
//!
//! Handles are opaque and owned by the caller once returned; free each with
//! its `*_free` function. Every fallible call returns a `Q16Status`; on
//! failure `q16_last_error()` describes the error for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use q16::embedstore::{EmbeddingStore, StoreError};
use q16::mathcore::{self, MathError};
use q16::scanner::{self, Emit, FlagReport, ScanError, ScanOptions};
use q16::tuner::{PromptModel, TunerError};

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Q16Status {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    DimMismatch = 5,
    Math = 6,
    Panic = 99,
}

/// Loaded embedding container.
pub struct Q16Store(EmbeddingStore);

/// Trained prompt model.
pub struct Q16Model(PromptModel);

/// Flag report produced by `q16_scan`.
pub struct Q16Report(FlagReport);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

struct Failure(Q16Status, String);

impl Failure {
    fn null(what: &str) -> Self {
        Failure(Q16Status::NullPointer, format!("{what} is null"))
    }

    fn invalid(msg: impl Into<String>) -> Self {
        Failure(Q16Status::InvalidArgument, msg.into())
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        let status = match e {
            StoreError::Io { .. } => Q16Status::Io,
            _ => Q16Status::Format,
        };
        Failure(status, e.to_string())
    }
}

impl From<MathError> for Failure {
    fn from(e: MathError) -> Self {
        let status = match e {
            MathError::DimMismatch { .. } => Q16Status::DimMismatch,
            _ => Q16Status::Math,
        };
        Failure(status, e.to_string())
    }
}

impl From<TunerError> for Failure {
    fn from(e: TunerError) -> Self {
        let status = match e {
            TunerError::Io { .. } | TunerError::MissingFile(_) => Q16Status::Io,
            TunerError::Store(StoreError::Io { .. }) => Q16Status::Io,
            _ => Q16Status::Format,
        };
        Failure(status, e.to_string())
    }
}

impl From<ScanError> for Failure {
    fn from(e: ScanError) -> Self {
        let status = match e {
            ScanError::DimMismatch { .. } => Q16Status::DimMismatch,
            ScanError::InvalidThreshold(_) | ScanError::EmptyDataset => Q16Status::InvalidArgument,
            ScanError::Math(_) => Q16Status::Math,
            ScanError::Io { .. } => Q16Status::Io,
            ScanError::MalformedReport { .. } => Q16Status::Format,
        };
        Failure(status, e.to_string())
    }
}

/// Runs `f`, converting errors and panics into a status plus last-error text.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> Q16Status {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            Q16Status::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            Q16Status::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::invalid(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure::null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::null(what))
}

unsafe fn floats<'a>(p: *const f32, len: usize, what: &str) -> Result<&'a [f32], Failure> {
    if p.is_null() {
        return Err(Failure::null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn q16_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, empty after a success.
/// Valid until the next q16 call on the same thread.
#[no_mangle]
pub extern "C" fn q16_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads an embedding container from its `*.meta.json` path.
///
/// # Safety
/// `meta_path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn q16_store_load(meta_path: *const c_char, out: *mut *mut Q16Store) -> Q16Status {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let store = EmbeddingStore::load(path_arg(meta_path, "meta_path")?)?;
        *out = Box::into_raw(Box::new(Q16Store(store)));
        Ok(())
    })
}

/// # Safety
/// `store` must come from `q16_store_load` and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn q16_store_free(store: *mut Q16Store) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Number of rows, or 0 for a null handle.
///
/// # Safety
/// `store` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn q16_store_count(store: *const Q16Store) -> usize {
    store.as_ref().map_or(0, |s| s.0.len())
}

/// Embedding width, or 0 for a null handle.
///
/// # Safety
/// `store` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn q16_store_dim(store: *const Q16Store) -> usize {
    store.as_ref().map_or(0, |s| s.0.dim())
}

/// Loads a model JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn q16_model_load(path: *const c_char, out: *mut *mut Q16Model) -> Q16Status {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let model = PromptModel::load(path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(Q16Model(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `q16_model_load` and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn q16_model_free(model: *mut Q16Model) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Prompt width, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn q16_model_dim(model: *const Q16Model) -> usize {
    model.as_ref().map_or(0, |m| m.0.dim())
}

/// Cosine similarity of two `len`-vectors.
///
/// # Safety
/// `x` and `z` must point to `len` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn q16_cosine_similarity(x: *const f32, z: *const f32, len: usize, out: *mut f64) -> Q16Status {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = mathcore::cosine_similarity(floats(x, len, "x")?, floats(z, len, "z")?)?;
        Ok(())
    })
}

/// Probability that embedding `x` (length `len`) is inappropriate.
///
/// # Safety
/// `model` must be live, `x` must point to `len` floats, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn q16_score(model: *const Q16Model, x: *const f32, len: usize, out: *mut f64) -> Q16Status {
    guard(|| {
        let model = handle(model, "model")?;
        let out = out_arg(out, "out")?;
        *out = model.0.inappropriate_probability(floats(x, len, "x")?)?;
        Ok(())
    })
}

/// Scans every row of `store`. With `emit_all` false the report keeps only
/// flagged entries. `dataset_name` may be null.
///
/// # Safety
/// Handles must be live; `dataset_name` null or NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn q16_scan(
    store: *const Q16Store,
    model: *const Q16Model,
    threshold: f64,
    emit_all: bool,
    dataset_name: *const c_char,
    out: *mut *mut Q16Report,
) -> Q16Status {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let store = handle(store, "store")?;
        let model = handle(model, "model")?;
        let name = if dataset_name.is_null() {
            "dataset".to_string()
        } else {
            CStr::from_ptr(dataset_name)
                .to_str()
                .map_err(|_| Failure::invalid("dataset_name is not UTF-8"))?
                .to_string()
        };
        let opts = ScanOptions {
            dataset_name: name,
            threshold,
            emit: if emit_all { Emit::All } else { Emit::FlaggedOnly },
            ..ScanOptions::default()
        };
        let report = scanner::scan(&store.0, &model.0, &opts)?;
        *out = Box::into_raw(Box::new(Q16Report(report)));
        Ok(())
    })
}

/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn q16_report_total(report: *const Q16Report) -> usize {
    report.as_ref().map_or(0, |r| r.0.total_count())
}

/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn q16_report_flagged(report: *const Q16Report) -> usize {
    report.as_ref().map_or(0, |r| r.0.flagged_count())
}

/// Flagged over total.
///
/// # Safety
/// `report` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn q16_report_ratio(report: *const Q16Report, out: *mut f64) -> Q16Status {
    guard(|| {
        let report = handle(report, "report")?;
        let out = out_arg(out, "out")?;
        *out = scanner::flag_ratio(&report.0)?;
        Ok(())
    })
}

/// Writes the report in its line-delimited JSON form.
///
/// # Safety
/// `report` must be live; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn q16_report_write(report: *const Q16Report, path: *const c_char) -> Q16Status {
    guard(|| {
        let report = handle(report, "report")?;
        report.0.save(path_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `report` must come from `q16_scan` and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn q16_report_free(report: *mut Q16Report) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}
