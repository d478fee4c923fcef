//! C ABI over `dbm-core`: load a trained model, score and classify sequences,
//! and run the command-line pipeline in process.
//!
//! Every fallible call returns a [`DbmStatus`]; on failure the message is kept
//! per thread and read back with [`dbm_last_error`]. Frames are row-major
//! `n_frames x dim` arrays in raw feature units; the model's standardizer is
//! applied internally.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, OsString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use dbm_core::datamodel::Frames;
use dbm_core::inference::{classify, forward_loglik};
use dbm_core::model::DbmModel;
use dbm_core::DbmError;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DbmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Data = 4,
    Numerical = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Opaque trained model.
pub struct DbmModelHandle {
    model: DbmModel,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(message: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = message.into());
}

fn fail(status: DbmStatus, message: impl Into<String>) -> DbmStatus {
    set_error(message);
    status
}

fn from_core(err: DbmError) -> DbmStatus {
    let status = match &err {
        DbmError::Io { .. } => DbmStatus::Io,
        e if e.is_numerical() => DbmStatus::Numerical,
        _ => DbmStatus::Data,
    };
    fail(status, err.to_string())
}

fn guard(f: impl FnOnce() -> DbmStatus) -> DbmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => {
            if status == DbmStatus::Ok {
                set_error("");
            }
            status
        }
        Err(_) => fail(DbmStatus::Panic, "internal panic"),
    }
}

unsafe fn model_ref<'a>(model: *const DbmModelHandle) -> Result<&'a DbmModel, DbmStatus> {
    if model.is_null() {
        return Err(fail(DbmStatus::NullPointer, "model handle is null"));
    }
    Ok(&(*model).model)
}

unsafe fn frames_from(model: &DbmModel, data: *const f64, n_frames: usize, dim: usize) -> Result<Frames, DbmStatus> {
    if data.is_null() {
        return Err(fail(DbmStatus::NullPointer, "frame buffer is null"));
    }
    if dim != model.dim {
        return Err(fail(
            DbmStatus::InvalidArgument,
            format!("frames have {dim} columns, model expects {}", model.dim),
        ));
    }
    if n_frames == 0 {
        return Err(fail(DbmStatus::InvalidArgument, "sequence is empty"));
    }
    let values = slice::from_raw_parts(data, n_frames * dim);
    if let Some(k) = values.iter().position(|v| !v.is_finite()) {
        return Err(fail(DbmStatus::Data, format!("non-finite value at frame {}, column {}", k / dim, k % dim)));
    }
    let frames = Frames::new(n_frames, dim, values.to_vec()).map_err(from_core)?;
    Ok(model.prepare(&frames))
}

/// Copies `text` plus a terminating NUL into `buf` when it fits. Returns the
/// required size including the NUL.
unsafe fn copy_out(text: &str, buf: *mut c_char, buf_len: usize) -> usize {
    let needed = text.len() + 1;
    if !buf.is_null() && buf_len >= needed {
        ptr::copy_nonoverlapping(text.as_ptr().cast::<c_char>(), buf, text.len());
        *buf.add(text.len()) = 0;
    }
    needed
}

/// Loads a model JSON file. On success `*out` owns a handle that must be
/// released with [`dbm_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dbm_model_load(path: *const c_char, out: *mut *mut DbmModelHandle) -> DbmStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(DbmStatus::NullPointer, "path or output pointer is null");
        }
        *out = ptr::null_mut();
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            return fail(DbmStatus::InvalidArgument, "path is not valid UTF-8");
        };
        match DbmModel::load(&PathBuf::from(path)) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(DbmModelHandle { model }));
                DbmStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

/// Releases a handle from [`dbm_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dbm_model_free(model: *mut DbmModelHandle) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Feature dimension expected by the model.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dbm_model_dim(model: *const DbmModelHandle, out: *mut usize) -> DbmStatus {
    guard(|| {
        let m = match model_ref(model) {
            Ok(m) => m,
            Err(s) => return s,
        };
        if out.is_null() {
            return fail(DbmStatus::NullPointer, "output pointer is null");
        }
        *out = m.dim;
        DbmStatus::Ok
    })
}

/// Number of classes in the model.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dbm_model_n_classes(model: *const DbmModelHandle, out: *mut usize) -> DbmStatus {
    guard(|| {
        let m = match model_ref(model) {
            Ok(m) => m,
            Err(s) => return s,
        };
        if out.is_null() {
            return fail(DbmStatus::NullPointer, "output pointer is null");
        }
        *out = m.n_classes();
        DbmStatus::Ok
    })
}

/// Writes the label of class `class_index` into `buf`. `*needed` receives the
/// size including the NUL; a short buffer yields `BUFFER_TOO_SMALL`.
///
/// # Safety
/// `model` must be a live handle, `buf` null or writable for `buf_len` bytes,
/// and `needed` null or valid.
#[no_mangle]
pub unsafe extern "C" fn dbm_model_class_label(
    model: *const DbmModelHandle,
    class_index: usize,
    buf: *mut c_char,
    buf_len: usize,
    needed: *mut usize,
) -> DbmStatus {
    guard(|| {
        let m = match model_ref(model) {
            Ok(m) => m,
            Err(s) => return s,
        };
        let Some(class) = m.classes.get(class_index) else {
            return fail(DbmStatus::InvalidArgument, format!("class index {class_index} out of range"));
        };
        let size = copy_out(&class.label, buf, buf_len);
        if !needed.is_null() {
            *needed = size;
        }
        if buf.is_null() || buf_len < size {
            return fail(DbmStatus::BufferTooSmall, format!("label needs {size} bytes"));
        }
        DbmStatus::Ok
    })
}

/// Forward log-likelihood of one sequence under class `class_index`.
///
/// # Safety
/// `model` must be a live handle, `frames` readable for `n_frames * dim`
/// doubles, and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn dbm_model_loglik(
    model: *const DbmModelHandle,
    class_index: usize,
    frames: *const f64,
    n_frames: usize,
    dim: usize,
    out: *mut f64,
) -> DbmStatus {
    guard(|| {
        let m = match model_ref(model) {
            Ok(m) => m,
            Err(s) => return s,
        };
        if out.is_null() {
            return fail(DbmStatus::NullPointer, "output pointer is null");
        }
        if class_index >= m.n_classes() {
            return fail(DbmStatus::InvalidArgument, format!("class index {class_index} out of range"));
        }
        let x = match frames_from(m, frames, n_frames, dim) {
            Ok(x) => x,
            Err(s) => return s,
        };
        match forward_loglik(m, class_index, &x) {
            Ok(ll) => {
                *out = ll;
                DbmStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

/// Most probable class under a uniform prior. When `scores` is not null it
/// receives one log-score per class, in class order.
///
/// # Safety
/// `model` must be a live handle, `frames` readable for `n_frames * dim`
/// doubles, `out_class` valid, and `scores` null or writable for the class
/// count.
#[no_mangle]
pub unsafe extern "C" fn dbm_model_classify(
    model: *const DbmModelHandle,
    frames: *const f64,
    n_frames: usize,
    dim: usize,
    out_class: *mut usize,
    scores: *mut f64,
) -> DbmStatus {
    guard(|| {
        let m = match model_ref(model) {
            Ok(m) => m,
            Err(s) => return s,
        };
        if out_class.is_null() {
            return fail(DbmStatus::NullPointer, "output pointer is null");
        }
        let x = match frames_from(m, frames, n_frames, dim) {
            Ok(x) => x,
            Err(s) => return s,
        };
        match classify(m, &x) {
            Ok((label, per_class)) => {
                *out_class = m.class_index(&label).expect("predicted label belongs to the model");
                if !scores.is_null() {
                    let dst = slice::from_raw_parts_mut(scores, per_class.len());
                    for (d, (_, s)) in dst.iter_mut().zip(&per_class) {
                        *d = *s;
                    }
                }
                DbmStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

/// Copies the calling thread's last error message into `buf` when it fits and
/// returns the size including the NUL. Empty after a successful call.
///
/// # Safety
/// `buf` must be null or writable for `buf_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn dbm_last_error(buf: *mut c_char, buf_len: usize) -> usize {
    LAST_ERROR.with(|e| copy_out(&e.borrow(), buf, buf_len))
}

/// Runs the `dbm` command line with `argv[0..argc]` and returns its exit code.
///
/// # Safety
/// `argv` must hold `argc` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn dbm_cli_run(argc: c_int, argv: *const *const c_char) -> c_int {
    let run = || {
        let n = usize::try_from(argc).unwrap_or(0);
        if n > 0 && argv.is_null() {
            set_error("argv is null");
            return dbm_core::cli::EXIT_USAGE;
        }
        let mut args: Vec<OsString> = vec!["dbm".into()];
        for k in 1..n {
            let p = *argv.add(k);
            if p.is_null() {
                set_error("argv entry is null");
                return dbm_core::cli::EXIT_USAGE;
            }
            args.push(CStr::from_ptr(p).to_string_lossy().into_owned().into());
        }
        dbm_core::cli::run(args)
    };
    catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| {
        set_error("internal panic");
        dbm_core::cli::EXIT_NUMERICAL
    })
}
