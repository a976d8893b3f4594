//! C interface for loading a trained checkpoint and scoring candidates.
//!
//! Every fallible function returns a [`GerecStatus`]; on failure a message
//! is available from [`gerec_last_error_message`] on the same thread.
//! Models are opaque handles released with [`gerec_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use gerec_core::eval::{self, Scorer};
use gerec_core::model::{Model, ModelError, Side};
use gerec_core::trainer::{Checkpoint, CheckpointError};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GerecStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    OutOfRange = 5,
    Numerical = 6,
    Panic = 7,
}

/// A loaded model. Read-only after loading, so one handle may be shared
/// across threads.
pub struct GerecModel {
    model: Model,
    eval_seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: GerecStatus, msg: impl Into<String>) -> GerecStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> GerecStatus) -> GerecStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(GerecStatus::Panic, "internal panic"),
    }
}

fn model_status(e: ModelError) -> GerecStatus {
    let status = match &e {
        ModelError::Config(_) => GerecStatus::InvalidArgument,
        ModelError::Nd(gerec_core::ndcore::NdError::Invalid(m)) if m.contains("out of range") => {
            GerecStatus::OutOfRange
        }
        ModelError::Nd(_) => GerecStatus::Numerical,
    };
    fail(status, e.to_string())
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn gerec_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gerec_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gerec_model_load(
    path: *const c_char,
    out: *mut *mut GerecModel,
) -> GerecStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(GerecStatus::NullPointer, "path and out must not be NULL");
        }
        // SAFETY: checked non-null; the caller promises NUL termination.
        let Ok(path) = unsafe { CStr::from_ptr(path) }.to_str() else {
            return fail(GerecStatus::InvalidArgument, "path is not valid UTF-8");
        };
        let checkpoint = match Checkpoint::load(Path::new(path)) {
            Ok(c) => c,
            Err(e @ CheckpointError::Io { .. }) => return fail(GerecStatus::Io, e.to_string()),
            Err(e) => return fail(GerecStatus::Parse, e.to_string()),
        };
        let model = match checkpoint.to_model() {
            Ok(m) => m,
            Err(e) => return fail(GerecStatus::Parse, e.to_string()),
        };
        let handle = Box::new(GerecModel {
            model,
            eval_seed: checkpoint.train.eval_seed,
        });
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(handle) };
        GerecStatus::Ok
    })
}

/// Releases a handle from [`gerec_model_load`]. NULL is ignored.
///
/// # Safety
/// `model` must come from `gerec_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gerec_model_free(model: *mut GerecModel) {
    if !model.is_null() {
        // SAFETY: ownership returns from the pointer handed out by load.
        drop(unsafe { Box::from_raw(model) });
    }
}

unsafe fn handle<'a>(model: *const GerecModel) -> Option<&'a GerecModel> {
    // SAFETY: the caller passes a live handle or NULL.
    unsafe { model.as_ref() }
}

/// Writes the number of users known to the model.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gerec_model_num_users(model: *const GerecModel, out: *mut usize) -> GerecStatus {
    guard(|| match (unsafe { handle(model) }, out.is_null()) {
        (Some(m), false) => {
            unsafe { *out = m.model.config().num_users };
            GerecStatus::Ok
        }
        _ => fail(GerecStatus::NullPointer, "model and out must not be NULL"),
    })
}

/// Writes the number of items known to the model.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gerec_model_num_items(model: *const GerecModel, out: *mut usize) -> GerecStatus {
    guard(|| match (unsafe { handle(model) }, out.is_null()) {
        (Some(m), false) => {
            unsafe { *out = m.model.config().num_items };
            GerecStatus::Ok
        }
        _ => fail(GerecStatus::NullPointer, "model and out must not be NULL"),
    })
}

/// The evaluation seed stored with the checkpoint.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gerec_model_eval_seed(model: *const GerecModel, out: *mut u64) -> GerecStatus {
    guard(|| match (unsafe { handle(model) }, out.is_null()) {
        (Some(m), false) => {
            unsafe { *out = m.eval_seed };
            GerecStatus::Ok
        }
        _ => fail(GerecStatus::NullPointer, "model and out must not be NULL"),
    })
}

/// Scores `count` dense item ids for one dense user id into `scores`.
/// Noise is drawn once per `(eval_seed, user)` and shared by all items, so
/// results match the evaluation protocol.
///
/// # Safety
/// `items` and `scores` must point to `count` elements each.
#[no_mangle]
pub unsafe extern "C" fn gerec_model_score(
    model: *const GerecModel,
    user: usize,
    items: *const usize,
    count: usize,
    eval_seed: u64,
    scores: *mut f64,
) -> GerecStatus {
    guard(|| {
        let Some(m) = (unsafe { handle(model) }) else {
            return fail(GerecStatus::NullPointer, "model must not be NULL");
        };
        if count == 0 {
            return GerecStatus::Ok;
        }
        if items.is_null() || scores.is_null() {
            return fail(GerecStatus::NullPointer, "items and scores must not be NULL");
        }
        // SAFETY: caller guarantees `count` readable elements.
        let ids = unsafe { std::slice::from_raw_parts(items, count) };
        match m.model.score_candidates(user, ids, eval_seed) {
            Ok(s) => {
                // SAFETY: caller guarantees `count` writable elements.
                unsafe { std::slice::from_raw_parts_mut(scores, count) }.copy_from_slice(&s);
                GerecStatus::Ok
            }
            Err(e) => model_status(e),
        }
    })
}

/// Mean over dimensions of a user's learned variance.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gerec_model_user_variance(
    model: *const GerecModel,
    user: usize,
    out: *mut f64,
) -> GerecStatus {
    guard(|| {
        let (Some(m), false) = (unsafe { handle(model) }, out.is_null()) else {
            return fail(GerecStatus::NullPointer, "model and out must not be NULL");
        };
        match m.model.lookup_gaussian(Side::User, user) {
            Ok((_, var)) => {
                unsafe { *out = var.iter().sum::<f64>() / var.len() as f64 };
                GerecStatus::Ok
            }
            Err(ModelError::Nd(e)) => fail(GerecStatus::OutOfRange, e.to_string()),
            Err(e) => model_status(e),
        }
    })
}

/// 1 if `rank <= k`, else 0.
#[no_mangle]
pub extern "C" fn gerec_hr_at_k(rank: usize, k: usize) -> f64 {
    eval::hr_at_k(rank, k)
}

/// `1 / log2(rank + 1)` if `rank <= k`, else 0.
#[no_mangle]
pub extern "C" fn gerec_ndcg_at_k(rank: usize, k: usize) -> f64 {
    eval::ndcg_at_k(rank, k)
}
