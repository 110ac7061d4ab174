//! C ABI for loading checkpoints and running inference.
//!
//! All functions return `TB_OK` (0) on success or a negative error code;
//! `tb_last_error` gives a human-readable message for the most recent
//! failure on the calling thread. Handles are opaque and must be released
//! with `tb_model_free`.

use std::cell::RefCell;
use std::ffi::{c_char, c_double, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use timesbert::checkpoint;
use timesbert::data::TimeSeriesSample;
use timesbert::heads::{anomaly_score, export_representations, forecast, Representation};

pub const TB_OK: i32 = 0;
pub const TB_ERR_NULL_ARGUMENT: i32 = -1;
pub const TB_ERR_IO: i32 = -2;
pub const TB_ERR_BAD_SHAPE: i32 = -3;
pub const TB_ERR_NUMERIC: i32 = -4;
pub const TB_ERR_PANIC: i32 = -5;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

/// Opaque handle wrapping a loaded checkpoint.
pub struct TbModel {
    ckpt: checkpoint::Checkpoint,
}

/// Message describing the most recent error on this thread. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint from `path` into a new model handle stored in `out`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tb_model_load(path: *const c_char, out: *mut *mut TbModel) -> i32 {
    if path.is_null() || out.is_null() {
        set_error("null argument");
        return TB_ERR_NULL_ARGUMENT;
    }
    let path = match CStr::from_ptr(path).to_str() {
        Ok(s) => s,
        Err(_) => {
            set_error("path is not valid UTF-8");
            return TB_ERR_IO;
        }
    };
    match checkpoint::load(Path::new(path)) {
        Ok(ckpt) => {
            *out = Box::into_raw(Box::new(TbModel { ckpt }));
            TB_OK
        }
        Err(e) => {
            set_error(&e.to_string());
            *out = ptr::null_mut();
            TB_ERR_IO
        }
    }
}

/// Releases a handle returned by `tb_model_load`. Null is a no-op.
///
/// # Safety
/// `model` must be a pointer previously returned by `tb_model_load` that has
/// not yet been freed.
#[no_mangle]
pub unsafe extern "C" fn tb_model_free(model: *mut TbModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Model embedding width (D).
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tb_model_d_model(model: *const TbModel) -> i32 {
    if model.is_null() {
        set_error("null argument");
        return TB_ERR_NULL_ARGUMENT;
    }
    (*model).ckpt.config.encoder.d_model as i32
}

/// Patch length (P) the model was trained with.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tb_model_patch_len(model: *const TbModel) -> i32 {
    if model.is_null() {
        set_error("null argument");
        return TB_ERR_NULL_ARGUMENT;
    }
    (*model).ckpt.config.encoder.patch_len as i32
}

unsafe fn sample_from_raw(
    values: *const c_double,
    n_variates: usize,
    n_points: usize,
) -> Result<TimeSeriesSample, i32> {
    if values.is_null() {
        set_error("null argument");
        return Err(TB_ERR_NULL_ARGUMENT);
    }
    if n_variates == 0 || n_points == 0 {
        set_error("n_variates and n_points must be positive");
        return Err(TB_ERR_BAD_SHAPE);
    }
    let flat = std::slice::from_raw_parts(values, n_variates * n_points);
    if flat.iter().any(|v| !v.is_finite()) {
        set_error("input contains non-finite values");
        return Err(TB_ERR_NUMERIC);
    }
    Ok(TimeSeriesSample {
        values: (0..n_variates)
            .map(|c| flat[c * n_points..(c + 1) * n_points].to_vec())
            .collect(),
        valid_len: vec![n_points; n_variates],
        dataset_id: 0,
        class_label: None,
        sample_id: "ffi".to_string(),
        anomaly_labels: None,
    })
}

fn guard(f: impl FnOnce() -> i32) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(_) => {
            set_error("internal panic");
            TB_ERR_PANIC
        }
    }
}

/// Forecasts `horizon` future points per variate from a row-major
/// `n_variates x n_points` history. `out` receives `n_variates * horizon`
/// values, row-major.
///
/// # Safety
/// `model` must be a live handle; `values` must point to
/// `n_variates * n_points` doubles and `out` to `n_variates * horizon`.
#[no_mangle]
pub unsafe extern "C" fn tb_forecast(
    model: *const TbModel,
    values: *const c_double,
    n_variates: usize,
    n_points: usize,
    horizon: usize,
    out: *mut c_double,
) -> i32 {
    if model.is_null() || out.is_null() {
        set_error("null argument");
        return TB_ERR_NULL_ARGUMENT;
    }
    let sample = match sample_from_raw(values, n_variates, n_points) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let m = &*model;
    guard(|| match forecast(&m.ckpt.params, &m.ckpt.config.encoder, &sample, horizon) {
        Ok(pred) => {
            let dst = std::slice::from_raw_parts_mut(out, n_variates * horizon);
            for (c, row) in pred.iter().enumerate() {
                dst[c * horizon..(c + 1) * horizon].copy_from_slice(row);
            }
            TB_OK
        }
        Err(e) => {
            set_error(&e.to_string());
            TB_ERR_NUMERIC
        }
    })
}

/// Reconstruction-error anomaly scores, one per time point, over
/// non-overlapping windows of `window_len` points. `out` receives
/// `n_points` values.
///
/// # Safety
/// `model` must be a live handle; `values` must point to
/// `n_variates * n_points` doubles and `out` to `n_points`.
#[no_mangle]
pub unsafe extern "C" fn tb_anomaly_scores(
    model: *const TbModel,
    values: *const c_double,
    n_variates: usize,
    n_points: usize,
    window_len: usize,
    out: *mut c_double,
) -> i32 {
    if model.is_null() || out.is_null() {
        set_error("null argument");
        return TB_ERR_NULL_ARGUMENT;
    }
    let sample = match sample_from_raw(values, n_variates, n_points) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let m = &*model;
    guard(|| {
        match anomaly_score(&m.ckpt.params, &m.ckpt.config.encoder, &sample.values, window_len) {
            Ok(scores) => {
                std::slice::from_raw_parts_mut(out, n_points).copy_from_slice(&scores);
                TB_OK
            }
            Err(e) => {
                set_error(&e.to_string());
                TB_ERR_NUMERIC
            }
        }
    })
}

/// Sample-level embedding of one series: the domain-token representation
/// (`which` = 0), or the mean over all its tokens (`which` = 1). `out`
/// receives `d_model` values.
///
/// # Safety
/// `model` must be a live handle; `values` must point to
/// `n_variates * n_points` doubles and `out` to `d_model`.
#[no_mangle]
pub unsafe extern "C" fn tb_embed(
    model: *const TbModel,
    values: *const c_double,
    n_variates: usize,
    n_points: usize,
    which: i32,
    out: *mut c_double,
) -> i32 {
    if model.is_null() || out.is_null() {
        set_error("null argument");
        return TB_ERR_NULL_ARGUMENT;
    }
    let rep = match which {
        0 => Representation::Dom,
        1 => Representation::Pooled,
        _ => {
            set_error("which must be 0 (dom) or 1 (pooled)");
            return TB_ERR_BAD_SHAPE;
        }
    };
    let sample = match sample_from_raw(values, n_variates, n_points) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let m = &*model;
    guard(|| {
        match export_representations(
            &m.ckpt.params,
            &m.ckpt.config.encoder,
            std::slice::from_ref(&sample),
            rep,
        ) {
            Ok(reps) => {
                let row = &reps.matrix[0];
                let dst = std::slice::from_raw_parts_mut(out, row.len());
                for (d, v) in dst.iter_mut().zip(row) {
                    *d = *v as f64;
                }
                TB_OK
            }
            Err(e) => {
                set_error(&e.to_string());
                TB_ERR_NUMERIC
            }
        }
    })
}
