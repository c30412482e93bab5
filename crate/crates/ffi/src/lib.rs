//! C interface over `loopvit`: load a checkpoint, parse a task, predict.
//!
//! Every function returns an [`LvStatus`]; on failure a message is kept in a
//! thread-local slot readable through [`lv_last_error`]. Handles are opaque
//! and must be released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use loopvit::arc::{encode_canvas, parse_task, TaskInstance};
use loopvit::halting::{run_with_halting, HaltOptions, HaltPolicy};
use loopvit::model::{checkpoint, LoopVit, LoopVitConfig};
use loopvit::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Checkpoint = 4,
    Capacity = 5,
    Io = 6,
    BufferTooSmall = 7,
    Internal = 8,
}

/// A loaded model (32-bit weights).
pub struct LvModel {
    inner: LoopVit<f32>,
}

/// A parsed task with its demonstrations and queries.
pub struct LvTask {
    inner: TaskInstance,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(err: &Error) -> LvStatus {
    match err {
        Error::Parse { .. } | Error::Json(_) => LvStatus::Parse,
        Error::Checkpoint(_) => LvStatus::Checkpoint,
        Error::Capacity { .. } => LvStatus::Capacity,
        Error::Io { .. } => LvStatus::Io,
        Error::Config(_) | Error::Contract(_) | Error::Dimension { .. } | Error::UnknownReference(_) => {
            LvStatus::InvalidArgument
        }
        _ => LvStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (LvStatus, String)>) -> LvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LvStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LvStatus::Internal
        }
    }
}

fn lift(err: Error) -> (LvStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (LvStatus, String) {
    (LvStatus::NullPointer, format!("{what} is null"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (LvStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (LvStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message describing the last failure on this thread; empty after success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn lv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a checkpoint file into a new model handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lv_model_load(path: *const c_char, out: *mut *mut LvModel) -> LvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = c_str(path, "path")?;
        let inner = checkpoint::load::<f32>(Path::new(path)).map_err(lift)?;
        *out = Box::into_raw(Box::new(LvModel { inner }));
        Ok(())
    })
}

/// Create a freshly initialised model from a JSON config (NULL for defaults).
///
/// # Safety
/// `config_json` must be NULL or NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lv_model_new(config_json: *const c_char, seed: u64, out: *mut *mut LvModel) -> LvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let config: LoopVitConfig = if config_json.is_null() {
            LoopVitConfig::default()
        } else {
            serde_json::from_str(c_str(config_json, "config_json")?).map_err(|e| lift(e.into()))?
        };
        let inner = LoopVit::new(config, seed).map_err(lift)?;
        *out = Box::into_raw(Box::new(LvModel { inner }));
        Ok(())
    })
}

/// Write the model to a checkpoint file.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lv_model_save(model: *const LvModel, path: *const c_char) -> LvStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let path = c_str(path, "path")?;
        checkpoint::save(&model.inner, Path::new(path)).map_err(lift)
    })
}

/// # Safety
/// `model` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lv_model_param_count(model: *const LvModel, out: *mut usize) -> LvStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = model.inner.param_count();
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lv_model_free(model: *mut LvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Parse an ARC task from JSON text.
///
/// # Safety
/// `json` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn lv_task_parse(json: *const c_char, out: *mut *mut LvTask) -> LvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let text = c_str(json, "json")?;
        let inner = parse_task(text.as_bytes()).map_err(lift)?;
        *out = Box::into_raw(Box::new(LvTask { inner }));
        Ok(())
    })
}

/// # Safety
/// `task` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lv_task_num_queries(task: *const LvTask, out: *mut usize) -> LvStatus {
    guard(|| {
        let task = task.as_ref().ok_or_else(|| null("task"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = task.inner.queries.len();
        Ok(())
    })
}

/// # Safety
/// `task` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lv_task_free(task: *mut LvTask) {
    if !task.is_null() {
        drop(Box::from_raw(task));
    }
}

/// Halting controls for [`lv_predict`]. `tau = 0` runs all `t_max` steps.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct LvHaltPolicy {
    pub tau: f64,
    pub t_min: usize,
    pub t_max: usize,
}

/// Default policy for a model: `tau = 0.05`, `t_min = 1`, `t_max` from its config.
///
/// # Safety
/// `model` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lv_default_policy(model: *const LvModel, out: *mut LvHaltPolicy) -> LvStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let d = HaltPolicy::default();
        *out = LvHaltPolicy { tau: d.tau, t_min: d.t_min, t_max: model.inner.config.t_max };
        Ok(())
    })
}

/// Predict the output grid of query `query` as row-major colors.
///
/// On success `*height`, `*width` and `*steps` hold the grid size and the
/// number of executed iterations. If `capacity` is smaller than
/// `height * width` the sizes are still written and `BufferTooSmall` is
/// returned; `cells` may be NULL in that case.
///
/// # Safety
/// Handles must come from this library; `cells` must point to `capacity`
/// writable bytes; the size pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lv_predict(
    model: *const LvModel,
    task: *const LvTask,
    query: usize,
    policy: LvHaltPolicy,
    cells: *mut u8,
    capacity: usize,
    height: *mut usize,
    width: *mut usize,
    steps: *mut usize,
) -> LvStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let task = task.as_ref().ok_or_else(|| null("task"))?;
        if height.is_null() || width.is_null() || steps.is_null() {
            return Err(null("size output"));
        }
        if query >= task.inner.queries.len() {
            return Err((
                LvStatus::InvalidArgument,
                format!("query {query} out of range ({} queries)", task.inner.queries.len()),
            ));
        }
        let policy = HaltPolicy { tau: policy.tau, t_min: policy.t_min, t_max: policy.t_max };
        let canvas = encode_canvas(&task.inner, query, &model.inner.config.canvas()).map_err(lift)?;
        let out = run_with_halting(&model.inner, &canvas, &policy, HaltOptions::default()).map_err(lift)?;
        let grid = out.prediction;
        *height = grid.height();
        *width = grid.width();
        *steps = out.exit_step;
        let n = grid.cells().len();
        if capacity < n {
            return Err((LvStatus::BufferTooSmall, format!("need {n} cells, got {capacity}")));
        }
        if n > 0 {
            if cells.is_null() {
                return Err(null("cells"));
            }
            ptr::copy_nonoverlapping(grid.cells().as_ptr(), cells, n);
        }
        Ok(())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
