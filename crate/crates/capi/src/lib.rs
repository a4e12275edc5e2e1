//! C ABI over the training and evaluation pipeline.
//!
//! Conventions: every function returns a [`PixproStatus`]; results come
//! back through out-pointers; checkpoints are opaque handles owned by the
//! caller and released with `pixpro_checkpoint_free`. On any non-OK
//! status, `pixpro_last_error` returns a human-readable message for the
//! calling thread.

use pixpro::data::{gen_synthetic_dataset, Dataset};
use pixpro::eval;
use pixpro::trainer::{self, checkpoint, TrainRunConfig, TrainState};
use pixpro::PixproError;
use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::path::{Path, PathBuf};

/// Status codes shared across the ABI. `Ok` is zero; everything else is
/// an error whose message is available via `pixpro_last_error`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixproStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Config = 4,
    Checkpoint = 5,
    Dataset = 6,
    Eval = 7,
    Numeric = 8,
    Internal = 9,
}

/// Opaque handle over a loaded checkpoint.
pub struct PixproCheckpoint {
    state: TrainState,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &PixproError) -> PixproStatus {
    match err {
        PixproError::Io { .. } | PixproError::ImageDecode { .. } => PixproStatus::Io,
        PixproError::Config(_) => PixproStatus::Config,
        PixproError::Checkpoint(_) | PixproError::CheckpointVersion { .. } => {
            PixproStatus::Checkpoint
        }
        PixproError::Dataset(_) | PixproError::ImageTooSmall { .. } => PixproStatus::Dataset,
        PixproError::Eval(_) => PixproStatus::Eval,
        PixproError::NonFiniteLoss { .. }
        | PixproError::NonFiniteGradient { .. }
        | PixproError::Tensor(_) => PixproStatus::Numeric,
    }
}

fn fail(err: PixproError) -> PixproStatus {
    let status = status_of(&err);
    set_error(err.to_string());
    status
}

/// # Safety
/// `ptr` must be a valid NUL-terminated C string or the call fails.
unsafe fn str_arg(ptr: *const c_char) -> Result<String, PixproStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(PixproStatus::NullArgument);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(s.to_string()),
        Err(_) => {
            set_error("string argument is not valid UTF-8");
            Err(PixproStatus::InvalidUtf8)
        }
    }
}

/// # Safety
/// Same contract as [`str_arg`].
unsafe fn path_arg(ptr: *const c_char) -> Result<PathBuf, PixproStatus> {
    str_arg(ptr).map(PathBuf::from)
}

fn open_dataset(path: &Path) -> Result<Dataset, PixproStatus> {
    Dataset::open(path).map_err(fail)
}

/// Copies the calling thread's last error message (NUL-terminated,
/// truncated to `len`) into `buf`. Returns the full message length in
/// bytes, excluding the NUL.
///
/// # Safety
/// `buf` must point to at least `len` writable bytes (or be null, in
/// which case only the required length is returned).
#[no_mangle]
pub unsafe extern "C" fn pixpro_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Generates a synthetic labeled dataset under `out_dir`.
///
/// # Safety
/// `out_dir` must be a valid NUL-terminated C string.
#[no_mangle]
pub unsafe extern "C" fn pixpro_gen_dataset(
    out_dir: *const c_char,
    n_images: usize,
    size: usize,
    n_classes: usize,
    seed: u64,
) -> PixproStatus {
    let out = match path_arg(out_dir) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match gen_synthetic_dataset(&out, n_images, size, n_classes, seed) {
        Ok(_) => PixproStatus::Ok,
        Err(e) => fail(e),
    }
}

/// Runs (or resumes, when `resume` is nonzero) pretraining with the given
/// key-value config text, writing checkpoint and metrics into `out_dir`.
///
/// # Safety
/// `config_text` and `out_dir` must be valid NUL-terminated C strings.
#[no_mangle]
pub unsafe extern "C" fn pixpro_pretrain(
    config_text: *const c_char,
    out_dir: *const c_char,
    resume: i32,
) -> PixproStatus {
    let text = match str_arg(config_text) {
        Ok(s) => s,
        Err(s) => return s,
    };
    let out = match path_arg(out_dir) {
        Ok(p) => p,
        Err(s) => return s,
    };
    let config = match TrainRunConfig::parse(&text) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    match trainer::run_pretrain(&config, &out, resume != 0, None) {
        Ok(_) => PixproStatus::Ok,
        Err(e) => fail(e),
    }
}

/// Loads a checkpoint file into an opaque handle. The caller owns the
/// handle and must release it with `pixpro_checkpoint_free`.
///
/// # Safety
/// `path` must be a valid NUL-terminated C string; `out` must be a valid
/// pointer to receive the handle.
#[no_mangle]
pub unsafe extern "C" fn pixpro_checkpoint_open(
    path: *const c_char,
    out: *mut *mut PixproCheckpoint,
) -> PixproStatus {
    if out.is_null() {
        set_error("null output handle");
        return PixproStatus::NullArgument;
    }
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match checkpoint::load(&path) {
        Ok(state) => {
            *out = Box::into_raw(Box::new(PixproCheckpoint { state }));
            PixproStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Releases a handle created by `pixpro_checkpoint_open`. Null is a no-op.
///
/// # Safety
/// `handle` must be null or a pointer previously returned by
/// `pixpro_checkpoint_open` that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn pixpro_checkpoint_free(handle: *mut PixproCheckpoint) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Reads the step counter of a loaded checkpoint.
///
/// # Safety
/// `handle` must be a live handle; `out_step` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pixpro_checkpoint_step(
    handle: *const PixproCheckpoint,
    out_step: *mut u64,
) -> PixproStatus {
    if handle.is_null() || out_step.is_null() {
        set_error("null argument");
        return PixproStatus::NullArgument;
    }
    *out_step = (*handle).state.step;
    PixproStatus::Ok
}

/// Linear-probe top-1 accuracy of the checkpoint's frozen features on the
/// labeled dataset at `dataset_dir`.
///
/// # Safety
/// `handle` must be a live handle, `dataset_dir` a valid C string, and
/// `out_accuracy` writable.
#[no_mangle]
pub unsafe extern "C" fn pixpro_linear_probe(
    handle: *const PixproCheckpoint,
    dataset_dir: *const c_char,
    epochs: usize,
    out_accuracy: *mut f64,
) -> PixproStatus {
    if handle.is_null() || out_accuracy.is_null() {
        set_error("null argument");
        return PixproStatus::NullArgument;
    }
    let root = match path_arg(dataset_dir) {
        Ok(p) => p,
        Err(s) => return s,
    };
    let dataset = match open_dataset(&root) {
        Ok(d) => d,
        Err(s) => return s,
    };
    match eval::linear_probe(&(*handle).state, &dataset, epochs) {
        Ok(acc) => {
            *out_accuracy = acc;
            PixproStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Pixel-correspondence retrieval accuracy plus its empirical chance
/// baseline.
///
/// # Safety
/// `handle` must be a live handle, `dataset_dir` a valid C string, and
/// both out-pointers writable.
#[no_mangle]
pub unsafe extern "C" fn pixpro_correspondence_eval(
    handle: *const PixproCheckpoint,
    dataset_dir: *const c_char,
    n_pairs: usize,
    seed: u64,
    out_accuracy: *mut f64,
    out_chance: *mut f64,
) -> PixproStatus {
    if handle.is_null() || out_accuracy.is_null() || out_chance.is_null() {
        set_error("null argument");
        return PixproStatus::NullArgument;
    }
    let root = match path_arg(dataset_dir) {
        Ok(p) => p,
        Err(s) => return s,
    };
    let dataset = match open_dataset(&root) {
        Ok(d) => d,
        Err(s) => return s,
    };
    match eval::correspondence_eval(&(*handle).state, &dataset, n_pairs, seed) {
        Ok(res) => {
            *out_accuracy = res.accuracy;
            *out_chance = res.chance;
            PixproStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Embedding-variance collapse diagnostic. `out_collapsed` receives 1
/// when the mean normalized-embedding std falls below `threshold`.
///
/// # Safety
/// `handle` must be a live handle, `dataset_dir` a valid C string, and
/// both out-pointers writable.
#[no_mangle]
pub unsafe extern "C" fn pixpro_collapse_diagnostic(
    handle: *const PixproCheckpoint,
    dataset_dir: *const c_char,
    threshold: f64,
    out_mean_std: *mut f64,
    out_collapsed: *mut i32,
) -> PixproStatus {
    if handle.is_null() || out_mean_std.is_null() || out_collapsed.is_null() {
        set_error("null argument");
        return PixproStatus::NullArgument;
    }
    let root = match path_arg(dataset_dir) {
        Ok(p) => p,
        Err(s) => return s,
    };
    let dataset = match open_dataset(&root) {
        Ok(d) => d,
        Err(s) => return s,
    };
    match eval::collapse_diagnostic(&(*handle).state, &dataset, threshold) {
        Ok(report) => {
            *out_mean_std = report.mean_std;
            *out_collapsed = report.collapsed as i32;
            PixproStatus::Ok
        }
        Err(e) => fail(e),
    }
}
