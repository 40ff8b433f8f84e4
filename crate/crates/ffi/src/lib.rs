//! C ABI over the avatar pipeline: body-model handles, fixture generation,
//! training, rendering, and evaluation, with per-thread error messages.
//!
//! Conventions: every path is a NUL-terminated UTF-8 string; functions
//! returning [`AvatarStatus`] report failure details through
//! [`avatar_last_error_message`]; strings returned by this library are
//! released with [`avatar_string_free`]; handles are opaque and released by
//! their matching `_free` function. No function panics across the boundary.

#![deny(unsafe_op_in_unsafe_fn)]

use avatar_core::body_model::SkinnedBodyModel;
use avatar_core::error::Error as CoreError;
use avatar_core::io_formats::load_body_model_archive;
use avatar_core::pipeline::{run_evaluate, run_fixture, run_render, run_training, TrainPaths};
use avatar_core::trainer::Ablation;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Status codes; nonzero values mirror the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AvatarStatus {
    Ok = 0,
    /// Internal failure (panic or invalid argument).
    Internal = 1,
    BadConfig = 2,
    AssetError = 3,
    AdapterError = 4,
    NumericError = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn status_of(err: &CoreError) -> AvatarStatus {
    match err.exit_code() {
        2 => AvatarStatus::BadConfig,
        4 => AvatarStatus::AdapterError,
        5 => AvatarStatus::NumericError,
        _ => AvatarStatus::AssetError,
    }
}

fn fail(err: CoreError) -> AvatarStatus {
    let status = status_of(&err);
    set_error(err.to_string());
    status
}

/// Run a fallible body, translating panics and errors into statuses.
fn guarded(f: impl FnOnce() -> Result<(), CoreError>) -> AvatarStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AvatarStatus::Ok,
        Ok(Err(err)) => fail(err),
        Err(_) => {
            set_error("panic inside avatar library".into());
            AvatarStatus::Internal
        }
    }
}

/// # Safety
/// `ptr` must be NUL-terminated and valid for reads.
unsafe fn path_arg(ptr: *const c_char, name: &str) -> Result<PathBuf, CoreError> {
    if ptr.is_null() {
        return Err(CoreError::InvalidInput(format!("{name} is null")));
    }
    let s = unsafe { CStr::from_ptr(ptr) }
        .to_str()
        .map_err(|_| CoreError::InvalidInput(format!("{name} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn avatar_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Message of the most recent failure on this thread, or null. The caller
/// frees it with [`avatar_string_free`].
#[no_mangle]
pub extern "C" fn avatar_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|slot| match slot.borrow().as_ref() {
        Some(msg) => msg.clone().into_raw(),
        None => std::ptr::null_mut(),
    })
}

/// Release a string returned by this library.
///
/// # Safety
/// `ptr` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn avatar_string_free(ptr: *mut c_char) {
    if !ptr.is_null() {
        drop(unsafe { CString::from_raw(ptr) });
    }
}

/// Opaque loaded body model.
pub struct AvatarBodyModel {
    model: Arc<SkinnedBodyModel>,
}

/// Load a body-model archive directory; null on failure (see
/// [`avatar_last_error_message`]).
///
/// # Safety
/// `archive_dir` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn avatar_body_model_load(
    archive_dir: *const c_char,
) -> *mut AvatarBodyModel {
    let result = catch_unwind(AssertUnwindSafe(|| -> Result<_, CoreError> {
        let dir = unsafe { path_arg(archive_dir, "archive_dir") }?;
        let model = load_body_model_archive(&dir)?;
        Ok(Box::into_raw(Box::new(AvatarBodyModel {
            model: Arc::new(model),
        })))
    }));
    match result {
        Ok(Ok(handle)) => handle,
        Ok(Err(err)) => {
            let _ = fail(err);
            std::ptr::null_mut()
        }
        Err(_) => {
            set_error("panic inside avatar library".into());
            std::ptr::null_mut()
        }
    }
}

/// # Safety
/// `handle` must come from [`avatar_body_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn avatar_body_model_free(handle: *mut AvatarBodyModel) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// # Safety
/// `handle` must be a live model handle (or null, which yields 0).
#[no_mangle]
pub unsafe extern "C" fn avatar_body_model_vertex_count(handle: *const AvatarBodyModel) -> u64 {
    if handle.is_null() {
        return 0;
    }
    unsafe { &*handle }.model.vertex_count() as u64
}

/// # Safety
/// `handle` must be a live model handle (or null, which yields 0).
#[no_mangle]
pub unsafe extern "C" fn avatar_body_model_joint_count(handle: *const AvatarBodyModel) -> u64 {
    if handle.is_null() {
        return 0;
    }
    unsafe { &*handle }.model.joint_count() as u64
}

/// Write the capsule end-to-end fixture into `out_dir`.
///
/// # Safety
/// `out_dir` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn avatar_fixture_generate(
    out_dir: *const c_char,
    seed: u64,
) -> AvatarStatus {
    guarded(|| {
        let out = unsafe { path_arg(out_dir, "out_dir") }?;
        run_fixture(&out, seed)?;
        Ok(())
    })
}

/// Training inputs; every field is a path string.
#[repr(C)]
pub struct AvatarTrainArgs {
    pub config: *const c_char,
    pub model: *const c_char,
    pub image: *const c_char,
    pub mask: *const c_char,
    pub camera: *const c_char,
    pub shape: *const c_char,
    pub input_pose: *const c_char,
    pub motion: *const c_char,
    pub out_dir: *const c_char,
    /// Comma-separated ablation names, or null.
    pub ablations: *const c_char,
    /// Checkpoint to resume from, or null.
    pub resume: *const c_char,
    /// Nonzero: run only the initialization stage.
    pub init_only: u8,
}

/// Run the two-stage optimization; outputs (checkpoints, logs, summary,
/// manifest) land in `out_dir`.
///
/// # Safety
/// `args` and its non-null fields must be valid for reads.
#[no_mangle]
pub unsafe extern "C" fn avatar_train(args: *const AvatarTrainArgs) -> AvatarStatus {
    guarded(|| {
        if args.is_null() {
            return Err(CoreError::InvalidInput("args is null".into()));
        }
        let a = unsafe { &*args };
        let paths = TrainPaths {
            config: unsafe { path_arg(a.config, "config") }?,
            model: unsafe { path_arg(a.model, "model") }?,
            image: unsafe { path_arg(a.image, "image") }?,
            mask: unsafe { path_arg(a.mask, "mask") }?,
            camera: unsafe { path_arg(a.camera, "camera") }?,
            shape: unsafe { path_arg(a.shape, "shape") }?,
            input_pose: unsafe { path_arg(a.input_pose, "input_pose") }?,
            motion: unsafe { path_arg(a.motion, "motion") }?,
            out: unsafe { path_arg(a.out_dir, "out_dir") }?,
        };
        let ablations: Vec<Ablation> = if a.ablations.is_null() {
            Vec::new()
        } else {
            let text = unsafe { CStr::from_ptr(a.ablations) }
                .to_str()
                .map_err(|_| CoreError::InvalidInput("ablations is not valid UTF-8".into()))?;
            text.split(',')
                .filter(|s| !s.is_empty())
                .map(str::parse)
                .collect::<Result<_, _>>()?
        };
        let resume: Option<PathBuf> = if a.resume.is_null() {
            None
        } else {
            Some(unsafe { path_arg(a.resume, "resume") }?)
        };
        run_training(&paths, ablations, resume.as_deref(), a.init_only != 0)?;
        Ok(())
    })
}

/// Render one frame per (pose, camera) pair from a checkpoint.
///
/// # Safety
/// All non-null pointers must be valid NUL-terminated strings; `model` may
/// be null to use the archive path recorded in the checkpoint.
#[no_mangle]
pub unsafe extern "C" fn avatar_render(
    checkpoint: *const c_char,
    model: *const c_char,
    motion: *const c_char,
    cameras: *const c_char,
    out_dir: *const c_char,
    samples: usize,
    margin: f64,
) -> AvatarStatus {
    guarded(|| {
        let checkpoint = unsafe { path_arg(checkpoint, "checkpoint") }?;
        let model: Option<PathBuf> = if model.is_null() {
            None
        } else {
            Some(unsafe { path_arg(model, "model") }?)
        };
        let motion = unsafe { path_arg(motion, "motion") }?;
        let cameras = unsafe { path_arg(cameras, "cameras") }?;
        let out = unsafe { path_arg(out_dir, "out_dir") }?;
        run_render(
            &checkpoint,
            model.as_deref().map(Path::new),
            &motion,
            &cameras,
            &out,
            samples,
            margin,
        )?;
        Ok(())
    })
}

/// Evaluate rendered frames against ground truth under the subject-bbox
/// protocol; writes `metrics.csv` and `metrics.json` into `out_dir`.
///
/// # Safety
/// All pointers must be valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn avatar_evaluate(
    rendered: *const c_char,
    truth: *const c_char,
    masks: *const c_char,
    out_dir: *const c_char,
    margin: i64,
) -> AvatarStatus {
    guarded(|| {
        let rendered = unsafe { path_arg(rendered, "rendered") }?;
        let truth = unsafe { path_arg(truth, "truth") }?;
        let masks = unsafe { path_arg(masks, "masks") }?;
        let out = unsafe { path_arg(out_dir, "out_dir") }?;
        run_evaluate(&rendered, &truth, &masks, &out, margin, "builtin")?;
        Ok(())
    })
}
