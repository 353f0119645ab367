//! C ABI for floeberg.
//!
//! Scenes and models are opaque handles created by `flb_*_load` and released
//! with the matching `flb_*_free`. Every fallible call returns an
//! [`FlbStatus`]; on failure the message is kept per thread and can be read
//! with [`flb_last_error`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use floeberg::icechart::{eggcode_to_label, label_to_eggcode, EggCode, RegionalLabel, StageEntry};
use floeberg::scene_io::{load_scene, Scene};
use floeberg::trainer::{load_checkpoint, Checkpoint};
use floeberg::{Error, NUM_CLASSES};

/// Result codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlbStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Parse = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// A loaded scene directory.
pub struct FlbScene {
    scene: Scene,
}

/// A trained model loaded from a checkpoint.
pub struct FlbModel {
    ck: Checkpoint,
}

/// Class value written for land pixels by [`flb_predict`].
pub const FLB_NO_CLASS: u8 = 255;

/// Number of classes in label vectors and predictions.
pub const FLB_NUM_CLASSES: usize = 4;

// literals above so cbindgen can emit them
const _: () = assert!(FLB_NO_CLASS == floeberg::trainer::NO_CLASS && FLB_NUM_CLASSES == NUM_CLASSES);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: FlbStatus, msg: impl Into<String>) -> FlbStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn from_error(e: Error) -> FlbStatus {
    let status = match &e {
        Error::Parse { .. } => FlbStatus::Parse,
        Error::Argument(_) => FlbStatus::InvalidArgument,
        Error::Format(_) => FlbStatus::Format,
        Error::Io { .. } => FlbStatus::Io,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), FlbStatus>) -> FlbStatus {
    LAST_ERROR.with(|e| e.borrow_mut().clear());
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FlbStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(FlbStatus::Panic, format!("panic: {msg}"))
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), FlbStatus> {
    if p.is_null() {
        Err(fail(FlbStatus::NullArgument, format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, FlbStatus> {
    non_null(p, name)?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(FlbStatus::InvalidArgument, format!("{name} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length excluding the NUL, so
/// a call with `len == 0` sizes the buffer.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn flb_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn flb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads the scene directory at `dir`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn flb_scene_load(dir: *const c_char, out: *mut *mut FlbScene) -> FlbStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let dir = path_arg(dir, "dir")?;
        let scene = load_scene(&dir).map_err(from_error)?;
        *out = Box::into_raw(Box::new(FlbScene { scene }));
        Ok(())
    })
}

/// Writes the scene's height and width.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn flb_scene_dims(
    scene: *const FlbScene,
    height: *mut usize,
    width: *mut usize,
) -> FlbStatus {
    guard(|| {
        non_null(scene, "scene")?;
        non_null(height, "height")?;
        non_null(width, "width")?;
        *height = (*scene).scene.height;
        *width = (*scene).scene.width;
        Ok(())
    })
}

/// Releases a scene. Null is ignored.
///
/// # Safety
/// `scene` must come from [`flb_scene_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn flb_scene_free(scene: *mut FlbScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Loads a checkpoint written by `floeberg train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn flb_model_load(path: *const c_char, out: *mut *mut FlbModel) -> FlbStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let ck = load_checkpoint(&path).map_err(from_error)?;
        *out = Box::into_raw(Box::new(FlbModel { ck }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`flb_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn flb_model_free(model: *mut FlbModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Predicts the class map of `scene` into `out` (row-major, `height * width`
/// bytes, classes 0..4 and [`FLB_NO_CLASS`] on land).
///
/// The output grid is the scene downscaled by the model's training ratio.
/// `height` and `width` are always written; if `out_len` is too small the
/// call returns `BufferTooSmall` without running the network, so passing a
/// null `out` with `out_len == 0` queries the size.
///
/// # Safety
/// Handles must be live, `height`/`width` valid and `out` null or pointing to
/// `out_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn flb_predict(
    model: *const FlbModel,
    scene: *const FlbScene,
    out: *mut u8,
    out_len: usize,
    height: *mut usize,
    width: *mut usize,
) -> FlbStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(scene, "scene")?;
        non_null(height, "height")?;
        non_null(width, "width")?;
        let ck = &(*model).ck;
        let s = &(*scene).scene;
        let r = ck.config.downscale_ratio.max(1);
        let (h, w) = (s.height / r, s.width / r);
        *height = h;
        *width = w;
        if out.is_null() || out_len < h * w {
            return Err(fail(
                FlbStatus::BufferTooSmall,
                format!("output needs {} bytes, got {out_len}", h * w),
            ));
        }
        let (classes, ph, pw) = ck.predict_classes(s).map_err(from_error)?;
        debug_assert_eq!((ph, pw), (h, w));
        ptr::copy_nonoverlapping(classes.as_ptr(), out, classes.len());
        Ok(())
    })
}

/// Converts an egg code into a class-indexed label vector
/// `[water, young, first-year, multiyear]`.
///
/// # Safety
/// `partials` and `stages` must point to 3 bytes, `out` to 4 doubles.
#[no_mangle]
pub unsafe extern "C" fn flb_eggcode_to_label(
    ct: u8,
    partials: *const u8,
    stages: *const u8,
    out: *mut f64,
) -> FlbStatus {
    guard(|| {
        non_null(partials, "partials")?;
        non_null(stages, "stages")?;
        non_null(out, "out")?;
        let p: [u8; 3] = *partials.cast::<[u8; 3]>();
        let raw: [u8; 3] = *stages.cast::<[u8; 3]>();
        let mut st = [StageEntry::new(0).map_err(from_error)?; 3];
        for (d, &v) in st.iter_mut().zip(&raw) {
            *d = StageEntry::new(v).map_err(from_error)?;
        }
        let e = EggCode::new(ct, p, st).map_err(from_error)?;
        let conc = eggcode_to_label(&e).conc();
        ptr::copy_nonoverlapping(conc.as_ptr(), out, NUM_CLASSES);
        Ok(())
    })
}

/// Quantizes a label vector to the nearest egg code (tenths, thickest stage
/// first).
///
/// # Safety
/// `label` must point to 4 doubles, `ct` to 1 byte, `partials` and `stages`
/// to 3 writable bytes each.
#[no_mangle]
pub unsafe extern "C" fn flb_label_to_eggcode(
    label: *const f64,
    ct: *mut u8,
    partials: *mut u8,
    stages: *mut u8,
) -> FlbStatus {
    guard(|| {
        non_null(label, "label")?;
        non_null(ct, "ct")?;
        non_null(partials, "partials")?;
        non_null(stages, "stages")?;
        let l = RegionalLabel::new(*label.cast::<[f64; 4]>()).map_err(from_error)?;
        let e = label_to_eggcode(&l);
        *ct = e.ct();
        *partials.cast::<[u8; 3]>() = e.partials();
        *stages.cast::<[u8; 3]>() = e.stages().map(StageEntry::value);
        Ok(())
    })
}
