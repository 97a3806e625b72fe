//! C ABI for loading a trained interpolator and synthesizing middle frames.
//!
//! Every function returns a [`VfiStatus`]. On failure the message is kept
//! per thread and read back with [`vfi_last_error_message`]. Frames cross
//! the boundary as planar `float` RGB, `3 * height * width` values in
//! `[0, 1]`, channel-major.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use vfiformer::config::ModelConfig;
use vfiformer::model::Model;
use vfiformer::synth::psnr;
use vfiformer::train::load_model;
use vfiformer::{Error, ParamStore, Tensor};

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VfiStatus {
    VfiOk = 0,
    VfiErrNullPointer = 1,
    VfiErrDimension = 2,
    VfiErrUsage = 3,
    VfiErrConfig = 4,
    VfiErrGeometry = 5,
    VfiErrInput = 6,
    VfiErrFormat = 7,
    VfiErrNumeric = 8,
    VfiErrIo = 9,
    VfiErrPanic = 10,
}

/// A model and its weights. Create with [`vfi_model_load`] or
/// [`vfi_model_new`], release with [`vfi_model_free`].
pub struct VfiModel {
    model: Model,
    store: ParamStore<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn status_of(e: &Error) -> VfiStatus {
    match e {
        Error::Dimension(_) => VfiStatus::VfiErrDimension,
        Error::Usage(_) => VfiStatus::VfiErrUsage,
        Error::Config(_) => VfiStatus::VfiErrConfig,
        Error::Geometry(_) => VfiStatus::VfiErrGeometry,
        Error::Input(_) => VfiStatus::VfiErrInput,
        Error::Format(_) => VfiStatus::VfiErrFormat,
        Error::Numeric(_) => VfiStatus::VfiErrNumeric,
        Error::Io { .. } => VfiStatus::VfiErrIo,
    }
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), (VfiStatus, String)>) -> VfiStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VfiStatus::VfiOk,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            VfiStatus::VfiErrPanic
        }
    }
}

fn lib(e: Error) -> (VfiStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (VfiStatus, String) {
    (VfiStatus::VfiErrNullPointer, format!("{what} is null"))
}

unsafe fn frame_from(ptr: *const f32, height: usize, width: usize, what: &str) -> Result<Tensor<f32>, (VfiStatus, String)> {
    if ptr.is_null() {
        return Err(null(what));
    }
    let n = 3 * height * width;
    let data = std::slice::from_raw_parts(ptr, n).to_vec();
    Tensor::new(vec![1, 3, height, width], data).map_err(lib)
}

/// Static version string.
#[no_mangle]
pub extern "C" fn vfi_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next call on the same thread.
#[no_mangle]
pub extern "C" fn vfi_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint written by training.
#[no_mangle]
pub unsafe extern "C" fn vfi_model_load(path: *const c_char, out: *mut *mut VfiModel) -> VfiStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (VfiStatus::VfiErrInput, "path is not UTF-8".to_string()))?;
        let (model, store, _) = load_model(Path::new(path)).map_err(lib)?;
        *out = Box::into_raw(Box::new(VfiModel { model, store }));
        Ok(())
    })
}

/// A freshly initialized (untrained) model of a named preset, `"toy"` or
/// `"paper"`.
#[no_mangle]
pub unsafe extern "C" fn vfi_model_new(preset: *const c_char, seed: u64, out: *mut *mut VfiModel) -> VfiStatus {
    guard(|| {
        if preset.is_null() {
            return Err(null("preset"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let name = CStr::from_ptr(preset)
            .to_str()
            .map_err(|_| (VfiStatus::VfiErrInput, "preset is not UTF-8".to_string()))?;
        let cfg = ModelConfig::preset(name).map_err(lib)?;
        let (model, store) = Model::init(&cfg, seed).map_err(lib)?;
        *out = Box::into_raw(Box::new(VfiModel { model, store }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn vfi_model_free(model: *mut VfiModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of scalar parameters.
#[no_mangle]
pub unsafe extern "C" fn vfi_model_param_count(model: *const VfiModel, out: *mut usize) -> VfiStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.store.iter().map(|(_, p)| p.numel()).sum();
        Ok(())
    })
}

/// Writes the middle frame between `frame0` and `frame1` into `out`
/// (all `3 * height * width` floats).
#[no_mangle]
pub unsafe extern "C" fn vfi_interpolate(
    model: *const VfiModel,
    frame0: *const f32,
    frame1: *const f32,
    height: usize,
    width: usize,
    out: *mut f32,
) -> VfiStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if height == 0 || width == 0 {
            return Err((VfiStatus::VfiErrInput, format!("empty frame {height}x{width}")));
        }
        let a = frame_from(frame0, height, width, "frame0")?;
        let b = frame_from(frame1, height, width, "frame1")?;
        let mid = m.model.interpolate(&m.store, &a, &b).map_err(lib)?;
        std::slice::from_raw_parts_mut(out, mid.numel()).copy_from_slice(mid.data());
        Ok(())
    })
}

/// PSNR in dB between two frames of `len` floats (capped at 99).
#[no_mangle]
pub unsafe extern "C" fn vfi_psnr(a: *const f32, b: *const f32, len: usize, out: *mut f64) -> VfiStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let ta = Tensor::new(vec![len], std::slice::from_raw_parts(a, len).to_vec()).map_err(lib)?;
        let tb = Tensor::new(vec![len], std::slice::from_raw_parts(b, len).to_vec()).map_err(lib)?;
        *out = psnr(&ta, &tb).map_err(lib)?;
        Ok(())
    })
}
