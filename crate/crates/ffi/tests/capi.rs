use std::ffi::{CStr, CString};
use std::ptr;

use vfiformer_ffi::*;

fn new_toy(seed: u64) -> *mut VfiModel {
    let preset = CString::new("toy").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { vfi_model_new(preset.as_ptr(), seed, &mut m) }, VfiStatus::VfiOk);
    assert!(!m.is_null());
    m
}

fn last_error() -> String {
    let p = vfi_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(vfi_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn untrained_model_returns_the_overlay() {
    let m = new_toy(3);
    let (h, w) = (16usize, 32usize);
    let a: Vec<f32> = (0..3 * h * w).map(|i| (i % 7) as f32 / 7.0).collect();
    let b: Vec<f32> = (0..3 * h * w).map(|i| (i % 5) as f32 / 5.0).collect();
    let mut out = vec![0f32; 3 * h * w];
    let st = unsafe { vfi_interpolate(m, a.as_ptr(), b.as_ptr(), h, w, out.as_mut_ptr()) };
    assert_eq!(st, VfiStatus::VfiOk);
    for i in 0..out.len() {
        assert!((out[i] - 0.5 * (a[i] + b[i])).abs() < 1e-5);
    }
    let mut n = 0usize;
    assert_eq!(unsafe { vfi_model_param_count(m, &mut n) }, VfiStatus::VfiOk);
    assert!(n > 0);
    unsafe { vfi_model_free(m) };
}

#[test]
fn odd_sizes_are_padded() {
    let m = new_toy(0);
    let (h, w) = (20usize, 18usize);
    let a = vec![0.25f32; 3 * h * w];
    let mut out = vec![0f32; 3 * h * w];
    let st = unsafe { vfi_interpolate(m, a.as_ptr(), a.as_ptr(), h, w, out.as_mut_ptr()) };
    assert_eq!(st, VfiStatus::VfiOk);
    assert!(out.iter().all(|&v| (v - 0.25).abs() < 1e-5));
    unsafe { vfi_model_free(m) };
}

#[test]
fn null_arguments_are_reported() {
    let m = new_toy(0);
    let a = vec![0f32; 3 * 16 * 16];
    let st = unsafe { vfi_interpolate(m, ptr::null(), a.as_ptr(), 16, 16, ptr::null_mut()) };
    assert_eq!(st, VfiStatus::VfiErrNullPointer);
    assert!(last_error().contains("null"));
    assert_eq!(unsafe { vfi_model_load(ptr::null(), ptr::null_mut()) }, VfiStatus::VfiErrNullPointer);
    unsafe { vfi_model_free(m) };
    unsafe { vfi_model_free(ptr::null_mut()) };
}

#[test]
fn unknown_preset_is_a_config_error() {
    let preset = CString::new("huge").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { vfi_model_new(preset.as_ptr(), 0, &mut m) }, VfiStatus::VfiErrConfig);
    assert!(m.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("absent.vfit").to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { vfi_model_load(path.as_ptr(), &mut m) }, VfiStatus::VfiErrIo);
    assert!(m.is_null());
}

#[test]
fn success_clears_the_last_error() {
    let preset = CString::new("nope").unwrap();
    let mut m = ptr::null_mut();
    unsafe { vfi_model_new(preset.as_ptr(), 0, &mut m) };
    assert!(!vfi_last_error_message().is_null());
    let a = [0.5f32; 4];
    let mut p = 0.0;
    assert_eq!(unsafe { vfi_psnr(a.as_ptr(), a.as_ptr(), 4, &mut p) }, VfiStatus::VfiOk);
    assert_eq!(p, 99.0);
    assert!(vfi_last_error_message().is_null());
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/vfiformer.h")).unwrap();
    for name in ["vfi_model_load", "vfi_model_new", "vfi_model_free", "vfi_interpolate", "vfi_last_error_message", "VFI_OK", "typedef struct VfiModel VfiModel"] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
