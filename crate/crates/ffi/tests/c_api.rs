use std::ffi::{CStr, CString};
use std::ptr;

use chestdiff_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    unsafe {
        cd_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn auroc_through_the_abi() {
    let scores = [0.8, 0.4, 0.6, 0.2];
    let labels = [1u8, 1, 0, 0];
    let mut out = 0.0;
    let st = unsafe { cd_auroc(scores.as_ptr(), labels.as_ptr(), 4, &mut out) };
    assert_eq!(st, CdStatus::Ok);
    assert_eq!(out, 0.75);
    let st = unsafe { cd_auroc(scores.as_ptr(), [1u8; 4].as_ptr(), 4, &mut out) };
    assert_eq!(st, CdStatus::Config);
    assert!(last_error().contains("negative"), "{}", last_error());
}

#[test]
fn frechet_through_the_abi() {
    let a = [0.0, 0.0, 2.0, 0.0, 1.0, 1.0];
    let mut out = -1.0;
    let st = unsafe { cd_frechet_distance(a.as_ptr(), 3, a.as_ptr(), 3, 2, &mut out) };
    assert_eq!(st, CdStatus::Ok);
    assert!(out.abs() < 1e-9);
    let st = unsafe { cd_frechet_distance(a.as_ptr(), 1, a.as_ptr(), 3, 2, &mut out) };
    assert_eq!(st, CdStatus::Config);
}

#[test]
fn null_arguments_are_rejected() {
    let mut out = 0.0;
    assert_eq!(unsafe { cd_auroc(ptr::null(), ptr::null(), 0, &mut out) }, CdStatus::NullArgument);
    assert_eq!(unsafe { cd_pipeline_load(ptr::null(), ptr::null_mut()) }, CdStatus::NullArgument);
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { cd_pipeline_load(ptr::null(), &mut p) }, CdStatus::NullArgument);
    assert!(p.is_null());
    unsafe { cd_pipeline_free(ptr::null_mut()) };
    assert_eq!(unsafe { cd_pipeline_image_size(ptr::null()) }, 0);
    let mut px = [0u8; 4];
    let r = CString::new("x").unwrap();
    let st = unsafe { cd_pipeline_generate(ptr::null(), r.as_ptr(), 0, 1, 0.0, px.as_mut_ptr(), 4) };
    assert_eq!(st, CdStatus::NullArgument);
}

#[test]
fn missing_checkpoints_map_to_prerequisite_status() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut p = ptr::null_mut();
    let st = unsafe { cd_pipeline_load(path.as_ptr(), &mut p) };
    assert_eq!(st, CdStatus::MissingPrerequisite);
    assert!(p.is_null());
    assert!(last_error().contains("clip"));
}

#[test]
fn error_buffer_truncates_and_reports_length() {
    let mut out = 0.0;
    unsafe { cd_auroc([0.1f64].as_ptr(), [1u8].as_ptr(), 1, &mut out) };
    let full = unsafe { cd_last_error(ptr::null_mut(), 0) };
    let mut small = [0 as std::ffi::c_char; 5];
    assert_eq!(unsafe { cd_last_error(small.as_mut_ptr(), 5) }, full);
    assert_eq!(unsafe { CStr::from_ptr(small.as_ptr()) }.to_bytes().len(), 4);
}

#[test]
fn header_declares_the_abi() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/chestdiff.h")).unwrap();
    for name in [
        "cd_pipeline_load",
        "cd_pipeline_free",
        "cd_pipeline_generate",
        "cd_pipeline_image_size",
        "cd_auroc",
        "cd_frechet_distance",
        "cd_last_error",
        "cd_version",
        "typedef struct CdPipeline CdPipeline",
        "CD_STATUS_MISSING_PREREQUISITE = 3",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
    let v = unsafe { CStr::from_ptr(cd_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
