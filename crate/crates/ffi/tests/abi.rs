use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use rfmi_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(rfmi_last_error()) }.to_string_lossy().into_owned()
}

fn task(spec: &str) -> *mut RfmiTask {
    let spec = CString::new(spec).unwrap();
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { rfmi_task_new(spec.as_ptr(), &mut t) }, RfmiStatus::Ok, "{}", last_error());
    t
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(rfmi_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn task_reports_truth_and_dims() {
    let t = task(r#"{"family": "correlated-gaussian", "rho": [0.5, 0.9]}"#);
    let mut mi = 0.0;
    let (mut dx, mut dy) = (0, 0);
    unsafe {
        assert_eq!(rfmi_task_true_mi(t, &mut mi), RfmiStatus::Ok);
        assert_eq!(rfmi_task_dims(t, &mut dx, &mut dy), RfmiStatus::Ok);
        rfmi_task_free(t);
    }
    let expect = -0.5 * ((1.0f64 - 0.25).ln() + (1.0f64 - 0.81).ln());
    assert!((mi - expect).abs() < 1e-12);
    assert_eq!((dx, dy), (2, 2));
}

#[test]
fn bad_spec_sets_config_status_and_message() {
    let spec = CString::new(r#"{"family": "correlated-gaussian", "rho": [1.5]}"#).unwrap();
    let mut t = ptr::null_mut();
    let status = unsafe { rfmi_task_new(spec.as_ptr(), &mut t) };
    assert_eq!(status, RfmiStatus::Config);
    assert!(t.is_null());
    assert!(!last_error().is_empty());

    let junk = CString::new("{not json").unwrap();
    assert_eq!(unsafe { rfmi_task_new(junk.as_ptr(), &mut t) }, RfmiStatus::Config);
    assert_eq!(unsafe { rfmi_task_new(ptr::null(), &mut t) }, RfmiStatus::NullPointer);
}

#[test]
fn success_clears_the_last_error() {
    let mut t = ptr::null_mut();
    unsafe { rfmi_task_new(ptr::null(), &mut t) };
    assert!(!last_error().is_empty());
    let t = task(r#"{"family": "correlated-gaussian", "rho": [0.5]}"#);
    assert!(last_error().is_empty());
    unsafe { rfmi_task_free(t) };
}

#[test]
fn sampling_checks_buffers_and_is_seeded() {
    let t = task(r#"{"family": "gaussian-mixture-label", "means": [[-1.0], [1.0]], "variance": 1.0}"#);
    let n = 16;
    let mut x = vec![0.0; n];
    let mut y = vec![0.0; n * 2];
    unsafe {
        let short = rfmi_task_sample(t, n, 7, x.as_mut_ptr(), x.len(), y.as_mut_ptr(), n);
        assert_eq!(short, RfmiStatus::BufferTooSmall);
        assert_eq!(rfmi_task_sample(t, n, 7, x.as_mut_ptr(), x.len(), y.as_mut_ptr(), y.len()), RfmiStatus::Ok);
    }
    // One-hot labels.
    for row in y.chunks(2) {
        assert_eq!(row.iter().sum::<f64>(), 1.0);
    }
    let mut x2 = vec![0.0; n];
    unsafe {
        rfmi_task_sample(t, n, 7, x2.as_mut_ptr(), x2.len(), y.as_mut_ptr(), y.len());
        rfmi_task_free(t);
    }
    assert_eq!(x, x2);
}

#[test]
fn analytic_estimate_is_close_to_truth() {
    let t = task(r#"{"family": "correlated-gaussian", "rho": [0.9]}"#);
    let cfg = CString::new(r#"{"n_y": 400, "seed": 3}"#).unwrap();
    let mut est = RfmiEstimate::default();
    let mut truth = 0.0;
    unsafe {
        assert_eq!(rfmi_estimate(ptr::null(), t, cfg.as_ptr(), &mut est), RfmiStatus::Ok, "{}", last_error());
        rfmi_task_true_mi(t, &mut truth);
        rfmi_task_free(t);
    }
    assert_eq!(est.estimator, 2);
    assert_eq!(est.n_y, 400);
    assert!((est.value - truth).abs() < 4.0 * est.std_error + 0.02, "{} vs {truth}", est.value);
}

#[test]
fn estimate_without_analytic_field_needs_a_model() {
    let t = task(r#"{"family": "nonlinear-transformed-gaussian", "rho": [0.9]}"#);
    let mut est = RfmiEstimate::default();
    let status = unsafe { rfmi_estimate(ptr::null(), t, ptr::null(), &mut est) };
    unsafe { rfmi_task_free(t) };
    assert_eq!(status, RfmiStatus::Config);
    assert!(last_error().contains("model"));
}

#[test]
fn missing_or_corrupt_model_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = ptr::null_mut();
    let missing = CString::new(dir.path().join("none.json").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { rfmi_model_load(missing.as_ptr(), &mut m) }, RfmiStatus::Io);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"format_version": 99}"#).unwrap();
    let bad = CString::new(bad.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { rfmi_model_load(bad.as_ptr(), &mut m) }, RfmiStatus::Format);
    assert!(m.is_null());
    unsafe { rfmi_model_free(ptr::null_mut()) };
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/rfmi.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["rfmi_task_new", "rfmi_estimate", "rfmi_model_load", "RFMI_STATUS_NUMERICAL"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        format!(
            "#include <stdio.h>\n#include \"{}\"\nint main(void) {{ RfmiEstimate e; RfmiTask *t = 0; \
             return rfmi_task_new(\"{{}}\", &t) == RFMI_STATUS_OK ? (int)e.std_error : 1; }}\n",
            header.display()
        ),
    )
    .unwrap();
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let out = match Command::new(compiler).args(["-fsyntax-only", "-Wall", "-x", lang]).arg(&src).output() {
            Ok(o) => o,
            Err(_) => {
                eprintln!("{compiler} not found; skipping");
                continue;
            }
        };
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
