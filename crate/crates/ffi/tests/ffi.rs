use std::ffi::{CStr, CString};
use std::ptr;

use qpnls_ffi::*;

fn config(j: &str, a: &str, rule: &str) -> CString {
    CString::new(format!(
        r#"{{"schema":"v1","problem":{{"p":1,"j_list":{j},"a":{a},"delta":0.01}},"genericity":{{"rule":"{rule}"}}}}"#
    ))
    .unwrap()
}

fn last_error() -> String {
    let p = qpnls_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn new_solver(cfg: &CString) -> *mut QpnlsSolver {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { qpnls_solver_new(cfg.as_ptr(), &mut s) }, QpnlsStatus::Ok);
    assert!(!s.is_null());
    s
}

#[test]
fn solves_the_two_frequency_instance() {
    let cfg = config("[[1,-1],[-4,3]]", "[0.6180339887,0.7071067811]", "solvable");
    let s = new_solver(&cfg);
    unsafe {
        let mut b = 0usize;
        assert_eq!(qpnls_solver_frequency_count(s, &mut b), QpnlsStatus::Ok);
        assert_eq!(b, 2);
        let mut omega = [0.0f64; 2];
        assert_eq!(qpnls_solver_omega(s, omega.as_mut_ptr(), 2), QpnlsStatus::NotRun);
        assert_eq!(qpnls_solver_run(s), QpnlsStatus::Ok);
        assert_eq!(qpnls_solver_omega(s, omega.as_mut_ptr(), 1), QpnlsStatus::BufferTooSmall);
        assert_eq!(qpnls_solver_omega(s, omega.as_mut_ptr(), 2), QpnlsStatus::Ok);
        assert!(omega.iter().all(|w| w.is_finite() && *w > 0.0));
        let (mut res, mut steps) = (f64::NAN, usize::MAX);
        assert_eq!(qpnls_solver_summary(s, &mut res, &mut steps), QpnlsStatus::Ok);
        assert!(res < 1e-12, "residual {res:e}");
        assert!(steps <= 10);
        let mut js = ptr::null_mut();
        assert_eq!(qpnls_solver_trace_json(s, &mut js), QpnlsStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(CStr::from_ptr(js).to_str().unwrap()).unwrap();
        assert_eq!(v["outcome"]["status"], "converged");
        qpnls_string_free(js);
        qpnls_solver_free(s);
    }
}

#[test]
fn resonant_amplitudes_are_excised() {
    let cfg = config("[[1,-1],[-4,3]]", "[0.5,0.5]", "solvable");
    let s = new_solver(&cfg);
    unsafe {
        assert_eq!(qpnls_solver_run(s), QpnlsStatus::Excised);
        assert!(last_error().contains("diophantine"));
        let mut b = [0.0; 2];
        assert_eq!(qpnls_solver_omega(s, b.as_mut_ptr(), 2), QpnlsStatus::Ok);
        qpnls_solver_free(s);
    }
}

#[test]
fn non_generic_support_is_refused() {
    let cfg = config("[[1],[3]]", "[0.5,0.6]", "literal");
    let s = new_solver(&cfg);
    unsafe {
        assert_eq!(qpnls_solver_run(s), QpnlsStatus::NotGeneric);
        let mut js = ptr::null_mut();
        assert_eq!(qpnls_genericity_json(cfg.as_ptr(), &mut js), QpnlsStatus::NotGeneric);
        let v: serde_json::Value = serde_json::from_str(CStr::from_ptr(js).to_str().unwrap()).unwrap();
        assert_eq!(v["verdict"], "non_generic");
        qpnls_string_free(js);
        qpnls_solver_free(s);
    }
}

#[test]
fn bad_input_is_reported() {
    unsafe {
        let mut s = ptr::null_mut();
        let bad = CString::new("{\"schema\":").unwrap();
        assert_eq!(qpnls_solver_new(bad.as_ptr(), &mut s), QpnlsStatus::Config);
        assert!(s.is_null());
        assert!(!last_error().is_empty());
        assert_eq!(qpnls_solver_new(ptr::null(), &mut s), QpnlsStatus::NullPointer);
        let cfg = config("[[2,-1]]", "[0.7]", "literal");
        assert_eq!(qpnls_solver_new(cfg.as_ptr(), ptr::null_mut()), QpnlsStatus::NullPointer);
        let invalid = [0xffu8, 0xfe, 0];
        assert_eq!(qpnls_solver_new(invalid.as_ptr().cast(), &mut s), QpnlsStatus::InvalidUtf8);
        assert_eq!(qpnls_solver_run(ptr::null_mut()), QpnlsStatus::NullPointer);
        qpnls_solver_free(ptr::null_mut());
        qpnls_string_free(ptr::null_mut());
    }
}

#[test]
fn version_matches_the_crate() {
    let v = unsafe { CStr::from_ptr(qpnls_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/qpnls.h")).unwrap();
    for name in [
        "qpnls_last_error",
        "qpnls_version",
        "qpnls_solver_new",
        "qpnls_solver_free",
        "qpnls_solver_run",
        "qpnls_solver_frequency_count",
        "qpnls_solver_omega",
        "qpnls_solver_summary",
        "qpnls_solver_trace_json",
        "qpnls_genericity_json",
        "qpnls_string_free",
        "typedef struct QpnlsSolver QpnlsSolver",
        "QPNLS_STATUS_PANIC = 10",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
