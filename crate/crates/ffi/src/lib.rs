//! C interface to the qpnls solver.
//!
//! A solver is created from a JSON run configuration, run once, and then
//! queried. Every call returns a `QpnlsStatus`; the message behind the last
//! failure on the calling thread is available from `qpnls_last_error`.
//! Strings handed out by the library are released with `qpnls_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use qpnls::config::RunConfig;
use qpnls::genericity::{check_genericity, Verdict};
use qpnls::newton::{iterate, IterationTrace, Outcome};
use qpnls::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpnlsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    NotGeneric = 4,
    Truncated = 5,
    Excised = 6,
    NotRun = 7,
    BufferTooSmall = 8,
    Internal = 9,
    Panic = 10,
}

/// Opaque solver handle.
pub struct QpnlsSolver {
    config: RunConfig,
    trace: Option<IterationTrace>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn status_of(e: &Error) -> QpnlsStatus {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::DimensionMismatch(_) => QpnlsStatus::Config,
        Error::NotGeneric(_) => QpnlsStatus::NotGeneric,
        Error::Capacity { .. } => QpnlsStatus::Truncated,
        Error::Excised { .. } | Error::Singular { .. } => QpnlsStatus::Excised,
        _ => QpnlsStatus::Internal,
    }
}

fn fail(e: Error) -> QpnlsStatus {
    set_error(e.to_string());
    status_of(&e)
}

fn guard(f: impl FnOnce() -> QpnlsStatus) -> QpnlsStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| {
        set_error("panic inside qpnls");
        QpnlsStatus::Panic
    })
}

unsafe fn read_str<'a>(s: *const c_char) -> Result<&'a str, QpnlsStatus> {
    if s.is_null() {
        set_error("null string argument");
        return Err(QpnlsStatus::NullPointer);
    }
    CStr::from_ptr(s).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        QpnlsStatus::InvalidUtf8
    })
}

fn to_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map_or(ptr::null_mut(), CString::into_raw)
}

/// Message of the last failed call on this thread, or null. Owned by the
/// library and valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn qpnls_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn qpnls_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses `config_json` and stores a new handle in `*out`.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qpnls_solver_new(config_json: *const c_char, out: *mut *mut QpnlsSolver) -> QpnlsStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return QpnlsStatus::NullPointer;
        }
        *out = ptr::null_mut();
        let text = match read_str(config_json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match RunConfig::from_json(text) {
            Ok(config) => {
                *out = Box::into_raw(Box::new(QpnlsSolver { config, trace: None }));
                QpnlsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `solver` must come from `qpnls_solver_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn qpnls_solver_free(solver: *mut QpnlsSolver) {
    if !solver.is_null() {
        drop(Box::from_raw(solver));
    }
}

/// Runs the iteration. Converged and step-limited runs return `Ok`; an
/// excised run returns `Excised` but keeps its trace for inspection.
///
/// # Safety
/// `solver` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn qpnls_solver_run(solver: *mut QpnlsSolver) -> QpnlsStatus {
    guard(|| {
        let Some(s) = solver.as_mut() else {
            set_error("null solver");
            return QpnlsStatus::NullPointer;
        };
        let cfg = &s.config;
        let mut opts = cfg.iterate_options();
        if opts.require_generic {
            match check_genericity(&cfg.problem.j_list, cfg.problem.p, &opts.genericity) {
                Ok(rep) if rep.verdict == Verdict::Generic => {}
                Ok(rep) if rep.verdict == Verdict::Truncated => {
                    set_error("genericity undecided within the search budget");
                    return QpnlsStatus::Truncated;
                }
                Ok(rep) => {
                    set_error(format!("support is not generic: conditions {} fail", rep.failed().join(", ")));
                    return QpnlsStatus::NotGeneric;
                }
                Err(e) => return fail(e),
            }
            opts.require_generic = false;
        }
        match iterate(&cfg.problem(), &opts) {
            Ok(tr) => {
                let status = match &tr.outcome {
                    Outcome::Excised { test, detail, .. } => {
                        set_error(format!("excised by {test}: {detail}"));
                        QpnlsStatus::Excised
                    }
                    _ => QpnlsStatus::Ok,
                };
                s.trace = Some(tr);
                status
            }
            Err(e) => fail(e),
        }
    })
}

unsafe fn trace_of<'a>(solver: *const QpnlsSolver) -> Result<&'a IterationTrace, QpnlsStatus> {
    let Some(s) = solver.as_ref() else {
        set_error("null solver");
        return Err(QpnlsStatus::NullPointer);
    };
    s.trace.as_ref().ok_or_else(|| {
        set_error("solver has not been run");
        QpnlsStatus::NotRun
    })
}

/// Number of frequencies `b` of the configured problem.
///
/// # Safety
/// `solver` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qpnls_solver_frequency_count(solver: *const QpnlsSolver, out: *mut usize) -> QpnlsStatus {
    guard(|| match (solver.as_ref(), out.is_null()) {
        (Some(s), false) => {
            *out = s.config.problem.j_list.len();
            QpnlsStatus::Ok
        }
        _ => {
            set_error("null argument");
            QpnlsStatus::NullPointer
        }
    })
}

/// Copies the final frequencies into `buf`; `len` must be at least the frequency count.
///
/// # Safety
/// `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn qpnls_solver_omega(solver: *const QpnlsSolver, buf: *mut f64, len: usize) -> QpnlsStatus {
    guard(|| {
        let tr = match trace_of(solver) {
            Ok(t) => t,
            Err(s) => return s,
        };
        if buf.is_null() {
            set_error("null buffer");
            return QpnlsStatus::NullPointer;
        }
        let omega = tr.final_state.omega();
        if len < omega.len() {
            set_error(format!("buffer holds {len} values, need {}", omega.len()));
            return QpnlsStatus::BufferTooSmall;
        }
        ptr::copy_nonoverlapping(omega.as_ptr(), buf, omega.len());
        QpnlsStatus::Ok
    })
}

/// Final Fourier residual and number of Newton steps taken.
///
/// # Safety
/// `residual` and `steps` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn qpnls_solver_summary(solver: *const QpnlsSolver, residual: *mut f64, steps: *mut usize) -> QpnlsStatus {
    guard(|| {
        let tr = match trace_of(solver) {
            Ok(t) => t,
            Err(s) => return s,
        };
        if residual.is_null() || steps.is_null() {
            set_error("null output pointer");
            return QpnlsStatus::NullPointer;
        }
        *residual = tr.final_residual();
        *steps = tr.newton_steps();
        QpnlsStatus::Ok
    })
}

/// Full iteration trace as JSON in `*out`, released with `qpnls_string_free`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qpnls_solver_trace_json(solver: *const QpnlsSolver, out: *mut *mut c_char) -> QpnlsStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return QpnlsStatus::NullPointer;
        }
        *out = ptr::null_mut();
        let tr = match trace_of(solver) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match serde_json::to_string(tr) {
            Ok(s) => {
                *out = to_c_string(s);
                QpnlsStatus::Ok
            }
            Err(e) => fail(e.into()),
        }
    })
}

/// Genericity report for the support in `config_json`, as JSON in `*out`.
/// Returns `NotGeneric` or `Truncated` according to the verdict, with the
/// report written in every case.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qpnls_genericity_json(config_json: *const c_char, out: *mut *mut c_char) -> QpnlsStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return QpnlsStatus::NullPointer;
        }
        *out = ptr::null_mut();
        let text = match read_str(config_json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let cfg = match RunConfig::from_json(text) {
            Ok(c) => c,
            Err(e) => return fail(e),
        };
        let rep = match check_genericity(&cfg.problem.j_list, cfg.problem.p, &cfg.genericity_options()) {
            Ok(r) => r,
            Err(e) => return fail(e),
        };
        match serde_json::to_string(&rep) {
            Ok(s) => *out = to_c_string(s),
            Err(e) => return fail(e.into()),
        }
        match rep.verdict {
            Verdict::Generic => QpnlsStatus::Ok,
            Verdict::NonGeneric => {
                set_error(format!("conditions {} fail", rep.failed().join(", ")));
                QpnlsStatus::NotGeneric
            }
            Verdict::Truncated => {
                set_error("search budget exhausted");
                QpnlsStatus::Truncated
            }
        }
    })
}

/// Releases a string returned by this library; null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn qpnls_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
