//! C ABI over `erm_oracle`.
//!
//! Every entry point returns an [`ErmStatus`]. On failure a message is kept
//! per thread and can be read with [`erm_last_error`]. Strings handed out by
//! the library must be released with [`erm_string_free`], problems with
//! [`erm_problem_free`]. Panics never cross the boundary; they surface as
//! `ERM_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use erm_oracle::concentration::Complexity;
use erm_oracle::experiments::{bound_report, verify, ExperimentConfig};
use erm_oracle::problems::ProblemInstance;
use erm_oracle::Error;

/// Result codes shared by every function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErmStatus {
    Ok = 0,
    /// A required pointer was null or a string was not UTF-8.
    NullOrUtf8 = 1,
    /// The configuration JSON did not parse or failed validation.
    Config = 2,
    /// A numeric precondition failed while evaluating.
    Invalid = 3,
    /// A verification ran and at least one verdict failed.
    Violation = 4,
    Io = 5,
    Panic = 6,
}

/// An experiment configuration together with its built problem.
pub struct ErmProblem {
    config: ExperimentConfig,
    problem: ProblemInstance,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let text = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

fn fail(status: ErmStatus, msg: impl Into<String>) -> ErmStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> ErmStatus {
    let status = match &e {
        _ if e.is_io() => ErmStatus::Io,
        Error::Json(_) | Error::Usage(_) => ErmStatus::Config,
        _ => ErmStatus::Invalid,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> ErmStatus) -> ErmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(ErmStatus::Panic, format!("panic: {msg}"))
        }
    }
}

unsafe fn read_str<'a>(s: *const c_char) -> Result<&'a str, ErmStatus> {
    if s.is_null() {
        return Err(fail(ErmStatus::NullOrUtf8, "null string"));
    }
    CStr::from_ptr(s).to_str().map_err(|_| fail(ErmStatus::NullOrUtf8, "string is not UTF-8"))
}

unsafe fn emit(out: *mut *mut c_char, value: &serde_json::Value) -> ErmStatus {
    match CString::new(value.to_string()) {
        Ok(c) => {
            *out = c.into_raw();
            ErmStatus::Ok
        }
        Err(_) => fail(ErmStatus::Invalid, "output contained a NUL byte"),
    }
}

/// Message for the last failure on this thread. The pointer stays valid
/// until the next failing call on the same thread. Never null.
#[no_mangle]
pub extern "C" fn erm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Writes `2 log(2p) / n` to `out`.
///
/// # Safety
/// `out` must be null or point to writable memory for one `double`.
#[no_mangle]
pub unsafe extern "C" fn erm_delta(n: f64, p: usize, out: *mut f64) -> ErmStatus {
    guard(|| {
        if out.is_null() {
            return fail(ErmStatus::NullOrUtf8, "null output pointer");
        }
        match Complexity::new(n, p) {
            Ok(cx) => {
                *out = cx.delta();
                ErmStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Parses an experiment configuration (the same JSON the CLI reads) and
/// builds its problem.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn erm_problem_new(config_json: *const c_char, out: *mut *mut ErmProblem) -> ErmStatus {
    guard(|| {
        if out.is_null() {
            return fail(ErmStatus::NullOrUtf8, "null output pointer");
        }
        *out = ptr::null_mut();
        let text = match read_str(config_json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let config: ExperimentConfig = match serde_json::from_str(text) {
            Ok(c) => c,
            Err(e) => return fail(ErmStatus::Config, format!("config: {e}")),
        };
        let built = config.validate().and_then(|_| config.problem.build());
        match built {
            Ok(problem) => {
                *out = Box::into_raw(Box::new(ErmProblem { config, problem }));
                ErmStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Releases a problem. Null is ignored.
///
/// # Safety
/// `problem` must come from [`erm_problem_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn erm_problem_free(problem: *mut ErmProblem) {
    if !problem.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(problem))));
    }
}

/// Sample size, candidate count and best-in-class excess risk.
///
/// # Safety
/// `problem` must be live; each output may be null to skip it.
#[no_mangle]
pub unsafe extern "C" fn erm_problem_info(
    problem: *const ErmProblem,
    n: *mut usize,
    p: *mut usize,
    estar: *mut f64,
) -> ErmStatus {
    guard(|| {
        let Some(h) = problem.as_ref() else {
            return fail(ErmStatus::NullOrUtf8, "null problem");
        };
        if !n.is_null() {
            *n = h.problem.n();
        }
        if !p.is_null() {
            *p = h.problem.p();
        }
        if !estar.is_null() {
            *estar = h.problem.risk().estar();
        }
        ErmStatus::Ok
    })
}

/// Evaluates every bound named in the configuration and writes a JSON array
/// of reports to `out`.
///
/// # Safety
/// `problem` must be live; `out` must be writable. Free the string with
/// [`erm_string_free`].
#[no_mangle]
pub unsafe extern "C" fn erm_bounds_json(problem: *const ErmProblem, out: *mut *mut c_char) -> ErmStatus {
    guard(|| {
        let Some(h) = problem.as_ref() else {
            return fail(ErmStatus::NullOrUtf8, "null problem");
        };
        if out.is_null() {
            return fail(ErmStatus::NullOrUtf8, "null output pointer");
        }
        *out = ptr::null_mut();
        let mut reports = Vec::new();
        for selector in &h.config.bounds {
            match bound_report(selector, &h.problem, &h.config.overrides) {
                Ok(r) => reports.push(r.to_flat_json()),
                Err(e) => return from_error(e),
            }
        }
        emit(out, &serde_json::Value::Array(reports))
    })
}

/// Runs the configured verification and writes the verdicts as a JSON array.
/// `workers = 0` uses the default pool size. Returns `ERM_STATUS_VIOLATION`
/// (with `out` still set) when any verdict fails.
///
/// # Safety
/// `problem` must be live; `out` must be writable. Free the string with
/// [`erm_string_free`].
#[no_mangle]
pub unsafe extern "C" fn erm_verify_json(
    problem: *const ErmProblem,
    workers: usize,
    out: *mut *mut c_char,
) -> ErmStatus {
    guard(|| {
        let Some(h) = problem.as_ref() else {
            return fail(ErmStatus::NullOrUtf8, "null problem");
        };
        if out.is_null() {
            return fail(ErmStatus::NullOrUtf8, "null output pointer");
        }
        *out = ptr::null_mut();
        let verdicts = match verify(&h.config, (workers > 0).then_some(workers)) {
            Ok((_, v)) => v,
            Err(e) => return from_error(e),
        };
        let json = match serde_json::to_value(&verdicts) {
            Ok(j) => j,
            Err(e) => return fail(ErmStatus::Invalid, e.to_string()),
        };
        let status = emit(out, &json);
        if status == ErmStatus::Ok && verdicts.iter().any(|v| !v.pass) {
            return fail(ErmStatus::Violation, "at least one verdict failed");
        }
        status
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn erm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
