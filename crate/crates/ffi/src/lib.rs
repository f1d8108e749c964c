//! C ABI over `regstab`.
//!
//! Every fallible call returns a [`RegstabStatus`]; on failure the message is
//! available from [`regstab_last_error_message`] on the same thread. Handles
//! are opaque and owned by the caller until passed to their `_free`
//! function. Strings returned through `char **` out-parameters must be
//! released with [`regstab_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::os::raw::c_int;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use regstab::cli::config::{resolve_mrf, RunConfig};
use regstab::error::Error;
use regstab::mrf::Potential;
use regstab::system::ControlSystem;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegstabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Malformed config, unknown system or MRF id.
    Config = 3,
    InvalidArgument = 4,
    /// A state of the wrong dimension was passed.
    DimensionMismatch = 5,
    NotCertified = 6,
    Numerical = 7,
    Io = 8,
    /// The library panicked; the handle involved should be freed.
    Panic = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap_or_default());
}

fn status_of(e: &Error) -> RegstabStatus {
    match e {
        Error::Config(_) | Error::Json(_) | Error::UnknownId { .. } => RegstabStatus::Config,
        Error::InvalidArgument(_) | Error::InvalidRegion(_) | Error::OutOfRange { .. } => {
            RegstabStatus::InvalidArgument
        }
        Error::Io(_) => RegstabStatus::Io,
        Error::NotCertifiable { .. } | Error::NotAnMrf { .. } => RegstabStatus::NotCertified,
        _ => RegstabStatus::Numerical,
    }
}

fn fail(status: RegstabStatus, msg: impl Into<String>) -> RegstabStatus {
    set_error(msg);
    status
}

/// Runs `f`, turning errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), RegstabStatus>) -> RegstabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            RegstabStatus::Ok
        }
        Ok(Err(status)) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(RegstabStatus::Panic, msg)
        }
    }
}

fn lift(e: Error) -> RegstabStatus {
    fail(status_of(&e), e.to_string())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, RegstabStatus> {
    if p.is_null() {
        return Err(fail(RegstabStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(RegstabStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn out_string(s: String, out: *mut *mut c_char) -> Result<(), RegstabStatus> {
    let c = CString::new(s).map_err(|_| fail(RegstabStatus::Numerical, "string contains NUL"))?;
    // SAFETY: callers check `out` for null before producing the string.
    unsafe { *out = c.into_raw() };
    Ok(())
}

/// Message of the last failed call on this thread, empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn regstab_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn regstab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn regstab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// A control system paired with a minimum restraint function candidate.
pub struct RegstabModel {
    sys: ControlSystem,
    potential: Arc<dyn Potential>,
    p0: f64,
}

/// Builds a model from a run configuration (JSON text); only `system`,
/// `mrf` and `p0` are used.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn regstab_model_from_json(
    config_json: *const c_char,
    out: *mut *mut RegstabModel,
) -> RegstabStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(RegstabStatus::NullPointer, "out is null"));
        }
        let text = str_arg(config_json, "config_json")?;
        let cfg = RunConfig::parse(text).map_err(lift)?;
        let sys = cfg.system.build();
        let mrf = resolve_mrf(&cfg.mrf, &sys).map_err(lift)?;
        let model = RegstabModel { sys, potential: mrf.potential, p0: cfg.p0 };
        *out = Box::into_raw(Box::new(model));
        Ok(())
    })
}

/// Frees a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`regstab_model_from_json`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn regstab_model_free(model: *mut RegstabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// State dimension of the model, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn regstab_model_state_dim(model: *const RegstabModel) -> usize {
    model.as_ref().map_or(0, |m| m.sys.state_dim)
}

/// `p0` of the model, NaN for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn regstab_model_p0(model: *const RegstabModel) -> f64 {
    model.as_ref().map_or(f64::NAN, |m| m.p0)
}

unsafe fn state_arg<'a>(
    model: *const RegstabModel,
    x: *const f64,
    len: usize,
) -> Result<(&'a RegstabModel, &'a [f64]), RegstabStatus> {
    let m = model.as_ref().ok_or_else(|| fail(RegstabStatus::NullPointer, "model is null"))?;
    if x.is_null() {
        return Err(fail(RegstabStatus::NullPointer, "x is null"));
    }
    if len != m.sys.state_dim {
        return Err(fail(
            RegstabStatus::DimensionMismatch,
            format!("state has {len} entries, model needs {}", m.sys.state_dim),
        ));
    }
    Ok((m, std::slice::from_raw_parts(x, len)))
}

/// `W(x)`.
///
/// # Safety
/// `x` must point to `len` doubles and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn regstab_model_value(
    model: *const RegstabModel,
    x: *const f64,
    len: usize,
    out: *mut f64,
) -> RegstabStatus {
    guard(|| {
        let (m, x) = state_arg(model, x, len)?;
        if out.is_null() {
            return Err(fail(RegstabStatus::NullPointer, "out is null"));
        }
        *out = m.potential.value(x);
        Ok(())
    })
}

/// Distance from `x` to the target.
///
/// # Safety
/// `x` must point to `len` doubles and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn regstab_model_distance(
    model: *const RegstabModel,
    x: *const f64,
    len: usize,
    out: *mut f64,
) -> RegstabStatus {
    guard(|| {
        let (m, x) = state_arg(model, x, len)?;
        if out.is_null() {
            return Err(fail(RegstabStatus::NullPointer, "out is null"));
        }
        *out = m.sys.distance(x);
        Ok(())
    })
}

/// A (proximal) subgradient of `W` at `x`, written to `grad[0..len]`.
///
/// # Safety
/// `x` and `grad` must each point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn regstab_model_gradient(
    model: *const RegstabModel,
    x: *const f64,
    len: usize,
    grad: *mut f64,
) -> RegstabStatus {
    guard(|| {
        let (m, x) = state_arg(model, x, len)?;
        if grad.is_null() {
            return Err(fail(RegstabStatus::NullPointer, "grad is null"));
        }
        let g = m.potential.selection(x);
        std::slice::from_raw_parts_mut(grad, len).copy_from_slice(&g);
        Ok(())
    })
}

/// Runs a subcommand (`certify`, `bridge`, `synthesize`, `simulate`,
/// `euler`, `regularize`, `sweep`) on an in-memory config. The report JSON
/// goes to `*report_json`, the exit code the command line would give to
/// `*exit_code` (0 all checks passed, 2 some failed). `out_path` may be
/// null; `seed` may be null to keep the config's seed.
///
/// # Safety
/// String arguments must be NUL-terminated; out-parameters writable.
#[no_mangle]
pub unsafe extern "C" fn regstab_run(
    command: *const c_char,
    config_json: *const c_char,
    out_path: *const c_char,
    seed: *const u64,
    report_json: *mut *mut c_char,
    exit_code: *mut i32,
) -> RegstabStatus {
    guard(|| {
        if report_json.is_null() || exit_code.is_null() {
            return Err(fail(RegstabStatus::NullPointer, "report_json and exit_code must not be null"));
        }
        let command = str_arg(command, "command")?;
        let cfg = RunConfig::parse(str_arg(config_json, "config_json")?).map_err(lift)?;
        let out = if out_path.is_null() { None } else { Some(Path::new(str_arg(out_path, "out_path")?)) };
        let outcome = regstab::cli::execute(command, &cfg, seed.as_ref().copied(), out, false).map_err(lift)?;
        *exit_code = outcome.exit_code();
        out_string(outcome.report.to_json(), report_json)
    })
}

/// The command-line entry point: `argv[0]` is the program name.
///
/// # Safety
/// `argv` must point to `argc` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn regstab_run_command(argc: c_int, argv: *const *const c_char) -> c_int {
    if argv.is_null() || argc < 1 {
        set_error("argv is empty");
        return regstab::cli::EXIT_USAGE;
    }
    let args: Vec<String> = (0..argc as usize)
        .map(|i| {
            let p = *argv.add(i);
            if p.is_null() {
                String::new()
            } else {
                CStr::from_ptr(p).to_string_lossy().into_owned()
            }
        })
        .collect();
    catch_unwind(|| regstab::cli::run_command(args)).unwrap_or_else(|_| {
        set_error("panic");
        regstab::cli::EXIT_USAGE
    })
}
