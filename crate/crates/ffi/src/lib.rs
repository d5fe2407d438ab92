//! C ABI over the cascadefer engine.
//!
//! Objects cross the boundary as opaque handles created by a `*_new`/`*_fit`
//! function and released by the matching `*_free`. Every fallible call returns
//! a [`CfStatus`]; on failure a message for the calling thread is available
//! from [`cf_last_error`]. Strings returned to the caller are owned by it and
//! must be released with [`cf_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use cascadefer::calibration::{fit_calibrator, CalibrationSample, Calibrator};
use cascadefer::config::CascadeConfig;
use cascadefer::harness::report::report_json;
use cascadefer::harness::{reference, run_stream, synthetic_workload, Mode};
use cascadefer::optimizer::{FeedbackRecord, OnlineOptimizer, StageFeedback};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Parse = 4,
    Validation = 5,
    Engine = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Stream mode for [`cf_run_reference_stream`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfMode {
    Fixed = 0,
    Online = 1,
}

/// Opaque cascade configuration.
pub struct CfConfig(CascadeConfig);

/// Opaque fitted calibrator.
pub struct CfCalibrator(Calibrator);

/// Opaque online threshold optimizer.
pub struct CfOptimizer {
    inner: OnlineOptimizer,
    next_id: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(CfStatus, String);

impl Failure {
    fn new(status: CfStatus, message: impl std::fmt::Display) -> Self {
        Failure(status, message.to_string())
    }
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CfStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CfStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure::new(CfStatus::NullPointer, format!("{what} is null")))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure::new(CfStatus::NullPointer, format!("{what} is null")))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(
            CfStatus::NullPointer,
            format!("{what} is null"),
        ));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure::new(CfStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::new(
            CfStatus::NullPointer,
            format!("{what} is null"),
        ));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn give_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let out = deref_mut(out, "out")?;
    let c = CString::new(s).map_err(|e| Failure::new(CfStatus::Engine, e))?;
    *out = c.into_raw();
    Ok(())
}

unsafe fn give_handle<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    *deref_mut(out, "out")? = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message for the most recent call on this thread if it failed, otherwise null.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn cf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn cf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// config --------------------------------------------------------------------

/// Creates the default configuration.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_config_default(out: *mut *mut CfConfig) -> CfStatus {
    guard(|| give_handle(out, CfConfig(CascadeConfig::default())))
}

/// Parses and validates a TOML configuration.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_config_from_toml(
    toml: *const c_char,
    out: *mut *mut CfConfig,
) -> CfStatus {
    guard(|| {
        let text = read_str(toml, "toml")?;
        let config =
            CascadeConfig::from_toml_str(text).map_err(|e| Failure::new(CfStatus::Parse, e))?;
        let config = config
            .validate()
            .map_err(|e| Failure::new(CfStatus::Validation, e))?;
        give_handle(out, CfConfig(config))
    })
}

/// Serializes a configuration to TOML.
///
/// # Safety
/// `config` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_config_to_toml(
    config: *const CfConfig,
    out: *mut *mut c_char,
) -> CfStatus {
    guard(|| {
        let text = deref(config, "config")?
            .0
            .to_toml_string()
            .map_err(|e| Failure::new(CfStatus::Engine, e))?;
        give_string(out, text)
    })
}

/// Number of model stages (the human stage excluded).
///
/// # Safety
/// `config` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_config_model_stages(
    config: *const CfConfig,
    out: *mut usize,
) -> CfStatus {
    guard(|| {
        *deref_mut(out, "out")? = deref(config, "config")?.0.num_model_stages();
        Ok(())
    })
}

/// # Safety
/// `config` must be null or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn cf_config_free(config: *mut CfConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

// calibrator ----------------------------------------------------------------

/// Fits a calibrator on `len` pairs of raw confidence and correctness (0 or 1).
///
/// # Safety
/// `raw` and `correct` must point to `len` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cf_calibrator_fit(
    raw: *const f64,
    correct: *const u8,
    len: usize,
    prior_sigma: f64,
    out: *mut *mut CfCalibrator,
) -> CfStatus {
    guard(|| {
        let raw = slice(raw, len, "raw")?;
        let correct = slice(correct, len, "correct")?;
        if !(prior_sigma.is_finite() && prior_sigma > 0.0) {
            return Err(Failure::new(
                CfStatus::InvalidArgument,
                "prior_sigma must be positive",
            ));
        }
        if let Some(i) = raw.iter().position(|r| !r.is_finite()) {
            return Err(Failure::new(
                CfStatus::InvalidArgument,
                format!("raw[{i}] is not finite"),
            ));
        }
        let samples: Vec<CalibrationSample> = raw
            .iter()
            .zip(correct)
            .map(|(&r, &c)| CalibrationSample::new(r, c != 0))
            .collect();
        give_handle(out, CfCalibrator(fit_calibrator(&samples, prior_sigma)))
    })
}

/// Calibrated confidence for one raw signal.
///
/// # Safety
/// `calibrator` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_calibrator_apply(
    calibrator: *const CfCalibrator,
    raw: f64,
    out: *mut f64,
) -> CfStatus {
    guard(|| {
        *deref_mut(out, "out")? = deref(calibrator, "calibrator")?.0.calibrate(raw);
        Ok(())
    })
}

/// Fitted slope and intercept.
///
/// # Safety
/// `calibrator` must be a live handle; `a` and `b` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn cf_calibrator_params(
    calibrator: *const CfCalibrator,
    a: *mut f64,
    b: *mut f64,
) -> CfStatus {
    guard(|| {
        let c = deref(calibrator, "calibrator")?.0;
        *deref_mut(a, "a")? = c.a;
        *deref_mut(b, "b")? = c.b;
        Ok(())
    })
}

/// # Safety
/// `calibrator` must be null or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn cf_calibrator_free(calibrator: *mut CfCalibrator) {
    if !calibrator.is_null() {
        drop(Box::from_raw(calibrator));
    }
}

// optimizer -----------------------------------------------------------------

/// Creates an optimizer for `config`, starting from its initial thresholds.
///
/// # Safety
/// `config` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_optimizer_new(
    config: *const CfConfig,
    out: *mut *mut CfOptimizer,
) -> CfStatus {
    guard(|| {
        let inner = OnlineOptimizer::new(&deref(config, "config")?.0);
        give_handle(out, CfOptimizer { inner, next_id: 0 })
    })
}

/// Appends one feedback record. Each array holds one entry per model stage.
///
/// # Safety
/// `phi`, `correct` and `cost` must point to `n_stages` elements.
#[no_mangle]
pub unsafe extern "C" fn cf_optimizer_push(
    optimizer: *mut CfOptimizer,
    phi: *const f64,
    correct: *const u8,
    cost: *const f64,
    n_stages: usize,
) -> CfStatus {
    guard(|| {
        let opt = deref_mut(optimizer, "optimizer")?;
        let expected = opt.inner.thresholds().len();
        if n_stages != expected {
            return Err(Failure::new(
                CfStatus::InvalidArgument,
                format!("expected {expected} stages, got {n_stages}"),
            ));
        }
        let (phi, correct, cost) = (
            slice(phi, n_stages, "phi")?,
            slice(correct, n_stages, "correct")?,
            slice(cost, n_stages, "cost")?,
        );
        if phi.iter().chain(cost).any(|v| !v.is_finite()) {
            return Err(Failure::new(
                CfStatus::InvalidArgument,
                "phi and cost must be finite",
            ));
        }
        let stages = (0..n_stages)
            .map(|k| StageFeedback {
                phi: phi[k].clamp(0.0, 1.0),
                correct: correct[k] != 0,
                cost: cost[k].max(0.0),
            })
            .collect();
        opt.inner.push(FeedbackRecord {
            query_id: format!("ffi-{}", opt.next_id),
            stages,
        });
        opt.next_id += 1;
        Ok(())
    })
}

/// Runs one update. `updated` is set to 1 when the thresholds moved, 0 when
/// the buffer is still too small or the step was skipped.
///
/// # Safety
/// `optimizer` must be a live handle; `updated` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_optimizer_update(
    optimizer: *mut CfOptimizer,
    updated: *mut u8,
) -> CfStatus {
    guard(|| {
        let opt = deref_mut(optimizer, "optimizer")?;
        let out = deref_mut(updated, "updated")?;
        *out = u8::from(opt.inner.online_update().is_some());
        Ok(())
    })
}

/// Copies the current deferral thresholds into `taus`. `len` receives the
/// stage count; [`CfStatus::BufferTooSmall`] is returned when `capacity` is less.
///
/// # Safety
/// `taus` must have room for `capacity` values; `len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cf_optimizer_thresholds(
    optimizer: *const CfOptimizer,
    taus: *mut f64,
    capacity: usize,
    len: *mut usize,
) -> CfStatus {
    guard(|| {
        let current = deref(optimizer, "optimizer")?.inner.thresholds().taus();
        *deref_mut(len, "len")? = current.len();
        if capacity < current.len() {
            return Err(Failure::new(
                CfStatus::BufferTooSmall,
                format!("need {} slots", current.len()),
            ));
        }
        if taus.is_null() {
            return Err(Failure::new(CfStatus::NullPointer, "taus is null"));
        }
        ptr::copy_nonoverlapping(current.as_ptr(), taus, current.len());
        Ok(())
    })
}

/// Optimizer state (thresholds, moments, step counters) as JSON.
///
/// # Safety
/// `optimizer` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_optimizer_state_json(
    optimizer: *const CfOptimizer,
    out: *mut *mut c_char,
) -> CfStatus {
    guard(|| {
        let state = deref(optimizer, "optimizer")?.inner.state();
        let json = serde_json::to_string(state).map_err(|e| Failure::new(CfStatus::Engine, e))?;
        give_string(out, json)
    })
}

/// # Safety
/// `optimizer` must be null or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn cf_optimizer_free(optimizer: *mut CfOptimizer) {
    if !optimizer.is_null() {
        drop(Box::from_raw(optimizer));
    }
}

// harness -------------------------------------------------------------------

/// Runs the built-in synthetic reference workload under `config` and returns
/// the stream report as JSON.
///
/// # Safety
/// `config` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_run_reference_stream(
    config: *const CfConfig,
    workload_seed: u64,
    mode: CfMode,
    out: *mut *mut c_char,
) -> CfStatus {
    guard(|| {
        let config = &deref(config, "config")?.0;
        let spec = reference::reference_workload(workload_seed);
        let mode = match mode {
            CfMode::Fixed => Mode::Fixed,
            CfMode::Online => Mode::Online,
        };
        let run = run_stream(
            &synthetic_workload(&spec),
            config,
            mode,
            Arc::new(spec.backend()),
        )
        .map_err(|e| Failure::new(CfStatus::Engine, e))?;
        let json = String::from_utf8(report_json(&run.report))
            .map_err(|e| Failure::new(CfStatus::Engine, e))?;
        give_string(out, json.trim_end().to_string())
    })
}
