//! C interface to the training pipeline and the evaluation metrics.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free` function. Every fallible call returns a
//! [`FscilStatus`]; on failure [`fscil_last_error`] describes the error.
//! Report accessors return full-precision values (percentages).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fscil_core::config::Config;
use fscil_core::metrics::{average_accuracy, performance_drop, round_half_up, EvalReport, ReportFormat, Track, TrackReport};
use fscil_core::sessions::{run_pipeline, Protocol};
use fscil_core::Error;

/// Status code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FscilStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    Degenerate = 4,
    Protocol = 5,
    Config = 6,
    Parse = 7,
    Consistency = 8,
    Schema = 9,
    Io = 10,
    OutOfRange = 11,
    Panic = 12,
}

/// Evaluation track of a report.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FscilTrack {
    Softmax = 0,
    Ncm = 1,
}

/// Output format of [`fscil_report_save`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FscilFormat {
    Json = 0,
    Csv = 1,
}

/// Opaque run configuration.
pub struct FscilConfig {
    inner: Config,
}

/// Opaque evaluation report.
pub struct FscilReport {
    inner: EvalReport,
}

struct Failure {
    status: FscilStatus,
    message: String,
}

impl Failure {
    fn new(status: FscilStatus, message: impl Into<String>) -> Self {
        Failure { status, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidInput(_) | Error::DimensionMismatch { .. } => FscilStatus::InvalidInput,
            Error::Degenerate(_) => FscilStatus::Degenerate,
            Error::Protocol(_) => FscilStatus::Protocol,
            Error::Config(_) => FscilStatus::Config,
            Error::Parse { .. } => FscilStatus::Parse,
            Error::Consistency(_) => FscilStatus::Consistency,
            Error::Schema(_) => FscilStatus::Schema,
            Error::Io { .. } => FscilStatus::Io,
        };
        Failure::new(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(text));
}

/// Runs `body`, converting errors and panics into a status code.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> FscilStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => FscilStatus::Ok,
        Ok(Err(f)) => {
            set_last_error(&f.message);
            f.status
        }
        Err(_) => {
            set_last_error("internal panic");
            FscilStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::new(FscilStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(FscilStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn get_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn write<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(value);
    Ok(())
}

fn track(report: &EvalReport, index: usize) -> Result<&TrackReport, Failure> {
    report.tracks.get(index).ok_or_else(|| {
        Failure::new(FscilStatus::OutOfRange, format!("track {index} of {}", report.tracks.len()))
    })
}

unsafe fn slice<'a>(values: *const f64, len: usize) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if values.is_null() {
        return Err(null("values"));
    }
    Ok(std::slice::from_raw_parts(values, len))
}

/// Message of the most recent failed call on this thread, or NULL. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fscil_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fscil_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Default configuration.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fscil_config_new(out: *mut *mut FscilConfig) -> FscilStatus {
    guard(|| write(out, Box::into_raw(Box::new(FscilConfig { inner: Config::default() }))))
}

/// Configuration parsed from TOML text; missing keys take their defaults.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fscil_config_from_toml(toml: *const c_char, out: *mut *mut FscilConfig) -> FscilStatus {
    guard(|| {
        let inner = Config::from_toml_str(text(toml, "toml")?)?;
        write(out, Box::into_raw(Box::new(FscilConfig { inner })))
    })
}

/// Configuration read from a TOML file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fscil_config_load(path: *const c_char, out: *mut *mut FscilConfig) -> FscilStatus {
    guard(|| {
        let inner = Config::load(Path::new(text(path, "path")?))?;
        write(out, Box::into_raw(Box::new(FscilConfig { inner })))
    })
}

/// Overrides the data seed.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fscil_config_set_seed(config: *mut FscilConfig, seed: u64) -> FscilStatus {
    guard(|| {
        get_mut(config, "config")?.inner.data.seed = seed;
        Ok(())
    })
}

/// Disables the comma-separated components among `vcg`, `ct`, `pfs`, `us`.
///
/// # Safety
/// `config` must be a live handle and `list` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fscil_config_ablate(config: *mut FscilConfig, list: *const c_char) -> FscilStatus {
    guard(|| {
        let list = text(list, "list")?;
        let config = get_mut(config, "config")?;
        let mut switches = config.inner.ablation;
        switches.disable(list)?;
        config.inner.ablation = switches;
        Ok(())
    })
}

/// The configuration as TOML; release with [`fscil_string_free`].
///
/// # Safety
/// `config` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fscil_config_to_toml(config: *const FscilConfig, out: *mut *mut c_char) -> FscilStatus {
    guard(|| {
        let s = get(config, "config")?.inner.to_toml_string()?;
        let c = CString::new(s).map_err(|_| Failure::new(FscilStatus::InvalidInput, "NUL inside TOML"))?;
        write(out, c.into_raw())
    })
}

/// Releases a configuration. NULL is ignored.
///
/// # Safety
/// `config` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fscil_config_free(config: *mut FscilConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Runs every session. `data_dir` names a directory written by `gen-data`;
/// NULL generates the protocol from the configuration.
///
/// # Safety
/// `config` must be a live handle, `data_dir` NULL or a NUL-terminated
/// string, and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fscil_run(
    config: *const FscilConfig,
    data_dir: *const c_char,
    out: *mut *mut FscilReport,
) -> FscilStatus {
    guard(|| {
        let config = &get(config, "config")?.inner;
        config.validate()?;
        let protocol = if data_dir.is_null() {
            Protocol::generate(&config.data)?
        } else {
            Protocol::load(Path::new(text(data_dir, "data_dir")?))?
        };
        let (inner, _) = run_pipeline(&protocol, config)?;
        write(out, Box::into_raw(Box::new(FscilReport { inner })))
    })
}

/// Report read from JSON, checked for internal consistency.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fscil_report_load(path: *const c_char, out: *mut *mut FscilReport) -> FscilStatus {
    guard(|| {
        let inner = EvalReport::load(Path::new(text(path, "path")?))?;
        write(out, Box::into_raw(Box::new(FscilReport { inner })))
    })
}

/// Writes the report as JSON or long-format CSV.
///
/// # Safety
/// `report` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fscil_report_save(
    report: *const FscilReport,
    path: *const c_char,
    format: FscilFormat,
) -> FscilStatus {
    guard(|| {
        let format = match format {
            FscilFormat::Json => ReportFormat::Json,
            FscilFormat::Csv => ReportFormat::Csv,
        };
        get(report, "report")?.inner.emit(Path::new(text(path, "path")?), format)?;
        Ok(())
    })
}

/// Number of tracks in the report.
///
/// # Safety
/// `report` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fscil_report_track_count(report: *const FscilReport, out: *mut usize) -> FscilStatus {
    guard(|| write(out, get(report, "report")?.inner.tracks.len()))
}

/// Kind of track `index`.
///
/// # Safety
/// `report` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fscil_report_track_kind(
    report: *const FscilReport,
    index: usize,
    out: *mut FscilTrack,
) -> FscilStatus {
    guard(|| {
        let kind = match track(&get(report, "report")?.inner, index)?.name {
            Track::Softmax => FscilTrack::Softmax,
            Track::Ncm => FscilTrack::Ncm,
        };
        write(out, kind)
    })
}

/// Number of evaluated sessions in track `index`.
///
/// # Safety
/// `report` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fscil_report_session_count(
    report: *const FscilReport,
    index: usize,
    out: *mut usize,
) -> FscilStatus {
    guard(|| write(out, track(&get(report, "report")?.inner, index)?.sessions.len()))
}

unsafe fn session_value(
    report: *const FscilReport,
    index: usize,
    session: usize,
    out: *mut f64,
    pick: fn(&fscil_core::metrics::SessionResult) -> f64,
) -> FscilStatus {
    guard(|| {
        let t = track(&get(report, "report")?.inner, index)?;
        let s = t.sessions.get(session).ok_or_else(|| {
            Failure::new(FscilStatus::OutOfRange, format!("session {session} of {}", t.sessions.len()))
        })?;
        write(out, pick(s))
    })
}

/// Accuracy over all seen classes after `session`.
///
/// # Safety
/// `report` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fscil_report_accuracy(
    report: *const FscilReport,
    index: usize,
    session: usize,
    out: *mut f64,
) -> FscilStatus {
    session_value(report, index, session, out, |s| s.accuracy)
}

/// Accuracy on the base-session classes after `session`.
///
/// # Safety
/// `report` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fscil_report_base_accuracy(
    report: *const FscilReport,
    index: usize,
    session: usize,
    out: *mut f64,
) -> FscilStatus {
    session_value(report, index, session, out, |s| s.base_class_accuracy)
}

/// Average accuracy of track `index`.
///
/// # Safety
/// `report` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fscil_report_average_accuracy(
    report: *const FscilReport,
    index: usize,
    out: *mut f64,
) -> FscilStatus {
    guard(|| write(out, track(&get(report, "report")?.inner, index)?.aa))
}

/// Performance drop of track `index`.
///
/// # Safety
/// `report` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fscil_report_performance_drop(
    report: *const FscilReport,
    index: usize,
    out: *mut f64,
) -> FscilStatus {
    guard(|| write(out, track(&get(report, "report")?.inner, index)?.pd))
}

/// Number of warnings raised during the run.
///
/// # Safety
/// `report` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fscil_report_warning_count(report: *const FscilReport, out: *mut usize) -> FscilStatus {
    guard(|| write(out, get(report, "report")?.inner.warnings.len()))
}

/// Releases a report. NULL is ignored.
///
/// # Safety
/// `report` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fscil_report_free(report: *mut FscilReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Mean of `len` session accuracies.
///
/// # Safety
/// `values` must point to `len` doubles and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fscil_average_accuracy(values: *const f64, len: usize, out: *mut f64) -> FscilStatus {
    guard(|| write(out, average_accuracy(slice(values, len)?)?))
}

/// First minus last of `len` session accuracies.
///
/// # Safety
/// `values` must point to `len` doubles and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fscil_performance_drop(values: *const f64, len: usize, out: *mut f64) -> FscilStatus {
    guard(|| write(out, performance_drop(slice(values, len)?)?))
}

/// `value` rounded half-up to `digits` decimals, as used in reports.
#[no_mangle]
pub extern "C" fn fscil_round_half_up(value: f64, digits: i32) -> f64 {
    round_half_up(value, digits)
}
