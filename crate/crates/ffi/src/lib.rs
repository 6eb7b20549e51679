//! C interface to the simulator.
//!
//! Handles are opaque. Every fallible call returns an [`EnsimStatus`]; on
//! failure a message is kept per thread and read back with
//! [`ensim_last_error`]. Strings handed out by the library are released with
//! [`ensim_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ensim_core::estimate::estimate_ensemble_accuracy;
use ensim_core::metrics::MetricsReport;
use ensim_core::scenario::{Overrides, Scenario};
use ensim_core::selector::SelectionPolicy;
use ensim_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnsimStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Runtime = 4,
    Io = 5,
    Panic = 6,
}

/// A parsed, validated scenario.
pub struct EnsimScenario {
    inner: Scenario,
}

/// Results of one simulation run.
pub struct EnsimReport {
    inner: MetricsReport,
}

/// Headline numbers of a run.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct EnsimSummary {
    pub queries: u64,
    pub completed: u64,
    pub failed: u64,
    pub latency_p50_ms: f64,
    pub latency_p99_ms: f64,
    pub slo_violation_fraction: f64,
    pub accuracy_met_fraction: f64,
    pub cumulative_accuracy: f64,
    pub time_avg_ensemble_size: f64,
    pub total_cost: f64,
    pub vms_launched: u64,
    pub vms_preempted: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> EnsimStatus {
    match e {
        Error::Io { .. } => EnsimStatus::Io,
        e if e.is_config() => EnsimStatus::Config,
        _ => EnsimStatus::Runtime,
    }
}

/// Run `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), (EnsimStatus, String)>) -> EnsimStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EnsimStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {message}"));
            EnsimStatus::Panic
        }
    }
}

fn core(e: Error) -> (EnsimStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (EnsimStatus, String) {
    (EnsimStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, (EnsimStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| (EnsimStatus::InvalidUtf8, format!("`{what}`: {e}")))
}

fn give_string(s: String) -> *mut c_char {
    CString::new(s).map_or(ptr::null_mut(), CString::into_raw)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ensim_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn ensim_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Majority-vote accuracy of `n` independent models.
///
/// # Safety
/// `accuracies` must point to `n` readable doubles and `out` to one writable double.
#[no_mangle]
pub unsafe extern "C" fn ensim_estimate(accuracies: *const f64, n: usize, out: *mut f64) -> EnsimStatus {
    guard(|| {
        if accuracies.is_null() {
            return Err(null("accuracies"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let values = std::slice::from_raw_parts(accuracies, n);
        *out = estimate_ensemble_accuracy(values).map_err(core)?;
        Ok(())
    })
}

unsafe fn hand_out_scenario(
    out: *mut *mut EnsimScenario,
    load: impl FnOnce() -> Result<Scenario, (EnsimStatus, String)>,
) -> EnsimStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let inner = load()?;
        *out = Box::into_raw(Box::new(EnsimScenario { inner }));
        Ok(())
    })
}

/// Parse a scenario from JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ensim_scenario_from_json(json: *const c_char, out: *mut *mut EnsimScenario) -> EnsimStatus {
    hand_out_scenario(out, || Scenario::from_json(text(json, "json")?).map_err(core))
}

/// Load a bundled scenario such as `strict_wiki`.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ensim_scenario_bundled(name: *const c_char, out: *mut *mut EnsimScenario) -> EnsimStatus {
    hand_out_scenario(out, || Scenario::bundled(text(name, "name")?).map_err(core))
}

/// Load a scenario file; relative paths inside it resolve against its directory.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ensim_scenario_load(path: *const c_char, out: *mut *mut EnsimScenario) -> EnsimStatus {
    hand_out_scenario(out, || Scenario::load(Path::new(text(path, "path")?)).map_err(core))
}

unsafe fn with_scenario(
    scenario: *mut EnsimScenario,
    f: impl FnOnce(&mut Scenario) -> Result<(), (EnsimStatus, String)>,
) -> EnsimStatus {
    guard(|| {
        let s = scenario.as_mut().ok_or_else(|| null("scenario"))?;
        // apply to a copy so a rejected override leaves the handle unchanged
        let mut next = s.inner.clone();
        f(&mut next)?;
        s.inner = next;
        Ok(())
    })
}

unsafe fn apply(scenario: *mut EnsimScenario, o: Overrides) -> EnsimStatus {
    with_scenario(scenario, |s| s.apply(&o).map_err(core))
}

/// # Safety
/// `scenario` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ensim_scenario_set_seed(scenario: *mut EnsimScenario, seed: u64) -> EnsimStatus {
    apply(scenario, Overrides { seed: Some(seed), ..Overrides::default() })
}

/// # Safety
/// `scenario` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ensim_scenario_set_duration(scenario: *mut EnsimScenario, seconds: f64) -> EnsimStatus {
    apply(scenario, Overrides { duration_s: Some(seconds), ..Overrides::default() })
}

/// `policy` is one of `single-best`, `full-static`, `drop-one`, `dynamic`.
///
/// # Safety
/// `scenario` must be a live handle; `policy` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ensim_scenario_set_policy(scenario: *mut EnsimScenario, policy: *const c_char) -> EnsimStatus {
    with_scenario(scenario, |s| {
        let p: SelectionPolicy = text(policy, "policy")?
            .parse()
            .map_err(|e: Error| (EnsimStatus::Config, e.to_string()))?;
        s.apply(&Overrides { policy: Some(p), ..Overrides::default() }).map_err(core)
    })
}

/// # Safety
/// `scenario` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ensim_scenario_set_failure_probability(scenario: *mut EnsimScenario, p: f64) -> EnsimStatus {
    apply(scenario, Overrides { failure_prob: Some(p), ..Overrides::default() })
}

/// The effective scenario as JSON; free with [`ensim_string_free`].
///
/// # Safety
/// `scenario` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ensim_scenario_to_json(scenario: *const EnsimScenario, out: *mut *mut c_char) -> EnsimStatus {
    guard(|| {
        let s = scenario.as_ref().ok_or_else(|| null("scenario"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = give_string(s.inner.to_json_value().to_string());
        Ok(())
    })
}

/// # Safety
/// `scenario` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ensim_scenario_free(scenario: *mut EnsimScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Simulate `scenario` to completion.
///
/// # Safety
/// `scenario` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ensim_run(scenario: *const EnsimScenario, out: *mut *mut EnsimReport) -> EnsimStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let s = scenario.as_ref().ok_or_else(|| null("scenario"))?;
        let inner = ensim_core::sim::run(&s.inner).map_err(core)?;
        *out = Box::into_raw(Box::new(EnsimReport { inner }));
        Ok(())
    })
}

/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ensim_report_summary(report: *const EnsimReport, out: *mut EnsimSummary) -> EnsimStatus {
    guard(|| {
        let r = report.as_ref().ok_or_else(|| null("report"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let s = &r.inner.summary;
        *out = EnsimSummary {
            queries: s.queries as u64,
            completed: s.completed as u64,
            failed: s.failed as u64,
            latency_p50_ms: s.latency_ms.p50,
            latency_p99_ms: s.latency_ms.p99,
            slo_violation_fraction: s.slo_violation_fraction,
            accuracy_met_fraction: s.accuracy_met_fraction,
            cumulative_accuracy: s.cumulative_accuracy,
            time_avg_ensemble_size: s.time_avg_ensemble_size,
            total_cost: s.total_cost,
            vms_launched: s.vms.launched,
            vms_preempted: s.vms.preempted,
        };
        Ok(())
    })
}

/// The full `summary.json` body; free with [`ensim_string_free`].
///
/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ensim_report_summary_json(report: *const EnsimReport, out: *mut *mut c_char) -> EnsimStatus {
    guard(|| {
        let r = report.as_ref().ok_or_else(|| null("report"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mut buf = Vec::new();
        r.inner.write_summary(&mut buf).map_err(core)?;
        *out = give_string(String::from_utf8(buf).expect("json is utf-8"));
        Ok(())
    })
}

/// Write the four report files into `dir`, creating it if needed.
///
/// # Safety
/// `report` must be a live handle; `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ensim_report_write(report: *const EnsimReport, dir: *const c_char) -> EnsimStatus {
    guard(|| {
        let r = report.as_ref().ok_or_else(|| null("report"))?;
        r.inner.emit(Path::new(text(dir, "dir")?)).map_err(core)
    })
}

/// # Safety
/// `report` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ensim_report_free(report: *mut EnsimReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// # Safety
/// `s` must be NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ensim_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
