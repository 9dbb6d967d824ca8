//! C ABI for the `fedsim` simulator.
//!
//! Every function returns a [`FedsimStatus`]. On failure a message is kept
//! per thread and can be read with [`fedsim_last_error`]. Experiments live
//! behind an opaque [`FedsimExperiment`] handle that the caller must release
//! with [`fedsim_experiment_free`]. Strings returned by the library must be
//! released with [`fedsim_string_free`].
//!
//! Model matrices are passed row-major: `n` rows of `d` doubles, row `i`
//! belonging to client `i`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use fedsim::aggregators::{
    agg_loss_cluster_with_losses, aggregate, two_means_split, AggregatorKind, AggregatorSpec,
    Submission,
};
use fedsim::config::{parse_config_str, ExperimentConfig};
use fedsim::math::ParamVector;
use fedsim::orchestrator::{post_attack_mean, run_experiment, ExperimentResult};
use fedsim::results::results_csv;
use fedsim::FedError;

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedsimStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Defense = 5,
    /// The experiment has not been run yet.
    NotRun = 6,
    /// A Rust panic was caught at the boundary.
    Panic = 7,
}

/// Aggregation rule selector for [`fedsim_aggregate`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedsimAggregator {
    Mean = 0,
    TrimmedMean = 1,
    Median = 2,
    Krum = 3,
    MultiKrum = 4,
    LossCluster = 5,
}

/// Parameters for [`fedsim_aggregate`]. Fields that do not apply to the
/// chosen rule are ignored.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FedsimAggParams {
    /// Trimmed fraction per side for the trimmed mean, in `[0, 0.5)`.
    pub beta: f64,
    /// Assumed number of malicious clients for Krum and Multi-Krum.
    pub f: usize,
    /// Multi-Krum selection size; 0 means `N - f - 2`.
    pub k: usize,
    /// Loss clustering: keep this many lowest losses; 0 runs 2-means.
    pub k_t_override: usize,
    /// Loss clustering: non-zero stops 2-means after the first assignment.
    pub single_pass: u8,
}

/// Opaque experiment handle.
pub struct FedsimExperiment {
    config: ExperimentConfig,
    result: Option<ExperimentResult>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: FedsimStatus, msg: impl Into<String>) -> FedsimStatus {
    set_error(msg);
    status
}

fn from_fed(err: FedError) -> FedsimStatus {
    let status = match err {
        FedError::Config(_) => FedsimStatus::Config,
        FedError::Io { .. } | FedError::Format { .. } => FedsimStatus::Io,
        FedError::Defense(_) => FedsimStatus::Defense,
        _ => FedsimStatus::InvalidArgument,
    };
    fail(status, err.to_string())
}

/// Runs `f`, turning a panic into [`FedsimStatus::Panic`].
fn guard(f: impl FnOnce() -> FedsimStatus) -> FedsimStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(FedsimStatus::Panic, format!("panic: {msg}"))
        }
    }
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(FedsimStatus::NullPointer, concat!("`", stringify!($p), "` is null"));
        })+
    };
}

/// Message for the most recent failure on this thread, or null if the last
/// call succeeded. The pointer stays valid until the next call into the
/// library from the same thread.
#[no_mangle]
pub extern "C" fn fedsim_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fedsim_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses and validates an experiment config given as TOML text. Relative
/// dataset paths are resolved against the current directory.
///
/// # Safety
/// `toml` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedsim_experiment_from_toml(
    toml: *const c_char,
    out: *mut *mut FedsimExperiment,
) -> FedsimStatus {
    guard(|| {
        non_null!(toml, out);
        let text = match unsafe { CStr::from_ptr(toml) }.to_str() {
            Ok(t) => t,
            Err(_) => return fail(FedsimStatus::InvalidArgument, "config is not valid UTF-8"),
        };
        match parse_config_str(text, Path::new(".")) {
            Ok(config) => {
                let handle = Box::new(FedsimExperiment {
                    config,
                    result: None,
                });
                unsafe { *out = Box::into_raw(handle) };
                FedsimStatus::Ok
            }
            Err(e) => from_fed(e),
        }
    })
}

/// Replaces the master seed and discards any previous results.
///
/// # Safety
/// `exp` must be a handle from [`fedsim_experiment_from_toml`].
#[no_mangle]
pub unsafe extern "C" fn fedsim_experiment_set_seed(
    exp: *mut FedsimExperiment,
    seed: u64,
) -> FedsimStatus {
    guard(|| {
        non_null!(exp);
        let exp = unsafe { &mut *exp };
        exp.config.seed = seed;
        exp.result = None;
        FedsimStatus::Ok
    })
}

/// Runs every round of the experiment.
///
/// # Safety
/// `exp` must be a handle from [`fedsim_experiment_from_toml`].
#[no_mangle]
pub unsafe extern "C" fn fedsim_experiment_run(exp: *mut FedsimExperiment) -> FedsimStatus {
    guard(|| {
        non_null!(exp);
        let exp = unsafe { &mut *exp };
        match run_experiment(&exp.config) {
            Ok(result) => {
                exp.result = Some(result);
                FedsimStatus::Ok
            }
            Err(e) => from_fed(e),
        }
    })
}

fn finished<'a>(exp: *const FedsimExperiment) -> Result<&'a ExperimentResult, FedsimStatus> {
    if exp.is_null() {
        return Err(fail(FedsimStatus::NullPointer, "`exp` is null"));
    }
    let exp = unsafe { &*exp };
    exp.result
        .as_ref()
        .ok_or_else(|| fail(FedsimStatus::NotRun, "experiment has not been run"))
}

/// Number of completed rounds.
///
/// # Safety
/// `exp` must be a valid handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedsim_experiment_num_rounds(
    exp: *const FedsimExperiment,
    out: *mut usize,
) -> FedsimStatus {
    guard(|| {
        non_null!(out);
        match finished(exp) {
            Ok(r) => {
                unsafe { *out = r.reports.len() };
                FedsimStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// Test accuracy of the global model after round `round` (zero-based).
///
/// # Safety
/// `exp` must be a valid handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedsim_experiment_accuracy(
    exp: *const FedsimExperiment,
    round: usize,
    out: *mut f64,
) -> FedsimStatus {
    guard(|| {
        non_null!(out);
        match finished(exp) {
            Ok(r) => match r.reports.get(round) {
                Some(report) => {
                    unsafe { *out = report.centralized_accuracy };
                    FedsimStatus::Ok
                }
                None => fail(
                    FedsimStatus::InvalidArgument,
                    format!("round {round} out of range ({} rounds)", r.reports.len()),
                ),
            },
            Err(s) => s,
        }
    })
}

/// Mean test accuracy over the rounds at or after the attack start.
/// Fails with [`FedsimStatus::InvalidArgument`] if no such round ran.
///
/// # Safety
/// `exp` must be a valid handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedsim_experiment_post_attack_accuracy(
    exp: *const FedsimExperiment,
    out: *mut f64,
) -> FedsimStatus {
    guard(|| {
        non_null!(out);
        let start = match exp.is_null() {
            true => 0,
            false => unsafe { &*exp }.config.attack.start_round,
        };
        match finished(exp) {
            Ok(r) => match post_attack_mean(&r.reports, start) {
                Some(acc) => {
                    unsafe { *out = acc };
                    FedsimStatus::Ok
                }
                None => fail(
                    FedsimStatus::InvalidArgument,
                    "no rounds after the attack start",
                ),
            },
            Err(s) => s,
        }
    })
}

/// Per-round results in CSV form. Release the string with
/// [`fedsim_string_free`].
///
/// # Safety
/// `exp` must be a valid handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedsim_experiment_results_csv(
    exp: *const FedsimExperiment,
    out: *mut *mut c_char,
) -> FedsimStatus {
    guard(|| {
        non_null!(out);
        match finished(exp) {
            Ok(r) => {
                let config = &unsafe { &*exp }.config;
                let csv = results_csv(config, &r.reports);
                match CString::new(csv) {
                    Ok(s) => {
                        unsafe { *out = s.into_raw() };
                        FedsimStatus::Ok
                    }
                    Err(_) => fail(FedsimStatus::InvalidArgument, "results contain NUL"),
                }
            }
            Err(s) => s,
        }
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fedsim_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Releases an experiment handle. Null is ignored.
///
/// # Safety
/// `exp` must come from [`fedsim_experiment_from_toml`] and must not be
/// used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fedsim_experiment_free(exp: *mut FedsimExperiment) {
    if !exp.is_null() {
        drop(unsafe { Box::from_raw(exp) });
    }
}

fn rule(kind: FedsimAggregator, params: &FedsimAggParams) -> AggregatorSpec {
    let kind = match kind {
        FedsimAggregator::Mean => AggregatorKind::Mean,
        FedsimAggregator::TrimmedMean => AggregatorKind::TrimmedMean,
        FedsimAggregator::Median => AggregatorKind::Median,
        FedsimAggregator::Krum => AggregatorKind::Krum,
        FedsimAggregator::MultiKrum => AggregatorKind::MultiKrum,
        FedsimAggregator::LossCluster => AggregatorKind::LossCluster,
    };
    AggregatorSpec {
        kind,
        beta: params.beta,
        f: params.f,
        k: (params.k > 0).then_some(params.k),
        k_t_override: (params.k_t_override > 0).then_some(params.k_t_override),
        single_pass: params.single_pass != 0,
    }
}

/// Aggregates `n` client models of dimension `d`.
///
/// `num_samples` (length `n`) weights the mean and may be null for equal
/// weights. `losses` (length `n`) is required for loss clustering and
/// ignored otherwise. On success `out_model` (length `d`) holds the new
/// model and `out_selected` (length `n`, may be null) holds 1 for every
/// client that entered the aggregate and 0 otherwise.
///
/// # Safety
/// Every non-null pointer must reference at least the stated number of
/// elements.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn fedsim_aggregate(
    kind: FedsimAggregator,
    params: *const FedsimAggParams,
    models: *const f64,
    n: usize,
    d: usize,
    num_samples: *const usize,
    losses: *const f64,
    out_model: *mut f64,
    out_selected: *mut u8,
) -> FedsimStatus {
    guard(|| {
        non_null!(params, models, out_model);
        if n == 0 || d == 0 {
            return fail(FedsimStatus::InvalidArgument, "n and d must be positive");
        }
        let Some(len) = n.checked_mul(d) else {
            return fail(FedsimStatus::InvalidArgument, "n * d overflows");
        };
        let spec = rule(kind, unsafe { &*params });
        let flat = unsafe { slice::from_raw_parts(models, len) };
        let weights =
            (!num_samples.is_null()).then(|| unsafe { slice::from_raw_parts(num_samples, n) });
        let subs: Vec<Submission> = flat
            .chunks_exact(d)
            .enumerate()
            .map(|(i, row)| Submission {
                client_id: i,
                model: ParamVector::new(row.to_vec()),
                num_samples: weights.map_or(1, |w| w[i]),
            })
            .collect();
        let outcome = if spec.kind == AggregatorKind::LossCluster {
            if losses.is_null() {
                return fail(FedsimStatus::NullPointer, "loss clustering needs `losses`");
            }
            let losses = unsafe { slice::from_raw_parts(losses, n) };
            spec.validate(n).and_then(|_| {
                agg_loss_cluster_with_losses(&subs, losses, spec.k_t_override, spec.single_pass)
            })
        } else {
            aggregate(&spec, &subs, None)
        };
        match outcome {
            Ok((model, report)) => {
                unsafe { slice::from_raw_parts_mut(out_model, d) }
                    .copy_from_slice(model.as_slice());
                if !out_selected.is_null() {
                    let mask = unsafe { slice::from_raw_parts_mut(out_selected, n) };
                    mask.fill(0);
                    for id in report.selected_ids {
                        mask[id] = 1;
                    }
                }
                FedsimStatus::Ok
            }
            Err(e) => from_fed(e),
        }
    })
}

/// Splits `n` losses into a low and a high group with 1-d 2-means.
/// `out_low` (length `n`) receives 1 for members of the low group.
///
/// # Safety
/// `losses` and `out_low` must reference at least `n` elements.
#[no_mangle]
pub unsafe extern "C" fn fedsim_two_means_split(
    losses: *const f64,
    n: usize,
    single_pass: u8,
    out_low: *mut u8,
) -> FedsimStatus {
    guard(|| {
        non_null!(losses, out_low);
        let values = unsafe { slice::from_raw_parts(losses, n) };
        match two_means_split(values, single_pass != 0) {
            Ok((low, _)) => {
                let mask = unsafe { slice::from_raw_parts_mut(out_low, n) };
                mask.fill(0);
                for i in low {
                    mask[i] = 1;
                }
                FedsimStatus::Ok
            }
            Err(e) => from_fed(e),
        }
    })
}
