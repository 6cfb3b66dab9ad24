//! C bindings for the `eero` library.
//!
//! Objects cross the boundary as opaque handles created by `eero_*_load`,
//! `eero_*_synth`, `eero_calibrate` or `eero_infer` and released with the
//! matching `*_free`. Every fallible function returns an [`EeroStatus`];
//! on failure, [`eero_last_error_message`] describes the error for the
//! calling thread. Panics never cross the boundary.
//!
//! Arrays are written into caller-provided buffers whose length is passed
//! alongside; a buffer that is too short is an invalid argument.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use eero::allocation::{single_head_rate, solve_allocation, AllocationProblem};
use eero::calibration::Correction;
use eero::domain::{BatchResult, BudgetSpec, Dataset, Split};
use eero::io;
use eero::pipeline::{self, exit_code, CalibrateConfig, Calibration, PipelineError};
use eero::scoring::{ScoreKind, ScoreSpec, DEFAULT_JITTER};
use eero::synth::{self, SynthSpec};

/// Status codes; the numeric values match the `eero` CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EeroStatus {
    Ok = 0,
    /// A panic or other internal failure.
    Internal = 1,
    InvalidArgument = 2,
    Io = 3,
    Infeasible = 4,
    Mismatch = 5,
    ResolutionTooCoarse = 6,
}

impl EeroStatus {
    fn from_code(code: i32) -> Self {
        match code {
            exit_code::OK => EeroStatus::Ok,
            exit_code::INVALID => EeroStatus::InvalidArgument,
            exit_code::IO => EeroStatus::Io,
            exit_code::INFEASIBLE => EeroStatus::Infeasible,
            exit_code::MISMATCH => EeroStatus::Mismatch,
            exit_code::RESOLUTION => EeroStatus::ResolutionTooCoarse,
            _ => EeroStatus::Internal,
        }
    }
}

pub const EERO_SCORE_MAX_PROB: u32 = 0;
pub const EERO_SCORE_BREAKING_TIES: u32 = 1;
pub const EERO_SCORE_NEG_ENTROPY: u32 = 2;

pub const EERO_SPLIT_TRAIN: u32 = 0;
pub const EERO_SPLIT_CALIB: u32 = 1;
pub const EERO_SPLIT_TEST: u32 = 2;

/// A loaded or generated dataset.
pub struct EeroDataset {
    inner: Dataset,
}

/// A calibrated policy with its allocation.
pub struct EeroCalibration {
    inner: Calibration,
}

/// Per-instance routing of one batch.
pub struct EeroBatchResult {
    inner: BatchResult,
}

/// Options for [`eero_calibrate`]; start from [`eero_calibrate_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct EeroCalibrateOptions {
    /// Total budget for the batch, in GFlops.
    pub total_budget: f64,
    /// Batch size; 0 uses the test split size.
    pub batch_size: usize,
    pub beta: f64,
    /// One of the `EERO_SCORE_*` constants.
    pub score_kind: u32,
    pub jitter: f64,
    pub seed: u64,
}

struct Failure {
    status: EeroStatus,
    message: String,
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure {
            status: EeroStatus::from_code(e.exit_code()),
            message: e.to_string(),
        }
    }
}

impl From<io::IoError> for Failure {
    fn from(e: io::IoError) -> Self {
        PipelineError::from(e).into()
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure {
        status: EeroStatus::InvalidArgument,
        message: message.into(),
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard<F>(f: F) -> EeroStatus
where
    F: FnOnce() -> Result<(), Failure>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            EeroStatus::Ok
        }
        Ok(Err(failure)) => {
            set_last_error(&failure.message);
            failure.status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("internal error: {msg}"));
            EeroStatus::Internal
        }
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| invalid(format!("{what} is null")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| invalid(format!("{what} is null")))
}

unsafe fn input_slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn copy_out<T: Copy>(src: &[T], dst: *mut T, len: usize, what: &str) -> Result<(), Failure> {
    if dst.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    if len < src.len() {
        return Err(invalid(format!(
            "{what} holds {len} values, {} needed",
            src.len()
        )));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    Ok(())
}

fn score_kind(code: u32) -> Result<ScoreKind, Failure> {
    match code {
        EERO_SCORE_MAX_PROB => Ok(ScoreKind::MaxProb),
        EERO_SCORE_BREAKING_TIES => Ok(ScoreKind::BreakingTies),
        EERO_SCORE_NEG_ENTROPY => Ok(ScoreKind::NegEntropy),
        other => Err(invalid(format!("unknown score kind {other}"))),
    }
}

fn split(code: u32) -> Result<Split, Failure> {
    match code {
        EERO_SPLIT_TRAIN => Ok(Split::Train),
        EERO_SPLIT_CALIB => Ok(Split::Calib),
        EERO_SPLIT_TEST => Ok(Split::Test),
        other => Err(invalid(format!("unknown split {other}"))),
    }
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next `eero_*` call on the same thread.
#[no_mangle]
pub extern "C" fn eero_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn eero_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a dataset from a manifest file or a directory containing `manifest.json`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn eero_dataset_load(
    path: *const c_char,
    out: *mut *mut EeroDataset,
) -> EeroStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let path = c_str(path, "path")?;
        let inner = io::load_manifest(Path::new(path))?;
        *out = Box::into_raw(Box::new(EeroDataset { inner }));
        Ok(())
    })
}

/// Generates a synthetic dataset from a JSON generator spec (`"{}"` for defaults).
///
/// # Safety
/// `spec_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn eero_dataset_synth(
    spec_json: *const c_char,
    out: *mut *mut EeroDataset,
) -> EeroStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let text = c_str(spec_json, "spec_json")?;
        let spec: SynthSpec =
            serde_json::from_str(text).map_err(|e| invalid(format!("invalid synth spec: {e}")))?;
        let inner = synth::generate(&spec).map_err(|e| invalid(e.to_string()))?;
        *out = Box::into_raw(Box::new(EeroDataset { inner }));
        Ok(())
    })
}

/// Writes a dataset as manifest plus CSVs into an existing directory.
///
/// # Safety
/// `dataset` must come from this library; `dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn eero_dataset_write(
    dataset: *const EeroDataset,
    dir: *const c_char,
) -> EeroStatus {
    guard(|| {
        let ds = handle(dataset, "dataset")?;
        let dir = c_str(dir, "dir")?;
        io::write_dataset(Path::new(dir), &ds.inner)?;
        Ok(())
    })
}

/// # Safety
/// `dataset` must be NULL or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn eero_dataset_free(dataset: *mut EeroDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// # Safety
/// `dataset` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn eero_dataset_num_heads(dataset: *const EeroDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.num_heads())
}

/// # Safety
/// `dataset` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn eero_dataset_num_classes(dataset: *const EeroDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.num_classes())
}

/// Instances in a split (`EERO_SPLIT_*`); 0 if the split is absent.
///
/// # Safety
/// `dataset` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn eero_dataset_num_instances(
    dataset: *const EeroDataset,
    split_code: u32,
) -> usize {
    let (Some(d), Ok(s)) = (dataset.as_ref(), split(split_code)) else {
        return 0;
    };
    d.inner.split(s).map_or(0, |s| s.bank.num_instances())
}

/// Copies the per-head costs into `out[0..num_heads]`.
///
/// # Safety
/// `dataset` must come from this library; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn eero_dataset_head_budgets(
    dataset: *const EeroDataset,
    out: *mut f64,
    len: usize,
) -> EeroStatus {
    guard(|| {
        let ds = handle(dataset, "dataset")?;
        copy_out(&ds.inner.budgets(), out, len, "out")
    })
}

#[no_mangle]
pub extern "C" fn eero_calibrate_options_default() -> EeroCalibrateOptions {
    let spec = ScoreSpec::default();
    EeroCalibrateOptions {
        total_budget: 0.0,
        batch_size: 0,
        beta: eero::allocation::DEFAULT_BETA,
        score_kind: EERO_SCORE_BREAKING_TIES,
        jitter: DEFAULT_JITTER,
        seed: spec.seed,
    }
}

/// Allocates the budget across heads and calibrates exit thresholds.
///
/// # Safety
/// `dataset` must come from this library; `options` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn eero_calibrate(
    dataset: *const EeroDataset,
    options: *const EeroCalibrateOptions,
    out: *mut *mut EeroCalibration,
) -> EeroStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let ds = handle(dataset, "dataset")?;
        let opts = handle(options, "options")?;
        let batch_size = match opts.batch_size {
            0 => ds
                .inner
                .test
                .as_ref()
                .map(|t| t.bank.num_instances())
                .ok_or_else(|| invalid("batch_size is 0 and the dataset has no test split"))?,
            t => t,
        };
        let budget =
            BudgetSpec::new(opts.total_budget, batch_size).map_err(|e| invalid(e.to_string()))?;
        if !(opts.beta.is_finite() && opts.beta > 0.0) {
            return Err(invalid(format!("beta must be positive, got {}", opts.beta)));
        }
        let config = CalibrateConfig {
            budget,
            beta: opts.beta,
            score: ScoreSpec::new(score_kind(opts.score_kind)?, opts.jitter, opts.seed),
            correction: Correction::default(),
        };
        let inner = pipeline::calibrate(&ds.inner, &config)?;
        *out = Box::into_raw(Box::new(EeroCalibration { inner }));
        Ok(())
    })
}

/// Parses a policy file's JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn eero_calibration_from_json(
    json: *const c_char,
    out: *mut *mut EeroCalibration,
) -> EeroStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let text = c_str(json, "json")?;
        let inner: Calibration =
            serde_json::from_str(text).map_err(|e| invalid(format!("invalid policy: {e}")))?;
        *out = Box::into_raw(Box::new(EeroCalibration { inner }));
        Ok(())
    })
}

/// Serializes the calibration as JSON; release the string with [`eero_string_free`].
///
/// # Safety
/// `calibration` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn eero_calibration_to_json(
    calibration: *const EeroCalibration,
    out: *mut *mut c_char,
) -> EeroStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let cal = handle(calibration, "calibration")?;
        let text = serde_json::to_string_pretty(&cal.inner).map_err(|e| invalid(e.to_string()))?;
        *out = CString::new(text)
            .map_err(|e| invalid(e.to_string()))?
            .into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be NULL or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn eero_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `calibration` must be NULL or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn eero_calibration_free(calibration: *mut EeroCalibration) {
    if !calibration.is_null() {
        drop(Box::from_raw(calibration));
    }
}

/// # Safety
/// `calibration` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn eero_calibration_num_heads(calibration: *const EeroCalibration) -> usize {
    calibration
        .as_ref()
        .map_or(0, |c| c.inner.policy.num_heads())
}

/// Copies the allocated per-head rates.
///
/// # Safety
/// `calibration` must come from this library; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn eero_calibration_epsilons(
    calibration: *const EeroCalibration,
    out: *mut f64,
    len: usize,
) -> EeroStatus {
    guard(|| {
        let cal = handle(calibration, "calibration")?;
        copy_out(&cal.inner.allocation.epsilons, out, len, "out")
    })
}

/// Copies the per-head score thresholds; the last is `-INFINITY`.
///
/// # Safety
/// `calibration` must come from this library; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn eero_calibration_thresholds(
    calibration: *const EeroCalibration,
    out: *mut f64,
    len: usize,
) -> EeroStatus {
    guard(|| {
        let cal = handle(calibration, "calibration")?;
        copy_out(cal.inner.policy.thresholds(), out, len, "out")
    })
}

/// Routes the dataset's test split through the calibrated policy.
///
/// # Safety
/// Handles must come from this library; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn eero_infer(
    dataset: *const EeroDataset,
    calibration: *const EeroCalibration,
    out: *mut *mut EeroBatchResult,
) -> EeroStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let ds = handle(dataset, "dataset")?;
        let cal = handle(calibration, "calibration")?;
        let (inner, _) = pipeline::infer(&ds.inner, &cal.inner)?;
        *out = Box::into_raw(Box::new(EeroBatchResult { inner }));
        Ok(())
    })
}

/// # Safety
/// `result` must be NULL or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn eero_batch_result_free(result: *mut EeroBatchResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// # Safety
/// `result` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn eero_batch_result_num_instances(result: *const EeroBatchResult) -> usize {
    result.as_ref().map_or(0, |r| r.inner.num_instances())
}

/// Total cost of the batch in GFlops; NaN for a NULL handle.
///
/// # Safety
/// `result` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn eero_batch_result_consumed_budget(result: *const EeroBatchResult) -> f64 {
    result
        .as_ref()
        .map_or(f64::NAN, |r| r.inner.consumed_budget)
}

/// Accuracy on the labeled test split; an invalid argument without labels.
///
/// # Safety
/// `result` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn eero_batch_result_accuracy(
    result: *const EeroBatchResult,
    out: *mut f64,
) -> EeroStatus {
    guard(|| {
        let r = handle(result, "result")?;
        let out = out_ptr(out, "out")?;
        *out = r
            .inner
            .accuracy
            .ok_or_else(|| invalid("the test split has no labels"))?;
        Ok(())
    })
}

/// Copies the 0-based exit head of each instance.
///
/// # Safety
/// `result` must come from this library; `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn eero_batch_result_exits(
    result: *const EeroBatchResult,
    out: *mut usize,
    len: usize,
) -> EeroStatus {
    guard(|| {
        let r = handle(result, "result")?;
        copy_out(&r.inner.exits, out, len, "out")
    })
}

/// Copies the 0-based predicted class of each instance.
///
/// # Safety
/// `result` must come from this library; `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn eero_batch_result_predictions(
    result: *const EeroBatchResult,
    out: *mut usize,
    len: usize,
) -> EeroStatus {
    guard(|| {
        let r = handle(result, "result")?;
        copy_out(&r.inner.predictions, out, len, "out")
    })
}

/// Solves the budget allocation for `num_heads` heads. `prior` may be NULL
/// for the inverse-cost default. Writes the rates to `epsilons_out` and
/// the budget multiplier (possibly `INFINITY`) to `multiplier_out`, which
/// may be NULL.
///
/// # Safety
/// Array arguments must hold `num_heads` doubles.
#[no_mangle]
pub unsafe extern "C" fn eero_solve_allocation(
    risks: *const f64,
    budgets: *const f64,
    prior: *const f64,
    num_heads: usize,
    beta: f64,
    mean_budget: f64,
    epsilons_out: *mut f64,
    multiplier_out: *mut f64,
) -> EeroStatus {
    guard(|| {
        let risks = input_slice(risks, num_heads, "risks")?.to_vec();
        let budgets = input_slice(budgets, num_heads, "budgets")?.to_vec();
        let problem = if prior.is_null() {
            AllocationProblem::with_default_prior(risks, budgets, beta, mean_budget)
        } else {
            AllocationProblem::new(
                risks,
                budgets,
                input_slice(prior, num_heads, "prior")?.to_vec(),
                beta,
                mean_budget,
            )
        }
        .map_err(PipelineError::from)?;
        let res = solve_allocation(&problem).map_err(PipelineError::from)?;
        copy_out(&res.epsilons, epsilons_out, num_heads, "epsilons_out")?;
        if let Some(m) = multiplier_out.as_mut() {
            *m = res.multiplier;
        }
        Ok(())
    })
}

/// Fraction of a batch of `batch_size` the cheaper of two heads must take
/// so the batch spends `total_budget`, clamped to `[0, 1]`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn eero_single_head_rate(
    cheap_budget: f64,
    expensive_budget: f64,
    total_budget: f64,
    batch_size: usize,
    out: *mut f64,
) -> EeroStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = single_head_rate(cheap_budget, expensive_budget, total_budget, batch_size)
            .map_err(PipelineError::from)?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_codes_track_exit_codes() {
        for code in 0..8 {
            let s = EeroStatus::from_code(code);
            if s != EeroStatus::Internal {
                assert_eq!(s as i32, code);
            }
        }
    }

    #[test]
    fn panics_become_internal_errors() {
        let s = guard(|| panic!("boom"));
        assert_eq!(s, EeroStatus::Internal);
        let msg = unsafe { CStr::from_ptr(eero_last_error_message()) };
        assert!(msg.to_str().unwrap().contains("boom"));
    }
}
