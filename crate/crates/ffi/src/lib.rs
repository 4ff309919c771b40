//! C ABI over `evolver_core`.
//!
//! Every fallible function returns an `EvolverStatus`; on anything other
//! than `EVOLVER_STATUS_OK` the message is available from
//! `evolver_last_error_message` on the same thread. Strings handed to the
//! caller are owned by the caller and released with `evolver_string_free`.
//! Handles are opaque and released with their `_free` function.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use evolver_core::analysis::{NgramIndex, Tokenizer};
use evolver_core::data_model::{load_dataset, save_dataset, InstructionRecord};
use evolver_core::evolution::mix_rounds;
use evolver_core::failure::{classify, failure_rate, FailureCategory, FailureVerdict};
use evolver_core::gateway::{estimate_cost, OptimizationCostParams};
use evolver_core::optimizer::OptimizerConfig;
use evolver_core::templates::{extract_final_instruction, DEFAULT_MARKER};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvolverStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Parse = 5,
    OutOfRange = 6,
    Panic = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvolverFailureCategory {
    None = 0,
    StagnantComplexity = 1,
    InsufficientQualification = 2,
    LossOfKeyInformation = 3,
    NoResponse = 4,
}

impl From<FailureCategory> for EvolverFailureCategory {
    fn from(c: FailureCategory) -> Self {
        match c {
            FailureCategory::None => Self::None,
            FailureCategory::StagnantComplexity => Self::StagnantComplexity,
            FailureCategory::InsufficientQualification => Self::InsufficientQualification,
            FailureCategory::LossOfKeyInformation => Self::LossOfKeyInformation,
            FailureCategory::NoResponse => Self::NoResponse,
        }
    }
}

/// Optimizer settings for `evolver_estimate_cost`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct EvolverCostParams {
    pub steps: u64,
    pub batch_size: u64,
    pub trajectory_rounds: u64,
    pub candidates: u64,
    pub dev_size: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct EvolverCostReport {
    pub full_evolution_calls: u64,
    pub optimization_calls: u64,
    pub total_calls: u64,
}

/// Opaque n-gram index over benchmark items.
pub struct EvolverNgramIndex(NgramIndex);

/// Opaque in-memory instruction dataset.
pub struct EvolverDataset(Vec<InstructionRecord>);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(EvolverStatus, String);

type FfiResult<T = ()> = Result<T, Failure>;

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> FfiResult) -> EvolverStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EvolverStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            EvolverStatus::Panic
        }
    }
}

fn fail<T>(status: EvolverStatus, message: impl Into<String>) -> FfiResult<T> {
    Err(Failure(status, message.into()))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return fail(EvolverStatus::NullPointer, format!("{name} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(EvolverStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

fn out_arg<'a, T>(p: *mut T, name: &str) -> FfiResult<&'a mut T> {
    // SAFETY: callers pass either null or a pointer to writable storage.
    unsafe { p.as_mut() }.map_or_else(|| fail(EvolverStatus::NullPointer, format!("{name} is null")), Ok)
}

fn ref_arg<'a, T>(p: *const T, name: &str) -> FfiResult<&'a T> {
    // SAFETY: callers pass either null or a live handle from this library.
    unsafe { p.as_ref() }.map_or_else(|| fail(EvolverStatus::NullPointer, format!("{name} is null")), Ok)
}

fn to_c_string(s: String) -> FfiResult<*mut c_char> {
    CString::new(s)
        .map(CString::into_raw)
        .or_else(|_| fail(EvolverStatus::InvalidArgument, "result contains a nul byte"))
}

/// Copy of the last error message on this thread, or null if none. Free it
/// with `evolver_string_free`.
#[no_mangle]
pub extern "C" fn evolver_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null_mut(), |c| c.clone().into_raw()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a pointer returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn evolver_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Classifies a generated response with the default failure rules.
///
/// # Safety
/// `response` must be a nul-terminated string; `out_category` writable.
#[no_mangle]
pub unsafe extern "C" fn evolver_classify(
    response: *const c_char,
    out_category: *mut EvolverFailureCategory,
) -> EvolverStatus {
    guard(|| {
        let response = str_arg(response, "response")?;
        *out_arg(out_category, "out_category")? = classify(response).category.into();
        Ok(())
    })
}

/// Fraction of `dev_size` entries flagged in `failed` (nonzero = failed).
///
/// # Safety
/// `failed` must point to `len` readable bytes (may be null when `len` is 0).
#[no_mangle]
pub unsafe extern "C" fn evolver_failure_rate(
    failed: *const u8,
    len: usize,
    dev_size: usize,
    out_rate: *mut f64,
) -> EvolverStatus {
    guard(|| {
        let flags: &[u8] = match (failed.is_null(), len) {
            (_, 0) => &[],
            (true, _) => return fail(EvolverStatus::NullPointer, "failed is null"),
            (false, n) => std::slice::from_raw_parts(failed, n),
        };
        let verdicts: Vec<FailureVerdict> = flags
            .iter()
            .map(|&f| {
                if f != 0 {
                    FailureVerdict::gateway_failure("flagged")
                } else {
                    FailureVerdict::success()
                }
            })
            .collect();
        let rate = failure_rate(&verdicts, dev_size).or_else(|e| fail(EvolverStatus::InvalidArgument, e.to_string()))?;
        *out_arg(out_rate, "out_rate")? = rate;
        Ok(())
    })
}

/// Pulls the final instruction out of an evolution output. A null `marker`
/// selects the default marker. `out_format_warning` may be null.
///
/// # Safety
/// String arguments must be nul-terminated; `out_text` writable.
#[no_mangle]
pub unsafe extern "C" fn evolver_extract_final_instruction(
    output: *const c_char,
    marker: *const c_char,
    out_text: *mut *mut c_char,
    out_format_warning: *mut bool,
) -> EvolverStatus {
    guard(|| {
        let output = str_arg(output, "output")?;
        let marker = if marker.is_null() {
            DEFAULT_MARKER
        } else {
            str_arg(marker, "marker")?
        };
        let out_text = out_arg(out_text, "out_text")?;
        let extracted =
            extract_final_instruction(output, marker).or_else(|e| fail(EvolverStatus::Parse, e.to_string()))?;
        if let Some(w) = out_format_warning.as_mut() {
            *w = extracted.format_warning;
        }
        *out_text = to_c_string(extracted.text)?;
        Ok(())
    })
}

/// Optimizer defaults for `evolver_estimate_cost`.
#[no_mangle]
pub extern "C" fn evolver_default_cost_params() -> EvolverCostParams {
    let c = OptimizerConfig::default();
    EvolverCostParams {
        steps: u64::from(c.max_steps),
        batch_size: c.batch_size as u64,
        trajectory_rounds: c.trajectory_rounds as u64,
        candidates: c.candidates as u64,
        dev_size: c.dev_size as u64,
    }
}

/// API-call estimate; a null `params` uses the optimizer defaults.
///
/// # Safety
/// `params` must be null or readable; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn evolver_estimate_cost(
    datasize: u64,
    rounds: u64,
    params: *const EvolverCostParams,
    out: *mut EvolverCostReport,
) -> EvolverStatus {
    guard(|| {
        let p = params.as_ref().copied().unwrap_or_else(|| evolver_default_cost_params());
        let report = estimate_cost(
            datasize,
            rounds,
            &OptimizationCostParams {
                steps: p.steps,
                batch_size: p.batch_size,
                trajectory_rounds: p.trajectory_rounds,
                candidates: p.candidates,
                dev_size: p.dev_size,
            },
        )
        .or_else(|e| fail(EvolverStatus::InvalidArgument, e.to_string()))?;
        *out_arg(out, "out")? = EvolverCostReport {
            full_evolution_calls: report.full_evolution_calls,
            optimization_calls: report.optimization_calls,
            total_calls: report.total_calls,
        };
        Ok(())
    })
}

/// New empty index of `n`-grams with the default tokenizer.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn evolver_ngram_index_new(n: usize, out: *mut *mut EvolverNgramIndex) -> EvolverStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if n == 0 {
            return fail(EvolverStatus::InvalidArgument, "n must be at least 1");
        }
        *out = Box::into_raw(Box::new(EvolverNgramIndex(NgramIndex::new(n, Tokenizer::default()))));
        Ok(())
    })
}

/// Adds the n-grams of one benchmark item.
///
/// # Safety
/// `index` must be a live handle; `text` nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn evolver_ngram_index_add(index: *mut EvolverNgramIndex, text: *const c_char) -> EvolverStatus {
    guard(|| {
        let index = out_arg(index, "index")?;
        index.0.insert(str_arg(text, "text")?);
        Ok(())
    })
}

/// Whether any n-gram of `text` is in the index.
///
/// # Safety
/// `index` must be a live handle; `text` nul-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn evolver_ngram_index_matches(
    index: *const EvolverNgramIndex,
    text: *const c_char,
    out: *mut bool,
) -> EvolverStatus {
    guard(|| {
        let index = ref_arg(index, "index")?;
        *out_arg(out, "out")? = index.0.matches(str_arg(text, "text")?);
        Ok(())
    })
}

/// # Safety
/// `index` must be null or a handle from `evolver_ngram_index_new`, freed once.
#[no_mangle]
pub unsafe extern "C" fn evolver_ngram_index_free(index: *mut EvolverNgramIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Loads a JSONL dataset.
///
/// # Safety
/// `path` nul-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn evolver_dataset_load(path: *const c_char, out: *mut *mut EvolverDataset) -> EvolverStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let records = load_dataset(path).or_else(|e| {
            let status = match e {
                evolver_core::data_model::DatasetError::Io { .. } => EvolverStatus::Io,
                _ => EvolverStatus::Parse,
            };
            fail(status, e.to_string())
        })?;
        *out = Box::into_raw(Box::new(EvolverDataset(records)));
        Ok(())
    })
}

/// Number of records; 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn evolver_dataset_len(dataset: *const EvolverDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.len())
}

/// Id of record `i`.
///
/// # Safety
/// `dataset` must be a live handle; `out_id` writable.
#[no_mangle]
pub unsafe extern "C" fn evolver_dataset_record_id(
    dataset: *const EvolverDataset,
    i: usize,
    out_id: *mut *mut c_char,
) -> EvolverStatus {
    guard(|| {
        let dataset = ref_arg(dataset, "dataset")?;
        let out_id = out_arg(out_id, "out_id")?;
        let Some(record) = dataset.0.get(i) else {
            return fail(EvolverStatus::OutOfRange, format!("index {i} out of range"));
        };
        *out_id = to_c_string(record.id.clone())?;
        Ok(())
    })
}

/// New dataset holding the records whose round is in `rounds`.
///
/// # Safety
/// `dataset` must be a live handle; `rounds` must point to `n_rounds`
/// values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn evolver_dataset_mix(
    dataset: *const EvolverDataset,
    rounds: *const u32,
    n_rounds: usize,
    out: *mut *mut EvolverDataset,
) -> EvolverStatus {
    guard(|| {
        let dataset = ref_arg(dataset, "dataset")?;
        let out = out_arg(out, "out")?;
        if rounds.is_null() || n_rounds == 0 {
            return fail(EvolverStatus::InvalidArgument, "rounds must be a non-empty array");
        }
        let wanted: BTreeSet<u32> = std::slice::from_raw_parts(rounds, n_rounds).iter().copied().collect();
        *out = Box::into_raw(Box::new(EvolverDataset(mix_rounds(&dataset.0, &wanted))));
        Ok(())
    })
}

/// Writes the dataset as JSONL.
///
/// # Safety
/// `dataset` must be a live handle; `path` nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn evolver_dataset_save(dataset: *const EvolverDataset, path: *const c_char) -> EvolverStatus {
    guard(|| {
        let dataset = ref_arg(dataset, "dataset")?;
        let path = str_arg(path, "path")?;
        save_dataset(path, &dataset.0).or_else(|e| fail(EvolverStatus::Io, e.to_string()))
    })
}

/// # Safety
/// `dataset` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn evolver_dataset_free(dataset: *mut EvolverDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}
