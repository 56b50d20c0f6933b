//! C ABI over the mergeability library.
//!
//! Adapters cross the boundary as opaque [`MrgAdapter`] handles. Every
//! fallible call returns an [`MrgStatus`] and leaves a message for
//! [`mrg_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mergeability::adapter::{load_adapter, save_adapter, weight_stats, AdapterUpdate};
use mergeability::merge::{compute_inverse_accuracy_weights, merge, MergeAlgorithm, MergeSpec};
use mergeability::mergeability::binomial_expected;
use mergeability::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MrgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Merge = 6,
    Numeric = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MrgAlgorithm {
    Mean = 0,
    Weighted = 1,
    Ties = 2,
    Knots = 3,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MrgMergeOptions {
    pub algorithm: MrgAlgorithm,
    /// TIES/KnOTS keep-rate in (0, 1].
    pub density: f64,
    pub lambda: f64,
    /// Weighted only.
    pub tau: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MrgWeightStats {
    pub frobenius: f64,
    pub sigma_max: f64,
    pub parameters: usize,
}

/// Opaque adapter handle.
pub struct MrgAdapter {
    inner: AdapterUpdate,
    id: CString,
    task_id: CString,
}

impl MrgAdapter {
    fn new(inner: AdapterUpdate) -> Self {
        let id = CString::new(inner.id.replace('\0', "")).unwrap_or_default();
        let task_id = CString::new(inner.task_id.replace('\0', "")).unwrap_or_default();
        MrgAdapter { inner, id, task_id }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> MrgStatus {
    match e {
        Error::Io { .. } => MrgStatus::Io,
        Error::Format(_) | Error::Json(_) => MrgStatus::Format,
        Error::Shape { .. } | Error::InvalidMatrix(_) => MrgStatus::Shape,
        Error::Merge(_) | Error::InvalidAdapter(_) => MrgStatus::Merge,
        Error::NoConvergence { .. } | Error::UndefinedCorrelation(_) | Error::Training(_) => MrgStatus::Numeric,
        _ => MrgStatus::InvalidArgument,
    }
}

struct Fail(MrgStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MrgStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MrgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MrgStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MrgStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(MrgStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Reads a `.mrga` file into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mrg_adapter_load(path: *const c_char, out: *mut *mut MrgAdapter) -> MrgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let adapter = load_adapter(path)?;
        *out = Box::into_raw(Box::new(MrgAdapter::new(adapter)));
        Ok(())
    })
}

/// # Safety
/// `adapter` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mrg_adapter_save(adapter: *const MrgAdapter, path: *const c_char) -> MrgStatus {
    guard(|| {
        let adapter = adapter.as_ref().ok_or_else(|| null("adapter"))?;
        let path = path_arg(path, "path")?;
        save_adapter(&adapter.inner, path)?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `adapter` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mrg_adapter_free(adapter: *mut MrgAdapter) {
    if !adapter.is_null() {
        drop(Box::from_raw(adapter));
    }
}

/// Update id; valid while the handle lives. Null for a null handle.
///
/// # Safety
/// `adapter` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mrg_adapter_id(adapter: *const MrgAdapter) -> *const c_char {
    adapter.as_ref().map_or(ptr::null(), |a| a.id.as_ptr())
}

/// # Safety
/// `adapter` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mrg_adapter_task_id(adapter: *const MrgAdapter) -> *const c_char {
    adapter.as_ref().map_or(ptr::null(), |a| a.task_id.as_ptr())
}

/// Frobenius norm and top singular value, averaged over parameters.
///
/// # Safety
/// `adapter` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mrg_weight_stats(adapter: *const MrgAdapter, out: *mut MrgWeightStats) -> MrgStatus {
    guard(|| {
        let adapter = adapter.as_ref().ok_or_else(|| null("adapter"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let s = weight_stats(&adapter.inner)?;
        *out = MrgWeightStats { frobenius: s.frobenius, sigma_max: s.sigma_max, parameters: s.per_parameter.len() };
        Ok(())
    })
}

fn spec_from(opts: &MrgMergeOptions) -> MergeSpec {
    let algorithm = match opts.algorithm {
        MrgAlgorithm::Mean => MergeAlgorithm::Mean,
        MrgAlgorithm::Weighted => MergeAlgorithm::Weighted,
        MrgAlgorithm::Ties => MergeAlgorithm::Ties,
        MrgAlgorithm::Knots => MergeAlgorithm::Knots,
    };
    MergeSpec { density: opts.density, lambda: opts.lambda, tau: opts.tau, ..MergeSpec::new(algorithm) }
}

/// Merges `count` handles into a new handle stored in `*out`.
///
/// `accuracies` holds one base accuracy per input (aligned with `inputs`)
/// and is required for `MRG_ALGORITHM_WEIGHTED`; it may be null otherwise.
///
/// # Safety
/// `inputs` must point to `count` live handles, `options` and `out` must be
/// valid, and `accuracies`, when non-null, must hold `count` values.
#[no_mangle]
pub unsafe extern "C" fn mrg_merge(
    inputs: *const *const MrgAdapter,
    count: usize,
    options: *const MrgMergeOptions,
    accuracies: *const f64,
    out: *mut *mut MrgAdapter,
) -> MrgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let opts = options.as_ref().ok_or_else(|| null("options"))?;
        let handles = slice_arg(inputs, count, "inputs")?;
        let updates = handles
            .iter()
            .map(|&h| h.as_ref().map(|a| &a.inner).ok_or_else(|| null("inputs[i]")))
            .collect::<Result<Vec<&AdapterUpdate>, Fail>>()?;
        let mut spec = spec_from(opts);
        if opts.algorithm == MrgAlgorithm::Weighted {
            let accs = slice_arg(accuracies, count, "accuracies")?;
            if accs.len() != count {
                return Err(null("accuracies"));
            }
            let mut map = BTreeMap::new();
            for (u, &a) in updates.iter().zip(accs) {
                if map.insert(u.task_id.clone(), a).is_some_and(|prev| prev != a) {
                    return Err(Fail(MrgStatus::InvalidArgument, format!("conflicting accuracies for task `{}`", u.task_id)));
                }
            }
            spec.base_accuracies = Some(map);
        }
        let merged = merge(&updates, &spec)?;
        *out = Box::into_raw(Box::new(MrgAdapter::new(merged.into_inner())));
        Ok(())
    })
}

/// `softmax((1 − accᵢ)/τ)` written to `out_weights[0..count]`.
///
/// # Safety
/// `accuracies` and `out_weights` must each hold `count` values.
#[no_mangle]
pub unsafe extern "C" fn mrg_inverse_accuracy_weights(accuracies: *const f64, count: usize, tau: f64, out_weights: *mut f64) -> MrgStatus {
    guard(|| {
        if count == 0 {
            return Err(Fail(MrgStatus::InvalidArgument, "need at least one accuracy".into()));
        }
        let accs = slice_arg(accuracies, count, "accuracies")?;
        if out_weights.is_null() {
            return Err(null("out_weights"));
        }
        // Zero-padded keys keep the map in input order.
        let map: BTreeMap<String, f64> = accs.iter().enumerate().map(|(i, &a)| (format!("{i:020}"), a)).collect();
        let weights = compute_inverse_accuracy_weights(&map, tau)?;
        let out = std::slice::from_raw_parts_mut(out_weights, count);
        for (o, w) in out.iter_mut().zip(weights.values()) {
            *o = *w;
        }
        Ok(())
    })
}

/// Expected number of targets at each score `k/N` under a binomial with
/// success rate `p`; writes `trials + 1` values.
///
/// # Safety
/// `out_expected` must hold `trials + 1` values.
#[no_mangle]
pub unsafe extern "C" fn mrg_binomial_expected(trials: usize, p: f64, pool_size: usize, out_expected: *mut f64) -> MrgStatus {
    guard(|| {
        if out_expected.is_null() {
            return Err(null("out_expected"));
        }
        let e = binomial_expected(trials, p, pool_size)?;
        std::slice::from_raw_parts_mut(out_expected, e.len()).copy_from_slice(&e);
        Ok(())
    })
}

/// Message of the last call on this thread; empty after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn mrg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn mrg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
