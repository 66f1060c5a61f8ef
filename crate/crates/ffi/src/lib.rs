//! C ABI over the flowmimic library.
//!
//! Every fallible call returns an [`FmStatus`]. On failure the message is
//! kept per thread and read with [`fm_last_error`]. Objects cross the
//! boundary as opaque handles that the caller releases with the matching
//! `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use flowmimic::detectors::Detector;
use flowmimic::pipeline::{run_stage, AblationMode, ExperimentConfig, Run, Stage};
use flowmimic::traffic::{flow_rate, kl_from_probabilities, load_flows, synth_malicious, Flow, MaliciousKind};
use flowmimic::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Parse = 5,
    BudgetExhausted = 6,
    Internal = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FmAttack {
    BurstFlood = 0,
    Beacon = 1,
}

/// A list of flows.
pub struct FmFlowSet {
    flows: Vec<Flow>,
}

/// A trained detector loaded from a run directory.
pub struct FmDetector {
    inner: Detector,
}

/// A configured experiment run bound to its directory.
pub struct FmRun {
    inner: Run,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> FmStatus {
    match e.root() {
        Error::Config(_) => FmStatus::Config,
        Error::Io(_) => FmStatus::Io,
        Error::Parse { .. } | Error::NonMonotone { .. } | Error::Json(_) | Error::Csv(_) => FmStatus::Parse,
        Error::BudgetExhausted { .. } => FmStatus::BudgetExhausted,
        Error::Invalid(_) | Error::Shape(_) => FmStatus::InvalidArgument,
        _ => FmStatus::Internal,
    }
}

/// Runs `f`, records any error or panic and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), (FmStatus, String)>) -> FmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FmStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside flowmimic".into());
            FmStatus::Panic
        }
    }
}

fn lib(e: Error) -> (FmStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (FmStatus, String) {
    (FmStatus::NullPointer, format!("{what} is NULL"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (FmStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (FmStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (FmStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn fm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---- flows --------------------------------------------------------------

/// Loads flows from a CSV file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fm_flows_load_csv(path: *const c_char, out: *mut *mut FmFlowSet) -> FmStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        let out = out_ptr(out, "out")?;
        let flows = load_flows(&PathBuf::from(path)).map_err(lib)?;
        *out = Box::into_raw(Box::new(FmFlowSet { flows }));
        Ok(())
    })
}

/// Generates `count` synthetic malicious flows.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fm_flows_synth(kind: FmAttack, count: usize, seed: u64, out: *mut *mut FmFlowSet) -> FmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let kind = match kind {
            FmAttack::BurstFlood => MaliciousKind::BurstFlood,
            FmAttack::Beacon => MaliciousKind::Beacon,
        };
        *out = Box::into_raw(Box::new(FmFlowSet {
            flows: synth_malicious(count, seed, kind),
        }));
        Ok(())
    })
}

/// Number of flows in the set; 0 for NULL.
///
/// # Safety
/// `set` must be NULL or a handle from this library.
#[no_mangle]
pub unsafe extern "C" fn fm_flows_len(set: *const FmFlowSet) -> usize {
    set.as_ref().map_or(0, |s| s.flows.len())
}

/// Mean rate of flow `index` in Mbps.
///
/// # Safety
/// `set` must be a handle from this library and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fm_flow_rate(set: *const FmFlowSet, index: usize, out: *mut f64) -> FmStatus {
    guard(|| {
        let set = set.as_ref().ok_or_else(|| null("set"))?;
        let out = out_ptr(out, "out")?;
        let f = set
            .flows
            .get(index)
            .ok_or_else(|| (FmStatus::InvalidArgument, format!("index {index} out of range")))?;
        *out = flow_rate(f);
        Ok(())
    })
}

/// # Safety
/// `set` must be NULL or a handle from this library not freed before.
#[no_mangle]
pub unsafe extern "C" fn fm_flows_free(set: *mut FmFlowSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

// ---- detectors ----------------------------------------------------------

/// Loads a detector saved by the `train-detector` stage.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fm_detector_load(dir: *const c_char, out: *mut *mut FmDetector) -> FmStatus {
    guard(|| {
        let dir = c_str(dir, "dir")?;
        let out = out_ptr(out, "out")?;
        let inner = Detector::load(&PathBuf::from(dir)).map_err(lib)?;
        *out = Box::into_raw(Box::new(FmDetector { inner }));
        Ok(())
    })
}

/// Writes 1 to `flagged` when the detector flags flow `index`, else 0.
///
/// # Safety
/// Handles must come from this library and `flagged` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fm_detector_flags(
    det: *const FmDetector,
    set: *const FmFlowSet,
    index: usize,
    flagged: *mut i32,
) -> FmStatus {
    guard(|| {
        let det = det.as_ref().ok_or_else(|| null("det"))?;
        let set = set.as_ref().ok_or_else(|| null("set"))?;
        let flagged = out_ptr(flagged, "flagged")?;
        let f = set
            .flows
            .get(index)
            .ok_or_else(|| (FmStatus::InvalidArgument, format!("index {index} out of range")))?;
        *flagged = i32::from(det.inner.flags(f));
        Ok(())
    })
}

/// # Safety
/// `det` must be NULL or a handle from this library not freed before.
#[no_mangle]
pub unsafe extern "C" fn fm_detector_free(det: *mut FmDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}

// ---- metrics ------------------------------------------------------------

/// KL divergence between two probability vectors of length `len`, with
/// `eps` added to each bin of `q`.
///
/// # Safety
/// `p` and `q` must point to `len` doubles and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fm_kl_divergence(p: *const f64, q: *const f64, len: usize, eps: f64, out: *mut f64) -> FmStatus {
    guard(|| {
        if p.is_null() || q.is_null() {
            return Err(null("p or q"));
        }
        let out = out_ptr(out, "out")?;
        let p = std::slice::from_raw_parts(p, len);
        let q = std::slice::from_raw_parts(q, len);
        *out = kl_from_probabilities(p, q, eps).map_err(lib)?;
        Ok(())
    })
}

// ---- runs ---------------------------------------------------------------

/// Resolves a configuration (JSON text, or NULL for the desk defaults) and
/// opens its run directory. A non-NULL `out_dir` overrides `out`.
///
/// # Safety
/// String arguments must be NULL or NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fm_run_open(config_json: *const c_char, out_dir: *const c_char, out: *mut *mut FmRun) -> FmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let mut cfg = if config_json.is_null() {
            ExperimentConfig::resolve(None, None, None)
        } else {
            ExperimentConfig::from_json_str(c_str(config_json, "config_json")?, None, None)
        }
        .map_err(lib)?;
        if !out_dir.is_null() {
            cfg.out = PathBuf::from(c_str(out_dir, "out_dir")?);
        }
        let inner = Run::open(cfg).map_err(lib)?;
        *out = Box::into_raw(Box::new(FmRun { inner }));
        Ok(())
    })
}

/// Runs one stage by its command-line name, e.g. `"gen-data"` or
/// `"pipeline"`. `"ablate"` runs every ablation arm.
///
/// # Safety
/// `run` must be a handle from this library and `stage` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fm_run_stage(run: *mut FmRun, stage: *const c_char) -> FmStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        let name = c_str(stage, "stage")?;
        if name == "pipeline" {
            return run.inner.pipeline().map(drop).map_err(lib);
        }
        let stage = [
            Stage::GenData,
            Stage::BuildVocab,
            Stage::Pretrain,
            Stage::TrainDetector,
            Stage::AttackTrain,
            Stage::AttackInfer,
            Stage::Eval,
            Stage::Ablate,
            Stage::Sweep,
        ]
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| (FmStatus::InvalidArgument, format!("unknown stage `{name}`")))?;
        run_stage(&run.inner, stage, &AblationMode::ALL).map_err(lib)
    })
}

/// # Safety
/// `run` must be NULL or a handle from this library not freed before.
#[no_mangle]
pub unsafe extern "C" fn fm_run_free(run: *mut FmRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}
