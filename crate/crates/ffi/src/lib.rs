//! C ABI over `ficabu-core`.
//!
//! Objects cross the boundary as opaque handles that the caller releases
//! with the matching `*_free`. Every fallible call returns a [`FicabuStatus`];
//! the message of the most recent failure on the calling thread is available
//! through [`ficabu_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ficabu_core::cau::{default_checkpoints, run_unlearning, UnlearnConfig, UnlearnMode, UnlearnOutcome};
use ficabu_core::dampening::{profile_scale, DampeningParams, ProfileParams};
use ficabu_core::error::Error;
use ficabu_core::fisher::{estimate_importance, load_importance_for, save_importance, ImportanceMap, ImportanceSource};
use ficabu_core::metrics::rpr;
use ficabu_core::nn::{evaluate_accuracy, load_model, save_model, LabeledBatch, Model, Precision};
use ficabu_core::pipeline::{speedup_vs_core, IpKind, PipelineConfig};
use ficabu_core::tensor::Tensor;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FicabuStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    BufferTooSmall = 4,
    NotApplicable = 5,
    Panic = 6,
    Dimension = 10,
    EmptyInput = 11,
    CacheMiss = 12,
    LayerOutOfRange = 13,
    DegenerateDepth = 14,
    Config = 15,
    Consistency = 16,
    Format = 17,
    Version = 18,
    Truncated = 19,
    ShapeMismatch = 20,
    NonFinite = 21,
    Missing = 22,
    Io = 23,
    Json = 24,
}

impl From<&Error> for FicabuStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Dimension(_) => FicabuStatus::Dimension,
            Error::EmptyInput(_) => FicabuStatus::EmptyInput,
            Error::CacheMiss { .. } => FicabuStatus::CacheMiss,
            Error::LayerOutOfRange { .. } => FicabuStatus::LayerOutOfRange,
            Error::DegenerateDepth(_) => FicabuStatus::DegenerateDepth,
            Error::Config(_) => FicabuStatus::Config,
            Error::Consistency(_) => FicabuStatus::Consistency,
            Error::Format(_) => FicabuStatus::Format,
            Error::Version { .. } => FicabuStatus::Version,
            Error::Truncated(_) => FicabuStatus::Truncated,
            Error::ShapeMismatch(_) => FicabuStatus::ShapeMismatch,
            Error::NonFinite(_) => FicabuStatus::NonFinite,
            Error::Missing(_) => FicabuStatus::Missing,
            Error::Io(_) => FicabuStatus::Io,
            Error::Json(_) => FicabuStatus::Json,
        }
    }
}

/// Values for [`FicabuUnlearnParams::mode`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FicabuMode {
    SsdFull = 0,
    Cau = 1,
    CauBalanced = 2,
}

/// Values for the `kind` argument of [`ficabu_speedup_vs_core`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FicabuIpKind {
    Fimd = 0,
    Dampening = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FicabuUnlearnParams {
    /// One of the `FicabuMode` values.
    pub mode: u32,
    pub alpha: f32,
    pub lambda: f32,
    pub tau: f64,
    pub b_r: f64,
    /// Profile midpoint; NaN selects the middle layer.
    pub c_m: f64,
    /// Checkpoint layers; NULL selects the default set.
    pub checkpoints: *const usize,
    pub checkpoint_count: usize,
    /// Evaluate checkpoints with INT8 inference.
    pub int8: bool,
}

pub struct FicabuModel(Model);
pub struct FicabuImportance(ImportanceMap);
pub struct FicabuOutcome(UnlearnOutcome);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(FicabuStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(FicabuStatus::from(&e), e.to_string())
    }
}

type Outcome<T> = Result<T, Failure>;

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn guard(f: impl FnOnce() -> Outcome<()>) -> FicabuStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FicabuStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside ficabu".into());
            FicabuStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(FicabuStatus::NullPointer, format!("{what} is NULL"))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Outcome<&'a T> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Outcome<&'a mut T> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> Outcome<PathBuf> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(FicabuStatus::InvalidUtf8, format!("path is not UTF-8: {e}")))?;
    Ok(PathBuf::from(s))
}

unsafe fn batch_arg(model: &Model, inputs: *const f32, labels: *const usize, count: usize) -> Outcome<LabeledBatch> {
    if inputs.is_null() {
        return Err(null("inputs"));
    }
    if labels.is_null() {
        return Err(null("labels"));
    }
    let shape = model.input_shape().to_vec();
    let per: usize = shape.iter().product();
    let data = std::slice::from_raw_parts(inputs, count * per);
    let labels = std::slice::from_raw_parts(labels, count).to_vec();
    let xs = data
        .chunks_exact(per.max(1))
        .take(count)
        .map(|c| Tensor::new(shape.clone(), c.to_vec()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LabeledBatch::new(xs, labels)?)
}

fn into_handle<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ficabu_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (truncated and
/// always NUL-terminated when `capacity > 0`) and returns its full length.
///
/// # Safety
/// `buf` must be NULL or point to `capacity` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ficabu_last_error_message(buf: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_ref().map_or(&[][..], |m| m.as_bytes());
        if !buf.is_null() && capacity > 0 {
            let n = bytes.len().min(capacity - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ficabu_model_load(path: *const c_char, out: *mut *mut FicabuModel) -> FicabuStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = into_handle(FicabuModel(load_model(&path_arg(path)?)?));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ficabu_model_save(model: *const FicabuModel, path: *const c_char) -> FicabuStatus {
    guard(|| Ok(save_model(&deref(model, "model")?.0, &path_arg(path)?)?))
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ficabu_model_free(model: *mut FicabuModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of parameterized layers.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ficabu_model_depth(model: *const FicabuModel, out: *mut usize) -> FicabuStatus {
    guard(|| {
        *out_ptr(out, "out")? = deref(model, "model")?.0.depth();
        Ok(())
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ficabu_model_param_count(model: *const FicabuModel, out: *mut usize) -> FicabuStatus {
    guard(|| {
        *out_ptr(out, "out")? = deref(model, "model")?.0.param_count();
        Ok(())
    })
}

/// Elements per input sample.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ficabu_model_input_len(model: *const FicabuModel, out: *mut usize) -> FicabuStatus {
    guard(|| {
        *out_ptr(out, "out")? = deref(model, "model")?.0.input_shape().iter().product();
        Ok(())
    })
}

/// Top-1 accuracy on `count` samples laid out back to back in `inputs`.
///
/// # Safety
/// `inputs` must hold `count * input_len` floats and `labels` `count` labels.
#[no_mangle]
pub unsafe extern "C" fn ficabu_model_accuracy(
    model: *const FicabuModel,
    inputs: *const f32,
    labels: *const usize,
    count: usize,
    int8: bool,
    out: *mut f64,
) -> FicabuStatus {
    guard(|| {
        let m = &deref(model, "model")?.0;
        let batch = batch_arg(m, inputs, labels, count)?;
        let p = if int8 { Precision::Int8 } else { Precision::F32 };
        *out_ptr(out, "out")? = evaluate_accuracy(m, &batch, p)?;
        Ok(())
    })
}

/// Diagonal Fisher of `model` over the given samples.
///
/// # Safety
/// As for [`ficabu_model_accuracy`]; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ficabu_importance_estimate(
    model: *const FicabuModel,
    inputs: *const f32,
    labels: *const usize,
    count: usize,
    out: *mut *mut FicabuImportance,
) -> FicabuStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let m = &deref(model, "model")?.0;
        let batch = batch_arg(m, inputs, labels, count)?;
        *out = into_handle(FicabuImportance(estimate_importance(m, &batch, ImportanceSource::Global)?));
        Ok(())
    })
}

/// Loads an importance file and checks it against `model`.
///
/// # Safety
/// `path` must be NUL-terminated; other pointers valid.
#[no_mangle]
pub unsafe extern "C" fn ficabu_importance_load(
    path: *const c_char,
    model: *const FicabuModel,
    out: *mut *mut FicabuImportance,
) -> FicabuStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let map = load_importance_for(&path_arg(path)?, &deref(model, "model")?.0)?;
        *out = into_handle(FicabuImportance(map));
        Ok(())
    })
}

/// # Safety
/// `map` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ficabu_importance_save(map: *const FicabuImportance, path: *const c_char) -> FicabuStatus {
    guard(|| Ok(save_importance(&deref(map, "importance")?.0, &path_arg(path)?)?))
}

/// # Safety
/// `map` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ficabu_importance_free(map: *mut FicabuImportance) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Defaults: balanced mode, alpha 10, lambda 1, tau 0.2, b_r 10, middle
/// midpoint, default checkpoints, f32 checks.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ficabu_unlearn_params_default(out: *mut FicabuUnlearnParams) -> FicabuStatus {
    guard(|| {
        *out_ptr(out, "out")? = FicabuUnlearnParams {
            mode: FicabuMode::CauBalanced as u32,
            alpha: 10.0,
            lambda: 1.0,
            tau: 0.2,
            b_r: 10.0,
            c_m: f64::NAN,
            checkpoints: ptr::null(),
            checkpoint_count: 0,
            int8: false,
        };
        Ok(())
    })
}

unsafe fn unlearn_config(p: &FicabuUnlearnParams, depth: usize, n: usize) -> Outcome<UnlearnConfig> {
    let mode = match p.mode {
        0 => UnlearnMode::SsdFull,
        1 => UnlearnMode::Cau,
        2 => UnlearnMode::CauBalanced,
        other => return Err(Failure(FicabuStatus::InvalidArgument, format!("unknown mode {other}"))),
    };
    let checkpoints = if p.checkpoints.is_null() {
        default_checkpoints(depth)
    } else {
        std::slice::from_raw_parts(p.checkpoints, p.checkpoint_count).iter().copied().collect()
    };
    let c_m = if p.c_m.is_nan() { (depth as f64 + 1.0) / 2.0 } else { p.c_m };
    Ok(UnlearnConfig {
        params: DampeningParams::new(p.alpha, p.lambda)?,
        checkpoints,
        tau: p.tau,
        n,
        profile: (mode == UnlearnMode::CauBalanced).then_some(ProfileParams { b_r: p.b_r, c_m, depth }),
        mode,
        precision: if p.int8 { Precision::Int8 } else { Precision::F32 },
        macs: Default::default(),
    })
}

/// Unlearns the given forget samples from a copy of `model`.
///
/// # Safety
/// `inputs`/`labels` as for [`ficabu_model_accuracy`]; handles and `out`
/// must be valid. `params->checkpoints`, when set, must hold
/// `params->checkpoint_count` entries.
#[no_mangle]
pub unsafe extern "C" fn ficabu_unlearn(
    model: *const FicabuModel,
    global: *const FicabuImportance,
    forget_inputs: *const f32,
    forget_labels: *const usize,
    count: usize,
    params: *const FicabuUnlearnParams,
    out: *mut *mut FicabuOutcome,
) -> FicabuStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let m = &deref(model, "model")?.0;
        let g = &deref(global, "global")?.0;
        let batch = batch_arg(m, forget_inputs, forget_labels, count)?;
        let cfg = unlearn_config(deref(params, "params")?, m.depth(), count)?;
        *out = into_handle(FicabuOutcome(run_unlearning(m, &batch, g, &cfg)?));
        Ok(())
    })
}

/// # Safety
/// `outcome` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ficabu_outcome_free(outcome: *mut FicabuOutcome) {
    if !outcome.is_null() {
        drop(Box::from_raw(outcome));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ficabu_outcome_stop_layer(o: *const FicabuOutcome, out: *mut usize) -> FicabuStatus {
    guard(|| {
        *out_ptr(out, "out")? = deref(o, "outcome")?.0.stop_layer;
        Ok(())
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ficabu_outcome_early_stop(o: *const FicabuOutcome, out: *mut bool) -> FicabuStatus {
    guard(|| {
        *out_ptr(out, "out")? = deref(o, "outcome")?.0.early_stop;
        Ok(())
    })
}

/// MAC total as a percentage of a full SSD run.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ficabu_outcome_mac_ratio(o: *const FicabuOutcome, out: *mut f64) -> FicabuStatus {
    guard(|| {
        *out_ptr(out, "out")? = deref(o, "outcome")?.0.ledger.ratio_vs_ssd;
        Ok(())
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ficabu_outcome_total_macs(o: *const FicabuOutcome, out: *mut u64) -> FicabuStatus {
    guard(|| {
        *out_ptr(out, "out")? = deref(o, "outcome")?.0.ledger.total;
        Ok(())
    })
}

/// A new model handle holding the unlearned parameters.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ficabu_outcome_model(o: *const FicabuOutcome, out: *mut *mut FicabuModel) -> FicabuStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = into_handle(FicabuModel(deref(o, "outcome")?.0.model.clone()));
        Ok(())
    })
}

/// Writes the JSON outcome report into `buf`. `needed` receives the report
/// length without the terminator; `FICABU_STATUS_BUFFER_TOO_SMALL` is
/// returned when `capacity <= needed`.
///
/// # Safety
/// `buf` must be NULL or point to `capacity` bytes; `needed` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ficabu_outcome_report_json(
    o: *const FicabuOutcome,
    buf: *mut c_char,
    capacity: usize,
    needed: *mut usize,
) -> FicabuStatus {
    guard(|| {
        let text = serde_json::to_string(&deref(o, "outcome")?.0.to_report()).map_err(Error::from)?;
        *out_ptr(needed, "needed")? = text.len();
        if buf.is_null() || capacity <= text.len() {
            return Err(Failure(
                FicabuStatus::BufferTooSmall,
                format!("report needs {} bytes plus terminator", text.len()),
            ));
        }
        ptr::copy_nonoverlapping(text.as_ptr().cast(), buf, text.len());
        *buf.add(text.len()) = 0;
        Ok(())
    })
}

/// Depth profile scale of layer `l` (1-based, classifier first).
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ficabu_profile_scale(l: usize, b_r: f64, c_m: f64, depth: usize, out: *mut f64) -> FicabuStatus {
    guard(|| {
        *out_ptr(out, "out")? = profile_scale(l, &ProfileParams { b_r, c_m, depth })?;
        Ok(())
    })
}

/// Retain preservation rate in percent; `FICABU_STATUS_NOT_APPLICABLE` when
/// `delta_ssd` is zero.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ficabu_rpr(delta_ssd: f64, delta_ours: f64, out: *mut f64) -> FicabuStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = rpr(delta_ssd, delta_ours)
            .ok_or_else(|| Failure(FicabuStatus::NotApplicable, "rpr undefined for a zero SSD drop".into()))?;
        Ok(())
    })
}

/// Speedup of an IP over the scalar core under the default calibration.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ficabu_speedup_vs_core(elements: u64, kind: u32, out: *mut f64) -> FicabuStatus {
    guard(|| {
        let kind = match kind {
            0 => IpKind::Fimd,
            1 => IpKind::Dampening,
            other => return Err(Failure(FicabuStatus::InvalidArgument, format!("unknown ip kind {other}"))),
        };
        *out_ptr(out, "out")? = speedup_vs_core(elements, &PipelineConfig::default(), kind);
        Ok(())
    })
}
