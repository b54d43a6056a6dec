//! C ABI over the `gemuco` library.
//!
//! Every fallible call returns a [`GemucoStatus`]. On failure the message is
//! kept per thread and read back with [`gemuco_last_error`]. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use gemuco::anomaly::{self, AnomalyModel};
use gemuco::inference::{self, Observation, Strategy};
use gemuco::iteropt::IterConfig;
use gemuco::online::{OnlineConfig, OnlineUpdater};
use gemuco::{Error, GeMuCoModel, MaskVector, ParametricBias, Sample};

/// Result codes shared by every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GemucoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Io = 4,
    Parse = 5,
    NonFinite = 6,
    Infeasible = 7,
    Panic = 8,
}

/// Sizes of a loaded model.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct GemucoDims {
    /// Channels of a raw sample.
    pub data_dim: usize,
    /// Groups of a raw sample.
    pub data_groups: usize,
    /// Groups the input mask ranges over.
    pub in_groups: usize,
    /// Channels of a prediction.
    pub out_dim: usize,
    pub pb_dim: usize,
    pub latent_dim: usize,
}

/// A trained model.
pub struct GemucoModel(GeMuCoModel);

/// An online updater holding its own copy of the model.
pub struct GemucoOnline(OnlineUpdater);

/// A calibrated residual detector.
pub struct GemucoDetector(AnomalyModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(GemucoStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Dimension { .. } | Error::TooFewSamples { .. } => GemucoStatus::Dimension,
            Error::Io(_) => GemucoStatus::Io,
            Error::Json(_) | Error::Csv(_) | Error::Parse(_) | Error::Config(_) => {
                GemucoStatus::Parse
            }
            Error::NonFinite { .. } => GemucoStatus::NonFinite,
            Error::NoFeasiblePath(_)
            | Error::NoFeasibleMasks(_)
            | Error::NoPredictableOutputs(_) => GemucoStatus::Infeasible,
            _ => GemucoStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(GemucoStatus::NullPointer, format!("`{what}` is null"))
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GemucoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GemucoStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            GemucoStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(GemucoStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

fn expect_len(what: &'static str, expected: usize, got: usize) -> Result<(), Failure> {
    if expected != got {
        return Err(Error::Dimension {
            context: what,
            expected,
            got,
        }
        .into());
    }
    Ok(())
}

fn copy_out(dst: &mut [f64], src: &[f64], what: &'static str) -> Result<(), Failure> {
    expect_len(what, src.len(), dst.len())?;
    dst.copy_from_slice(src);
    Ok(())
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// A null `pb` selects the zero bias.
unsafe fn pb_arg(model: &GeMuCoModel, pb: *const f64, pb_len: usize) -> Result<ParametricBias, Failure> {
    if pb.is_null() {
        return Ok(model.zero_pb());
    }
    let v = slice(pb, pb_len, "pb")?;
    expect_len("parametric bias", model.pb_dim, v.len())?;
    Ok(ParametricBias::new(v.to_vec(), "ffi"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gemuco_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gemuco_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn gemuco_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Loads a model file written by the library or the CLI.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gemuco_model_load(
    path: *const c_char,
    out: *mut *mut GemucoModel,
) -> GemucoStatus {
    guard(|| {
        let path = text(path, "path")?;
        store(out, GemucoModel(GeMuCoModel::load(path)?))
    })
}

/// # Safety
/// `json` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gemuco_model_from_json(
    json: *const c_char,
    out: *mut *mut GemucoModel,
) -> GemucoStatus {
    guard(|| {
        let json = text(json, "json")?;
        store(out, GemucoModel(GeMuCoModel::from_json(json)?))
    })
}

/// # Safety
/// `model` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gemuco_model_save(
    model: *const GemucoModel,
    path: *const c_char,
) -> GemucoStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let path = text(path, "path")?;
        m.0.save(path)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gemuco_model_free(model: *mut GemucoModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gemuco_model_dims(
    model: *const GemucoModel,
    out: *mut GemucoDims,
) -> GemucoStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = GemucoDims {
            data_dim: m.data_layout.total_dim(),
            data_groups: m.data_layout.n_groups(),
            in_groups: m.in_layout.n_groups(),
            out_dim: m.out_layout.total_dim(),
            pb_dim: m.pb_dim,
            latent_dim: m.latent_dim,
        };
        Ok(())
    })
}

/// Trained bias of a state; zeros when the state is unknown.
///
/// # Safety
/// `state` must be NUL-terminated and `out` hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gemuco_model_pb(
    model: *const GemucoModel,
    state: *const c_char,
    out: *mut f64,
    out_len: usize,
) -> GemucoStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let state = text(state, "state")?;
        let dst = slice_mut(out, out_len, "out")?;
        copy_out(dst, &m.pb_for(state).values, "parametric bias")
    })
}

/// Raw prediction of the output groups from a raw sample under `mask`, a
/// string such as `"101"` over the input groups.
///
/// # Safety
/// Buffers must hold the stated number of doubles. `pb` may be null.
#[no_mangle]
pub unsafe extern "C" fn gemuco_model_predict(
    model: *const GemucoModel,
    raw: *const f64,
    raw_len: usize,
    mask: *const c_char,
    pb: *const f64,
    pb_len: usize,
    out: *mut f64,
    out_len: usize,
) -> GemucoStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let raw = slice(raw, raw_len, "raw")?;
        expect_len("raw sample", m.data_layout.total_dim(), raw.len())?;
        let mask = MaskVector::parse(text(mask, "mask")?)?;
        expect_len("mask", m.n_in_groups(), mask.len())?;
        let p = pb_arg(m, pb, pb_len)?;
        let y = m.predict_raw(raw, &mask, &p)?;
        copy_out(slice_mut(out, out_len, "out")?, &y, "prediction")
    })
}

/// Fills the unavailable groups of a raw sample. `out` receives the full
/// sample and `strategy` (may be null) 0 for a direct prediction, 1 for
/// latent iteration and 2 for input iteration.
///
/// # Safety
/// `values` and `out` hold `len` doubles, `available` holds `n_groups`
/// flags. `pb` may be null.
#[no_mangle]
pub unsafe extern "C" fn gemuco_estimate(
    model: *const GemucoModel,
    values: *const f64,
    len: usize,
    available: *const bool,
    n_groups: usize,
    pb: *const f64,
    pb_len: usize,
    out: *mut f64,
    strategy: *mut i32,
) -> GemucoStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let values = slice(values, len, "values")?;
        let available = slice(available, n_groups, "available")?;
        let obs = Observation::new(m, values.to_vec(), available.to_vec())?;
        let p = pb_arg(m, pb, pb_len)?;
        let est = inference::estimate(m, &obs, &p, &IterConfig::default())?;
        copy_out(slice_mut(out, len, "out")?, &est.values, "estimate")?;
        if let Some(s) = strategy.as_mut() {
            *s = match est.strategy {
                Strategy::DirectMask => 0,
                Strategy::LatentIterate => 1,
                Strategy::InputIterate => 2,
            };
        }
        Ok(())
    })
}

/// Starts an online updater on a copy of `model`. `config_json` holds the
/// updater settings as JSON (null for defaults) and `pb` the starting bias
/// (null for zeros).
///
/// # Safety
/// `model` must be live, `config_json` null or NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gemuco_online_new(
    model: *const GemucoModel,
    config_json: *const c_char,
    pb: *const f64,
    pb_len: usize,
    out: *mut *mut GemucoOnline,
) -> GemucoStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let cfg: OnlineConfig = if config_json.is_null() {
            OnlineConfig::default()
        } else {
            serde_json::from_str(text(config_json, "config_json")?).map_err(Error::from)?
        };
        let p = pb_arg(m, pb, pb_len)?;
        store(out, GemucoOnline(OnlineUpdater::new(m.clone(), p, cfg)?))
    })
}

/// Streams one sample. `updated` (may be null) is set to whether an update
/// round ran.
///
/// # Safety
/// `values` holds `len` doubles and `available` holds `n_groups` flags.
#[no_mangle]
pub unsafe extern "C" fn gemuco_online_observe(
    online: *mut GemucoOnline,
    values: *const f64,
    len: usize,
    available: *const bool,
    n_groups: usize,
    updated: *mut bool,
) -> GemucoStatus {
    guard(|| {
        let u = &mut online.as_mut().ok_or_else(|| null("online"))?.0;
        let values = slice(values, len, "values")?;
        let available = slice(available, n_groups, "available")?;
        let groups = u.snapshot().data_layout.n_groups();
        expect_len("sample availability", groups, available.len())?;
        let ran = u.observe(Sample::new("ffi", values.to_vec(), available.to_vec()))?;
        if let Some(flag) = updated.as_mut() {
            *flag = ran;
        }
        Ok(())
    })
}

/// # Safety
/// `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gemuco_online_pb(
    online: *const GemucoOnline,
    out: *mut f64,
    out_len: usize,
) -> GemucoStatus {
    guard(|| {
        let u = &handle(online, "online")?.0;
        copy_out(slice_mut(out, out_len, "out")?, &u.pb().values, "parametric bias")
    })
}

/// Copy of the current weights as a new model handle.
///
/// # Safety
/// `online` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gemuco_online_model(
    online: *const GemucoOnline,
    out: *mut *mut GemucoModel,
) -> GemucoStatus {
    guard(|| {
        let u = &handle(online, "online")?.0;
        store(out, GemucoModel((*u.snapshot()).clone()))
    })
}

/// # Safety
/// `online` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gemuco_online_free(online: *mut GemucoOnline) {
    if !online.is_null() {
        drop(Box::from_raw(online));
    }
}

/// Fits a detector on `rows` residuals of width `dim`, stored row-major.
///
/// # Safety
/// `residuals` must hold `rows * dim` doubles and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn gemuco_detector_calibrate(
    residuals: *const f64,
    rows: usize,
    dim: usize,
    out: *mut *mut GemucoDetector,
) -> GemucoStatus {
    guard(|| {
        let n = rows
            .checked_mul(dim)
            .ok_or_else(|| Failure(GemucoStatus::InvalidArgument, "rows * dim overflows".into()))?;
        let data = slice(residuals, n, "residuals")?;
        let rows: Vec<Vec<f64>> = if dim == 0 {
            Vec::new()
        } else {
            data.chunks(dim).map(<[f64]>::to_vec).collect()
        };
        store(out, GemucoDetector(anomaly::calibrate(&rows)?))
    })
}

/// Mahalanobis score of one residual and whether it exceeds the threshold.
///
/// # Safety
/// `residual` holds `dim` doubles; `score` and `anomalous` may be null.
#[no_mangle]
pub unsafe extern "C" fn gemuco_detector_score(
    detector: *const GemucoDetector,
    residual: *const f64,
    dim: usize,
    score: *mut f64,
    anomalous: *mut bool,
) -> GemucoStatus {
    guard(|| {
        let d = &handle(detector, "detector")?.0;
        let e = slice(residual, dim, "residual")?;
        let s = d.score(e)?;
        if let Some(out) = score.as_mut() {
            *out = s;
        }
        if let Some(out) = anomalous.as_mut() {
            *out = d.is_anomalous(s);
        }
        Ok(())
    })
}

/// # Safety
/// `detector` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gemuco_detector_threshold(detector: *const GemucoDetector) -> f64 {
    detector.as_ref().map_or(f64::NAN, |d| d.0.threshold)
}

/// # Safety
/// `detector` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gemuco_detector_free(detector: *mut GemucoDetector) {
    if !detector.is_null() {
        drop(Box::from_raw(detector));
    }
}
