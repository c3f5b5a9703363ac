//! C ABI over `unbalance_lab`.
//!
//! Conventions:
//! - every fallible function returns a [`UlStatus`]; on failure a message
//!   is available from [`ul_last_error`] on the same thread;
//! - datasets and models are opaque handles created by `ul_*` functions and
//!   released with [`ul_dataset_free`] / [`ul_model_free`];
//! - configs cross the boundary as JSON strings using the same schema as
//!   the command-line tool;
//! - feature matrices are row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ndarray::{Array1, ArrayView2};
use unbalance_lab::eval::{self, GroupReport};
use unbalance_lab::losses::LossSpec;
use unbalance_lab::net::LayerSpec;
use unbalance_lab::synthdata::{self, SynthConfig};
use unbalance_lab::train::{self, BrnnSpec, LfoConfig, Model, TrainConfig};
use unbalance_lab::{model_io, Dataset, Error, Mode};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    NonFinite = 4,
    Degenerate = 5,
    MissingColumn = 6,
    Io = 7,
    Parse = 8,
    InsufficientData = 9,
    Panic = 99,
}

/// Opaque dataset handle.
pub struct UlDataset {
    inner: Dataset,
}

/// Opaque trained-model handle.
pub struct UlModel {
    inner: Model,
}

/// Group metrics; gaps are NaN when the set carries no confounder.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct UlGroupReport {
    /// 0 for class imbalance (accuracy), 1 for confounded data (AUC).
    pub mode: u32,
    pub underg_metric: f64,
    pub overg_metric: f64,
    pub fpr_gap: f64,
    pub fnr_gap: f64,
    pub n_underg: usize,
    pub n_overg: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> UlStatus {
    match e {
        Error::ShapeMismatch { .. } => UlStatus::ShapeMismatch,
        Error::NonFinite(_) => UlStatus::NonFinite,
        Error::InvalidConfig(_) | Error::Refused { .. } => UlStatus::InvalidArgument,
        Error::Degenerate(_) | Error::EmptyGroup(_) | Error::IncompleteSweep(_) => UlStatus::Degenerate,
        Error::MissingColumn(_) => UlStatus::MissingColumn,
        Error::Parse { .. } | Error::Csv(_) | Error::Json(_) => UlStatus::Parse,
        Error::InsufficientData { .. } => UlStatus::InsufficientData,
        Error::Io(_) => UlStatus::Io,
        Error::Cell { source, .. } => status_of(source),
    }
}

/// Failure inside the wrapper itself, before reaching the library.
struct Fail(UlStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> UlStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UlStatus::Ok,
        Ok(Err(Fail(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            UlStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(UlStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(UlStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

fn json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, Fail> {
    serde_json::from_str(text).map_err(|e| Fail(UlStatus::Parse, e.to_string()))
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next `ul_*` call on the same thread.
#[no_mangle]
pub extern "C" fn ul_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn ul_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Per-example loss and its derivative with respect to `p`.
/// `spec_json` is a loss spec such as `{"kind":"fbi","K":4,"xi":1}`; the
/// batch-level `peo` kind is rejected.
///
/// # Safety
/// Pointers must be valid; `spec_json` nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn ul_loss(
    spec_json: *const c_char,
    y: u8,
    d: u8,
    p: f64,
    out_loss: *mut f64,
    out_dloss_dp: *mut f64,
) -> UlStatus {
    guard(|| {
        let spec: LossSpec = json(str_arg(spec_json, "spec_json")?)?;
        spec.validate()?;
        if y > 1 || d > 1 {
            return Err(Fail(UlStatus::InvalidArgument, "y and d must be 0 or 1".into()));
        }
        let g = spec
            .per_example(y, d, p)
            .ok_or_else(|| Fail(UlStatus::InvalidArgument, "peo is a batch loss".into()))?;
        *out_arg(out_loss, "out_loss")? = g.loss;
        *out_arg(out_dloss_dp, "out_dloss_dp")? = g.dloss_dp;
        Ok(())
    })
}

/// Rank AUC with half credit for ties.
///
/// # Safety
/// `y` and `p` must point to `n` elements.
#[no_mangle]
pub unsafe extern "C" fn ul_auc(y: *const u8, p: *const f64, n: usize, out: *mut f64) -> UlStatus {
    guard(|| {
        let y = slice_arg(y, n, "y")?;
        let p = Array1::from(slice_arg(p, n, "p")?.to_vec());
        *out_arg(out, "out")? = eval::auc_group(y, p.view())?;
        Ok(())
    })
}

/// Synthetic training set from a config JSON (same fields as the CLI).
///
/// # Safety
/// `config_json` nul-terminated; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ul_generate_train(config_json: *const c_char, out: *mut *mut UlDataset) -> UlStatus {
    guard(|| {
        let config: SynthConfig = json(str_arg(config_json, "config_json")?)?;
        let ds = synthdata::generate_train(&config)?;
        *out_arg(out, "out")? = Box::into_raw(Box::new(UlDataset { inner: ds }));
        Ok(())
    })
}

/// Balanced validation set for the same config.
///
/// # Safety
/// As [`ul_generate_train`].
#[no_mangle]
pub unsafe extern "C" fn ul_generate_validation(
    config_json: *const c_char,
    n_val: usize,
    out: *mut *mut UlDataset,
) -> UlStatus {
    guard(|| {
        let config: SynthConfig = json(str_arg(config_json, "config_json")?)?;
        let ds = synthdata::generate_validation(&config, n_val)?;
        *out_arg(out, "out")? = Box::into_raw(Box::new(UlDataset { inner: ds }));
        Ok(())
    })
}

/// Dataset from caller buffers. `z` may be null (class imbalance, with
/// `minority` flagged as under-represented); otherwise `minority` is ignored.
///
/// # Safety
/// `features` holds `n_rows * n_cols` values; `y` and non-null `z` hold
/// `n_rows`.
#[no_mangle]
pub unsafe extern "C" fn ul_dataset_from_arrays(
    features: *const f64,
    n_rows: usize,
    n_cols: usize,
    y: *const u8,
    z: *const u8,
    minority: u8,
    out: *mut *mut UlDataset,
) -> UlStatus {
    guard(|| {
        let len = n_rows
            .checked_mul(n_cols)
            .ok_or_else(|| Fail(UlStatus::InvalidArgument, "matrix size overflows".into()))?;
        let x = ArrayView2::from_shape((n_rows, n_cols), slice_arg(features, len, "features")?)
            .map_err(|e| Fail(UlStatus::ShapeMismatch, e.to_string()))?
            .to_owned();
        let y = slice_arg(y, n_rows, "y")?.to_vec();
        let ds = if z.is_null() {
            Dataset::ci(x, y, minority)?
        } else {
            Dataset::cbuc(x, y, slice_arg(z, n_rows, "z")?.to_vec())?
        };
        *out_arg(out, "out")? = Box::into_raw(Box::new(UlDataset { inner: ds }));
        Ok(())
    })
}

/// # Safety
/// `path` nul-terminated; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ul_dataset_load_csv(path: *const c_char, out: *mut *mut UlDataset) -> UlStatus {
    guard(|| {
        let ds = Dataset::load_csv(str_arg(path, "path")?)?;
        *out_arg(out, "out")? = Box::into_raw(Box::new(UlDataset { inner: ds }));
        Ok(())
    })
}

/// # Safety
/// `ds` from this library; `path` nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn ul_dataset_save_csv(ds: *const UlDataset, path: *const c_char) -> UlStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        ds.inner.save_csv(str_arg(path, "path")?)?;
        Ok(())
    })
}

/// Row count; 0 for a null handle.
///
/// # Safety
/// `ds` null or from this library.
#[no_mangle]
pub unsafe extern "C" fn ul_dataset_len(ds: *const UlDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.len())
}

/// Feature count; 0 for a null handle.
///
/// # Safety
/// `ds` null or from this library.
#[no_mangle]
pub unsafe extern "C" fn ul_dataset_n_features(ds: *const UlDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.n_features())
}

/// Count of rows with `d == flag`; 0 for a null handle.
///
/// # Safety
/// `ds` null or from this library.
#[no_mangle]
pub unsafe extern "C" fn ul_dataset_count_d(ds: *const UlDataset, flag: u8) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.count_d(flag))
}

/// # Safety
/// `ds` null or from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ul_dataset_free(ds: *mut UlDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Trains a plain classifier. `config_json` is a training config, e.g.
/// `{"epochs":30,"batch_size":128,"seed":1,"loss":{"kind":"h_star"}}`.
/// `hidden` may be null when `n_hidden` is 0.
///
/// # Safety
/// Pointers valid; `hidden` holds `n_hidden` widths.
#[no_mangle]
pub unsafe extern "C" fn ul_train(
    ds: *const UlDataset,
    hidden: *const usize,
    n_hidden: usize,
    config_json: *const c_char,
    out: *mut *mut UlModel,
) -> UlStatus {
    guard(|| {
        let ds = &ds.as_ref().ok_or_else(|| null("ds"))?.inner;
        let hidden = slice_arg(hidden, n_hidden, "hidden")?;
        let config: TrainConfig = json(str_arg(config_json, "config_json")?)?;
        let spec = LayerSpec::classifier(ds.n_features(), hidden);
        let (params, _) = train::train_standard(&spec, ds, &config, None)?;
        *out_arg(out, "out")? = Box::into_raw(Box::new(UlModel {
            inner: Model::Classifier(params),
        }));
        Ok(())
    })
}

/// Lagrangian fairness training. `lfo_json` holds `lr_model`, `lr_lambda`,
/// `epsilon` and optionally `lambda_init`; the final multiplier is written
/// to `out_lambda` when non-null.
///
/// # Safety
/// As [`ul_train`].
#[no_mangle]
pub unsafe extern "C" fn ul_train_lfo(
    ds: *const UlDataset,
    hidden: *const usize,
    n_hidden: usize,
    config_json: *const c_char,
    lfo_json: *const c_char,
    out: *mut *mut UlModel,
    out_lambda: *mut f64,
) -> UlStatus {
    guard(|| {
        let ds = &ds.as_ref().ok_or_else(|| null("ds"))?.inner;
        let hidden = slice_arg(hidden, n_hidden, "hidden")?;
        let config: TrainConfig = json(str_arg(config_json, "config_json")?)?;
        let lfo: LfoConfig = json(str_arg(lfo_json, "lfo_json")?)?;
        let spec = LayerSpec::classifier(ds.n_features(), hidden);
        let outcome = train::train_lfo(&spec, ds, &config, &lfo, None)?;
        if let Some(l) = out_lambda.as_mut() {
            *l = outcome.lambda;
        }
        *out_arg(out, "out")? = Box::into_raw(Box::new(UlModel {
            inner: Model::Classifier(outcome.params),
        }));
        Ok(())
    })
}

/// Adversarial BR-NN training. The last entry of `hidden` is the trunk's
/// feature width; heads are single layers.
///
/// # Safety
/// As [`ul_train`]; `n_hidden` must be at least 1.
#[no_mangle]
pub unsafe extern "C" fn ul_train_brnn(
    ds: *const UlDataset,
    hidden: *const usize,
    n_hidden: usize,
    delta: f64,
    config_json: *const c_char,
    out: *mut *mut UlModel,
) -> UlStatus {
    guard(|| {
        let ds = &ds.as_ref().ok_or_else(|| null("ds"))?.inner;
        let hidden = slice_arg(hidden, n_hidden, "hidden")?;
        let (features, trunk) = hidden
            .split_last()
            .ok_or_else(|| Fail(UlStatus::InvalidArgument, "brnn needs at least one width".into()))?;
        let config: TrainConfig = json(str_arg(config_json, "config_json")?)?;
        let spec = BrnnSpec::new(ds.n_features(), trunk, *features, delta);
        let (model, _) = train::train_brnn(&spec, ds, &config, None)?;
        *out_arg(out, "out")? = Box::into_raw(Box::new(UlModel {
            inner: Model::Brnn(model),
        }));
        Ok(())
    })
}

/// Probabilities for `n_rows` rows; `out_p` receives `n_rows` values.
///
/// # Safety
/// `features` holds `n_rows * n_cols` values, `out_p` room for `n_rows`.
#[no_mangle]
pub unsafe extern "C" fn ul_model_predict(
    model: *const UlModel,
    features: *const f64,
    n_rows: usize,
    n_cols: usize,
    out_p: *mut f64,
) -> UlStatus {
    guard(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        let len = n_rows
            .checked_mul(n_cols)
            .ok_or_else(|| Fail(UlStatus::InvalidArgument, "matrix size overflows".into()))?;
        let x = ArrayView2::from_shape((n_rows, n_cols), slice_arg(features, len, "features")?)
            .map_err(|e| Fail(UlStatus::ShapeMismatch, e.to_string()))?;
        let p = model.predict(x)?;
        if n_rows > 0 {
            if out_p.is_null() {
                return Err(null("out_p"));
            }
            std::slice::from_raw_parts_mut(out_p, n_rows).copy_from_slice(p.as_slice().expect("contiguous"));
        }
        Ok(())
    })
}

/// Group metrics of `model` on `ds` at `threshold`.
///
/// # Safety
/// Handles from this library; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ul_evaluate(
    model: *const UlModel,
    ds: *const UlDataset,
    threshold: f64,
    out: *mut UlGroupReport,
) -> UlStatus {
    guard(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        let ds = &ds.as_ref().ok_or_else(|| null("ds"))?.inner;
        let p = model.predict(ds.view())?;
        let r: GroupReport = eval::evaluate(ds, p.view(), threshold)?;
        *out_arg(out, "out")? = UlGroupReport {
            mode: match r.mode {
                Mode::Ci => 0,
                Mode::Cbuc => 1,
            },
            underg_metric: r.underg_metric,
            overg_metric: r.overg_metric,
            fpr_gap: r.fpr_gap.unwrap_or(f64::NAN),
            fnr_gap: r.fnr_gap.unwrap_or(f64::NAN),
            n_underg: r.n_underg,
            n_overg: r.n_overg,
        };
        Ok(())
    })
}

/// # Safety
/// `model` from this library; `path` nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn ul_model_save(model: *const UlModel, path: *const c_char) -> UlStatus {
    guard(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        model_io::save(model, str_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `path` nul-terminated; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ul_model_load(path: *const c_char, out: *mut *mut UlModel) -> UlStatus {
    guard(|| {
        let model = model_io::load(str_arg(path, "path")?)?;
        *out_arg(out, "out")? = Box::into_raw(Box::new(UlModel { inner: model }));
        Ok(())
    })
}

/// Input width of the model; 0 for a null handle.
///
/// # Safety
/// `model` null or from this library.
#[no_mangle]
pub unsafe extern "C" fn ul_model_input_width(model: *const UlModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.input_width())
}

/// # Safety
/// `model` null or from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ul_model_free(model: *mut UlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
