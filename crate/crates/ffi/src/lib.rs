//! C ABI over `concrete_dropout`.
//!
//! Models are opaque `CdModel` handles created by `cd_model_new` or
//! `cd_model_load` and released with `cd_model_free`. Every fallible call
//! returns a `CdStatus`; on failure `cd_last_error_message` describes the
//! most recent error on the calling thread. Output buffers are owned by the
//! caller. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use concrete_dropout::data::{Dataset, Targets};
use concrete_dropout::layers::{concrete_drop_prob, load_checkpoint, save_checkpoint, Model, ModelConfig};
use concrete_dropout::objective::{ObjectiveConfig, PrecisionMode};
use concrete_dropout::train::{train, TrainConfig};
use concrete_dropout::uncertainty::{decompose, mc_predict};
use concrete_dropout::{Error, ErrorClass, RngStream, Tensor};

/// Status codes returned by every fallible call.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdStatus {
    Ok = 0,
    NullPointer = 1,
    Dimension = 2,
    Argument = 3,
    State = 4,
    Config = 5,
    Data = 6,
    Format = 7,
    Numeric = 8,
    Io = 9,
    Panic = 10,
}

impl From<ErrorClass> for CdStatus {
    fn from(c: ErrorClass) -> Self {
        match c {
            ErrorClass::Dimension => CdStatus::Dimension,
            ErrorClass::Argument => CdStatus::Argument,
            ErrorClass::State => CdStatus::State,
            ErrorClass::Config => CdStatus::Config,
            ErrorClass::Data => CdStatus::Data,
            ErrorClass::Format => CdStatus::Format,
            ErrorClass::Numeric => CdStatus::Numeric,
            ErrorClass::Io => CdStatus::Io,
        }
    }
}

/// Precision handling for `cd_model_train`.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdPrecisionMode {
    Mapem = 0,
    Heteroscedastic = 1,
    Fixed = 2,
}

/// Opaque model handle.
pub struct CdModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let clean = message.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).unwrap_or_default());
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> CdStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_last_error("");
            CdStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_last_error(&format!("null pointer passed for {what}"));
            CdStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_last_error(&e.to_string());
            e.class().into()
        }
        Err(_) => {
            set_last_error("internal panic");
            CdStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &'static str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must point to `len` readable values when non-null.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must point to `len` writable values when non-null.
unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// # Safety
/// `p` must be a valid NUL-terminated string when non-null.
unsafe fn path<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    non_null(p, "path")?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::Argument("path is not valid UTF-8".into()))?;
    Ok(Path::new(s))
}

fn matrix(data: &[f64], rows: usize, cols: usize) -> Result<Tensor, Error> {
    Tensor::new(vec![rows, cols], data.to_vec())
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn cd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Relaxed drop indicator for drop probability `p`, uniform draw `u` and
/// temperature `t`.
///
/// # Safety
/// `out` must be a valid pointer to one `double`.
#[no_mangle]
pub unsafe extern "C" fn cd_concrete_drop_prob(p: f64, u: f64, t: f64, out: *mut f64) -> CdStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = concrete_drop_prob(p, u, t)?;
        Ok(())
    })
}

/// Creates an MLP with `n_hidden` ReLU layers of the given widths, every
/// layer wrapped with Concrete dropout. A nonzero `heteroscedastic` adds a
/// log-variance head.
///
/// # Safety
/// `hidden` must hold `n_hidden` values; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cd_model_new(
    input_dim: usize,
    hidden: *const usize,
    n_hidden: usize,
    output_dim: usize,
    heteroscedastic: i32,
    seed: u64,
    out: *mut *mut CdModel,
) -> CdStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let hidden = slice(hidden, n_hidden, "hidden")?.to_vec();
        let mut cfg = ModelConfig::mlp(input_dim, hidden, output_dim);
        cfg.heteroscedastic = heteroscedastic != 0;
        let model = Model::new(&cfg, &mut RngStream::new(seed))?;
        *out = Box::into_raw(Box::new(CdModel { model }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cd_model_free(model: *mut CdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a valid handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cd_model_dims(model: *const CdModel, input_dim: *mut usize, output_dim: *mut usize) -> CdStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(input_dim, "input_dim")?;
        non_null(output_dim, "output_dim")?;
        *input_dim = (*model).model.input_dim();
        *output_dim = (*model).model.output_dim();
        Ok(())
    })
}

/// Copies per-layer drop probabilities into `out` (capacity `cap`) and
/// stores the layer count in `len`. Fails with an argument error when
/// `cap` is too small, after setting `len`.
///
/// # Safety
/// `model` must be valid, `out` must hold `cap` values, `len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cd_model_dropout_ps(model: *const CdModel, out: *mut f64, cap: usize, len: *mut usize) -> CdStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(len, "len")?;
        let ps = (*model).model.dropout_ps();
        *len = ps.len();
        if cap < ps.len() {
            return Err(Error::Argument(format!("buffer holds {cap} values, {} needed", ps.len())).into());
        }
        slice_mut(out, ps.len(), "out")?.copy_from_slice(&ps);
        Ok(())
    })
}

/// Trains on `n` rows of row-major inputs `x` (`n × input_dim`) and targets
/// `y` (`n × output_dim`). `precision_mode` takes a `CdPrecisionMode`
/// value. `final_loss` may be null.
///
/// # Safety
/// `model` must be valid; `x` and `y` must hold the stated number of values.
#[no_mangle]
pub unsafe extern "C" fn cd_model_train(
    model: *mut CdModel,
    x: *const f64,
    y: *const f64,
    n: usize,
    lengthscale: f64,
    precision_mode: i32,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
    final_loss: *mut f64,
) -> CdStatus {
    guard(|| {
        non_null(model, "model")?;
        let handle = &mut *model;
        let (d_in, d_out) = (handle.model.input_dim(), handle.model.output_dim());
        let x = matrix(slice(x, n * d_in, "x")?, n, d_in)?;
        let y = matrix(slice(y, n * d_out, "y")?, n, d_out)?;
        let mode = match precision_mode {
            m if m == CdPrecisionMode::Mapem as i32 => PrecisionMode::HomoscedasticMapem,
            m if m == CdPrecisionMode::Heteroscedastic as i32 => PrecisionMode::HeteroscedasticHead,
            m if m == CdPrecisionMode::Fixed as i32 => PrecisionMode::Fixed,
            other => return Err(Error::Argument(format!("unknown precision mode {other}")).into()),
        };
        if (mode == PrecisionMode::HeteroscedasticHead) != handle.model.is_heteroscedastic() {
            return Err(Error::Config("precision mode does not match the model's variance head".into()).into());
        }
        let data = Dataset::new(x, Targets::Real(y))?;
        let obj = ObjectiveConfig::regression(n, lengthscale, mode);
        let tc = TrainConfig {
            epochs,
            batch_size,
            learning_rate,
            seed,
            ..TrainConfig::default()
        };
        let (trained, trace) = train(handle.model.clone(), &data, &obj, &tc)?;
        handle.model = trained;
        if !final_loss.is_null() {
            *final_loss = trace.rows.last().map_or(f64::NAN, |r| r.loss);
        }
        Ok(())
    })
}

/// Monte-Carlo prediction with `samples` mask draws. Each output buffer
/// holds `n × output_dim` values: predictive mean, epistemic variance and
/// aleatoric variance. `samples` must be at least 2.
///
/// # Safety
/// `model` must be valid and every buffer must hold the stated number of values.
#[no_mangle]
pub unsafe extern "C" fn cd_model_predict_mc(
    model: *const CdModel,
    x: *const f64,
    n: usize,
    samples: usize,
    seed: u64,
    mean: *mut f64,
    epistemic_var: *mut f64,
    aleatoric_var: *mut f64,
) -> CdStatus {
    guard(|| {
        non_null(model, "model")?;
        let m = &(*model).model;
        let (d_in, d_out) = (m.input_dim(), m.output_dim());
        let x = matrix(slice(x, n * d_in, "x")?, n, d_in)?;
        let d = decompose(&mc_predict(m, &x, samples, &mut RngStream::new(seed))?)?;
        let len = n * d_out;
        slice_mut(mean, len, "mean")?.copy_from_slice(d.mean.data());
        slice_mut(epistemic_var, len, "epistemic_var")?.copy_from_slice(d.epistemic_var.data());
        slice_mut(aleatoric_var, len, "aleatoric_var")?.copy_from_slice(d.aleatoric_var.data());
        Ok(())
    })
}

/// Writes a binary checkpoint.
///
/// # Safety
/// `model` must be valid and `file` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cd_model_save(model: *const CdModel, file: *const c_char) -> CdStatus {
    guard(|| {
        non_null(model, "model")?;
        save_checkpoint(&(*model).model, path(file)?)?;
        Ok(())
    })
}

/// Reads a checkpoint into a new handle.
///
/// # Safety
/// `file` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cd_model_load(file: *const c_char, out: *mut *mut CdModel) -> CdStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let model = load_checkpoint(path(file)?)?;
        *out = Box::into_raw(Box::new(CdModel { model }));
        Ok(())
    })
}
