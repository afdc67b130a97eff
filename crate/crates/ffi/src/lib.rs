//! C ABI over the tnbma model, scoring and fitting API.
//!
//! Every function returns a [`TnbmaStatus`]; on failure the message is available
//! from [`tnbma_last_error`] on the same thread. Models are opaque handles that
//! must be released with [`tnbma_model_free`], strings with [`tnbma_string_free`].
//!
//! # Safety
//!
//! Pointer arguments must be null or valid for the documented length. Handles
//! must come from this library and not be used after being freed.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use tnbma::estimation::{self, EmConfig, TrainingSet, Variant};
use tnbma::scoring;
use tnbma::{BmaModel, Error, GroupSpec, Predictive};

pub const TNBMA_VARIANT_NAIVE: u32 = 0;
pub const TNBMA_VARIANT_MEAN_CORRECTED: u32 = 1;
pub const TNBMA_VARIANT_FULL_ML: u32 = 2;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TnbmaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Io = 4,
    Numerical = 5,
    Panic = 6,
}

/// Opaque fitted model.
pub struct TnbmaModel {
    inner: BmaModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(TnbmaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Parse { .. } => TnbmaStatus::Parse,
            Error::Io { .. } => TnbmaStatus::Io,
            _ if e.is_numerical() => TnbmaStatus::Numerical,
            _ => TnbmaStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(TnbmaStatus::NullPointer, format!("{what} is null"))
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(TnbmaStatus::InvalidArgument, message.into())
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> TnbmaStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => TnbmaStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {message}"));
            TnbmaStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn model_arg<'a>(p: *const TnbmaModel) -> Result<&'a BmaModel, Failure> {
    p.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn give_model(out: *mut *mut TnbmaModel, model: BmaModel) -> Result<(), Failure> {
    write_out(out, Box::into_raw(Box::new(TnbmaModel { inner: model })), "out")
}

unsafe fn predictive(model: *const TnbmaModel, members: *const f64, n_members: usize) -> Result<Predictive, Failure> {
    let model = model_arg(model)?;
    let members = slice_arg(members, n_members, "members")?;
    Ok(model.predictive_from_members(members)?)
}

fn parse_groups(text: &str) -> Result<GroupSpec, Failure> {
    match text {
        "two-group" => Ok(GroupSpec::two_group()),
        "three-group" => Ok(GroupSpec::three_group()),
        other => Ok(GroupSpec::parse(other)?),
    }
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn tnbma_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Load a model from its key-value file.
#[no_mangle]
pub unsafe extern "C" fn tnbma_model_load(path: *const c_char, out: *mut *mut TnbmaModel) -> TnbmaStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let model = BmaModel::load(Path::new(path))?;
        give_model(out, model)
    })
}

/// Parse a model from key-value text.
#[no_mangle]
pub unsafe extern "C" fn tnbma_model_from_string(text: *const c_char, out: *mut *mut TnbmaModel) -> TnbmaStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        let model = BmaModel::from_kv_str(text)?;
        give_model(out, model)
    })
}

/// Serialize a model; free the result with `tnbma_string_free`.
#[no_mangle]
pub unsafe extern "C" fn tnbma_model_to_string(model: *const TnbmaModel, out: *mut *mut c_char) -> TnbmaStatus {
    guard(|| {
        let model = model_arg(model)?;
        let text = CString::new(model.to_kv_string()).map_err(|e| invalid(e.to_string()))?;
        write_out(out, text.into_raw(), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn tnbma_model_free(model: *mut TnbmaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn tnbma_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[no_mangle]
pub unsafe extern "C" fn tnbma_model_member_count(model: *const TnbmaModel, out: *mut usize) -> TnbmaStatus {
    guard(|| {
        let model = model_arg(model)?;
        write_out(out, model.spec().total_members(), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn tnbma_model_group_count(model: *const TnbmaModel, out: *mut usize) -> TnbmaStatus {
    guard(|| {
        let model = model_arg(model)?;
        write_out(out, model.spec().group_count(), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn tnbma_model_sigma(model: *const TnbmaModel, out: *mut f64) -> TnbmaStatus {
    guard(|| {
        let model = model_arg(model)?;
        write_out(out, model.sigma(), "out")
    })
}

/// Per-member weight and location coefficients of group `group`.
#[no_mangle]
pub unsafe extern "C" fn tnbma_model_group_params(
    model: *const TnbmaModel,
    group: usize,
    weight: *mut f64,
    alpha: *mut f64,
    beta: *mut f64,
) -> TnbmaStatus {
    guard(|| {
        let model = model_arg(model)?;
        let p = model
            .params()
            .get(group)
            .ok_or_else(|| invalid(format!("group {group} out of range")))?;
        write_out(weight, p.weight, "weight")?;
        write_out(alpha, p.alpha, "alpha")?;
        write_out(beta, p.beta, "beta")
    })
}

/// Predictive density at `x` given member forecasts in model order.
#[no_mangle]
pub unsafe extern "C" fn tnbma_predictive_pdf(
    model: *const TnbmaModel,
    members: *const f64,
    n_members: usize,
    x: f64,
    out: *mut f64,
) -> TnbmaStatus {
    guard(|| {
        let pred = predictive(model, members, n_members)?;
        write_out(out, pred.pdf(x), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn tnbma_predictive_cdf(
    model: *const TnbmaModel,
    members: *const f64,
    n_members: usize,
    x: f64,
    out: *mut f64,
) -> TnbmaStatus {
    guard(|| {
        let pred = predictive(model, members, n_members)?;
        write_out(out, pred.cdf(x), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn tnbma_predictive_quantile(
    model: *const TnbmaModel,
    members: *const f64,
    n_members: usize,
    p: f64,
    out: *mut f64,
) -> TnbmaStatus {
    guard(|| {
        let pred = predictive(model, members, n_members)?;
        write_out(out, pred.quantile(p)?, "out")
    })
}

/// CRPS of the predictive against observation `x`.
#[no_mangle]
pub unsafe extern "C" fn tnbma_predictive_crps(
    model: *const TnbmaModel,
    members: *const f64,
    n_members: usize,
    x: f64,
    out: *mut f64,
) -> TnbmaStatus {
    guard(|| {
        let pred = predictive(model, members, n_members)?;
        write_out(out, scoring::crps_predictive(&pred, x)?, "out")
    })
}

/// Fit a model by EM.
///
/// `groups` is `two-group`, `three-group` or `id:n,...`. `forecasts` is row-major
/// `n_cases` x `n_members`. `converged` may be null.
#[no_mangle]
pub unsafe extern "C" fn tnbma_fit(
    groups: *const c_char,
    variant: u32,
    forecasts: *const f64,
    observations: *const f64,
    n_cases: usize,
    n_members: usize,
    out: *mut *mut TnbmaModel,
    converged: *mut bool,
) -> TnbmaStatus {
    guard(|| {
        let spec = parse_groups(str_arg(groups, "groups")?)?;
        let variant = match variant {
            TNBMA_VARIANT_NAIVE => Variant::Naive,
            TNBMA_VARIANT_MEAN_CORRECTED => Variant::MeanCorrected,
            TNBMA_VARIANT_FULL_ML => Variant::FullMl,
            other => return Err(invalid(format!("unknown variant {other}"))),
        };
        if n_members != spec.total_members() {
            return Err(invalid(format!(
                "{n_members} members per case, groups describe {}",
                spec.total_members()
            )));
        }
        let len = n_cases
            .checked_mul(n_members)
            .ok_or_else(|| invalid("n_cases * n_members overflows"))?;
        let forecasts = slice_arg(forecasts, len, "forecasts")?.to_vec();
        let observations = slice_arg(observations, n_cases, "observations")?.to_vec();
        let training = TrainingSet::from_matrix(spec, forecasts, observations)?;
        let fit = estimation::fit(&training, &EmConfig::new(variant))?;
        if !converged.is_null() {
            converged.write(fit.diagnostics.converged);
        }
        give_model(out, fit.model)
    })
}
