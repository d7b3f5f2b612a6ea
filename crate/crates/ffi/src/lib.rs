//! C ABI over the geosae library.
//!
//! Conventions: every fallible function returns a [`GeosaeStatus`]; outputs
//! are written through pointers only on success. Objects are opaque handles
//! created by `*_new`/`*_fit` and released with the matching `*_free`. The
//! message of the last failure on the calling thread is available from
//! [`geosae_last_error`]. Matrices are dense row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use geosae::geo::Point;
use geosae::kriging;
use geosae::sfh::{self, RandomEffect, SfhFit};
use geosae::variogram::VariogramModel;
use geosae::Error;
use nalgebra::{DMatrix, DVector};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeosaeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Singular = 3,
    Optimization = 4,
    Numerical = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeosaeFamily {
    Matern = 0,
    Exponential = 1,
    Spherical = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeosaeRandomEffect {
    Independent = 0,
    Sar = 1,
}

/// Opaque variogram model.
pub struct GeosaeVariogram(VariogramModel);

/// Opaque fitted area-level model.
pub struct GeosaeSfhFit(SfhFit);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> GeosaeStatus {
    match e {
        Error::Singular(_) | Error::Collinear(_) | Error::NotPositiveDefinite(_) => GeosaeStatus::Singular,
        Error::Optimization { .. } => GeosaeStatus::Optimization,
        Error::Simulation(_) | Error::Bootstrap(_) => GeosaeStatus::Numerical,
        _ => GeosaeStatus::InvalidInput,
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (GeosaeStatus, String)>) -> GeosaeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GeosaeStatus::Ok,
        Ok(Err((s, m))) => {
            set_error(&m);
            s
        }
        Err(_) => {
            set_error("internal panic");
            GeosaeStatus::Panic
        }
    }
}

fn lib(e: Error) -> (GeosaeStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(name: &str) -> (GeosaeStatus, String) {
    (GeosaeStatus::NullPointer, format!("`{name}` is null"))
}

unsafe fn slice_in<'a>(p: *const f64, n: usize, name: &str) -> Result<&'a [f64], (GeosaeStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn write<T>(p: *mut T, v: T, name: &str) -> Result<(), (GeosaeStatus, String)> {
    if p.is_null() {
        return Err(null(name));
    }
    p.write(v);
    Ok(())
}

/// Message of the last failed call on this thread (empty if none). The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn geosae_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn geosae_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a variogram model. `smoothness` is ignored for non-Matérn families.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn geosae_variogram_new(
    family: GeosaeFamily,
    nugget: f64,
    partial_sill: f64,
    range: f64,
    smoothness: f64,
    out: *mut *mut GeosaeVariogram,
) -> GeosaeStatus {
    guard(|| {
        let model = match family {
            GeosaeFamily::Matern => VariogramModel::matern(nugget, partial_sill, range, smoothness),
            GeosaeFamily::Exponential => VariogramModel::exponential(nugget, partial_sill, range),
            GeosaeFamily::Spherical => VariogramModel::spherical(nugget, partial_sill, range),
        };
        model.validate().map_err(lib)?;
        write(out, Box::into_raw(Box::new(GeosaeVariogram(model))), "out")
    })
}

/// # Safety
/// `handle` must come from [`geosae_variogram_new`] (or be null).
#[no_mangle]
pub unsafe extern "C" fn geosae_variogram_free(handle: *mut GeosaeVariogram) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Semivariance at lag `h`.
///
/// # Safety
/// `handle` must be a live variogram handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn geosae_variogram_gamma(handle: *const GeosaeVariogram, h: f64, out: *mut f64) -> GeosaeStatus {
    guard(|| {
        let v = handle.as_ref().ok_or_else(|| null("handle"))?;
        if !(h >= 0.0) {
            return Err((GeosaeStatus::InvalidInput, format!("lag must be >= 0, got {h}")));
        }
        write(out, v.0.gamma(h), "out")
    })
}

/// Local ordinary kriging at `(tx, ty)` from the `q` nearest of `n` data.
///
/// # Safety
/// `xs`, `ys` and `values` must point to `n` readable doubles; `prediction`
/// and `variance` must be writable.
#[no_mangle]
pub unsafe extern "C" fn geosae_point_krige(
    model: *const GeosaeVariogram,
    xs: *const f64,
    ys: *const f64,
    values: *const f64,
    n: usize,
    tx: f64,
    ty: f64,
    q: usize,
    prediction: *mut f64,
    variance: *mut f64,
) -> GeosaeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let (xs, ys, vs) = (slice_in(xs, n, "xs")?, slice_in(ys, n, "ys")?, slice_in(values, n, "values")?);
        let pts: Vec<Point> = xs.iter().zip(ys).map(|(x, y)| Point::new(*x, *y)).collect();
        let p = kriging::point_krige(Point::new(tx, ty), &pts, vs, &m.0, q).map_err(lib)?;
        write(prediction, p.prediction, "prediction")?;
        write(variance, p.variance, "variance")
    })
}

/// REML fit of the area-level model. `x` is `m x k` row-major; `w` is the
/// `m x m` row-major spatial weight matrix, required for SAR effects and
/// ignored otherwise. Coefficient names are `x0, x1, ...`.
///
/// # Safety
/// Array arguments must point to the stated number of readable doubles and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn geosae_sfh_fit(
    y: *const f64,
    x: *const f64,
    v_eps: *const f64,
    m: usize,
    k: usize,
    w: *const f64,
    effect: GeosaeRandomEffect,
    out: *mut *mut GeosaeSfhFit,
) -> GeosaeStatus {
    guard(|| {
        let y = DVector::from_column_slice(slice_in(y, m, "y")?);
        let x = DMatrix::from_row_slice(m, k, slice_in(x, m * k, "x")?);
        let v = DVector::from_column_slice(slice_in(v_eps, m, "v_eps")?);
        let effect = match effect {
            GeosaeRandomEffect::Independent => RandomEffect::Independent,
            GeosaeRandomEffect::Sar => RandomEffect::Sar,
        };
        let w = match effect {
            RandomEffect::Sar => Some(DMatrix::from_row_slice(m, m, slice_in(w, m * m, "w")?)),
            RandomEffect::Independent => None,
        };
        let names: Vec<String> = (0..k).map(|j| format!("x{j}")).collect();
        let fit = sfh::reml_fit(&y, &x, &v, w.as_ref(), &names, effect).map_err(lib)?;
        write(out, Box::into_raw(Box::new(GeosaeSfhFit(fit))), "out")
    })
}

/// # Safety
/// `handle` must come from [`geosae_sfh_fit`] (or be null).
#[no_mangle]
pub unsafe extern "C" fn geosae_sfh_free(handle: *mut GeosaeSfhFit) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Scalar results: variance component, autoregression, restricted
/// log-likelihood and whether the variance sits on its boundary (0/1).
/// Any output pointer may be null to skip it.
///
/// # Safety
/// `handle` must be a live fit handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn geosae_sfh_parameters(
    handle: *const GeosaeSfhFit,
    sigma2_v: *mut f64,
    rho: *mut f64,
    loglik: *mut f64,
    boundary: *mut i32,
) -> GeosaeStatus {
    guard(|| {
        let f = &handle.as_ref().ok_or_else(|| null("handle"))?.0;
        if !sigma2_v.is_null() {
            sigma2_v.write(f.sigma2_v);
        }
        if !rho.is_null() {
            rho.write(f.rho);
        }
        if !loglik.is_null() {
            loglik.write(f.loglik);
        }
        if !boundary.is_null() {
            boundary.write(i32::from(f.boundary));
        }
        Ok(())
    })
}

/// Copies the `k` coefficients (and their GLS standard errors when `se` is
/// non-null).
///
/// # Safety
/// `beta` (and `se`, if non-null) must have room for `k` doubles.
#[no_mangle]
pub unsafe extern "C" fn geosae_sfh_coefficients(
    handle: *const GeosaeSfhFit,
    beta: *mut f64,
    se: *mut f64,
    k: usize,
) -> GeosaeStatus {
    guard(|| {
        let f = &handle.as_ref().ok_or_else(|| null("handle"))?.0;
        if k != f.beta.len() {
            return Err((GeosaeStatus::InvalidInput, format!("fit has {} coefficients, buffer has {k}", f.beta.len())));
        }
        if beta.is_null() {
            return Err(null("beta"));
        }
        ptr::copy_nonoverlapping(f.beta.as_ptr(), beta, k);
        if !se.is_null() {
            ptr::copy_nonoverlapping(f.beta_se.as_ptr(), se, k);
        }
        Ok(())
    })
}

/// Copies the `m` log-scale EBLUPs.
///
/// # Safety
/// `out` must have room for `m` doubles.
#[no_mangle]
pub unsafe extern "C" fn geosae_sfh_eblups(handle: *const GeosaeSfhFit, out: *mut f64, m: usize) -> GeosaeStatus {
    guard(|| {
        let f = &handle.as_ref().ok_or_else(|| null("handle"))?.0;
        let e = f.eblups();
        if m != e.len() {
            return Err((GeosaeStatus::InvalidInput, format!("fit has {} areas, buffer has {m}", e.len())));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        ptr::copy_nonoverlapping(e.as_ptr(), out, m);
        Ok(())
    })
}

/// `mu = exp(eta + mse/2)` and `tau = N mu`.
///
/// # Safety
/// `mu` and `tau` must be writable.
#[no_mangle]
pub unsafe extern "C" fn geosae_back_transform(
    eblup_log: f64,
    mse_log: f64,
    population: u64,
    mu: *mut f64,
    tau: *mut f64,
) -> GeosaeStatus {
    guard(|| {
        let p = sfh::back_transform("", eblup_log, Some(mse_log), sfh::MseSource::Bootstrap, population)
            .map_err(lib)?;
        write(mu, p.mu_hat, "mu")?;
        write(tau, p.tau_hat, "tau")
    })
}
