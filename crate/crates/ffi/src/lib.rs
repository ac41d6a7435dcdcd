//! C interface to the covariance forecasting library.
//!
//! Every fallible function returns a [`CovcastStatus`] and writes results
//! through out-pointers, which are touched only on `COVCAST_STATUS_OK`.
//! Panels and returns data cross the boundary as opaque handles owned by
//! the library; release them with the matching `_free` function. The last
//! failure message for the calling thread is available from
//! [`covcast_last_error_message`] until the next call on that thread.
//!
//! Matrices are dense row-major `double` buffers of length `n * n`.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use libc::{c_char, c_int};
use nalgebra::DMatrix;

use covcast::diagnostics::{gph_estimate, local_whittle_estimate};
use covcast::error::Error;
use covcast::evaluate::{error_ratio, score, ScoreSeries};
use covcast::factor::{load_factor_spec_csv, load_sectors_csv};
use covcast::forecast::{rolling_forecast, ModelConfig, ModelKind};
use covcast::har::FitMethod;
use covcast::panel::{clean_panel, load_cov_panel, load_returns_panel, CovPanel, ReturnsPanel};
use covcast::portfolio::{constrained_min_var, ConstraintSet};

/// Result of a library call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CovcastStatus {
    /// The call succeeded.
    Ok = 0,
    /// Invalid arguments or malformed input data.
    Invalid = 1,
    /// The computation failed numerically.
    Numeric = 2,
    /// A file could not be read or written.
    Io = 3,
    /// The library panicked; treat the handle states as unspecified.
    Internal = 4,
}

/// Coefficient estimator for the factor forecaster.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CovcastEstimator {
    Ols = 0,
    Lasso = 1,
    AdaLasso = 2,
}

/// Weight constraint presets for minimum-variance portfolios.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CovcastConstraints {
    /// Fully unconstrained aside from the budget.
    Global = 0,
    /// Shorts capped at 30% total, single names within [-20%, 20%].
    Restricted = 1,
    /// No shorts, single names capped at 20%.
    LongOnly = 2,
}

/// Long-memory estimator selector.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CovcastMemoryMethod {
    /// Log-periodogram regression.
    LogPeriodogram = 0,
    /// Local Whittle likelihood.
    LocalWhittle = 1,
}

/// Opaque daily covariance panel (dates x assets, one matrix per day).
pub struct CovcastPanel {
    inner: CovPanel,
}

/// Opaque daily returns panel.
pub struct CovcastReturns {
    inner: ReturnsPanel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let msg = CString::new(msg).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = msg);
}

fn status_of(err: &Error) -> CovcastStatus {
    match err.exit_code() {
        2 => CovcastStatus::Numeric,
        3 => CovcastStatus::Io,
        _ => CovcastStatus::Invalid,
    }
}

/// Runs `f` with panics contained, recording any failure message.
fn guard(f: impl FnOnce() -> Result<(), (CovcastStatus, String)>) -> CovcastStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CovcastStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".to_string());
            CovcastStatus::Internal
        }
    }
}

fn fail<T>(status: CovcastStatus, msg: impl Into<String>) -> Result<T, (CovcastStatus, String)> {
    Err((status, msg.into()))
}

fn lift<T>(res: Result<T, Error>) -> Result<T, (CovcastStatus, String)> {
    res.map_err(|e| (status_of(&e), e.to_string()))
}

/// # Safety
/// `ptr` must be null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, (CovcastStatus, String)> {
    if ptr.is_null() {
        return fail(CovcastStatus::Invalid, format!("{what} is null"));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(s),
        Err(_) => fail(CovcastStatus::Invalid, format!("{what} is not UTF-8")),
    }
}

fn require<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, (CovcastStatus, String)> {
    // Safety delegated to the caller contract: non-null pointers passed to
    // this library must be valid for the duration of the call.
    match unsafe { ptr.as_ref() } {
        Some(r) => Ok(r),
        None => fail(CovcastStatus::Invalid, format!("{what} is null")),
    }
}

fn require_out<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, (CovcastStatus, String)> {
    match unsafe { ptr.as_mut() } {
        Some(r) => Ok(r),
        None => fail(CovcastStatus::Invalid, format!("{what} is null")),
    }
}

/// Message describing the most recent failure on this thread.
///
/// The pointer stays valid until the next library call from the same
/// thread. Never free it.
#[no_mangle]
pub extern "C" fn covcast_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string; never free it.
#[no_mangle]
pub extern "C" fn covcast_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

// ---------------------------------------------------------------------------
// Covariance panels
// ---------------------------------------------------------------------------

/// Loads a covariance panel from `path` (binary or CSV, sniffed).
///
/// # Safety
/// `path` must be NUL-terminated; `out` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn covcast_panel_load(
    path: *const c_char,
    out: *mut *mut CovcastPanel,
) -> CovcastStatus {
    guard(|| {
        let out = require_out(out, "out")?;
        let path = str_arg(path, "path")?;
        let inner = lift(load_cov_panel(Path::new(path)))?;
        *out = Box::into_raw(Box::new(CovcastPanel { inner }));
        Ok(())
    })
}

/// Releases a panel handle; `panel` may be null.
///
/// # Safety
/// `panel` must have come from this library and not been freed before.
#[no_mangle]
pub unsafe extern "C" fn covcast_panel_free(panel: *mut CovcastPanel) {
    if !panel.is_null() {
        drop(Box::from_raw(panel));
    }
}

/// Number of days in the panel; zero if `panel` is null.
#[no_mangle]
pub extern "C" fn covcast_panel_n_days(panel: *const CovcastPanel) -> usize {
    unsafe { panel.as_ref() }.map_or(0, |p| p.inner.n_days())
}

/// Number of assets in the panel; zero if `panel` is null.
#[no_mangle]
pub extern "C" fn covcast_panel_n_assets(panel: *const CovcastPanel) -> usize {
    unsafe { panel.as_ref() }.map_or(0, |p| p.inner.n_assets())
}

/// Calendar date of `day` as year/month/day-of-month.
///
/// # Safety
/// Out-pointers must be writable; `panel` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn covcast_panel_date(
    panel: *const CovcastPanel,
    day: usize,
    out_year: *mut i32,
    out_month: *mut u32,
    out_day: *mut u32,
) -> CovcastStatus {
    guard(|| {
        let panel = require(panel, "panel")?;
        let y = require_out(out_year, "out_year")?;
        let m = require_out(out_month, "out_month")?;
        let d = require_out(out_day, "out_day")?;
        if day >= panel.inner.n_days() {
            return fail(
                CovcastStatus::Invalid,
                format!("day {day} out of range ({} days)", panel.inner.n_days()),
            );
        }
        use covcast::chrono::Datelike;
        let date = panel.inner.dates[day];
        *y = date.year();
        *m = date.month();
        *d = date.day();
        Ok(())
    })
}

/// Copies the covariance matrix of `day` into `out` (row-major `n * n`).
///
/// # Safety
/// `out` must point to at least `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn covcast_panel_covariance(
    panel: *const CovcastPanel,
    day: usize,
    out: *mut f64,
    len: usize,
) -> CovcastStatus {
    guard(|| {
        let panel = require(panel, "panel")?;
        if out.is_null() {
            return fail(CovcastStatus::Invalid, "out is null");
        }
        let n = panel.inner.n_assets();
        if day >= panel.inner.n_days() {
            return fail(
                CovcastStatus::Invalid,
                format!("day {day} out of range ({} days)", panel.inner.n_days()),
            );
        }
        if len < n * n {
            return fail(
                CovcastStatus::Invalid,
                format!("buffer holds {len} doubles, need {}", n * n),
            );
        }
        let mat = panel.inner.mat(day);
        let slice = std::slice::from_raw_parts_mut(out, n * n);
        for i in 0..n {
            for j in 0..n {
                slice[i * n + j] = mat[(i, j)];
            }
        }
        Ok(())
    })
}

/// Copies the NUL-terminated name of asset `index` into `buf`.
///
/// # Safety
/// `buf` must point to at least `buf_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn covcast_panel_asset_name(
    panel: *const CovcastPanel,
    index: usize,
    buf: *mut c_char,
    buf_len: usize,
) -> CovcastStatus {
    guard(|| {
        let panel = require(panel, "panel")?;
        if buf.is_null() {
            return fail(CovcastStatus::Invalid, "buf is null");
        }
        let assets = &panel.inner.assets;
        if index >= assets.len() {
            return fail(
                CovcastStatus::Invalid,
                format!("asset {index} out of range ({} assets)", assets.len()),
            );
        }
        let name = assets[index].as_bytes();
        if buf_len < name.len() + 1 {
            return fail(
                CovcastStatus::Invalid,
                format!("buffer holds {buf_len} bytes, need {}", name.len() + 1),
            );
        }
        let dst = std::slice::from_raw_parts_mut(buf as *mut u8, name.len() + 1);
        dst[..name.len()].copy_from_slice(name);
        dst[name.len()] = 0;
        Ok(())
    })
}

/// Flags and replaces data-error days, producing a new panel handle.
///
/// `out_flagged` (optional, may be null) receives the number of replaced
/// days.
///
/// # Safety
/// `panel` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn covcast_panel_clean(
    panel: *const CovcastPanel,
    sd_threshold: f64,
    flag_fraction: f64,
    replace_count: usize,
    out: *mut *mut CovcastPanel,
    out_flagged: *mut usize,
) -> CovcastStatus {
    guard(|| {
        let panel = require(panel, "panel")?;
        let out = require_out(out, "out")?;
        let (cleaned, report) = lift(clean_panel(
            &panel.inner,
            sd_threshold,
            flag_fraction,
            replace_count,
        ))?;
        if let Some(flagged) = out_flagged.as_mut() {
            *flagged = report.flagged_days.len();
        }
        *out = Box::into_raw(Box::new(CovcastPanel { inner: cleaned }));
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Returns panels
// ---------------------------------------------------------------------------

/// Loads a returns panel from `path` (binary or CSV, sniffed).
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn covcast_returns_load(
    path: *const c_char,
    out: *mut *mut CovcastReturns,
) -> CovcastStatus {
    guard(|| {
        let out = require_out(out, "out")?;
        let path = str_arg(path, "path")?;
        let inner = lift(load_returns_panel(Path::new(path)))?;
        *out = Box::into_raw(Box::new(CovcastReturns { inner }));
        Ok(())
    })
}

/// Releases a returns handle; `returns` may be null.
///
/// # Safety
/// `returns` must have come from this library and not been freed before.
#[no_mangle]
pub unsafe extern "C" fn covcast_returns_free(returns: *mut CovcastReturns) {
    if !returns.is_null() {
        drop(Box::from_raw(returns));
    }
}

/// Number of days in the returns panel; zero if `returns` is null.
#[no_mangle]
pub extern "C" fn covcast_returns_n_days(returns: *const CovcastReturns) -> usize {
    unsafe { returns.as_ref() }.map_or(0, |r| r.inner.n_days())
}

/// Number of assets in the returns panel; zero if `returns` is null.
#[no_mangle]
pub extern "C" fn covcast_returns_n_assets(returns: *const CovcastReturns) -> usize {
    unsafe { returns.as_ref() }.map_or(0, |r| r.inner.n_assets())
}

// ---------------------------------------------------------------------------
// Forecasting
// ---------------------------------------------------------------------------

fn forecast_into(
    panel: &CovcastPanel,
    returns: Option<&ReturnsPanel>,
    spec_path: Option<&str>,
    sectors_path: Option<&str>,
    kind: ModelKind,
    window: usize,
    out: &mut *mut CovcastPanel,
    out_repairs: *mut usize,
) -> Result<(), (CovcastStatus, String)> {
    let spec = match spec_path {
        Some(p) => Some(lift(load_factor_spec_csv(Path::new(p)))?),
        None => None,
    };
    let sectors = match sectors_path {
        Some(p) => Some(lift(load_sectors_csv(Path::new(p)))?),
        None => None,
    };
    let set = lift(rolling_forecast(
        &panel.inner,
        returns,
        spec.as_ref(),
        sectors.as_ref(),
        &kind,
        window,
    ))?;
    if let Some(repairs) = unsafe { out_repairs.as_mut() } {
        *repairs = set.repairs;
    }
    let inner = lift(set.to_panel())?;
    *out = Box::into_raw(Box::new(CovcastPanel { inner }));
    Ok(())
}

/// Rolling random-walk forecasts: each day's forecast is the previous
/// day's matrix. Produces a new panel of one-day-ahead forecasts.
///
/// # Safety
/// `panel` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn covcast_forecast_random_walk(
    panel: *const CovcastPanel,
    window: usize,
    out: *mut *mut CovcastPanel,
) -> CovcastStatus {
    guard(|| {
        let panel = require(panel, "panel")?;
        let out = require_out(out, "out")?;
        forecast_into(
            panel,
            None,
            None,
            None,
            ModelKind::RandomWalk,
            window,
            out,
            std::ptr::null_mut(),
        )
    })
}

/// Rolling exponentially weighted forecasts built from daily returns.
///
/// # Safety
/// `panel` and `returns` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn covcast_forecast_ewma(
    panel: *const CovcastPanel,
    returns: *const CovcastReturns,
    lambda: f64,
    window: usize,
    out: *mut *mut CovcastPanel,
) -> CovcastStatus {
    guard(|| {
        let panel = require(panel, "panel")?;
        let returns = require(returns, "returns")?;
        let out = require_out(out, "out")?;
        forecast_into(
            panel,
            Some(&returns.inner),
            None,
            None,
            ModelKind::Ewma { lambda },
            window,
            out,
            std::ptr::null_mut(),
        )
    })
}

/// Rolling factor-model forecasts with persistence-regression dynamics on
/// the factor covariance and sector-block residuals.
///
/// `weights_path` and `sectors_path` name CSV files describing factor
/// weights and sector labels. `out_repairs` (optional, may be null)
/// receives the number of forecasts adjusted to restore positive
/// semidefiniteness.
///
/// # Safety
/// Paths must be NUL-terminated; `panel` must be a live handle; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn covcast_forecast_factor(
    panel: *const CovcastPanel,
    weights_path: *const c_char,
    sectors_path: *const c_char,
    window: usize,
    n_factors: usize,
    estimator: CovcastEstimator,
    use_log_matrix: bool,
    out: *mut *mut CovcastPanel,
    out_repairs: *mut usize,
) -> CovcastStatus {
    guard(|| {
        let panel = require(panel, "panel")?;
        let out = require_out(out, "out")?;
        let weights = str_arg(weights_path, "weights_path")?;
        let sectors = str_arg(sectors_path, "sectors_path")?;
        let estimator = match estimator {
            CovcastEstimator::Ols => FitMethod::Ols,
            CovcastEstimator::Lasso => FitMethod::Lasso,
            CovcastEstimator::AdaLasso => FitMethod::AdaLasso,
        };
        let config = ModelConfig {
            n_factors,
            use_log_matrix,
            estimator,
            keep_fits: false,
            ..ModelConfig::default()
        };
        forecast_into(
            panel,
            None,
            Some(weights),
            Some(sectors),
            ModelKind::Factor(config),
            window,
            out,
            out_repairs,
        )
    })
}

/// Mean squared-error ratio of two forecast panels against realized
/// matrices, matched by date. Below 1 means `model` beats `baseline`.
///
/// # Safety
/// All three handles must be live; `out_ratio` must be writable.
#[no_mangle]
pub unsafe extern "C" fn covcast_l2_ratio(
    model: *const CovcastPanel,
    baseline: *const CovcastPanel,
    realized: *const CovcastPanel,
    out_ratio: *mut f64,
) -> CovcastStatus {
    guard(|| {
        let model = require(model, "model")?;
        let baseline = require(baseline, "baseline")?;
        let realized = require(realized, "realized")?;
        let out_ratio = require_out(out_ratio, "out_ratio")?;
        let model_scores = score_against(model, realized, "model")?;
        let baseline_scores = score_against(baseline, realized, "baseline")?;
        *out_ratio = lift(error_ratio(&model_scores, &baseline_scores))?;
        Ok(())
    })
}

fn score_against(
    forecasts: &CovcastPanel,
    realized: &CovcastPanel,
    what: &str,
) -> Result<ScoreSeries, (CovcastStatus, String)> {
    let fc = &forecasts.inner;
    let re = &realized.inner;
    if fc.assets != re.assets {
        return fail(
            CovcastStatus::Invalid,
            format!("{what} covers different assets than the realized panel"),
        );
    }
    let mut realized_mats = Vec::with_capacity(fc.n_days());
    for date in &fc.dates {
        let t = match re.date_index(*date) {
            Some(t) => t,
            None => {
                return fail(
                    CovcastStatus::Invalid,
                    format!("{what} includes {date} which the realized panel lacks"),
                )
            }
        };
        realized_mats.push(re.mat(t));
    }
    let forecast_mats: Vec<DMatrix<f64>> = (0..fc.n_days()).map(|t| fc.mat(t)).collect();
    lift(score(&fc.dates, &forecast_mats, &realized_mats))
}

// ---------------------------------------------------------------------------
// Portfolios and diagnostics
// ---------------------------------------------------------------------------

/// Minimum-variance weights for one covariance matrix under a constraint
/// preset. `cov` is row-major `n * n`; `out_weights` receives `n` values
/// summing to one.
///
/// # Safety
/// `cov` must hold `n * n` readable doubles and `out_weights` `n`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn covcast_min_variance_weights(
    cov: *const f64,
    n: usize,
    constraints: CovcastConstraints,
    out_weights: *mut f64,
) -> CovcastStatus {
    guard(|| {
        if cov.is_null() || out_weights.is_null() {
            return fail(CovcastStatus::Invalid, "cov or out_weights is null");
        }
        if n == 0 {
            return fail(CovcastStatus::Invalid, "n is zero");
        }
        let data = std::slice::from_raw_parts(cov, n * n);
        let sigma = DMatrix::from_row_slice(n, n, data);
        let cons = match constraints {
            CovcastConstraints::Global => ConstraintSet::global(),
            CovcastConstraints::Restricted => ConstraintSet::restricted(),
            CovcastConstraints::LongOnly => ConstraintSet::long_only(),
        };
        let w = lift(constrained_min_var(&sigma, &cons))?;
        let out = std::slice::from_raw_parts_mut(out_weights, n);
        out.copy_from_slice(w.as_slice());
        Ok(())
    })
}

/// Long-memory parameter of a series by log-periodogram regression or
/// local Whittle likelihood. `bandwidth` zero picks `floor(sqrt(len))`.
/// `out_bandwidth` (optional, may be null) receives the bandwidth used.
///
/// # Safety
/// `series` must hold `len` readable doubles; `out_d` must be writable.
#[no_mangle]
pub unsafe extern "C" fn covcast_long_memory_d(
    series: *const f64,
    len: usize,
    bandwidth: usize,
    method: CovcastMemoryMethod,
    out_d: *mut f64,
    out_bandwidth: *mut usize,
) -> CovcastStatus {
    guard(|| {
        if series.is_null() {
            return fail(CovcastStatus::Invalid, "series is null");
        }
        let out_d = require_out(out_d, "out_d")?;
        let data = std::slice::from_raw_parts(series, len);
        let bw = (bandwidth > 0).then_some(bandwidth);
        let est = match method {
            CovcastMemoryMethod::LogPeriodogram => lift(gph_estimate(data, bw))?,
            CovcastMemoryMethod::LocalWhittle => lift(local_whittle_estimate(data, bw))?,
        };
        *out_d = est.d_hat;
        if let Some(slot) = out_bandwidth.as_mut() {
            *slot = est.bandwidth;
        }
        Ok(())
    })
}

/// Forces a status value through the C ABI; used by binding smoke tests.
#[no_mangle]
pub extern "C" fn covcast_status_ok() -> c_int {
    CovcastStatus::Ok as c_int
}
