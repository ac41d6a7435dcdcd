//! Rolling one-day-ahead covariance forecasts.
//!
//! The structured model decomposes each day's matrix into a factor
//! covariance, loadings, and sector-block residuals, fits heterogeneous-span
//! autoregressions with shrinkage to every factor-covariance entry, a small
//! least-squares recursion to every loading, and lagged-variance regressions
//! to every residual-block entry, then reassembles the pieces and repairs
//! the result to a positive matrix when needed. Random-walk, structured
//! random-walk, and exponentially weighted benchmarks share the same rolling
//! bookkeeping so their forecasts cover identical days.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evaluate::{EquationGroup, FitRecord, TargetKind};
use crate::factor::{block_assemble, block_extract, decompose, FactorSpec, SectorAssignment};
use crate::har::{har_regressors, ols_fit, predict, DesignWorkspace, FitMethod, LinearFit};
use crate::panel::{unvech, vech, vech_index, vech_len, CovPanel, ReturnsPanel};
use crate::transforms::{matrix_exp, matrix_log, psd_project};

/// Decay used by the exponentially weighted benchmark.
pub const DEFAULT_EWMA_LAMBDA: f64 = 0.96;

/// Smallest admissible rolling window.
pub const MIN_WINDOW: usize = 32;

/// Days used to seed the exponentially weighted recursion.
const EWMA_SEED_DAYS: usize = 50;

/// Settings for the structured factor model.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Leading factors kept from the weight spec.
    pub n_factors: usize,
    /// Model the matrix logarithm of the factor covariance instead of its
    /// raw entries.
    pub use_log_matrix: bool,
    pub estimator: FitMethod,
    /// Day / week / month averaging spans of the lagged regressors.
    pub har_spans: (usize, usize, usize),
    /// Positivity floor for repairs, relative to the mean diagonal.
    pub psd_floor_scale: f64,
    /// Retain one `FitRecord` per fitted equation per day.
    pub keep_fits: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_factors: 3,
            use_log_matrix: true,
            estimator: FitMethod::AdaLasso,
            har_spans: crate::har::HAR_DEFAULT_SPANS,
            psd_floor_scale: 1e-8,
            keep_fits: true,
        }
    }
}

/// Which forecaster to run.
#[derive(Debug, Clone)]
pub enum ModelKind {
    /// Structured factor model.
    Factor(ModelConfig),
    /// Yesterday's matrix.
    RandomWalk,
    /// Yesterday's matrix filtered through the factor / sector-block
    /// structure.
    BlockRandomWalk { n_factors: usize },
    /// Exponentially weighted average of return outer products.
    Ewma { lambda: f64 },
}

impl ModelKind {
    pub fn label(&self) -> &'static str {
        match self {
            ModelKind::Factor(_) => "factor-har",
            ModelKind::RandomWalk => "rw",
            ModelKind::BlockRandomWalk { .. } => "block-rw",
            ModelKind::Ewma { .. } => "ewma",
        }
    }
}

/// Rolling out-of-sample forecasts plus fitting metadata.
#[derive(Debug, Clone)]
pub struct ForecastSet {
    pub model: String,
    pub window: usize,
    /// Forecasted days, aligned with `sigma_hat`.
    pub dates: Vec<NaiveDate>,
    pub assets: Vec<String>,
    pub sigma_hat: Vec<DMatrix<f64>>,
    pub fits: Vec<FitRecord>,
    /// Eigenvalue repairs applied while assembling forecasts.
    pub repairs: usize,
    /// Loading equations that fell back to carrying the last value forward.
    pub beta_fallbacks: usize,
}

impl ForecastSet {
    /// Repackages the forecasts as a covariance panel for persistence.
    pub fn to_panel(&self) -> Result<CovPanel> {
        CovPanel::from_matrices(self.dates.clone(), self.assets.clone(), &self.sigma_hat)
    }
}

/// Seed matrix for the exponentially weighted recursion: the uncentered
/// average of the first `m` return outer products.
pub fn ewma_seed(returns: &DMatrix<f64>, m: usize) -> Result<DMatrix<f64>> {
    if m == 0 || m > returns.nrows() {
        return Err(Error::Validation(format!(
            "seed length {m} outside 1..={}",
            returns.nrows()
        )));
    }
    let n = returns.ncols();
    let mut s = DMatrix::<f64>::zeros(n, n);
    for t in 0..m {
        let r = returns.row(t).transpose();
        s += &r * r.transpose();
    }
    Ok(s / m as f64)
}

/// One exponentially weighted update with decay `lambda`.
pub fn ewma_update(prev: &DMatrix<f64>, r: &DVector<f64>, lambda: f64) -> DMatrix<f64> {
    let outer = r * r.transpose();
    prev * lambda + outer * (1.0 - lambda)
}

/// Forecasts for days `t0..T-1`: the recursion is seeded on the first
/// `min(50, t0)` days and each day-`t` forecast uses returns through `t-1`.
pub fn ewma_forecast_path(
    returns: &DMatrix<f64>,
    lambda: f64,
    t0: usize,
) -> Result<Vec<DMatrix<f64>>> {
    if !(0.0 < lambda && lambda < 1.0) {
        return Err(Error::Validation(format!("decay {lambda} outside (0, 1)")));
    }
    let t_len = returns.nrows();
    if t0 == 0 || t0 >= t_len {
        return Err(Error::Validation(format!(
            "first forecast day {t0} outside 1..{t_len}"
        )));
    }
    let m = EWMA_SEED_DAYS.min(t0);
    let mut s = ewma_seed(returns, m)?;
    let mut out = Vec::with_capacity(t_len - t0);
    for t in m..t_len {
        if t >= t0 {
            out.push(s.clone());
        }
        // Fold in day t's return so the next iteration predicts day t + 1.
        let r = returns.row(t).transpose();
        s = ewma_update(&s, &r, lambda);
    }
    Ok(out)
}

/// Per-day decomposition series shared by every out-of-sample fit.
struct StructuredSeries {
    k: usize,
    /// `T x K(K+1)/2` factor-covariance entries (log-transformed when
    /// configured).
    f_vech: DMatrix<f64>,
    /// `T x K*N` loadings, day-major storage of each `K x N` matrix in
    /// row-major (factor, asset) order.
    betas: DMatrix<f64>,
    /// Per sector: `T x m(m+1)/2` residual-block entries.
    block_vech: Vec<DMatrix<f64>>,
    /// Per sector: `T x m` residual-block diagonals (the lagged regressors).
    block_diag: Vec<DMatrix<f64>>,
    sizes: Vec<usize>,
}

fn precompute_structured(
    panel: &CovPanel,
    spec: &FactorSpec,
    sectors: &SectorAssignment,
    use_log: bool,
) -> Result<StructuredSeries> {
    let t_len = panel.n_days();
    let n = panel.n_assets();
    let k = spec.n_factors();
    let sizes = sectors.sizes();
    let per_day: Vec<(DVector<f64>, DVector<f64>, Vec<DVector<f64>>)> = (0..t_len)
        .into_par_iter()
        .map(|t| -> Result<_> {
            let sigma = panel.mat(t);
            let dec = decompose(&sigma, spec)?;
            let f_mat = if use_log {
                matrix_log(&dec.sigma_f)
                    .map_err(|e| Error::Domain(format!("factor covariance on day {t}: {e}")))?
            } else {
                dec.sigma_f.clone()
            };
            let fv = vech(&f_mat)?;
            let mut beta_row = DVector::zeros(k * n);
            for r in 0..k {
                for c in 0..n {
                    beta_row[r * n + c] = dec.loadings[(r, c)];
                }
            }
            let blocks = block_extract(&dec.sigma_eps, sectors)?;
            let block_vs: Result<Vec<DVector<f64>>> = blocks.iter().map(vech).collect();
            Ok((fv, beta_row, block_vs?))
        })
        .collect::<Result<Vec<_>>>()?;

    let l = vech_len(k);
    let mut f_vech = DMatrix::zeros(t_len, l);
    let mut betas = DMatrix::zeros(t_len, k * n);
    let mut block_vech: Vec<DMatrix<f64>> = sizes
        .iter()
        .map(|&m| DMatrix::zeros(t_len, vech_len(m)))
        .collect();
    let mut block_diag: Vec<DMatrix<f64>> =
        sizes.iter().map(|&m| DMatrix::zeros(t_len, m)).collect();
    for (t, (fv, beta_row, blocks)) in per_day.into_iter().enumerate() {
        f_vech.row_mut(t).copy_from(&fv.transpose());
        betas.row_mut(t).copy_from(&beta_row.transpose());
        for (s, bv) in blocks.into_iter().enumerate() {
            let m = sizes[s];
            for (pos, val) in bv.iter().enumerate() {
                block_vech[s][(t, pos)] = *val;
            }
            for d in 0..m {
                block_diag[s][(t, d)] = bv[vech_index(m, d, d)];
            }
        }
    }
    Ok(StructuredSeries {
        k,
        f_vech,
        betas,
        block_vech,
        block_diag,
        sizes,
    })
}

/// Fits one scalar series with day/week/month-average regressors by least
/// squares and predicts the next value. `None` signals the caller to fall
/// back to the last observed value.
fn scalar_har_forecast(series: &[f64], spans: (usize, usize, usize)) -> Option<f64> {
    let (d_span, w_span, m_span) = spans;
    let s_len = series.len();
    if s_len <= m_span + 1 {
        return None;
    }
    let mut prefix = Vec::with_capacity(s_len + 1);
    prefix.push(0.0);
    for v in series {
        prefix.push(prefix.last().unwrap() + v);
    }
    let avg = |end: usize, span: usize| (prefix[end] - prefix[end - span]) / span as f64;
    let rows = s_len - m_span - 1;
    let mut z = DMatrix::<f64>::zeros(rows, 4);
    let mut y = DVector::<f64>::zeros(rows);
    for r in 0..rows {
        let day = r + m_span + 1; // target day, regressors use days < day
        z[(r, 0)] = 1.0;
        z[(r, 1)] = avg(day, d_span);
        z[(r, 2)] = avg(day, w_span);
        z[(r, 3)] = avg(day, m_span);
        y[r] = series[day];
    }
    let fit = ols_fit(&y, &z).ok()?;
    let z_next = DVector::from_vec(vec![
        1.0,
        avg(s_len, d_span),
        avg(s_len, w_span),
        avg(s_len, m_span),
    ]);
    let pred = predict(&fit, &z_next).ok()?;
    pred.is_finite().then_some(pred)
}

/// Fits one response against a shared design; the workspace is only built
/// (and only needed) for the shrinkage estimators.
fn fit_equation(
    ws: Option<&DesignWorkspace>,
    fit_z: &DMatrix<f64>,
    y: &DVector<f64>,
    method: FitMethod,
) -> Result<LinearFit> {
    match method {
        FitMethod::Ols => ols_fit(y, fit_z),
        FitMethod::Lasso => ws.expect("workspace built for shrinkage fits").lasso(y),
        FitMethod::AdaLasso => ws.expect("workspace built for shrinkage fits").adalasso(y),
    }
}

struct DayResult {
    sigma: DMatrix<f64>,
    fits: Vec<FitRecord>,
    repairs: usize,
    beta_fallbacks: usize,
}

/// Design rows for one window: `[1 | averages]` rows predicting slice days
/// `month..slice_len-1`, plus the out-of-sample row predicting the day after
/// the slice.
fn windowed_design(
    series: &DMatrix<f64>,
    spans: (usize, usize, usize),
) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
    let (x, offset) = har_regressors(series, spans)?;
    let s_len = series.nrows();
    // Row r of x averages through slice day r + offset, so it predicts day
    // r + offset + 1; in-sample targets are days offset+1 .. s_len-1 and the
    // final row predicts the day after the slice.
    let fit_rows = s_len - offset - 1;
    let cols = x.ncols();
    let mut z = DMatrix::<f64>::zeros(fit_rows + 1, cols + 1);
    for r in 0..=fit_rows {
        z[(r, 0)] = 1.0;
        for c in 0..cols {
            z[(r, c + 1)] = x[(r, c)];
        }
    }
    let fit_z = z.rows(0, fit_rows).into_owned();
    let oos_row = z.row(fit_rows).transpose();
    let targets = series.rows(offset + 1, fit_rows).into_owned();
    Ok((fit_z, targets, oos_row))
}

fn forecast_structured_day(
    series: &StructuredSeries,
    cfg: &ModelConfig,
    sectors: &SectorAssignment,
    t: usize,
    window: usize,
) -> Result<DayResult> {
    let month = cfg.har_spans.2;
    let slice_start = t - window - month;
    let slice_len = window + month;
    let k = series.k;
    let l = vech_len(k);
    let n = series.betas.ncols() / k;
    let mut fits = Vec::new();
    let mut repairs = 0usize;

    // Factor covariance equations: every entry regressed on the averaged
    // history of all entries.
    let f_slice = series.f_vech.rows(slice_start, slice_len).into_owned();
    let (fit_z, targets, oos_row) = windowed_design(&f_slice, cfg.har_spans)?;
    let ws = match cfg.estimator {
        FitMethod::Ols => None,
        _ => Some(DesignWorkspace::new(&fit_z)?),
    };
    let mut f_pred = DVector::zeros(l);
    for j in 0..l {
        let y = targets.column(j).into_owned();
        let fit = fit_equation(ws.as_ref(), &fit_z, &y, cfg.estimator)?;
        f_pred[j] = predict(&fit, &oos_row)?;
        push_fit(&mut fits, cfg, EquationGroup::FactorCov, k, j, &fit);
    }
    let f_mat = unvech(&f_pred, k)?;
    let sigma_f = if cfg.use_log_matrix {
        matrix_exp(&f_mat)?
    } else {
        f_mat
    };

    // Loadings: scalar recursions with a carry-forward fallback.
    let mut beta_fallbacks = 0usize;
    let mut loadings = DMatrix::<f64>::zeros(k, n);
    for r in 0..k {
        for c in 0..n {
            let col = r * n + c;
            let hist: Vec<f64> = (slice_start..slice_start + slice_len)
                .map(|d| series.betas[(d, col)])
                .collect();
            match scalar_har_forecast(&hist, cfg.har_spans) {
                Some(v) => loadings[(r, c)] = v,
                None => {
                    loadings[(r, c)] = *hist.last().unwrap();
                    beta_fallbacks += 1;
                }
            }
        }
    }

    // Residual blocks: every entry regressed on the block's previous-day
    // variances. Design row r holds the diagonal of slice day r and predicts
    // day r + 1; the last row predicts the day after the slice.
    let mut blocks = Vec::with_capacity(series.sizes.len());
    for (s, &m) in series.sizes.iter().enumerate() {
        let m_len = vech_len(m);
        let diag = series.block_diag[s]
            .rows(slice_start, slice_len)
            .into_owned();
        let mut z = DMatrix::<f64>::zeros(slice_len, m + 1);
        for r in 0..slice_len {
            z[(r, 0)] = 1.0;
            for c in 0..m {
                z[(r, c + 1)] = diag[(r, c)];
            }
        }
        let fit_rows = slice_len - 1;
        let fit_z = z.rows(0, fit_rows).into_owned();
        let oos_row = z.row(fit_rows).transpose();
        let targets = series.block_vech[s]
            .rows(slice_start + 1, fit_rows)
            .into_owned();
        let ws = match cfg.estimator {
            FitMethod::Ols => None,
            _ => Some(DesignWorkspace::new(&fit_z)?),
        };
        let mut pred = DVector::zeros(m_len);
        for j in 0..m_len {
            let y = targets.column(j).into_owned();
            let fit = fit_equation(ws.as_ref(), &fit_z, &y, cfg.estimator)?;
            pred[j] = predict(&fit, &oos_row)?;
            push_fit(&mut fits, cfg, EquationGroup::ResidualBlock(s), m, j, &fit);
        }
        let raw = unvech(&pred, m)?;
        let mean_diag = (raw.trace() / m as f64).max(0.0);
        let fixed = psd_project(&raw, cfg.psd_floor_scale * mean_diag)?;
        if fixed != raw {
            repairs += 1;
        }
        blocks.push(fixed);
    }

    // Assemble and make positive. The product is symmetrized first so the
    // repair counter only fires on actual eigenvalue clips, not on rounding
    // asymmetry.
    let mut sigma = loadings.transpose() * &sigma_f * &loadings;
    sigma += block_assemble(&blocks, sectors)?;
    let sigma = crate::transforms::symmetrized(&sigma);
    let mean_diag = (sigma.trace() / n as f64).max(0.0);
    let fixed = psd_project(&sigma, cfg.psd_floor_scale * mean_diag)?;
    if fixed != sigma {
        repairs += 1;
    }
    Ok(DayResult {
        sigma: fixed,
        fits,
        repairs,
        beta_fallbacks,
    })
}

fn push_fit(
    fits: &mut Vec<FitRecord>,
    cfg: &ModelConfig,
    group: EquationGroup,
    dim: usize,
    index: usize,
    fit: &LinearFit,
) {
    if !cfg.keep_fits {
        return;
    }
    fits.push(FitRecord {
        date: NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid date"),
        group,
        index,
        target: TargetKind::from_vech_index(dim, index),
        n_predictors: fit.coefs.len(),
        active: fit.active.clone(),
        lambda: fit.lambda,
        bic: fit.bic,
    });
}

/// Runs a forecaster over every out-of-sample day.
///
/// The first forecast lands `window + month` days into the panel so that
/// each fit sees `window` target rows after averaging consumes `month` days;
/// the benchmarks use the same start for comparability. Forecasts exist for
/// days `window + month .. T-1`.
pub fn rolling_forecast(
    covariances: &CovPanel,
    returns: Option<&ReturnsPanel>,
    spec: Option<&FactorSpec>,
    sectors: Option<&SectorAssignment>,
    kind: &ModelKind,
    window: usize,
) -> Result<ForecastSet> {
    if window < MIN_WINDOW {
        return Err(Error::Validation(format!(
            "window {window} below the minimum {MIN_WINDOW}"
        )));
    }
    let month = match kind {
        ModelKind::Factor(cfg) => {
            let (d, w, m) = cfg.har_spans;
            if d == 0 || d > w || w > m {
                return Err(Error::Validation(format!(
                    "lag spans ({d}, {w}, {m}) must be increasing and positive"
                )));
            }
            m
        }
        _ => crate::har::HAR_DEFAULT_SPANS.2,
    };
    let t_len = covariances.n_days();
    let t0 = window + month;
    if t_len <= t0 {
        return Err(Error::InsufficientHistory(format!(
            "panel has {t_len} days; need more than {t0} for window {window}"
        )));
    }
    let out_days = t_len - t0;
    let dates: Vec<NaiveDate> = covariances.dates[t0..].to_vec();
    let assets = covariances.assets.clone();

    let (sigma_hat, fits, repairs, beta_fallbacks) = match kind {
        ModelKind::RandomWalk => {
            let mats: Vec<DMatrix<f64>> = (t0..t_len).map(|t| covariances.mat(t - 1)).collect();
            (mats, Vec::new(), 0, 0)
        }
        ModelKind::BlockRandomWalk { n_factors } => {
            let spec = spec
                .ok_or_else(|| {
                    Error::Validation("structured benchmark needs factor weights".into())
                })?
                .aligned_to(&covariances.assets)?
                .truncated(*n_factors)?;
            let sectors = sectors
                .ok_or_else(|| {
                    Error::Validation("structured benchmark needs sector labels".into())
                })?
                .aligned_to(&covariances.assets)?;
            let results: Vec<(DMatrix<f64>, usize)> = (t0..t_len)
                .into_par_iter()
                .map(|t| -> Result<(DMatrix<f64>, usize)> {
                    let sigma = covariances.mat(t - 1);
                    let dec = decompose(&sigma, &spec)?;
                    let blocks = block_extract(&dec.sigma_eps, &sectors)?;
                    let mut rebuilt = dec.loadings.transpose() * &dec.sigma_f * &dec.loadings;
                    rebuilt += block_assemble(&blocks, &sectors)?;
                    let rebuilt = crate::transforms::symmetrized(&rebuilt);
                    let n = rebuilt.nrows();
                    let mean_diag = (rebuilt.trace() / n as f64).max(0.0);
                    let fixed = psd_project(&rebuilt, 1e-8 * mean_diag)?;
                    let repaired = usize::from(fixed != rebuilt);
                    Ok((fixed, repaired))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut mats = Vec::with_capacity(out_days);
            let mut repairs = 0;
            for (m, r) in results {
                mats.push(m);
                repairs += r;
            }
            (mats, Vec::new(), repairs, 0)
        }
        ModelKind::Ewma { lambda } => {
            let rp = returns.ok_or_else(|| {
                Error::Validation("exponentially weighted benchmark needs returns".into())
            })?;
            if rp.dates != covariances.dates {
                return Err(Error::Validation(
                    "returns and covariance panels cover different days".into(),
                ));
            }
            if rp.assets != covariances.assets {
                return Err(Error::Validation(
                    "returns and covariance panels list different assets".into(),
                ));
            }
            let mats = ewma_forecast_path(&rp.returns, *lambda, t0)?;
            (mats, Vec::new(), 0, 0)
        }
        ModelKind::Factor(cfg) => {
            let spec = spec
                .ok_or_else(|| Error::Validation("factor model needs factor weights".into()))?
                .aligned_to(&covariances.assets)?
                .truncated(cfg.n_factors)?;
            let sectors = sectors
                .ok_or_else(|| Error::Validation("factor model needs sector labels".into()))?
                .aligned_to(&covariances.assets)?;
            if !(cfg.psd_floor_scale >= 0.0) {
                return Err(Error::Validation(format!(
                    "positivity floor scale {} must be non-negative",
                    cfg.psd_floor_scale
                )));
            }
            let series = precompute_structured(covariances, &spec, &sectors, cfg.use_log_matrix)?;
            let day_results: Vec<DayResult> = (t0..t_len)
                .into_par_iter()
                .map(|t| forecast_structured_day(&series, cfg, &sectors, t, window))
                .collect::<Result<Vec<_>>>()?;
            let mut mats = Vec::with_capacity(out_days);
            let mut fits = Vec::new();
            let mut repairs = 0;
            let mut beta_fallbacks = 0;
            for (i, mut day) in day_results.into_iter().enumerate() {
                let date = dates[i];
                for f in &mut day.fits {
                    f.date = date;
                }
                mats.push(day.sigma);
                fits.extend(day.fits);
                repairs += day.repairs;
                beta_fallbacks += day.beta_fallbacks;
            }
            (mats, fits, repairs, beta_fallbacks)
        }
    };

    Ok(ForecastSet {
        model: kind.label().to_string(),
        window,
        dates,
        assets,
        sigma_hat,
        fits,
        repairs,
        beta_fallbacks,
    })
}

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes one row per fitted equation:
/// `date,group,index,target,n_predictors,active,lambda,bic` with the active
/// set `|`-joined.
pub fn save_fits_csv(path: &Path, fits: &[FitRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    writeln!(w, "date,group,index,target,n_predictors,active,lambda,bic").map_err(io_err)?;
    for f in fits {
        let active: Vec<String> = f.active.iter().map(|a| a.to_string()).collect();
        let target = match f.target {
            TargetKind::Variance => "variance",
            TargetKind::Covariance => "covariance",
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            f.date.format("%Y-%m-%d"),
            f.group.label(),
            f.index,
            target,
            f.n_predictors,
            active.join("|"),
            fmt(f.lambda),
            fmt(f.bic)
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads a file written by [`save_fits_csv`].
pub fn load_fits_csv(path: &Path) -> Result<Vec<FitRecord>> {
    let disp = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&disp, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: disp.clone(),
        line,
        msg,
    };
    let header = match lines.next() {
        Some((_, Ok(h))) => h,
        Some((_, Err(e))) => return Err(Error::io(&disp, e)),
        None => return Err(parse_err(0, "file is empty".into())),
    };
    if header.trim() != "date,group,index,target,n_predictors,active,lambda,bic" {
        return Err(parse_err(1, format!("unexpected header '{header}'")));
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io(&disp, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 8 {
            return Err(parse_err(
                lineno,
                format!("expected 8 fields, got {}", parts.len()),
            ));
        }
        let date = NaiveDate::parse_from_str(parts[0], "%Y-%m-%d")
            .map_err(|e| parse_err(lineno, format!("bad date '{}': {e}", parts[0])))?;
        let group = if parts[1] == "factor" {
            EquationGroup::FactorCov
        } else if let Some(num) = parts[1].strip_prefix("block") {
            let b = num
                .parse::<usize>()
                .map_err(|e| parse_err(lineno, format!("bad group '{}': {e}", parts[1])))?;
            EquationGroup::ResidualBlock(b)
        } else {
            return Err(parse_err(lineno, format!("bad group '{}'", parts[1])));
        };
        let index = parts[2]
            .parse::<usize>()
            .map_err(|e| parse_err(lineno, format!("bad index: {e}")))?;
        let target = match parts[3] {
            "variance" => TargetKind::Variance,
            "covariance" => TargetKind::Covariance,
            other => return Err(parse_err(lineno, format!("bad target '{other}'"))),
        };
        let n_predictors = parts[4]
            .parse::<usize>()
            .map_err(|e| parse_err(lineno, format!("bad predictor count: {e}")))?;
        let active = if parts[5].is_empty() {
            Vec::new()
        } else {
            parts[5]
                .split('|')
                .map(|a| {
                    a.parse::<usize>()
                        .map_err(|e| parse_err(lineno, format!("bad active index '{a}': {e}")))
                })
                .collect::<Result<Vec<usize>>>()?
        };
        let lambda = parts[6]
            .parse::<f64>()
            .map_err(|e| parse_err(lineno, format!("bad penalty: {e}")))?;
        let bic = parts[7]
            .parse::<f64>()
            .map_err(|e| parse_err(lineno, format!("bad criterion value: {e}")))?;
        out.push(FitRecord {
            date,
            group,
            index,
            target,
            n_predictors,
            active,
            lambda,
            bic,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic, SynthConfig};
    use approx::assert_abs_diff_eq;

    fn synth_small() -> crate::synth::SyntheticData {
        generate_synthetic(&SynthConfig {
            n_assets: 10,
            n_factors: 2,
            n_sectors: 2,
            n_days: 130,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn ewma_path_matches_manual_recursion() {
        let returns = DMatrix::from_row_slice(6, 1, &[1.0, 2.0, -1.0, 0.5, 1.5, -0.5]);
        let lambda = 0.5;
        // Seed over the first 3 days (t0 = 3 < 50).
        let path = ewma_forecast_path(&returns, lambda, 3).unwrap();
        assert_eq!(path.len(), 3);
        let s0 = (1.0 + 4.0 + 1.0) / 3.0;
        assert_abs_diff_eq!(path[0][(0, 0)], s0, epsilon = 1e-15);
        let s1 = lambda * s0 + (1.0 - lambda) * 0.25;
        assert_abs_diff_eq!(path[1][(0, 0)], s1, epsilon = 1e-15);
        let s2 = lambda * s1 + (1.0 - lambda) * 2.25;
        assert_abs_diff_eq!(path[2][(0, 0)], s2, epsilon = 1e-15);
    }

    #[test]
    fn ewma_seed_is_uncentered_average() {
        let returns = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let s = ewma_seed(&returns, 2).unwrap();
        assert_abs_diff_eq!(s[(0, 0)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s[(1, 1)], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s[(0, 1)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn random_walk_reuses_previous_day() {
        let data = synth_small();
        let set = rolling_forecast(
            &data.covariances,
            None,
            None,
            None,
            &ModelKind::RandomWalk,
            100,
        )
        .unwrap();
        // t0 = 122, so 130 - 122 = 8 forecasts.
        assert_eq!(set.dates.len(), 8);
        assert_eq!(set.dates[0], data.covariances.dates[122]);
        for (i, m) in set.sigma_hat.iter().enumerate() {
            assert_eq!(*m, data.covariances.mat(122 + i - 1));
        }
    }

    #[test]
    fn structured_model_produces_positive_forecasts() {
        let data = synth_small();
        let cfg = ModelConfig {
            n_factors: 2,
            ..ModelConfig::default()
        };
        let set = rolling_forecast(
            &data.covariances,
            None,
            Some(&data.factor_spec),
            Some(&data.sectors),
            &ModelKind::Factor(cfg),
            100,
        )
        .unwrap();
        assert_eq!(set.dates.len(), 8);
        assert_eq!(set.model, "factor-har");
        for m in &set.sigma_hat {
            assert!(m.iter().all(|x| x.is_finite()));
            assert!(crate::transforms::is_spd(
                &(m + DMatrix::identity(10, 10) * 1e-12)
            ));
        }
        // For K = 2 there are 3 factor-covariance entries, each offered the
        // averaged history of all 3 entries over 3 spans = 9 predictors;
        // block equations carry their block's variances as candidates.
        let factor_fits: Vec<_> = set
            .fits
            .iter()
            .filter(|f| f.group == EquationGroup::FactorCov)
            .collect();
        assert_eq!(factor_fits.len(), 3 * 8);
        assert!(factor_fits.iter().all(|f| f.n_predictors == 9));
        let block_fits: Vec<_> = set
            .fits
            .iter()
            .filter(|f| matches!(f.group, EquationGroup::ResidualBlock(_)))
            .collect();
        let sizes = data.sectors.sizes();
        let expect: usize = sizes.iter().map(|&m| vech_len(m)).sum::<usize>() * 8;
        assert_eq!(block_fits.len(), expect);
        for f in block_fits {
            let EquationGroup::ResidualBlock(s) = f.group else {
                unreachable!()
            };
            assert_eq!(f.n_predictors, sizes[s]);
        }
    }

    #[test]
    fn no_lookahead_in_rolling_forecasts() {
        let data = synth_small();
        let cfg = ModelConfig {
            n_factors: 2,
            estimator: FitMethod::Lasso,
            ..ModelConfig::default()
        };
        let full = rolling_forecast(
            &data.covariances,
            None,
            Some(&data.factor_spec),
            Some(&data.sectors),
            &ModelKind::Factor(cfg.clone()),
            100,
        )
        .unwrap();
        // Truncate the panel right after the first out-of-sample day: the
        // forecast for that day must be bit-identical.
        let t0 = 122;
        let cut = CovPanel::new(
            data.covariances.dates[..t0 + 1].to_vec(),
            data.covariances.assets.clone(),
            data.covariances.mats[..t0 + 1].to_vec(),
        )
        .unwrap();
        let cut_set = rolling_forecast(
            &cut,
            None,
            Some(&data.factor_spec),
            Some(&data.sectors),
            &ModelKind::Factor(cfg),
            100,
        )
        .unwrap();
        assert_eq!(cut_set.sigma_hat.len(), 1);
        assert_eq!(cut_set.sigma_hat[0], full.sigma_hat[0]);
    }

    #[test]
    fn rolling_is_deterministic() {
        let data = synth_small();
        let run = || {
            rolling_forecast(
                &data.covariances,
                None,
                Some(&data.factor_spec),
                Some(&data.sectors),
                &ModelKind::Factor(ModelConfig {
                    n_factors: 2,
                    ..ModelConfig::default()
                }),
                100,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.sigma_hat, b.sigma_hat);
        assert_eq!(a.fits.len(), b.fits.len());
    }

    #[test]
    fn block_random_walk_restructures_previous_day() {
        let data = synth_small();
        let set = rolling_forecast(
            &data.covariances,
            None,
            Some(&data.factor_spec),
            Some(&data.sectors),
            &ModelKind::BlockRandomWalk { n_factors: 2 },
            100,
        )
        .unwrap();
        assert_eq!(set.sigma_hat.len(), 8);
        // Rebuild the first forecast by hand.
        let spec = data.factor_spec.truncated(2).unwrap();
        let sigma = data.covariances.mat(121);
        let dec = decompose(&sigma, &spec).unwrap();
        let blocks = block_extract(&dec.sigma_eps, &data.sectors).unwrap();
        let mut expect = dec.loadings.transpose() * &dec.sigma_f * &dec.loadings;
        expect += block_assemble(&blocks, &data.sectors).unwrap();
        let expect = crate::transforms::symmetrized(&expect);
        let mean_diag = (expect.trace() / 10.0).max(0.0);
        let expect = psd_project(&expect, 1e-8 * mean_diag).unwrap();
        assert_eq!(set.sigma_hat[0], expect);
    }

    #[test]
    fn ewma_kind_requires_matching_returns() {
        let data = synth_small();
        let err = rolling_forecast(
            &data.covariances,
            None,
            None,
            None,
            &ModelKind::Ewma { lambda: 0.96 },
            100,
        );
        assert!(err.is_err());
        let ok = rolling_forecast(
            &data.covariances,
            Some(&data.returns),
            None,
            None,
            &ModelKind::Ewma { lambda: 0.96 },
            100,
        )
        .unwrap();
        assert_eq!(ok.sigma_hat.len(), 8);
    }

    #[test]
    fn input_validation() {
        let data = synth_small();
        // Window too small.
        assert!(rolling_forecast(
            &data.covariances,
            None,
            None,
            None,
            &ModelKind::RandomWalk,
            31
        )
        .is_err());
        // Panel shorter than window + month.
        assert!(rolling_forecast(
            &data.covariances,
            None,
            None,
            None,
            &ModelKind::RandomWalk,
            120
        )
        .is_err());
        // Factor model without a spec.
        assert!(rolling_forecast(
            &data.covariances,
            None,
            None,
            Some(&data.sectors),
            &ModelKind::Factor(ModelConfig::default()),
            100
        )
        .is_err());
    }

    #[test]
    fn scalar_har_forecast_recovers_linear_recursions() {
        // A series following x_{t+1} = 2 + 0.5 x_t exactly is predicted
        // exactly.
        let mut x = vec![1.0f64];
        for _ in 0..80 {
            let last = *x.last().unwrap();
            x.push(2.0 + 0.5 * last);
        }
        let pred = scalar_har_forecast(&x, (1, 5, 22)).unwrap();
        let expect = 2.0 + 0.5 * x.last().unwrap();
        assert_abs_diff_eq!(pred, expect, epsilon = 1e-6);
    }

    #[test]
    fn fits_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let fits = vec![
            FitRecord {
                date: NaiveDate::from_ymd_opt(2020, 3, 2).unwrap(),
                group: EquationGroup::FactorCov,
                index: 4,
                target: TargetKind::Covariance,
                n_predictors: 18,
                active: vec![0, 3, 17],
                lambda: 0.0123,
                bic: -812.5,
            },
            FitRecord {
                date: NaiveDate::from_ymd_opt(2020, 3, 3).unwrap(),
                group: EquationGroup::ResidualBlock(2),
                index: 0,
                target: TargetKind::Variance,
                n_predictors: 5,
                active: vec![],
                lambda: 1.5,
                bic: 10.0,
            },
        ];
        let path = dir.path().join("fits.csv");
        save_fits_csv(&path, &fits).unwrap();
        let back = load_fits_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].date, fits[0].date);
        assert_eq!(back[0].group, EquationGroup::FactorCov);
        assert_eq!(back[0].active, vec![0, 3, 17]);
        assert_eq!(back[1].group, EquationGroup::ResidualBlock(2));
        assert!(back[1].active.is_empty());
        assert_eq!(back[1].target, TargetKind::Variance);
        assert_abs_diff_eq!(back[0].lambda, 0.0123, epsilon = 1e-16);
    }

    #[test]
    fn forecast_set_roundtrips_as_panel() {
        let data = synth_small();
        let set = rolling_forecast(
            &data.covariances,
            None,
            None,
            None,
            &ModelKind::RandomWalk,
            100,
        )
        .unwrap();
        let panel = set.to_panel().unwrap();
        assert_eq!(panel.n_days(), 8);
        assert_eq!(panel.mat(0), set.sigma_hat[0]);
    }
}
