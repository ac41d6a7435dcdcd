//! Minimum-variance portfolio construction under weight constraints, daily
//! rebalancing with an optional partial-adjustment rule, and the summary
//! statistics of the resulting return series.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::panel::{vech_index, CovPanel, ReturnsPanel};
use crate::qp::{solve_qp, QpProblem, QpSettings};
use crate::transforms::{is_spd, psd_project};

/// Which weight constraints the minimum-variance program carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    /// Fully unconstrained apart from the budget; closed form.
    Global,
    /// Box on every weight, plus a cap on the total short position.
    Restricted,
    /// No shorting, box on every weight.
    LongOnly,
}

#[derive(Debug, Clone, Copy)]
pub struct ConstraintSet {
    pub kind: ConstraintKind,
    /// Cap on the summed short positions (Restricted only).
    pub short_cap: f64,
    /// Per-asset absolute weight cap (Restricted and LongOnly).
    pub box_limit: f64,
}

impl ConstraintSet {
    pub fn global() -> Self {
        ConstraintSet {
            kind: ConstraintKind::Global,
            short_cap: 0.30,
            box_limit: 0.20,
        }
    }

    pub fn restricted() -> Self {
        ConstraintSet {
            kind: ConstraintKind::Restricted,
            short_cap: 0.30,
            box_limit: 0.20,
        }
    }

    pub fn long_only() -> Self {
        ConstraintSet {
            kind: ConstraintKind::LongOnly,
            short_cap: 0.30,
            box_limit: 0.20,
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.kind == ConstraintKind::Global {
            return Ok(());
        }
        if !(self.box_limit > 0.0) || !(self.short_cap >= 0.0) {
            return Err(Error::Validation(format!(
                "invalid constraint caps: box {}, short {}",
                self.box_limit, self.short_cap
            )));
        }
        if (n as f64) * self.box_limit < 1.0 - 1e-12 {
            return Err(Error::Infeasible(format!(
                "{n} assets with box limit {} cannot sum to 1",
                self.box_limit
            )));
        }
        Ok(())
    }
}

/// Global minimum-variance weights `S^{-1} 1 / (1' S^{-1} 1)`.
///
/// The covariance must be SPD; callers should repair with `psd_project`
/// first, signalled here as a domain error.
pub fn gmv_weights(sigma: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = sigma.nrows();
    if sigma.ncols() != n || n == 0 {
        return Err(Error::Dimension(format!(
            "covariance is {}x{}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let chol = sigma.clone().cholesky().ok_or_else(|| {
        Error::Domain("covariance not positive definite; project it first".into())
    })?;
    let si = chol.solve(&DVector::from_element(n, 1.0));
    let denom = si.sum();
    if !(denom.abs() > 0.0) || !denom.is_finite() {
        return Err(Error::Numeric(
            "degenerate normalization in GMV weights".into(),
        ));
    }
    Ok(si / denom)
}

/// Minimum-variance weights under the given constraint set.
pub fn constrained_min_var(sigma: &DMatrix<f64>, cons: &ConstraintSet) -> Result<DVector<f64>> {
    let n = sigma.nrows();
    cons.validate(n)?;
    match cons.kind {
        ConstraintKind::Global => gmv_weights(sigma),
        ConstraintKind::LongOnly => {
            // Variables: w. Rows: n box rows in [0, box], one budget equality.
            let mut a = DMatrix::zeros(n + 1, n);
            for i in 0..n {
                a[(i, i)] = 1.0;
            }
            for j in 0..n {
                a[(n, j)] = 1.0;
            }
            let mut l = DVector::from_element(n + 1, 0.0);
            let mut u = DVector::from_element(n + 1, cons.box_limit);
            l[n] = 1.0;
            u[n] = 1.0;
            let prob = QpProblem {
                p: 2.0 * sigma,
                q: DVector::zeros(n),
                a,
                l,
                u,
            };
            let sol = solve_qp(&prob, &QpSettings::default())?;
            Ok(sol.x)
        }
        ConstraintKind::Restricted => {
            // Variables: (w, s) where s_i tracks the short position of
            // asset i via w_i + s_i >= 0, s_i >= 0, sum(s) <= short_cap.
            // A vanishing quadratic on s keeps the program strictly convex
            // without measurably perturbing w.
            let dim = 2 * n;
            let eps_s = 1e-12 * (2.0 * sigma.trace() / n as f64).max(f64::MIN_POSITIVE);
            let mut p = DMatrix::zeros(dim, dim);
            for i in 0..n {
                for j in 0..n {
                    p[(i, j)] = 2.0 * sigma[(i, j)];
                }
                p[(n + i, n + i)] = eps_s;
            }
            // Rows: n of (w_i + s_i >= 0), n of (s_i >= 0), n of
            // (-box <= w_i <= box), budget equality, short-cap row.
            let m = 3 * n + 2;
            let mut a = DMatrix::zeros(m, dim);
            let mut l = DVector::from_element(m, 0.0);
            let mut u = DVector::from_element(m, f64::INFINITY);
            for i in 0..n {
                a[(i, i)] = 1.0;
                a[(i, n + i)] = 1.0;
                a[(n + i, n + i)] = 1.0;
                a[(2 * n + i, i)] = 1.0;
                l[2 * n + i] = -cons.box_limit;
                u[2 * n + i] = cons.box_limit;
            }
            for j in 0..n {
                a[(3 * n, j)] = 1.0;
                a[(3 * n + 1, n + j)] = 1.0;
            }
            l[3 * n] = 1.0;
            u[3 * n] = 1.0;
            l[3 * n + 1] = 0.0;
            u[3 * n + 1] = cons.short_cap;
            let prob = QpProblem {
                p,
                q: DVector::zeros(dim),
                a,
                l,
                u,
            };
            let sol = solve_qp(&prob, &QpSettings::default())?;
            Ok(sol.x.rows(0, n).into_owned())
        }
    }
}

/// Weights the portfolio drifts to when held untouched through one day of
/// returns: `w_i (1 + r_i) / (1 + r_p)`.
pub fn hold_weights(
    w_prev: &DVector<f64>,
    r_prev: &DVector<f64>,
    rp_prev: f64,
) -> Result<DVector<f64>> {
    if w_prev.len() != r_prev.len() {
        return Err(Error::Dimension(format!(
            "{} weights vs {} returns",
            w_prev.len(),
            r_prev.len()
        )));
    }
    let denom = 1.0 + rp_prev;
    if denom.abs() < 1e-12 {
        return Err(Error::Numeric(
            "portfolio return of -100% makes drifted weights undefined".into(),
        ));
    }
    Ok(DVector::from_fn(w_prev.len(), |i, _| {
        w_prev[i] * (1.0 + r_prev[i]) / denom
    }))
}

/// Moves weights a fraction of the way from the drifted holdings toward the
/// target, then renormalizes to sum one. Returns the weights and the
/// renormalization delta `|sum - 1|` observed before scaling.
pub fn partial_rebalance(
    hold: &DVector<f64>,
    target: &DVector<f64>,
    fraction: f64,
) -> Result<(DVector<f64>, f64)> {
    if hold.len() != target.len() {
        return Err(Error::Dimension(format!(
            "{} hold weights vs {} target weights",
            hold.len(),
            target.len()
        )));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Validation(format!(
            "rebalance fraction must lie in [0, 1], got {fraction}"
        )));
    }
    let blend = (1.0 - fraction) * hold + fraction * target;
    let sum = blend.sum();
    if sum.abs() < 1e-12 {
        return Err(Error::Numeric("blended weights sum to zero".into()));
    }
    Ok((blend / sum, (sum - 1.0).abs()))
}

/// Backtest configuration.
#[derive(Debug, Clone, Copy)]
pub struct BacktestConfig {
    /// Fraction of the gap to the target closed each day (1 = full daily
    /// rebalancing).
    pub rebalance_fraction: f64,
    /// Trading days per year for annualization.
    pub annualization: f64,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        BacktestConfig {
            rebalance_fraction: 1.0,
            annualization: 252.0,
        }
    }
}

/// The thirteen summary statistics of a backtested strategy. Percentages
/// are in percent; the rest are unitless.
#[derive(Debug, Clone, Serialize)]
pub struct BacktestReport {
    pub std_dev_pct: f64,
    pub lower_partial_std_pct: f64,
    pub kurtosis: f64,
    pub skewness: f64,
    pub avg_diversification_ratio: f64,
    pub avg_max_weight: f64,
    pub avg_min_weight: f64,
    pub avg_gross_leverage: f64,
    pub proportion_leverage_pct: f64,
    pub avg_turnover_pct: f64,
    pub avg_excess_return_pct: f64,
    pub cumulative_return_pct: f64,
    pub sharpe_ratio: f64,
}

/// Full backtest trace alongside the summary report.
#[derive(Debug, Clone)]
pub struct BacktestOutcome {
    pub report: BacktestReport,
    pub dates: Vec<NaiveDate>,
    /// Weights actually held each day.
    pub weights: Vec<DVector<f64>>,
    pub portfolio_returns: Vec<f64>,
    pub excess_returns: Vec<f64>,
    /// Per-day turnover `(1/N) sum |w - w_hold|`; day one is zero.
    pub turnover: Vec<f64>,
    pub renormalization_deltas: Vec<f64>,
    /// Forecasts that needed a PSD repair before optimization.
    pub repaired_forecasts: usize,
}

/// Runs the daily minimum-variance backtest.
///
/// For each forecast date the one-day-ahead covariance forecast sets the
/// target weights; holdings drift with realized returns and are pulled
/// toward the target by `rebalance_fraction`. Realized covariances supply
/// the diversification ratio. Every forecast date must exist in both the
/// returns panel and the realized panel.
pub fn backtest(
    dates: &[NaiveDate],
    forecasts: &[DMatrix<f64>],
    returns: &ReturnsPanel,
    realized: &CovPanel,
    constraints: &ConstraintSet,
    config: &BacktestConfig,
) -> Result<BacktestOutcome> {
    let d = dates.len();
    if d == 0 || forecasts.len() != d {
        return Err(Error::Validation(format!(
            "{d} dates with {} forecasts",
            forecasts.len()
        )));
    }
    let n = returns.n_assets();
    if !(0.0..=1.0).contains(&config.rebalance_fraction) || !(config.annualization > 0.0) {
        return Err(Error::Validation(format!(
            "invalid backtest config: fraction {}, annualization {}",
            config.rebalance_fraction, config.annualization
        )));
    }

    let mut weights: Vec<DVector<f64>> = Vec::with_capacity(d);
    let mut rp = Vec::with_capacity(d);
    let mut excess = Vec::with_capacity(d);
    let mut turnover = vec![0.0f64; d];
    let mut deltas = vec![0.0f64; d];
    let mut repaired = 0usize;
    let mut dr_sum = 0.0f64;
    let mut dr_count = 0usize;
    let mut prev_ret_row: Option<usize> = None;

    for (k, date) in dates.iter().enumerate() {
        let rt = returns.date_index(*date).ok_or_else(|| {
            Error::Validation(format!("returns panel has no row for forecast date {date}"))
        })?;
        let ct = realized.date_index(*date).ok_or_else(|| {
            Error::Validation(format!(
                "realized panel has no row for forecast date {date}"
            ))
        })?;
        let sigma = &forecasts[k];
        if sigma.nrows() != n || sigma.ncols() != n {
            return Err(Error::Dimension(format!(
                "forecast {k} is {}x{}, panel has {n} assets",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        let sigma_spd = if is_spd(sigma) {
            sigma.clone()
        } else {
            repaired += 1;
            let floor = 1e-8 * (sigma.trace() / n as f64).max(0.0);
            psd_project(sigma, floor)?
        };
        let target = constrained_min_var(&sigma_spd, constraints)?;

        let w = if let Some(prev_rt) = prev_ret_row {
            let r_prev = returns.returns.row(prev_rt).transpose();
            let hold = hold_weights(&weights[k - 1], &r_prev, rp[k - 1])?;
            let (w, delta) = partial_rebalance(&hold, &target, config.rebalance_fraction)?;
            turnover[k] = (&w - &hold).iter().map(|x| x.abs()).sum::<f64>() / n as f64;
            deltas[k] = delta;
            w
        } else {
            let sum = target.sum();
            if sum.abs() < 1e-12 {
                return Err(Error::Numeric("target weights sum to zero".into()));
            }
            deltas[k] = (sum - 1.0).abs();
            target / sum
        };

        let r_row = returns.returns.row(rt).transpose();
        let r_p = w.dot(&r_row);
        rp.push(r_p);
        excess.push(r_p - returns.risk_free[rt]);

        // Diversification ratio against the realized covariance.
        let v = &realized.mats[ct];
        let mut num = 0.0;
        let mut quad = 0.0;
        for i in 0..n {
            num += w[i] * v[vech_index(n, i, i)].max(0.0).sqrt();
            for j in 0..n {
                let (a, b) = if i >= j { (i, j) } else { (j, i) };
                quad += w[i] * w[j] * v[vech_index(n, a, b)];
            }
        }
        if quad > 0.0 {
            dr_sum += num / quad.sqrt();
            dr_count += 1;
        }

        weights.push(w);
        prev_ret_row = Some(rt);
    }

    let report = summarize(
        &weights,
        &rp,
        &excess,
        &turnover,
        dr_sum,
        dr_count,
        config.annualization,
    );
    Ok(BacktestOutcome {
        report,
        dates: dates.to_vec(),
        weights,
        portfolio_returns: rp,
        excess_returns: excess,
        turnover,
        renormalization_deltas: deltas,
        repaired_forecasts: repaired,
    })
}

fn summarize(
    weights: &[DVector<f64>],
    rp: &[f64],
    excess: &[f64],
    turnover: &[f64],
    dr_sum: f64,
    dr_count: usize,
    ann: f64,
) -> BacktestReport {
    let n_days = rp.len();
    let nf = n_days as f64;
    let n_assets = weights[0].len() as f64;
    let mean = rp.iter().sum::<f64>() / nf;
    let centered: Vec<f64> = rp.iter().map(|r| r - mean).collect();

    let var = centered.iter().map(|r| r * r).sum::<f64>() / nf;
    let sd = var.sqrt();

    let below: Vec<f64> = centered.iter().copied().filter(|&r| r < 0.0).collect();
    let lower_sd = if below.is_empty() {
        0.0
    } else {
        (below.iter().map(|r| r * r).sum::<f64>() / below.len() as f64).sqrt()
    };

    let (kurt, skew) = if sd > 0.0 {
        let m3 = centered.iter().map(|r| r.powi(3)).sum::<f64>() / nf;
        let m4 = centered.iter().map(|r| r.powi(4)).sum::<f64>() / nf;
        let kurt = m4 / var.powi(2) - 3.0;
        // Small-sample correction; undefined below three observations,
        // where the raw third moment vanishes anyway.
        let skew = if n_days > 2 {
            (nf * (nf - 1.0)).sqrt() / (nf - 2.0) * (m3 / sd.powi(3))
        } else {
            0.0
        };
        (kurt, skew)
    } else {
        (0.0, 0.0)
    };

    let mut max_sum = 0.0;
    let mut min_sum = 0.0;
    let mut gross_sum = 0.0;
    let mut neg_count = 0usize;
    for w in weights {
        max_sum += w.max();
        min_sum += w.min();
        gross_sum += w.iter().map(|x| x.abs()).sum::<f64>();
        neg_count += w.iter().filter(|&&x| x < 0.0).count();
    }

    let mean_excess = excess.iter().sum::<f64>() / nf;
    let ann_sd = sd * ann.sqrt();
    let sharpe = if ann_sd > 0.0 {
        mean_excess * ann / ann_sd
    } else {
        0.0
    };

    BacktestReport {
        std_dev_pct: 100.0 * ann_sd,
        lower_partial_std_pct: 100.0 * lower_sd * ann.sqrt(),
        kurtosis: kurt,
        skewness: skew,
        avg_diversification_ratio: if dr_count > 0 {
            dr_sum / dr_count as f64
        } else {
            0.0
        },
        avg_max_weight: max_sum / nf,
        avg_min_weight: min_sum / nf,
        avg_gross_leverage: gross_sum / nf,
        proportion_leverage_pct: 100.0 * neg_count as f64 / (nf * n_assets),
        avg_turnover_pct: 100.0 * turnover.iter().sum::<f64>() / nf,
        avg_excess_return_pct: 100.0 * mean_excess * ann,
        cumulative_return_pct: 100.0 * (rp.iter().map(|r| 1.0 + r).product::<f64>() - 1.0),
        sharpe_ratio: sharpe,
    }
}

/// Writes the thirteen statistics as `statistic,value` rows.
pub fn save_backtest_report_csv(report: &BacktestReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let disp = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&disp, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(&disp, e);
    writeln!(w, "statistic,value").map_err(io_err)?;
    let rows: [(&str, f64); 13] = [
        ("standard_deviation_pct", report.std_dev_pct),
        ("lower_partial_std_pct", report.lower_partial_std_pct),
        ("kurtosis", report.kurtosis),
        ("skewness", report.skewness),
        (
            "avg_diversification_ratio",
            report.avg_diversification_ratio,
        ),
        ("avg_max_weight", report.avg_max_weight),
        ("avg_min_weight", report.avg_min_weight),
        ("avg_gross_leverage", report.avg_gross_leverage),
        ("proportion_leverage_pct", report.proportion_leverage_pct),
        ("avg_turnover_pct", report.avg_turnover_pct),
        ("avg_excess_return_pct", report.avg_excess_return_pct),
        ("cumulative_return_pct", report.cumulative_return_pct),
        ("sharpe_ratio", report.sharpe_ratio),
    ];
    for (name, value) in rows {
        writeln!(w, "{name},{value:.10e}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Writes held weights as `date,<asset...>` rows.
pub fn save_weights_csv(
    dates: &[NaiveDate],
    weights: &[DVector<f64>],
    assets: &[String],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let disp = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&disp, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(&disp, e);
    writeln!(w, "date,{}", assets.join(",")).map_err(io_err)?;
    for (d, row) in dates.iter().zip(weights) {
        let mut line = d.format("%Y-%m-%d").to_string();
        for x in row.iter() {
            line.push(',');
            line.push_str(&format!("{x:.10e}"));
        }
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}
