//! Heterogeneous-lag autoregression design matrices and the penalized
//! regression machinery used to fit them: LASSO with a BIC-selected penalty,
//! adaptive LASSO, and plain OLS.
//!
//! The LASSO objective is
//!
//! ```text
//! (1/T) ||y - Z g||^2 + 2 lambda ||beta||_1
//! ```
//!
//! where `beta` are the slope entries of `g`; the intercept is never
//! penalized. Columns are standardized internally for conditioning only —
//! the penalty applies to the original-scale coefficients, so the chosen
//! `lambda` and the KKT conditions are all on the caller's scale.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default heterogeneous lag spans: one day, one week, one month.
pub const HAR_DEFAULT_SPANS: (usize, usize, usize) = (1, 5, 22);

/// Maximum coordinate-descent sweeps per penalty value.
const MAX_SWEEPS: usize = 100_000;

/// Convergence tolerance on the largest coefficient change per sweep,
/// relative to `1 + ||coef||_inf`.
const CD_TOL: f64 = 1e-9;

/// Number of penalties on the automatic grid and its dynamic range.
const GRID_LEN: usize = 100;
const GRID_RATIO: f64 = 1e-4;

/// Backward rolling means of each series over the three lag spans.
///
/// For input `series` of shape `T x m`, returns a `(T - month + 1) x 3m`
/// matrix whose row `r` describes input day `t = r + month - 1`: columns are
/// ordered day-span means for all `m` series, then week-span, then
/// month-span. The second return value is that `month - 1` row offset.
pub fn har_regressors(
    series: &DMatrix<f64>,
    spans: (usize, usize, usize),
) -> Result<(DMatrix<f64>, usize)> {
    let (day, week, month) = spans;
    if day == 0 || day > week || week > month {
        return Err(Error::Validation(format!(
            "lag spans must satisfy 0 < day <= week <= month, got ({day}, {week}, {month})"
        )));
    }
    let t_len = series.nrows();
    let m = series.ncols();
    if t_len < month {
        return Err(Error::InsufficientHistory(format!(
            "{t_len} rows is shorter than the longest span {month}"
        )));
    }
    if m == 0 {
        return Err(Error::Validation("series matrix has no columns".into()));
    }
    let offset = month - 1;
    let rows = t_len - offset;
    // Prefix sums per series; prefix[t] = sum of rows 0..t.
    let mut prefix = DMatrix::<f64>::zeros(t_len + 1, m);
    for t in 0..t_len {
        for i in 0..m {
            prefix[(t + 1, i)] = prefix[(t, i)] + series[(t, i)];
        }
    }
    let mut out = DMatrix::zeros(rows, 3 * m);
    for (block, span) in [day, week, month].into_iter().enumerate() {
        let inv = 1.0 / span as f64;
        for r in 0..rows {
            let t = r + offset;
            for i in 0..m {
                out[(r, block * m + i)] = (prefix[(t + 1, i)] - prefix[(t + 1 - span, i)]) * inv;
            }
        }
    }
    Ok((out, offset))
}

/// How a `LinearFit` was estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitMethod {
    Ols,
    Lasso,
    AdaLasso,
}

/// A fitted linear equation with intercept.
#[derive(Debug, Clone)]
pub struct LinearFit {
    pub intercept: f64,
    /// Slope coefficients, one per design column after the intercept.
    pub coefs: DVector<f64>,
    /// Indices (into `coefs`) of the nonzero slopes, ascending. OLS reports
    /// every column.
    pub active: Vec<usize>,
    /// Chosen penalty; zero for OLS.
    pub lambda: f64,
    /// BIC of the selected model.
    pub bic: f64,
    pub method: FitMethod,
}

impl LinearFit {
    pub fn n_active(&self) -> usize {
        self.active.len()
    }
}

/// BIC used for penalty selection: `T ln(RSS) + k ln(T)`, with the RSS
/// floored to keep the value finite for perfect fits.
pub fn bic(t: usize, rss: f64, k: usize) -> f64 {
    (t as f64) * rss.max(1e-300).ln() + (k as f64) * (t as f64).ln()
}

/// Prediction `g0 + sum_j coef_j z_j` from a design row that, like the
/// fitting design, carries a leading 1.
pub fn predict(fit: &LinearFit, z_row: &DVector<f64>) -> Result<f64> {
    if z_row.len() != fit.coefs.len() + 1 {
        return Err(Error::Dimension(format!(
            "design row has {} entries, fit expects {}",
            z_row.len(),
            fit.coefs.len() + 1
        )));
    }
    if z_row[0] != 1.0 {
        return Err(Error::Validation(format!(
            "design row must start with the intercept 1, got {}",
            z_row[0]
        )));
    }
    let mut y = fit.intercept;
    for j in 0..fit.coefs.len() {
        y += fit.coefs[j] * z_row[j + 1];
    }
    Ok(y)
}

/// Precomputed centering, scaling, and Gram matrix for one design, shared
/// across every response fitted against it.
pub struct DesignWorkspace {
    t: usize,
    p: usize,
    x_mean: DVector<f64>,
    /// Population standard deviation per slope column; zero marks an inert
    /// (constant) column that can never enter the model.
    x_scale: DVector<f64>,
    /// `T x p` centered, unit-variance columns; inert columns zeroed.
    xs: DMatrix<f64>,
    /// `(1/T) Xs' Xs`.
    gram: DMatrix<f64>,
}

struct PathFit {
    b: DVector<f64>,
    lambda: f64,
    bic: f64,
}

impl DesignWorkspace {
    /// Builds the workspace from a design whose first column is the
    /// intercept (all ones).
    pub fn new(z: &DMatrix<f64>) -> Result<Self> {
        let t = z.nrows();
        if t == 0 || z.ncols() < 1 {
            return Err(Error::Validation("empty design matrix".into()));
        }
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation(
                "design matrix has non-finite entries".into(),
            ));
        }
        if z.column(0).iter().any(|&x| x != 1.0) {
            return Err(Error::Validation(
                "first design column must be the intercept (all ones)".into(),
            ));
        }
        let p = z.ncols() - 1;
        let mut x_mean = DVector::zeros(p);
        let mut x_scale = DVector::zeros(p);
        let mut xs = DMatrix::zeros(t, p);
        for j in 0..p {
            let col = z.column(j + 1);
            let mean = col.sum() / t as f64;
            let mut var = 0.0;
            for i in 0..t {
                let c = col[i] - mean;
                var += c * c;
            }
            var /= t as f64;
            let sd = var.sqrt();
            x_mean[j] = mean;
            x_scale[j] = sd;
            if sd > 0.0 {
                for i in 0..t {
                    xs[(i, j)] = (col[i] - mean) / sd;
                }
            }
        }
        let gram = xs.transpose() * &xs / t as f64;
        Ok(DesignWorkspace {
            t,
            p,
            x_mean,
            x_scale,
            xs,
            gram,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.t
    }

    pub fn n_slopes(&self) -> usize {
        self.p
    }

    fn center_y(&self, y: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        if y.len() != self.t {
            return Err(Error::Dimension(format!(
                "response has {} rows, design has {}",
                y.len(),
                self.t
            )));
        }
        if y.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation("response has non-finite entries".into()));
        }
        let mean = y.sum() / self.t as f64;
        Ok((y.map(|v| v - mean), mean))
    }

    /// One coordinate-descent pass; returns the largest coefficient change.
    ///
    /// `gb` tracks `gram * b` so each coordinate update costs `O(p)`.
    fn sweep(
        &self,
        indices: &[usize],
        lambda: f64,
        pen: &[f64],
        q: &DVector<f64>,
        b: &mut DVector<f64>,
        gb: &mut DVector<f64>,
    ) -> f64 {
        let mut max_delta = 0.0f64;
        for &j in indices {
            let thresh = lambda * pen[j];
            if thresh.is_infinite() {
                continue;
            }
            // Gram diagonal is 1 for every non-inert column.
            let rho = q[j] - gb[j] + b[j];
            let new_b = soft_threshold(rho, thresh);
            let delta = new_b - b[j];
            if delta != 0.0 {
                gb.axpy(delta, &self.gram.column(j), 1.0);
                b[j] = new_b;
                max_delta = max_delta.max(delta.abs());
            }
        }
        max_delta
    }

    /// Coordinate descent to convergence at one penalty, warm-started from
    /// the current `b` / `gb`.
    fn cd_solve(
        &self,
        lambda: f64,
        pen: &[f64],
        q: &DVector<f64>,
        b: &mut DVector<f64>,
        gb: &mut DVector<f64>,
    ) -> Result<()> {
        let all: Vec<usize> = (0..self.p).filter(|&j| pen[j].is_finite()).collect();
        let mut sweeps = 0usize;
        loop {
            // Stabilize the current active set first, then confirm with a
            // full pass that may admit new coordinates.
            let active: Vec<usize> = all.iter().copied().filter(|&j| b[j] != 0.0).collect();
            loop {
                sweeps += 1;
                if sweeps > MAX_SWEEPS {
                    return Err(Error::Numeric(format!(
                        "coordinate descent exceeded {MAX_SWEEPS} sweeps at lambda {lambda:e}"
                    )));
                }
                let delta = self.sweep(&active, lambda, pen, q, b, gb);
                if delta < CD_TOL * (1.0 + b.amax()) {
                    break;
                }
            }
            sweeps += 1;
            if sweeps > MAX_SWEEPS {
                return Err(Error::Numeric(format!(
                    "coordinate descent exceeded {MAX_SWEEPS} sweeps at lambda {lambda:e}"
                )));
            }
            let delta = self.sweep(&all, lambda, pen, q, b, gb);
            if delta < CD_TOL * (1.0 + b.amax()) {
                return Ok(());
            }
        }
    }

    /// Residual sum of squares via Gram identities; `b` is sparse so this
    /// costs `O(k p)` instead of `O(p T)`.
    fn rss(&self, yc_norm2: f64, q: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let tf = self.t as f64;
        let mut qb = 0.0;
        let mut bgb = 0.0;
        for j in 0..self.p {
            if b[j] != 0.0 {
                qb += q[j] * b[j];
                let mut gj = 0.0;
                for i in 0..self.p {
                    if b[i] != 0.0 {
                        gj += self.gram[(i, j)] * b[i];
                    }
                }
                bgb += b[j] * gj;
            }
        }
        (yc_norm2 - 2.0 * tf * qb + tf * bgb).max(0.0)
    }

    /// Runs the descending penalty path and keeps the BIC-best solution,
    /// breaking ties toward the larger penalty.
    fn path(&self, yc: &DVector<f64>, pen: &[f64], grid: &[f64]) -> Result<PathFit> {
        let tf = self.t as f64;
        let q = self.xs.transpose() * yc / tf;
        let yc_norm2 = yc.norm_squared();

        if grid.is_empty() {
            return Ok(PathFit {
                b: DVector::zeros(self.p),
                lambda: 0.0,
                bic: bic(self.t, yc_norm2, 0),
            });
        }

        let mut b = DVector::zeros(self.p);
        let mut gb = DVector::zeros(self.p);
        let mut best: Option<PathFit> = None;
        for &lambda in grid {
            self.cd_solve(lambda, pen, &q, &mut b, &mut gb)?;
            let k = b.iter().filter(|&&x| x != 0.0).count();
            let value = bic(self.t, self.rss(yc_norm2, &q, &b), k);
            let better = match &best {
                None => true,
                Some(prev) => value < prev.bic,
            };
            if better {
                best = Some(PathFit {
                    b: b.clone(),
                    lambda,
                    bic: value,
                });
            }
        }
        Ok(best.expect("non-empty grid"))
    }

    /// Largest penalty with an all-zero solution, given per-coordinate
    /// penalty multipliers in standardized space.
    fn lambda_max(&self, yc: &DVector<f64>, pen: &[f64]) -> f64 {
        let q = self.xs.transpose() * yc / self.t as f64;
        let mut lm = 0.0f64;
        for j in 0..self.p {
            if pen[j].is_finite() && pen[j] > 0.0 {
                lm = lm.max(q[j].abs() / pen[j]);
            }
        }
        lm
    }

    fn finish(&self, y_mean: f64, fit: PathFit, method: FitMethod) -> LinearFit {
        let mut coefs = DVector::zeros(self.p);
        let mut active = Vec::new();
        let mut intercept = y_mean;
        for j in 0..self.p {
            if fit.b[j] != 0.0 {
                let beta = fit.b[j] / self.x_scale[j];
                coefs[j] = beta;
                intercept -= beta * self.x_mean[j];
                active.push(j);
            }
        }
        LinearFit {
            intercept,
            coefs,
            active,
            lambda: fit.lambda,
            bic: fit.bic,
            method,
        }
    }

    /// Penalty multipliers putting a plain unit weight on each original-scale
    /// coefficient: in standardized space that is `1 / scale_j`.
    fn plain_pen(&self) -> Vec<f64> {
        (0..self.p)
            .map(|j| {
                if self.x_scale[j] > 0.0 {
                    1.0 / self.x_scale[j]
                } else {
                    f64::INFINITY
                }
            })
            .collect()
    }

    /// LASSO with the automatic penalty grid and BIC selection.
    pub fn lasso(&self, y: &DVector<f64>) -> Result<LinearFit> {
        let (yc, y_mean) = self.center_y(y)?;
        let pen = self.plain_pen();
        let lm = self.lambda_max(&yc, &pen);
        let grid = make_grid(lm);
        let fit = self.path(&yc, &pen, &grid)?;
        Ok(self.finish(y_mean, fit, FitMethod::Lasso))
    }

    /// LASSO solved at one fixed penalty (no grid, no BIC selection).
    pub fn lasso_at(&self, y: &DVector<f64>, lambda: f64) -> Result<LinearFit> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Validation(format!(
                "penalty must be finite and non-negative, got {lambda}"
            )));
        }
        let (yc, y_mean) = self.center_y(y)?;
        let pen = self.plain_pen();
        let fit = self.path(&yc, &pen, &[lambda])?;
        Ok(self.finish(y_mean, fit, FitMethod::Lasso))
    }

    /// Adaptive LASSO: a first LASSO pass picks the candidate set and the
    /// weights `1/|beta_j|`; a second weighted pass with its own BIC-chosen
    /// penalty refits inside that set. An empty first-stage set short-circuits
    /// to the intercept-only model.
    pub fn adalasso(&self, y: &DVector<f64>) -> Result<LinearFit> {
        let step1 = self.lasso(y)?;
        if step1.active.is_empty() {
            return Ok(LinearFit {
                method: FitMethod::AdaLasso,
                ..step1
            });
        }
        let (yc, y_mean) = self.center_y(y)?;
        // In standardized space the weight 1/|beta_j| becomes 1/|b_j|.
        let pen: Vec<f64> = (0..self.p)
            .map(|j| {
                let b1 = step1.coefs[j] * self.x_scale[j];
                if b1 != 0.0 {
                    1.0 / b1.abs()
                } else {
                    f64::INFINITY
                }
            })
            .collect();
        let lm = self.lambda_max(&yc, &pen);
        let grid = make_grid(lm);
        let fit = self.path(&yc, &pen, &grid)?;
        Ok(self.finish(y_mean, fit, FitMethod::AdaLasso))
    }
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

fn make_grid(lambda_max: f64) -> Vec<f64> {
    if !(lambda_max > 0.0) || !lambda_max.is_finite() {
        return Vec::new();
    }
    (0..GRID_LEN)
        .map(|i| lambda_max * GRID_RATIO.powf(i as f64 / (GRID_LEN - 1) as f64))
        .collect()
}

/// LASSO fit with BIC-selected penalty. `z` must carry a leading intercept
/// column of ones, which is never penalized.
pub fn lasso_fit(y: &DVector<f64>, z: &DMatrix<f64>) -> Result<LinearFit> {
    DesignWorkspace::new(z)?.lasso(y)
}

/// LASSO fit at one fixed penalty.
pub fn lasso_fit_at(y: &DVector<f64>, z: &DMatrix<f64>, lambda: f64) -> Result<LinearFit> {
    DesignWorkspace::new(z)?.lasso_at(y, lambda)
}

/// Adaptive LASSO fit (two-stage, both penalties BIC-selected).
pub fn adalasso_fit(y: &DVector<f64>, z: &DMatrix<f64>) -> Result<LinearFit> {
    DesignWorkspace::new(z)?.adalasso(y)
}

/// Ordinary least squares via the normal equations, with a ridge retry of
/// `1e-12 trace(Z'Z)` on the diagonal if the Cholesky factorization fails.
pub fn ols_fit(y: &DVector<f64>, z: &DMatrix<f64>) -> Result<LinearFit> {
    let t = z.nrows();
    if t == 0 || z.ncols() == 0 {
        return Err(Error::Validation("empty design matrix".into()));
    }
    if y.len() != t {
        return Err(Error::Dimension(format!(
            "response has {} rows, design has {t}",
            y.len()
        )));
    }
    if z.iter().any(|x| !x.is_finite()) || y.iter().any(|x| !x.is_finite()) {
        return Err(Error::Validation(
            "non-finite entries in regression inputs".into(),
        ));
    }
    if z.column(0).iter().any(|&x| x != 1.0) {
        return Err(Error::Validation(
            "first design column must be the intercept (all ones)".into(),
        ));
    }
    let g = z.transpose() * z;
    let rhs = z.transpose() * y;
    let gamma = match g.clone().cholesky() {
        Some(chol) => chol.solve(&rhs),
        None => {
            let ridge = 1e-12 * g.trace();
            let mut gr = g;
            for i in 0..gr.nrows() {
                gr[(i, i)] += ridge;
            }
            gr.cholesky().map(|chol| chol.solve(&rhs)).ok_or_else(|| {
                Error::Numeric("normal equations singular even after ridge".into())
            })?
        }
    };
    let p = z.ncols() - 1;
    let resid = y - z * &gamma;
    let rss = resid.norm_squared();
    Ok(LinearFit {
        intercept: gamma[0],
        coefs: gamma.rows(1, p).into_owned(),
        active: (0..p).collect(),
        lambda: 0.0,
        bic: bic(t, rss, p),
        method: FitMethod::Ols,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn har_regressors_single_series() {
        let series = DMatrix::from_iterator(22, 1, (1..=22).map(|x| x as f64));
        let (r, offset) = har_regressors(&series, HAR_DEFAULT_SPANS).unwrap();
        assert_eq!(offset, 21);
        assert_eq!(r.nrows(), 1);
        assert_eq!(r.ncols(), 3);
        assert_abs_diff_eq!(r[(0, 0)], 22.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r[(0, 1)], 20.0, epsilon = 1e-12); // mean of 18..=22
        assert_abs_diff_eq!(r[(0, 2)], 11.5, epsilon = 1e-12); // mean of 1..=22
    }

    #[test]
    fn har_regressors_column_order() {
        // Two constant series: day/week/month means all equal the constant,
        // and columns are grouped by span, not by series.
        let mut series = DMatrix::zeros(25, 2);
        for t in 0..25 {
            series[(t, 0)] = 3.0;
            series[(t, 1)] = 7.0;
        }
        let (r, _) = har_regressors(&series, HAR_DEFAULT_SPANS).unwrap();
        assert_eq!(r.ncols(), 6);
        for row in 0..r.nrows() {
            for block in 0..3 {
                assert_abs_diff_eq!(r[(row, 2 * block)], 3.0, epsilon = 1e-12);
                assert_abs_diff_eq!(r[(row, 2 * block + 1)], 7.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn har_regressors_needs_month_of_history() {
        let series = DMatrix::zeros(21, 1);
        assert!(matches!(
            har_regressors(&series, HAR_DEFAULT_SPANS),
            Err(Error::InsufficientHistory(_))
        ));
    }

    #[test]
    fn bic_spot_value() {
        assert_abs_diff_eq!(bic(100, 1.0, 2), 2.0 * 100f64.ln(), epsilon = 1e-12);
        assert!(bic(50, 0.0, 3).is_finite());
    }

    fn design_with_ones(x: &DMatrix<f64>) -> DMatrix<f64> {
        let t = x.nrows();
        let mut z = DMatrix::zeros(t, x.ncols() + 1);
        for i in 0..t {
            z[(i, 0)] = 1.0;
        }
        for j in 0..x.ncols() {
            z.set_column(j + 1, &x.column(j));
        }
        z
    }

    #[test]
    fn single_variable_lasso_matches_closed_form() {
        // x centered with population variance 1.25 and y = 2x:
        // stationarity gives beta(lambda) = (2.5 - lambda) / 1.25.
        let x = DMatrix::from_column_slice(4, 1, &[-1.5, -0.5, 0.5, 1.5]);
        let y = DVector::from_vec(vec![-3.0, -1.0, 1.0, 3.0]);
        let z = design_with_ones(&x);
        let fit = lasso_fit_at(&y, &z, 1.25).unwrap();
        assert_abs_diff_eq!(fit.coefs[0], 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(fit.intercept, 0.0, epsilon = 1e-8);
        // At lambda_max = 2.5 the solution is exactly zero.
        let fit = lasso_fit_at(&y, &z, 2.5).unwrap();
        assert_eq!(fit.active, Vec::<usize>::new());
        let fit = lasso_fit_at(&y, &z, 2.49).unwrap();
        assert_eq!(fit.active, vec![0]);
    }

    #[test]
    fn intercept_is_never_penalized() {
        let x = DMatrix::from_column_slice(4, 1, &[-1.5, -0.5, 0.5, 1.5]);
        let y = DVector::from_vec(vec![97.0, 99.0, 101.0, 103.0]);
        let z = design_with_ones(&x);
        let fit = lasso_fit_at(&y, &z, 1e6).unwrap();
        assert!(fit.active.is_empty());
        assert_abs_diff_eq!(fit.intercept, 100.0, epsilon = 1e-10);
    }

    fn random_problem(t: usize, p: usize, seed: u64) -> (DVector<f64>, DMatrix<f64>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        // Heterogeneous column scales to exercise the standardization.
        let scales: Vec<f64> = (0..p).map(|j| 10f64.powi((j % 5) as i32 - 2)).collect();
        let x = DMatrix::from_fn(t, p, |_, j| scales[j] * normal.sample(&mut rng));
        let mut beta = DVector::zeros(p);
        for j in 0..p.min(4) {
            beta[j] = (j as f64 + 1.0) / scales[j];
        }
        let y = DVector::from_fn(t, |i, _| {
            let mut v = 0.5;
            for j in 0..p {
                v += x[(i, j)] * beta[j];
            }
            v + 0.3 * normal.sample(&mut rng)
        });
        (y, x)
    }

    /// Largest KKT violation of a plain-LASSO fit on the original scale.
    fn kkt_violation(y: &DVector<f64>, z: &DMatrix<f64>, fit: &LinearFit) -> f64 {
        let t = z.nrows() as f64;
        let mut r = y.clone();
        for i in 0..z.nrows() {
            let mut pred = fit.intercept;
            for j in 0..fit.coefs.len() {
                pred += fit.coefs[j] * z[(i, j + 1)];
            }
            r[i] -= pred;
        }
        let mut worst = 0.0f64;
        for j in 0..fit.coefs.len() {
            let g = z.column(j + 1).dot(&r) / t;
            if fit.coefs[j] != 0.0 {
                worst = worst.max((g.abs() - fit.lambda).abs());
            } else {
                worst = worst.max((g.abs() - fit.lambda).max(0.0));
            }
        }
        worst
    }

    #[test]
    fn lasso_satisfies_kkt_on_random_problems() {
        for seed in 0..15 {
            let (y, x) = random_problem(80, 12, seed);
            let z = design_with_ones(&x);
            let fit = lasso_fit(&y, &z).unwrap();
            assert!(fit.lambda > 0.0);
            assert!(fit.bic.is_finite());
            let v = kkt_violation(&y, &z, &fit);
            assert!(v <= 1e-6, "seed {seed}: KKT violation {v:e}");
        }
    }

    #[test]
    fn duplicated_column_splits_coefficient() {
        let (y, x) = random_problem(60, 1, 7);
        let z1 = design_with_ones(&x);
        let single = lasso_fit_at(&y, &z1, 0.05).unwrap();
        let mut xx = DMatrix::zeros(60, 2);
        xx.set_column(0, &x.column(0));
        xx.set_column(1, &x.column(0));
        let z2 = design_with_ones(&xx);
        let dup = lasso_fit_at(&y, &z2, 0.05).unwrap();
        assert_abs_diff_eq!(dup.coefs[0] + dup.coefs[1], single.coefs[0], epsilon = 1e-7);
        // Objective value is unchanged by the duplication.
        let obj = |z: &DMatrix<f64>, f: &LinearFit| {
            let mut rss = 0.0;
            for i in 0..60 {
                let mut pred = f.intercept;
                for j in 0..f.coefs.len() {
                    pred += f.coefs[j] * z[(i, j + 1)];
                }
                rss += (y[i] - pred) * (y[i] - pred);
            }
            rss / 60.0 + 2.0 * 0.05 * f.coefs.iter().map(|c| c.abs()).sum::<f64>()
        };
        assert_abs_diff_eq!(obj(&z1, &single), obj(&z2, &dup), epsilon = 1e-9);
    }

    #[test]
    fn zero_variance_column_is_inert() {
        let (y, x) = random_problem(50, 3, 11);
        let mut xx = DMatrix::zeros(50, 4);
        for j in 0..3 {
            xx.set_column(j, &x.column(j));
        }
        for i in 0..50 {
            xx[(i, 3)] = 42.0;
        }
        let z = design_with_ones(&xx);
        let fit = lasso_fit(&y, &z).unwrap();
        assert_eq!(fit.coefs[3], 0.0);
        assert!(!fit.active.contains(&3));
        let fit = adalasso_fit(&y, &z).unwrap();
        assert_eq!(fit.coefs[3], 0.0);
    }

    #[test]
    fn constant_response_gives_intercept_only() {
        let (_, x) = random_problem(40, 5, 13);
        let y = DVector::from_element(40, 3.25);
        let z = design_with_ones(&x);
        for fit in [lasso_fit(&y, &z).unwrap(), adalasso_fit(&y, &z).unwrap()] {
            assert!(fit.active.is_empty());
            assert_abs_diff_eq!(fit.intercept, 3.25, epsilon = 1e-12);
            assert!(fit.bic.is_finite());
            assert_eq!(fit.lambda, 0.0);
        }
    }

    #[test]
    fn adalasso_active_set_nests_in_lasso() {
        for seed in 20..35 {
            let (y, x) = random_problem(90, 10, seed);
            let z = design_with_ones(&x);
            let l1 = lasso_fit(&y, &z).unwrap();
            let ada = adalasso_fit(&y, &z).unwrap();
            assert_eq!(ada.method, FitMethod::AdaLasso);
            for j in &ada.active {
                assert!(l1.active.contains(j), "seed {seed}: {j} not in step 1");
            }
        }
    }

    #[test]
    fn ols_matches_normal_equations_oracle() {
        let (y, x) = random_problem(70, 4, 17);
        let z = design_with_ones(&x);
        let fit = ols_fit(&y, &z).unwrap();
        // Independent least-squares solve via SVD.
        let gamma = z.clone().svd(true, true).solve(&y, 1e-13).unwrap();
        assert_abs_diff_eq!(fit.intercept, gamma[0], epsilon = 1e-8);
        for j in 0..4 {
            assert_abs_diff_eq!(fit.coefs[j], gamma[j + 1], epsilon = 1e-8);
        }
        assert_eq!(fit.active, vec![0, 1, 2, 3]);
        assert_eq!(fit.lambda, 0.0);
    }

    #[test]
    fn ols_ridge_fallback_on_duplicate_columns() {
        let (y, x) = random_problem(50, 1, 19);
        let mut xx = DMatrix::zeros(50, 2);
        xx.set_column(0, &x.column(0));
        xx.set_column(1, &x.column(0));
        let z = design_with_ones(&xx);
        let fit = ols_fit(&y, &z).unwrap();
        assert!(fit.coefs.iter().all(|c| c.is_finite()));
    }

    #[test]
    fn predict_checks_leading_one() {
        let (y, x) = random_problem(30, 2, 23);
        let z = design_with_ones(&x);
        let fit = ols_fit(&y, &z).unwrap();
        let good = DVector::from_vec(vec![1.0, 0.5, -0.5]);
        assert!(predict(&fit, &good).is_ok());
        let bad = DVector::from_vec(vec![0.9, 0.5, -0.5]);
        assert!(predict(&fit, &bad).is_err());
        let short = DVector::from_vec(vec![1.0, 0.5]);
        assert!(predict(&fit, &short).is_err());
    }

    #[test]
    fn workspace_reuse_matches_standalone_fits() {
        let (y1, x) = random_problem(60, 6, 29);
        let (y2, _) = random_problem(60, 6, 31);
        let z = design_with_ones(&x);
        let ws = DesignWorkspace::new(&z).unwrap();
        for y in [y1, y2] {
            let a = ws.lasso(&y).unwrap();
            let b = lasso_fit(&y, &z).unwrap();
            assert_eq!(a.lambda, b.lambda);
            for j in 0..6 {
                assert_abs_diff_eq!(a.coefs[j], b.coefs[j], epsilon = 1e-14);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn lasso_kkt_property(seed in 100u64..200) {
            let (y, x) = random_problem(60, 8, seed);
            let z = design_with_ones(&x);
            let fit = lasso_fit(&y, &z).unwrap();
            prop_assert!(kkt_violation(&y, &z, &fit) <= 1e-6);
        }

        #[test]
        fn adalasso_kkt_on_weighted_problem(seed in 200u64..240) {
            // For active coordinates the weighted-KKT condition is
            // |(1/T) Z_j' r| = lambda / |beta1_j| within tolerance.
            let (y, x) = random_problem(70, 6, seed);
            let z = design_with_ones(&x);
            let step1 = lasso_fit(&y, &z).unwrap();
            let ada = adalasso_fit(&y, &z).unwrap();
            if !ada.active.is_empty() {
                let t = z.nrows() as f64;
                let mut r = y.clone();
                for i in 0..z.nrows() {
                    let mut pred = ada.intercept;
                    for j in 0..ada.coefs.len() {
                        pred += ada.coefs[j] * z[(i, j + 1)];
                    }
                    r[i] -= pred;
                }
                for &j in &ada.active {
                    let g = z.column(j + 1).dot(&r) / t;
                    let target = ada.lambda / step1.coefs[j].abs();
                    prop_assert!((g.abs() - target).abs() <= 1e-6 * (1.0 + target));
                }
            }
        }
    }
}
