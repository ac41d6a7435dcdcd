//! Long-memory diagnostics (log-periodogram and local Whittle estimators of
//! the fractional-differencing order) and an eigenvalue scan that counts
//! systematic factors left in a residual panel.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Which estimator produced a `LongMemoryEstimate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LongMemoryMethod {
    Gph,
    LocalWhittle,
}

#[derive(Debug, Clone)]
pub struct LongMemoryEstimate {
    pub d_hat: f64,
    pub bandwidth: usize,
    pub method: LongMemoryMethod,
}

fn check_series(series: &[f64], bandwidth: Option<usize>) -> Result<usize> {
    let t = series.len();
    if t < 32 {
        return Err(Error::InsufficientHistory(format!(
            "long-memory estimation needs at least 32 observations, got {t}"
        )));
    }
    if series.iter().any(|x| !x.is_finite()) {
        return Err(Error::Validation(
            "series contains non-finite values".into(),
        ));
    }
    let mean = series.iter().sum::<f64>() / t as f64;
    if series.iter().all(|x| (x - mean).abs() < 1e-300) {
        return Err(Error::Validation("series is constant".into()));
    }
    let m = bandwidth.unwrap_or_else(|| (t as f64).sqrt().floor() as usize);
    if m < 2 || m > t / 2 {
        return Err(Error::Validation(format!(
            "bandwidth {m} outside [2, {}]",
            t / 2
        )));
    }
    Ok(m)
}

/// Periodogram `I(l_j) = |sum_t x_t e^{-i l_j t}|^2 / (2 pi T)` at the first
/// `m` Fourier frequencies `l_j = 2 pi j / T`, computed on the centered
/// series by direct summation.
fn periodogram(series: &[f64], m: usize) -> Vec<f64> {
    let t = series.len();
    let mean = series.iter().sum::<f64>() / t as f64;
    let centered: Vec<f64> = series.iter().map(|x| x - mean).collect();
    let mut out = Vec::with_capacity(m);
    for j in 1..=m {
        let lambda = 2.0 * std::f64::consts::PI * j as f64 / t as f64;
        let mut re = 0.0;
        let mut im = 0.0;
        for (idx, x) in centered.iter().enumerate() {
            let phase = lambda * idx as f64;
            re += x * phase.cos();
            im -= x * phase.sin();
        }
        out.push((re * re + im * im) / (2.0 * std::f64::consts::PI * t as f64));
    }
    out
}

/// Log-periodogram regression estimate of the fractional-differencing
/// order: regress `ln I(l_j)` on `-2 ln(2 sin(l_j / 2))` with an intercept
/// over the first `bandwidth` Fourier frequencies (default `floor(sqrt(T))`).
pub fn gph_estimate(series: &[f64], bandwidth: Option<usize>) -> Result<LongMemoryEstimate> {
    let m = check_series(series, bandwidth)?;
    let t = series.len();
    let pgram = periodogram(series, m);
    let mut xs = Vec::with_capacity(m);
    let mut ys = Vec::with_capacity(m);
    for (idx, i_j) in pgram.iter().enumerate() {
        let lambda = 2.0 * std::f64::consts::PI * (idx + 1) as f64 / t as f64;
        xs.push(-2.0 * (2.0 * (lambda / 2.0).sin()).ln());
        // Floor the periodogram so exact spectral zeros cannot poison the
        // regression with infinities.
        ys.push(i_j.max(1e-300).ln());
    }
    let mf = m as f64;
    let x_mean = xs.iter().sum::<f64>() / mf;
    let y_mean = ys.iter().sum::<f64>() / mf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for j in 0..m {
        let dx = xs[j] - x_mean;
        sxx += dx * dx;
        sxy += dx * (ys[j] - y_mean);
    }
    if sxx <= 0.0 {
        return Err(Error::Numeric(
            "degenerate regressor in log-periodogram fit".into(),
        ));
    }
    Ok(LongMemoryEstimate {
        d_hat: sxy / sxx,
        bandwidth: m,
        method: LongMemoryMethod::Gph,
    })
}

/// Local Whittle estimate: minimizes
/// `R(d) = ln((1/m) sum_j l_j^{2d} I(l_j)) - 2d (1/m) sum_j ln l_j`
/// over `d` in `[-0.49, 0.99]` by a coarse grid scan refined with golden
/// section search.
pub fn local_whittle_estimate(
    series: &[f64],
    bandwidth: Option<usize>,
) -> Result<LongMemoryEstimate> {
    let m = check_series(series, bandwidth)?;
    let t = series.len();
    let pgram = periodogram(series, m);
    let lambdas: Vec<f64> = (1..=m)
        .map(|j| 2.0 * std::f64::consts::PI * j as f64 / t as f64)
        .collect();
    let mean_log_lambda = lambdas.iter().map(|l| l.ln()).sum::<f64>() / m as f64;
    let objective = |d: f64| -> f64 {
        let mut acc = 0.0;
        for j in 0..m {
            acc += lambdas[j].powf(2.0 * d) * pgram[j];
        }
        (acc / m as f64).max(1e-300).ln() - 2.0 * d * mean_log_lambda
    };

    const LO: f64 = -0.49;
    const HI: f64 = 0.99;
    const COARSE: usize = 61;
    let mut best_idx = 0;
    let mut best_val = f64::INFINITY;
    for i in 0..COARSE {
        let d = LO + (HI - LO) * i as f64 / (COARSE - 1) as f64;
        let v = objective(d);
        if v < best_val {
            best_val = v;
            best_idx = i;
        }
    }
    let step = (HI - LO) / (COARSE - 1) as f64;
    let mut a = (LO + step * (best_idx as f64 - 1.0)).max(LO);
    let mut b = (LO + step * (best_idx as f64 + 1.0)).min(HI);
    // Golden-section refinement to 1e-6.
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d_pt = a + phi * (b - a);
    let mut fc = objective(c);
    let mut fd = objective(d_pt);
    while b - a > 1e-6 {
        if fc < fd {
            b = d_pt;
            d_pt = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = objective(c);
        } else {
            a = c;
            c = d_pt;
            fc = fd;
            d_pt = a + phi * (b - a);
            fd = objective(d_pt);
        }
    }
    Ok(LongMemoryEstimate {
        d_hat: 0.5 * (a + b),
        bandwidth: m,
        method: LongMemoryMethod::LocalWhittle,
    })
}

/// Result of the omitted-factor eigenvalue scan.
#[derive(Debug, Clone)]
pub struct OmittedFactorScan {
    /// `xi[k]` for `k = 0..=k_max`: the `(k+1)`-th largest eigenvalue of the
    /// scaled residual second-moment matrix minus the noise benchmark.
    pub xi: Vec<f64>,
    /// Noise benchmark `g(N, T)`.
    pub benchmark: f64,
    /// Smallest `k` with `xi[k] < 0`: the number of systematic factors the
    /// residuals still contain. `None` if every scanned value is
    /// non-negative.
    pub detected_k: Option<usize>,
}

/// Scans residuals (rows are days, columns assets) for leftover factor
/// structure by comparing ordered eigenvalues of `(1/(NT)) E'E` against the
/// benchmark `g = ((N+T)/(NT)) ln(NT/(N+T)) sigma2`.
pub fn omitted_factor_scan(residuals: &DMatrix<f64>, k_max: usize) -> Result<OmittedFactorScan> {
    let t = residuals.nrows();
    let n = residuals.ncols();
    if t < 2 || n < 2 {
        return Err(Error::Validation(format!(
            "residual panel {t}x{n} too small for the eigenvalue scan"
        )));
    }
    if residuals.iter().any(|x| !x.is_finite()) {
        return Err(Error::Validation(
            "residuals contain non-finite values".into(),
        ));
    }
    if k_max + 1 > n.min(t) {
        return Err(Error::Validation(format!(
            "k_max {k_max} needs eigenvalue {} but rank is at most {}",
            k_max + 1,
            n.min(t)
        )));
    }
    let nt = (n * t) as f64;
    // Work with the smaller Gram matrix; nonzero eigenvalues coincide.
    let gram = if n <= t {
        residuals.transpose() * residuals
    } else {
        residuals * residuals.transpose()
    };
    let sigma2 = gram.trace() / nt;
    let eig = crate::transforms::eigen_sym(&gram)?;
    let dim = eig.values.len();
    let mut mu: Vec<f64> = (0..=k_max)
        .map(|k| eig.values[dim - 1 - k].max(0.0) / nt)
        .collect();
    // Guard against tiny negative round-off from the eigensolver.
    for v in &mut mu {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let ratio = (n + t) as f64 / nt;
    let benchmark = ratio * (1.0 / ratio).ln() * sigma2;
    let xi: Vec<f64> = mu.iter().map(|m| m - benchmark).collect();
    let detected_k = xi.iter().position(|&x| x < 0.0);
    Ok(OmittedFactorScan {
        xi,
        benchmark,
        detected_k,
    })
}
