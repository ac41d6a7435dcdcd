//! Synthetic daily covariance panels with a known factor structure: factor
//! variances follow heterogeneous-horizon log-variance recursions, betas
//! drift as fractionally integrated paths, residuals are sector-block
//! matrices, and the observed panel adds measurement noise on top of the
//! noiseless truth.

use chrono::{Datelike, NaiveDate, Weekday};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::factor::{FactorSpec, SectorAssignment};
use crate::panel::{default_asset_names, CovPanel, ReturnsPanel};
use crate::transforms::psd_project;

/// Truncation order of the fractional-difference moving-average expansion.
const ARFIMA_TRUNCATION: usize = 10_000;

/// Names assigned to synthetic factors, market first.
pub const FACTOR_NAME_POOL: [&str; 7] = ["MKT", "SMB", "HML", "GP", "INV", "AG", "ACC"];

/// Relative sector sizes used when none are supplied; proportions follow a
/// typical large-cap industry breakdown.
const SECTOR_WEIGHT_TABLE: [usize; 10] = [31, 8, 65, 32, 61, 10, 45, 26, 36, 116];

/// Configuration for [`generate_synthetic`].
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_assets: usize,
    /// Number of factors, between 1 and 7.
    pub n_factors: usize,
    pub n_sectors: usize,
    pub n_days: usize,
    /// Day / week / month coefficients of the log-variance recursions;
    /// non-negative with sum below one.
    pub persistence: (f64, f64, f64),
    /// Fractional-differencing order of the beta paths, in `[0, 0.45]`.
    pub beta_d: f64,
    /// Within-sector residual correlation, in `[0, 1)`.
    pub block_strength: f64,
    /// Common multiplier on every innovation amplitude (vol-of-vol, beta
    /// drift, measurement noise).
    pub noise_scale: f64,
    /// Explicit sector sizes; derived from built-in proportions when `None`.
    pub sector_sizes: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_assets: 30,
            n_factors: 3,
            n_sectors: 3,
            n_days: 600,
            persistence: (0.35, 0.30, 0.25),
            beta_d: 0.4,
            block_strength: 0.3,
            noise_scale: 1.0,
            sector_sizes: None,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_assets < 2 {
            return Err(Error::Validation("need at least 2 assets".into()));
        }
        if self.n_factors == 0 || self.n_factors > FACTOR_NAME_POOL.len() {
            return Err(Error::Validation(format!(
                "n_factors must lie in 1..={}, got {}",
                FACTOR_NAME_POOL.len(),
                self.n_factors
            )));
        }
        if self.n_factors >= self.n_assets {
            return Err(Error::Validation(format!(
                "n_factors {} must be below n_assets {}",
                self.n_factors, self.n_assets
            )));
        }
        if self.n_sectors == 0 || self.n_sectors > self.n_assets {
            return Err(Error::Validation(format!(
                "n_sectors {} must lie in 1..={}",
                self.n_sectors, self.n_assets
            )));
        }
        if self.n_days < 30 {
            return Err(Error::Validation(format!(
                "n_days {} too short to be useful",
                self.n_days
            )));
        }
        let (a, b, c) = self.persistence;
        if a < 0.0 || b < 0.0 || c < 0.0 || a + b + c >= 1.0 {
            return Err(Error::Validation(format!(
                "persistence ({a}, {b}, {c}) must be non-negative with sum < 1"
            )));
        }
        if !(0.0..=0.45).contains(&self.beta_d) {
            return Err(Error::Validation(format!(
                "beta_d {} outside [0, 0.45]",
                self.beta_d
            )));
        }
        if !(0.0..1.0).contains(&self.block_strength) {
            return Err(Error::Validation(format!(
                "block_strength {} outside [0, 1)",
                self.block_strength
            )));
        }
        if !(self.noise_scale > 0.0) || !self.noise_scale.is_finite() {
            return Err(Error::Validation(format!(
                "noise_scale {} must be positive and finite",
                self.noise_scale
            )));
        }
        if let Some(sizes) = &self.sector_sizes {
            if sizes.len() != self.n_sectors {
                return Err(Error::Validation(format!(
                    "sector_sizes has {} entries for {} sectors",
                    sizes.len(),
                    self.n_sectors
                )));
            }
            if sizes.iter().any(|&s| s == 0) {
                return Err(Error::Validation("sector sizes must be positive".into()));
            }
            if sizes.iter().sum::<usize>() != self.n_assets {
                return Err(Error::Validation(format!(
                    "sector sizes sum to {}, expected {}",
                    sizes.iter().sum::<usize>(),
                    self.n_assets
                )));
            }
        }
        Ok(())
    }
}

/// Splits `n_assets` into `n_sectors` groups proportional to the built-in
/// size table (cycled if more than ten sectors), using largest-remainder
/// rounding and guaranteeing every sector at least one asset.
pub fn default_sector_sizes(n_assets: usize, n_sectors: usize) -> Vec<usize> {
    let weights: Vec<f64> = (0..n_sectors)
        .map(|s| SECTOR_WEIGHT_TABLE[s % SECTOR_WEIGHT_TABLE.len()] as f64)
        .collect();
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights
        .iter()
        .map(|w| n_assets as f64 * w / total)
        .collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    // Hand out the leftover seats by descending fractional part, ties going
    // to the earlier sector.
    let mut order: Vec<usize> = (0..n_sectors).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..(n_assets - assigned) {
        sizes[order[i % n_sectors]] += 1;
    }
    // No sector may end up empty; take seats from the largest.
    for s in 0..n_sectors {
        if sizes[s] == 0 {
            let donor = (0..n_sectors)
                .max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)))
                .unwrap();
            sizes[donor] -= 1;
            sizes[s] += 1;
        }
    }
    sizes
}

/// Generates `n` observations of a fractionally integrated series with unit
/// innovation variance, normalized so the truncated process itself has unit
/// variance. Uses the moving-average expansion of `(1 - L)^{-d}` truncated
/// at 10,000 lags with a warm-up of `min(n, 10_000)` presample innovations.
pub fn arfima_series(d: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if !(d.abs() < 0.5) {
        return Err(Error::Validation(format!(
            "fractional order {d} outside (-0.5, 0.5)"
        )));
    }
    if n == 0 {
        return Err(Error::Validation("series length must be positive".into()));
    }
    let warm = n.min(ARFIMA_TRUNCATION);
    let max_lag = (warm + n - 1).min(ARFIMA_TRUNCATION);
    let mut psi = Vec::with_capacity(max_lag + 1);
    psi.push(1.0f64);
    for j in 1..=max_lag {
        let prev = psi[j - 1];
        psi.push(prev * (j as f64 - 1.0 + d) / j as f64);
    }
    let norm = psi.iter().map(|p| p * p).sum::<f64>().sqrt();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let eps: Vec<f64> = (0..warm + n).map(|_| normal.sample(rng)).collect();
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let top = (warm + t).min(max_lag);
        let mut acc = 0.0;
        for j in 0..=top {
            acc += psi[j] * eps[warm + t - j];
        }
        out.push(acc / norm);
    }
    Ok(out)
}

/// Everything the generator knows that an estimator would not: the
/// noiseless covariance path underlying the observed panel.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub noiseless: CovPanel,
}

/// Output bundle of [`generate_synthetic`].
#[derive(Debug)]
pub struct SyntheticData {
    pub covariances: CovPanel,
    pub returns: ReturnsPanel,
    pub factor_spec: FactorSpec,
    pub sectors: SectorAssignment,
    pub truth: GroundTruth,
}

/// Trading dates: weekdays starting 2006-01-02.
fn weekday_dates(n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut day = NaiveDate::from_ymd_opt(2006, 1, 2).expect("valid date");
    while out.len() < n {
        if !matches!(day.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(day);
        }
        day = day.succ_opt().expect("date overflow");
    }
    out
}

const BURN_IN: usize = 100;

/// One step of the log-variance recursion: day, week, and month averages of
/// the level history plus a Gaussian innovation.
struct LogVarPath {
    history: Vec<f64>,
}

impl LogVarPath {
    fn new(start: f64) -> Self {
        LogVarPath {
            history: vec![start; 22],
        }
    }

    fn step(
        &mut self,
        intercept: f64,
        coeffs: (f64, f64, f64),
        vol_of_vol: f64,
        shock: f64,
    ) -> f64 {
        let h = &self.history;
        let len = h.len();
        let day = h[len - 1];
        let week = h[len - 5..].iter().sum::<f64>() / 5.0;
        let month = h[len - 22..].iter().sum::<f64>() / 22.0;
        let next =
            intercept + coeffs.0 * day + coeffs.1 * week + coeffs.2 * month + vol_of_vol * shock;
        self.history.push(next);
        next
    }
}

/// Generates an observed covariance panel, matching returns, the factor
/// weights that recover the planted structure, sector labels, and the
/// noiseless truth. Fully determined by the config (including its seed).
pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticData> {
    config.validate()?;
    let n = config.n_assets;
    let k = config.n_factors;
    let t_days = config.n_days;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1.0).unwrap();

    let sizes = match &config.sector_sizes {
        Some(s) => s.clone(),
        None => default_sector_sizes(n, config.n_sectors),
    };
    let assets = default_asset_names(n);

    // Base loadings: market row is exactly one, other rows are mean-zero.
    let mut b0 = DMatrix::<f64>::zeros(k, n);
    for i in 0..n {
        b0[(0, i)] = 1.0;
    }
    for row in 1..k {
        for i in 0..n {
            b0[(row, i)] = 0.5 * normal.sample(&mut rng);
        }
    }

    // Beta drift paths, one fractionally integrated series per loading.
    let beta_amp = 0.1 * config.noise_scale;
    let mut beta_paths = Vec::with_capacity(k * n);
    for _ in 0..k * n {
        beta_paths.push(arfima_series(config.beta_d, t_days, &mut rng)?);
    }

    // Factor log-variance paths. The market factor gets the larger base
    // variance.
    let vol_of_vol = 0.3 * config.noise_scale;
    let sum_p = config.persistence.0 + config.persistence.1 + config.persistence.2;
    let factor_base: Vec<f64> = (0..k).map(|j| if j == 0 { 1e-4 } else { 0.5e-4 }).collect();
    let mut factor_paths: Vec<LogVarPath> = factor_base
        .iter()
        .map(|b| LogVarPath::new(b.ln()))
        .collect();
    let mut factor_levels = vec![vec![0.0f64; t_days]; k];
    for step in 0..BURN_IN + t_days {
        for j in 0..k {
            let c = factor_base[j].ln() * (1.0 - sum_p);
            let shock = normal.sample(&mut rng);
            let h = factor_paths[j].step(c, config.persistence, vol_of_vol, shock);
            if step >= BURN_IN {
                factor_levels[j][step - BURN_IN] = h;
            }
        }
    }

    // Factor correlation: constant, equicorrelated at 0.3.
    let mut r_f = DMatrix::<f64>::from_element(k, k, 0.3);
    for j in 0..k {
        r_f[(j, j)] = 1.0;
    }

    // Residual blocks: per-sector log-level paths, per-asset scale spreads,
    // equicorrelation within the block.
    let residual_base: f64 = 0.5e-4;
    let asset_scales: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = normal.sample(&mut rng);
            (0.25 * z).exp()
        })
        .collect();
    let mut block_paths: Vec<LogVarPath> = (0..sizes.len())
        .map(|_| LogVarPath::new(residual_base.ln()))
        .collect();
    let mut block_levels = vec![vec![0.0f64; t_days]; sizes.len()];
    for step in 0..BURN_IN + t_days {
        for (s, path) in block_paths.iter_mut().enumerate() {
            let c = residual_base.ln() * (1.0 - sum_p);
            let shock = normal.sample(&mut rng);
            let h = path.step(c, config.persistence, vol_of_vol, shock);
            if step >= BURN_IN {
                block_levels[s][step - BURN_IN] = h;
            }
        }
    }

    // Assemble day by day: covariance truth, measurement noise, repair,
    // then a return draw from the observed matrix.
    let meas_amp = 0.01 * config.noise_scale;
    let rho = config.block_strength;
    let mut noiseless = Vec::with_capacity(t_days);
    let mut observed = Vec::with_capacity(t_days);
    let mut returns = DMatrix::<f64>::zeros(t_days, n);
    for t in 0..t_days {
        // Loadings for the day.
        let mut b_t = b0.clone();
        for row in 0..k {
            for i in 0..n {
                b_t[(row, i)] += beta_amp * beta_paths[row * n + i][t];
            }
        }
        // Factor covariance for the day.
        let mut sigma_f = r_f.clone();
        for a in 0..k {
            for b in 0..k {
                let va = (0.5 * factor_levels[a][t]).exp();
                let vb = (0.5 * factor_levels[b][t]).exp();
                sigma_f[(a, b)] *= va * vb;
            }
        }
        let mut sigma = b_t.transpose() * &sigma_f * &b_t;
        // Residual blocks on the diagonal.
        let mut offset = 0;
        for (s, &m) in sizes.iter().enumerate() {
            let level = block_levels[s][t].exp();
            for a in 0..m {
                for b in 0..m {
                    let corr = if a == b { 1.0 } else { rho };
                    sigma[(offset + a, offset + b)] +=
                        level * asset_scales[offset + a] * asset_scales[offset + b] * corr;
                }
            }
            offset += m;
        }
        let mean_diag = sigma.trace() / n as f64;
        noiseless.push(sigma.clone());

        // Symmetric measurement noise, then repair to a positive matrix.
        let noise_sd = meas_amp * mean_diag;
        for i in 0..n {
            for j in 0..=i {
                let e = noise_sd * normal.sample(&mut rng);
                sigma[(i, j)] += e;
                if i != j {
                    sigma[(j, i)] += e;
                }
            }
        }
        let repaired = psd_project(&sigma, 1e-8 * mean_diag)?;

        // Return draw consistent with the observed matrix.
        let chol = nalgebra::Cholesky::new(repaired.clone()).ok_or_else(|| {
            Error::Numeric(format!(
                "observed covariance on day {t} not positive definite"
            ))
        })?;
        let z = DVector::from_fn(n, |_, _| normal.sample(&mut rng));
        let r = chol.l() * z;
        for i in 0..n {
            returns[(t, i)] = r[i];
        }
        observed.push(repaired);
    }

    let dates = weekday_dates(t_days);
    let covariances = CovPanel::from_matrices(dates.clone(), assets.clone(), &observed)?;
    let truth = GroundTruth {
        noiseless: CovPanel::from_matrices(dates.clone(), assets.clone(), &noiseless)?,
    };
    let returns = ReturnsPanel::new(dates, assets.clone(), returns, DVector::zeros(t_days))?;

    // Factor weights that undo the base loadings: W = B0' (B0 B0')^{-1}.
    let gram = &b0 * b0.transpose();
    let inv = gram
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numeric("base loadings are rank deficient".into()))?;
    let weights = b0.transpose() * inv;
    let factor_names: Vec<String> = FACTOR_NAME_POOL[..k]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let factor_spec = FactorSpec::new(assets.clone(), weights, factor_names)?;

    let mut sector_of = Vec::with_capacity(n);
    for (s, &m) in sizes.iter().enumerate() {
        sector_of.extend(std::iter::repeat_n(s, m));
    }
    let sector_names: Vec<String> = (0..sizes.len())
        .map(|s| format!("SEC{:02}", s + 1))
        .collect();
    let sectors = SectorAssignment::new(assets, sector_of, sector_names)?;

    Ok(SyntheticData {
        covariances,
        returns,
        factor_spec,
        sectors,
        truth,
    })
}
