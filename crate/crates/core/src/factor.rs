//! Factor structure: observable-portfolio factor covariances, loadings,
//! sector-blocked residuals, and the residual significance pattern.
//!
//! Each day's covariance matrix `S` is split against a fixed `N x K` weight
//! matrix `W` of factor-mimicking portfolios as
//!
//! ```text
//! S = B' S_f B + S_eps,   S_f = W' S W,   B = S_f^{-1} W' S,
//! ```
//!
//! so the residual `S_eps` is whatever the factors do not span. The residual
//! is modelled blockwise on sector diagonal blocks.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::panel::{vech_index, CovPanel};

/// Ridge added to the factor covariance diagonal (relative to its mean
/// diagonal) when the plain solve for loadings fails.
pub const LOADINGS_RIDGE: f64 = 1e-10;

/// Fixed factor-mimicking portfolio weights, one column per factor.
#[derive(Debug, Clone)]
pub struct FactorSpec {
    pub assets: Vec<String>,
    /// `N x K` weight matrix.
    pub weights: DMatrix<f64>,
    pub factor_names: Vec<String>,
}

impl FactorSpec {
    pub fn new(
        assets: Vec<String>,
        weights: DMatrix<f64>,
        factor_names: Vec<String>,
    ) -> Result<Self> {
        if weights.nrows() != assets.len() || weights.ncols() != factor_names.len() {
            return Err(Error::Dimension(format!(
                "weights {}x{} vs {} assets / {} factor names",
                weights.nrows(),
                weights.ncols(),
                assets.len(),
                factor_names.len()
            )));
        }
        if weights.ncols() == 0 {
            return Err(Error::Validation(
                "factor spec needs at least one factor".into(),
            ));
        }
        if weights.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation(
                "factor weights contain non-finite entries".into(),
            ));
        }
        for k in 0..weights.ncols() {
            if weights.column(k).iter().all(|x| *x == 0.0) {
                return Err(Error::Validation(format!(
                    "factor column {k} is identically zero"
                )));
            }
        }
        Ok(FactorSpec {
            assets,
            weights,
            factor_names,
        })
    }

    pub fn n_factors(&self) -> usize {
        self.weights.ncols()
    }

    /// Restricts the spec to its first `k` factor columns.
    pub fn truncated(&self, k: usize) -> Result<FactorSpec> {
        if k == 0 || k > self.n_factors() {
            return Err(Error::Validation(format!(
                "cannot truncate a {}-factor spec to {k} factors",
                self.n_factors()
            )));
        }
        FactorSpec::new(
            self.assets.clone(),
            self.weights.columns(0, k).into_owned(),
            self.factor_names[..k].to_vec(),
        )
    }

    /// Reorders rows to match `assets`; every panel asset must be present.
    pub fn aligned_to(&self, assets: &[String]) -> Result<FactorSpec> {
        let perm = alignment_permutation(&self.assets, assets, "factor spec")?;
        let mut weights = DMatrix::zeros(assets.len(), self.n_factors());
        for (dst, &src) in perm.iter().enumerate() {
            weights.set_row(dst, &self.weights.row(src));
        }
        FactorSpec::new(assets.to_vec(), weights, self.factor_names.clone())
    }
}

/// Assignment of each asset to exactly one sector.
#[derive(Debug, Clone)]
pub struct SectorAssignment {
    pub assets: Vec<String>,
    /// Sector index per asset, indexing into `sector_names`.
    pub sector_of: Vec<usize>,
    pub sector_names: Vec<String>,
}

impl SectorAssignment {
    pub fn new(
        assets: Vec<String>,
        sector_of: Vec<usize>,
        sector_names: Vec<String>,
    ) -> Result<Self> {
        if assets.len() != sector_of.len() {
            return Err(Error::Dimension(format!(
                "{} assets but {} sector labels",
                assets.len(),
                sector_of.len()
            )));
        }
        if sector_names.is_empty() {
            return Err(Error::Validation("need at least one sector".into()));
        }
        if let Some(&bad) = sector_of.iter().find(|&&s| s >= sector_names.len()) {
            return Err(Error::Validation(format!(
                "sector index {bad} out of range ({} sectors)",
                sector_names.len()
            )));
        }
        for s in 0..sector_names.len() {
            if !sector_of.contains(&s) {
                return Err(Error::Validation(format!(
                    "sector {:?} has no assets",
                    sector_names[s]
                )));
            }
        }
        Ok(SectorAssignment {
            assets,
            sector_of,
            sector_names,
        })
    }

    pub fn n_sectors(&self) -> usize {
        self.sector_names.len()
    }

    /// Asset indices of sector `s`, in original panel order.
    pub fn indices_of(&self, s: usize) -> Vec<usize> {
        self.sector_of
            .iter()
            .enumerate()
            .filter(|(_, &sec)| sec == s)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.n_sectors()];
        for &s in &self.sector_of {
            sizes[s] += 1;
        }
        sizes
    }

    /// Reorders to match `assets`; every panel asset must be present.
    pub fn aligned_to(&self, assets: &[String]) -> Result<SectorAssignment> {
        let perm = alignment_permutation(&self.assets, assets, "sector assignment")?;
        let sector_of = perm.iter().map(|&src| self.sector_of[src]).collect();
        SectorAssignment::new(assets.to_vec(), sector_of, self.sector_names.clone())
    }
}

/// For each name in `target`, the index of that name in `source`.
fn alignment_permutation(source: &[String], target: &[String], what: &str) -> Result<Vec<usize>> {
    let index: HashMap<&str, usize> = source
        .iter()
        .enumerate()
        .map(|(i, a)| (a.as_str(), i))
        .collect();
    if index.len() != source.len() {
        return Err(Error::Validation(format!(
            "{what} has duplicate asset names"
        )));
    }
    target
        .iter()
        .map(|a| {
            index
                .get(a.as_str())
                .copied()
                .ok_or_else(|| Error::Validation(format!("{what} is missing asset {a:?}")))
        })
        .collect()
}

/// One day's factor decomposition.
#[derive(Debug, Clone)]
pub struct Decomposition {
    /// `K x K` factor covariance `W' S W`.
    pub sigma_f: DMatrix<f64>,
    /// `K x N` loadings.
    pub loadings: DMatrix<f64>,
    /// `N x N` residual covariance (symmetric, possibly indefinite).
    pub sigma_eps: DMatrix<f64>,
}

/// Factor covariance `W' S W`.
pub fn factor_cov(sigma: &DMatrix<f64>, spec: &FactorSpec) -> Result<DMatrix<f64>> {
    check_square(sigma, spec.weights.nrows())?;
    let mut sf = spec.weights.transpose() * sigma * &spec.weights;
    crate::transforms::symmetrize_mut(&mut sf);
    Ok(sf)
}

/// Loadings `B = S_f^{-1} W' S`, with a small ridge retry if the factor
/// covariance is numerically singular.
pub fn factor_loadings(
    sigma: &DMatrix<f64>,
    sigma_f: &DMatrix<f64>,
    spec: &FactorSpec,
) -> Result<DMatrix<f64>> {
    let k = spec.n_factors();
    check_square(sigma, spec.weights.nrows())?;
    if sigma_f.nrows() != k || sigma_f.ncols() != k {
        return Err(Error::Dimension(format!(
            "factor covariance is {}x{}, expected {k}x{k}",
            sigma_f.nrows(),
            sigma_f.ncols()
        )));
    }
    let rhs = spec.weights.transpose() * sigma;
    if let Some(chol) = sigma_f.clone().cholesky() {
        return Ok(chol.solve(&rhs));
    }
    let ridge = LOADINGS_RIDGE * sigma_f.trace() / k as f64;
    let mut ridged = sigma_f.clone();
    for i in 0..k {
        ridged[(i, i)] += ridge;
    }
    ridged
        .cholesky()
        .map(|chol| chol.solve(&rhs))
        .ok_or_else(|| {
            Error::Numeric(format!(
                "factor covariance singular even after ridge {ridge:e}"
            ))
        })
}

/// Residual covariance `S - B' S_f B`.
pub fn residual_cov(
    sigma: &DMatrix<f64>,
    loadings: &DMatrix<f64>,
    sigma_f: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = sigma.nrows();
    if loadings.ncols() != n || loadings.nrows() != sigma_f.nrows() {
        return Err(Error::Dimension(format!(
            "loadings {}x{} incompatible with sigma {}x{} and sigma_f {}x{}",
            loadings.nrows(),
            loadings.ncols(),
            sigma.nrows(),
            sigma.ncols(),
            sigma_f.nrows(),
            sigma_f.ncols()
        )));
    }
    let mut eps = sigma - loadings.transpose() * sigma_f * loadings;
    crate::transforms::symmetrize_mut(&mut eps);
    Ok(eps)
}

/// Full decomposition of one covariance matrix.
pub fn decompose(sigma: &DMatrix<f64>, spec: &FactorSpec) -> Result<Decomposition> {
    let sigma_f = factor_cov(sigma, spec)?;
    let loadings = factor_loadings(sigma, &sigma_f, spec)?;
    let sigma_eps = residual_cov(sigma, &loadings, &sigma_f)?;
    Ok(Decomposition {
        sigma_f,
        loadings,
        sigma_eps,
    })
}

fn check_square(sigma: &DMatrix<f64>, n: usize) -> Result<()> {
    if sigma.nrows() != n || sigma.ncols() != n {
        return Err(Error::Dimension(format!(
            "covariance is {}x{}, expected {n}x{n}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    Ok(())
}

/// Extracts the sector diagonal blocks of a symmetric matrix, one per
/// sector, each in original asset order.
pub fn block_extract(m: &DMatrix<f64>, sectors: &SectorAssignment) -> Result<Vec<DMatrix<f64>>> {
    check_square(m, sectors.assets.len())?;
    let mut blocks = Vec::with_capacity(sectors.n_sectors());
    for s in 0..sectors.n_sectors() {
        let idx = sectors.indices_of(s);
        let mut block = DMatrix::zeros(idx.len(), idx.len());
        for (bi, &i) in idx.iter().enumerate() {
            for (bj, &j) in idx.iter().enumerate() {
                block[(bi, bj)] = m[(i, j)];
            }
        }
        blocks.push(block);
    }
    Ok(blocks)
}

/// Reassembles sector blocks into an `N x N` block-diagonal matrix in
/// original asset order (off-block entries zero).
pub fn block_assemble(blocks: &[DMatrix<f64>], sectors: &SectorAssignment) -> Result<DMatrix<f64>> {
    if blocks.len() != sectors.n_sectors() {
        return Err(Error::Dimension(format!(
            "{} blocks but {} sectors",
            blocks.len(),
            sectors.n_sectors()
        )));
    }
    let n = sectors.assets.len();
    let mut out = DMatrix::zeros(n, n);
    for (s, block) in blocks.iter().enumerate() {
        let idx = sectors.indices_of(s);
        if block.nrows() != idx.len() || block.ncols() != idx.len() {
            return Err(Error::Dimension(format!(
                "block {s} is {}x{}, sector has {} assets",
                block.nrows(),
                block.ncols(),
                idx.len()
            )));
        }
        for (bi, &i) in idx.iter().enumerate() {
            for (bj, &j) in idx.iter().enumerate() {
                out[(i, j)] = block[(bi, bj)];
            }
        }
    }
    Ok(out)
}

/// Marks asset pairs whose correlation is economically significant often
/// enough: `|rho_ij| > threshold` on at least `min_fraction` of all days.
///
/// Days where either variance is non-positive are skipped for that pair but
/// still count in the denominator. The diagonal is `false`.
pub fn significance_pattern(
    panel: &CovPanel,
    threshold: f64,
    min_fraction: f64,
) -> Result<DMatrix<bool>> {
    if !(0.0..1.0).contains(&threshold) || !(0.0..=1.0).contains(&min_fraction) {
        return Err(Error::Validation(format!(
            "invalid significance parameters: threshold {threshold}, min_fraction {min_fraction}"
        )));
    }
    let n = panel.n_assets();
    let t_len = panel.n_days();
    if t_len == 0 {
        return Err(Error::Validation("empty panel".into()));
    }
    let mut counts = DMatrix::<u32>::zeros(n, n);
    for t in 0..t_len {
        let v = &panel.mats[t];
        for j in 0..n {
            let vjj = v[vech_index(n, j, j)];
            if vjj <= 0.0 {
                continue;
            }
            for i in (j + 1)..n {
                let vii = v[vech_index(n, i, i)];
                if vii <= 0.0 {
                    continue;
                }
                let rho = v[vech_index(n, i, j)] / (vii * vjj).sqrt();
                if rho.abs() > threshold {
                    counts[(i, j)] += 1;
                }
            }
        }
    }
    // A hair of slack so min_fraction = 1/3 with T divisible by 3 behaves
    // as an exact >= despite the inexact representation of 1/3.
    let needed = min_fraction * t_len as f64 - 1e-9;
    let mut out = DMatrix::from_element(n, n, false);
    for j in 0..n {
        for i in (j + 1)..n {
            let hit = counts[(i, j)] as f64 >= needed;
            out[(i, j)] = hit;
            out[(j, i)] = hit;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// CSV persistence
// ---------------------------------------------------------------------------

/// Saves factor weights as CSV: `asset,<factor names...>`.
pub fn save_factor_spec_csv(spec: &FactorSpec, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let disp = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&disp, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(&disp, e);
    writeln!(w, "asset,{}", spec.factor_names.join(",")).map_err(io_err)?;
    for (i, asset) in spec.assets.iter().enumerate() {
        let mut row = asset.clone();
        for k in 0..spec.n_factors() {
            row.push(',');
            row.push_str(&format!("{:.16e}", spec.weights[(i, k)]));
        }
        writeln!(w, "{row}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Loads factor weights from CSV.
pub fn load_factor_spec_csv(path: impl AsRef<Path>) -> Result<FactorSpec> {
    let path = path.as_ref();
    let disp = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&disp, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: disp.clone(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let header = header.map_err(|e| Error::io(&disp, e))?;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.first() != Some(&"asset") || cols.len() < 2 {
        return Err(Error::Parse {
            path: disp,
            line: 1,
            msg: format!("expected header asset,<factor names>, got {header:?}"),
        });
    }
    let names: Vec<String> = cols[1..].iter().map(|s| s.trim().to_string()).collect();
    let k = names.len();
    let mut assets = Vec::new();
    let mut weights = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(&disp, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != k + 1 {
            return Err(Error::Parse {
                path: disp.clone(),
                line: lineno,
                msg: format!("expected {} fields, got {}", k + 1, fields.len()),
            });
        }
        assets.push(fields[0].trim().to_string());
        for f in &fields[1..] {
            let x: f64 = f.trim().parse().map_err(|_| Error::Parse {
                path: disp.clone(),
                line: lineno,
                msg: format!("cannot parse weight from {f:?}"),
            })?;
            weights.push(x);
        }
    }
    let n = assets.len();
    FactorSpec::new(assets, DMatrix::from_row_iterator(n, k, weights), names)
}

/// Saves a sector assignment as CSV: `asset,sector`.
pub fn save_sectors_csv(sectors: &SectorAssignment, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let disp = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&disp, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(&disp, e);
    writeln!(w, "asset,sector").map_err(io_err)?;
    for (i, asset) in sectors.assets.iter().enumerate() {
        writeln!(w, "{asset},{}", sectors.sector_names[sectors.sector_of[i]]).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Loads a sector assignment from CSV; sectors are indexed in order of
/// first appearance.
pub fn load_sectors_csv(path: impl AsRef<Path>) -> Result<SectorAssignment> {
    let path = path.as_ref();
    let disp = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&disp, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: disp.clone(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let header = header.map_err(|e| Error::io(&disp, e))?;
    if header.trim_end() != "asset,sector" {
        return Err(Error::Parse {
            path: disp,
            line: 1,
            msg: format!("expected header asset,sector, got {header:?}"),
        });
    }
    let mut assets = Vec::new();
    let mut sector_of = Vec::new();
    let mut sector_names: Vec<String> = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(&disp, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                path: disp.clone(),
                line: lineno,
                msg: format!("expected 2 fields, got {}", fields.len()),
            });
        }
        assets.push(fields[0].trim().to_string());
        let name = fields[1].trim();
        let s = match sector_names.iter().position(|x| x == name) {
            Some(s) => s,
            None => {
                sector_names.push(name.to_string());
                sector_names.len() - 1
            }
        };
        sector_of.push(s);
    }
    SectorAssignment::new(assets, sector_of, sector_names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use chrono::NaiveDate;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};

    fn names(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("A{i:03}")).collect()
    }

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let mut m = &a * a.transpose();
        for i in 0..n {
            m[(i, i)] += 0.5;
        }
        m
    }

    fn two_sector_assignment() -> SectorAssignment {
        // Interleaved on purpose to exercise the index bookkeeping.
        SectorAssignment::new(
            names(4),
            vec![0, 1, 0, 1],
            vec!["Tech".into(), "Energy".into()],
        )
        .unwrap()
    }

    #[test]
    fn single_asset_factor_reads_off_variance() {
        let sigma = random_spd(3, 1);
        let mut w = DMatrix::zeros(3, 1);
        w[(0, 0)] = 1.0;
        let spec = FactorSpec::new(names(3), w, vec!["F1".into()]).unwrap();
        let sf = factor_cov(&sigma, &spec).unwrap();
        assert_abs_diff_eq!(sf[(0, 0)], sigma[(0, 0)], epsilon = 1e-14);
    }

    #[test]
    fn decomposition_identity_holds() {
        for seed in 0..10 {
            let n = 6;
            let sigma = random_spd(n, seed);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1000 + seed);
            let w = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
            let spec = FactorSpec::new(names(n), w, vec!["F1".into(), "F2".into()]).unwrap();
            let d = decompose(&sigma, &spec).unwrap();
            let rebuilt = d.loadings.transpose() * &d.sigma_f * &d.loadings + &d.sigma_eps;
            let scale = sigma.iter().fold(1.0f64, |a, x| a.max(x.abs()));
            for (a, b) in sigma.iter().zip(rebuilt.iter()) {
                assert!((a - b).abs() <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn loadings_survive_singular_factor_cov() {
        // Two identical factor columns make S_f exactly singular.
        let sigma = random_spd(4, 3);
        let mut w = DMatrix::zeros(4, 2);
        for i in 0..4 {
            w[(i, 0)] = 0.25;
            w[(i, 1)] = 0.25;
        }
        let spec = FactorSpec::new(names(4), w, vec!["F1".into(), "F2".into()]).unwrap();
        let sf = factor_cov(&sigma, &spec).unwrap();
        let b = factor_loadings(&sigma, &sf, &spec).unwrap();
        assert!(b.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn block_extract_assemble_roundtrip() {
        let sectors = two_sector_assignment();
        let m = random_spd(4, 5);
        let blocks = block_extract(&m, &sectors).unwrap();
        assert_eq!(blocks[0].nrows(), 2);
        assert_abs_diff_eq!(blocks[0][(0, 1)], m[(0, 2)], epsilon = 1e-15);
        assert_abs_diff_eq!(blocks[1][(1, 0)], m[(3, 1)], epsilon = 1e-15);
        let asm = block_assemble(&blocks, &sectors).unwrap();
        // On-block entries restored, off-block entries zero.
        assert_abs_diff_eq!(asm[(0, 2)], m[(0, 2)], epsilon = 1e-15);
        assert_abs_diff_eq!(asm[(1, 3)], m[(1, 3)], epsilon = 1e-15);
        assert_abs_diff_eq!(asm[(0, 1)], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(asm[(2, 3)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn single_sector_block_is_whole_matrix() {
        let sectors = SectorAssignment::new(names(3), vec![0, 0, 0], vec!["All".into()]).unwrap();
        let m = random_spd(3, 9);
        let blocks = block_extract(&m, &sectors).unwrap();
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].as_slice(), m.as_slice());
        let asm = block_assemble(&blocks, &sectors).unwrap();
        assert_eq!(asm.as_slice(), m.as_slice());
    }

    fn pattern_panel(rho: f64, hit_days: usize, total_days: usize) -> CovPanel {
        let n = 2;
        let mut mats = Vec::new();
        for t in 0..total_days {
            let off = if t < hit_days { rho } else { 0.0 };
            mats.push(DVector::from_vec(vec![1.0, off, 1.0]));
        }
        let dates = (0..total_days)
            .map(|i| {
                NaiveDate::from_ymd_opt(2015, 1, 1).unwrap() + chrono::TimeDelta::days(i as i64)
            })
            .collect();
        CovPanel::new(dates, names(n), mats).unwrap()
    }

    #[test]
    fn significance_threshold_is_strict() {
        // Correlation exactly at the threshold never counts.
        let panel = pattern_panel(0.15, 30, 30);
        let hit = significance_pattern(&panel, 0.15, 1.0 / 3.0).unwrap();
        assert!(!hit[(1, 0)]);
        let panel = pattern_panel(0.1500001, 30, 30);
        let hit = significance_pattern(&panel, 0.15, 1.0 / 3.0).unwrap();
        assert!(hit[(1, 0)]);
        assert!(hit[(0, 1)]);
        assert!(!hit[(0, 0)]);
    }

    #[test]
    fn significance_fraction_is_inclusive() {
        // Exactly one third of the days qualifies.
        let panel = pattern_panel(0.5, 10, 30);
        let hit = significance_pattern(&panel, 0.15, 1.0 / 3.0).unwrap();
        assert!(hit[(1, 0)]);
        let panel = pattern_panel(0.5, 9, 30);
        let hit = significance_pattern(&panel, 0.15, 1.0 / 3.0).unwrap();
        assert!(!hit[(1, 0)]);
    }

    #[test]
    fn significance_skips_degenerate_days_but_counts_them() {
        // 10 strong days out of 30, but 5 extra zero-variance days push the
        // denominator to 35: 10 < 35/3, so the pair misses the cut.
        let mut panel = pattern_panel(0.5, 10, 30);
        let start = *panel.dates.last().unwrap();
        for i in 0..5 {
            panel.dates.push(start + chrono::TimeDelta::days(i + 1));
            panel.mats.push(DVector::from_vec(vec![0.0, 0.0, 0.0]));
        }
        let panel = CovPanel::new(panel.dates, panel.assets, panel.mats).unwrap();
        let hit = significance_pattern(&panel, 0.15, 1.0 / 3.0).unwrap();
        assert!(!hit[(1, 0)]);
    }

    #[test]
    fn spec_csv_roundtrip_and_alignment() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.csv");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let w = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
        let spec = FactorSpec::new(names(3), w, vec!["MKT".into(), "HML".into()]).unwrap();
        save_factor_spec_csv(&spec, &path).unwrap();
        let back = load_factor_spec_csv(&path).unwrap();
        assert_eq!(back.assets, spec.assets);
        assert_eq!(back.factor_names, spec.factor_names);
        for (a, b) in back.weights.iter().zip(spec.weights.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        // Alignment to a reordered universe permutes rows.
        let reordered = vec!["A003".to_string(), "A001".to_string(), "A002".to_string()];
        let aligned = back.aligned_to(&reordered).unwrap();
        assert_abs_diff_eq!(
            aligned.weights[(0, 0)],
            spec.weights[(2, 0)],
            epsilon = 1e-15
        );
        // Missing asset is an error.
        assert!(back.aligned_to(&["A009".to_string()]).is_err());
    }

    #[test]
    fn sectors_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sectors.csv");
        let sectors = two_sector_assignment();
        save_sectors_csv(&sectors, &path).unwrap();
        let back = load_sectors_csv(&path).unwrap();
        assert_eq!(back.assets, sectors.assets);
        assert_eq!(back.sector_of, sectors.sector_of);
        assert_eq!(back.sector_names, sectors.sector_names);
    }

    #[test]
    fn truncated_keeps_leading_columns() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let w = DMatrix::from_fn(4, 3, |_, _| rng.random_range(0.1..1.0));
        let spec = FactorSpec::new(
            names(4),
            w.clone(),
            vec!["F1".into(), "F2".into(), "F3".into()],
        )
        .unwrap();
        let t = spec.truncated(2).unwrap();
        assert_eq!(t.n_factors(), 2);
        assert_eq!(t.weights.column(1).as_slice(), w.column(1).as_slice());
        assert!(spec.truncated(0).is_err());
        assert!(spec.truncated(4).is_err());
    }
}
