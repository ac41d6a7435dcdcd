//! Covariance and return panels: half-vectorization, validation, outlier
//! cleaning, and CSV / binary persistence.
//!
//! A covariance panel stores one symmetric `N x N` matrix per trading day in
//! half-vectorized (`vech`) form: the lower triangle read column by column,
//! so entry order is `(1,1), (2,1), ..., (N,1), (2,2), ..., (N,N)`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Length of the half-vectorized form of an `n x n` symmetric matrix.
pub fn vech_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Position of entry `(i, j)` (`i >= j`, zero-based) in the vech layout.
pub fn vech_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(j <= i && i < n);
    // Column j starts after columns 0..j, which hold n, n-1, ... entries.
    j * n - j * (j + 1) / 2 + i
}

/// Inverse of [`vech_index`]: the `(row, col)` of vech position `idx`.
pub fn vech_coords(n: usize, idx: usize) -> (usize, usize) {
    debug_assert!(idx < vech_len(n));
    let mut j = 0;
    let mut start = 0;
    // Walk columns until the one containing idx; column j holds n - j entries.
    while start + (n - j) <= idx {
        start += n - j;
        j += 1;
    }
    (idx - start + j, j)
}

/// Half-vectorizes a symmetric matrix (lower triangle, column-major).
///
/// Fails if the matrix is not square or not symmetric within a relative
/// tolerance of `1e-10` of its largest absolute entry.
pub fn vech(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::Dimension(format!(
            "vech expects a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = m.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1e-300);
    for j in 0..n {
        for i in (j + 1)..n {
            let asym = (m[(i, j)] - m[(j, i)]).abs();
            if asym > 1e-10 * scale {
                return Err(Error::Validation(format!(
                    "matrix not symmetric: |M[{i},{j}] - M[{j},{i}]| = {asym:e} \
                     exceeds tolerance"
                )));
            }
        }
    }
    let mut v = DVector::zeros(vech_len(n));
    let mut k = 0;
    for j in 0..n {
        for i in j..n {
            v[k] = m[(i, j)];
            k += 1;
        }
    }
    Ok(v)
}

/// Rebuilds the symmetric matrix from its half-vectorized form.
pub fn unvech(v: &DVector<f64>, n: usize) -> Result<DMatrix<f64>> {
    if v.len() != vech_len(n) {
        return Err(Error::Dimension(format!(
            "vech vector of length {} does not match n = {} (expected {})",
            v.len(),
            n,
            vech_len(n)
        )));
    }
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for j in 0..n {
        for i in j..n {
            m[(i, j)] = v[k];
            m[(j, i)] = v[k];
            k += 1;
        }
    }
    Ok(m)
}

/// Panel of daily covariance matrices in vech form.
#[derive(Debug, Clone)]
pub struct CovPanel {
    pub dates: Vec<NaiveDate>,
    pub assets: Vec<String>,
    /// One vech vector of length `N(N+1)/2` per day.
    pub mats: Vec<DVector<f64>>,
}

impl CovPanel {
    /// Builds a panel, validating shapes, date ordering, finiteness, and
    /// non-negative diagonals.
    pub fn new(
        dates: Vec<NaiveDate>,
        assets: Vec<String>,
        mats: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let n = assets.len();
        if n == 0 {
            return Err(Error::Validation("panel needs at least one asset".into()));
        }
        if dates.len() != mats.len() {
            return Err(Error::Dimension(format!(
                "{} dates but {} matrices",
                dates.len(),
                mats.len()
            )));
        }
        let m = vech_len(n);
        for (t, v) in mats.iter().enumerate() {
            if v.len() != m {
                return Err(Error::Dimension(format!(
                    "day {t}: vech length {} does not match {n} assets (expected {m})",
                    v.len()
                )));
            }
            if let Some(pos) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::Validation(format!(
                    "day {t}: non-finite entry at vech position {pos}"
                )));
            }
            for i in 0..n {
                let d = v[vech_index(n, i, i)];
                if d < 0.0 {
                    return Err(Error::Validation(format!(
                        "day {t}: negative variance {d:e} for asset index {i}"
                    )));
                }
            }
        }
        for w in dates.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Validation(format!(
                    "dates not strictly increasing: {} followed by {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(CovPanel {
            dates,
            assets,
            mats,
        })
    }

    /// Builds a panel from full symmetric matrices.
    pub fn from_matrices(
        dates: Vec<NaiveDate>,
        assets: Vec<String>,
        mats: &[DMatrix<f64>],
    ) -> Result<Self> {
        let vechs = mats.iter().map(vech).collect::<Result<Vec<_>>>()?;
        CovPanel::new(dates, assets, vechs)
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    /// Full symmetric matrix for day `t`.
    pub fn mat(&self, t: usize) -> DMatrix<f64> {
        unvech(&self.mats[t], self.n_assets()).expect("panel invariant")
    }

    pub fn date_index(&self, date: NaiveDate) -> Option<usize> {
        self.dates.binary_search(&date).ok()
    }
}

/// Panel of daily asset returns plus a risk-free rate.
#[derive(Debug, Clone)]
pub struct ReturnsPanel {
    pub dates: Vec<NaiveDate>,
    pub assets: Vec<String>,
    /// `T x N`, one row per day.
    pub returns: DMatrix<f64>,
    /// Length `T`.
    pub risk_free: DVector<f64>,
}

impl ReturnsPanel {
    pub fn new(
        dates: Vec<NaiveDate>,
        assets: Vec<String>,
        returns: DMatrix<f64>,
        risk_free: DVector<f64>,
    ) -> Result<Self> {
        if assets.is_empty() {
            return Err(Error::Validation("panel needs at least one asset".into()));
        }
        if returns.nrows() != dates.len()
            || returns.ncols() != assets.len()
            || risk_free.len() != dates.len()
        {
            return Err(Error::Dimension(format!(
                "returns {}x{} / {} dates / {} assets / {} risk-free rows",
                returns.nrows(),
                returns.ncols(),
                dates.len(),
                assets.len(),
                risk_free.len()
            )));
        }
        if returns.iter().any(|x| !x.is_finite()) || risk_free.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation(
                "returns panel contains non-finite entries".into(),
            ));
        }
        for w in dates.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Validation(format!(
                    "dates not strictly increasing: {} followed by {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(ReturnsPanel {
            dates,
            assets,
            returns,
            risk_free,
        })
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    pub fn date_index(&self, date: NaiveDate) -> Option<usize> {
        self.dates.binary_search(&date).ok()
    }
}

/// Outcome of `clean_panel`: which days were replaced and the per-day
/// fraction of entries flagged as extreme.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CleanReport {
    pub flagged_days: Vec<usize>,
    /// One value in `[0, 1]` per day; days 0 and 1 are always 0.
    pub fraction_extreme: Vec<f64>,
}

/// Replaces data-error days in a covariance panel.
///
/// Walking forward through the panel, each vech entry of day `t` is compared
/// against the expanding mean and sample standard deviation of the already
/// cleaned history (days `0..t`); an entry is extreme when it deviates by
/// strictly more than `sd_threshold` standard deviations. A day whose
/// fraction of extreme entries strictly exceeds `flag_fraction` is replaced
/// by the element-wise average of the nearest `replace_count` preceding
/// non-flagged days (nearest first; fewer if the history is shorter). The
/// first two days are never flagged. Cleaning is idempotent.
pub fn clean_panel(
    panel: &CovPanel,
    sd_threshold: f64,
    flag_fraction: f64,
    replace_count: usize,
) -> Result<(CovPanel, CleanReport)> {
    let t_len = panel.n_days();
    if t_len < 2 {
        return Err(Error::InsufficientHistory(format!(
            "cleaning needs at least 2 days, got {t_len}"
        )));
    }
    if sd_threshold <= 0.0 || !(0.0..=1.0).contains(&flag_fraction) || replace_count == 0 {
        return Err(Error::Validation(format!(
            "invalid cleaning parameters: sd_threshold {sd_threshold}, \
             flag_fraction {flag_fraction}, replace_count {replace_count}"
        )));
    }
    let m = vech_len(panel.n_assets());

    let mut cleaned: Vec<DVector<f64>> = Vec::with_capacity(t_len);
    let mut flagged = vec![false; t_len];
    let mut fraction_extreme = vec![0.0; t_len];

    // Welford accumulators over the cleaned history, one per vech entry.
    let mut count = 0usize;
    let mut mean = DVector::<f64>::zeros(m);
    let mut m2 = DVector::<f64>::zeros(m);

    for t in 0..t_len {
        let raw = &panel.mats[t];
        let accepted = if t < 2 {
            raw.clone()
        } else {
            let denom = (count - 1) as f64;
            let mut extreme = 0usize;
            for e in 0..m {
                let sd = (m2[e] / denom).sqrt();
                if (raw[e] - mean[e]).abs() > sd_threshold * sd {
                    extreme += 1;
                }
            }
            let frac = extreme as f64 / m as f64;
            fraction_extreme[t] = frac;
            if frac > flag_fraction {
                flagged[t] = true;
                // Average of the nearest non-flagged predecessors, nearest first.
                let mut sum = DVector::<f64>::zeros(m);
                let mut used = 0usize;
                for s in (0..t).rev() {
                    if !flagged[s] {
                        sum += &cleaned[s];
                        used += 1;
                        if used == replace_count {
                            break;
                        }
                    }
                }
                if used == 0 {
                    return Err(Error::InsufficientHistory(format!(
                        "day {t} flagged but no clean predecessor available"
                    )));
                }
                sum / used as f64
            } else {
                raw.clone()
            }
        };

        count += 1;
        for e in 0..m {
            let delta = accepted[e] - mean[e];
            mean[e] += delta / count as f64;
            m2[e] += delta * (accepted[e] - mean[e]);
        }
        cleaned.push(accepted);
    }

    let out = CovPanel::new(panel.dates.clone(), panel.assets.clone(), cleaned)?;
    let report = CleanReport {
        flagged_days: (0..t_len).filter(|&t| flagged[t]).collect(),
        fraction_extreme,
    };
    Ok((out, report))
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

const COV_MAGIC: &[u8; 4] = b"CVP1";
const RET_MAGIC: &[u8; 4] = b"RVP1";
const EPOCH: NaiveDate = match NaiveDate::from_ymd_opt(1970, 1, 1) {
    Some(d) => d,
    None => unreachable!(),
};

fn epoch_days(d: NaiveDate) -> i64 {
    (d - EPOCH).num_days()
}

fn date_from_epoch_days(n: i64) -> Result<NaiveDate> {
    EPOCH
        .checked_add_signed(chrono::TimeDelta::days(n))
        .ok_or_else(|| Error::Validation(format!("day offset {n} out of range")))
}

/// Sidecar metadata stored next to every panel file as
/// `<path>.manifest.json`.
#[derive(Debug, Serialize, Deserialize)]
struct PanelManifest {
    kind: String,
    n_assets: usize,
    assets: Vec<String>,
}

fn write_panel_manifest(path: &Path, kind: &str, assets: &[String]) -> Result<()> {
    let mpath = manifest_path(path);
    let file = File::create(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let manifest = PanelManifest {
        kind: kind.to_string(),
        n_assets: assets.len(),
        assets: assets.to_vec(),
    };
    serde_json::to_writer_pretty(BufWriter::new(file), &manifest)
        .map_err(|e| Error::Validation(format!("manifest serialization failed: {e}")))?;
    Ok(())
}

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    std::path::PathBuf::from(s)
}

fn read_panel_manifest(path: &Path, expected_kind: &str) -> Option<Vec<String>> {
    let mpath = manifest_path(path);
    let file = File::open(mpath).ok()?;
    let manifest: PanelManifest = serde_json::from_reader(BufReader::new(file)).ok()?;
    if manifest.kind == expected_kind && manifest.assets.len() == manifest.n_assets {
        Some(manifest.assets)
    } else {
        None
    }
}

/// Placeholder asset names `A0001`, `A0002`, ... used when a data source
/// does not carry its own.
pub fn default_asset_names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("A{i:04}")).collect()
}

/// Formats a float with 17 significant digits so CSV round-trips exactly.
fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f64(s: &str, path: &str, line: usize, what: &str) -> Result<f64> {
    let x: f64 = s.trim().parse().map_err(|_| Error::Parse {
        path: path.to_string(),
        line,
        msg: format!("cannot parse {what} from {s:?}"),
    })?;
    if !x.is_finite() {
        return Err(Error::Parse {
            path: path.to_string(),
            line,
            msg: format!("non-finite {what}: {s:?}"),
        });
    }
    Ok(x)
}

fn parse_date(s: &str, path: &str, line: usize) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|_| Error::Parse {
        path: path.to_string(),
        line,
        msg: format!("cannot parse ISO date from {s:?}"),
    })
}

/// Saves a covariance panel as CSV (`date,v1,...,vM`; 17 significant digits)
/// plus a `<path>.manifest.json` sidecar naming the assets.
pub fn save_cov_csv(panel: &CovPanel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let disp = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&disp, e))?;
    let mut w = BufWriter::new(file);
    let m = vech_len(panel.n_assets());
    let mut header = String::from("date");
    for i in 1..=m {
        header.push_str(&format!(",v{i}"));
    }
    let io_err = |e| Error::io(&disp, e);
    writeln!(w, "{header}").map_err(io_err)?;
    for (t, date) in panel.dates.iter().enumerate() {
        let mut row = date.format("%Y-%m-%d").to_string();
        for e in 0..m {
            row.push(',');
            row.push_str(&fmt_f64(panel.mats[t][e]));
        }
        writeln!(w, "{row}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    write_panel_manifest(path, "cov_panel", &panel.assets)
}

/// Loads a covariance panel from CSV, reading asset names from the manifest
/// sidecar when present.
pub fn load_cov_csv(path: impl AsRef<Path>) -> Result<CovPanel> {
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
    if cols.first() != Some(&"date") || cols.len() < 2 {
        return Err(Error::Parse {
            path: disp,
            line: 1,
            msg: format!("expected header date,v1,...,vM, got {header:?}"),
        });
    }
    let m = cols.len() - 1;
    let n = solve_vech_n(m).ok_or_else(|| Error::Parse {
        path: disp.clone(),
        line: 1,
        msg: format!("{m} value columns is not a vech length n(n+1)/2"),
    })?;

    let mut dates = Vec::new();
    let mut mats = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(&disp, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != m + 1 {
            return Err(Error::Parse {
                path: disp.clone(),
                line: lineno,
                msg: format!("expected {} fields, got {}", m + 1, fields.len()),
            });
        }
        dates.push(parse_date(fields[0], &disp, lineno)?);
        let mut v = DVector::zeros(m);
        for e in 0..m {
            v[e] = parse_f64(fields[e + 1], &disp, lineno, "covariance entry")?;
        }
        mats.push(v);
    }
    let assets = read_panel_manifest(path, "cov_panel").unwrap_or_else(|| default_asset_names(n));
    if assets.len() != n {
        return Err(Error::Validation(format!(
            "manifest lists {} assets but file implies {n}",
            assets.len()
        )));
    }
    CovPanel::new(dates, assets, mats)
}

/// Largest n with n(n+1)/2 == m, if any.
fn solve_vech_n(m: usize) -> Option<usize> {
    let n = ((((8 * m + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
    (vech_len(n) == m && n > 0).then_some(n)
}

/// Saves a covariance panel in the binary layout: magic `CVP1`, `N` and `T`
/// as little-endian u64, `T` dates as i64 days since the Unix epoch, then
/// `T * N(N+1)/2` little-endian f64 values. A manifest sidecar is written
/// alongside.
pub fn save_cov_binary(panel: &CovPanel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let disp = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&disp, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(&disp, e);
    w.write_all(COV_MAGIC).map_err(io_err)?;
    w.write_all(&(panel.n_assets() as u64).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&(panel.n_days() as u64).to_le_bytes())
        .map_err(io_err)?;
    for d in &panel.dates {
        w.write_all(&epoch_days(*d).to_le_bytes()).map_err(io_err)?;
    }
    for v in &panel.mats {
        for x in v.iter() {
            w.write_all(&x.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    write_panel_manifest(path, "cov_panel", &panel.assets)
}

fn read_exact_checked(r: &mut impl Read, buf: &mut [u8], disp: &str, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Parse {
                path: disp.to_string(),
                line: 0,
                msg: format!("truncated file while reading {what}"),
            }
        } else {
            Error::io(disp, e)
        }
    })
}

fn read_u64(r: &mut impl Read, disp: &str, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_checked(r, &mut b, disp, what)?;
    Ok(u64::from_le_bytes(b))
}

/// Loads a covariance panel from the binary layout.
pub fn load_cov_binary(path: impl AsRef<Path>) -> Result<CovPanel> {
    let path = path.as_ref();
    let disp = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&disp, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact_checked(&mut r, &mut magic, &disp, "magic")?;
    if &magic != COV_MAGIC {
        return Err(Error::Parse {
            path: disp,
            line: 0,
            msg: format!("bad magic {magic:?}, expected CVP1"),
        });
    }
    let n = read_u64(&mut r, &disp, "asset count")? as usize;
    let t = read_u64(&mut r, &disp, "day count")? as usize;
    if n == 0 || n > 100_000 || t > 10_000_000 {
        return Err(Error::Parse {
            path: disp,
            line: 0,
            msg: format!("implausible dimensions n = {n}, t = {t}"),
        });
    }
    let mut dates = Vec::with_capacity(t);
    for _ in 0..t {
        let mut b = [0u8; 8];
        read_exact_checked(&mut r, &mut b, &disp, "date")?;
        dates.push(date_from_epoch_days(i64::from_le_bytes(b))?);
    }
    let m = vech_len(n);
    let mut raw = vec![0u8; t * m * 8];
    read_exact_checked(&mut r, &mut raw, &disp, "matrix data")?;
    let mut mats = Vec::with_capacity(t);
    for day in raw.chunks_exact(m * 8) {
        let v = DVector::from_iterator(
            m,
            day.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap())),
        );
        mats.push(v);
    }
    let assets = read_panel_manifest(path, "cov_panel").unwrap_or_else(|| default_asset_names(n));
    CovPanel::new(dates, assets, mats)
}

/// Loads a covariance panel, detecting binary versus CSV from the leading
/// magic bytes.
pub fn load_cov_panel(path: impl AsRef<Path>) -> Result<CovPanel> {
    let path = path.as_ref();
    let disp = path.display().to_string();
    let mut file = File::open(path).map_err(|e| Error::io(&disp, e))?;
    let mut magic = [0u8; 4];
    let n = file.read(&mut magic).map_err(|e| Error::io(&disp, e))?;
    if n == 4 && &magic == COV_MAGIC {
        load_cov_binary(path)
    } else {
        load_cov_csv(path)
    }
}

/// Saves a returns panel as CSV (`date,r1,...,rN,risk_free`) plus manifest.
pub fn save_returns_csv(panel: &ReturnsPanel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let disp = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&disp, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(&disp, e);
    let n = panel.n_assets();
    let mut header = String::from("date");
    for i in 1..=n {
        header.push_str(&format!(",r{i}"));
    }
    header.push_str(",risk_free");
    writeln!(w, "{header}").map_err(io_err)?;
    for t in 0..panel.n_days() {
        let mut row = panel.dates[t].format("%Y-%m-%d").to_string();
        for i in 0..n {
            row.push(',');
            row.push_str(&fmt_f64(panel.returns[(t, i)]));
        }
        row.push(',');
        row.push_str(&fmt_f64(panel.risk_free[t]));
        writeln!(w, "{row}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    write_panel_manifest(path, "returns_panel", &panel.assets)
}

/// Loads a returns panel from CSV.
pub fn load_returns_csv(path: impl AsRef<Path>) -> Result<ReturnsPanel> {
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
    if cols.first() != Some(&"date") || cols.last() != Some(&"risk_free") || cols.len() < 3 {
        return Err(Error::Parse {
            path: disp,
            line: 1,
            msg: format!("expected header date,r1,...,rN,risk_free, got {header:?}"),
        });
    }
    let n = cols.len() - 2;
    let mut dates = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    let mut risk_free = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(&disp, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != n + 2 {
            return Err(Error::Parse {
                path: disp.clone(),
                line: lineno,
                msg: format!("expected {} fields, got {}", n + 2, fields.len()),
            });
        }
        dates.push(parse_date(fields[0], &disp, lineno)?);
        for f in &fields[1..=n] {
            rows.push(parse_f64(f, &disp, lineno, "return")?);
        }
        risk_free.push(parse_f64(fields[n + 1], &disp, lineno, "risk-free rate")?);
    }
    let t = dates.len();
    let assets =
        read_panel_manifest(path, "returns_panel").unwrap_or_else(|| default_asset_names(n));
    ReturnsPanel::new(
        dates,
        assets,
        DMatrix::from_row_iterator(t, n, rows),
        DVector::from_vec(risk_free),
    )
}

/// Saves a returns panel in the binary layout: magic `RVP1`, `N`, `T`,
/// dates, `T x N` returns, then `T` risk-free values.
pub fn save_returns_binary(panel: &ReturnsPanel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let disp = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&disp, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(&disp, e);
    w.write_all(RET_MAGIC).map_err(io_err)?;
    w.write_all(&(panel.n_assets() as u64).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&(panel.n_days() as u64).to_le_bytes())
        .map_err(io_err)?;
    for d in &panel.dates {
        w.write_all(&epoch_days(*d).to_le_bytes()).map_err(io_err)?;
    }
    for t in 0..panel.n_days() {
        for i in 0..panel.n_assets() {
            w.write_all(&panel.returns[(t, i)].to_le_bytes())
                .map_err(io_err)?;
        }
    }
    for t in 0..panel.n_days() {
        w.write_all(&panel.risk_free[t].to_le_bytes())
            .map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    write_panel_manifest(path, "returns_panel", &panel.assets)
}

/// Loads a returns panel from the binary layout.
pub fn load_returns_binary(path: impl AsRef<Path>) -> Result<ReturnsPanel> {
    let path = path.as_ref();
    let disp = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&disp, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact_checked(&mut r, &mut magic, &disp, "magic")?;
    if &magic != RET_MAGIC {
        return Err(Error::Parse {
            path: disp,
            line: 0,
            msg: format!("bad magic {magic:?}, expected RVP1"),
        });
    }
    let n = read_u64(&mut r, &disp, "asset count")? as usize;
    let t = read_u64(&mut r, &disp, "day count")? as usize;
    if n == 0 || n > 100_000 || t > 10_000_000 {
        return Err(Error::Parse {
            path: disp,
            line: 0,
            msg: format!("implausible dimensions n = {n}, t = {t}"),
        });
    }
    let mut dates = Vec::with_capacity(t);
    for _ in 0..t {
        let mut b = [0u8; 8];
        read_exact_checked(&mut r, &mut b, &disp, "date")?;
        dates.push(date_from_epoch_days(i64::from_le_bytes(b))?);
    }
    let mut raw = vec![0u8; t * n * 8];
    read_exact_checked(&mut r, &mut raw, &disp, "returns data")?;
    let returns = DMatrix::from_row_iterator(
        t,
        n,
        raw.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap())),
    );
    let mut raw_rf = vec![0u8; t * 8];
    read_exact_checked(&mut r, &mut raw_rf, &disp, "risk-free data")?;
    let risk_free = DVector::from_iterator(
        t,
        raw_rf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap())),
    );
    let assets =
        read_panel_manifest(path, "returns_panel").unwrap_or_else(|| default_asset_names(n));
    ReturnsPanel::new(dates, assets, returns, risk_free)
}

/// Loads a returns panel, detecting binary versus CSV from the magic bytes.
pub fn load_returns_panel(path: impl AsRef<Path>) -> Result<ReturnsPanel> {
    let path = path.as_ref();
    let disp = path.display().to_string();
    let mut file = File::open(path).map_err(|e| Error::io(&disp, e))?;
    let mut magic = [0u8; 4];
    let n = file.read(&mut magic).map_err(|e| Error::io(&disp, e))?;
    if n == 4 && &magic == RET_MAGIC {
        load_returns_binary(path)
    } else {
        load_returns_csv(path)
    }
}
