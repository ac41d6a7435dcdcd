//! Forecast evaluation: per-day matrix `l2` errors, error ratios against a
//! baseline, and stability statistics for the predictor sets picked by the
//! shrinkage fits.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{vech, vech_coords};

/// Which block of the decomposition an estimated equation belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EquationGroup {
    /// Factor covariance equations.
    FactorCov,
    /// Residual equations for one sector block (by block index).
    ResidualBlock(usize),
}

impl EquationGroup {
    pub fn label(&self) -> String {
        match self {
            EquationGroup::FactorCov => "factor".to_string(),
            EquationGroup::ResidualBlock(b) => format!("block{b}"),
        }
    }
}

/// Whether an equation models a variance (diagonal) or covariance
/// (off-diagonal) entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetKind {
    Variance,
    Covariance,
}

impl TargetKind {
    /// Classifies a vech position of an `n x n` matrix.
    pub fn from_vech_index(n: usize, idx: usize) -> TargetKind {
        let (i, j) = vech_coords(n, idx);
        if i == j {
            TargetKind::Variance
        } else {
            TargetKind::Covariance
        }
    }
}

/// One fitted equation on one forecast day: which entry was modeled, with
/// how many candidate predictors, and which survived selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitRecord {
    pub date: NaiveDate,
    pub group: EquationGroup,
    /// vech position of the modeled entry within its group's matrix.
    pub index: usize,
    pub target: TargetKind,
    pub n_predictors: usize,
    /// Sorted positions (into the slope vector) of the selected predictors.
    pub active: Vec<usize>,
    pub lambda: f64,
    pub bic: f64,
}

/// `l2` distance between two symmetric matrices over distinct entries:
/// the Euclidean norm of the difference of their half-vectorizations, so
/// each off-diagonal pair is counted once.
pub fn l2_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() != b.nrows() || a.ncols() != b.ncols() {
        return Err(Error::Dimension(format!(
            "cannot compare {}x{} against {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let va = vech(a)?;
    let vb = vech(b)?;
    Ok((va - vb).norm())
}

/// Per-day forecast errors for one model over a common date range.
#[derive(Debug, Clone)]
pub struct ScoreSeries {
    pub dates: Vec<NaiveDate>,
    pub errors: Vec<f64>,
    pub mean_error: f64,
}

/// Scores forecasts against realized matrices day by day with [`l2_error`].
pub fn score(
    dates: &[NaiveDate],
    forecasts: &[DMatrix<f64>],
    realized: &[DMatrix<f64>],
) -> Result<ScoreSeries> {
    if dates.is_empty() {
        return Err(Error::Validation("no forecast days to score".into()));
    }
    if forecasts.len() != dates.len() || realized.len() != dates.len() {
        return Err(Error::Dimension(format!(
            "dates/forecasts/realized lengths differ: {}/{}/{}",
            dates.len(),
            forecasts.len(),
            realized.len()
        )));
    }
    let mut errors = Vec::with_capacity(dates.len());
    for t in 0..dates.len() {
        errors.push(l2_error(&forecasts[t], &realized[t])?);
    }
    let mean_error = errors.iter().sum::<f64>() / errors.len() as f64;
    Ok(ScoreSeries {
        dates: dates.to_vec(),
        errors,
        mean_error,
    })
}

/// Mean-error ratio of a model against a baseline scored on the same days.
///
/// Two degenerate cases are pinned: if both means are zero the models are
/// indistinguishable and the ratio is exactly `1.0`; if only the baseline
/// mean is zero the ratio is `+inf`.
pub fn error_ratio(model: &ScoreSeries, baseline: &ScoreSeries) -> Result<f64> {
    if model.dates != baseline.dates {
        return Err(Error::Validation(
            "model and baseline were scored on different days".into(),
        ));
    }
    if baseline.mean_error == 0.0 {
        if model.mean_error == 0.0 {
            return Ok(1.0);
        }
        return Ok(f64::INFINITY);
    }
    Ok(model.mean_error / baseline.mean_error)
}

/// Aggregate selection behavior for one class of equations.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SelectionClassStats {
    /// Distinct (group, entry) equations seen.
    pub n_equations: usize,
    /// Total fitted records.
    pub n_records: usize,
    /// Mean selected-predictor count per record.
    pub avg_active: f64,
    /// Mean percentage of predictors whose in/out status changes between
    /// successive fits of the same equation, in `[0, 100]`.
    pub flip_pct: f64,
}

/// Selection stability split into variance and covariance equations.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SelectionStats {
    pub variance: SelectionClassStats,
    pub covariance: SelectionClassStats,
}

fn class_stats(records: Vec<&FitRecord>) -> SelectionClassStats {
    let n_records = records.len();
    let avg_active = if n_records == 0 {
        0.0
    } else {
        records.iter().map(|r| r.active.len() as f64).sum::<f64>() / n_records as f64
    };
    // Group by equation, order by date within each, then compare successive
    // active sets.
    let mut by_eq: BTreeMap<(EquationGroup, usize), Vec<&FitRecord>> = BTreeMap::new();
    for r in &records {
        by_eq.entry((r.group, r.index)).or_default().push(r);
    }
    let n_equations = by_eq.len();
    let mut flip_sum = 0.0;
    let mut flip_count = 0usize;
    for eq_records in by_eq.values_mut() {
        eq_records.sort_by_key(|r| r.date);
        for pair in eq_records.windows(2) {
            let (prev, next) = (pair[0], pair[1]);
            if prev.n_predictors == 0 {
                continue;
            }
            let flips = symmetric_difference_len(&prev.active, &next.active);
            flip_sum += 100.0 * flips as f64 / prev.n_predictors as f64;
            flip_count += 1;
        }
    }
    SelectionClassStats {
        n_equations,
        n_records,
        avg_active,
        flip_pct: if flip_count == 0 {
            0.0
        } else {
            flip_sum / flip_count as f64
        },
    }
}

/// Size of the symmetric difference of two sorted index sets.
fn symmetric_difference_len(a: &[usize], b: &[usize]) -> usize {
    let mut ia = 0;
    let mut ib = 0;
    let mut count = 0;
    while ia < a.len() && ib < b.len() {
        match a[ia].cmp(&b[ib]) {
            std::cmp::Ordering::Less => {
                count += 1;
                ia += 1;
            }
            std::cmp::Ordering::Greater => {
                count += 1;
                ib += 1;
            }
            std::cmp::Ordering::Equal => {
                ia += 1;
                ib += 1;
            }
        }
    }
    count + (a.len() - ia) + (b.len() - ib)
}

/// Summarizes how sparse and how stable the selected predictor sets are,
/// split into variance and covariance equations.
pub fn selection_stats(records: &[FitRecord]) -> SelectionStats {
    let variance: Vec<&FitRecord> = records
        .iter()
        .filter(|r| r.target == TargetKind::Variance)
        .collect();
    let covariance: Vec<&FitRecord> = records
        .iter()
        .filter(|r| r.target == TargetKind::Covariance)
        .collect();
    SelectionStats {
        variance: class_stats(variance),
        covariance: class_stats(covariance),
    }
}

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes per-day errors for several models side by side:
/// `date,<model1>,<model2>,...`.
pub fn save_scores_csv(path: &Path, series: &[(String, ScoreSeries)]) -> Result<()> {
    if series.is_empty() {
        return Err(Error::Validation("no score series to write".into()));
    }
    let dates = &series[0].1.dates;
    for (name, s) in series {
        if &s.dates != dates {
            return Err(Error::Validation(format!(
                "score series '{name}' covers different days than '{}'",
                series[0].0
            )));
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let header: Vec<&str> = series.iter().map(|(n, _)| n.as_str()).collect();
    writeln!(w, "date,{}", header.join(","))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    for (t, d) in dates.iter().enumerate() {
        let row: Vec<String> = series.iter().map(|(_, s)| fmt(s.errors[t])).collect();
        writeln!(w, "{},{}", d.format("%Y-%m-%d"), row.join(","))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// One line of the evaluation summary table.
#[derive(Debug, Clone, Serialize)]
pub struct ScoreSummaryRow {
    pub model: String,
    pub mean_error: f64,
    pub ratio_vs_baseline: f64,
}

/// Writes `model,mean_error,ratio_vs_baseline` rows.
pub fn save_score_summary_csv(path: &Path, rows: &[ScoreSummaryRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "model,mean_error,ratio_vs_baseline")
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    for row in rows {
        writeln!(
            w,
            "{},{},{}",
            row.model,
            fmt(row.mean_error),
            fmt(row.ratio_vs_baseline)
        )
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes the selection-stability table, one row per equation class.
pub fn save_selection_csv(path: &Path, stats: &SelectionStats) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "class,n_equations,n_records,avg_active,flip_pct")
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    for (name, s) in [
        ("variance", stats.variance),
        ("covariance", stats.covariance),
    ] {
        writeln!(
            w,
            "{},{},{},{},{}",
            name,
            s.n_equations,
            s.n_records,
            fmt(s.avg_active),
            fmt(s.flip_pct)
        )
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn date(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    #[test]
    fn l2_error_counts_off_diagonals_once() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 3.0]);
        let b = DMatrix::zeros(2, 2);
        assert_abs_diff_eq!(l2_error(&a, &b).unwrap(), 14f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn l2_error_dimension_mismatch() {
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::zeros(3, 3);
        assert!(matches!(l2_error(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn score_and_ratio_basic() {
        let dates = vec![date("2020-01-01"), date("2020-01-02")];
        let id2 = DMatrix::identity(2, 2);
        let realized = vec![id2.clone(), id2.clone()];
        let fc = vec![id2.clone() * 2.0, id2.clone()];
        let s = score(&dates, &fc, &realized).unwrap();
        // Day 1 error sqrt(2), day 2 zero.
        assert_abs_diff_eq!(s.errors[0], 2f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(s.errors[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.mean_error, 2f64.sqrt() / 2.0, epsilon = 1e-15);

        let base = score(&dates, &realized, &realized).unwrap();
        assert_eq!(base.mean_error, 0.0);
        assert_eq!(error_ratio(&base, &base).unwrap(), 1.0);
        assert_eq!(error_ratio(&s, &base).unwrap(), f64::INFINITY);
        // A model scored against itself as baseline gives exactly 1.
        assert_eq!(error_ratio(&s, &s).unwrap(), 1.0);
    }

    #[test]
    fn ratio_rejects_mismatched_days() {
        let d1 = vec![date("2020-01-01")];
        let d2 = vec![date("2020-01-02")];
        let id = vec![DMatrix::identity(2, 2)];
        let a = score(&d1, &id, &id).unwrap();
        let b = score(&d2, &id, &id).unwrap();
        assert!(error_ratio(&a, &b).is_err());
    }

    #[test]
    fn target_kind_from_vech_index() {
        // 3x3 vech order: (0,0),(1,0),(2,0),(1,1),(2,1),(2,2).
        let kinds: Vec<TargetKind> = (0..6).map(|i| TargetKind::from_vech_index(3, i)).collect();
        assert_eq!(kinds[0], TargetKind::Variance);
        assert_eq!(kinds[1], TargetKind::Covariance);
        assert_eq!(kinds[2], TargetKind::Covariance);
        assert_eq!(kinds[3], TargetKind::Variance);
        assert_eq!(kinds[4], TargetKind::Covariance);
        assert_eq!(kinds[5], TargetKind::Variance);
    }

    fn record(day: &str, index: usize, target: TargetKind, active: Vec<usize>) -> FitRecord {
        FitRecord {
            date: date(day),
            group: EquationGroup::FactorCov,
            index,
            target,
            n_predictors: 18,
            active,
            lambda: 0.1,
            bic: -10.0,
        }
    }

    #[test]
    fn selection_stats_flip_percentages() {
        let records = vec![
            // Variance equation: identical sets on consecutive days.
            record("2020-01-01", 0, TargetKind::Variance, vec![0, 5, 7]),
            record("2020-01-02", 0, TargetKind::Variance, vec![0, 5, 7]),
            // Covariance equation: one predictor flips out of 18.
            record("2020-01-01", 1, TargetKind::Covariance, vec![1, 2]),
            record("2020-01-02", 1, TargetKind::Covariance, vec![1, 3]),
        ];
        let stats = selection_stats(&records);
        assert_eq!(stats.variance.n_equations, 1);
        assert_eq!(stats.variance.n_records, 2);
        assert_abs_diff_eq!(stats.variance.avg_active, 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(stats.variance.flip_pct, 0.0, epsilon = 1e-15);
        // Symmetric difference {2, 3} has 2 elements -> 2/18 of the set.
        assert_abs_diff_eq!(stats.covariance.flip_pct, 200.0 / 18.0, epsilon = 1e-12);
        assert_abs_diff_eq!(stats.covariance.avg_active, 2.0, epsilon = 1e-15);
    }

    #[test]
    fn selection_stats_empty_class() {
        let records = vec![record("2020-01-01", 0, TargetKind::Variance, vec![1])];
        let stats = selection_stats(&records);
        assert_eq!(stats.covariance.n_records, 0);
        assert_eq!(stats.covariance.flip_pct, 0.0);
        // A single record has no day pair, so flips default to zero.
        assert_eq!(stats.variance.flip_pct, 0.0);
    }

    #[test]
    fn symmetric_difference_cases() {
        assert_eq!(symmetric_difference_len(&[], &[]), 0);
        assert_eq!(symmetric_difference_len(&[1, 2], &[]), 2);
        assert_eq!(symmetric_difference_len(&[1, 2, 9], &[2, 5]), 3);
        assert_eq!(symmetric_difference_len(&[0, 1], &[0, 1]), 0);
    }

    #[test]
    fn csv_writers_roundtrip_shape() {
        let dir = tempfile::tempdir().unwrap();
        let dates = vec![date("2020-01-01"), date("2020-01-02")];
        let id = vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2)];
        let twice = vec![DMatrix::identity(2, 2) * 2.0, DMatrix::identity(2, 2)];
        let base = score(&dates, &id, &id).unwrap();
        let model = score(&dates, &twice, &id).unwrap();
        let p = dir.path().join("scores.csv");
        save_scores_csv(
            &p,
            &[
                ("factor".to_string(), model.clone()),
                ("rw".to_string(), base.clone()),
            ],
        )
        .unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("date,factor,rw\n"));
        assert_eq!(text.lines().count(), 3);

        let sp = dir.path().join("summary.csv");
        save_score_summary_csv(
            &sp,
            &[ScoreSummaryRow {
                model: "factor".into(),
                mean_error: model.mean_error,
                ratio_vs_baseline: 1.5,
            }],
        )
        .unwrap();
        let text = std::fs::read_to_string(&sp).unwrap();
        assert!(text.contains("factor,"));

        let sel = dir.path().join("selection.csv");
        let stats = selection_stats(&[record("2020-01-01", 0, TargetKind::Variance, vec![1])]);
        save_selection_csv(&sel, &stats).unwrap();
        let text = std::fs::read_to_string(&sel).unwrap();
        assert!(text.contains("variance,1,1,"));
        assert!(text.contains("covariance,0,0,"));
    }

    #[test]
    fn mismatched_series_rejected_by_writer() {
        let dir = tempfile::tempdir().unwrap();
        let id = vec![DMatrix::identity(2, 2)];
        let a = score(&[date("2020-01-01")], &id, &id).unwrap();
        let b = score(&[date("2020-01-02")], &id, &id).unwrap();
        let err = save_scores_csv(
            &dir.path().join("x.csv"),
            &[("a".into(), a), ("b".into(), b)],
        );
        assert!(err.is_err());
    }
}
