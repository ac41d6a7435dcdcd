//! Symmetric-matrix transforms: eigendecomposition, matrix logarithm and
//! exponential, and projection onto the positive semidefinite cone.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative eigenvalue floor applied inside `matrix_log`.
pub const LOG_EIG_FLOOR: f64 = 1e-10;

/// Eigendecomposition of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct EigenDecomp {
    pub values: DVector<f64>,
    /// Columns are the eigenvectors, ordered like `values`.
    pub vectors: DMatrix<f64>,
}

impl EigenDecomp {
    /// Rebuilds `V diag(f(values)) V'`.
    pub fn map_rebuild(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for j in 0..n {
            let fv = f(self.values[j]);
            scaled.column_mut(j).scale_mut(fv);
        }
        let mut out = &scaled * self.vectors.transpose();
        symmetrize_mut(&mut out);
        out
    }
}

/// Averages a matrix with its transpose in place.
pub fn symmetrize_mut(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Returns `(M + M') / 2`.
pub fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    symmetrize_mut(&mut out);
    out
}

/// Symmetric eigendecomposition with ascending eigenvalues.
///
/// The input is symmetrized first, so slight asymmetry from accumulated
/// round-off is tolerated. Solver failure surfaces as a numeric error.
pub fn eigen_sym(m: &DMatrix<f64>) -> Result<EigenDecomp> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "eigendecomposition expects a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Validation(
            "eigendecomposition input contains non-finite entries".into(),
        ));
    }
    let sym = symmetrized(m);
    let eig = nalgebra::SymmetricEigen::try_new(sym, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numeric("symmetric eigensolver failed to converge".into()))?;
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(EigenDecomp { values, vectors })
}

/// Matrix logarithm of a (near-)SPD symmetric matrix.
///
/// Eigenvalues are floored at `LOG_EIG_FLOOR` times their mean before taking
/// logs, which tolerates tiny negative eigenvalues from round-off. A matrix
/// whose smallest eigenvalue is below `-1e-8 * trace / n` is outside the
/// domain and rejected.
pub fn matrix_log(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = eigen_sym(m)?;
    let n = eig.values.len() as f64;
    let mean_eig = eig.values.sum() / n;
    let min_eig = eig.values[0];
    if mean_eig <= 0.0 {
        return Err(Error::Domain(
            "matrix log of a non-positive matrix (trace <= 0)".into(),
        ));
    }
    if min_eig < -1e-8 * mean_eig {
        return Err(Error::Domain(format!(
            "matrix log of an indefinite matrix: min eigenvalue {min_eig:e}"
        )));
    }
    let floor = LOG_EIG_FLOOR * mean_eig;
    Ok(eig.map_rebuild(|v| v.max(floor).ln()))
}

/// Matrix exponential of a symmetric matrix; the result is SPD.
pub fn matrix_exp(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = eigen_sym(m)?;
    Ok(eig.map_rebuild(f64::exp))
}

/// Clips eigenvalues below `floor`, leaving the matrix untouched (bit-exact)
/// when its smallest eigenvalue already meets the floor.
pub fn psd_project(m: &DMatrix<f64>, floor: f64) -> Result<DMatrix<f64>> {
    if floor < 0.0 || !floor.is_finite() {
        return Err(Error::Validation(format!(
            "psd_project floor must be finite and non-negative, got {floor}"
        )));
    }
    let sym = symmetrized(m);
    // Cheap certificate first: Cholesky of M - floor*I succeeds iff the
    // smallest eigenvalue strictly exceeds the floor.
    let mut shifted = sym.clone();
    for i in 0..shifted.nrows() {
        shifted[(i, i)] -= floor;
    }
    if shifted.cholesky().is_some() {
        return Ok(sym);
    }
    let eig = eigen_sym(&sym)?;
    if eig.values[0] >= floor {
        return Ok(sym);
    }
    Ok(eig.map_rebuild(|v| v.max(floor)))
}

/// Whether a symmetric matrix is positive definite (Cholesky succeeds).
pub fn is_spd(m: &DMatrix<f64>) -> bool {
    m.nrows() == m.ncols() && symmetrized(m).cholesky().is_some()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let mut m = &a * a.transpose();
        for i in 0..n {
            m[(i, i)] += 0.1;
        }
        m
    }

    #[test]
    fn eigen_of_diagonal_is_sorted() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0, 2.0]));
        let eig = eigen_sym(&m).unwrap();
        assert_abs_diff_eq!(eig.values[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(eig.values[1], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(eig.values[2], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn log_of_identity_is_zero() {
        let m = DMatrix::identity(4, 4);
        let l = matrix_log(&m).unwrap();
        for x in l.iter() {
            assert_abs_diff_eq!(*x, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn log_of_diagonal_is_elementwise() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, f64::exp(2.0)]));
        let l = matrix_log(&m).unwrap();
        assert_abs_diff_eq!(l[(0, 0)], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l[(1, 1)], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l[(0, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn exp_log_roundtrip() {
        for seed in 0..20 {
            let m = random_spd(6, seed);
            let back = matrix_exp(&matrix_log(&m).unwrap()).unwrap();
            let scale = m.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            for (a, b) in m.iter().zip(back.iter()) {
                assert!((a - b).abs() <= 1e-9 * scale.max(1.0));
            }
        }
    }

    #[test]
    fn log_rejects_indefinite() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.5]));
        assert!(matches!(matrix_log(&m), Err(Error::Domain(_))));
    }

    #[test]
    fn log_floors_tiny_negative_eigenvalues() {
        // Eigenvalues {1, -1e-12}: within the round-off tolerance, so the
        // tiny negative one is floored rather than rejected.
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-12]));
        let l = matrix_log(&m).unwrap();
        assert!(l[(1, 1)] < -20.0);
        assert!(l[(1, 1)].is_finite());
    }

    #[test]
    fn exp_output_is_spd() {
        for seed in 0..10 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-2.0..2.0));
            let sym = symmetrized(&a);
            assert!(is_spd(&matrix_exp(&sym).unwrap()));
        }
    }

    #[test]
    fn psd_project_identity_on_spd_is_exact() {
        let m = random_spd(5, 7);
        let p = psd_project(&m, 0.0).unwrap();
        assert_eq!(m.as_slice(), p.as_slice());
    }

    #[test]
    fn psd_project_clips_negative_eigenvalue() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, -1.0]));
        let p = psd_project(&m, 0.0).unwrap();
        let eig = eigen_sym(&p).unwrap();
        assert!(eig.values[0] >= -1e-12);
        assert_abs_diff_eq!(p[(0, 0)], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[(1, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn psd_project_respects_positive_floor() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1e-14]));
        let p = psd_project(&m, 1e-6).unwrap();
        let eig = eigen_sym(&p).unwrap();
        assert!(eig.values[0] >= 1e-6 - 1e-12);
    }

    proptest! {
        #[test]
        fn psd_project_is_idempotent(seed in 0u64..50) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
            let sym = symmetrized(&a);
            let p1 = psd_project(&sym, 1e-8).unwrap();
            let p2 = psd_project(&p1, 1e-8).unwrap();
            let scale = p1.iter().fold(1.0f64, |a, x| a.max(x.abs()));
            for (a, b) in p1.iter().zip(p2.iter()) {
                prop_assert!((a - b).abs() <= 1e-10 * scale);
            }
        }

        #[test]
        fn psd_project_output_is_psd(seed in 0u64..50) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
            let p = psd_project(&symmetrized(&a), 0.0).unwrap();
            let eig = eigen_sym(&p).unwrap();
            prop_assert!(eig.values[0] >= -1e-10);
        }
    }
}
