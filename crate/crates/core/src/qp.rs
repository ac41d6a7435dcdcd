//! Dense convex quadratic programming:
//!
//! ```text
//! minimize    (1/2) x' P x + q' x
//! subject to  l <= A x <= u
//! ```
//!
//! solved by an operator-splitting (ADMM) iteration with over-relaxation and
//! per-constraint step sizes, followed by an active-set polishing solve that
//! drives the KKT residual to solver precision. Rows with `l = u` are
//! equalities; infinite bounds disable a side.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct QpProblem {
    /// Symmetric positive semidefinite cost matrix, `n x n`.
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    /// Constraint matrix, `m x n`.
    pub a: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSettings {
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    /// Absolute and relative tolerance for the splitting iteration.
    pub eps: f64,
    /// Acceptance threshold on the final KKT residual.
    pub kkt_tol: f64,
    pub max_iter: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            eps: 1e-9,
            kkt_tol: 1e-8,
            max_iter: 200_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Constraint duals; negative at a lower bound, positive at an upper.
    pub y: DVector<f64>,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub polished: bool,
}

/// Scale-adjusted KKT residual of a primal/dual pair: the worst of
/// stationarity, primal feasibility, and complementary slackness.
pub fn kkt_residual(prob: &QpProblem, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let ax = &prob.a * x;
    let stat = (&prob.p * x + &prob.q + prob.a.transpose() * y).amax();
    let mut prim = 0.0f64;
    let mut comp = 0.0f64;
    for i in 0..ax.len() {
        let v = ax[i];
        prim = prim.max(prob.l[i] - v).max(v - prob.u[i]);
        if y[i] > 0.0 {
            if prob.u[i].is_finite() {
                comp = comp.max(y[i] * (prob.u[i] - v).abs());
            } else {
                comp = comp.max(y[i]);
            }
        } else if y[i] < 0.0 {
            if prob.l[i].is_finite() {
                comp = comp.max(-y[i] * (v - prob.l[i]).abs());
            } else {
                comp = comp.max(-y[i]);
            }
        }
    }
    stat.max(prim.max(0.0)).max(comp)
}

struct Workspace {
    n: usize,
    m: usize,
    rho: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    is_eq: Vec<bool>,
}

impl Workspace {
    fn factorize(prob: &QpProblem, settings: &QpSettings, rho_bar: f64) -> Result<Workspace> {
        let n = prob.p.nrows();
        let m = prob.a.nrows();
        let is_eq: Vec<bool> = (0..m).map(|i| prob.l[i] == prob.u[i]).collect();
        let rho = DVector::from_fn(m, |i, _| if is_eq[i] { 1e3 * rho_bar } else { rho_bar });
        let mut kkt = prob.p.clone();
        for i in 0..n {
            kkt[(i, i)] += settings.sigma;
        }
        // P + sigma I + A' diag(rho) A
        for i in 0..m {
            let row = prob.a.row(i);
            for c in 0..n {
                let rc = rho[i] * row[c];
                if rc != 0.0 {
                    for r in 0..n {
                        kkt[(r, c)] += row[r] * rc;
                    }
                }
            }
        }
        let chol = kkt
            .cholesky()
            .ok_or_else(|| Error::Numeric("QP splitting matrix is not positive definite".into()))?;
        Ok(Workspace {
            n,
            m,
            rho,
            chol,
            is_eq,
        })
    }
}

fn validate(prob: &QpProblem) -> Result<()> {
    let n = prob.p.nrows();
    let m = prob.a.nrows();
    if prob.p.ncols() != n || prob.q.len() != n || prob.a.ncols() != n {
        return Err(Error::Dimension(format!(
            "inconsistent QP shapes: P {}x{}, q {}, A {}x{}",
            prob.p.nrows(),
            prob.p.ncols(),
            prob.q.len(),
            prob.a.nrows(),
            prob.a.ncols()
        )));
    }
    if prob.l.len() != m || prob.u.len() != m {
        return Err(Error::Dimension(format!(
            "bounds of length {}/{} do not match {m} constraint rows",
            prob.l.len(),
            prob.u.len()
        )));
    }
    if prob.p.iter().any(|x| !x.is_finite())
        || prob.q.iter().any(|x| !x.is_finite())
        || prob.a.iter().any(|x| !x.is_finite())
    {
        return Err(Error::Validation(
            "QP data contains non-finite entries".into(),
        ));
    }
    for i in 0..m {
        if prob.l[i].is_nan() || prob.u[i].is_nan() || prob.l[i] > prob.u[i] {
            return Err(Error::Validation(format!(
                "constraint row {i} has invalid bounds [{}, {}]",
                prob.l[i], prob.u[i]
            )));
        }
    }
    Ok(())
}

/// Solves the QP. Fails with a numeric error carrying the residuals if the
/// iteration cap is reached before the KKT tolerance is met.
pub fn solve_qp(prob: &QpProblem, settings: &QpSettings) -> Result<QpSolution> {
    validate(prob)?;
    let n = prob.p.nrows();
    let m = prob.a.nrows();

    if m == 0 {
        // Unconstrained: P x = -q.
        let x = prob
            .p
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numeric("unconstrained QP with singular P".into()))?
            .solve(&(-&prob.q));
        let y = DVector::zeros(0);
        let res = kkt_residual(prob, &x, &y);
        return Ok(QpSolution {
            x,
            y,
            iterations: 0,
            kkt_residual: res,
            polished: false,
        });
    }

    let mut rho_bar = settings.rho;
    let mut ws = Workspace::factorize(prob, settings, rho_bar)?;

    let mut x = DVector::<f64>::zeros(n);
    let mut z = DVector::from_fn(m, |i, _| 0.0f64.clamp(prob.l[i], prob.u[i]));
    let mut y = DVector::<f64>::zeros(m);

    let mut polish_gate = 1e-6;
    let mut last_refactor = 0usize;
    let mut best: Option<(f64, DVector<f64>, DVector<f64>)> = None;

    let mut iter = 0usize;
    while iter < settings.max_iter {
        iter += 1;

        // x-step: (P + sigma I + A' diag(rho) A) xt = sigma x - q + A'(rho z - y)
        let rz: DVector<f64> = DVector::from_fn(m, |i, _| ws.rho[i] * z[i] - y[i]);
        let rhs = settings.sigma * &x - &prob.q + prob.a.transpose() * rz;
        let xt = ws.chol.solve(&rhs);
        let axt = &prob.a * &xt;

        // Over-relaxed updates.
        let x_next = settings.alpha * &xt + (1.0 - settings.alpha) * &x;
        let mut z_next = DVector::<f64>::zeros(m);
        for i in 0..m {
            let zi = settings.alpha * axt[i] + (1.0 - settings.alpha) * z[i];
            z_next[i] = (zi + y[i] / ws.rho[i]).clamp(prob.l[i], prob.u[i]);
            y[i] += ws.rho[i] * (zi - z_next[i]);
        }
        x = x_next;
        z = z_next;

        if iter % 25 != 0 && iter != settings.max_iter {
            continue;
        }

        let ax = &prob.a * &x;
        let px = &prob.p * &x;
        let aty = prob.a.transpose() * &y;
        let r_prim = (&ax - &z).amax();
        let r_dual = (&px + &prob.q + &aty).amax();
        let prim_scale = ax.amax().max(z.amax()).max(1.0);
        let dual_scale = px.amax().max(prob.q.amax()).max(aty.amax()).max(1.0);

        let res_now = kkt_residual(prob, &x, &y);
        if best.as_ref().map_or(true, |(b, _, _)| res_now < *b) {
            best = Some((res_now, x.clone(), y.clone()));
        }

        let prim_ok = r_prim <= settings.eps + settings.eps * prim_scale;
        let dual_ok = r_dual <= settings.eps + settings.eps * dual_scale;

        let near = r_prim <= polish_gate * prim_scale.max(1.0)
            && r_dual <= polish_gate * dual_scale.max(1.0);
        if near {
            if let Some((px_pol, py_pol)) = polish(prob, &x, &z, &y, &ws) {
                let res = kkt_residual(prob, &px_pol, &py_pol);
                if res <= settings.kkt_tol {
                    return Ok(QpSolution {
                        x: px_pol,
                        y: py_pol,
                        iterations: iter,
                        kkt_residual: res,
                        polished: true,
                    });
                }
            }
            // Ask for a tighter iterate before polishing again.
            polish_gate = (polish_gate * 1e-2).max(1e-14);
        }

        if prim_ok && dual_ok && res_now <= settings.kkt_tol {
            return Ok(QpSolution {
                x,
                y,
                iterations: iter,
                kkt_residual: res_now,
                polished: false,
            });
        }

        // Rebalance the step size when the residuals drift apart.
        let ratio = (r_prim / prim_scale) / (r_dual / dual_scale).max(1e-300);
        if (ratio > 10.0 || ratio < 0.1) && iter >= last_refactor + 100 {
            let factor = ratio.sqrt().clamp(1e-2, 1e2);
            let new_rho = (rho_bar * factor).clamp(1e-6, 1e6);
            if (new_rho / rho_bar - 1.0).abs() > 1e-3 {
                rho_bar = new_rho;
                ws = Workspace::factorize(prob, settings, rho_bar)?;
                last_refactor = iter;
            }
        }
    }

    let (res, bx, by) = best.expect("at least one residual check");
    if res <= settings.kkt_tol {
        return Ok(QpSolution {
            x: bx,
            y: by,
            iterations: iter,
            kkt_residual: res,
            polished: false,
        });
    }
    Err(Error::Numeric(format!(
        "QP did not reach KKT tolerance {:e} within {} iterations (best residual {res:e})",
        settings.kkt_tol, settings.max_iter
    )))
}

/// Solves the equality-constrained problem on the constraints the iterate
/// says are active, with slight regularization and iterative refinement.
fn polish(
    prob: &QpProblem,
    x: &DVector<f64>,
    z: &DVector<f64>,
    y: &DVector<f64>,
    ws: &Workspace,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = ws.n;
    let m = ws.m;
    let ax = &prob.a * x;

    #[derive(Clone, Copy, PartialEq)]
    enum Side {
        Lower,
        Upper,
        Equal,
    }
    let mut active: Vec<(usize, Side)> = Vec::new();
    for i in 0..m {
        if ws.is_eq[i] {
            active.push((i, Side::Equal));
            continue;
        }
        let span = (prob.u[i] - prob.l[i]).abs();
        let tol = 1e-7 * (1.0 + ax[i].abs().max(z[i].abs()));
        let near_l = prob.l[i].is_finite() && z[i] - prob.l[i] <= tol.min(0.5 * span);
        let near_u = prob.u[i].is_finite() && prob.u[i] - z[i] <= tol.min(0.5 * span);
        if y[i] < -1e-9 || (near_l && !near_u) {
            active.push((i, Side::Lower));
        } else if y[i] > 1e-9 || (near_u && !near_l) {
            active.push((i, Side::Upper));
        }
    }

    let k = active.len();
    let dim = n + k;
    let delta = 1e-9;
    let mut kkt = DMatrix::<f64>::zeros(dim, dim);
    for r in 0..n {
        for c in 0..n {
            kkt[(r, c)] = prob.p[(r, c)];
        }
        kkt[(r, r)] += delta;
    }
    for (a_idx, &(row, _)) in active.iter().enumerate() {
        for c in 0..n {
            let v = prob.a[(row, c)];
            kkt[(n + a_idx, c)] = v;
            kkt[(c, n + a_idx)] = v;
        }
        kkt[(n + a_idx, n + a_idx)] = -delta;
    }
    let mut rhs = DVector::<f64>::zeros(dim);
    for i in 0..n {
        rhs[i] = -prob.q[i];
    }
    for (a_idx, &(row, side)) in active.iter().enumerate() {
        rhs[n + a_idx] = match side {
            Side::Lower => prob.l[row],
            Side::Upper | Side::Equal => prob.u[row],
        };
    }

    let lu = kkt.clone().lu();
    let mut sol = lu.solve(&rhs)?;
    // Refine against the unregularized system.
    for _ in 0..3 {
        let mut resid = rhs.clone();
        // resid -= KKT_exact * sol
        for r in 0..n {
            let mut acc = 0.0;
            for c in 0..n {
                acc += prob.p[(r, c)] * sol[c];
            }
            for (a_idx, &(row, _)) in active.iter().enumerate() {
                acc += prob.a[(row, r)] * sol[n + a_idx];
            }
            resid[r] -= acc;
        }
        for (a_idx, &(row, _)) in active.iter().enumerate() {
            let mut acc = 0.0;
            for c in 0..n {
                acc += prob.a[(row, c)] * sol[c];
            }
            resid[n + a_idx] -= acc;
        }
        let corr = lu.solve(&resid)?;
        sol += &corr;
        if corr.amax() <= 1e-14 * (1.0 + sol.amax()) {
            break;
        }
    }

    let x_pol = sol.rows(0, n).into_owned();
    let mut y_pol = DVector::<f64>::zeros(m);
    for (a_idx, &(row, side)) in active.iter().enumerate() {
        let nu = sol[n + a_idx];
        // Enforce dual sign: negative at lower bounds, positive at upper.
        y_pol[row] = match side {
            Side::Lower => nu.min(0.0),
            Side::Upper => nu.max(0.0),
            Side::Equal => nu,
        };
    }
    Some((x_pol, y_pol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let mut m = &a * a.transpose();
        for i in 0..n {
            m[(i, i)] += 0.2;
        }
        m
    }

    #[test]
    fn scalar_box_hits_bound() {
        let prob = QpProblem {
            p: DMatrix::from_element(1, 1, 1.0),
            q: DVector::from_element(1, -1.0),
            a: DMatrix::from_element(1, 1, 1.0),
            l: DVector::from_element(1, 0.0),
            u: DVector::from_element(1, 0.5),
        };
        let sol = solve_qp(&prob, &QpSettings::default()).unwrap();
        assert_abs_diff_eq!(sol.x[0], 0.5, epsilon = 1e-9);
        assert!(sol.kkt_residual <= 1e-8);
    }

    #[test]
    fn equality_only_projects_onto_simplex_center() {
        let n = 5;
        let prob = QpProblem {
            p: DMatrix::identity(n, n),
            q: DVector::zeros(n),
            a: DMatrix::from_element(1, n, 1.0),
            l: DVector::from_element(1, 1.0),
            u: DVector::from_element(1, 1.0),
        };
        let sol = solve_qp(&prob, &QpSettings::default()).unwrap();
        for i in 0..n {
            assert_abs_diff_eq!(sol.x[i], 0.2, epsilon = 1e-9);
        }
    }

    #[test]
    fn budget_only_matches_closed_form() {
        for seed in 0..10 {
            let n = 10;
            let sigma = random_spd(n, seed);
            let prob = QpProblem {
                p: 2.0 * &sigma,
                q: DVector::zeros(n),
                a: DMatrix::from_element(1, n, 1.0),
                l: DVector::from_element(1, 1.0),
                u: DVector::from_element(1, 1.0),
            };
            let sol = solve_qp(&prob, &QpSettings::default()).unwrap();
            let ones = DVector::from_element(n, 1.0);
            let si = sigma.clone().cholesky().unwrap().solve(&ones);
            let closed = &si / si.sum();
            for i in 0..n {
                assert_abs_diff_eq!(sol.x[i], closed[i], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn active_box_corner() {
        // min x'x with x1 >= 0.3, x2 >= 0.4 pushes to the corner.
        let prob = QpProblem {
            p: DMatrix::identity(2, 2),
            q: DVector::zeros(2),
            a: DMatrix::identity(2, 2),
            l: DVector::from_vec(vec![0.3, 0.4]),
            u: DVector::from_vec(vec![1.0, 1.0]),
        };
        let sol = solve_qp(&prob, &QpSettings::default()).unwrap();
        assert_abs_diff_eq!(sol.x[0], 0.3, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.x[1], 0.4, epsilon = 1e-9);
        // Duals at the lower bounds are negative.
        assert!(sol.y[0] < 0.0);
        assert!(sol.y[1] < 0.0);
    }

    fn random_feasible_box_simplex(n: usize, box_limit: f64, rng: &mut impl Rng) -> DVector<f64> {
        loop {
            let g: Vec<f64> = (0..n)
                .map(|_| -(rng.random_range(1e-12..1.0f64)).ln())
                .collect();
            let s: f64 = g.iter().sum();
            let w = DVector::from_iterator(n, g.iter().map(|x| x / s));
            if w.iter().all(|&x| x <= box_limit) {
                return w;
            }
        }
    }

    #[test]
    fn beats_random_feasible_points() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for seed in 0..5 {
            let n = 8;
            let box_limit = 0.2;
            let sigma = random_spd(n, 50 + seed);
            let mut a = DMatrix::zeros(n + 1, n);
            for i in 0..n {
                a[(i, i)] = 1.0;
            }
            for j in 0..n {
                a[(n, j)] = 1.0;
            }
            let mut l = DVector::from_element(n + 1, 0.0);
            let mut u = DVector::from_element(n + 1, box_limit);
            l[n] = 1.0;
            u[n] = 1.0;
            let prob = QpProblem {
                p: 2.0 * &sigma,
                q: DVector::zeros(n),
                a,
                l,
                u,
            };
            let sol = solve_qp(&prob, &QpSettings::default()).unwrap();
            assert!(sol.kkt_residual <= 1e-8);
            let obj = (sol.x.transpose() * &sigma * &sol.x)[(0, 0)];
            for _ in 0..200 {
                let w = random_feasible_box_simplex(n, box_limit, &mut rng);
                let o = (w.transpose() * &sigma * &w)[(0, 0)];
                assert!(obj <= o + 1e-9, "found better feasible point");
            }
        }
    }

    #[test]
    fn rejects_crossed_bounds() {
        let prob = QpProblem {
            p: DMatrix::identity(1, 1),
            q: DVector::zeros(1),
            a: DMatrix::identity(1, 1),
            l: DVector::from_element(1, 1.0),
            u: DVector::from_element(1, 0.0),
        };
        assert!(matches!(
            solve_qp(&prob, &QpSettings::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn iteration_cap_reports_residual() {
        let prob = QpProblem {
            p: random_spd(6, 3) * 2.0,
            q: DVector::zeros(6),
            a: DMatrix::from_element(1, 6, 1.0),
            l: DVector::from_element(1, 1.0),
            u: DVector::from_element(1, 1.0),
        };
        let settings = QpSettings {
            max_iter: 1,
            ..QpSettings::default()
        };
        match solve_qp(&prob, &settings) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("residual")),
            Ok(sol) => assert!(sol.kkt_residual <= 1e-8),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn unconstrained_solves_linear_system() {
        let pmat = random_spd(4, 11);
        let q = DVector::from_vec(vec![0.3, -0.2, 0.5, 0.1]);
        let prob = QpProblem {
            p: pmat.clone(),
            q: q.clone(),
            a: DMatrix::zeros(0, 4),
            l: DVector::zeros(0),
            u: DVector::zeros(0),
        };
        let sol = solve_qp(&prob, &QpSettings::default()).unwrap();
        let resid = (&pmat * &sol.x + &q).amax();
        assert!(resid <= 1e-10);
    }
}
