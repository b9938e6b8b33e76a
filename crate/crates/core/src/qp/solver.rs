use nalgebra::{Cholesky, DMatrix, DVector};

use super::{check_kkt, QProblem, QpSolution, QpStatus, SolverOptions};
use crate::{Error, Result};

/// Working state of the dual active-set iteration.
///
/// Constraints are stored as `nᵢᵀ z ≥ bᵢ`. With `N` the matrix of active
/// normals, `J` is orthogonal in the `H` metric (`Jᵀ H J = I`) and
/// `R = J₁ᵀ N` is upper triangular, where `J₁` holds the first `q` columns.
struct ActiveSet {
    n: usize,
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    q: usize,
    /// Constraint ids of the active set, in `R` column order.
    ids: Vec<usize>,
    /// Multipliers of the active constraints.
    u: Vec<f64>,
}

impl ActiveSet {
    /// Appends a constraint whose transformed normal is `d = Jᵀ n`.
    fn add(&mut self, mut d: DVector<f64>, id: usize, mult: f64) {
        let q = self.q;
        for i in ((q + 1)..self.n).rev() {
            if d[i] == 0.0 {
                continue;
            }
            let (a, b) = (d[i - 1], d[i]);
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            d[i - 1] = h;
            d[i] = 0.0;
            rotate_columns(&mut self.j, i - 1, i, c, s);
        }
        for k in 0..=q {
            self.r[(k, q)] = d[k];
        }
        self.q += 1;
        self.ids.push(id);
        self.u.push(mult);
    }

    /// Removes the `l`-th active constraint and restores the triangular
    /// factor with Givens rotations.
    fn drop(&mut self, l: usize) {
        let q = self.q;
        self.ids.remove(l);
        self.u.remove(l);
        for col in l..q - 1 {
            for row in 0..=col + 1 {
                self.r[(row, col)] = self.r[(row, col + 1)];
            }
        }
        for row in 0..self.n {
            self.r[(row, q - 1)] = 0.0;
        }
        self.q -= 1;
        for k in l..self.q {
            let (a, b) = (self.r[(k, k)], self.r[(k + 1, k)]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            for col in k..self.q {
                let (t1, t2) = (self.r[(k, col)], self.r[(k + 1, col)]);
                self.r[(k, col)] = c * t1 + s * t2;
                self.r[(k + 1, col)] = -s * t1 + c * t2;
            }
            self.r[(k + 1, k)] = 0.0;
            rotate_columns(&mut self.j, k, k + 1, c, s);
        }
    }

    /// `R⁻¹ d₁` by back substitution.
    fn dual_direction(&self, d: &DVector<f64>) -> Vec<f64> {
        let mut r = vec![0.0; self.q];
        for k in (0..self.q).rev() {
            let acc: f64 = ((k + 1)..self.q).map(|m| self.r[(k, m)] * r[m]).sum();
            r[k] = (d[k] - acc) / self.r[(k, k)];
        }
        r
    }
}

/// Columns `a`, `b` of `m` ← `(c·a + s·b, −s·a + c·b)`.
fn rotate_columns(m: &mut DMatrix<f64>, a: usize, b: usize, c: f64, s: f64) {
    for k in 0..m.nrows() {
        let (t1, t2) = (m[(k, a)], m[(k, b)]);
        m[(k, a)] = c * t1 + s * t2;
        m[(k, b)] = -s * t1 + c * t2;
    }
}

/// Solves a strictly convex QP.
///
/// Returns an error only for malformed input (dimension mismatch, non-finite
/// data, or a Hessian that is not positive definite). Infeasibility and the
/// iteration cap are reported through [`QpStatus`].
pub fn solve(qp: &QProblem, opts: &SolverOptions) -> Result<QpSolution> {
    qp.validate()?;
    let n = qp.dim();
    let meq = qp.eq_bound.len();
    let mineq = qp.ineq_bound.len();

    let chol = Cholesky::new(qp.hessian.clone())
        .ok_or_else(|| Error::MalformedProblem("hessian is not positive definite".into()))?;
    let linv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::MalformedProblem("singular Cholesky factor".into()))?;

    // Constraint ids: 0..meq are equalities, then inequalities as −Gᵢ z ≥ −gᵢ.
    let normals: Vec<DVector<f64>> = (0..meq)
        .map(|i| qp.eq_matrix.row(i).transpose())
        .chain((0..mineq).map(|i| -qp.ineq_matrix.row(i).transpose()))
        .collect();
    let bounds: Vec<f64> = qp.eq_bound.iter().copied().chain(qp.ineq_bound.iter().map(|g| -g)).collect();
    let norm_inf: Vec<f64> = normals.iter().map(|v| v.amax()).collect();
    let mut eq_sign = vec![1.0; meq];

    let mut set = ActiveSet {
        n,
        j: linv.transpose(),
        r: DMatrix::zeros(n, n),
        q: 0,
        ids: Vec::new(),
        u: Vec::new(),
    };
    let mut x = -chol.solve(&qp.linear);
    let mut is_active = vec![false; meq + mineq];
    let mut next_eq = 0;
    let mut iterations = 0;

    let threshold = |id: usize, x: &DVector<f64>| 1e-12 * (1.0 + bounds[id].abs() + norm_inf[id] * x.amax());

    let status = 'outer: loop {
        // Pick the next constraint to enforce: equalities first, then the
        // most violated inequality (violation scaled by its normal).
        let (p, np, bp) = if next_eq < meq {
            let id = next_eq;
            next_eq += 1;
            let s = normals[id].dot(&x) - bounds[id];
            let sign = if s > 0.0 { -1.0 } else { 1.0 };
            eq_sign[id] = sign;
            (id, &normals[id] * sign, bounds[id] * sign)
        } else {
            let mut best: Option<(usize, f64)> = None;
            for id in meq..meq + mineq {
                if is_active[id] {
                    continue;
                }
                let s = normals[id].dot(&x) - bounds[id];
                if s < -threshold(id, &x) {
                    let scaled = s / norm_inf[id].max(f64::MIN_POSITIVE);
                    if best.is_none_or(|(_, b)| scaled < b) {
                        best = Some((id, scaled));
                    }
                }
            }
            match best {
                Some((id, _)) => (id, normals[id].clone(), bounds[id]),
                None => break QpStatus::Optimal,
            }
        };

        let mut s_p = np.dot(&x) - bp;
        let mut u_plus = 0.0;
        loop {
            iterations += 1;
            if iterations > opts.max_iter {
                break 'outer QpStatus::MaxIterations;
            }
            let d = set.j.tr_mul(&np);
            let q = set.q;
            let d2 = d.rows(q, n - q);
            let z = set.j.columns(q, n - q) * d2;
            let d2sq = d2.norm_squared();
            let dir = set.dual_direction(&d);

            // Largest dual step keeping active inequality multipliers ≥ 0.
            let mut t1 = f64::INFINITY;
            let mut drop_at = None;
            for (k, &rk) in dir.iter().enumerate() {
                if set.ids[k] >= meq && rk > 0.0 {
                    let ratio = set.u[k] / rk;
                    if ratio < t1 {
                        t1 = ratio;
                        drop_at = Some(k);
                    }
                }
            }
            // Full primal step onto the constraint; zᵀnₚ = ‖d₂‖².
            let degenerate = d2sq <= (1e-13 * d.norm()).powi(2);
            let t2 = if degenerate { f64::INFINITY } else { -s_p / d2sq };

            if degenerate && p < meq && s_p.abs() <= threshold(p, &x) {
                // Redundant equality, already satisfied.
                continue 'outer;
            }
            let t = t1.min(t2);
            if t.is_infinite() {
                break 'outer QpStatus::Infeasible;
            }
            for (uk, rk) in set.u.iter_mut().zip(&dir) {
                *uk -= t * rk;
            }
            u_plus += t;
            if t2.is_infinite() {
                let l = drop_at.expect("finite dual step has a blocking constraint");
                is_active[set.ids[l]] = false;
                set.drop(l);
                continue;
            }
            x += &z * t;
            if t == t2 {
                is_active[p] = true;
                set.add(d, p, u_plus);
                continue 'outer;
            }
            let l = drop_at.expect("partial step has a blocking constraint");
            is_active[set.ids[l]] = false;
            set.drop(l);
            s_p = np.dot(&x) - bp;
        }
    };

    let (mut lambda, mut mu) = multipliers(&set, meq, mineq, &eq_sign);
    let mut report = check_kkt(qp, &x, &lambda, &mu);
    let mut status = status;
    if status == QpStatus::Optimal && !report.passes(opts.tol) {
        if let Some((xr, lr, mr)) = refine(qp, &set, &normals, &bounds, meq, mineq, &eq_sign) {
            let rr = check_kkt(qp, &xr, &lr, &mr);
            if rr.max() < report.max() {
                (x, lambda, mu, report) = (xr, lr, mr, rr);
            }
        }
        if !report.passes(opts.tol) {
            status = QpStatus::Inaccurate;
        }
    }
    Ok(QpSolution {
        objective: qp.objective(&x),
        z: x,
        ineq_duals: lambda,
        eq_duals: mu,
        status,
        kkt_residual: report.max(),
        iterations,
    })
}

fn multipliers(set: &ActiveSet, meq: usize, mineq: usize, eq_sign: &[f64]) -> (DVector<f64>, DVector<f64>) {
    let mut lambda = DVector::zeros(mineq);
    let mut mu = DVector::zeros(meq);
    for (&id, &u) in set.ids.iter().zip(&set.u) {
        if id < meq {
            mu[id] = -eq_sign[id] * u;
        } else {
            lambda[id - meq] = u.max(0.0);
        }
    }
    (lambda, mu)
}

/// Re-solves the equality-constrained QP on the final active set through
/// its KKT system.
fn refine(
    qp: &QProblem,
    set: &ActiveSet,
    normals: &[DVector<f64>],
    bounds: &[f64],
    meq: usize,
    mineq: usize,
    eq_sign: &[f64],
) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let n = qp.dim();
    let q = set.ids.len();
    let mut k = DMatrix::zeros(n + q, n + q);
    let mut rhs = DVector::zeros(n + q);
    k.view_mut((0, 0), (n, n)).copy_from(&qp.hessian);
    rhs.rows_mut(0, n).copy_from(&(-&qp.linear));
    for (c, &id) in set.ids.iter().enumerate() {
        let sign = if id < meq { eq_sign[id] } else { 1.0 };
        let nrm = &normals[id] * sign;
        k.view_mut((0, n + c), (n, 1)).copy_from(&(-&nrm));
        k.view_mut((n + c, 0), (1, n)).copy_from(&nrm.transpose());
        rhs[n + c] = bounds[id] * sign;
    }
    let sol = k.lu().solve(&rhs)?;
    let x = sol.rows(0, n).into_owned();
    let refined = ActiveSet {
        n,
        j: DMatrix::zeros(0, 0),
        r: DMatrix::zeros(0, 0),
        q,
        ids: set.ids.clone(),
        u: sol.rows(n, q).iter().copied().collect(),
    };
    let (lambda, mu) = multipliers(&refined, meq, mineq, eq_sign);
    Some((x, lambda, mu))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    fn v(data: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(data)
    }

    fn opts() -> SolverOptions {
        SolverOptions::default()
    }

    #[test]
    fn clipped_scalar() {
        // (x − 1)² = x² − 2x + 1
        let qp = QProblem::new(m(1, 1, &[2.0]), v(&[-2.0])).with_inequalities(m(1, 1, &[1.0]), v(&[0.5]));
        let s = solve(&qp, &opts()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_abs_diff_eq!(s.z[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s.ineq_duals[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn equality_pins_solution() {
        let qp = QProblem::new(m(1, 1, &[2.0]), v(&[0.0])).with_equalities(m(1, 1, &[1.0]), v(&[3.0]));
        let s = solve(&qp, &opts()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_abs_diff_eq!(s.z[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.eq_duals[0], -6.0, epsilon = 1e-12);
    }

    #[test]
    fn symmetric_halfplane() {
        let qp = QProblem::new(m(2, 2, &[2.0, 0.0, 0.0, 2.0]), v(&[0.0, 0.0]))
            .with_inequalities(m(1, 2, &[-1.0, -1.0]), v(&[-2.0]));
        let s = solve(&qp, &opts()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_abs_diff_eq!(s.z, v(&[1.0, 1.0]), epsilon = 1e-12);
    }

    #[test]
    fn reports_infeasibility() {
        let qp = QProblem::new(m(1, 1, &[1.0]), v(&[0.0]))
            .with_inequalities(m(2, 1, &[1.0, -1.0]), v(&[-1.0, -1.0]));
        assert_eq!(solve(&qp, &opts()).unwrap().status, QpStatus::Infeasible);
        let qp = QProblem::new(m(2, 2, &[1.0, 0.0, 0.0, 1.0]), v(&[0.0, 0.0]))
            .with_equalities(m(2, 2, &[1.0, 1.0, 2.0, 2.0]), v(&[1.0, 3.0]));
        assert_eq!(solve(&qp, &opts()).unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn redundant_equalities_are_tolerated() {
        let qp = QProblem::new(m(2, 2, &[1.0, 0.0, 0.0, 1.0]), v(&[0.0, 0.0]))
            .with_equalities(m(2, 2, &[1.0, 1.0, 2.0, 2.0]), v(&[1.0, 2.0]));
        let s = solve(&qp, &opts()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_abs_diff_eq!(s.z, v(&[0.5, 0.5]), epsilon = 1e-12);
    }

    #[test]
    fn rejects_indefinite_hessian() {
        let qp = QProblem::new(m(1, 1, &[-1.0]), v(&[0.0]));
        assert!(matches!(solve(&qp, &opts()), Err(Error::MalformedProblem(_))));
        let qp = QProblem::new(m(2, 2, &[1.0, 0.5, 0.0, 1.0]), v(&[0.0, 0.0]));
        assert!(matches!(solve(&qp, &opts()), Err(Error::MalformedProblem(_))));
    }

    #[test]
    fn iteration_cap_is_reported() {
        let qp = QProblem::new(m(2, 2, &[2.0, 0.0, 0.0, 2.0]), v(&[0.0, 0.0]))
            .with_inequalities(m(2, 2, &[-1.0, 0.0, 0.0, -1.0]), v(&[-1.0, -1.0]));
        let s = solve(&qp, &SolverOptions { tol: 1e-6, max_iter: 1 }).unwrap();
        assert_eq!(s.status, QpStatus::MaxIterations);
    }

    fn random_qp(rng: &mut ChaCha8Rng, n: usize, mi: usize, me: usize) -> QProblem {
        let mut r = || rng.gen_range(-1.0..1.0_f64);
        let base = DMatrix::from_fn(n, n, |_, _| r());
        let h = base.transpose() * &base + DMatrix::identity(n, n) * 0.1;
        let f = DVector::from_fn(n, |_, _| 5.0 * r());
        let z0 = DVector::from_fn(n, |_, _| r());
        let g = DMatrix::from_fn(mi, n, |_, _| r());
        let slack = DVector::from_fn(mi, |_, _| r().abs());
        let gb = &g * &z0 + slack;
        let a = DMatrix::from_fn(me, n, |_, _| r());
        let ab = &a * &z0;
        QProblem::new(h, f).with_inequalities(g, gb).with_equalities(a, ab)
    }

    #[test]
    fn random_problems_pass_kkt() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..500 {
            let n = rng.gen_range(1..12);
            let mi = rng.gen_range(0..3 * n);
            let me = rng.gen_range(0..n);
            let qp = random_qp(&mut rng, n, mi, me);
            let s = solve(&qp, &opts()).unwrap();
            assert_eq!(s.status, QpStatus::Optimal, "trial {trial}");
            let report = check_kkt(&qp, &s.z, &s.ineq_duals, &s.eq_duals);
            assert!(report.passes(1e-9), "trial {trial}: {report:?}");
        }
    }

    /// Minimizes over a box by scanning `z₀` on a fine grid and minimizing
    /// exactly in `z₁` for each grid value.
    fn grid_minimum(qp: &QProblem, lo: f64, hi: f64) -> f64 {
        let steps = 20_000;
        let (h, f) = (&qp.hessian, &qp.linear);
        (0..=steps)
            .map(|i| {
                let a = lo + (hi - lo) * i as f64 / steps as f64;
                let b = (-(f[1] + h[(1, 0)] * a) / h[(1, 1)]).clamp(lo, hi);
                qp.objective(&v(&[a, b]))
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn box_problems_match_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..500 {
            let mut r = || rng.gen_range(-1.0..1.0_f64);
            let base = DMatrix::from_fn(2, 2, |_, _| r());
            let h = base.transpose() * &base + DMatrix::identity(2, 2) * 0.05;
            let f = DVector::from_fn(2, |_, _| 3.0 * r());
            let g = m(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
            let qp = QProblem::new(h, f).with_inequalities(g, v(&[1.0, 1.0, 1.0, 1.0]));
            let s = solve(&qp, &opts()).unwrap();
            assert_eq!(s.status, QpStatus::Optimal);
            let grid = grid_minimum(&qp, -1.0, 1.0);
            assert!(s.objective <= grid + 1e-12, "trial {trial}: {} > {grid}", s.objective);
            assert!(grid - s.objective < 1e-4, "trial {trial}: {} vs {grid}", s.objective);
        }
    }

    #[test]
    fn solutions_are_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let qp = random_qp(&mut rng, 9, 20, 3);
        let a = solve(&qp, &opts()).unwrap();
        let b = solve(&qp, &opts()).unwrap();
        assert_eq!(a, b);
    }
}
