use nalgebra::DVector;

use super::QProblem;

/// Scaled KKT residuals of a candidate primal-dual pair.
///
/// Each residual is normalized by the magnitude of the terms it compares,
/// so problems mixing torques in Nm with distances in m are judged on the
/// same footing.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktReport {
    pub primal: f64,
    pub dual: f64,
    pub stationarity: f64,
    pub complementarity: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.stationarity).max(self.complementarity)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max() <= tol
    }
}

/// Evaluates the KKT conditions for `(z, λ, μ)` with
/// `H z + f + Gᵀλ + Aᵀμ = 0`, `λ ≥ 0`, `G z ≤ g`, `A z = b`, `λ ⊙ (g − G z) = 0`.
pub fn check_kkt(qp: &QProblem, z: &DVector<f64>, lambda: &DVector<f64>, mu: &DVector<f64>) -> KktReport {
    let gz = &qp.ineq_matrix * z;
    let az = &qp.eq_matrix * z;
    let zmax = z.amax();

    let mut primal = 0.0_f64;
    for i in 0..gz.len() {
        let scale = 1.0 + qp.ineq_bound[i].abs() + row_amax(&qp.ineq_matrix, i) * zmax;
        primal = primal.max((gz[i] - qp.ineq_bound[i]).max(0.0) / scale);
    }
    for i in 0..az.len() {
        let scale = 1.0 + qp.eq_bound[i].abs() + row_amax(&qp.eq_matrix, i) * zmax;
        primal = primal.max((az[i] - qp.eq_bound[i]).abs() / scale);
    }

    let lmax = lambda.amax();
    let dual = lambda.iter().fold(0.0_f64, |acc, &l| acc.max(-l)) / (1.0 + lmax);

    let hz = &qp.hessian * z;
    let gl = qp.ineq_matrix.tr_mul(lambda);
    let am = qp.eq_matrix.tr_mul(mu);
    let grad = &hz + &qp.linear + &gl + &am;
    let scale = 1.0 + hz.amax().max(qp.linear.amax()).max(gl.amax()).max(am.amax());
    let stationarity = grad.amax() / scale;

    let mut complementarity = 0.0_f64;
    for i in 0..gz.len() {
        let slack = qp.ineq_bound[i] - gz[i];
        let scale = 1.0 + lambda[i].abs() * (qp.ineq_bound[i].abs() + row_amax(&qp.ineq_matrix, i) * zmax);
        complementarity = complementarity.max((lambda[i] * slack).abs() / scale);
    }

    KktReport { primal, dual, stationarity, complementarity }
}

fn row_amax(m: &nalgebra::DMatrix<f64>, i: usize) -> f64 {
    m.row(i).amax()
}
