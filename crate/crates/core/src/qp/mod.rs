//! Dense strictly convex quadratic programming.
//!
//! ```text
//!     minimize     ½ zᵀ H z + fᵀ z
//!     subject to   G z ≤ g
//!                  A z = b
//! ```
//!
//! Problems are solved with the Goldfarb–Idnani dual active-set method,
//! which starts from the unconstrained minimizer and adds violated
//! constraints one at a time while keeping dual feasibility. Infeasibility
//! is detected when a violated constraint can be reached by neither a primal
//! nor a dual step.

mod condense;
mod kkt;
mod solver;

use std::io::Write;

use nalgebra::{DMatrix, DVector};

pub use condense::{condense, Prediction};
pub use kkt::{check_kkt, KktReport};
pub use solver::solve;

use crate::{Error, Result};

/// A dense QP instance.
#[derive(Debug, Clone, PartialEq)]
pub struct QProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_bound: DVector<f64>,
    pub eq_matrix: DMatrix<f64>,
    pub eq_bound: DVector<f64>,
}

impl QProblem {
    /// Unconstrained problem `½ zᵀ H z + fᵀ z`.
    pub fn new(hessian: DMatrix<f64>, linear: DVector<f64>) -> Self {
        let n = linear.len();
        Self {
            hessian,
            linear,
            ineq_matrix: DMatrix::zeros(0, n),
            ineq_bound: DVector::zeros(0),
            eq_matrix: DMatrix::zeros(0, n),
            eq_bound: DVector::zeros(0),
        }
    }

    pub fn with_inequalities(mut self, g: DMatrix<f64>, bound: DVector<f64>) -> Self {
        self.ineq_matrix = g;
        self.ineq_bound = bound;
        self
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, bound: DVector<f64>) -> Self {
        self.eq_matrix = a;
        self.eq_bound = bound;
        self
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.hessian * z)) + self.linear.dot(z)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        let bad = |msg: String| Err(Error::MalformedProblem(msg));
        if self.hessian.shape() != (n, n) {
            return bad(format!("hessian is {:?}, expected {n}x{n}", self.hessian.shape()));
        }
        if self.ineq_matrix.ncols() != n || self.ineq_matrix.nrows() != self.ineq_bound.len() {
            return bad("inequality system has inconsistent dimensions".into());
        }
        if self.eq_matrix.ncols() != n || self.eq_matrix.nrows() != self.eq_bound.len() {
            return bad("equality system has inconsistent dimensions".into());
        }
        let finite = self.hessian.iter().chain(self.linear.iter()).chain(self.ineq_matrix.iter())
            .chain(self.ineq_bound.iter()).chain(self.eq_matrix.iter()).chain(self.eq_bound.iter())
            .all(|x| x.is_finite());
        if !finite {
            return bad("problem data contains non-finite values".into());
        }
        let asym = (&self.hessian - self.hessian.transpose()).amax();
        if asym > 1e-9 * (1.0 + self.hessian.amax()) {
            return bad(format!("hessian is not symmetric (max asymmetry {asym:e})"));
        }
        Ok(())
    }

    /// Writes the problem as a plain-text dump with one matrix-market-style
    /// coordinate block per matrix.
    pub fn dump<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "% dense QP: minimize 1/2 z'Hz + f'z  s.t.  Gz <= g, Az = b")?;
        let blocks: [(&str, &DMatrix<f64>); 2] = [("H", &self.hessian), ("G", &self.ineq_matrix)];
        for (name, m) in blocks.into_iter().chain([("A", &self.eq_matrix)]) {
            let nnz = m.iter().filter(|x| **x != 0.0).count();
            writeln!(out, "%%matrix {name}\n{} {} {nnz}", m.nrows(), m.ncols())?;
            for j in 0..m.ncols() {
                for i in 0..m.nrows() {
                    if m[(i, j)] != 0.0 {
                        writeln!(out, "{} {} {:e}", i + 1, j + 1, m[(i, j)])?;
                    }
                }
            }
        }
        for (name, v) in [("f", &self.linear), ("g", &self.ineq_bound), ("b", &self.eq_bound)] {
            writeln!(out, "%%vector {name}\n{}", v.len())?;
            for x in v.iter() {
                writeln!(out, "{x:e}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
    /// The active set was identified but the KKT residual stays above the
    /// tolerance after refinement.
    Inaccurate,
}

impl std::fmt::Display for QpStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QpStatus::Optimal => "optimal",
            QpStatus::Infeasible => "infeasible",
            QpStatus::MaxIterations => "max-iterations",
            QpStatus::Inaccurate => "inaccurate",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    /// Multipliers of `G z ≤ g` (nonnegative at optimality).
    pub ineq_duals: DVector<f64>,
    /// Multipliers of `A z = b`.
    pub eq_duals: DVector<f64>,
    pub status: QpStatus,
    pub kkt_residual: f64,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 4000 }
    }
}
