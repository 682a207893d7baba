//! Dense convex quadratic programs with dual recovery.
//!
//! Problems have the form
//!
//! ```text
//! minimize    ½ xᵀQx + cᵀx
//! subject to  A x  = b      (multipliers y)
//!             G x ≤ h       (multipliers z ≥ 0)
//! ```
//!
//! with the sign convention `Qx + c + Aᵀy + Gᵀz = 0` at optimum. The interior
//! point solve is handed to `clarabel`; its output is then polished by
//! re-solving the KKT system on the detected active set, which recovers
//! vertex-exact primal and dual values whenever they are unique.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("quadratic program is infeasible")]
    Infeasible,
    #[error("quadratic program is unbounded")]
    Unbounded,
    #[error("solver did not converge ({0})")]
    NoConvergence(String),
    #[error("malformed problem: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone)]
pub struct QuadraticProgram {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub eq_duals: DVector<f64>,
    pub ineq_duals: DVector<f64>,
    pub objective: f64,
    pub iterations: u32,
    /// Whether the active-set polish replaced the interior-point iterate.
    pub polished: bool,
}

impl QuadraticProgram {
    pub fn new(n: usize) -> Self {
        Self {
            hessian: DMatrix::zeros(n, n),
            linear: DVector::zeros(n),
            eq_matrix: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            ineq_matrix: DMatrix::zeros(0, n),
            ineq_rhs: DVector::zeros(0),
        }
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn add_equality(&mut self, row: &[f64], rhs: f64) {
        self.eq_matrix = append_row(&self.eq_matrix, row);
        self.eq_rhs = append_entry(&self.eq_rhs, rhs);
    }

    pub fn add_inequality(&mut self, row: &[f64], rhs: f64) {
        self.ineq_matrix = append_row(&self.ineq_matrix, row);
        self.ineq_rhs = append_entry(&self.ineq_rhs, rhs);
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x)
    }

    /// Value of the Lagrangian dual function at the multipliers of `sol`,
    /// assuming stationarity holds at `sol.x`.
    pub fn dual_objective(&self, sol: &QpSolution) -> f64 {
        -0.5 * sol.x.dot(&(&self.hessian * &sol.x))
            - self.eq_rhs.dot(&sol.eq_duals)
            - self.ineq_rhs.dot(&sol.ineq_duals)
    }

    /// Largest violation among stationarity, primal feasibility, dual sign
    /// and complementarity.
    pub fn kkt_residual(&self, sol: &QpSolution) -> f64 {
        let stat = &self.hessian * &sol.x
            + &self.linear
            + self.eq_matrix.transpose() * &sol.eq_duals
            + self.ineq_matrix.transpose() * &sol.ineq_duals;
        let eq = &self.eq_matrix * &sol.x - &self.eq_rhs;
        let slack = &self.ineq_rhs - &self.ineq_matrix * &sol.x;
        let mut r = stat.amax().max(eq.amax());
        for (s, z) in slack.iter().zip(sol.ineq_duals.iter()) {
            r = r.max((-s).max(0.0)).max((-z).max(0.0)).max((s * z).abs());
        }
        r
    }

    pub fn solve(&self) -> Result<QpSolution, QpError> {
        let n = self.dim();
        if self.hessian.shape() != (n, n)
            || self.eq_matrix.ncols() != n
            || self.ineq_matrix.ncols() != n
        {
            return Err(QpError::Malformed("dimension mismatch".into()));
        }
        let raw = self.interior_point()?;
        Ok(match self.polish(&raw) {
            Some(p) => p,
            None => raw,
        })
    }

    fn interior_point(&self) -> Result<QpSolution, QpError> {
        let n = self.dim();
        let me = self.eq_rhs.len();
        let mi = self.ineq_rhs.len();
        let p = dense_to_csc(&self.hessian, true);
        let a = dense_to_csc(
            &DMatrix::from_fn(me + mi, n, |i, j| {
                if i < me {
                    self.eq_matrix[(i, j)]
                } else {
                    self.ineq_matrix[(i - me, j)]
                }
            }),
            false,
        );
        let b: Vec<f64> = self
            .eq_rhs
            .iter()
            .chain(self.ineq_rhs.iter())
            .copied()
            .collect();
        let mut cones = Vec::new();
        if me > 0 {
            cones.push(SupportedConeT::ZeroConeT(me));
        }
        if mi > 0 {
            cones.push(SupportedConeT::NonnegativeConeT(mi));
        }
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .tol_gap_abs(1e-10)
            .tol_gap_rel(1e-10)
            .tol_feas(1e-10)
            .max_iter(200)
            .build()
            .map_err(|e| QpError::Malformed(format!("{e:?}")))?;
        let linear: Vec<f64> = self.linear.iter().copied().collect();
        let mut solver = DefaultSolver::new(&p, &linear, &a, &b, &cones, settings)
            .map_err(|e| QpError::Malformed(format!("{e:?}")))?;
        solver.solve();
        let sol = &solver.solution;
        match sol.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => {}
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                return Err(QpError::Infeasible)
            }
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
                return Err(QpError::Unbounded)
            }
            other => return Err(QpError::NoConvergence(format!("{other:?}"))),
        }
        let x = DVector::from_column_slice(&sol.x);
        Ok(QpSolution {
            objective: self.objective(&x),
            x,
            eq_duals: DVector::from_iterator(me, sol.z[..me].iter().copied()),
            ineq_duals: DVector::from_iterator(mi, sol.z[me..].iter().copied()),
            iterations: sol.iterations,
            polished: false,
        })
    }

    /// Re-solve the equality-constrained KKT system on the active set picked
    /// from the interior iterate. Returns `None` if the result is not a valid
    /// KKT point (degenerate or misidentified active set).
    fn polish(&self, raw: &QpSolution) -> Option<QpSolution> {
        let n = self.dim();
        let me = self.eq_rhs.len();
        let slack = &self.ineq_rhs - &self.ineq_matrix * &raw.x;
        let active: Vec<usize> = (0..self.ineq_rhs.len())
            .filter(|&i| raw.ineq_duals[i] > slack[i])
            .collect();
        let m = me + active.len();
        let mut kkt = DMatrix::<f64>::zeros(n + m, n + m);
        let mut rhs = DVector::<f64>::zeros(n + m);
        kkt.view_mut((0, 0), (n, n)).copy_from(&self.hessian);
        for j in 0..n {
            rhs[j] = -self.linear[j];
        }
        for r in 0..m {
            let (row, b) = if r < me {
                (self.eq_matrix.row(r).clone_owned(), self.eq_rhs[r])
            } else {
                let i = active[r - me];
                (self.ineq_matrix.row(i).clone_owned(), self.ineq_rhs[i])
            };
            for j in 0..n {
                kkt[(n + r, j)] = row[j];
                kkt[(j, n + r)] = row[j];
            }
            rhs[n + r] = b;
        }
        let scale = kkt.amax().max(1.0);
        let svd = kkt.svd(true, true);
        let sol = svd.solve(&rhs, 1e-12 * scale).ok()?;
        let x = sol.rows(0, n).clone_owned();
        let mut eq_duals = DVector::zeros(me);
        let mut ineq_duals = DVector::zeros(self.ineq_rhs.len());
        for r in 0..m {
            if r < me {
                eq_duals[r] = sol[n + r];
            } else {
                ineq_duals[active[r - me]] = sol[n + r];
            }
        }
        let candidate = QpSolution {
            objective: self.objective(&x),
            x,
            eq_duals,
            ineq_duals,
            iterations: raw.iterations,
            polished: true,
        };
        let tol = 1e-9 * (1.0 + self.linear.amax() + self.eq_rhs.amax().max(self.ineq_rhs.amax()));
        (self.kkt_residual(&candidate) <= tol).then_some(candidate)
    }
}

fn append_row(m: &DMatrix<f64>, row: &[f64]) -> DMatrix<f64> {
    let mut out = m.clone().insert_row(m.nrows(), 0.0);
    for (j, v) in row.iter().enumerate() {
        out[(m.nrows(), j)] = *v;
    }
    out
}

fn append_entry(v: &DVector<f64>, value: f64) -> DVector<f64> {
    v.clone().insert_row(v.len(), value)
}

/// Column-compressed copy of a dense matrix; `upper` keeps only the upper
/// triangle (what clarabel expects for the Hessian).
fn dense_to_csc(m: &DMatrix<f64>, upper: bool) -> CscMatrix<f64> {
    let mut colptr = vec![0usize];
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if upper && i > j {
                break;
            }
            let v = m[(i, j)];
            if v != 0.0 {
                rowval.push(i);
                nzval.push(v);
            }
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(m.nrows(), m.ncols(), colptr, rowval, nzval)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_constrained_least_squares() {
        // min (x-2)^2 + (y+1)^2 with x <= 1, y >= 0
        let mut qp = QuadraticProgram::new(2);
        qp.hessian = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 2.0]));
        qp.linear = DVector::from_vec(vec![-4.0, 2.0]);
        qp.add_inequality(&[1.0, 0.0], 1.0);
        qp.add_inequality(&[0.0, -1.0], 0.0);
        let s = qp.solve().unwrap();
        assert!(s.polished);
        assert!((s.x[0] - 1.0).abs() < 1e-12);
        assert!(s.x[1].abs() < 1e-12);
        assert!((s.ineq_duals[0] - 2.0).abs() < 1e-12);
        assert!((s.ineq_duals[1] - 2.0).abs() < 1e-12);
        assert!(qp.kkt_residual(&s) < 1e-10);
    }

    #[test]
    fn linear_program_with_balance() {
        // min x + 3y, x + y = 5, 0 <= x <= 2, y >= 0 -> x = 2, y = 3, price 3
        let mut qp = QuadraticProgram::new(2);
        qp.linear = DVector::from_vec(vec![1.0, 3.0]);
        qp.add_equality(&[1.0, 1.0], 5.0);
        qp.add_inequality(&[1.0, 0.0], 2.0);
        qp.add_inequality(&[-1.0, 0.0], 0.0);
        qp.add_inequality(&[0.0, -1.0], 0.0);
        let s = qp.solve().unwrap();
        assert!((s.x[0] - 2.0).abs() < 1e-12);
        assert!((s.x[1] - 3.0).abs() < 1e-12);
        assert!((-s.eq_duals[0] - 3.0).abs() < 1e-12);
        assert!((qp.objective(&s.x) - qp.dual_objective(&s)).abs() < 1e-9);
    }

    #[test]
    fn infeasible_is_reported() {
        let mut qp = QuadraticProgram::new(1);
        qp.linear = DVector::from_vec(vec![1.0]);
        qp.add_equality(&[1.0], 5.0);
        qp.add_inequality(&[1.0], 2.0);
        assert_eq!(qp.solve().unwrap_err(), QpError::Infeasible);
    }

    #[test]
    fn unbounded_is_reported() {
        let mut qp = QuadraticProgram::new(1);
        qp.linear = DVector::from_vec(vec![-1.0]);
        assert_eq!(qp.solve().unwrap_err(), QpError::Unbounded);
    }
}
