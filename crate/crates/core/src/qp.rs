//! Primal active-set method for strictly convex quadratic programs with a
//! diagonal Hessian:
//!
//! ```text
//! min ½ xᵀ diag(q) x + cᵀx   s.t.   A_eq x = b_eq,   A_in x ⪯ b_in
//! ```
//!
//! A feasible starting point comes from the phase-one simplex in [`crate::lp`].
//! Each iteration solves the equality-constrained subproblem on the working set
//! through its KKT system. Sizes in this crate are tiny (tens of rows), so
//! dense LU is used throughout.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lp::{LinearProgram, Relation};

#[derive(Debug, Clone)]
pub struct DiagonalQp {
    pub hessian_diag: Vec<f64>,
    pub linear: Vec<f64>,
    pub eq_rows: Vec<Vec<f64>>,
    pub eq_rhs: Vec<f64>,
    pub ineq_rows: Vec<Vec<f64>>,
    pub ineq_rhs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Multipliers `ν` of the equality rows (stationarity `Qx + c + Aᵀν + Gᵀκ = 0`).
    pub eq_multipliers: Vec<f64>,
    /// Multipliers `κ ⪰ 0` of the inequality rows.
    pub ineq_multipliers: Vec<f64>,
    pub iterations: usize,
}

impl DiagonalQp {
    pub fn dim(&self) -> usize {
        self.hessian_diag.len()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.hessian_diag)
            .zip(&self.linear)
            .map(|((xi, q), c)| 0.5 * q * xi * xi + c * xi)
            .sum()
    }

    fn row_dot(row: &[f64], x: &[f64]) -> f64 {
        row.iter().zip(x).map(|(a, b)| a * b).sum()
    }

    /// Finds any feasible point, or reports the largest unavoidable violation.
    pub fn feasible_point(&self) -> Result<Vec<f64>> {
        let n = self.dim();
        // x = x⁺ - x⁻ so the simplex can handle free variables
        let mut lp = LinearProgram::new(vec![0.0; 2 * n]);
        let split = |row: &[f64]| -> Vec<f64> {
            row.iter().copied().chain(row.iter().map(|v| -v)).collect()
        };
        for (row, rhs) in self.eq_rows.iter().zip(&self.eq_rhs) {
            lp.add(split(row), Relation::Eq, *rhs);
        }
        for (row, rhs) in self.ineq_rows.iter().zip(&self.ineq_rhs) {
            lp.add(split(row), Relation::Le, *rhs);
        }
        let sol = lp.solve().map_err(|e| match e {
            Error::LpInfeasible => {
                Error::DispatchInfeasible("no point satisfies the constraints".into())
            }
            other => other,
        })?;
        Ok((0..n).map(|i| sol.x[i] - sol.x[n + i]).collect())
    }

    pub fn solve(&self) -> Result<QpSolution> {
        let n = self.dim();
        if self.hessian_diag.iter().any(|q| !(*q > 0.0)) {
            return Err(Error::InvalidInput(
                "quadratic coefficients must be strictly positive".into(),
            ));
        }
        let mut x = self.feasible_point()?;

        let scale_b = 1.0
            + self
                .ineq_rhs
                .iter()
                .chain(&self.eq_rhs)
                .fold(0.0_f64, |m, v| m.max(v.abs()));
        let active_tol = 1e-9 * scale_b;

        // initial working set: active rows that are independent of the equalities
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for row in &self.eq_rows {
            push_if_independent(&mut basis, row);
        }
        let mut working: Vec<usize> = Vec::new();
        for (i, row) in self.ineq_rows.iter().enumerate() {
            let slack = self.ineq_rhs[i] - Self::row_dot(row, &x);
            if slack.abs() <= active_tol && push_if_independent(&mut basis, row) {
                working.push(i);
            }
        }

        let max_iter = 200 + 20 * (n + self.ineq_rows.len());
        for iter in 0..max_iter {
            let (p, nu, kappa) = self.solve_eqp(&x, &working)?;
            let xnorm = 1.0 + x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            let pnorm = p.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            if pnorm <= 1e-13 * xnorm {
                let grad_scale = 1.0
                    + self
                        .linear
                        .iter()
                        .zip(&x)
                        .zip(&self.hessian_diag)
                        .fold(0.0_f64, |m, ((c, xi), q)| m.max((q * xi + c).abs()));
                let worst = kappa.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1));
                match worst {
                    Some((pos, &k)) if k < -1e-11 * grad_scale => {
                        working.remove(pos);
                    }
                    _ => {
                        let mut ineq = vec![0.0; self.ineq_rows.len()];
                        for (pos, &i) in working.iter().enumerate() {
                            ineq[i] = kappa[pos].max(0.0);
                        }
                        return Ok(QpSolution {
                            x,
                            eq_multipliers: nu,
                            ineq_multipliers: ineq,
                            iterations: iter,
                        });
                    }
                }
                continue;
            }

            // ratio test against the rows outside the working set
            let mut step = 1.0;
            let mut blocking = None;
            for (i, row) in self.ineq_rows.iter().enumerate() {
                if working.contains(&i) {
                    continue;
                }
                let ap = Self::row_dot(row, &p);
                if ap > 1e-14 * (1.0 + pnorm) {
                    let slack = (self.ineq_rhs[i] - Self::row_dot(row, &x)).max(0.0);
                    let t = slack / ap;
                    if t < step {
                        step = t;
                        blocking = Some(i);
                    }
                }
            }
            for (xi, pi) in x.iter_mut().zip(&p) {
                *xi += step * pi;
            }
            if let Some(i) = blocking {
                working.push(i);
            }
        }
        Err(Error::NonConvergence {
            solver: "active-set qp",
            iterations: max_iter,
            residual: f64::NAN,
        })
    }

    /// Solves the equality QP for the step `p` on the current working set.
    fn solve_eqp(&self, x: &[f64], working: &[usize]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let n = self.dim();
        let me = self.eq_rows.len();
        let mw = working.len();
        let k = n + me + mw;
        let mut kkt = DMatrix::<f64>::zeros(k, k);
        let mut rhs = DVector::<f64>::zeros(k);
        for i in 0..n {
            kkt[(i, i)] = self.hessian_diag[i];
            rhs[i] = -(self.hessian_diag[i] * x[i] + self.linear[i]);
        }
        let rows = self
            .eq_rows
            .iter()
            .chain(working.iter().map(|&w| &self.ineq_rows[w]));
        for (r, row) in rows.enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = row[j];
                kkt[(j, n + r)] = row[j];
            }
        }
        let sol = kkt.lu().solve(&rhs).ok_or({
            Error::NonConvergence {
                solver: "active-set qp (singular working set)",
                iterations: 0,
                residual: f64::NAN,
            }
        })?;
        let p = sol.rows(0, n).iter().copied().collect();
        let nu = sol.rows(n, me).iter().copied().collect();
        let kappa = sol.rows(n + me, mw).iter().copied().collect();
        Ok((p, nu, kappa))
    }
}

/// Gram-Schmidt membership test; appends the normalised residual when `row`
/// is linearly independent of `basis`.
fn push_if_independent(basis: &mut Vec<Vec<f64>>, row: &[f64]) -> bool {
    let norm0 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm0 == 0.0 {
        return false;
    }
    let mut r: Vec<f64> = row.to_vec();
    for _ in 0..2 {
        for q in basis.iter() {
            let d: f64 = q.iter().zip(&r).map(|(a, b)| a * b).sum();
            for (ri, qi) in r.iter_mut().zip(q) {
                *ri -= d * qi;
            }
        }
    }
    let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 1e-9 * norm0 {
        return false;
    }
    for v in r.iter_mut() {
        *v /= norm;
    }
    basis.push(r);
    true
}
