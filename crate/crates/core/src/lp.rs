//! Dense two-phase simplex for the small linear programs that show up in
//! dispatch feasibility checks, reserve procurement and reserve deployment.
//!
//! Problems are stated as `min cᵀx` subject to row constraints and `x ⪰ 0`.
//! Bland's rule is used for both entering and leaving choices, so the method
//! terminates on degenerate problems. After the tableau phase the primal and
//! dual solutions are recomputed from the final basis with an LU solve, which
//! keeps residuals near machine precision even after many pivots.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const PIVOT_EPS: f64 = 1e-11;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Clone)]
pub struct Constraint {
    pub coeffs: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

#[derive(Debug, Clone, Default)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
}

/// Optimal primal/dual pair.
///
/// `duals[i]` is the multiplier of constraint `i` in the convention
/// `c - Aᵀy ⪰ 0`: `Le` rows carry `y ≤ 0`, `Ge` rows `y ≥ 0`, `Eq` rows are free.
#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub duals: Vec<f64>,
}

impl LinearProgram {
    pub fn new(objective: Vec<f64>) -> Self {
        Self {
            objective,
            constraints: Vec::new(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn add(&mut self, coeffs: Vec<f64>, relation: Relation, rhs: f64) {
        debug_assert_eq!(coeffs.len(), self.objective.len());
        self.constraints.push(Constraint {
            coeffs,
            relation,
            rhs,
        });
    }

    pub fn solve(&self) -> Result<LpSolution> {
        Simplex::build(self)?.run(self)
    }

    /// Largest violation of any row or of `x ⪰ 0` at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst = x.iter().fold(0.0_f64, |m, &v| m.max(-v));
        for row in &self.constraints {
            let lhs: f64 = row.coeffs.iter().zip(x).map(|(a, b)| a * b).sum();
            let v = match row.relation {
                Relation::Le => lhs - row.rhs,
                Relation::Ge => row.rhs - lhs,
                Relation::Eq => (lhs - row.rhs).abs(),
            };
            worst = worst.max(v);
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ColKind {
    Structural,
    Slack,
    Artificial,
}

struct Simplex {
    m: usize,
    n: usize,
    /// Row-major tableau, `m` rows of `ncols + 1` entries (last one is the rhs).
    tab: Vec<f64>,
    /// Constraint matrix after sign normalisation, kept for the final re-solve.
    a: Vec<f64>,
    b: Vec<f64>,
    kinds: Vec<ColKind>,
    basis: Vec<usize>,
    flipped: Vec<bool>,
    ncols: usize,
}

impl Simplex {
    fn build(lp: &LinearProgram) -> Result<Self> {
        let n = lp.num_vars();
        let m = lp.constraints.len();
        for c in &lp.constraints {
            if c.coeffs.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "lp row has {} coefficients, expected {n}",
                    c.coeffs.len()
                )));
            }
            if !c.rhs.is_finite() || c.coeffs.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput("non-finite lp coefficient".into()));
            }
        }

        let mut flipped = vec![false; m];
        let mut rels = Vec::with_capacity(m);
        for (i, c) in lp.constraints.iter().enumerate() {
            let mut rel = c.relation;
            if c.rhs < 0.0 {
                flipped[i] = true;
                rel = match rel {
                    Relation::Le => Relation::Ge,
                    Relation::Ge => Relation::Le,
                    Relation::Eq => Relation::Eq,
                };
            }
            rels.push(rel);
        }

        let n_slack = rels.iter().filter(|r| **r != Relation::Eq).count();
        let n_art = rels.iter().filter(|r| **r != Relation::Le).count();
        let ncols = n + n_slack + n_art;
        let mut kinds = vec![ColKind::Structural; n];
        kinds.extend(std::iter::repeat_n(ColKind::Slack, n_slack));
        kinds.extend(std::iter::repeat_n(ColKind::Artificial, n_art));

        let mut a = vec![0.0; m * ncols];
        let mut b = vec![0.0; m];
        let mut basis = vec![0; m];
        let mut next_slack = n;
        let mut next_art = n + n_slack;
        for (i, c) in lp.constraints.iter().enumerate() {
            let sign = if flipped[i] { -1.0 } else { 1.0 };
            for j in 0..n {
                a[i * ncols + j] = sign * c.coeffs[j];
            }
            b[i] = sign * c.rhs;
            match rels[i] {
                Relation::Le => {
                    a[i * ncols + next_slack] = 1.0;
                    basis[i] = next_slack;
                    next_slack += 1;
                }
                Relation::Ge => {
                    a[i * ncols + next_slack] = -1.0;
                    next_slack += 1;
                    a[i * ncols + next_art] = 1.0;
                    basis[i] = next_art;
                    next_art += 1;
                }
                Relation::Eq => {
                    a[i * ncols + next_art] = 1.0;
                    basis[i] = next_art;
                    next_art += 1;
                }
            }
        }

        let mut tab = vec![0.0; m * (ncols + 1)];
        for i in 0..m {
            tab[i * (ncols + 1)..i * (ncols + 1) + ncols]
                .copy_from_slice(&a[i * ncols..(i + 1) * ncols]);
            tab[i * (ncols + 1) + ncols] = b[i];
        }

        Ok(Self {
            m,
            n,
            tab,
            a,
            b,
            kinds,
            basis,
            flipped,
            ncols,
        })
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.tab[i * (self.ncols + 1) + j]
    }

    #[inline]
    fn rhs(&self, i: usize) -> f64 {
        self.tab[i * (self.ncols + 1) + self.ncols]
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let w = self.ncols + 1;
        let p = self.tab[row * w + col];
        for j in 0..w {
            self.tab[row * w + j] /= p;
        }
        let prow: Vec<f64> = self.tab[row * w..(row + 1) * w].to_vec();
        for i in 0..self.m {
            if i == row {
                continue;
            }
            let f = self.tab[i * w + col];
            if f != 0.0 {
                for j in 0..w {
                    self.tab[i * w + j] -= f * prow[j];
                }
                self.tab[i * w + col] = 0.0;
            }
        }
        self.basis[row] = col;
    }

    fn reduced_costs(&self, costs: &[f64]) -> Vec<f64> {
        let mut d = costs.to_vec();
        for i in 0..self.m {
            let cb = costs[self.basis[i]];
            if cb != 0.0 {
                for (j, dj) in d.iter_mut().enumerate() {
                    *dj -= cb * self.at(i, j);
                }
            }
        }
        d
    }

    /// Runs Bland-rule pivots on `costs`; `allowed` filters entering columns.
    fn optimize(&mut self, costs: &[f64], allowed: impl Fn(ColKind) -> bool) -> Result<()> {
        let max_pivots = 50 * (self.m + self.ncols) + 1000;
        for _ in 0..max_pivots {
            let d = self.reduced_costs(costs);
            let scale = 1.0 + costs.iter().fold(0.0_f64, |m, c| m.max(c.abs()));
            let entering =
                (0..self.ncols).find(|&j| allowed(self.kinds[j]) && d[j] < -1e-10 * scale);
            let Some(col) = entering else {
                return Ok(());
            };
            let mut best: Option<(usize, f64)> = None;
            for i in 0..self.m {
                let aij = self.at(i, col);
                if aij > PIVOT_EPS {
                    let ratio = self.rhs(i) / aij;
                    best = match best {
                        None => Some((i, ratio)),
                        Some((bi, br)) => {
                            if ratio < br - 1e-12 * (1.0 + br.abs())
                                || (ratio <= br + 1e-12 * (1.0 + br.abs())
                                    && self.basis[i] < self.basis[bi])
                            {
                                Some((i, ratio))
                            } else {
                                Some((bi, br))
                            }
                        }
                    };
                }
            }
            let Some((row, _)) = best else {
                return Err(Error::LpUnbounded);
            };
            self.pivot(row, col);
        }
        Err(Error::NonConvergence {
            solver: "simplex",
            iterations: max_pivots,
            residual: f64::NAN,
        })
    }

    fn run(mut self, lp: &LinearProgram) -> Result<LpSolution> {
        let has_art = self.kinds.contains(&ColKind::Artificial);
        if has_art {
            let phase1: Vec<f64> = self
                .kinds
                .iter()
                .map(|k| if *k == ColKind::Artificial { 1.0 } else { 0.0 })
                .collect();
            self.optimize(&phase1, |_| true)?;
            let infeas: f64 = (0..self.m)
                .filter(|&i| self.kinds[self.basis[i]] == ColKind::Artificial)
                .map(|i| self.rhs(i))
                .sum();
            let bscale = 1.0 + self.b.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            if infeas > 1e-9 * bscale {
                return Err(Error::LpInfeasible);
            }
            // drive remaining (zero-level) artificials out of the basis
            for i in 0..self.m {
                if self.kinds[self.basis[i]] == ColKind::Artificial {
                    if let Some(col) = (0..self.ncols).find(|&j| {
                        self.kinds[j] != ColKind::Artificial && self.at(i, j).abs() > 1e-9
                    }) {
                        self.pivot(i, col);
                    }
                }
            }
        }

        let mut costs = vec![0.0; self.ncols];
        costs[..self.n].copy_from_slice(&lp.objective);
        self.optimize(&costs, |k| k != ColKind::Artificial)?;
        self.refine(lp, &costs)
    }

    /// Recomputes `x_B = B⁻¹b` and `y = B⁻ᵀc_B` from the original data.
    fn refine(&self, lp: &LinearProgram, costs: &[f64]) -> Result<LpSolution> {
        let m = self.m;
        let mut x = vec![0.0; self.ncols];
        let mut y = vec![0.0; m];
        if m > 0 {
            let bmat = DMatrix::from_fn(m, m, |i, k| self.a[i * self.ncols + self.basis[k]]);
            let lu = bmat.clone().lu();
            let rhs = DVector::from_column_slice(&self.b);
            let cb = DVector::from_fn(m, |k, _| costs[self.basis[k]]);
            match (lu.solve(&rhs), bmat.transpose().lu().solve(&cb)) {
                (Some(xb), Some(yy)) => {
                    for k in 0..m {
                        x[self.basis[k]] = xb[k];
                    }
                    y.copy_from_slice(yy.as_slice());
                }
                _ => {
                    // singular basis after degenerate pivots: fall back to the tableau
                    for k in 0..m {
                        x[self.basis[k]] = self.rhs(k);
                    }
                    let d = self.reduced_costs(costs);
                    let mut slack = self.n;
                    let mut art =
                        self.n + self.kinds.iter().filter(|k| **k == ColKind::Slack).count();
                    for (i, yi) in y.iter_mut().enumerate() {
                        let rel = self.normalized_relation(lp, i);
                        match rel {
                            Relation::Le => {
                                *yi = -d[slack];
                                slack += 1;
                            }
                            Relation::Ge => {
                                *yi = d[slack];
                                slack += 1;
                                art += 1;
                            }
                            Relation::Eq => {
                                *yi = -d[art];
                                art += 1;
                            }
                        }
                    }
                }
            }
        }
        let xs: Vec<f64> = x[..self.n].iter().map(|v| v.max(0.0)).collect();
        let duals: Vec<f64> = y
            .iter()
            .zip(&self.flipped)
            .map(|(v, f)| if *f { -v } else { *v })
            .collect();
        let objective = lp.objective.iter().zip(&xs).map(|(c, v)| c * v).sum();
        Ok(LpSolution {
            x: xs,
            objective,
            duals,
        })
    }

    fn normalized_relation(&self, lp: &LinearProgram, i: usize) -> Relation {
        let r = lp.constraints[i].relation;
        if !self.flipped[i] {
            return r;
        }
        match r {
            Relation::Le => Relation::Ge,
            Relation::Ge => Relation::Le,
            Relation::Eq => Relation::Eq,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn textbook_maximisation() {
        // max 3x + 5y s.t. x <= 4, 2y <= 12, 3x + 2y <= 18
        let mut lp = LinearProgram::new(vec![-3.0, -5.0]);
        lp.add(vec![1.0, 0.0], Relation::Le, 4.0);
        lp.add(vec![0.0, 2.0], Relation::Le, 12.0);
        lp.add(vec![3.0, 2.0], Relation::Le, 18.0);
        let s = lp.solve().unwrap();
        assert_abs_diff_eq!(s.x[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.x[1], 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.objective, -36.0, epsilon = 1e-12);
        // shadow prices of the classic example: (0, 1.5, 1) for the max form
        assert_abs_diff_eq!(s.duals[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.duals[1], -1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s.duals[2], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn equality_and_ge_rows() {
        // min x + 2y s.t. x + y = 3, x >= 1, y >= 0.5
        let mut lp = LinearProgram::new(vec![1.0, 2.0]);
        lp.add(vec![1.0, 1.0], Relation::Eq, 3.0);
        lp.add(vec![1.0, 0.0], Relation::Ge, 1.0);
        lp.add(vec![0.0, 1.0], Relation::Ge, 0.5);
        let s = lp.solve().unwrap();
        assert_abs_diff_eq!(s.x[0], 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s.x[1], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s.objective, 3.5, epsilon = 1e-12);
        // strong duality
        let dual_obj: f64 = lp
            .constraints
            .iter()
            .zip(&s.duals)
            .map(|(c, y)| c.rhs * y)
            .sum();
        assert_abs_diff_eq!(dual_obj, s.objective, epsilon = 1e-12);
    }

    #[test]
    fn negative_rhs_is_normalised() {
        // min x s.t. -x <= -2  (i.e. x >= 2)
        let mut lp = LinearProgram::new(vec![1.0]);
        lp.add(vec![-1.0], Relation::Le, -2.0);
        let s = lp.solve().unwrap();
        assert_abs_diff_eq!(s.x[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.duals[0], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn detects_infeasible() {
        let mut lp = LinearProgram::new(vec![1.0]);
        lp.add(vec![1.0], Relation::Le, 1.0);
        lp.add(vec![1.0], Relation::Ge, 2.0);
        assert_eq!(lp.solve().unwrap_err(), Error::LpInfeasible);
    }

    #[test]
    fn detects_unbounded() {
        let mut lp = LinearProgram::new(vec![-1.0, 0.0]);
        lp.add(vec![1.0, -1.0], Relation::Le, 1.0);
        assert_eq!(lp.solve().unwrap_err(), Error::LpUnbounded);
    }

    #[test]
    fn degenerate_redundant_equalities() {
        // duplicated equality row leaves an artificial in the basis at zero
        let mut lp = LinearProgram::new(vec![1.0, 1.0]);
        lp.add(vec![1.0, 1.0], Relation::Eq, 2.0);
        lp.add(vec![2.0, 2.0], Relation::Eq, 4.0);
        lp.add(vec![1.0, 0.0], Relation::Le, 1.5);
        let s = lp.solve().unwrap();
        assert_abs_diff_eq!(s.objective, 2.0, epsilon = 1e-10);
        assert!(lp.max_violation(&s.x) < 1e-10);
    }
}
