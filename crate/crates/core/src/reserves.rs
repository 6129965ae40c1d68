//! Reserve procurement for trial-and-error pricing.
//!
//! When the coordinator posts prices that do not clear the grid, the realised
//! net withdrawal `η = d + u − g` is out of balance by up to `a` and pushes
//! flows up to `w` past their limits. A reserve capacity `r` lets the operator
//! absorb any such `η` by re-dispatching `y` with `|y| ⪯ r`. The robust
//! problem (cover every `η` in the set 𝒩) is approximated by sampling both
//! 𝒩 and the dual cone of the deployment feasibility problem.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lp::{LinearProgram, Relation};
use crate::power::GridModel;

/// Box dimensions with more free coordinates than this skip corner enumeration.
const MAX_CORNER_DIMS: usize = 12;
const SET_TOL: f64 = 1e-9;
const DEPLOY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct DualBound {
    /// `safety · max_norm`.
    pub estimate: f64,
    pub max_norm: f64,
    pub safety: f64,
    pub points: usize,
    /// Demand at which the largest dual norm was seen.
    pub argmax: Vec<f64>,
}

/// Sweeps the demand box (corners plus uniform samples) and records the
/// largest `‖(γ, μ)‖₂` returned by economic dispatch.
pub fn estimate_dual_bound(
    grid: &GridModel,
    d_min: &[f64],
    d_max: &[f64],
    samples: usize,
    safety: f64,
    seed: u64,
) -> Result<DualBound> {
    let n = grid.num_buses();
    if d_min.len() != n || d_max.len() != n {
        return Err(Error::DimensionMismatch(
            "demand box must list every bus".into(),
        ));
    }
    if d_min.iter().zip(d_max).any(|(a, b)| !(a <= b)) {
        return Err(Error::InvalidInput("demand box needs d_min ⪯ d_max".into()));
    }
    if !(safety >= 1.0) {
        return Err(Error::InvalidInput(format!(
            "safety factor {safety} must be ≥ 1"
        )));
    }
    let free: Vec<usize> = (0..n).filter(|&i| d_max[i] > d_min[i]).collect();
    let mut points = Vec::new();
    if free.is_empty() {
        points.push(d_min.to_vec());
    } else {
        if free.len() <= MAX_CORNER_DIMS {
            points.extend(corners(d_min, d_max, &free));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..samples {
            points.push(
                d_min
                    .iter()
                    .zip(d_max)
                    .map(|(lo, hi)| {
                        if hi > lo {
                            rng.random_range(*lo..=*hi)
                        } else {
                            *lo
                        }
                    })
                    .collect(),
            );
        }
    }
    let norms: Vec<f64> = points
        .par_iter()
        .map(|d| grid.economic_dispatch(d).map(|r| r.dual_norm()))
        .collect::<Result<_>>()?;
    let (best, max_norm) =
        norms
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            });
    Ok(DualBound {
        estimate: safety * max_norm,
        max_norm,
        safety,
        points: points.len(),
        argmax: points.swap_remove(best),
    })
}

fn corners(lo: &[f64], hi: &[f64], free: &[usize]) -> Vec<Vec<f64>> {
    (0u64..1 << free.len())
        .map(|mask| {
            let mut p = lo.to_vec();
            for (bit, &i) in free.iter().enumerate() {
                if mask >> bit & 1 == 1 {
                    p[i] = hi[i];
                }
            }
            p
        })
        .collect()
}

/// The set 𝒩 of net withdrawals a reserve must be able to absorb.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintySet {
    /// Bound on `|1ᵀη|`.
    pub a: f64,
    /// Bound on `Hη − c`, one entry per directed line.
    pub w: Vec<f64>,
    pub eta_min: Vec<f64>,
    pub eta_max: Vec<f64>,
}

impl UncertaintySet {
    /// Widest box consistent with the demand box and generator limits:
    /// `η ∈ [d_min + u − g_max, d_max + u − g_min]`.
    pub fn from_demand_box(
        grid: &GridModel,
        d_min: &[f64],
        d_max: &[f64],
        a: f64,
        w: Vec<f64>,
    ) -> Result<Self> {
        let n = grid.num_buses();
        if d_min.len() != n || d_max.len() != n {
            return Err(Error::DimensionMismatch(
                "demand box must list every bus".into(),
            ));
        }
        let mut g_lo = vec![0.0; n];
        let mut g_hi = vec![0.0; n];
        for gen in &grid.network.generators {
            g_lo[gen.bus] += gen.g_min;
            g_hi[gen.bus] += gen.g_max;
        }
        let u = &grid.network.baseload;
        let eta_min = (0..n).map(|i| d_min[i] + u[i] - g_hi[i]).collect();
        let eta_max = (0..n).map(|i| d_max[i] + u[i] - g_lo[i]).collect();
        let set = Self {
            a,
            w,
            eta_min,
            eta_max,
        };
        set.check(grid)?;
        Ok(set)
    }

    /// Same `w` on every directed line.
    pub fn uniform(grid: &GridModel, d_min: &[f64], d_max: &[f64], a: f64, w: f64) -> Result<Self> {
        Self::from_demand_box(grid, d_min, d_max, a, vec![w; grid.num_directed_lines()])
    }

    fn check(&self, grid: &GridModel) -> Result<()> {
        if self.eta_min.len() != grid.num_buses() || self.eta_max.len() != grid.num_buses() {
            return Err(Error::DimensionMismatch("η box must list every bus".into()));
        }
        if self.w.len() != grid.num_directed_lines() {
            return Err(Error::DimensionMismatch(format!(
                "w needs {} entries, got {}",
                grid.num_directed_lines(),
                self.w.len()
            )));
        }
        if !(self.a >= 0.0) || self.w.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidInput(
                "uncertainty set needs a ≥ 0 and finite w".into(),
            ));
        }
        if self
            .eta_min
            .iter()
            .zip(&self.eta_max)
            .any(|(a, b)| !(a <= b))
        {
            return Err(Error::EmptyUncertaintySet("η box has min > max".into()));
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        1.0 + self
            .eta_min
            .iter()
            .chain(&self.eta_max)
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Membership test with a small relative tolerance.
    pub fn contains(&self, grid: &GridModel, eta: &[f64]) -> bool {
        let tol = SET_TOL * self.scale();
        if eta.iter().sum::<f64>().abs() > self.a + tol {
            return false;
        }
        if eta
            .iter()
            .zip(self.eta_min.iter().zip(&self.eta_max))
            .any(|(v, (lo, hi))| *v < lo - tol || *v > hi + tol)
        {
            return false;
        }
        grid.flows(eta)
            .iter()
            .zip(grid.limits.iter().zip(&self.w))
            .all(|(f, (c, w))| f - c <= w + tol)
    }

    /// Moves `η` along the box-width direction until `|1ᵀη| ≤ a`.
    fn clamp_balance(&self, eta: &mut [f64]) {
        let total: f64 = eta.iter().sum();
        let width: f64 = self
            .eta_min
            .iter()
            .zip(&self.eta_max)
            .map(|(a, b)| b - a)
            .sum();
        if width <= 0.0 {
            return;
        }
        let excess = if total > self.a {
            total - self.a
        } else if total < -self.a {
            total + self.a
        } else {
            return;
        };
        let t = excess / width;
        for (v, (lo, hi)) in eta.iter_mut().zip(self.eta_min.iter().zip(&self.eta_max)) {
            *v -= t * (hi - lo);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintySamples {
    pub samples: Vec<Vec<f64>>,
    /// How many of the leading samples are box corners.
    pub corners: usize,
    pub attempts: usize,
    /// Samples that came from the hit-and-run fallback.
    pub hit_and_run: usize,
}

/// Draws `n` random members of 𝒩, preceded (when `include_corners`) by every
/// box corner that lands in 𝒩 after the balance shift.
///
/// Points are drawn uniformly in the η box and shifted along the box-width
/// direction onto `|1ᵀη| ≤ a`; those meeting every constraint are kept. If
/// fewer than `n` survive `200·n` attempts, the remainder comes from a
/// hit-and-run walk inside 𝒩.
pub fn sample_uncertainty_set(
    grid: &GridModel,
    set: &UncertaintySet,
    n: usize,
    seed: u64,
    include_corners: bool,
) -> Result<UncertaintySamples> {
    set.check(grid)?;
    let dim = grid.num_buses();
    let free: Vec<usize> = (0..dim)
        .filter(|&i| set.eta_max[i] > set.eta_min[i])
        .collect();
    let mut samples = Vec::new();
    if include_corners && free.len() <= MAX_CORNER_DIMS {
        for mut c in corners(&set.eta_min, &set.eta_max, &free) {
            set.clamp_balance(&mut c);
            if set.contains(grid, &c) {
                samples.push(c);
            }
        }
    }
    let n_corners = samples.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let budget = 200 * n.max(1);
    let mut attempts = 0;
    let mut random = Vec::with_capacity(n);
    while random.len() < n && attempts < budget {
        attempts += 1;
        let mut eta: Vec<f64> = (0..dim)
            .map(|i| {
                let (lo, hi) = (set.eta_min[i], set.eta_max[i]);
                if hi > lo {
                    rng.random_range(lo..=hi)
                } else {
                    lo
                }
            })
            .collect();
        set.clamp_balance(&mut eta);
        if set.contains(grid, &eta) {
            random.push(eta);
        }
    }
    let mut walked = 0;
    if random.len() < n {
        let start = match random.last().or(samples.last()) {
            Some(p) => p.clone(),
            None => interior_point(grid, set)?,
        };
        let extra = hit_and_run(grid, set, start, n - random.len(), &mut rng);
        walked = extra.len();
        random.extend(extra);
    }
    samples.extend(random);
    if samples.is_empty() && n > 0 {
        return Err(Error::EmptyUncertaintySet(
            "no sample satisfied every constraint".into(),
        ));
    }
    Ok(UncertaintySamples {
        samples,
        corners: n_corners,
        attempts,
        hit_and_run: walked,
    })
}

/// Linear description `A η ≤ b` of 𝒩 (finite line rows only). The flag marks
/// rows that can hold strictly at an interior point.
fn halfspaces(grid: &GridModel, set: &UncertaintySet) -> Vec<(Vec<f64>, f64, bool)> {
    let dim = grid.num_buses();
    let thick = set.a > 0.0;
    let mut rows = vec![
        (vec![1.0; dim], set.a, thick),
        (vec![-1.0; dim], set.a, thick),
    ];
    for l in 0..grid.num_directed_lines() {
        let bound = grid.limits[l] + set.w[l];
        if bound.is_finite() {
            rows.push((grid.ptdf.row(l).iter().copied().collect(), bound, true));
        }
    }
    for i in 0..dim {
        let open = set.eta_max[i] > set.eta_min[i];
        let mut e = vec![0.0; dim];
        e[i] = 1.0;
        rows.push((e.clone(), set.eta_max[i], open));
        e[i] = -1.0;
        rows.push((e, -set.eta_min[i], open));
    }
    rows
}

/// Point of 𝒩 maximising the smallest slack over its rows, or an error when
/// 𝒩 is empty.
fn interior_point(grid: &GridModel, set: &UncertaintySet) -> Result<Vec<f64>> {
    let dim = grid.num_buses();
    // Variables: x = η − η_min ⪰ 0, then the margin t ⪰ 0.
    let mut obj = vec![0.0; dim + 1];
    obj[dim] = -1.0;
    let mut lp = LinearProgram::new(obj);
    for (row, b, open) in halfspaces(grid, set) {
        let offset: f64 = row.iter().zip(&set.eta_min).map(|(a, s)| a * s).sum();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut coeffs = row;
        coeffs.push(if open { norm } else { 0.0 });
        lp.add(coeffs, Relation::Le, b - offset);
    }
    let mut cap = vec![0.0; dim + 1];
    cap[dim] = 1.0;
    lp.add(cap, Relation::Le, set.scale());
    let sol = lp.solve().map_err(|e| match e {
        Error::LpInfeasible => {
            Error::EmptyUncertaintySet("the constraints of 𝒩 are inconsistent".into())
        }
        other => other,
    })?;
    Ok(sol.x[..dim]
        .iter()
        .zip(&set.eta_min)
        .map(|(x, s)| x + s)
        .collect())
}

/// Hit-and-run walk inside 𝒩. Directions are Gaussian on the free
/// coordinates; every other step they are projected onto `1ᵀδ = 0` so that
/// thin balance slabs do not freeze the walk.
fn hit_and_run(
    grid: &GridModel,
    set: &UncertaintySet,
    start: Vec<f64>,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    const THIN: usize = 5;
    let dim = grid.num_buses();
    let free: Vec<usize> = (0..dim)
        .filter(|&i| set.eta_max[i] > set.eta_min[i])
        .collect();
    if free.is_empty() {
        return vec![start; count];
    }
    let rows = halfspaces(grid, set);
    let mut x = start;
    let mut out = Vec::with_capacity(count);
    let mut step = 0usize;
    while out.len() < count {
        step += 1;
        let mut dir = vec![0.0; dim];
        for &i in &free {
            dir[i] = gaussian(rng);
        }
        if step.is_multiple_of(2) || set.a == 0.0 {
            let mean = free.iter().map(|&i| dir[i]).sum::<f64>() / free.len() as f64;
            for &i in &free {
                dir[i] -= mean;
            }
        }
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for (row, b, _) in &rows {
            let ad: f64 = row.iter().zip(&dir).map(|(a, d)| a * d).sum();
            let slack = b - row.iter().zip(&x).map(|(a, v)| a * v).sum::<f64>();
            if ad > 1e-14 {
                hi = hi.min(slack / ad);
            } else if ad < -1e-14 {
                lo = lo.max(slack / ad);
            }
        }
        if lo.is_finite() && hi.is_finite() && hi > lo {
            let t = rng.random_range(lo..=hi);
            let cand: Vec<f64> = x.iter().zip(&dir).map(|(v, d)| v + t * d).collect();
            if set.contains(grid, &cand) {
                x = cand;
            }
        }
        if step.is_multiple_of(THIN) {
            out.push(x.clone());
        }
    }
    out
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// A point `θ = (θ₁, θ₂, θ₃, θ₄)` of the cone
/// `θ₁1 − Hᵀθ₂ − θ₃ + θ₄ = 0`, `θ₂, θ₃, θ₄ ⪰ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualConeSample {
    pub theta1: f64,
    pub theta2: Vec<f64>,
    pub theta3: Vec<f64>,
    pub theta4: Vec<f64>,
}

impl DualConeSample {
    fn from_parts(grid: &GridModel, theta1: f64, theta2: Vec<f64>) -> Option<Self> {
        let ht = grid.ptdf.transpose() * nalgebra::DVector::from_column_slice(&theta2);
        let s: Vec<f64> = ht.iter().map(|v| theta1 - v).collect();
        let theta3: Vec<f64> = s.iter().map(|v| v.max(0.0)).collect();
        let theta4: Vec<f64> = s.iter().map(|v| (-v).max(0.0)).collect();
        let norm = theta2
            .iter()
            .chain(&theta3)
            .chain(&theta4)
            .fold(theta1.abs(), |m, v| m.max(v.abs()));
        if norm == 0.0 {
            return None;
        }
        Some(Self {
            theta1: theta1 / norm,
            theta2: theta2.iter().map(|v| v / norm).collect(),
            theta3: theta3.iter().map(|v| v / norm).collect(),
            theta4: theta4.iter().map(|v| v / norm).collect(),
        })
    }

    /// `‖θ₁1 − Hᵀθ₂ − θ₃ + θ₄‖∞`.
    pub fn identity_residual(&self, grid: &GridModel) -> f64 {
        let ht = grid.ptdf.transpose() * nalgebra::DVector::from_column_slice(&self.theta2);
        (0..grid.num_buses())
            .map(|i| (self.theta1 - ht[i] - self.theta3[i] + self.theta4[i]).abs())
            .fold(0.0, f64::max)
    }

    /// The bilinear `F(θ, η, r) = −θ₁1ᵀη + θ₂ᵀ(Hη − c) − rᵀ(θ₃ + θ₄)`.
    pub fn bilinear(&self, grid: &GridModel, eta: &[f64], r: &[f64]) -> f64 {
        self.requirement(grid, eta)
            - self
                .coefficients()
                .iter()
                .zip(r)
                .map(|(a, b)| a * b)
                .sum::<f64>()
    }

    fn coefficients(&self) -> Vec<f64> {
        self.theta3
            .iter()
            .zip(&self.theta4)
            .map(|(a, b)| a + b)
            .collect()
    }

    fn requirement(&self, grid: &GridModel, eta: &[f64]) -> f64 {
        requirement_from_flows(self, &grid.flows(eta), eta.iter().sum(), &grid.limits)
    }
}

fn requirement_from_flows(
    theta: &DualConeSample,
    flows: &[f64],
    total: f64,
    limits: &[f64],
) -> f64 {
    let lines: f64 = theta
        .theta2
        .iter()
        .zip(flows.iter().zip(limits))
        .filter(|(t, _)| **t != 0.0)
        .map(|(t, (f, c))| t * (f - c))
        .sum();
    -theta.theta1 * total + lines
}

/// Up to `n` distinct extreme rays of the cone (fewer when the cone has
/// fewer rays than the sampler can find), which are the only cone points
/// that can bind in the procurement LP (every other point is a nonnegative
/// combination of them).
///
/// A ray has `θ₂` supported on a set `S` of directed lines and `s = θ₁1 − Hᵀθ₂`
/// vanishing on `|S|` buses (or on `|S| − 1` buses with `θ₁ = 0`). Rays with
/// `|S| ≤ 1` are listed first in a fixed order; the rest are drawn with `S`
/// of size 2 or 3 and the zero buses chosen at random. Lines without a
/// finite limit never get weight.
pub fn sample_dual_cone(grid: &GridModel, n: usize, seed: u64) -> Vec<DualConeSample> {
    let nb = grid.num_buses();
    let lines: Vec<usize> = (0..grid.num_directed_lines())
        .filter(|&l| grid.limits[l].is_finite())
        .collect();
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    let mut push = |theta: Option<DualConeSample>, out: &mut Vec<DualConeSample>| {
        if let Some(t) = theta {
            let key: Vec<i64> = std::iter::once(t.theta1)
                .chain(t.theta2.iter().copied())
                .map(|v| (v * 1e9).round() as i64)
                .collect();
            if out.len() < n && seen.insert(key) {
                out.push(t);
            }
        }
    };
    for theta1 in [1.0, -1.0] {
        push(
            DualConeSample::from_parts(grid, theta1, vec![0.0; grid.num_directed_lines()]),
            &mut out,
        );
    }
    for &l in &lines {
        push(ray(grid, &[l], &[], true), &mut out);
        for v in 0..nb {
            push(ray(grid, &[l], &[v], false), &mut out);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_support = lines.len().min(3).min(nb);
    let mut misses = 0usize;
    while out.len() < n && max_support >= 2 && misses < 20 * n + 1000 {
        let k = rng.random_range(2..=max_support);
        let support = choose(&mut rng, &lines, k);
        let zero_theta1 = rng.random::<f64>() < 0.25;
        let buses: Vec<usize> = (0..nb).collect();
        let zeros = choose(&mut rng, &buses, if zero_theta1 { k - 1 } else { k });
        let before = out.len();
        push(ray(grid, &support, &zeros, zero_theta1), &mut out);
        if out.len() == before {
            misses += 1;
        }
    }
    out
}

fn choose(rng: &mut ChaCha8Rng, from: &[usize], k: usize) -> Vec<usize> {
    let mut pool = from.to_vec();
    for i in 0..k {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool.sort_unstable();
    pool
}

/// Solves for `(θ₁, θ₂ on support)` with `s_v = 0` on `zeros` (and `θ₁ = 0`
/// when asked); `None` unless the solution is unique up to scale and can be
/// signed so that `θ₂ ⪰ 0`.
fn ray(
    grid: &GridModel,
    support: &[usize],
    zeros: &[usize],
    zero_theta1: bool,
) -> Option<DualConeSample> {
    let k = support.len();
    let unknowns = k + 1;
    let mut rows: Vec<Vec<f64>> = zeros
        .iter()
        .map(|&v| {
            let mut row = vec![1.0];
            row.extend(support.iter().map(|&l| -grid.ptdf[(l, v)]));
            row
        })
        .collect();
    if zero_theta1 {
        let mut row = vec![0.0; unknowns];
        row[0] = 1.0;
        rows.push(row);
    }
    if rows.len() + 1 != unknowns {
        return None;
    }
    // Pin the scale with a generic row and solve the square system.
    let m = nalgebra::DMatrix::from_fn(unknowns, unknowns, |i, j| {
        if i < rows.len() {
            rows[i][j]
        } else {
            1.0 + 0.1 * j as f64
        }
    });
    let mut rhs = nalgebra::DVector::zeros(unknowns);
    rhs[unknowns - 1] = 1.0;
    let lu = m.clone().lu();
    let u = lu.solve(&rhs)?;
    let scale = u.amax();
    if !(scale.is_finite()) || scale == 0.0 {
        return None;
    }
    let residual = (&m * &u - &rhs).amax();
    if residual > 1e-9 {
        return None;
    }
    let u: Vec<f64> = u.iter().map(|v| v / scale).collect();
    let sign = if u[1..].iter().all(|v| *v >= -1e-12) {
        1.0
    } else if u[1..].iter().all(|v| *v <= 1e-12) {
        -1.0
    } else {
        return None;
    };
    if u[1..].iter().any(|v| v.abs() <= 1e-12) {
        return None;
    }
    let mut theta2 = vec![0.0; grid.num_directed_lines()];
    for (i, &l) in support.iter().enumerate() {
        theta2[l] = sign * u[i + 1];
    }
    let theta1 = if zero_theta1 { 0.0 } else { sign * u[0] };
    DualConeSample::from_parts(grid, theta1, theta2)
}

/// Residuals of the procurement LP optimality conditions.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LpCertificate {
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl LpCertificate {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReservePlan {
    /// MWh per bus.
    pub r: Vec<f64>,
    /// $/MWh per bus.
    pub xi: Vec<f64>,
    pub cost: f64,
    pub cone_samples: usize,
    pub uncertainty_samples: usize,
    /// Cone samples whose requirement was positive and entered the LP.
    pub active_rows: usize,
    /// `(cone index, η index)` of each binding constraint.
    pub binding: Vec<(usize, usize)>,
    pub certificate: LpCertificate,
}

/// Scenario-approximated robust reserve LP:
/// `min ξᵀr` s.t. `r ⪰ 0` and `F(θⁱ, ηʲ, r) ≤ 0` for every sampled pair.
///
/// For fixed `θⁱ` only the worst `ηʲ` matters, so each cone sample
/// contributes one row `(θ₃ⁱ + θ₄ⁱ)ᵀr ≥ maxⱼ(−θ₁ⁱ1ᵀηʲ + θ₂ⁱᵀ(Hηʲ − c))`.
/// The LP is solved through its dual (one row per bus) and the optimality
/// conditions are re-checked on the primal.
pub fn procure_reserves(
    grid: &GridModel,
    xi: &[f64],
    cone: &[DualConeSample],
    etas: &[Vec<f64>],
) -> Result<ReservePlan> {
    let n = grid.num_buses();
    if xi.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "ξ needs {n} entries, got {}",
            xi.len()
        )));
    }
    if xi.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput(
            "reserve prices must be finite and nonnegative".into(),
        ));
    }
    if cone.is_empty() || etas.is_empty() {
        return Err(Error::InvalidInput(
            "procurement needs nonempty sample sets".into(),
        ));
    }
    if etas.iter().any(|e| e.len() != n) {
        return Err(Error::DimensionMismatch(
            "every η must list every bus".into(),
        ));
    }
    let flows: Vec<(Vec<f64>, f64)> = etas
        .par_iter()
        .map(|e| (grid.flows(e), e.iter().sum()))
        .collect();
    let worst: Vec<(f64, usize)> = cone
        .par_iter()
        .map(|theta| {
            flows
                .iter()
                .enumerate()
                .map(|(j, (f, total))| (requirement_from_flows(theta, f, *total, &grid.limits), j))
                .fold((f64::NEG_INFINITY, 0), |best, cur| {
                    if cur.0 > best.0 {
                        cur
                    } else {
                        best
                    }
                })
        })
        .collect();
    let mut rows: Vec<(usize, Vec<f64>, f64, usize)> = Vec::new();
    for (i, (theta, &(h, j))) in cone.iter().zip(&worst).enumerate() {
        if h <= 0.0 {
            continue;
        }
        let coeffs = theta.coefficients();
        if coeffs.iter().all(|c| *c == 0.0) {
            return Err(Error::DegenerateSample(i));
        }
        rows.push((i, coeffs, h, j));
    }

    let mut r = vec![0.0; n];
    let mut y = vec![0.0; rows.len()];
    if !rows.is_empty() {
        // Dual: max hᵀy s.t. Σᵢ yᵢ aᵢ ⪯ ξ, y ⪰ 0.
        let mut lp = LinearProgram::new(rows.iter().map(|row| -row.2).collect());
        for v in 0..n {
            lp.add(
                rows.iter().map(|row| row.1[v]).collect(),
                Relation::Le,
                xi[v],
            );
        }
        let sol = lp.solve().map_err(|e| match e {
            Error::LpUnbounded => Error::LpInfeasible,
            other => other,
        })?;
        y = sol.x;
        r = sol.duals.iter().map(|d| (-d).max(0.0)).collect();
    }

    let mut cert = LpCertificate::default();
    let mut binding = Vec::new();
    let scale = 1.0 + rows.iter().fold(0.0_f64, |m, row| m.max(row.2));
    let mut used = vec![0.0; n];
    for ((i, a, h, j), yi) in rows.iter().zip(&y) {
        let lhs: f64 = a.iter().zip(&r).map(|(c, v)| c * v).sum();
        cert.primal = cert.primal.max(h - lhs);
        cert.dual = cert.dual.max(-yi);
        cert.complementarity = cert.complementarity.max((yi * (lhs - h)).abs());
        for (u, c) in used.iter_mut().zip(a) {
            *u += yi * c;
        }
        if (lhs - h).abs() <= 1e-9 * scale {
            binding.push((*i, *j));
        }
    }
    for v in 0..n {
        cert.primal = cert.primal.max(-r[v]);
        cert.dual = cert.dual.max(used[v] - xi[v]);
        cert.complementarity = cert.complementarity.max((r[v] * (xi[v] - used[v])).abs());
    }
    let cost = xi.iter().zip(&r).map(|(a, b)| a * b).sum();
    Ok(ReservePlan {
        r,
        xi: xi.to_vec(),
        cost,
        cone_samples: cone.len(),
        uncertainty_samples: etas.len(),
        active_rows: rows.len(),
        binding,
        certificate: cert,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Deployment {
    Feasible(Vec<f64>),
    /// Smallest total violation of the balance and line rows any `|y| ⪯ r`
    /// can reach.
    Infeasible {
        min_violation: f64,
    },
}

impl Deployment {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Deployment::Feasible(_))
    }
}

/// Largest violation of the deployment constraints
/// `1ᵀy = 1ᵀη`, `H(η − y) ⪯ c`, `|y| ⪯ r`.
pub fn deployment_residual(grid: &GridModel, eta: &[f64], r: &[f64], y: &[f64]) -> f64 {
    let balance = (y.iter().sum::<f64>() - eta.iter().sum::<f64>()).abs();
    let diff: Vec<f64> = eta.iter().zip(y).map(|(e, v)| e - v).collect();
    let lines = grid
        .flows(&diff)
        .iter()
        .zip(&grid.limits)
        .fold(0.0_f64, |m, (f, c)| m.max(f - c));
    let caps = y
        .iter()
        .zip(r)
        .fold(0.0_f64, |m, (v, cap)| m.max(v.abs() - cap));
    balance.max(lines).max(caps)
}

/// Finds a re-dispatch `y` absorbing `η` within capacities `r`, or reports
/// the minimum residual violation from an elastic LP.
pub fn deploy_reserve(grid: &GridModel, eta: &[f64], r: &[f64]) -> Result<Deployment> {
    let n = grid.num_buses();
    if eta.len() != n || r.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "η and r need {n} entries"
        )));
    }
    if r.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidInput(
            "reserve capacities must be nonnegative".into(),
        ));
    }
    let finite: Vec<usize> = (0..grid.num_directed_lines())
        .filter(|&l| grid.limits[l].is_finite())
        .collect();
    // Variables: z = y + r (n), balance slack s⁺ s⁻, one slack per finite line.
    let nv = n + 2 + finite.len();
    let mut obj = vec![0.0; nv];
    for c in obj.iter_mut().skip(n) {
        *c = 1.0;
    }
    let mut lp = LinearProgram::new(obj);
    let total_eta: f64 = eta.iter().sum();
    let total_r: f64 = r.iter().sum();
    let mut row = vec![0.0; nv];
    row[..n].fill(1.0);
    row[n] = 1.0;
    row[n + 1] = -1.0;
    lp.add(row, Relation::Eq, total_eta + total_r);
    let h_eta = grid.flows(eta);
    let h_r = grid.flows(r);
    for (k, &l) in finite.iter().enumerate() {
        let mut row = vec![0.0; nv];
        for v in 0..n {
            row[v] = -grid.ptdf[(l, v)];
        }
        row[n + 2 + k] = -1.0;
        lp.add(row, Relation::Le, grid.limits[l] - h_eta[l] - h_r[l]);
    }
    for v in 0..n {
        let mut row = vec![0.0; nv];
        row[v] = 1.0;
        lp.add(row, Relation::Le, 2.0 * r[v]);
    }
    let sol = lp.solve()?;
    let scale = 1.0 + eta.iter().chain(r).fold(0.0_f64, |m, v| m.max(v.abs()));
    if sol.objective > 1e-9 * scale {
        return Ok(Deployment::Infeasible {
            min_violation: sol.objective,
        });
    }
    let y: Vec<f64> = sol.x[..n]
        .iter()
        .zip(r)
        .map(|(z, cap)| (z - cap).clamp(-cap, *cap))
        .collect();
    let residual = deployment_residual(grid, eta, r, &y);
    if residual > DEPLOY_TOL {
        return Ok(Deployment::Infeasible {
            min_violation: residual,
        });
    }
    Ok(Deployment::Feasible(y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdequacyReport {
    pub samples: usize,
    pub feasible: usize,
    /// Indices of samples that could not be absorbed.
    pub failures: Vec<usize>,
    /// Worst deployment residual over the feasible samples.
    pub max_residual: f64,
}

impl AdequacyReport {
    pub fn fraction(&self) -> f64 {
        if self.samples == 0 {
            1.0
        } else {
            self.feasible as f64 / self.samples as f64
        }
    }
}

/// Per-sample deployment outcomes together with the summary report.
pub fn verify_reserve_adequacy_detailed(
    grid: &GridModel,
    r: &[f64],
    samples: &[Vec<f64>],
) -> Result<(AdequacyReport, Vec<Deployment>)> {
    let outcomes: Vec<Deployment> = samples
        .par_iter()
        .map(|eta| deploy_reserve(grid, eta, r))
        .collect::<Result<_>>()?;
    let mut report = AdequacyReport {
        samples: samples.len(),
        feasible: 0,
        failures: Vec::new(),
        max_residual: 0.0,
    };
    for (i, (eta, out)) in samples.iter().zip(&outcomes).enumerate() {
        match out {
            Deployment::Feasible(y) => {
                report.feasible += 1;
                report.max_residual = report
                    .max_residual
                    .max(deployment_residual(grid, eta, r, y));
            }
            Deployment::Infeasible { .. } => report.failures.push(i),
        }
    }
    Ok((report, outcomes))
}

pub fn verify_reserve_adequacy(
    grid: &GridModel,
    r: &[f64],
    samples: &[Vec<f64>],
) -> Result<AdequacyReport> {
    verify_reserve_adequacy_detailed(grid, r, samples).map(|(rep, _)| rep)
}

/// Settings shared by every procurement in a reserve run.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcurementOptions {
    pub xi: Vec<f64>,
    pub cone_samples: usize,
    pub uncertainty_samples: usize,
    pub seed: u64,
}

/// Procures reserves for the uncertainty set built from `(a, w)` on the
/// default η box. Cone and uncertainty samples are seeded from `opts.seed`.
pub fn procure_for_bounds(
    grid: &GridModel,
    d_min: &[f64],
    d_max: &[f64],
    a: f64,
    w: Vec<f64>,
    cone: &[DualConeSample],
    opts: &ProcurementOptions,
) -> Result<(ReservePlan, UncertaintySet, UncertaintySamples)> {
    let set = UncertaintySet::from_demand_box(grid, d_min, d_max, a, w)?;
    let samples = sample_uncertainty_set(grid, &set, opts.uncertainty_samples, opts.seed, true)?;
    let plan = procure_reserves(grid, &opts.xi, cone, &samples.samples)?;
    Ok((plan, set, samples))
}

/// Reserve cost `R_k` needed to cover the realised infeasibility of each
/// coordination iteration: `a = |1ᵀ(d + u − g)|`, `w = (Hη − c)⁺`.
pub fn overlay_costs(
    grid: &GridModel,
    rows: &[crate::coordination::TraceRow],
    d_min: &[f64],
    d_max: &[f64],
    opts: &ProcurementOptions,
) -> Result<Vec<f64>> {
    let cone = sample_dual_cone(grid, opts.cone_samples, opts.seed);
    rows.iter()
        .map(|row| {
            let w: Vec<f64> = row.infeasibility.flow.iter().map(|v| v.max(0.0)).collect();
            procure_for_bounds(
                grid,
                d_min,
                d_max,
                row.infeasibility.balance.abs(),
                w,
                &cone,
                opts,
            )
            .map(|(p, _, _)| p.cost)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::power::{Generator, Line, PowerNetwork};
    use approx::assert_abs_diff_eq;

    fn two_bus(limit: f64) -> GridModel {
        GridModel::new(PowerNetwork {
            bus_names: vec!["a".into(), "b".into()],
            lines: vec![Line::symmetric(0, 1, 10.0, limit)],
            generators: vec![Generator {
                bus: 0,
                quadratic: 0.1,
                linear: 10.0,
                constant: 0.0,
                g_min: 0.0,
                g_max: 200.0,
            }],
            baseload: vec![0.0, 50.0],
            slack: 0,
        })
        .unwrap()
    }

    fn single_bus() -> GridModel {
        GridModel::new(PowerNetwork {
            bus_names: vec!["a".into()],
            lines: vec![],
            generators: vec![Generator {
                bus: 0,
                quadratic: 0.1,
                linear: 10.0,
                constant: 0.0,
                g_min: 0.0,
                g_max: 200.0,
            }],
            baseload: vec![50.0],
            slack: 0,
        })
        .unwrap()
    }

    #[test]
    fn uncongested_bound_is_balance_price_only() {
        let grid = two_bus(1000.0);
        let b = estimate_dual_bound(&grid, &[0.0, 0.0], &[0.0, 20.0], 16, 1.5, 3).unwrap();
        let top = grid.economic_dispatch(&[0.0, 20.0]).unwrap();
        assert!(top.mu.iter().all(|m| *m == 0.0));
        assert_abs_diff_eq!(b.estimate, 1.5 * top.gamma_bal.abs(), epsilon = 1e-9);
    }

    #[test]
    fn degenerate_box_is_single_dispatch() {
        let grid = two_bus(1000.0);
        let b = estimate_dual_bound(&grid, &[0.0, 5.0], &[0.0, 5.0], 100, 1.5, 3).unwrap();
        assert_eq!(b.points, 1);
        let r = grid.economic_dispatch(&[0.0, 5.0]).unwrap();
        assert_abs_diff_eq!(b.estimate, 1.5 * r.dual_norm(), epsilon = 1e-12);
    }

    #[test]
    fn zero_set_yields_zero_sample() {
        let grid = single_bus();
        let set = UncertaintySet {
            a: 0.0,
            w: vec![],
            eta_min: vec![0.0],
            eta_max: vec![0.0],
        };
        let s = sample_uncertainty_set(&grid, &set, 1, 0, true).unwrap();
        assert!(s.samples.iter().all(|e| e == &vec![0.0]));
        assert!(!s.samples.is_empty());
    }

    #[test]
    fn samples_are_members_and_reproducible() {
        let grid = two_bus(30.0);
        let set = UncertaintySet {
            a: 3.0,
            w: vec![2.0, 2.0],
            eta_min: vec![-35.0, 20.0],
            eta_max: vec![-20.0, 35.0],
        };
        let a = sample_uncertainty_set(&grid, &set, 200, 11, true).unwrap();
        let b = sample_uncertainty_set(&grid, &set, 200, 11, true).unwrap();
        assert_eq!(a, b);
        assert!(a.samples.iter().all(|e| set.contains(&grid, e)));
        assert!(a.samples.len() >= 200);
    }

    #[test]
    fn empty_set_is_reported() {
        let grid = two_bus(30.0);
        let set = UncertaintySet {
            a: 0.0,
            w: vec![0.0, 0.0],
            eta_min: vec![10.0, 10.0],
            eta_max: vec![20.0, 20.0],
        };
        assert!(matches!(
            sample_uncertainty_set(&grid, &set, 10, 1, true),
            Err(Error::EmptyUncertaintySet(_))
        ));
    }

    #[test]
    fn cone_samples_satisfy_identity() {
        let grid = two_bus(30.0);
        let c = sample_dual_cone(&grid, 300, 5);
        assert!(c.len() >= 5 && c.len() <= 300);
        for s in &c {
            assert!(s.identity_residual(&grid) <= 1e-10);
            assert!(s
                .theta2
                .iter()
                .chain(&s.theta3)
                .chain(&s.theta4)
                .all(|v| *v >= 0.0));
            let norm = s
                .theta2
                .iter()
                .chain(&s.theta3)
                .chain(&s.theta4)
                .fold(s.theta1.abs(), |m, v| m.max(v.abs()));
            assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-15);
        }
        assert_eq!(c, sample_dual_cone(&grid, 300, 5));
    }

    #[test]
    fn zero_cone_point_is_excluded() {
        let grid = two_bus(30.0);
        assert!(DualConeSample::from_parts(&grid, 0.0, vec![0.0, 0.0]).is_none());
    }

    #[test]
    fn nothing_to_cover_means_no_reserve() {
        let grid = two_bus(30.0);
        let cone = sample_dual_cone(&grid, 50, 1);
        let plan = procure_reserves(&grid, &[55.0, 55.0], &cone, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(plan.r, vec![0.0, 0.0]);
        assert_eq!(plan.cost, 0.0);
    }

    #[test]
    fn single_bus_reserve_equals_imbalance_bound() {
        let grid = single_bus();
        let a = 4.0;
        let etas = vec![vec![-a], vec![0.0], vec![a], vec![1.5]];
        let cone = sample_dual_cone(&grid, 20, 2);
        let plan = procure_reserves(&grid, &[55.0], &cone, &etas).unwrap();
        assert_abs_diff_eq!(plan.r[0], a, epsilon = 1e-12);
        assert_abs_diff_eq!(plan.cost, 55.0 * a, epsilon = 1e-9);
        assert!(plan.certificate.max() <= 1e-8);
    }

    #[test]
    fn binding_rows_have_zero_bilinear_value() {
        let grid = two_bus(30.0);
        let set = UncertaintySet {
            a: 3.0,
            w: vec![2.0, 2.0],
            eta_min: vec![-35.0, 20.0],
            eta_max: vec![-20.0, 35.0],
        };
        let etas = sample_uncertainty_set(&grid, &set, 100, 4, true)
            .unwrap()
            .samples;
        let cone = sample_dual_cone(&grid, 100, 4);
        let plan = procure_reserves(&grid, &[55.0, 40.0], &cone, &etas).unwrap();
        assert!(plan.certificate.max() <= 1e-8, "{:?}", plan.certificate);
        assert!(!plan.binding.is_empty());
        for &(i, j) in &plan.binding {
            assert!(cone[i].bilinear(&grid, &etas[j], &plan.r).abs() <= 1e-6);
        }
    }

    #[test]
    fn deploy_examples() {
        let grid = two_bus(1000.0);
        assert_eq!(
            deploy_reserve(&grid, &[0.0, 0.0], &[0.0, 0.0]).unwrap(),
            Deployment::Feasible(vec![0.0, 0.0])
        );
        match deploy_reserve(&grid, &[0.0, 5.0], &[10.0, 0.0]).unwrap() {
            Deployment::Feasible(y) => {
                assert_abs_diff_eq!(y[0], 5.0, epsilon = 1e-12);
                assert_abs_diff_eq!(y[1], 0.0, epsilon = 1e-12);
            }
            other => panic!("{other:?}"),
        }
        match deploy_reserve(&grid, &[0.0, 5.0], &[0.0, 0.0]).unwrap() {
            Deployment::Infeasible { min_violation } => {
                assert_abs_diff_eq!(min_violation, 5.0, epsilon = 1e-9)
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn line_overflow_needs_local_reserve() {
        // Flow a→b of 35 on a 30 MWh line: 5 MWh must be produced at b.
        let grid = two_bus(30.0);
        let eta = vec![-35.0, 35.0];
        assert!(!deploy_reserve(&grid, &eta, &[10.0, 0.0])
            .unwrap()
            .is_feasible());
        match deploy_reserve(&grid, &eta, &[5.0, 5.0]).unwrap() {
            Deployment::Feasible(y) => {
                assert!(deployment_residual(&grid, &eta, &[5.0, 5.0], &y) <= 1e-8)
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn procurement_samples_are_covered() {
        let grid = two_bus(30.0);
        let set = UncertaintySet {
            a: 3.0,
            w: vec![2.0, 2.0],
            eta_min: vec![-35.0, 20.0],
            eta_max: vec![-20.0, 35.0],
        };
        let etas = sample_uncertainty_set(&grid, &set, 200, 9, true)
            .unwrap()
            .samples;
        let cone = sample_dual_cone(&grid, 200, 9);
        let plan = procure_reserves(&grid, &[55.0, 55.0], &cone, &etas).unwrap();
        let rep = verify_reserve_adequacy(&grid, &plan.r, &etas).unwrap();
        assert_eq!(rep.feasible, rep.samples, "{:?}", plan.r);
    }

    #[test]
    fn zero_reserve_covers_only_balanced_secure_samples() {
        let grid = two_bus(30.0);
        let etas = vec![
            vec![-10.0, 10.0],
            vec![-35.0, 35.0],
            vec![-10.0, 11.0],
            vec![0.0, 0.0],
        ];
        let rep = verify_reserve_adequacy(&grid, &[0.0, 0.0], &etas).unwrap();
        assert_eq!(rep.failures, vec![1, 2]);
    }
}
