//! DC power network: PTDF, economic dispatch with locational marginal prices,
//! the generator best response used by dual decomposition, and feasibility
//! validation of a demand box.
//!
//! Units: energy in MWh per epoch, prices in $/MWh.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::graph::BusId;
use crate::qp::DiagonalQp;

#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub from: BusId,
    pub to: BusId,
    /// Per-unit susceptance `1/x`.
    pub susceptance: f64,
    /// Flow limit from `from` to `to` (MWh per epoch).
    pub limit_forward: f64,
    /// Flow limit from `to` to `from`.
    pub limit_backward: f64,
}

impl Line {
    pub fn symmetric(from: BusId, to: BusId, susceptance: f64, limit: f64) -> Self {
        Self {
            from,
            to,
            susceptance,
            limit_forward: limit,
            limit_backward: limit,
        }
    }
}

/// Merged generator at a bus with cost `a g² + b g + constant`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub bus: BusId,
    pub quadratic: f64,
    pub linear: f64,
    pub constant: f64,
    pub g_min: f64,
    pub g_max: f64,
}

impl Generator {
    pub fn cost(&self, g: f64) -> f64 {
        self.quadratic * g * g + self.linear * g + self.constant
    }

    pub fn marginal_cost(&self, g: f64) -> f64 {
        2.0 * self.quadratic * g + self.linear
    }

    /// Profit-maximising output at price `p`.
    pub fn best_response(&self, p: f64) -> f64 {
        ((p - self.linear) / (2.0 * self.quadratic)).clamp(self.g_min, self.g_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerNetwork {
    pub bus_names: Vec<String>,
    pub lines: Vec<Line>,
    pub generators: Vec<Generator>,
    pub baseload: Vec<f64>,
    pub slack: BusId,
}

impl PowerNetwork {
    pub fn num_buses(&self) -> usize {
        self.bus_names.len()
    }

    /// Directed line limits `c`, forward then backward for each line.
    pub fn directed_limits(&self) -> Vec<f64> {
        self.lines
            .iter()
            .flat_map(|l| [l.limit_forward, l.limit_backward])
            .collect()
    }

    pub fn generator_at(&self, bus: BusId) -> Option<&Generator> {
        self.generators.iter().find(|g| g.bus == bus)
    }

    /// Lowest bus id that hosts a generator.
    pub fn default_slack(&self) -> Option<BusId> {
        self.generators.iter().map(|g| g.bus).min()
    }

    pub fn total_cost(&self, g_by_bus: &[f64]) -> f64 {
        self.generators
            .iter()
            .map(|gen| gen.cost(g_by_bus[gen.bus]))
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_buses();
        if n == 0 {
            return Err(Error::Validation("power network has no buses".into()));
        }
        if self.baseload.len() != n {
            return Err(Error::Validation("baseload must list every bus".into()));
        }
        if self.baseload.iter().any(|u| !(*u >= 0.0)) {
            return Err(Error::Validation("baseload must be nonnegative".into()));
        }
        if self.slack >= n {
            return Err(Error::Validation(format!(
                "slack bus {} does not exist",
                self.slack
            )));
        }
        let mut seen = vec![false; n];
        for g in &self.generators {
            if g.bus >= n {
                return Err(Error::Validation(format!(
                    "generator at unknown bus {}",
                    g.bus
                )));
            }
            if std::mem::replace(&mut seen[g.bus], true) {
                return Err(Error::Validation(format!(
                    "bus {} has more than one generator; merge them first",
                    g.bus
                )));
            }
            if !(g.quadratic > 0.0) {
                return Err(Error::Validation(format!(
                    "generator at bus {} needs a strictly positive quadratic cost",
                    g.bus
                )));
            }
            if !(g.g_min <= g.g_max) {
                return Err(Error::Validation(format!(
                    "generator at bus {} has g_min > g_max",
                    g.bus
                )));
            }
        }
        for (i, l) in self.lines.iter().enumerate() {
            if l.from >= n || l.to >= n || l.from == l.to {
                return Err(Error::Validation(format!("line {i} has invalid endpoints")));
            }
            if !(l.susceptance > 0.0) {
                return Err(Error::Validation(format!(
                    "line {i} needs positive susceptance"
                )));
            }
            if !(l.limit_forward >= 0.0 && l.limit_backward >= 0.0) {
                return Err(Error::Validation(format!("line {i} has a negative limit")));
            }
        }
        if self.generators.is_empty() {
            return Err(Error::Validation("power network has no generators".into()));
        }
        Ok(())
    }

    fn is_connected(&self) -> bool {
        let n = self.num_buses();
        let mut adj = vec![Vec::new(); n];
        for l in &self.lines {
            adj[l.from].push(l.to);
            adj[l.to].push(l.from);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Maps net bus withdrawals (load minus generation) to directed line flows.
/// Row `2l` is line `l` in its forward direction, row `2l+1` the reverse.
pub fn compute_ptdf(network: &PowerNetwork, slack: BusId) -> Result<DMatrix<f64>> {
    let n = network.num_buses();
    if slack >= n {
        return Err(Error::InvalidInput(format!(
            "slack bus {slack} does not exist"
        )));
    }
    if !network.is_connected() {
        return Err(Error::DisconnectedNetwork);
    }
    let mut bbus = DMatrix::<f64>::zeros(n, n);
    for l in &network.lines {
        let b = l.susceptance;
        bbus[(l.from, l.from)] += b;
        bbus[(l.to, l.to)] += b;
        bbus[(l.from, l.to)] -= b;
        bbus[(l.to, l.from)] -= b;
    }
    let keep: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let reduced = DMatrix::from_fn(keep.len(), keep.len(), |i, j| bbus[(keep[i], keep[j])]);
    // angles per unit withdrawal: θ = -B_red⁻¹ e_k
    let inv = reduced.try_inverse().ok_or(Error::DisconnectedNetwork)?;
    let mut theta = DMatrix::<f64>::zeros(n, n);
    for (ri, &bi) in keep.iter().enumerate() {
        for (ci, &bc) in keep.iter().enumerate() {
            theta[(bi, bc)] = -inv[(ri, ci)];
        }
    }
    let m = network.lines.len();
    let mut h = DMatrix::<f64>::zeros(2 * m, n);
    for (li, l) in network.lines.iter().enumerate() {
        for k in 0..n {
            let f = l.susceptance * (theta[(l.from, k)] - theta[(l.to, k)]);
            h[(2 * li, k)] = f;
            h[(2 * li + 1, k)] = -f;
        }
    }
    Ok(h)
}

/// Network plus its PTDF, computed once and shared read-only.
#[derive(Debug, Clone)]
pub struct GridModel {
    pub network: PowerNetwork,
    pub ptdf: DMatrix<f64>,
    pub limits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispatchResult {
    /// Generation per bus.
    pub g: Vec<f64>,
    /// Balance multiplier.
    pub gamma_bal: f64,
    /// Multipliers of the directed line limits.
    pub mu: Vec<f64>,
    /// Locational marginal prices `γ1 + Hᵀμ`.
    pub prices: Vec<f64>,
    /// Multipliers of `g ≤ g_max` / `g ≥ g_min` per bus.
    pub upper_mult: Vec<f64>,
    pub lower_mult: Vec<f64>,
    pub cost: f64,
    pub kkt: KktResiduals,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

impl DispatchResult {
    /// Directed lines whose multiplier is positive.
    pub fn binding_lines(&self) -> Vec<usize> {
        self.mu
            .iter()
            .enumerate()
            .filter(|(_, m)| **m > 1e-9)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn dual_norm(&self) -> f64 {
        (self.gamma_bal * self.gamma_bal + self.mu.iter().map(|m| m * m).sum::<f64>()).sqrt()
    }

    pub fn price_spread(&self) -> f64 {
        let max = self
            .prices
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let min = self.prices.iter().copied().fold(f64::INFINITY, f64::min);
        max - min
    }
}

impl GridModel {
    pub fn new(network: PowerNetwork) -> Result<Self> {
        network.validate()?;
        let ptdf = compute_ptdf(&network, network.slack)?;
        let limits = network.directed_limits();
        Ok(Self {
            network,
            ptdf,
            limits,
        })
    }

    pub fn num_buses(&self) -> usize {
        self.network.num_buses()
    }

    pub fn num_directed_lines(&self) -> usize {
        self.limits.len()
    }

    /// `H x`.
    pub fn flows(&self, withdrawal: &[f64]) -> Vec<f64> {
        let w = DVector::from_column_slice(withdrawal);
        (&self.ptdf * w).iter().copied().collect()
    }

    /// `γ1 + Hᵀμ`.
    pub fn lmp(&self, gamma_bal: f64, mu: &[f64]) -> Vec<f64> {
        let mu = DVector::from_column_slice(mu);
        let ht = self.ptdf.transpose() * mu;
        ht.iter().map(|v| gamma_bal + v).collect()
    }

    fn net_load(&self, d: &[f64]) -> Vec<f64> {
        d.iter()
            .zip(&self.network.baseload)
            .map(|(a, b)| a + b)
            .collect()
    }

    fn dispatch_qp(&self, d: &[f64]) -> DiagonalQp {
        let gens = &self.network.generators;
        let ng = gens.len();
        let load = self.net_load(d);
        let total: f64 = load.iter().sum();
        let base_flow = self.flows(&load);
        let mut ineq_rows = Vec::new();
        let mut ineq_rhs = Vec::new();
        for (i, gen) in gens.iter().enumerate() {
            let mut up = vec![0.0; ng];
            up[i] = 1.0;
            ineq_rows.push(up);
            ineq_rhs.push(gen.g_max);
            let mut lo = vec![0.0; ng];
            lo[i] = -1.0;
            ineq_rows.push(lo);
            ineq_rhs.push(-gen.g_min);
        }
        for (r, &c) in self.limits.iter().enumerate() {
            if !c.is_finite() {
                continue;
            }
            let row: Vec<f64> = gens.iter().map(|gen| -self.ptdf[(r, gen.bus)]).collect();
            ineq_rows.push(row);
            ineq_rhs.push(c - base_flow[r]);
        }
        DiagonalQp {
            hessian_diag: gens.iter().map(|g| 2.0 * g.quadratic).collect(),
            linear: gens.iter().map(|g| g.linear).collect(),
            eq_rows: vec![vec![1.0; ng]],
            eq_rhs: vec![total],
            ineq_rows,
            ineq_rhs,
        }
    }

    /// Least-cost dispatch for EV demand `d` (MWh per bus) with KKT-certified
    /// duals and LMPs.
    pub fn economic_dispatch(&self, d: &[f64]) -> Result<DispatchResult> {
        let n = self.num_buses();
        if d.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "demand has {} entries, expected {n}",
                d.len()
            )));
        }
        if d.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidInput("EV demand must be nonnegative".into()));
        }
        let qp = self.dispatch_qp(d);
        let sol = qp.solve().map_err(|e| match e {
            Error::DispatchInfeasible(_) => Error::DispatchInfeasible(self.infeasibility_report(d)),
            other => other,
        })?;
        let gens = &self.network.generators;
        let mut g = vec![0.0; n];
        let mut upper_mult = vec![0.0; n];
        let mut lower_mult = vec![0.0; n];
        for (i, gen) in gens.iter().enumerate() {
            g[gen.bus] = sol.x[i];
            upper_mult[gen.bus] = sol.ineq_multipliers[2 * i];
            lower_mult[gen.bus] = sol.ineq_multipliers[2 * i + 1];
        }
        let mut mu = vec![0.0; self.limits.len()];
        let mut k = 2 * gens.len();
        for (r, c) in self.limits.iter().enumerate() {
            if c.is_finite() {
                mu[r] = sol.ineq_multipliers[k];
                k += 1;
            }
        }
        let gamma_bal = -sol.eq_multipliers[0];
        let prices = self.lmp(gamma_bal, &mu);
        let cost = self.network.total_cost(&g);
        let mut result = DispatchResult {
            g,
            gamma_bal,
            mu,
            prices,
            upper_mult,
            lower_mult,
            cost,
            kkt: KktResiduals::default(),
        };
        result.kkt = self.kkt_residuals(d, &result);
        Ok(result)
    }

    /// Scaled KKT residuals of a dispatch result for demand `d`.
    pub fn kkt_residuals(&self, d: &[f64], r: &DispatchResult) -> KktResiduals {
        let load = self.net_load(d);
        let price_scale = 1.0 + r.prices.iter().fold(0.0_f64, |m, p| m.max(p.abs()));
        let load_scale = 1.0 + load.iter().sum::<f64>().abs();
        let mut out = KktResiduals::default();
        for gen in &self.network.generators {
            let b = gen.bus;
            let s = gen.marginal_cost(r.g[b]) - r.prices[b] + r.upper_mult[b] - r.lower_mult[b];
            out.stationarity = out.stationarity.max(s.abs() / price_scale);
            let viol = (r.g[b] - gen.g_max).max(gen.g_min - r.g[b]).max(0.0);
            out.primal = out.primal.max(viol / load_scale);
            out.dual = out
                .dual
                .max((-r.upper_mult[b]).max(-r.lower_mult[b]).max(0.0) / price_scale);
            let cs = (r.upper_mult[b] * (gen.g_max - r.g[b]))
                .abs()
                .max((r.lower_mult[b] * (r.g[b] - gen.g_min)).abs());
            out.complementarity = out.complementarity.max(cs / (price_scale * load_scale));
        }
        // buses without a generator must have zero output
        for (b, gb) in r.g.iter().enumerate() {
            if self.network.generator_at(b).is_none() {
                out.primal = out.primal.max(gb.abs() / load_scale);
            }
        }
        let net: Vec<f64> = load.iter().zip(&r.g).map(|(l, g)| l - g).collect();
        let balance: f64 = net.iter().sum();
        out.primal = out.primal.max(balance.abs() / load_scale);
        let flows = self.flows(&net);
        for (i, (f, c)) in flows.iter().zip(&self.limits).enumerate() {
            let m = r.mu[i];
            out.dual = out.dual.max((-m).max(0.0) / price_scale);
            if c.is_finite() {
                out.primal = out.primal.max((f - c).max(0.0) / load_scale);
                out.complementarity = out
                    .complementarity
                    .max((m * (f - c)).abs() / (price_scale * load_scale));
            }
        }
        out
    }

    fn infeasibility_report(&self, d: &[f64]) -> String {
        let load: f64 = self.net_load(d).iter().sum();
        let gmax: f64 = self.network.generators.iter().map(|g| g.g_max).sum();
        let gmin: f64 = self.network.generators.iter().map(|g| g.g_min).sum();
        if load > gmax {
            format!("total load {load:.3} MWh exceeds generation capacity {gmax:.3} MWh")
        } else if load < gmin {
            format!("total load {load:.3} MWh is below minimum generation {gmin:.3} MWh")
        } else {
            format!("line limits cannot be met for total load {load:.3} MWh")
        }
    }

    /// Unconstrained-balance generator response to posted prices.
    pub fn generator_best_response(&self, prices: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.num_buses()];
        for gen in &self.network.generators {
            g[gen.bus] = gen.best_response(prices[gen.bus]);
        }
        g
    }

    /// True when some generation mix serves `d`.
    pub fn is_feasible(&self, d: &[f64]) -> bool {
        self.dispatch_qp(d).feasible_point().is_ok()
    }

    /// Checks every corner of the demand box plus a diagonal grid. The set of
    /// servable demands is a polyhedron, so corner feasibility implies the
    /// whole box is feasible; corners beyond `max_corners` are skipped and
    /// reported.
    pub fn validate_feasibility(&self, d_min: &[f64], d_max: &[f64]) -> Result<FeasibilityReport> {
        const MAX_VARYING: usize = 16;
        let n = self.num_buses();
        if d_min.len() != n || d_max.len() != n {
            return Err(Error::DimensionMismatch(
                "demand box must list every bus".into(),
            ));
        }
        if d_min.iter().zip(d_max).any(|(a, b)| !(0.0 <= *a && a <= b)) {
            return Err(Error::InvalidInput(
                "demand box needs 0 ≤ d_min ≤ d_max".into(),
            ));
        }
        let varying: Vec<usize> = (0..n).filter(|&i| d_max[i] > d_min[i]).collect();
        if varying.len() > MAX_VARYING {
            return Err(Error::InvalidInput(format!(
                "demand box varies on {} buses; at most {MAX_VARYING} supported",
                varying.len()
            )));
        }
        let mut report = FeasibilityReport::default();
        for mask in 0u64..(1u64 << varying.len()) {
            let mut d = d_min.to_vec();
            for (bit, &bus) in varying.iter().enumerate() {
                if mask >> bit & 1 == 1 {
                    d[bus] = d_max[bus];
                }
            }
            report.points_checked += 1;
            if !self.is_feasible(&d) {
                report.failures.push(d);
            }
        }
        for t in [0.25, 0.5, 0.75] {
            let d: Vec<f64> = d_min
                .iter()
                .zip(d_max)
                .map(|(a, b)| a + t * (b - a))
                .collect();
            report.points_checked += 1;
            if !self.is_feasible(&d) {
                report.failures.push(d);
            }
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeasibilityReport {
    pub points_checked: usize,
    pub failures: Vec<Vec<f64>>,
}

impl FeasibilityReport {
    pub fn is_feasible(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn into_result(self) -> Result<Self> {
        match self.failures.first() {
            None => Ok(self),
            Some(d) => Err(Error::Validation(format!(
                "demand box corner {d:?} cannot be served ({} of {} points infeasible)",
                self.failures.len(),
                self.points_checked
            ))),
        }
    }
}
