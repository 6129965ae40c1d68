//! Path-flow traffic and charge assignment.
//!
//! All solvers work on enumerated path sets and minimise a convex potential
//! over the product of per-class simplices `{f_q ⪰ 0, 1ᵀf_q = m_q}`:
//!
//! * CTAP (social optimum at fixed prices): `Σ λ_a s_a(λ_a) + pᵀMλ`
//! * user equilibrium: the Beckmann potential with costs `s + Mᵀp` plus tolls
//!
//! Electricity prices passed to this module are in $/MWh per bus, matching
//! [`crate::power`]; the demand map converts charged kWh to MWh.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::espp::{enumerate_feasible_paths, PathSet, VehicleClass};
use crate::graph::{ArcKind, ExtendedGraph};

/// Paths whose cost is within this relative distance of the class minimum
/// count as tied; ties go to the lowest path index.
pub const TIE_TOL: f64 = 1e-12;

/// Sparse `M`: one entry per charge-amount arc, in MWh per vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandMap {
    pub num_buses: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl DemandMap {
    pub fn from_graph(graph: &ExtendedGraph, num_buses: usize) -> Result<Self> {
        let mut entries = Vec::new();
        for arc in graph.arcs_of_kind(ArcKind::ChargeAmount) {
            let bus = arc.bus.expect("charge arcs always carry a bus");
            if bus >= num_buses {
                return Err(Error::Validation(format!(
                    "station at node {} maps to bus {bus}, but the grid has {num_buses} buses",
                    arc.base_node
                )));
            }
            entries.push((arc.id, bus, arc.charge_kwh() / 1000.0));
        }
        Ok(Self { num_buses, entries })
    }

    /// Dense `|buses| × |arcs|` copy of the map.
    pub fn to_dense(&self, num_arcs: usize) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.num_buses, num_arcs);
        for &(a, b, e) in &self.entries {
            m[(b, a)] = e;
        }
        m
    }

    /// `Mᵀp` in $ per vehicle on each arc.
    pub fn price_per_arc(&self, prices: &[f64], num_arcs: usize) -> Vec<f64> {
        let mut out = vec![0.0; num_arcs];
        for &(a, b, e) in &self.entries {
            out[a] = prices[b] * e;
        }
        out
    }
}

pub fn arc_flow_to_demand(map: &DemandMap, arc_flows: &[f64]) -> Vec<f64> {
    let mut d = vec![0.0; map.num_buses];
    for &(a, b, e) in &map.entries {
        d[b] += e * arc_flows[a];
    }
    d
}

pub fn flows_to_arc_flow(
    pathsets: &[PathSet],
    path_flows: &[Vec<f64>],
    num_arcs: usize,
) -> Result<Vec<f64>> {
    if pathsets.len() != path_flows.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} path sets but {} flow vectors",
            pathsets.len(),
            path_flows.len()
        )));
    }
    let mut lambda = vec![0.0; num_arcs];
    for (ps, f) in pathsets.iter().zip(path_flows) {
        if ps.len() != f.len() {
            return Err(Error::DimensionMismatch(format!(
                "class {} has {} paths but {} flows",
                ps.class,
                ps.len(),
                f.len()
            )));
        }
        for (path, &x) in ps.paths.iter().zip(f) {
            if x < 0.0 || x.is_nan() {
                return Err(Error::NegativeFlow(x));
            }
            for &a in &path.arcs {
                if a >= num_arcs {
                    return Err(Error::DimensionMismatch(format!("arc {a} out of range")));
                }
                lambda[a] += x;
            }
        }
    }
    Ok(lambda)
}

/// Marginal congestion tolls `γ σ_a λ_a`; zero on fixed-time arcs.
pub fn compute_marginal_tolls(graph: &ExtendedGraph, arc_flows: &[f64], gamma: f64) -> Vec<f64> {
    graph
        .arcs
        .iter()
        .map(|a| {
            if a.has_fixed_time() {
                0.0
            } else {
                gamma * a.latency_slope * arc_flows[a.id].max(0.0)
            }
        })
        .collect()
}

/// Transport side of a scenario: extended graph, classes and their paths.
#[derive(Debug, Clone)]
pub struct TransportModel {
    pub graph: ExtendedGraph,
    pub classes: Vec<VehicleClass>,
    pub pathsets: Vec<PathSet>,
    pub demand_map: DemandMap,
    /// Value of time, $/minute.
    pub gamma: f64,
}

impl TransportModel {
    pub fn new(
        graph: ExtendedGraph,
        classes: Vec<VehicleClass>,
        num_buses: usize,
        gamma: f64,
        max_paths: usize,
    ) -> Result<Self> {
        if !(gamma >= 0.0) {
            return Err(Error::Validation(
                "value of time must be nonnegative".into(),
            ));
        }
        for c in &classes {
            c.validate(graph.base.num_nodes())?;
        }
        let pathsets = classes
            .par_iter()
            .map(|c| enumerate_feasible_paths(&graph, c, max_paths))
            .collect::<Result<Vec<_>>>()?;
        let demand_map = DemandMap::from_graph(&graph, num_buses)?;
        Ok(Self {
            graph,
            classes,
            pathsets,
            demand_map,
            gamma,
        })
    }

    pub fn num_arcs(&self) -> usize {
        self.graph.num_arcs()
    }

    pub fn total_demand(&self) -> f64 {
        self.classes.iter().map(|c| c.demand_rate).sum()
    }

    /// `γ(T_a + σ_a λ_a)` plus base tolls, i.e. `s_a(λ)` without electricity.
    pub fn arc_costs(&self, arc_flows: &[f64]) -> Vec<f64> {
        self.graph
            .arcs
            .iter()
            .map(|a| {
                self.gamma * (a.free_flow_time + a.latency_slope * arc_flows[a.id]) + a.base_toll
            })
            .collect()
    }

    /// Transport cost `λᵀs(λ)` (time plus base tolls, no electricity bill).
    pub fn travel_cost(&self, arc_flows: &[f64]) -> f64 {
        self.arc_costs(arc_flows)
            .iter()
            .zip(arc_flows)
            .map(|(s, l)| s * l)
            .sum()
    }

    pub fn demand(&self, arc_flows: &[f64]) -> Vec<f64> {
        arc_flow_to_demand(&self.demand_map, arc_flows)
    }

    pub fn state_from_path_flows(&self, path_flows: Vec<Vec<f64>>) -> Result<FlowState> {
        let arc_flows = flows_to_arc_flow(&self.pathsets, &path_flows, self.num_arcs())?;
        let demand = self.demand(&arc_flows);
        Ok(FlowState {
            path_flows,
            arc_flows,
            demand,
        })
    }

    /// Path costs under per-arc costs `c`.
    pub fn path_costs(&self, arc_costs: &[f64]) -> Vec<Vec<f64>> {
        self.pathsets
            .iter()
            .map(|ps| {
                ps.paths
                    .iter()
                    .map(|p| p.arcs.iter().map(|&a| arc_costs[a]).sum())
                    .collect()
            })
            .collect()
    }

    fn check_prices(&self, prices: &[f64]) -> Result<()> {
        if prices.len() != self.demand_map.num_buses {
            return Err(Error::DimensionMismatch(format!(
                "{} prices for {} buses",
                prices.len(),
                self.demand_map.num_buses
            )));
        }
        for &(_, b, _) in &self.demand_map.entries {
            if !prices[b].is_finite() {
                return Err(Error::MissingPrice(b));
            }
        }
        Ok(())
    }

    /// CTAP potential at fixed prices ($/MWh per bus).
    pub fn ctap_potential(&self, prices: &[f64]) -> Result<AffinePotential> {
        self.check_prices(prices)?;
        let elec = self.demand_map.price_per_arc(prices, self.num_arcs());
        Ok(AffinePotential {
            linear: self
                .graph
                .arcs
                .iter()
                .map(|a| self.gamma * a.free_flow_time + a.base_toll + elec[a.id])
                .collect(),
            quadratic: self
                .graph
                .arcs
                .iter()
                .map(|a| 2.0 * self.gamma * a.latency_slope)
                .collect(),
        })
    }

    /// Beckmann potential for user equilibrium with imposed tolls.
    pub fn beckmann_potential(&self, prices: &[f64], tolls: &[f64]) -> Result<AffinePotential> {
        self.check_prices(prices)?;
        if tolls.len() != self.num_arcs() {
            return Err(Error::DimensionMismatch(format!(
                "{} tolls for {} arcs",
                tolls.len(),
                self.num_arcs()
            )));
        }
        let elec = self.demand_map.price_per_arc(prices, self.num_arcs());
        Ok(AffinePotential {
            linear: self
                .graph
                .arcs
                .iter()
                .map(|a| self.gamma * a.free_flow_time + a.base_toll + elec[a.id] + tolls[a.id])
                .collect(),
            quadratic: self
                .graph
                .arcs
                .iter()
                .map(|a| self.gamma * a.latency_slope)
                .collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub path_flows: Vec<Vec<f64>>,
    /// `λ`, vehicles per epoch on every extended arc.
    pub arc_flows: Vec<f64>,
    /// `d = Mλ`, MWh per epoch per bus.
    pub demand: Vec<f64>,
}

/// Convex objective over arc flows driven by the path-flow engine.
pub trait Potential {
    fn value(&self, arc_flows: &[f64]) -> Result<f64>;
    /// Per-arc derivative; path costs are sums over the path's arcs.
    fn gradient(&self, arc_flows: &[f64]) -> Result<Vec<f64>>;
    /// Diagonal curvature used to scale projection steps.
    fn curvature(&self, arc: usize, arc_flows: &[f64]) -> f64;
    /// Minimiser of `t ↦ value(λ + t·dir)` on `[0, t_max]`.
    fn line_search(&self, arc_flows: &[f64], direction: &[f64], t_max: f64) -> Result<f64>;
}

/// `Σ_a linear_a λ_a + ½ quadratic_a λ_a²`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePotential {
    pub linear: Vec<f64>,
    pub quadratic: Vec<f64>,
}

impl Potential for AffinePotential {
    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(x.iter()
            .zip(self.linear.iter().zip(&self.quadratic))
            .map(|(l, (a, b))| a * l + 0.5 * b * l * l)
            .sum())
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(x.iter()
            .zip(self.linear.iter().zip(&self.quadratic))
            .map(|(l, (a, b))| a + b * l)
            .collect())
    }

    fn curvature(&self, arc: usize, _: &[f64]) -> f64 {
        self.quadratic[arc]
    }

    fn line_search(&self, x: &[f64], dir: &[f64], t_max: f64) -> Result<f64> {
        let g = self.gradient(x)?;
        let slope: f64 = g.iter().zip(dir).map(|(a, b)| a * b).sum();
        let curv: f64 = dir
            .iter()
            .zip(&self.quadratic)
            .map(|(d, q)| q * d * d)
            .sum();
        if slope >= 0.0 {
            return Ok(0.0);
        }
        if curv <= 0.0 {
            return Ok(t_max);
        }
        Ok((-slope / curv).min(t_max))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    GradientProjection,
    FrankWolfe,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Relative optimality gap target.
    pub tol: f64,
    pub max_iters: usize,
    pub method: Method,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iters: 10_000,
            method: Method::GradientProjection,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub relative_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub state: FlowState,
    pub objective: f64,
    pub relative_gap: f64,
    /// Largest relative excess of a used path's cost over its class minimum.
    pub max_used_excess: f64,
    pub iterations: usize,
    pub trace: Vec<TraceRow>,
}

fn best_path(costs: &[f64]) -> usize {
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let thresh = min + TIE_TOL * (1.0 + min.abs());
    costs.iter().position(|&c| c <= thresh).unwrap_or(0)
}

struct GapInfo {
    relative_gap: f64,
    max_used_excess: f64,
}

fn gap_info(model: &TransportModel, flows: &[Vec<f64>], costs: &[Vec<f64>]) -> GapInfo {
    let mut total = 0.0;
    let mut lower = 0.0;
    let mut excess = 0.0_f64;
    for ((cls, f), c) in model.classes.iter().zip(flows).zip(costs) {
        let min = c.iter().copied().fold(f64::INFINITY, f64::min);
        let used_tol = 1e-9 * cls.demand_rate.max(1.0);
        for (fk, ck) in f.iter().zip(c) {
            total += fk * ck;
            if *fk > used_tol {
                excess = excess.max((ck - min) / (1.0 + min.abs()));
            }
        }
        lower += cls.demand_rate * min;
    }
    let diff = (total - lower).max(0.0);
    let relative_gap = if diff == 0.0 {
        0.0
    } else {
        diff / total.abs().max(f64::MIN_POSITIVE)
    };
    GapInfo {
        relative_gap,
        max_used_excess: excess,
    }
}

fn all_or_nothing(model: &TransportModel, costs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    model
        .classes
        .iter()
        .zip(costs)
        .map(|(cls, c)| {
            let mut f = vec![0.0; c.len()];
            f[best_path(c)] = cls.demand_rate;
            f
        })
        .collect()
}

/// Keeps `1ᵀf_q = m_q` exact by absorbing rounding into the best path.
fn restore_conservation(f: &mut [f64], demand: f64, best: usize) {
    for x in f.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    let others: f64 = f
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != best)
        .map(|(_, x)| x)
        .sum();
    f[best] = (demand - others).max(0.0);
}

fn path_delta(model: &TransportModel, q: usize, df: &[f64]) -> Vec<f64> {
    let mut d = vec![0.0; model.num_arcs()];
    for (path, &x) in model.pathsets[q].paths.iter().zip(df) {
        if x != 0.0 {
            for &a in &path.arcs {
                d[a] += x;
            }
        }
    }
    d
}

/// Minimises `potential` over path flows, starting from `init` or an
/// all-or-nothing assignment at zero flow.
pub fn minimize<P: Potential>(
    model: &TransportModel,
    potential: &P,
    init: Option<Vec<Vec<f64>>>,
    opts: &SolveOptions,
) -> Result<Assignment> {
    if model
        .pathsets
        .iter()
        .zip(&model.classes)
        .any(|(ps, c)| ps.is_empty() && c.demand_rate > 0.0)
    {
        return Err(Error::EmptyPathSet);
    }
    let nq = model.classes.len();
    let mut flows = match init {
        Some(f) => {
            let s = model.state_from_path_flows(f)?;
            s.path_flows
        }
        None => {
            let zero = vec![0.0; model.num_arcs()];
            let costs = model.path_costs(&potential.gradient(&zero)?);
            all_or_nothing(model, &costs)
        }
    };
    let mut trace = Vec::new();
    let mut lambda = flows_to_arc_flow(&model.pathsets, &flows, model.num_arcs())?;

    for iter in 0..=opts.max_iters {
        let grad = potential.gradient(&lambda)?;
        let costs = model.path_costs(&grad);
        let info = gap_info(model, &flows, &costs);
        let objective = potential.value(&lambda)?;
        trace.push(TraceRow {
            iteration: iter,
            objective,
            relative_gap: info.relative_gap,
        });
        if info.relative_gap <= opts.tol {
            let state = model.state_from_path_flows(flows)?;
            return Ok(Assignment {
                state,
                objective,
                relative_gap: info.relative_gap,
                max_used_excess: info.max_used_excess,
                iterations: iter,
                trace,
            });
        }
        if iter == opts.max_iters {
            return Err(Error::NonConvergence {
                solver: "traffic assignment",
                iterations: iter,
                residual: info.relative_gap,
            });
        }
        match opts.method {
            Method::FrankWolfe => {
                let target = all_or_nothing(model, &costs);
                let dir_paths: Vec<Vec<f64>> = target
                    .iter()
                    .zip(&flows)
                    .map(|(t, f)| t.iter().zip(f).map(|(a, b)| a - b).collect())
                    .collect();
                let mut dir = vec![0.0; model.num_arcs()];
                for q in 0..nq {
                    for (d, x) in dir.iter_mut().zip(path_delta(model, q, &dir_paths[q])) {
                        *d += x;
                    }
                }
                let t = potential.line_search(&lambda, &dir, 1.0)?;
                for (q, f) in flows.iter_mut().enumerate() {
                    for (x, d) in f.iter_mut().zip(&dir_paths[q]) {
                        *x += t * d;
                    }
                    let best = best_path(&costs[q]);
                    if t == 1.0 {
                        f.clone_from(&target[q]);
                    } else {
                        restore_conservation(f, model.classes[q].demand_rate, best);
                    }
                }
            }
            Method::GradientProjection => {
                for q in 0..nq {
                    // Gauss-Seidel: refresh costs after each class moves
                    let grad = if q == 0 {
                        grad.clone()
                    } else {
                        potential.gradient(&lambda)?
                    };
                    let c: Vec<f64> = model.pathsets[q]
                        .paths
                        .iter()
                        .map(|p| p.arcs.iter().map(|&a| grad[a]).sum())
                        .collect();
                    let b = best_path(&c);
                    let mut df = vec![0.0; c.len()];
                    let best_arcs = &model.pathsets[q].paths[b].arcs;
                    for (k, path) in model.pathsets[q].paths.iter().enumerate() {
                        let fk = flows[q][k];
                        if k == b || fk <= 0.0 || c[k] <= c[b] {
                            continue;
                        }
                        let mut h = 0.0;
                        for &a in path.arcs.iter().filter(|a| !best_arcs.contains(a)) {
                            h += potential.curvature(a, &lambda);
                        }
                        for &a in best_arcs.iter().filter(|a| !path.arcs.contains(a)) {
                            h += potential.curvature(a, &lambda);
                        }
                        let shift = if h > 0.0 {
                            ((c[k] - c[b]) / h).min(fk)
                        } else {
                            fk
                        };
                        df[k] = -shift;
                        df[b] += shift;
                    }
                    if df.iter().all(|x| *x == 0.0) {
                        continue;
                    }
                    let dir = path_delta(model, q, &df);
                    let t = potential.line_search(&lambda, &dir, 1.0)?;
                    if t <= 0.0 {
                        continue;
                    }
                    for (k, x) in flows[q].iter_mut().enumerate() {
                        if t == 1.0 && df[k] < 0.0 && -df[k] == *x {
                            *x = 0.0;
                        } else {
                            *x += t * df[k];
                        }
                    }
                    restore_conservation(&mut flows[q], model.classes[q].demand_rate, b);
                    lambda = flows_to_arc_flow(&model.pathsets, &flows, model.num_arcs())?;
                }
            }
        }
        lambda = flows_to_arc_flow(&model.pathsets, &flows, model.num_arcs())?;
    }
    unreachable!("loop returns on the final iteration")
}

/// Social-optimum charge and traffic assignment at fixed prices ($/MWh).
pub fn solve_ctap(
    model: &TransportModel,
    prices: &[f64],
    opts: &SolveOptions,
) -> Result<Assignment> {
    let pot = model.ctap_potential(prices)?;
    minimize(model, &pot, None, opts)
}

/// Wardrop user equilibrium with imposed per-arc tolls ($ per vehicle).
pub fn solve_user_equilibrium(
    model: &TransportModel,
    prices: &[f64],
    tolls: &[f64],
    opts: &SolveOptions,
) -> Result<Assignment> {
    let pot = model.beckmann_potential(prices, tolls)?;
    minimize(model, &pot, None, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_extended_graph, BaseGraph, ChargingStation, RoadArc};
    use approx::assert_abs_diff_eq;
    use std::collections::BTreeSet;

    /// Two parallel roads with `s₁ = 1 + x`, `s₂ = 2` when γ = 1.
    fn pigou(demand: f64) -> TransportModel {
        let base = BaseGraph::new(
            vec!["o".into(), "d".into()],
            vec![
                RoadArc::new(0, 1, 1.0, 1.0, 0.0),
                RoadArc::new(0, 1, 2.0, 0.0, 0.0),
            ],
        );
        let g = build_extended_graph(&base, &[], &BTreeSet::new()).unwrap();
        TransportModel::new(g, vec![VehicleClass::icev(0, 0, 1, demand)], 1, 1.0, 100).unwrap()
    }

    fn tight() -> SolveOptions {
        SolveOptions {
            tol: 1e-12,
            ..Default::default()
        }
    }

    #[test]
    fn pigou_social_optimum_splits_evenly() {
        let m = pigou(1.0);
        let a = solve_ctap(&m, &[0.0], &tight()).unwrap();
        assert_abs_diff_eq!(a.state.arc_flows[0], 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(a.state.arc_flows[1], 0.5, epsilon = 1e-9);
    }

    #[test]
    fn pigou_equilibrium_uses_only_the_variable_road() {
        let m = pigou(1.0);
        let a = solve_user_equilibrium(&m, &[0.0], &[0.0, 0.0], &tight()).unwrap();
        assert_abs_diff_eq!(a.state.arc_flows[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(a.state.arc_flows[1], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn pigou_marginal_tolls_restore_optimum() {
        let m = pigou(1.0);
        let so = solve_ctap(&m, &[0.0], &tight()).unwrap();
        let tolls = compute_marginal_tolls(&m.graph, &so.state.arc_flows, m.gamma);
        assert_abs_diff_eq!(tolls[0], 0.5, epsilon = 1e-9);
        assert_eq!(tolls[1], 0.0);
        let ue = solve_user_equilibrium(&m, &[0.0], &tolls, &tight()).unwrap();
        assert_abs_diff_eq!(ue.state.arc_flows[0], 0.5, epsilon = 1e-9);
    }

    #[test]
    fn frank_wolfe_agrees_and_descends() {
        let m = pigou(1.0);
        let opts = SolveOptions {
            tol: 1e-8,
            method: Method::FrankWolfe,
            max_iters: 100_000,
        };
        let a = solve_ctap(&m, &[0.0], &opts).unwrap();
        assert_abs_diff_eq!(a.state.arc_flows[0], 0.5, epsilon = 1e-4);
        for w in a.trace.windows(2) {
            assert!(w[1].objective <= w[0].objective + 1e-12);
        }
    }

    #[test]
    fn identical_parallel_arcs_split_evenly() {
        let base = BaseGraph::new(
            vec!["o".into(), "d".into()],
            vec![
                RoadArc::new(0, 1, 10.0, 1e-4, 0.0),
                RoadArc::new(0, 1, 10.0, 1e-4, 0.0),
            ],
        );
        let g = build_extended_graph(&base, &[], &BTreeSet::new()).unwrap();
        let m =
            TransportModel::new(g, vec![VehicleClass::icev(0, 0, 1, 100.0)], 1, 1e-3, 100).unwrap();
        let a = solve_ctap(&m, &[0.0], &tight()).unwrap();
        assert_abs_diff_eq!(a.state.arc_flows[0], 50.0, epsilon = 1e-6);
        assert_abs_diff_eq!(
            a.state.path_flows[0].iter().sum::<f64>(),
            100.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn zero_demand_gives_zero_flows() {
        let m = pigou(0.0);
        let a = solve_user_equilibrium(&m, &[0.0], &[0.0, 0.0], &tight()).unwrap();
        assert!(a.state.arc_flows.iter().all(|x| *x == 0.0));
        assert_eq!(a.objective, 0.0);
    }

    #[test]
    fn demand_map_examples() {
        let base = BaseGraph::new(
            vec!["o".into(), "s".into(), "d".into()],
            vec![
                RoadArc::new(0, 1, 10.0, 0.0, 1.0),
                RoadArc::new(1, 2, 10.0, 0.0, 1.0),
            ],
        );
        let g = build_extended_graph(
            &base,
            &[ChargingStation::fast(1, 0, 0.2, vec![1.0, 2.0, 3.0])],
            &BTreeSet::new(),
        )
        .unwrap();
        let map = DemandMap::from_graph(&g, 1).unwrap();
        let charge = &g.station_arcs[0].charge;
        let mut lambda = vec![0.0; g.num_arcs()];
        assert_eq!(arc_flow_to_demand(&map, &lambda), vec![0.0]);
        lambda[charge[0]] = 10.0;
        lambda[charge[1]] = 20.0;
        assert_abs_diff_eq!(arc_flow_to_demand(&map, &lambda)[0], 0.05, epsilon = 1e-15);
        let mut lambda = vec![0.0; g.num_arcs()];
        lambda[charge[2]] = 7936.0;
        assert_abs_diff_eq!(
            arc_flow_to_demand(&map, &lambda)[0],
            23.808,
            epsilon = 1e-12
        );
        assert!(DemandMap::from_graph(&g, 0).is_err());
    }

    #[test]
    fn toll_formula() {
        let m = pigou(1.0);
        let mut lambda = vec![0.0; 2];
        assert_eq!(
            compute_marginal_tolls(&m.graph, &lambda, 1e-3),
            vec![0.0, 0.0]
        );
        lambda[0] = 7533.0;
        let mut g = m.graph.clone();
        g.arcs[0].latency_slope = 1e-4;
        assert_abs_diff_eq!(
            compute_marginal_tolls(&g, &lambda, 1e-3)[0],
            7.533e-4,
            epsilon = 1e-15
        );
    }

    #[test]
    fn flows_to_arc_flow_checks_dimensions() {
        let m = pigou(1.0);
        assert!(flows_to_arc_flow(&m.pathsets, &[], 2).is_err());
        assert!(flows_to_arc_flow(&m.pathsets, &[vec![1.0]], 2).is_err());
        assert!(flows_to_arc_flow(&m.pathsets, &[vec![-1.0, 0.0]], 2).is_err());
        let l = flows_to_arc_flow(&m.pathsets, &[vec![3.0, 4.0]], 2).unwrap();
        assert_eq!(l, vec![3.0, 4.0]);
    }

    #[test]
    fn non_convergence_is_reported() {
        let m = pigou(1.0);
        let opts = SolveOptions {
            tol: 0.0,
            method: Method::FrankWolfe,
            max_iters: 0,
        };
        assert!(matches!(
            solve_ctap(&m, &[0.0], &opts),
            Err(Error::NonConvergence { .. })
        ));
    }
}
