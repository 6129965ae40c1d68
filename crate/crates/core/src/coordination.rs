//! Operating schemes that couple the traffic operator (ITSO) and the power
//! operator (IPSO): the joint social optimum, myopic greedy pricing, and
//! dual decomposition.

use std::collections::HashMap;

use crate::assignment::{
    minimize, solve_ctap, Assignment, FlowState, Potential, SolveOptions, TransportModel,
};
use crate::error::{Error, Result};
use crate::power::{DispatchResult, GridModel};

/// Joint objective `λᵀs(λ) + G(Mλ)` where `G` is the least dispatch cost.
/// Its gradient on charge arcs is the LMP at the induced demand.
pub struct JointPotential<'a> {
    pub transport: &'a TransportModel,
    pub grid: &'a GridModel,
}

impl JointPotential<'_> {
    fn dispatch(&self, arc_flows: &[f64]) -> Result<DispatchResult> {
        self.grid
            .economic_dispatch(&self.transport.demand(arc_flows))
    }

    fn directional_derivative(&self, x: &[f64], dir: &[f64], t: f64) -> Result<f64> {
        let y: Vec<f64> = x
            .iter()
            .zip(dir)
            .map(|(a, b)| (a + t * b).max(0.0))
            .collect();
        let g = self.gradient(&y)?;
        Ok(g.iter().zip(dir).map(|(a, b)| a * b).sum())
    }
}

impl Potential for JointPotential<'_> {
    fn value(&self, arc_flows: &[f64]) -> Result<f64> {
        Ok(self.transport.travel_cost(arc_flows) + self.dispatch(arc_flows)?.cost)
    }

    fn gradient(&self, arc_flows: &[f64]) -> Result<Vec<f64>> {
        let t = self.transport;
        let prices = self.dispatch(arc_flows)?.prices;
        let elec = t.demand_map.price_per_arc(&prices, t.num_arcs());
        Ok(t.graph
            .arcs
            .iter()
            .map(|a| {
                t.gamma * (a.free_flow_time + 2.0 * a.latency_slope * arc_flows[a.id])
                    + a.base_toll
                    + elec[a.id]
            })
            .collect())
    }

    fn curvature(&self, arc: usize, _: &[f64]) -> f64 {
        2.0 * self.transport.gamma * self.transport.graph.arcs[arc].latency_slope
    }

    /// Regula falsi (Illinois variant) on the directional derivative, which
    /// is monotone and piecewise affine in the step.
    fn line_search(&self, x: &[f64], dir: &[f64], t_max: f64) -> Result<f64> {
        let d0 = self.directional_derivative(x, dir, 0.0)?;
        if d0 >= 0.0 {
            return Ok(0.0);
        }
        let d1 = self.directional_derivative(x, dir, t_max)?;
        if d1 <= 0.0 {
            return Ok(t_max);
        }
        let (mut lo, mut hi, mut flo, mut fhi) = (0.0, t_max, d0, d1);
        let mut side = 0i8;
        for _ in 0..200 {
            let t = (lo * fhi - hi * flo) / (fhi - flo);
            let t = if t.is_finite() && t > lo && t < hi {
                t
            } else {
                0.5 * (lo + hi)
            };
            let ft = self.directional_derivative(x, dir, t)?;
            if ft == 0.0 || hi - lo <= 1e-15 * t_max {
                return Ok(t);
            }
            if ft < 0.0 {
                lo = t;
                flo = ft;
                if side == -1 {
                    fhi *= 0.5;
                }
                side = -1;
            } else {
                hi = t;
                fhi = ft;
                if side == 1 {
                    flo *= 0.5;
                }
                side = 1;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SocialOptimum {
    pub state: FlowState,
    pub dispatch: DispatchResult,
    pub travel_cost: f64,
    pub generation_cost: f64,
    /// `J* = λᵀs(λ) + 1ᵀc(g)`.
    pub objective: f64,
    pub relative_gap: f64,
    pub iterations: usize,
}

impl SocialOptimum {
    pub fn prices(&self) -> &[f64] {
        &self.dispatch.prices
    }
}

/// Joint minimiser of travel plus generation cost. Solved in the reduced
/// space of path flows with the dispatch as an inner problem; the duals of
/// the coupling constraints are the dispatch duals at the optimum.
pub fn solve_social_optimum(
    transport: &TransportModel,
    grid: &GridModel,
    opts: &SolveOptions,
) -> Result<SocialOptimum> {
    let pot = JointPotential { transport, grid };
    let Assignment {
        state,
        relative_gap,
        iterations,
        ..
    } = minimize(transport, &pot, None, opts)?;
    let dispatch = grid.economic_dispatch(&state.demand)?;
    let travel_cost = transport.travel_cost(&state.arc_flows);
    let generation_cost = dispatch.cost;
    Ok(SocialOptimum {
        objective: travel_cost + generation_cost,
        state,
        dispatch,
        travel_cost,
        generation_cost,
        relative_gap,
        iterations,
    })
}

/// Balance and line-flow infeasibility of a (demand, generation) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Infeasibility {
    /// `|1ᵀ(d+u−g)|`.
    pub balance: f64,
    /// `H(d+u−g) − c` per directed line.
    pub flow: Vec<f64>,
}

impl Infeasibility {
    pub fn flow_excess(&self) -> impl Iterator<Item = f64> + '_ {
        self.flow.iter().map(|w| w.max(0.0))
    }

    /// `‖(a, w⁺)‖₂`.
    pub fn norm2(&self) -> f64 {
        (self.balance * self.balance + self.flow_excess().map(|w| w * w).sum::<f64>()).sqrt()
    }

    /// `‖(a, w⁺)‖∞`.
    pub fn norm_inf(&self) -> f64 {
        self.flow_excess().fold(self.balance, f64::max)
    }
}

pub fn primal_infeasibility(grid: &GridModel, demand: &[f64], generation: &[f64]) -> Infeasibility {
    let eta: Vec<f64> = demand
        .iter()
        .zip(&grid.network.baseload)
        .zip(generation)
        .map(|((d, u), g)| d + u - g)
        .collect();
    let balance = eta.iter().sum::<f64>().abs();
    let flow = grid
        .flows(&eta)
        .iter()
        .zip(&grid.limits)
        .map(|(f, c)| f - c)
        .collect();
    Infeasibility { balance, flow }
}

/// `3D / (α √k)`, the uniform bound on `(a_k, w_k)` under a constant step.
pub fn infeasibility_bound(k: usize, alpha: f64, dual_distance: f64) -> Result<f64> {
    if k == 0 {
        return Err(Error::ZeroIteration);
    }
    if !(alpha > 0.0) || !(dual_distance >= 0.0) {
        return Err(Error::InvalidInput("bound needs α > 0 and D ≥ 0".into()));
    }
    Ok(3.0 * dual_distance / (alpha * (k as f64).sqrt()))
}

/// One iteration of a coordination scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub k: usize,
    pub prices: Vec<f64>,
    pub gamma_bal: f64,
    pub mu: Vec<f64>,
    pub arc_flows: Vec<f64>,
    pub demand: Vec<f64>,
    pub generation: Vec<f64>,
    pub infeasibility: Infeasibility,
    /// Travel cost `λᵀs(λ)`.
    pub itso_objective: f64,
    /// Generation cost `1ᵀc(g)`.
    pub ipso_objective: f64,
    pub combined_objective: f64,
    /// Lagrangian value; only set by dual decomposition.
    pub dual_objective: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CoordinationTrace {
    pub rows: Vec<TraceRow>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreedyOptions {
    /// Uniform starting price, $/MWh.
    pub initial_price: f64,
    pub max_iters: usize,
    pub assignment: SolveOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cycle {
    pub period: usize,
    /// First iteration of the repeating block.
    pub start: usize,
    /// Combined objectives of the phases, in iteration order.
    pub phase_objectives: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GreedyOutcome {
    pub trace: CoordinationTrace,
    pub cycle: Option<Cycle>,
    /// Iteration at which the IPSO could not serve the realised demand.
    pub infeasible_at: Option<(usize, String)>,
}

const MAX_PERIOD: usize = 8;

fn quantize(v: &[f64], step: f64) -> Vec<i64> {
    v.iter().map(|x| (x / step).round() as i64).collect()
}

fn shedding_reason(e: Error) -> Result<String> {
    match e {
        Error::DispatchInfeasible(msg) => Ok(msg),
        other => Err(other),
    }
}

/// Myopic pricing: the IPSO prices lagged demand, the ITSO reacts to the
/// posted prices. Stops at the first repeated quantised (p, d) state.
pub fn run_greedy_pricing(
    transport: &TransportModel,
    grid: &GridModel,
    opts: &GreedyOptions,
) -> Result<GreedyOutcome> {
    let n = grid.num_buses();
    let mut prices = vec![opts.initial_price; n];
    let mut gamma_bal = opts.initial_price;
    let mut mu = vec![0.0; grid.num_directed_lines()];
    let mut rows = Vec::new();
    let mut seen: HashMap<(Vec<i64>, Vec<i64>), usize> = HashMap::new();
    for k in 0..=opts.max_iters {
        if k > 0 {
            let prev: &TraceRow = rows.last().expect("row k-1 exists");
            match grid.economic_dispatch(&prev.demand) {
                Ok(r) => {
                    prices = r.prices;
                    gamma_bal = r.gamma_bal;
                    mu = r.mu;
                }
                Err(e) => {
                    return Ok(GreedyOutcome {
                        trace: CoordinationTrace { rows },
                        cycle: None,
                        infeasible_at: Some((k, shedding_reason(e)?)),
                    })
                }
            }
        }
        let a = solve_ctap(transport, &prices, &opts.assignment)?;
        let realised = match grid.economic_dispatch(&a.state.demand) {
            Ok(r) => r,
            Err(e) => {
                return Ok(GreedyOutcome {
                    trace: CoordinationTrace { rows },
                    cycle: None,
                    infeasible_at: Some((k, shedding_reason(e)?)),
                })
            }
        };
        let itso = transport.travel_cost(&a.state.arc_flows);
        let key = (quantize(&prices, 1e-4), quantize(&a.state.demand, 1e-3));
        rows.push(TraceRow {
            k,
            prices: prices.clone(),
            gamma_bal,
            mu: mu.clone(),
            infeasibility: primal_infeasibility(grid, &a.state.demand, &realised.g),
            arc_flows: a.state.arc_flows,
            demand: a.state.demand,
            generation: realised.g,
            itso_objective: itso,
            ipso_objective: realised.cost,
            combined_objective: itso + realised.cost,
            dual_objective: None,
        });
        if let Some(&first) = seen.get(&key) {
            let period = k - first;
            if period <= MAX_PERIOD {
                let phase_objectives = rows[first..k]
                    .iter()
                    .map(|r| r.combined_objective)
                    .collect();
                return Ok(GreedyOutcome {
                    trace: CoordinationTrace { rows },
                    cycle: Some(Cycle {
                        period,
                        start: first,
                        phase_objectives,
                    }),
                    infeasible_at: None,
                });
            }
        }
        seen.insert(key, k);
    }
    Ok(GreedyOutcome {
        trace: CoordinationTrace { rows },
        cycle: None,
        infeasible_at: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualOptions {
    /// Step size in the scenario's per-unit convention.
    pub alpha: f64,
    /// Power base for the per-unit step; the step applied to $/MWh duals
    /// from MWh residuals is `alpha / base²`.
    pub base_mva: f64,
    pub gamma0: f64,
    /// Starting line duals; zero when `None`.
    pub mu0: Option<Vec<f64>>,
    pub max_iters: usize,
    /// Early stop when the combined objective is within `tol·|J*|` of
    /// `reference` and the infeasibility is below `tol` times total load.
    pub tol: f64,
    pub reference: Option<f64>,
    /// Dual norm beyond which the run is declared divergent.
    pub divergence_limit: f64,
    pub assignment: SolveOptions,
}

impl DualOptions {
    pub fn effective_step(&self) -> f64 {
        self.alpha / (self.base_mva * self.base_mva)
    }
}

/// Lagrangian of the joint problem at duals `(γ, μ)` for primal `(λ, g)`.
pub fn lagrangian(
    transport: &TransportModel,
    grid: &GridModel,
    arc_flows: &[f64],
    generation: &[f64],
    gamma_bal: f64,
    mu: &[f64],
) -> f64 {
    let d = transport.demand(arc_flows);
    let inf = primal_infeasibility(grid, &d, generation);
    let signed_balance: f64 = d
        .iter()
        .zip(&grid.network.baseload)
        .zip(generation)
        .map(|((d, u), g)| d + u - g)
        .sum();
    transport.travel_cost(arc_flows)
        + grid.network.total_cost(generation)
        + gamma_bal * signed_balance
        + mu.iter().zip(&inf.flow).map(|(m, w)| m * w).sum::<f64>()
}

/// Projected-subgradient price coordination with a constant step.
pub fn run_dual_decomposition(
    transport: &TransportModel,
    grid: &GridModel,
    opts: &DualOptions,
) -> Result<CoordinationTrace> {
    if !(opts.alpha > 0.0) || !(opts.base_mva > 0.0) {
        return Err(Error::InvalidInput(
            "dual decomposition needs α > 0 and a positive base".into(),
        ));
    }
    let step = opts.effective_step();
    let m = grid.num_directed_lines();
    let mut gamma = opts.gamma0;
    let mut mu = opts.mu0.clone().unwrap_or_else(|| vec![0.0; m]);
    if mu.len() != m || mu.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidInput(format!(
            "μ⁰ needs {m} nonnegative entries"
        )));
    }
    let total_base: f64 = grid.network.baseload.iter().sum();
    let mut rows = Vec::with_capacity(opts.max_iters + 1);
    for k in 0..=opts.max_iters {
        let norm = (gamma * gamma + mu.iter().map(|v| v * v).sum::<f64>()).sqrt();
        if !(norm <= opts.divergence_limit) {
            return Err(Error::Divergence {
                norm,
                limit: opts.divergence_limit,
            });
        }
        let prices = grid.lmp(gamma, &mu);
        let a = solve_ctap(transport, &prices, &opts.assignment)?;
        let g = grid.generator_best_response(&prices);
        let inf = primal_infeasibility(grid, &a.state.demand, &g);
        let itso = transport.travel_cost(&a.state.arc_flows);
        let ipso = grid.network.total_cost(&g);
        let dual_objective = lagrangian(transport, grid, &a.state.arc_flows, &g, gamma, &mu);
        let signed_balance: f64 = a
            .state
            .demand
            .iter()
            .zip(&grid.network.baseload)
            .zip(&g)
            .map(|((d, u), g)| d + u - g)
            .sum();
        let row = TraceRow {
            k,
            prices,
            gamma_bal: gamma,
            mu: mu.clone(),
            arc_flows: a.state.arc_flows,
            demand: a.state.demand,
            generation: g,
            infeasibility: inf,
            itso_objective: itso,
            ipso_objective: ipso,
            combined_objective: itso + ipso,
            dual_objective: Some(dual_objective),
        };
        let done = match opts.reference {
            Some(j) => {
                (row.combined_objective - j).abs() <= opts.tol * j.abs()
                    && row.infeasibility.norm_inf() <= opts.tol * (1.0 + total_base)
            }
            None => false,
        };
        gamma += step * signed_balance;
        for (mv, w) in mu.iter_mut().zip(&row.infeasibility.flow) {
            *mv = (*mv + step * w).max(0.0);
        }
        rows.push(row);
        if done {
            break;
        }
    }
    Ok(CoordinationTrace { rows })
}

/// Least-squares slope of `ln y` against `ln k` over rows with `k ≥ 1` and
/// `y > 0`.
pub fn log_log_slope(points: impl IntoIterator<Item = (usize, f64)>) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .into_iter()
        .filter(|(k, y)| *k >= 1 && *y > 0.0)
        .map(|(k, y)| ((k as f64).ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::espp::VehicleClass;
    use crate::graph::{build_extended_graph, BaseGraph, ChargingStation, RoadArc};
    use crate::power::{Generator, Line, PowerNetwork};
    use approx::assert_abs_diff_eq;
    use std::collections::BTreeSet;

    fn grid(limit: f64) -> GridModel {
        let gen = |bus, a, b| Generator {
            bus,
            quadratic: a,
            linear: b,
            constant: 0.0,
            g_min: 0.0,
            g_max: 500.0,
        };
        GridModel::new(PowerNetwork {
            bus_names: vec!["1".into(), "2".into()],
            lines: vec![Line::symmetric(0, 1, 10.0, limit)],
            generators: vec![gen(0, 0.1, 5.0), gen(1, 0.2, 20.0)],
            baseload: vec![10.0, 50.0],
            slack: 0,
        })
        .unwrap()
    }

    /// One class forced through a single station with a single option.
    fn single_path_transport() -> TransportModel {
        let base = BaseGraph::new(
            vec!["o".into(), "s".into(), "d".into()],
            vec![
                RoadArc::new(0, 1, 10.0, 1e-4, 3.0),
                RoadArc::new(1, 2, 10.0, 1e-4, 3.0),
            ],
        );
        let g = build_extended_graph(
            &base,
            &[ChargingStation::fast(1, 1, 0.2, vec![3.0])],
            &BTreeSet::new(),
        )
        .unwrap();
        TransportModel::new(
            g,
            vec![VehicleClass::ev(0, 0, 2, 1000.0, 3.0, 6.0)],
            2,
            1e-3,
            100,
        )
        .unwrap()
    }

    #[test]
    fn decoupled_social_optimum() {
        let t = single_path_transport();
        assert_eq!(t.pathsets[0].len(), 1);
        let gm = grid(1000.0);
        let so = solve_social_optimum(&t, &gm, &SolveOptions::default()).unwrap();
        let d = t.demand(&so.state.arc_flows);
        assert_abs_diff_eq!(d[1], 3.0, epsilon = 1e-12);
        let r = gm.economic_dispatch(&d).unwrap();
        assert_abs_diff_eq!(
            so.objective,
            t.travel_cost(&so.state.arc_flows) + r.cost,
            epsilon = 1e-9
        );
    }

    #[test]
    fn greedy_fixed_point_for_price_insensitive_demand() {
        let t = single_path_transport();
        let gm = grid(1000.0);
        let out = run_greedy_pricing(
            &t,
            &gm,
            &GreedyOptions {
                initial_price: 50.0,
                max_iters: 10,
                assignment: SolveOptions::default(),
            },
        )
        .unwrap();
        let c = out.cycle.unwrap();
        assert_eq!(c.period, 1);
        assert!(out.trace.rows.len() <= 3);
    }

    #[test]
    fn greedy_reports_shedding() {
        let mut t = single_path_transport();
        t.classes[0].demand_rate = 1e6;
        let out = run_greedy_pricing(
            &t,
            &grid(1000.0),
            &GreedyOptions {
                initial_price: 50.0,
                max_iters: 10,
                assignment: SolveOptions::default(),
            },
        )
        .unwrap();
        assert_eq!(out.infeasible_at.as_ref().map(|x| x.0), Some(0));
    }

    #[test]
    fn infeasibility_examples() {
        let gm = grid(1000.0);
        let inf = primal_infeasibility(&gm, &[0.0, 0.0], &[30.0, 30.0]);
        assert_eq!(inf.balance, 0.0);
        assert!(inf.flow.iter().all(|w| *w <= 0.0));
        let inf = primal_infeasibility(&gm, &[0.0, 0.0], &[30.0, 28.0]);
        assert_abs_diff_eq!(inf.balance, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn bound_examples() {
        assert_eq!(infeasibility_bound(7, 20.0, 0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(
            infeasibility_bound(100, 20.0, 40.0).unwrap(),
            0.6,
            epsilon = 1e-15
        );
        let b1 = infeasibility_bound(9, 2.0, 5.0).unwrap();
        let b4 = infeasibility_bound(36, 2.0, 5.0).unwrap();
        assert_abs_diff_eq!(b4, 0.5 * b1, epsilon = 1e-15);
        assert_eq!(infeasibility_bound(0, 1.0, 1.0), Err(Error::ZeroIteration));
    }

    #[test]
    fn first_dual_iterate_posts_uniform_prices() {
        let t = single_path_transport();
        let gm = grid(1000.0);
        let tr = run_dual_decomposition(
            &t,
            &gm,
            &DualOptions {
                alpha: 20.0,
                base_mva: 100.0,
                gamma0: 57.5,
                mu0: None,
                max_iters: 3,
                tol: 0.0,
                reference: None,
                divergence_limit: 1e6,
                assignment: SolveOptions::default(),
            },
        )
        .unwrap();
        assert_eq!(tr.rows.len(), 4);
        assert!(tr.rows[0].prices.iter().all(|p| *p == 57.5));
    }

    #[test]
    fn divergent_step_is_reported() {
        let t = single_path_transport();
        let gm = grid(1000.0);
        let err = run_dual_decomposition(
            &t,
            &gm,
            &DualOptions {
                alpha: 1e3,
                base_mva: 1.0,
                gamma0: 57.5,
                mu0: None,
                max_iters: 100,
                tol: 0.0,
                reference: None,
                divergence_limit: 1e4,
                assignment: SolveOptions::default(),
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    #[test]
    fn slope_of_power_law() {
        let pts = (1..50).map(|k| (k, 3.0 / (k as f64).sqrt()));
        assert_abs_diff_eq!(log_log_slope(pts).unwrap(), -0.5, epsilon = 1e-12);
        assert_eq!(log_log_slope([(1, 1.0)]), None);
    }
}
