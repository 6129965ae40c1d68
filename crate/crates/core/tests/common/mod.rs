//! Independent oracles and random instance generators shared by the
//! integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use evcosim_core::graph::{ArcKind, ExtendedGraph};
use evcosim_core::{
    build_extended_graph, BaseGraph, ChargingStation, Generator, GridModel, Line, PowerNetwork,
    RoadArc, VehicleClass, VehicleKind,
};
use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- paths

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Step {
    Road(usize),
    Bypass(usize),
    /// Node and kWh in thousandths.
    Charge(usize, i64),
    OriginCharge(usize, i64),
}

fn milli(e: f64) -> i64 {
    (e * 1000.0).round() as i64
}

#[derive(Debug, Clone)]
pub struct StationSpec {
    pub node: usize,
    pub origin_facility: bool,
    pub options: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PathInstance {
    pub num_nodes: usize,
    /// (tail, head, energy kWh, free-flow minutes)
    pub arcs: Vec<(usize, usize, f64, f64)>,
    pub stations: Vec<StationSpec>,
    pub class: VehicleClass,
}

impl PathInstance {
    pub fn graph(&self) -> ExtendedGraph {
        let names = (0..self.num_nodes).map(|i| format!("n{i}")).collect();
        let arcs = self
            .arcs
            .iter()
            .map(|&(t, h, e, fft)| RoadArc::new(t, h, fft, 1e-3, e))
            .collect();
        let base = BaseGraph::new(names, arcs);
        let stations: Vec<ChargingStation> = self
            .stations
            .iter()
            .map(|s| {
                if s.origin_facility {
                    ChargingStation::origin(s.node, 0, s.options.clone())
                } else {
                    ChargingStation::fast(s.node, 0, 0.2, s.options.clone())
                }
            })
            .collect();
        build_extended_graph(&base, &stations, &BTreeSet::from([self.class.origin]))
            .expect("valid generated graph")
    }
}

/// Random instance with at most 8 nodes and at most 2 stations.
pub fn random_path_instance(seed: u64) -> PathInstance {
    let mut r = rng(seed);
    let n = r.random_range(2..=8usize);
    let density = r.random_range(0.2..0.5);
    let mut arcs = Vec::new();
    for t in 0..n {
        for h in 0..n {
            if t != h && r.random::<f64>() < density {
                let e = 0.5 * r.random_range(0..=6u32) as f64;
                arcs.push((t, h, e, r.random_range(5.0..60.0)));
            }
        }
    }
    let origin = 0;
    let destination = r.random_range(1..n);
    if !arcs.iter().any(|a| a.0 == origin) {
        arcs.push((origin, destination, 1.0, 30.0));
    }
    let mut stations: Vec<StationSpec> = Vec::new();
    for _ in 0..r.random_range(0..=2usize) {
        let node = r.random_range(0..n);
        if stations.iter().any(|s| s.node == node) {
            continue;
        }
        let origin_facility = node == origin && r.random::<f64>() < 0.5;
        let mut options: Vec<f64> = [0.5, 1.0, 2.0, 3.0]
            .into_iter()
            .filter(|_| r.random::<f64>() < 0.6)
            .collect();
        if options.is_empty() {
            options.push(1.0);
        }
        if r.random::<f64>() < 0.5 {
            options.insert(0, 0.0);
        }
        stations.push(StationSpec {
            node,
            origin_facility,
            options,
        });
    }
    let class = if r.random::<f64>() < 0.2 {
        VehicleClass::icev(0, origin, destination, 100.0)
    } else {
        let cap = [3.0, 4.0, 6.0][r.random_range(0..3usize)];
        let init = 0.5 * r.random_range(0..=(2.0 * cap) as u32) as f64;
        VehicleClass::ev(0, origin, destination, 100.0, init, cap)
    };
    PathInstance {
        num_nodes: n,
        arcs,
        stations,
        class,
    }
}

/// Depth-first search over the base graph: loop-free in base nodes, a
/// bypass-or-charge decision at every fast station passed before arrival and
/// an optional charge at an origin facility.
pub fn oracle_paths(inst: &PathInstance) -> BTreeSet<Vec<Step>> {
    const EPS: f64 = 1e-9;
    let ev = inst.class.kind == VehicleKind::Ev;
    let cap = inst.class.battery_capacity;
    let station_at: BTreeMap<usize, &StationSpec> =
        inst.stations.iter().map(|s| (s.node, s)).collect();
    let mut out = BTreeSet::new();

    struct Walk<'a> {
        inst: &'a PathInstance,
        station_at: &'a BTreeMap<usize, &'a StationSpec>,
        ev: bool,
        cap: f64,
        visited: Vec<bool>,
        steps: Vec<Step>,
        out: &'a mut BTreeSet<Vec<Step>>,
    }

    impl Walk<'_> {
        fn at_node(&mut self, node: usize, soc: f64) {
            if node == self.inst.class.destination {
                self.out.insert(self.steps.clone());
                return;
            }
            match self.station_at.get(&node) {
                Some(st) if !st.origin_facility => {
                    self.steps.push(Step::Bypass(node));
                    self.drive(node, soc);
                    self.steps.pop();
                    if self.ev {
                        for &e in st.options.iter().filter(|e| **e > 0.0) {
                            if soc + e <= self.cap + EPS {
                                self.steps.push(Step::Charge(node, milli(e)));
                                self.drive(node, soc + e);
                                self.steps.pop();
                            }
                        }
                    }
                }
                _ => self.drive(node, soc),
            }
        }

        fn drive(&mut self, node: usize, soc: f64) {
            for (i, &(t, h, e, _)) in self.inst.arcs.iter().enumerate() {
                if t != node || self.visited[h] {
                    continue;
                }
                let next = soc - e;
                if self.ev && next < -EPS {
                    continue;
                }
                self.visited[h] = true;
                self.steps.push(Step::Road(i));
                self.at_node(h, next);
                self.steps.pop();
                self.visited[h] = false;
            }
        }
    }

    let origin = inst.class.origin;
    let mut walk = Walk {
        inst,
        station_at: &station_at,
        ev,
        cap,
        visited: vec![false; inst.num_nodes],
        steps: Vec::new(),
        out: &mut out,
    };
    walk.visited[origin] = true;
    let soc0 = if ev { inst.class.initial_charge } else { 0.0 };
    walk.at_node(origin, soc0);
    if ev {
        if let Some(st) = station_at.get(&origin).filter(|s| s.origin_facility) {
            for &e in st.options.iter().filter(|e| **e > 0.0) {
                if soc0 + e <= cap + EPS {
                    walk.steps.push(Step::OriginCharge(origin, milli(e)));
                    walk.at_node(origin, soc0 + e);
                    walk.steps.pop();
                }
            }
        }
    }
    out
}

/// Engine path translated into oracle steps.
pub fn steps_of(graph: &ExtendedGraph, arcs: &[usize]) -> Vec<Step> {
    arcs.iter()
        .filter_map(|&a| {
            let arc = &graph.arcs[a];
            match arc.kind {
                ArcKind::Road => Some(Step::Road(arc.road.unwrap())),
                ArcKind::Entrance => None,
                ArcKind::Bypass => Some(Step::Bypass(arc.base_node)),
                ArcKind::ChargeAmount if arc.at_origin => {
                    Some(Step::OriginCharge(arc.base_node, milli(arc.charge_kwh())))
                }
                ArcKind::ChargeAmount => Some(Step::Charge(arc.base_node, milli(arc.charge_kwh()))),
            }
        })
        .collect()
}

// ------------------------------------------------------------- dispatch

/// Random connected network with 1 to 3 buses.
pub fn random_grid(seed: u64) -> (GridModel, Vec<f64>) {
    let mut r = rng(seed);
    let n = r.random_range(1..=3usize);
    let mut lines = Vec::new();
    let limit = |r: &mut ChaCha8Rng| {
        if r.random::<f64>() < 0.2 {
            1e4
        } else {
            r.random_range(10.0..80.0)
        }
    };
    if n >= 2 {
        for (a, b) in [(0, 1), (1, 2), (0, 2)].into_iter().filter(|(_, b)| *b < n) {
            if n == 3 && (a, b) == (0, 2) && r.random::<f64>() < 0.4 {
                continue;
            }
            let mut line = Line::symmetric(a, b, r.random_range(5.0..20.0), limit(&mut r));
            if r.random::<f64>() < 0.3 {
                line.limit_backward = limit(&mut r);
            }
            lines.push(line);
        }
    }
    let mut generators = Vec::new();
    for bus in 0..n {
        if bus == 0 || r.random::<f64>() < 0.6 {
            let g_min = r.random_range(0.0..20.0);
            generators.push(Generator {
                bus,
                quadratic: r.random_range(0.01..0.2),
                linear: r.random_range(1.0..30.0),
                constant: r.random_range(0.0..100.0),
                g_min,
                g_max: g_min + r.random_range(20.0..200.0),
            });
        }
    }
    let baseload = (0..n).map(|_| r.random_range(0.0..80.0)).collect();
    let net = PowerNetwork {
        bus_names: (0..n).map(|i| format!("b{i}")).collect(),
        lines,
        generators,
        baseload,
        slack: r.random_range(0..n),
    };
    let d = (0..n).map(|_| r.random_range(0.0..20.0)).collect();
    (GridModel::new(net).expect("generated network is valid"), d)
}

#[derive(Debug, Clone)]
pub struct OracleDispatch {
    /// Generation per bus.
    pub g: Vec<f64>,
    pub gamma: f64,
    pub mu: Vec<f64>,
    pub prices: Vec<f64>,
}

/// Enumerates active sets of the dispatch QP and returns the KKT point, or
/// `None` when no active set yields one (infeasible instance).
pub fn oracle_dispatch(grid: &GridModel, d: &[f64]) -> Option<OracleDispatch> {
    let net = &grid.network;
    let n = grid.num_buses();
    let gens = &net.generators;
    let k = gens.len();
    let load: Vec<f64> = d.iter().zip(&net.baseload).map(|(a, b)| a + b).collect();
    let total: f64 = load.iter().sum();
    let h = &grid.ptdf;
    let hd = h * DVector::from_column_slice(&load);
    // Inequalities aᵀg ≤ b in generator space, tagged with their source.
    #[derive(Clone, Copy)]
    enum Tag {
        Line(usize),
        Upper,
        Lower,
    }
    let mut rows: Vec<(Vec<f64>, f64, Tag)> = Vec::new();
    for l in 0..grid.num_directed_lines() {
        if !grid.limits[l].is_finite() {
            continue;
        }
        let a: Vec<f64> = gens.iter().map(|g| -h[(l, g.bus)]).collect();
        rows.push((a, grid.limits[l] - hd[l], Tag::Line(l)));
    }
    for (i, g) in gens.iter().enumerate() {
        let mut a = vec![0.0; k];
        a[i] = 1.0;
        rows.push((a.clone(), g.g_max, Tag::Upper));
        a[i] = -1.0;
        rows.push((a, -g.g_min, Tag::Lower));
    }
    let m = rows.len();
    let scale = 1.0 + total.abs();
    for size in 0..=k.min(m) {
        for subset in subsets(m, size) {
            // Unknowns: g (k), γ, κ (size).
            let dim = k + 1 + size;
            let mut a = DMatrix::<f64>::zeros(dim, dim);
            let mut b = DVector::<f64>::zeros(dim);
            for (i, gen) in gens.iter().enumerate() {
                a[(i, i)] = 2.0 * gen.quadratic;
                a[(i, k)] = -1.0;
                for (j, &row) in subset.iter().enumerate() {
                    a[(i, k + 1 + j)] = rows[row].0[i];
                }
                b[i] = -gen.linear;
            }
            for i in 0..k {
                a[(k, i)] = 1.0;
            }
            b[k] = total;
            for (j, &row) in subset.iter().enumerate() {
                for i in 0..k {
                    a[(k + 1 + j, i)] = rows[row].0[i];
                }
                b[k + 1 + j] = rows[row].1;
            }
            let Some(x) = a.clone().lu().solve(&b) else {
                continue;
            };
            if (&a * &x - &b).amax() > 1e-9 * (1.0 + b.amax()) {
                continue;
            }
            let g: Vec<f64> = x.iter().take(k).copied().collect();
            let kappa: Vec<f64> = x.iter().skip(k + 1).copied().collect();
            if kappa.iter().any(|v| *v < -1e-10) {
                continue;
            }
            let feasible = rows.iter().all(|(ar, br, _)| {
                let lhs: f64 = ar.iter().zip(&g).map(|(p, q)| p * q).sum();
                lhs <= br + 1e-9 * scale
            });
            if !feasible {
                continue;
            }
            let gamma = x[k];
            let mut mu = vec![0.0; grid.num_directed_lines()];
            for (j, &row) in subset.iter().enumerate() {
                if let Tag::Line(l) = rows[row].2 {
                    mu[l] = kappa[j].max(0.0);
                }
            }
            let ht = h.transpose() * DVector::from_column_slice(&mu);
            let prices = (0..n).map(|v| gamma + ht[v]).collect();
            let mut g_bus = vec![0.0; n];
            for (gen, v) in gens.iter().zip(&g) {
                g_bus[gen.bus] += v;
            }
            return Some(OracleDispatch {
                g: g_bus,
                gamma,
                mu,
                prices,
            });
        }
    }
    None
}

fn subsets(m: usize, size: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, m: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left == 0 {
            out.push(cur.clone());
            return;
        }
        for i in start..m {
            if m - i < left {
                break;
            }
            cur.push(i);
            rec(i + 1, m, left - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, m, size, &mut Vec::new(), &mut out);
    out
}

/// Largest `|a − b| / (1 + |b|)` over paired entries.
pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / (1.0 + y.abs()))
        .fold(0.0, f64::max)
}

// ------------------------------------------------------------- tolls

use evcosim_core::{
    compute_marginal_tolls, solve_ctap, solve_user_equilibrium, SolveOptions, TransportModel,
};

/// Small random transport model with one or two classes from node 0, each
/// with at least two feasible paths, and random per-bus prices ($/MWh).
pub fn random_transport(seed: u64) -> (TransportModel, Vec<f64>) {
    for attempt in 0.. {
        let inst = random_path_instance(seed.wrapping_mul(7919).wrapping_add(attempt));
        let mut r = rng(seed ^ (attempt << 32));
        let mut graph = inst.graph();
        for arc in graph.arcs.iter_mut() {
            if matches!(arc.kind, ArcKind::Road | ArcKind::Entrance) {
                arc.latency_slope = r.random_range(0.005..0.05);
            }
        }
        let mut classes = vec![inst.class.clone()];
        classes[0].demand_rate = r.random_range(200.0..2000.0);
        if inst.num_nodes > 2 && r.random::<f64>() < 0.5 {
            let dest = r.random_range(1..inst.num_nodes);
            if dest != inst.class.destination {
                classes.push(VehicleClass::ev(
                    1,
                    0,
                    dest,
                    r.random_range(200.0..2000.0),
                    2.0,
                    6.0,
                ));
            }
        }
        if let Ok(model) = TransportModel::new(graph, classes, 1, 1.0, 5000) {
            if model.pathsets.iter().any(|p| p.paths.len() < 2) {
                continue;
            }
            let prices = vec![r.random_range(20.0..80.0)];
            return (model, prices);
        }
    }
    unreachable!()
}

/// `(‖λ_UE − λ_SO‖∞, Σ m_q)` with UE solved under the marginal tolls of the
/// social optimum at `prices`.
pub fn toll_gap(model: &TransportModel, prices: &[f64], so_flows: Option<&[f64]>) -> (f64, f64) {
    let opts = SolveOptions {
        tol: 1e-12,
        max_iters: 50_000,
        ..Default::default()
    };
    let so: Vec<f64> = match so_flows {
        Some(f) => f.to_vec(),
        None => {
            solve_ctap(model, prices, &opts)
                .expect("ctap")
                .state
                .arc_flows
        }
    };
    let tolls = compute_marginal_tolls(&model.graph, &so, model.gamma);
    let ue = solve_user_equilibrium(model, prices, &tolls, &opts).expect("ue");
    let diff = ue
        .state
        .arc_flows
        .iter()
        .zip(&so)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    (diff, model.total_demand())
}

/// `‖λ_UE − λ_SO‖∞` without any tolls, to show that tolls matter.
pub fn untolled_gap(model: &TransportModel, prices: &[f64]) -> f64 {
    let opts = SolveOptions {
        tol: 1e-12,
        max_iters: 50_000,
        ..Default::default()
    };
    let so = solve_ctap(model, prices, &opts)
        .expect("ctap")
        .state
        .arc_flows;
    let zero = vec![0.0; model.num_arcs()];
    let ue = solve_user_equilibrium(model, prices, &zero, &opts).expect("ue");
    ue.state
        .arc_flows
        .iter()
        .zip(&so)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}
