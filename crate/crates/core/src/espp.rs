//! Energy feasibility, path enumeration and the individual driver's
//! energy-aware shortest path choice.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::graph::{ArcKind, ExtendedGraph, NodeId};

/// Slack for floating-point accumulation in state-of-charge checks (kWh).
pub const SOC_EPS: f64 = 1e-9;

/// Default cap on enumerated paths per class.
pub const DEFAULT_MAX_PATHS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VehicleKind {
    Ev,
    Icev,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleClass {
    pub id: usize,
    pub name: String,
    pub origin: NodeId,
    pub destination: NodeId,
    /// Vehicles per epoch.
    pub demand_rate: f64,
    /// kWh at departure.
    pub initial_charge: f64,
    pub battery_capacity: f64,
    pub kind: VehicleKind,
}

impl VehicleClass {
    pub fn ev(
        id: usize,
        origin: NodeId,
        destination: NodeId,
        demand_rate: f64,
        initial: f64,
        capacity: f64,
    ) -> Self {
        Self {
            id,
            name: format!("class{id}"),
            origin,
            destination,
            demand_rate,
            initial_charge: initial,
            battery_capacity: capacity,
            kind: VehicleKind::Ev,
        }
    }

    pub fn icev(id: usize, origin: NodeId, destination: NodeId, demand_rate: f64) -> Self {
        Self {
            id,
            name: format!("class{id}"),
            origin,
            destination,
            demand_rate,
            initial_charge: 0.0,
            battery_capacity: 0.0,
            kind: VehicleKind::Icev,
        }
    }

    pub fn validate(&self, num_nodes: usize) -> Result<()> {
        if self.origin >= num_nodes || self.destination >= num_nodes {
            return Err(Error::Validation(format!(
                "class {} references an unknown node",
                self.id
            )));
        }
        if self.origin == self.destination {
            return Err(Error::Validation(format!(
                "class {} has identical origin and destination",
                self.id
            )));
        }
        if !(self.demand_rate >= 0.0) || !self.demand_rate.is_finite() {
            return Err(Error::Validation(format!(
                "class {} has a negative demand rate",
                self.id
            )));
        }
        if self.kind == VehicleKind::Ev
            && !(0.0 <= self.initial_charge && self.initial_charge <= self.battery_capacity)
        {
            return Err(Error::Validation(format!(
                "class {}: initial charge must lie in [0, battery capacity]",
                self.id
            )));
        }
        Ok(())
    }
}

/// Ordered arc sequence with its cached state-of-charge profile.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub arcs: Vec<usize>,
    /// Battery state after each arc (kWh); empty for ICEV paths.
    pub soc: Vec<f64>,
}

impl Path {
    pub fn len(&self) -> usize {
        self.arcs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arcs.is_empty()
    }

    pub fn energies<'a>(&'a self, graph: &'a ExtendedGraph) -> impl Iterator<Item = f64> + 'a {
        self.arcs.iter().map(|&a| graph.arcs[a].energy)
    }

    /// kWh consumed by driving (sum of positive arc energies).
    pub fn energy_drawn(&self, graph: &ExtendedGraph) -> f64 {
        self.energies(graph).filter(|e| *e > 0.0).sum()
    }

    /// kWh received from chargers along the path.
    pub fn energy_charged(&self, graph: &ExtendedGraph) -> f64 {
        self.arcs.iter().map(|&a| graph.arcs[a].charge_kwh()).sum()
    }

    pub fn soc_range(&self) -> Option<(f64, f64)> {
        let min = self.soc.iter().copied().reduce(f64::min)?;
        let max = self.soc.iter().copied().reduce(f64::max)?;
        Some((min, max))
    }
}

/// Battery feasibility of a sequence of arc energies: every prefix keeps the
/// state of charge within `[0, capacity]`. Negative energies add charge.
pub fn is_energy_feasible(
    energies: impl IntoIterator<Item = f64>,
    initial_charge: f64,
    capacity: f64,
) -> bool {
    let mut soc = initial_charge;
    for e in energies {
        soc -= e;
        if soc < -SOC_EPS || soc > capacity + SOC_EPS {
            return false;
        }
    }
    true
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub class: usize,
    pub paths: Vec<Path>,
}

impl PathSet {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Dense arc-path incidence matrix (`arcs × paths`).
    pub fn incidence(&self, num_arcs: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(num_arcs, self.paths.len());
        for (k, p) in self.paths.iter().enumerate() {
            for &a in &p.arcs {
                m[(a, k)] = 1.0;
            }
        }
        m
    }
}

struct Search<'a> {
    graph: &'a ExtendedGraph,
    class: &'a VehicleClass,
    target: usize,
    cap: usize,
    visited: Vec<bool>,
    stack: Vec<usize>,
    soc: Vec<f64>,
    found: Vec<Path>,
}

impl Search<'_> {
    fn allowed(&self, kind: ArcKind) -> bool {
        match self.class.kind {
            VehicleKind::Ev => true,
            VehicleKind::Icev => matches!(kind, ArcKind::Road | ArcKind::Bypass),
        }
    }

    fn dfs(&mut self, node: usize, charge: f64) -> Result<()> {
        if node == self.target && !self.stack.is_empty() {
            if self.found.len() >= self.cap {
                return Err(Error::PathCapExceeded {
                    class: self.class.id,
                    cap: self.cap,
                });
            }
            let soc = if self.class.kind == VehicleKind::Ev {
                self.soc.clone()
            } else {
                Vec::new()
            };
            self.found.push(Path {
                arcs: self.stack.clone(),
                soc,
            });
            return Ok(());
        }
        for &aid in &self.graph.out_arcs[node] {
            let arc = &self.graph.arcs[aid];
            if !self.allowed(arc.kind) {
                continue;
            }
            let entered = if arc.kind == ArcKind::Road {
                let h = self.graph.node_base[arc.head];
                if self.visited[h] {
                    continue;
                }
                Some(h)
            } else {
                None
            };
            let next = if self.class.kind == VehicleKind::Ev {
                let s = charge - arc.energy;
                if s < -SOC_EPS || s > self.class.battery_capacity + SOC_EPS {
                    continue;
                }
                s
            } else {
                charge
            };
            if let Some(h) = entered {
                self.visited[h] = true;
            }
            self.stack.push(aid);
            self.soc.push(next);
            let r = self.dfs(arc.head, next);
            self.stack.pop();
            self.soc.pop();
            if let Some(h) = entered {
                self.visited[h] = false;
            }
            r?;
        }
        Ok(())
    }
}

/// Every loop-free origin→destination path usable by the class, sorted
/// lexicographically by arc ids. EV paths satisfy the battery constraint on
/// every prefix; ICEV paths use only road and bypass arcs.
pub fn enumerate_feasible_paths(
    graph: &ExtendedGraph,
    class: &VehicleClass,
    cap: usize,
) -> Result<PathSet> {
    class.validate(graph.base.num_nodes())?;
    let mut search = Search {
        graph,
        class,
        target: class.destination,
        cap,
        visited: vec![false; graph.base.num_nodes()],
        stack: Vec::new(),
        soc: Vec::new(),
        found: Vec::new(),
    };
    search.visited[class.origin] = true;
    let start_charge = if class.kind == VehicleKind::Ev {
        class.initial_charge
    } else {
        0.0
    };
    search.dfs(class.origin, start_charge)?;
    if class.kind == VehicleKind::Ev {
        if let Some(&start) = graph.origin_start.get(&class.origin) {
            search.dfs(start, start_charge)?;
        }
    }
    let mut paths = search.found;
    paths.sort_by(|a, b| a.arcs.cmp(&b.arcs));
    if paths.is_empty() {
        return Err(Error::InfeasibleClass {
            class: class.id,
            origin: class.origin,
            destination: class.destination,
        });
    }
    Ok(PathSet {
        class: class.id,
        paths,
    })
}

/// Generalised cost per extended arc at the given flows: time cost plus money
/// cost (scenario tolls, `imposed_tolls`, and electricity bill).
pub fn generalized_arc_costs(
    graph: &ExtendedGraph,
    arc_flows: &[f64],
    prices_per_kwh: &[f64],
    imposed_tolls: &[f64],
    gamma: f64,
) -> Result<Vec<f64>> {
    if arc_flows.len() != graph.num_arcs() || imposed_tolls.len() != graph.num_arcs() {
        return Err(Error::DimensionMismatch(format!(
            "expected {} arc entries, got {} flows and {} tolls",
            graph.num_arcs(),
            arc_flows.len(),
            imposed_tolls.len()
        )));
    }
    graph
        .arcs
        .iter()
        .map(|a| {
            Ok(a.time_cost(arc_flows[a.id], gamma)?
                + a.money_cost(prices_per_kwh, imposed_tolls[a.id])?)
        })
        .collect()
}

/// Cheapest path of the set under current flows and prices; ties go to the
/// lowest path index.
pub fn solve_espp(
    graph: &ExtendedGraph,
    pathset: &PathSet,
    arc_flows: &[f64],
    prices_per_kwh: &[f64],
    imposed_tolls: &[f64],
    gamma: f64,
) -> Result<(usize, f64)> {
    if pathset.is_empty() {
        return Err(Error::EmptyPathSet);
    }
    let costs = generalized_arc_costs(graph, arc_flows, prices_per_kwh, imposed_tolls, gamma)?;
    let mut best = (0, f64::INFINITY);
    for (k, p) in pathset.paths.iter().enumerate() {
        let c: f64 = p.arcs.iter().map(|&a| costs[a]).sum();
        if c < best.1 {
            best = (k, c);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_extended_graph, BaseGraph, ChargingStation, RoadArc};
    use approx::assert_abs_diff_eq;
    use std::collections::BTreeSet;

    #[test]
    fn feasibility_predicate() {
        assert!(is_energy_feasible([], 4.0, 6.0));
        assert!(is_energy_feasible([2.0, 2.0, -3.0, 2.0], 4.0, 6.0));
        assert!(!is_energy_feasible([3.0, 2.0], 4.0, 6.0));
        // overcharging is infeasible too
        assert!(!is_energy_feasible([-3.0], 4.0, 6.0));
    }

    fn two_node(energy: f64) -> ExtendedGraph {
        let base = BaseGraph::new(
            vec!["a".into(), "b".into()],
            vec![RoadArc::new(0, 1, 1.0, 0.0, energy)],
        );
        build_extended_graph(&base, &[], &BTreeSet::new()).unwrap()
    }

    #[test]
    fn single_arc_single_path() {
        let g = two_node(1.0);
        let ps =
            enumerate_feasible_paths(&g, &VehicleClass::ev(0, 0, 1, 10.0, 4.0, 6.0), 10).unwrap();
        assert_eq!(ps.len(), 1);
        assert_eq!(ps.paths[0].arcs, vec![0]);
        assert_eq!(ps.paths[0].soc, vec![3.0]);
    }

    #[test]
    fn empty_battery_is_an_infeasible_class() {
        let g = two_node(1.0);
        let err = enumerate_feasible_paths(&g, &VehicleClass::ev(3, 0, 1, 10.0, 0.0, 6.0), 10)
            .unwrap_err();
        assert!(matches!(err, Error::InfeasibleClass { class: 3, .. }));
    }

    fn one_station() -> ExtendedGraph {
        let base = BaseGraph::new(
            vec!["o".into(), "s".into(), "d".into()],
            vec![
                RoadArc::new(0, 1, 10.0, 0.0, 1.0),
                RoadArc::new(1, 2, 10.0, 0.0, 1.0),
            ],
        );
        let st = ChargingStation::fast(1, 0, 0.2, vec![0.0, 1.0, 2.0, 3.0]);
        build_extended_graph(&base, &[st], &BTreeSet::new()).unwrap()
    }

    #[test]
    fn single_station_gives_bypass_plus_three_charging_paths() {
        let g = one_station();
        let ps =
            enumerate_feasible_paths(&g, &VehicleClass::ev(0, 0, 2, 1.0, 4.0, 6.0), 100).unwrap();
        assert_eq!(ps.len(), 4);
        let bypass = g.station_arcs[0].bypass.unwrap();
        assert_eq!(
            ps.paths.iter().filter(|p| p.arcs.contains(&bypass)).count(),
            1
        );
        for p in &ps.paths {
            assert!(is_energy_feasible(p.energies(&g), 4.0, 6.0));
        }
        // ICEV drivers never enter the station
        let icev = enumerate_feasible_paths(&g, &VehicleClass::icev(1, 0, 2, 1.0), 100).unwrap();
        assert_eq!(icev.len(), 1);
        assert!(icev.paths[0].arcs.contains(&bypass));
    }

    #[test]
    fn capacity_prunes_overcharge() {
        let g = one_station();
        // 3 kWh left at the station, capacity 5: only options 1 and 2 fit
        let ps =
            enumerate_feasible_paths(&g, &VehicleClass::ev(0, 0, 2, 1.0, 4.0, 5.0), 100).unwrap();
        assert_eq!(ps.len(), 3);
    }

    #[test]
    fn path_cap_is_enforced() {
        let g = one_station();
        let err =
            enumerate_feasible_paths(&g, &VehicleClass::ev(0, 0, 2, 1.0, 4.0, 6.0), 2).unwrap_err();
        assert_eq!(err, Error::PathCapExceeded { class: 0, cap: 2 });
    }

    #[test]
    fn incidence_matrix_entries() {
        let g = one_station();
        let ps =
            enumerate_feasible_paths(&g, &VehicleClass::ev(0, 0, 2, 1.0, 4.0, 6.0), 100).unwrap();
        let a = ps.incidence(g.num_arcs());
        assert_eq!(a.shape(), (g.num_arcs(), 4));
        for k in 0..4 {
            let col_sum: f64 = a.column(k).sum();
            assert_eq!(col_sum as usize, ps.paths[k].len());
        }
        assert!(a.iter().all(|v| *v == 0.0 || *v == 1.0));
    }

    fn parallel_roads(t1: f64, t2: f64) -> ExtendedGraph {
        let base = BaseGraph::new(
            vec!["a".into(), "m".into(), "b".into()],
            vec![
                RoadArc::new(0, 2, t1, 0.0, 1.0),
                RoadArc::new(0, 1, t2 / 2.0, 0.0, 0.5),
                RoadArc::new(1, 2, t2 / 2.0, 0.0, 0.5),
            ],
        );
        build_extended_graph(&base, &[], &BTreeSet::new()).unwrap()
    }

    #[test]
    fn espp_picks_faster_road() {
        let g = parallel_roads(10.0, 12.0);
        let ps =
            enumerate_feasible_paths(&g, &VehicleClass::ev(0, 0, 2, 1.0, 4.0, 6.0), 100).unwrap();
        let zeros = vec![0.0; g.num_arcs()];
        let (k, c) = solve_espp(&g, &ps, &zeros, &[], &zeros, 1e-3).unwrap();
        assert_eq!(ps.paths[k].arcs, vec![0]);
        assert_abs_diff_eq!(c, 0.01, epsilon = 1e-15);

        let single = PathSet {
            class: 0,
            paths: vec![ps.paths[1].clone()],
        };
        let (k, c) = solve_espp(&g, &single, &zeros, &[], &zeros, 1e-3).unwrap();
        assert_eq!(k, 0);
        assert_abs_diff_eq!(c, 0.012, epsilon = 1e-15);

        let empty = PathSet {
            class: 0,
            paths: vec![],
        };
        assert_eq!(
            solve_espp(&g, &empty, &zeros, &[], &zeros, 1.0).unwrap_err(),
            Error::EmptyPathSet
        );
    }

    #[test]
    fn espp_skips_expensive_charging() {
        // bypass costs nothing extra; charging 1 kWh costs 5 min and $1/kWh
        let g = one_station();
        let ps =
            enumerate_feasible_paths(&g, &VehicleClass::ev(0, 0, 2, 1.0, 4.0, 6.0), 100).unwrap();
        let zeros = vec![0.0; g.num_arcs()];
        let prices = [1.0];
        let costs: Vec<f64> = ps
            .paths
            .iter()
            .map(|p| {
                p.arcs
                    .iter()
                    .map(|&a| {
                        let arc = &g.arcs[a];
                        arc.time_cost(0.0, 1e-3).unwrap() + arc.money_cost(&prices, 0.0).unwrap()
                    })
                    .sum::<f64>()
            })
            .collect();
        let brute = costs
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        let (k, _) = solve_espp(&g, &ps, &zeros, &prices, &zeros, 1e-3).unwrap();
        assert_eq!(k, brute);
        assert!(ps.paths[k]
            .arcs
            .contains(&g.station_arcs[0].bypass.unwrap()));
    }
}
