//! Base road graph and the extended multigraph with virtual charging arcs.
//!
//! Every fast-charging station (FCS) node `v` is split in three:
//!
//! ```text
//!   road arcs ──▶ v ──Bypass──────────────────▶ v_out ──▶ road arcs
//!                 └─Entrance─▶ v_plug ─ChargeAmount(e)─┘
//! ```
//!
//! Road arcs into `v` land on `v` itself, road arcs out of `v` leave from
//! `v_out`. A path that ends at `v` stops on arrival. At a trip origin with an
//! origin facility a separate start node `v_start` is added with one
//! ChargeAmount arc per option into `v`; paths may start at either node.
//!
//! Zero-kWh options are never materialised: at an FCS the bypass arc already
//! represents them and at an origin skipping the prefix arc does.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub type NodeId = usize;
pub type BusId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct RoadArc {
    pub tail: NodeId,
    pub head: NodeId,
    /// Minutes at zero flow.
    pub free_flow_time: f64,
    /// Minutes per vehicle of flow.
    pub latency_slope: f64,
    /// kWh drawn from the battery to traverse the arc.
    pub energy: f64,
    /// Dollars.
    pub toll: f64,
}

impl RoadArc {
    pub fn new(
        tail: NodeId,
        head: NodeId,
        free_flow_time: f64,
        latency_slope: f64,
        energy: f64,
    ) -> Self {
        Self {
            tail,
            head,
            free_flow_time,
            latency_slope,
            energy,
            toll: 0.0,
        }
    }

    fn validate(&self, idx: usize, num_nodes: usize) -> Result<()> {
        if self.tail >= num_nodes || self.head >= num_nodes {
            return Err(Error::InvalidInput(format!(
                "road arc {idx} references an unknown node"
            )));
        }
        if self.tail == self.head {
            return Err(Error::InvalidInput(format!(
                "road arc {idx} is a self-loop"
            )));
        }
        let nonneg = [
            self.free_flow_time,
            self.latency_slope,
            self.energy,
            self.toll,
        ];
        if nonneg.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "road arc {idx} has a negative or non-finite attribute"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseGraph {
    pub node_names: Vec<String>,
    pub arcs: Vec<RoadArc>,
}

impl BaseGraph {
    pub fn new(node_names: Vec<String>, arcs: Vec<RoadArc>) -> Self {
        Self { node_names, arcs }
    }

    pub fn num_nodes(&self) -> usize {
        self.node_names.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChargingStation {
    pub node: NodeId,
    /// Power bus the station draws from.
    pub bus: BusId,
    /// kWh per minute.
    pub rate: f64,
    /// Charge amounts in kWh, strictly increasing. A leading 0 is accepted and dropped.
    pub options: Vec<f64>,
    /// Minutes of plug-in wait at zero flow.
    pub entrance_free_flow_wait: f64,
    /// Minutes of wait per vehicle entering.
    pub entrance_wait_slope: f64,
    pub plug_in_fee: f64,
    /// Origin facilities charge before departure with no time cost.
    pub is_trip_origin_facility: bool,
}

impl ChargingStation {
    pub fn fast(node: NodeId, bus: BusId, rate: f64, options: Vec<f64>) -> Self {
        Self {
            node,
            bus,
            rate,
            options,
            entrance_free_flow_wait: 0.0,
            entrance_wait_slope: 0.0,
            plug_in_fee: 0.0,
            is_trip_origin_facility: false,
        }
    }

    pub fn origin(node: NodeId, bus: BusId, options: Vec<f64>) -> Self {
        Self {
            node,
            bus,
            rate: 1.0,
            options,
            entrance_free_flow_wait: 0.0,
            entrance_wait_slope: 0.0,
            plug_in_fee: 0.0,
            is_trip_origin_facility: true,
        }
    }

    /// Options with the zero-kWh entry removed.
    fn materialised_options(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.options.len());
        let mut prev = -1.0;
        for (i, &e) in self.options.iter().enumerate() {
            let leading_zero = i == 0 && e == 0.0;
            if !e.is_finite() || e <= prev || (e <= 0.0 && !leading_zero) {
                return Err(Error::InvalidChargeOption {
                    node: self.node,
                    amount: e,
                });
            }
            prev = e;
            if !leading_zero {
                out.push(e);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArcKind {
    Road,
    Entrance,
    Bypass,
    ChargeAmount,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedArc {
    pub id: usize,
    pub tail: usize,
    pub head: usize,
    pub kind: ArcKind,
    /// Base node the arc belongs to (its tail for road arcs).
    pub base_node: NodeId,
    /// Index into the base arc list for road arcs.
    pub road: Option<usize>,
    /// Index into [`ExtendedGraph::stations`] for virtual arcs.
    pub station: Option<usize>,
    /// Battery draw in kWh; negative on ChargeAmount arcs.
    pub energy: f64,
    pub free_flow_time: f64,
    pub latency_slope: f64,
    /// Road toll or station plug-in fee carried by the scenario.
    pub base_toll: f64,
    /// Bus billed for the charge on ChargeAmount arcs.
    pub bus: Option<BusId>,
    pub at_origin: bool,
}

impl ExtendedArc {
    /// kWh delivered by a ChargeAmount arc, zero otherwise.
    pub fn charge_kwh(&self) -> f64 {
        if self.kind == ArcKind::ChargeAmount {
            -self.energy
        } else {
            0.0
        }
    }

    /// Time cost in dollars, `γ·(T + slope·flow)`.
    pub fn time_cost(&self, flow: f64, gamma: f64) -> Result<f64> {
        if flow < 0.0 || flow.is_nan() {
            return Err(Error::NegativeFlow(flow));
        }
        Ok(gamma * (self.free_flow_time + self.latency_slope * flow))
    }

    /// Money cost in dollars: tolls on road/entrance arcs and the electricity
    /// bill on ChargeAmount arcs. `prices_per_kwh` is indexed by bus.
    pub fn money_cost(&self, prices_per_kwh: &[f64], imposed_toll: f64) -> Result<f64> {
        match self.kind {
            ArcKind::Road | ArcKind::Entrance => Ok(self.base_toll + imposed_toll),
            ArcKind::Bypass => Ok(0.0),
            ArcKind::ChargeAmount => {
                let bus = self.bus.expect("charge arcs always carry a bus");
                let p = prices_per_kwh
                    .get(bus)
                    .copied()
                    .ok_or(Error::MissingPrice(bus))?;
                if !p.is_finite() {
                    return Err(Error::MissingPrice(bus));
                }
                Ok(p * self.charge_kwh() + imposed_toll)
            }
        }
    }

    /// True when the time cost does not depend on flow.
    pub fn has_fixed_time(&self) -> bool {
        self.latency_slope == 0.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StationArcs {
    pub entrance: Option<usize>,
    pub bypass: Option<usize>,
    pub charge: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedGraph {
    pub base: BaseGraph,
    pub stations: Vec<ChargingStation>,
    pub arcs: Vec<ExtendedArc>,
    /// Base node of every extended node.
    pub node_base: Vec<NodeId>,
    pub out_arcs: Vec<Vec<usize>>,
    /// Node that road arcs leave from, per base node.
    pub depart: Vec<usize>,
    /// Start node of the origin facility at a base node, when present.
    pub origin_start: HashMap<NodeId, usize>,
    pub station_arcs: Vec<StationArcs>,
    pub station_at: HashMap<NodeId, usize>,
}

impl ExtendedGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_base.len()
    }

    /// Human-readable arc name, e.g. `Davis>Winters`, `charge 2kWh@Winters`.
    pub fn arc_label(&self, arc: usize) -> String {
        let a = &self.arcs[arc];
        let node = &self.base.node_names[a.base_node];
        match a.kind {
            ArcKind::Road => {
                let road = &self.base.arcs[a.road.expect("road arcs carry their base index")];
                format!(
                    "{}>{}",
                    self.base.node_names[road.tail], self.base.node_names[road.head]
                )
            }
            ArcKind::Entrance => format!("enter@{node}"),
            ArcKind::Bypass => format!("bypass@{node}"),
            ArcKind::ChargeAmount if a.at_origin => {
                format!("origin-charge {}kWh@{node}", a.charge_kwh())
            }
            ArcKind::ChargeAmount => format!("charge {}kWh@{node}", a.charge_kwh()),
        }
    }

    pub fn num_arcs(&self) -> usize {
        self.arcs.len()
    }

    pub fn arcs_of_kind(&self, kind: ArcKind) -> impl Iterator<Item = &ExtendedArc> {
        self.arcs.iter().filter(move |a| a.kind == kind)
    }

    /// Scenario tolls carried on the arcs, indexed by extended arc id.
    pub fn base_tolls(&self) -> Vec<f64> {
        self.arcs.iter().map(|a| a.base_toll).collect()
    }

    /// Largest bus id referenced by a station, plus one.
    pub fn min_bus_count(&self) -> usize {
        self.stations.iter().map(|s| s.bus + 1).max().unwrap_or(0)
    }
}

/// Builds the extended graph. `origins` lists the base nodes that start a
/// trip; origin facilities at other nodes contribute no arcs.
pub fn build_extended_graph(
    base: &BaseGraph,
    stations: &[ChargingStation],
    origins: &BTreeSet<NodeId>,
) -> Result<ExtendedGraph> {
    let n = base.num_nodes();
    for (i, a) in base.arcs.iter().enumerate() {
        a.validate(i, n)?;
    }

    let mut station_at = HashMap::new();
    for (si, st) in stations.iter().enumerate() {
        if st.node >= n {
            return Err(Error::UnknownStationNode(st.node));
        }
        if station_at.insert(st.node, si).is_some() {
            return Err(Error::DuplicateStation(st.node));
        }
        if !st.is_trip_origin_facility && !(st.rate > 0.0 && st.rate.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "station at node {} needs a positive charging rate",
                st.node
            )));
        }
        if st.entrance_free_flow_wait < 0.0 || st.entrance_wait_slope < 0.0 || st.plug_in_fee < 0.0
        {
            return Err(Error::InvalidInput(format!(
                "station at node {} has negative wait or fee parameters",
                st.node
            )));
        }
        st.materialised_options()?;
    }

    let mut node_base: Vec<NodeId> = (0..n).collect();
    let mut depart: Vec<usize> = (0..n).collect();
    let mut plug = HashMap::new();
    let mut origin_start = HashMap::new();

    // extended nodes in station order: plug then out for an FCS, start for an origin
    for st in stations {
        if st.is_trip_origin_facility {
            if origins.contains(&st.node) {
                origin_start.insert(st.node, node_base.len());
                node_base.push(st.node);
            }
        } else {
            plug.insert(st.node, node_base.len());
            node_base.push(st.node);
            depart[st.node] = node_base.len();
            node_base.push(st.node);
        }
    }

    let mut arcs = Vec::new();
    for (i, ra) in base.arcs.iter().enumerate() {
        arcs.push(ExtendedArc {
            id: i,
            tail: depart[ra.tail],
            head: ra.head,
            kind: ArcKind::Road,
            base_node: ra.tail,
            road: Some(i),
            station: None,
            energy: ra.energy,
            free_flow_time: ra.free_flow_time,
            latency_slope: ra.latency_slope,
            base_toll: ra.toll,
            bus: None,
            at_origin: false,
        });
    }

    let mut station_arcs = vec![StationArcs::default(); stations.len()];
    for (si, st) in stations.iter().enumerate() {
        let options = st.materialised_options()?;
        let v = st.node;
        let push =
            |arcs: &mut Vec<ExtendedArc>, tail, head, kind, energy, fft, slope, toll, origin| {
                let id = arcs.len();
                arcs.push(ExtendedArc {
                    id,
                    tail,
                    head,
                    kind,
                    base_node: v,
                    road: None,
                    station: Some(si),
                    energy,
                    free_flow_time: fft,
                    latency_slope: slope,
                    base_toll: toll,
                    bus: if kind == ArcKind::ChargeAmount {
                        Some(st.bus)
                    } else {
                        None
                    },
                    at_origin: origin,
                });
                id
            };
        if st.is_trip_origin_facility {
            let Some(&start) = origin_start.get(&v) else {
                continue;
            };
            for &e in &options {
                let id = push(
                    &mut arcs,
                    start,
                    v,
                    ArcKind::ChargeAmount,
                    -e,
                    0.0,
                    0.0,
                    0.0,
                    true,
                );
                station_arcs[si].charge.push(id);
            }
        } else {
            let p = plug[&v];
            let out = depart[v];
            let ent = push(
                &mut arcs,
                v,
                p,
                ArcKind::Entrance,
                0.0,
                st.entrance_free_flow_wait,
                st.entrance_wait_slope,
                st.plug_in_fee,
                false,
            );
            let byp = push(
                &mut arcs,
                v,
                out,
                ArcKind::Bypass,
                0.0,
                0.0,
                0.0,
                0.0,
                false,
            );
            station_arcs[si].entrance = Some(ent);
            station_arcs[si].bypass = Some(byp);
            for &e in &options {
                let id = push(
                    &mut arcs,
                    p,
                    out,
                    ArcKind::ChargeAmount,
                    -e,
                    e / st.rate,
                    0.0,
                    0.0,
                    false,
                );
                station_arcs[si].charge.push(id);
            }
        }
    }

    let mut out_arcs = vec![Vec::new(); node_base.len()];
    for a in &arcs {
        out_arcs[a.tail].push(a.id);
    }

    Ok(ExtendedGraph {
        base: base.clone(),
        stations: stations.to_vec(),
        arcs,
        node_base,
        out_arcs,
        depart,
        origin_start,
        station_arcs,
        station_at,
    })
}
