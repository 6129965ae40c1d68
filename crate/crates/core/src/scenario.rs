//! `.scn` scenario files: a TOML document with a `format_version`, named
//! sections, and units carried in every key name (`_min`, `_kwh`, `_mwh`,
//! `_usd_per_mwh`, ...).

use std::collections::{BTreeSet, HashMap};
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assignment::{SolveOptions, TransportModel};
use crate::error::{Error, Result};
use crate::espp::{VehicleClass, VehicleKind};
use crate::graph::{build_extended_graph, BaseGraph, ChargingStation, RoadArc};
use crate::power::{Generator, GridModel, Line, PowerNetwork};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub format_version: u32,
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub transport: TransportSection,
    pub power: PowerSection,
    pub classes: Vec<ClassSpec>,
    #[serde(default)]
    pub parameters: Parameters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportSection {
    pub nodes: Vec<String>,
    /// Consumption rate used when an arc gives `miles` instead of `energy_kwh`.
    #[serde(default = "default_miles_per_kwh")]
    pub miles_per_kwh: f64,
    /// Default latency slope, minutes per vehicle per epoch.
    #[serde(default = "default_latency_slope")]
    pub latency_slope_min: f64,
    pub arcs: Vec<ArcSpec>,
    #[serde(default)]
    pub stations: Vec<StationSpec>,
}

fn default_miles_per_kwh() -> f64 {
    25.0
}

fn default_latency_slope() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArcSpec {
    pub from: String,
    pub to: String,
    pub free_flow_time_min: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub miles: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_kwh: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_slope_min: Option<f64>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub toll_usd: f64,
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}

fn is_false(x: &bool) -> bool {
    !*x
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationSpec {
    pub node: String,
    pub bus: String,
    #[serde(default = "default_rate")]
    pub rate_kwh_per_min: f64,
    pub options_kwh: Vec<f64>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub entrance_wait_min: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub entrance_wait_slope_min: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub plug_in_fee_usd: f64,
    #[serde(default, skip_serializing_if = "is_false")]
    pub origin_facility: bool,
}

fn default_rate() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerSection {
    /// Per-unit base for the dual step size.
    #[serde(default = "default_base_mva")]
    pub base_mva: f64,
    pub buses: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slack: Option<String>,
    pub lines: Vec<LineSpec>,
    pub generators: Vec<GeneratorSpec>,
    #[serde(default)]
    pub loads: Vec<LoadSpec>,
    /// Overrides the derived EV demand box per bus.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub demand_box: Vec<DemandBoxSpec>,
}

fn default_base_mva() -> f64 {
    100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineSpec {
    pub from: String,
    pub to: String,
    pub reactance_pu: f64,
    pub limit_mwh: f64,
    /// Limit in the `to → from` direction when it differs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit_reverse_mwh: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub bus: String,
    pub a_usd_per_mwh2: f64,
    pub b_usd_per_mwh: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub c_usd: f64,
    #[serde(default)]
    pub g_min_mwh: f64,
    pub g_max_mwh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadSpec {
    pub bus: String,
    pub mwh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandBoxSpec {
    pub bus: String,
    #[serde(default)]
    pub min_mwh: f64,
    pub max_mwh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub origin: String,
    pub destination: String,
    /// Fraction of `parameters.total_vehicles`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub share: Option<f64>,
    /// Absolute demand, vehicles per epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vehicles: Option<f64>,
    #[serde(default)]
    pub initial_charge_kwh: f64,
    #[serde(default)]
    pub battery_capacity_kwh: f64,
    #[serde(default)]
    pub kind: ClassKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassKind {
    #[default]
    Ev,
    Icev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Parameters {
    pub total_vehicles: Option<f64>,
    pub value_of_time_usd_per_min: f64,
    /// Relative gap for every traffic assignment solve.
    pub assignment_tol: f64,
    pub assignment_max_iters: usize,
    pub max_paths: usize,
    pub initial_price_usd_per_mwh: f64,
    pub greedy_iters: usize,
    pub alpha: f64,
    pub dual_iters: usize,
    pub gamma0_usd_per_mwh: f64,
    pub dual_tol: f64,
    pub divergence_limit: f64,
    pub reserve_price_usd_per_mwh: f64,
    pub cone_samples: usize,
    pub uncertainty_samples: usize,
    pub adequacy_samples: usize,
    pub dual_bound_samples: usize,
    pub dual_bound_safety: f64,
    pub seed: u64,
}

impl Default for Parameters {
    fn default() -> Self {
        Self {
            total_vehicles: None,
            value_of_time_usd_per_min: 1e-3,
            assignment_tol: 1e-10,
            assignment_max_iters: 20_000,
            max_paths: crate::espp::DEFAULT_MAX_PATHS,
            initial_price_usd_per_mwh: 50.0,
            greedy_iters: 10,
            alpha: 20.0,
            dual_iters: 200,
            gamma0_usd_per_mwh: 57.5,
            dual_tol: 0.0,
            divergence_limit: 1e6,
            reserve_price_usd_per_mwh: 55.0,
            cone_samples: 500,
            uncertainty_samples: 500,
            adequacy_samples: 1000,
            dual_bound_samples: 256,
            dual_bound_safety: 1.5,
            seed: 1,
        }
    }
}

impl Parameters {
    pub fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            tol: self.assignment_tol,
            max_iters: self.assignment_max_iters,
            ..Default::default()
        }
    }
}

/// A scenario resolved into solver inputs.
#[derive(Debug, Clone)]
pub struct Instance {
    pub name: String,
    pub transport: TransportModel,
    pub grid: GridModel,
    pub base_mva: f64,
    /// EV demand box, MWh per bus.
    pub d_min: Vec<f64>,
    pub d_max: Vec<f64>,
    pub params: Parameters,
}

fn index_of(names: &[String], what: &str, name: &str) -> Result<usize> {
    names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| Error::Validation(format!("{what} references unknown name '{name}'")))
}

fn unique(names: &[String], what: &str) -> Result<()> {
    let mut seen = BTreeSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(Error::Validation(format!("duplicate {what} name '{n}'")));
        }
    }
    Ok(())
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self> {
        let sc: Scenario = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        sc.check_version()?;
        Ok(sc)
    }

    /// Parses `text` after replacing `key=value` entries. Bare keys address
    /// `[parameters]`; dotted keys address any table, with numeric segments
    /// indexing arrays (`power.lines.2.limit_mwh=180`).
    pub fn parse_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        if overrides.is_empty() {
            return Self::parse(text);
        }
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        for (key, value) in overrides {
            apply_override(&mut doc, key, value)?;
        }
        let sc: Scenario = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        sc.check_version()?;
        Ok(sc)
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        Self::load_with_overrides(path, &[])
    }

    pub fn load_with_overrides(path: &FsPath, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_with_overrides(&text, overrides)
    }

    fn check_version(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serialises to TOML")
    }

    /// SHA-256 of the canonical serialisation, hex encoded.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.to_toml().as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn class_demands(&self) -> Result<Vec<f64>> {
        self.classes
            .iter()
            .map(|c| match (c.vehicles, c.share) {
                (Some(v), None) => Ok(v),
                (None, Some(s)) => {
                    let total = self.parameters.total_vehicles.ok_or_else(|| {
                        Error::Validation(format!(
                            "class '{}' gives a share but total_vehicles is unset",
                            c.name
                        ))
                    })?;
                    Ok(s * total)
                }
                _ => Err(Error::Validation(format!(
                    "class '{}' must set exactly one of share or vehicles",
                    c.name
                ))),
            })
            .collect()
    }

    fn base_graph(&self) -> Result<BaseGraph> {
        let t = &self.transport;
        unique(&t.nodes, "transport node")?;
        if !(t.miles_per_kwh > 0.0) {
            return Err(Error::Validation("miles_per_kwh must be positive".into()));
        }
        let mut arcs = Vec::with_capacity(t.arcs.len());
        for a in &t.arcs {
            let tail = index_of(&t.nodes, "arc", &a.from)?;
            let head = index_of(&t.nodes, "arc", &a.to)?;
            let energy = match (a.miles, a.energy_kwh) {
                (Some(m), None) => m / t.miles_per_kwh,
                (None, Some(e)) => e,
                _ => {
                    return Err(Error::Validation(format!(
                        "arc {} -> {} must set exactly one of miles or energy_kwh",
                        a.from, a.to
                    )))
                }
            };
            let mut arc = RoadArc::new(
                tail,
                head,
                a.free_flow_time_min,
                a.latency_slope_min.unwrap_or(t.latency_slope_min),
                energy,
            );
            arc.toll = a.toll_usd;
            arcs.push(arc);
        }
        Ok(BaseGraph::new(t.nodes.clone(), arcs))
    }

    fn power_network(&self) -> Result<PowerNetwork> {
        let p = &self.power;
        unique(&p.buses, "bus")?;
        let bus = |what: &str, name: &str| index_of(&p.buses, what, name);
        let mut lines = Vec::new();
        for l in &p.lines {
            if !(l.reactance_pu > 0.0) {
                return Err(Error::Validation(format!(
                    "line {} - {} needs positive reactance",
                    l.from, l.to
                )));
            }
            lines.push(Line {
                from: bus("line", &l.from)?,
                to: bus("line", &l.to)?,
                susceptance: 1.0 / l.reactance_pu,
                limit_forward: l.limit_mwh,
                limit_backward: l.limit_reverse_mwh.unwrap_or(l.limit_mwh),
            });
        }
        let mut generators = Vec::new();
        for g in &p.generators {
            generators.push(Generator {
                bus: bus("generator", &g.bus)?,
                quadratic: g.a_usd_per_mwh2,
                linear: g.b_usd_per_mwh,
                constant: g.c_usd,
                g_min: g.g_min_mwh,
                g_max: g.g_max_mwh,
            });
        }
        let mut baseload = vec![0.0; p.buses.len()];
        for l in &p.loads {
            baseload[bus("load", &l.bus)?] += l.mwh;
        }
        let mut net = PowerNetwork {
            bus_names: p.buses.clone(),
            lines,
            generators,
            baseload,
            slack: 0,
        };
        net.slack = match &p.slack {
            Some(name) => bus("slack", name)?,
            None => net
                .default_slack()
                .ok_or_else(|| Error::Validation("power network has no generators".into()))?,
        };
        Ok(net)
    }

    /// Resolves names, enumerates paths, and checks that the grid can serve
    /// every EV demand in the declared box.
    pub fn build(&self) -> Result<Instance> {
        let params = &self.parameters;
        if self.classes.is_empty() {
            return Err(Error::Validation("scenario has no vehicle classes".into()));
        }
        let base = self.base_graph()?;
        let network = self.power_network()?;
        let nodes = &self.transport.nodes;

        let mut stations = Vec::new();
        for s in &self.transport.stations {
            let node = index_of(nodes, "station", &s.node)?;
            let bus = index_of(
                &network.bus_names,
                &format!("station at '{}'", s.node),
                &s.bus,
            )?;
            stations.push(ChargingStation {
                node,
                bus,
                rate: s.rate_kwh_per_min,
                options: s.options_kwh.clone(),
                entrance_free_flow_wait: s.entrance_wait_min,
                entrance_wait_slope: s.entrance_wait_slope_min,
                plug_in_fee: s.plug_in_fee_usd,
                is_trip_origin_facility: s.origin_facility,
            });
        }

        let demands = self.class_demands()?;
        let mut classes = Vec::new();
        let mut origins = BTreeSet::new();
        for (i, (c, m)) in self.classes.iter().zip(&demands).enumerate() {
            let origin = index_of(nodes, &format!("class '{}'", c.name), &c.origin)?;
            let destination = index_of(nodes, &format!("class '{}'", c.name), &c.destination)?;
            origins.insert(origin);
            let mut vc = match c.kind {
                ClassKind::Ev => VehicleClass::ev(
                    i,
                    origin,
                    destination,
                    *m,
                    c.initial_charge_kwh,
                    c.battery_capacity_kwh,
                ),
                ClassKind::Icev => VehicleClass::icev(i, origin, destination, *m),
            };
            vc.name = c.name.clone();
            classes.push(vc);
        }

        let graph = build_extended_graph(&base, &stations, &origins)?;
        let grid = GridModel::new(network)?;
        let n = grid.num_buses();
        let transport = TransportModel::new(
            graph,
            classes,
            n,
            params.value_of_time_usd_per_min,
            params.max_paths,
        )
        .map_err(|e| match e {
            Error::InfeasibleClass { class, .. } => Error::Validation(format!(
                "class '{}' has no energy-feasible path from {} to {}",
                self.classes[class].name,
                self.classes[class].origin,
                self.classes[class].destination
            )),
            other => other,
        })?;

        let (d_min, d_max) = self.demand_box(&transport, &grid)?;
        grid.validate_feasibility(&d_min, &d_max)?
            .into_result()
            .map_err(|e| Error::Validation(format!("demand box check: {e}")))?;

        Ok(Instance {
            name: self.name.clone(),
            transport,
            grid,
            base_mva: self.power.base_mva,
            d_min,
            d_max,
            params: params.clone(),
        })
    }

    /// Declared box, or per bus `Σ_q m_q · Σ_{stations at bus} max option`.
    fn demand_box(
        &self,
        transport: &TransportModel,
        grid: &GridModel,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = grid.num_buses();
        let mut d_min = vec![0.0; n];
        let mut d_max = vec![0.0; n];
        let total: f64 = transport
            .classes
            .iter()
            .filter(|c| c.kind == VehicleKind::Ev)
            .map(|c| c.demand_rate)
            .sum();
        for st in &transport.graph.stations {
            let top = st.options.iter().copied().fold(0.0, f64::max);
            d_max[st.bus] += total * top / 1000.0;
        }
        let mut declared: HashMap<usize, ()> = HashMap::new();
        for b in &self.power.demand_box {
            let i = index_of(&grid.network.bus_names, "demand_box", &b.bus)?;
            if declared.insert(i, ()).is_some() {
                return Err(Error::Validation(format!(
                    "demand_box lists bus '{}' twice",
                    b.bus
                )));
            }
            d_min[i] = b.min_mwh;
            d_max[i] = b.max_mwh;
        }
        Ok((d_min, d_max))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(doc: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let path: Vec<&str> = if key.contains('.') {
        key.split('.').collect()
    } else {
        vec!["parameters", key]
    };
    let bad = || {
        Error::Validation(format!(
            "override '{key}' does not address a scenario field"
        ))
    };
    let (last, parents) = path.split_last().ok_or_else(bad)?;
    let mut cur: &mut toml::Value = doc
        .entry(parents[0].to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    for seg in &parents[1..] {
        cur = match cur {
            toml::Value::Table(t) => t.get_mut(*seg).ok_or_else(bad)?,
            toml::Value::Array(a) => {
                let i: usize = seg.parse().map_err(|_| bad())?;
                a.get_mut(i).ok_or_else(bad)?
            }
            _ => return Err(bad()),
        };
    }
    let value = parse_value(raw);
    match cur {
        toml::Value::Table(t) if !parents.is_empty() => {
            t.insert(last.to_string(), value);
        }
        toml::Value::Array(a) => {
            let i: usize = last.parse().map_err(|_| bad())?;
            *a.get_mut(i).ok_or_else(bad)? = value;
        }
        _ => return Err(bad()),
    }
    Ok(())
}
