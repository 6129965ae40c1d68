//! Command line front end: loads a scenario, runs one pipeline and writes
//! CSV outputs plus a `report.toml` run summary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use evcosim_core::coordination::{
    infeasibility_bound, log_log_slope, run_dual_decomposition, run_greedy_pricing,
    solve_social_optimum, CoordinationTrace, DualOptions, GreedyOptions, SocialOptimum,
};
use evcosim_core::reserves::{
    estimate_dual_bound, overlay_costs, procure_for_bounds, sample_dual_cone,
    sample_uncertainty_set, verify_reserve_adequacy_detailed, Deployment, ProcurementOptions,
};
use evcosim_core::{compute_marginal_tolls, Instance, Scenario};

pub mod exit {
    pub const SUCCESS: i32 = 0;
    /// Bad command line (clap's own code).
    pub const USAGE: i32 = 2;
    /// Scenario could not be read, parsed or validated.
    pub const INVALID_INPUT: i32 = 3;
    /// A solver hit its iteration cap or diverged.
    pub const NON_CONVERGENCE: i32 = 4;
    /// Dispatch, reserve LP or uncertainty set infeasible.
    pub const INFEASIBLE: i32 = 5;
    /// Output files could not be written.
    pub const IO: i32 = 6;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] evcosim_core::Error),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{0}")]
    Usage(String),
    /// Outputs were written but the run ended in a failure state.
    #[error("{message}")]
    Outcome { code: i32, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use evcosim_core::Error as E;
        match self {
            CliError::Core(e) => match e {
                E::NonConvergence { .. } | E::Divergence { .. } => exit::NON_CONVERGENCE,
                E::DispatchInfeasible(_)
                | E::LpInfeasible
                | E::LpUnbounded
                | E::DegenerateSample(_)
                | E::EmptyUncertaintySet(_) => exit::INFEASIBLE,
                _ => exit::INVALID_INPUT,
            },
            CliError::Io { .. } | CliError::Csv { .. } => exit::IO,
            CliError::Usage(_) => exit::USAGE,
            CliError::Outcome { code, .. } => *code,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "evcosim",
    version,
    about = "Coupled power and traffic co-simulation with EV charging"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Scenario file (.scn)
    pub scenario: PathBuf,
    /// Parameter overrides as key=value; dotted keys address any table
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dual step size in the scenario's per-unit convention
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Iteration cap of the command's main loop
    #[arg(long)]
    pub iters: Option<usize>,
    /// Convergence tolerance of the command's main loop
    #[arg(long)]
    pub tol: Option<f64>,
    /// Add per-line duals and per-arc flows to trace.csv
    #[arg(long)]
    pub trace: bool,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// Worker threads for sample-level parallelism
    #[arg(long)]
    pub parallel_samples: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// List every energy-feasible path of every class
    EnumeratePaths(Common),
    /// Solve the joint social optimum
    SocialOptimum(Common),
    /// Run greedy price iteration and look for cycles
    Greedy(Common),
    /// Run constant-step dual decomposition
    DualDecomp {
        #[command(flatten)]
        common: Common,
        /// Also procure reserves at every iteration and write overlay.csv
        #[arg(long)]
        overlay: bool,
    },
    /// Procure and verify reserves for the k-th iteration bound or explicit (a, w)
    Reserves {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with_all = ["a", "w"])]
        k: Option<usize>,
        /// Bound on |1ᵀη| in MWh
        #[arg(long, requires = "w")]
        a: Option<f64>,
        /// Bound on line overflow in MWh, every directed line
        #[arg(long, requires = "a")]
        w: Option<f64>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::EnumeratePaths(_) => "enumerate-paths",
            Command::SocialOptimum(_) => "social-optimum",
            Command::Greedy(_) => "greedy",
            Command::DualDecomp { .. } => "dual-decomp",
            Command::Reserves { .. } => "reserves",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::EnumeratePaths(c) | Command::SocialOptimum(c) | Command::Greedy(c) => c,
            Command::DualDecomp { common, .. } | Command::Reserves { common, .. } => common,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub command: String,
    pub scenario: String,
    pub scenario_hash: String,
    pub wall_time_s: f64,
    pub outputs: Vec<OutputFile>,
    pub metrics: BTreeMap<String, f64>,
    pub notes: BTreeMap<String, String>,
}

impl RunReport {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "{} {} hash={}",
            self.command,
            self.scenario,
            &self.scenario_hash[..12]
        );
        for (k, v) in &self.metrics {
            if *v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e9) {
                s.push_str(&format!(" {k}={v:.3e}"));
            } else {
                s.push_str(&format!(" {k}={}", (v * 1e6).round() / 1e6));
            }
        }
        for (k, v) in &self.notes {
            s.push_str(&format!(" {k}={v}"));
        }
        s
    }
}

/// Overrides from positional `key=value` arguments followed by the explicit
/// flags, so flags win.
fn collect_overrides(cmd: &Command) -> CliResult<Vec<(String, String)>> {
    let c = cmd.common();
    let mut out = Vec::new();
    for raw in &c.overrides {
        let (k, v) = raw
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override '{raw}' is not key=value")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = c.seed {
        out.push(("seed".into(), seed.to_string()));
    }
    if let Some(alpha) = c.alpha {
        out.push(("alpha".into(), format_float(alpha)));
    }
    if let Some(iters) = c.iters {
        let key = match cmd {
            Command::Greedy(_) => "greedy_iters",
            Command::DualDecomp { .. } => "dual_iters",
            _ => "assignment_max_iters",
        };
        out.push((key.into(), iters.to_string()));
    }
    if let Some(tol) = c.tol {
        let key = match cmd {
            Command::DualDecomp { .. } => "dual_tol",
            _ => "assignment_tol",
        };
        out.push((key.into(), format_float(tol)));
    }
    Ok(out)
}

fn format_float(v: f64) -> String {
    let s = format!("{v:?}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

pub fn run(cli: &Cli) -> CliResult<RunReport> {
    let started = Instant::now();
    let cmd = &cli.command;
    let common = cmd.common();
    if let Some(n) = common.parallel_samples {
        if n == 0 {
            return Err(CliError::Usage(
                "--parallel-samples needs at least 1 thread".into(),
            ));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let overrides = collect_overrides(cmd)?;
    let scenario = Scenario::load_with_overrides(&common.scenario, &overrides)?;
    let hash = scenario.digest();
    fs::create_dir_all(&common.out_dir).map_err(|source| CliError::Io {
        path: common.out_dir.clone(),
        source,
    })?;
    let instance = scenario.build()?;
    let mut ctx = Context {
        out_dir: common.out_dir.clone(),
        outputs: Vec::new(),
        metrics: BTreeMap::new(),
        notes: BTreeMap::new(),
    };
    log::info!("{} on {} ({})", cmd.name(), scenario.name, &hash[..12]);
    let outcome = match cmd {
        Command::EnumeratePaths(_) => enumerate_paths(&instance, &mut ctx),
        Command::SocialOptimum(c) => social_optimum(&instance, c, &mut ctx),
        Command::Greedy(c) => greedy(&instance, c, &mut ctx),
        Command::DualDecomp { common, overlay } => {
            dual_decomp(&instance, common, *overlay, &mut ctx)
        }
        Command::Reserves { common, k, a, w } => {
            reserves(&instance, common, *k, a.zip(*w), &mut ctx)
        }
    };
    let report = RunReport {
        command: cmd.name().to_string(),
        scenario: scenario.name.clone(),
        scenario_hash: hash,
        wall_time_s: started.elapsed().as_secs_f64(),
        outputs: ctx.outputs.clone(),
        metrics: ctx.metrics.clone(),
        notes: ctx.notes.clone(),
    };
    if !report.outputs.is_empty() {
        let path = ctx.out_dir.join("report.toml");
        let text = toml::to_string(&report).expect("report serialises to TOML");
        fs::write(&path, text).map_err(|source| CliError::Io { path, source })?;
    }
    outcome.map(|()| report)
}

struct Context {
    out_dir: PathBuf,
    outputs: Vec<OutputFile>,
    metrics: BTreeMap<String, f64>,
    notes: BTreeMap<String, String>,
}

impl Context {
    fn write_csv(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> CliResult<()> {
        let path = self.out_dir.join(name);
        let csv_err = |source| CliError::Csv {
            path: path.clone(),
            source,
        };
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).map_err(csv_err)?;
        for row in rows {
            w.write_record(row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Io {
            path: path.clone(),
            source: e.into_error(),
        })?;
        fs::write(&path, &bytes).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        self.outputs.push(OutputFile {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    fn metric(&mut self, key: &str, value: f64) {
        self.metrics.insert(key.to_string(), value);
    }

    fn note(&mut self, key: &str, value: impl Into<String>) {
        self.notes.insert(key.to_string(), value.into());
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// SHA-256 of a file on disk, hex encoded.
pub fn file_digest(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

fn f(v: f64) -> String {
    v.to_string()
}

fn enumerate_paths(inst: &Instance, ctx: &mut Context) -> CliResult<()> {
    let graph = &inst.transport.graph;
    let header: Vec<String> = [
        "class",
        "path",
        "arcs",
        "charge_kwh",
        "final_soc_kwh",
        "free_flow_time_min",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut rows = Vec::new();
    let mut total = 0usize;
    for (class, set) in inst.transport.classes.iter().zip(&inst.transport.pathsets) {
        for (i, path) in set.paths.iter().enumerate() {
            let charge: f64 = path.arcs.iter().map(|&a| graph.arcs[a].charge_kwh()).sum();
            let time: f64 = path
                .arcs
                .iter()
                .map(|&a| graph.arcs[a].free_flow_time)
                .sum();
            let labels: Vec<String> = path.arcs.iter().map(|&a| graph.arc_label(a)).collect();
            rows.push(vec![
                class.name.clone(),
                i.to_string(),
                labels.join(" | "),
                f(charge),
                path.soc.last().map(|v| f(*v)).unwrap_or_default(),
                f(time),
            ]);
        }
        total += set.paths.len();
        ctx.metric(&format!("paths.{}", class.name), set.paths.len() as f64);
    }
    ctx.metric("paths", total as f64);
    ctx.write_csv("paths.csv", &header, &rows)
}

fn dispatch_csv(inst: &Instance, so: &SocialOptimum, ctx: &mut Context) -> CliResult<()> {
    let net = &inst.grid.network;
    let header: Vec<String> = [
        "bus",
        "name",
        "ev_demand_mwh",
        "baseload_mwh",
        "generation_mwh",
        "price_usd_per_mwh",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows: Vec<Vec<String>> = (0..inst.grid.num_buses())
        .map(|v| {
            vec![
                v.to_string(),
                net.bus_names[v].clone(),
                f(so.state.demand[v]),
                f(net.baseload[v]),
                f(so.dispatch.g[v]),
                f(so.dispatch.prices[v]),
            ]
        })
        .collect();
    ctx.write_csv("dispatch.csv", &header, &rows)
}

fn flows_csv(inst: &Instance, so: &SocialOptimum, ctx: &mut Context) -> CliResult<()> {
    let graph = &inst.transport.graph;
    let tolls = compute_marginal_tolls(graph, &so.state.arc_flows, inst.transport.gamma);
    let header: Vec<String> = ["arc", "label", "flow_vehicles", "marginal_toll_usd"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<String>> = (0..graph.num_arcs())
        .map(|a| {
            vec![
                a.to_string(),
                graph.arc_label(a),
                f(so.state.arc_flows[a]),
                f(tolls[a]),
            ]
        })
        .collect();
    ctx.write_csv("flows.csv", &header, &rows)
}

/// Column names of a trace line. Per-line duals and per-arc flows only with
/// `wide`.
fn trace_header(inst: &Instance, wide: bool) -> Vec<String> {
    let mut h: Vec<String> = [
        "k",
        "itso_usd",
        "ipso_usd",
        "combined_usd",
        "dual_usd",
        "gamma_bal_usd_per_mwh",
        "balance_mwh",
        "max_overflow_mwh",
        "infeasibility_l2",
        "infeasibility_linf",
        "bound_mwh",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let names = &inst.grid.network.bus_names;
    for prefix in ["price", "demand", "generation"] {
        h.extend(names.iter().map(|n| format!("{prefix}_{n}")));
    }
    if wide {
        for line in &inst.grid.network.lines {
            let (a, b) = (&names[line.from], &names[line.to]);
            h.push(format!("mu_{a}-{b}"));
            h.push(format!("mu_{b}-{a}"));
        }
        let g = &inst.transport.graph;
        h.extend((0..g.num_arcs()).map(|a| format!("flow_{}", g.arc_label(a))));
    }
    h
}

fn trace_rows(
    trace: &CoordinationTrace,
    wide: bool,
    bound: impl Fn(usize) -> Option<f64>,
) -> Vec<Vec<String>> {
    trace
        .rows
        .iter()
        .map(|r| {
            let inf = &r.infeasibility;
            let max_over = inf
                .flow
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
                .max(0.0);
            let mut row = vec![
                r.k.to_string(),
                f(r.itso_objective),
                f(r.ipso_objective),
                f(r.combined_objective),
                r.dual_objective.map(f).unwrap_or_default(),
                f(r.gamma_bal),
                f(inf.balance),
                f(max_over),
                f(inf.norm2()),
                f(inf.norm_inf()),
                bound(r.k).map(f).unwrap_or_default(),
            ];
            row.extend(r.prices.iter().map(|v| f(*v)));
            row.extend(r.demand.iter().map(|v| f(*v)));
            row.extend(r.generation.iter().map(|v| f(*v)));
            if wide {
                row.extend(r.mu.iter().map(|v| f(*v)));
                row.extend(r.arc_flows.iter().map(|v| f(*v)));
            }
            row
        })
        .collect()
}

fn so_trace(inst: &Instance, so: &SocialOptimum) -> CoordinationTrace {
    use evcosim_core::coordination::{primal_infeasibility, TraceRow};
    let grid = &inst.grid;
    CoordinationTrace {
        rows: vec![TraceRow {
            k: 0,
            prices: so.dispatch.prices.clone(),
            gamma_bal: so.dispatch.gamma_bal,
            mu: so.dispatch.mu.clone(),
            arc_flows: so.state.arc_flows.clone(),
            demand: so.state.demand.clone(),
            generation: so.dispatch.g.clone(),
            infeasibility: primal_infeasibility(grid, &so.state.demand, &so.dispatch.g),
            itso_objective: so.travel_cost,
            ipso_objective: so.generation_cost,
            combined_objective: so.objective,
            dual_objective: None,
        }],
    }
}

fn social_optimum(inst: &Instance, c: &Common, ctx: &mut Context) -> CliResult<()> {
    let so = solve_social_optimum(&inst.transport, &inst.grid, &inst.params.solve_options())?;
    ctx.metric("objective", so.objective);
    ctx.metric("travel_cost", so.travel_cost);
    ctx.metric("generation_cost", so.generation_cost);
    ctx.metric("relative_gap", so.relative_gap);
    ctx.metric("iterations", so.iterations as f64);
    ctx.metric("kkt_max", so.dispatch.kkt.max());
    ctx.metric("price_spread", so.dispatch.price_spread());
    let trace = so_trace(inst, &so);
    ctx.write_csv(
        "trace.csv",
        &trace_header(inst, c.trace),
        &trace_rows(&trace, c.trace, |_| None),
    )?;
    dispatch_csv(inst, &so, ctx)?;
    flows_csv(inst, &so, ctx)
}

fn greedy(inst: &Instance, c: &Common, ctx: &mut Context) -> CliResult<()> {
    let p = &inst.params;
    let opts = p.solve_options();
    let so = solve_social_optimum(&inst.transport, &inst.grid, &opts)?;
    let out = run_greedy_pricing(
        &inst.transport,
        &inst.grid,
        &GreedyOptions {
            initial_price: p.initial_price_usd_per_mwh,
            max_iters: p.greedy_iters,
            assignment: opts,
        },
    )?;
    ctx.metric("so_objective", so.objective);
    ctx.metric("iterations", out.trace.rows.len().saturating_sub(1) as f64);
    if let Some(cycle) = &out.cycle {
        ctx.metric("cycle_period", cycle.period as f64);
        ctx.metric("cycle_start", cycle.start as f64);
        for (i, obj) in cycle.phase_objectives.iter().enumerate() {
            ctx.metric(&format!("phase_objective_{i}"), *obj);
        }
    } else {
        ctx.note("cycle", "none");
    }
    ctx.write_csv(
        "trace.csv",
        &trace_header(inst, c.trace),
        &trace_rows(&out.trace, c.trace, |_| None),
    )?;
    if let Some((k, why)) = out.infeasible_at {
        ctx.note("infeasible_at", k.to_string());
        return Err(CliError::Outcome {
            code: exit::INFEASIBLE,
            message: format!("dispatch infeasible at greedy iteration {k} (load shedding): {why}"),
        });
    }
    Ok(())
}

fn dual_options(inst: &Instance, reference: Option<f64>) -> DualOptions {
    let p = &inst.params;
    DualOptions {
        alpha: p.alpha,
        base_mva: inst.base_mva,
        gamma0: p.gamma0_usd_per_mwh,
        mu0: None,
        max_iters: p.dual_iters,
        tol: p.dual_tol,
        reference,
        divergence_limit: p.divergence_limit,
        assignment: p.solve_options(),
    }
}

fn procurement_options(inst: &Instance) -> ProcurementOptions {
    let p = &inst.params;
    ProcurementOptions {
        xi: vec![p.reserve_price_usd_per_mwh; inst.grid.num_buses()],
        cone_samples: p.cone_samples,
        uncertainty_samples: p.uncertainty_samples,
        seed: p.seed,
    }
}

fn dual_decomp(inst: &Instance, c: &Common, overlay: bool, ctx: &mut Context) -> CliResult<()> {
    let p = &inst.params;
    let so = solve_social_optimum(&inst.transport, &inst.grid, &p.solve_options())?;
    let opts = dual_options(inst, Some(so.objective));
    let d_hat = estimate_dual_bound(
        &inst.grid,
        &inst.d_min,
        &inst.d_max,
        p.dual_bound_samples,
        p.dual_bound_safety,
        p.seed,
    )?;
    let trace = run_dual_decomposition(&inst.transport, &inst.grid, &opts)?;
    let step = opts.effective_step();
    let bound = |k: usize| infeasibility_bound(k, step, d_hat.estimate).ok();
    let last = trace
        .rows
        .last()
        .expect("dual decomposition records iteration 0");
    let rel = (last.combined_objective - so.objective).abs() / so.objective.abs();
    ctx.metric("so_objective", so.objective);
    ctx.metric("final_combined", last.combined_objective);
    ctx.metric("final_relative_error", rel);
    ctx.metric("final_infeasibility_l2", last.infeasibility.norm2());
    ctx.metric("iterations", last.k as f64);
    ctx.metric("effective_step", step);
    ctx.metric("dual_bound", d_hat.estimate);
    if let Some(s) = log_log_slope(trace.rows.iter().map(|r| (r.k, r.infeasibility.norm2()))) {
        ctx.metric("loglog_slope", s);
    }
    let violations = trace
        .rows
        .iter()
        .filter(|r| r.k >= 1 && bound(r.k).is_some_and(|b| r.infeasibility.norm_inf() > b))
        .count();
    ctx.metric("bound_violations", violations as f64);
    ctx.write_csv(
        "trace.csv",
        &trace_header(inst, c.trace),
        &trace_rows(&trace, c.trace, bound),
    )?;
    if overlay {
        let costs = overlay_costs(
            &inst.grid,
            &trace.rows,
            &inst.d_min,
            &inst.d_max,
            &procurement_options(inst),
        )?;
        let header: Vec<String> = ["k", "dual_usd", "reserve_cost_usd", "overlay_usd", "so_usd"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let rows: Vec<Vec<String>> = trace
            .rows
            .iter()
            .zip(&costs)
            .map(|(r, cost)| {
                let dual = r.dual_objective.unwrap_or(f64::NAN);
                vec![
                    r.k.to_string(),
                    f(dual),
                    f(*cost),
                    f(dual + cost),
                    f(so.objective),
                ]
            })
            .collect();
        let min_gap = trace
            .rows
            .iter()
            .zip(&costs)
            .map(|(r, cost)| r.dual_objective.unwrap_or(f64::NAN) + cost - so.objective)
            .fold(f64::INFINITY, f64::min);
        ctx.metric("overlay_min_gap", min_gap);
        ctx.metric("final_reserve_cost", *costs.last().unwrap_or(&0.0));
        ctx.write_csv("overlay.csv", &header, &rows)?;
    }
    if p.dual_tol > 0.0 && last.k == p.dual_iters {
        let met = rel <= p.dual_tol;
        if !met {
            return Err(CliError::Outcome {
                code: exit::NON_CONVERGENCE,
                message: format!(
                    "dual decomposition did not reach tolerance {} within {} iterations (relative error {rel:e})",
                    p.dual_tol, p.dual_iters
                ),
            });
        }
    }
    Ok(())
}

fn reserves(
    inst: &Instance,
    c: &Common,
    k: Option<usize>,
    explicit: Option<(f64, f64)>,
    ctx: &mut Context,
) -> CliResult<()> {
    let _ = c;
    let p = &inst.params;
    let grid = &inst.grid;
    let (a, w) = match (k, explicit) {
        (_, Some(aw)) => aw,
        (Some(k), None) => {
            let d_hat = estimate_dual_bound(
                grid,
                &inst.d_min,
                &inst.d_max,
                p.dual_bound_samples,
                p.dual_bound_safety,
                p.seed,
            )?;
            let step = dual_options(inst, None).effective_step();
            let b = infeasibility_bound(k, step, d_hat.estimate)?;
            ctx.metric("dual_bound", d_hat.estimate);
            ctx.metric("k", k as f64);
            (b, b)
        }
        (None, None) => {
            return Err(CliError::Usage(
                "reserves needs --k or both --a and --w".into(),
            ))
        }
    };
    ctx.metric("a_mwh", a);
    ctx.metric("w_mwh", w);
    let opts = procurement_options(inst);
    let cone = sample_dual_cone(grid, opts.cone_samples, opts.seed);
    let w_vec = vec![w; grid.num_directed_lines()];
    let (plan, set, samples) =
        procure_for_bounds(grid, &inst.d_min, &inst.d_max, a, w_vec, &cone, &opts)?;
    let fresh = sample_uncertainty_set(
        grid,
        &set,
        p.adequacy_samples,
        p.seed.wrapping_add(1),
        false,
    )?;
    let (report, outcomes) = verify_reserve_adequacy_detailed(grid, &plan.r, &fresh.samples)?;

    ctx.metric("reserve_cost", plan.cost);
    ctx.metric("cone_samples", plan.cone_samples as f64);
    ctx.metric("uncertainty_samples", plan.uncertainty_samples as f64);
    ctx.metric(
        "hit_and_run_samples",
        (samples.hit_and_run + fresh.hit_and_run) as f64,
    );
    ctx.metric("lp_residual", plan.certificate.max());
    ctx.metric("adequacy", report.fraction());
    ctx.metric("adequacy_samples", report.samples as f64);

    let names = &grid.network.bus_names;
    let header: Vec<String> = ["bus", "name", "r_mwh", "xi_usd_per_mwh", "cost_usd"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<String>> = (0..grid.num_buses())
        .map(|v| {
            vec![
                v.to_string(),
                names[v].clone(),
                f(plan.r[v]),
                f(plan.xi[v]),
                f(plan.r[v] * plan.xi[v]),
            ]
        })
        .collect();
    ctx.write_csv("reserves.csv", &header, &rows)?;

    let header: Vec<String> = [
        "sample",
        "feasible",
        "imbalance_mwh",
        "max_overflow_mwh",
        "min_violation_mwh",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows: Vec<Vec<String>> = fresh
        .samples
        .iter()
        .zip(&outcomes)
        .enumerate()
        .map(|(i, (eta, out))| {
            let imbalance: f64 = eta.iter().sum();
            let over = grid
                .flows(eta)
                .iter()
                .zip(&grid.limits)
                .map(|(fl, cap)| fl - cap)
                .fold(0.0_f64, f64::max);
            let (ok, viol) = match out {
                Deployment::Feasible(_) => ("1", 0.0),
                Deployment::Infeasible { min_violation } => ("0", *min_violation),
            };
            vec![
                i.to_string(),
                ok.to_string(),
                f(imbalance),
                f(over),
                f(viol),
            ]
        })
        .collect();
    ctx.write_csv("adequacy.csv", &header, &rows)
}
