//! Co-simulation of a DC power network and an EV-aware traffic network.
//!
//! The transportation side lives in [`graph`], [`espp`] and [`assignment`];
//! the power side in [`power`]; the two are coupled in [`coordination`] and
//! hedged against charging uncertainty in [`reserves`]. [`scenario`] reads
//! and writes the `.scn` input format.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod assignment;
pub mod coordination;
pub mod error;
pub mod espp;
pub mod graph;
pub mod lp;
pub mod power;
pub mod qp;
pub mod reserves;
pub mod scenario;

pub use assignment::{
    compute_marginal_tolls, solve_ctap, solve_user_equilibrium, Assignment, DemandMap, FlowState,
    SolveOptions, TransportModel,
};
pub use error::{Error, Result};
pub use espp::{enumerate_feasible_paths, Path, PathSet, VehicleClass, VehicleKind};
pub use graph::{
    build_extended_graph, ArcKind, BaseGraph, ChargingStation, ExtendedGraph, RoadArc,
};
pub use power::{compute_ptdf, DispatchResult, Generator, GridModel, Line, PowerNetwork};
pub use reserves::{
    deploy_reserve, estimate_dual_bound, procure_reserves, sample_dual_cone,
    sample_uncertainty_set, verify_reserve_adequacy, AdequacyReport, Deployment, DualBound,
    DualConeSample, ReservePlan, UncertaintySet,
};
pub use scenario::{Instance, Parameters, Scenario};
