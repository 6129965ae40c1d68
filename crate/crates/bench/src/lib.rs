//! Fixtures shared by the criterion benches.

use std::path::Path;

use evcosim_core::{Instance, Scenario};

/// The corridor scenario shipped in `scenarios/`.
pub fn corridor() -> Instance {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/corridor9.scn");
    Scenario::load(&path)
        .and_then(|s| s.build())
        .expect("corridor scenario builds")
}

/// EV demand at the midpoint of the scenario's demand box.
pub fn mid_demand(inst: &Instance) -> Vec<f64> {
    inst.d_min
        .iter()
        .zip(&inst.d_max)
        .map(|(lo, hi)| 0.5 * (lo + hi))
        .collect()
}
