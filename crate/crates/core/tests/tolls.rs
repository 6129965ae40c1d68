mod common;

use common::{random_transport, toll_gap, untolled_gap};

#[test]
fn marginal_tolls_reproduce_the_social_optimum() {
    let mut tolls_matter = 0;
    for seed in 0..20 {
        let (model, prices) = random_transport(seed);
        assert!(model.pathsets.iter().all(|p| p.paths.len() >= 2));
        let (diff, total) = toll_gap(&model, &prices, None);
        assert!(
            diff <= 1e-4 * total,
            "seed {seed}: ‖Δλ‖∞ = {diff}, Σm = {total}"
        );
        tolls_matter += usize::from(untolled_gap(&model, &prices) > 1e-2 * total);
    }
    assert!(
        tolls_matter >= 5,
        "untolled equilibrium differed in only {tolls_matter} instances"
    );
}

#[test]
fn corridor_tolls_reproduce_the_joint_optimum() {
    let path =
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/corridor9.scn");
    let inst = evcosim_core::Scenario::load(&path)
        .unwrap()
        .build()
        .unwrap();
    let opts = inst.params.solve_options();
    let so = evcosim_core::coordination::solve_social_optimum(&inst.transport, &inst.grid, &opts)
        .unwrap();
    let (diff, total) = toll_gap(&inst.transport, so.prices(), Some(&so.state.arc_flows));
    assert!(diff <= 1e-4 * total, "‖Δλ‖∞ = {diff}, Σm = {total}");
}
