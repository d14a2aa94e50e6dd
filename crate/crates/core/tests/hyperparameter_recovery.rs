use patchwork_core::simulate::sample_gp_dataset;
use patchwork_core::{optimize_hyperparams, KernelSpec, OptimizeConfig, Partitioned, SimSpec};

#[test]
fn recovers_identifiable_parameters_in_one_dimension() {
    let truth = KernelSpec::exponential(10.0, 1.0, 1.0).unwrap();
    let data = sample_gp_dataset(&SimSpec::new(500, 1, truth, 77)).unwrap();
    let part = Partitioned::new(&data.x, &data.y, 4, 3, 1).unwrap();
    let init = KernelSpec::exponential(3.0, 0.4, 0.3).unwrap();
    let result = optimize_hyperparams(&init, &part, &OptimizeConfig { budget: 400, restarts: 3, seed: 5 }).unwrap();
    let at_truth = patchwork_core::neg_log_marginal(&truth.into(), &part).unwrap().value;
    let got = result.best.log_params();
    let want = truth.log_params();
    assert!(result.best_value <= at_truth, "{} > {at_truth}", result.best_value);
    // in one dimension only tau / rho and the noise are identifiable
    let ratio = |p: &[f64]| p[0] - p[1];
    assert!((ratio(&got) - ratio(&want)).abs() <= 0.5, "log params {got:?} vs {want:?}");
    assert!((got[2] - want[2]).abs() <= 0.5, "log params {got:?} vs {want:?}");
    assert!(result.trace.len() <= 400);
}

#[test]
fn starting_at_the_truth_never_makes_things_worse() {
    let truth = KernelSpec::squared_exponential(10.0, 1.0, 1.0).unwrap();
    let data = sample_gp_dataset(&SimSpec::new(300, 2, truth, 78)).unwrap();
    let part = Partitioned::new(&data.x, &data.y, 4, 3, 1).unwrap();
    let start = patchwork_core::neg_log_marginal(&truth.into(), &part).unwrap().value;
    let result = optimize_hyperparams(&truth, &part, &OptimizeConfig { budget: 60, restarts: 3, seed: 0 }).unwrap();
    assert!(result.best_value <= start);
}
