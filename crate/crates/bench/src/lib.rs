//! Shared fixtures for the criterion benches.

use patchwork_core::simulate::sample_gp_dataset;
use patchwork_core::{Dataset, HyperParams, KernelSpec, SimSpec};

/// Kernel used by every bench: exponential, tau 10, rho 1, noise 1.
pub fn kernel() -> KernelSpec {
    KernelSpec::exponential(10.0, 1.0, 1.0).expect("valid kernel")
}

pub fn hyper() -> HyperParams {
    HyperParams::Shared(kernel())
}

/// GP draw on `[0, 10]^d`.
pub fn dataset(n: usize, d: usize, seed: u64) -> Dataset {
    sample_gp_dataset(&SimSpec::new(n, d, kernel(), seed)).expect("simulation succeeds")
}
