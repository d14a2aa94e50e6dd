//! Patchwork kriging: Gaussian process regression over a recursive spatial
//! partition, with local models stitched together by pseudo observations
//! that force neighbouring predictions to agree along region interfaces.

pub mod bundle;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod kernels;
pub mod likelihood;
pub mod metrics;
pub mod model;
pub mod partition;
pub mod points;
pub mod reference;
pub mod simulate;
pub mod sparse_linalg;

pub use dataset::Dataset;
pub use error::{Error, Result};
pub use kernels::{HyperParams, KernelFamily, KernelSpec};
pub use likelihood::{neg_log_marginal, optimize_hyperparams, NLState, OptimizeConfig, OptimizeResult};
pub use metrics::MetricReport;
pub use model::{BoundaryPrediction, FitTimings, Partitioned, PatchworkModel, Prediction};
pub use partition::{BoundarySet, SpatialTree};
pub use points::Points;
pub use simulate::{Domain, SimSpec};
