//! Synthetic GP datasets and test-location generators.

use log::warn;
use nalgebra::DVector;
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::partition::{BoundarySet, SpatialTree, TreeNode};
use crate::points::{squared_distance, Points};

pub const SAMPLE_LIMIT: usize = 20_000;
const SAMPLE_JITTER: f64 = 1e-10;

/// Axis-aligned box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Domain {
    pub fn cube(d: usize, lo: f64, hi: f64) -> Self {
        Self {
            lower: vec![lo; d],
            upper: vec![hi; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    fn validate(&self) -> Result<()> {
        if self.lower.is_empty() || self.lower.len() != self.upper.len() {
            return Err(Error::InvalidInput("domain bounds must be nonempty and of equal length".into()));
        }
        if self.lower.iter().zip(&self.upper).any(|(lo, hi)| lo.is_nan() || hi.is_nan() || lo >= hi) {
            return Err(Error::InvalidInput("domain lower bounds must be below upper bounds".into()));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Points {
        let mut data = Vec::with_capacity(n * self.dim());
        for _ in 0..n {
            for (lo, hi) in self.lower.iter().zip(&self.upper) {
                data.push(rng.random_range(*lo..*hi));
            }
        }
        Points::new(self.dim(), data).expect("dimension is positive")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub n: usize,
    pub kernel: KernelSpec,
    pub domain: Domain,
    pub seed: u64,
}

impl SimSpec {
    /// `n` points in `[0, 10]^d`.
    pub fn new(n: usize, d: usize, kernel: KernelSpec, seed: u64) -> Self {
        Self {
            n,
            kernel,
            domain: Domain::cube(d, 0.0, 10.0),
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }
}

/// Draws a zero-mean GP sample at `x` by dense Cholesky.
pub fn sample_latent<R: Rng + ?Sized>(kernel: &KernelSpec, x: &Points, rng: &mut R) -> Result<Vec<f64>> {
    if x.len() > SAMPLE_LIMIT {
        return Err(Error::TooLarge {
            what: "dense GP sample",
            size: x.len(),
            limit: SAMPLE_LIMIT,
        });
    }
    let mut c = kernel.cross_cov(x, x)?;
    for i in 0..c.nrows() {
        c[(i, i)] += SAMPLE_JITTER * kernel.tau;
    }
    let chol = c
        .cholesky()
        .ok_or_else(|| Error::Numerical("sampling covariance is not positive definite".into()))?;
    let z = DVector::from_iterator(x.len(), (0..x.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
    Ok((chol.l() * z).iter().copied().collect())
}

/// Uniform inputs, a latent GP draw and Gaussian observation noise.
pub fn sample_gp_dataset(spec: &SimSpec) -> Result<Dataset> {
    spec.domain.validate()?;
    if spec.n == 0 {
        return Err(Error::InvalidInput("sample count must be at least 1".into()));
    }
    if spec.n > SAMPLE_LIMIT {
        return Err(Error::TooLarge {
            what: "dense GP sample",
            size: spec.n,
            limit: SAMPLE_LIMIT,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let x = spec.domain.sample(spec.n, &mut rng);
    let f = sample_latent(&spec.kernel, &x, &mut rng)?;
    let sd = spec.kernel.noise_var.sqrt();
    let y = f.iter().map(|v| v + sd * rng.sample::<f64, _>(StandardNormal)).collect();
    Dataset::new(x, y, Some(f))
}

/// A test location on the interface between leaves `k < l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryTarget {
    pub point: Vec<f64>,
    pub node: usize,
    pub k: usize,
    pub l: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionTargets {
    pub interior: Points,
    pub boundary: Vec<BoundaryTarget>,
}

/// Rough interface area of a split: bounding-box volume over its extent
/// along the split direction.
fn interface_weight(node: &TreeNode) -> f64 {
    let TreeNode::Split { direction, lower, upper, .. } = node else { return 0.0 };
    let widths: Vec<f64> = lower.iter().zip(upper).map(|(lo, hi)| (hi - lo).max(0.0)).collect();
    let volume: f64 = widths.iter().product();
    let thickness: f64 = widths.iter().zip(direction).map(|(w, v)| w * v.abs()).sum();
    if thickness > 0.0 {
        volume / thickness
    } else {
        0.0
    }
}

/// Interior locations uniform over `domain` and boundary locations uniform
/// over the split interfaces, avoiding pseudo-observation sites.
pub fn benchmark_prediction_targets(
    domain: &Domain,
    tree: &SpatialTree,
    bset: &BoundarySet,
    n_interior: usize,
    n_boundary: usize,
    seed: u64,
) -> Result<PredictionTargets> {
    domain.validate()?;
    if domain.dim() != tree.dim() {
        return Err(Error::DimensionMismatch {
            expected: tree.dim(),
            found: domain.dim(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut interior = Points::empty(domain.dim());
    while interior.len() < n_interior {
        let p = domain.sample(1, &mut rng);
        if tree.locate_boundary(p.row(0))?.is_none() {
            interior.push(p.row(0))?;
        }
    }

    let splits: Vec<usize> = tree.split_nodes().collect();
    if splits.is_empty() {
        if n_boundary > 0 {
            warn!("single-region partition has no interfaces; no boundary targets generated");
        }
        return Ok(PredictionTargets { interior, boundary: Vec::new() });
    }
    let min_sep = (1e-9 * tree.diameter().max(1.0)).powi(2);
    let clear_of_pseudo = |p: &[f64]| bset.iter_points().all(|(_, q)| squared_distance(p, q) > min_sep);
    let mut boundary = Vec::new();
    if tree.dim() == 1 {
        // each interface is a single point
        for node in splits {
            let TreeNode::Split { direction, threshold, .. } = tree.node(node) else { unreachable!() };
            let p = vec![threshold * direction[0]];
            if boundary.len() < n_boundary && clear_of_pseudo(&p) {
                let (k, l) = tree.straddling_pair(node, &p);
                boundary.push(BoundaryTarget { point: p, node, k, l });
            }
        }
        return Ok(PredictionTargets { interior, boundary });
    }

    let weights: Vec<f64> = splits.iter().map(|&s| interface_weight(tree.node(s))).collect();
    let chooser = WeightedIndex::new(&weights).map_err(|e| Error::Numerical(format!("interface weights: {e}")))?;
    let max_attempts = 1000 * n_boundary.max(1);
    let mut failures = 0;
    while boundary.len() < n_boundary {
        let node = splits[chooser.sample(&mut rng)];
        match tree.draw_on_split(node, &mut rng) {
            Some(p) if clear_of_pseudo(&p) && tree.locate_boundary(&p)?.map(|b| b.0) == Some(node) => {
                let (k, l) = tree.straddling_pair(node, &p);
                boundary.push(BoundaryTarget { point: p, node, k, l });
                failures = 0;
            }
            _ => {
                failures += 1;
                if failures >= max_attempts {
                    return Err(Error::Sampling { node, attempts: failures });
                }
            }
        }
    }
    Ok(PredictionTargets { interior, boundary })
}
