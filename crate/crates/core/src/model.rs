//! Patchwork kriging: independent local GPs coupled by zero-valued
//! pseudo-observations of their differences on region interfaces.
//!
//! The augmented observation vector is `(y, delta)` where `delta` collects
//! `f_k(x) - f_l(x)` at every pseudo-observation site. Its covariance has a
//! block-diagonal data part `C_DD`, a cross part `C_D,delta` that is nonzero
//! only where a site touches the data's region, and a sparse `C_delta,delta`.
//! Fitting factors `C_DD` block by block and the sparse Schur complement
//! `S = C_delta,delta - C_D,delta^T C_DD^{-1} C_D,delta`; all posterior
//! quantities follow from those two factorizations.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::HyperParams;
use crate::partition::{build_tree, levels_for, place_pseudo_points, BoundarySet, SpatialTree, MIN_LEAF_SIZE};
use crate::points::{check_dim, Points};
use crate::sparse_linalg::{BlockCholesky, BlockDiag, SparseCholesky, SymSparse};

/// Seed offset separating the pseudo-point stream from the tree stream.
const PSEUDO_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Training data owned by one leaf region, responses already centered.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionData {
    pub id: usize,
    /// Row indices into the original training set.
    pub indices: Vec<usize>,
    pub inputs: Points,
    pub responses: Vec<f64>,
}

/// Partition, pseudo-observation sites and centered data. Independent of
/// the kernel hyperparameters, so it can be reused across likelihood
/// evaluations.
#[derive(Clone, Debug, PartialEq)]
pub struct Partitioned {
    pub tree: SpatialTree,
    pub boundaries: BoundarySet,
    pub regions: Vec<RegionData>,
    pub mean_offset: f64,
    pair_offsets: Vec<usize>,
    region_pairs: Vec<Vec<usize>>,
}

impl Partitioned {
    /// Builds the spatial tree and samples pseudo-observation sites.
    pub fn new(x: &Points, y: &[f64], k: usize, b: usize, seed: u64) -> Result<Self> {
        check_dim(x.len(), y.len())?;
        if k == 0 {
            return Err(Error::Config("region count must be at least 1".into()));
        }
        let n_leaves = 1usize << levels_for(k);
        if x.len() < n_leaves * MIN_LEAF_SIZE {
            return Err(Error::Config(format!(
                "{} points cannot fill {n_leaves} regions of at least {MIN_LEAF_SIZE} points",
                x.len()
            )));
        }
        let tree = build_tree(x, k, seed)?;
        let boundaries = place_pseudo_points(&tree, b, seed ^ PSEUDO_SEED_SALT)?;
        Self::from_parts(tree, boundaries, x, y)
    }

    pub fn from_parts(tree: SpatialTree, boundaries: BoundarySet, x: &Points, y: &[f64]) -> Result<Self> {
        check_dim(x.len(), y.len())?;
        check_dim(tree.dim(), x.dim())?;
        check_dim(tree.n_points(), x.len())?;
        if y.iter().any(|v| !v.is_finite()) || x.as_flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("training data contain non-finite values".into()));
        }
        let mean_offset = if y.is_empty() { 0.0 } else { y.iter().sum::<f64>() / y.len() as f64 };
        let regions = (0..tree.n_regions())
            .map(|k| {
                let indices = tree.members(k).to_vec();
                if indices.is_empty() {
                    return Err(Error::Config(format!("region {k} holds no training data")));
                }
                Ok(RegionData {
                    id: k,
                    inputs: x.select(&indices),
                    responses: indices.iter().map(|&i| y[i] - mean_offset).collect(),
                    indices,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::with_regions(tree, boundaries, regions, mean_offset)
    }

    pub(crate) fn with_regions(
        tree: SpatialTree,
        boundaries: BoundarySet,
        regions: Vec<RegionData>,
        mean_offset: f64,
    ) -> Result<Self> {
        let n_regions = regions.len();
        let mut pair_offsets = vec![0];
        let mut region_pairs = vec![Vec::new(); n_regions];
        for (p, pair) in boundaries.pairs().iter().enumerate() {
            if pair.l >= n_regions {
                return Err(Error::Config(format!(
                    "boundary pair ({}, {}) references a missing region",
                    pair.k, pair.l
                )));
            }
            region_pairs[pair.k].push(p);
            region_pairs[pair.l].push(p);
            pair_offsets.push(pair_offsets.last().unwrap() + pair.points.len());
        }
        Ok(Self {
            tree,
            boundaries,
            regions,
            mean_offset,
            pair_offsets,
            region_pairs,
        })
    }

    pub fn dim(&self) -> usize {
        self.tree.dim()
    }

    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn n_obs(&self) -> usize {
        self.regions.iter().map(|r| r.indices.len()).sum()
    }

    /// Number of pseudo observations.
    pub fn n_delta(&self) -> usize {
        *self.pair_offsets.last().unwrap()
    }

    /// Index range of pair `p` within the pseudo-observation vector.
    pub fn pair_range(&self, p: usize) -> std::ops::Range<usize> {
        self.pair_offsets[p]..self.pair_offsets[p + 1]
    }

    /// Pairs with `region` on either side.
    pub fn region_pairs(&self, region: usize) -> &[usize] {
        &self.region_pairs[region]
    }

    /// Pseudo-observation indices coupled to `region`, ascending.
    pub fn region_columns(&self, region: usize) -> Vec<usize> {
        self.region_pairs[region].iter().flat_map(|&p| self.pair_range(p)).collect()
    }

    /// `+1` if `region` is the lower index of pair `p`, `-1` if the upper.
    fn sign(&self, region: usize, p: usize) -> f64 {
        if self.boundaries.pairs()[p].k == region {
            1.0
        } else {
            -1.0
        }
    }

    /// Centered responses in region order.
    pub fn stacked_responses(&self) -> Vec<f64> {
        self.regions.iter().flat_map(|r| r.responses.iter().copied()).collect()
    }

    /// Covariances between `f_region(x)` and every pseudo observation
    /// coupled to `region`, in [`Partitioned::region_columns`] order.
    fn delta_cov_to_point(&self, hyper: &HyperParams, region: usize, x: &[f64]) -> Vec<f64> {
        let spec = hyper.region(region);
        let mut out = Vec::new();
        for &p in &self.region_pairs[region] {
            let s = self.sign(region, p);
            out.extend(self.boundaries.pairs()[p].points.rows().map(|q| s * spec.eval_unchecked(q, x)));
        }
        out
    }
}

/// `C_D,delta` restricted to one region's rows and its coupled columns.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionCross {
    pub columns: Vec<usize>,
    pub block: DMatrix<f64>,
}

/// Prior covariance of the augmented observations `(y, delta)`.
#[derive(Clone, Debug)]
pub struct AugmentedCov {
    pub data: BlockDiag,
    pub cross: Vec<RegionCross>,
    pub delta: SymSparse,
}

/// Covariance between `delta_{k,l}(x1)` and `delta_{u,v}(x2)`.
fn delta_delta_cov(hyper: &HyperParams, (k, l): (usize, usize), (u, v): (usize, usize), x1: &[f64], x2: &[f64]) -> f64 {
    let ck = || hyper.region(k).eval_unchecked(x1, x2);
    let cl = || hyper.region(l).eval_unchecked(x1, x2);
    if k == u && l == v {
        ck() + cl()
    } else if k == u {
        ck()
    } else if l == v {
        cl()
    } else if k == v {
        -ck()
    } else if l == u {
        -cl()
    } else {
        0.0
    }
}

/// Builds every structurally nonzero block of the augmented covariance.
pub fn assemble(part: &Partitioned, hyper: &HyperParams) -> Result<AugmentedCov> {
    hyper.validate(part.n_regions())?;
    let blocks = part
        .regions
        .par_iter()
        .map(|r| {
            let spec = hyper.region(r.id);
            let mut c = spec.cross_cov(&r.inputs, &r.inputs)?;
            for i in 0..c.nrows() {
                c[(i, i)] += spec.diagonal_nugget();
            }
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;

    let cross = part
        .regions
        .par_iter()
        .map(|r| {
            let spec = hyper.region(r.id);
            let columns = part.region_columns(r.id);
            let mut block = DMatrix::zeros(r.inputs.len(), columns.len());
            let mut col = 0;
            for &p in part.region_pairs(r.id) {
                let s = part.sign(r.id, p);
                for q in part.boundaries.pairs()[p].points.rows() {
                    for (i, xi) in r.inputs.rows().enumerate() {
                        block[(i, col)] = s * spec.eval_unchecked(xi, q);
                    }
                    col += 1;
                }
            }
            RegionCross { columns, block }
        })
        .collect();

    let pairs = part.boundaries.pairs();
    let mut triplets = Vec::new();
    for (p, pp) in pairs.iter().enumerate() {
        let mut partners: Vec<usize> = part.region_pairs(pp.k).iter().chain(part.region_pairs(pp.l)).copied().filter(|&q| q >= p).collect();
        partners.sort_unstable();
        partners.dedup();
        for q in partners {
            let qq = &pairs[q];
            for (a, x1) in pp.points.rows().enumerate() {
                for (b, x2) in qq.points.rows().enumerate() {
                    let (i, j) = (part.pair_offsets[p] + a, part.pair_offsets[q] + b);
                    if i <= j {
                        triplets.push((i, j, delta_delta_cov(hyper, (pp.k, pp.l), (qq.k, qq.l), x1, x2)));
                    }
                }
            }
        }
    }
    let delta = SymSparse::from_triplets(part.n_delta(), triplets)?;
    Ok(AugmentedCov {
        data: BlockDiag::new(blocks)?,
        cross,
        delta,
    })
}

impl AugmentedCov {
    /// Dense `C_D,delta` with rows in region order.
    pub fn dense_cross(&self, n_delta: usize) -> DMatrix<f64> {
        let n: usize = self.data.dim();
        let mut out = DMatrix::zeros(n, n_delta);
        let mut row = 0;
        for rc in &self.cross {
            for (c, &j) in rc.columns.iter().enumerate() {
                for i in 0..rc.block.nrows() {
                    out[(row + i, j)] = rc.block[(i, c)];
                }
            }
            row += rc.block.nrows();
        }
        out
    }
}

/// Factorized augmented covariance together with the centered-response
/// weights needed for prediction and the likelihood.
#[derive(Clone, Debug)]
pub struct Factorization {
    pub(crate) blocks: BlockCholesky,
    pub(crate) cross: Vec<RegionCross>,
    /// `L_k^{-1} G_k` per region, where `G_k` is the region's cross block.
    pub(crate) whitened: Vec<DMatrix<f64>>,
    pub(crate) schur_matrix: SymSparse,
    pub(crate) schur: Option<SparseCholesky>,
    pub(crate) jitter: f64,
    /// `Q y`, split by region.
    pub(crate) alpha: Vec<DVector<f64>>,
    /// Weights on the pseudo observations: `-S^{-1} C_delta,D C_DD^{-1} y`.
    pub(crate) gamma: Vec<f64>,
    pub logdet_data: f64,
    pub logdet_schur: f64,
    pub quadratic: f64,
}

/// Growth factor and number of retries for the Schur complement nugget.
const JITTER_GROWTH: f64 = 100.0;
const JITTER_RETRIES: usize = 2;

/// Factors `a + jitter I`, growing the jitter when a pivot fails.
/// Returns the factor and the jitter that worked.
fn factor_escalating(a: &SymSparse, jitter: f64) -> Result<(SparseCholesky, f64)> {
    let mut jitter = jitter;
    let mut attempt = 0;
    loop {
        match SparseCholesky::factor(a, jitter) {
            Ok(chol) => return Ok((chol, jitter)),
            Err(Error::NotPositiveDefinite { .. }) if attempt < JITTER_RETRIES => {
                log::debug!("Schur complement factorization failed with jitter {jitter:e}; retrying");
                jitter *= JITTER_GROWTH;
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

impl Factorization {
    pub fn new(part: &Partitioned, aug: AugmentedCov, mut jitter: f64) -> Result<Self> {
        let AugmentedCov { data, cross, delta } = aug;
        let blocks = BlockCholesky::from_owned(data)?;
        let n_delta = part.n_delta();

        let whitened: Vec<DMatrix<f64>> = cross
            .par_iter()
            .enumerate()
            .map(|(k, rc)| {
                blocks
                    .block(k)
                    .l_dirty()
                    .solve_lower_triangular(&rc.block)
                    .expect("Cholesky factor has a positive diagonal")
            })
            .collect();
        let z: Vec<DVector<f64>> = part
            .regions
            .iter()
            .map(|r| {
                blocks
                    .block(r.id)
                    .l_dirty()
                    .solve_lower_triangular(&DVector::from_column_slice(&r.responses))
                    .expect("Cholesky factor has a positive diagonal")
            })
            .collect();
        let quadratic_data: f64 = z.iter().map(|v| v.norm_squared()).sum();

        let mut triplets: Vec<(usize, usize, f64)> = delta.iter().collect();
        let mut reduced = vec![0.0; n_delta];
        for (k, (rc, w)) in cross.iter().zip(&whitened).enumerate() {
            let gram = w.transpose() * w;
            for (a, &i) in rc.columns.iter().enumerate() {
                for (b, &j) in rc.columns.iter().enumerate().skip(a) {
                    triplets.push((i, j, -gram[(a, b)]));
                }
            }
            let wz = w.transpose() * &z[k];
            for (a, &i) in rc.columns.iter().enumerate() {
                reduced[i] += wz[a];
            }
        }
        let schur_matrix = SymSparse::from_triplets(n_delta, triplets)?;
        let (schur, gamma) = if n_delta == 0 {
            (None, Vec::new())
        } else {
            let (chol, used) = factor_escalating(&schur_matrix, jitter)?;
            jitter = used;
            let mut g = chol.solve(&reduced);
            g.iter_mut().for_each(|v| *v = -*v);
            (Some(chol), g)
        };
        let logdet_schur = schur.as_ref().map_or(0.0, SparseCholesky::logdet);

        // alpha = C_DD^{-1} (y - C_D,delta gamma)
        let alpha: Vec<DVector<f64>> = part
            .regions
            .iter()
            .map(|r| {
                let rc = &cross[r.id];
                let g = DVector::from_iterator(rc.columns.len(), rc.columns.iter().map(|&j| gamma[j]));
                let rhs = DVector::from_column_slice(&r.responses) - &rc.block * g;
                blocks.solve_block(r.id, &rhs)
            })
            .collect();
        let quadratic: f64 = part
            .regions
            .iter()
            .map(|r| DVector::from_column_slice(&r.responses).dot(&alpha[r.id]))
            .sum();
        debug_assert!(quadratic >= quadratic_data * (1.0 - 1e-8) || quadratic_data == 0.0);

        Ok(Self {
            logdet_data: blocks.logdet(),
            logdet_schur,
            quadratic,
            blocks,
            cross,
            whitened,
            schur_matrix,
            schur,
            jitter,
            alpha,
            gamma,
        })
    }

    /// The Schur complement `C_delta,delta - C_delta,D C_DD^{-1} C_D,delta`
    /// before jitter.
    pub fn schur_matrix(&self) -> &SymSparse {
        &self.schur_matrix
    }

    /// Diagonal inflation applied to the pseudo-observation covariance.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn schur_factor(&self) -> Option<&SparseCholesky> {
        self.schur.as_ref()
    }

    /// Applies `Q = (C_DD - C_D,delta C_delta,delta^{-1} C_delta,D)^{-1}`
    /// through its Woodbury form
    /// `C_DD^{-1} + C_DD^{-1} C_D,delta S^{-1} C_delta,D C_DD^{-1}`.
    /// `a` is split by region.
    pub fn apply_q(&self, a: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let b: Vec<DVector<f64>> = a.iter().enumerate().map(|(k, v)| self.blocks.solve_block(k, v)).collect();
        let Some(schur) = &self.schur else { return b };
        let mut r = vec![0.0; schur.n()];
        for (rc, bk) in self.cross.iter().zip(&b) {
            let t = rc.block.transpose() * bk;
            for (c, &j) in rc.columns.iter().enumerate() {
                r[j] += t[c];
            }
        }
        let s = schur.solve(&r);
        b.into_iter()
            .enumerate()
            .map(|(k, bk)| {
                let rc = &self.cross[k];
                let sk = DVector::from_iterator(rc.columns.len(), rc.columns.iter().map(|&j| s[j]));
                bk + self.blocks.solve_block(k, &(&rc.block * sk))
            })
            .collect()
    }
}

/// Predictive mean and variance of the latent function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
    pub region: usize,
}

/// Predictions from both regions sharing the interface a point lies on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPrediction {
    pub node: usize,
    pub side_k: Prediction,
    pub side_l: Prediction,
}

impl BoundaryPrediction {
    /// The prediction of the lower-indexed region.
    pub fn chosen(&self) -> Prediction {
        self.side_k
    }
}

/// Wall-clock seconds spent in each fitting phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTimings {
    pub partition: f64,
    pub assembly: f64,
    pub factorization: f64,
}

impl FitTimings {
    pub fn total(&self) -> f64 {
        self.partition + self.assembly + self.factorization
    }
}

/// A fitted patchwork kriging model.
#[derive(Clone, Debug)]
pub struct PatchworkModel {
    pub(crate) part: Partitioned,
    pub(crate) hyper: HyperParams,
    pub(crate) fact: Factorization,
    /// Cholesky factor of `C_delta,delta + jitter I`.
    pub(crate) delta_chol: Option<SparseCholesky>,
    /// `L^{-1} C_delta,D Q y`.
    pub(crate) eta: Vec<f64>,
    pub(crate) timings: FitTimings,
}

impl PatchworkModel {
    /// Partitions the data into `k` regions (rounded down to a power of two),
    /// places `b` pseudo observations per split and fits.
    pub fn fit(x: &Points, y: &[f64], k: usize, b: usize, hyper: &HyperParams, seed: u64) -> Result<Self> {
        let start = Instant::now();
        let part = Partitioned::new(x, y, k, b, seed)?;
        let partition = start.elapsed().as_secs_f64();
        let mut model = Self::from_partitioned(part, hyper.clone())?;
        model.timings.partition = partition;
        Ok(model)
    }

    pub fn from_partitioned(part: Partitioned, hyper: HyperParams) -> Result<Self> {
        let start = Instant::now();
        let aug = assemble(&part, &hyper)?;
        let delta = aug.delta.clone();
        let assembly = start.elapsed().as_secs_f64();

        let start = Instant::now();
        let fact = Factorization::new(&part, aug, hyper.delta_jitter()).map_err(|e| match e {
            Error::NotPositiveDefinite { pivot, value } => Error::Numerical(format!(
                "Schur complement is not positive definite after jitter (pivot {pivot}, value {value:e})"
            )),
            other => other,
        })?;
        let (delta_chol, eta) = if part.n_delta() == 0 {
            (None, Vec::new())
        } else {
            let chol = SparseCholesky::factor(&delta, fact.jitter)?;
            let mut cross_alpha = vec![0.0; part.n_delta()];
            for (rc, a) in fact.cross.iter().zip(&fact.alpha) {
                let t = rc.block.transpose() * a;
                for (c, &j) in rc.columns.iter().enumerate() {
                    cross_alpha[j] += t[c];
                }
            }
            let eta = chol.half_solve(&cross_alpha);
            (Some(chol), eta)
        };
        let factorization = start.elapsed().as_secs_f64();

        Ok(Self {
            part,
            hyper,
            fact,
            delta_chol,
            eta,
            timings: FitTimings {
                partition: 0.0,
                assembly,
                factorization,
            },
        })
    }

    pub fn partitioned(&self) -> &Partitioned {
        &self.part
    }

    pub fn tree(&self) -> &SpatialTree {
        &self.part.tree
    }

    pub fn boundaries(&self) -> &BoundarySet {
        &self.part.boundaries
    }

    pub fn hyperparams(&self) -> &HyperParams {
        &self.hyper
    }

    pub fn factorization(&self) -> &Factorization {
        &self.fact
    }

    pub fn delta_factor(&self) -> Option<&SparseCholesky> {
        self.delta_chol.as_ref()
    }

    pub fn timings(&self) -> FitTimings {
        self.timings
    }

    pub fn mean_offset(&self) -> f64 {
        self.part.mean_offset
    }

    pub fn dim(&self) -> usize {
        self.part.dim()
    }

    /// Predicts at `x` using the region that contains it.
    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        let k = self.part.tree.route(x)?;
        self.predict_in_region(x, k)
    }

    /// Predicts `f_region(x)` regardless of which region contains `x`.
    ///
    /// Mean `c_D^T alpha_k + c_delta^T gamma` costs `O(M + d_f B)`; the
    /// variance is `c** - c_D^T C_kk^{-1} c_D - g^T S^{-1} g` with
    /// `g = C_delta,D C_DD^{-1} c_D - c_delta` supported on the region's
    /// coupled pseudo observations.
    pub fn predict_in_region(&self, x: &[f64], region: usize) -> Result<Prediction> {
        check_dim(self.dim(), x.len())?;
        if region >= self.part.n_regions() {
            return Err(Error::InvalidInput(format!("region {region} does not exist")));
        }
        let spec = self.hyper.region(region);
        let r = &self.part.regions[region];
        let c_data = DVector::from_vec(spec.cov_to_point(&r.inputs, x));
        let c_delta = self.part.delta_cov_to_point(&self.hyper, region, x);
        let columns = &self.fact.cross[region].columns;

        let mean = self.part.mean_offset
            + c_data.dot(&self.fact.alpha[region])
            + c_delta.iter().zip(columns).map(|(c, &j)| c * self.fact.gamma[j]).sum::<f64>();

        let u = self.fact.blocks.block(region).l_dirty().solve_lower_triangular(&c_data).expect("positive diagonal");
        let mut variance = spec.tau - u.norm_squared();
        if let Some(schur) = &self.fact.schur {
            if !columns.is_empty() {
                let wu = self.fact.whitened[region].transpose() * &u;
                let mut g = vec![0.0; schur.n()];
                for (a, &j) in columns.iter().enumerate() {
                    g[j] = wu[a] - c_delta[a];
                }
                variance -= schur.quad_form(&g);
            }
        }
        Ok(Prediction {
            mean,
            variance: clamp_variance(variance, spec.tau)?,
            region,
        })
    }

    /// Predicts at a point on a split hyperplane from both adjacent regions.
    pub fn predict_on_boundary(&self, x: &[f64]) -> Result<BoundaryPrediction> {
        let (node, k, l) = self
            .part
            .tree
            .locate_boundary(x)?
            .ok_or_else(|| Error::InvalidInput("point does not lie on any region interface".into()))?;
        Ok(BoundaryPrediction {
            node,
            side_k: self.predict_in_region(x, k)?,
            side_l: self.predict_in_region(x, l)?,
        })
    }

    /// The literal precomputed-state recipe: `w = L^{-1} c_delta`,
    /// mean `(c_D - w^T V) Q y`, variance
    /// `c** - w^T w - (c_D - w^T V) Q (c_D - w^T V)^T` with `V = L^{-1} C_delta,D`.
    /// Costs `O(N M)` per point; kept as an independent route for checking
    /// [`PatchworkModel::predict_in_region`].
    pub fn predict_in_region_direct(&self, x: &[f64], region: usize) -> Result<Prediction> {
        check_dim(self.dim(), x.len())?;
        let spec = self.hyper.region(region);
        let r = &self.part.regions[region];
        let c_data = DVector::from_vec(spec.cov_to_point(&r.inputs, x));
        let n_delta = self.part.n_delta();
        let mut c_delta = vec![0.0; n_delta];
        for (c, &j) in self
            .part
            .delta_cov_to_point(&self.hyper, region, x)
            .iter()
            .zip(&self.fact.cross[region].columns)
        {
            c_delta[j] = *c;
        }

        let (w, t) = match &self.delta_chol {
            Some(l) => {
                let w = l.half_solve(&c_delta);
                let t = l.half_solve_transpose(&w);
                (w, t)
            }
            None => (Vec::new(), Vec::new()),
        };
        let w_eta: f64 = w.iter().zip(&self.eta).map(|(a, b)| a * b).sum();
        let mean = self.part.mean_offset + c_data.dot(&self.fact.alpha[region]) - w_eta;

        // a^T = c_D - C_D,delta C_delta,delta^{-1} c_delta, split by region
        let a: Vec<DVector<f64>> = self
            .fact
            .cross
            .iter()
            .enumerate()
            .map(|(m, rc)| {
                let tm = DVector::from_iterator(rc.columns.len(), rc.columns.iter().map(|&j| t[j]));
                let base = if m == region { c_data.clone() } else { DVector::zeros(rc.block.nrows()) };
                base - &rc.block * tm
            })
            .collect();
        let qa = self.fact.apply_q(&a);
        let aqa: f64 = a.iter().zip(&qa).map(|(u, v)| u.dot(v)).sum();
        let ww: f64 = w.iter().map(|v| v * v).sum();
        Ok(Prediction {
            mean,
            variance: clamp_variance(spec.tau - ww - aqa, spec.tau)?,
            region,
        })
    }
}

/// Negative round-off below `1e-8 * max(1, c**)` is clamped to zero;
/// anything more negative is a numerical failure.
fn clamp_variance(v: f64, prior: f64) -> Result<f64> {
    if v >= 0.0 {
        Ok(v)
    } else if v >= -1e-8 * prior.max(1.0) {
        Ok(0.0)
    } else {
        Err(Error::Numerical(format!("negative predictive variance {v:e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn jitter_grows_until_the_factor_exists() {
        // eigenvalues near 2 and -5e-12
        let a = SymSparse::from_triplets(2, [(0, 0, 1.0), (0, 1, 1.0), (1, 1, 1.0 - 1e-11)]).unwrap();
        assert!(SparseCholesky::factor(&a, 1e-12).is_err());
        let (_, used) = factor_escalating(&a, 1e-12).unwrap();
        assert!((used - 1e-10).abs() < 1e-20);

        let b = SymSparse::from_triplets(2, [(0, 0, 1.0), (0, 1, 1.0), (1, 1, 0.9)]).unwrap();
        assert!(matches!(factor_escalating(&b, 1e-12), Err(Error::NotPositiveDefinite { .. })));
    }

    fn toy(n: usize, d: usize, seed: u64) -> (Points, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Points::new(d, (0..n * d).map(|_| rng.random_range(0.0..4.0)).collect()).unwrap();
        let y = x.rows().map(|r| r.iter().map(|v| v.sin()).sum::<f64>() + rng.random_range(-0.3..0.3)).collect();
        (x, y)
    }

    #[test]
    fn assembled_blocks_follow_sign_tables() {
        let (x, y) = toy(80, 2, 1);
        let spec = KernelSpec::squared_exponential(2.0, 1.0, 0.1).unwrap();
        let hyper = HyperParams::Shared(spec);
        let part = Partitioned::new(&x, &y, 4, 3, 5).unwrap();
        let aug = assemble(&part, &hyper).unwrap();
        let pairs = part.boundaries.pairs();
        for (p, pp) in pairs.iter().enumerate() {
            for (a, x1) in pp.points.rows().enumerate() {
                let i = part.pair_range(p).start + a;
                let expected = 2.0 * spec.eval(x1, x1).unwrap();
                assert!((aug.delta.get(i, i) - expected).abs() < 1e-14);
            }
            for (q, qq) in pairs.iter().enumerate() {
                let shares = pp.k == qq.k || pp.k == qq.l || pp.l == qq.k || pp.l == qq.l;
                if !shares {
                    for i in part.pair_range(p) {
                        for j in part.pair_range(q) {
                            assert_eq!(aug.delta.get(i, j), 0.0);
                        }
                    }
                }
            }
        }
        // cross blocks: +c on the lower side, -c on the upper side
        for r in &part.regions {
            let rc = &aug.cross[r.id];
            let mut col = 0;
            for &p in part.region_pairs(r.id) {
                let pp = &pairs[p];
                for q in pp.points.rows() {
                    let s = if pp.k == r.id { 1.0 } else { -1.0 };
                    assert_eq!(rc.block[(0, col)], s * spec.eval(r.inputs.row(0), q).unwrap());
                    col += 1;
                }
            }
        }
    }

    #[test]
    fn schur_pattern_is_confined_to_shared_regions() {
        let (x, y) = toy(400, 2, 2);
        let hyper = HyperParams::Shared(KernelSpec::exponential(1.0, 0.5, 0.1).unwrap());
        let part = Partitioned::new(&x, &y, 16, 2, 3).unwrap();
        let model = PatchworkModel::from_partitioned(part.clone(), hyper).unwrap();
        let pairs = part.boundaries.pairs();
        let pair_of = |i: usize| (0..pairs.len()).find(|&p| part.pair_range(p).contains(&i)).unwrap();
        for (i, j, _) in model.fact.schur_matrix().iter() {
            let (p, q) = (&pairs[pair_of(i)], &pairs[pair_of(j)]);
            assert!(p.k == q.k || p.k == q.l || p.l == q.k || p.l == q.l);
        }
    }

    #[test]
    fn boundary_sides_agree_at_pseudo_points() {
        let (x, y) = toy(300, 2, 3);
        let hyper = HyperParams::Shared(KernelSpec::squared_exponential(1.0, 1.0, 0.05).unwrap());
        let model = PatchworkModel::fit(&x, &y, 4, 4, &hyper, 7).unwrap();
        for (pair, p) in model.boundaries().iter_points() {
            let a = model.predict_in_region(p, pair.k).unwrap();
            let b = model.predict_in_region(p, pair.l).unwrap();
            assert!((a.mean - b.mean).abs() <= 1e-6 * (1.0 + a.mean.abs()));
            assert!((a.variance - b.variance).abs() <= 1e-6 * (1.0 + a.variance));
            let bp = model.predict_on_boundary(p).unwrap();
            assert_eq!((bp.side_k.region, bp.side_l.region), (pair.k, pair.l));
            assert_eq!(bp.chosen(), bp.side_k);
        }
    }

    #[test]
    fn too_many_regions_is_a_config_error() {
        let (x, y) = toy(19, 2, 8);
        assert!(matches!(Partitioned::new(&x, &y, 4, 1, 0), Err(Error::Config(_))));
        assert!(matches!(Partitioned::new(&x, &y, 0, 1, 0), Err(Error::Config(_))));
        let (x, y) = toy(20, 2, 8);
        assert!(Partitioned::new(&x, &y, 5, 1, 0).is_ok());
    }

    #[test]
    fn off_boundary_point_is_rejected() {
        let (x, y) = toy(100, 2, 4);
        let hyper = HyperParams::Shared(KernelSpec::squared_exponential(1.0, 1.0, 0.05).unwrap());
        let model = PatchworkModel::fit(&x, &y, 2, 2, &hyper, 7).unwrap();
        assert!(matches!(model.predict_on_boundary(x.row(0)), Err(Error::InvalidInput(_))));
        assert!(model.predict(&[0.0]).is_err());
    }

    #[test]
    fn independent_locals_disagree_without_pseudo_points() {
        let (x, y) = toy(200, 1, 5);
        let hyper = HyperParams::Shared(KernelSpec::exponential(1.0, 1.0, 0.1).unwrap());
        let model = PatchworkModel::fit(&x, &y, 2, 0, &hyper, 1).unwrap();
        let crate::partition::TreeNode::Split { threshold, .. } = model.tree().node(0) else { panic!() };
        let bp = model.predict_on_boundary(&[*threshold]).unwrap();
        assert!((bp.side_k.mean - bp.side_l.mean).abs() > 1e-6);
        assert_eq!(bp.chosen().region, 0);
    }

    #[test]
    fn matches_dense_oracle() {
        use crate::reference::dense_joint;
        let mut worst: f64 = 0.0;
        for (n, k, b, seed) in [(60, 4, 3, 1), (120, 2, 3, 2), (200, 4, 5, 3), (60, 4, 0, 4)] {
            let (x, y) = toy(n, 2, seed);
            for spec in [
                KernelSpec::squared_exponential(2.0, 1.0, 0.1).unwrap(),
                KernelSpec::exponential(2.0, 1.0, 0.1).unwrap(),
            ] {
                let hyper = HyperParams::Shared(spec);
                let model = PatchworkModel::fit(&x, &y, k, b, &hyper, seed).unwrap();
                let joint = dense_joint(model.partitioned(), &hyper).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for _ in 0..20 {
                    let p = [rng.random_range(0.0..4.0), rng.random_range(0.0..4.0)];
                    let got = model.predict(&p).unwrap();
                    let (m, v) = joint.predict(&hyper, got.region, &p).unwrap();
                    worst = worst.max((got.mean - m).abs() / (1.0 + m.abs()));
                    worst = worst.max((got.variance - v).abs() / (1.0 + v.abs()));
                }
            }
        }
        println!("worst oracle mismatch {worst:e}");
        assert!(worst < 1e-8, "{worst:e}");
    }

    #[test]
    fn direct_route_agrees_with_fast_route() {
        let (x, y) = toy(120, 2, 6);
        let hyper = HyperParams::Shared(KernelSpec::exponential(2.0, 0.8, 0.2).unwrap());
        let model = PatchworkModel::fit(&x, &y, 4, 3, &hyper, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let p = [rng.random_range(0.0..4.0), rng.random_range(0.0..4.0)];
            let k = model.tree().route(&p).unwrap();
            let a = model.predict_in_region(&p, k).unwrap();
            let b = model.predict_in_region_direct(&p, k).unwrap();
            assert!((a.mean - b.mean).abs() < 1e-9 * (1.0 + a.mean.abs()));
            assert!((a.variance - b.variance).abs() < 1e-9 * (1.0 + a.variance));
        }
    }

    #[test]
    fn per_region_kernels_must_match_region_count() {
        let (x, y) = toy(100, 2, 7);
        let spec = KernelSpec::exponential(1.0, 1.0, 0.1).unwrap();
        assert!(PatchworkModel::fit(&x, &y, 4, 1, &HyperParams::PerRegion(vec![spec; 3]), 0).is_err());
        let varied: Vec<KernelSpec> = (0..4).map(|k| KernelSpec::exponential(1.0 + k as f64, 1.0, 0.1).unwrap()).collect();
        let model = PatchworkModel::fit(&x, &y, 4, 1, &HyperParams::PerRegion(varied), 0).unwrap();
        assert!(model.predict(&[1.0, 1.0]).unwrap().variance > 0.0);
    }
}
