//! Spatial-tree partitioning of the input domain.
//!
//! Each internal node bisects its members along their leading principal
//! direction at the median projection, so every level halves the data and
//! leaves end up with member counts that differ by at most one. Points with
//! `v^T x <= threshold` go left. Leaves are numbered left to right, so for a
//! split node every region below the left child has a smaller id than every
//! region below the right child.
//!
//! Pseudo-observation sites are sampled on each split hyperplane inside the
//! node's region and labelled with the pair of leaves they separate.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::{bounding_box_of, check_dim, dot, squared_distance, Points};

/// Smallest admissible leaf population.
pub const MIN_LEAF_SIZE: usize = 5;

const POWER_ITERATIONS: usize = 100;
const MAX_REJECTIONS_PER_POINT: usize = 1000;
const DEDUP_SCALE: f64 = 1e-9;
/// Hyperplane draws per leaf below a split, spent counting the leaf pairs
/// that meet on it.
const DISCOVERY_DRAWS_PER_LEAF: usize = 64;
/// Relative tolerance for deciding that a point lies on a split hyperplane.
pub const ON_BOUNDARY_TOL: f64 = 1e-9;

/// Number of tree levels used for a requested region count.
pub fn levels_for(k: usize) -> usize {
    assert!(k >= 1);
    (usize::BITS - 1 - k.leading_zeros()) as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    Split {
        direction: Vec<f64>,
        threshold: f64,
        level: usize,
        left: usize,
        right: usize,
        /// Bounding box of the node's member points.
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    Leaf {
        region: usize,
        members: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialTree {
    dim: usize,
    depth: usize,
    n_points: usize,
    nodes: Vec<TreeNode>,
    /// Node index of each region's leaf.
    leaves: Vec<usize>,
}

/// Splits `points` into `2^floor(log2 k)` balanced regions.
pub fn build_tree(points: &Points, k: usize, seed: u64) -> Result<SpatialTree> {
    if k == 0 {
        return Err(Error::Config("region count must be at least 1".into()));
    }
    let depth = levels_for(k);
    let n_leaves = 1usize << depth;
    if points.len() < n_leaves {
        return Err(Error::Config(format!("{} points cannot fill {n_leaves} regions", points.len())));
    }
    let mut tree = SpatialTree {
        dim: points.dim(),
        depth,
        n_points: points.len(),
        nodes: Vec::with_capacity(2 * n_leaves - 1),
        leaves: Vec::with_capacity(n_leaves),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tree.grow(points, (0..points.len()).collect(), 0, &mut rng);
    Ok(tree)
}

impl SpatialTree {
    fn grow(&mut self, points: &Points, mut members: Vec<usize>, level: usize, rng: &mut ChaCha8Rng) -> usize {
        let id = self.nodes.len();
        if level == self.depth {
            members.sort_unstable();
            let region = self.leaves.len();
            self.leaves.push(id);
            self.nodes.push(TreeNode::Leaf { region, members });
            return id;
        }
        // Placeholder until both children exist.
        self.nodes.push(TreeNode::Leaf {
            region: usize::MAX,
            members: Vec::new(),
        });

        let direction = principal_direction(points, &members, rng);
        let mut projected: Vec<(f64, usize)> =
            members.iter().map(|&i| (dot(&direction, points.row(i)), i)).collect();
        projected.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let n_left = projected.len().div_ceil(2);
        let threshold = 0.5 * (projected[n_left - 1].0 + projected[n_left].0);
        let (lower, upper) = bounding_box_of(points, &members).expect("split node has members");

        let left_members: Vec<usize> = projected[..n_left].iter().map(|p| p.1).collect();
        let right_members: Vec<usize> = projected[n_left..].iter().map(|p| p.1).collect();
        drop(members);
        let left = self.grow(points, left_members, level + 1, rng);
        let right = self.grow(points, right_members, level + 1, rng);
        self.nodes[id] = TreeNode::Split {
            direction,
            threshold,
            level,
            left,
            right,
            lower,
            upper,
        };
        id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn n_regions(&self) -> usize {
        self.leaves.len()
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    /// Indices of the training points owned by `region`.
    pub fn members(&self, region: usize) -> &[usize] {
        match &self.nodes[self.leaves[region]] {
            TreeNode::Leaf { members, .. } => members,
            TreeNode::Split { .. } => unreachable!("leaf table points at a split node"),
        }
    }

    pub fn split_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n, TreeNode::Split { .. }))
            .map(|(i, _)| i)
    }

    /// Region containing `x`.
    pub fn route(&self, x: &[f64]) -> Result<usize> {
        check_dim(self.dim, x.len())?;
        Ok(self.route_from(0, x))
    }

    pub(crate) fn route_from(&self, mut node: usize, x: &[f64]) -> usize {
        loop {
            match &self.nodes[node] {
                TreeNode::Leaf { region, .. } => return *region,
                TreeNode::Split {
                    direction,
                    threshold,
                    left,
                    right,
                    ..
                } => node = if dot(direction, x) <= *threshold { *left } else { *right },
            }
        }
    }

    /// The leaf pair `(k, l)` separated by split `node` at `x`, routing `x`
    /// down the left subtree for `k` and the right subtree for `l`.
    pub fn straddling_pair(&self, node: usize, x: &[f64]) -> (usize, usize) {
        match &self.nodes[node] {
            TreeNode::Split { left, right, .. } => (self.route_from(*left, x), self.route_from(*right, x)),
            TreeNode::Leaf { .. } => panic!("node {node} is a leaf"),
        }
    }

    /// Whether ordinary routing of `x` passes through `node`.
    pub fn reaches(&self, node: usize, x: &[f64]) -> bool {
        let mut cur = 0;
        loop {
            if cur == node {
                return true;
            }
            match &self.nodes[cur] {
                TreeNode::Leaf { .. } => return false,
                TreeNode::Split {
                    direction,
                    threshold,
                    left,
                    right,
                    ..
                } => cur = if dot(direction, x) <= *threshold { *left } else { *right },
            }
        }
    }

    /// Finds the first split hyperplane on the routing path of `x` that `x`
    /// lies on. Returns `(node, k, l)` with `k < l`.
    pub fn locate_boundary(&self, x: &[f64]) -> Result<Option<(usize, usize, usize)>> {
        check_dim(self.dim, x.len())?;
        let mut cur = 0;
        loop {
            match &self.nodes[cur] {
                TreeNode::Leaf { .. } => return Ok(None),
                TreeNode::Split {
                    direction,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    let proj = dot(direction, x);
                    if (proj - threshold).abs() <= ON_BOUNDARY_TOL * (1.0 + threshold.abs()) {
                        let (k, l) = self.straddling_pair(cur, x);
                        return Ok(Some((cur, k, l)));
                    }
                    cur = if proj <= *threshold { *left } else { *right };
                }
            }
        }
    }

    /// Length of the diagonal of the root bounding box.
    pub fn diameter(&self) -> f64 {
        match &self.nodes[0] {
            TreeNode::Split { lower, upper, .. } => squared_distance(lower, upper).sqrt(),
            TreeNode::Leaf { .. } => 0.0,
        }
    }

    /// One rejection-sampling draw on the hyperplane of split `node`: a
    /// uniform point of the node's bounding box projected orthogonally onto
    /// the hyperplane, kept only if it stays inside the box and inside the
    /// node's region.
    pub(crate) fn draw_on_split<R: Rng + ?Sized>(&self, node: usize, rng: &mut R) -> Option<Vec<f64>> {
        let TreeNode::Split {
            direction,
            threshold,
            lower,
            upper,
            ..
        } = &self.nodes[node]
        else {
            panic!("node {node} is a leaf");
        };
        let mut x: Vec<f64> = if self.dim == 1 {
            vec![threshold * direction[0]]
        } else {
            let u: Vec<f64> = lower
                .iter()
                .zip(upper)
                .map(|(&lo, &hi)| if hi > lo { rng.random_range(lo..hi) } else { lo })
                .collect();
            let offset = dot(direction, &u) - threshold;
            u.iter().zip(direction).map(|(ui, vi)| ui - offset * vi).collect()
        };
        // Nudge back onto the hyperplane after the rounding of the projection.
        let residual = dot(direction, &x) - threshold;
        for (xi, vi) in x.iter_mut().zip(direction) {
            *xi -= residual * vi;
        }
        let in_box = x.iter().zip(lower.iter().zip(upper)).all(|(&xi, (&lo, &hi))| xi >= lo && xi <= hi);
        (in_box && self.reaches(node, &x)).then_some(x)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Leading eigenvector of the sample covariance of `members`, by power
/// iteration from a seeded start. Falls back to the first axis when the
/// members have no spread.
fn principal_direction(points: &Points, members: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = points.dim();
    let mut axis = vec![0.0; d];
    axis[0] = 1.0;
    // The start vector is drawn unconditionally so the RNG stream does not
    // depend on the data.
    let mut v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    if d == 1 {
        return axis;
    }

    let n = members.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in members {
        for (m, x) in mean.iter_mut().zip(points.row(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![0.0; d * d];
    for &i in members {
        let row = points.row(i);
        for a in 0..d {
            let da = row[a] - mean[a];
            for b in a..d {
                cov[a * d + b] += da * (row[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            cov[a * d + b] /= n;
            cov[b * d + a] = cov[a * d + b];
        }
    }
    let trace: f64 = (0..d).map(|a| cov[a * d + a]).sum();
    if trace.is_nan() || trace <= f64::MIN_POSITIVE {
        return axis;
    }

    let mut w = vec![0.0; d];
    for _ in 0..POWER_ITERATIONS {
        for a in 0..d {
            w[a] = dot(&cov[a * d..(a + 1) * d], &v);
        }
        let norm = dot(&w, &w).sqrt();
        if norm.is_nan() || norm <= trace * 1e-300 {
            return axis;
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
    }
    let norm = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let pivot = v
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    if v[pivot] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

/// Pseudo-observation sites on the interface between regions `k < l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPair {
    pub k: usize,
    pub l: usize,
    /// Split node whose hyperplane contains the points.
    pub node: usize,
    pub points: Points,
}

/// All pseudo-observation sites, ordered by `(k, l)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundarySet {
    dim: usize,
    pairs: Vec<BoundaryPair>,
}

impl BoundarySet {
    pub fn empty(dim: usize) -> Self {
        Self { dim, pairs: Vec::new() }
    }

    pub fn from_pairs(dim: usize, mut pairs: Vec<BoundaryPair>) -> Result<Self> {
        pairs.sort_by_key(|p| (p.k, p.l));
        for w in pairs.windows(2) {
            if (w[0].k, w[0].l) == (w[1].k, w[1].l) {
                return Err(Error::InvalidInput(format!("duplicate boundary pair ({}, {})", w[0].k, w[0].l)));
            }
        }
        for p in &pairs {
            if p.k >= p.l {
                return Err(Error::InvalidInput(format!("boundary pair ({}, {}) is not ordered", p.k, p.l)));
            }
            check_dim(dim, p.points.dim())?;
        }
        Ok(Self { dim, pairs })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pairs(&self) -> &[BoundaryPair] {
        &self.pairs
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Total number of pseudo observations.
    pub fn n_points(&self) -> usize {
        self.pairs.iter().map(|p| p.points.len()).sum()
    }

    pub fn iter_points(&self) -> impl Iterator<Item = (&BoundaryPair, &[f64])> + '_ {
        self.pairs.iter().flat_map(|p| p.points.rows().map(move |x| (p, x)))
    }
}

/// Samples pseudo-observation sites uniformly on every split hyperplane,
/// `b` per leaf pair meeting on it (one per split when the input space is
/// one-dimensional, where an interface is a single point).
///
/// Each site is labeled with the leaf pair it separates, so an interface
/// receives sites in proportion to its size and `b` on average. Leaf pairs
/// are discovered by routing a preliminary batch of hyperplane draws.
pub fn place_pseudo_points(tree: &SpatialTree, b: usize, seed: u64) -> Result<BoundarySet> {
    let dim = tree.dim();
    if b == 0 {
        return Ok(BoundarySet::empty(dim));
    }
    let min_sep2 = (DEDUP_SCALE * tree.diameter()).powi(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut accepted: Vec<Vec<f64>> = Vec::new();
    let mut grouped: BTreeMap<(usize, usize), BoundaryPair> = BTreeMap::new();

    for node in tree.split_nodes().collect::<Vec<_>>() {
        let TreeNode::Split { level, .. } = tree.node(node) else {
            unreachable!("split_nodes yields splits");
        };
        let sites = if dim == 1 {
            1
        } else {
            let draws = DISCOVERY_DRAWS_PER_LEAF << (tree.depth() - level);
            let mut pairs = BTreeSet::new();
            for _ in 0..draws {
                if let Some(x) = tree.draw_on_split(node, &mut rng) {
                    pairs.insert(tree.straddling_pair(node, &x));
                }
            }
            b * pairs.len().max(1)
        };

        let budget = MAX_REJECTIONS_PER_POINT * sites;
        let mut placed = 0;
        let mut rejections = 0;
        while placed < sites {
            let candidate = tree
                .draw_on_split(node, &mut rng)
                .filter(|x| accepted.iter().all(|a| squared_distance(a, x) > min_sep2));
            let Some(x) = candidate else {
                if dim == 1 {
                    // The only admissible site is taken or outside the region.
                    break;
                }
                rejections += 1;
                if rejections >= budget {
                    return Err(Error::Sampling { node, attempts: rejections });
                }
                continue;
            };
            rejections = 0;
            let (k, l) = tree.straddling_pair(node, &x);
            grouped
                .entry((k, l))
                .or_insert_with(|| BoundaryPair {
                    k,
                    l,
                    node,
                    points: Points::empty(dim),
                })
                .points
                .push(&x)?;
            accepted.push(x);
            placed += 1;
        }
    }
    BoundarySet::from_pairs(dim, grouped.into_values().collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjacencyInfo {
    pub neighbors: Vec<Vec<usize>>,
}

impl AdjacencyInfo {
    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }
}

/// Region neighbor lists implied by the pairs of `bset`.
pub fn adjacency(bset: &BoundarySet, k: usize) -> AdjacencyInfo {
    let mut neighbors = vec![Vec::new(); k];
    for p in bset.pairs() {
        neighbors[p.k].push(p.l);
        neighbors[p.l].push(p.k);
    }
    for n in &mut neighbors {
        n.sort_unstable();
        n.dedup();
    }
    AdjacencyInfo { neighbors }
}
