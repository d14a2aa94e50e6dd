//! Dense, deliberately naive computations used to check the fast paths.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::{HyperParams, KernelSpec};
use crate::model::Partitioned;
use crate::points::{check_dim, Points};

pub const EXACT_GP_LIMIT: usize = 5000;
pub const DENSE_JOINT_LIMIT: usize = 2000;

/// Full-data GP regression with a sample-mean offset.
#[derive(Clone, Debug)]
pub struct ExactGp {
    spec: KernelSpec,
    inputs: Points,
    mean_offset: f64,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    weights: DVector<f64>,
}

impl ExactGp {
    pub fn fit(spec: &KernelSpec, x: &Points, y: &[f64]) -> Result<Self> {
        let mean_offset = if y.is_empty() { 0.0 } else { y.iter().sum::<f64>() / y.len() as f64 };
        Self::fit_with_offset(spec, x, y, mean_offset)
    }

    /// Like [`ExactGp::fit`] but centers responses on a given offset.
    pub fn fit_with_offset(spec: &KernelSpec, x: &Points, y: &[f64], mean_offset: f64) -> Result<Self> {
        check_dim(x.len(), y.len())?;
        if x.len() > EXACT_GP_LIMIT {
            return Err(Error::TooLarge {
                what: "exact GP training set",
                size: x.len(),
                limit: EXACT_GP_LIMIT,
            });
        }
        if x.is_empty() {
            return Ok(Self {
                spec: *spec,
                inputs: x.clone(),
                mean_offset,
                chol: None,
                weights: DVector::zeros(0),
            });
        }
        let mut c = spec.cross_cov(x, x)?;
        for i in 0..c.nrows() {
            c[(i, i)] += spec.diagonal_nugget();
        }
        let chol = c.cholesky().ok_or(Error::NotPositiveDefinite { pivot: 0, value: f64::NAN })?;
        let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - mean_offset));
        let weights = chol.solve(&yc);
        Ok(Self {
            spec: *spec,
            inputs: x.clone(),
            mean_offset,
            chol: Some(chol),
            weights,
        })
    }

    pub fn mean_offset(&self) -> f64 {
        self.mean_offset
    }

    /// Predictive `(mean, variance)` of the latent function at `x`.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        check_dim(self.inputs.dim(), x.len())?;
        let Some(chol) = &self.chol else {
            return Ok((self.mean_offset, self.spec.tau));
        };
        let c = DVector::from_vec(self.spec.cov_to_point(&self.inputs, x));
        let v = chol.l().solve_lower_triangular(&c).expect("positive diagonal");
        Ok((self.mean_offset + c.dot(&self.weights), self.spec.tau - v.norm_squared()))
    }

    /// Predictive means at many points, one matrix product.
    pub fn predict_means(&self, xs: &Points) -> Result<Vec<f64>> {
        check_dim(self.inputs.dim(), xs.dim())?;
        if self.chol.is_none() {
            return Ok(vec![self.mean_offset; xs.len()]);
        }
        let c = self.spec.cross_cov(xs, &self.inputs)?;
        Ok((c * &self.weights).iter().map(|m| m + self.mean_offset).collect())
    }

    /// Predictive means and variances at many points.
    pub fn predict_batch(&self, xs: &Points) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim(self.inputs.dim(), xs.dim())?;
        let Some(chol) = &self.chol else {
            return Ok((vec![self.mean_offset; xs.len()], vec![self.spec.tau; xs.len()]));
        };
        let c = self.spec.cross_cov(&self.inputs, xs)?;
        let means = c.tr_mul(&self.weights).iter().map(|m| m + self.mean_offset).collect();
        let v = chol.l().solve_lower_triangular(&c).expect("positive diagonal");
        let vars = v.column_iter().map(|col| self.spec.tau - col.norm_squared()).collect();
        Ok((means, vars))
    }
}

pub fn exact_gp_predict(spec: &KernelSpec, x: &Points, y: &[f64], x_star: &[f64]) -> Result<(f64, f64)> {
    ExactGp::fit(spec, x, y)?.predict(x_star)
}

/// Dense joint covariance of `(y, delta)` built from the expansion
/// `Cov(f_k - f_l, f_u - f_v) = [k=u]c_k - [k=v]c_k - [l=u]c_l + [l=v]c_l`.
#[derive(Clone, Debug)]
pub struct DenseJoint {
    pub sigma: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub n_obs: usize,
    pub n_delta: usize,
    obs_region: Vec<usize>,
    obs_points: Vec<Vec<f64>>,
    delta_pair: Vec<(usize, usize)>,
    delta_points: Vec<Vec<f64>>,
    mean_offset: f64,
}

fn indicator(a: bool) -> f64 {
    if a {
        1.0
    } else {
        0.0
    }
}

pub fn dense_joint(part: &Partitioned, hyper: &HyperParams) -> Result<DenseJoint> {
    hyper.validate(part.n_regions())?;
    let n_obs = part.n_obs();
    let n_delta = part.n_delta();
    if n_obs + n_delta > DENSE_JOINT_LIMIT {
        return Err(Error::TooLarge {
            what: "dense augmented system",
            size: n_obs + n_delta,
            limit: DENSE_JOINT_LIMIT,
        });
    }
    let mut obs_region = Vec::new();
    let mut obs_points = Vec::new();
    let mut rhs = Vec::new();
    for r in &part.regions {
        for (x, y) in r.inputs.rows().zip(&r.responses) {
            obs_region.push(r.id);
            obs_points.push(x.to_vec());
            rhs.push(*y);
        }
    }
    let mut delta_pair = Vec::new();
    let mut delta_points = Vec::new();
    for (pair, x) in part.boundaries.iter_points() {
        delta_pair.push((pair.k, pair.l));
        delta_points.push(x.to_vec());
    }
    rhs.extend(std::iter::repeat_n(0.0, n_delta));

    let n = n_obs + n_delta;
    let c = |k: usize, a: &[f64], b: &[f64]| hyper.region(k).eval_unchecked(a, b);
    let mut sigma = DMatrix::zeros(n, n);
    for i in 0..n_obs {
        for j in 0..n_obs {
            if obs_region[i] == obs_region[j] {
                sigma[(i, j)] = c(obs_region[i], &obs_points[i], &obs_points[j]);
            }
        }
        sigma[(i, i)] += hyper.region(obs_region[i]).diagonal_nugget();
        for a in 0..n_delta {
            let (k, l) = delta_pair[a];
            let j = obs_region[i];
            let v = indicator(j == k) * c(k, &obs_points[i], &delta_points[a])
                - indicator(j == l) * c(l, &obs_points[i], &delta_points[a]);
            sigma[(i, n_obs + a)] = v;
            sigma[(n_obs + a, i)] = v;
        }
    }
    for a in 0..n_delta {
        for b in 0..n_delta {
            let ((k, l), (u, v)) = (delta_pair[a], delta_pair[b]);
            let (p, q) = (&delta_points[a], &delta_points[b]);
            sigma[(n_obs + a, n_obs + b)] = indicator(k == u) * c(k, p, q) - indicator(k == v) * c(k, p, q)
                - indicator(l == u) * c(l, p, q)
                + indicator(l == v) * c(l, p, q);
        }
        sigma[(n_obs + a, n_obs + a)] += hyper.delta_jitter();
    }
    Ok(DenseJoint {
        sigma,
        rhs: DVector::from_vec(rhs),
        n_obs,
        n_delta,
        obs_region,
        obs_points,
        delta_pair,
        delta_points,
        mean_offset: part.mean_offset,
    })
}

impl DenseJoint {
    /// Covariance of `f_region(x)` with every entry of `(y, delta)`.
    pub fn cov_to_point(&self, hyper: &HyperParams, region: usize, x: &[f64]) -> DVector<f64> {
        let c = |a: &[f64]| hyper.region(region).eval_unchecked(a, x);
        let obs = (0..self.n_obs).map(|i| indicator(self.obs_region[i] == region) * c(&self.obs_points[i]));
        let delta = (0..self.n_delta).map(|a| {
            let (k, l) = self.delta_pair[a];
            (indicator(k == region) - indicator(l == region)) * c(&self.delta_points[a])
        });
        DVector::from_iterator(self.n_obs + self.n_delta, obs.chain(delta))
    }

    /// Conditions `f_region(x)` on `(y, delta = 0)` with one dense solve.
    pub fn predict(&self, hyper: &HyperParams, region: usize, x: &[f64]) -> Result<(f64, f64)> {
        let k = self.cov_to_point(hyper, region, x);
        let lu = self.sigma.clone().lu();
        let a = lu.solve(&self.rhs).ok_or_else(|| Error::Numerical("singular joint covariance".into()))?;
        let b = lu.solve(&k).ok_or_else(|| Error::Numerical("singular joint covariance".into()))?;
        Ok((self.mean_offset + k.dot(&a), hyper.region(region).tau - k.dot(&b)))
    }

    /// Conditions `(f_region(x), delta)` on `y` first, then on `delta = 0`.
    pub fn predict_two_stage(&self, hyper: &HyperParams, region: usize, x: &[f64]) -> Result<(f64, f64)> {
        let (n, m) = (self.n_obs, self.n_delta);
        let k = self.cov_to_point(hyper, region, x);
        let (k_d, k_delta) = (k.rows(0, n).into_owned(), k.rows(n, m).into_owned());
        let c_dd = self.sigma.view((0, 0), (n, n)).into_owned();
        let c_dx = self.sigma.view((0, n), (n, m)).into_owned();
        let c_xx = self.sigma.view((n, n), (m, m)).into_owned();
        let y = self.rhs.rows(0, n).into_owned();
        let inv = c_dd.try_inverse().ok_or_else(|| Error::Numerical("singular data covariance".into()))?;

        let mean_f = k_d.dot(&(&inv * &y));
        let var_f = hyper.region(region).tau - k_d.dot(&(&inv * &k_d));
        if m == 0 {
            return Ok((self.mean_offset + mean_f, var_f));
        }
        let mean_delta = c_dx.transpose() * (&inv * &y);
        let cov_delta = c_xx - c_dx.transpose() * &inv * &c_dx;
        let cov_f_delta = k_delta - c_dx.transpose() * (&inv * &k_d);
        let s_inv = cov_delta.try_inverse().ok_or_else(|| Error::Numerical("singular conditional covariance".into()))?;
        let mean = mean_f - cov_f_delta.dot(&(&s_inv * mean_delta));
        let var = var_f - cov_f_delta.dot(&(&s_inv * &cov_f_delta));
        Ok((self.mean_offset + mean, var))
    }

    /// Negative log density of the joint Gaussian at `(y, 0)`; `+inf` when
    /// the covariance is not positive definite.
    pub fn neg_log_density(&self) -> f64 {
        let n = self.sigma.nrows();
        let Some(chol) = self.sigma.clone().cholesky() else {
            return f64::INFINITY;
        };
        let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let quad = self.rhs.dot(&chol.solve(&self.rhs));
        0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln() + 0.5 * logdet + 0.5 * quad
    }
}

/// Dense prediction of `f_k(x)` for the region `k` containing `x`.
pub fn dense_augmented_predict(part: &Partitioned, hyper: &HyperParams, x: &[f64]) -> Result<(f64, f64)> {
    let region = part.tree.route(x)?;
    dense_joint(part, hyper)?.predict(hyper, region, x)
}

pub fn dense_nl(part: &Partitioned, hyper: &HyperParams) -> Result<f64> {
    Ok(dense_joint(part, hyper)?.neg_log_density())
}
