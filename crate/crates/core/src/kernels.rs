//! Stationary covariance functions and their hyperparameter containers.
//!
//! Every region of a patchwork model owns a [`KernelSpec`]: a covariance family
//! together with the signal variance `tau`, the length-scale `rho` and the
//! observation noise variance `noise_var`. [`HyperParams`] holds either one
//! shared spec or one spec per region.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::{check_dim, squared_distance, Points};

/// Relative nugget added to kernel matrices that carry no noise term.
pub const JITTER_SCALE: f64 = 1e-8;

/// Relative nugget on the pseudo-observation covariance. Kept small since
/// the two sides of a boundary disagree at pseudo points by roughly this much.
/// Grown by a factor of 100 up to twice if the Schur complement will not factor.
pub const DELTA_JITTER_SCALE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    #[serde(alias = "se")]
    SquaredExponential,
    #[serde(alias = "exp")]
    Exponential,
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "se" | "squared_exponential" | "sqexp" => Ok(KernelFamily::SquaredExponential),
            "exp" | "exponential" => Ok(KernelFamily::Exponential),
            other => Err(Error::InvalidInput(format!("unknown kernel family `{other}`"))),
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelFamily::SquaredExponential => f.write_str("se"),
            KernelFamily::Exponential => f.write_str("exp"),
        }
    }
}

/// Covariance family plus `(tau, rho, noise_var)`.
///
/// * squared exponential: `tau * exp(-|x1 - x2|^2 / (2 rho^2))`
/// * exponential: `tau * exp(-|x1 - x2| / rho)`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKernelSpec")]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub tau: f64,
    pub rho: f64,
    pub noise_var: f64,
}

#[derive(Deserialize)]
struct RawKernelSpec {
    family: KernelFamily,
    tau: f64,
    rho: f64,
    noise_var: f64,
}

impl TryFrom<RawKernelSpec> for KernelSpec {
    type Error = Error;

    fn try_from(raw: RawKernelSpec) -> Result<Self> {
        KernelSpec::new(raw.family, raw.tau, raw.rho, raw.noise_var)
    }
}

impl KernelSpec {
    pub fn new(family: KernelFamily, tau: f64, rho: f64, noise_var: f64) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::InvalidInput(format!("tau must be positive, got {tau}")));
        }
        if !(rho.is_finite() && rho > 0.0) {
            return Err(Error::InvalidInput(format!("rho must be positive, got {rho}")));
        }
        if !(noise_var.is_finite() && noise_var >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "noise variance must be non-negative, got {noise_var}"
            )));
        }
        Ok(Self {
            family,
            tau,
            rho,
            noise_var,
        })
    }

    pub fn squared_exponential(tau: f64, rho: f64, noise_var: f64) -> Result<Self> {
        Self::new(KernelFamily::SquaredExponential, tau, rho, noise_var)
    }

    pub fn exponential(tau: f64, rho: f64, noise_var: f64) -> Result<Self> {
        Self::new(KernelFamily::Exponential, tau, rho, noise_var)
    }

    pub fn eval(&self, x1: &[f64], x2: &[f64]) -> Result<f64> {
        check_dim(x1.len(), x2.len())?;
        if x1.is_empty() {
            return Err(Error::InvalidInput("points must have dimension >= 1".into()));
        }
        Ok(self.eval_unchecked(x1, x2))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x1: &[f64], x2: &[f64]) -> f64 {
        let d2 = squared_distance(x1, x2);
        match self.family {
            KernelFamily::SquaredExponential => self.tau * (-d2 / (2.0 * self.rho * self.rho)).exp(),
            KernelFamily::Exponential => self.tau * (-d2.sqrt() / self.rho).exp(),
        }
    }

    /// `n1 x n2` matrix of pairwise covariances.
    pub fn cross_cov(&self, x1: &Points, x2: &Points) -> Result<DMatrix<f64>> {
        check_dim(x1.dim(), x2.dim())?;
        Ok(DMatrix::from_fn(x1.len(), x2.len(), |i, j| {
            self.eval_unchecked(x1.row(i), x2.row(j))
        }))
    }

    /// Covariances between every row of `x` and a single point.
    pub(crate) fn cov_to_point(&self, x: &Points, point: &[f64]) -> Vec<f64> {
        x.rows().map(|r| self.eval_unchecked(r, point)).collect()
    }

    /// Nugget for Cholesky-factorized matrices built from this kernel with no noise term.
    pub fn jitter(&self) -> f64 {
        JITTER_SCALE * self.tau
    }

    /// Diagonal inflation used for observed-data blocks: the noise variance,
    /// or the jitter when the data are treated as noiseless.
    pub fn diagonal_nugget(&self) -> f64 {
        if self.noise_var > 0.0 {
            self.noise_var
        } else {
            self.jitter()
        }
    }

    /// `(ln tau, ln rho, ln noise_var)`.
    pub fn log_params(&self) -> [f64; 3] {
        [self.tau.ln(), self.rho.ln(), self.noise_var.ln()]
    }

    pub fn from_log_params(family: KernelFamily, log_params: [f64; 3]) -> Result<Self> {
        let [lt, lr, ln] = log_params;
        Self::new(family, lt.exp(), lr.exp(), ln.exp())
    }
}

/// Kernel hyperparameters for a partitioned model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperParams {
    Shared(KernelSpec),
    PerRegion(Vec<KernelSpec>),
}

impl HyperParams {
    /// Checks that the container fits a model with `regions` leaves.
    pub fn validate(&self, regions: usize) -> Result<()> {
        match self {
            HyperParams::Shared(_) => Ok(()),
            HyperParams::PerRegion(specs) if specs.len() == regions => Ok(()),
            HyperParams::PerRegion(specs) => Err(Error::Config(format!(
                "{} per-region kernels supplied for {regions} regions",
                specs.len()
            ))),
        }
    }

    pub fn region(&self, k: usize) -> &KernelSpec {
        match self {
            HyperParams::Shared(spec) => spec,
            HyperParams::PerRegion(specs) => &specs[k],
        }
    }

    pub fn specs(&self) -> &[KernelSpec] {
        match self {
            HyperParams::Shared(spec) => std::slice::from_ref(spec),
            HyperParams::PerRegion(specs) => specs,
        }
    }

    pub fn max_tau(&self) -> f64 {
        self.specs().iter().map(|s| s.tau).fold(0.0, f64::max)
    }

    /// Nugget applied to every matrix derived from the pseudo-observation covariance.
    pub fn delta_jitter(&self) -> f64 {
        DELTA_JITTER_SCALE * self.max_tau()
    }
}

impl From<KernelSpec> for HyperParams {
    fn from(spec: KernelSpec) -> Self {
        HyperParams::Shared(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_distance_is_tau() {
        let k = KernelSpec::squared_exponential(10.0, 1.0, 0.0).unwrap();
        assert_eq!(k.eval(&[3.7], &[3.7]).unwrap(), 10.0);
    }

    #[test]
    fn exponential_unit_distance() {
        let k = KernelSpec::exponential(10.0, 1.0, 0.0).unwrap();
        let v = k.eval(&[0.0], &[1.0]).unwrap();
        assert!((v - 3.678_794_411_714_423).abs() < 1e-12);
    }

    #[test]
    fn far_field_underflows() {
        let k = KernelSpec::squared_exponential(10.0, 0.1, 0.0).unwrap();
        let v = k.eval(&[0.0, 0.0], &[5.0, 5.0]).unwrap();
        assert!((0.0..1e-300).contains(&v));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let k = KernelSpec::squared_exponential(1.0, 1.0, 0.0).unwrap();
        assert!(matches!(
            k.eval(&[0.0], &[0.0, 1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        let a = Points::from_rows(&[[0.0]]).unwrap();
        let b = Points::from_rows(&[[0.0, 1.0]]).unwrap();
        assert!(k.cross_cov(&a, &b).is_err());
    }

    #[test]
    fn invalid_hyperparameters() {
        assert!(KernelSpec::squared_exponential(0.0, 1.0, 0.0).is_err());
        assert!(KernelSpec::squared_exponential(1.0, -1.0, 0.0).is_err());
        assert!(KernelSpec::squared_exponential(1.0, 1.0, -1e-3).is_err());
    }

    #[test]
    fn cross_cov_small_cases() {
        let k = KernelSpec::squared_exponential(2.5, 1.0, 0.0).unwrap();
        let one = Points::from_rows(&[[1.0, 2.0]]).unwrap();
        assert_eq!(k.cross_cov(&one, &one).unwrap(), DMatrix::from_element(1, 1, 2.5));
        let dup = Points::from_rows(&[[1.0, 2.0], [1.0, 2.0]]).unwrap();
        assert_eq!(k.cross_cov(&dup, &dup).unwrap(), DMatrix::from_element(2, 2, 2.5));
    }

    #[test]
    fn cross_cov_matches_entrywise_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let rows = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let v: Vec<[f64; 2]> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
            Points::from_rows(&v).unwrap()
        };
        let x1 = rows(5, &mut rng);
        let x2 = rows(3, &mut rng);
        for k in [
            KernelSpec::squared_exponential(3.0, 0.7, 0.1).unwrap(),
            KernelSpec::exponential(3.0, 0.7, 0.1).unwrap(),
        ] {
            let c = k.cross_cov(&x1, &x2).unwrap();
            for i in 0..5 {
                for j in 0..3 {
                    let (a, b) = (x1.row(i), x2.row(j));
                    let dist = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                    let expected = match k.family {
                        KernelFamily::SquaredExponential => 3.0 * (-dist * dist / (2.0 * 0.49)).exp(),
                        KernelFamily::Exponential => 3.0 * (-dist / 0.7).exp(),
                    };
                    assert!((c[(i, j)] - expected).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn json_round_trip_and_validation() {
        let k = KernelSpec::exponential(10.0, 1.0, 1.0).unwrap();
        let s = serde_json::to_string(&k).unwrap();
        assert_eq!(s, r#"{"family":"exponential","tau":10.0,"rho":1.0,"noise_var":1.0}"#);
        assert_eq!(serde_json::from_str::<KernelSpec>(&s).unwrap(), k);
        let bad = r#"{"family":"se","tau":-1.0,"rho":1.0,"noise_var":1.0}"#;
        assert!(serde_json::from_str::<KernelSpec>(bad).is_err());
    }

    #[test]
    fn hyperparams_length() {
        let k = KernelSpec::exponential(1.0, 1.0, 1.0).unwrap();
        assert!(HyperParams::Shared(k).validate(8).is_ok());
        assert!(HyperParams::PerRegion(vec![k; 4]).validate(4).is_ok());
        assert!(HyperParams::PerRegion(vec![k; 3]).validate(4).is_err());
    }

    fn family() -> impl Strategy<Value = KernelFamily> {
        prop_oneof![Just(KernelFamily::SquaredExponential), Just(KernelFamily::Exponential)]
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(
            fam in family(),
            tau in 0.01f64..100.0,
            rho in 0.01f64..10.0,
            a in prop::collection::vec(-10.0f64..10.0, 3),
            b in prop::collection::vec(-10.0f64..10.0, 3),
        ) {
            let k = KernelSpec::new(fam, tau, rho, 0.0).unwrap();
            let ab = k.eval(&a, &b).unwrap();
            prop_assert_eq!(ab, k.eval(&b, &a).unwrap());
            prop_assert!((0.0..=tau).contains(&ab));
            prop_assert_eq!(k.eval(&a, &a).unwrap(), tau);
        }

        #[test]
        fn monotone_in_distance(fam in family(), r1 in 0.0f64..5.0, dr in 0.0f64..5.0) {
            let k = KernelSpec::new(fam, 2.0, 1.3, 0.0).unwrap();
            let near = k.eval(&[0.0, 0.0], &[r1, 0.0]).unwrap();
            let far = k.eval(&[0.0, 0.0], &[0.0, r1 + dr]).unwrap();
            prop_assert!(far <= near);
        }

        #[test]
        fn jittered_gram_is_positive_definite(
            fam in family(),
            rho in 0.05f64..5.0,
            pts in prop::collection::vec(prop::array::uniform2(0.0f64..3.0), 1..25),
        ) {
            let k = KernelSpec::new(fam, 10.0, rho, 0.0).unwrap();
            let x = Points::from_rows(&pts).unwrap();
            let mut c = k.cross_cov(&x, &x).unwrap();
            prop_assert_eq!(&c, &c.transpose());
            for i in 0..x.len() {
                c[(i, i)] += k.jitter();
            }
            prop_assert!(c.cholesky().is_some());
        }
    }
}
