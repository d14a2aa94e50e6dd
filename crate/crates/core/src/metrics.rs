//! Accuracy and continuity scores for predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::check_dim;

fn check_nonempty(a: usize, b: usize) -> Result<()> {
    check_dim(a, b)?;
    if a == 0 {
        return Err(Error::InvalidInput("metrics need at least one value".into()));
    }
    Ok(())
}

/// Mean squared error.
pub fn mse(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_nonempty(truth.len(), pred.len())?;
    Ok(truth.iter().zip(pred).map(|(t, p)| (t - p).powi(2)).sum::<f64>() / truth.len() as f64)
}

/// Mean negative log predictive density under Gaussian predictions.
pub fn nlpd(truth: &[f64], means: &[f64], variances: &[f64]) -> Result<f64> {
    check_nonempty(truth.len(), means.len())?;
    check_dim(truth.len(), variances.len())?;
    if let Some(i) = variances.iter().position(|v| v.is_nan() || *v <= 0.0) {
        return Err(Error::InvalidInput(format!(
            "predictive variance at index {i} is {} (must be positive)",
            variances[i]
        )));
    }
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let total: f64 = truth
        .iter()
        .zip(means)
        .zip(variances)
        .map(|((t, m), v)| (t - m).powi(2) / (2.0 * v) + 0.5 * (ln2pi + v.ln()))
        .sum();
    Ok(total / truth.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryMetrics {
    pub b_mse: f64,
    pub msm: f64,
    pub b_mse_var: f64,
    pub msm_var: f64,
}

/// Mean and variance predictions from both sides of each boundary point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SidePredictions {
    pub mean_k: Vec<f64>,
    pub var_k: Vec<f64>,
    pub mean_l: Vec<f64>,
    pub var_l: Vec<f64>,
}

/// Boundary error of the lower-index side against the benchmark, and the
/// mismatch between the two sides.
pub fn boundary_metrics(bench_means: &[f64], bench_vars: &[f64], sides: &SidePredictions) -> Result<BoundaryMetrics> {
    let n = bench_means.len();
    check_nonempty(n, bench_vars.len())?;
    for len in [sides.mean_k.len(), sides.var_k.len(), sides.mean_l.len(), sides.var_l.len()] {
        check_dim(n, len)?;
    }
    Ok(BoundaryMetrics {
        b_mse: mse(bench_means, &sides.mean_k)?,
        msm: mse(&sides.mean_k, &sides.mean_l)?,
        b_mse_var: mse(bench_vars, &sides.var_k)?,
        msm_var: mse(&sides.var_k, &sides.var_l)?,
    })
}

/// All scores for one evaluation. Fields that do not apply are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: Option<f64>,
    pub nlpd: Option<f64>,
    pub i_mse: Option<f64>,
    pub b_mse: Option<f64>,
    pub msm: Option<f64>,
    pub i_mse_var: Option<f64>,
    pub b_mse_var: Option<f64>,
    pub msm_var: Option<f64>,
    pub t: usize,
    pub t_i: usize,
    pub t_b: usize,
}

impl MetricReport {
    pub const CSV_HEADER: [&'static str; 11] =
        ["mse", "nlpd", "i_mse", "b_mse", "msm", "i_mse_var", "b_mse_var", "msm_var", "t", "t_i", "t_b"];

    pub fn set_boundary(&mut self, b: Option<BoundaryMetrics>, count: usize) {
        self.t_b = count;
        self.b_mse = b.map(|b| b.b_mse);
        self.msm = b.map(|b| b.msm);
        self.b_mse_var = b.map(|b| b.b_mse_var);
        self.msm_var = b.map(|b| b.msm_var);
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Values in [`MetricReport::CSV_HEADER`] order; absent metrics are empty.
    pub fn csv_fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            opt(self.mse),
            opt(self.nlpd),
            opt(self.i_mse),
            opt(self.b_mse),
            opt(self.msm),
            opt(self.i_mse_var),
            opt(self.b_mse_var),
            opt(self.msm_var),
            self.t.to_string(),
            self.t_i.to_string(),
            self.t_b.to_string(),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_cases() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, -1.0]).unwrap(), 1.0);
        assert!(mse(&[], &[]).is_err());
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
        let v = 1.0 / (2.0 * std::f64::consts::PI);
        assert!(nlpd(&[1.0, 2.0], &[1.0, 2.0], &[v, v]).unwrap().abs() < 1e-15);
        assert!((nlpd(&[3.0], &[3.0], &[1.0]).unwrap() - 0.918_938_533_204_672_7).abs() < 1e-15);
        let err = nlpd(&[0.0, 0.0], &[0.0, 0.0], &[1.0, 0.0]).unwrap_err();
        assert!(err.to_string().contains("index 1"));
    }

    #[test]
    fn boundary_hand_cases() {
        let sides = SidePredictions {
            mean_k: vec![1.0, 2.0],
            var_k: vec![0.5, 0.5],
            mean_l: vec![-1.0, 0.0],
            var_l: vec![0.5, 0.5],
        };
        let b = boundary_metrics(&[1.0, 2.0], &[0.5, 0.5], &sides).unwrap();
        assert_eq!((b.b_mse, b.msm, b.b_mse_var, b.msm_var), (0.0, 4.0, 0.0, 0.0));
        let same = SidePredictions { mean_l: sides.mean_k.clone(), ..sides.clone() };
        assert_eq!(boundary_metrics(&[0.0, 0.0], &[0.5, 0.5], &same).unwrap().msm, 0.0);
        assert!(boundary_metrics(&[0.0], &[0.5, 0.5], &sides).is_err());
    }

    #[test]
    fn absent_is_not_zero() {
        let mut r = MetricReport { mse: Some(0.5), t: 3, ..Default::default() };
        r.set_boundary(None, 0);
        assert_eq!(r.msm, None);
        let json = r.to_json().unwrap();
        assert!(json.contains("\"msm\": null"));
        let fields = r.csv_fields();
        assert_eq!(fields.len(), MetricReport::CSV_HEADER.len());
        assert_eq!(fields[0], "0.5");
        assert_eq!(fields[4], "");
    }

    proptest! {
        #[test]
        fn agree_with_loops(v in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0.01f64..3.0), 1..40)) {
            let t: Vec<f64> = v.iter().map(|x| x.0).collect();
            let m: Vec<f64> = v.iter().map(|x| x.1).collect();
            let s: Vec<f64> = v.iter().map(|x| x.2).collect();
            let mut a = 0.0;
            let mut b = 0.0;
            for i in 0..t.len() {
                a += (t[i] - m[i]) * (t[i] - m[i]);
                b += (t[i] - m[i]) * (t[i] - m[i]) / (2.0 * s[i]) + 0.5 * (2.0 * std::f64::consts::PI * s[i]).ln();
            }
            let n = t.len() as f64;
            prop_assert!((mse(&t, &m).unwrap() - a / n).abs() < 1e-12);
            prop_assert!((nlpd(&t, &m, &s).unwrap() - b / n).abs() < 1e-10);
            // permutation invariance
            let mut idx: Vec<usize> = (0..t.len()).collect();
            idx.reverse();
            let pt: Vec<f64> = idx.iter().map(|&i| t[i]).collect();
            let pm: Vec<f64> = idx.iter().map(|&i| m[i]).collect();
            prop_assert!((mse(&pt, &pm).unwrap() - a / n).abs() < 1e-12);
        }
    }
}
