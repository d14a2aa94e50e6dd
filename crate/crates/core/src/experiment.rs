//! Scoring helpers and the factorial sweep used by the command line tool.

use std::io::Write;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{HyperParams, KernelFamily, KernelSpec};
use crate::metrics::{boundary_metrics, mse, nlpd, MetricReport, SidePredictions};
use crate::model::PatchworkModel;
use crate::points::Points;
use crate::reference::{ExactGp, EXACT_GP_LIMIT};
use crate::simulate::{benchmark_prediction_targets, sample_gp_dataset, Domain, PredictionTargets, SimSpec};

/// MSE and NLPD of the model against observed test responses. The
/// predictive density of an observation adds the region's noise variance.
pub fn score_test_set(model: &PatchworkModel, test: &Dataset) -> Result<MetricReport> {
    let (means, vars) = predict_observations(model, &test.x)?;
    Ok(MetricReport {
        mse: Some(mse(&test.y, &means)?),
        nlpd: Some(nlpd(&test.y, &means, &vars)?),
        t: test.len(),
        ..Default::default()
    })
}

/// Predictive means and observation variances, in parallel.
pub fn predict_observations(model: &PatchworkModel, x: &Points) -> Result<(Vec<f64>, Vec<f64>)> {
    let rows: Vec<&[f64]> = x.rows().collect();
    let preds = rows
        .par_iter()
        .map(|p| {
            let pred = model.predict(p)?;
            Ok((pred.mean, pred.variance + model.hyperparams().region(pred.region).diagonal_nugget()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(preds.into_iter().unzip())
}

/// Interior and boundary scores against a benchmark predictor.
pub fn score_against_benchmark(model: &PatchworkModel, bench: &ExactGp, targets: &PredictionTargets) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    if !targets.interior.is_empty() {
        let (bm, bv) = bench.predict_batch(&targets.interior)?;
        let rows: Vec<&[f64]> = targets.interior.rows().collect();
        let preds = rows.par_iter().map(|p| model.predict(p)).collect::<Result<Vec<_>>>()?;
        let means: Vec<f64> = preds.iter().map(|p| p.mean).collect();
        let vars: Vec<f64> = preds.iter().map(|p| p.variance).collect();
        report.i_mse = Some(mse(&bm, &means)?);
        report.i_mse_var = Some(mse(&bv, &vars)?);
        report.t_i = rows.len();
    }
    if targets.boundary.is_empty() {
        report.set_boundary(None, 0);
        return Ok(report);
    }
    let points = Points::from_rows(&targets.boundary.iter().map(|b| b.point.clone()).collect::<Vec<_>>())?;
    let (bm, bv) = bench.predict_batch(&points)?;
    let sides = targets
        .boundary
        .par_iter()
        .map(|b| Ok((model.predict_in_region(&b.point, b.k)?, model.predict_in_region(&b.point, b.l)?)))
        .collect::<Result<Vec<_>>>()?;
    let sp = SidePredictions {
        mean_k: sides.iter().map(|s| s.0.mean).collect(),
        var_k: sides.iter().map(|s| s.0.variance).collect(),
        mean_l: sides.iter().map(|s| s.1.mean).collect(),
        var_l: sides.iter().map(|s| s.1.variance).collect(),
    };
    report.set_boundary(Some(boundary_metrics(&bm, &bv, &sp)?), sides.len());
    Ok(report)
}

/// One cell of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub b: usize,
    pub kernel: KernelSpec,
    pub replicate: usize,
    /// Seeds the dataset; cells sharing it see the same data.
    pub data_seed: u64,
    pub fit_seed: u64,
    pub n_interior: usize,
    pub n_boundary: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub spec: CellSpec,
    pub report: MetricReport,
    pub partition_secs: f64,
    pub assembly_secs: f64,
    pub factorization_secs: f64,
    pub prediction_secs: f64,
    pub error: Option<String>,
}

/// Simulates data, fits with the generating kernel and scores against the
/// exact GP with the same kernel. Failures are recorded, not propagated.
pub fn run_cell(spec: &CellSpec) -> CellResult {
    let mut result = CellResult {
        spec: spec.clone(),
        report: MetricReport::default(),
        partition_secs: 0.0,
        assembly_secs: 0.0,
        factorization_secs: 0.0,
        prediction_secs: 0.0,
        error: None,
    };
    if let Err(e) = run_cell_inner(spec, &mut result) {
        warn!("cell k={} b={} replicate={} failed: {e}", spec.k, spec.b, spec.replicate);
        result.error = Some(e.to_string());
    }
    result
}

fn run_cell_inner(spec: &CellSpec, out: &mut CellResult) -> Result<()> {
    let sim = SimSpec::new(spec.n, spec.d, spec.kernel, spec.data_seed);
    let data = sample_gp_dataset(&sim)?;
    let model = PatchworkModel::fit(&data.x, &data.y, spec.k, spec.b, &HyperParams::Shared(spec.kernel), spec.fit_seed)?;
    let t = model.timings();
    out.partition_secs = t.partition;
    out.assembly_secs = t.assembly;
    out.factorization_secs = t.factorization;

    let targets = benchmark_prediction_targets(
        &sim.domain,
        model.tree(),
        model.boundaries(),
        spec.n_interior,
        spec.n_boundary,
        spec.fit_seed ^ 0x5151,
    )?;
    let start = Instant::now();
    let all: Vec<Vec<f64>> = targets.interior.rows().map(<[f64]>::to_vec).collect();
    for p in &all {
        model.predict(p)?;
    }
    out.prediction_secs = start.elapsed().as_secs_f64();

    if spec.n > EXACT_GP_LIMIT {
        warn!("n = {} exceeds the exact GP limit; benchmark metrics omitted", spec.n);
        return Ok(());
    }
    let bench = ExactGp::fit(&spec.kernel, &data.x, &data.y)?;
    out.report = score_against_benchmark(&model, &bench, &targets)?;
    Ok(())
}

/// Factorial grid over region count, pseudo-point count, length-scale,
/// dimension and replicate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub ks: Vec<usize>,
    pub bs: Vec<usize>,
    pub rhos: Vec<f64>,
    pub dims: Vec<usize>,
    pub replicates: usize,
    pub n: usize,
    pub family: KernelFamily,
    pub tau: f64,
    pub noise_var: f64,
    pub seed: u64,
    pub n_interior: usize,
    pub n_boundary: usize,
}

impl SweepGrid {
    pub fn cells(&self) -> Result<Vec<CellSpec>> {
        if self.ks.is_empty() || self.bs.is_empty() || self.rhos.is_empty() || self.dims.is_empty() || self.replicates == 0 {
            return Err(Error::Config("every sweep axis needs at least one value".into()));
        }
        let mut cells = Vec::new();
        for (ri, &rho) in self.rhos.iter().enumerate() {
            let kernel = KernelSpec::new(self.family, self.tau, rho, self.noise_var)?;
            for (di, &d) in self.dims.iter().enumerate() {
                for rep in 0..self.replicates {
                    let data_seed = mix(self.seed, &[ri as u64, di as u64, rep as u64]);
                    for &k in &self.ks {
                        for &b in &self.bs {
                            cells.push(CellSpec {
                                n: self.n,
                                d,
                                k,
                                b,
                                kernel,
                                replicate: rep,
                                data_seed,
                                fit_seed: mix(data_seed, &[k as u64]),
                                n_interior: self.n_interior,
                                n_boundary: self.n_boundary,
                            });
                        }
                    }
                }
            }
        }
        Ok(cells)
    }
}

/// SplitMix64-style mixing of a base seed with indices.
fn mix(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(seed, |acc, &p| {
        let mut z = acc.wrapping_add(p.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

/// Runs every cell with at most `jobs` cells in flight.
pub fn run_sweep(grid: &SweepGrid, jobs: usize) -> Result<Vec<CellResult>> {
    let cells = grid.cells()?;
    info!("running {} sweep cells on {} workers", cells.len(), jobs.max(1));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| cells.par_iter().map(run_cell).collect()))
}

pub fn write_sweep_csv<W: Write>(rows: &[CellResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = vec!["k", "b", "rho", "d", "n", "replicate", "seed"];
    header.extend(MetricReport::CSV_HEADER);
    header.extend(["partition_s", "assembly_s", "factorization_s", "prediction_s", "error"]);
    w.write_record(&header)?;
    for r in rows {
        let s = &r.spec;
        let mut fields = vec![
            s.k.to_string(),
            s.b.to_string(),
            s.kernel.rho.to_string(),
            s.d.to_string(),
            s.n.to_string(),
            s.replicate.to_string(),
            s.fit_seed.to_string(),
        ];
        fields.extend(r.report.csv_fields());
        fields.extend([
            r.partition_secs.to_string(),
            r.assembly_secs.to_string(),
            r.factorization_secs.to_string(),
            r.prediction_secs.to_string(),
            r.error.clone().unwrap_or_default(),
        ]);
        w.write_record(&fields)?;
    }
    w.flush()?;
    Ok(())
}

/// Domain covering a point set, used when no simulation box is known.
pub fn bounding_domain(x: &Points) -> Result<Domain> {
    let (lower, mut upper) = x
        .bounding_box()
        .ok_or_else(|| Error::InvalidInput("cannot bound an empty point set".into()))?;
    for (lo, hi) in lower.iter().zip(upper.iter_mut()) {
        if *hi <= *lo {
            *hi = lo + 1.0;
        }
    }
    Ok(Domain { lower, upper })
}
