use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use patchwork_core::dataset::read_inputs_csv;
use patchwork_core::experiment::{
    bounding_domain, run_sweep, score_against_benchmark, score_test_set, write_sweep_csv, SweepGrid,
};
use patchwork_core::likelihood::optimize_hyperparams;
use patchwork_core::reference::{ExactGp, EXACT_GP_LIMIT};
use patchwork_core::simulate::{benchmark_prediction_targets, sample_gp_dataset};
use patchwork_core::{
    Dataset, Domain, Error, HyperParams, MetricReport, OptimizeConfig, Partitioned, PatchworkModel, Points, Result,
    SimSpec,
};

use crate::args::{EvaluateArgs, FitArgs, ModelArgs, PredictArgs, SimulateArgs, SweepArgs};

const MAX_POINTS_PER_REGION: usize = 600;

/// Smallest power of two with at most 600 points per region.
pub fn default_regions(n: usize) -> usize {
    let mut k = 1;
    while n.div_ceil(k) > MAX_POINTS_PER_REGION {
        k *= 2;
    }
    k
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    if a.n == 0 {
        return Err(Error::InvalidInput("--n must be positive".into()));
    }
    if a.d == 0 {
        return Err(Error::InvalidInput("--d must be positive".into()));
    }
    let spec = SimSpec {
        n: a.n,
        kernel: a.kernel.spec()?,
        domain: Domain::cube(a.d, a.lower, a.upper),
        seed: a.seed,
    };
    let data = sample_gp_dataset(&spec)?;
    data.write_csv(&a.out)?;
    let sidecar = a.out.with_extension("json");
    std::fs::write(&sidecar, serde_json::to_string_pretty(&spec)?)?;
    info!("wrote {} rows to {} and spec to {}", data.len(), a.out.display(), sidecar.display());
    Ok(())
}

/// Partitions, optionally tunes the kernel, and factorizes.
fn fit_model(x: &Points, y: &[f64], m: &ModelArgs, seed: u64) -> Result<PatchworkModel> {
    let k = m.k.unwrap_or_else(|| default_regions(x.len()));
    if k == 0 {
        return Err(Error::Config("--k must be at least 1".into()));
    }
    let mut spec = m.kernel.spec()?;

    let start = Instant::now();
    let part = Partitioned::new(x, y, k, m.b, seed)?;
    let partition = start.elapsed().as_secs_f64();
    info!(
        "partitioned {} points into {} regions with {} pseudo points in {partition:.3}s",
        x.len(),
        part.n_regions(),
        part.n_delta()
    );

    if m.optimize {
        let start = Instant::now();
        let config = OptimizeConfig {
            budget: m.budget,
            seed,
            ..OptimizeConfig::default()
        };
        let result = optimize_hyperparams(&spec, &part, &config)?;
        info!(
            "optimized in {:.3}s: tau={:.6} rho={:.6} noise={:.6} nl={:.6}",
            start.elapsed().as_secs_f64(),
            result.best.tau,
            result.best.rho,
            result.best.noise_var,
            result.best_value
        );
        if let Some(path) = &m.trace {
            result.write_trace_csv(BufWriter::new(File::create(path)?))?;
        }
        spec = result.best;
    }

    let model = PatchworkModel::from_partitioned(part, HyperParams::Shared(spec))?;
    let t = model.timings();
    info!(
        "timings: partition {partition:.3}s, assembly {:.3}s, factorization {:.3}s",
        t.assembly, t.factorization
    );
    Ok(model)
}

pub fn fit(a: &FitArgs) -> Result<()> {
    let data = Dataset::read_csv(&a.data)?;
    let model = fit_model(&data.x, &data.y, &a.model_args, a.seed)?;
    model.save_to_path(&a.model)?;
    info!("saved model to {}", a.model.display());
    Ok(())
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let model = PatchworkModel::load_from_path(&a.model)?;
    let x = read_inputs_csv(&a.data)?;
    if x.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: x.dim(),
        });
    }
    let start = Instant::now();
    let mut rows = Vec::with_capacity(x.len());
    for p in x.rows() {
        rows.push(model.predict(p)?);
    }
    info!("predicted {} points in {:.3}s", x.len(), start.elapsed().as_secs_f64());

    let mut out = output(a.out.as_deref())?;
    let header: Vec<String> = (1..=x.dim()).map(|j| format!("x{j}")).collect();
    writeln!(out, "{},mean,variance,region", header.join(","))?;
    for (p, r) in x.rows().zip(&rows) {
        let coords: Vec<String> = p.iter().map(f64::to_string).collect();
        writeln!(out, "{},{},{},{}", coords.join(","), r.mean, r.variance, r.region)?;
    }
    out.flush()?;
    Ok(())
}

/// Training data stored in a fitted model, with the original responses.
fn training_data(model: &PatchworkModel) -> Result<(Points, Vec<f64>)> {
    let part = model.partitioned();
    let mut x = Points::empty(model.dim());
    let mut y = Vec::with_capacity(part.n_obs());
    for region in &part.regions {
        for (p, r) in region.inputs.rows().zip(&region.responses) {
            x.push(p)?;
            y.push(r + part.mean_offset);
        }
    }
    Ok((x, y))
}

/// Interior and boundary metrics against the exact GP built from the
/// model's own training data and kernel.
fn benchmark_suite(model: &PatchworkModel, a: &EvaluateArgs) -> Result<Option<MetricReport>> {
    let HyperParams::Shared(spec) = model.hyperparams() else {
        warn!("benchmark metrics need a shared kernel; skipped");
        return Ok(None);
    };
    let (x, y) = training_data(model)?;
    if x.len() > EXACT_GP_LIMIT {
        warn!("{} training points exceed the exact GP limit of {EXACT_GP_LIMIT}; benchmark metrics skipped", x.len());
        return Ok(None);
    }
    let bench = ExactGp::fit(spec, &x, &y)?;
    let domain = bounding_domain(&x)?;
    let targets =
        benchmark_prediction_targets(&domain, model.tree(), model.boundaries(), a.n_interior, a.n_boundary, a.seed)?;
    score_against_benchmark(model, &bench, &targets).map(Some)
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let data = Dataset::read_csv(&a.data)?;
    let (model, test) = match (&a.model, a.split) {
        (Some(path), _) => (PatchworkModel::load_from_path(path)?, data),
        (None, Some(fraction)) => {
            let (train, test) = data.split(fraction, a.seed)?;
            info!("split into {} training and {} test rows", train.len(), test.len());
            (fit_model(&train.x, &train.y, &a.model_args, a.seed)?, test)
        }
        (None, None) => return Err(Error::Config("either --model or --split is required".into())),
    };
    if test.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: test.dim(),
        });
    }

    let mut report = score_test_set(&model, &test)?;
    if test.f_true.is_some() {
        if let Some(b) = benchmark_suite(&model, a)? {
            report.i_mse = b.i_mse;
            report.i_mse_var = b.i_mse_var;
            report.b_mse = b.b_mse;
            report.msm = b.msm;
            report.b_mse_var = b.b_mse_var;
            report.msm_var = b.msm_var;
            report.t_i = b.t_i;
            report.t_b = b.t_b;
        }
    }

    let json = report.to_json()?;
    match &a.out {
        Some(path) => {
            std::fs::write(path, format!("{json}\n"))?;
            let mut w = BufWriter::new(File::create(path.with_extension("csv"))?);
            writeln!(w, "{}", MetricReport::CSV_HEADER.join(","))?;
            writeln!(w, "{}", report.csv_fields().join(","))?;
            w.flush()?;
            info!("wrote report to {}", path.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

pub fn sweep(a: &SweepArgs) -> Result<()> {
    let grid = SweepGrid {
        ks: a.ks.clone(),
        bs: a.bs.clone(),
        rhos: a.rhos.clone(),
        dims: a.dims.clone(),
        replicates: a.replicates,
        n: a.n,
        family: a.kernel.into(),
        tau: a.tau,
        noise_var: a.noise,
        seed: a.seed,
        n_interior: a.n_interior,
        n_boundary: a.n_boundary,
    };
    let rows = run_sweep(&grid, a.jobs)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        warn!("{failed} of {} cells failed; see the error column", rows.len());
    }
    write_sweep_csv(&rows, output(a.out.as_deref())?)
}
