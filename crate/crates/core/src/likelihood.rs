//! Negative log marginal likelihood of the augmented observations and a
//! derivative-free search over shared kernel hyperparameters.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{HyperParams, KernelSpec};
use crate::model::{assemble, Factorization, Partitioned};

/// One likelihood evaluation and its decomposition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NLState {
    /// Log-space parameters, three per kernel.
    pub theta: Vec<f64>,
    pub value: f64,
    pub logdet_data: f64,
    pub logdet_schur: f64,
    pub quadratic: f64,
}

impl NLState {
    fn infinite(theta: Vec<f64>) -> Self {
        Self {
            theta,
            value: f64::INFINITY,
            logdet_data: f64::INFINITY,
            logdet_schur: f64::INFINITY,
            quadratic: f64::INFINITY,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
    }
}

/// `(N + n_delta)/2 log 2pi + (log|C_DD| + log|S|)/2 + y^T Q y / 2`.
/// Returns an infinite value instead of an error when a factorization fails.
pub fn neg_log_marginal(hyper: &HyperParams, part: &Partitioned) -> Result<NLState> {
    hyper.validate(part.n_regions())?;
    let theta: Vec<f64> = hyper.specs().iter().flat_map(|s| s.log_params()).collect();
    let aug = assemble(part, hyper)?;
    let fact = match Factorization::new(part, aug, hyper.delta_jitter()) {
        Ok(f) => f,
        Err(e) if e.is_numerical() => return Ok(NLState::infinite(theta)),
        Err(e) => return Err(e),
    };
    let n = (part.n_obs() + part.n_delta()) as f64;
    let value = 0.5 * n * (2.0 * std::f64::consts::PI).ln()
        + 0.5 * (fact.logdet_data + fact.logdet_schur)
        + 0.5 * fact.quadratic;
    if !value.is_finite() {
        return Ok(NLState::infinite(theta));
    }
    Ok(NLState {
        theta,
        value,
        logdet_data: fact.logdet_data,
        logdet_schur: fact.logdet_schur,
        quadratic: fact.quadratic,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeConfig {
    /// Maximum number of likelihood evaluations over all restarts.
    pub budget: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            budget: 200,
            restarts: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub evaluation: usize,
    pub restart: usize,
    pub log_tau: f64,
    pub log_rho: f64,
    pub log_noise: f64,
    pub nl: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeResult {
    pub best: KernelSpec,
    pub best_value: f64,
    pub trace: Vec<TraceRow>,
}

impl OptimizeResult {
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.trace {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

const INITIAL_STEP: f64 = 0.5;
const RESTART_SPREAD: f64 = 0.5;

/// Nelder-Mead over `(log tau, log rho, log noise)` with the pseudo
/// observations held fixed. The first run starts at `init`; further runs
/// start from seeded perturbations of it.
pub fn optimize_hyperparams(init: &KernelSpec, part: &Partitioned, config: &OptimizeConfig) -> Result<OptimizeResult> {
    if config.budget < 20 {
        return Err(Error::Config(format!("optimizer budget {} is below the minimum of 20", config.budget)));
    }
    let restarts = config.restarts.max(1);
    let family = init.family;
    let mut start = init.log_params();
    if init.noise_var == 0.0 {
        start[2] = (1e-6 * init.tau).ln();
    }

    let mut trace = Vec::new();
    let mut objective = |restart: usize, theta: &[f64; 3]| -> Result<f64> {
        let value = match KernelSpec::from_log_params(family, *theta) {
            Ok(spec) => neg_log_marginal(&HyperParams::Shared(spec), part)?.value,
            Err(_) => f64::INFINITY,
        };
        trace.push(TraceRow {
            evaluation: trace.len(),
            restart,
            log_tau: theta[0],
            log_rho: theta[1],
            log_noise: theta[2],
            nl: value,
        });
        Ok(value)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let spread = Normal::new(0.0, RESTART_SPREAD).expect("valid normal");
    let mut best = (start, f64::INFINITY);
    for r in 0..restarts {
        let budget = config.budget / restarts + usize::from(r < config.budget % restarts);
        let x0 = if r == 0 {
            start
        } else {
            let mut p = start;
            p.iter_mut().for_each(|v| *v += spread.sample(&mut rng));
            p
        };
        let (x, fx) = nelder_mead(x0, budget, |t| objective(r, t))?;
        if fx < best.1 {
            best = (x, fx);
        }
    }
    if !best.1.is_finite() {
        return Err(Error::Optimization(
            "every likelihood evaluation was infinite; try a smaller length-scale range".into(),
        ));
    }
    Ok(OptimizeResult {
        best: KernelSpec::from_log_params(family, best.0)?,
        best_value: best.1,
        trace,
    })
}

/// Minimizes `f` from `x0` with at most `budget` evaluations.
fn nelder_mead<F>(x0: [f64; 3], budget: usize, mut f: F) -> Result<([f64; 3], f64)>
where
    F: FnMut(&[f64; 3]) -> Result<f64>,
{
    const N: usize = 3;
    let mut used = 0;
    let mut eval = |x: &[f64; 3], used: &mut usize| -> Result<f64> {
        *used += 1;
        f(x)
    };
    let mut simplex: Vec<([f64; 3], f64)> = Vec::with_capacity(N + 1);
    for i in 0..=N {
        if used >= budget {
            break;
        }
        let mut x = x0;
        if i > 0 {
            x[i - 1] += INITIAL_STEP;
        }
        let fx = eval(&x, &mut used)?;
        simplex.push((x, fx));
    }
    let by_value = |a: &([f64; 3], f64), b: &([f64; 3], f64)| a.1.total_cmp(&b.1);
    if simplex.len() <= N {
        return Ok(simplex.into_iter().min_by(by_value).expect("budget is positive"));
    }

    while used < budget {
        simplex.sort_by(by_value);
        let (best, worst) = (simplex[0].1, simplex[N].1);
        let spread = (0..N)
            .map(|j| simplex.iter().map(|s| (s.0[j] - simplex[0].0[j]).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if best.is_finite() && (worst - best).abs() <= 1e-10 * (1.0 + best.abs()) && spread < 1e-8 {
            break;
        }
        let mut centroid = [0.0; N];
        for s in &simplex[..N] {
            for (c, v) in centroid.iter_mut().zip(&s.0) {
                *c += v / N as f64;
            }
        }
        let along = |t: f64| -> [f64; 3] { std::array::from_fn(|j| centroid[j] + t * (simplex[N].0[j] - centroid[j])) };

        let xr = along(-1.0);
        let fr = eval(&xr, &mut used)?;
        if fr < simplex[0].1 {
            if used >= budget {
                simplex[N] = (xr, fr);
                break;
            }
            let xe = along(-2.0);
            let fe = eval(&xe, &mut used)?;
            simplex[N] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[N - 1].1 {
            simplex[N] = (xr, fr);
            continue;
        }
        if used >= budget {
            break;
        }
        let (xc, fc) = if fr < simplex[N].1 {
            let xc = along(-0.5);
            (xc, eval(&xc, &mut used)?)
        } else {
            let xc = along(0.5);
            (xc, eval(&xc, &mut used)?)
        };
        if fc < simplex[N].1.min(fr) {
            simplex[N] = (xc, fc);
            continue;
        }
        // shrink toward the best vertex
        for i in 1..=N {
            if used >= budget {
                break;
            }
            let x: [f64; 3] = std::array::from_fn(|j| simplex[0].0[j] + 0.5 * (simplex[i].0[j] - simplex[0].0[j]));
            let fx = eval(&x, &mut used)?;
            simplex[i] = (x, fx);
        }
    }
    Ok(simplex.into_iter().min_by(by_value).expect("simplex is nonempty"))
}
