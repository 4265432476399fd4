//! Monte Carlo benchmark of every method on freshly sampled scenarios.
//!
//! Trial `k` draws from `ChaCha8Rng::seed_from_u64(seed)` on stream `k`, so
//! each trial's scenario, noise and oracle perturbation depend only on
//! `(seed, k)` and trials can run in any order.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vla_core::baselines::{omp_only, two_step_ls};
use vla_core::initializer::{load_model, InitStrategy, NeuralModel};
use vla_core::nomp::{solve, Problem, SolverConfig};
use vla_core::signal::synthesize_cfr;
use vla_core::{Scenario, Vec3};

use crate::config::{HarnessConfig, Method};

pub const BENCH_CSV_VERSION: &str = "# vla-bench-csv v1";

/// Per-trial generator: fixed seed, one stream per trial index.
pub fn trial_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub method: Method,
    /// Distance between the reported and the true source; `None` when the
    /// method failed.
    pub error_m: Option<f64>,
    pub estimate: Option<[f64; 3]>,
    pub iterations: usize,
    pub runtime_ms: f64,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub trials: usize,
    pub failures: usize,
    pub mean_error_m: f64,
    pub median_error_m: f64,
    pub p90_error_m: f64,
    pub mean_runtime_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub seed: u64,
    pub trials: usize,
    pub methods: Vec<MethodSummary>,
}

/// Everything a trial needs besides its index.
pub struct BenchContext<'a> {
    pub config: &'a HarnessConfig,
    pub seed: u64,
    pub model: Option<Arc<NeuralModel>>,
}

impl<'a> BenchContext<'a> {
    pub fn new(config: &'a HarnessConfig, seed: u64) -> vla_core::Result<Self> {
        let model = match &config.bench.model {
            Some(path) => Some(Arc::new(load_model(path)?)),
            None => None,
        };
        Ok(Self { config, seed, model })
    }
}

/// The scenario, problem and oracle seed of trial `index`.
pub fn trial_inputs(config: &HarnessConfig, seed: u64, index: usize) -> vla_core::Result<(Scenario, Problem, u64)> {
    let mut rng = trial_rng(seed, index as u64);
    let scenario = config.scenario.sample(&mut rng)?;
    let snapshots = synthesize_cfr(&scenario, &mut rng)?;
    let oracle_seed = rng.next_u64();
    let problem = Problem::from_scenario(&scenario, snapshots)?;
    Ok((scenario, problem, oracle_seed))
}

fn solver_config(config: &HarnessConfig, scenario: &Scenario, paths: usize) -> SolverConfig {
    let noise = config
        .solver
        .noise_variance
        .or((scenario.noise_variance > 0.0).then_some(scenario.noise_variance));
    SolverConfig {
        paths,
        noise_variance: noise,
        ..config.solver.clone()
    }
}

fn learned_init(ctx: &BenchContext, scenario: &Scenario, oracle_seed: u64) -> InitStrategy {
    let room_dims = Some(ctx.config.scenario.room_dims);
    match &ctx.model {
        Some(model) => InitStrategy::Neural {
            model: model.clone(),
            room_dims,
        },
        None => InitStrategy::OraclePerturbed {
            truth: *scenario.source(),
            max_error: ctx.config.bench.oracle_error_m,
            seed: oracle_seed,
            room_dims,
        },
    }
}

fn run_method(ctx: &BenchContext, method: Method, scenario: &Scenario, problem: &Problem, oracle_seed: u64) -> vla_core::Result<(Vec3, usize)> {
    let room_dims = ctx.config.scenario.room_dims;
    match method {
        Method::Omp => Ok((omp_only(problem, room_dims, &ctx.config.solver)?.position, 1)),
        Method::Nomp(l) => {
            let out = solve(problem, &solver_config(ctx.config, scenario, l), &InitStrategy::Traditional { room_dims })?;
            Ok((*out.source(), out.diagnostics.len()))
        }
        Method::MlNomp(l) => {
            let init = learned_init(ctx, scenario, oracle_seed);
            let out = solve(problem, &solver_config(ctx.config, scenario, l), &init)?;
            Ok((*out.source(), out.diagnostics.len()))
        }
        Method::Ml => {
            let init = learned_init(ctx, scenario, oracle_seed);
            let p = init.initial_position(problem)?.expect("learned initializers give a position");
            Ok((p, 0))
        }
        Method::TwoStepLs => Ok((two_step_ls(problem, &ctx.config.solver)?, 1)),
    }
}

/// Runs every configured method on trial `index`.
pub fn run_trial(ctx: &BenchContext, methods: &[Method], index: usize) -> vla_core::Result<Vec<TrialResult>> {
    let (scenario, problem, oracle_seed) = trial_inputs(ctx.config, ctx.seed, index)?;
    Ok(methods
        .iter()
        .map(|&method| {
            let start = Instant::now();
            let outcome = run_method(ctx, method, &scenario, &problem, oracle_seed);
            let runtime_ms = start.elapsed().as_secs_f64() * 1e3;
            match outcome {
                Ok((p, iterations)) => TrialResult {
                    trial: index,
                    method,
                    error_m: Some((p - scenario.source()).norm()),
                    estimate: Some([p.x, p.y, p.z]),
                    iterations,
                    runtime_ms,
                    failure: None,
                },
                Err(e) => TrialResult {
                    trial: index,
                    method,
                    error_m: None,
                    estimate: None,
                    iterations: 0,
                    runtime_ms,
                    failure: Some(e.to_string()),
                },
            }
        })
        .collect())
}

/// All trials in index order, then methods in configured order.
pub fn run_benchmark(ctx: &BenchContext, methods: &[Method], trials: usize) -> vla_core::Result<(Vec<TrialResult>, BenchmarkReport)> {
    let per_trial: Vec<Vec<TrialResult>> = (0..trials)
        .into_par_iter()
        .map(|k| run_trial(ctx, methods, k))
        .collect::<vla_core::Result<_>>()?;
    let results: Vec<TrialResult> = per_trial.into_iter().flatten().collect();
    let report = summarize(ctx.seed, trials, methods, &results);
    Ok((results, report))
}

pub fn summarize(seed: u64, trials: usize, methods: &[Method], results: &[TrialResult]) -> BenchmarkReport {
    let methods = methods
        .iter()
        .map(|&method| {
            let rows: Vec<&TrialResult> = results.iter().filter(|r| r.method == method).collect();
            let mut errors: Vec<f64> = rows.iter().filter_map(|r| r.error_m).collect();
            errors.sort_by(f64::total_cmp);
            let n = errors.len();
            let mean = |xs: &[f64]| if xs.is_empty() { f64::NAN } else { xs.iter().sum::<f64>() / xs.len() as f64 };
            let rank = |q: f64| if n == 0 { f64::NAN } else { errors[((q * n as f64).ceil() as usize).clamp(1, n) - 1] };
            let runtimes: Vec<f64> = rows.iter().map(|r| r.runtime_ms).collect();
            MethodSummary {
                method,
                trials: rows.len(),
                failures: rows.len() - n,
                mean_error_m: mean(&errors),
                median_error_m: rank(0.5),
                p90_error_m: rank(0.9),
                mean_runtime_ms: mean(&runtimes),
            }
        })
        .collect();
    BenchmarkReport { seed, trials, methods }
}

/// Writes the versioned CSV. Runtime is only written on request because it
/// is the one column that differs between runs.
pub fn write_csv<W: Write>(mut w: W, results: &[TrialResult], with_runtime: bool) -> std::io::Result<()> {
    writeln!(w, "{BENCH_CSV_VERSION}")?;
    write!(w, "trial,method,error_m,x,y,z,iterations,status")?;
    if with_runtime {
        write!(w, ",runtime_ms")?;
    }
    writeln!(w)?;
    for r in results {
        let num = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.9e}"));
        let [x, y, z] = r.estimate.map_or([None; 3], |p| p.map(Some));
        let status = match &r.failure {
            None => "ok".to_string(),
            Some(msg) => format!("failed: {}", msg.replace([',', '\n'], ";")),
        };
        write!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.trial,
            r.method,
            num(r.error_m),
            num(x),
            num(y),
            num(z),
            r.iterations,
            status
        )?;
        if with_runtime {
            write!(w, ",{:.3}", r.runtime_ms)?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn format_report(report: &BenchmarkReport) -> String {
    let mut s = format!("seed {} trials {}\n", report.seed, report.trials);
    s.push_str(&format!(
        "{:<14}{:>12}{:>12}{:>12}{:>14}{:>10}\n",
        "method", "mean_m", "median_m", "p90_m", "runtime_ms", "failed"
    ));
    for m in &report.methods {
        s.push_str(&format!(
            "{:<14}{:>12.4}{:>12.4}{:>12.4}{:>14.2}{:>10}\n",
            m.method.to_string(),
            m.mean_error_m,
            m.median_error_m,
            m.p90_error_m,
            m.mean_runtime_ms,
            m.failures
        ));
    }
    s
}
