//! Command-line front end. `run` returns the process exit code:
//! 0 success, 1 usage, 2 configuration or load failure, 3 runtime or
//! parity failure.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::bench::{self, BenchContext};
use crate::config::{HarnessConfig, Method, Profile};
use crate::{dataset, sweep, verify};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "vla", version, about = "Virtual large array localization: benchmarks, bounds and datasets")]
pub struct Cli {
    /// JSON file overriding the profile defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Profile::Desk)]
    pub profile: Profile,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte Carlo comparison of the localization methods.
    Bench {
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated list, e.g. omp,nomp-l1,ml-nomp-l3,two-step-ls.
        #[arg(long, value_delimiter = ',', value_parser = parse_method)]
        methods: Option<Vec<Method>>,
        #[arg(long)]
        trials: Option<usize>,
        /// Weights file for the learned initializer.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Per-method summary as JSON.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Append a runtime column; the CSV is then no longer reproducible.
        #[arg(long)]
        with_runtime: bool,
    },
    /// SPEB of the virtual and the rigid array versus walked distance.
    SpebSweep {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// JSON-lines features and labels for training the initializer.
    ExportDataset {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Checks a weights file against a golden input/output fixture.
    VerifyForward {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        fixture: PathBuf,
    },
    /// Samples one scenario and writes its snapshots.
    Synth {
        /// Binary snapshot file.
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth scenario as JSON.
        #[arg(long)]
        scenario_out: Option<PathBuf>,
        /// Trial index; the same index reproduces bench trial inputs.
        #[arg(long, default_value_t = 0)]
        trial: usize,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse()
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn config(e: impl std::fmt::Display) -> Self {
        Failure::Config(e.to_string())
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    match path {
        Some(p) => {
            let f = File::create(p).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", p.display())))?;
            Ok(Box::new(BufWriter::new(f)))
        }
        None => Ok(Box::new(BufWriter::new(io::stdout().lock()))),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            EXIT_CONFIG
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            EXIT_RUNTIME
        }
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let mut config = HarnessConfig::load(cli.config.as_deref(), cli.profile).map_err(Failure::config)?;
    match cli.command {
        Command::Bench {
            out,
            methods,
            trials,
            model,
            summary,
            with_runtime,
        } => {
            if let Some(m) = methods {
                config.bench.methods = m;
            }
            if let Some(t) = trials {
                config.bench.trials = t;
            }
            if model.is_some() {
                config.bench.model = model;
            }
            config.validate().map_err(Failure::config)?;
            let ctx = BenchContext::new(&config, cli.seed).map_err(Failure::config)?;
            let (results, report) =
                bench::run_benchmark(&ctx, &config.bench.methods, config.bench.trials).map_err(Failure::runtime)?;
            let mut w = output(out.as_deref())?;
            bench::write_csv(&mut w, &results, with_runtime).and_then(|_| w.flush()).map_err(Failure::runtime)?;
            if let Some(path) = summary {
                let text = serde_json::to_string_pretty(&report).expect("report serializes");
                std::fs::write(&path, text + "\n").map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))?;
            }
            eprint!("{}", bench::format_report(&report));
        }
        Command::SpebSweep { out, trials } => {
            if let Some(t) = trials {
                config.sweep.trials = t;
            }
            let rows = sweep::run_sweep(&config.sweep, cli.seed).map_err(Failure::config)?;
            let mut w = output(out.as_deref())?;
            sweep::write_csv(&mut w, &rows).and_then(|_| w.flush()).map_err(Failure::runtime)?;
        }
        Command::ExportDataset { out, count } => {
            let count = count.unwrap_or(config.dataset.count);
            let w = output(out.as_deref())?;
            dataset::export_dataset(&config, count, cli.seed, w).map_err(Failure::runtime)?;
        }
        Command::VerifyForward { model, fixture } => {
            let report = verify::verify_forward(&model, &fixture).map_err(Failure::config)?;
            println!("max-abs-diff {:.3e}", report.max_abs_diff);
            if !report.passed() {
                return Err(Failure::Runtime(format!(
                    "forward pass differs from fixture: got {:?}, expected {:?} (tolerance {:e})",
                    report.output,
                    report.expected,
                    verify::PARITY_TOLERANCE
                )));
            }
        }
        Command::Synth { out, scenario_out, trial } => {
            let (scenario, problem, _) = bench::trial_inputs(&config, cli.seed, trial).map_err(Failure::runtime)?;
            let mut w = output(Some(&out))?;
            vla_core::signal::write_snapshots(&mut w, &problem.grid, problem.array.len(), &problem.snapshots)
                .and_then(|_| w.flush())
                .map_err(Failure::runtime)?;
            if let Some(path) = scenario_out {
                let text = serde_json::to_string_pretty(&scenario).expect("scenario serializes");
                std::fs::write(&path, text + "\n").map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))?;
            }
        }
    }
    Ok(())
}
