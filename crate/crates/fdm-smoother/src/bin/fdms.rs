//! Command-line front end for the landing-reconstruction pipeline.
//!
//! Exit codes: 0 on success, 2 on input or configuration errors, 3 on
//! smoother failures (divergence or conditioning).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fdm_smoother::error::Error;
use fdm_smoother::flight::{FlightModel, RunwayGeometry};
use fdm_smoother::pipeline::{
    diagnose_run, estimate_noise_from_run, run_first_iteration, run_pipeline, run_second_iteration,
    sqm_from_innovations, PipelineConfig, WindowMode,
};
use fdm_smoother::simulate::{simulate_flight, write_simulated_flight, Scenario};

#[derive(Parser)]
#[command(
    name = "fdms",
    about = "Landing-trajectory reconstruction from recorded flight data",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Measured table (.csv) or scenario (.toml).
    input: PathBuf,
    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,
    /// Runway geometry TOML; shipped defaults when omitted.
    #[arg(long)]
    runway: Option<PathBuf>,
    /// Noise configuration TOML overriding the shipped defaults.
    #[arg(long)]
    noise_config: Option<PathBuf>,
    /// Signal-name mapping TOML for tables with non-canonical columns.
    #[arg(long)]
    signal_map: Option<PathBuf>,
    /// Common smoother rate in Hz.
    #[arg(long, default_value_t = 8.0)]
    rate: f64,
    /// Kernel bandwidth of the noise estimator.
    #[arg(long, default_value_t = 50.0)]
    bandwidth: f64,
    /// Landing window handling: auto, full, or require.
    #[arg(long, default_value = "auto")]
    window: String,
    /// Seed override for scenario inputs.
    #[arg(long)]
    seed: Option<u64>,
}

impl CommonOpts {
    fn to_config(&self) -> Result<PipelineConfig, Error> {
        let window = match self.window.as_str() {
            "auto" => WindowMode::Auto,
            "full" => WindowMode::Full,
            "require" => WindowMode::Require,
            other => {
                return Err(Error::Config(format!(
                    "unknown window mode '{other}', expected auto|full|require"
                )))
            }
        };
        let mut cfg = PipelineConfig::new(&self.input, &self.out);
        cfg.runway = self.runway.clone();
        cfg.noise_config = self.noise_config.clone();
        cfg.signal_map = self.signal_map.clone();
        cfg.rate_hz = self.rate;
        cfg.bandwidth = self.bandwidth;
        cfg.seed = self.seed;
        cfg.window = window;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic landing: truth and measured tables plus
    /// metadata.
    Simulate {
        /// Scenario TOML file.
        scenario: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Runway geometry TOML.
        #[arg(long)]
        runway: Option<PathBuf>,
    },
    /// First smoother iteration with the constant noise model.
    Smooth {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Estimate the time-varying noise schedule from a run directory.
    EstimateNoise {
        /// Run directory containing smoothed.csv.
        run_dir: PathBuf,
        /// Output schedule CSV.
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50.0)]
        bandwidth: f64,
    },
    /// Second smoother iteration with an estimated schedule under one
    /// correlation limit.
    Resmooth {
        #[command(flatten)]
        common: CommonOpts,
        /// Estimated schedule CSV.
        #[arg(long)]
        schedule: PathBuf,
        /// Correlation limit in [0, 1].
        #[arg(long)]
        limit: f64,
    },
    /// Re-derive the SQM report of a run directory.
    Sqm {
        run_dir: PathBuf,
        /// Label to print in the report.
        #[arg(long, default_value = "run")]
        label: String,
    },
    /// Full two-iteration pipeline with run selection and diagnostics.
    Pipeline {
        #[command(flatten)]
        common: CommonOpts,
        /// Correlation limits for the second iterations.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.4, 0.6, 0.8])]
        limits: Vec<f64>,
    },
    /// Residual diagnostics for an existing run directory.
    Diagnose {
        run_dir: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate {
            scenario,
            out,
            seed,
            runway,
        } => {
            let mut sc = Scenario::from_toml_file(&scenario)?;
            if let Some(seed) = seed {
                sc.seed = seed;
            }
            let geometry = match runway {
                Some(path) => RunwayGeometry::from_toml_file(&path)?,
                None => RunwayGeometry::default(),
            };
            let model = FlightModel::new(geometry)?;
            let sim = simulate_flight(&sc, &model)?;
            write_simulated_flight(&sim, &sc, &out)?;
            println!(
                "simulated {} steps at {} Hz (window start {:.1} s, touchdown {:.1} s, taxi {:.1} s)",
                sim.truth.n_rows(),
                sc.rate_hz,
                sim.phases.window_start_s,
                sim.phases.touchdown_s,
                sim.phases.taxi_s
            );
            println!("wrote {}", out.display());
        }
        Command::Smooth { common } => {
            let report = run_first_iteration(common.to_config()?)?;
            println!(
                "iter1: SQM {:.4} (complete: {}, abnormal: {})",
                report.sqm, report.complete, report.abnormal
            );
        }
        Command::EstimateNoise {
            run_dir,
            out,
            bandwidth,
        } => {
            estimate_noise_from_run(&run_dir, bandwidth, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Resmooth {
            common,
            schedule,
            limit,
        } => {
            let report = run_second_iteration(common.to_config()?, &schedule, limit)?;
            println!(
                "{}: SQM {:.4} (complete: {}, abnormal: {})",
                report.run_label, report.sqm, report.complete, report.abnormal
            );
        }
        Command::Sqm { run_dir, label } => {
            let report = sqm_from_innovations(&run_dir, &label)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            );
        }
        Command::Pipeline { common, limits } => {
            let mut cfg = common.to_config()?;
            cfg.limits = limits;
            let outcome = run_pipeline(cfg)?;
            for report in &outcome.reports {
                match &report.failure {
                    Some(reason) => println!("{}: failed ({reason})", report.run_label),
                    None => println!(
                        "{}: SQM {:.4}{}",
                        report.run_label,
                        report.sqm,
                        if report.complete { "" } else { " (incomplete)" }
                    ),
                }
            }
            println!(
                "selected: {}{}",
                outcome.selected_label,
                if outcome.selection_used_incomplete {
                    " (no complete run available)"
                } else {
                    ""
                }
            );
        }
        Command::Diagnose { run_dir, out } => {
            diagnose_run(&run_dir, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_smoother_failure() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
