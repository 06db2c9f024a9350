use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use comq::cli::{self, CompareOptions, ConfigOverrides, OracleGridKind, QuantizeOptions, SynthDist, SynthOptions};
use comq::{ComqError, Granularity, Order};

#[derive(Parser)]
#[command(name = "comq", version, about = "Coordinate-descent post-training weight quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize every layer of a manifest.
    Quantize {
        manifest: PathBuf,
        #[arg(long)]
        bits: Option<u32>,
        #[arg(long, value_enum)]
        granularity: Option<Granularity>,
        #[arg(long, value_enum)]
        order: Option<Order>,
        #[arg(long)]
        iters: Option<u32>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, short)]
        out: PathBuf,
        /// Worker threads (0 = all cores).
        #[arg(long, env = "COMQ_THREADS", default_value_t = 0)]
        threads: usize,
        /// Seed for calibration row subsampling.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Subsample calibration data to at most this many rows.
        #[arg(long)]
        max_calib_rows: Option<usize>,
        /// Per-channel scale update with the `||q||^2` denominator.
        #[arg(long)]
        strict_paper_scale: bool,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Recompute reconstruction errors from stored artifacts.
    Eval {
        manifest: PathBuf,
        artifacts: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Compare cyclic and greedy update orders per layer (per-channel).
    CompareOrders {
        manifest: PathBuf,
        #[arg(long)]
        bits: Option<u32>,
        #[arg(long)]
        iters: Option<u32>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Number of calibration resamples per layer (seed 0 is the data as given).
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, env = "COMQ_THREADS", default_value_t = 0)]
        threads: usize,
        #[arg(long)]
        json: bool,
    },
    /// Generate a seeded synthetic manifest.
    Synth {
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long, default_value_t = 64)]
        rows: usize,
        #[arg(long, default_value_t = 32)]
        cols: usize,
        #[arg(long, value_enum, default_value_t = SynthDist::Gaussian)]
        dist: SynthDist,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Exhaustive optimum for a small single-column layer.
    #[command(hide = true)]
    Oracle {
        #[arg(long)]
        weight: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        bits: u32,
        #[arg(long, value_enum, default_value_t = OracleGridKind::Symmetric)]
        grid: OracleGridKind,
        #[arg(long)]
        lambda: Option<f64>,
    },
}

fn run(command: Command) -> Result<ExitCode, ComqError> {
    match command {
        Command::Quantize {
            manifest,
            bits,
            granularity,
            order,
            iters,
            lambda,
            out,
            threads,
            seed,
            max_calib_rows,
            strict_paper_scale,
            json,
        } => {
            let opts = QuantizeOptions {
                manifest,
                out,
                config: ConfigOverrides {
                    bits,
                    iters,
                    lambda,
                    granularity,
                    order,
                    strict_paper_scale,
                },
                threads,
                seed,
                max_calib_rows,
            };
            let outcome = cli::quantize(&opts)?;
            if json {
                println!("{}", outcome.report.to_json());
            } else {
                println!("{}", outcome.report);
            }
            let failures = outcome.failures();
            if failures.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!(
                    "{} of {} layer(s) degenerate (all-zero weights, passed through): {}",
                    failures.len(),
                    outcome.report.layers.len(),
                    failures.join(", ")
                );
                Ok(ExitCode::from(1))
            }
        }
        Command::Eval { manifest, artifacts, json } => {
            let report = cli::eval(&manifest, &artifacts)?;
            if json {
                println!("{}", report.to_json());
            } else {
                println!("{report}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::CompareOrders {
            manifest,
            bits,
            iters,
            lambda,
            seeds,
            threads,
            json,
        } => {
            let table = cli::compare_orders(&CompareOptions {
                manifest,
                bits,
                iters,
                lambda,
                seeds,
                threads,
            })?;
            if json {
                println!("{}", serde_json::to_string_pretty(&table).expect("table serializes"));
            } else {
                println!("{table}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth {
            out,
            layers,
            samples,
            rows,
            cols,
            dist,
            seed,
        } => {
            let path = cli::synth(&SynthOptions {
                out,
                layers,
                samples,
                rows,
                cols,
                dist,
                seed,
            })?;
            println!("{}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Oracle {
            weight,
            calib,
            bits,
            grid,
            lambda,
        } => {
            let result = cli::oracle_search(&weight, &calib, bits, grid, lambda)?;
            println!("{}", serde_json::to_string_pretty(&result).expect("result serializes"));
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
