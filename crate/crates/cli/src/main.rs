use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod config;

/// Validation or usage problem; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "lazymaps", version, about = "Layers of lazy transport maps for Bayesian inference")]
struct Cli {
    /// Worker threads (default: all cores; 1 gives the sequential reduction order)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a composed lazy map for the configured target.
    Run {
        /// Run configuration (JSON)
        #[arg(long, required_unless_present = "builtin", conflicts_with = "builtin")]
        config: Option<PathBuf>,
        /// Use a bundled configuration: gaussian-shift, banana, beam, log-cox
        #[arg(long)]
        builtin: Option<String>,
        /// Output directory, overriding the config
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed, overriding the config
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample the pullback of a fitted map with MCMC.
    Sample {
        #[arg(long, required_unless_present = "builtin", conflicts_with = "builtin")]
        config: Option<PathBuf>,
        #[arg(long)]
        builtin: Option<String>,
        /// Serialized map (map.json of a previous run)
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Simulate an observation file for a data-driven target.
    Simulate {
        target: SimTarget,
        /// Optional JSON file with simulation parameters
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        /// Output file
        #[arg(long)]
        out: PathBuf,
    },
    /// Write plot-ready CSV files for a finished run.
    Plotdata {
        /// Run directory containing manifest.json, trace.jsonl and map.json
        run_dir: PathBuf,
        /// Output directory (default: the run directory)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Grid points per axis of the 2D slice
        #[arg(long, default_value_t = 41)]
        grid: usize,
        /// Half-width of the slice window
        #[arg(long, default_value_t = 3.0)]
        half_width: f64,
        /// Pair of 1-based coordinates spanning the slice
        #[arg(long, num_args = 2, default_values_t = [1, 2])]
        axes: Vec<usize>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SimTarget {
    Beam,
    LogCox,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Run { config, builtin, out, seed } => commands::run(config, builtin, out, seed, cli.threads),
        Command::Sample { config, builtin, map, out, seed } => commands::sample(config, builtin, map, out, seed),
        Command::Simulate { target, params, seed, out } => match target {
            SimTarget::Beam => commands::simulate_beam(params, seed, &out),
            SimTarget::LogCox => commands::simulate_log_cox(params, seed, &out),
        },
        Command::Plotdata { run_dir, out, grid, half_width, axes } => {
            commands::plotdata(&run_dir, out, grid, half_width, (axes[0], axes[1]))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
