//! `fsvvb`: fit, update and forecast factor stochastic volatility models.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "fsvvb", version, about = "Variational Bayes for factor stochastic volatility models")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, env = "FSVVB_CONFIG")]
    pub config: Option<PathBuf>,
    /// Worker thread cap (0 uses every core).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct SeedArg {
    /// Master seed; required for every randomized command unless the config sets one.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a panel from the generative model.
    Simulate {
        #[arg(long = "S")]
        s: usize,
        #[arg(long = "K")]
        k: usize,
        #[arg(long = "T")]
        t: usize,
        #[arg(long, default_value = "normal")]
        error_family: String,
        /// Overrides every idiosyncratic persistence.
        #[arg(long)]
        phi_eps: Option<f64>,
        /// Overrides every idiosyncratic log-volatility scale.
        #[arg(long)]
        tau_eps: Option<f64>,
        #[command(flatten)]
        seed: SeedArg,
        /// Panel CSV to write.
        #[arg(long)]
        out: PathBuf,
        /// Optional JSON file for the true parameters and states.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Fit a variational family to a panel.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        family: Option<String>,
        #[arg(long = "K")]
        k: Option<usize>,
        #[arg(long)]
        iters: Option<u64>,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Sequentially update a fit with new rows.
    Update {
        #[arg(long)]
        snapshot: PathBuf,
        /// Panel the snapshot was fitted to.
        #[arg(long)]
        data: PathBuf,
        /// New rows (same header).
        #[arg(long)]
        new: PathBuf,
        #[arg(long)]
        iters: Option<u64>,
        /// Refit from scratch on all rows instead of warm-starting.
        #[arg(long)]
        cold: bool,
        #[arg(long)]
        allow_data_mismatch: bool,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Predictive draws, covariance, correlation and min-variance weights.
    Forecast {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "H")]
        h: Option<usize>,
        #[arg(long = "M")]
        m: Option<usize>,
        #[arg(long, default_value_t = 40)]
        bins: usize,
        #[arg(long)]
        allow_data_mismatch: bool,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// One-step log approximate predictive likelihood of an observed row.
    Apl {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Panel whose first row is the observation.
        #[arg(long)]
        observed: PathBuf,
        #[arg(long = "M")]
        m: Option<usize>,
        #[arg(long)]
        allow_data_mismatch: bool,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Cumulative log APL over a holdout panel.
    Clapl {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        holdout: PathBuf,
        #[arg(long = "M")]
        m: Option<usize>,
        #[arg(long)]
        update_frequency: Option<usize>,
        #[arg(long)]
        allow_data_mismatch: bool,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Fit K = 1..=kmax and report averaged ELBO and CLAPL per K.
    SelectK {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        holdout: PathBuf,
        #[arg(long)]
        kmax: usize,
        #[arg(long)]
        family: Option<String>,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long = "M")]
        m: Option<usize>,
        #[arg(long)]
        update_frequency: Option<usize>,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Number of variational parameters of a family.
    CountParams {
        #[arg(long = "S")]
        s: usize,
        #[arg(long = "K")]
        k: usize,
        #[arg(long = "T")]
        t: usize,
        #[arg(long)]
        family: String,
        #[arg(long, default_value = "normal")]
        error_family: String,
    },
    /// Posterior means and standard deviations from a snapshot.
    Summary {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "M", default_value_t = 1000)]
        m: usize,
        #[arg(long)]
        allow_data_mismatch: bool,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
