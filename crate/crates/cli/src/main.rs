//! `scalelab` command-line entry point.
//!
//! Exit codes: 0 success, 2 input error, 3 numerical non-convergence,
//! 4 infeasibility.

mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use scalelab::{Error, Family};

#[derive(Debug, Parser)]
#[command(name = "scalelab", version, about = "Data-constrained scaling laws for AR and masked-diffusion language models")]
struct Cli {
    /// Log detail on stderr: -v for info, -vv for debug.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Seed for all randomness; overrides any seed in --config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// JSON file with the subcommand's settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutFormat {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Two-stage law fit per family; writes fit_<family>.json and residuals_<family>.csv.
    Fit {
        /// Run records, jsonl or csv.
        #[arg(long)]
        runs: PathBuf,
        /// Fit one family only; default fits every family present.
        #[arg(long, value_parser = io::parse_family)]
        family: Option<Family>,
        #[command(flatten)]
        common: Common,
    },
    /// Critical compute per unique-data budget; writes crossover.csv and crit_fit.json.
    Crossover {
        #[command(flatten)]
        laws: LawPair,
        /// Unique-token budgets: `a,b,c` or `lo:hi:n` log-spaced.
        #[arg(long, value_parser = io::parse_grid)]
        u: Option<io::Grid>,
        #[arg(long)]
        c_lo: Option<f64>,
        #[arg(long)]
        c_hi: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Compute/loss Pareto frontier per family; writes pareto.csv or pareto.json.
    Pareto {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long, value_parser = io::parse_family)]
        family: Option<Family>,
        /// Use every logged point of each loss curve, not just final losses.
        #[arg(long)]
        from_curves: bool,
        #[arg(long, value_enum, default_value = "csv")]
        format: OutFormat,
        #[command(flatten)]
        common: Common,
    },
    /// Loss gap L_a - L_b over a (U, C) grid; writes heatmap.csv.
    Heatmap {
        #[command(flatten)]
        laws: LawPair,
        #[arg(long, value_parser = io::parse_grid)]
        grid_u: Option<io::Grid>,
        #[arg(long, value_parser = io::parse_grid)]
        grid_c: Option<io::Grid>,
        #[command(flatten)]
        common: Common,
    },
    /// Extrapolated repetition curves for one law; writes curves.csv and repetition.csv.
    Curves {
        /// Law json.
        #[arg(long)]
        law_a: PathBuf,
        /// Compute budgets in FLOPs.
        #[arg(long, value_parser = io::parse_grid)]
        grid_c: Option<io::Grid>,
        #[arg(long)]
        max_epochs: Option<u32>,
        #[command(flatten)]
        common: Common,
    },
    /// Synthetic runs from a known law; writes runs.jsonl.
    Synth {
        /// Law json.
        #[arg(long)]
        law_a: PathBuf,
        #[arg(long, value_parser = io::parse_family)]
        family: Option<Family>,
        /// Unique-token budgets.
        #[arg(long, value_parser = io::parse_grid)]
        u: Option<io::Grid>,
        #[command(flatten)]
        common: Common,
    },
    /// Toy AR and diffusion training sweep; writes runs.jsonl and metrics/*.csv.
    TrainToy {
        #[command(flatten)]
        common: Common,
    },
    /// Parameter-count check of an architecture table; writes arch.csv or arch.json.
    Arch {
        /// Table csv; default is the bundled published table.
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: OutFormat,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference gradient check of both objectives; writes gradcheck.json.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

/// `--law-a` is the candidate (diffusion), `--law-b` the baseline (AR).
#[derive(Debug, Clone, Args)]
pub struct LawPair {
    #[arg(long)]
    pub law_a: PathBuf,
    #[arg(long)]
    pub law_b: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonConvergence(_) | Error::Fit(_) | Error::Numeric(_) | Error::Corruption(_) => 3,
        Error::Infeasible(_) | Error::NoCrossover { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    let result = match cli.command {
        Command::Fit { runs, family, common } => commands::fit(&runs, family, &common),
        Command::Crossover { laws, u, c_lo, c_hi, common } => commands::crossover(&laws, u.map(|g| g.0), c_lo, c_hi, &common),
        Command::Pareto { runs, family, from_curves, format, common } => commands::pareto(&runs, family, from_curves, format, &common),
        Command::Heatmap { laws, grid_u, grid_c, common } => commands::heatmap(&laws, grid_u.map(|g| g.0), grid_c.map(|g| g.0), &common),
        Command::Curves { law_a, grid_c, max_epochs, common } => commands::curves(&law_a, grid_c.map(|g| g.0), max_epochs, &common),
        Command::Synth { law_a, family, u, common } => commands::synth(&law_a, family, u.map(|g| g.0), &common),
        Command::TrainToy { common } => commands::train_toy(&common),
        Command::Arch { table, format, common } => commands::arch(table.as_deref(), format, &common),
        Command::Gradcheck { common } => commands::gradcheck(&common),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
