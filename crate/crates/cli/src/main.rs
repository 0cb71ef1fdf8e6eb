//! `dif-lab`: fit, sample and evaluate discretely indexed flows.
//!
//! Exit status is 0 on success, 2 for invalid configs or inputs, 3 when
//! training or evaluation hits a non-finite value, and 1 when outputs cannot
//! be written.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dif_core::targets::Axis;

use crate::commands::SampleArgs;
use crate::config::Overrides;

#[derive(Parser)]
#[command(name = "dif-lab", version, about = "Fit, sample and evaluate discretely indexed flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct FitArgs {
    /// Run config (JSON).
    config: PathBuf,
    /// Replaces the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Replaces the config's `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl FitArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            output_dir: self.output_dir.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Density estimation from samples (objective `mle` or `gem`).
    FitVde(FitArgs),
    /// Variational inference against an unnormalized density (objective `rb_kl`).
    FitVi(FitArgs),
    /// Conditional density estimation from a dataset with `w_` covariate columns.
    FitConditional(FitArgs),
    /// Draw samples from a saved model.
    Sample {
        #[arg(long)]
        model: PathBuf,
        /// Number of draws (unconditional models).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Append the component chosen in each layer.
        #[arg(long)]
        paths: bool,
        /// CSV of covariates, one draw per row (conditional models).
        #[arg(long)]
        covariates: Option<PathBuf>,
    },
    /// Evaluate a 1-D or 2-D model's density on a grid.
    DensityGrid {
        #[arg(long)]
        model: PathBuf,
        /// `min:max:n_points`, once per dimension.
        #[arg(long = "axis", required = true, allow_hyphen_values = true, value_parser = commands::parse_axis)]
        axes: Vec<Axis>,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the output path with extension `.summary.json`.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Mean log-likelihood of a CSV dataset under a saved model.
    Loglik {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Per-row log-densities.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::FitVde(a) => commands::fit_vde(&a.config, &a.overrides()),
        Command::FitVi(a) => commands::fit_vi(&a.config, &a.overrides()),
        Command::FitConditional(a) => commands::fit_conditional_cmd(&a.config, &a.overrides()),
        Command::Sample {
            model,
            n,
            seed,
            out,
            paths,
            covariates,
        } => commands::sample(&SampleArgs {
            model: model.clone(),
            n: *n,
            seed: *seed,
            out: out.clone(),
            paths: *paths,
            covariates: covariates.clone(),
        }),
        Command::DensityGrid {
            model,
            axes,
            out,
            summary,
        } => commands::density_grid(model, axes, out, summary.as_deref()),
        Command::Loglik { model, data, out } => commands::loglik(model, data, out.as_deref()),
    };
    match result {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("dif-lab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
