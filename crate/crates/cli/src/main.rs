//! Command-line front end. Exit codes: 0 success, 1 numerical or check
//! failure, 2 usage, configuration or input error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "gs-lvmogp", version, about = "Latent-variable multi-output Gaussian processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic benchmark dataset as CSV.
    GenerateData(GenerateArgs),
    /// Train from a config file; writes a checkpoint and a loss trajectory.
    Train(TrainArgs),
    /// Predict at query points from a checkpoint.
    Predict(PredictArgs),
    /// Score the test points of a dataset (MSE, RMSE, SMSE, NLPD).
    Evaluate(EvaluateArgs),
    /// Write the latent posterior means and standard deviations.
    ExportLatents(ExportArgs),
    /// Compare analytic and finite-difference gradients on a tiny instance.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    outputs: usize,
    /// Points per output, split between train and test.
    #[arg(long, default_value_t = 100)]
    points: usize,
    #[arg(long, default_value_t = 0.5)]
    train_fraction: f64,
    /// Standard deviation of additive Gaussian noise; noiseless when absent.
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set train.iterations=500`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the loss every this many iterations (0 silences).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// CSV with `output_id, x_0.., [y], [split]`.
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Latent vectors at their variational means (default).
    #[arg(long, conflicts_with = "moment_matched")]
    at_means: bool,
    /// Gaussian approximation integrated over the latent posterior.
    #[arg(long)]
    moment_matched: bool,
    /// CSV with `output_id, q, h_0..`; rows here replace or supply latent vectors.
    #[arg(long)]
    latent_coords: Option<PathBuf>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Baseline {
    /// Predict each output's training mean.
    TrainMean,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, required_unless_present = "baseline")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Score a reference predictor instead of a model.
    #[arg(long, value_enum, conflicts_with = "checkpoint")]
    baseline: Option<Baseline>,
    #[arg(long)]
    moment_matched: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Size {
    Tiny,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Lik {
    Gaussian,
    Poisson,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Model section to take kernel families, Q, Q_H and likelihood from.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_enum, default_value = "tiny")]
    size: Size,
    #[arg(long, value_enum)]
    likelihood: Option<Lik>,
    #[arg(long)]
    q: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Test hook: add 1 to the first analytic gradient entry of this block.
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.command {
        Command::GenerateData(a) => commands::generate(a.seed, a.outputs, a.points, a.train_fraction, a.noise_std, &a.out),
        Command::Train(a) => commands::train(&a.config, &a.overrides, a.log_every),
        Command::Predict(a) => commands::predict(&a.checkpoint, &a.query, a.out.as_deref(), a.moment_matched, a.latent_coords.as_deref()),
        Command::Evaluate(a) => match a.baseline {
            Some(Baseline::TrainMean) => commands::evaluate_baseline(&a.data, a.out.as_deref()),
            None => commands::evaluate(a.checkpoint.as_deref().expect("required by clap"), &a.data, a.moment_matched, a.out.as_deref()),
        },
        Command::ExportLatents(a) => commands::export_latents(&a.checkpoint, a.out.as_deref()),
        Command::Gradcheck(a) => {
            let Size::Tiny = a.size;
            let lik = a.likelihood.map(|l| match l {
                Lik::Gaussian => gs_lvmogp::model::LikelihoodKind::Gaussian,
                Lik::Poisson => gs_lvmogp::model::LikelihoodKind::Poisson,
            });
            commands::gradcheck(a.config.as_deref(), &a.overrides, lik, a.q, a.seed, a.corrupt.as_deref())
        }
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
