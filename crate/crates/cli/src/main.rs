use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use iterlace_cli::{cmd_diagnose, cmd_fit, cmd_predict, cmd_sbc, error_json};

#[derive(Parser)]
#[command(name = "iterlace", version, about = "Iterated linearised Laplace inference for latent Gaussian models")]
struct Cli {
    /// Seed for Monte Carlo steps; defaults to the model's `options.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write fit.json, convergence.csv and fit.log.
    Fit {
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Summarise posterior samples of a predictor expression.
    Predict {
        #[arg(short, long)]
        fit: PathBuf,
        #[arg(short, long)]
        expr: String,
        /// Data table for the expression; defaults to the first likelihood's.
        #[arg(short, long)]
        data: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(short = 'n', long, default_value_t = 1000)]
        samples: usize,
        #[arg(short, long, value_delimiter = ',', default_values_t = [0.025, 0.5, 0.975])]
        quantiles: Vec<f64>,
    },
    /// Simulation-based calibration.
    Sbc {
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short = 'K')]
        replicates: usize,
        #[arg(short = 'J')]
        draws: usize,
        #[arg(short, long)]
        out: PathBuf,
        /// Functional to calibrate; defaults to the first component.
        #[arg(long)]
        functional: Option<String>,
    },
    /// Linearisation deviation and K-L divergences for a stored fit.
    Diagnose {
        #[arg(short, long)]
        fit: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(short = 'n', long, default_value_t = 1000)]
        samples: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Fit { model, out } => cmd_fit(model, out).map(drop),
        Command::Predict { fit, expr, data, out, samples, quantiles } => {
            cmd_predict(fit, expr, data.as_deref(), *samples, quantiles, cli.seed, out)
        }
        Command::Sbc { model, replicates, draws, out, functional } => {
            cmd_sbc(model, *replicates, *draws, functional.as_deref(), cli.seed, out).map(drop)
        }
        Command::Diagnose { fit, out, samples } => cmd_diagnose(fit, *samples, cli.seed, out).map(drop),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(2)
        }
    }
}
