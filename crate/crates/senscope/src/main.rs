use clap::{Parser, Subcommand};

use senscope::commands::{self, DefendCmd, PredictCmd, StatsCmd, SweepCmd, TrainCmd, ValidateCmd};

/// Sensitivity analysis of image classifiers under acquisition-time
/// degradations: train a reference model, measure degradation impact by
/// Monte Carlo, predict it analytically from one backward pass, and compare
/// defenses. All commands are deterministic given their flags.
#[derive(Parser, Debug)]
#[command(name = "senscope", version, about)]
struct Cli {
    /// Worker threads for parallel evaluation (default: one per core).
    /// Results are identical for any thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset and train a model
    Train(TrainCmd),
    /// Accuracy and label-change sweeps over perturbation specs
    Sweep(SweepCmd),
    /// Analytic sensitivity of one image from a single backward pass
    Predict(PredictCmd),
    /// Correlate analytic predictions with Monte Carlo measurements
    Validate(ValidateCmd),
    /// Compare pre-filter and dropout defenses over a noise grid
    Defend(DefendCmd),
    /// Rank images by sensitivity and test the hue-entropy difference
    Stats(StatsCmd),
}

fn main() {
    let cli = Cli::parse();
    let run = || -> senscope::Result<()> {
        match &cli.command {
            Command::Train(cmd) => commands::run_train(cmd),
            Command::Sweep(cmd) => commands::run_sweep(cmd),
            Command::Predict(cmd) => commands::run_predict(cmd).map(|_| ()),
            Command::Validate(cmd) => commands::run_validate(cmd).map(|_| ()),
            Command::Defend(cmd) => commands::run_defend(cmd),
            Command::Stats(cmd) => commands::run_stats(cmd).map(|_| ()),
        }
    };
    let result = match cli.threads {
        Some(n) if n > 0 => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(run),
            Err(e) => {
                eprintln!("error: could not build thread pool: {e}");
                std::process::exit(1);
            }
        },
        _ => run(),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
