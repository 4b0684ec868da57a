//! Experiment CLI: reproduces the synthetic soundness study and the
//! cross-validated benchmark, and exposes fit / predict / explain workflows
//! over CSV files. See `sevgp <command> --help` and the repository README
//! for the config schema.

use clap::{Args, Parser, Subcommand};
use sevgp::experiments::{
    cmd_bench, cmd_explain, cmd_fit, cmd_predict, cmd_soundness, RunConfig,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "sevgp",
    about = "Self-explaining variational Gaussian processes: experiments and workflows",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic posterior-soundness study (writes plot-ready grid CSVs).
    Soundness(CommonArgs),
    /// K-fold cross-validated benchmark on a CSV dataset.
    Bench(CommonArgs),
    /// Fit a model on a CSV dataset and save it as JSON.
    Fit(CommonArgs),
    /// Predict with a saved model on a feature CSV.
    Predict(CommonArgs),
    /// Decompose predictions into per-feature contributions.
    Explain(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for output files.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Objective variant: 41, 42 or 43.
    #[arg(long)]
    variant: Option<String>,
    /// CSV dataset path.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Target column name (defaults to the last CSV column).
    #[arg(long)]
    target_column: Option<String>,
    /// Cross-validation fold count.
    #[arg(long)]
    folds: Option<usize>,
    /// Training iterations.
    #[arg(long)]
    iterations: Option<usize>,
    /// Saved model file (predict / explain).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Print per-iteration progress to stderr.
    #[arg(long)]
    progress: bool,
}

impl CommonArgs {
    fn into_config(self) -> sevgp::Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out_dir) = self.out_dir {
            cfg.out_dir = out_dir;
        }
        if let Some(variant) = self.variant {
            cfg.variant = variant;
        }
        if let Some(dataset) = self.dataset {
            cfg.dataset = Some(dataset);
        }
        if let Some(target) = self.target_column {
            cfg.target_column = Some(target);
        }
        if let Some(folds) = self.folds {
            cfg.folds = folds;
        }
        if let Some(iterations) = self.iterations {
            cfg.iterations = Some(iterations);
        }
        if let Some(model) = self.model {
            cfg.model = Some(model);
        }
        if self.progress {
            cfg.progress = true;
        }
        cfg.variant()?; // validate early, before any computation
        Ok(cfg)
    }
}

fn run() -> sevgp::Result<()> {
    let cli = Cli::parse();
    let files = match cli.command {
        Command::Soundness(args) => cmd_soundness(&args.into_config()?)?,
        Command::Bench(args) => cmd_bench(&args.into_config()?)?,
        Command::Fit(args) => cmd_fit(&args.into_config()?)?,
        Command::Predict(args) => cmd_predict(&args.into_config()?)?,
        Command::Explain(args) => cmd_explain(&args.into_config()?)?,
    };
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
