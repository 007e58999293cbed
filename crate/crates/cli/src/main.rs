use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spncf::par::Execution;
use spncf::pipeline::{run_stages, ExperimentConfig, Stage, OUTPUT_ENV};

/// SPN-guided counterfactuals in the latent space of a semi-supervised VAE.
#[derive(Debug, Parser)]
#[command(name = "spncf", version, about)]
struct Cli {
    /// Experiment configuration (TOML, or JSON with a .json extension).
    /// Built-in defaults are used when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides the configuration file.
    #[arg(short, long, global = true, env = OUTPUT_ENV)]
    output: Option<PathBuf>,

    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Number of group-aware cross-validation folds (1 = single split).
    #[arg(long, global = true)]
    folds: Option<usize>,

    /// VAE training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,

    /// Test instances explained per grid point.
    #[arg(long, global = true)]
    max_instances: Option<usize>,

    /// Gradient steps per counterfactual.
    #[arg(long, global = true)]
    max_steps: Option<usize>,

    /// Posterior samples (replicates) per counterfactual.
    #[arg(long, global = true)]
    replicates: Option<usize>,

    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate (or import) the dataset and write the split.
    GenData,
    /// Train one VAE per configured beta1.
    TrainVae,
    /// Encode the training split into latent tables.
    ExportLatents,
    /// Learn a circuit over each latent table.
    LearnSpn,
    /// Classifier statistics of both backends on the test split.
    EvalClf,
    /// Counterfactuals for every grid point.
    GenCf,
    /// Metrics per grid point plus the report tables.
    EvalCf,
    /// Difference-map images and localization summaries.
    Diffmap,
    /// Rebuild report.csv and report.txt from stored metrics.
    Report,
    /// All stages in order.
    Run,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

impl Command {
    fn stages(&self) -> Vec<Stage> {
        match self {
            Command::GenData => vec![Stage::GenData],
            Command::TrainVae => vec![Stage::TrainVae],
            Command::ExportLatents => vec![Stage::ExportLatents],
            Command::LearnSpn => vec![Stage::LearnSpn],
            Command::EvalClf => vec![Stage::EvalClf],
            Command::GenCf => vec![Stage::GenCf],
            Command::EvalCf => vec![Stage::EvalCf],
            Command::Diffmap => vec![Stage::Diffmap],
            Command::Report => vec![Stage::Report],
            Command::Run => Stage::ALL.to_vec(),
            Command::ShowConfig => vec![],
        }
    }
}

fn usage(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(2)
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig, String> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_path(p).map_err(|e| format!("{}: {e}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(o) = &cli.output {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(f) = cli.folds {
        cfg.folds = f;
    }
    if let Some(e) = cli.epochs {
        cfg.vae.epochs = e;
    }
    if let Some(m) = cli.max_instances {
        cfg.cf.max_instances = Some(m);
    }
    if let Some(m) = cli.max_steps {
        cfg.cf.max_steps = m;
    }
    if let Some(r) = cli.replicates {
        cfg.cf.replicates = r;
    }
    if cli.sequential {
        cfg.execution = Execution::Sequential;
    }
    cfg.check().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match build_config(&cli) {
        Ok(c) => c,
        Err(e) => return usage(e),
    };
    if let Command::ShowConfig = cli.command {
        return match toml::to_string(&cfg) {
            Ok(s) => {
                print!("{s}");
                ExitCode::SUCCESS
            }
            Err(e) => usage(e),
        };
    }
    match run_stages(&cfg, &cli.command.stages()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
