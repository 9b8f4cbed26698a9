use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use latstab::pipeline::{acceptance, Pipeline, RunConfig, Stage, Workspace, DESK_CONFIG};
use latstab::Error;

#[derive(Parser)]
#[command(name = "latstab", version, about = "Latent-space stability analysis of Kuramoto-Sivashinsky surrogates")]
struct Cli {
    /// Run configuration (TOML). Defaults to the built-in desk configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the workspace directory from the configuration.
    #[arg(long, global = true)]
    workspace: Option<PathBuf>,
    /// Overrides the ensemble size.
    #[arg(long, global = true)]
    members: Option<usize>,
    /// Worker threads for per-member work.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Print progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the reference trajectory.
    GenerateData,
    /// Lyapunov exponents and CLV angles of the reference system.
    StabilityRef,
    /// Train the convolutional autoencoder.
    TrainCae,
    /// Encode the data, search ESN hyperparameters and train the ensemble.
    TrainEsn,
    /// Closed-loop forecasts and prediction horizons.
    Predict,
    /// Lyapunov exponents and CLV angles of every ensemble member.
    StabilityLatent,
    /// Compare surrogate and reference stability properties.
    Compare,
    /// Run missing or stale stages, then evaluate the acceptance criteria.
    Check {
        /// Rerun every stage.
        #[arg(long)]
        force: bool,
    },
    /// Print the effective configuration.
    ShowConfig,
}

fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::Config(_) => 2,
        Error::Dependency { .. } => 3,
        Error::BlowUp { .. }
        | Error::Divergence { .. }
        | Error::TrainingFailure { .. }
        | Error::TangentOverflow { .. }
        | Error::DegenerateTangent { .. }
        | Error::SearchFailure { .. }
        | Error::NumericalDomain(_) => 4,
        Error::Acceptance(_) => 5,
        _ => 1,
    }
}

fn run(cli: Cli) -> latstab::Result<String> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::from_toml(DESK_CONFIG)?,
    };
    if let Some(ws) = cli.workspace {
        config.paths.workspace = ws;
    }
    if let Some(m) = cli.members {
        config.esn.members = m;
        config.validate()?;
    }
    let workspace = Workspace::new(config.paths.workspace.clone());
    let mut pipeline = Pipeline::new(config, workspace, cli.workers);
    pipeline.verbose = cli.verbose;
    let stage = match cli.command {
        Command::GenerateData => Stage::GenerateData,
        Command::StabilityRef => Stage::StabilityRef,
        Command::TrainCae => Stage::TrainCae,
        Command::TrainEsn => Stage::TrainEsn,
        Command::Predict => Stage::Predict,
        Command::StabilityLatent => Stage::StabilityLatent,
        Command::Compare => Stage::Compare,
        Command::ShowConfig => return Ok(pipeline.config.to_toml()),
        Command::Check { force } => {
            let mut out = pipeline.run_all(force)?;
            let report = acceptance::evaluate(&pipeline)?;
            out.push_str(&report.table());
            return if report.all_passed() {
                Ok(out)
            } else {
                print!("{out}");
                Err(Error::Acceptance(format!("{} criteria failed", report.failures().len())))
            };
        }
    };
    pipeline.run(stage)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
