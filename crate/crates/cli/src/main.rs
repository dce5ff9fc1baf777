use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use drkrnet_core::experiment::{
    cmd_generate_data, cmd_infer_krnet, cmd_infer_mcmc, cmd_report, cmd_train_surrogate,
    cmd_train_vae, ExperimentConfig,
};
use drkrnet_core::Error;

#[derive(Parser)]
#[command(
    name = "drkrnet",
    version,
    about = "DR-KRnet experiments for the Darcy inverse problem"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the prior dataset, the truth field and its noisy observations.
    GenerateData(StageArgs),
    TrainVae(StageArgs),
    TrainSurrogate(StageArgs),
    /// Fit the flow to the latent posterior.
    InferKrnet(StageArgs),
    /// pCN-MCMC baseline in the same latent space.
    InferMcmc(StageArgs),
    /// Collect finished runs into `comparison.csv`.
    Report {
        /// Where to write the table; also the run read when no RUNS are given.
        #[arg(long)]
        out: PathBuf,
        runs: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct StageArgs {
    /// TOML experiment config. The built-in desk config is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Replace every stage seed with one derived from N.
    #[arg(long, value_name = "N")]
    seed_override: Option<u64>,
}

impl StageArgs {
    fn load(&self) -> drkrnet_core::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::desk(),
        };
        if let Some(seed) = self.seed_override {
            cfg.override_seeds(seed);
        }
        std::fs::create_dir_all(&self.out)?;
        Ok(cfg)
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> drkrnet_core::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> drkrnet_core::Result<()> {
    match cli.command {
        Command::GenerateData(a) => print_json(&cmd_generate_data(&a.load()?, &a.out)?)?,
        Command::TrainVae(a) => print_json(&cmd_train_vae(&a.load()?, &a.out)?)?,
        Command::TrainSurrogate(a) => print_json(&cmd_train_surrogate(&a.load()?, &a.out)?)?,
        Command::InferKrnet(a) => print_json(&cmd_infer_krnet(&a.load()?, &a.out)?)?,
        Command::InferMcmc(a) => print_json(&cmd_infer_mcmc(&a.load()?, &a.out)?)?,
        Command::Report { out, runs } => {
            let runs = if runs.is_empty() {
                vec![out.clone()]
            } else {
                runs
            };
            let rows = cmd_report(&runs, &out)?;
            eprintln!(
                "wrote {} rows to {}",
                rows.len(),
                out.join("comparison.csv").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> ExitCode {
    if e.is_numerical() {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}
