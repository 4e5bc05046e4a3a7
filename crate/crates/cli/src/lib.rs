//! Command-line driver: configuration loading and the pipeline commands.

pub mod config;
pub mod pipeline;

use clap::{Parser, Subcommand};

pub use config::{ConfigError, Overrides, RunConfig, SEED_ENV};
pub use pipeline::{CliError, Layout};

#[derive(Debug, Parser)]
#[command(name = "typerank", version, about = "Generate-then-rank type inference for Python")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// INI configuration file.
    #[arg(long, global = true)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long = "beam-k", global = true)]
    pub beam_k: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    /// Inference mode: full, generating-only or ranking-only.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    #[arg(long, global = true)]
    pub workdir: Option<std::path::PathBuf>,
    #[arg(long, global = true)]
    pub corpus: Option<std::path::PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Extract, mask and split the corpus; build the vocabulary.
    BuildDataset,
    /// Train the generation model.
    TrainGen,
    /// Sample negatives and train the similarity model.
    TrainSim,
    /// Rank candidate types for every test instance.
    Infer,
    /// Score predictions against the test set.
    Eval,
    /// Compare the three inference modes.
    Ablate,
    /// Run everything on a generated synthetic corpus.
    Demo,
}

impl Cli {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            beam_k: self.beam_k,
            epochs: self.epochs,
            lr: self.lr,
            batch: self.batch,
            mode: self.mode.clone(),
            workdir: self.workdir.clone(),
            corpus: self.corpus.clone(),
        }
    }

    /// Effective configuration: file (or defaults), `TIGER_SEED`, flags.
    pub fn run_config(&self) -> Result<RunConfig, ConfigError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let env_seed = std::env::var(SEED_ENV).ok();
        cfg.apply_overrides(env_seed.as_deref(), &self.overrides())?;
        Ok(cfg)
    }
}

/// Runs one command and prints its result to stdout.
pub fn dispatch(command: Command, cfg: &RunConfig) -> Result<(), CliError> {
    log::info!("seed {} config {}", cfg.hyper.seed, cfg.hash());
    match command {
        Command::BuildDataset => {
            let (train, test) = pipeline::build_dataset(cfg)?;
            println!("train\n{}\ntest\n{}", train.to_table(), test.to_table());
        }
        Command::TrainGen => {
            let losses = pipeline::train_gen(cfg)?;
            println!("generation losses per epoch: {losses:?}");
        }
        Command::TrainSim => {
            let losses = pipeline::train_sim(cfg)?;
            println!("similarity losses per epoch: {losses:?}");
        }
        Command::Infer => {
            let n = pipeline::infer(cfg)?;
            println!("{n} predictions written to {}", Layout::new(cfg).predictions().display());
        }
        Command::Eval => print!("{}", pipeline::eval(cfg)?.to_table()),
        Command::Ablate => print!("{}", pipeline::ablation_table(&pipeline::run_ablation(cfg)?)),
        Command::Demo => {
            let out = pipeline::demo(cfg)?;
            print!("{}\n{}", out.report.to_table(), pipeline::ablation_table(&out.ablation));
        }
    }
    Ok(())
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let cfg = match cli.run_config() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match dispatch(cli.command, &cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
