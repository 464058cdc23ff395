//! Command-line front end for `retina-forge`.
//!
//! Each subcommand is also exposed as a `cmd_*` function so it can be
//! driven from tests without spawning a process.

pub mod cache;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use retina_forge::nn::{BackwardFault, OpKind};
use retina_forge::ErrorClass;

pub use commands::{
    cmd_cross_eval, cmd_eval, cmd_gradcheck, cmd_interrater, cmd_params, cmd_predict, cmd_prepare, cmd_train,
    FoldSummary, Log, ParamRow, ParamsReport, TrainSummary, HISTORY_FILE, WEIGHTS_FILE,
};
pub use config::{CommonArgs, RunConfig};

pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_IO: u8 = 4;
pub const EXIT_VERIFICATION: u8 = 5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] retina_forge::Error),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => match e.class() {
                ErrorClass::Config => EXIT_CONFIG,
                ErrorClass::Data => EXIT_DATA,
                ErrorClass::Io => EXIT_IO,
                ErrorClass::Internal => EXIT_INTERNAL,
            },
            CliError::Verification(_) => EXIT_VERIFICATION,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "retina-forge", version, about = "Retinal vessel segmentation with compact encoder-decoder networks")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Preprocess a dataset into the run's cache.
    Prepare,
    /// Train on every fold of the manifest's split.
    Train,
    /// Score the test images against the first observer.
    Eval,
    /// Write probability and binary maps.
    Predict {
        /// RGB images to segment instead of the manifest's samples.
        #[arg(long = "input", value_name = "FILE")]
        inputs: Vec<PathBuf>,
    },
    /// Score weights trained on another dataset.
    CrossEval,
    /// Compare the model and the first observer with the second observer.
    Interrater,
    /// Parameter counts and archive sizes of the four architectures.
    Params,
    /// Finite-difference check of every backward pass.
    Gradcheck {
        /// Random compositions to check.
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, hide = true, value_parser = parse_fault)]
        inject_fault: Option<BackwardFault>,
    },
}

const FAULT_OPS: [(&str, OpKind); 10] = [
    ("conv2d", OpKind::Conv2d),
    ("conv-transpose2d", OpKind::ConvTranspose2d),
    ("maxpool", OpKind::MaxPool),
    ("relu", OpKind::Relu),
    ("sigmoid", OpKind::Sigmoid),
    ("dropout", OpKind::Dropout),
    ("concat", OpKind::Concat),
    ("bce", OpKind::Bce),
    ("mean", OpKind::Mean),
    ("sum", OpKind::Sum),
];

fn parse_fault(s: &str) -> Result<BackwardFault, String> {
    FAULT_OPS
        .iter()
        .find(|(name, _)| *name == s)
        .map(|&(_, op)| BackwardFault { op, scale: 1.5 })
        .ok_or_else(|| format!("unknown op '{s}'"))
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let log = Log { quiet: cli.common.quiet };
    let weights = cli.common.weights.as_deref();
    match &cli.command {
        Command::Params => {
            let report = cmd_params()?;
            print!("{}", report.table());
            if !report.passed() {
                return Err(CliError::Verification(report.failures.join("; ")));
            }
        }
        Command::Gradcheck { trials, inject_fault } => {
            let report = cmd_gradcheck(cli.common.seed, *trials, *inject_fault)?;
            for case in report.failures() {
                println!("FAIL {}: max relative error {:.3e}", case.name, case.max_rel_error);
            }
            println!(
                "{} cases, {} failed, max relative error {:.3e}, {} draws rejected",
                report.cases.len(),
                report.failures().count(),
                report.max_rel_error(),
                report.rejected
            );
            if !report.passed() {
                return Err(CliError::Verification("gradient check failed".into()));
            }
        }
        command => {
            let c = cli.common.resolve()?;
            match command {
                Command::Prepare => {
                    cmd_prepare(&c, log)?;
                }
                Command::Train => {
                    let summary = cmd_train(&c, log)?;
                    for f in &summary.folds {
                        println!(
                            "{}: best epoch {} (val {:.5}) -> {}",
                            f.name,
                            f.best_epoch + 1,
                            f.best_val_loss,
                            f.archive.display()
                        );
                    }
                }
                Command::Eval => {
                    cmd_eval(&c, weights, log)?;
                }
                Command::CrossEval => {
                    cmd_cross_eval(&c, weights, log)?;
                }
                Command::Interrater => {
                    cmd_interrater(&c, weights, log)?;
                }
                Command::Predict { inputs } => {
                    cmd_predict(&c, weights, inputs, log)?;
                }
                Command::Params | Command::Gradcheck { .. } => unreachable!("handled above"),
            }
        }
    }
    Ok(())
}
