//! Command-line front end: dataset generation, inference runs, and trace
//! comparison.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for data or
//! reference problems, 4 for numerical failures.

mod artifacts;
mod eval;
mod gen;
mod runcmd;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "sepia",
    version,
    about = "Expectation propagation and its stochastic variants on Gaussian models"
)]
struct Cli {
    /// Default log level (RUST_LOG overrides).
    #[arg(long, global = true, default_value = "warn")]
    log: String,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with its ground-truth sidecar.
    #[command(subcommand)]
    Gen(gen::GenCmd),
    /// Fit an approximation to a dataset and write run artifacts.
    Run(Box<runcmd::RunArgs>),
    /// Align traces from several runs into one comparison table.
    Eval(eval::EvalArgs),
}

fn exit_code(err: &sepia::Error) -> u8 {
    use sepia::Error;
    match err {
        Error::ConfigInvalid(_) => 2,
        Error::Parse { .. }
        | Error::Schema(_)
        | Error::Io(_)
        | Error::MissingReference(_)
        | Error::EmptyTestSet
        | Error::DimensionMismatch(_) => 3,
        Error::NotNormalizable(_)
        | Error::DegenerateInput(_)
        | Error::ChainDiverged(_)
        | Error::GridTooCoarse(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log)).init();
    let result = match cli.cmd {
        Cmd::Gen(cmd) => gen::gen(cmd),
        Cmd::Run(args) => runcmd::run_cmd(*args),
        Cmd::Eval(args) => eval::eval_cmd(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
