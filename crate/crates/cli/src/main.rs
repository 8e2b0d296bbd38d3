//! `slalom`: data generation, recovery, fitting, explanation, theory checks
//! and evaluation from the command line.

mod commands;
mod eval;
mod meta;
mod oracles;
mod theory;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use slalom_core::Error;

#[derive(Parser)]
#[command(
    name = "slalom",
    version,
    about = "SLALOM surrogate explanations for sequence classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset.
    GenData(commands::GenDataArgs),
    /// Recover the parameters of a SLALOM oracle exactly.
    Recover(commands::RecoverArgs),
    /// Fit a surrogate to an oracle around one sequence.
    Fit(commands::FitArgs),
    /// Per-token attribution table for one sequence.
    Explain(commands::ExplainArgs),
    /// Run the constancy, construction and recovery checks.
    VerifyTheory(theory::VerifyArgs),
    /// Deletion fidelity and perturbation curves of fitted surrogates.
    Eval(eval::EvalArgs),
    /// Host a file-backed oracle over the wire protocol.
    Serve(commands::ServeArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Recover(a) => commands::recover(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Explain(a) => commands::explain(&a),
        Command::VerifyTheory(a) => theory::verify(&a),
        Command::Eval(a) => eval::eval(&a),
        Command::Serve(a) => commands::serve(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 3 for oracle and transport failures, 2 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    let oracle_failure = e.chain().any(|cause| {
        matches!(
            cause.downcast_ref::<Error>(),
            Some(Error::OracleUnavailable(_) | Error::Protocol(_) | Error::Timeout(_))
        )
    });
    if oracle_failure {
        3
    } else {
        2
    }
}
