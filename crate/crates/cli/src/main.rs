//! `neuroflow`: run episodes, QC checkpoints, rater agreement and trace statistics.

mod agree;
mod config;
mod error;
mod qc;
mod run;
mod stats;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::{CliResult, Emitted};

#[derive(Debug, Parser)]
#[command(name = "neuroflow", version, about = "Agentic neuroimaging workflow runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one episode and write trace.jsonl, deliverables.json and run_stats.tsv.
    Run(run::RunArgs),
    /// Quality-control tools.
    #[command(subcommand)]
    Qc(qc::QcCommand),
    /// Agreement between system and expert ratings.
    Agree(agree::AgreeArgs),
    /// Summarize closed trace ledgers as mean (range).
    Stats(stats::StatsArgs),
}

fn dispatch(cli: &Cli) -> CliResult<Emitted> {
    match &cli.command {
        Command::Run(a) => run::cmd_run(a),
        Command::Qc(qc::QcCommand::Screen(a)) => qc::cmd_screen(a),
        Command::Qc(qc::QcCommand::Metrics(a)) => qc::cmd_metrics(a),
        Command::Qc(qc::QcCommand::Judge(a)) => qc::cmd_judge(a),
        Command::Qc(qc::QcCommand::Checkpoint(a)) => qc::cmd_checkpoint(a),
        Command::Agree(a) => agree::cmd_agree(a),
        Command::Stats(a) => stats::cmd_stats(a).map(|(emitted, summary)| {
            print!("{summary}");
            emitted
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(emitted) => {
            for p in emitted.0 {
                eprintln!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("neuroflow: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
