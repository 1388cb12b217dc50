use std::path::PathBuf;

use clap::Args;
use neuroflow_core::ledger::{compute_run_stats, error_breakdown, export_tables, read_ledger, ErrorEvent, LoadedLedger};
use neuroflow_core::ledger;

use crate::error::{emit, require_path, CliError, CliResult, Emitted};

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Closed trace ledgers, one per run.
    #[arg(long, num_args = 1.., required = true)]
    pub traces: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_stats(args: &StatsArgs) -> CliResult<(Emitted, String)> {
    let mut stats = Vec::new();
    let mut events: Vec<ErrorEvent> = Vec::new();
    for p in &args.traces {
        require_path("--traces", p)?;
        let loaded: LoadedLedger = read_ledger(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
        stats.push(compute_run_stats(&loaded).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?);
        events.extend(ledger::error_events(&loaded.steps, loaded.close.as_ref()));
    }
    let summary = export_tables(&stats).expect("at least one trace");
    let mut emitted = Emitted::default();
    emit(&mut emitted, args.out.join("summary.tsv"), &summary)?;
    emit(&mut emitted, args.out.join("errors.tsv"), error_breakdown(&events))?;
    Ok((emitted, summary))
}
