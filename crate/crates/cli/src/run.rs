use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, ValueEnum};
use neuroflow_core::clock::{Clock, SimClock, SystemClock};
use neuroflow_core::ledger::{compute_run_stats, Ledger, LoadedLedger, RunStats};
use neuroflow_core::policy::{LivePolicy, Policy, RecordingPolicy, ScriptedPolicy};
use neuroflow_core::registry::load_registry_dir;
use neuroflow_core::runtime::{run_episode, EpisodeConfig, EpisodeOutcome, HaltReason, Objective, RuntimeError};
use serde_json::json;

use crate::config::{ClockConfig, RunConfig};
use crate::error::{emit, json_pretty, require_path, CliError, CliResult, Emitted};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyKind {
    Scripted,
    Live,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Objective JSON (goal_text, dataset, deliverable_spec).
    #[arg(long)]
    pub objective: PathBuf,
    /// Dataset directory, copied into the workspace at the objective's root path.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Directory of primitive cards.
    #[arg(long)]
    pub cards: PathBuf,
    #[arg(long, value_enum, default_value = "scripted")]
    pub policy: PolicyKind,
    /// Script for the scripted policy (overrides `policy.script` in the config).
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `seed` in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

fn copy_dir(from: &Path, to: &Path) -> io::Result<()> {
    fs::create_dir_all(to)?;
    for entry in fs::read_dir(from)? {
        let entry = entry?;
        let target = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_dir(&entry.path(), &target)?;
        } else {
            fs::copy(entry.path(), &target)?;
        }
    }
    Ok(())
}

fn same_dir(a: &Path, b: &Path) -> bool {
    matches!((a.canonicalize(), b.canonicalize()), (Ok(x), Ok(y)) if x == y)
}

fn stats_tsv(stats: &RunStats) -> String {
    let v = serde_json::to_value(stats).expect("stats serialize");
    let obj = v.as_object().expect("stats are an object");
    let mut header: Vec<String> = obj.keys().cloned().collect();
    let mut row: Vec<String> = obj.values().map(|x| x.to_string()).collect();
    header.push("recovery_rate".into());
    row.push(stats.recovery_rate().map_or("NA".into(), |r| r.to_string()));
    format!("{}\n{}\n", header.join("\t"), row.join("\t"))
}

fn setup_workspace(args: &RunArgs, cfg: &RunConfig, objective: &Objective) -> CliResult<PathBuf> {
    let root_rel = Path::new(&objective.dataset.root_path);
    if root_rel.is_absolute() || root_rel.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        return Err(CliError::usage("--objective: dataset.root_path must be relative to the workspace"));
    }
    let ws = match &cfg.workspace_root {
        Some(p) => p.clone(),
        None => {
            let p = args.out.join("workspace");
            if p.exists() {
                fs::remove_dir_all(&p).map_err(|e| CliError::internal(format!("cannot reset {}: {e}", p.display())))?;
            }
            p
        }
    };
    let io_err = |e: io::Error| CliError::internal(format!("workspace setup: {e}"));
    fs::create_dir_all(&ws).map_err(io_err)?;
    let target = ws.join(root_rel);
    if !same_dir(&args.dataset, &target) {
        copy_dir(&args.dataset, &target).map_err(io_err)?;
    }
    if let Some(lib) = &cfg.tool_lib {
        require_path("--config tool_lib", lib)?;
        copy_dir(lib, &ws.join("tool_lib")).map_err(io_err)?;
    }
    Ok(ws)
}

pub fn cmd_run(args: &RunArgs) -> CliResult<Emitted> {
    require_path("--objective", &args.objective)?;
    require_path("--dataset", &args.dataset)?;
    require_path("--cards", &args.cards)?;
    if !args.cards.is_dir() {
        return Err(CliError::usage(format!("--cards: {} is not a directory", args.cards.display())));
    }
    let cfg = match &args.config {
        Some(p) => {
            require_path("--config", p)?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    let objective: Objective = serde_json::from_str(
        &fs::read_to_string(&args.objective).map_err(|e| CliError::usage(format!("--objective: {e}")))?,
    )
    .map_err(|e| CliError::usage(format!("--objective: {e}")))?;
    objective.validate().map_err(|e| CliError::usage(format!("--objective: {e}")))?;
    let registry = load_registry_dir(&args.cards).map_err(|e| CliError::usage(format!("--cards: {e}")))?;

    let ws = setup_workspace(args, &cfg, &objective)?;
    let mut ecfg = EpisodeConfig::new(&ws);
    ecfg.ablation = cfg.ablation;
    ecfg.seed = args.seed.or(cfg.seed).unwrap_or(0);
    if let Some(t) = cfg.exec.timeout_seconds {
        ecfg.exec_limits.wall = Duration::from_secs(t);
    }
    if let Some(b) = cfg.exec.max_output_bytes {
        ecfg.exec_limits.output_bytes = b;
    }
    if let Some(w) = cfg.qc_workers {
        ecfg.qc_workers = w;
    }
    let mut clock: Box<dyn Clock> = match cfg.clock {
        ClockConfig::System => Box::new(SystemClock::new()),
        ClockConfig::Simulated { tick_ms } => Box::new(SimClock::new(0, tick_ms)),
    };

    let partial = args.out.join(".trace.jsonl.partial");
    let ledger = Ledger::create(&partial).map_err(|e| CliError::internal(format!("ledger: {e}")))?;
    let budget = cfg.budget.to_budget();
    let episode = |policy: &mut dyn Policy, clock: &mut dyn Clock, ledger: Ledger| {
        run_episode(&objective, &registry, policy, &budget, &ecfg, clock, ledger)
    };
    let mut emitted = Emitted::default();
    let result = match args.policy {
        PolicyKind::Scripted => {
            let script = args
                .script
                .clone()
                .or(cfg.policy.script.clone())
                .ok_or_else(|| CliError::usage("--script: the scripted policy needs a script file"))?;
            require_path("--script", &script)?;
            let mut policy = ScriptedPolicy::from_file(&script).map_err(|e| CliError::usage(format!("--script: {e}")))?;
            episode(&mut policy, clock.as_mut(), ledger)
        }
        PolicyKind::Live => {
            let live = LivePolicy::from_env().map_err(|e| CliError::usage(format!("--policy live: {e}")))?;
            let mut policy = RecordingPolicy::new(live);
            let r = episode(&mut policy, clock.as_mut(), ledger);
            if let Some(rec) = &cfg.policy.record {
                let path = args.out.join(rec);
                policy
                    .record_session(&path)
                    .map_err(|e| CliError::internal(format!("recording session: {e}")))?;
                emitted.0.push(path);
            }
            r
        }
    };
    let outcome = result.map_err(|e| match e {
        RuntimeError::InvalidObjective(_) | RuntimeError::InvalidBudget(_) | RuntimeError::WorkspaceViolation(_) => {
            CliError::usage(e)
        }
        other => CliError::internal(other),
    })?;
    write_outputs(args, &partial, &outcome, &mut emitted)?;
    match &outcome.halt {
        None => Ok(emitted),
        Some(h) if h.is_budget() => Err(CliError::Budget(format!("episode halted: {h}"))),
        Some(HaltReason::PolicyFailure(d)) => Err(CliError::internal(format!("episode halted: policy failure: {d}"))),
        Some(h) => Err(CliError::internal(format!("episode halted: {h}"))),
    }
}

fn write_outputs(args: &RunArgs, partial: &Path, outcome: &EpisodeOutcome, emitted: &mut Emitted) -> CliResult<()> {
    let trace = args.out.join("trace.jsonl");
    fs::rename(partial, &trace).map_err(|e| CliError::internal(format!("cannot write {}: {e}", trace.display())))?;
    emitted.0.push(trace);
    let deliverables = json!({
        "completed": outcome.completed,
        "halt": outcome.halt,
        "manifest": outcome.deliverables.manifest,
    });
    emit(emitted, args.out.join("deliverables.json"), json_pretty(&deliverables))?;
    let stats = compute_run_stats(&LoadedLedger::from_ledger(&outcome.ledger))
        .map_err(|e| CliError::internal(format!("run stats: {e}")))?;
    emit(emitted, args.out.join("run_stats.tsv"), stats_tsv(&stats))
}
