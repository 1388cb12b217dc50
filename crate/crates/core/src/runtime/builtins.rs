//! Primitives executed in-process. A card whose `module` starts with
//! [`BUILTIN_PREFIX`] is dispatched here instead of through its command template.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;

use serde_json::{Map, Value};

use crate::agreement::Label;
use crate::qc::{
    default_checkpoint, ingest_metric_table, load_cohort, run_checkpoint, QcMode, RunOptions, StubJudge,
};
use crate::sandbox::{check_derivatives, read_subjects, sample_subjects, WorkspaceLayout};

pub const BUILTIN_PREFIX: &str = "neuroflow::";

pub(super) struct BuiltinCtx<'a> {
    pub ws: &'a WorkspaceLayout,
    pub seed: u64,
    pub workers: usize,
}

#[derive(Debug, Default)]
pub(super) struct BuiltinOutput {
    pub observation: String,
    pub produced: Vec<String>,
    /// Subjects the call excluded from further processing.
    pub excluded: BTreeSet<String>,
}

type Args = Map<String, Value>;

fn required<'a>(args: &'a Args, key: &str, name: &str) -> Result<&'a Value, String> {
    args.get(key)
        .filter(|v| !v.is_null())
        .ok_or_else(|| format!("missing required argument `{key}` for primitive `{name}`"))
}

fn required_str<'a>(args: &'a Args, key: &str, name: &str) -> Result<&'a str, String> {
    required(args, key, name)?
        .as_str()
        .ok_or_else(|| format!("invalid argument for primitive `{name}`: `{key}` must be a string"))
}

fn write_output(ctx: &BuiltinCtx<'_>, rel: &str, content: &str) -> Result<String, String> {
    let path = ctx
        .ws
        .resolve(rel)
        .map_err(|_| format!("workspace violation: `{rel}` is outside the workspace"))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| format!("cannot create {}: {e}", parent.display()))?;
    }
    fs::write(&path, content).map_err(|e| format!("cannot write {rel}: {e}"))?;
    Ok(ctx.ws.relative(&path))
}

fn resolve_existing(ctx: &BuiltinCtx<'_>, rel: &str) -> Result<std::path::PathBuf, String> {
    let p = ctx
        .ws
        .resolve(rel)
        .map_err(|_| format!("workspace violation: `{rel}` is outside the workspace"))?;
    if p.exists() {
        Ok(p)
    } else {
        Err(format!("path does not exist: {rel}"))
    }
}

/// Runs a builtin. `Err` carries an error observation.
pub(super) fn invoke(name: &str, module: &str, args: &Args, ctx: &BuiltinCtx<'_>) -> Result<BuiltinOutput, String> {
    match module.strip_prefix(BUILTIN_PREFIX) {
        Some("qc::checkpoint") => qc_checkpoint(name, args, ctx),
        Some("sandbox::check_derivatives") => derivatives(name, args, ctx),
        Some("sandbox::sample_subjects") => sample(name, args, ctx),
        _ => Err(format!("unknown primitive module `{module}` for `{name}`")),
    }
}

fn qc_checkpoint(name: &str, args: &Args, ctx: &BuiltinCtx<'_>) -> Result<BuiltinOutput, String> {
    let step_name = required_str(args, "checkpoint", name)?;
    let cohort_dir = resolve_existing(ctx, required_str(args, "cohort_dir", name)?)?;
    let out = required_str(args, "out", name)?;
    let step = default_checkpoint(step_name)
        .ok_or_else(|| format!("invalid argument for primitive `{name}`: unknown checkpoint `{step_name}`"))?;
    let mode: QcMode = match args.get("mode") {
        None | Some(Value::Null) => QcMode::Hierarchical,
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|_| format!("invalid argument for primitive `{name}`: mode {v}"))?,
    };
    let exclude = args.get("exclude").and_then(Value::as_bool).unwrap_or(false);
    let fail = |e: crate::qc::QcError| format!("primitive {name} failed: {e}");

    let mut cohort = load_cohort(&cohort_dir).map_err(fail)?;
    if let Some(t) = args.get("metrics_table").and_then(Value::as_str) {
        let table = resolve_existing(ctx, t)?;
        let rows: BTreeMap<String, _> = ingest_metric_table(&table, step_name)
            .map_err(fail)?
            .into_iter()
            .map(|mv| (mv.subject.clone(), mv))
            .collect();
        for a in &mut cohort {
            a.table = rows.get(&a.subject).cloned();
        }
    }
    let opts = RunOptions {
        mode,
        workers: ctx.workers,
        ..RunOptions::default()
    };
    let report = run_checkpoint(&cohort, &step, &opts, &StubJudge::default()).map_err(fail)?;
    let json = serde_json::to_string_pretty(&report).expect("reports serialize");
    let written = write_output(ctx, out, &json)?;

    let failed = report.failed();
    let mut obs = format!(
        "checkpoint {}: {} PASS / {} FAIL of {} subjects; inspected {}; report {}\n",
        report.checkpoint,
        report.count(Label::Pass),
        report.count(Label::Fail),
        report.verdicts.len(),
        report.inspected.len(),
        written
    );
    for s in &failed {
        obs.push_str(&format!("FAIL {s}: {}\n", report.verdicts[s].evidence.summary));
    }
    let mut output = BuiltinOutput {
        produced: vec![written],
        ..BuiltinOutput::default()
    };
    if exclude && !failed.is_empty() {
        obs.push_str(&format!(
            "excluded from further processing: {}\n",
            failed.iter().cloned().collect::<Vec<_>>().join(", ")
        ));
        output.excluded = failed;
    }
    output.observation = obs;
    Ok(output)
}

fn derivatives(name: &str, args: &Args, ctx: &BuiltinCtx<'_>) -> Result<BuiltinOutput, String> {
    let root = resolve_existing(ctx, required_str(args, "root", name)?)?;
    let patterns: Vec<String> = required(args, "patterns", name)?
        .as_array()
        .map(|a| a.iter().filter_map(Value::as_str).map(str::to_string).collect())
        .ok_or_else(|| format!("invalid argument for primitive `{name}`: `patterns` must be a list"))?;
    let subjects_path = resolve_existing(ctx, required_str(args, "subjects_file", name)?)?;
    let subjects = read_subjects(&subjects_path).map_err(|e| format!("primitive {name} failed: {e}"))?;
    let report = check_derivatives(&root, &patterns, &subjects);
    let missing = report.missing();
    let obs = if missing.is_empty() {
        format!("derivatives complete for {} subjects\n", subjects.len())
    } else {
        let mut s = format!("derivatives incomplete for {} of {} subjects\n", missing.len(), subjects.len());
        for (subj, paths) in &missing {
            s.push_str(&format!("expected file at {} not found ({subj})\n", paths.join(", ")));
        }
        s
    };
    Ok(BuiltinOutput {
        observation: obs,
        ..BuiltinOutput::default()
    })
}

fn sample(name: &str, args: &Args, ctx: &BuiltinCtx<'_>) -> Result<BuiltinOutput, String> {
    let subjects_path = resolve_existing(ctx, required_str(args, "subjects_file", name)?)?;
    let n = required(args, "n", name)?
        .as_u64()
        .ok_or_else(|| format!("invalid argument for primitive `{name}`: `n` must be a count"))? as usize;
    let out = required_str(args, "out", name)?;
    let subjects = read_subjects(&subjects_path).map_err(|e| format!("primitive {name} failed: {e}"))?;
    let picked = sample_subjects(&subjects, n, ctx.seed).map_err(|e| format!("primitive {name} failed: {e}"))?;
    let mut text = picked.join("\n");
    text.push('\n');
    let written = write_output(ctx, out, &text)?;
    Ok(BuiltinOutput {
        observation: format!("sampled {} of {} subjects into {written}: {}\n", picked.len(), subjects.len(), picked.join(", ")),
        produced: vec![written],
        ..BuiltinOutput::default()
    })
}
