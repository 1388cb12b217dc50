use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use neuroflow_core::policy::LivePolicy;
use neuroflow_core::qc::{
    compute_metrics_strict, default_checkpoint, ingest_metric_table, load_cohort, run_checkpoint, screen_cohort,
    visual_inspect, visualize, CheckpointConfig, Direction, InspectionProtocol, Judge, ModelJudge, QcError, QcMode,
    RunOptions, ScreeningRule, StubJudge, SubjectArtifacts, DEFAULT_WORKERS,
};
use serde::Deserialize;
use serde_json::json;

use crate::error::{emit, json_pretty, require_path, CliError, CliResult, Emitted};

#[derive(Debug, Subcommand)]
pub enum QcCommand {
    /// Screen a metric table and write flagged.json.
    Screen(ScreenArgs),
    /// Compute per-subject checkpoint metrics and write metrics.tsv.
    Metrics(CohortArgs),
    /// Visually inspect subjects and write judgments.json and judgments.tsv.
    Judge(JudgeArgs),
    /// Run a full checkpoint and write verdicts.json and verdicts.tsv.
    Checkpoint(CheckpointArgs),
}

/// Optional TOML overrides shared by the qc subcommands.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct QcConfig {
    checkpoint: Option<CheckpointConfig>,
    rule: Option<ScreeningRule>,
    protocol: Option<InspectionProtocol>,
    workers: Option<usize>,
}

fn load_config(path: Option<&Path>) -> CliResult<QcConfig> {
    let Some(p) = path else {
        return Ok(QcConfig::default());
    };
    require_path("--config", p)?;
    let text = fs::read_to_string(p).map_err(|e| CliError::usage(format!("--config: {e}")))?;
    toml::from_str(&text).map_err(|e| CliError::usage(format!("--config: {}: {e}", p.display())))
}

fn qc_err(e: QcError) -> CliError {
    match e {
        QcError::Io(_) | QcError::JudgeFailure(_) => CliError::internal(e),
        other => CliError::usage(other),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RuleKind {
    Iqr,
    Topk,
}

#[derive(Debug, Args)]
pub struct ScreenArgs {
    /// Metric table (TSV or JSON array) with a subject column.
    #[arg(long = "metrics")]
    pub table: PathBuf,
    /// Metric to screen; repeat for a multi-metric union.
    #[arg(long = "metric", required = true)]
    pub metric: Vec<String>,
    #[arg(long, value_enum, default_value = "iqr")]
    pub rule: RuleKind,
    #[arg(long, default_value_t = 1.5)]
    pub multiplier: f64,
    #[arg(long, default_value_t = 0.15)]
    pub fraction: f64,
    /// high_bad, low_bad or both.
    #[arg(long, default_value = "both")]
    pub direction: Direction,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_screen(args: &ScreenArgs) -> CliResult<Emitted> {
    require_path("--metrics", &args.table)?;
    let cfg = load_config(args.config.as_deref())?;
    let rule = cfg.rule.unwrap_or_else(|| match args.rule {
        RuleKind::Iqr => ScreeningRule {
            iqr_multiplier: args.multiplier,
            ..ScreeningRule::iqr()
        },
        RuleKind::Topk => ScreeningRule::top_k(args.fraction),
    });
    let vectors = ingest_metric_table(&args.table, "screen").map_err(qc_err)?;
    let metrics: Vec<(String, Direction)> = args.metric.iter().map(|m| (m.clone(), args.direction)).collect();
    for (m, _) in &metrics {
        if vectors.iter().all(|v| v.usable(m).is_none()) {
            return Err(CliError::usage(format!("--metric: `{m}` has no values in {}", args.table.display())));
        }
    }
    let result = screen_cohort(&vectors, &metrics, &rule).map_err(qc_err)?;
    let out = json!({
        "rule": rule,
        "metrics": args.metric,
        "n_subjects": vectors.len(),
        "flagged": result.flagged,
        "triggers": result.triggers,
    });
    let mut emitted = Emitted::default();
    emit(&mut emitted, args.out.join("flagged.json"), json_pretty(&out))?;
    Ok(emitted)
}

#[derive(Debug, Args)]
pub struct CohortArgs {
    /// Cohort laid out as `<dir>/<subject>/<slot>.json`.
    #[arg(long)]
    pub cohort: PathBuf,
    /// Checkpoint name (raw_t1w, skull_strip, segmentation, t1w_to_mni, bold_to_t1w, ...).
    #[arg(long)]
    pub checkpoint: String,
    /// Metric table for table-sourced metrics.
    #[arg(long)]
    pub metrics_table: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

struct Loaded {
    cfg: QcConfig,
    step: CheckpointConfig,
    cohort: Vec<SubjectArtifacts>,
}

fn load(args: &CohortArgs) -> CliResult<Loaded> {
    require_path("--cohort", &args.cohort)?;
    let mut cfg = load_config(args.config.as_deref())?;
    let mut step = match cfg.checkpoint.take() {
        Some(c) => c,
        None => default_checkpoint(&args.checkpoint)
            .ok_or_else(|| CliError::usage(format!("--checkpoint: unknown checkpoint `{}`", args.checkpoint)))?,
    };
    if let Some(r) = cfg.rule.take() {
        step.rule = r;
    }
    let mut cohort = load_cohort(&args.cohort).map_err(qc_err)?;
    if cohort.is_empty() {
        return Err(CliError::usage(format!("--cohort: no subject directories in {}", args.cohort.display())));
    }
    if let Some(t) = &args.metrics_table {
        require_path("--metrics-table", t)?;
        let rows: BTreeMap<String, _> = ingest_metric_table(t, &step.name)
            .map_err(qc_err)?
            .into_iter()
            .map(|mv| (mv.subject.clone(), mv))
            .collect();
        for a in &mut cohort {
            a.table = rows.get(&a.subject).cloned();
        }
    }
    Ok(Loaded { cfg, step, cohort })
}

pub fn cmd_metrics(args: &CohortArgs) -> CliResult<Emitted> {
    let Loaded { step, cohort, .. } = load(args)?;
    let names: Vec<&str> = step.metrics.iter().map(|m| m.name.as_str()).collect();
    let mut tsv = format!("subject\t{}\n", names.join("\t"));
    for a in &cohort {
        let mv = compute_metrics_strict(&step, a).map_err(|e| CliError::usage(format!("{}: {e}", a.subject)))?;
        let cells: Vec<String> = names
            .iter()
            .map(|n| mv.metrics.get(*n).map_or("NA".to_string(), |v| format!("{v:.6}")))
            .collect();
        tsv.push_str(&format!("{}\t{}\n", a.subject, cells.join("\t")));
    }
    let mut emitted = Emitted::default();
    emit(&mut emitted, args.out.join("metrics.tsv"), tsv)?;
    Ok(emitted)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum JudgeKind {
    /// Deterministic contour-mismatch judge.
    Stub,
    /// Vision-language model at the configured endpoint.
    Live,
}

fn make_judge(kind: JudgeKind, threshold: f64) -> CliResult<Box<dyn Judge>> {
    Ok(match kind {
        JudgeKind::Stub => Box::new(StubJudge { threshold }),
        JudgeKind::Live => Box::new(ModelJudge::new(
            LivePolicy::from_env().map_err(|e| CliError::usage(format!("--judge live: {e}")))?,
        )),
    })
}

#[derive(Debug, Args)]
pub struct JudgeArgs {
    #[command(flatten)]
    pub cohort: CohortArgs,
    /// Subjects to inspect; all when omitted.
    #[arg(long = "subject")]
    pub subjects: Vec<String>,
    #[arg(long, value_enum, default_value = "stub")]
    pub judge: JudgeKind,
    /// Mismatch fraction above which the stub judge rejects.
    #[arg(long, default_value_t = 0.05)]
    pub threshold: f64,
}

pub fn cmd_judge(args: &JudgeArgs) -> CliResult<Emitted> {
    let Loaded { cfg, step, cohort } = load(&args.cohort)?;
    let wanted: BTreeSet<&str> = args.subjects.iter().map(String::as_str).collect();
    let known: BTreeSet<&str> = cohort.iter().map(|a| a.subject.as_str()).collect();
    if let Some(s) = wanted.iter().find(|s| !known.contains(**s)) {
        return Err(CliError::usage(format!("--subject: `{s}` is not in the cohort")));
    }
    let judge = make_judge(args.judge, args.threshold)?;
    let protocol = cfg.protocol.unwrap_or_default();
    let mut results = BTreeMap::new();
    let mut tsv = String::from("subject\tverdict\tturns\treject_reason\n");
    for a in cohort.iter().filter(|a| wanted.is_empty() || wanted.contains(a.subject.as_str())) {
        let viz = visualize(&step, a).map_err(qc_err)?;
        let r = visual_inspect(&viz, judge.as_ref(), &protocol).map_err(qc_err)?;
        let verdict = serde_json::to_value(r.verdict.verdict).expect("verdict serializes");
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            a.subject,
            verdict.as_str().unwrap_or_default(),
            r.turns,
            r.verdict.reject_reason.as_deref().unwrap_or("")
        ));
        results.insert(a.subject.clone(), r);
    }
    let mut emitted = Emitted::default();
    emit(&mut emitted, args.cohort.out.join("judgments.json"), json_pretty(&results))?;
    emit(&mut emitted, args.cohort.out.join("judgments.tsv"), tsv)?;
    Ok(emitted)
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[command(flatten)]
    pub cohort: CohortArgs,
    #[arg(long, value_enum, default_value = "hierarchical")]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value = "stub")]
    pub judge: JudgeKind,
    #[arg(long, default_value_t = 0.05)]
    pub threshold: f64,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Hierarchical,
    MetricOnly,
    VisualOnly,
    VisualOneShot,
}

impl From<ModeArg> for QcMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Hierarchical => QcMode::Hierarchical,
            ModeArg::MetricOnly => QcMode::MetricOnly,
            ModeArg::VisualOnly => QcMode::VisualOnly,
            ModeArg::VisualOneShot => QcMode::VisualOneShot,
        }
    }
}

pub fn cmd_checkpoint(args: &CheckpointArgs) -> CliResult<Emitted> {
    let Loaded { cfg, step, cohort } = load(&args.cohort)?;
    let judge = make_judge(args.judge, args.threshold)?;
    let opts = RunOptions {
        mode: args.mode.into(),
        protocol: cfg.protocol.unwrap_or_default(),
        workers: args.workers.or(cfg.workers).unwrap_or(DEFAULT_WORKERS),
    };
    let report = run_checkpoint(&cohort, &step, &opts, judge.as_ref()).map_err(qc_err)?;
    let mut emitted = Emitted::default();
    emit(&mut emitted, args.cohort.out.join("verdicts.json"), json_pretty(&report))?;
    emit(&mut emitted, args.cohort.out.join("verdicts.tsv"), report.summary_tsv())?;
    Ok(emitted)
}
