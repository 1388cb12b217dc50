use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use super::builtins::{self, BuiltinCtx, BUILTIN_PREFIX};
use super::{
    allowed_actions, check_action, check_limits, route_message, Ablation, Budget, BudgetCheck, DeliverableEntry,
    Deliverables, HaltReason, Message, Objective, RouterState, RuntimeError, TodoPlan,
};
use crate::action::{parse_actions, Action, ActionKind, AgentRole, DeliverableClaim};
use crate::clock::Clock;
use crate::jit::{select_tools, SelectionPolicy, SelectionRequest, SelectionResult};
use crate::ledger::{Ledger, Outcome, StepError, TraceStep};
use crate::policy::{accumulate_usage, DecisionPoint, ModelRequest, Policy, TranscriptEntry, Usage};
use crate::qc::DEFAULT_WORKERS;
use crate::registry::{Family, Registry};
use crate::sandbox::{
    confinement_violations, dispatch_job_array, read_subjects, run_script, run_shell, validate_program,
    write_program, ExecLimits, ExecutionRecord, Executor, JobArraySpec, Program, SandboxError, WorkspaceLayout,
};
use crate::taxonomy::{classify_error, ErrorCategory, Fallback, RuleTable};

const READ_LIMIT: usize = 8000;
const LOG_TAIL_LINES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectorKind {
    Lexical { max_k: Option<usize> },
    /// Ask the policy at the `select_tools` decision point.
    Model,
}

#[derive(Debug, Clone)]
pub struct EpisodeConfig {
    pub ablation: Ablation,
    pub workspace_root: PathBuf,
    pub seed: u64,
    pub exec_limits: ExecLimits,
    pub executor: Executor,
    pub selector: SelectorKind,
    /// Consecutive replies without a parseable action before the episode halts.
    pub max_parse_failures: u32,
    pub qc_workers: usize,
}

impl EpisodeConfig {
    pub fn new(workspace_root: impl Into<PathBuf>) -> Self {
        Self {
            ablation: Ablation::Full,
            workspace_root: workspace_root.into(),
            seed: 0,
            exec_limits: ExecLimits::default(),
            executor: Executor::LocalPool,
            selector: SelectorKind::Lexical { max_k: None },
            max_parse_failures: 3,
            qc_workers: DEFAULT_WORKERS,
        }
    }
}

#[derive(Debug)]
pub struct EpisodeOutcome {
    pub completed: bool,
    pub halt: Option<HaltReason>,
    pub deliverables: Deliverables,
    pub runtime_ms: u64,
    pub usage: Usage,
    pub ledger: Ledger,
}

impl EpisodeOutcome {
    pub fn trace(&self) -> &[TraceStep] {
        self.ledger.steps()
    }

    /// Routing and fanout violations recorded in the trace.
    pub fn routing_violations(&self) -> usize {
        self.trace()
            .iter()
            .filter(|s| {
                s.error.is_some()
                    && (s.observation.starts_with("routing violation") || s.observation.starts_with("fanout violation"))
            })
            .count()
    }

    /// The halt as an error, for callers that treat halts as failures.
    pub fn halt_error(&self) -> Option<RuntimeError> {
        self.halt.clone().map(|h| match h {
            HaltReason::PolicyFailure(d) => RuntimeError::PolicyFailure(d),
            other => RuntimeError::BudgetExhausted(other),
        })
    }
}

enum Stop {
    Halt(HaltReason),
    Fatal(RuntimeError),
}

impl From<RuntimeError> for Stop {
    fn from(e: RuntimeError) -> Self {
        Stop::Fatal(e)
    }
}

/// Observation plus error status for one step.
#[derive(Debug, Default)]
struct Observed {
    text: String,
    failed: bool,
    category: Option<ErrorCategory>,
    produced: Vec<String>,
}

impl Observed {
    fn ok(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            ..Self::default()
        }
    }

    fn err(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            failed: true,
            ..Self::default()
        }
    }

    fn err_as(text: impl Into<String>, category: ErrorCategory) -> Self {
        Self {
            category: Some(category),
            ..Self::err(text)
        }
    }

    fn produced(mut self, paths: Vec<String>) -> Self {
        self.produced = paths;
        self
    }
}

fn role_description(role: AgentRole) -> &'static str {
    match role {
        AgentRole::Supervisor => {
            "You are the Supervisor. Plan the work, dispatch one professional agent at a time, relay results in full, and report the final deliverables."
        }
        AgentRole::DataAwareness => {
            "You are the data awareness agent. Profile the dataset layout, modalities and subject lists; never modify raw data."
        }
        AgentRole::QualityControl => {
            "You are the quality control agent. Run checkpoints, screen the cohort and judge flagged subjects."
        }
        AgentRole::Processing => {
            "You are the processing agent. Compose processing primitives into executable pipeline programs and run them."
        }
        AgentRole::DownstreamAnalysis => {
            "You are the downstream analysis agent. Extract features, train and refine models, and write inference scripts."
        }
    }
}

fn family_of(role: AgentRole) -> Option<Family> {
    match role {
        AgentRole::QualityControl => Some(Family::QC),
        AgentRole::Processing => Some(Family::Processing),
        AgentRole::DownstreamAnalysis => Some(Family::Analysis),
        AgentRole::Supervisor | AgentRole::DataAwareness => None,
    }
}

fn truncate(text: &str, limit: usize) -> String {
    if text.len() <= limit {
        return text.to_string();
    }
    let mut end = limit;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}\n[truncated]\n", &text[..end])
}

fn tail(text: &str, lines: usize) -> String {
    let all: Vec<&str> = text.lines().collect();
    let start = all.len().saturating_sub(lines);
    let mut s = all[start..].join("\n");
    if !s.is_empty() {
        s.push('\n');
    }
    s
}

struct Episode<'a> {
    objective: &'a Objective,
    registry: &'a Registry,
    policy: &'a mut dyn Policy,
    budget: &'a Budget,
    config: &'a EpisodeConfig,
    clock: &'a mut dyn Clock,
    ledger: Ledger,
    ws: WorkspaceLayout,
    start_ms: u64,
    turn: u64,
    router: RouterState,
    transcripts: BTreeMap<AgentRole, Vec<TranscriptEntry>>,
    selections: BTreeMap<AgentRole, SelectionResult>,
    todos: BTreeMap<AgentRole, TodoPlan>,
    excluded: BTreeSet<String>,
    produced_by: BTreeMap<String, Vec<u64>>,
    open_errors: Vec<(u64, AgentRole, ActionKind)>,
    recovered: Vec<u64>,
    stray_usage: Usage,
    parse_failures: u32,
    rules: RuleTable,
    raw_roots: Vec<String>,
    deliverables: Option<Deliverables>,
}

/// Runs one episode to completion or halt. Halts are reported in the outcome;
/// `Err` is reserved for setup failures and ledger I/O.
pub fn run_episode(
    objective: &Objective,
    registry: &Registry,
    policy: &mut dyn Policy,
    budget: &Budget,
    config: &EpisodeConfig,
    clock: &mut dyn Clock,
    ledger: Ledger,
) -> Result<EpisodeOutcome, RuntimeError> {
    objective.validate()?;
    budget.validate()?;
    let ws = WorkspaceLayout::prepare(&config.workspace_root)?;
    let data_root = ws
        .resolve(&objective.dataset.root_path)
        .map_err(|_| RuntimeError::WorkspaceViolation(format!("dataset root `{}`", objective.dataset.root_path)))?;
    if !data_root.exists() {
        return Err(RuntimeError::InvalidObjective(format!(
            "dataset root `{}` does not exist",
            objective.dataset.root_path
        )));
    }
    let raw_roots = {
        let mut v = vec![ws.root.to_string_lossy().into_owned()];
        let given = config.workspace_root.to_string_lossy().into_owned();
        if !v.contains(&given) {
            v.push(given);
        }
        v.sort_by_key(|s| std::cmp::Reverse(s.len()));
        v
    };
    let start_ms = clock.now_ms();
    let mut ep = Episode {
        objective,
        registry,
        policy,
        budget,
        config,
        clock,
        ledger,
        ws,
        start_ms,
        turn: 0,
        router: RouterState::default(),
        transcripts: BTreeMap::new(),
        selections: BTreeMap::new(),
        todos: BTreeMap::new(),
        excluded: BTreeSet::new(),
        produced_by: BTreeMap::new(),
        open_errors: Vec::new(),
        recovered: Vec::new(),
        stray_usage: Usage::default(),
        parse_failures: 0,
        rules: RuleTable::default_rules(),
        raw_roots,
        deliverables: None,
    };
    let halt = match ep.run() {
        Ok(()) => None,
        Err(Stop::Halt(h)) => Some(h),
        Err(Stop::Fatal(e)) => return Err(e),
    };
    let runtime_ms = ep.elapsed();
    let outcome = match &halt {
        None => Outcome::Completed,
        Some(h) => Outcome::Halted { reason: h.to_string() },
    };
    let mut recovered = ep.recovered.clone();
    recovered.sort_unstable();
    ep.ledger.close(outcome, runtime_ms, recovered)?;
    let usage = accumulate_usage(ep.ledger.steps()) + ep.stray_usage;
    Ok(EpisodeOutcome {
        completed: halt.is_none(),
        halt,
        deliverables: ep.deliverables.take().unwrap_or_default(),
        runtime_ms,
        usage,
        ledger: ep.ledger,
    })
}

impl Episode<'_> {
    fn elapsed(&mut self) -> u64 {
        self.clock.now_ms().saturating_sub(self.start_ms)
    }

    fn ablation(&self) -> Ablation {
        self.config.ablation
    }

    fn check_budget(&mut self) -> Result<(), Stop> {
        let elapsed = self.elapsed();
        let cost = accumulate_usage(self.ledger.steps()).cost + self.stray_usage.cost;
        match check_limits(self.ledger.steps().len() as u64, elapsed, cost, self.budget) {
            BudgetCheck::Continue => Ok(()),
            BudgetCheck::Halt(h) => Err(Stop::Halt(h)),
        }
    }

    fn sanitize(&self, text: &str) -> String {
        let mut s = text.to_string();
        for root in &self.raw_roots {
            s = s.replace(&format!("{root}/"), "").replace(root.as_str(), ".");
        }
        s
    }

    fn transcript(&mut self, role: AgentRole) -> &mut Vec<TranscriptEntry> {
        self.transcripts.entry(role).or_default()
    }

    fn system_context(&self, role: AgentRole) -> String {
        let mut s = format!("{}\n", role_description(role));
        if role == AgentRole::Supervisor {
            s.push_str(&self.objective.brief());
        }
        let allowed: Vec<&str> = allowed_actions(role, self.ablation()).into_iter().map(ActionKind::as_str).collect();
        s.push_str(&format!(
            "Reply with one JSON object whose \"action\" is one of: {}\n",
            allowed.join(", ")
        ));
        if let Some(sel) = self.selections.get(&role) {
            if !sel.injected_context.is_empty() {
                s.push_str("Available primitives:\n");
                s.push_str(&sel.injected_context);
            }
        }
        s
    }

    /// One policy call at a react_step decision point. Replies without an
    /// action are fed back and retried until the failure limit.
    fn ask(&mut self, role: AgentRole) -> Result<(Vec<Action>, Usage), Stop> {
        loop {
            self.check_budget()?;
            let request = ModelRequest {
                agent: role,
                system_context: self.system_context(role),
                transcript: self.transcripts.get(&role).cloned().unwrap_or_default(),
                decision_point: DecisionPoint::ReactStep,
            };
            let response = self
                .policy
                .complete(&request)
                .map_err(|e| Stop::Halt(HaltReason::PolicyFailure(e.to_string())))?;
            let actions = parse_actions(&response.content);
            if actions.is_empty() {
                self.stray_usage += response.usage;
                self.parse_failures += 1;
                if self.parse_failures >= self.config.max_parse_failures {
                    return Err(Stop::Halt(HaltReason::PolicyFailure(format!(
                        "{} consecutive replies without a parseable action",
                        self.parse_failures
                    ))));
                }
                self.transcript(role).push(TranscriptEntry::new(
                    "runtime",
                    "no action could be parsed from the reply; answer with one JSON action object",
                ));
                continue;
            }
            self.parse_failures = 0;
            self.transcript(role)
                .push(TranscriptEntry::new(role.as_str(), response.content.trim()));
            return Ok((actions, response.usage));
        }
    }

    fn record(&mut self, agent: AgentRole, action: Action, obs: Observed, usage: Option<Usage>) -> Result<u64, Stop> {
        self.check_budget()?;
        let text = self.sanitize(&obs.text);
        let error = if obs.failed {
            let category = obs.category.unwrap_or_else(|| {
                classify_error(&text, &self.rules, &Fallback::Fixed(ErrorCategory::CodeGenExecutionError))
                    .unwrap_or(ErrorCategory::CodeGenExecutionError)
            });
            let note = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("").trim();
            Some(StepError {
                category,
                note: truncate(note, 200).trim_end().to_string(),
            })
        } else {
            None
        };
        let kind = action.kind();
        let index = self.ledger.last_index() + 1;
        let t_ms = self.elapsed();
        self.ledger
            .append_step(TraceStep {
                index,
                agent,
                action,
                observation: text.clone(),
                usage,
                t_ms,
                error: error.clone(),
            })
            .map_err(|e| Stop::Fatal(e.into()))?;
        if error.is_some() {
            self.open_errors.push((index, agent, kind));
        } else {
            let (done, open): (Vec<_>, Vec<_>) = self
                .open_errors
                .drain(..)
                .partition(|(_, a, k)| *a == agent && *k == kind);
            self.open_errors = open;
            self.recovered.extend(done.into_iter().map(|(i, _, _)| i));
        }
        for p in obs.produced {
            self.produced_by.entry(p).or_default().push(index);
        }
        self.transcript(agent).push(TranscriptEntry::new("observation", text));
        Ok(index)
    }

    fn run(&mut self) -> Result<(), Stop> {
        let brief = self.objective.brief();
        self.transcript(AgentRole::Supervisor).push(TranscriptEntry::new("user", brief));
        if self.ablation() == Ablation::SingleAgent {
            let goal = self.objective.goal_text.clone();
            self.select(AgentRole::Supervisor, &goal)?;
        }
        loop {
            self.turn += 1;
            let (actions, usage) = self.ask(AgentRole::Supervisor)?;
            let mut actions = actions.into_iter();
            let first = actions.next().expect("ask returns at least one action");
            let extras: Vec<Action> = if matches!(first, Action::SendMessage { .. }) {
                actions.filter(|a| matches!(a, Action::SendMessage { .. })).collect()
            } else {
                Vec::new()
            };
            let dispatch = self.supervisor_act(first, usage)?;
            if self.deliverables.is_some() {
                return Ok(());
            }
            for extra in extras {
                let Action::SendMessage { to, body } = &extra else { continue };
                let msg = Message {
                    from: AgentRole::Supervisor,
                    to: *to,
                    body: body.clone(),
                    turn_index: self.turn,
                };
                let obs = match route_message(&msg, &mut self.router) {
                    Ok(_) => unreachable!("a second dispatch in one turn is always rejected"),
                    Err(e) => Observed::err(format!("{e}; message not delivered")),
                };
                self.record(AgentRole::Supervisor, extra, obs, None)?;
            }
            if let Some((to, body)) = dispatch {
                self.run_subagent(to, body)?;
            }
        }
    }

    /// Executes the Supervisor's action. Returns the dispatch to run, if any.
    fn supervisor_act(&mut self, action: Action, usage: Usage) -> Result<Option<(AgentRole, String)>, Stop> {
        let me = AgentRole::Supervisor;
        if let Err(e) = check_action(me, &action, self.ablation()) {
            self.record(me, action, Observed::err(e.to_string()), Some(usage))?;
            return Ok(None);
        }
        match &action {
            Action::SendMessage { to, body } => {
                let msg = Message {
                    from: me,
                    to: *to,
                    body: body.clone(),
                    turn_index: self.turn,
                };
                match route_message(&msg, &mut self.router) {
                    Ok(r) => {
                        let (to, body) = (r.to, body.clone());
                        self.record(me, action, Observed::ok(format!("delivered to {to}")), Some(usage))?;
                        Ok(Some((to, body)))
                    }
                    Err(e) => {
                        self.record(me, action, Observed::err(format!("{e}; message not delivered")), Some(usage))?;
                        Ok(None)
                    }
                }
            }
            Action::ReportFinal { deliverables, .. } => {
                let (obs, accepted) = self.verify_deliverables(deliverables);
                let index = self.record(me, action.clone(), obs, Some(usage))?;
                if let Some(mut d) = accepted {
                    for e in &mut d.manifest {
                        if e.provenance.is_empty() {
                            e.provenance.push(index);
                        }
                    }
                    self.deliverables = Some(d);
                }
                Ok(None)
            }
            _ => {
                let obs = self.perform(me, &action);
                self.record(me, action, obs, Some(usage))?;
                Ok(None)
            }
        }
    }

    fn run_subagent(&mut self, role: AgentRole, instruction: String) -> Result<(), Stop> {
        self.transcript(role).push(TranscriptEntry::new("Supervisor", instruction.clone()));
        if self.ablation() != Ablation::NoPrimitives {
            self.select(role, &instruction)?;
        }
        loop {
            let (actions, usage) = self.ask(role)?;
            let action = actions.into_iter().next().expect("ask returns at least one action");
            if let Err(e) = check_action(role, &action, self.ablation()) {
                self.record(role, action, Observed::err(e.to_string()), Some(usage))?;
                continue;
            }
            if let Action::SendMessage { to, body } = &action {
                let msg = Message {
                    from: role,
                    to: *to,
                    body: body.clone(),
                    turn_index: self.turn,
                };
                match route_message(&msg, &mut self.router) {
                    Ok(_) => {
                        let body = body.clone();
                        self.record(role, action, Observed::ok("delivered to Supervisor"), Some(usage))?;
                        self.transcript(AgentRole::Supervisor)
                            .push(TranscriptEntry::new(role.as_str(), body));
                        return Ok(());
                    }
                    Err(e) => {
                        self.record(role, action, Observed::err(format!("{e}; message not delivered")), Some(usage))?;
                        continue;
                    }
                }
            }
            let obs = self.perform(role, &action);
            self.record(role, action, obs, Some(usage))?;
        }
    }

    /// Selects primitives for `role` and records the injection as a step.
    fn select(&mut self, role: AgentRole, instruction: &str) -> Result<(), Stop> {
        let (index, policy) = match self.ablation() {
            Ablation::NoJit => (self.registry.compact_index(), SelectionPolicy::All),
            _ => {
                let index = match family_of(role) {
                    Some(f) => self.registry.family_view(f).compact_index(),
                    None => self.registry.compact_index(),
                };
                let policy = match self.config.selector {
                    SelectorKind::Lexical { max_k } => SelectionPolicy::Lexical { max_k },
                    SelectorKind::Model => SelectionPolicy::Model {
                        policy: &mut *self.policy,
                        agent: role,
                    },
                };
                (index, policy)
            }
        };
        let total = index.len();
        let request = SelectionRequest {
            instruction: instruction.to_string(),
            index,
            policy,
        };
        let action = Action::SelectTools {
            instruction: instruction.to_string(),
        };
        match select_tools(request, self.registry) {
            Ok(sel) => {
                let obs = Observed::ok(format!(
                    "selected {} of {} primitives: {}",
                    sel.result.selected_names.len(),
                    total,
                    sel.result.selected_names.join(", ")
                ));
                self.selections.insert(role, sel.result);
                self.record(role, action, obs, sel.usage)?;
            }
            Err(e) => {
                self.selections.insert(
                    role,
                    SelectionResult {
                        selected_names: Vec::new(),
                        rationale: None,
                        injected_context: String::new(),
                    },
                );
                let obs = Observed::err_as(format!("rejected tool call: {e}"), ErrorCategory::ToolPrimitiveMisuse);
                self.record(role, action, obs, None)?;
            }
        }
        Ok(())
    }

    fn env(&self) -> Vec<(String, String)> {
        let data = self
            .ws
            .resolve(&self.objective.dataset.root_path)
            .unwrap_or_else(|_| self.ws.root.clone());
        vec![
            ("TOOL_LIB".into(), self.ws.dir("tool_lib").to_string_lossy().into_owned()),
            ("DATASET".into(), data.to_string_lossy().into_owned()),
            ("SEED".into(), self.config.seed.to_string()),
        ]
    }

    fn resolve(&self, path: &str) -> Result<PathBuf, Observed> {
        self.ws.resolve(path).map_err(|_| {
            Observed::err_as(
                format!("workspace violation: `{path}` is outside the workspace"),
                ErrorCategory::InstructionViolation,
            )
        })
    }

    fn perform(&mut self, agent: AgentRole, action: &Action) -> Observed {
        let result = match action {
            Action::WriteTodos { items } => {
                let plan = self.todos.entry(agent).or_default();
                match plan.update(items.clone()) {
                    Ok(()) => Ok(Observed::ok(format!(
                        "todo plan updated: {} items, {} pending",
                        plan.items.len(),
                        plan.pending()
                    ))),
                    Err(e) => Ok(Observed::err(e.to_string())),
                }
            }
            Action::ReadFile { path } => self.read_file(path),
            Action::WriteFile { path, content } => self.write_file(path, content),
            Action::RunCommand { command } => {
                let name = format!("cmd_{:04}", self.ledger.last_index() + 1);
                Ok(exec_observation(run_shell(command, &name, &self.ws, self.config.exec_limits, &self.env())))
            }
            Action::SynthesizeProgram {
                path,
                source,
                declared_primitives,
                entry_kind,
                ..
            } => self.synthesize(agent, path, source, declared_primitives, *entry_kind),
            Action::ExecuteProgram {
                path,
                subjects_file,
                max_parallel,
                log_dir,
            } => self.execute(path, subjects_file.as_deref(), *max_parallel, log_dir.as_deref()),
            Action::InvokePrimitive { name, args } => self.invoke(agent, name, args),
            Action::SendMessage { .. } | Action::ReportFinal { .. } | Action::SelectTools { .. } => {
                Ok(Observed::err(format!("disallowed action: {} is handled by the runtime", action.kind())))
            }
        };
        result.unwrap_or_else(|o| o)
    }

    fn read_file(&self, path: &str) -> Result<Observed, Observed> {
        let p = self.resolve(path)?;
        if p.is_dir() {
            let mut names: Vec<String> = fs::read_dir(&p)
                .map_err(|e| Observed::err(format!("cannot access '{path}': {e}")))?
                .filter_map(Result::ok)
                .map(|e| {
                    let n = e.file_name().to_string_lossy().into_owned();
                    if e.path().is_dir() {
                        format!("{n}/")
                    } else {
                        n
                    }
                })
                .collect();
            names.sort();
            return Ok(Observed::ok(format!("directory {path}:\n{}\n", names.join("\n"))));
        }
        match fs::read_to_string(&p) {
            Ok(text) => Ok(Observed::ok(truncate(&text, READ_LIMIT))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                Err(Observed::err(format!("{path}: No such file or directory")))
            }
            Err(e) => Err(Observed::err(format!("cannot access '{path}': {e}"))),
        }
    }

    fn write_file(&self, path: &str, content: &str) -> Result<Observed, Observed> {
        let p = self.resolve(path)?;
        let io_err = |e: std::io::Error| Observed::err(format!("cannot write {path}: {e}"));
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
        fs::write(&p, content).map_err(io_err)?;
        let rel = self.ws.relative(&p);
        Ok(Observed::ok(format!("wrote {rel} ({} bytes)", content.len())).produced(vec![rel]))
    }

    fn synthesize(
        &self,
        agent: AgentRole,
        path: &str,
        source: &str,
        declared: &[String],
        entry_kind: crate::action::EntryKind,
    ) -> Result<Observed, Observed> {
        let program = Program {
            path: path.to_string(),
            source: source.to_string(),
            declared_primitives: declared.iter().cloned().collect(),
            entry_kind,
        };
        let empty = SelectionResult {
            selected_names: Vec::new(),
            rationale: None,
            injected_context: String::new(),
        };
        let selection = self.selections.get(&agent).unwrap_or(&empty);
        let registry = (self.ablation() != Ablation::NoPrimitives).then_some(self.registry);
        match validate_program(&program, selection, registry) {
            Err(SandboxError::UndeclaredPrimitive(n)) => {
                return Err(Observed::err(format!(
                    "undeclared primitive `{n}`: not among the selected primitives; program not written"
                )))
            }
            Err(e) => return Err(Observed::err(format!("error: {e}"))),
            Ok(()) => {}
        }
        match write_program(&program, &self.ws) {
            Ok(p) => {
                let rel = self.ws.relative(&p);
                Ok(Observed::ok(format!("wrote program {rel} ({} lines)", source.lines().count())).produced(vec![rel]))
            }
            Err(SandboxError::PathEscape(p)) => Err(Observed::err(format!(
                "workspace violation: `{p}` is outside the workspace; program not written"
            ))),
            Err(e) => Err(Observed::err(format!("error: {e}"))),
        }
    }

    fn execute(
        &self,
        path: &str,
        subjects_file: Option<&str>,
        max_parallel: Option<usize>,
        log_dir: Option<&str>,
    ) -> Result<Observed, Observed> {
        let script = self.resolve(path)?;
        if !script.is_file() {
            return Err(Observed::err(format!("{path}: No such file or directory")));
        }
        let Some(subjects_rel) = subjects_file else {
            return Ok(exec_observation(run_script(path, &self.ws, self.config.exec_limits, &self.env())));
        };
        let subjects_path = self.resolve(subjects_rel)?;
        let subjects = read_subjects(&subjects_path).map_err(|e| Observed::err(format!("{subjects_rel}: {e}")))?;
        let drift: Vec<&String> = subjects.iter().filter(|s| self.excluded.contains(*s)).collect();
        if !drift.is_empty() {
            let names: Vec<&str> = drift.iter().map(|s| s.as_str()).collect();
            return Err(Observed::err_as(
                format!(
                    "state drift: re-included {} previously excluded by quality control; program not run",
                    names.join(", ")
                ),
                ErrorCategory::StateDrift,
            ));
        }
        let source = fs::read_to_string(&script).map_err(|e| Observed::err(format!("cannot access '{path}': {e}")))?;
        let violations = confinement_violations(&source, &self.ws);
        if !violations.is_empty() {
            return Err(Observed::err(format!(
                "workspace violation: write to `{}` is outside the workspace; program not run",
                violations.join("`, `")
            )));
        }
        let stem = script
            .file_stem()
            .map_or("job".into(), |s| s.to_string_lossy().into_owned());
        let log_rel = log_dir.map_or_else(|| format!("logs/{stem}"), str::to_string);
        let log_dir = self.resolve(&log_rel)?;
        let env: String = self
            .env()
            .into_iter()
            .map(|(k, v)| format!("{k}='{v}' "))
            .collect();
        let spec = JobArraySpec {
            job_name: stem.clone(),
            subjects_file: subjects_path,
            per_subject_command: format!("{env}sh '{}' {{subject}}", script.display()),
            max_parallel: max_parallel.unwrap_or(4),
            log_dir,
            sbatch_options: Vec::new(),
        };
        let outcome = dispatch_job_array(&spec, self.config.executor, &self.ws, self.config.exec_limits)
            .map_err(|e| Observed::err(format!("job array {stem}: {e}")))?;
        let failed: Vec<&(String, ExecutionRecord)> =
            outcome.records.iter().filter(|(_, r)| r.exit_status != Some(0)).collect();
        let mut text = format!(
            "job array {stem}: {} of {} subjects succeeded; logs in {}\n",
            outcome.records.len() - failed.len(),
            outcome.records.len(),
            log_rel
        );
        for (subject, r) in &failed {
            let status = r.exit_status.map_or("killed".to_string(), |c| format!("exit status {c}"));
            text.push_str(&format!("{subject}: {status}\n{}", tail(&r.read_log(), 5)));
        }
        if failed.is_empty() {
            Ok(Observed::ok(text))
        } else {
            Err(Observed::err(text))
        }
    }

    fn invoke(&mut self, agent: AgentRole, name: &str, args: &serde_json::Map<String, Value>) -> Result<Observed, Observed> {
        let selected = self
            .selections
            .get(&agent)
            .is_some_and(|s| s.selected_names.iter().any(|n| n == name));
        if !selected {
            return Err(if self.registry.contains(name) {
                Observed::err(format!("rejected tool call: primitive `{name}` was not selected for this task"))
            } else {
                Observed::err(format!("unknown primitive `{name}`"))
            });
        }
        let card = self.registry.lookup(name).expect("selected names are registered").clone();
        if card.module.starts_with(BUILTIN_PREFIX) {
            let ctx = BuiltinCtx {
                ws: &self.ws,
                seed: self.config.seed,
                workers: self.config.qc_workers,
            };
            let out = builtins::invoke(name, &card.module, args, &ctx).map_err(Observed::err)?;
            self.excluded.extend(out.excluded);
            return Ok(Observed::ok(out.observation).produced(out.produced));
        }
        let Some(template) = &card.command_template else {
            return Err(Observed::err(format!("rejected tool call: primitive `{name}` has no command template")));
        };
        let command = fill_template(template, args).map_err(|key| {
            Observed::err(format!("missing required argument `{key}` for primitive `{name}`"))
        })?;
        let log = format!("{name}_{:04}", self.ledger.last_index() + 1);
        Ok(exec_observation(run_shell(&command, &log, &self.ws, self.config.exec_limits, &self.env())))
    }

    fn verify_deliverables(&self, claims: &[DeliverableClaim]) -> (Observed, Option<Deliverables>) {
        let mut problems = Vec::new();
        for c in claims {
            match self.ws.resolve(&c.path) {
                Ok(p) if p.exists() => {}
                Ok(_) => problems.push(format!("claimed deliverable `{}` ({}) does not exist", c.path, c.kind)),
                Err(_) => problems.push(format!(
                    "workspace violation: claimed deliverable `{}` is outside the workspace",
                    c.path
                )),
            }
        }
        let kinds: BTreeSet<&str> = claims.iter().map(|c| c.kind.as_str()).collect();
        let missing: Vec<&str> = self
            .objective
            .deliverable_spec
            .iter()
            .map(String::as_str)
            .filter(|k| !kinds.contains(k))
            .collect();
        if !missing.is_empty() {
            problems.push(format!("missing deliverables: {}", missing.join(", ")));
        }
        if !problems.is_empty() {
            return (Observed::err(problems.join("\n")), None);
        }
        let manifest = claims
            .iter()
            .map(|c| DeliverableEntry {
                kind: c.kind.clone(),
                path: c.path.clone(),
                provenance: self.provenance(&c.path),
            })
            .collect();
        let listed: Vec<String> = claims.iter().map(|c| format!("{} ({})", c.path, c.kind)).collect();
        (
            Observed::ok(format!("deliverables accepted: {}", listed.join(", "))),
            Some(Deliverables { manifest }),
        )
    }

    /// Steps that wrote `path` or anything beneath it.
    fn provenance(&self, path: &str) -> Vec<u64> {
        let norm = Path::new(path.trim_start_matches("./"));
        let mut ids: BTreeSet<u64> = BTreeSet::new();
        for (p, steps) in &self.produced_by {
            if Path::new(p).starts_with(norm) {
                ids.extend(steps);
            }
        }
        ids.into_iter().collect()
    }
}

/// Replaces `{key}` placeholders with argument values. Returns the first
/// placeholder without a value.
fn fill_template(template: &str, args: &serde_json::Map<String, Value>) -> Result<String, String> {
    let mut out = String::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let Some(close) = rest[open..].find('}') else { break };
        let key = &rest[open + 1..open + close];
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            out.push_str(&rest[..open + 1]);
            rest = &rest[open + 1..];
            continue;
        }
        let value = match args.get(key) {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Null) | None => return Err(key.to_string()),
            Some(v) => v.to_string(),
        };
        out.push_str(&rest[..open]);
        out.push_str(&value);
        rest = &rest[open + close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn exec_observation(result: Result<ExecutionRecord, SandboxError>) -> Observed {
    match result {
        Ok(r) if !r.violations.is_empty() => Observed::err(r.read_log()),
        Ok(r) => {
            let status = r.exit_status.map_or("killed".to_string(), |c| format!("exit status {c}"));
            let mut text = format!("{status}\n{}", tail(&r.read_log(), LOG_TAIL_LINES));
            if r.truncated {
                text.push_str("[output truncated]\n");
            }
            if r.succeeded() {
                Observed::ok(text).produced(r.produced_paths)
            } else {
                Observed::err(text).produced(r.produced_paths)
            }
        }
        Err(SandboxError::Timeout { limit_s, .. }) => Observed::err(format!("timed out after {limit_s} s; process group killed")),
        Err(SandboxError::OutputOverflow { limit, .. }) => {
            Observed::err(format!("output overflow: more than {limit} bytes; process group killed"))
        }
        Err(SandboxError::PathEscape(p)) => Observed::err(format!("workspace violation: `{p}` is outside the workspace")),
        Err(e) => Observed::err(format!("error: {e}")),
    }
}
