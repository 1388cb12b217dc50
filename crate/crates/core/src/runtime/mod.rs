//! Supervisor-led episode runtime: budgets, role capabilities, hub-and-spoke
//! routing, todo plans and the episode loop.

mod builtins;
mod episode;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{Action, ActionKind, AgentRole, TodoItem};
use crate::ledger::{LedgerError, TraceStep};
use crate::policy::accumulate_usage;
use crate::sandbox::SandboxError;

pub use builtins::BUILTIN_PREFIX;
pub use episode::{run_episode, EpisodeConfig, EpisodeOutcome, SelectorKind};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("invalid objective: {0}")]
    InvalidObjective(String),
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
    #[error("budget exhausted: {0}")]
    BudgetExhausted(HaltReason),
    #[error("disallowed action: {role} may not {action}")]
    DisallowedAction { role: AgentRole, action: ActionKind },
    #[error("routing violation: {from} may not message {to}")]
    RoutingViolation { from: AgentRole, to: AgentRole },
    #[error("fanout violation: {second} addressed after {first} in the same turn")]
    FanoutViolation { first: AgentRole, second: AgentRole },
    #[error("protocol violation: todo item `{0}` moved from done back to pending")]
    TodoRegression(String),
    #[error("policy failure: {0}")]
    PolicyFailure(String),
    #[error("workspace violation: {0}")]
    WorkspaceViolation(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRef {
    /// Workspace-relative dataset root.
    pub root_path: String,
    pub subject_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Objective {
    pub goal_text: String,
    pub dataset: DatasetRef,
    pub deliverable_spec: Vec<String>,
}

impl Objective {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        if self.goal_text.trim().is_empty() {
            return Err(RuntimeError::InvalidObjective("empty goal text".into()));
        }
        if self.deliverable_spec.is_empty() {
            return Err(RuntimeError::InvalidObjective("no deliverable kinds".into()));
        }
        let mut seen = BTreeSet::new();
        for s in &self.dataset.subject_ids {
            if !seen.insert(s) {
                return Err(RuntimeError::InvalidObjective(format!("duplicate subject `{s}`")));
            }
        }
        Ok(())
    }

    /// Text shown to the Supervisor at the start of an episode.
    pub fn brief(&self) -> String {
        let mut s = format!(
            "Objective: {}\nDataset root: {}\nSubjects ({}): {}\n",
            self.goal_text.trim(),
            self.dataset.root_path,
            self.dataset.subject_ids.len(),
            self.dataset.subject_ids.join(", ")
        );
        if let Some(l) = &self.dataset.labels_path {
            s.push_str(&format!("Labels: {l}\n"));
        }
        s.push_str(&format!("Required deliverables: {}\n", self.deliverable_spec.join(", ")));
        s
    }
}

pub const DEFAULT_MAX_STEPS: u64 = 500;
pub const DEFAULT_MAX_WALL_CLOCK_MS: u64 = 12 * 3600 * 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub max_react_steps: u64,
    pub max_wall_clock_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_cost: Option<f64>,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            max_react_steps: DEFAULT_MAX_STEPS,
            max_wall_clock_ms: DEFAULT_MAX_WALL_CLOCK_MS,
            max_cost: None,
        }
    }
}

impl Budget {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        if self.max_react_steps == 0 || self.max_wall_clock_ms == 0 {
            return Err(RuntimeError::InvalidBudget("limits must be positive".into()));
        }
        if self.max_cost.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return Err(RuntimeError::InvalidBudget("max_cost must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", content = "detail", rename_all = "snake_case")]
pub enum HaltReason {
    StepLimit,
    TimeLimit,
    CostLimit,
    PolicyFailure(String),
    Unrecoverable(String),
}

impl fmt::Display for HaltReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HaltReason::StepLimit => f.write_str("StepLimit"),
            HaltReason::TimeLimit => f.write_str("TimeLimit"),
            HaltReason::CostLimit => f.write_str("CostLimit"),
            HaltReason::PolicyFailure(d) => write!(f, "PolicyFailure: {d}"),
            HaltReason::Unrecoverable(d) => write!(f, "Unrecoverable: {d}"),
        }
    }
}

impl HaltReason {
    pub fn is_budget(&self) -> bool {
        matches!(self, HaltReason::StepLimit | HaltReason::TimeLimit | HaltReason::CostLimit)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BudgetCheck {
    Continue,
    Halt(HaltReason),
}

/// Halts iff any limit is reached. Steps are checked first, then time, then cost.
pub fn check_limits(steps: u64, elapsed_ms: u64, cost: f64, budget: &Budget) -> BudgetCheck {
    if steps >= budget.max_react_steps {
        BudgetCheck::Halt(HaltReason::StepLimit)
    } else if elapsed_ms >= budget.max_wall_clock_ms {
        BudgetCheck::Halt(HaltReason::TimeLimit)
    } else if budget.max_cost.is_some_and(|m| cost >= m) {
        BudgetCheck::Halt(HaltReason::CostLimit)
    } else {
        BudgetCheck::Continue
    }
}

pub fn enforce_budget(trace: &[TraceStep], budget: &Budget, elapsed_ms: u64) -> BudgetCheck {
    check_limits(trace.len() as u64, elapsed_ms, accumulate_usage(trace).cost, budget)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    SingleAgent,
    NoJit,
    NoCodeCentric,
    NoPrimitives,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::SingleAgent,
        Ablation::NoJit,
        Ablation::NoCodeCentric,
        Ablation::NoPrimitives,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::SingleAgent => "single_agent",
            Ablation::NoJit => "no_jit",
            Ablation::NoCodeCentric => "no_code_centric",
            Ablation::NoPrimitives => "no_primitives",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown ablation `{s}`"))
    }
}

/// The role/action capability matrix, after ablation filtering.
pub fn allowed_actions(role: AgentRole, ablation: Ablation) -> BTreeSet<ActionKind> {
    use ActionKind::*;
    let mut set: BTreeSet<ActionKind> = match (role, ablation) {
        (AgentRole::Supervisor, Ablation::SingleAgent) => [
            WriteTodos,
            SynthesizeProgram,
            ExecuteProgram,
            InvokePrimitive,
            ReadFile,
            WriteFile,
            RunCommand,
            ReportFinal,
        ]
        .into(),
        (_, Ablation::SingleAgent) => BTreeSet::new(),
        (AgentRole::Supervisor, _) => [SendMessage, WriteTodos, ReadFile, ReportFinal].into(),
        (AgentRole::DataAwareness, _) => [SendMessage, WriteTodos, ReadFile, WriteFile, RunCommand].into(),
        (AgentRole::QualityControl | AgentRole::Processing | AgentRole::DownstreamAnalysis, _) => [
            SendMessage,
            WriteTodos,
            SynthesizeProgram,
            ExecuteProgram,
            InvokePrimitive,
            ReadFile,
            WriteFile,
            RunCommand,
        ]
        .into(),
    };
    match ablation {
        Ablation::NoCodeCentric => {
            set.remove(&SynthesizeProgram);
            set.remove(&ExecuteProgram);
        }
        Ablation::NoPrimitives => {
            set.remove(&InvokePrimitive);
        }
        _ => {}
    }
    set
}

pub fn check_action(role: AgentRole, action: &Action, ablation: Ablation) -> Result<(), RuntimeError> {
    let kind = action.kind();
    if allowed_actions(role, ablation).contains(&kind) {
        Ok(())
    } else {
        Err(RuntimeError::DisallowedAction { role, action: kind })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub from: AgentRole,
    pub to: AgentRole,
    pub body: String,
    pub turn_index: u64,
}

/// Per-episode routing state: which sub-agent the Supervisor has addressed in
/// its current turn.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RouterState {
    dispatched: Option<(u64, AgentRole)>,
    delivered: u64,
}

impl RouterState {
    pub fn delivered(&self) -> u64 {
        self.delivered
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryReceipt {
    pub to: AgentRole,
    pub turn_index: u64,
}

pub fn route_message(message: &Message, state: &mut RouterState) -> Result<DeliveryReceipt, RuntimeError> {
    let (from, to) = (message.from, message.to);
    if from == to || (from != AgentRole::Supervisor && to != AgentRole::Supervisor) {
        return Err(RuntimeError::RoutingViolation { from, to });
    }
    if from == AgentRole::Supervisor {
        if let Some((turn, first)) = state.dispatched {
            if turn == message.turn_index {
                return Err(RuntimeError::FanoutViolation { first, second: to });
            }
        }
        state.dispatched = Some((message.turn_index, to));
    }
    state.delivered += 1;
    Ok(DeliveryReceipt {
        to,
        turn_index: message.turn_index,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TodoPlan {
    pub items: Vec<TodoItem>,
}

impl TodoPlan {
    /// Replaces the plan. Items already done must stay done.
    pub fn update(&mut self, items: Vec<TodoItem>) -> Result<(), RuntimeError> {
        for old in self.items.iter().filter(|i| i.done) {
            if items.iter().any(|n| n.text == old.text && !n.done) {
                return Err(RuntimeError::TodoRegression(old.text.clone()));
            }
        }
        self.items = items;
        Ok(())
    }

    pub fn pending(&self) -> usize {
        self.items.iter().filter(|i| !i.done).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliverableEntry {
    pub kind: String,
    pub path: String,
    /// Trace steps that wrote the artifact.
    pub provenance: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deliverables {
    pub manifest: Vec<DeliverableEntry>,
}

impl Deliverables {
    pub fn kinds(&self) -> BTreeSet<&str> {
        self.manifest.iter().map(|e| e.kind.as_str()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Usage;

    fn msg(from: AgentRole, to: AgentRole, turn: u64) -> Message {
        Message {
            from,
            to,
            body: "x".into(),
            turn_index: turn,
        }
    }

    #[test]
    fn budget_thresholds() {
        let b = Budget::default();
        let hour = 3600 * 1000;
        assert_eq!(check_limits(499, hour, 0.0, &b), BudgetCheck::Continue);
        assert_eq!(check_limits(500, hour, 0.0, &b), BudgetCheck::Halt(HaltReason::StepLimit));
        assert_eq!(
            check_limits(3, 12 * hour + 1000, 0.0, &b),
            BudgetCheck::Halt(HaltReason::TimeLimit)
        );
        let capped = Budget {
            max_cost: Some(1.0),
            ..b
        };
        assert_eq!(check_limits(3, 0, 1.0, &capped), BudgetCheck::Halt(HaltReason::CostLimit));
        assert!(Budget { max_react_steps: 0, ..b }.validate().is_err());
    }

    #[test]
    fn budget_over_trace() {
        let step = |i: u64| TraceStep {
            index: i,
            agent: AgentRole::Supervisor,
            action: Action::ReadFile { path: "a".into() },
            observation: String::new(),
            usage: Some(Usage {
                prompt_tokens: 1,
                completion_tokens: 1,
                cost: 0.5,
            }),
            t_ms: 0,
            error: None,
        };
        let trace: Vec<TraceStep> = (1..=499).map(step).collect();
        let b = Budget::default();
        assert_eq!(enforce_budget(&trace, &b, 3_600_000), BudgetCheck::Continue);
        let capped = Budget {
            max_cost: Some(100.0),
            ..b
        };
        assert_eq!(enforce_budget(&trace, &capped, 0), BudgetCheck::Halt(HaltReason::CostLimit));
    }

    #[test]
    fn capability_matrix() {
        use ActionKind::*;
        let full = Ablation::Full;
        assert!(allowed_actions(AgentRole::Processing, full).contains(&SynthesizeProgram));
        assert!(!allowed_actions(AgentRole::DataAwareness, full).contains(&ExecuteProgram));
        assert!(!allowed_actions(AgentRole::Supervisor, full).contains(&ExecuteProgram));
        assert!(allowed_actions(AgentRole::Supervisor, full).contains(&ReportFinal));
        for role in AgentRole::ALL {
            let set = allowed_actions(role, Ablation::NoCodeCentric);
            assert!(!set.contains(&SynthesizeProgram) && !set.contains(&ExecuteProgram));
            assert!(!allowed_actions(role, full).contains(&SelectTools));
        }
        let single = allowed_actions(AgentRole::Supervisor, Ablation::SingleAgent);
        assert!(single.contains(&ExecuteProgram) && !single.contains(&SendMessage));
        assert!(allowed_actions(AgentRole::Processing, Ablation::SingleAgent).is_empty());
        let prog = Action::SynthesizeProgram {
            path: "scripts/a.sh".into(),
            source: "echo".into(),
            declared_primitives: vec![],
            entry_kind: crate::action::EntryKind::SingleRun,
            pipeline: None,
        };
        assert!(check_action(AgentRole::Processing, &prog, full).is_ok());
        assert!(matches!(
            check_action(AgentRole::Processing, &prog, Ablation::NoCodeCentric),
            Err(RuntimeError::DisallowedAction { .. })
        ));
    }

    #[test]
    fn routing() {
        use AgentRole::*;
        let mut st = RouterState::default();
        assert!(route_message(&msg(Supervisor, QualityControl, 1), &mut st).is_ok());
        assert!(matches!(
            route_message(&msg(QualityControl, Processing, 1), &mut st),
            Err(RuntimeError::RoutingViolation { .. })
        ));
        assert!(route_message(&msg(QualityControl, Supervisor, 1), &mut st).is_ok());
        assert!(matches!(
            route_message(&msg(Supervisor, Processing, 1), &mut st),
            Err(RuntimeError::FanoutViolation { first: QualityControl, second: Processing })
        ));
        assert!(route_message(&msg(Supervisor, Processing, 2), &mut st).is_ok());
        assert_eq!(st.delivered(), 3);
    }

    #[test]
    fn todo_monotone() {
        let item = |t: &str, done| TodoItem { text: t.into(), done };
        let mut p = TodoPlan::default();
        p.update(vec![item("a", false), item("b", false)]).unwrap();
        p.update(vec![item("a", true), item("b", false), item("c", false)]).unwrap();
        assert_eq!(p.pending(), 2);
        assert!(matches!(
            p.update(vec![item("a", false)]),
            Err(RuntimeError::TodoRegression(t)) if t == "a"
        ));
    }

    #[test]
    fn objective_validation() {
        let mut o = Objective {
            goal_text: "classify".into(),
            dataset: DatasetRef {
                root_path: "data".into(),
                subject_ids: vec!["s1".into(), "s2".into()],
                labels_path: None,
            },
            deliverable_spec: vec!["pipeline".into()],
        };
        assert!(o.validate().is_ok());
        o.dataset.subject_ids.push("s1".into());
        assert!(o.validate().is_err());
        o.dataset.subject_ids.pop();
        o.deliverable_spec.clear();
        assert!(o.validate().is_err());
    }
}
