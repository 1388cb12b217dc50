//! Agent roles and the text-normalized action vocabulary.
//!
//! Policies answer with free text. An action is recovered from that text by
//! locating a JSON object carrying an `"action"` key, either bare or inside a
//! fenced code block.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AgentRole {
    Supervisor,
    DataAwareness,
    QualityControl,
    Processing,
    DownstreamAnalysis,
}

impl AgentRole {
    pub const ALL: [AgentRole; 5] = [
        AgentRole::Supervisor,
        AgentRole::DataAwareness,
        AgentRole::QualityControl,
        AgentRole::Processing,
        AgentRole::DownstreamAnalysis,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::Supervisor => "Supervisor",
            AgentRole::DataAwareness => "DataAwareness",
            AgentRole::QualityControl => "QualityControl",
            AgentRole::Processing => "Processing",
            AgentRole::DownstreamAnalysis => "DownstreamAnalysis",
        }
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AgentRole::ALL
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown agent role `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    SingleRun,
    PerSubject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TodoItem {
    pub text: String,
    #[serde(default)]
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliverableClaim {
    pub kind: String,
    pub path: String,
}

/// One decision emitted by an agent. `SelectTools` is produced by the runtime
/// itself when a professional agent receives an instruction; policies never
/// emit it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    SendMessage {
        to: AgentRole,
        body: String,
    },
    WriteTodos {
        items: Vec<TodoItem>,
    },
    SynthesizeProgram {
        path: String,
        source: String,
        #[serde(default)]
        declared_primitives: Vec<String>,
        #[serde(default = "default_entry")]
        entry_kind: EntryKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pipeline: Option<String>,
    },
    ExecuteProgram {
        path: String,
        /// Subjects file (workspace-relative) for per-subject dispatch.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        subjects_file: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_parallel: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        log_dir: Option<String>,
    },
    InvokePrimitive {
        name: String,
        #[serde(default)]
        args: serde_json::Map<String, Value>,
    },
    ReadFile {
        path: String,
    },
    WriteFile {
        path: String,
        content: String,
    },
    RunCommand {
        command: String,
    },
    ReportFinal {
        deliverables: Vec<DeliverableClaim>,
        #[serde(default)]
        summary: String,
    },
    SelectTools {
        instruction: String,
    },
}

fn default_entry() -> EntryKind {
    EntryKind::SingleRun
}

/// Discriminant of [`Action`], used by the capability matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    SendMessage,
    WriteTodos,
    SynthesizeProgram,
    ExecuteProgram,
    InvokePrimitive,
    ReadFile,
    WriteFile,
    RunCommand,
    ReportFinal,
    SelectTools,
}

impl ActionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::SendMessage => "send_message",
            ActionKind::WriteTodos => "write_todos",
            ActionKind::SynthesizeProgram => "synthesize_program",
            ActionKind::ExecuteProgram => "execute_program",
            ActionKind::InvokePrimitive => "invoke_primitive",
            ActionKind::ReadFile => "read_file",
            ActionKind::WriteFile => "write_file",
            ActionKind::RunCommand => "run_command",
            ActionKind::ReportFinal => "report_final",
            ActionKind::SelectTools => "select_tools",
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::SendMessage { .. } => ActionKind::SendMessage,
            Action::WriteTodos { .. } => ActionKind::WriteTodos,
            Action::SynthesizeProgram { .. } => ActionKind::SynthesizeProgram,
            Action::ExecuteProgram { .. } => ActionKind::ExecuteProgram,
            Action::InvokePrimitive { .. } => ActionKind::InvokePrimitive,
            Action::ReadFile { .. } => ActionKind::ReadFile,
            Action::WriteFile { .. } => ActionKind::WriteFile,
            Action::RunCommand { .. } => ActionKind::RunCommand,
            Action::ReportFinal { .. } => ActionKind::ReportFinal,
            Action::SelectTools { .. } => ActionKind::SelectTools,
        }
    }
}

/// Finds the first JSON object in `text` that satisfies `accept`, looking at
/// the whole text, fenced blocks, and brace-balanced spans in that order.
pub fn extract_json_object(text: &str, accept: impl Fn(&Value) -> bool) -> Option<Value> {
    let trimmed = text.trim();
    if let Ok(v) = serde_json::from_str::<Value>(trimmed) {
        if accept(&v) {
            return Some(v);
        }
    }
    for block in trimmed.split("```").skip(1).step_by(2) {
        let body = block.strip_prefix("json").unwrap_or(block);
        if let Ok(v) = serde_json::from_str::<Value>(body.trim()) {
            if accept(&v) {
                return Some(v);
            }
        }
    }
    let bytes = trimmed.as_bytes();
    for start in trimmed.match_indices('{').map(|(i, _)| i) {
        let mut depth = 0usize;
        let mut in_str = false;
        let mut escape = false;
        for (off, &b) in bytes[start..].iter().enumerate() {
            if in_str {
                match (escape, b) {
                    (true, _) => escape = false,
                    (false, b'\\') => escape = true,
                    (false, b'"') => in_str = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_str = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        let span = &trimmed[start..=start + off];
                        if let Ok(v) = serde_json::from_str::<Value>(span) {
                            if accept(&v) {
                                return Some(v);
                            }
                        }
                        break;
                    }
                }
                _ => {}
            }
        }
    }
    None
}

/// Top-level brace-balanced spans of `text` that parse as JSON objects, in
/// order of appearance.
pub fn json_objects(text: &str) -> Vec<Value> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'{' {
            i += 1;
            continue;
        }
        let (mut depth, mut in_str, mut escape) = (0usize, false, false);
        let mut end = None;
        for (off, &b) in bytes[i..].iter().enumerate() {
            if in_str {
                match (escape, b) {
                    (true, _) => escape = false,
                    (false, b'\\') => escape = true,
                    (false, b'"') => in_str = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_str = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        end = Some(i + off);
                        break;
                    }
                }
                _ => {}
            }
        }
        match end.and_then(|e| serde_json::from_str::<Value>(&text[i..=e]).ok().map(|v| (e, v))) {
            Some((e, v)) => {
                out.push(v);
                i = e + 1;
            }
            None => i += 1,
        }
    }
    out
}

/// Every well-formed action in the text, in order. Malformed action objects
/// are skipped.
pub fn parse_actions(text: &str) -> Vec<Action> {
    json_objects(text)
        .into_iter()
        .filter(|v| v.get("action").is_some_and(Value::is_string))
        .filter_map(|v| serde_json::from_value(v).ok())
        .collect()
}

/// Parses a policy's text into an action.
pub fn parse_action(text: &str) -> Result<Action, String> {
    let v = extract_json_object(text, |v| v.get("action").is_some_and(Value::is_string))
        .ok_or_else(|| "no JSON object with an \"action\" key found".to_string())?;
    serde_json::from_value(v).map_err(|e| format!("malformed action: {e}"))
}
