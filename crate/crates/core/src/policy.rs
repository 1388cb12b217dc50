//! Decision sources: a scripted policy for offline runs and a live
//! chat-completions adapter, plus session recording for later replay.

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::ops::{Add, AddAssign};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::action::{parse_action, Action, AgentRole};
use crate::ledger::TraceStep;

pub const ENDPOINT_ENV: &str = "NEXUS_MODEL_ENDPOINT";
pub const KEY_ENV: &str = "NEXUS_MODEL_KEY";

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("script exhausted: no canned response left")]
    ScriptExhausted,
    #[error("script mismatch: expected {expected}, got {got}")]
    ScriptMismatch { expected: String, got: String },
    #[error("transport error: {0}")]
    TransportError(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("I/O failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("script parse error at line {line}: {reason}")]
    ScriptParse { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionPoint {
    SelectTools,
    ReactStep,
    VisualJudge,
}

impl fmt::Display for DecisionPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecisionPoint::SelectTools => "select_tools",
            DecisionPoint::ReactStep => "react_step",
            DecisionPoint::VisualJudge => "visual_judge",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub speaker: String,
    pub text: String,
}

impl TranscriptEntry {
    pub fn new(speaker: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            speaker: speaker.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub agent: AgentRole,
    pub system_context: String,
    pub transcript: Vec<TranscriptEntry>,
    pub decision_point: DecisionPoint,
}

impl ModelRequest {
    /// Flat text of the whole request; script patterns are matched against it.
    pub fn rendered(&self) -> String {
        let mut out = self.system_context.clone();
        for t in &self.transcript {
            out.push('\n');
            out.push_str(&t.speaker);
            out.push_str(": ");
            out.push_str(&t.text);
        }
        out
    }

    fn check(&self) -> Result<(), PolicyError> {
        if self.decision_point == DecisionPoint::ReactStep && self.transcript.is_empty() {
            return Err(PolicyError::InvalidRequest(
                "react_step requests need a non-empty transcript".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cost: f64,
}

impl Add for Usage {
    type Output = Usage;

    fn add(self, rhs: Usage) -> Usage {
        Usage {
            prompt_tokens: self.prompt_tokens + rhs.prompt_tokens,
            completion_tokens: self.completion_tokens + rhs.completion_tokens,
            cost: self.cost + rhs.cost,
        }
    }
}

impl AddAssign for Usage {
    fn add_assign(&mut self, rhs: Usage) {
        *self = *self + rhs;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub content: String,
    pub parsed_action: Option<Action>,
    pub usage: Usage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation_id: Option<String>,
}

impl ModelResponse {
    pub fn from_content(content: String, usage: Usage) -> Self {
        let parsed_action = parse_action(&content).ok();
        Self {
            content,
            parsed_action,
            usage,
            correlation_id: None,
        }
    }
}

/// The decision source π.
pub trait Policy: Send {
    fn complete(&mut self, request: &ModelRequest) -> Result<ModelResponse, PolicyError>;
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn complete(&mut self, request: &ModelRequest) -> Result<ModelResponse, PolicyError> {
        (**self).complete(request)
    }
}

pub fn complete(request: &ModelRequest, backend: &mut dyn Policy) -> Result<ModelResponse, PolicyError> {
    backend.complete(request)
}

/// One line of a script file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRecord {
    pub agent: AgentRole,
    pub decision_point: DecisionPoint,
    /// Substring that must occur in the rendered request; empty matches anything.
    #[serde(rename = "match", default)]
    pub pattern: String,
    pub response: String,
    #[serde(default)]
    pub usage: Usage,
    /// A repeating record is never consumed.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub repeat: bool,
}

impl ScriptRecord {
    fn key(&self) -> String {
        if self.pattern.is_empty() {
            format!("({}, {})", self.agent, self.decision_point)
        } else {
            format!(
                "({}, {}, contains {:?})",
                self.agent, self.decision_point, self.pattern
            )
        }
    }

    fn matches(&self, request: &ModelRequest) -> bool {
        self.agent == request.agent
            && self.decision_point == request.decision_point
            && (self.pattern.is_empty() || request.rendered().contains(&self.pattern))
    }
}

pub fn parse_script(text: &str) -> Result<Vec<ScriptRecord>, PolicyError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PolicyError::ScriptParse {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn write_script(path: &Path, records: &[ScriptRecord]) -> Result<(), PolicyError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("script records serialize"));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Replays canned responses strictly in file order. The record at the head of
/// the queue must match the incoming request.
#[derive(Debug, Clone, Default)]
pub struct ScriptedPolicy {
    queue: VecDeque<ScriptRecord>,
    served: usize,
}

impl ScriptedPolicy {
    pub fn new(records: Vec<ScriptRecord>) -> Self {
        Self {
            queue: records.into(),
            served: 0,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, PolicyError> {
        Ok(Self::new(parse_script(&fs::read_to_string(path)?)?))
    }

    pub fn remaining(&self) -> usize {
        self.queue.len()
    }

    pub fn served(&self) -> usize {
        self.served
    }
}

impl Policy for ScriptedPolicy {
    fn complete(&mut self, request: &ModelRequest) -> Result<ModelResponse, PolicyError> {
        request.check()?;
        let head = self.queue.front().ok_or(PolicyError::ScriptExhausted)?;
        if !head.matches(request) {
            return Err(PolicyError::ScriptMismatch {
                expected: head.key(),
                got: format!("({}, {})", request.agent, request.decision_point),
            });
        }
        let record = if head.repeat {
            head.clone()
        } else {
            self.queue.pop_front().expect("head exists")
        };
        self.served += 1;
        Ok(ModelResponse::from_content(record.response, record.usage))
    }
}

/// Per-1k-token prices used to turn token counts into cost.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PriceTable {
    pub prompt_per_1k: f64,
    pub completion_per_1k: f64,
}

impl PriceTable {
    pub fn cost(&self, prompt_tokens: u64, completion_tokens: u64) -> f64 {
        prompt_tokens as f64 / 1000.0 * self.prompt_per_1k
            + completion_tokens as f64 / 1000.0 * self.completion_per_1k
    }
}

/// Provider-agnostic chat-completions client.
pub struct LivePolicy {
    endpoint: String,
    key: Option<String>,
    /// Opaque backend options merged into the request body (model, decoding).
    pub options: serde_json::Map<String, Value>,
    pub prices: PriceTable,
    client: reqwest::blocking::Client,
    calls: u64,
}

impl LivePolicy {
    pub fn new(endpoint: impl Into<String>, key: Option<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            key,
            options: serde_json::Map::new(),
            prices: PriceTable::default(),
            client: reqwest::blocking::Client::new(),
            calls: 0,
        }
    }

    pub fn from_env() -> Result<Self, PolicyError> {
        let endpoint = std::env::var(ENDPOINT_ENV)
            .map_err(|_| PolicyError::TransportError(format!("{ENDPOINT_ENV} is not set")))?;
        Ok(Self::new(endpoint, std::env::var(KEY_ENV).ok()))
    }

    pub fn request_body(&self, request: &ModelRequest) -> Value {
        let mut messages = vec![json!({"role": "system", "content": request.system_context})];
        for t in &request.transcript {
            let role = if t.speaker == request.agent.as_str() {
                "assistant"
            } else {
                "user"
            };
            messages.push(json!({"role": role, "content": format!("[{}] {}", t.speaker, t.text)}));
        }
        let mut body = self.options.clone();
        body.insert("messages".into(), Value::Array(messages));
        Value::Object(body)
    }
}

/// Extracts content and usage from a chat-completions response body.
pub fn parse_chat_response(body: &Value, prices: &PriceTable) -> Result<ModelResponse, PolicyError> {
    let content = body
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| PolicyError::TransportError("response has no choices[0].message.content".into()))?;
    let prompt = body.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0);
    let completion = body
        .pointer("/usage/completion_tokens")
        .and_then(Value::as_u64)
        .unwrap_or(0);
    let mut resp = ModelResponse::from_content(
        content.to_string(),
        Usage {
            prompt_tokens: prompt,
            completion_tokens: completion,
            cost: prices.cost(prompt, completion),
        },
    );
    resp.correlation_id = body.get("id").and_then(Value::as_str).map(str::to_string);
    Ok(resp)
}

impl Policy for LivePolicy {
    fn complete(&mut self, request: &ModelRequest) -> Result<ModelResponse, PolicyError> {
        request.check()?;
        let mut builder = self.client.post(&self.endpoint).json(&self.request_body(request));
        if let Some(key) = &self.key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder
            .send()
            .map_err(|e| PolicyError::TransportError(e.to_string()))?;
        let status = resp.status();
        let body: Value = resp
            .json()
            .map_err(|e| PolicyError::TransportError(e.to_string()))?;
        if !status.is_success() {
            return Err(PolicyError::TransportError(format!("HTTP {status}: {body}")));
        }
        self.calls += 1;
        let mut out = parse_chat_response(&body, &self.prices)?;
        if out.correlation_id.is_none() {
            out.correlation_id = Some(format!("call-{}", self.calls));
        }
        Ok(out)
    }
}

/// Wraps a backend and keeps every exchange so the session can be replayed.
pub struct RecordingPolicy<P> {
    inner: P,
    records: Vec<ScriptRecord>,
}

impl<P: Policy> RecordingPolicy<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            records: Vec::new(),
        }
    }

    pub fn records(&self) -> &[ScriptRecord] {
        &self.records
    }

    pub fn into_inner(self) -> P {
        self.inner
    }

    /// Writes the session as a script file. Patterns are left empty so replay
    /// depends only on call order, agent and decision point.
    pub fn record_session(&self, path: &Path) -> Result<PathBuf, PolicyError> {
        write_script(path, &self.records)?;
        Ok(path.to_path_buf())
    }
}

impl<P: Policy> Policy for RecordingPolicy<P> {
    fn complete(&mut self, request: &ModelRequest) -> Result<ModelResponse, PolicyError> {
        let resp = self.inner.complete(request)?;
        self.records.push(ScriptRecord {
            agent: request.agent,
            decision_point: request.decision_point,
            pattern: String::new(),
            response: resp.content.clone(),
            usage: resp.usage,
            repeat: false,
        });
        Ok(resp)
    }
}

/// Component-wise usage totals over a trace.
pub fn accumulate_usage<'a>(steps: impl IntoIterator<Item = &'a TraceStep>) -> Usage {
    steps
        .into_iter()
        .filter_map(|s| s.usage)
        .fold(Usage::default(), |acc, u| acc + u)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(agent: AgentRole, dp: DecisionPoint, text: &str) -> ModelRequest {
        ModelRequest {
            agent,
            system_context: "ctx".into(),
            transcript: vec![TranscriptEntry::new("Supervisor", text)],
            decision_point: dp,
        }
    }

    fn rec(agent: AgentRole, pattern: &str, response: &str) -> ScriptRecord {
        ScriptRecord {
            agent,
            decision_point: DecisionPoint::ReactStep,
            pattern: pattern.into(),
            response: response.into(),
            usage: Usage {
                prompt_tokens: 100,
                completion_tokens: 10,
                cost: 0.01,
            },
            repeat: false,
        }
    }

    #[test]
    fn scripted_match_returns_canned_action() {
        let body = r#"{"action":"synthesize_program","path":"scripts/bet.sh","source":"sh tool_lib/fsl_bet_t1w.sh $1","declared_primitives":["fsl_bet_t1w"],"entry_kind":"per_subject"}"#;
        let mut p = ScriptedPolicy::new(vec![rec(AgentRole::Processing, "skull strip", body)]);
        let r = p
            .complete(&req(AgentRole::Processing, DecisionPoint::ReactStep, "please skull strip all T1w"))
            .unwrap();
        assert!(matches!(r.parsed_action, Some(Action::SynthesizeProgram { .. })));
        assert!(matches!(
            p.complete(&req(AgentRole::Processing, DecisionPoint::ReactStep, "x")),
            Err(PolicyError::ScriptExhausted)
        ));
    }

    #[test]
    fn scripted_mismatch_and_empty() {
        let mut p = ScriptedPolicy::new(vec![rec(AgentRole::Processing, "skull strip", "{}")]);
        let err = p
            .complete(&req(AgentRole::QualityControl, DecisionPoint::ReactStep, "skull strip"))
            .unwrap_err();
        assert!(matches!(err, PolicyError::ScriptMismatch { .. }), "{err}");
        let err = p
            .complete(&req(AgentRole::Processing, DecisionPoint::ReactStep, "segment"))
            .unwrap_err();
        assert!(matches!(err, PolicyError::ScriptMismatch { .. }));

        let mut empty = ScriptedPolicy::new(parse_script("").unwrap());
        assert!(matches!(
            empty.complete(&req(AgentRole::Supervisor, DecisionPoint::ReactStep, "go")),
            Err(PolicyError::ScriptExhausted)
        ));
    }

    #[test]
    fn react_step_needs_transcript() {
        let mut p = ScriptedPolicy::new(vec![rec(AgentRole::Supervisor, "", "{}")]);
        let mut r = req(AgentRole::Supervisor, DecisionPoint::ReactStep, "");
        r.transcript.clear();
        assert!(matches!(p.complete(&r), Err(PolicyError::InvalidRequest(_))));
    }

    #[test]
    fn repeat_records_are_not_consumed() {
        let mut r = rec(AgentRole::Supervisor, "", r#"{"action":"read_file","path":"x"}"#);
        r.repeat = true;
        let mut p = ScriptedPolicy::new(vec![r]);
        for _ in 0..10 {
            p.complete(&req(AgentRole::Supervisor, DecisionPoint::ReactStep, "go")).unwrap();
        }
        assert_eq!(p.remaining(), 1);
        assert_eq!(p.served(), 10);
    }

    #[test]
    fn script_line_errors_carry_line_number() {
        let err = parse_script("\n{\"agent\":\"Supervisor\"}\n").unwrap_err();
        assert!(matches!(err, PolicyError::ScriptParse { line: 2, .. }));
    }

    #[test]
    fn record_then_replay_is_identical() {
        let inner = ScriptedPolicy::new(vec![
            rec(AgentRole::Supervisor, "", r#"{"action":"read_file","path":"a"}"#),
            rec(AgentRole::Processing, "", "free text"),
            ScriptRecord {
                usage: Usage {
                    prompt_tokens: 7,
                    completion_tokens: 3,
                    cost: 0.000123,
                },
                ..rec(AgentRole::QualityControl, "", r#"{"verdict":"ACCEPTABLE"}"#)
            },
        ]);
        let mut recorder = RecordingPolicy::new(inner);
        let reqs = [
            req(AgentRole::Supervisor, DecisionPoint::ReactStep, "a"),
            req(AgentRole::Processing, DecisionPoint::ReactStep, "b"),
            req(AgentRole::QualityControl, DecisionPoint::ReactStep, "c"),
        ];
        let live: Vec<_> = reqs.iter().map(|r| recorder.complete(r).unwrap()).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = recorder.record_session(&dir.path().join("session.jsonl")).unwrap();

        let mut replay = ScriptedPolicy::from_file(&path).unwrap();
        let replayed: Vec<_> = reqs.iter().map(|r| replay.complete(r).unwrap()).collect();
        assert_eq!(live, replayed);
        assert!(matches!(
            replay.complete(&reqs[0]),
            Err(PolicyError::ScriptExhausted)
        ));

        let recorded_total = parse_script(&fs::read_to_string(&path).unwrap())
            .unwrap()
            .iter()
            .fold(Usage::default(), |a, r| a + r.usage);
        let replay_total = replayed.iter().fold(Usage::default(), |a, r| a + r.usage);
        assert_eq!(recorded_total, replay_total);
    }

    #[test]
    fn chat_response_parsing_and_pricing() {
        let body = json!({
            "id": "cmpl-1",
            "choices": [{"message": {"role": "assistant", "content": "{\"action\":\"read_file\",\"path\":\"p\"}"}}],
            "usage": {"prompt_tokens": 2000, "completion_tokens": 500}
        });
        let prices = PriceTable {
            prompt_per_1k: 0.002,
            completion_per_1k: 0.01,
        };
        let r = parse_chat_response(&body, &prices).unwrap();
        assert_eq!(r.usage.prompt_tokens, 2000);
        assert!((r.usage.cost - 0.009).abs() < 1e-12);
        assert_eq!(r.correlation_id.as_deref(), Some("cmpl-1"));
        assert!(r.parsed_action.is_some());
        assert!(parse_chat_response(&json!({"choices": []}), &prices).is_err());
    }

    #[test]
    fn live_request_body_shape() {
        let mut p = LivePolicy::new("http://localhost:9/v1/chat/completions", None);
        p.options.insert("model".into(), json!("m"));
        let body = p.request_body(&req(AgentRole::Processing, DecisionPoint::ReactStep, "hi"));
        assert_eq!(body["model"], "m");
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["role"], "user");
    }
}
