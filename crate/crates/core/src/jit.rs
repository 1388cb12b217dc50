//! Just-in-time context injection.
//!
//! A professional agent never sees the whole primitive library. The selector
//! looks only at the compact `(name, description)` index, picks a subset for
//! the current instruction, and only that subset's full schemas are rendered
//! into the agent's context.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::action::{extract_json_object, AgentRole};
use crate::policy::{DecisionPoint, ModelRequest, Policy, PolicyError, TranscriptEntry, Usage};
use crate::registry::{CompactIndexEntry, Registry};

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("selection policy failed: {0}")]
    PolicyFailure(#[from] PolicyError),
    #[error("unknown primitive `{0}`")]
    UnknownName(String),
    #[error("instruction is empty")]
    EmptyInstruction,
}

/// Words too common to signal relevance.
const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "in", "into", "is", "it",
    "of", "on", "or", "the", "to", "using", "with",
];

/// Splits on non-alphanumerics and case-folds. No stemming.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn content_tokens(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect()
}

/// Score = number of instruction tokens (with repetition) that occur anywhere
/// in the entry's name or description. Sorted by score descending, then name.
pub fn lexical_rank(instruction: &str, index: &[CompactIndexEntry], k: usize) -> Vec<(String, usize)> {
    let query = content_tokens(instruction);
    let mut scored: Vec<(String, usize)> = index
        .iter()
        .map(|e| {
            let vocab: BTreeSet<String> = content_tokens(&e.name)
                .into_iter()
                .chain(content_tokens(&e.description))
                .collect();
            let score = query.iter().filter(|t| vocab.contains(*t)).count();
            (e.name.clone(), score)
        })
        .collect();
    scored.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k.max(1));
    scored
}

/// Index names quoted verbatim in the instruction (bounded by non-identifier chars).
pub fn mentioned_names(instruction: &str, index: &[CompactIndexEntry]) -> BTreeSet<String> {
    let is_ident = |c: char| c.is_ascii_alphanumeric() || c == '_';
    let words: BTreeSet<&str> = instruction.split(|c: char| !is_ident(c)).collect();
    index
        .iter()
        .filter(|e| words.contains(e.name.as_str()))
        .map(|e| e.name.clone())
        .collect()
}

pub enum SelectionPolicy<'a> {
    /// Token-overlap ranking; `max_k` caps the number of selected primitives.
    Lexical { max_k: Option<usize> },
    /// One model call at the `select_tools` decision point.
    Model {
        policy: &'a mut dyn Policy,
        agent: AgentRole,
    },
    /// Select the whole index (JIT disabled).
    All,
}

pub struct SelectionRequest<'a> {
    pub instruction: String,
    pub index: Vec<CompactIndexEntry>,
    pub policy: SelectionPolicy<'a>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Selected names in lexicographic order.
    pub selected_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    pub injected_context: String,
}

/// Outcome of a selection, with the usage of the model call when one was made.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub result: SelectionResult,
    pub usage: Option<Usage>,
}

pub fn render_injection<'a, I>(selected: I, registry: &Registry) -> Result<String, SelectionError>
where
    I: IntoIterator<Item = &'a str>,
{
    let names: BTreeSet<&str> = selected.into_iter().collect();
    let mut out = String::new();
    for name in names {
        let card = registry
            .lookup(name)
            .map_err(|_| SelectionError::UnknownName(name.to_string()))?;
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(&card.render());
    }
    Ok(out)
}

pub fn selector_prompt(index: &[CompactIndexEntry]) -> String {
    let mut s = String::from(
        "Select the primitives needed for the instruction. Reply with a JSON object \
         {\"selected\": [names], \"rationale\": text}. Choose only names from this index:\n",
    );
    for e in index {
        s.push_str(&e.render());
    }
    s
}

fn parse_model_selection(content: &str) -> (Vec<String>, Option<String>) {
    if let Some(v) = extract_json_object(content, |v| v.get("selected").is_some()) {
        let names = v["selected"]
            .as_array()
            .map(|a| a.iter().filter_map(Value::as_str).map(str::to_string).collect())
            .unwrap_or_default();
        let rationale = v.get("rationale").and_then(Value::as_str).map(str::to_string);
        return (names, rationale);
    }
    if let Ok(Value::Array(a)) = serde_json::from_str::<Value>(content.trim()) {
        return (
            a.iter().filter_map(Value::as_str).map(str::to_string).collect(),
            None,
        );
    }
    let names = content
        .split([',', '\n'])
        .map(|s| s.trim_matches(|c: char| c == '-' || c == '`' || c == '*' || c.is_whitespace()))
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    (names, None)
}

pub fn select_tools(request: SelectionRequest<'_>, registry: &Registry) -> Result<Selection, SelectionError> {
    if request.instruction.trim().is_empty() {
        return Err(SelectionError::EmptyInstruction);
    }
    for e in &request.index {
        if !registry.contains(&e.name) {
            return Err(SelectionError::UnknownName(e.name.clone()));
        }
    }
    let in_index: BTreeSet<&str> = request.index.iter().map(|e| e.name.as_str()).collect();
    let mut chosen: BTreeSet<String> = mentioned_names(&request.instruction, &request.index);
    let mut rationale = None;
    let mut usage = None;

    match request.policy {
        SelectionPolicy::All => chosen.extend(in_index.iter().map(|s| s.to_string())),
        SelectionPolicy::Lexical { max_k } => {
            let k = max_k.unwrap_or(request.index.len()).max(1);
            chosen.extend(
                lexical_rank(&request.instruction, &request.index, k)
                    .into_iter()
                    .filter(|(_, score)| *score > 0)
                    .map(|(name, _)| name),
            );
        }
        SelectionPolicy::Model { policy, agent } => {
            let req = ModelRequest {
                agent,
                system_context: selector_prompt(&request.index),
                transcript: vec![TranscriptEntry::new("Supervisor", request.instruction.clone())],
                decision_point: DecisionPoint::SelectTools,
            };
            let resp = policy.complete(&req)?;
            usage = Some(resp.usage);
            let (names, why) = parse_model_selection(&resp.content);
            for n in names {
                if !in_index.contains(n.as_str()) {
                    return Err(SelectionError::UnknownName(n));
                }
                chosen.insert(n);
            }
            rationale = why;
        }
    }

    let injected_context = render_injection(chosen.iter().map(String::as_str), registry)?;
    Ok(Selection {
        result: SelectionResult {
            selected_names: chosen.into_iter().collect(),
            rationale,
            injected_context,
        },
        usage,
    })
}

/// Per-name lexical scores for the whole index (diagnostics and tests).
pub fn score_table(instruction: &str, index: &[CompactIndexEntry]) -> BTreeMap<String, usize> {
    lexical_rank(instruction, index, index.len().max(1))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{ScriptRecord, ScriptedPolicy};
    use crate::registry::{Family, PrimitiveCard};

    fn card(name: &str, desc: &str, schema: &str) -> PrimitiveCard {
        PrimitiveCard {
            name: name.into(),
            module: "tool_lib.fsl".into(),
            description: desc.into(),
            detailed_schema: schema.into(),
            family: Family::Processing,
            command_template: None,
            extra: Default::default(),
        }
    }

    fn fsl_registry() -> Registry {
        Registry::from_cards([
            card(
                "fsl_bet_t1w",
                "Performs structural MRI skull stripping using FSL BET, producing a brain-extracted T1w image and brain mask.",
                "BET_SCHEMA",
            ),
            card(
                "fsl_fast",
                "Performs structural MRI tissue segmentation using FSL FAST, producing CSF/GM/WM maps and a hard segmentation for QC.",
                "FAST_SCHEMA",
            ),
            card(
                "fsl_slicetimer",
                "Performs slice-timing correction on fMRI data using FSL Slicetimer.",
                "SLICETIMER_SCHEMA",
            ),
        ])
        .unwrap()
    }

    #[test]
    fn skull_strip_selects_bet() {
        let reg = fsl_registry();
        // Hand replay: query tokens {skull, strip, t1w, images}; bet vocab holds
        // skull and t1w -> 2; fast and slicetimer share none -> 0.
        let scores = score_table("skull strip the T1w images", &reg.compact_index());
        assert_eq!(scores["fsl_bet_t1w"], 2);
        assert_eq!(scores["fsl_fast"], 0);
        assert_eq!(scores["fsl_slicetimer"], 0);

        let sel = select_tools(
            SelectionRequest {
                instruction: "skull strip the T1w images".into(),
                index: reg.compact_index(),
                policy: SelectionPolicy::Lexical { max_k: None },
            },
            &reg,
        )
        .unwrap();
        assert_eq!(sel.result.selected_names, ["fsl_bet_t1w"]);
        assert!(sel.result.injected_context.contains("BET_SCHEMA"));
        assert!(!sel.result.injected_context.contains("FAST_SCHEMA"));
    }

    #[test]
    fn verbatim_name_is_forced() {
        let reg = fsl_registry();
        let sel = select_tools(
            SelectionRequest {
                instruction: "run fsl_slicetimer before anything else".into(),
                index: reg.compact_index(),
                policy: SelectionPolicy::Lexical { max_k: Some(1) },
            },
            &reg,
        )
        .unwrap();
        assert!(sel.result.selected_names.contains(&"fsl_slicetimer".to_string()));
    }

    fn selection_script(response: &str) -> ScriptedPolicy {
        ScriptedPolicy::new(vec![ScriptRecord {
            agent: AgentRole::Processing,
            decision_point: DecisionPoint::SelectTools,
            pattern: String::new(),
            response: response.into(),
            usage: Usage::default(),
            repeat: false,
        }])
    }

    #[test]
    fn model_policy_unknown_name_rejected() {
        let reg = fsl_registry();
        let mut p = selection_script(r#"{"selected": ["fsl_fast", "nonexistent_tool"]}"#);
        let err = select_tools(
            SelectionRequest {
                instruction: "segment tissues".into(),
                index: reg.compact_index(),
                policy: SelectionPolicy::Model {
                    policy: &mut p,
                    agent: AgentRole::Processing,
                },
            },
            &reg,
        )
        .unwrap_err();
        assert!(matches!(err, SelectionError::UnknownName(n) if n == "nonexistent_tool"));
    }

    #[test]
    fn model_policy_selection_and_rationale() {
        let reg = fsl_registry();
        let mut p = selection_script(r#"{"selected": ["fsl_fast"], "rationale": "segmentation"}"#);
        let sel = select_tools(
            SelectionRequest {
                instruction: "segment tissues".into(),
                index: reg.compact_index(),
                policy: SelectionPolicy::Model {
                    policy: &mut p,
                    agent: AgentRole::Processing,
                },
            },
            &reg,
        )
        .unwrap();
        assert_eq!(sel.result.selected_names, ["fsl_fast"]);
        assert_eq!(sel.result.rationale.as_deref(), Some("segmentation"));
        assert!(sel.usage.is_some());

        let mut failing = ScriptedPolicy::new(vec![]);
        let err = select_tools(
            SelectionRequest {
                instruction: "segment".into(),
                index: reg.compact_index(),
                policy: SelectionPolicy::Model {
                    policy: &mut failing,
                    agent: AgentRole::Processing,
                },
            },
            &reg,
        )
        .unwrap_err();
        assert!(matches!(err, SelectionError::PolicyFailure(_)));
    }

    #[test]
    fn plain_list_responses_parse() {
        assert_eq!(parse_model_selection(r#"["a","b"]"#).0, ["a", "b"]);
        assert_eq!(parse_model_selection("- a\n- `b`").0, ["a", "b"]);
    }

    #[test]
    fn index_must_resolve() {
        let reg = fsl_registry();
        let mut idx = reg.compact_index();
        idx.push(CompactIndexEntry {
            name: "ghost".into(),
            description: "x".into(),
        });
        assert!(matches!(
            select_tools(
                SelectionRequest {
                    instruction: "x".into(),
                    index: idx,
                    policy: SelectionPolicy::All
                },
                &reg
            ),
            Err(SelectionError::UnknownName(_))
        ));
    }

    #[test]
    fn rank_ties_and_monotonicity() {
        let idx = vec![
            CompactIndexEntry { name: "zeta".into(), description: "alpha".into() },
            CompactIndexEntry { name: "beta".into(), description: "gamma".into() },
            CompactIndexEntry { name: "alpha_tool".into(), description: "delta".into() },
        ];
        let r = lexical_rank("nothing relevant", &idx, 3);
        assert_eq!(r.iter().map(|x| x.0.as_str()).collect::<Vec<_>>(), ["alpha_tool", "beta", "zeta"]);
        let r = lexical_rank("gamma gamma gamma", &idx, 3);
        assert_eq!(r[0], ("beta".to_string(), 3));
        assert_eq!(lexical_rank("x", &idx, 10).len(), 3);
    }

    #[test]
    fn injection_rendering() {
        let reg = fsl_registry();
        assert_eq!(render_injection(std::iter::empty(), &reg).unwrap(), "");
        assert_eq!(
            render_injection(["fsl_fast"], &reg).unwrap(),
            reg.lookup("fsl_fast").unwrap().render()
        );
        assert!(matches!(
            render_injection(["nope"], &reg),
            Err(SelectionError::UnknownName(_))
        ));
    }
}
