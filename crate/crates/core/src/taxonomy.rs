//! Eight-way execution error taxonomy and the ordered rule table that maps
//! observation text onto it.

use std::fmt;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ErrorCategory {
    ToolPrimitiveMisuse,
    CodeGenExecutionError,
    StateDrift,
    InstructionViolation,
    ScalabilityResourceFailure,
    HallucinationFabrication,
    FilePathError,
    WorkflowOrchestrationError,
}

impl ErrorCategory {
    pub const ALL: [ErrorCategory; 8] = [
        ErrorCategory::ToolPrimitiveMisuse,
        ErrorCategory::CodeGenExecutionError,
        ErrorCategory::StateDrift,
        ErrorCategory::InstructionViolation,
        ErrorCategory::ScalabilityResourceFailure,
        ErrorCategory::HallucinationFabrication,
        ErrorCategory::FilePathError,
        ErrorCategory::WorkflowOrchestrationError,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::ToolPrimitiveMisuse => "ToolPrimitiveMisuse",
            ErrorCategory::CodeGenExecutionError => "CodeGenExecutionError",
            ErrorCategory::StateDrift => "StateDrift",
            ErrorCategory::InstructionViolation => "InstructionViolation",
            ErrorCategory::ScalabilityResourceFailure => "ScalabilityResourceFailure",
            ErrorCategory::HallucinationFabrication => "HallucinationFabrication",
            ErrorCategory::FilePathError => "FilePathError",
            ErrorCategory::WorkflowOrchestrationError => "WorkflowOrchestrationError",
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ErrorCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown error category `{s}`"))
    }
}

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("no rule matched and no fallback is configured")]
    Unclassifiable,
    #[error("rule table line {line}: {reason}")]
    BadRule { line: usize, reason: String },
}

#[derive(Debug, Clone)]
pub struct ErrorRule {
    pub pattern: Regex,
    pub category: ErrorCategory,
}

/// Ordered rules; the first match wins.
#[derive(Debug, Clone)]
pub struct RuleTable {
    rules: Vec<ErrorRule>,
}

/// Shipped rule table (`pattern<TAB>category`).
pub const DEFAULT_RULES_TSV: &str = include_str!("../data/error_rules.tsv");

impl RuleTable {
    /// Parses `pattern<TAB>category` lines. A header line starting with
    /// `pattern` and lines starting with `#` are skipped.
    pub fn parse_tsv(text: &str) -> Result<Self, TaxonomyError> {
        let mut rules = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("pattern\t")) {
                continue;
            }
            let (pat, cat) = line.rsplit_once('\t').ok_or(TaxonomyError::BadRule {
                line: line_no,
                reason: "expected pattern<TAB>category".into(),
            })?;
            let pattern = Regex::new(pat).map_err(|e| TaxonomyError::BadRule {
                line: line_no,
                reason: e.to_string(),
            })?;
            let category = cat.trim().parse().map_err(|reason| TaxonomyError::BadRule {
                line: line_no,
                reason,
            })?;
            rules.push(ErrorRule { pattern, category });
        }
        Ok(Self { rules })
    }

    pub fn default_rules() -> Self {
        Self::parse_tsv(DEFAULT_RULES_TSV).expect("shipped rule table parses")
    }

    pub fn rules(&self) -> &[ErrorRule] {
        &self.rules
    }

    pub fn first_match(&self, observation: &str) -> Option<ErrorCategory> {
        self.rules
            .iter()
            .find(|r| r.pattern.is_match(observation))
            .map(|r| r.category)
    }
}

impl Default for RuleTable {
    fn default() -> Self {
        Self::default_rules()
    }
}

/// Consulted only when no rule matches.
pub enum Fallback<'a> {
    None,
    Fixed(ErrorCategory),
    Policy(&'a dyn Fn(&str) -> Option<ErrorCategory>),
}

pub fn classify_error(
    observation: &str,
    rules: &RuleTable,
    fallback: &Fallback<'_>,
) -> Result<ErrorCategory, TaxonomyError> {
    if let Some(c) = rules.first_match(observation) {
        return Ok(c);
    }
    match fallback {
        Fallback::None => Err(TaxonomyError::Unclassifiable),
        Fallback::Fixed(c) => Ok(*c),
        Fallback::Policy(f) => f(observation).ok_or(TaxonomyError::Unclassifiable),
    }
}
