//! Primitive cards and the registry that indexes them.
//!
//! A card describes one atomic domain operation: its identifier, the module or
//! command path it is invoked through, a one-line description, and a free-text
//! schema covering parameters, outputs and side effects. Cards live one per file
//! under `cards/<family>/<name>.json`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("card is missing required field `{0}`")]
    MissingField(String),
    #[error("invalid primitive name `{0}` (expected [a-z0-9_]+)")]
    InvalidName(String),
    #[error("card `{0}` has an empty detailed_schema")]
    EmptySchema(String),
    #[error("card `{name}` has unknown family `{family}`")]
    UnknownFamily { name: String, family: String },
    #[error("duplicate primitive name `{0}`")]
    DuplicateName(String),
    #[error("failed to parse card file {path}: {reason}")]
    ParseError { path: PathBuf, reason: String },
    #[error("primitive `{0}` not found")]
    NotFound(String),
}

/// The three primitive libraries, each owned by one professional agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Family {
    Processing,
    QC,
    Analysis,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Processing, Family::QC, Family::Analysis];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Processing => "processing",
            Family::QC => "qc",
            Family::Analysis => "analysis",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "processing" => Ok(Family::Processing),
            "qc" | "quality_control" => Ok(Family::QC),
            "analysis" | "downstream" => Ok(Family::Analysis),
            other => Err(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveCard {
    pub name: String,
    pub module: String,
    pub description: String,
    pub detailed_schema: String,
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command_template: Option<String>,
    /// Fields present in the card file that this crate does not interpret.
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub extra: Map<String, Value>,
}

impl PrimitiveCard {
    /// Full rendering used for context injection.
    pub fn render(&self) -> String {
        format!(
            "### {}\nmodule: {}\ndescription: {}\ndetailed_schema:\n{}\n",
            self.name,
            self.module,
            self.description,
            self.detailed_schema.trim_end()
        )
    }
}

/// Name/description pair; the only thing the selector sees before injection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompactIndexEntry {
    pub name: String,
    pub description: String,
}

impl CompactIndexEntry {
    pub fn render(&self) -> String {
        format!("- {}: {}\n", self.name, self.description)
    }
}

pub fn is_valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

const KNOWN_KEYS: [&str; 6] = [
    "name",
    "module",
    "description",
    "detailed_schema",
    "family",
    "command_template",
];

fn required_str(raw: &Map<String, Value>, key: &str) -> Result<String, RegistryError> {
    match raw.get(key) {
        Some(Value::String(s)) => Ok(s.clone()),
        _ => Err(RegistryError::MissingField(key.to_string())),
    }
}

/// Validates a raw card record. `default_family` is used when the record does
/// not carry a `family` key (normally inferred from the card's directory).
pub fn validate_card(
    raw: &Map<String, Value>,
    default_family: Option<Family>,
) -> Result<PrimitiveCard, RegistryError> {
    let name = required_str(raw, "name")?;
    if !is_valid_name(&name) {
        return Err(RegistryError::InvalidName(name));
    }
    let schema = match raw.get("detailed_schema") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
        Some(Value::String(_)) | None | Some(Value::Null) => {
            return Err(RegistryError::EmptySchema(name))
        }
        Some(_) => return Err(RegistryError::MissingField("detailed_schema".into())),
    };
    let module = required_str(raw, "module")?;
    let description = required_str(raw, "description")?;
    if description.trim().is_empty() {
        return Err(RegistryError::MissingField("description".into()));
    }
    let family = match raw.get("family") {
        Some(Value::String(s)) => s.parse().map_err(|family| RegistryError::UnknownFamily {
            name: name.clone(),
            family,
        })?,
        _ => default_family.ok_or_else(|| RegistryError::MissingField("family".into()))?,
    };
    let command_template = match raw.get("command_template") {
        Some(Value::String(s)) => Some(s.clone()),
        _ => None,
    };
    let extra = raw
        .iter()
        .filter(|(k, _)| !KNOWN_KEYS.contains(&k.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    Ok(PrimitiveCard {
        name,
        module,
        description,
        detailed_schema: schema,
        family,
        command_template,
        extra,
    })
}

impl From<&PrimitiveCard> for Map<String, Value> {
    fn from(card: &PrimitiveCard) -> Self {
        match serde_json::to_value(card) {
            Ok(Value::Object(mut map)) => {
                if let Some(Value::Object(extra)) = map.remove("extra") {
                    map.extend(extra);
                }
                map
            }
            _ => unreachable!("a card always serializes to an object"),
        }
    }
}

/// Immutable, name-ordered collection of cards.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    cards: BTreeMap<String, PrimitiveCard>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_cards(cards: impl IntoIterator<Item = PrimitiveCard>) -> Result<Self, RegistryError> {
        let mut map = BTreeMap::new();
        for card in cards {
            if map.contains_key(&card.name) {
                return Err(RegistryError::DuplicateName(card.name));
            }
            map.insert(card.name.clone(), card);
        }
        Ok(Self { cards: map })
    }

    pub fn lookup(&self, name: &str) -> Result<&PrimitiveCard, RegistryError> {
        self.cards
            .get(name)
            .ok_or_else(|| RegistryError::NotFound(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.cards.contains_key(name)
    }

    /// Cards in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = &PrimitiveCard> {
        self.cards.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.cards.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.cards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cards.is_empty()
    }

    pub fn compact_index(&self) -> Vec<CompactIndexEntry> {
        self.iter()
            .map(|c| CompactIndexEntry {
                name: c.name.clone(),
                description: c.description.clone(),
            })
            .collect()
    }

    pub fn list_by_family(&self, family: Family) -> Vec<&PrimitiveCard> {
        self.iter().filter(|c| c.family == family).collect()
    }

    /// Sub-registry holding only one family's cards.
    pub fn family_view(&self, family: Family) -> Registry {
        Registry {
            cards: self
                .cards
                .iter()
                .filter(|(_, c)| c.family == family)
                .map(|(k, c)| (k.clone(), c.clone()))
                .collect(),
        }
    }
}

/// Projection of the registry onto `(name, description)` pairs.
pub fn compact_index(registry: &Registry) -> Vec<CompactIndexEntry> {
    registry.compact_index()
}

pub fn list_by_family(registry: &Registry, family: Family) -> Vec<&PrimitiveCard> {
    registry.list_by_family(family)
}

fn family_from_dir(path: &Path) -> Option<Family> {
    path.parent()?.file_name()?.to_str()?.parse().ok()
}

fn read_card_file(path: &Path) -> Result<PrimitiveCard, RegistryError> {
    let parse_err = |reason: String| RegistryError::ParseError {
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(|e| parse_err(e.to_string()))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
    let Value::Object(raw) = value else {
        return Err(parse_err("card file must hold a JSON object".into()));
    };
    validate_card(&raw, family_from_dir(path))
}

pub fn load_registry<P: AsRef<Path>>(card_files: &[P]) -> Result<Registry, RegistryError> {
    let cards = card_files
        .iter()
        .map(|p| read_card_file(p.as_ref()))
        .collect::<Result<Vec<_>, _>>()?;
    Registry::from_cards(cards)
}

/// Loads every `*.json` file under `root` (recursively, sorted by path).
pub fn load_registry_dir(root: &Path) -> Result<Registry, RegistryError> {
    let mut files = Vec::new();
    collect_json(root, &mut files).map_err(|e| RegistryError::ParseError {
        path: root.to_path_buf(),
        reason: e.to_string(),
    })?;
    files.sort();
    load_registry(&files)
}

fn collect_json(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_json(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "json") {
            out.push(path);
        }
    }
    Ok(())
}
