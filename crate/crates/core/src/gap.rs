//! Structured control state emitted by the sufficiency judge: a boolean
//! sufficiency decision plus an ordered list of gap items.
//!
//! Wire format:
//!
//! ```json
//! {"sufficient": false, "gap items": [{"category": "bridge entity", "target": "...", "slot": "...", "description": "..."}]}
//! ```
//!
//! The parser also accepts `gap_items`, underscore or mixed-case category
//! spellings, and prose around the object.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Map, Value};
use thiserror::Error;
use tracing::debug;

use crate::json_extract::first_json_object;

const GAP_KEYS: [&str; 2] = ["gap items", "gap_items"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GapCategory {
    BridgeEntity,
    Attribute,
    Relation,
    EvidenceSpan,
    Other,
}

impl GapCategory {
    pub const ALL: [GapCategory; 5] = [
        GapCategory::BridgeEntity,
        GapCategory::Attribute,
        GapCategory::Relation,
        GapCategory::EvidenceSpan,
        GapCategory::Other,
    ];

    /// Prompt-facing spelling, e.g. `"bridge entity"`.
    pub fn surface(self) -> &'static str {
        match self {
            GapCategory::BridgeEntity => "bridge entity",
            GapCategory::Attribute => "attribute",
            GapCategory::Relation => "relation",
            GapCategory::EvidenceSpan => "evidence span",
            GapCategory::Other => "other",
        }
    }

    /// Identifier spelling, e.g. `"bridge_entity"`.
    pub fn ident(self) -> &'static str {
        match self {
            GapCategory::BridgeEntity => "bridge_entity",
            GapCategory::Attribute => "attribute",
            GapCategory::Relation => "relation",
            GapCategory::EvidenceSpan => "evidence_span",
            GapCategory::Other => "other",
        }
    }

    /// Case-folds and treats `_`, `-` and runs of whitespace alike.
    pub fn normalize(raw: &str) -> Option<GapCategory> {
        let folded = raw
            .to_lowercase()
            .replace(['_', '-'], " ")
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ");
        GapCategory::ALL.into_iter().find(|c| c.surface() == folded)
    }
}

impl fmt::Display for GapCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.ident())
    }
}

impl Serialize for GapCategory {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.surface())
    }
}

impl<'de> Deserialize<'de> for GapCategory {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        Ok(GapCategory::normalize(&raw).unwrap_or(GapCategory::Other))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapItem {
    pub category: GapCategory,
    #[serde(default)]
    pub target: String,
    #[serde(default)]
    pub slot: String,
    #[serde(default)]
    pub description: String,
}

impl GapItem {
    pub fn new(category: GapCategory, target: &str, slot: &str, description: &str) -> Self {
        Self {
            category,
            target: target.into(),
            slot: slot.into(),
            description: description.into(),
        }
    }

    /// Usable for query construction: a complete target+slot pair or a
    /// non-empty description.
    pub fn is_usable(&self) -> bool {
        let pair = !self.target.trim().is_empty() && !self.slot.trim().is_empty();
        pair || !self.description.trim().is_empty()
    }

    pub fn to_json(&self) -> Value {
        json!({
            "category": self.category.surface(),
            "target": self.target,
            "slot": self.slot,
            "description": self.description,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GapViolation {
    NotAnObject,
    MissingCategory,
    UnknownCategory(String),
    NonStringField(&'static str),
    /// Neither a target+slot pair nor a description survives trimming.
    Unusable,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidatedGap {
    pub item: GapItem,
    pub violations: Vec<GapViolation>,
}

impl ValidatedGap {
    pub fn usable(&self) -> bool {
        !self.violations.contains(&GapViolation::Unusable)
    }
}

/// Coerces one raw gap object into a [`GapItem`]. Never fails: problems are
/// returned alongside a best-effort item.
pub fn validate_gap_item(raw: &Value) -> ValidatedGap {
    let mut violations = Vec::new();
    let empty = Map::new();
    let obj = match raw.as_object() {
        Some(o) => o,
        None => {
            violations.push(GapViolation::NotAnObject);
            &empty
        }
    };
    let mut field = |name: &'static str| -> String {
        match obj.get(name) {
            None | Some(Value::Null) => String::new(),
            Some(Value::String(s)) => s.clone(),
            Some(other) => {
                violations.push(GapViolation::NonStringField(name));
                other.to_string()
            }
        }
    };
    let category_raw = obj.get("category").map(|v| match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    });
    let target = field("target");
    let slot = field("slot");
    let description = field("description");
    let category = match category_raw {
        None => {
            violations.push(GapViolation::MissingCategory);
            GapCategory::Other
        }
        Some(c) => GapCategory::normalize(&c).unwrap_or_else(|| {
            debug!(category = %c, "unknown gap category folded to other");
            violations.push(GapViolation::UnknownCategory(c));
            GapCategory::Other
        }),
    };
    let item = GapItem {
        category,
        target,
        slot,
        description,
    };
    if !item.is_usable() {
        violations.push(GapViolation::Unusable);
    }
    ValidatedGap { item, violations }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no JSON object found")]
    NoObject,
    #[error("missing required key {0:?}")]
    MissingKey(&'static str),
    #[error("wrong type for {0:?}")]
    BadType(&'static str),
    #[error("sufficient=true requires an empty gap list")]
    ConstraintViolation,
}

/// `(s, G)` with the invariant `s => G is empty` enforced at construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JudgeVerdict {
    sufficient: bool,
    gap_items: Vec<GapItem>,
}

impl JudgeVerdict {
    pub fn sufficient() -> Self {
        Self {
            sufficient: true,
            gap_items: Vec::new(),
        }
    }

    pub fn insufficient(gap_items: Vec<GapItem>) -> Self {
        Self {
            sufficient: false,
            gap_items,
        }
    }

    pub fn new(sufficient: bool, gap_items: Vec<GapItem>) -> Result<Self, ParseError> {
        if sufficient && !gap_items.is_empty() {
            return Err(ParseError::ConstraintViolation);
        }
        Ok(Self {
            sufficient,
            gap_items,
        })
    }

    pub fn is_sufficient(&self) -> bool {
        self.sufficient
    }

    pub fn gap_items(&self) -> &[GapItem] {
        &self.gap_items
    }

    pub fn to_json(&self) -> Value {
        json!({
            "sufficient": self.sufficient,
            "gap items": self.gap_items.iter().map(GapItem::to_json).collect::<Vec<_>>(),
        })
    }

    /// Compact single-line wire form, as a judge would emit it.
    pub fn to_wire(&self) -> String {
        self.to_json().to_string()
    }
}

impl Serialize for JudgeVerdict {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for JudgeVerdict {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(d)?;
        let map = value
            .as_object()
            .ok_or_else(|| serde::de::Error::custom("verdict must be an object"))?;
        verdict_from_object(map).map(|p| p.verdict).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedVerdict {
    pub verdict: JudgeVerdict,
    /// Per-gap problems, indexed by position in the verdict's gap list.
    pub warnings: Vec<(usize, GapViolation)>,
}

/// Parses a raw judge/teacher completion.
pub fn parse_verdict(raw: &str) -> Result<JudgeVerdict, ParseError> {
    parse_verdict_detailed(raw).map(|p| p.verdict)
}

pub fn parse_verdict_detailed(raw: &str) -> Result<ParsedVerdict, ParseError> {
    let map = first_json_object(raw).ok_or(ParseError::NoObject)?;
    verdict_from_object(&map)
}

fn verdict_from_object(map: &Map<String, Value>) -> Result<ParsedVerdict, ParseError> {
    let sufficient = match map.get("sufficient") {
        None => return Err(ParseError::MissingKey("sufficient")),
        Some(Value::Bool(b)) => *b,
        Some(_) => return Err(ParseError::BadType("sufficient")),
    };
    let gaps = GAP_KEYS
        .iter()
        .find_map(|k| map.get(*k))
        .ok_or(ParseError::MissingKey("gap items"))?;
    let gaps = gaps.as_array().ok_or(ParseError::BadType("gap items"))?;
    let mut items = Vec::with_capacity(gaps.len());
    let mut warnings = Vec::new();
    for (i, raw_gap) in gaps.iter().enumerate() {
        if !raw_gap.is_object() {
            return Err(ParseError::BadType("gap items"));
        }
        let v = validate_gap_item(raw_gap);
        warnings.extend(v.violations.into_iter().map(|w| (i, w)));
        items.push(v.item);
    }
    Ok(ParsedVerdict {
        verdict: JudgeVerdict::new(sufficient, items)?,
        warnings,
    })
}
