//! The three QA template banks, shipped verbatim as JSON data files.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PlvmError, Result};

pub const PLACEHOLDER: &str = "⟨sks⟩";

pub const POSITIVE_JSON: &str = include_str!("../../data/recognition_positive.json");
pub const NEGATIVE_JSON: &str = include_str!("../../data/recognition_negative.json");
pub const TEXT_ONLY_JSON: &str = include_str!("../../data/text_only.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    RecognitionPositive,
    RecognitionNegative,
    Attribute,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaTemplate {
    pub id: u32,
    pub kind: TemplateKind,
    pub question: String,
    /// Absent for attribute templates; their answers come from elsewhere.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TemplateId {
    pub kind: TemplateKind,
    pub id: u32,
}

impl TemplateId {
    pub fn new(kind: TemplateKind, id: u32) -> Self {
        Self { kind, id }
    }
}

#[derive(Clone, Debug)]
pub struct TemplateBank {
    pub positive: Vec<QaTemplate>,
    pub negative: Vec<QaTemplate>,
    pub attribute: Vec<QaTemplate>,
}

fn parse_bank(json: &str, kind: TemplateKind) -> Result<Vec<QaTemplate>> {
    let items: Vec<QaTemplate> = serde_json::from_str(json)?;
    for (i, t) in items.iter().enumerate() {
        let ok = t.kind == kind
            && t.id as usize == i + 1
            && t.question.contains(PLACEHOLDER)
            && match kind {
                TemplateKind::RecognitionPositive => t.answer.as_deref().is_some_and(|a| a.starts_with("Yes")),
                TemplateKind::RecognitionNegative => t.answer.as_deref().is_some_and(|a| a.starts_with("No")),
                TemplateKind::Attribute => t.answer.is_none(),
            };
        if !ok {
            return Err(PlvmError::Manifest(format!("template {:?} #{} is malformed", kind, t.id)));
        }
    }
    Ok(items)
}

impl TemplateBank {
    pub fn parse(positive: &str, negative: &str, text_only: &str) -> Result<Self> {
        Ok(Self {
            positive: parse_bank(positive, TemplateKind::RecognitionPositive)?,
            negative: parse_bank(negative, TemplateKind::RecognitionNegative)?,
            attribute: parse_bank(text_only, TemplateKind::Attribute)?,
        })
    }

    /// The embedded banks.
    pub fn standard() -> &'static TemplateBank {
        static BANK: OnceLock<TemplateBank> = OnceLock::new();
        BANK.get_or_init(|| {
            TemplateBank::parse(POSITIVE_JSON, NEGATIVE_JSON, TEXT_ONLY_JSON).expect("embedded template banks are valid")
        })
    }

    pub fn of_kind(&self, kind: TemplateKind) -> &[QaTemplate] {
        match kind {
            TemplateKind::RecognitionPositive => &self.positive,
            TemplateKind::RecognitionNegative => &self.negative,
            TemplateKind::Attribute => &self.attribute,
        }
    }

    pub fn get(&self, id: TemplateId) -> Result<&QaTemplate> {
        self.of_kind(id.kind)
            .get((id.id as usize).wrapping_sub(1))
            .ok_or_else(|| PlvmError::UnknownTemplate(format!("{:?} #{}", id.kind, id.id)))
    }

    pub fn all(&self) -> impl Iterator<Item = &QaTemplate> {
        self.positive.iter().chain(&self.negative).chain(&self.attribute)
    }

    /// `(question, answer)` with every placeholder replaced by `concept_name`;
    /// the answer is empty for attribute templates.
    pub fn render(&self, id: TemplateId, concept_name: &str) -> Result<(String, String)> {
        let t = self.get(id)?;
        Ok((
            t.question.replace(PLACEHOLDER, concept_name),
            t.answer.as_deref().unwrap_or("").replace(PLACEHOLDER, concept_name),
        ))
    }
}

/// SHA-256 of a bank's data file, hex encoded.
pub fn bank_hash(json: &str) -> String {
    hex::encode(Sha256::digest(json.as_bytes()))
}
