//! Skills, skill banks, canonical serialization and the bank file format.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{is_unit, EmbeddingProvider};
use crate::error::{Error, Result};

/// Stable identifier of a skill: the first 16 hex chars of the SHA-256 of its
/// canonical bytes, unless loaded from a file that says otherwise.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SkillId(pub String);

impl SkillId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SkillId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SkillId {
    fn from(s: &str) -> Self {
        SkillId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    ColdStart,
    Add,
    Rewrite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub round_created: u32,
    pub origin: Origin,
}

/// One retrievable unit of procedural knowledge.
#[derive(Debug, Clone, PartialEq)]
pub struct Skill {
    id: SkillId,
    title: String,
    principle: String,
    when_to_apply: String,
    embedding: Vec<f64>,
    provenance: Provenance,
}

impl Skill {
    /// Build a skill with a content-hash id and a freshly computed embedding.
    pub fn new(
        title: impl Into<String>,
        principle: impl Into<String>,
        when_to_apply: impl Into<String>,
        provenance: Provenance,
        embedder: &dyn EmbeddingProvider,
    ) -> Result<Self> {
        let (title, principle, when_to_apply) =
            (title.into(), principle.into(), when_to_apply.into());
        check_text_fields(&title, &principle, &when_to_apply)?;
        let id = content_id(&title, &principle, &when_to_apply);
        let embedding = embedder.embed(&retrieval_text(&title, &principle, &when_to_apply))?;
        Ok(Self {
            id,
            title,
            principle,
            when_to_apply,
            embedding,
            provenance,
        })
    }

    /// Assemble a skill from stored parts, validating every invariant.
    pub fn from_parts(
        id: SkillId,
        title: String,
        principle: String,
        when_to_apply: String,
        embedding: Vec<f64>,
        provenance: Provenance,
    ) -> Result<Self> {
        check_text_fields(&title, &principle, &when_to_apply)?;
        if id.0.is_empty() {
            return Err(Error::Validation("skill id is empty".into()));
        }
        if !is_unit(&embedding) {
            return Err(Error::Validation(format!(
                "skill {id}: embedding is not unit norm"
            )));
        }
        Ok(Self {
            id,
            title,
            principle,
            when_to_apply,
            embedding,
            provenance,
        })
    }

    pub fn id(&self) -> &SkillId {
        &self.id
    }

    pub fn title(&self) -> &str {
        &self.title
    }

    pub fn principle(&self) -> &str {
        &self.principle
    }

    pub fn when_to_apply(&self) -> &str {
        &self.when_to_apply
    }

    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Text the retriever indexes and the embedder encodes.
    pub fn retrieval_text(&self) -> String {
        retrieval_text(&self.title, &self.principle, &self.when_to_apply)
    }

    /// Length-prefixed encoding of title, principle and when_to_apply.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical_bytes(&self.title, &self.principle, &self.when_to_apply)
    }
}

fn check_text_fields(title: &str, principle: &str, when_to_apply: &str) -> Result<()> {
    for (name, value) in [
        ("title", title),
        ("principle", principle),
        ("when_to_apply", when_to_apply),
    ] {
        if value.trim().is_empty() {
            return Err(Error::Validation(format!("skill {name} is empty")));
        }
    }
    Ok(())
}

/// Each field is written as `<decimal byte length>:<raw bytes>`, in the
/// order title, principle, when_to_apply. Embedding and provenance are not
/// part of the content.
pub fn canonical_bytes(title: &str, principle: &str, when_to_apply: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(title.len() + principle.len() + when_to_apply.len() + 12);
    for field in [title, principle, when_to_apply] {
        out.extend_from_slice(field.len().to_string().as_bytes());
        out.push(b':');
        out.extend_from_slice(field.as_bytes());
    }
    out
}

pub fn content_id(title: &str, principle: &str, when_to_apply: &str) -> SkillId {
    let digest = Sha256::digest(canonical_bytes(title, principle, when_to_apply));
    SkillId(hex::encode(digest)[..16].to_string())
}

pub fn retrieval_text(title: &str, principle: &str, when_to_apply: &str) -> String {
    format!("{title}\n{principle}\n{when_to_apply}")
}

/// Ordered, id-unique collection of skills.
#[derive(Debug, Clone, PartialEq)]
pub struct SkillBank {
    skills: Vec<Skill>,
    bank_id: String,
    round: u32,
}

impl SkillBank {
    pub fn new(skills: Vec<Skill>, round: u32) -> Result<Self> {
        let bank_id = derive_bank_id(&skills);
        Self::with_id(skills, bank_id, round)
    }

    pub fn empty(round: u32) -> Self {
        Self {
            bank_id: derive_bank_id(&[]),
            skills: Vec::new(),
            round,
        }
    }

    fn with_id(skills: Vec<Skill>, bank_id: String, round: u32) -> Result<Self> {
        let mut seen = HashSet::with_capacity(skills.len());
        for s in &skills {
            if !seen.insert(s.id()) {
                return Err(Error::Validation(format!("duplicate skill id {}", s.id())));
            }
        }
        Ok(Self {
            skills,
            bank_id,
            round,
        })
    }

    pub fn skills(&self) -> &[Skill] {
        &self.skills
    }

    pub fn bank_id(&self) -> &str {
        &self.bank_id
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }

    pub fn get(&self, id: &SkillId) -> Option<&Skill> {
        self.skills.iter().find(|s| s.id() == id)
    }

    pub fn contains(&self, id: &SkillId) -> bool {
        self.get(id).is_some()
    }

    pub fn ids(&self) -> Vec<SkillId> {
        self.skills.iter().map(|s| s.id().clone()).collect()
    }

    /// Same contents, new round number. Used when a bank carries forward.
    pub fn carried_to(&self, round: u32) -> Self {
        Self {
            skills: self.skills.clone(),
            bank_id: self.bank_id.clone(),
            round,
        }
    }
}

/// Bank ids are derived from the ordered list of skill ids.
pub fn derive_bank_id(skills: &[Skill]) -> String {
    let mut h = Sha256::new();
    for s in skills {
        h.update(s.id().as_str().as_bytes());
        h.update(b"\n");
    }
    format!("bank-{}", &hex::encode(h.finalize())[..16])
}

#[derive(Serialize, Deserialize)]
struct SkillRecord {
    id: SkillId,
    title: String,
    principle: String,
    when_to_apply: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f64>>,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct BankRecord {
    bank_id: String,
    round: u32,
    skills: Vec<SkillRecord>,
}

impl From<&Skill> for SkillRecord {
    fn from(s: &Skill) -> Self {
        SkillRecord {
            id: s.id.clone(),
            title: s.title.clone(),
            principle: s.principle.clone(),
            when_to_apply: s.when_to_apply.clone(),
            embedding: Some(s.embedding.clone()),
            provenance: s.provenance,
        }
    }
}

/// Serialize a bank to the JSON bank format (fixed key order).
pub fn bank_to_json(bank: &SkillBank) -> String {
    let record = BankRecord {
        bank_id: bank.bank_id.clone(),
        round: bank.round,
        skills: bank.skills.iter().map(SkillRecord::from).collect(),
    };
    let mut s = serde_json::to_string_pretty(&record).expect("bank serialization cannot fail");
    s.push('\n');
    s
}

/// Parse a bank file. Accepts either the full `{bank_id, round, skills}`
/// object or a bare array of skill records; missing embeddings are recomputed.
pub fn bank_from_json(
    text: &str,
    location: &str,
    embedder: &dyn EmbeddingProvider,
) -> Result<SkillBank> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        location: location.to_string(),
        message: e.to_string(),
    })?;
    let (raw_skills, header) = match value {
        serde_json::Value::Array(items) => (items, None),
        serde_json::Value::Object(mut obj) => {
            let skills = match obj.remove("skills") {
                Some(serde_json::Value::Array(items)) => items,
                _ => {
                    return Err(Error::Parse {
                        location: location.to_string(),
                        message: "expected a `skills` array".into(),
                    })
                }
            };
            let bank_id = obj
                .get("bank_id")
                .and_then(|v| v.as_str())
                .map(String::from);
            let round = obj.get("round").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
            (skills, Some((bank_id, round)))
        }
        _ => {
            return Err(Error::Parse {
                location: location.to_string(),
                message: "expected a JSON array or object".into(),
            })
        }
    };

    let mut skills = Vec::with_capacity(raw_skills.len());
    for (i, raw) in raw_skills.into_iter().enumerate() {
        let record: SkillRecord = serde_json::from_value(raw).map_err(|e| Error::Parse {
            location: format!("{location}: skill record #{i}"),
            message: e.to_string(),
        })?;
        let embedding = match record.embedding {
            Some(e) => {
                if e.len() != embedder.dimension() {
                    return Err(Error::Validation(format!(
                        "skill {}: embedding has {} dims, expected {}",
                        record.id,
                        e.len(),
                        embedder.dimension()
                    )));
                }
                e
            }
            None => embedder.embed(&retrieval_text(
                &record.title,
                &record.principle,
                &record.when_to_apply,
            ))?,
        };
        skills.push(Skill::from_parts(
            record.id,
            record.title,
            record.principle,
            record.when_to_apply,
            embedding,
            record.provenance,
        )?);
    }

    match header {
        Some((Some(bank_id), round)) => SkillBank::with_id(skills, bank_id, round),
        Some((None, round)) => SkillBank::new(skills, round),
        None => SkillBank::new(skills, 0),
    }
}

pub fn load_bank(path: &Path, embedder: &dyn EmbeddingProvider) -> Result<SkillBank> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    bank_from_json(&text, &path.display().to_string(), embedder)
}

pub fn save_bank(bank: &SkillBank, path: &Path) -> Result<()> {
    std::fs::write(path, bank_to_json(bank)).map_err(|e| Error::io(path, e))
}
