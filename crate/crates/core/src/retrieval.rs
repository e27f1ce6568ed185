//! Hybrid lexical + dense retrieval.
//!
//! Each skill is scored against a query as
//! `w_bm25 * minmax(BM25) + w_dense * cos(e_query, e_skill)`. Skills scoring
//! below the threshold are dropped and the best `k_top` are returned in rank
//! order.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::embedding::{dot, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::skill::{Skill, SkillBank, SkillId};

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k_top: usize,
    pub w_bm25: f64,
    pub w_dense: f64,
    pub score_threshold: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k_top: 3,
            w_bm25: 0.30,
            w_dense: 0.70,
            score_threshold: 0.30,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_top == 0 {
            return Err(Error::Config("k_top must be at least 1".into()));
        }
        if !(self.w_bm25 >= 0.0 && self.w_dense >= 0.0) {
            return Err(Error::Config(
                "retrieval weights must be non-negative".into(),
            ));
        }
        if (self.w_bm25 + self.w_dense - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "retrieval weights must sum to 1 (got {} + {})",
                self.w_bm25, self.w_dense
            )));
        }
        if !self.score_threshold.is_finite() {
            return Err(Error::Config("score_threshold must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedEntry {
    pub skill_id: SkillId,
    pub combined_score: f64,
    pub bm25_norm: f64,
    pub cosine: f64,
    pub rank: usize,
}

/// Rank-ordered retrieval set for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_text: String,
    pub entries: Vec<RetrievedEntry>,
}

impl RetrievalResult {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn skill_ids(&self) -> Vec<SkillId> {
        self.entries.iter().map(|e| e.skill_id.clone()).collect()
    }

    /// Resolve entries back into skills of `bank`, preserving rank order.
    pub fn skills<'b>(&self, bank: &'b SkillBank) -> Vec<&'b Skill> {
        self.entries
            .iter()
            .filter_map(|e| bank.get(&e.skill_id))
            .collect()
    }
}

/// Lowercased alphanumeric word tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Okapi BM25 of `query_text` against every skill's retrieval text, with
/// document statistics taken over `bank` only.
pub fn bm25_raw(query_text: &str, bank: &SkillBank) -> BTreeMap<SkillId, f64> {
    if bank.is_empty() {
        return BTreeMap::new();
    }
    let docs: Vec<Vec<String>> = bank
        .skills()
        .iter()
        .map(|s| tokenize(&s.retrieval_text()))
        .collect();
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;

    let mut df: HashMap<&str, usize> = HashMap::new();
    for doc in &docs {
        let mut uniq: Vec<&str> = doc.iter().map(String::as_str).collect();
        uniq.sort_unstable();
        uniq.dedup();
        for t in uniq {
            *df.entry(t).or_default() += 1;
        }
    }

    let query = tokenize(query_text);
    bank.skills()
        .iter()
        .zip(&docs)
        .map(|(skill, doc)| {
            let dl = doc.len() as f64;
            let mut tf: HashMap<&str, usize> = HashMap::new();
            for t in doc {
                *tf.entry(t.as_str()).or_default() += 1;
            }
            let score: f64 = query
                .iter()
                .filter_map(|q| {
                    let f = *tf.get(q.as_str())? as f64;
                    let d = df[q.as_str()] as f64;
                    let idf = (1.0 + (n - d + 0.5) / (d + 0.5)).ln();
                    let norm = if avgdl > 0.0 {
                        1.0 - BM25_B + BM25_B * dl / avgdl
                    } else {
                        1.0
                    };
                    Some(idf * f * (BM25_K1 + 1.0) / (f + BM25_K1 * norm))
                })
                .sum();
            (skill.id().clone(), score)
        })
        .collect()
}

/// `(x - min) / (max - min)`; all zeros when every score is equal.
pub fn minmax_normalize(scores: &BTreeMap<SkillId, f64>) -> BTreeMap<SkillId, f64> {
    let min = scores.values().copied().fold(f64::INFINITY, f64::min);
    let max = scores.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    scores
        .iter()
        .map(|(id, &x)| {
            let v = if span > 0.0 { (x - min) / span } else { 0.0 };
            (id.clone(), v)
        })
        .collect()
}

#[derive(Clone)]
pub struct HybridRetriever {
    config: RetrievalConfig,
    embedder: Arc<dyn EmbeddingProvider>,
}

impl HybridRetriever {
    pub fn new(config: RetrievalConfig, embedder: Arc<dyn EmbeddingProvider>) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, embedder })
    }

    pub fn config(&self) -> &RetrievalConfig {
        &self.config
    }

    pub fn embedder(&self) -> &Arc<dyn EmbeddingProvider> {
        &self.embedder
    }

    /// Score every skill, drop those under the threshold, keep the top `k_top`.
    pub fn retrieve(&self, query_text: &str, bank: &SkillBank) -> Result<RetrievalResult> {
        let entries = self.score_all(query_text, bank)?;
        let mut kept: Vec<RetrievedEntry> = entries
            .into_iter()
            .filter(|e| e.combined_score >= self.config.score_threshold)
            .collect();
        kept.truncate(self.config.k_top);
        for (i, e) in kept.iter_mut().enumerate() {
            e.rank = i + 1;
        }
        Ok(RetrievalResult {
            query_text: query_text.to_string(),
            entries: kept,
        })
    }

    /// Every skill's score components, sorted by combined score descending
    /// and then skill id ascending. Ranks are provisional.
    pub fn score_all(&self, query_text: &str, bank: &SkillBank) -> Result<Vec<RetrievedEntry>> {
        if bank.is_empty() {
            return Ok(Vec::new());
        }
        let q = self.embedder.embed(query_text)?;
        let bm25 = minmax_normalize(&bm25_raw(query_text, bank));
        let mut entries: Vec<RetrievedEntry> = bank
            .skills()
            .iter()
            .map(|s| {
                let bm25_norm = bm25[s.id()];
                let cosine = dot(&q, s.embedding());
                RetrievedEntry {
                    skill_id: s.id().clone(),
                    combined_score: self.config.w_bm25 * bm25_norm + self.config.w_dense * cosine,
                    bm25_norm,
                    cosine,
                    rank: 0,
                }
            })
            .collect();
        entries.sort_by(|a, b| {
            b.combined_score
                .total_cmp(&a.combined_score)
                .then_with(|| a.skill_id.cmp(&b.skill_id))
        });
        for (i, e) in entries.iter_mut().enumerate() {
            e.rank = i + 1;
        }
        Ok(entries)
    }
}
