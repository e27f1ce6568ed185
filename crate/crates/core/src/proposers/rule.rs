use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    enumerate_selections, CaseRecord, EditPools, EditSelection, EvidencePair, EvidenceSummary,
    Proposer, Verdict, VerdictKind,
};
use crate::embedding::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::skill::{Origin, Provenance, Skill, SkillBank};
use crate::world::TagAnnotation;

/// Mean-delta cut-offs: above `keep` keeps, below `remove` removes, and
/// anything in between is rewritten.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoserThresholds {
    pub keep: f64,
    pub remove: f64,
}

impl Default for DiagnoserThresholds {
    fn default() -> Self {
        Self {
            keep: 0.0,
            remove: 0.0,
        }
    }
}

/// Deterministic stand-in for the LLM-backed roles.
///
/// Failures are clustered by task category, one skill per uncovered
/// category. Verdicts follow the mean leave-one-out delta. Rewrites narrow
/// the skill's applicability to categories where it did not hurt. Planning
/// uses the fixed order of [`enumerate_selections`].
pub struct RuleBasedProposer {
    embedder: Arc<dyn EmbeddingProvider>,
    thresholds: DiagnoserThresholds,
    side_effects: BTreeMap<String, Vec<String>>,
}

impl RuleBasedProposer {
    pub fn new(embedder: Arc<dyn EmbeddingProvider>) -> Self {
        Self {
            embedder,
            thresholds: DiagnoserThresholds::default(),
            side_effects: BTreeMap::new(),
        }
    }

    pub fn with_thresholds(mut self, thresholds: DiagnoserThresholds) -> Self {
        self.thresholds = thresholds;
        self
    }

    /// Categories a skill distilled for a given category is also harmful for.
    pub fn with_side_effects(mut self, side_effects: BTreeMap<String, Vec<String>>) -> Self {
        self.side_effects = side_effects;
        self
    }

    /// The skill distilled for failures in `category`.
    pub fn skill_for(&self, category: &str, origin: Origin, round: u32) -> Result<Skill> {
        let harmful: BTreeSet<String> = self
            .side_effects
            .get(category)
            .map(|v| v.iter().cloned().collect())
            .unwrap_or_default();
        let tags = TagAnnotation {
            helpful: BTreeSet::from([category.to_string()]),
            harmful,
        };
        let scope: Vec<String> = tags.mentioned().into_iter().collect();
        Skill::new(
            format!("Reliable {category} routine"),
            format!(
                "Find the target object first, {category} it with the matching appliance, \
                 and confirm the {category} step succeeded before moving on."
            ),
            when_to_apply(category, &scope, &tags),
            Provenance {
                round_created: round,
                origin,
            },
            self.embedder.as_ref(),
        )
    }

    fn narrowed(&self, skill: &Skill, pairs: &[EvidencePair], round: u32) -> Result<Option<Skill>> {
        let tags = TagAnnotation::of(skill);
        let safe: BTreeSet<String> = pairs
            .iter()
            .filter(|p| p.delta() >= 0.0)
            .filter_map(|p| p.task.category.clone())
            .collect();
        let keep: BTreeSet<String> = tags.mentioned().intersection(&safe).cloned().collect();
        let narrowed = TagAnnotation {
            helpful: tags.helpful.intersection(&keep).cloned().collect(),
            harmful: tags.harmful.intersection(&keep).cloned().collect(),
        };
        if keep.is_empty() || narrowed == tags {
            return Ok(None);
        }
        let scope: Vec<String> = keep.into_iter().collect();
        let primary = narrowed.helpful.iter().next().unwrap_or(&scope[0]).clone();
        Skill::new(
            skill.title(),
            skill.principle(),
            when_to_apply(&primary, &scope, &narrowed),
            Provenance {
                round_created: round,
                origin: Origin::Rewrite,
            },
            self.embedder.as_ref(),
        )
        .map(Some)
    }
}

fn when_to_apply(primary: &str, scope: &[String], tags: &TagAnnotation) -> String {
    let others: Vec<&str> = scope
        .iter()
        .map(String::as_str)
        .filter(|s| *s != primary)
        .collect();
    let extra = if others.is_empty() {
        String::new()
    } else {
        format!(" Also relevant to {} tasks.", others.join(" and "))
    };
    format!(
        "Apply when the task asks you to {primary} an object.{extra} {}",
        tags.render()
    )
}

impl Proposer for RuleBasedProposer {
    fn distill(
        &self,
        failures: &[CaseRecord],
        successes: &[CaseRecord],
        origin: Origin,
        round: u32,
    ) -> Result<Vec<Skill>> {
        let covered: BTreeSet<&str> = successes
            .iter()
            .filter_map(|c| c.task.category.as_deref())
            .collect();
        let groups: BTreeSet<&str> = failures
            .iter()
            .filter_map(|c| c.task.category.as_deref())
            .filter(|cat| !covered.contains(cat))
            .collect();
        groups
            .into_iter()
            .map(|cat| self.skill_for(cat, origin, round))
            .collect()
    }

    fn diagnose(&self, skill: &Skill, pairs: &[EvidencePair], round: u32) -> Result<Verdict> {
        if pairs.is_empty() {
            return Err(Error::invalid(format!(
                "skill {} has no counterfactual evidence",
                skill.id()
            )));
        }
        let summary = EvidenceSummary::of(pairs);
        let verdict = |kind, rewritten| Verdict {
            skill_id: skill.id().clone(),
            kind,
            rewritten,
            evidence_summary: summary,
        };
        if summary.mean_delta > self.thresholds.keep {
            return Ok(verdict(VerdictKind::Keep, None));
        }
        if summary.mean_delta < self.thresholds.remove {
            return Ok(verdict(VerdictKind::Remove, None));
        }
        // Nothing to narrow means there is no edit to salvage the skill with.
        Ok(match self.narrowed(skill, pairs, round)? {
            Some(new) => verdict(VerdictKind::Rewrite, Some(new)),
            None => verdict(VerdictKind::Keep, None),
        })
    }

    fn plan(&self, _bank: &SkillBank, pools: &EditPools, _k: usize) -> Result<Vec<EditSelection>> {
        Ok(enumerate_selections(pools))
    }
}
