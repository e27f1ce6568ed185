//! The three inner-loop roles: the distiller proposes new skills from
//! no-retrieval trajectories, the diagnoser issues keep/rewrite/remove
//! verdicts from leave-one-out evidence, and the planner composes the
//! resulting edit pools into candidate banks.
//!
//! Two backends exist: a deterministic rule-based one ([`RuleBasedProposer`])
//! and a client for an OpenAI-compatible chat-completion endpoint
//! ([`RemoteProposer`]). Either way, banks are always assembled by
//! [`plan_edits`], which validates the pools and protects kept skills.

mod plan;
mod remote;
mod rule;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rollout::{TaskQuery, Trajectory};
use crate::skill::{Origin, Skill, SkillBank, SkillId};

pub use plan::{compose, enumerate_selections, plan_edits, AppliedEdits, CandidateBank};
pub use remote::{RemoteConfig, RemoteProposer};
pub use rule::{DiagnoserThresholds, RuleBasedProposer};

/// A task together with the trajectory it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub task: TaskQuery,
    pub trajectory: Trajectory,
}

/// Factual trajectory and its leave-one-out counterfactual for one skill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidencePair {
    pub task: TaskQuery,
    pub factual: Trajectory,
    pub counterfactual: Trajectory,
}

impl EvidencePair {
    pub fn delta(&self) -> f64 {
        self.factual.reward - self.counterfactual.reward
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    Keep,
    Rewrite,
    Remove,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSummary {
    pub n_pairs: usize,
    pub mean_delta: f64,
}

impl EvidenceSummary {
    pub fn of(pairs: &[EvidencePair]) -> Self {
        let n = pairs.len();
        let mean_delta = if n == 0 {
            0.0
        } else {
            pairs.iter().map(EvidencePair::delta).sum::<f64>() / n as f64
        };
        Self {
            n_pairs: n,
            mean_delta,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub skill_id: SkillId,
    pub kind: VerdictKind,
    /// Present iff `kind` is `Rewrite`.
    pub rewritten: Option<Skill>,
    pub evidence_summary: EvidenceSummary,
}

impl Verdict {
    pub fn validate(&self) -> Result<()> {
        match (&self.kind, &self.rewritten) {
            (VerdictKind::Rewrite, Some(s)) if s.id() == &self.skill_id => Err(Error::Validation(
                format!("rewrite of {} did not change its content", self.skill_id),
            )),
            (VerdictKind::Rewrite, Some(_)) => Ok(()),
            (VerdictKind::Rewrite, None) => Err(Error::Validation(format!(
                "rewrite verdict for {} carries no rewritten skill",
                self.skill_id
            ))),
            (_, Some(_)) => Err(Error::Validation(format!(
                "non-rewrite verdict for {} carries a rewritten skill",
                self.skill_id
            ))),
            (_, None) => Ok(()),
        }
    }
}

/// The four verdict sets handed to the planner.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EditPools {
    pub add: Vec<Skill>,
    pub rewrite: Vec<(SkillId, Skill)>,
    pub remove: Vec<SkillId>,
    pub keep: Vec<SkillId>,
}

impl EditPools {
    pub fn is_empty(&self) -> bool {
        self.add.is_empty() && self.rewrite.is_empty() && self.remove.is_empty()
    }

    /// Check that every referenced id exists in `bank`, that keep, rewrite
    /// and remove are disjoint, and that adds are new to the bank.
    pub fn validate(&self, bank: &SkillBank) -> Result<()> {
        let mut seen: HashSet<&SkillId> = HashSet::new();
        let referenced = self
            .rewrite
            .iter()
            .map(|(id, _)| ("rewrite", id))
            .chain(self.remove.iter().map(|id| ("remove", id)))
            .chain(self.keep.iter().map(|id| ("keep", id)));
        for (pool, id) in referenced {
            if !bank.contains(id) {
                return Err(Error::Validation(format!(
                    "{pool} pool references unknown skill {id}"
                )));
            }
            if !seen.insert(id) {
                return Err(Error::Validation(format!(
                    "skill {id} appears in more than one edit pool"
                )));
            }
        }
        for (orig, new) in &self.rewrite {
            if orig == new.id() {
                return Err(Error::Validation(format!("rewrite of {orig} is unchanged")));
            }
        }
        let mut add_ids = HashSet::new();
        for s in &self.add {
            if bank.contains(s.id()) || !add_ids.insert(s.id()) {
                return Err(Error::Validation(format!(
                    "add pool skill {} already exists",
                    s.id()
                )));
            }
        }
        Ok(())
    }

    /// Empty the pools of disabled operations.
    pub fn restrict(&mut self, ops: EditOps) {
        if !ops.add {
            self.add.clear();
        }
        if !ops.rewrite {
            self.rewrite.clear();
        }
        if !ops.remove {
            self.remove.clear();
        }
    }
}

/// Enabled edit operations. `Add` must stay enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EditOps {
    pub add: bool,
    pub rewrite: bool,
    pub remove: bool,
}

impl Default for EditOps {
    fn default() -> Self {
        Self::ALL
    }
}

impl EditOps {
    pub const ALL: EditOps = EditOps {
        add: true,
        rewrite: true,
        remove: true,
    };

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut ops = EditOps {
            add: false,
            rewrite: false,
            remove: false,
        };
        for n in names {
            match n.as_ref().trim() {
                "add" => ops.add = true,
                "rewrite" => ops.rewrite = true,
                "remove" => ops.remove = true,
                other => return Err(Error::Config(format!("unknown edit operation {other:?}"))),
            }
        }
        if !ops.add {
            return Err(Error::Config(
                "edit operation `add` cannot be disabled".into(),
            ));
        }
        Ok(ops)
    }

    pub fn names(&self) -> Vec<&'static str> {
        [
            ("add", self.add),
            ("rewrite", self.rewrite),
            ("remove", self.remove),
        ]
        .into_iter()
        .filter(|(_, on)| *on)
        .map(|(n, _)| n)
        .collect()
    }
}

impl Serialize for EditOps {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.names().serialize(s)
    }
}

impl<'de> Deserialize<'de> for EditOps {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        Self::from_names(&names).map_err(serde::de::Error::custom)
    }
}

/// Which pool entries one candidate bank applies, as indices into
/// `EditPools::{add, rewrite, remove}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EditSelection {
    #[serde(default)]
    pub adds: Vec<usize>,
    #[serde(default)]
    pub rewrites: Vec<usize>,
    #[serde(default)]
    pub removes: Vec<usize>,
}

/// The three proposer roles.
pub trait Proposer: Send + Sync {
    fn distill(
        &self,
        failures: &[CaseRecord],
        successes: &[CaseRecord],
        origin: Origin,
        round: u32,
    ) -> Result<Vec<Skill>>;

    fn diagnose(&self, skill: &Skill, pairs: &[EvidencePair], round: u32) -> Result<Verdict>;

    /// Choose up to `k` edit selections over `pools`.
    fn plan(&self, bank: &SkillBank, pools: &EditPools, k: usize) -> Result<Vec<EditSelection>>;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edit_ops_names() {
        let ops = EditOps::from_names(&["add", "remove"]).unwrap();
        assert!(ops.add && ops.remove && !ops.rewrite);
        assert_eq!(ops.names(), vec!["add", "remove"]);
        assert!(EditOps::from_names(&["rewrite"]).is_err());
        assert!(EditOps::from_names(&["add", "merge"]).is_err());
    }
}
