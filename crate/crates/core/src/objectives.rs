//! Bank-level objectives: counterfactual utility, embedding diversity and
//! retrieval coverage, all measured on the query split.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::ReplayCache;
use crate::embedding::{dot, is_unit};
use crate::error::{Error, Result};
use crate::retrieval::{HybridRetriever, RetrievalResult};
use crate::rollout::{loo_replay, rollout, TaskQuery, Worker};
use crate::skill::{SkillBank, SkillId};

pub const DEFAULT_EPSILON_REG: f64 = 1e-6;

/// `(util, div, cov)` for one bank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveProfile {
    pub util: f64,
    pub div: f64,
    pub cov: f64,
}

impl ObjectiveProfile {
    pub const ZERO: ObjectiveProfile = ObjectiveProfile {
        util: 0.0,
        div: 0.0,
        cov: 0.0,
    };

    pub fn new(util: f64, div: f64, cov: f64) -> Self {
        Self { util, div, cov }
    }
}

/// Which objectives take part in selection. Utility always does.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjectiveSet {
    pub div: bool,
    pub cov: bool,
}

impl Default for ObjectiveSet {
    fn default() -> Self {
        Self::ALL
    }
}

impl ObjectiveSet {
    pub const ALL: ObjectiveSet = ObjectiveSet {
        div: true,
        cov: true,
    };
    pub const UTIL_ONLY: ObjectiveSet = ObjectiveSet {
        div: false,
        cov: false,
    };

    /// Parse names such as `["util", "div"]`. `util` must be present.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut set = Self::UTIL_ONLY;
        let mut util = false;
        for n in names {
            match n.as_ref().trim() {
                "util" => util = true,
                "div" => set.div = true,
                "cov" => set.cov = true,
                other => return Err(Error::Config(format!("unknown objective {other:?}"))),
            }
        }
        if !util {
            return Err(Error::Config(
                "objective `util` cannot be disabled: it has lexicographic priority".into(),
            ));
        }
        Ok(set)
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut v = vec!["util"];
        if self.div {
            v.push("div");
        }
        if self.cov {
            v.push("cov");
        }
        v
    }

    /// Components of `p` that take part in dominance, util first.
    pub fn project(&self, p: &ObjectiveProfile) -> Vec<f64> {
        let mut v = vec![p.util];
        if self.div {
            v.push(p.div);
        }
        if self.cov {
            v.push(p.cov);
        }
        v
    }
}

impl Serialize for ObjectiveSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.names().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ObjectiveSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        Self::from_names(&names).map_err(serde::de::Error::custom)
    }
}

fn check_reward(r: f64) -> Result<()> {
    if (0.0..=1.0).contains(&r) {
        Ok(())
    } else {
        Err(Error::invalid(format!("reward {r} outside [0, 1]")))
    }
}

/// Marginal contribution of a skill: reward with it minus reward without it.
pub fn delta(r_with: f64, r_without: f64) -> Result<f64> {
    check_reward(r_with)?;
    check_reward(r_without)?;
    Ok(r_with - r_without)
}

/// Per-skill `(r_with, r_without)` pairs gathered from leave-one-out replays.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UtilityEvidence {
    pub per_skill: BTreeMap<SkillId, Vec<(f64, f64)>>,
    /// Number of trajectories with a non-empty retrieval set.
    pub n_retrieving: usize,
}

/// Mean delta over a skill's pairs; `None` without evidence.
pub fn skill_utility(pairs: &[(f64, f64)]) -> Result<Option<f64>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for &(with, without) in pairs {
        sum += delta(with, without)?;
    }
    Ok(Some(sum / pairs.len() as f64))
}

/// `sum_s (|T_s| / N_R) * mean_delta(s)`; zero when nothing was retrieved.
///
/// Weights are not renormalized, so they sum above one when skills are
/// co-retrieved.
pub fn bank_utility(evidence: &UtilityEvidence) -> Result<f64> {
    if evidence.n_retrieving == 0 {
        return Ok(0.0);
    }
    let n = evidence.n_retrieving as f64;
    let mut total = 0.0;
    for pairs in evidence.per_skill.values() {
        if pairs.len() > evidence.n_retrieving {
            return Err(Error::invalid(
                "a skill cannot be retrieved by more trajectories than retrieve anything",
            ));
        }
        if let Some(mean) = skill_utility(pairs)? {
            total += pairs.len() as f64 / n * mean;
        }
    }
    Ok(total)
}

/// `det(G + eps I)^(1/n)` of the Gram matrix of the bank's embeddings,
/// clamped to at most 1. Empty banks score 0.
pub fn diversity(bank: &SkillBank, epsilon_reg: f64) -> Result<f64> {
    let vs: Vec<&[f64]> = bank.skills().iter().map(|s| s.embedding()).collect();
    diversity_of(&vs, epsilon_reg)
}

pub fn diversity_of(embeddings: &[&[f64]], epsilon_reg: f64) -> Result<f64> {
    let n = embeddings.len();
    if n == 0 {
        return Ok(0.0);
    }
    if embeddings.iter().any(|e| !is_unit(e)) {
        return Err(Error::invalid("diversity requires unit-norm embeddings"));
    }
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let g = dot(embeddings[i], embeddings[j]);
            m[i * n + j] = g;
            m[j * n + i] = g;
        }
        m[i * n + i] += epsilon_reg;
    }
    let log_det = log_det_spd(&m, n).unwrap_or_else(|| log_abs_det_lu(m, n));
    Ok((log_det / n as f64).exp().min(1.0))
}

/// Log-determinant through a Cholesky factorization; `None` if a pivot is
/// not positive.
fn log_det_spd(a: &[f64], n: usize) -> Option<f64> {
    let mut l = vec![0.0; n * n];
    let mut log_det = 0.0;
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        log_det += 2.0 * djj.ln();
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Some(log_det)
}

/// Fallback for matrices that are not numerically positive definite.
fn log_abs_det_lu(mut a: Vec<f64>, n: usize) -> f64 {
    let mut log_det = 0.0;
    for c in 0..n {
        let p = (c..n)
            .max_by(|&x, &y| a[x * n + c].abs().total_cmp(&a[y * n + c].abs()))
            .expect("non-empty range");
        let pivot = a[p * n + c];
        if pivot == 0.0 {
            return f64::NEG_INFINITY;
        }
        if p != c {
            for k in 0..n {
                a.swap(p * n + k, c * n + k);
            }
        }
        log_det += pivot.abs().ln();
        for r in c + 1..n {
            let f = a[r * n + c] / pivot;
            for k in c..n {
                a[r * n + k] -= f * a[c * n + k];
            }
        }
    }
    log_det
}

/// `density * usage`: mean fraction of the `k_top` slots filled per task,
/// times the fraction of skills retrieved at least once.
pub fn coverage(results: &[RetrievalResult], bank: &SkillBank, k_top: usize) -> f64 {
    if bank.is_empty() || results.is_empty() || k_top == 0 {
        return 0.0;
    }
    let density = results
        .iter()
        .map(|r| r.len() as f64 / k_top as f64)
        .sum::<f64>()
        / results.len() as f64;
    let used = bank
        .skills()
        .iter()
        .filter(|s| {
            results
                .iter()
                .any(|r| r.entries.iter().any(|e| &e.skill_id == s.id()))
        })
        .count();
    density * (used as f64 / bank.len() as f64)
}

/// Everything measured while evaluating one bank.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub profile: ObjectiveProfile,
    pub evidence: UtilityEvidence,
    pub retrievals: Vec<(String, RetrievalResult)>,
}

impl Evaluation {
    pub fn report(&self, bank: &SkillBank) -> ProfileReport {
        let per_skill = bank
            .skills()
            .iter()
            .map(|s| {
                let pairs = self.evidence.per_skill.get(s.id());
                SkillUtilityReport {
                    skill_id: s.id().clone(),
                    n_retrieved: pairs.map_or(0, Vec::len),
                    mean_delta: pairs.and_then(|p| skill_utility(p).ok().flatten()),
                }
            })
            .collect();
        ProfileReport {
            bank_id: bank.bank_id().to_string(),
            util: self.profile.util,
            div: self.profile.div,
            cov: self.profile.cov,
            n_query_tasks: self.retrievals.len(),
            n_retrieving: self.evidence.n_retrieving,
            per_skill,
        }
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.retrievals.iter().map(|(id, _)| id.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillUtilityReport {
    pub skill_id: SkillId,
    pub n_retrieved: usize,
    pub mean_delta: Option<f64>,
}

/// JSON profile report for one bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub bank_id: String,
    pub util: f64,
    pub div: f64,
    pub cov: f64,
    pub n_query_tasks: usize,
    #[serde(rename = "N_R")]
    pub n_retrieving: usize,
    pub per_skill: Vec<SkillUtilityReport>,
}

struct TaskOutcome {
    task_id: String,
    retrieval: RetrievalResult,
    /// (skill, r_with, r_without) in rank order.
    pairs: Vec<(SkillId, f64, f64)>,
}

/// Retrieve, roll out and replay every task, then assemble the profile.
///
/// Tasks are processed in parallel; the reduction runs in task-id order so
/// results do not depend on scheduling.
pub fn evaluate_profile(
    bank: &SkillBank,
    tasks: &[TaskQuery],
    worker: &dyn Worker,
    retriever: &HybridRetriever,
    cache: &ReplayCache,
    epsilon_reg: f64,
) -> Result<Evaluation> {
    if tasks.is_empty() {
        return Err(Error::invalid("evaluation split is empty"));
    }
    let mut ordered: Vec<&TaskQuery> = tasks.iter().collect();
    ordered.sort_by(|a, b| a.task_id.cmp(&b.task_id));

    let outcomes: Vec<TaskOutcome> = ordered
        .par_iter()
        .map(|task| -> Result<TaskOutcome> {
            let retrieval = retriever.retrieve(&task.text, bank)?;
            let skills = retrieval.skills(bank);
            let mut pairs = Vec::with_capacity(skills.len());
            if !skills.is_empty() {
                let factual = rollout(worker, task, &skills, cache)?;
                for s in &skills {
                    let cf = loo_replay(worker, task, &skills, s.id(), cache)?;
                    pairs.push((s.id().clone(), factual.reward, cf.reward));
                }
            }
            Ok(TaskOutcome {
                task_id: task.task_id.clone(),
                retrieval,
                pairs,
            })
        })
        .collect::<Result<_>>()?;

    let mut evidence = UtilityEvidence::default();
    let mut retrievals = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        if !o.retrieval.is_empty() {
            evidence.n_retrieving += 1;
        }
        for (id, with, without) in o.pairs {
            evidence
                .per_skill
                .entry(id)
                .or_default()
                .push((with, without));
        }
        retrievals.push((o.task_id, o.retrieval));
    }

    let results: Vec<RetrievalResult> = retrievals.iter().map(|(_, r)| r.clone()).collect();
    let profile = ObjectiveProfile {
        util: bank_utility(&evidence)?,
        div: diversity(bank, epsilon_reg)?,
        cov: coverage(&results, bank, retriever.config().k_top),
    };
    Ok(Evaluation {
        profile,
        evidence,
        retrievals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::RetrievedEntry;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn delta_examples() {
        assert_eq!(delta(1.0, 0.0).unwrap(), 1.0);
        for x in [0.0, 0.25, 1.0] {
            assert_eq!(delta(x, x).unwrap(), 0.0);
        }
        assert!(close(delta(0.4, 0.7).unwrap(), -0.3, 1e-15));
        assert!(delta(1.2, 0.0).is_err());
        assert!(delta(0.0, -0.1).is_err());
    }

    #[test]
    fn skill_utility_examples() {
        let p = |ds: &[f64]| -> Vec<(f64, f64)> {
            ds.iter()
                .map(|&d| if d >= 0.0 { (d, 0.0) } else { (0.0, -d) })
                .collect()
        };
        assert_eq!(skill_utility(&p(&[1.0, 1.0, 1.0])).unwrap(), Some(1.0));
        assert_eq!(skill_utility(&p(&[1.0, -1.0])).unwrap(), Some(0.0));
        assert!(close(
            skill_utility(&p(&[1.0, 0.0, 0.0])).unwrap().unwrap(),
            1.0 / 3.0,
            1e-15
        ));
        assert_eq!(skill_utility(&[]).unwrap(), None);
    }

    #[test]
    fn bank_utility_examples() {
        let mut ev = UtilityEvidence {
            n_retrieving: 4,
            ..Default::default()
        };
        ev.per_skill.insert(
            "a".into(),
            vec![(1.0, 0.0), (1.0, 1.0), (0.0, 0.0), (0.5, 0.0)],
        );
        // mean delta = (1 + 0 + 0 + 0.5) / 4 = 0.375; weight 1.
        assert!(close(bank_utility(&ev).unwrap(), 0.375, 1e-15));

        let mut ev = UtilityEvidence {
            n_retrieving: 4,
            ..Default::default()
        };
        ev.per_skill.insert(
            "a".into(),
            vec![(1.0, 0.0), (1.0, 1.0), (1.0, 0.0), (0.5, 0.5)],
        );
        assert!(close(bank_utility(&ev).unwrap(), 0.5, 1e-15));

        // N_R = 4; a: 3 pairs, mean 1/3; b: 2 pairs, mean 0.5 -> 0.25 + 0.25.
        let mut ev = UtilityEvidence {
            n_retrieving: 4,
            ..Default::default()
        };
        ev.per_skill
            .insert("a".into(), vec![(1.0, 0.0), (0.0, 0.0), (1.0, 1.0)]);
        ev.per_skill
            .insert("b".into(), vec![(1.0, 0.0), (0.0, 0.0)]);
        assert!(close(bank_utility(&ev).unwrap(), 0.5, 1e-15));

        assert_eq!(bank_utility(&UtilityEvidence::default()).unwrap(), 0.0);
    }

    fn unit(i: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn diversity_examples() {
        let (a, b) = (unit(0, 4), unit(1, 4));
        assert_eq!(diversity_of(&[&a, &b], 1e-6).unwrap(), 1.0);
        assert_eq!(diversity_of(&[&a], 1e-6).unwrap(), 1.0);
        assert_eq!(diversity_of(&[], 1e-6).unwrap(), 0.0);

        // [[1+e, 1], [1, 1+e]] has determinant (1+e)^2 - 1 = 2e + e^2.
        let eps: f64 = 1e-6;
        let expected = (2.0 * eps + eps * eps).sqrt();
        let got = diversity_of(&[&a, &a], eps).unwrap();
        assert!(close(got, expected, 1e-12), "{got} vs {expected}");
        assert!(close(got, 1.4142e-3, 1e-7));
    }

    #[test]
    fn diversity_rejects_non_unit() {
        let v = vec![2.0, 0.0];
        assert!(diversity_of(&[&v], 1e-6).is_err());
    }

    #[test]
    fn lu_fallback_agrees_with_cholesky() {
        let m = vec![4.0, 2.0, 0.6, 2.0, 2.0, 0.5, 0.6, 0.5, 3.0];
        let a = log_det_spd(&m, 3).unwrap();
        let b = log_abs_det_lu(m, 3);
        assert!(close(a, b, 1e-12));
    }

    fn result(ids: &[&str]) -> RetrievalResult {
        RetrievalResult {
            query_text: "q".into(),
            entries: ids
                .iter()
                .enumerate()
                .map(|(i, id)| RetrievedEntry {
                    skill_id: SkillId::from(*id),
                    combined_score: 1.0,
                    bm25_norm: 1.0,
                    cosine: 1.0,
                    rank: i + 1,
                })
                .collect(),
        }
    }

    fn bank_of(names: &[&str]) -> SkillBank {
        use crate::embedding::TrigramHashEmbedder;
        use crate::skill::{Origin, Provenance, Skill};
        let e = TrigramHashEmbedder::default();
        let prov = Provenance {
            round_created: 0,
            origin: Origin::Add,
        };
        let skills = names
            .iter()
            .map(|n| {
                let s = Skill::new(*n, "p", "w", prov, &e).unwrap();
                Skill::from_parts(
                    SkillId::from(*n),
                    n.to_string(),
                    "p".into(),
                    "w".into(),
                    s.embedding().to_vec(),
                    prov,
                )
                .unwrap()
            })
            .collect();
        SkillBank::new(skills, 0).unwrap()
    }

    #[test]
    fn coverage_examples() {
        let bank = bank_of(&["a", "b", "c"]);
        let full = vec![result(&["a", "b", "c"]), result(&["c", "b", "a"])];
        assert_eq!(coverage(&full, &bank, 3), 1.0);

        let bank4 = bank_of(&["a", "b", "c", "d"]);
        let rs = vec![
            result(&["a", "b", "c"]),
            result(&["a", "b", "c"]),
            result(&[]),
            result(&[]),
        ];
        assert!(close(coverage(&rs, &bank4, 3), 0.375, 1e-15));

        assert_eq!(coverage(&[result(&[]), result(&[])], &bank, 3), 0.0);
        assert_eq!(coverage(&full, &SkillBank::empty(0), 3), 0.0);
    }

    #[test]
    fn objective_set_names() {
        assert_eq!(
            ObjectiveSet::from_names(&["util", "cov"]).unwrap().names(),
            vec!["util", "cov"]
        );
        assert!(ObjectiveSet::from_names(&["div", "cov"]).is_err());
        assert!(ObjectiveSet::from_names(&["util", "speed"]).is_err());
        let p = ObjectiveProfile::new(0.1, 0.2, 0.3);
        assert_eq!(
            ObjectiveSet {
                div: false,
                cov: true
            }
            .project(&p),
            vec![0.1, 0.3]
        );
    }
}
