use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{EditPools, EditSelection, Proposer};
use crate::error::{Error, Result};
use crate::skill::{Skill, SkillBank, SkillId};

/// Edits a candidate bank applies relative to the bank it was planned from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedEdits {
    pub added: Vec<SkillId>,
    /// `(original, replacement)` pairs.
    pub rewritten: Vec<(SkillId, SkillId)>,
    pub removed: Vec<SkillId>,
}

impl AppliedEdits {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.rewritten.is_empty() && self.removed.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateBank {
    pub bank: SkillBank,
    pub applied: AppliedEdits,
}

/// Deterministic candidate order over the non-empty pools:
///
/// 1. everything applied;
/// 2. each operation alone (add, rewrite, remove);
/// 3. each pair of operations;
/// 4. each single edit alone;
/// 5. everything except one edit.
///
/// Duplicate selections are dropped, first occurrence wins.
pub fn enumerate_selections(pools: &EditPools) -> Vec<EditSelection> {
    let all = |n: usize| (0..n).collect::<Vec<_>>();
    let groups = [
        all(pools.add.len()),
        all(pools.rewrite.len()),
        all(pools.remove.len()),
    ];
    let make = |mask: [bool; 3]| EditSelection {
        adds: if mask[0] { groups[0].clone() } else { vec![] },
        rewrites: if mask[1] { groups[1].clone() } else { vec![] },
        removes: if mask[2] { groups[2].clone() } else { vec![] },
    };

    let mut out = vec![make([true, true, true])];
    for g in 0..3 {
        let mut m = [false; 3];
        m[g] = true;
        out.push(make(m));
    }
    for (a, b) in [(0, 1), (0, 2), (1, 2)] {
        let mut m = [false; 3];
        m[a] = true;
        m[b] = true;
        out.push(make(m));
    }
    for (g, items) in groups.iter().enumerate() {
        for &i in items {
            let mut s = EditSelection::default();
            [&mut s.adds, &mut s.rewrites, &mut s.removes][g].push(i);
            out.push(s);
        }
    }
    for (g, items) in groups.iter().enumerate() {
        for &i in items {
            let mut s = make([true, true, true]);
            [&mut s.adds, &mut s.rewrites, &mut s.removes][g].retain(|&x| x != i);
            out.push(s);
        }
    }

    let mut seen = HashSet::new();
    out.retain(|s| {
        let empty = s.adds.is_empty() && s.rewrites.is_empty() && s.removes.is_empty();
        !empty && seen.insert(s.clone())
    });
    out
}

fn check_indices(kind: &str, idx: &[usize], len: usize) -> Result<()> {
    let mut seen = HashSet::new();
    for &i in idx {
        if i >= len || !seen.insert(i) {
            return Err(Error::Validation(format!(
                "selection has invalid or repeated {kind} index {i}"
            )));
        }
    }
    Ok(())
}

/// Apply `selection` to `bank`. Rewrites replace the original in place,
/// removals drop skills, adds are appended in pool order. A replacement or
/// add whose id is already present is not inserted twice.
pub fn compose(
    bank: &SkillBank,
    pools: &EditPools,
    selection: &EditSelection,
    round: u32,
) -> Result<CandidateBank> {
    check_indices("add", &selection.adds, pools.add.len())?;
    check_indices("rewrite", &selection.rewrites, pools.rewrite.len())?;
    check_indices("remove", &selection.removes, pools.remove.len())?;

    let mut applied = AppliedEdits::default();
    let mut skills: Vec<Option<Skill>> = bank.skills().iter().cloned().map(Some).collect();
    let position = |id: &SkillId| bank.skills().iter().position(|s| s.id() == id);

    for &i in &selection.rewrites {
        let (orig, new) = &pools.rewrite[i];
        let pos = position(orig)
            .ok_or_else(|| Error::Validation(format!("rewrite of unknown skill {orig}")))?;
        skills[pos] = Some(new.clone());
        applied.rewritten.push((orig.clone(), new.id().clone()));
    }
    for &i in &selection.removes {
        let id = &pools.remove[i];
        let pos = position(id)
            .ok_or_else(|| Error::Validation(format!("removal of unknown skill {id}")))?;
        skills[pos] = None;
        applied.removed.push(id.clone());
    }

    let mut seen = HashSet::new();
    let mut out: Vec<Skill> = Vec::with_capacity(skills.len() + selection.adds.len());
    for s in skills.into_iter().flatten() {
        if seen.insert(s.id().clone()) {
            out.push(s);
        }
    }
    for &i in &selection.adds {
        let s = &pools.add[i];
        if seen.insert(s.id().clone()) {
            applied.added.push(s.id().clone());
            out.push(s.clone());
        }
    }

    Ok(CandidateBank {
        bank: SkillBank::new(out, round)?,
        applied,
    })
}

/// Validate the pools, ask the planner for selections, and compose up to
/// `k` distinct banks, none equal to the current bank. Every kept skill
/// is present, unchanged, in every result.
pub fn plan_edits(
    planner: &dyn Proposer,
    bank: &SkillBank,
    pools: &EditPools,
    k: usize,
    round: u32,
) -> Result<Vec<CandidateBank>> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    pools.validate(bank)?;
    if pools.is_empty() {
        return Ok(Vec::new());
    }
    let selections = planner.plan(bank, pools, k)?;

    let mut seen: HashSet<String> = HashSet::from([bank.bank_id().to_string()]);
    let mut out = Vec::new();
    for sel in &selections {
        let cand = compose(bank, pools, sel, round)?;
        if !seen.insert(cand.bank.bank_id().to_string()) {
            continue;
        }
        for id in &pools.keep {
            let original = bank.get(id).expect("validated");
            let kept = cand.bank.get(id).ok_or_else(|| {
                Error::Validation(format!("candidate dropped protected skill {id}"))
            })?;
            debug_assert_eq!(original.canonical_bytes(), kept.canonical_bytes());
        }
        out.push(cand);
        if out.len() == k {
            break;
        }
    }
    Ok(out)
}
