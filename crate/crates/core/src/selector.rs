//! Pareto-aware selection over candidate banks.
//!
//! Selection keeps the non-dominated front, admits to a tie pool every front
//! member whose utility is within `epsilon` of the best utility on the
//! front, and breaks ties inside the pool by 2-D hypervolume contribution
//! over (diversity, coverage). Equal contributions fall through a fixed
//! chain: null candidate first, then higher diversity, higher coverage,
//! smaller bank, and finally bank reference.

use std::cmp::Ordering;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{ObjectiveProfile, ObjectiveSet};

pub const DEFAULT_EPSILON_TOL: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub bank_ref: String,
    pub profile: ObjectiveProfile,
    pub is_null: bool,
    pub bank_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub bank_ref: String,
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub winner: Candidate,
    pub front: Vec<Candidate>,
    pub tie_pool: Vec<Candidate>,
    pub u_max: f64,
    pub contributions: Vec<Contribution>,
}

impl SelectionOutcome {
    /// The current bank carries forward unchanged.
    pub fn carry_forward(&self) -> bool {
        self.winner.is_null
    }
}

/// `a` is at least as good as `b` on every enabled objective and strictly
/// better on one.
pub fn dominates(a: &ObjectiveProfile, b: &ObjectiveProfile, objectives: ObjectiveSet) -> bool {
    let (pa, pb) = (objectives.project(a), objectives.project(b));
    let mut strict = false;
    for (x, y) in pa.iter().zip(&pb) {
        if x < y {
            return false;
        }
        if x > y {
            strict = true;
        }
    }
    strict
}

/// Candidates dominated by no other candidate, in input order.
pub fn pareto_front(candidates: &[Candidate], objectives: ObjectiveSet) -> Result<Vec<Candidate>> {
    if candidates.is_empty() {
        return Err(Error::invalid("pareto front of an empty candidate set"));
    }
    Ok(candidates
        .iter()
        .filter(|c| {
            !candidates
                .iter()
                .any(|o| dominates(&o.profile, &c.profile, objectives))
        })
        .cloned()
        .collect())
}

fn check_points(points: &[(f64, f64)]) -> Result<()> {
    for &(x, y) in points {
        if !(x.is_finite() && y.is_finite()) || x < 0.0 || y < 0.0 {
            return Err(Error::invalid(format!(
                "hypervolume point ({x}, {y}) must be finite and non-negative"
            )));
        }
    }
    Ok(())
}

/// Area of the union of rectangles `[0, x] x [0, y]` (reference at the origin).
pub fn hypervolume_2d(points: &[(f64, f64)]) -> Result<f64> {
    check_points(points)?;
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
    Ok(sweep(&sorted))
}

/// Sweep over points sorted by x descending.
fn sweep(sorted: &[(f64, f64)]) -> f64 {
    let mut area = 0.0;
    let mut y_top = 0.0f64;
    for &(x, y) in sorted {
        if y > y_top {
            area += x * (y - y_top);
            y_top = y;
        }
    }
    area
}

/// Area lost when `pool[index]` is removed from `pool`.
pub fn hv_contribution(index: usize, pool: &[(f64, f64)]) -> Result<f64> {
    if index >= pool.len() {
        return Err(Error::invalid("candidate is not in the pool"));
    }
    let with = hypervolume_2d(pool)?;
    let rest: Vec<(f64, f64)> = pool
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != index)
        .map(|(_, &p)| p)
        .collect();
    let without = hypervolume_2d(&rest)?;
    Ok((with - without).max(0.0))
}

/// Regularizer coordinates of a candidate. A disabled objective contributes
/// a constant 1, so only enabled regularizers separate candidates.
fn regularizer_point(p: &ObjectiveProfile, objectives: ObjectiveSet) -> (f64, f64) {
    (
        if objectives.div { p.div } else { 1.0 },
        if objectives.cov { p.cov } else { 1.0 },
    )
}

static SELECTIONS: AtomicU64 = AtomicU64::new(0);
static GUARANTEE_VIOLATIONS: AtomicU64 = AtomicU64::new(0);

/// Process-wide `(selections, violations)` of the guarantee
/// `util(winner) >= util(null) - epsilon`.
pub fn guarantee_audit() -> (u64, u64) {
    (
        SELECTIONS.load(AtomicOrdering::Relaxed),
        GUARANTEE_VIOLATIONS.load(AtomicOrdering::Relaxed),
    )
}

pub fn select(
    candidates: &[Candidate],
    epsilon_tol: f64,
    objectives: ObjectiveSet,
) -> Result<SelectionOutcome> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidates to select from"));
    }
    let nulls: Vec<&Candidate> = candidates.iter().filter(|c| c.is_null).collect();
    if nulls.len() != 1 {
        return Err(Error::invalid(format!(
            "expected exactly one null candidate, found {}",
            nulls.len()
        )));
    }
    let null_util = nulls[0].profile.util;

    let front = pareto_front(candidates, objectives)?;
    let u_max = front
        .iter()
        .map(|c| c.profile.util)
        .fold(f64::NEG_INFINITY, f64::max);
    let floor = u_max - epsilon_tol;
    let tie_pool: Vec<Candidate> = front
        .iter()
        .filter(|c| c.profile.util >= floor)
        .cloned()
        .collect();

    let points: Vec<(f64, f64)> = tie_pool
        .iter()
        .map(|c| regularizer_point(&c.profile, objectives))
        .collect();
    let mut contributions = Vec::with_capacity(tie_pool.len());
    for (i, c) in tie_pool.iter().enumerate() {
        contributions.push(Contribution {
            bank_ref: c.bank_ref.clone(),
            contribution: hv_contribution(i, &points)?,
        });
    }

    let winner_idx = if tie_pool.len() == 1 {
        0
    } else {
        (0..tie_pool.len())
            .min_by(|&a, &b| {
                rank_order(
                    (&tie_pool[a], contributions[a].contribution),
                    (&tie_pool[b], contributions[b].contribution),
                    objectives,
                )
            })
            .expect("tie pool is non-empty")
    };
    let winner = tie_pool[winner_idx].clone();

    SELECTIONS.fetch_add(1, AtomicOrdering::Relaxed);
    if winner.profile.util < null_util - epsilon_tol {
        GUARANTEE_VIOLATIONS.fetch_add(1, AtomicOrdering::Relaxed);
        log::error!(
            "non-degradation violated: winner util {} < null util {} - {}",
            winner.profile.util,
            null_util,
            epsilon_tol
        );
    }

    Ok(SelectionOutcome {
        winner,
        front,
        tie_pool,
        u_max,
        contributions,
    })
}

/// `Less` means `a` ranks ahead of `b`.
fn rank_order(
    (a, ca): (&Candidate, f64),
    (b, cb): (&Candidate, f64),
    objectives: ObjectiveSet,
) -> Ordering {
    cb.total_cmp(&ca)
        .then_with(|| b.is_null.cmp(&a.is_null))
        .then_with(|| {
            if objectives.div {
                b.profile.div.total_cmp(&a.profile.div)
            } else {
                Ordering::Equal
            }
        })
        .then_with(|| {
            if objectives.cov {
                b.profile.cov.total_cmp(&a.profile.cov)
            } else {
                Ordering::Equal
            }
        })
        .then_with(|| a.bank_size.cmp(&b.bank_size))
        .then_with(|| a.bank_ref.cmp(&b.bank_ref))
}
