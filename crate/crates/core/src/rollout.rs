//! Worker abstraction, trajectories, quadrant partitioning and
//! leave-one-out replay.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cache::{make_key, LookupKind, ReplayCache};
use crate::error::{Error, Result};
use crate::skill::{Skill, SkillId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Support,
    Query,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Support => "support",
            Split::Query => "query",
            Split::Test => "test",
        })
    }
}

/// A task the worker can be asked to solve. `category` is the task family
/// label (e.g. "heat"), used by rule-based proposers to cluster failures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskQuery {
    pub task_id: String,
    pub text: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

/// One rollout record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    /// Retrieved skills in rank order.
    pub retrieved: Vec<SkillId>,
    pub reward: f64,
    pub success: bool,
    pub steps: u32,
}

impl Trajectory {
    pub fn new(
        task_id: impl Into<String>,
        retrieved: Vec<SkillId>,
        reward: f64,
        steps: u32,
        success_threshold: f64,
    ) -> Self {
        Self {
            task_id: task_id.into(),
            retrieved,
            reward,
            success: reward >= success_threshold,
            steps,
        }
    }
}

/// The frozen task-executing agent.
pub trait Worker: Send + Sync {
    /// Identifies model and prompt template; part of every cache key.
    fn version_tag(&self) -> String;

    fn rollout(&self, task: &TaskQuery, retrieved: &[&Skill]) -> Result<Trajectory>;
}

/// Roll out `task` conditioned on `retrieved` (rank order), through the cache.
pub fn rollout(
    worker: &dyn Worker,
    task: &TaskQuery,
    retrieved: &[&Skill],
    cache: &ReplayCache,
) -> Result<Trajectory> {
    cached(worker, task, retrieved, cache, LookupKind::Factual)
}

/// Replay `task` with `excluded` removed from `retrieved`, keeping the rank
/// order of the remaining skills.
pub fn loo_replay(
    worker: &dyn Worker,
    task: &TaskQuery,
    retrieved: &[&Skill],
    excluded: &SkillId,
    cache: &ReplayCache,
) -> Result<Trajectory> {
    if !retrieved.iter().any(|s| s.id() == excluded) {
        return Err(Error::invalid(format!(
            "skill {excluded} is not in the retrieval set of task {}",
            task.task_id
        )));
    }
    let remaining: Vec<&Skill> = retrieved
        .iter()
        .copied()
        .filter(|s| s.id() != excluded)
        .collect();
    cached(worker, task, &remaining, cache, LookupKind::LeaveOneOut)
}

fn cached(
    worker: &dyn Worker,
    task: &TaskQuery,
    retrieved: &[&Skill],
    cache: &ReplayCache,
    kind: LookupKind,
) -> Result<Trajectory> {
    let key = make_key(&worker.version_tag(), &task.task_id, retrieved);
    cache.fetch_or_run(&key, kind, || worker.rollout(task, retrieved))
}

/// Trajectories split by outcome and by whether anything was retrieved.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuadrantPartition<T> {
    pub succ_no_ret: Vec<T>,
    pub fail_no_ret: Vec<T>,
    pub succ_ret: Vec<T>,
    pub fail_ret: Vec<T>,
}

impl<T> QuadrantPartition<T> {
    pub fn len(&self) -> usize {
        self.succ_no_ret.len() + self.fail_no_ret.len() + self.succ_ret.len() + self.fail_ret.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn partition_quadrants(trajectories: Vec<Trajectory>) -> QuadrantPartition<Trajectory> {
    partition_by(trajectories, |t| t)
}

/// Partition arbitrary records carrying a trajectory.
pub fn partition_by<T>(
    items: Vec<T>,
    trajectory: impl Fn(&T) -> &Trajectory,
) -> QuadrantPartition<T> {
    let mut q = QuadrantPartition {
        succ_no_ret: Vec::new(),
        fail_no_ret: Vec::new(),
        succ_ret: Vec::new(),
        fail_ret: Vec::new(),
    };
    for item in items {
        let t = trajectory(&item);
        match (t.success, t.retrieved.is_empty()) {
            (true, true) => q.succ_no_ret.push(item),
            (false, true) => q.fail_no_ret.push(item),
            (true, false) => q.succ_ret.push(item),
            (false, false) => q.fail_ret.push(item),
        }
    }
    q
}
