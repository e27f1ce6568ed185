//! Deterministic synthetic task world.
//!
//! Every task requires one capability tag and is either solvable without help
//! or not. Skills declare which tags they help or hurt through an annotation
//! at the end of their `when_to_apply` text:
//!
//! ```text
//! tags: helpful=heat,cool; harmful=slice
//! ```
//!
//! A rollout earns reward 1 when the task is base-solvable, or when some
//! retrieved skill is helpful for the task's tag and no retrieved skill is
//! harmful for it. Otherwise the reward is 0.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rollout::{Split, TaskQuery, Trajectory, Worker};
use crate::skill::Skill;

/// Helpful/harmful tag sets parsed from a skill's `when_to_apply`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TagAnnotation {
    pub helpful: BTreeSet<String>,
    pub harmful: BTreeSet<String>,
}

const MARKER: &str = "tags:";

impl TagAnnotation {
    /// Parse the annotation following the last `tags:` marker. Text without
    /// a marker yields empty sets.
    pub fn parse(when_to_apply: &str) -> Self {
        let Some(pos) = when_to_apply.rfind(MARKER) else {
            return Self::default();
        };
        let mut out = Self::default();
        for part in when_to_apply[pos + MARKER.len()..].split(';') {
            let Some((name, list)) = part.split_once('=') else {
                continue;
            };
            let set = match name.trim() {
                "helpful" => &mut out.helpful,
                "harmful" => &mut out.harmful,
                _ => continue,
            };
            set.extend(
                list.split(',')
                    .map(str::trim)
                    .filter(|t| !t.is_empty())
                    .map(String::from),
            );
        }
        out
    }

    pub fn of(skill: &Skill) -> Self {
        Self::parse(skill.when_to_apply())
    }

    pub fn render(&self) -> String {
        let join = |s: &BTreeSet<String>| s.iter().cloned().collect::<Vec<_>>().join(",");
        format!(
            "{MARKER} helpful={}; harmful={}",
            join(&self.helpful),
            join(&self.harmful)
        )
    }

    /// Every tag the annotation mentions.
    pub fn mentioned(&self) -> BTreeSet<String> {
        self.helpful.union(&self.harmful).cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldTask {
    pub task_id: String,
    pub text: String,
    pub split: Split,
    pub required_tag: String,
    pub base_solvable: bool,
}

impl WorldTask {
    pub fn query(&self) -> TaskQuery {
        TaskQuery {
            task_id: self.task_id.clone(),
            text: self.text.clone(),
            split: self.split,
            category: Some(self.required_tag.clone()),
        }
    }
}

/// The world file: tags, tasks across the three splits, and the side
/// effects a distilled skill for a tag carries (tags it is harmful for).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub tags: Vec<String>,
    pub tasks: Vec<WorldTask>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub distill_side_effects: BTreeMap<String, Vec<String>>,
}

impl SyntheticWorld {
    pub fn validate(&self) -> Result<()> {
        let tags: HashSet<&str> = self.tags.iter().map(String::as_str).collect();
        if tags.len() != self.tags.len() {
            return Err(Error::Validation("duplicate tag in world".into()));
        }
        let mut ids = HashSet::new();
        for t in &self.tasks {
            if !ids.insert(t.task_id.as_str()) {
                // Ids are unique across the whole file, so splits are disjoint.
                return Err(Error::Validation(format!(
                    "task id {} appears more than once",
                    t.task_id
                )));
            }
            if !tags.contains(t.required_tag.as_str()) {
                return Err(Error::Validation(format!(
                    "task {} requires unknown tag {}",
                    t.task_id, t.required_tag
                )));
            }
            if t.text.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "task {} has empty text",
                    t.task_id
                )));
            }
        }
        for (tag, effects) in &self.distill_side_effects {
            for e in std::iter::once(tag).chain(effects) {
                if !tags.contains(e.as_str()) {
                    return Err(Error::Validation(format!(
                        "side effect names unknown tag {e}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Tasks of one split, sorted by task id.
    pub fn split(&self, split: Split) -> Vec<TaskQuery> {
        let mut v: Vec<TaskQuery> = self
            .tasks
            .iter()
            .filter(|t| t.split == split)
            .map(WorldTask::query)
            .collect();
        v.sort_by(|a, b| a.task_id.cmp(&b.task_id));
        v
    }

    pub fn task(&self, task_id: &str) -> Option<&WorldTask> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("world serialization cannot fail");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, location: &str) -> Result<Self> {
        let w: Self = serde_json::from_str(text).map_err(|e| Error::Parse {
            location: location.to_string(),
            message: e.to_string(),
        })?;
        w.validate()?;
        Ok(w)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Short digest of the world content; feeds the worker version tag.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))[..12].to_string()
    }
}

/// The reward rule, applied directly.
pub fn synthetic_reward(task: &WorldTask, retrieved: &[&Skill]) -> f64 {
    if task.base_solvable {
        return 1.0;
    }
    let notes: Vec<TagAnnotation> = retrieved.iter().map(|s| TagAnnotation::of(s)).collect();
    let helped = notes.iter().any(|n| n.helpful.contains(&task.required_tag));
    let harmed = notes.iter().any(|n| n.harmful.contains(&task.required_tag));
    if helped && !harmed {
        1.0
    } else {
        0.0
    }
}

/// Deterministic worker over a [`SyntheticWorld`].
pub struct SyntheticWorker {
    tasks: HashMap<String, WorldTask>,
    success_threshold: f64,
    version: String,
    calls: AtomicU64,
}

impl SyntheticWorker {
    pub fn new(world: &SyntheticWorld, success_threshold: f64) -> Self {
        Self {
            tasks: world
                .tasks
                .iter()
                .map(|t| (t.task_id.clone(), t.clone()))
                .collect(),
            success_threshold,
            version: format!("synthetic-v1/{}/thr={success_threshold}", world.digest()),
            calls: AtomicU64::new(0),
        }
    }

    /// Number of rollouts actually executed (cache hits excluded).
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl Worker for SyntheticWorker {
    fn version_tag(&self) -> String {
        self.version.clone()
    }

    fn rollout(&self, task: &TaskQuery, retrieved: &[&Skill]) -> Result<Trajectory> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let world_task = self
            .tasks
            .get(&task.task_id)
            .ok_or_else(|| Error::Rollout {
                task_id: task.task_id.clone(),
                message: "task is not part of the synthetic world".into(),
            })?;
        Ok(Trajectory::new(
            &task.task_id,
            retrieved.iter().map(|s| s.id().clone()).collect(),
            synthetic_reward(world_task, retrieved),
            1,
            self.success_threshold,
        ))
    }
}

/// Parameters for [`generate_world`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldParams {
    pub n_tags: usize,
    pub n_tasks_per_split: usize,
    pub solvable_fraction: f64,
    pub seed: u64,
}

const TAG_WORDS: &[&str] = &[
    "heat", "cool", "clean", "slice", "stack", "light", "water", "fold", "sort", "pack", "paint",
    "weigh", "mix", "seal", "dry", "polish",
];
const OBJECTS: &[&str] = &[
    "mug", "apple", "plate", "towel", "lamp", "book", "bottle", "knife", "pan", "potato", "box",
    "vase",
];
const PLACES: &[&str] = &[
    "shelf", "counter", "table", "cabinet", "drawer", "desk", "sink", "fridge",
];

fn tag_name(i: usize) -> String {
    match TAG_WORDS.get(i) {
        Some(w) => (*w).to_string(),
        None => format!("skill{i}"),
    }
}

/// Generate a world from a seed. Solvability is drawn per tag, so every task
/// of a tag shares it; about a quarter of tags get a distillation side effect
/// that makes their skill harmful for one other tag.
pub fn generate_world(p: WorldParams) -> Result<SyntheticWorld> {
    if !(0.0..=1.0).contains(&p.solvable_fraction) {
        return Err(Error::invalid(format!(
            "solvable_fraction must lie in [0, 1], got {}",
            p.solvable_fraction
        )));
    }
    if p.n_tags == 0 {
        return Err(Error::invalid("n_tags must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let tags: Vec<String> = (0..p.n_tags).map(tag_name).collect();
    let solvable: Vec<bool> = tags
        .iter()
        .map(|_| rng.gen_bool(p.solvable_fraction))
        .collect();

    let mut distill_side_effects = BTreeMap::new();
    if tags.len() > 1 {
        for (i, tag) in tags.iter().enumerate() {
            if rng.gen_bool(0.25) {
                let mut j = rng.gen_range(0..tags.len() - 1);
                if j >= i {
                    j += 1;
                }
                distill_side_effects.insert(tag.clone(), vec![tags[j].clone()]);
            }
        }
    }

    let mut tasks = Vec::new();
    for split in [Split::Support, Split::Query, Split::Test] {
        for n in 0..p.n_tasks_per_split {
            let ti = rng.gen_range(0..tags.len());
            let object = OBJECTS.choose(&mut rng).expect("non-empty");
            let place = PLACES.choose(&mut rng).expect("non-empty");
            tasks.push(WorldTask {
                task_id: format!("{split}-{n:03}"),
                text: format!("{} the {object} and put it on the {place}", tags[ti]),
                split,
                required_tag: tags[ti].clone(),
                base_solvable: solvable[ti],
            });
        }
    }

    let world = SyntheticWorld {
        tags,
        tasks,
        distill_side_effects,
    };
    world.validate()?;
    Ok(world)
}
