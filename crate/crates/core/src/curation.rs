//! The curation loop: cold start, then per round an inner loop that turns
//! support-split evidence into candidate banks and an outer step that picks
//! the next bank on the query split.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{CacheStats, ReplayCache};
use crate::config::{ProposerMode, RunConfig};
use crate::embedding::{EmbeddingProvider, TrigramHashEmbedder};
use crate::error::{Error, Result};
use crate::objectives::{evaluate_profile, ObjectiveProfile, ObjectiveSet};
use crate::proposers::{
    plan_edits, AppliedEdits, CandidateBank, CaseRecord, EditOps, EditPools, EvidencePair,
    Proposer, RemoteProposer, RuleBasedProposer, VerdictKind,
};
use crate::retrieval::HybridRetriever;
use crate::rollout::{
    loo_replay, partition_by, rollout, QuadrantPartition, Split, TaskQuery, Worker,
};
use crate::selector::{select, Candidate, SelectionOutcome};
use crate::skill::{save_bank, Origin, Skill, SkillBank, SkillId};
use crate::world::{SyntheticWorker, SyntheticWorld};

/// Loop parameters that do not concern the environment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopSettings {
    pub candidates: usize,
    pub epsilon_tol: f64,
    pub epsilon_reg: f64,
    pub objectives: ObjectiveSet,
    pub edit_ops: EditOps,
}

impl From<&RunConfig> for LoopSettings {
    fn from(c: &RunConfig) -> Self {
        Self {
            candidates: c.candidates,
            epsilon_tol: c.epsilon_tol,
            epsilon_reg: c.epsilon_reg,
            objectives: c.objectives,
            edit_ops: c.edit_ops,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub added: usize,
    pub rewritten: usize,
    pub removed: usize,
    /// Skills carried over from the previous bank unchanged.
    pub kept: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub skill_id: SkillId,
    pub verdict: VerdictKind,
    pub n_pairs: usize,
    pub mean_delta: f64,
    pub rewritten_id: Option<SkillId>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSizes {
    pub add: usize,
    pub rewrite: usize,
    pub remove: usize,
    pub keep: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub bank_ref: String,
    pub is_null: bool,
    pub bank_size: usize,
    pub profile: ObjectiveProfile,
    pub skill_ids: Vec<SkillId>,
    pub applied: AppliedEdits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedCandidate {
    pub bank_ref: String,
    pub error: String,
}

/// Which task ids fed which phase.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitAudit {
    /// Tasks rolled out in the inner loop.
    pub support_task_ids: Vec<String>,
    /// Tasks whose trajectories reached the distiller or diagnoser.
    pub evidence_task_ids: Vec<String>,
    /// Tasks used to evaluate objective profiles.
    pub query_task_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    pub bank_id: String,
    pub bank_size: usize,
    pub profile: ObjectiveProfile,
    pub winner_is_null: bool,
    /// Non-null candidates that were evaluated.
    pub n_candidates: usize,
    pub edit_counts: EditCounts,
    pub applied: AppliedEdits,
    pub cache_hit_rate: f64,
    pub loo_hit_rate: f64,
    pub pools: PoolSizes,
    pub verdicts: Vec<VerdictRecord>,
    pub candidates: Vec<CandidateRecord>,
    pub failed_candidates: Vec<FailedCandidate>,
    pub selection: SelectionOutcome,
    pub audit: SplitAudit,
    /// Kept out of the JSON report so reports stay reproducible.
    #[serde(skip)]
    pub wall_time: Duration,
}

/// Result of one inner loop.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerOutcome {
    pub candidates: Vec<CandidateBank>,
    pub pools: EditPools,
    pub verdicts: Vec<VerdictRecord>,
    pub support_task_ids: Vec<String>,
    pub evidence_task_ids: Vec<String>,
}

/// Result of one outer step, before it is folded into a [`RoundReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct OuterOutcome {
    pub next_bank: SkillBank,
    pub selection: SelectionOutcome,
    pub winner_applied: AppliedEdits,
    pub candidates: Vec<CandidateRecord>,
    pub failed: Vec<FailedCandidate>,
    pub query_task_ids: Vec<String>,
}

/// Support-split trajectories and leave-one-out pairs for one bank.
struct SupportEvidence {
    cases: QuadrantPartition<CaseRecord>,
    pairs: BTreeMap<SkillId, Vec<EvidencePair>>,
}

/// Everything one curation run needs, borrowed.
pub struct Curator<'a> {
    pub worker: &'a dyn Worker,
    pub retriever: &'a HybridRetriever,
    pub cache: &'a ReplayCache,
    pub proposer: &'a dyn Proposer,
    pub support: Vec<TaskQuery>,
    pub query: Vec<TaskQuery>,
    pub settings: LoopSettings,
}

impl<'a> Curator<'a> {
    /// Distill B⁰ from no-retrieval rollouts of the support split.
    pub fn cold_start(&self) -> Result<SkillBank> {
        if self.support.is_empty() {
            return Err(Error::invalid("support split is empty"));
        }
        let tasks = sorted(&self.support);
        let cases: Vec<CaseRecord> = tasks
            .par_iter()
            .map(|t| {
                Ok(CaseRecord {
                    task: (*t).clone(),
                    trajectory: rollout(self.worker, t, &[], self.cache)?,
                })
            })
            .collect::<Result<_>>()?;
        let (succ, fail): (Vec<_>, Vec<_>) = cases.into_iter().partition(|c| c.trajectory.success);
        let skills = if fail.is_empty() {
            Vec::new()
        } else {
            self.proposer.distill(&fail, &succ, Origin::ColdStart, 0)?
        };
        SkillBank::new(dedup(skills), 0)
    }

    fn support_evidence(&self, bank: &SkillBank) -> Result<SupportEvidence> {
        let tasks = sorted(&self.support);
        let per_task: Vec<(CaseRecord, Vec<(SkillId, EvidencePair)>)> = tasks
            .par_iter()
            .map(|task| {
                let retrieval = self.retriever.retrieve(&task.text, bank)?;
                let skills = retrieval.skills(bank);
                let factual = rollout(self.worker, task, &skills, self.cache)?;
                let mut pairs = Vec::with_capacity(skills.len());
                for s in &skills {
                    let cf = loo_replay(self.worker, task, &skills, s.id(), self.cache)?;
                    pairs.push((
                        s.id().clone(),
                        EvidencePair {
                            task: (*task).clone(),
                            factual: factual.clone(),
                            counterfactual: cf,
                        },
                    ));
                }
                Ok((
                    CaseRecord {
                        task: (*task).clone(),
                        trajectory: factual,
                    },
                    pairs,
                ))
            })
            .collect::<Result<_>>()?;

        let mut cases = Vec::with_capacity(per_task.len());
        let mut pairs: BTreeMap<SkillId, Vec<EvidencePair>> = BTreeMap::new();
        for (case, ps) in per_task {
            cases.push(case);
            for (id, p) in ps {
                pairs.entry(id).or_default().push(p);
            }
        }
        Ok(SupportEvidence {
            cases: partition_by(cases, |c| &c.trajectory),
            pairs,
        })
    }

    /// Turn support-split evidence into at most K candidate banks.
    pub fn inner_loop(&self, bank: &SkillBank, round: u32) -> Result<InnerOutcome> {
        let evidence = self.support_evidence(bank)?;
        let mut evidence_ids: BTreeSet<String> = BTreeSet::new();

        let failures = &evidence.cases.fail_no_ret;
        let successes = &evidence.cases.succ_no_ret;
        let mut pools = EditPools::default();
        if !failures.is_empty() {
            evidence_ids.extend(
                failures
                    .iter()
                    .chain(successes)
                    .map(|c| c.task.task_id.clone()),
            );
            match self
                .proposer
                .distill(failures, successes, Origin::Add, round)
            {
                Ok(skills) => {
                    pools.add = dedup(skills)
                        .into_iter()
                        .filter(|s| !bank.contains(s.id()))
                        .collect();
                }
                Err(e) => log::warn!("round {round}: distiller failed, no additions: {e}"),
            }
        }

        let mut verdicts = Vec::new();
        for skill in bank.skills() {
            let Some(pairs) = evidence.pairs.get(skill.id()) else {
                continue;
            };
            evidence_ids.extend(pairs.iter().map(|p| p.task.task_id.clone()));
            let verdict = match self.proposer.diagnose(skill, pairs, round) {
                Ok(v) => v,
                Err(e) => {
                    log::warn!("round {round}: diagnoser failed on {}: {e}", skill.id());
                    continue;
                }
            };
            verdicts.push(VerdictRecord {
                skill_id: skill.id().clone(),
                verdict: verdict.kind,
                n_pairs: verdict.evidence_summary.n_pairs,
                mean_delta: verdict.evidence_summary.mean_delta,
                rewritten_id: verdict.rewritten.as_ref().map(|s| s.id().clone()),
            });
            match (verdict.kind, verdict.rewritten) {
                (VerdictKind::Keep, _) => pools.keep.push(skill.id().clone()),
                (VerdictKind::Remove, _) => pools.remove.push(skill.id().clone()),
                (VerdictKind::Rewrite, Some(new)) => pools.rewrite.push((skill.id().clone(), new)),
                (VerdictKind::Rewrite, None) => {
                    log::warn!("round {round}: rewrite of {} without content", skill.id())
                }
            }
        }
        pools.restrict(self.settings.edit_ops);

        let candidates = if pools.is_empty() {
            Vec::new()
        } else {
            match plan_edits(self.proposer, bank, &pools, self.settings.candidates, round) {
                Ok(c) => c,
                Err(e @ Error::Proposer { .. }) => {
                    log::warn!("round {round}: planner failed, no candidates: {e}");
                    Vec::new()
                }
                Err(e) => return Err(e),
            }
        };

        Ok(InnerOutcome {
            candidates,
            pools,
            verdicts,
            support_task_ids: sorted(&self.support)
                .iter()
                .map(|t| t.task_id.clone())
                .collect(),
            evidence_task_ids: evidence_ids.into_iter().collect(),
        })
    }

    /// Evaluate the candidates and the null candidate on the query split
    /// and select the bank for `round`.
    pub fn outer_step(
        &self,
        candidates: Vec<CandidateBank>,
        current: &SkillBank,
        round: u32,
    ) -> Result<OuterOutcome> {
        let eval = |bank: &SkillBank| {
            evaluate_profile(
                bank,
                &self.query,
                self.worker,
                self.retriever,
                self.cache,
                self.settings.epsilon_reg,
            )
        };
        let null_eval = eval(current)?;
        let query_task_ids = null_eval.task_ids();
        let mut records = vec![CandidateRecord {
            bank_ref: current.bank_id().to_string(),
            is_null: true,
            bank_size: current.len(),
            profile: null_eval.profile,
            skill_ids: current.ids(),
            applied: AppliedEdits::default(),
        }];
        let mut failed = Vec::new();
        let mut survivors: Vec<CandidateBank> = Vec::new();
        for cand in candidates {
            match eval(&cand.bank) {
                Ok(ev) => {
                    records.push(CandidateRecord {
                        bank_ref: cand.bank.bank_id().to_string(),
                        is_null: false,
                        bank_size: cand.bank.len(),
                        profile: ev.profile,
                        skill_ids: cand.bank.ids(),
                        applied: cand.applied.clone(),
                    });
                    survivors.push(cand);
                }
                Err(e) => {
                    log::warn!(
                        "round {round}: candidate {} excluded, evaluation failed: {e}",
                        cand.bank.bank_id()
                    );
                    failed.push(FailedCandidate {
                        bank_ref: cand.bank.bank_id().to_string(),
                        error: e.to_string(),
                    });
                }
            }
        }

        let pool: Vec<Candidate> = records
            .iter()
            .map(|r| Candidate {
                bank_ref: r.bank_ref.clone(),
                profile: r.profile,
                is_null: r.is_null,
                bank_size: r.bank_size,
            })
            .collect();
        let selection = select(&pool, self.settings.epsilon_tol, self.settings.objectives)?;

        let (next_bank, winner_applied) = if selection.winner.is_null {
            (current.carried_to(round), AppliedEdits::default())
        } else {
            let won = survivors
                .into_iter()
                .find(|c| c.bank.bank_id() == selection.winner.bank_ref)
                .expect("winner is one of the evaluated candidates");
            (won.bank, won.applied)
        };
        Ok(OuterOutcome {
            next_bank,
            selection,
            winner_applied,
            candidates: records,
            failed,
            query_task_ids,
        })
    }

    /// Run `rounds` rounds from `initial`, handing each report to `sink` as
    /// soon as it is complete.
    pub fn run_rounds(
        &self,
        initial: SkillBank,
        rounds: u32,
        mut sink: impl FnMut(&RoundReport) -> Result<()>,
    ) -> Result<RoundsOutcome> {
        let mut generated: BTreeMap<SkillId, Skill> = initial
            .skills()
            .iter()
            .map(|s| (s.id().clone(), s.clone()))
            .collect();
        let mut bank = initial;
        let mut reports = Vec::with_capacity(rounds as usize);
        for i in 0..rounds {
            let round = i + 1;
            let started = Instant::now();
            self.cache.set_round(round);
            let before = self.cache.counters();

            let inner = self.inner_loop(&bank, round)?;
            let proposed = inner
                .pools
                .add
                .iter()
                .chain(inner.pools.rewrite.iter().map(|(_, s)| s));
            for s in proposed {
                generated.entry(s.id().clone()).or_insert_with(|| s.clone());
            }
            let outer = self.outer_step(inner.candidates, &bank, round)?;

            let delta = self.cache.counters().since(&before);
            let cache_round = self.cache.record_round(round, delta);
            let applied = outer.winner_applied;
            let next = outer.next_bank;
            let edit_counts = EditCounts {
                added: applied.added.len(),
                rewritten: applied.rewritten.len(),
                removed: applied.removed.len(),
                kept: next.len() - applied.added.len() - applied.rewritten.len(),
            };
            let report = RoundReport {
                round,
                bank_id: next.bank_id().to_string(),
                bank_size: next.len(),
                profile: outer.selection.winner.profile,
                winner_is_null: outer.selection.winner.is_null,
                n_candidates: outer.candidates.len() - 1,
                edit_counts,
                applied,
                cache_hit_rate: cache_round.hit_rate,
                loo_hit_rate: cache_round.loo_hit_rate,
                pools: PoolSizes {
                    add: inner.pools.add.len(),
                    rewrite: inner.pools.rewrite.len(),
                    remove: inner.pools.remove.len(),
                    keep: inner.pools.keep.len(),
                },
                verdicts: inner.verdicts,
                candidates: outer.candidates,
                failed_candidates: outer.failed,
                selection: outer.selection,
                audit: SplitAudit {
                    support_task_ids: inner.support_task_ids,
                    evidence_task_ids: inner.evidence_task_ids,
                    query_task_ids: outer.query_task_ids,
                },
                wall_time: started.elapsed(),
            };
            log::info!(
                "round {round}: bank {} ({} skills) util={:.4} div={:.4} cov={:.4}{}",
                report.bank_id,
                report.bank_size,
                report.profile.util,
                report.profile.div,
                report.profile.cov,
                if report.winner_is_null {
                    " (carried forward)"
                } else {
                    ""
                }
            );
            sink(&report)?;
            reports.push(report);
            bank = next;
        }
        Ok(RoundsOutcome {
            final_bank: bank,
            reports,
            generated: generated.into_values().collect(),
        })
    }
}

pub struct RoundsOutcome {
    pub final_bank: SkillBank,
    pub reports: Vec<RoundReport>,
    /// Every skill the proposers produced, including B⁰, in id order.
    pub generated: Vec<Skill>,
}

fn sorted(tasks: &[TaskQuery]) -> Vec<&TaskQuery> {
    let mut v: Vec<&TaskQuery> = tasks.iter().collect();
    v.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    v
}

fn dedup(skills: Vec<Skill>) -> Vec<Skill> {
    let mut seen = BTreeSet::new();
    skills
        .into_iter()
        .filter(|s| seen.insert(s.id().clone()))
        .collect()
}

/// Outcome of [`run`].
pub struct RunOutcome {
    pub initial_bank: SkillBank,
    pub final_bank: SkillBank,
    pub reports: Vec<RoundReport>,
    pub generated: Vec<Skill>,
    pub cache_stats: CacheStats,
}

/// Output file names inside the run directory.
pub const BANK_FILE: &str = "bank.json";
pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const CACHE_STATS_FILE: &str = "cache_stats.json";

/// Build a proposer for `config`.
pub fn build_proposer(
    config: &RunConfig,
    world: &SyntheticWorld,
    embedder: Arc<dyn EmbeddingProvider>,
) -> Result<Box<dyn Proposer>> {
    Ok(match config.proposer.mode {
        ProposerMode::Rule => Box::new(
            RuleBasedProposer::new(embedder)
                .with_thresholds(config.proposer.thresholds)
                .with_side_effects(world.distill_side_effects.clone()),
        ),
        ProposerMode::Remote => {
            let remote = config
                .proposer
                .remote
                .clone()
                .ok_or_else(|| Error::Config("missing `proposer.remote` section".into()))?;
            Box::new(RemoteProposer::new(remote, embedder)?.with_seed(config.seed))
        }
    })
}

/// Run a full curation against the synthetic world named in `config`,
/// writing reports under `out_dir`.
pub fn run(config: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    config.validate()?;
    let world = SyntheticWorld::load(&config.world)?;
    let cache = match &config.cache_dir {
        Some(dir) => ReplayCache::persistent(dir)?,
        None => ReplayCache::in_memory(),
    };
    run_in_world(config, &world, &cache, out_dir)
}

/// [`run`] with an already loaded world and a caller-supplied cache.
pub fn run_in_world(
    config: &RunConfig,
    world: &SyntheticWorld,
    cache: &ReplayCache,
    out_dir: &Path,
) -> Result<RunOutcome> {
    config.validate()?;
    world.validate()?;
    let embedder: Arc<dyn EmbeddingProvider> =
        Arc::new(TrigramHashEmbedder::new(config.embedding_dim));
    let retriever = HybridRetriever::new(config.retrieval, embedder.clone())?;
    let worker = SyntheticWorker::new(world, config.success_threshold);
    let proposer = build_proposer(config, world, embedder)?;
    let curator = Curator {
        worker: &worker,
        retriever: &retriever,
        cache,
        proposer: proposer.as_ref(),
        support: world.split(Split::Support),
        query: world.split(Split::Query),
        settings: LoopSettings::from(config),
    };

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rounds_path = out_dir.join(ROUNDS_FILE);
    let timings_path = out_dir.join(TIMINGS_FILE);
    let mut rounds_file = truncate(&rounds_path)?;
    let mut timings_file = truncate(&timings_path)?;

    cache.set_round(0);
    let before = cache.counters();
    let initial = curator.cold_start()?;
    cache.record_round(0, cache.counters().since(&before));

    let rounds = curator.run_rounds(initial.clone(), config.rounds, |r| {
        let line = serde_json::to_string(r).expect("round report serialization cannot fail");
        append_line(&mut rounds_file, &rounds_path, &line)?;
        let timing = serde_json::json!({
            "round": r.round,
            "wall_time_secs": r.wall_time.as_secs_f64(),
        });
        append_line(&mut timings_file, &timings_path, &timing.to_string())
    })?;

    save_bank(&rounds.final_bank, &out_dir.join(BANK_FILE))?;
    let cache_stats = cache.stats();
    let stats_path = out_dir.join(CACHE_STATS_FILE);
    let body = serde_json::to_string_pretty(&cache_stats).expect("stats serialize");
    std::fs::write(&stats_path, body + "\n").map_err(|e| Error::io(&stats_path, e))?;

    Ok(RunOutcome {
        initial_bank: initial,
        final_bank: rounds.final_bank,
        reports: rounds.reports,
        generated: rounds.generated,
        cache_stats,
    })
}

fn truncate(path: &PathBuf) -> Result<File> {
    OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

fn append_line(file: &mut File, path: &Path, line: &str) -> Result<()> {
    writeln!(file, "{line}")
        .and_then(|_| file.flush())
        .map_err(|e| Error::io(path, e))
}

/// Parse a rounds file written by [`run`].
pub fn read_reports(text: &str, location: &str) -> Result<Vec<RoundReport>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                location: format!("{location}:{}", i + 1),
                message: e.to_string(),
            })
        })
        .collect()
}
