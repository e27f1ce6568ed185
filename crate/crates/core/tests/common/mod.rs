#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use skillbank::embedding::{EmbeddingProvider, TrigramHashEmbedder};
use skillbank::objectives::ObjectiveProfile;
use skillbank::retrieval::{HybridRetriever, RetrievalConfig};
use skillbank::rollout::{Split, TaskQuery, Worker};
use skillbank::selector::Candidate;
use skillbank::skill::{Origin, Provenance, Skill, SkillBank};
use skillbank::world::{SyntheticWorker, SyntheticWorld, WorldTask};

pub const TAGS: &[&str] = &["heat", "cool", "clean", "slice", "stack", "light"];
const OBJECTS: &[&str] = &["mug", "apple", "plate", "towel", "lamp", "book"];
const PLACES: &[&str] = &["shelf", "counter", "table", "cabinet", "drawer"];

pub fn embedder() -> Arc<dyn EmbeddingProvider> {
    Arc::new(TrigramHashEmbedder::default())
}

pub fn retriever() -> HybridRetriever {
    HybridRetriever::new(RetrievalConfig::default(), embedder()).unwrap()
}

pub fn prov() -> Provenance {
    Provenance {
        round_created: 0,
        origin: Origin::Add,
    }
}

pub fn skill(title: &str, principle: &str, when: &str) -> Skill {
    Skill::new(title, principle, when, prov(), embedder().as_ref()).unwrap()
}

/// A skill about `topic` with an explicit tag annotation.
pub fn tagged_skill(topic: &str, helpful: &[&str], harmful: &[&str], variant: usize) -> Skill {
    skill(
        &format!("Reliable {topic} routine {variant}"),
        &format!("Find the object, {topic} it with the matching appliance, then check the result."),
        &format!(
            "Apply when the task asks you to {topic} an object. tags: helpful={}; harmful={}",
            helpful.join(","),
            harmful.join(",")
        ),
    )
}

pub fn task(id: &str, tag: &str, split: Split, solvable: bool) -> WorldTask {
    WorldTask {
        task_id: id.to_string(),
        text: format!("{tag} the mug and put it on the shelf"),
        split,
        required_tag: tag.to_string(),
        base_solvable: solvable,
    }
}

pub fn world(tags: &[&str], tasks: Vec<WorldTask>) -> SyntheticWorld {
    let w = SyntheticWorld {
        tags: tags.iter().map(|t| t.to_string()).collect(),
        tasks,
        distill_side_effects: BTreeMap::new(),
    };
    w.validate().unwrap();
    w
}

/// Random world with `n_query` query tasks (plus one support task) and a
/// pool of `n_skills` random skills over the same tags.
pub fn random_world(
    rng: &mut impl Rng,
    n_query: usize,
    n_skills: usize,
) -> (SyntheticWorld, Vec<Skill>) {
    let n_tags = rng.gen_range(2..=TAGS.len());
    let tags = &TAGS[..n_tags];
    let solvable: Vec<bool> = tags.iter().map(|_| rng.gen_bool(0.3)).collect();
    let mut tasks = Vec::new();
    for i in 0..n_query {
        let t = rng.gen_range(0..n_tags);
        tasks.push(WorldTask {
            task_id: format!("query-{i:03}"),
            text: format!(
                "{} the {} and put it on the {}",
                tags[t],
                OBJECTS.choose(rng).unwrap(),
                PLACES.choose(rng).unwrap()
            ),
            split: Split::Query,
            required_tag: tags[t].to_string(),
            base_solvable: solvable[t],
        });
    }
    tasks.push(task("support-000", tags[0], Split::Support, false));

    let mut skills = Vec::new();
    let mut seen = BTreeSet::new();
    while skills.len() < n_skills {
        let topic = tags[rng.gen_range(0..n_tags)];
        let mut helpful = vec![topic];
        let mut harmful: Vec<&str> = vec![];
        for &t in tags {
            if t != topic && rng.gen_bool(0.2) {
                helpful.push(t);
            } else if t != topic && rng.gen_bool(0.2) {
                harmful.push(t);
            }
        }
        let s = tagged_skill(topic, &helpful, &harmful, rng.gen_range(0..1000));
        if seen.insert(s.id().clone()) {
            skills.push(s);
        }
    }
    (world(tags, tasks), skills)
}

// ---- oracles -------------------------------------------------------------

/// Bank utility recomputed from scratch without any cache, using the
/// identity Σ_s (|T_s|/N_R)·mean_{T_s} Δ = Σ_{t,s} Δ_{t,s} / N_R.
pub fn oracle_util(bank: &SkillBank, world: &SyntheticWorld, retriever: &HybridRetriever) -> f64 {
    let worker = SyntheticWorker::new(world, 1.0);
    let mut total = 0.0;
    let mut n_r = 0usize;
    for q in world.split(Split::Query) {
        let r = retriever.retrieve(&q.text, bank).unwrap();
        let skills = r.skills(bank);
        if skills.is_empty() {
            continue;
        }
        n_r += 1;
        let with = worker.rollout(&q, &skills).unwrap().reward;
        for i in 0..skills.len() {
            let mut rest = skills.clone();
            rest.remove(i);
            let without = worker.rollout(&q, &rest).unwrap().reward;
            total += with - without;
        }
    }
    if n_r == 0 {
        0.0
    } else {
        total / n_r as f64
    }
}

/// Determinant by cofactor expansion along the first row.
pub fn cofactor_det(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    match n {
        0 => 1.0,
        1 => m[0][0],
        _ => (0..n)
            .map(|j| {
                let minor: Vec<Vec<f64>> = m[1..]
                    .iter()
                    .map(|row| {
                        row.iter()
                            .enumerate()
                            .filter(|(c, _)| *c != j)
                            .map(|(_, v)| *v)
                            .collect()
                    })
                    .collect();
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                sign * m[0][j] * cofactor_det(&minor)
            })
            .sum(),
    }
}

pub fn oracle_div(bank: &SkillBank, eps: f64) -> f64 {
    let n = bank.len();
    if n == 0 {
        return 0.0;
    }
    let e: Vec<&[f64]> = bank.skills().iter().map(|s| s.embedding()).collect();
    let g: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let d: f64 = e[i].iter().zip(e[j]).map(|(a, b)| a * b).sum();
                    d + if i == j { eps } else { 0.0 }
                })
                .collect()
        })
        .collect();
    cofactor_det(&g).max(0.0).powf(1.0 / n as f64).min(1.0)
}

/// Coverage by direct counting over retrieval sets.
pub fn oracle_cov(
    bank: &SkillBank,
    tasks: &[TaskQuery],
    retriever: &HybridRetriever,
    k_top: usize,
) -> f64 {
    if bank.is_empty() || tasks.is_empty() {
        return 0.0;
    }
    let mut slots = 0usize;
    let mut used = BTreeSet::new();
    for t in tasks {
        let r = retriever.retrieve(&t.text, bank).unwrap();
        slots += r.entries.len();
        for e in &r.entries {
            used.insert(e.skill_id.clone());
        }
    }
    let density = slots as f64 / (k_top * tasks.len()) as f64;
    density * used.len() as f64 / bank.len() as f64
}

pub fn dominates3(a: &ObjectiveProfile, b: &ObjectiveProfile) -> bool {
    let (x, y) = ([a.util, a.div, a.cov], [b.util, b.div, b.cov]);
    x.iter().zip(&y).all(|(p, q)| p >= q) && x.iter().zip(&y).any(|(p, q)| p > q)
}

/// O(n²) non-dominated filter over all three objectives, input order kept.
pub fn brute_front(cands: &[Candidate]) -> Vec<String> {
    cands
        .iter()
        .filter(|c| !cands.iter().any(|o| dominates3(&o.profile, &c.profile)))
        .map(|c| c.bank_ref.clone())
        .collect()
}

/// Area of the union of `[0,x]×[0,y]` boxes by inclusion-exclusion.
pub fn hv_inclusion_exclusion(points: &[(f64, f64)]) -> f64 {
    let n = points.len();
    let mut total = 0.0;
    for mask in 1u32..(1 << n) {
        let members: Vec<&(f64, f64)> = (0..n)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| &points[i])
            .collect();
        let x = members.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let y = members.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let sign = if members.len() % 2 == 1 { 1.0 } else { -1.0 };
        total += sign * x * y;
    }
    total
}

/// Midpoint-rule integration of the dominated region on a `1/cells` grid.
pub fn hv_grid(points: &[(f64, f64)], cells: usize) -> f64 {
    let h = 1.0 / cells as f64;
    // For each column, the dominated height is the max y over points with x ≥ centre.
    let mut area = 0.0;
    for i in 0..cells {
        let cx = (i as f64 + 0.5) * h;
        let top = points
            .iter()
            .filter(|p| p.0 >= cx)
            .map(|p| p.1)
            .fold(0.0, f64::max);
        let rows = (0..cells).filter(|j| (*j as f64 + 0.5) * h <= top).count();
        area += rows as f64 * h * h;
    }
    area
}

/// Okapi BM25 (k1 = 1.2, b = 0.75) written out directly.
pub fn oracle_bm25(query: &str, docs: &[String]) -> Vec<f64> {
    let tok = |s: &str| -> Vec<String> {
        s.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| t.to_lowercase())
            .collect()
    };
    let docs: Vec<Vec<String>> = docs.iter().map(|d| tok(d)).collect();
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(|d| d.len()).sum::<usize>() as f64 / n;
    let q = tok(query);
    docs.iter()
        .map(|d| {
            let mut s = 0.0;
            for term in &q {
                let f = d.iter().filter(|t| *t == term).count() as f64;
                if f == 0.0 {
                    continue;
                }
                let df = docs.iter().filter(|x| x.contains(term)).count() as f64;
                let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                s += idf * f * 2.2 / (f + 1.2 * (0.25 + 0.75 * d.len() as f64 / avgdl));
            }
            s
        })
        .collect()
}

pub fn minmax(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    v.iter()
        .map(|x| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 })
        .collect()
}

pub fn random_candidates(rng: &mut impl Rng, n: usize, coarse: bool) -> Vec<Candidate> {
    let draw = |rng: &mut dyn rand::RngCore| {
        if coarse {
            // Few distinct levels so ties and duplicates show up.
            rng.gen_range(0..5) as f64 / 4.0
        } else {
            rng.gen::<f64>()
        }
    };
    let null_at = rng.gen_range(0..n);
    (0..n)
        .map(|i| Candidate {
            bank_ref: format!("bank-{i:03}"),
            profile: ObjectiveProfile::new(draw(rng), draw(rng), draw(rng)),
            is_null: i == null_at,
            bank_size: rng.gen_range(0..10),
        })
        .collect()
}
