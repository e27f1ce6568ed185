//! Content-addressed counterfactual replay cache.
//!
//! Rollouts are keyed by SHA-256 over the worker version tag, the task id and
//! the canonical content of every retrieved skill in rank order. Every
//! component is length-prefixed before hashing. The same store serves
//! factual rollouts and leave-one-out replays, for both proposal evidence
//! and objective evaluation, across candidates and rounds.
//!
//! Entries may be persisted as one JSON file per key (`<digest>.json`).
//! Entries written under a different worker version are never returned;
//! [`purge_stale`] deletes them from disk.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rollout::Trajectory;
use crate::skill::Skill;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    digest: String,
    worker_version: String,
}

impl CacheKey {
    /// 64-char lowercase hex SHA-256 digest.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn worker_version(&self) -> &str {
        &self.worker_version
    }
}

fn update_prefixed(h: &mut Sha256, bytes: &[u8]) {
    h.update((bytes.len() as u64).to_be_bytes());
    h.update(bytes);
}

pub fn make_key(worker_version: &str, task_id: &str, retrieved: &[&Skill]) -> CacheKey {
    let mut h = Sha256::new();
    update_prefixed(&mut h, worker_version.as_bytes());
    update_prefixed(&mut h, task_id.as_bytes());
    for s in retrieved {
        update_prefixed(&mut h, &s.canonical_bytes());
    }
    CacheKey {
        digest: hex::encode(h.finalize()),
        worker_version: worker_version.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub trajectory: Trajectory,
    pub worker_version: String,
    pub created_round: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LookupKind {
    Factual,
    LeaveOneOut,
}

/// Hit/miss counters, split by lookup kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheCounters {
    pub hits: u64,
    pub misses: u64,
    pub loo_hits: u64,
    pub loo_misses: u64,
}

impl CacheCounters {
    pub fn since(&self, earlier: &CacheCounters) -> CacheCounters {
        CacheCounters {
            hits: self.hits - earlier.hits,
            misses: self.misses - earlier.misses,
            loo_hits: self.loo_hits - earlier.loo_hits,
            loo_misses: self.loo_misses - earlier.loo_misses,
        }
    }

    /// Overall hit rate; 0 when nothing was looked up.
    pub fn hit_rate(&self) -> f64 {
        ratio(self.hits, self.hits + self.misses)
    }

    pub fn loo_hit_rate(&self) -> f64 {
        ratio(self.loo_hits, self.loo_hits + self.loo_misses)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundCacheStats {
    pub round: u32,
    pub counters: CacheCounters,
    pub hit_rate: f64,
    pub loo_hit_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub totals: CacheCounters,
    pub hit_rate: f64,
    pub stored_entries: usize,
    pub rounds: Vec<RoundCacheStats>,
}

pub struct ReplayCache {
    enabled: bool,
    dir: Option<PathBuf>,
    entries: RwLock<HashMap<String, CacheEntry>>,
    hits: AtomicU64,
    misses: AtomicU64,
    loo_hits: AtomicU64,
    loo_misses: AtomicU64,
    round: AtomicU32,
    history: Mutex<Vec<RoundCacheStats>>,
}

impl Default for ReplayCache {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl ReplayCache {
    fn build(enabled: bool, dir: Option<PathBuf>) -> Self {
        Self {
            enabled,
            dir,
            entries: RwLock::new(HashMap::new()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            loo_hits: AtomicU64::new(0),
            loo_misses: AtomicU64::new(0),
            round: AtomicU32::new(0),
            history: Mutex::new(Vec::new()),
        }
    }

    pub fn in_memory() -> Self {
        Self::build(true, None)
    }

    /// A cache that never stores anything: every lookup is a miss.
    pub fn disabled() -> Self {
        Self::build(false, None)
    }

    /// In-memory cache backed by `dir`, one JSON file per entry.
    pub fn persistent(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self::build(true, Some(dir)))
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    /// Round number stamped onto newly created entries.
    pub fn set_round(&self, round: u32) {
        self.round.store(round, Ordering::Relaxed);
    }

    /// Look up `key`, counting a hit or a miss of the given kind.
    pub fn get(&self, key: &CacheKey, kind: LookupKind) -> Option<CacheEntry> {
        let found = self.peek(key);
        let counter = match (kind, found.is_some()) {
            (LookupKind::Factual, true) => &self.hits,
            (LookupKind::Factual, false) => &self.misses,
            (LookupKind::LeaveOneOut, true) => &self.loo_hits,
            (LookupKind::LeaveOneOut, false) => &self.loo_misses,
        };
        counter.fetch_add(1, Ordering::Relaxed);
        if kind == LookupKind::LeaveOneOut {
            // LOO lookups count towards the overall rate as well.
            let total = if found.is_some() {
                &self.hits
            } else {
                &self.misses
            };
            total.fetch_add(1, Ordering::Relaxed);
        }
        found
    }

    /// Look up without touching the counters.
    pub fn peek(&self, key: &CacheKey) -> Option<CacheEntry> {
        if !self.enabled {
            return None;
        }
        if let Some(e) = self.entries.read().unwrap().get(&key.digest) {
            return (e.worker_version == key.worker_version).then(|| e.clone());
        }
        let dir = self.dir.as_ref()?;
        let entry = read_entry(&dir.join(format!("{}.json", key.digest)))?;
        if entry.worker_version != key.worker_version {
            return None;
        }
        self.entries
            .write()
            .unwrap()
            .insert(key.digest.clone(), entry.clone());
        Some(entry)
    }

    /// Insert an entry. Re-inserting an existing key is a no-op.
    pub fn put(&self, key: &CacheKey, entry: CacheEntry) -> Result<()> {
        if entry.worker_version != key.worker_version {
            return Err(Error::invalid(format!(
                "entry worker version {:?} does not match key version {:?}",
                entry.worker_version, key.worker_version
            )));
        }
        if !self.enabled {
            return Ok(());
        }
        let mut map = self.entries.write().unwrap();
        if map
            .get(&key.digest)
            .is_some_and(|e| e.worker_version == key.worker_version)
        {
            return Ok(());
        }
        if let Some(dir) = &self.dir {
            write_entry(dir, &key.digest, &entry)?;
        }
        map.insert(key.digest.clone(), entry);
        Ok(())
    }

    /// Serve `key` from the cache, or run `compute` and store its result.
    pub fn fetch_or_run(
        &self,
        key: &CacheKey,
        kind: LookupKind,
        compute: impl FnOnce() -> Result<Trajectory>,
    ) -> Result<Trajectory> {
        if let Some(e) = self.get(key, kind) {
            return Ok(e.trajectory);
        }
        let trajectory = compute()?;
        self.put(
            key,
            CacheEntry {
                trajectory: trajectory.clone(),
                worker_version: key.worker_version.clone(),
                created_round: self.round.load(Ordering::Relaxed),
            },
        )?;
        Ok(trajectory)
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn counters(&self) -> CacheCounters {
        CacheCounters {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            loo_hits: self.loo_hits.load(Ordering::Relaxed),
            loo_misses: self.loo_misses.load(Ordering::Relaxed),
        }
    }

    /// Append one round's counter delta to the hit-rate history.
    pub fn record_round(&self, round: u32, counters: CacheCounters) -> RoundCacheStats {
        let stats = RoundCacheStats {
            round,
            counters,
            hit_rate: counters.hit_rate(),
            loo_hit_rate: counters.loo_hit_rate(),
        };
        self.history.lock().unwrap().push(stats.clone());
        stats
    }

    pub fn stats(&self) -> CacheStats {
        let totals = self.counters();
        CacheStats {
            totals,
            hit_rate: totals.hit_rate(),
            stored_entries: self.len(),
            rounds: self.history.lock().unwrap().clone(),
        }
    }
}

fn read_entry(path: &Path) -> Option<CacheEntry> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return None,
        Err(e) => {
            log::warn!("unreadable cache entry {}: {e}", path.display());
            return None;
        }
    };
    match serde_json::from_str(&text) {
        Ok(entry) => Some(entry),
        Err(e) => {
            log::warn!("corrupted cache entry {}: {e}", path.display());
            None
        }
    }
}

fn write_entry(dir: &Path, digest: &str, entry: &CacheEntry) -> Result<()> {
    let path = dir.join(format!("{digest}.json"));
    let tmp = dir.join(format!(".{digest}.{}.tmp", std::process::id()));
    let body = serde_json::to_string(entry).expect("cache entry serialization cannot fail");
    std::fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
}

/// Summary of a persisted cache directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheInventory {
    pub entries: usize,
    pub corrupted: usize,
    pub by_worker_version: BTreeMap<String, usize>,
}

pub fn inspect_dir(dir: &Path) -> Result<CacheInventory> {
    let mut inv = CacheInventory::default();
    for path in entry_files(dir)? {
        match read_entry(&path) {
            Some(e) => {
                inv.entries += 1;
                *inv.by_worker_version.entry(e.worker_version).or_default() += 1;
            }
            None => inv.corrupted += 1,
        }
    }
    Ok(inv)
}

/// Delete persisted entries whose worker version differs from `current`, and
/// unreadable entries. Returns the number of files removed.
pub fn purge_stale(dir: &Path, current_version: &str) -> Result<usize> {
    let mut removed = 0;
    for path in entry_files(dir)? {
        let stale = read_entry(&path).is_none_or(|e| e.worker_version != current_version);
        if stale {
            std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
            removed += 1;
        }
    }
    Ok(removed)
}

fn entry_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for item in rd {
        let path = item.map_err(|e| Error::io(dir, e))?.path();
        let is_entry = path.extension().is_some_and(|x| x == "json")
            && path
                .file_stem()
                .and_then(|s| s.to_str())
                .is_some_and(|s| s.len() == 64 && s.bytes().all(|b| b.is_ascii_hexdigit()));
        if is_entry {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::TrigramHashEmbedder;
    use crate::skill::{Origin, Provenance, SkillId};

    fn skill(t: &str, p: &str) -> Skill {
        let prov = Provenance {
            round_created: 0,
            origin: Origin::Add,
        };
        Skill::new(t, p, "always", prov, &TrigramHashEmbedder::default()).unwrap()
    }

    fn traj(task: &str) -> Trajectory {
        Trajectory::new(task, vec![SkillId::from("a")], 1.0, 1, 1.0)
    }

    fn entry(version: &str) -> CacheEntry {
        CacheEntry {
            trajectory: traj("t1"),
            worker_version: version.into(),
            created_round: 0,
        }
    }

    #[test]
    fn key_is_deterministic_hex() {
        let (a, b) = (skill("a", "x"), skill("b", "y"));
        let k1 = make_key("v1", "t1", &[&a, &b]);
        let k2 = make_key("v1", "t1", &[&a, &b]);
        assert_eq!(k1, k2);
        assert_eq!(k1.digest().len(), 64);
    }

    #[test]
    fn key_sensitive_to_every_component() {
        let (a, b) = (skill("a", "x"), skill("b", "y"));
        let base = make_key("v1", "t1", &[&a, &b]);
        assert_ne!(base, make_key("v1", "t1", &[&b, &a]));
        assert_ne!(base, make_key("v2", "t1", &[&a, &b]));
        assert_ne!(base, make_key("v1", "t2", &[&a, &b]));
        assert_ne!(base, make_key("v1", "t1", &[&a, &skill("b", "z")]));
        assert_ne!(base, make_key("v1", "t1", &[&a]));
    }

    #[test]
    fn length_prefix_prevents_boundary_shift() {
        assert_ne!(make_key("v1t", "1", &[]), make_key("v1", "t1", &[]));
    }

    #[test]
    fn get_put_roundtrip_and_version_isolation() {
        let c = ReplayCache::in_memory();
        let a = skill("a", "x");
        let k = make_key("v1", "t1", &[&a]);
        assert!(c.get(&k, LookupKind::Factual).is_none());
        c.put(&k, entry("v1")).unwrap();
        assert_eq!(c.get(&k, LookupKind::Factual).unwrap(), entry("v1"));
        let k2 = make_key("v2", "t1", &[&a]);
        assert!(c.get(&k2, LookupKind::Factual).is_none());
        assert_eq!(c.counters().hits, 1);
        assert_eq!(c.counters().misses, 2);
    }

    #[test]
    fn put_rejects_version_mismatch() {
        let c = ReplayCache::in_memory();
        let k = make_key("v1", "t1", &[]);
        assert!(matches!(
            c.put(&k, entry("v2")),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn double_put_stores_once() {
        let c = ReplayCache::in_memory();
        let k = make_key("v1", "t1", &[]);
        c.put(&k, entry("v1")).unwrap();
        c.put(&k, entry("v1")).unwrap();
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn concurrent_puts_of_same_key() {
        let c = ReplayCache::in_memory();
        let k = make_key("v1", "t1", &[]);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| c.put(&k, entry("v1")).unwrap());
            }
        });
        assert_eq!(c.len(), 1);
        assert_eq!(c.peek(&k).unwrap(), entry("v1"));
    }

    #[test]
    fn disabled_cache_never_hits() {
        let c = ReplayCache::disabled();
        let k = make_key("v1", "t1", &[]);
        c.put(&k, entry("v1")).unwrap();
        assert!(c.get(&k, LookupKind::Factual).is_none());
        assert!(c.is_empty());
    }

    #[test]
    fn persisted_entries_survive_and_corruption_reads_as_absent() {
        let dir = tempfile::tempdir().unwrap();
        let k = make_key("v1", "t1", &[]);
        {
            let c = ReplayCache::persistent(dir.path()).unwrap();
            c.put(&k, entry("v1")).unwrap();
        }
        let c = ReplayCache::persistent(dir.path()).unwrap();
        assert_eq!(c.get(&k, LookupKind::Factual).unwrap(), entry("v1"));

        let k2 = make_key("v1", "t2", &[]);
        std::fs::write(
            dir.path().join(format!("{}.json", k2.digest())),
            "{not json",
        )
        .unwrap();
        let c = ReplayCache::persistent(dir.path()).unwrap();
        assert!(c.get(&k2, LookupKind::Factual).is_none());

        let inv = inspect_dir(dir.path()).unwrap();
        assert_eq!((inv.entries, inv.corrupted), (1, 1));
    }

    #[test]
    fn purge_removes_other_versions_only() {
        let dir = tempfile::tempdir().unwrap();
        let c = ReplayCache::persistent(dir.path()).unwrap();
        c.put(&make_key("v1", "t1", &[]), entry("v1")).unwrap();
        c.put(&make_key("v2", "t1", &[]), entry("v2")).unwrap();
        assert_eq!(purge_stale(dir.path(), "v2").unwrap(), 1);
        let inv = inspect_dir(dir.path()).unwrap();
        assert_eq!(inv.by_worker_version.keys().collect::<Vec<_>>(), vec!["v2"]);
    }

    #[test]
    fn fetch_or_run_computes_once() {
        let c = ReplayCache::in_memory();
        let k = make_key("v1", "t1", &[]);
        let mut calls = 0;
        for _ in 0..3 {
            c.fetch_or_run(&k, LookupKind::LeaveOneOut, || {
                calls += 1;
                Ok(traj("t1"))
            })
            .unwrap();
        }
        assert_eq!(calls, 1);
        let n = c.counters();
        assert_eq!((n.loo_hits, n.loo_misses), (2, 1));
        assert!((n.loo_hit_rate() - 2.0 / 3.0).abs() < 1e-15);
    }
}
