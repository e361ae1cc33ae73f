//! Per-node KV/prefix-cache model.
//!
//! Tracks the cached prefix length per session in tokens (1 token = 1
//! capacity unit by default), serves hit/miss splits for each turn, and
//! enforces `capacity_tokens` with strict LRU eviction ordered by last
//! lookup-or-commit. Metrics use token-level definitions: CHR is the
//! fraction of required context tokens served from cache, and reuse is
//! hit tokens per recomputed token, so CHR = reuse/(1+reuse).

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ring::SessionId;

#[derive(Debug, Error, PartialEq)]
pub enum CacheError {
    #[error("entry for {session} needs {tokens} tokens, exceeding capacity {capacity}")]
    EntryExceedsCapacity {
        session: SessionId,
        tokens: u64,
        capacity: u64,
    },
    #[error("commit for {session} shrinks cached prefix from {old} to {new} tokens")]
    ShrinkingCommit {
        session: SessionId,
        old: u64,
        new: u64,
    },
    #[error("no lookups recorded")]
    ZeroLookups,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub cached_prefix_tokens: u64,
    /// Timestamp of the last lookup or commit, for reporting.
    pub last_access: u64,
    /// Internal strict LRU order (unique per touch).
    tick: u64,
}

/// Hit/miss split for one turn's context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheOutcome {
    pub hit_tokens: u64,
    pub miss_tokens: u64,
    pub cold_start: bool,
}

/// Monotone counters; merge across nodes for cluster-level metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheCounters {
    pub lookups: u64,
    pub hits_tokens: u64,
    pub miss_tokens: u64,
    pub cold_lookups: u64,
    pub cold_miss_tokens: u64,
    pub steady_lookups: u64,
    pub steady_miss_tokens: u64,
    pub evicted_entries: u64,
    pub evicted_tokens: u64,
    pub committed_tokens: u64,
}

impl CacheCounters {
    pub fn merge(&mut self, other: &CacheCounters) {
        self.lookups += other.lookups;
        self.hits_tokens += other.hits_tokens;
        self.miss_tokens += other.miss_tokens;
        self.cold_lookups += other.cold_lookups;
        self.cold_miss_tokens += other.cold_miss_tokens;
        self.steady_lookups += other.steady_lookups;
        self.steady_miss_tokens += other.steady_miss_tokens;
        self.evicted_entries += other.evicted_entries;
        self.evicted_tokens += other.evicted_tokens;
        self.committed_tokens += other.committed_tokens;
    }
}

/// Derived cache metrics. `reuse_factor` is `None` when nothing was
/// recomputed (an all-hit run has no finite ratio).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheMetrics {
    pub lookups: u64,
    pub hits_tokens: u64,
    pub miss_tokens: u64,
    pub chr: f64,
    pub reuse_factor: Option<f64>,
    pub cold_lookups: u64,
    pub steady_lookups: u64,
    pub avg_recomputed_cold: f64,
    pub avg_recomputed_steady: f64,
    pub evicted_entries: u64,
    pub evicted_tokens: u64,
    pub committed_tokens: u64,
    pub eviction_rate: f64,
}

impl CacheMetrics {
    pub fn from_counters(c: &CacheCounters) -> Result<CacheMetrics, CacheError> {
        if c.lookups == 0 {
            return Err(CacheError::ZeroLookups);
        }
        let total = c.hits_tokens + c.miss_tokens;
        let chr = if total == 0 {
            0.0
        } else {
            c.hits_tokens as f64 / total as f64
        };
        let reuse_factor = if c.miss_tokens == 0 {
            None
        } else {
            Some(c.hits_tokens as f64 / c.miss_tokens as f64)
        };
        let avg = |tokens: u64, n: u64| if n == 0 { 0.0 } else { tokens as f64 / n as f64 };
        Ok(CacheMetrics {
            lookups: c.lookups,
            hits_tokens: c.hits_tokens,
            miss_tokens: c.miss_tokens,
            chr,
            reuse_factor,
            cold_lookups: c.cold_lookups,
            steady_lookups: c.steady_lookups,
            avg_recomputed_cold: avg(c.cold_miss_tokens, c.cold_lookups),
            avg_recomputed_steady: avg(c.steady_miss_tokens, c.steady_lookups),
            evicted_entries: c.evicted_entries,
            evicted_tokens: c.evicted_tokens,
            committed_tokens: c.committed_tokens,
            eviction_rate: avg(c.evicted_tokens, c.committed_tokens),
        })
    }
}

#[derive(Debug, Clone)]
pub struct NodeCache {
    capacity_tokens: u64,
    entries: HashMap<SessionId, CacheEntry>,
    // tick -> session, ascending = least recently touched first
    lru: BTreeMap<u64, SessionId>,
    next_tick: u64,
    resident_tokens: u64,
    counters: CacheCounters,
}

impl NodeCache {
    pub fn new(capacity_tokens: u64) -> Self {
        NodeCache {
            capacity_tokens,
            entries: HashMap::new(),
            lru: BTreeMap::new(),
            next_tick: 0,
            resident_tokens: 0,
            counters: CacheCounters::default(),
        }
    }

    pub fn capacity_tokens(&self) -> u64 {
        self.capacity_tokens
    }

    pub fn resident_tokens(&self) -> u64 {
        self.resident_tokens
    }

    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }

    pub fn cached_prefix(&self, session: &SessionId) -> u64 {
        self.entries
            .get(session)
            .map_or(0, |e| e.cached_prefix_tokens)
    }

    pub fn counters(&self) -> &CacheCounters {
        &self.counters
    }

    pub fn metrics(&self) -> Result<CacheMetrics, CacheError> {
        CacheMetrics::from_counters(&self.counters)
    }

    fn touch(&mut self, session: &SessionId, now: u64) {
        let tick = self.next_tick;
        self.next_tick += 1;
        if let Some(entry) = self.entries.get_mut(session) {
            self.lru.remove(&entry.tick);
            entry.tick = tick;
            entry.last_access = now;
            self.lru.insert(tick, session.clone());
        }
    }

    /// Serve a turn needing `required_context_tokens` of context. Hit tokens
    /// are whatever prefix is already resident; the rest must be recomputed.
    /// Refreshes the entry's LRU position. A session's first lookup on a node
    /// is always a full miss.
    pub fn lookup(
        &mut self,
        session: &SessionId,
        required_context_tokens: u64,
        now: u64,
    ) -> CacheOutcome {
        let cached = self.cached_prefix(session);
        let hit_tokens = cached.min(required_context_tokens);
        let miss_tokens = required_context_tokens - hit_tokens;
        let cold_start = hit_tokens == 0 && required_context_tokens > 0;

        self.counters.lookups += 1;
        self.counters.hits_tokens += hit_tokens;
        self.counters.miss_tokens += miss_tokens;
        if cold_start {
            self.counters.cold_lookups += 1;
            self.counters.cold_miss_tokens += miss_tokens;
        } else if hit_tokens > 0 {
            self.counters.steady_lookups += 1;
            self.counters.steady_miss_tokens += miss_tokens;
        }
        self.touch(session, now);

        CacheOutcome {
            hit_tokens,
            miss_tokens,
            cold_start,
        }
    }

    /// Persist the session's full context (`new_total_context_tokens`) after
    /// a turn. Evicts least-recently-touched other entries until the result
    /// fits; the committing session itself is never evicted to make room. The
    /// committed-token counter advances by the growth since the last commit,
    /// so it totals every token ever written.
    pub fn commit(
        &mut self,
        session: &SessionId,
        new_total_context_tokens: u64,
        now: u64,
    ) -> Result<Vec<SessionId>, CacheError> {
        if new_total_context_tokens > self.capacity_tokens {
            return Err(CacheError::EntryExceedsCapacity {
                session: session.clone(),
                tokens: new_total_context_tokens,
                capacity: self.capacity_tokens,
            });
        }
        let old = self.cached_prefix(session);
        if new_total_context_tokens < old {
            return Err(CacheError::ShrinkingCommit {
                session: session.clone(),
                old,
                new: new_total_context_tokens,
            });
        }

        let mut evicted = Vec::new();
        let mut occupancy = self.resident_tokens - old + new_total_context_tokens;
        while occupancy > self.capacity_tokens {
            let victim = self
                .lru
                .values()
                .find(|s| *s != session)
                .cloned()
                .expect("occupancy over capacity implies another resident entry");
            let entry = self.entries.remove(&victim).expect("lru entry resident");
            self.lru.remove(&entry.tick);
            self.resident_tokens -= entry.cached_prefix_tokens;
            occupancy -= entry.cached_prefix_tokens;
            self.counters.evicted_entries += 1;
            self.counters.evicted_tokens += entry.cached_prefix_tokens;
            evicted.push(victim);
        }

        self.counters.committed_tokens += new_total_context_tokens - old;
        self.resident_tokens = self.resident_tokens - old + new_total_context_tokens;
        match self.entries.get_mut(session) {
            Some(entry) => {
                entry.cached_prefix_tokens = new_total_context_tokens;
            }
            None => {
                let tick = self.next_tick;
                self.next_tick += 1;
                self.entries.insert(
                    session.clone(),
                    CacheEntry {
                        cached_prefix_tokens: new_total_context_tokens,
                        last_access: now,
                        tick,
                    },
                );
                self.lru.insert(tick, session.clone());
            }
        }
        self.touch(session, now);
        Ok(evicted)
    }

    /// Drop a session's entry without counting it as a capacity eviction
    /// (e.g. the owning node left the ring).
    pub fn invalidate(&mut self, session: &SessionId) -> bool {
        match self.entries.remove(session) {
            Some(entry) => {
                self.lru.remove(&entry.tick);
                self.resident_tokens -= entry.cached_prefix_tokens;
                true
            }
            None => false,
        }
    }

    /// Drop every entry, keeping counters: models a node crash losing its
    /// GPU-resident state.
    pub fn clear(&mut self) {
        self.entries.clear();
        self.lru.clear();
        self.resident_tokens = 0;
    }
}
