//! Two-tier buffer manager.
//!
//! Clusters are the logical access unit and fixed-size blocks the physical
//! one. The mapping table (one [`ClusterDescriptor`] per cluster, indexed by
//! cluster id) bridges the two. Each decode step:
//!
//! 1. [`WaveBuffer::lookup`] reads residency for the retrieval clusters. It
//!    never changes replacement order.
//! 2. [`WaveBuffer::assemble`] builds the contiguous execution buffer from the
//!    steady zone, cached slots and slow-tier reads, charging the transfers.
//! 3. [`WaveBuffer::commit_update`] applies replacement decisions and admits
//!    missed clusters by copying them out of the execution buffer. It must
//!    complete before the next step's lookup.

mod policy;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::Serialize;

pub use policy::{Fifo, Lru, PolicyKind, ReplacementPolicy};

use crate::error::{Error, Result};
use crate::kv_store::{BlockId, SlowTierStore, TokenKv};
use crate::wave_index::{ClusterId, MetaIndexEntry, ZonePlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct SlotId(pub u32);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Residency {
    NotCached,
    /// One fast slot per slow block, in block order.
    Cached(Vec<SlotId>),
}

#[derive(Debug, Clone)]
pub struct ClusterDescriptor {
    pub cluster_id: ClusterId,
    pub slow_block_ids: Vec<BlockId>,
    pub residency: Residency,
    pub last_access_step: Option<u64>,
}

/// Residency of one requested cluster as of the last commit.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterLookup {
    pub cluster_id: ClusterId,
    pub cached: Option<Vec<SlotId>>,
    pub blocks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LookupSnapshot {
    pub step: u64,
    pub clusters: Vec<ClusterLookup>,
}

impl LookupSnapshot {
    pub fn hits(&self) -> usize {
        self.clusters.iter().filter(|c| c.cached.is_some()).count()
    }

    pub fn misses(&self) -> usize {
        self.clusters.len() - self.hits()
    }

    pub fn missed_blocks(&self) -> usize {
        self.clusters
            .iter()
            .filter(|c| c.cached.is_none())
            .map(|c| c.blocks)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Steady,
    CacheHit,
    SlowMiss,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Span {
    pub source: Source,
    pub cluster_id: Option<ClusterId>,
    pub start: usize,
    pub len: usize,
}

/// Contiguous per-step staging area: steady tokens, then retrieval clusters
/// in rank order.
#[derive(Debug, Clone, Default)]
pub struct ExecutionBuffer {
    pub tokens: Vec<TokenKv>,
    pub spans: Vec<Span>,
}

impl ExecutionBuffer {
    pub fn span_tokens(&self, span: &Span) -> &[TokenKv] {
        &self.tokens[span.start..span.start + span.len]
    }

    pub fn tokens_from(&self, source: Source) -> impl Iterator<Item = &TokenKv> {
        self.spans
            .iter()
            .filter(move |s| s.source == source)
            .flat_map(|s| self.span_tokens(s))
    }

    pub fn token_ids(&self) -> Vec<u64> {
        self.tokens.iter().map(|t| t.token_id).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    /// Cluster has more blocks than the whole cache.
    Oversize,
    /// Not enough evictable space without displacing this step's clusters.
    Pressure,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CommitLog {
    pub step: u64,
    pub refreshed: Vec<ClusterId>,
    pub admitted: Vec<ClusterId>,
    pub evicted: Vec<ClusterId>,
    pub rejected: Vec<(ClusterId, RejectReason)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AccessEvent {
    pub cluster_id: ClusterId,
    pub hit: bool,
    pub blocks: usize,
}

/// Everything that happened to the cache in one step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepEvent {
    pub step: u64,
    pub accesses: Vec<AccessEvent>,
    pub commit: CommitLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BufferStats {
    pub hits: u64,
    pub misses: u64,
    pub hit_ratio: f64,
    pub bytes_slow_to_fast: u64,
    pub bytes_fast_internal: u64,
    pub slow_blocks_read: u64,
    pub admissions: u64,
    pub evictions: u64,
    pub rejections: u64,
    pub occupied_blocks: usize,
    pub capacity_blocks: usize,
}

/// Fast-tier block slots.
#[derive(Debug, Default)]
pub struct BlockCache {
    capacity_blocks: usize,
    slots: Vec<Option<Vec<TokenKv>>>,
    free: Vec<SlotId>,
}

impl BlockCache {
    fn with_capacity(capacity_blocks: usize) -> Self {
        let mut cache = Self::default();
        cache.grow_to(capacity_blocks);
        cache
    }

    fn grow_to(&mut self, capacity_blocks: usize) {
        if capacity_blocks <= self.capacity_blocks {
            return;
        }
        let old = self.capacity_blocks;
        self.slots.resize(capacity_blocks, None);
        // Lowest slot ids pop first.
        self.free
            .extend((old..capacity_blocks).rev().map(|i| SlotId(i as u32)));
        self.free.sort_unstable_by(|a, b| b.cmp(a));
        self.capacity_blocks = capacity_blocks;
    }

    pub fn capacity_blocks(&self) -> usize {
        self.capacity_blocks
    }

    pub fn occupied_blocks(&self) -> usize {
        self.capacity_blocks - self.free.len()
    }

    fn free_blocks(&self) -> usize {
        self.free.len()
    }

    fn slot(&self, id: SlotId) -> Option<&[TokenKv]> {
        self.slots.get(id.0 as usize).and_then(|s| s.as_deref())
    }
}

#[derive(Debug, Default)]
struct Counters {
    hits: AtomicU64,
    misses: AtomicU64,
    bytes_slow_to_fast: AtomicU64,
    bytes_fast_internal: AtomicU64,
    slow_blocks_read: AtomicU64,
}

fn load(c: &AtomicU64) -> u64 {
    c.load(Ordering::Relaxed)
}

#[derive(Debug)]
pub struct WaveBuffer {
    table: Vec<ClusterDescriptor>,
    cache: BlockCache,
    policy: Box<dyn ReplacementPolicy>,
    block_size_bytes: usize,
    block_capacity: usize,
    counters: Counters,
    admissions: u64,
    evictions: u64,
    rejections: u64,
    events: Vec<StepEvent>,
}

impl WaveBuffer {
    pub fn new(
        capacity_blocks: usize,
        block_size_bytes: usize,
        block_capacity: usize,
        policy: PolicyKind,
    ) -> Self {
        Self {
            table: Vec::new(),
            cache: BlockCache::with_capacity(capacity_blocks),
            policy: policy.build(),
            block_size_bytes,
            block_capacity,
            counters: Counters::default(),
            admissions: 0,
            evictions: 0,
            rejections: 0,
            events: Vec::new(),
        }
    }

    /// Adds descriptors for new clusters, all `NotCached`. Ids must continue
    /// the table densely.
    pub fn register(&mut self, entries: &[MetaIndexEntry]) -> Result<()> {
        for e in entries {
            if e.cluster_id.index() != self.table.len() {
                return Err(Error::integrity(format!(
                    "cluster {} registered out of order (table has {})",
                    e.cluster_id.0,
                    self.table.len()
                )));
            }
            self.table.push(ClusterDescriptor {
                cluster_id: e.cluster_id,
                slow_block_ids: e.block_ids.clone(),
                residency: Residency::NotCached,
                last_access_step: None,
            });
        }
        Ok(())
    }

    /// Raises the cache capacity. Capacity never shrinks.
    pub fn grow_capacity(&mut self, capacity_blocks: usize) {
        self.cache.grow_to(capacity_blocks);
    }

    pub fn descriptor(&self, id: ClusterId) -> Option<&ClusterDescriptor> {
        self.table.get(id.index())
    }

    pub fn descriptors(&self) -> &[ClusterDescriptor] {
        &self.table
    }

    pub fn cache(&self) -> &BlockCache {
        &self.cache
    }

    pub fn events(&self) -> &[StepEvent] {
        &self.events
    }

    fn descriptor_or_fault(&self, id: ClusterId) -> Result<&ClusterDescriptor> {
        self.descriptor(id).ok_or_else(|| {
            Error::integrity(format!("cluster {} is not in the mapping table", id.0))
        })
    }

    /// Synchronous residency check for the retrieval clusters.
    pub fn lookup(&self, cluster_ids: &[ClusterId], step: u64) -> Result<LookupSnapshot> {
        let mut clusters = Vec::with_capacity(cluster_ids.len());
        for &id in cluster_ids {
            let desc = self.descriptor_or_fault(id)?;
            let cached = match &desc.residency {
                Residency::Cached(slots) => Some(slots.clone()),
                Residency::NotCached => None,
            };
            clusters.push(ClusterLookup {
                cluster_id: id,
                cached,
                blocks: desc.slow_block_ids.len(),
            });
        }
        let snap = LookupSnapshot { step, clusters };
        self.counters
            .hits
            .fetch_add(snap.hits() as u64, Ordering::Relaxed);
        self.counters
            .misses
            .fetch_add(snap.misses() as u64, Ordering::Relaxed);
        Ok(snap)
    }

    /// Builds the execution buffer: steady tokens first, then each retrieval
    /// cluster in rank order from the cache or the slow tier.
    pub fn assemble<'a>(
        &self,
        plan: &ZonePlan,
        snapshot: &LookupSnapshot,
        steady_tokens: impl IntoIterator<Item = &'a TokenKv>,
        store: &SlowTierStore,
    ) -> Result<ExecutionBuffer> {
        if snapshot.clusters.len() != plan.retrieval.len()
            || snapshot
                .clusters
                .iter()
                .zip(&plan.retrieval)
                .any(|(c, id)| c.cluster_id != *id)
        {
            return Err(Error::integrity(
                "lookup snapshot does not match the zone plan",
            ));
        }

        let mut buf = ExecutionBuffer::default();
        let mut fast_bytes = 0u64;
        let mut slow_blocks = 0u64;

        let start = buf.tokens.len();
        for tok in steady_tokens {
            fast_bytes += tok.payload_bytes();
            buf.tokens.push(tok.clone());
        }
        buf.spans.push(Span {
            source: Source::Steady,
            cluster_id: None,
            start,
            len: buf.tokens.len() - start,
        });

        for c in &snapshot.clusters {
            let start = buf.tokens.len();
            let source = match &c.cached {
                Some(slots) => {
                    for &slot in slots {
                        let payload = self.cache.slot(slot).ok_or_else(|| {
                            Error::integrity(format!(
                                "cluster {} maps to empty slot {}",
                                c.cluster_id.0, slot.0
                            ))
                        })?;
                        for tok in payload {
                            fast_bytes += tok.payload_bytes();
                            buf.tokens.push(tok.clone());
                        }
                    }
                    Source::CacheHit
                }
                None => {
                    let desc = self.descriptor_or_fault(c.cluster_id)?;
                    for (_, payload) in store.read_blocks(&desc.slow_block_ids)? {
                        buf.tokens.extend_from_slice(payload);
                    }
                    slow_blocks += desc.slow_block_ids.len() as u64;
                    Source::SlowMiss
                }
            };
            buf.spans.push(Span {
                source,
                cluster_id: Some(c.cluster_id),
                start,
                len: buf.tokens.len() - start,
            });
        }

        self.counters
            .bytes_fast_internal
            .fetch_add(fast_bytes, Ordering::Relaxed);
        self.counters
            .slow_blocks_read
            .fetch_add(slow_blocks, Ordering::Relaxed);
        self.counters.bytes_slow_to_fast.fetch_add(
            slow_blocks * self.block_size_bytes as u64,
            Ordering::Relaxed,
        );
        Ok(buf)
    }

    /// Applies the step's replacement decisions. Hits are refreshed, then
    /// misses are admitted in rank order. Victims are taken oldest-first among
    /// clusters not accessed in this step; a miss that does not fit is
    /// rejected rather than displacing a more important cluster.
    pub fn commit_update(
        &mut self,
        snapshot: &LookupSnapshot,
        exec: &ExecutionBuffer,
    ) -> Result<CommitLog> {
        let step = snapshot.step;
        let mut log = CommitLog {
            step,
            ..Default::default()
        };

        for c in &snapshot.clusters {
            let desc = &mut self.table[c.cluster_id.index()];
            desc.last_access_step = Some(step);
            if matches!(desc.residency, Residency::Cached(_)) {
                self.policy.hit(c.cluster_id);
                log.refreshed.push(c.cluster_id);
            }
        }

        for c in snapshot.clusters.iter().filter(|c| c.cached.is_none()) {
            if matches!(
                self.table[c.cluster_id.index()].residency,
                Residency::Cached(_)
            ) {
                continue;
            }
            let need = c.blocks;
            if need > self.cache.capacity_blocks() {
                log.rejected.push((c.cluster_id, RejectReason::Oversize));
                continue;
            }
            let mut victims = Vec::new();
            let mut reclaimable = self.cache.free_blocks();
            if reclaimable < need {
                for cand in self.policy.candidates() {
                    let desc = &self.table[cand.index()];
                    if desc.last_access_step == Some(step) {
                        continue;
                    }
                    if let Residency::Cached(slots) = &desc.residency {
                        reclaimable += slots.len();
                        victims.push(cand);
                    }
                    if reclaimable >= need {
                        break;
                    }
                }
            }
            if reclaimable < need {
                log.rejected.push((c.cluster_id, RejectReason::Pressure));
                continue;
            }
            for v in victims {
                self.evict(v);
                log.evicted.push(v);
            }

            let span = exec
                .spans
                .iter()
                .find(|s| s.cluster_id == Some(c.cluster_id) && s.source == Source::SlowMiss)
                .ok_or_else(|| {
                    Error::integrity(format!(
                        "missed cluster {} absent from execution buffer",
                        c.cluster_id.0
                    ))
                })?;
            let payload = exec.span_tokens(span);
            let mut slots = Vec::with_capacity(need);
            for chunk in payload.chunks(self.block_capacity) {
                let slot = self.cache.free.pop().expect("space was reclaimed");
                self.cache.slots[slot.0 as usize] = Some(chunk.to_vec());
                slots.push(slot);
            }
            if slots.len() != need {
                return Err(Error::integrity(format!(
                    "cluster {} payload fills {} blocks, descriptor lists {need}",
                    c.cluster_id.0,
                    slots.len()
                )));
            }
            self.table[c.cluster_id.index()].residency = Residency::Cached(slots);
            self.policy.admitted(c.cluster_id);
            log.admitted.push(c.cluster_id);
        }

        self.admissions += log.admitted.len() as u64;
        self.evictions += log.evicted.len() as u64;
        self.rejections += log.rejected.len() as u64;
        self.events.push(StepEvent {
            step,
            accesses: snapshot
                .clusters
                .iter()
                .map(|c| AccessEvent {
                    cluster_id: c.cluster_id,
                    hit: c.cached.is_some(),
                    blocks: c.blocks,
                })
                .collect(),
            commit: log.clone(),
        });
        if cfg!(debug_assertions) {
            self.check_invariants()?;
        }
        Ok(log)
    }

    fn evict(&mut self, id: ClusterId) {
        let desc = &mut self.table[id.index()];
        if let Residency::Cached(slots) =
            std::mem::replace(&mut desc.residency, Residency::NotCached)
        {
            for s in slots {
                self.cache.slots[s.0 as usize] = None;
                self.cache.free.push(s);
            }
        }
        self.cache.free.sort_unstable_by(|a, b| b.cmp(a));
        self.policy.evicted(id);
    }

    pub fn stats(&self) -> BufferStats {
        let hits = load(&self.counters.hits);
        let misses = load(&self.counters.misses);
        BufferStats {
            hits,
            misses,
            hit_ratio: hit_ratio(hits, misses),
            bytes_slow_to_fast: load(&self.counters.bytes_slow_to_fast),
            bytes_fast_internal: load(&self.counters.bytes_fast_internal),
            slow_blocks_read: load(&self.counters.slow_blocks_read),
            admissions: self.admissions,
            evictions: self.evictions,
            rejections: self.rejections,
            occupied_blocks: self.cache.occupied_blocks(),
            capacity_blocks: self.cache.capacity_blocks(),
        }
    }

    /// Capacity safety, all-or-nothing residency and slot uniqueness.
    pub fn check_invariants(&self) -> Result<()> {
        let mut owner = vec![false; self.cache.capacity_blocks()];
        let mut used = 0;
        for d in &self.table {
            if let Residency::Cached(slots) = &d.residency {
                if slots.len() != d.slow_block_ids.len() {
                    return Err(Error::integrity(format!(
                        "cluster {} partially cached",
                        d.cluster_id.0
                    )));
                }
                for s in slots {
                    let i = s.0 as usize;
                    if i >= owner.len() || owner[i] || self.cache.slots[i].is_none() {
                        return Err(Error::integrity(format!("slot {i} double-booked or empty")));
                    }
                    owner[i] = true;
                    used += 1;
                }
            }
        }
        if used != self.cache.occupied_blocks() || used > self.cache.capacity_blocks() {
            return Err(Error::integrity(format!(
                "{used} slots in use, cache reports {} of {}",
                self.cache.occupied_blocks(),
                self.cache.capacity_blocks()
            )));
        }
        Ok(())
    }
}

pub fn hit_ratio(hits: u64, misses: u64) -> f64 {
    if hits + misses == 0 {
        0.0
    } else {
        hits as f64 / (hits + misses) as f64
    }
}
