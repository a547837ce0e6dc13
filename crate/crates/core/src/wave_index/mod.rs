//! Clustered index over key vectors.
//!
//! Prefill keys are clustered per positional segment with spherical k-means.
//! Each cluster is summarized by a [`MetaIndexEntry`]: the arithmetic mean of
//! its raw keys, the sum of its values and its size. Those three are enough to
//! estimate the attention mass of a whole cluster without touching its tokens.
//! Decode tokens are clustered in fixed-size batches and appended.

mod config;
mod kmeans;

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{IndexConfig, TailMode};
pub use kmeans::spherical_kmeans;

use crate::error::{Error, Result};
use crate::kv_store::{BlockId, SlowTierStore, TokenKv};
use crate::linalg::dot_f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClusterId(pub u32);

impl ClusterId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Fast-tier summary of one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaIndexEntry {
    pub cluster_id: ClusterId,
    /// Arithmetic mean of the members' raw keys.
    pub centroid: Vec<f32>,
    /// Elementwise sum of the members' values.
    pub value_sum: Vec<f32>,
    pub size: usize,
    /// Physical home of the members in the slow tier.
    pub block_ids: Vec<BlockId>,
}

/// Summarizes `members` and packs them into the slow tier.
pub fn finalize_cluster(
    cluster_id: ClusterId,
    members: &[TokenKv],
    store: &mut SlowTierStore,
) -> Result<MetaIndexEntry> {
    let first = members
        .first()
        .ok_or_else(|| Error::integrity(format!("cluster {} has no members", cluster_id.0)))?;
    let d = first.dim();
    let mut key_sum = vec![0f64; d];
    let mut value_sum = vec![0f64; d];
    for tok in members {
        tok.check_dim(d)?;
        for (acc, &x) in key_sum.iter_mut().zip(&tok.key) {
            *acc += x as f64;
        }
        for (acc, &x) in value_sum.iter_mut().zip(&tok.value) {
            *acc += x as f64;
        }
    }
    let s = members.len() as f64;
    let block_ids = store.pack_cluster(members)?;
    Ok(MetaIndexEntry {
        cluster_id,
        centroid: key_sum.iter().map(|&x| (x / s) as f32).collect(),
        value_sum: value_sum.iter().map(|&x| x as f32).collect(),
        size: members.len(),
        block_ids,
    })
}

/// Derives an independent stream seed from the configured seed.
pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const UPDATE_STREAM: u64 = 1 << 32;

/// Clusters `tokens` with spherical k-means and finalizes every cluster.
/// Cluster ids are assigned from `first_id` in cluster-index order; members
/// keep their input order.
fn cluster_run(
    tokens: &[TokenKv],
    assignment: &[u32],
    k: usize,
    first_id: u32,
    store: &mut SlowTierStore,
) -> Result<Vec<MetaIndexEntry>> {
    let mut buckets: Vec<Vec<TokenKv>> = vec![Vec::new(); k];
    for (tok, &a) in tokens.iter().zip(assignment) {
        buckets[a as usize].push(tok.clone());
    }
    buckets
        .iter()
        .enumerate()
        .map(|(i, members)| finalize_cluster(ClusterId(first_id + i as u32), members, store))
        .collect()
}

fn flat_keys(tokens: &[TokenKv], d: usize) -> Result<Vec<f32>> {
    let mut keys = Vec::with_capacity(tokens.len() * d);
    for tok in tokens {
        tok.check_dim(d)?;
        keys.extend_from_slice(&tok.key);
    }
    Ok(keys)
}

/// Splits `tokens` into consecutive `segment_size` runs and clusters each one
/// independently with `ceil(len / centroid_ratio)` centroids.
pub fn segmented_build(
    tokens: &[TokenKv],
    cfg: &IndexConfig,
    store: &mut SlowTierStore,
    first_id: u32,
) -> Result<Vec<MetaIndexEntry>> {
    cfg.validate()?;
    if tokens.is_empty() {
        return Ok(Vec::new());
    }
    let d = store.dim();
    let segments: Vec<&[TokenKv]> = tokens.chunks(cfg.segment_size).collect();
    let assignments = segments
        .par_iter()
        .enumerate()
        .map(|(s, seg)| {
            let keys = flat_keys(seg, d)?;
            let k = cfg.clusters_for(seg.len());
            spherical_kmeans(
                &keys,
                d,
                k,
                cfg.kmeans_iters,
                mix_seed(cfg.rng_seed, s as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut entries = Vec::new();
    let mut next = first_id;
    for (seg, assignment) in segments.iter().zip(&assignments) {
        let k = cfg.clusters_for(seg.len());
        entries.extend(cluster_run(seg, assignment, k, next, store)?);
        next += k as u32;
    }
    Ok(entries)
}

/// Clusters ordered by descending `q . C`, ties to the lower cluster id.
#[derive(Debug, Clone)]
pub struct Ranking {
    /// Positions into the ranked entry slice, best first.
    pub order: Vec<usize>,
    /// `q . C_i` for every entry, in entry order.
    pub scores: Vec<f64>,
}

pub fn rank_clusters(q: &[f32], entries: &[MetaIndexEntry]) -> Result<Ranking> {
    let mut scores = Vec::with_capacity(entries.len());
    for e in entries {
        if e.centroid.len() != q.len() {
            return Err(Error::config(format!(
                "query has dimension {}, centroid {} has {}",
                q.len(),
                e.cluster_id.0,
                e.centroid.len()
            )));
        }
        scores.push(dot_f64(q, &e.centroid));
    }
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(entries[a].cluster_id.cmp(&entries[b].cluster_id))
    });
    Ok(Ranking { order, scores })
}

/// Partition of the context for one decode step.
#[derive(Debug, Clone, PartialEq)]
pub struct ZonePlan {
    pub steady_token_ids: Vec<u64>,
    /// Top-ranked clusters, attended exactly.
    pub retrieval: Vec<ClusterId>,
    /// Next-ranked clusters, estimated from their summaries.
    pub estimation: Vec<ClusterId>,
    /// Remaining clusters, in rank order.
    pub dropped: Vec<ClusterId>,
    /// `q . C_i` for every cluster, indexed by cluster id.
    pub scores: Vec<f64>,
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Retrieval and estimation zone sizes for `m` clusters.
pub fn zone_sizes(m: usize, cfg: &IndexConfig) -> (usize, usize) {
    if m == 0 {
        return (0, 0);
    }
    let r = round_half_up(cfg.retrieval_fraction * m as f64).clamp(1, m);
    let e = round_half_up(cfg.estimation_fraction * m as f64).min(m - r);
    (r, e)
}

/// Splits a ranking into retrieval, estimation and dropped zones. Entries are
/// expected to be indexed by cluster id (as in [`WaveIndex`]).
pub fn plan_zones(
    ranking: Ranking,
    entries: &[MetaIndexEntry],
    steady_token_ids: Vec<u64>,
    cfg: &IndexConfig,
) -> ZonePlan {
    let m = ranking.order.len();
    let (r, e) = zone_sizes(m, cfg);
    let ids: Vec<ClusterId> = ranking
        .order
        .iter()
        .map(|&i| entries[i].cluster_id)
        .collect();
    ZonePlan {
        steady_token_ids,
        retrieval: ids[..r].to_vec(),
        estimation: ids[r..r + e].to_vec(),
        dropped: ids[r + e..].to_vec(),
        scores: ranking.scores,
    }
}

/// The per-head index: meta entries in cluster-id order plus update state.
#[derive(Debug, Clone)]
pub struct WaveIndex {
    cfg: IndexConfig,
    entries: Vec<MetaIndexEntry>,
    prefill_segments: usize,
    update_clusterings: usize,
}

impl WaveIndex {
    /// Builds the prefill index over `tokens` (the indexable range only).
    pub fn build(tokens: &[TokenKv], cfg: &IndexConfig, store: &mut SlowTierStore) -> Result<Self> {
        let entries = segmented_build(tokens, cfg, store, 0)?;
        Ok(Self {
            cfg: cfg.clone(),
            entries,
            prefill_segments: tokens.len().div_ceil(cfg.segment_size),
            update_clusterings: 0,
        })
    }

    pub fn config(&self) -> &IndexConfig {
        &self.cfg
    }

    pub fn entries(&self) -> &[MetaIndexEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ClusterId) -> Option<&MetaIndexEntry> {
        self.entries.get(id.index())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn prefill_segments(&self) -> usize {
        self.prefill_segments
    }

    pub fn update_clusterings(&self) -> usize {
        self.update_clusterings
    }

    /// Tokens covered by all clusters.
    pub fn indexed_tokens(&self) -> usize {
        self.entries.iter().map(|e| e.size).sum()
    }

    pub fn rank(&self, q: &[f32]) -> Result<Ranking> {
        rank_clusters(q, &self.entries)
    }

    pub fn plan(&self, q: &[f32], steady_token_ids: Vec<u64>) -> Result<ZonePlan> {
        let ranking = self.rank(q)?;
        Ok(plan_zones(
            ranking,
            &self.entries,
            steady_token_ids,
            &self.cfg,
        ))
    }

    /// Clusters the oldest `update_segment` buffered tokens whenever the buffer
    /// holds at least `update_segment + local_window`, so the newest
    /// `local_window` tokens stay unclustered. Returns the new cluster ids.
    pub fn update(
        &mut self,
        buffer: &mut VecDeque<TokenKv>,
        store: &mut SlowTierStore,
    ) -> Result<Vec<ClusterId>> {
        let seg = self.cfg.update_segment;
        let mut added = Vec::new();
        while buffer.len() >= seg + self.cfg.local_window {
            let batch: Vec<TokenKv> = buffer.drain(..seg).collect();
            let keys = flat_keys(&batch, store.dim())?;
            let k = self.cfg.clusters_for(seg);
            let seed = mix_seed(
                self.cfg.rng_seed,
                UPDATE_STREAM + self.update_clusterings as u64,
            );
            let assignment = spherical_kmeans(&keys, store.dim(), k, self.cfg.kmeans_iters, seed)?;
            let first = u32::try_from(self.entries.len())
                .map_err(|_| Error::config("cluster count exceeds u32::MAX"))?;
            let new = cluster_run(&batch, &assignment, k, first, store)?;
            added.extend(new.iter().map(|e| e.cluster_id));
            self.entries.extend(new);
            self.update_clusterings += 1;
        }
        Ok(added)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_tokens(n: usize, d: usize, seed: u64) -> Vec<TokenKv> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let key = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let value = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                TokenKv::new(i as u64, key, value)
            })
            .collect()
    }

    fn store(d: usize) -> SlowTierStore {
        SlowTierStore::new(0, d, 2048).unwrap()
    }

    fn entry(id: u32, centroid: Vec<f32>) -> MetaIndexEntry {
        MetaIndexEntry {
            cluster_id: ClusterId(id),
            value_sum: vec![0.0; centroid.len()],
            centroid,
            size: 1,
            block_ids: Vec::new(),
        }
    }

    #[test]
    fn singleton_cluster() {
        let toks = random_tokens(1, 4, 0);
        let e = finalize_cluster(ClusterId(3), &toks, &mut store(4)).unwrap();
        assert_eq!(e.centroid, toks[0].key);
        assert_eq!(e.value_sum, toks[0].value);
        assert_eq!(e.size, 1);
        assert_eq!(e.block_ids.len(), 1);
    }

    #[test]
    fn pair_centroid_is_midpoint() {
        let toks = vec![
            TokenKv::new(0, vec![1.0, 2.0], vec![0.5, 0.5]),
            TokenKv::new(1, vec![3.0, -2.0], vec![1.5, -0.5]),
        ];
        let e = finalize_cluster(ClusterId(0), &toks, &mut store(2)).unwrap();
        assert_eq!(e.centroid, vec![2.0, 0.0]);
        assert_eq!(e.value_sum, vec![2.0, 0.0]);
    }

    #[test]
    fn empty_cluster_is_integrity_fault() {
        assert!(matches!(
            finalize_cluster(ClusterId(0), &[], &mut store(2)),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn jensen_bound_on_random_cluster() {
        let d = 16;
        let toks = random_tokens(50, d, 5);
        let e = finalize_cluster(ClusterId(0), &toks, &mut store(d)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let scale = (d as f64).sqrt();
        for _ in 0..1000 {
            let q: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let dotq = |v: &[f32]| q.iter().zip(v).map(|(a, &b)| a * b as f64).sum::<f64>() / scale;
            let lhs = dotq(&e.centroid).exp();
            let rhs = toks.iter().map(|t| dotq(&t.key).exp()).sum::<f64>() / toks.len() as f64;
            assert!(lhs <= rhs * (1.0 + 1e-5), "{lhs} > {rhs}");
        }
    }

    #[test]
    fn segment_arithmetic() {
        let cfg = IndexConfig::default();
        assert_eq!(cfg.clusters_for(100), 7);
        assert_eq!(
            32768usize.div_ceil(cfg.segment_size) * cfg.clusters_for(8192),
            2048
        );

        let cfg = IndexConfig {
            segment_size: 100,
            kmeans_iters: 3,
            ..Default::default()
        };
        let toks = random_tokens(250, 8, 1);
        let mut st = store(8);
        let idx = WaveIndex::build(&toks, &cfg, &mut st).unwrap();
        // 100, 100, 50 tokens -> 7 + 7 + 4 clusters
        assert_eq!(idx.len(), 18);
        assert_eq!(idx.prefill_segments(), 3);
        assert_eq!(idx.indexed_tokens(), 250);
        assert_eq!(st.num_tokens(), 250);
        for (i, e) in idx.entries().iter().enumerate() {
            assert_eq!(e.cluster_id, ClusterId(i as u32));
        }
        // clusters never straddle segments
        for e in idx.entries() {
            let toks = st.read_blocks(&e.block_ids).unwrap();
            let segs: Vec<u64> = toks
                .iter()
                .flat_map(|(_, t)| t.iter().map(|t| t.token_id / 100))
                .collect();
            assert!(segs.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn empty_range_builds_empty_index() {
        let idx = WaveIndex::build(&[], &IndexConfig::default(), &mut store(4)).unwrap();
        assert!(idx.is_empty());
        let plan = idx.plan(&[0.0; 4], vec![0, 1]).unwrap();
        assert!(plan.retrieval.is_empty() && plan.estimation.is_empty() && plan.dropped.is_empty());
        assert_eq!(plan.steady_token_ids, vec![0, 1]);
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = IndexConfig {
            segment_size: 128,
            ..Default::default()
        };
        let toks = random_tokens(300, 8, 2);
        let a = WaveIndex::build(&toks, &cfg, &mut store(8)).unwrap();
        let b = WaveIndex::build(&toks, &cfg, &mut store(8)).unwrap();
        assert_eq!(a.entries(), b.entries());
    }

    #[test]
    fn ranking_tie_break() {
        let entries = vec![
            entry(0, vec![3.0]),
            entry(1, vec![5.0]),
            entry(2, vec![5.0]),
            entry(3, vec![1.0]),
        ];
        let r = rank_clusters(&[1.0], &entries).unwrap();
        assert_eq!(r.order, vec![1, 2, 0, 3]);
        assert_eq!(r.scores, vec![3.0, 5.0, 5.0, 1.0]);

        let ortho: Vec<_> = (0..5)
            .map(|i| entry(i, vec![0.0, 1.0 + i as f32]))
            .collect();
        let r = rank_clusters(&[1.0, 0.0], &ortho).unwrap();
        assert_eq!(r.order, vec![0, 1, 2, 3, 4]);
        assert!(r.scores.iter().all(|&s| s == 0.0));

        assert!(matches!(
            rank_clusters(&[1.0, 2.0], &entries),
            Err(Error::Config(_))
        ));
        assert!(rank_clusters(&[1.0], &[]).unwrap().order.is_empty());
    }

    #[test]
    fn zone_sizes_at_reference_scale() {
        let cfg = IndexConfig {
            retrieval_fraction: 150.0 / 8192.0,
            ..Default::default()
        };
        assert_eq!(zone_sizes(8192, &cfg), (150, 1901));
        assert_eq!(zone_sizes(0, &cfg), (0, 0));
        // r >= 1 for any non-empty index
        let cfg = IndexConfig {
            retrieval_fraction: 0.0,
            estimation_fraction: 1.0,
            ..Default::default()
        };
        assert_eq!(zone_sizes(3, &cfg), (1, 2));
    }

    #[test]
    fn update_fires_at_segment_plus_window() {
        let d = 4;
        let cfg = IndexConfig::default();
        let mut st = store(d);
        let mut idx = WaveIndex::build(&[], &cfg, &mut st).unwrap();
        let mut buffer: VecDeque<TokenKv> = random_tokens(500, d, 3).into();
        assert!(idx.update(&mut buffer, &mut st).unwrap().is_empty());
        assert_eq!(buffer.len(), 500);

        let mut buffer: VecDeque<TokenKv> = random_tokens(1088, d, 3).into();
        let added = idx.update(&mut buffer, &mut st).unwrap();
        assert_eq!(added.len(), 64);
        assert_eq!(buffer.len(), 64);
        assert_eq!(buffer.front().unwrap().token_id, 1024);
        assert_eq!(idx.indexed_tokens(), 1024);
        assert_eq!(idx.update_clusterings(), 1);
    }

    fn brute_force_order(q: &[f32], entries: &[MetaIndexEntry]) -> Vec<usize> {
        // selection sort by (score desc, id asc) with independently computed scores
        let scores: Vec<f64> = entries
            .iter()
            .map(|e| {
                e.centroid
                    .iter()
                    .zip(q)
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum()
            })
            .collect();
        let mut left: Vec<usize> = (0..entries.len()).collect();
        let mut out = Vec::new();
        while !left.is_empty() {
            let mut best = 0;
            for j in 1..left.len() {
                let (a, b) = (left[j], left[best]);
                if scores[a] > scores[b]
                    || (scores[a] == scores[b] && entries[a].cluster_id < entries[b].cluster_id)
                {
                    best = j;
                }
            }
            out.push(left.remove(best));
        }
        out
    }

    proptest! {
        #[test]
        fn ranking_matches_brute_force(seed in 0u64..1000, m in 1usize..64, quantize in proptest::bool::ANY) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 6;
            // Quantized centroids force plenty of ties.
            let entries: Vec<_> = (0..m).map(|i| {
                let c: Vec<f32> = (0..d).map(|_| {
                    let x: f32 = StandardNormal.sample(&mut rng);
                    if quantize { x.round() } else { x }
                }).collect();
                entry(i as u32, c)
            }).collect();
            let q: Vec<f32> = (0..d).map(|_| {
                let x: f32 = StandardNormal.sample(&mut rng);
                if quantize { x.round() } else { x }
            }).collect();
            let r = rank_clusters(&q, &entries).unwrap();
            prop_assert_eq!(r.order, brute_force_order(&q, &entries));
        }

        #[test]
        fn zone_plan_partitions_clusters(m in 0usize..500, rf in 0.0f64..0.5, ef in 0.0f64..0.5, seed in 0u64..50) {
            let cfg = IndexConfig { retrieval_fraction: rf, estimation_fraction: ef, ..Default::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let entries: Vec<_> = (0..m).map(|i| entry(i as u32, vec![StandardNormal.sample(&mut rng)])).collect();
            let ranking = rank_clusters(&[1.0], &entries).unwrap();
            let order = ranking.order.clone();
            let plan = plan_zones(ranking, &entries, vec![], &cfg);
            let mut all: Vec<u32> = plan.retrieval.iter().chain(&plan.estimation).chain(&plan.dropped).map(|c| c.0).collect();
            // zones follow rank order
            prop_assert_eq!(all.clone(), order.iter().map(|&i| i as u32).collect::<Vec<_>>());
            all.sort_unstable();
            prop_assert_eq!(all, (0..m as u32).collect::<Vec<_>>());
            if m > 0 { prop_assert!(!plan.retrieval.is_empty()); }
        }
    }
}
