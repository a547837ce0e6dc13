//! Per-head orchestration of prefill and decode.
//!
//! A [`HeadEngine`] owns one head's slow tier, index and wave buffer. Prefill
//! offloads the KV, builds the segmented index and registers every cluster as
//! not cached. Each decode step ranks clusters, plans zones, estimates the
//! estimation zone while the buffer checks residency, assembles the execution
//! buffer, attends exactly over it, merges, commits cache updates and finally
//! appends the new token (clustering the decode buffer when it is full).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::attention::{
    denominator_only_partial, estimate_partial_scored, exact_partial, merge, oracle_attention,
    AttentionOutput, PartialAttention,
};
use crate::error::{Error, Result};
use crate::harness::metrics::{recall_at_k, relative_l2};
use crate::kv_store::{block_capacity, SlowTierStore, TokenKv};
use crate::wave_buffer::{hit_ratio, PolicyKind, Source, WaveBuffer};
use crate::wave_index::{ClusterId, IndexConfig, MetaIndexEntry, TailMode, WaveIndex, ZonePlan};

/// How the softmax denominator of the final output is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorMode {
    /// Exact terms for every attended token, centroid terms for estimated
    /// clusters.
    #[default]
    Merged,
    /// Centroid terms for every cluster (retrieved ones included) plus exact
    /// terms for the steady zone.
    ClusterMass,
}

/// Engine configuration: the index settings plus buffer and metric knobs.
/// This is the `engine` object of a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub centroid_ratio: usize,
    pub segment_size: usize,
    pub kmeans_iters: usize,
    pub update_segment: usize,
    pub sink_tokens: usize,
    pub local_window: usize,
    pub retrieval_fraction: f64,
    pub estimation_fraction: f64,
    pub tail_mode: TailMode,
    /// Cache capacity as a share of the head's slow-tier blocks.
    pub cache_fraction: f64,
    pub block_size_bytes: usize,
    pub denominator_mode: DenominatorMode,
    /// Recall cutoff.
    pub metrics_k: usize,
    pub replacement_policy: PolicyKind,
    pub rng_seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self::from_index(&IndexConfig::default())
    }
}

impl EngineConfig {
    pub fn from_index(ix: &IndexConfig) -> Self {
        Self {
            centroid_ratio: ix.centroid_ratio,
            segment_size: ix.segment_size,
            kmeans_iters: ix.kmeans_iters,
            update_segment: ix.update_segment,
            sink_tokens: ix.sink_tokens,
            local_window: ix.local_window,
            retrieval_fraction: ix.retrieval_fraction,
            estimation_fraction: ix.estimation_fraction,
            tail_mode: ix.tail_mode,
            cache_fraction: 0.05,
            block_size_bytes: 2048,
            denominator_mode: DenominatorMode::Merged,
            metrics_k: 100,
            replacement_policy: PolicyKind::Lru,
            rng_seed: ix.rng_seed,
        }
    }

    pub fn index_config(&self) -> IndexConfig {
        IndexConfig {
            centroid_ratio: self.centroid_ratio,
            segment_size: self.segment_size,
            kmeans_iters: self.kmeans_iters,
            update_segment: self.update_segment,
            sink_tokens: self.sink_tokens,
            local_window: self.local_window,
            retrieval_fraction: self.retrieval_fraction,
            estimation_fraction: self.estimation_fraction,
            tail_mode: self.tail_mode,
            rng_seed: self.rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.index_config().validate()?;
        if !(0.0..=1.0).contains(&self.cache_fraction) {
            return Err(Error::config(format!(
                "cache_fraction must lie in [0, 1], got {}",
                self.cache_fraction
            )));
        }
        if self.metrics_k == 0 {
            return Err(Error::config("metrics_k must be positive"));
        }
        if self.block_size_bytes == 0 {
            return Err(Error::config("block_size_bytes must be positive"));
        }
        Ok(())
    }
}

/// Per-step observations. Byte and hit counts are for this step only unless
/// named cumulative.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub context_tokens: usize,
    pub clusters: usize,
    pub retrieval_clusters: usize,
    pub estimation_clusters: usize,
    pub dropped_clusters: usize,
    pub attended_tokens: usize,
    pub recall: f64,
    /// Relative L2 error against full attention, when the oracle is enabled.
    pub relative_error: Option<f64>,
    /// `ln` of the engine's softmax denominator.
    pub log_denominator: f64,
    /// `ln` of the full-attention denominator, when the oracle is enabled.
    pub oracle_log_denominator: Option<f64>,
    pub denominator_exact_coverage: f64,
    pub hits: usize,
    pub misses: usize,
    pub cumulative_hit_ratio: f64,
    pub bytes_slow_to_fast: u64,
    pub bytes_fast_internal: u64,
    pub missed_blocks: usize,
    pub exact_ops: u64,
    pub estimation_ops: u64,
    pub new_clusters: usize,
}

/// Output of one decode step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub output: Vec<f32>,
    pub metrics: StepMetrics,
    /// Token ids in the execution buffer, steady zone first.
    pub attended_token_ids: Vec<u64>,
    /// Full-attention output, when the oracle is enabled.
    pub oracle_output: Option<Vec<f32>>,
}

/// Where every token seen so far currently lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TokenAccounting {
    pub indexed: usize,
    pub sink: usize,
    pub buffered: usize,
    pub seen: usize,
}

impl TokenAccounting {
    pub fn balanced(&self) -> bool {
        self.indexed + self.sink + self.buffered == self.seen
    }
}

/// One head's state machine.
#[derive(Debug)]
pub struct HeadEngine {
    head: usize,
    d: usize,
    cfg: EngineConfig,
    store: SlowTierStore,
    index: WaveIndex,
    buffer: WaveBuffer,
    sink: Vec<TokenKv>,
    tail: VecDeque<TokenKv>,
    step: u64,
    seen: usize,
    offload_bytes: u64,
    /// Every key and value seen so far, row-major, for recall and the oracle.
    history_keys: Vec<f32>,
    history_values: Vec<f32>,
    oracle: bool,
}

impl HeadEngine {
    /// Runs prefill over row-major `keys`/`values` (`n x d`).
    pub fn prefill(
        head: usize,
        keys: &[f32],
        values: &[f32],
        d: usize,
        cfg: &EngineConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if d == 0 || !keys.len().is_multiple_of(d) || keys.len() != values.len() {
            return Err(Error::config(
                "prefill keys/values do not form n x d matrices",
            ));
        }
        let n = keys.len() / d;
        if n == 0 {
            return Err(Error::config("prefill needs at least one token"));
        }
        block_capacity(cfg.block_size_bytes, d)?;
        let tokens: Vec<TokenKv> = keys
            .chunks_exact(d)
            .zip(values.chunks_exact(d))
            .enumerate()
            .map(|(i, (k, v))| TokenKv::new(i as u64, k.to_vec(), v.to_vec()))
            .collect();

        let sink_end = cfg.sink_tokens.min(n);
        let tail_start = n.saturating_sub(cfg.local_window).max(sink_end);
        let icfg = cfg.index_config();
        let mut store = SlowTierStore::new(head, d, cfg.block_size_bytes)?;
        let index = WaveIndex::build(&tokens[sink_end..tail_start], &icfg, &mut store)?;
        let offload_bytes = tokens.iter().map(TokenKv::payload_bytes).sum();

        let mut buffer = WaveBuffer::new(
            0,
            cfg.block_size_bytes,
            store.block_capacity(),
            cfg.replacement_policy,
        );
        buffer.register(index.entries())?;
        let mut engine = Self {
            head,
            d,
            cfg: cfg.clone(),
            store,
            index,
            buffer,
            sink: tokens[..sink_end].to_vec(),
            tail: tokens[tail_start..].iter().cloned().collect(),
            step: 0,
            seen: n,
            offload_bytes,
            history_keys: keys.to_vec(),
            history_values: values.to_vec(),
            oracle: false,
        };
        engine.resize_cache();
        Ok(engine)
    }

    /// Enables the full-attention oracle for per-step error metrics. The
    /// engine's outputs do not depend on this switch.
    pub fn set_oracle(&mut self, enabled: bool) {
        self.oracle = enabled;
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn index(&self) -> &WaveIndex {
        &self.index
    }

    pub fn store(&self) -> &SlowTierStore {
        &self.store
    }

    pub fn buffer(&self) -> &WaveBuffer {
        &self.buffer
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Bytes written to the slow tier by prefill offload (fast to slow, never
    /// counted as slow-to-fast traffic).
    pub fn offload_bytes(&self) -> u64 {
        self.offload_bytes
    }

    pub fn accounting(&self) -> TokenAccounting {
        TokenAccounting {
            indexed: self.index.indexed_tokens(),
            sink: self.sink.len(),
            buffered: self.tail.len(),
            seen: self.seen,
        }
    }

    /// Cache capacity tracks `cache_fraction` of the slow tier and never
    /// shrinks.
    fn resize_cache(&mut self) {
        let blocks = (self.cfg.cache_fraction * self.store.num_blocks() as f64).floor() as usize;
        self.buffer.grow_capacity(blocks);
    }

    fn steady_tokens(&self) -> impl Iterator<Item = &TokenKv> {
        self.sink.iter().chain(self.tail.iter())
    }

    /// One decode step: `q` attends over every token seen so far, then
    /// `new_kv` joins the context.
    pub fn decode_step(
        &mut self,
        q: &[f32],
        new_key: &[f32],
        new_value: &[f32],
    ) -> Result<StepOutcome> {
        let d = self.d;
        if q.len() != d || new_key.len() != d || new_value.len() != d {
            return Err(Error::config(format!(
                "decode vectors must have dimension {d}"
            )));
        }
        let step = self.step;
        let before = self.buffer.stats();

        // rank and plan
        let steady_ids: Vec<u64> = self.steady_tokens().map(|t| t.token_id).collect();
        let plan = self.index.plan(q, steady_ids)?;

        // estimation and residency lookup are independent
        let (estimate, snapshot) = rayon::join(
            || self.estimation_partials(&plan),
            || self.buffer.lookup(&plan.retrieval, step),
        );
        let snapshot = snapshot?;

        // assemble and attend
        let exec = self
            .buffer
            .assemble(&plan, &snapshot, self.steady_tokens(), &self.store)?;
        let mut partials = match self.cfg.denominator_mode {
            DenominatorMode::Merged => vec![exact_partial(q, &exec.tokens)],
            DenominatorMode::ClusterMass => {
                let steady = exact_partial(q, exec.tokens_from(Source::Steady));
                let retrieved_exact = exact_partial(
                    q,
                    exec.spans
                        .iter()
                        .filter(|s| s.source != Source::Steady)
                        .flat_map(|s| exec.span_tokens(s)),
                );
                let retrieved = retrieved_exact
                    .replace_denominator(&self.centroid_mass(&plan, &plan.retrieval));
                vec![steady, retrieved]
            }
        };
        let exact_ops = partials.iter().map(PartialAttention::ops).sum();
        let estimation_ops = estimate.iter().map(PartialAttention::ops).sum();
        partials.extend(estimate);
        let out: AttentionOutput = merge(&partials)?;

        // barrier: cache updates land before the next step
        self.buffer.commit_update(&snapshot, &exec)?;

        let context = self.seen;
        let attended_token_ids = exec.token_ids();
        let k = self.cfg.metrics_k.min(context);
        let recall = recall_at_k(&attended_token_ids, q, &self.history_keys, d, k)?;
        let oracle = if self.oracle {
            Some(oracle_attention(
                q,
                &self.history_keys,
                &self.history_values,
                d,
            )?)
        } else {
            None
        };
        let relative_error = oracle.as_ref().map(|o| relative_l2(&out.output, &o.output));
        let oracle_log_denominator = oracle.as_ref().map(|o| o.log_denominator);

        // append the new token and cluster the decode buffer if full
        let tok = TokenKv::new(self.seen as u64, new_key.to_vec(), new_value.to_vec());
        self.history_keys.extend_from_slice(new_key);
        self.history_values.extend_from_slice(new_value);
        self.tail.push_back(tok);
        self.seen += 1;
        let added = self.index.update(&mut self.tail, &mut self.store)?;
        if !added.is_empty() {
            let start = self.buffer.descriptors().len();
            self.buffer.register(&self.index.entries()[start..])?;
            self.resize_cache();
        }
        self.step += 1;

        let after = self.buffer.stats();
        let metrics = StepMetrics {
            step,
            context_tokens: context,
            clusters: plan.scores.len(),
            retrieval_clusters: plan.retrieval.len(),
            estimation_clusters: plan.estimation.len(),
            dropped_clusters: plan.dropped.len(),
            attended_tokens: exec.tokens.len(),
            recall,
            relative_error,
            log_denominator: out.log_denominator,
            oracle_log_denominator,
            denominator_exact_coverage: out.denominator_exact_coverage,
            hits: snapshot.hits(),
            misses: snapshot.misses(),
            cumulative_hit_ratio: hit_ratio(after.hits, after.misses),
            bytes_slow_to_fast: after.bytes_slow_to_fast - before.bytes_slow_to_fast,
            bytes_fast_internal: after.bytes_fast_internal - before.bytes_fast_internal,
            missed_blocks: snapshot.missed_blocks(),
            exact_ops,
            estimation_ops,
            new_clusters: added.len(),
        };
        Ok(StepOutcome {
            output: out.output,
            metrics,
            attended_token_ids,
            oracle_output: oracle.map(|o| o.output),
        })
    }

    /// Estimation-zone partial, plus the dropped tail or the retrieved
    /// clusters' centroid mass as the denominator mode requires.
    fn estimation_partials(&self, plan: &ZonePlan) -> Vec<PartialAttention> {
        let entries = self.index.entries();
        let scored = |ids: &[ClusterId]| -> Vec<(&MetaIndexEntry, f64)> {
            ids.iter()
                .map(|id| (&entries[id.index()], plan.scores[id.index()]))
                .collect()
        };
        let mut out = vec![estimate_partial_scored(self.d, scored(&plan.estimation))];
        let include_dropped = self.cfg.tail_mode == TailMode::DenominatorOnly
            || self.cfg.denominator_mode == DenominatorMode::ClusterMass;
        if include_dropped {
            out.push(denominator_only_partial(self.d, scored(&plan.dropped)));
        }
        out
    }

    fn centroid_mass(&self, plan: &ZonePlan, ids: &[ClusterId]) -> PartialAttention {
        let entries = self.index.entries();
        denominator_only_partial(
            self.d,
            ids.iter()
                .map(|id| (&entries[id.index()], plan.scores[id.index()])),
        )
    }
}
