//! Clustered KV-cache retrieval for long-context attention.
//!
//! Keys and values of every attention head are offloaded to a block-addressed
//! slow tier and indexed by spherical k-means clusters ([`wave_index`]). Each
//! decode step attends exactly over the steady zone and the top-ranked
//! clusters, estimates the next-ranked clusters from their centroids and value
//! sums ([`attention`]), and stages retrieved clusters through a fast-tier
//! block cache ([`wave_buffer`]). [`engine`] ties these together per head and
//! [`harness`] drives engines from trace files.

pub mod attention;
pub mod engine;
pub mod error;
pub mod harness;
pub mod kv_store;
pub mod linalg;
pub mod wave_buffer;
pub mod wave_index;

pub use attention::{merge, oracle_attention, AttentionOutput, PartialAttention};
pub use engine::{
    DenominatorMode, EngineConfig, HeadEngine, StepMetrics, StepOutcome, TokenAccounting,
};
pub use error::{Error, Result};
pub use kv_store::{BlockId, SlowTierStore, TokenKv};
pub use wave_buffer::{BufferStats, PolicyKind, WaveBuffer};
pub use wave_index::{ClusterId, IndexConfig, MetaIndexEntry, TailMode, WaveIndex, ZonePlan};
