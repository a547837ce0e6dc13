//! Slow-tier KV storage.
//!
//! Raw key/value vectors live here in fixed-size blocks. A block belongs to
//! exactly one cluster, so the last block of a cluster may be partially
//! occupied. Reads are block-granular and every read is charged a full
//! `block_size_bytes`, whatever the occupancy.

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bytes per stored scalar (keys and values are `f32`).
pub const SCALAR_BYTES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockId(pub u32);

/// One token's key and value vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenKv {
    pub token_id: u64,
    pub key: Vec<f32>,
    pub value: Vec<f32>,
}

impl TokenKv {
    pub fn new(token_id: u64, key: Vec<f32>, value: Vec<f32>) -> Self {
        Self {
            token_id,
            key,
            value,
        }
    }

    pub fn dim(&self) -> usize {
        self.key.len()
    }

    /// Payload size of this token in bytes (key + value).
    pub fn payload_bytes(&self) -> u64 {
        ((self.key.len() + self.value.len()) * SCALAR_BYTES) as u64
    }

    pub(crate) fn check_dim(&self, d: usize) -> Result<()> {
        if self.key.len() != d || self.value.len() != d {
            return Err(Error::config(format!(
                "token {} has key/value dims {}/{}, expected {d}",
                self.token_id,
                self.key.len(),
                self.value.len()
            )));
        }
        Ok(())
    }
}

/// Tokens per block: `floor(block_size_bytes / (2 * d * 4))`.
pub fn block_capacity(block_size_bytes: usize, d: usize) -> Result<usize> {
    if d == 0 {
        return Err(Error::config("dimension must be positive"));
    }
    let cap = block_size_bytes / (2 * d * SCALAR_BYTES);
    if cap == 0 {
        return Err(Error::config(format!(
            "block of {block_size_bytes} bytes cannot hold one token of dimension {d}"
        )));
    }
    Ok(cap)
}

#[derive(Debug, Clone)]
pub struct Block {
    pub id: BlockId,
    tokens: Vec<TokenKv>,
}

impl Block {
    pub fn occupied(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[TokenKv] {
        &self.tokens
    }
}

/// Per-head slow tier. Reads may run concurrently; packing takes `&mut self`.
#[derive(Debug)]
pub struct SlowTierStore {
    head: usize,
    dim: usize,
    block_size_bytes: usize,
    block_capacity: usize,
    blocks: Vec<Block>,
    token_ids: HashSet<u64>,
    bytes_read_total: AtomicU64,
    block_reads: AtomicU64,
    bytes_written_total: u64,
}

impl SlowTierStore {
    pub fn new(head: usize, dim: usize, block_size_bytes: usize) -> Result<Self> {
        let block_capacity = block_capacity(block_size_bytes, dim)?;
        Ok(Self {
            head,
            dim,
            block_size_bytes,
            block_capacity,
            blocks: Vec::new(),
            token_ids: HashSet::new(),
            bytes_read_total: AtomicU64::new(0),
            block_reads: AtomicU64::new(0),
            bytes_written_total: 0,
        })
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn block_size_bytes(&self) -> usize {
        self.block_size_bytes
    }

    pub fn block_capacity(&self) -> usize {
        self.block_capacity
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.token_ids.len()
    }

    pub fn block(&self, id: BlockId) -> Option<&Block> {
        self.blocks.get(id.0 as usize)
    }

    /// Packs one cluster's members into fresh, cluster-private blocks.
    ///
    /// Allocates `ceil(len / block_capacity)` blocks, keeps member order and
    /// returns the new block ids in order.
    pub fn pack_cluster(&mut self, members: &[TokenKv]) -> Result<Vec<BlockId>> {
        if members.is_empty() {
            return Err(Error::config("cannot pack an empty cluster"));
        }
        let mut seen = HashSet::with_capacity(members.len());
        for tok in members {
            tok.check_dim(self.dim)?;
            if self.token_ids.contains(&tok.token_id) || !seen.insert(tok.token_id) {
                return Err(Error::integrity(format!(
                    "token {} already stored for head {}",
                    tok.token_id, self.head
                )));
            }
        }

        let mut ids = Vec::with_capacity(members.len().div_ceil(self.block_capacity));
        for chunk in members.chunks(self.block_capacity) {
            let id = BlockId(
                u32::try_from(self.blocks.len())
                    .map_err(|_| Error::config("slow tier exceeded u32::MAX blocks"))?,
            );
            self.blocks.push(Block {
                id,
                tokens: chunk.to_vec(),
            });
            ids.push(id);
        }
        self.token_ids.extend(seen);
        self.bytes_written_total += (ids.len() * self.block_size_bytes) as u64;
        Ok(ids)
    }

    /// Reads whole blocks in request order, charging `block_size_bytes` each.
    pub fn read_blocks(&self, ids: &[BlockId]) -> Result<Vec<(BlockId, &[TokenKv])>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            let block = self.block(id).ok_or_else(|| {
                Error::integrity(format!("unknown block {} in head {}", id.0, self.head))
            })?;
            out.push((id, block.tokens()));
        }
        let n = ids.len() as u64;
        self.block_reads.fetch_add(n, Ordering::Relaxed);
        self.bytes_read_total
            .fetch_add(n * self.block_size_bytes as u64, Ordering::Relaxed);
        Ok(out)
    }

    pub fn bytes_read_total(&self) -> u64 {
        self.bytes_read_total.load(Ordering::Relaxed)
    }

    pub fn block_reads(&self) -> u64 {
        self.block_reads.load(Ordering::Relaxed)
    }

    /// Bytes offloaded into the slow tier (fast -> slow direction).
    pub fn bytes_written_total(&self) -> u64 {
        self.bytes_written_total
    }

    /// Unused token slots across all blocks.
    pub fn fragmented_slots(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| self.block_capacity - b.occupied())
            .sum()
    }
}
