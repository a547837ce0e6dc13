//! Binary trace files.
//!
//! Layout, all little-endian:
//!
//! | offset | size | field                  |
//! |--------|------|------------------------|
//! | 0      | 4    | magic `WKT1`           |
//! | 4      | 4    | version (u32, = 1)     |
//! | 8      | 4    | n_heads (u32)          |
//! | 12     | 4    | d (u32)                |
//! | 16     | 8    | n_prefill (u64)        |
//! | 24     | 8    | n_decode (u64)         |
//!
//! The body holds, per head, the prefill keys then values as row-major
//! `n_prefill x d` f32 matrices, followed by, per decode step and per head,
//! `q`, `new_k` and `new_v` (d floats each).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"WKT1";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TraceHeader {
    pub n_heads: u32,
    pub d: u32,
    pub n_prefill: u64,
    pub n_decode: u64,
}

impl TraceHeader {
    /// Total file size implied by the header, or `None` on overflow.
    pub fn file_bytes(&self) -> Option<u64> {
        let d = self.d as u64;
        let heads = self.n_heads as u64;
        let prefill = heads.checked_mul(self.n_prefill)?.checked_mul(2 * d)?;
        let decode = heads.checked_mul(self.n_decode)?.checked_mul(3 * d)?;
        prefill
            .checked_add(decode)?
            .checked_mul(4)?
            .checked_add(HEADER_BYTES)
    }
}

/// An in-memory trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    /// Per head, row-major `n_prefill x d`.
    pub prefill_keys: Vec<Vec<f32>>,
    pub prefill_values: Vec<Vec<f32>>,
    /// Step-major, then head, then `q | new_k | new_v`.
    pub decode: Vec<f32>,
}

/// One head's inputs for one decode step.
#[derive(Debug, Clone, Copy)]
pub struct DecodeInput<'a> {
    pub q: &'a [f32],
    pub new_key: &'a [f32],
    pub new_value: &'a [f32],
}

impl Trace {
    /// Checks that buffer sizes agree with the header.
    pub fn new(
        header: TraceHeader,
        prefill_keys: Vec<Vec<f32>>,
        prefill_values: Vec<Vec<f32>>,
        decode: Vec<f32>,
    ) -> Result<Self> {
        if header.d == 0 || header.n_heads == 0 {
            return Err(Error::config("trace needs d >= 1 and n_heads >= 1"));
        }
        header
            .file_bytes()
            .ok_or_else(|| Error::config("trace dimensions overflow"))?;
        let d = header.d as usize;
        let heads = header.n_heads as usize;
        let per_head = header.n_prefill as usize * d;
        let ok = prefill_keys.len() == heads
            && prefill_values.len() == heads
            && prefill_keys
                .iter()
                .chain(&prefill_values)
                .all(|m| m.len() == per_head)
            && decode.len() == header.n_decode as usize * heads * 3 * d;
        if !ok {
            return Err(Error::config("trace buffers do not match the header"));
        }
        Ok(Self {
            header,
            prefill_keys,
            prefill_values,
            decode,
        })
    }

    pub fn d(&self) -> usize {
        self.header.d as usize
    }

    pub fn heads(&self) -> usize {
        self.header.n_heads as usize
    }

    pub fn n_decode(&self) -> usize {
        self.header.n_decode as usize
    }

    pub fn step(&self, step: usize, head: usize) -> DecodeInput<'_> {
        let d = self.d();
        let base = (step * self.heads() + head) * 3 * d;
        let rec = &self.decode[base..base + 3 * d];
        DecodeInput {
            q: &rec[..d],
            new_key: &rec[d..2 * d],
            new_value: &rec[2 * d..],
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(h.file_bytes().unwrap_or(0) as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&h.n_heads.to_le_bytes());
        out.extend_from_slice(&h.d.to_le_bytes());
        out.extend_from_slice(&h.n_prefill.to_le_bytes());
        out.extend_from_slice(&h.n_decode.to_le_bytes());
        for (k, v) in self.prefill_keys.iter().zip(&self.prefill_values) {
            put_floats(&mut out, k);
            put_floats(&mut out, v);
        }
        put_floats(&mut out, &self.decode);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let len = bytes.len() as u64;
        if len < HEADER_BYTES {
            return Err(Error::format(
                len,
                format!("truncated header: expected {HEADER_BYTES} bytes, found {len}"),
            ));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format(
                0,
                format!("bad magic {:?}, expected \"WKT1\"", &bytes[..4]),
            ));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::format(
                4,
                format!("unsupported version {version}, expected {VERSION}"),
            ));
        }
        let header = TraceHeader {
            n_heads: u32_at(8),
            d: u32_at(12),
            n_prefill: u64_at(16),
            n_decode: u64_at(24),
        };
        if header.n_heads == 0 {
            return Err(Error::format(8, "n_heads must be at least 1"));
        }
        if header.d == 0 {
            return Err(Error::format(12, "d must be at least 1"));
        }
        let expected = header
            .file_bytes()
            .ok_or_else(|| Error::format(16, "declared sizes overflow"))?;
        if len != expected {
            let what = if len < expected {
                "truncated body"
            } else {
                "trailing bytes"
            };
            return Err(Error::format(
                len.min(expected),
                format!("{what}: expected {expected} bytes, found {len}"),
            ));
        }

        let mut floats = bytes[HEADER_BYTES as usize..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let per_head = header.n_prefill as usize * header.d as usize;
        let mut prefill_keys = Vec::with_capacity(header.n_heads as usize);
        let mut prefill_values = Vec::with_capacity(header.n_heads as usize);
        for _ in 0..header.n_heads {
            prefill_keys.push(floats.by_ref().take(per_head).collect());
            prefill_values.push(floats.by_ref().take(per_head).collect());
        }
        let decode = floats.collect();
        Trace::new(header, prefill_keys, prefill_values, decode)
    }
}

fn put_floats(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn write_trace(path: &Path, trace: &Trace) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&trace.to_bytes())?;
    f.sync_all()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Trace> {
    Trace::from_bytes(&fs::read(path)?)
}
