//! Synthetic traces with spatial and temporal locality.
//!
//! Positions are grouped into spans of `span_tokens`. Each span owns
//! `clusters_per_segment` latent centers drawn from N(0, I); a key is a center
//! of its span plus Gaussian noise, so nearby tokens share structure. Queries
//! follow a random walk over the prefill centers that stays put with
//! probability `query_walk_persistence`. `heavy_tail` shrinks query norms,
//! flattening the softmax and moving mass into the long tail.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::trace::{Trace, TraceHeader};
use crate::error::{Error, Result};
use crate::wave_index::mix_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub n_prefill: u64,
    pub n_decode: u64,
    pub d: u32,
    pub heads: u32,
    /// Latent centers per span.
    pub clusters_per_segment: usize,
    /// Standard deviation of key noise around a center.
    pub intra_cluster_noise: f64,
    /// Probability that the next query stays on the current center.
    pub query_walk_persistence: f64,
    /// 0 keeps full-strength queries; 1 shrinks them tenfold.
    pub heavy_tail: f64,
    pub seed: u64,
    /// Positions sharing one set of latent centers.
    pub span_tokens: u64,
    /// Relative perturbation of each query around its center.
    pub query_noise: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_prefill: 32768,
            n_decode: 256,
            d: 64,
            heads: 4,
            clusters_per_segment: 64,
            intra_cluster_noise: 0.5,
            query_walk_persistence: 0.9,
            heavy_tail: 0.5,
            seed: 0,
            span_tokens: 8192,
            query_noise: 0.1,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_prefill == 0
            || self.d == 0
            || self.heads == 0
            || self.clusters_per_segment == 0
            || self.span_tokens == 0
        {
            return Err(Error::config(
                "n_prefill, d, heads, clusters_per_segment and span_tokens must be positive",
            ));
        }
        for (name, p) in [
            ("query_walk_persistence", self.query_walk_persistence),
            ("heavy_tail", self.heavy_tail),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        for (name, s) in [
            ("intra_cluster_noise", self.intra_cluster_noise),
            ("query_noise", self.query_noise),
        ] {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::config(format!(
                    "{name} must be finite and non-negative, got {s}"
                )));
            }
        }
        let header = self.header();
        let bytes = header
            .file_bytes()
            .ok_or_else(|| Error::config("trace size overflows u64"))?;
        usize::try_from(bytes).map_err(|_| Error::config("trace does not fit in memory"))?;
        Ok(())
    }

    fn header(&self) -> TraceHeader {
        TraceHeader {
            n_heads: self.heads,
            d: self.d,
            n_prefill: self.n_prefill,
            n_decode: self.n_decode,
        }
    }
}

struct HeadData {
    keys: Vec<f32>,
    values: Vec<f32>,
    decode: Vec<f32>,
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn noisy_key(rng: &mut ChaCha8Rng, center: &[f32], sigma: f32, out: &mut Vec<f32>) {
    for &c in center {
        let n: f32 = StandardNormal.sample(rng);
        out.push(c + sigma * n);
    }
}

fn generate_head(p: &SynthParams, head: u32) -> HeadData {
    let d = p.d as usize;
    let n = p.n_prefill as usize;
    let steps = p.n_decode as usize;
    let span = p.span_tokens as usize;
    let cps = p.clusters_per_segment;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(p.seed, head as u64));

    let n_spans = (n + steps).div_ceil(span).max(1);
    let centers: Vec<Vec<f32>> = (0..n_spans * cps).map(|_| gaussian(&mut rng, d)).collect();
    let sigma = p.intra_cluster_noise as f32;
    let key_at = |rng: &mut ChaCha8Rng, pos: usize, out: &mut Vec<f32>| {
        let c = rng.random_range(0..cps);
        noisy_key(rng, &centers[(pos / span) * cps + c], sigma, out);
    };

    let mut keys = Vec::with_capacity(n * d);
    let mut values = Vec::with_capacity(n * d);
    for pos in 0..n {
        key_at(&mut rng, pos, &mut keys);
        values.extend(gaussian(&mut rng, d));
    }

    let walk_states = n.div_ceil(span) * cps;
    let scale = (1.0 - 0.9 * p.heavy_tail) * (d as f64).sqrt();
    let mut state = rng.random_range(0..walk_states);
    let mut decode = Vec::with_capacity(steps * 3 * d);
    for t in 0..steps {
        if t > 0 && !rng.random_bool(p.query_walk_persistence) {
            state = rng.random_range(0..walk_states);
        }
        let dir: Vec<f64> = centers[state]
            .iter()
            .map(|&c| {
                let e: f64 = StandardNormal.sample(&mut rng);
                c as f64 + p.query_noise * e
            })
            .collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        let inv = if norm > 0.0 { scale / norm } else { 0.0 };
        decode.extend(dir.iter().map(|&x| (x * inv) as f32));
        key_at(&mut rng, n + t, &mut decode);
        decode.extend(gaussian(&mut rng, d));
    }
    HeadData {
        keys,
        values,
        decode,
    }
}

/// Generates a trace. Heads draw from independent streams of `seed`, so the
/// result does not depend on thread scheduling.
pub fn gen_trace(p: &SynthParams) -> Result<Trace> {
    p.validate()?;
    let heads: Vec<HeadData> = (0..p.heads)
        .into_par_iter()
        .map(|h| generate_head(p, h))
        .collect();
    let d = p.d as usize;
    let rec = 3 * d;
    let mut decode = Vec::with_capacity(p.n_decode as usize * heads.len() * rec);
    for t in 0..p.n_decode as usize {
        for h in &heads {
            decode.extend_from_slice(&h.decode[t * rec..(t + 1) * rec]);
        }
    }
    let (keys, values) = heads.into_iter().map(|h| (h.keys, h.values)).unzip();
    Trace::new(p.header(), keys, values, decode)
}
