//! Shared fixtures for the criterion benchmarks.

use wavekv::harness::{gen_trace, SynthParams, Trace};
use wavekv::TokenKv;

/// A single-head trace with the default locality knobs.
pub fn trace(n_prefill: u64, n_decode: u64, d: u32) -> Trace {
    gen_trace(&SynthParams {
        n_prefill,
        n_decode,
        d,
        heads: 1,
        ..Default::default()
    })
    .expect("valid synthetic parameters")
}

/// Head 0 prefill of `trace` as tokens.
pub fn prefill_tokens(trace: &Trace) -> Vec<TokenKv> {
    let d = trace.d();
    trace.prefill_keys[0]
        .chunks_exact(d)
        .zip(trace.prefill_values[0].chunks_exact(d))
        .enumerate()
        .map(|(i, (k, v))| TokenKv::new(i as u64, k.to_vec(), v.to_vec()))
        .collect()
}
