//! Exact, estimated and merged attention.
//!
//! Every zone produces a [`PartialAttention`]: an online-softmax accumulator
//! holding a running max, a rescaled numerator and a rescaled denominator.
//! Partials over disjoint token sets merge exactly, so the steady, retrieval
//! and estimation zones can be computed independently and combined at the end.
//!
//! Estimated clusters contribute `s_j * exp(q.C_j / sqrt(d))` to the
//! denominator and `exp(q.C_j / sqrt(d)) * VS_j` to the numerator: each member
//! receives the centroid's weight and member values enter only through the
//! stored value sum. By Jensen's inequality the centroid term never exceeds
//! the cluster's true exponential mass.

use crate::error::{Error, Result};
use crate::kv_store::TokenKv;
use crate::linalg::dot_f64;
use crate::wave_index::MetaIndexEntry;

/// Online-softmax accumulator over a subset of tokens or clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialAttention {
    running_max: f64,
    numerator: Vec<f64>,
    denominator: f64,
    exact_denominator: f64,
    count: usize,
    ops: u64,
}

impl PartialAttention {
    /// The merge identity.
    pub fn empty(d: usize) -> Self {
        Self {
            running_max: f64::NEG_INFINITY,
            numerator: vec![0.0; d],
            denominator: 0.0,
            exact_denominator: 0.0,
            count: 0,
            ops: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.numerator.len()
    }

    pub fn running_max(&self) -> f64 {
        self.running_max
    }

    /// Numerator scaled by `exp(-running_max)`.
    pub fn numerator(&self) -> &[f64] {
        &self.numerator
    }

    /// Denominator scaled by `exp(-running_max)`.
    pub fn denominator(&self) -> f64 {
        self.denominator
    }

    /// Part of the denominator contributed by exactly attended tokens.
    pub fn exact_denominator(&self) -> f64 {
        self.exact_denominator
    }

    /// Tokens or clusters folded in.
    pub fn count(&self) -> usize {
        self.count
    }

    /// Scalar multiply-adds spent building this partial.
    pub fn ops(&self) -> u64 {
        self.ops
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// `ln` of the unscaled denominator.
    pub fn log_denominator(&self) -> f64 {
        self.running_max + self.denominator.ln()
    }

    fn raise_max(&mut self, logit: f64) {
        if logit > self.running_max {
            if self.count > 0 {
                let s = (self.running_max - logit).exp();
                self.numerator.iter_mut().for_each(|x| *x *= s);
                self.denominator *= s;
                self.exact_denominator *= s;
            }
            self.running_max = logit;
        }
    }

    /// Folds in a term with weight `mass * exp(logit)` in the denominator and
    /// `exp(logit) * vector` in the numerator.
    fn accumulate(&mut self, logit: f64, mass: f64, vector: Option<&[f32]>, exact: bool) {
        self.raise_max(logit);
        let w = (logit - self.running_max).exp();
        if let Some(v) = vector {
            for (n, &x) in self.numerator.iter_mut().zip(v) {
                *n += w * x as f64;
            }
        }
        self.denominator += mass * w;
        if exact {
            self.exact_denominator += mass * w;
        }
        self.count += 1;
    }

    /// Merges `other` into `self`.
    pub fn absorb(&mut self, other: &PartialAttention) {
        debug_assert_eq!(self.dim(), other.dim());
        self.ops += other.ops;
        if other.count == 0 {
            return;
        }
        self.raise_max(other.running_max);
        let s = (other.running_max - self.running_max).exp();
        for (n, &o) in self.numerator.iter_mut().zip(&other.numerator) {
            *n += s * o;
        }
        self.denominator += s * other.denominator;
        self.exact_denominator += s * other.exact_denominator;
        self.count += other.count;
    }

    /// Keeps this partial's numerator but takes the denominator from
    /// `denominator_source`. Used to reproduce the centroid-only denominator.
    pub fn replace_denominator(
        mut self,
        denominator_source: &PartialAttention,
    ) -> PartialAttention {
        if self.count == 0 {
            return denominator_source.clone();
        }
        let src = denominator_source;
        let m = self.running_max.max(src.running_max);
        let a = (self.running_max - m).exp();
        let b = (src.running_max - m).exp();
        self.numerator.iter_mut().for_each(|x| *x *= a);
        self.running_max = m;
        self.denominator = src.denominator * b;
        self.exact_denominator = src.exact_denominator * b;
        self.count += src.count;
        self.ops += src.ops;
        self
    }

    /// Normalizes into the attention output.
    pub fn finish(&self) -> Result<AttentionOutput> {
        if self.count == 0 || self.denominator <= 0.0 {
            return Err(Error::config("no tokens to attend"));
        }
        Ok(AttentionOutput {
            output: self
                .numerator
                .iter()
                .map(|&n| (n / self.denominator) as f32)
                .collect(),
            denominator_exact_coverage: self.exact_denominator / self.denominator,
            log_denominator: self.log_denominator(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub output: Vec<f32>,
    /// Share of the merged denominator that came from exact token terms.
    pub denominator_exact_coverage: f64,
    /// `ln` of the merged softmax denominator.
    pub log_denominator: f64,
}

#[inline]
fn inv_sqrt_d(d: usize) -> f64 {
    1.0 / (d as f64).sqrt()
}

/// Exact softmax terms for a subset of tokens.
pub fn exact_partial<'a>(
    q: &[f32],
    tokens: impl IntoIterator<Item = &'a TokenKv>,
) -> PartialAttention {
    let d = q.len();
    let scale = inv_sqrt_d(d);
    let mut p = PartialAttention::empty(d);
    for tok in tokens {
        let logit = dot_f64(q, &tok.key) * scale;
        p.accumulate(logit, 1.0, Some(&tok.value), true);
        p.ops += 2 * d as u64;
    }
    p
}

/// Centroid-based estimate for a set of clusters whose scores `q . C_j` are
/// already known (e.g. from ranking). Cost is linear in the number of
/// clusters, independent of their sizes.
pub fn estimate_partial_scored<'a>(
    d: usize,
    clusters: impl IntoIterator<Item = (&'a MetaIndexEntry, f64)>,
) -> PartialAttention {
    let scale = inv_sqrt_d(d);
    let mut p = PartialAttention::empty(d);
    for (entry, score) in clusters {
        p.accumulate(
            score * scale,
            entry.size as f64,
            Some(&entry.value_sum),
            false,
        );
        p.ops += d as u64 + 1;
    }
    p
}

/// Centroid-based estimate, scoring each cluster against `q`.
pub fn estimate_partial<'a>(
    q: &[f32],
    entries: impl IntoIterator<Item = &'a MetaIndexEntry>,
) -> PartialAttention {
    let d = q.len();
    let mut p =
        estimate_partial_scored(d, entries.into_iter().map(|e| (e, dot_f64(q, &e.centroid))));
    p.ops += (p.count * d) as u64;
    p
}

/// Centroid mass `s_j * exp(q.C_j / sqrt(d))` in the denominator only.
pub fn denominator_only_partial<'a>(
    d: usize,
    clusters: impl IntoIterator<Item = (&'a MetaIndexEntry, f64)>,
) -> PartialAttention {
    let scale = inv_sqrt_d(d);
    let mut p = PartialAttention::empty(d);
    for (entry, score) in clusters {
        p.accumulate(score * scale, entry.size as f64, None, false);
        p.ops += 1;
    }
    p
}

/// Combines partials over disjoint sets into the final output.
pub fn merge(partials: &[PartialAttention]) -> Result<AttentionOutput> {
    let first = partials
        .first()
        .ok_or_else(|| Error::config("no partials to merge"))?;
    let mut acc = PartialAttention::empty(first.dim());
    for p in partials {
        acc.absorb(p);
    }
    acc.finish()
}

/// Full softmax attention over every token, with max subtraction.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutput {
    pub output: Vec<f32>,
    pub log_denominator: f64,
}

/// Ground-truth attention over row-major `keys`/`values` (`n x d`).
pub fn oracle_attention(q: &[f32], keys: &[f32], values: &[f32], d: usize) -> Result<OracleOutput> {
    if d == 0 || q.len() != d {
        return Err(Error::config(format!(
            "query dimension {} does not match d={d}",
            q.len()
        )));
    }
    if keys.len() != values.len() || !keys.len().is_multiple_of(d) {
        return Err(Error::config(
            "key/value buffers do not form n x d matrices",
        ));
    }
    let n = keys.len() / d;
    if n == 0 {
        return Err(Error::config(
            "attention over an empty context is undefined",
        ));
    }
    let scale = inv_sqrt_d(d);
    let logits: Vec<f64> = keys
        .chunks_exact(d)
        .map(|k| dot_f64(q, k) * scale)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut num = vec![0f64; d];
    let mut den = 0f64;
    for (l, v) in logits.iter().zip(values.chunks_exact(d)) {
        let w = (l - max).exp();
        den += w;
        for (n, &x) in num.iter_mut().zip(v) {
            *n += w * x as f64;
        }
    }
    Ok(OracleOutput {
        output: num.iter().map(|&x| (x / den) as f32).collect(),
        log_denominator: max + den.ln(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv_store::SlowTierStore;
    use crate::wave_index::{finalize_cluster, ClusterId};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn context(n: usize, d: usize, seed: u64) -> (Vec<f32>, Vec<TokenKv>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = gauss(&mut rng, d).iter().map(|x| x * 2.0).collect();
        let toks = (0..n)
            .map(|i| TokenKv::new(i as u64, gauss(&mut rng, d), gauss(&mut rng, d)))
            .collect();
        (q, toks)
    }

    fn flat(toks: &[TokenKv]) -> (Vec<f32>, Vec<f32>) {
        (
            toks.iter().flat_map(|t| t.key.clone()).collect(),
            toks.iter().flat_map(|t| t.value.clone()).collect(),
        )
    }

    fn rel_l2(a: &[f32], b: &[f32]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
        let den: f64 = b.iter().map(|y| (*y as f64).powi(2)).sum();
        (num / den).sqrt()
    }

    /// Independent two-pass softmax reference: materializes the weights.
    fn two_pass(q: &[f32], toks: &[TokenKv]) -> Vec<f32> {
        let d = q.len();
        let s: Vec<f64> = toks
            .iter()
            .map(|t| {
                t.key
                    .iter()
                    .zip(q)
                    .map(|(a, b)| *a as f64 * *b as f64)
                    .sum::<f64>()
                    / (d as f64).sqrt()
            })
            .collect();
        let m = s.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
        let w: Vec<f64> = s.iter().map(|x| (x - m).exp() / z).collect();
        (0..d)
            .map(|j| {
                toks.iter()
                    .zip(&w)
                    .map(|(t, w)| w * t.value[j] as f64)
                    .sum::<f64>() as f32
            })
            .collect()
    }

    #[test]
    fn oracle_single_token_returns_value() {
        let (q, toks) = context(1, 8, 1);
        let (k, v) = flat(&toks);
        assert_eq!(
            oracle_attention(&q, &k, &v, 8).unwrap().output,
            toks[0].value
        );
    }

    #[test]
    fn oracle_identical_keys_average_values() {
        let (q, mut toks) = context(10, 4, 2);
        let key = toks[0].key.clone();
        toks.iter_mut().for_each(|t| t.key = key.clone());
        let (k, v) = flat(&toks);
        let out = oracle_attention(&q, &k, &v, 4).unwrap().output;
        for (j, &o) in out.iter().enumerate() {
            let mean = toks.iter().map(|t| t.value[j] as f64).sum::<f64>() / 10.0;
            assert!((o as f64 - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn oracle_matches_two_pass_reference() {
        let (q, toks) = context(256, 32, 3);
        let (k, v) = flat(&toks);
        let out = oracle_attention(&q, &k, &v, 32).unwrap().output;
        assert!(rel_l2(&out, &two_pass(&q, &toks)) < 1e-6);
    }

    #[test]
    fn oracle_rejects_empty_context() {
        assert!(oracle_attention(&[1.0], &[], &[], 1).is_err());
    }

    #[test]
    fn empty_partial_is_merge_identity() {
        let (q, toks) = context(20, 8, 4);
        let p = exact_partial(&q, &toks);
        let alone = merge(std::slice::from_ref(&p)).unwrap();
        let with_empty = merge(&[
            PartialAttention::empty(8),
            p.clone(),
            PartialAttention::empty(8),
        ])
        .unwrap();
        assert_eq!(alone, with_empty);
        assert!(merge(&[PartialAttention::empty(8)]).is_err());
        assert!(merge(&[]).is_err());
    }

    #[test]
    fn single_partition_equals_oracle() {
        let (q, toks) = context(300, 16, 5);
        let (k, v) = flat(&toks);
        let exact = oracle_attention(&q, &k, &v, 16).unwrap();
        let got = merge(&[exact_partial(&q, &toks)]).unwrap();
        assert!(rel_l2(&got.output, &exact.output) < 1e-6);
        assert!((got.log_denominator - exact.log_denominator).abs() < 1e-9);
        assert_eq!(got.denominator_exact_coverage, 1.0);
    }

    #[test]
    fn three_way_partition_equals_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..20 {
            let (q, toks) = context(200, 16, 100 + trial);
            let (k, v) = flat(&toks);
            let exact = oracle_attention(&q, &k, &v, 16).unwrap().output;
            let mut parts: [Vec<TokenKv>; 3] = Default::default();
            for t in &toks {
                parts[rng.random_range(0..3)].push(t.clone());
            }
            let partials: Vec<_> = parts.iter().map(|p| exact_partial(&q, p)).collect();
            assert!(rel_l2(&merge(&partials).unwrap().output, &exact) < 1e-6);
        }
    }

    fn cluster_of(toks: &[TokenKv]) -> MetaIndexEntry {
        let mut store = SlowTierStore::new(0, toks[0].dim(), 1 << 16).unwrap();
        finalize_cluster(ClusterId(0), toks, &mut store).unwrap()
    }

    #[test]
    fn singleton_estimate_equals_exact() {
        let (q, toks) = context(1, 8, 7);
        let e = cluster_of(&toks);
        let est = merge(&[estimate_partial(&q, [&e])]).unwrap();
        let exact = merge(&[exact_partial(&q, &toks)]).unwrap();
        assert_eq!(est.output, exact.output);
        assert_eq!(est.log_denominator, exact.log_denominator);
    }

    #[test]
    fn identical_cluster_estimate_is_tight() {
        let (q, mut toks) = context(12, 8, 8);
        let t0 = toks[0].clone();
        for (i, t) in toks.iter_mut().enumerate() {
            *t = TokenKv::new(i as u64, t0.key.clone(), t0.value.clone());
        }
        let e = cluster_of(&toks);
        let est = estimate_partial(&q, [&e]);
        let exact = exact_partial(&q, &toks);
        assert!((est.log_denominator() - exact.log_denominator()).abs() < 1e-9);
        let (a, b) = (est.finish().unwrap().output, exact.finish().unwrap().output);
        assert!(rel_l2(&a, &b) < 1e-6);
    }

    #[test]
    fn estimated_denominator_never_exceeds_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..50 {
            let n = rng.random_range(1..40);
            let (q, toks) = context(n, 16, 1000 + trial);
            let e = cluster_of(&toks);
            // per-cluster exact exponential sum, computed directly
            let exact: f64 = toks
                .iter()
                .map(|t| {
                    (t.key
                        .iter()
                        .zip(&q)
                        .map(|(a, b)| *a as f64 * *b as f64)
                        .sum::<f64>()
                        / 4.0)
                        .exp()
                })
                .sum();
            let est = estimate_partial(&q, [&e]).log_denominator().exp();
            assert!(
                est <= exact * (1.0 + 1e-5),
                "trial {trial}: {est} > {exact}"
            );
        }
    }

    #[test]
    fn estimation_ops_depend_only_on_cluster_count() {
        let d = 8;
        let small = cluster_of(&context(2, d, 10).1);
        let big = cluster_of(&context(64, d, 11).1);
        let q = vec![0.1; d];
        let a = estimate_partial(&q, vec![&small; 10]).ops();
        let b = estimate_partial(&q, vec![&big; 10]).ops();
        let c = estimate_partial(&q, vec![&big; 20]).ops();
        assert_eq!(a, b);
        assert_eq!(c, 2 * b);
    }

    #[test]
    fn replace_denominator_keeps_numerator() {
        let (q, toks) = context(30, 8, 12);
        let exact = exact_partial(&q, &toks[..10]);
        let e = cluster_of(&toks[10..]);
        let den = denominator_only_partial(8, [(&e, dot_f64(&q, &e.centroid))]);
        let mixed = exact.clone().replace_denominator(&den);
        assert!((mixed.log_denominator() - den.log_denominator()).abs() < 1e-12);
        let out = mixed.finish().unwrap().output;
        let scale = (exact.log_denominator() - den.log_denominator()).exp();
        let base = exact.finish().unwrap().output;
        for (o, b) in out.iter().zip(&base) {
            assert!((*o as f64 - *b as f64 * scale).abs() < 1e-5 * (1.0 + b.abs() as f64));
        }
    }

    proptest! {
        #[test]
        fn merge_is_permutation_invariant(seed in 0u64..500, parts in 1usize..6) {
            let (q, toks) = context(60, 8, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            let mut split: Vec<Vec<TokenKv>> = vec![Vec::new(); parts];
            for t in &toks {
                split[rng.random_range(0..parts)].push(t.clone());
            }
            let mut partials: Vec<_> = split.iter().map(|s| exact_partial(&q, s)).collect();
            let base = merge(&partials).unwrap().output;
            partials.shuffle(&mut rng);
            let shuffled = merge(&partials).unwrap().output;
            prop_assert!(rel_l2(&shuffled, &base) < 1e-6);
        }

        #[test]
        fn absorb_is_associative(seed in 0u64..500) {
            let (q, toks) = context(45, 8, seed);
            let a = exact_partial(&q, &toks[..15]);
            let b = exact_partial(&q, &toks[15..30]);
            let c = exact_partial(&q, &toks[30..]);
            let mut left = a.clone(); left.absorb(&b); left.absorb(&c);
            let mut bc = b.clone(); bc.absorb(&c);
            let mut right = a.clone(); right.absorb(&bc);
            let (l, r) = (left.finish().unwrap(), right.finish().unwrap());
            prop_assert!(rel_l2(&l.output, &r.output) < 1e-6);
            prop_assert!((l.log_denominator - r.log_denominator).abs() < 1e-9);
        }
    }
}
