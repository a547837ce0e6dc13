//! Recall and error metrics.

use std::collections::HashSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::dot_f64;

/// Ids of the `k` tokens with the largest `q . K`, ties to the lower id.
/// Token ids are row indices of `keys`.
pub fn top_k_ids(q: &[f32], keys: &[f32], d: usize, k: usize) -> Vec<u64> {
    let mut scored: Vec<(f64, u64)> = keys
        .chunks_exact(d)
        .enumerate()
        .map(|(i, key)| (dot_f64(q, key), i as u64))
        .collect();
    let k = k.min(scored.len());
    if k == 0 {
        return Vec::new();
    }
    let cmp = |a: &(f64, u64), b: &(f64, u64)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    scored.select_nth_unstable_by(k - 1, cmp);
    scored.truncate(k);
    scored.sort_unstable_by(cmp);
    scored.into_iter().map(|(_, id)| id).collect()
}

/// Fraction of the brute-force top-`k` present in `retrieved`.
pub fn recall_at_k(retrieved: &[u64], q: &[f32], keys: &[f32], d: usize, k: usize) -> Result<f64> {
    let n = keys.len().checked_div(d).unwrap_or(0);
    if k == 0 || k > n {
        return Err(Error::config(format!("recall cutoff {k} outside 1..={n}")));
    }
    let got: HashSet<u64> = retrieved.iter().copied().collect();
    let top = top_k_ids(q, keys, d, k);
    Ok(top.iter().filter(|id| got.contains(id)).count() as f64 / k as f64)
}

/// `||a - b|| / ||b||`, or `||a||` when `b` is zero.
pub fn relative_l2(a: &[f32], b: &[f32]) -> f64 {
    let mut diff = 0f64;
    let mut base = 0f64;
    for (&x, &y) in a.iter().zip(b) {
        diff += (x as f64 - y as f64).powi(2);
        base += (y as f64).powi(2);
    }
    if base > 0.0 {
        (diff / base).sqrt()
    } else {
        diff.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

pub fn summarize(xs: &[f64]) -> Option<Summary> {
    if xs.is_empty() {
        return None;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    Some(Summary {
        mean: xs.iter().sum::<f64>() / xs.len() as f64,
        p50: percentile(&sorted, 50.0),
        p90: percentile(&sorted, 90.0),
        p99: percentile(&sorted, 99.0),
        max: sorted[sorted.len() - 1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Full sort with the same tie rule, as a second brute-force oracle.
    fn exhaustive_top_k(q: &[f32], keys: &[f32], d: usize, k: usize) -> Vec<u64> {
        let mut all: Vec<(u64, f64)> = (0..keys.len() / d)
            .map(|i| {
                let s: f64 = q
                    .iter()
                    .zip(&keys[i * d..(i + 1) * d])
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum();
                (i as u64, s)
            })
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.into_iter().take(k).map(|(i, _)| i).collect()
    }

    #[test]
    fn extremes() {
        let keys = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let q = [1.0, 0.5];
        assert_eq!(recall_at_k(&[0, 1, 2], &q, &keys, 2, 3).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[], &q, &keys, 2, 3).unwrap(), 0.0);
        assert!(recall_at_k(&[], &q, &keys, 2, 4).is_err());
        assert_eq!(top_k_ids(&q, &keys, 2, 2), vec![2, 0]);
    }

    #[test]
    fn ties_go_to_lower_ids() {
        let keys = [1.0; 10];
        assert_eq!(top_k_ids(&[1.0], &keys, 1, 3), vec![0, 1, 2]);
    }

    #[test]
    fn matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 8;
        for _ in 0..20 {
            // coarse values force plenty of ties
            let keys: Vec<f32> = (0..512 * d)
                .map(|_| rng.random_range(-2..=2) as f32)
                .collect();
            let q: Vec<f32> = (0..d).map(|_| rng.random_range(-2..=2) as f32).collect();
            assert_eq!(
                top_k_ids(&q, &keys, d, 100),
                exhaustive_top_k(&q, &keys, d, 100)
            );
            let retrieved: Vec<u64> = (0..512).filter(|_| rng.random_bool(0.3)).collect();
            let want = exhaustive_top_k(&q, &keys, d, 100)
                .iter()
                .filter(|i| retrieved.contains(i))
                .count() as f64
                / 100.0;
            assert_eq!(recall_at_k(&retrieved, &q, &keys, d, 100).unwrap(), want);
        }
    }

    #[test]
    fn relative_error_and_summary() {
        assert_eq!(relative_l2(&[3.0, 4.0], &[0.0, 0.0]), 5.0);
        assert!((relative_l2(&[1.0, 1.0], &[1.0, 0.0]) - 1.0).abs() < 1e-12);
        let s = summarize(&(1..=100).map(f64::from).collect::<Vec<_>>()).unwrap();
        assert_eq!(
            (s.mean, s.p50, s.p90, s.p99, s.max),
            (50.5, 50.0, 90.0, 99.0, 100.0)
        );
        assert!(summarize(&[]).is_none());
    }
}
