//! Spherical k-means over centered key vectors.
//!
//! Keys are centered on their mean and projected onto the unit sphere before
//! clustering, so assignment is by maximum inner product. Only the assignment
//! is returned; callers recompute centroids from the raw keys.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{dots, gemm_nt, norm};

/// Rows scored per GEMM call during assignment.
const ASSIGN_CHUNK: usize = 1024;

/// Clusters `keys` (row-major, `n x d`) into `k` groups and returns the
/// cluster index of every row. Every cluster in the result is non-empty.
pub fn spherical_kmeans(
    keys: &[f32],
    d: usize,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<Vec<u32>> {
    if d == 0 || !keys.len().is_multiple_of(d) {
        return Err(Error::config(format!(
            "key buffer of {} floats is not a multiple of d={d}",
            keys.len()
        )));
    }
    let n = keys.len() / d;
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    if k > n {
        return Err(Error::config(format!(
            "k={k} exceeds the {n} points to cluster"
        )));
    }

    let points = center_and_normalize(keys, d);
    if k == 1 {
        return Ok(vec![0; n]);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(&points, d, k, &mut rng);

    let mut assignment = vec![0u32; n];
    let mut own_score = vec![0f32; n];
    for _ in 0..iters {
        assign(&points, &centroids, d, &mut assignment, &mut own_score);
        repair_empty(&points, d, &mut centroids, &mut assignment, &mut own_score);
        update_centroids(&points, d, &assignment, &mut centroids);
    }
    assign(&points, &centroids, d, &mut assignment, &mut own_score);
    repair_empty(&points, d, &mut centroids, &mut assignment, &mut own_score);
    Ok(assignment)
}

/// Subtracts the mean row and scales every row to unit length. Rows that are
/// zero after centering map to the first basis vector.
pub(crate) fn center_and_normalize(keys: &[f32], d: usize) -> Vec<f32> {
    let n = keys.len() / d;
    let mut mean = vec![0f64; d];
    for row in keys.chunks_exact(d) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    let mut out = Vec::with_capacity(keys.len());
    for row in keys.chunks_exact(d) {
        let start = out.len();
        out.extend(row.iter().zip(&mean).map(|(&x, &m)| (x as f64 - m) as f32));
        let v = &mut out[start..];
        let len = norm(v);
        if len > f32::MIN_POSITIVE && len.is_finite() {
            v.iter_mut().for_each(|x| *x /= len);
        } else {
            v.fill(0.0);
            v[0] = 1.0;
        }
    }
    out
}

/// k-means++ seeding with squared chord distance `2 - 2 x.c` on the sphere.
fn seed_plus_plus(points: &[f32], d: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = points.len() / d;
    let mut centroids = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&points[first * d..(first + 1) * d]);

    let mut sims = vec![0f32; n];
    dots(points, &centroids[..d], &mut sims);
    let mut min_dist: Vec<f32> = sims.iter().map(|&s| chord2_from_dot(s)).collect();

    for _ in 1..k {
        let total: f64 = min_dist.iter().map(|&x| x as f64).sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in min_dist.iter().enumerate() {
                target -= w as f64;
                if target < 0.0 && w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = &points[pick * d..(pick + 1) * d];
        dots(points, c, &mut sims);
        for (m, &s) in min_dist.iter_mut().zip(&sims) {
            *m = m.min(chord2_from_dot(s));
        }
        centroids.extend_from_slice(c);
    }
    centroids
}

#[inline]
fn chord2_from_dot(s: f32) -> f32 {
    (2.0 - 2.0 * s).max(0.0)
}

/// Max-inner-product assignment; ties go to the lower cluster index.
fn assign(
    points: &[f32],
    centroids: &[f32],
    d: usize,
    assignment: &mut [u32],
    own_score: &mut [f32],
) {
    let k = centroids.len() / d;
    points
        .par_chunks(ASSIGN_CHUNK * d)
        .zip(assignment.par_chunks_mut(ASSIGN_CHUNK))
        .zip(own_score.par_chunks_mut(ASSIGN_CHUNK))
        .for_each(|((rows, assign_out), score_out)| {
            let r = rows.len() / d;
            let mut scores = vec![0f32; r * k];
            gemm_nt(rows, centroids, d, &mut scores);
            for (i, row) in scores.chunks_exact(k).enumerate() {
                let (best, best_score) = argmax(row);
                assign_out[i] = best as u32;
                score_out[i] = best_score;
            }
        });
}

/// Index and value of the largest entry, first index on ties.
fn argmax(row: &[f32]) -> (usize, f32) {
    // lane-wise maxima vectorize; the second pass finds the first hit
    let mut lanes = [f32::NEG_INFINITY; 16];
    let chunks = row.chunks_exact(16);
    let rest = chunks.remainder();
    for c in chunks {
        for i in 0..16 {
            lanes[i] = if c[i] > lanes[i] { c[i] } else { lanes[i] };
        }
    }
    let max = rest
        .iter()
        .chain(&lanes)
        .copied()
        .fold(f32::NEG_INFINITY, f32::max);
    let best = row.iter().position(|&x| x == max).unwrap_or(0);
    (best, row[best])
}

/// Gives every empty cluster the point that sits farthest from its current
/// centroid, taken from a cluster that can spare one.
fn repair_empty(
    points: &[f32],
    d: usize,
    centroids: &mut [f32],
    assignment: &mut [u32],
    own_score: &mut [f32],
) {
    let k = centroids.len() / d;
    let mut counts = vec![0usize; k];
    for &a in assignment.iter() {
        counts[a as usize] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let mut donor: Option<usize> = None;
        for (i, &a) in assignment.iter().enumerate() {
            if counts[a as usize] > 1 && donor.is_none_or(|j| own_score[i] < own_score[j]) {
                donor = Some(i);
            }
        }
        // n >= k guarantees a donor exists.
        let i = donor.expect("a cluster with two or more members");
        counts[assignment[i] as usize] -= 1;
        assignment[i] = c as u32;
        counts[c] = 1;
        own_score[i] = 1.0;
        centroids[c * d..(c + 1) * d].copy_from_slice(&points[i * d..(i + 1) * d]);
    }
}

/// Normalized mean of each cluster's members. A zero mean keeps the old centroid.
fn update_centroids(points: &[f32], d: usize, assignment: &[u32], centroids: &mut [f32]) {
    let k = centroids.len() / d;
    let mut sums = vec![0f64; k * d];
    for (p, &a) in points.chunks_exact(d).zip(assignment) {
        let s = &mut sums[a as usize * d..(a as usize + 1) * d];
        for (acc, &x) in s.iter_mut().zip(p) {
            *acc += x as f64;
        }
    }
    for (c, s) in sums.chunks_exact(d).enumerate() {
        let len = s.iter().map(|x| x * x).sum::<f64>().sqrt();
        if len > 0.0 {
            for (dst, &x) in centroids[c * d..(c + 1) * d].iter_mut().zip(s) {
                *dst = (x / len) as f32;
            }
        }
    }
}
