//! Dense vector helpers shared by clustering, ranking and attention.

/// Single-precision dot product with eight independent accumulators so the
/// loop vectorizes.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let xa = &a[c * 8..c * 8 + 8];
        let xb = &b[c * 8..c * 8 + 8];
        for i in 0..8 {
            acc[i] += xa[i] * xb[i];
        }
    }
    let mut sum = acc.iter().sum::<f32>();
    for i in chunks * 8..a.len() {
        sum += a[i] * b[i];
    }
    sum
}

/// Dot product accumulated in double precision. Used wherever the result
/// feeds an exponential.
#[inline]
pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for i in 0..4 {
            acc[i] += a[c * 4 + i] as f64 * b[c * 4 + i] as f64;
        }
    }
    let mut sum = acc[0] + acc[1] + acc[2] + acc[3];
    for i in chunks * 4..a.len() {
        sum += a[i] as f64 * b[i] as f64;
    }
    sum
}

pub fn norm(a: &[f32]) -> f32 {
    dot(a, a).sqrt()
}

/// `out[i] = rows[i] . v` for a row-major matrix with `v.len()` columns.
///
/// This is the hot loop of k-means++ seeding, so on x86_64 it switches to
/// an FMA kernel when the CPU supports one. Results agree with [`dot`] up to
/// rounding.
pub fn dots(rows: &[f32], v: &[f32], out: &mut [f32]) {
    let d = v.len();
    debug_assert_eq!(rows.len(), out.len() * d);
    #[cfg(target_arch = "x86_64")]
    {
        if d.is_multiple_of(8)
            && std::is_x86_feature_detected!("avx2")
            && std::is_x86_feature_detected!("fma")
        {
            // SAFETY: the required CPU features were detected just above.
            unsafe { fma::dots(rows, v, out) };
            return;
        }
    }
    for (o, row) in out.iter_mut().zip(rows.chunks_exact(d.max(1))) {
        *o = dot(row, v);
    }
}

#[cfg(target_arch = "x86_64")]
mod fma {
    use std::arch::x86_64::*;

    #[target_feature(enable = "avx2,fma")]
    unsafe fn hsum(x: __m256) -> f32 {
        let lo = _mm256_castps256_ps128(x);
        let hi = _mm256_extractf128_ps(x, 1);
        let s = _mm_add_ps(lo, hi);
        let s = _mm_add_ps(s, _mm_movehl_ps(s, s));
        let s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 1));
        _mm_cvtss_f32(s)
    }

    /// Four rows per pass so each load of `v` feeds four FMAs.
    ///
    /// # Safety
    /// The CPU must support AVX2 and FMA, `v.len()` must be a multiple of 8
    /// and `rows.len() == out.len() * v.len()`.
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn dots(rows: &[f32], v: &[f32], out: &mut [f32]) {
        let d = v.len();
        let n = out.len();
        assert!(d.is_multiple_of(8) && rows.len() == n * d);
        let vp = v.as_ptr();
        let rp = rows.as_ptr();
        let mut i = 0;
        while i + 4 <= n {
            let r0 = rp.add(i * d);
            let r1 = r0.add(d);
            let r2 = r1.add(d);
            let r3 = r2.add(d);
            let mut a0 = _mm256_setzero_ps();
            let mut a1 = _mm256_setzero_ps();
            let mut a2 = _mm256_setzero_ps();
            let mut a3 = _mm256_setzero_ps();
            let mut j = 0;
            while j < d {
                let x = _mm256_loadu_ps(vp.add(j));
                a0 = _mm256_fmadd_ps(_mm256_loadu_ps(r0.add(j)), x, a0);
                a1 = _mm256_fmadd_ps(_mm256_loadu_ps(r1.add(j)), x, a1);
                a2 = _mm256_fmadd_ps(_mm256_loadu_ps(r2.add(j)), x, a2);
                a3 = _mm256_fmadd_ps(_mm256_loadu_ps(r3.add(j)), x, a3);
                j += 8;
            }
            out[i] = hsum(a0);
            out[i + 1] = hsum(a1);
            out[i + 2] = hsum(a2);
            out[i + 3] = hsum(a3);
            i += 4;
        }
        while i < n {
            let r = rp.add(i * d);
            let mut a = _mm256_setzero_ps();
            let mut j = 0;
            while j < d {
                a = _mm256_fmadd_ps(_mm256_loadu_ps(r.add(j)), _mm256_loadu_ps(vp.add(j)), a);
                j += 8;
            }
            out[i] = hsum(a);
            i += 1;
        }
    }
}

/// Row-major `out[n x k] = rows[n x d] * cols[k x d]^T`.
pub fn gemm_nt(rows: &[f32], cols: &[f32], d: usize, out: &mut [f32]) {
    let n = rows.len() / d;
    let k = cols.len() / d;
    debug_assert_eq!(out.len(), n * k);
    if n == 0 || k == 0 {
        return;
    }
    // SAFETY: slice lengths were checked above; strides describe row-major
    // `rows` (n x d), column view of `cols` (d x k) and row-major `out` (n x k).
    unsafe {
        matrixmultiply::sgemm(
            n,
            d,
            k,
            1.0,
            rows.as_ptr(),
            d as isize,
            1,
            cols.as_ptr(),
            1,
            d as isize,
            0.0,
            out.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_handles_remainders() {
        let a: Vec<f32> = (0..13).map(|i| i as f32).collect();
        let b: Vec<f32> = (0..13).map(|i| 1.0 - i as f32 * 0.5).collect();
        let naive: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (*x as f64) * (*y as f64))
            .sum();
        assert!((dot(&a, &b) as f64 - naive).abs() < 1e-3);
        assert_eq!(dot_f64(&a, &b), naive);
    }

    #[test]
    fn dots_match_dot() {
        for d in [5, 8, 64] {
            let n = 11;
            let rows: Vec<f32> = (0..n * d).map(|i| (i as f32 * 0.37).sin()).collect();
            let v: Vec<f32> = (0..d).map(|i| (i as f32 * 0.11).cos()).collect();
            let mut out = vec![0.0; n];
            dots(&rows, &v, &mut out);
            for i in 0..n {
                let want = dot_f64(&rows[i * d..(i + 1) * d], &v);
                assert!((out[i] as f64 - want).abs() < 1e-4, "d={d} row {i}");
            }
        }
    }

    #[test]
    fn gemm_matches_naive() {
        let d = 5;
        let rows: Vec<f32> = (0..3 * d).map(|i| (i as f32).sin()).collect();
        let cols: Vec<f32> = (0..4 * d).map(|i| (i as f32).cos()).collect();
        let mut out = vec![0.0; 12];
        gemm_nt(&rows, &cols, d, &mut out);
        for i in 0..3 {
            for j in 0..4 {
                let want = dot(&rows[i * d..(i + 1) * d], &cols[j * d..(j + 1) * d]);
                assert!((out[i * 4 + j] - want).abs() < 1e-5);
            }
        }
    }
}
