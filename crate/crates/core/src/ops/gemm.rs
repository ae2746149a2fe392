//! Small row-major matrix kernels with f64 accumulators.
//!
//! Three orientations cover every use in the crate: `A*B` (conv forward),
//! `A^T*B` (conv input gradient), and `A*B^T` (conv weight gradient, linear
//! layers). Each output element is reduced in a fixed deterministic order
//! (sequential over the reduction index, or a fixed 4-lane partition for
//! the dot-product kernel), independent of data values.
//!
//! The hot loops are register-tiled plain Rust, compiled twice: once for
//! the baseline target and once with AVX2+FMA enabled, selected at runtime.

use crate::tensor::Scalar;

const MR: usize = 4; // rows per register tile
const NR: usize = 8; // f64 accumulator lanes per tile

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gemm_body<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m_dim: usize,
    k_dim: usize,
    s_dim: usize,
    accumulate: bool,
    transpose_a: bool,
) {
    // a is m_dim x k_dim (or k_dim x m_dim when transposed); the reduction
    // runs over k; c is m_dim x s_dim.
    let a_at = |m: usize, k: usize| -> f64 {
        if transpose_a {
            a[k * m_dim + m].to_f64()
        } else {
            a[m * k_dim + k].to_f64()
        }
    };
    let mut m0 = 0;
    while m0 < m_dim {
        let mr = MR.min(m_dim - m0);
        let mut s0 = 0;
        while s0 < s_dim {
            let nr = NR.min(s_dim - s0);
            if mr == MR && nr == NR {
                let mut acc = [[0.0f64; NR]; MR];
                if accumulate {
                    for (i, row) in acc.iter_mut().enumerate() {
                        for (j, v) in row.iter_mut().enumerate() {
                            *v = c[(m0 + i) * s_dim + s0 + j].to_f64();
                        }
                    }
                }
                for k in 0..k_dim {
                    let mut bv = [0.0f64; NR];
                    let brow = &b[k * s_dim + s0..k * s_dim + s0 + NR];
                    for j in 0..NR {
                        bv[j] = brow[j].to_f64();
                    }
                    for (i, row) in acc.iter_mut().enumerate() {
                        let av = a_at(m0 + i, k);
                        for j in 0..NR {
                            row[j] += av * bv[j];
                        }
                    }
                }
                for (i, row) in acc.iter().enumerate() {
                    let crow = &mut c[(m0 + i) * s_dim + s0..(m0 + i) * s_dim + s0 + NR];
                    for j in 0..NR {
                        crow[j] = T::from_f64(row[j]);
                    }
                }
            } else {
                // Remainder tile, scalar accumulators.
                for i in 0..mr {
                    for j in 0..nr {
                        let idx = (m0 + i) * s_dim + s0 + j;
                        let mut acc = if accumulate { c[idx].to_f64() } else { 0.0 };
                        for k in 0..k_dim {
                            acc += a_at(m0 + i, k) * b[k * s_dim + s0 + j].to_f64();
                        }
                        c[idx] = T::from_f64(acc);
                    }
                }
            }
            s0 += nr;
        }
        m0 += mr;
    }
}

#[inline(always)]
fn dot4_body<T: Scalar>(x: &[T], y: &[T]) -> f64 {
    // Fixed 16-lane partial sums (4 independent vector chains) folded once
    // at the end; the partition depends only on the length.
    let n = x.len();
    let chunks = n / 16;
    let mut lanes = [0.0f64; 16];
    for c in 0..chunks {
        let xs = &x[c * 16..c * 16 + 16];
        let ys = &y[c * 16..c * 16 + 16];
        for j in 0..16 {
            lanes[j] += xs[j].to_f64() * ys[j].to_f64();
        }
    }
    let mut tail = 0.0f64;
    for i in chunks * 16..n {
        tail += x[i].to_f64() * y[i].to_f64();
    }
    let mut total = 0.0;
    for quad in 0..4 {
        total += (lanes[quad * 4] + lanes[quad * 4 + 1]) + (lanes[quad * 4 + 2] + lanes[quad * 4 + 3]);
    }
    total + tail
}

#[inline(always)]
fn gemm_a_bt_acc_body<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [f64],
    m_dim: usize,
    k_dim: usize,
    s_dim: usize,
) {
    for m in 0..m_dim {
        let a_row = &a[m * s_dim..(m + 1) * s_dim];
        for k in 0..k_dim {
            let b_row = &b[k * s_dim..(k + 1) * s_dim];
            c[m * k_dim + k] += dot4_body(a_row, b_row);
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod accel {
    use super::*;

    #[target_feature(enable = "avx2,fma")]
    #[allow(clippy::too_many_arguments)]
    pub unsafe fn gemm_avx2<T: Scalar>(
        a: &[T],
        b: &[T],
        c: &mut [T],
        m_dim: usize,
        k_dim: usize,
        s_dim: usize,
        accumulate: bool,
        transpose_a: bool,
    ) {
        gemm_body(a, b, c, m_dim, k_dim, s_dim, accumulate, transpose_a);
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn gemm_a_bt_acc_avx2<T: Scalar>(
        a: &[T],
        b: &[T],
        c: &mut [f64],
        m_dim: usize,
        k_dim: usize,
        s_dim: usize,
    ) {
        gemm_a_bt_acc_body(a, b, c, m_dim, k_dim, s_dim);
    }

    pub fn available() -> bool {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    }
}

#[inline]
fn use_accel() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        accel::available()
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// `c[m][s] (+)= sum_k a[m][k] * b[k][s]`; `a` is `m_dim x k_dim`,
/// `b` is `k_dim x s_dim`, `c` is `m_dim x s_dim`.
pub fn gemm<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m_dim: usize,
    k_dim: usize,
    s_dim: usize,
    accumulate: bool,
) {
    debug_assert!(a.len() >= m_dim * k_dim && b.len() >= k_dim * s_dim);
    #[cfg(target_arch = "x86_64")]
    if use_accel() {
        // SAFETY: feature presence checked at runtime.
        unsafe { accel::gemm_avx2(a, b, c, m_dim, k_dim, s_dim, accumulate, false) };
        return;
    }
    gemm_body(a, b, c, m_dim, k_dim, s_dim, accumulate, false);
}

/// `c[k][s] (+)= sum_m a[m][k] * b[m][s]` (i.e. `a^T * b`); `a` is
/// `m_dim x k_dim`, `b` is `m_dim x s_dim`, `c` is `k_dim x s_dim`.
pub fn gemm_at_b<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m_dim: usize,
    k_dim: usize,
    s_dim: usize,
    accumulate: bool,
) {
    // Reuse the same body with roles of the tile rows swapped: the output
    // rows are the k axis and the reduction runs over m.
    #[cfg(target_arch = "x86_64")]
    if use_accel() {
        // SAFETY: feature presence checked at runtime.
        unsafe { accel::gemm_avx2(a, b, c, k_dim, m_dim, s_dim, accumulate, true) };
        return;
    }
    gemm_body(a, b, c, k_dim, m_dim, s_dim, accumulate, true);
}

/// `c[m][k] += sum_s a[m][s] * b[k][s]` (i.e. `a * b^T`) into an f64
/// buffer: batch-wide weight-gradient accumulation stays in binary64
/// until the final cast.
pub fn gemm_a_bt_acc<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [f64],
    m_dim: usize,
    k_dim: usize,
    s_dim: usize,
) {
    #[cfg(target_arch = "x86_64")]
    if use_accel() {
        // SAFETY: feature presence checked at runtime.
        unsafe { accel::gemm_a_bt_acc_avx2(a, b, c, m_dim, k_dim, s_dim) };
        return;
    }
    gemm_a_bt_acc_body(a, b, c, m_dim, k_dim, s_dim);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn gemm_matches_naive() {
        let mut rng = SplitMix64::new(17);
        // Odd sizes exercise the remainder tiles.
        let (m, k, s) = (7, 5, 13);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gaussian()).collect();
        let b: Vec<f64> = (0..k * s).map(|_| rng.gaussian()).collect();
        let mut c = vec![0.5f64; m * s];
        gemm(&a, &b, &mut c, m, k, s, true);
        for mm in 0..m {
            for ss in 0..s {
                let want: f64 =
                    0.5 + (0..k).map(|kk| a[mm * k + kk] * b[kk * s + ss]).sum::<f64>();
                assert!((c[mm * s + ss] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_at_b_matches_naive() {
        let mut rng = SplitMix64::new(18);
        let (m, k, s) = (6, 9, 11);
        let a: Vec<f32> = (0..m * k).map(|_| rng.gaussian() as f32).collect();
        let b: Vec<f32> = (0..m * s).map(|_| rng.gaussian() as f32).collect();
        let mut c = vec![0.0f32; k * s];
        gemm_at_b(&a, &b, &mut c, m, k, s, false);
        for kk in 0..k {
            for ss in 0..s {
                let want: f64 = (0..m)
                    .map(|mm| a[mm * k + kk] as f64 * b[mm * s + ss] as f64)
                    .sum();
                assert!((c[kk * s + ss] as f64 - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn gemm_a_bt_acc_matches_naive() {
        let mut rng = SplitMix64::new(19);
        let (m, k, s) = (3, 4, 29);
        let a: Vec<f64> = (0..m * s).map(|_| rng.gaussian()).collect();
        let b: Vec<f64> = (0..k * s).map(|_| rng.gaussian()).collect();
        let mut c64 = vec![0.25f64; m * k];
        gemm_a_bt_acc(&a, &b, &mut c64, m, k, s);
        for mm in 0..m {
            for kk in 0..k {
                let want: f64 = 0.25 + (0..s).map(|ss| a[mm * s + ss] * b[kk * s + ss]).sum::<f64>();
                assert!((c64[mm * k + kk] - want).abs() < 1e-12);
            }
        }
    }
}
