//! Scalar reference implementations.
//!
//! These define the semantics every vectorized variant is tested against:
//! reductions accumulate in f64, the output pass runs in f32, and the dot
//! product accumulates one f32 term per block in left-to-right order.

use crate::quant::Q8Block;

use super::NormConfig;

/// Layer normalization with population variance:
/// `out[i] = (x[i] - mean) / sqrt(var + eps)`.
pub fn norm_f32(x: &[f32], out: &mut [f32], cfg: NormConfig) {
    let n = x.len();
    debug_assert!(n > 0 && out.len() == n);
    let mut sum = 0.0f64;
    for &v in x {
        sum += v as f64;
    }
    let mean = sum / n as f64;
    let mut var = 0.0f64;
    for &v in x {
        let d = v as f64 - mean;
        var += d * d;
    }
    let inv = 1.0 / libm::sqrt(var / n as f64 + cfg.eps as f64);
    let mean32 = mean as f32;
    let inv32 = inv as f32;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mean32) * inv32;
    }
}

/// RMS normalization: `out[i] = x[i] / sqrt(mean(x^2) + eps)`.
pub fn rms_norm_f32(x: &[f32], out: &mut [f32], cfg: NormConfig) {
    let n = x.len();
    debug_assert!(n > 0 && out.len() == n);
    let mut sumsq = 0.0f64;
    for &v in x {
        sumsq += v as f64 * v as f64;
    }
    let inv = 1.0 / libm::sqrt(sumsq / n as f64 + cfg.eps as f64);
    let inv32 = inv as f32;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v * inv32;
    }
}

/// Exact 32-element integer inner product of one block pair. Bounded by
/// 32 * 127^2 = 516128, far inside i32 (and inside f32's exact-integer
/// range, so the later conversion is lossless).
#[inline]
pub fn block_isum<B: Q8Block>(a: &B, b: &B) -> i32 {
    let mut isum = 0i32;
    for (&qa, &qb) in a.quants().iter().zip(b.quants()) {
        isum += qa as i32 * qb as i32;
    }
    isum
}

/// Block dot product: `sum_k scale_a(k) * scale_b(k) * isum(k)`, one f32
/// accumulation per block, blocks left to right.
pub fn vec_dot<B: Q8Block>(a: &[B], b: &[B]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for (ba, bb) in a.iter().zip(b) {
        acc += (B::scale(ba) * B::scale(bb)) * block_isum(ba, bb) as f32;
    }
    acc
}

/// Per-block integer partial sums, for verifying that vectorized paths
/// compute the inner products exactly.
pub fn vec_dot_partials<B: Q8Block>(a: &[B], b: &[B], out: &mut [i32]) {
    debug_assert!(a.len() == b.len() && out.len() == a.len());
    for ((o, ba), bb) in out.iter_mut().zip(a).zip(b) {
        *o = block_isum(ba, bb);
    }
}
