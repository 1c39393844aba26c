//! NEON kernels for aarch64.
//!
//! Same safety contract as the x86 module: callers reach these only through
//! a `KernelSet` whose construction attested NEON support. The int8 inner
//! product uses the widening multiply (`vmull_s8`) plus pairwise-widening
//! adds, all exact; fp16 row conversions have no stable NEON intrinsics in
//! Rust, so those stay bound to the scalar codec.

use core::arch::aarch64::*;

use crate::quant::{BlockQ8F16S, BlockQ8F32S, Q8Block};

use super::NormConfig;

#[inline]
#[target_feature(enable = "neon")]
unsafe fn block_isum<B: Q8Block>(a: &B, b: &B) -> i32 {
    let pa = a.quants().as_ptr();
    let pb = b.quants().as_ptr();
    let a0 = vld1q_s8(pa);
    let a1 = vld1q_s8(pa.add(16));
    let b0 = vld1q_s8(pb);
    let b1 = vld1q_s8(pb.add(16));
    // i8*i8 -> i16 exactly (|q| <= 127), then pairwise-widen to i32 lanes.
    let p0 = vmull_s8(vget_low_s8(a0), vget_low_s8(b0));
    let p1 = vmull_s8(vget_high_s8(a0), vget_high_s8(b0));
    let p2 = vmull_s8(vget_low_s8(a1), vget_low_s8(b1));
    let p3 = vmull_s8(vget_high_s8(a1), vget_high_s8(b1));
    let s01 = vaddq_s32(vpaddlq_s16(p0), vpaddlq_s16(p1));
    let s23 = vaddq_s32(vpaddlq_s16(p2), vpaddlq_s16(p3));
    vaddvq_s32(vaddq_s32(s01, s23))
}

#[target_feature(enable = "neon")]
unsafe fn vec_dot_neon<B: Q8Block>(a: &[B], b: &[B]) -> f32 {
    let mut acc = 0.0f32;
    for (ba, bb) in a.iter().zip(b) {
        acc += (B::scale(ba) * B::scale(bb)) * block_isum(ba, bb) as f32;
    }
    acc
}

#[target_feature(enable = "neon")]
unsafe fn vec_dot_partials_neon<B: Q8Block>(a: &[B], b: &[B], out: &mut [i32]) {
    for ((o, ba), bb) in out.iter_mut().zip(a).zip(b) {
        *o = block_isum(ba, bb);
    }
}

pub(super) fn vec_dot_f16s(a: &[BlockQ8F16S], b: &[BlockQ8F16S]) -> f32 {
    unsafe { vec_dot_neon(a, b) }
}

pub(super) fn vec_dot_f32s(a: &[BlockQ8F32S], b: &[BlockQ8F32S]) -> f32 {
    unsafe { vec_dot_neon(a, b) }
}

pub(super) fn vec_dot_partials_f16s(a: &[BlockQ8F16S], b: &[BlockQ8F16S], out: &mut [i32]) {
    unsafe { vec_dot_partials_neon(a, b, out) }
}

pub(super) fn vec_dot_partials_f32s(a: &[BlockQ8F32S], b: &[BlockQ8F32S], out: &mut [i32]) {
    unsafe { vec_dot_partials_neon(a, b, out) }
}

/// Sum of four f32 lanes widened to f64 pairs, added into `acc`.
#[inline]
#[target_feature(enable = "neon")]
unsafe fn widen_sum(acc: float64x2_t, v: float32x4_t) -> float64x2_t {
    vaddq_f64(acc, vaddq_f64(vcvt_f64_f32(vget_low_f32(v)), vcvt_high_f64_f32(v)))
}

/// Sum of squares of four f32 lanes in f64, added into `acc`.
#[inline]
#[target_feature(enable = "neon")]
unsafe fn widen_sumsq(acc: float64x2_t, v: float32x4_t) -> float64x2_t {
    let lo = vcvt_f64_f32(vget_low_f32(v));
    let hi = vcvt_high_f64_f32(v);
    vaddq_f64(acc, vaddq_f64(vmulq_f64(lo, lo), vmulq_f64(hi, hi)))
}

#[target_feature(enable = "neon")]
unsafe fn norm_neon(x: &[f32], out: &mut [f32], cfg: NormConfig) {
    let n = x.len();
    let chunks = n / 4;
    let mut acc = vdupq_n_f64(0.0);
    for c in 0..chunks {
        acc = widen_sum(acc, vld1q_f32(x.as_ptr().add(c * 4)));
    }
    let mut sum = vaddvq_f64(acc);
    for &v in &x[chunks * 4..] {
        sum += v as f64;
    }
    let mean = sum / n as f64;

    let vmean = vdupq_n_f64(mean);
    let mut acc = vdupq_n_f64(0.0);
    for c in 0..chunks {
        let v = vld1q_f32(x.as_ptr().add(c * 4));
        let lo = vsubq_f64(vcvt_f64_f32(vget_low_f32(v)), vmean);
        let hi = vsubq_f64(vcvt_high_f64_f32(v), vmean);
        acc = vaddq_f64(acc, vaddq_f64(vmulq_f64(lo, lo), vmulq_f64(hi, hi)));
    }
    let mut var = vaddvq_f64(acc);
    for &v in &x[chunks * 4..] {
        let d = v as f64 - mean;
        var += d * d;
    }

    let inv = 1.0 / libm::sqrt(var / n as f64 + cfg.eps as f64);
    let mean32 = mean as f32;
    let inv32 = inv as f32;
    let vm = vdupq_n_f32(mean32);
    let vi = vdupq_n_f32(inv32);
    for c in 0..chunks {
        let v = vld1q_f32(x.as_ptr().add(c * 4));
        vst1q_f32(out.as_mut_ptr().add(c * 4), vmulq_f32(vsubq_f32(v, vm), vi));
    }
    for i in chunks * 4..n {
        out[i] = (x[i] - mean32) * inv32;
    }
}

#[target_feature(enable = "neon")]
unsafe fn rms_norm_neon(x: &[f32], out: &mut [f32], cfg: NormConfig) {
    let n = x.len();
    let chunks = n / 4;
    let mut acc = vdupq_n_f64(0.0);
    for c in 0..chunks {
        acc = widen_sumsq(acc, vld1q_f32(x.as_ptr().add(c * 4)));
    }
    let mut sumsq = vaddvq_f64(acc);
    for &v in &x[chunks * 4..] {
        sumsq += v as f64 * v as f64;
    }
    let inv32 = (1.0 / libm::sqrt(sumsq / n as f64 + cfg.eps as f64)) as f32;
    let vi = vdupq_n_f32(inv32);
    for c in 0..chunks {
        let v = vld1q_f32(x.as_ptr().add(c * 4));
        vst1q_f32(out.as_mut_ptr().add(c * 4), vmulq_f32(v, vi));
    }
    for i in chunks * 4..n {
        out[i] = x[i] * inv32;
    }
}

pub(super) fn norm_f32(x: &[f32], out: &mut [f32], cfg: NormConfig) {
    debug_assert!(!x.is_empty() && out.len() == x.len());
    unsafe { norm_neon(x, out, cfg) }
}

pub(super) fn rms_norm_f32(x: &[f32], out: &mut [f32], cfg: NormConfig) {
    debug_assert!(!x.is_empty() && out.len() == x.len());
    unsafe { rms_norm_neon(x, out, cfg) }
}
