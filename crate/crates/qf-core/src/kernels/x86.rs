//! AVX2 / F16C kernels for x86-64.
//!
//! Safety contract for every function here: the caller has verified that the
//! CPU supports the features named in the `target_feature` attributes. The
//! safe wrappers are only reachable through a `KernelSet` built by the unsafe
//! `with_features` attestation.
//!
//! Integer inner products are computed exactly (the `maddubs` pair sums stay
//! below i16 saturation because quants never leave [-127, 127]); the float
//! outer accumulation follows the scalar reference order. Reductions for the
//! norms widen to f64 like the reference; only the summation order differs.

use core::arch::x86_64::*;

use crate::f16::{self, F16Bits};
use crate::quant::{BlockQ8F16S, BlockQ8F32S, Q8Block};

use super::NormConfig;

/// Exact sum of the eight i32 lanes.
#[inline]
#[target_feature(enable = "avx2")]
unsafe fn hsum_i32_8(v: __m256i) -> i32 {
    let s = _mm_add_epi32(_mm256_castsi256_si128(v), _mm256_extracti128_si256::<1>(v));
    let s = _mm_add_epi32(s, _mm_shuffle_epi32::<0x4E>(s));
    let s = _mm_add_epi32(s, _mm_shuffle_epi32::<0xB1>(s));
    _mm_cvtsi128_si32(s)
}

/// Exact sum of the four f64 lanes.
#[inline]
#[target_feature(enable = "avx2")]
unsafe fn hsum_f64_4(v: __m256d) -> f64 {
    let s = _mm_add_pd(_mm256_castpd256_pd128(v), _mm256_extractf128_pd::<1>(v));
    _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)))
}

/// 32 i8*i8 products reduced to eight exact i32 lanes. `maddubs` needs an
/// unsigned left operand, so |x| pairs with sign(x)-adjusted y.
#[inline]
#[target_feature(enable = "avx2")]
unsafe fn dot_block_pairs(x: __m256i, y: __m256i) -> __m256i {
    let ax = _mm256_sign_epi8(x, x);
    let sy = _mm256_sign_epi8(y, x);
    let pairs = _mm256_maddubs_epi16(ax, sy);
    _mm256_madd_epi16(pairs, _mm256_set1_epi16(1))
}

#[inline]
#[target_feature(enable = "avx2")]
unsafe fn block_isum<B: Q8Block>(a: &B, b: &B) -> i32 {
    let qa = _mm256_loadu_si256(a.quants().as_ptr().cast());
    let qb = _mm256_loadu_si256(b.quants().as_ptr().cast());
    hsum_i32_8(dot_block_pairs(qa, qb))
}

#[target_feature(enable = "avx2")]
unsafe fn vec_dot_avx2<B: Q8Block>(a: &[B], b: &[B]) -> f32 {
    let mut acc = 0.0f32;
    for (ba, bb) in a.iter().zip(b) {
        acc += (B::scale(ba) * B::scale(bb)) * block_isum(ba, bb) as f32;
    }
    acc
}

#[target_feature(enable = "avx2")]
unsafe fn vec_dot_partials_avx2<B: Q8Block>(a: &[B], b: &[B], out: &mut [i32]) {
    for ((o, ba), bb) in out.iter_mut().zip(a).zip(b) {
        *o = block_isum(ba, bb);
    }
}

pub(super) fn vec_dot_f16s(a: &[BlockQ8F16S], b: &[BlockQ8F16S]) -> f32 {
    unsafe { vec_dot_avx2(a, b) }
}

pub(super) fn vec_dot_f32s(a: &[BlockQ8F32S], b: &[BlockQ8F32S]) -> f32 {
    unsafe { vec_dot_avx2(a, b) }
}

pub(super) fn vec_dot_partials_f16s(a: &[BlockQ8F16S], b: &[BlockQ8F16S], out: &mut [i32]) {
    unsafe { vec_dot_partials_avx2(a, b, out) }
}

pub(super) fn vec_dot_partials_f32s(a: &[BlockQ8F32S], b: &[BlockQ8F32S], out: &mut [i32]) {
    unsafe { vec_dot_partials_avx2(a, b, out) }
}

#[target_feature(enable = "avx2")]
unsafe fn norm_avx2(x: &[f32], out: &mut [f32], cfg: NormConfig) {
    let n = x.len();
    let chunks = n / 8;
    let mut acc = _mm256_setzero_pd();
    for c in 0..chunks {
        let v = _mm256_loadu_ps(x.as_ptr().add(c * 8));
        let lo = _mm256_cvtps_pd(_mm256_castps256_ps128(v));
        let hi = _mm256_cvtps_pd(_mm256_extractf128_ps::<1>(v));
        acc = _mm256_add_pd(acc, _mm256_add_pd(lo, hi));
    }
    let mut sum = hsum_f64_4(acc);
    for &v in &x[chunks * 8..] {
        sum += v as f64;
    }
    let mean = sum / n as f64;

    let vmean = _mm256_set1_pd(mean);
    let mut acc = _mm256_setzero_pd();
    for c in 0..chunks {
        let v = _mm256_loadu_ps(x.as_ptr().add(c * 8));
        let lo = _mm256_sub_pd(_mm256_cvtps_pd(_mm256_castps256_ps128(v)), vmean);
        let hi = _mm256_sub_pd(_mm256_cvtps_pd(_mm256_extractf128_ps::<1>(v)), vmean);
        acc = _mm256_add_pd(acc, _mm256_mul_pd(lo, lo));
        acc = _mm256_add_pd(acc, _mm256_mul_pd(hi, hi));
    }
    let mut var = hsum_f64_4(acc);
    for &v in &x[chunks * 8..] {
        let d = v as f64 - mean;
        var += d * d;
    }

    let inv = 1.0 / libm::sqrt(var / n as f64 + cfg.eps as f64);
    let mean32 = mean as f32;
    let inv32 = inv as f32;
    let vm = _mm256_set1_ps(mean32);
    let vi = _mm256_set1_ps(inv32);
    for c in 0..chunks {
        let v = _mm256_loadu_ps(x.as_ptr().add(c * 8));
        let r = _mm256_mul_ps(_mm256_sub_ps(v, vm), vi);
        _mm256_storeu_ps(out.as_mut_ptr().add(c * 8), r);
    }
    for i in chunks * 8..n {
        out[i] = (x[i] - mean32) * inv32;
    }
}

#[target_feature(enable = "avx2")]
unsafe fn rms_norm_avx2(x: &[f32], out: &mut [f32], cfg: NormConfig) {
    let n = x.len();
    let chunks = n / 8;
    let mut acc = _mm256_setzero_pd();
    for c in 0..chunks {
        let v = _mm256_loadu_ps(x.as_ptr().add(c * 8));
        let lo = _mm256_cvtps_pd(_mm256_castps256_ps128(v));
        let hi = _mm256_cvtps_pd(_mm256_extractf128_ps::<1>(v));
        acc = _mm256_add_pd(acc, _mm256_mul_pd(lo, lo));
        acc = _mm256_add_pd(acc, _mm256_mul_pd(hi, hi));
    }
    let mut sumsq = hsum_f64_4(acc);
    for &v in &x[chunks * 8..] {
        sumsq += v as f64 * v as f64;
    }
    let inv32 = (1.0 / libm::sqrt(sumsq / n as f64 + cfg.eps as f64)) as f32;
    let vi = _mm256_set1_ps(inv32);
    for c in 0..chunks {
        let v = _mm256_loadu_ps(x.as_ptr().add(c * 8));
        _mm256_storeu_ps(out.as_mut_ptr().add(c * 8), _mm256_mul_ps(v, vi));
    }
    for i in chunks * 8..n {
        out[i] = x[i] * inv32;
    }
}

pub(super) fn norm_f32(x: &[f32], out: &mut [f32], cfg: NormConfig) {
    debug_assert!(!x.is_empty() && out.len() == x.len());
    unsafe { norm_avx2(x, out, cfg) }
}

pub(super) fn rms_norm_f32(x: &[f32], out: &mut [f32], cfg: NormConfig) {
    debug_assert!(!x.is_empty() && out.len() == x.len());
    unsafe { rms_norm_avx2(x, out, cfg) }
}

#[target_feature(enable = "avx2,f16c")]
unsafe fn f16_to_f32_row_f16c(src: &[F16Bits], dst: &mut [f32]) {
    let n = src.len();
    let chunks = n / 8;
    for c in 0..chunks {
        let s = &src[c * 8..c * 8 + 8];
        // The hardware conversion quiets signaling NaNs, which would break
        // bit-identity with the scalar codec; NaN-bearing chunks take the
        // scalar path instead.
        if s.iter().any(|b| b.0 & 0x7C00 == 0x7C00 && b.0 & 0x03FF != 0) {
            for (o, &b) in dst[c * 8..c * 8 + 8].iter_mut().zip(s) {
                *o = f16::decode(b);
            }
            continue;
        }
        let h = _mm_loadu_si128(s.as_ptr().cast());
        _mm256_storeu_ps(dst.as_mut_ptr().add(c * 8), _mm256_cvtph_ps(h));
    }
    for i in chunks * 8..n {
        dst[i] = f16::decode(src[i]);
    }
}

#[target_feature(enable = "avx2,f16c")]
unsafe fn f32_to_f16_row_f16c(src: &[f32], dst: &mut [F16Bits]) {
    const ROUND_NE: i32 = _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC;
    let n = src.len();
    let chunks = n / 8;
    for c in 0..chunks {
        let s = &src[c * 8..c * 8 + 8];
        // Hardware NaN results keep truncated payloads; the scalar encoder
        // canonicalizes to 0x7E00, so NaN chunks take the scalar path.
        if s.iter().any(|v| v.is_nan()) {
            for (o, &v) in dst[c * 8..c * 8 + 8].iter_mut().zip(s) {
                *o = f16::encode(v);
            }
            continue;
        }
        let h = _mm256_cvtps_ph::<ROUND_NE>(_mm256_loadu_ps(s.as_ptr()));
        _mm_storeu_si128(dst.as_mut_ptr().add(c * 8).cast(), h);
    }
    for i in chunks * 8..n {
        dst[i] = f16::encode(src[i]);
    }
}

pub(super) fn f16_to_f32_row(src: &[F16Bits], dst: &mut [f32]) {
    assert_eq!(src.len(), dst.len(), "row length mismatch");
    unsafe { f16_to_f32_row_f16c(src, dst) }
}

pub(super) fn f32_to_f16_row(src: &[f32], dst: &mut [F16Bits]) {
    assert_eq!(src.len(), dst.len(), "row length mismatch");
    unsafe { f32_to_f16_row_f16c(src, dst) }
}
