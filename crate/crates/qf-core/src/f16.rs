//! IEEE 754 binary16 codec.
//!
//! `decode` and `encode` are total over all bit patterns and all f32 inputs.
//! Every binary16 value is exactly representable in f32, so decode is exact;
//! encode rounds to nearest, ties to even. Row conversions here are the scalar
//! references; vectorized variants live in [`crate::kernels`].

/// A raw binary16 bit pattern: 1 sign, 5 exponent, 10 mantissa bits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
#[repr(transparent)]
pub struct F16Bits(pub u16);

impl F16Bits {
    pub const ZERO: F16Bits = F16Bits(0x0000);
    pub const ONE: F16Bits = F16Bits(0x3C00);
    /// Largest finite value, 65504.0.
    pub const MAX: F16Bits = F16Bits(0x7BFF);

    /// Shorthand for [`decode`].
    #[inline]
    pub fn to_f32(self) -> f32 {
        decode(self)
    }

    /// Shorthand for [`encode`].
    #[inline]
    pub fn from_f32(x: f32) -> Self {
        encode(x)
    }
}

/// Decodes a binary16 bit pattern to the f32 with the same real value.
///
/// Total over all 65536 patterns: exponent 0 decodes subnormals exactly,
/// exponent 31 yields +-Inf or NaN (payload preserved, shifted into the f32
/// mantissa), and normal values go through an exponent re-bias.
#[inline]
pub fn decode(b: F16Bits) -> f32 {
    #[cfg(debug_assertions)]
    counter::record();
    let bits = b.0 as u32;
    let sign = (bits & 0x8000) << 16;
    let exp = (bits >> 10) & 0x1F;
    let mant = bits & 0x03FF;
    match exp {
        0 => {
            // Subnormal or zero: mant * 2^-24. Exact: mant <= 1023 and the
            // division is by a power of two.
            let mag = mant as f32 / 16_777_216.0;
            f32::from_bits(sign | mag.to_bits())
        }
        31 => {
            if mant == 0 {
                f32::from_bits(sign | 0x7F80_0000)
            } else {
                // NaN: payload moves to the top of the f32 mantissa, so the
                // quiet bit stays the quiet bit.
                f32::from_bits(sign | 0x7F80_0000 | (mant << 13))
            }
        }
        _ => f32::from_bits(sign | ((exp + 112) << 23) | (mant << 13)),
    }
}

/// Encodes an f32 to the nearest binary16, ties to even.
///
/// Values whose rounded magnitude exceeds 65504 become +-Inf. NaN inputs
/// canonicalize to 0x7E00 with the sign preserved. f32 subnormals are far
/// below half the smallest binary16 subnormal and flush to signed zero.
#[inline]
pub fn encode(x: f32) -> F16Bits {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xFF) as i32;
    let mant = bits & 0x007F_FFFF;

    if exp == 0xFF {
        return if mant == 0 {
            F16Bits(sign | 0x7C00)
        } else {
            F16Bits(sign | 0x7E00)
        };
    }

    let unbiased = exp - 127;

    if unbiased >= 16 {
        return F16Bits(sign | 0x7C00);
    }

    if unbiased >= -14 {
        // Normal range. Round the 23-bit mantissa to 10 bits; a carry out of
        // the mantissa rolls into the exponent, which also turns a rounded-up
        // 65519.5+ into Inf with no special case.
        let e16 = (unbiased + 15) as u32;
        let lsb = (mant >> 13) & 1;
        let rounded = mant + 0x0FFF + lsb;
        return F16Bits(sign | ((e16 << 10) + (rounded >> 13)) as u16);
    }

    if unbiased < -25 {
        // Below half the smallest subnormal (including every f32 subnormal
        // and zero): rounds to signed zero.
        return F16Bits(sign);
    }

    // Subnormal result: the nearest multiple of 2^-24. The significand with
    // its implicit bit is sig * 2^(unbiased - 23), so the multiple count is
    // sig >> -(unbiased + 1), rounded to nearest even. Rounding up from just
    // below 2^-14 yields 1024, which is exactly the smallest normal encoding.
    let sig = mant | 0x0080_0000;
    let shift = (-unbiased - 1) as u32;
    F16Bits(sign | rne_shift(sig, shift) as u16)
}

/// `value >> shift` rounded to nearest, ties to even. `shift` in 1..=31.
#[inline]
fn rne_shift(value: u32, shift: u32) -> u32 {
    let floor = value >> shift;
    let rem = value & ((1 << shift) - 1);
    let half = 1 << (shift - 1);
    if rem > half || (rem == half && floor & 1 == 1) {
        floor + 1
    } else {
        floor
    }
}

/// Scalar reference for row decoding: `dst[i] = decode(src[i])`.
///
/// Panics if the slices differ in length.
pub fn decode_row(src: &[F16Bits], dst: &mut [f32]) {
    assert_eq!(src.len(), dst.len(), "row length mismatch");
    for (d, s) in dst.iter_mut().zip(src) {
        *d = decode(*s);
    }
}

/// Scalar reference for row encoding: `dst[i] = encode(src[i])`.
///
/// Panics if the slices differ in length.
pub fn encode_row(src: &[f32], dst: &mut [F16Bits]) {
    assert_eq!(src.len(), dst.len(), "row length mismatch");
    for (d, s) in dst.iter_mut().zip(src) {
        *d = encode(*s);
    }
}

#[cfg(debug_assertions)]
mod counter {
    use core::sync::atomic::{AtomicU64, Ordering};

    static DECODES: AtomicU64 = AtomicU64::new(0);

    #[inline]
    pub(super) fn record() {
        DECODES.fetch_add(1, Ordering::Relaxed);
    }

    pub(super) fn reset() {
        DECODES.store(0, Ordering::Relaxed);
    }

    pub(super) fn count() -> u64 {
        DECODES.load(Ordering::Relaxed)
    }
}

/// Number of `decode` calls since the last [`reset_decode_count`].
///
/// Debug builds only. The counter is process-global; callers that assert on
/// deltas must serialize against other decoding threads. Its purpose is to
/// prove structurally that the f32-scale dot path performs no binary16
/// conversions while the f16-scale path performs exactly two per block pair.
#[cfg(debug_assertions)]
pub fn decode_count() -> u64 {
    counter::count()
}

/// Resets the debug decode counter to zero.
#[cfg(debug_assertions)]
pub fn reset_decode_count() {
    counter::reset()
}
