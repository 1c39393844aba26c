//! Compute operators in scalar-reference and vectorized form behind a
//! runtime-resolved dispatch table.
//!
//! A [`KernelSet`] binds each operator to a reference implementation and an
//! active one. [`KernelSet::scalar`] is always safe; binding vectorized
//! implementations requires attesting CPU support once, after which the
//! kernels run branch-free. Feature probing itself needs std and lives in
//! the companion crate.

#[cfg(target_arch = "aarch64")]
mod aarch64;
mod scalar;
#[cfg(target_arch = "x86_64")]
mod x86;

use alloc::vec::Vec;

use crate::error::Error;
use crate::f16::F16Bits;
use crate::quant::{self, BlockQ8F16S, BlockQ8F32S, Q8Block, Q8Matrix};

/// Epsilon for the normalization kernels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormConfig {
    pub eps: f32,
}

impl Default for NormConfig {
    /// eps = 1e-5, the common transformer default.
    fn default() -> Self {
        Self { eps: 1e-5 }
    }
}

/// CPU capabilities relevant to kernel selection. The core crate cannot
/// probe the CPU (that needs std); whoever constructs this vouches for it
/// when calling [`KernelSet::with_features`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CpuFeatures {
    pub avx2: bool,
    pub f16c: bool,
    pub neon: bool,
}

impl CpuFeatures {
    pub fn none() -> Self {
        Self::default()
    }
}

/// Implementation family an operator resolved to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Feature {
    Scalar,
    Avx2,
    Avx2F16c,
    Neon,
}

impl Feature {
    pub fn name(self) -> &'static str {
        match self {
            Feature::Scalar => "scalar",
            Feature::Avx2 => "avx2",
            Feature::Avx2F16c => "avx2+f16c",
            Feature::Neon => "neon",
        }
    }
}

/// One operator's reference and active implementations. `active` equals
/// `reference` unless a vectorized variant was bound.
#[derive(Clone, Copy)]
pub struct Binding<F> {
    pub reference: F,
    pub active: F,
    pub feature: Feature,
}

impl<F: Copy> Binding<F> {
    fn scalar(f: F) -> Self {
        Binding {
            reference: f,
            active: f,
            feature: Feature::Scalar,
        }
    }

    fn vectorized(reference: F, active: F, feature: Feature) -> Self {
        Binding {
            reference,
            active,
            feature,
        }
    }
}

pub type RowDecodeFn = fn(&[F16Bits], &mut [f32]);
pub type RowEncodeFn = fn(&[f32], &mut [F16Bits]);
pub type NormFn = fn(&[f32], &mut [f32], NormConfig);

/// Block dot product plus its per-block integer partial sums. The partials
/// entry exposes the exact inner accumulation so tests can verify that a
/// vectorized path computes the same integers as the scalar loop.
#[derive(Clone, Copy)]
pub struct DotKernel<B> {
    pub dot: fn(&[B], &[B]) -> f32,
    pub partials: fn(&[B], &[B], &mut [i32]),
}

/// Selects the dot-kernel binding for a block format.
pub trait DotDispatch: Q8Block {
    fn kernel(ks: &KernelSet) -> &Binding<DotKernel<Self>>;
}

impl DotDispatch for BlockQ8F16S {
    fn kernel(ks: &KernelSet) -> &Binding<DotKernel<Self>> {
        &ks.dot_f16s
    }
}

impl DotDispatch for BlockQ8F32S {
    fn kernel(ks: &KernelSet) -> &Binding<DotKernel<Self>> {
        &ks.dot_f32s
    }
}

/// Dispatch table binding every operator to a reference and an active
/// implementation. Immutable once built; resolve it once per process.
#[derive(Clone, Copy)]
pub struct KernelSet {
    features: CpuFeatures,
    decode_rows: Binding<RowDecodeFn>,
    encode_rows: Binding<RowEncodeFn>,
    norm: Binding<NormFn>,
    rms_norm: Binding<NormFn>,
    dot_f16s: Binding<DotKernel<BlockQ8F16S>>,
    dot_f32s: Binding<DotKernel<BlockQ8F32S>>,
}

impl KernelSet {
    /// Every operator bound to its scalar reference. Safe on any CPU.
    pub fn scalar() -> Self {
        Self {
            features: CpuFeatures::none(),
            decode_rows: Binding::scalar(crate::f16::decode_row as RowDecodeFn),
            encode_rows: Binding::scalar(crate::f16::encode_row as RowEncodeFn),
            norm: Binding::scalar(scalar::norm_f32 as NormFn),
            rms_norm: Binding::scalar(scalar::rms_norm_f32 as NormFn),
            dot_f16s: Binding::scalar(DotKernel {
                dot: scalar::vec_dot::<BlockQ8F16S>,
                partials: scalar::vec_dot_partials::<BlockQ8F16S>,
            }),
            dot_f32s: Binding::scalar(DotKernel {
                dot: scalar::vec_dot::<BlockQ8F32S>,
                partials: scalar::vec_dot_partials::<BlockQ8F32S>,
            }),
        }
    }

    /// Binds vectorized implementations for the given features; anything not
    /// covered stays on the scalar reference.
    ///
    /// # Safety
    /// The caller must guarantee the current CPU supports every feature set
    /// in `features`. The selected kernels execute those instructions
    /// without further checks.
    pub unsafe fn with_features(features: CpuFeatures) -> Self {
        let mut ks = Self::scalar();
        ks.features = features;
        #[cfg(target_arch = "x86_64")]
        if features.avx2 {
            ks.norm = Binding::vectorized(scalar::norm_f32, x86::norm_f32, Feature::Avx2);
            ks.rms_norm =
                Binding::vectorized(scalar::rms_norm_f32, x86::rms_norm_f32, Feature::Avx2);
            ks.dot_f16s = Binding::vectorized(
                ks.dot_f16s.reference,
                DotKernel {
                    dot: x86::vec_dot_f16s,
                    partials: x86::vec_dot_partials_f16s,
                },
                Feature::Avx2,
            );
            ks.dot_f32s = Binding::vectorized(
                ks.dot_f32s.reference,
                DotKernel {
                    dot: x86::vec_dot_f32s,
                    partials: x86::vec_dot_partials_f32s,
                },
                Feature::Avx2,
            );
            if features.f16c {
                ks.decode_rows = Binding::vectorized(
                    ks.decode_rows.reference,
                    x86::f16_to_f32_row,
                    Feature::Avx2F16c,
                );
                ks.encode_rows = Binding::vectorized(
                    ks.encode_rows.reference,
                    x86::f32_to_f16_row,
                    Feature::Avx2F16c,
                );
            }
        }
        #[cfg(target_arch = "aarch64")]
        if features.neon {
            ks.norm = Binding::vectorized(scalar::norm_f32, aarch64::norm_f32, Feature::Neon);
            ks.rms_norm =
                Binding::vectorized(scalar::rms_norm_f32, aarch64::rms_norm_f32, Feature::Neon);
            ks.dot_f16s = Binding::vectorized(
                ks.dot_f16s.reference,
                DotKernel {
                    dot: aarch64::vec_dot_f16s,
                    partials: aarch64::vec_dot_partials_f16s,
                },
                Feature::Neon,
            );
            ks.dot_f32s = Binding::vectorized(
                ks.dot_f32s.reference,
                DotKernel {
                    dot: aarch64::vec_dot_f32s,
                    partials: aarch64::vec_dot_partials_f32s,
                },
                Feature::Neon,
            );
        }
        ks
    }

    pub fn features(&self) -> CpuFeatures {
        self.features
    }

    /// Coarse label for reports: the most capable family in use.
    pub fn summary_tag(&self) -> &'static str {
        if self.decode_rows.feature == Feature::Avx2F16c {
            "avx2+f16c"
        } else {
            self.dot_f32s.feature.name()
        }
    }

    /// (operator, active implementation family) for every binding.
    pub fn bindings(&self) -> [(&'static str, Feature); 6] {
        [
            ("f16_to_f32_row", self.decode_rows.feature),
            ("f32_to_f16_row", self.encode_rows.feature),
            ("norm_f32", self.norm.feature),
            ("rms_norm_f32", self.rms_norm.feature),
            ("vec_dot_q8_f16s", self.dot_f16s.feature),
            ("vec_dot_q8_f32s", self.dot_f32s.feature),
        ]
    }

    /// Row decode, active path. Bit-identical to the reference by contract.
    /// Panics if the slices differ in length.
    pub fn f16_to_f32_row(&self, src: &[F16Bits], dst: &mut [f32]) {
        (self.decode_rows.active)(src, dst)
    }

    pub fn f16_to_f32_row_reference(&self, src: &[F16Bits], dst: &mut [f32]) {
        (self.decode_rows.reference)(src, dst)
    }

    /// Row encode, active path. Bit-identical to the reference by contract.
    pub fn f32_to_f16_row(&self, src: &[f32], dst: &mut [F16Bits]) {
        (self.encode_rows.active)(src, dst)
    }

    pub fn f32_to_f16_row_reference(&self, src: &[f32], dst: &mut [F16Bits]) {
        (self.encode_rows.reference)(src, dst)
    }

    /// Layer normalization over one row: `(x - mean) / sqrt(var + eps)` with
    /// population variance.
    pub fn norm_f32(&self, x: &[f32], out: &mut [f32], cfg: NormConfig) -> Result<(), Error> {
        check_norm_args(x, out)?;
        (self.norm.active)(x, out, cfg);
        Ok(())
    }

    pub fn norm_f32_reference(
        &self,
        x: &[f32],
        out: &mut [f32],
        cfg: NormConfig,
    ) -> Result<(), Error> {
        check_norm_args(x, out)?;
        (self.norm.reference)(x, out, cfg);
        Ok(())
    }

    /// RMS normalization over one row: `x / sqrt(mean(x^2) + eps)`.
    pub fn rms_norm_f32(&self, x: &[f32], out: &mut [f32], cfg: NormConfig) -> Result<(), Error> {
        check_norm_args(x, out)?;
        (self.rms_norm.active)(x, out, cfg);
        Ok(())
    }

    pub fn rms_norm_f32_reference(
        &self,
        x: &[f32],
        out: &mut [f32],
        cfg: NormConfig,
    ) -> Result<(), Error> {
        check_norm_args(x, out)?;
        (self.rms_norm.reference)(x, out, cfg);
        Ok(())
    }

    /// Block dot product of two equal-length block sequences.
    pub fn vec_dot_q8<B: DotDispatch>(&self, a: &[B], b: &[B]) -> Result<f32, Error> {
        check_block_args(a, b)?;
        Ok((B::kernel(self).active.dot)(a, b))
    }

    pub fn vec_dot_q8_reference<B: DotDispatch>(&self, a: &[B], b: &[B]) -> Result<f32, Error> {
        check_block_args(a, b)?;
        Ok((B::kernel(self).reference.dot)(a, b))
    }

    /// Per-block exact integer partial sums of the dot product.
    pub fn vec_dot_partials<B: DotDispatch>(
        &self,
        a: &[B],
        b: &[B],
        out: &mut [i32],
    ) -> Result<(), Error> {
        check_block_args(a, b)?;
        if out.len() != a.len() {
            return Err(Error::LengthMismatch {
                expected: a.len(),
                got: out.len(),
            });
        }
        (B::kernel(self).active.partials)(a, b, out);
        Ok(())
    }

    pub fn vec_dot_partials_reference<B: DotDispatch>(
        &self,
        a: &[B],
        b: &[B],
        out: &mut [i32],
    ) -> Result<(), Error> {
        check_block_args(a, b)?;
        if out.len() != a.len() {
            return Err(Error::LengthMismatch {
                expected: a.len(),
                got: out.len(),
            });
        }
        (B::kernel(self).reference.partials)(a, b, out);
        Ok(())
    }

    /// Matrix-vector product `out[j] = dot(W row j, quantize(x))`. The
    /// activation row is quantized once per call in the weights' format.
    pub fn matvec_q8<B: DotDispatch>(
        &self,
        w: &Q8Matrix<B>,
        x: &[f32],
        out: &mut [f32],
    ) -> Result<(), Error> {
        let mut scratch = Vec::new();
        self.matvec_q8_with_scratch(w, x, &mut scratch, out)
    }

    /// `matvec_q8` with a caller-owned activation-block buffer for hot loops.
    pub fn matvec_q8_with_scratch<B: DotDispatch>(
        &self,
        w: &Q8Matrix<B>,
        x: &[f32],
        scratch: &mut Vec<B>,
        out: &mut [f32],
    ) -> Result<(), Error> {
        if x.len() != w.cols() {
            return Err(Error::DimensionMismatch {
                expected: w.cols(),
                got: x.len(),
            });
        }
        if out.len() != w.rows() {
            return Err(Error::DimensionMismatch {
                expected: w.rows(),
                got: out.len(),
            });
        }
        scratch.clear();
        quant::quantize_row_into(x, scratch)?;
        self.matvec_prequant(w, scratch, out);
        Ok(())
    }

    /// Dot of every weight row against already-quantized activations.
    /// Panics on shape mismatch; the checked entry points are above.
    pub fn matvec_prequant<B: DotDispatch>(&self, w: &Q8Matrix<B>, xq: &[B], out: &mut [f32]) {
        assert_eq!(xq.len(), w.blocks_per_row(), "activation block count");
        assert_eq!(out.len(), w.rows(), "output length");
        let dot = B::kernel(self).active.dot;
        for (j, o) in out.iter_mut().enumerate() {
            *o = dot(w.row(j), xq);
        }
    }

    /// Batched matvec: `x` is row-major `m x cols`, `out` is `m x rows`, and
    /// output row i is exactly `matvec_q8(w, x row i)`. Sequential here; a
    /// caller may partition the batch across threads without changing any
    /// row's result.
    pub fn matmul_q8<B: DotDispatch>(
        &self,
        w: &Q8Matrix<B>,
        x: &[f32],
        m: usize,
        out: &mut [f32],
    ) -> Result<(), Error> {
        if x.len() != m * w.cols() {
            return Err(Error::LengthMismatch {
                expected: m * w.cols(),
                got: x.len(),
            });
        }
        if out.len() != m * w.rows() {
            return Err(Error::LengthMismatch {
                expected: m * w.rows(),
                got: out.len(),
            });
        }
        let mut scratch = Vec::new();
        for (xi, oi) in x.chunks_exact(w.cols()).zip(out.chunks_exact_mut(w.rows())) {
            self.matvec_q8_with_scratch(w, xi, &mut scratch, oi)?;
        }
        Ok(())
    }
}

fn check_norm_args(x: &[f32], out: &mut [f32]) -> Result<(), Error> {
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    if out.len() != x.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            got: out.len(),
        });
    }
    Ok(())
}

fn check_block_args<B: Q8Block>(a: &[B], b: &[B]) -> Result<(), Error> {
    if a.len() != b.len() {
        return Err(Error::BlockCountMismatch {
            lhs: a.len(),
            rhs: b.len(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::f16;
    use crate::quant::{quantize_row_into, QK8};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Scalar set plus the set resolved for this host's actual features.
    /// On a SIMD-capable host the second exercises the vectorized paths; on
    /// anything else it degenerates to reference-vs-reference, which keeps
    /// the suite total.
    fn sets() -> [(&'static str, KernelSet); 2] {
        [("scalar", KernelSet::scalar()), ("host", host_set())]
    }

    fn host_set() -> KernelSet {
        #[cfg(target_arch = "x86_64")]
        {
            let features = CpuFeatures {
                avx2: std::arch::is_x86_feature_detected!("avx2"),
                f16c: std::arch::is_x86_feature_detected!("f16c"),
                neon: false,
            };
            unsafe { KernelSet::with_features(features) }
        }
        #[cfg(target_arch = "aarch64")]
        {
            let features = CpuFeatures {
                avx2: false,
                f16c: false,
                neon: std::arch::is_aarch64_feature_detected!("neon"),
            };
            unsafe { KernelSet::with_features(features) }
        }
        #[cfg(not(any(target_arch = "x86_64", target_arch = "aarch64")))]
        KernelSet::scalar()
    }

    fn random_row(rng: &mut ChaCha8Rng, n: usize, mag: f32) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-mag..=mag)).collect()
    }

    fn assert_rel_close(got: f32, want: f64, rel: f64, ctx: &str) {
        let tol = rel * want.abs().max(1.0);
        assert!(
            (got as f64 - want).abs() <= tol,
            "{ctx}: got {got}, want {want}, tol {tol:e}"
        );
    }

    fn oracle_norm(x: &[f32], eps: f32) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps as f64).sqrt();
        x.iter().map(|&v| (v as f64 - mean) * inv).collect()
    }

    fn oracle_rms_norm(x: &[f32], eps: f32) -> Vec<f64> {
        let n = x.len() as f64;
        let ms = x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (ms + eps as f64).sqrt();
        x.iter().map(|&v| v as f64 * inv).collect()
    }

    fn oracle_dot<B: Q8Block>(a: &[B], b: &[B]) -> f64 {
        let mut acc = 0.0f64;
        for (ba, bb) in a.iter().zip(b) {
            let (sa, sb) = (B::scale(ba) as f64, B::scale(bb) as f64);
            for (&qa, &qb) in ba.quants().iter().zip(bb.quants()) {
                acc += (sa * qa as f64) * (sb * qb as f64);
            }
        }
        acc
    }

    fn quantize_vec<B: Q8Block>(x: &[f32]) -> Vec<B> {
        let mut out = Vec::new();
        quantize_row_into(x, &mut out).unwrap();
        out
    }

    const ORACLE_SIZES: [usize; 9] = [1, 5, 31, 32, 33, 100, 257, 1024, 4096];

    #[test]
    fn norm_constant_row_is_zero() {
        for (name, ks) in sets() {
            let x = [5.0f32; 8];
            let mut out = [1.0f32; 8];
            ks.norm_f32(&x, &mut out, NormConfig::default()).unwrap();
            assert_eq!(out, [0.0f32; 8], "{name}");
        }
    }

    #[test]
    fn norm_alternating_row_closed_form() {
        // mean 0, population variance 1: outputs are +-1/sqrt(1 + eps).
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (name, ks) in sets() {
            let x: Vec<f32> = (0..32).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
            let mut out = vec![0.0f32; 32];
            ks.norm_f32(&x, &mut out, NormConfig::default()).unwrap();
            for (i, &o) in out.iter().enumerate() {
                let want = if i % 2 == 0 { expect } else { -expect };
                assert_rel_close(o, want, 1e-6, name);
            }
        }
    }

    #[test]
    fn norm_matches_f64_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for n in ORACLE_SIZES {
            let x = random_row(&mut rng, n, 3.0);
            let want = oracle_norm(&x, 1e-5);
            let absmax = x.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            for (name, ks) in sets() {
                let mut out = vec![0.0f32; n];
                ks.norm_f32(&x, &mut out, NormConfig::default()).unwrap();
                let mut mean = 0.0f64;
                for i in 0..n {
                    assert_rel_close(out[i], want[i], 1e-5, &format!("{name} n={n} i={i}"));
                    mean += out[i] as f64;
                }
                mean /= n as f64;
                assert!(
                    mean.abs() <= 1e-5 * absmax.max(1e-3) as f64,
                    "{name} n={n}: output mean {mean:e}"
                );
            }
        }
    }

    #[test]
    fn rms_norm_zero_row() {
        for (name, ks) in sets() {
            let x = [0.0f32; 32];
            let mut out = [1.0f32; 32];
            ks.rms_norm_f32(&x, &mut out, NormConfig::default()).unwrap();
            assert_eq!(out, [0.0f32; 32], "{name}");
        }
    }

    #[test]
    fn rms_norm_ones_row_closed_form() {
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (name, ks) in sets() {
            let x = [1.0f32; 64];
            let mut out = [0.0f32; 64];
            ks.rms_norm_f32(&x, &mut out, NormConfig::default()).unwrap();
            for &o in &out {
                assert_rel_close(o, expect, 1e-6, name);
            }
        }
    }

    #[test]
    fn rms_norm_matches_f64_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for n in ORACLE_SIZES {
            let x = random_row(&mut rng, n, 3.0);
            let want = oracle_rms_norm(&x, 1e-5);
            for (name, ks) in sets() {
                let mut out = vec![0.0f32; n];
                ks.rms_norm_f32(&x, &mut out, NormConfig::default()).unwrap();
                for i in 0..n {
                    assert_rel_close(out[i], want[i], 1e-5, &format!("{name} n={n} i={i}"));
                }
            }
        }
    }

    #[test]
    fn rms_norm_direction_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = random_row(&mut rng, 256, 1.0);
        let cfg = NormConfig { eps: 1e-12 };
        for (name, ks) in sets() {
            let mut base = vec![0.0f32; 256];
            ks.rms_norm_f32(&x, &mut base, cfg).unwrap();
            for s in [4.0f32, 3.7, 0.25] {
                let xs: Vec<f32> = x.iter().map(|&v| v * s).collect();
                let mut out = vec![0.0f32; 256];
                ks.rms_norm_f32(&xs, &mut out, cfg).unwrap();
                for i in 0..256 {
                    assert_rel_close(out[i], base[i] as f64, 1e-4, &format!("{name} s={s} i={i}"));
                }
            }
        }
    }

    #[test]
    fn norm_rejects_bad_args() {
        let ks = KernelSet::scalar();
        let mut out = [0.0f32; 4];
        assert_eq!(
            ks.norm_f32(&[], &mut [], NormConfig::default()).unwrap_err(),
            Error::EmptyInput
        );
        assert_eq!(
            ks.rms_norm_f32(&[], &mut [], NormConfig::default()).unwrap_err(),
            Error::EmptyInput
        );
        assert_eq!(
            ks.norm_f32(&[1.0; 3], &mut out, NormConfig::default()).unwrap_err(),
            Error::LengthMismatch { expected: 3, got: 4 }
        );
    }

    #[test]
    fn dot_zero_scale_annihilates() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let x = random_row(&mut rng, 128, 2.0);
        let a: Vec<BlockQ8F32S> = quantize_vec(&x);
        let zeros: Vec<BlockQ8F32S> = quantize_vec(&vec![0.0f32; 128]);
        for (name, ks) in sets() {
            assert_eq!(ks.vec_dot_q8(&a, &zeros).unwrap(), 0.0, "{name}");
        }
    }

    #[test]
    fn dot_constant_rows_closed_form() {
        // quantize([1.0; 32], f32 scale) gives scale 1/127 and quants 127;
        // (1/127)^2 * 32 * 127^2 lands on exactly 32.0 in f32.
        let ones = [1.0f32; QK8];
        let a: Vec<BlockQ8F32S> = quantize_vec(&ones);
        for (name, ks) in sets() {
            let got = ks.vec_dot_q8(&a, &a).unwrap();
            assert_eq!(got, 32.0, "{name}");
        }
        // The f16-scale variant picks up scale-storage rounding; it stays
        // within oracle tolerance rather than hitting an exact value.
        let b: Vec<BlockQ8F16S> = quantize_vec(&ones);
        let want = oracle_dot(&b, &b);
        for (name, ks) in sets() {
            assert_rel_close(ks.vec_dot_q8(&b, &b).unwrap(), want, 1e-6, name);
        }
    }

    #[test]
    fn dot_matches_f64_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for n_blocks in [1usize, 2, 3, 7, 32, 128] {
            let n = n_blocks * QK8;
            let xa = random_row(&mut rng, n, 4.0);
            let xb = random_row(&mut rng, n, 4.0);
            let (a16, b16): (Vec<BlockQ8F16S>, Vec<BlockQ8F16S>) =
                (quantize_vec(&xa), quantize_vec(&xb));
            let (a32, b32): (Vec<BlockQ8F32S>, Vec<BlockQ8F32S>) =
                (quantize_vec(&xa), quantize_vec(&xb));
            let want16 = oracle_dot(&a16, &b16);
            let want32 = oracle_dot(&a32, &b32);
            for (name, ks) in sets() {
                let ctx = format!("{name} blocks={n_blocks}");
                assert_rel_close(ks.vec_dot_q8(&a16, &b16).unwrap(), want16, 1e-4, &ctx);
                assert_rel_close(ks.vec_dot_q8(&a32, &b32).unwrap(), want32, 1e-4, &ctx);
            }
        }
    }

    #[test]
    fn dot_rejects_block_count_mismatch() {
        let a: Vec<BlockQ8F32S> = quantize_vec(&[1.0; 64]);
        let b: Vec<BlockQ8F32S> = quantize_vec(&[1.0; 32]);
        let ks = KernelSet::scalar();
        assert_eq!(
            ks.vec_dot_q8(&a, &b).unwrap_err(),
            Error::BlockCountMismatch { lhs: 2, rhs: 1 }
        );
        let mut partials = [0i32; 1];
        assert_eq!(
            ks.vec_dot_partials(&b, &b, &mut []).unwrap_err(),
            Error::LengthMismatch { expected: 1, got: 0 }
        );
        assert!(ks.vec_dot_partials(&b, &b, &mut partials).is_ok());
    }

    /// The vectorized inner products must equal the scalar integer sums
    /// exactly, including at the extreme +-127 patterns.
    #[test]
    fn dot_partials_are_exact_integers() {
        let ks = host_set();
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for case in 0..200 {
            let n_blocks = rng.random_range(1..=8usize);
            let make_quants = |rng: &mut ChaCha8Rng| {
                let mut q = [0i8; QK8];
                for v in &mut q {
                    *v = if case < 4 {
                        // saturation-stress cases: only extremes
                        if rng.random_bool(0.5) { 127 } else { -127 }
                    } else {
                        rng.random_range(-127..=127)
                    };
                }
                q
            };
            let a: Vec<BlockQ8F32S> = (0..n_blocks)
                .map(|_| BlockQ8F32S { scale: 1.0, quants: make_quants(&mut rng) })
                .collect();
            let b: Vec<BlockQ8F32S> = (0..n_blocks)
                .map(|_| BlockQ8F32S { scale: 1.0, quants: make_quants(&mut rng) })
                .collect();
            let mut active = vec![0i32; n_blocks];
            let mut reference = vec![0i32; n_blocks];
            ks.vec_dot_partials(&a, &b, &mut active).unwrap();
            ks.vec_dot_partials_reference(&a, &b, &mut reference).unwrap();
            assert_eq!(active, reference, "case {case}");
            for &p in &active {
                assert!(p.unsigned_abs() <= 32 * 127 * 127);
            }
        }
    }

    #[test]
    fn row_conversions_bit_identical_across_paths() {
        let ks = host_set();
        // Decode: every pattern, including NaNs, infinities, subnormals.
        let all: Vec<F16Bits> = (0..=u16::MAX).map(F16Bits).collect();
        let mut active = vec![0.0f32; all.len()];
        let mut reference = vec![0.0f32; all.len()];
        ks.f16_to_f32_row(&all, &mut active);
        ks.f16_to_f32_row_reference(&all, &mut reference);
        for i in 0..all.len() {
            assert_eq!(
                active[i].to_bits(),
                reference[i].to_bits(),
                "decode pattern {:#06x}",
                all[i].0
            );
        }

        // Encode: random finite values plus specials, at a tail-bearing size.
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let mut src: Vec<f32> = (0..4093)
            .map(|_| f32::from_bits(rng.random::<u32>()))
            .collect();
        src.extend([
            f32::NAN,
            -f32::NAN,
            f32::INFINITY,
            f32::NEG_INFINITY,
            0.0,
            -0.0,
            65504.0,
            65520.0,
            f32::from_bits(1),
            1.0 / 16_777_216.0,
        ]);
        let mut active = vec![F16Bits::ZERO; src.len()];
        let mut reference = vec![F16Bits::ZERO; src.len()];
        ks.f32_to_f16_row(&src, &mut active);
        ks.f32_to_f16_row_reference(&src, &mut reference);
        for i in 0..src.len() {
            assert_eq!(active[i], reference[i], "encode {:e}", src[i]);
        }
    }

    #[test]
    fn matvec_zero_weights_give_zero_output() {
        let w = Q8Matrix::<BlockQ8F32S>::from_rows(4, 64, &vec![0.0; 256]).unwrap();
        let x = vec![1.5f32; 64];
        for (name, ks) in sets() {
            let mut out = vec![9.0f32; 4];
            ks.matvec_q8(&w, &x, &mut out).unwrap();
            assert_eq!(out, [0.0; 4], "{name}");
        }
    }

    #[test]
    fn matvec_constant_row_closed_form() {
        let w = Q8Matrix::<BlockQ8F32S>::from_rows(1, 32, &[1.0; 32]).unwrap();
        let x = [1.0f32; 32];
        for (name, ks) in sets() {
            let mut out = [0.0f32; 1];
            ks.matvec_q8(&w, &x, &mut out).unwrap();
            assert_eq!(out[0], 32.0, "{name}");
        }
    }

    fn oracle_matvec<B: Q8Block>(w: &Q8Matrix<B>, x: &[f32]) -> Vec<f64> {
        let xq: Vec<B> = quantize_vec(x);
        (0..w.rows()).map(|j| oracle_dot(w.row(j), &xq)).collect()
    }

    #[test]
    fn matvec_matches_f64_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let (r, c) = (64, 128);
        let wdata = random_row(&mut rng, r * c, 1.0);
        let x = random_row(&mut rng, c, 1.0);
        let w16 = Q8Matrix::<BlockQ8F16S>::from_rows(r, c, &wdata).unwrap();
        let w32 = Q8Matrix::<BlockQ8F32S>::from_rows(r, c, &wdata).unwrap();
        let want16 = oracle_matvec(&w16, &x);
        let want32 = oracle_matvec(&w32, &x);
        for (name, ks) in sets() {
            let mut out = vec![0.0f32; r];
            ks.matvec_q8(&w16, &x, &mut out).unwrap();
            for j in 0..r {
                assert_rel_close(out[j], want16[j], 1e-3, &format!("{name} f16s row {j}"));
            }
            ks.matvec_q8(&w32, &x, &mut out).unwrap();
            for j in 0..r {
                assert_rel_close(out[j], want32[j], 1e-3, &format!("{name} f32s row {j}"));
            }
        }
    }

    #[test]
    fn matmul_decomposes_into_matvecs_bit_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let (m, r, c) = (8, 64, 128);
        let w = Q8Matrix::<BlockQ8F16S>::from_rows(r, c, &random_row(&mut rng, r * c, 1.0)).unwrap();
        let x = random_row(&mut rng, m * c, 1.0);
        for (name, ks) in sets() {
            let mut out = vec![0.0f32; m * r];
            ks.matmul_q8(&w, &x, m, &mut out).unwrap();
            for i in 0..m {
                let mut row = vec![0.0f32; r];
                ks.matvec_q8(&w, &x[i * c..(i + 1) * c], &mut row).unwrap();
                assert_eq!(
                    out[i * r..(i + 1) * r]
                        .iter()
                        .map(|v| v.to_bits())
                        .collect::<Vec<_>>(),
                    row.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    "{name} row {i}"
                );
            }
            // Duplicated input rows produce identical output rows.
            let dup: Vec<f32> = x[..c].iter().cycle().take(3 * c).copied().collect();
            let mut out3 = vec![0.0f32; 3 * r];
            ks.matmul_q8(&w, &dup, 3, &mut out3).unwrap();
            assert_eq!(out3[..r], out3[r..2 * r]);
            assert_eq!(out3[..r], out3[2 * r..]);
        }
    }

    #[test]
    fn matvec_rejects_bad_shapes() {
        let w = Q8Matrix::<BlockQ8F32S>::from_rows(4, 64, &vec![0.0; 256]).unwrap();
        let ks = KernelSet::scalar();
        let mut out = vec![0.0f32; 4];
        assert_eq!(
            ks.matvec_q8(&w, &[0.0; 63], &mut out).unwrap_err(),
            Error::DimensionMismatch { expected: 64, got: 63 }
        );
        assert_eq!(
            ks.matvec_q8(&w, &[0.0; 64], &mut out[..3]).unwrap_err(),
            Error::DimensionMismatch { expected: 4, got: 3 }
        );
        assert_eq!(
            ks.matmul_q8(&w, &[0.0; 64], 2, &mut out).unwrap_err(),
            Error::LengthMismatch { expected: 128, got: 64 }
        );
    }

    #[test]
    fn dispatch_bindings_are_consistent() {
        let scalar = KernelSet::scalar();
        assert!(scalar.bindings().iter().all(|&(_, f)| f == Feature::Scalar));
        assert_eq!(scalar.summary_tag(), "scalar");

        let none = unsafe { KernelSet::with_features(CpuFeatures::none()) };
        assert!(none.bindings().iter().all(|&(_, f)| f == Feature::Scalar));

        let host = host_set();
        let again = host_set();
        for (a, b) in host.bindings().iter().zip(again.bindings()) {
            assert_eq!(*a, b);
        }
        #[cfg(target_arch = "x86_64")]
        if host.features().avx2 {
            assert!(host
                .bindings()
                .iter()
                .any(|&(name, f)| name == "vec_dot_q8_f32s" && f == Feature::Avx2));
        }
    }

    proptest! {
        /// Differential: active vs reference on random quantized rows, plus
        /// exact agreement of the integer partials.
        #[test]
        fn differential_dot_on_random_rows(seed in any::<u64>(), n_blocks in 1usize..24) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = n_blocks * QK8;
            let xa: Vec<f32> = (0..n).map(|_| rng.random_range(-8.0f32..8.0)).collect();
            let xb: Vec<f32> = (0..n).map(|_| rng.random_range(-8.0f32..8.0)).collect();
            let a: Vec<BlockQ8F16S> = quantize_vec(&xa);
            let b: Vec<BlockQ8F16S> = quantize_vec(&xb);
            let ks = host_set();
            let active = ks.vec_dot_q8(&a, &b).unwrap() as f64;
            let reference = ks.vec_dot_q8_reference(&a, &b).unwrap() as f64;
            prop_assert!((active - reference).abs() <= 1e-4 * reference.abs().max(1.0));
            let mut pa = vec![0i32; n_blocks];
            let mut pr = vec![0i32; n_blocks];
            ks.vec_dot_partials(&a, &b, &mut pa).unwrap();
            ks.vec_dot_partials_reference(&a, &b, &mut pr).unwrap();
            prop_assert_eq!(pa, pr);
        }

        #[test]
        fn differential_norms_on_random_rows(seed in any::<u64>(), n in 1usize..512) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f32> = (0..n).map(|_| rng.random_range(-5.0f32..5.0)).collect();
            let ks = host_set();
            let cfg = NormConfig::default();
            let mut a = vec![0.0f32; n];
            let mut r = vec![0.0f32; n];
            ks.norm_f32(&x, &mut a, cfg).unwrap();
            ks.norm_f32_reference(&x, &mut r, cfg).unwrap();
            for i in 0..n {
                prop_assert!(
                    (a[i] as f64 - r[i] as f64).abs() <= 1e-5 * (r[i] as f64).abs().max(1.0)
                );
            }
            ks.rms_norm_f32(&x, &mut a, cfg).unwrap();
            ks.rms_norm_f32_reference(&x, &mut r, cfg).unwrap();
            for i in 0..n {
                prop_assert!(
                    (a[i] as f64 - r[i] as f64).abs() <= 1e-5 * (r[i] as f64).abs().max(1.0)
                );
            }
        }

        /// Arbitrary block contents (any in-range quants, any finite scale
        /// the quantizer could produce) keep active and reference in exact
        /// integer agreement.
        #[test]
        fn differential_partials_on_arbitrary_blocks(
            seed in any::<u64>(),
            scale_exp in -10i32..10,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scale = 2f32.powi(scale_exp);
            let mut make = || {
                let mut q = [0i8; QK8];
                for v in &mut q { *v = rng.random_range(-127..=127); }
                q
            };
            let a = [
                BlockQ8F16S { scale: f16::encode(scale), quants: make() },
                BlockQ8F16S { scale: f16::encode(0.0), quants: make() },
            ];
            let b = [
                BlockQ8F16S { scale: f16::encode(scale), quants: make() },
                BlockQ8F16S { scale: f16::encode(3.0), quants: make() },
            ];
            let ks = host_set();
            let mut pa = [0i32; 2];
            let mut pr = [0i32; 2];
            ks.vec_dot_partials(&a, &b, &mut pa).unwrap();
            ks.vec_dot_partials_reference(&a, &b, &mut pr).unwrap();
            prop_assert_eq!(pa, pr);
            let d = ks.vec_dot_q8(&a, &b).unwrap() as f64;
            let dr = ks.vec_dot_q8_reference(&a, &b).unwrap() as f64;
            prop_assert!((d - dr).abs() <= 1e-4 * dr.abs().max(1.0));
        }
    }
}
