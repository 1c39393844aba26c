//! Group-of-32 int8 block quantization with selectable scale storage.
//!
//! Every group of 32 values shares one absmax-derived scale `d = absmax/127`.
//! The scale persists either as binary16 (34-byte blocks) or binary32
//! (36-byte blocks, +5.88% over the f16 form, no conversion cost on use).
//! Quants are computed against the scale *as stored*, so the round-trip error
//! bound is relative to what a reader of the block will actually see.

use alloc::vec::Vec;

use crate::error::Error;
use crate::f16::{self, F16Bits};

/// Elements per quantization group.
pub const QK8: usize = 32;

/// How a block's scale is persisted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScaleFormat {
    /// binary16 scale: smaller blocks, a decode on every use.
    F16S,
    /// binary32 scale: larger blocks, the scale is used as-is.
    F32S,
}

/// Element format of a stored tensor payload.
///
/// Wire codes are part of the container format: 0=F32, 1=F16, 2=Q8_F16S,
/// 3=Q8_F32S.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ElemFormat {
    F32,
    F16,
    Q8F16S,
    Q8F32S,
}

impl ElemFormat {
    pub fn wire_code(self) -> u32 {
        match self {
            ElemFormat::F32 => 0,
            ElemFormat::F16 => 1,
            ElemFormat::Q8F16S => 2,
            ElemFormat::Q8F32S => 3,
        }
    }

    pub fn from_wire_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(ElemFormat::F32),
            1 => Some(ElemFormat::F16),
            2 => Some(ElemFormat::Q8F16S),
            3 => Some(ElemFormat::Q8F32S),
            _ => None,
        }
    }

    pub fn is_quantized(self) -> bool {
        matches!(self, ElemFormat::Q8F16S | ElemFormat::Q8F32S)
    }

    pub fn name(self) -> &'static str {
        match self {
            ElemFormat::F32 => "f32",
            ElemFormat::F16 => "f16",
            ElemFormat::Q8F16S => "q8_f16s",
            ElemFormat::Q8F32S => "q8_f32s",
        }
    }
}

/// Payload size of `n` elements stored in `format`.
///
/// Q8 formats require `n` divisible by 32 (the format has no partial-group
/// encoding).
pub fn container_bytes(n: usize, format: ElemFormat) -> Result<usize, Error> {
    match format {
        ElemFormat::F32 => Ok(4 * n),
        ElemFormat::F16 => Ok(2 * n),
        ElemFormat::Q8F16S | ElemFormat::Q8F32S => {
            if n % QK8 != 0 {
                return Err(Error::BadRowLength { len: n });
            }
            let per_block = if format == ElemFormat::Q8F16S {
                BlockQ8F16S::BYTES
            } else {
                BlockQ8F32S::BYTES
            };
            Ok(n / QK8 * per_block)
        }
    }
}

/// Q8 block with a binary16 scale: 2 + 32 = 34 bytes on the wire.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockQ8F16S {
    pub scale: F16Bits,
    pub quants: [i8; QK8],
}

/// Q8 block with a binary32 scale: 4 + 32 = 36 bytes on the wire.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockQ8F32S {
    pub scale: f32,
    pub quants: [i8; QK8],
}

/// Shared behavior of the two block layouts.
///
/// `assemble` persists a raw scale in the block's storage format;
/// `persist_scale` reports the value that storage would hand back, which is
/// what the quantizer divides by. For the f32 form the two are the identity.
pub trait Q8Block:
    Copy + Clone + PartialEq + core::fmt::Debug + Send + Sync + 'static
{
    /// Wire size in bytes: scale storage + 32 quants.
    const BYTES: usize;
    const FORMAT: ScaleFormat;
    const ELEM: ElemFormat;

    fn assemble(scale: f32, quants: [i8; QK8]) -> Self;
    /// The stored scale as seen by a reader (decoded for the f16 form).
    fn scale(&self) -> f32;
    fn quants(&self) -> &[i8; QK8];
    /// Round-trips a raw scale through the storage format.
    fn persist_scale(scale: f32) -> f32;
    /// Serializes into exactly `BYTES` bytes, little-endian scale first.
    fn write_wire(&self, out: &mut [u8]);
    /// Deserializes from exactly `BYTES` bytes.
    fn read_wire(bytes: &[u8]) -> Self;
}

/// Encodes a scale to binary16, saturating to the largest finite value. An
/// infinite stored scale would poison every product that touches the block.
fn f16_scale_bits(scale: f32) -> F16Bits {
    let b = f16::encode(scale);
    if b.0 & 0x7FFF >= 0x7C00 {
        F16Bits(0x7BFF | (b.0 & 0x8000))
    } else {
        b
    }
}

impl Q8Block for BlockQ8F16S {
    const BYTES: usize = 2 + QK8;
    const FORMAT: ScaleFormat = ScaleFormat::F16S;
    const ELEM: ElemFormat = ElemFormat::Q8F16S;

    fn assemble(scale: f32, quants: [i8; QK8]) -> Self {
        Self {
            scale: f16_scale_bits(scale),
            quants,
        }
    }

    fn scale(&self) -> f32 {
        f16::decode(self.scale)
    }

    fn quants(&self) -> &[i8; QK8] {
        &self.quants
    }

    fn persist_scale(scale: f32) -> f32 {
        f16::decode(f16_scale_bits(scale))
    }

    fn write_wire(&self, out: &mut [u8]) {
        assert_eq!(out.len(), Self::BYTES);
        out[..2].copy_from_slice(&self.scale.0.to_le_bytes());
        for (o, &q) in out[2..].iter_mut().zip(&self.quants) {
            *o = q as u8;
        }
    }

    fn read_wire(bytes: &[u8]) -> Self {
        assert_eq!(bytes.len(), Self::BYTES);
        let scale = F16Bits(u16::from_le_bytes([bytes[0], bytes[1]]));
        let mut quants = [0i8; QK8];
        for (q, &b) in quants.iter_mut().zip(&bytes[2..]) {
            *q = b as i8;
        }
        Self { scale, quants }
    }
}

impl Q8Block for BlockQ8F32S {
    const BYTES: usize = 4 + QK8;
    const FORMAT: ScaleFormat = ScaleFormat::F32S;
    const ELEM: ElemFormat = ElemFormat::Q8F32S;

    fn assemble(scale: f32, quants: [i8; QK8]) -> Self {
        Self { scale, quants }
    }

    fn scale(&self) -> f32 {
        self.scale
    }

    fn quants(&self) -> &[i8; QK8] {
        &self.quants
    }

    fn persist_scale(scale: f32) -> f32 {
        scale
    }

    fn write_wire(&self, out: &mut [u8]) {
        assert_eq!(out.len(), Self::BYTES);
        out[..4].copy_from_slice(&self.scale.to_le_bytes());
        for (o, &q) in out[4..].iter_mut().zip(&self.quants) {
            *o = q as u8;
        }
    }

    fn read_wire(bytes: &[u8]) -> Self {
        assert_eq!(bytes.len(), Self::BYTES);
        let scale = f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
        let mut quants = [0i8; QK8];
        for (q, &b) in quants.iter_mut().zip(&bytes[4..]) {
            *q = b as i8;
        }
        Self { scale, quants }
    }
}

/// Quantizes one group of exactly 32 finite values.
///
/// The scale is `absmax / 127` (0 for an all-zero group) persisted in the
/// block's storage format; quants are `x / stored_scale` rounded to nearest
/// even and clamped to [-127, 127], so -128 is never emitted and a tie at
/// exactly +-127.5 stays inside the symmetric range.
pub fn quantize_block<B: Q8Block>(x: &[f32]) -> Result<B, Error> {
    if x.len() != QK8 {
        return Err(Error::LengthMismatch {
            expected: QK8,
            got: x.len(),
        });
    }
    let mut absmax = 0.0f32;
    for (i, &v) in x.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteInput { index: i });
        }
        absmax = absmax.max(v.abs());
    }
    let mut quants = [0i8; QK8];
    if absmax == 0.0 {
        return Ok(B::assemble(0.0, quants));
    }
    let d = absmax / 127.0;
    let s = B::persist_scale(d);
    if s > 0.0 {
        let inv = 1.0 / s;
        for (q, &v) in quants.iter_mut().zip(x) {
            let r = libm::rintf(v * inv);
            *q = if r >= 127.0 {
                127
            } else if r <= -127.0 {
                -127
            } else {
                r as i8
            };
        }
    }
    // A scale that flushes to zero in storage (absmax below ~4.8e-7 in the
    // f16 form) leaves the quants zero: the block dequantizes to zeros rather
    // than to scale-zero garbage.
    Ok(B::assemble(d, quants))
}

/// Reconstructs the 32 values of a block: `out[i] = stored_scale * q[i]`.
///
/// The f32-scale form performs no binary16 conversion anywhere in this path.
pub fn dequantize_block<B: Q8Block>(block: &B, out: &mut [f32]) {
    assert_eq!(out.len(), QK8, "block output length");
    let s = B::scale(block);
    for (o, &q) in out.iter_mut().zip(block.quants()) {
        *o = s * q as f32;
    }
}

/// Quantization quality of a row, accumulated in f64 against the input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantStats {
    pub max_abs_err: f32,
    pub rmse: f32,
    pub n_elements: usize,
}

/// Quantizes a row of `n` values into `n/32` blocks, appending to `out`.
///
/// `n` must be positive and divisible by 32; the caller pads if its data is
/// ragged. This is the stats-free path used on hot activation buffers.
pub fn quantize_row_into<B: Q8Block>(x: &[f32], out: &mut Vec<B>) -> Result<(), Error> {
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    if x.len() % QK8 != 0 {
        return Err(Error::BadRowLength { len: x.len() });
    }
    out.reserve(x.len() / QK8);
    for chunk in x.chunks_exact(QK8) {
        out.push(quantize_block(chunk)?);
    }
    Ok(())
}

/// Quantizes a row and reports its reconstruction quality.
pub fn quantize_row<B: Q8Block>(x: &[f32]) -> Result<(Vec<B>, QuantStats), Error> {
    let mut blocks = Vec::new();
    quantize_row_into(x, &mut blocks)?;
    let mut max_abs_err = 0.0f64;
    let mut sum_sq = 0.0f64;
    let mut buf = [0.0f32; QK8];
    for (block, chunk) in blocks.iter().zip(x.chunks_exact(QK8)) {
        dequantize_block(block, &mut buf);
        for (&v, &r) in chunk.iter().zip(&buf) {
            let err = (v as f64 - r as f64).abs();
            max_abs_err = max_abs_err.max(err);
            sum_sq += err * err;
        }
    }
    let stats = QuantStats {
        max_abs_err: max_abs_err as f32,
        rmse: libm::sqrt(sum_sq / x.len() as f64) as f32,
        n_elements: x.len(),
    };
    Ok((blocks, stats))
}

/// Reconstructs a whole row from its blocks. `out` must hold 32 values per
/// block.
pub fn dequantize_row<B: Q8Block>(blocks: &[B], out: &mut [f32]) {
    assert_eq!(out.len(), blocks.len() * QK8, "row output length");
    for (block, chunk) in blocks.iter().zip(out.chunks_exact_mut(QK8)) {
        dequantize_block(block, chunk);
    }
}

/// Serializes blocks in wire layout, appending to `out`.
pub fn write_blocks<B: Q8Block>(blocks: &[B], out: &mut Vec<u8>) {
    let start = out.len();
    out.resize(start + blocks.len() * B::BYTES, 0);
    for (block, chunk) in blocks.iter().zip(out[start..].chunks_exact_mut(B::BYTES)) {
        block.write_wire(chunk);
    }
}

/// Deserializes a whole-number-of-blocks wire payload.
pub fn read_blocks<B: Q8Block>(bytes: &[u8]) -> Result<Vec<B>, Error> {
    if bytes.len() % B::BYTES != 0 {
        return Err(Error::LengthMismatch {
            expected: bytes.len().next_multiple_of(B::BYTES),
            got: bytes.len(),
        });
    }
    Ok(bytes.chunks_exact(B::BYTES).map(B::read_wire).collect())
}

/// Row-major quantized matrix: `rows` rows of `cols` elements, each row
/// stored as `cols/32` consecutive blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Q8Matrix<B> {
    rows: usize,
    cols: usize,
    blocks: Vec<B>,
}

impl<B: Q8Block> Q8Matrix<B> {
    /// Quantizes a dense row-major `rows x cols` matrix. `cols` must be a
    /// positive multiple of 32 and `data` must hold exactly `rows * cols`
    /// finite values.
    pub fn from_rows(rows: usize, cols: usize, data: &[f32]) -> Result<Self, Error> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyInput);
        }
        if cols % QK8 != 0 {
            return Err(Error::BadRowLength { len: cols });
        }
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        let mut blocks = Vec::with_capacity(rows * cols / QK8);
        for row in data.chunks_exact(cols) {
            quantize_row_into(row, &mut blocks)?;
        }
        Ok(Self { rows, cols, blocks })
    }

    /// Builds a matrix from pre-quantized blocks, row-major.
    pub fn from_blocks(rows: usize, cols: usize, blocks: Vec<B>) -> Result<Self, Error> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyInput);
        }
        if cols % QK8 != 0 {
            return Err(Error::BadRowLength { len: cols });
        }
        if blocks.len() != rows * cols / QK8 {
            return Err(Error::LengthMismatch {
                expected: rows * cols / QK8,
                got: blocks.len(),
            });
        }
        Ok(Self { rows, cols, blocks })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn blocks_per_row(&self) -> usize {
        self.cols / QK8
    }

    /// The blocks of row `r`.
    pub fn row(&self, r: usize) -> &[B] {
        let per = self.blocks_per_row();
        &self.blocks[r * per..(r + 1) * per]
    }

    pub fn blocks(&self) -> &[B] {
        &self.blocks
    }

    /// Wire payload size of the whole matrix.
    pub fn wire_bytes(&self) -> usize {
        self.blocks.len() * B::BYTES
    }
}
