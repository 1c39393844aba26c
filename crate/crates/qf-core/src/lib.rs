//! Compute core for block-quantized int8 inference kernels.
//!
//! This crate holds the allocation-light algorithmic core:
//!
//! - [`f16`]: a bit-exact IEEE 754 binary16 codec and bulk row conversions,
//! - [`quant`]: group-of-32 int8 quantization with the per-group scale stored
//!   either as binary16 (34 bytes/block) or binary32 (36 bytes/block),
//! - [`kernels`]: layer norm, RMS norm, and quantized dot/matvec/matmul
//!   operators, each with a scalar reference and a vectorized implementation
//!   behind a per-process dispatch table ([`kernels::KernelSet`]).
//!
//! The crate is `no_std` (with `alloc`). Everything that needs an OS — CPU
//! feature probing, environment overrides, threads, files, timers — lives in
//! the companion `qf` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod error;
pub mod f16;
pub mod kernels;
pub mod quant;

pub use error::Error;
