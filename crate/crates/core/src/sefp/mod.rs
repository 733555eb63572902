//! Shared Exponent Floating Point codec.
//!
//! A group of `group_size` parameters shares the exponent of its largest
//! member; every element's mantissa is right-shifted to that exponent and
//! then cut to `m` bits. Lower precisions are obtained from a stored tensor
//! by dropping mantissa bits, no re-quantization needed.

mod codec;
mod config;

use thiserror::Error;

pub use codec::{
    dequantize, quantization_error_grad, quantization_error_grad_with, quantize,
    quantize_with_shape, truncate_precision, SefpTensor, DEFAULT_GROUP_SIZE,
};
pub use config::{BitWidthConfig, BitWidthSet, RoundingMode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("invalid bit-width E{exponent_bits}M{mantissa_bits} (need 1<=e<=8, 1<=m<=11)")]
    InvalidConfig { exponent_bits: u8, mantissa_bits: u8 },
    #[error("cannot parse bit-width label {0:?}")]
    BadLabel(String),
    #[error("bit-width set is empty")]
    EmptyWidthSet,
    #[error("duplicate bit-width {0}")]
    DuplicateWidth(String),
    #[error("exponent width mismatch: expected {expected} bits, found {found}")]
    ExponentBitsMismatch { expected: u8, found: u8 },
    #[error("group size must be at least 1")]
    ZeroGroupSize,
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("value at index {index} has exponent {exponent}, above the representable maximum {max}")]
    ExponentOverflow { index: usize, exponent: i32, max: i32 },
    #[error("cannot widen {from} to {to}: mantissa bits are only ever dropped")]
    Widening { from: String, to: String },
    #[error("malformed SEFP tensor: {0}")]
    Malformed(String),
}
