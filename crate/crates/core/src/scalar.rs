//! Floating-point element types.
//!
//! All model math is written against [`Scalar`], implemented for `f32` and
//! `f64`. Training and gradient checks run in `f64`; the inference path may
//! use `f32`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

/// Wire/checkpoint element type code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const DTYPE: DType;

    /// Converts an `f64` literal. Lossy for `f32`.
    fn lit(v: f64) -> Self;

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one element from exactly `DTYPE.size()` bytes.
    fn read_le(bytes: &[u8]) -> Self;

    fn as_f64(self) -> f64;
}

/// Decodes little-endian elements stored as `dtype` into `T`, converting
/// between widths when they differ. `bytes.len()` must be a multiple of the
/// element size.
pub fn decode_elems<T: Scalar>(dtype: DType, bytes: &[u8]) -> Vec<T> {
    let size = dtype.size();
    match dtype {
        DType::F32 => bytes.chunks_exact(size).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
        DType::F64 => bytes.chunks_exact(size).map(|c| T::lit(f64::read_le(c))).collect(),
    }
}

pub fn encode_elems<T: Scalar>(data: &[T], out: &mut Vec<u8>) {
    out.reserve(data.len() * T::DTYPE.size());
    for &x in data {
        x.write_le(out);
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte element"))
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte element"))
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
