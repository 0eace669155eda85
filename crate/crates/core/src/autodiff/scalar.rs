//! Element types the tape can compute with: f32 for training, f64 for
//! gradient checks.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign, SubAssign};

/// Floating-point width tag, recorded in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Numeric element of a tensor buffer.
pub trait Scalar:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    /// Smallest value the loss clamps to before a log. 1e-12 where
    /// representable; widened in f32 where 1 - 1e-12 rounds to 1.
    const LOG_CLAMP: Self;

    /// How far a probability vector's sum may drift from 1 before it is
    /// rejected as non-normalized.
    const NORM_TOL: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    fn write_le(buf: &mut Vec<u8>, x: Self);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const LOG_CLAMP: f32 = 1e-6;
    const NORM_TOL: f32 = 1e-4;

    fn from_f64(x: f64) -> f32 {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn write_le(buf: &mut Vec<u8>, x: f32) {
        buf.extend_from_slice(&x.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const LOG_CLAMP: f64 = 1e-12;
    const NORM_TOL: f64 = 1e-6;

    fn from_f64(x: f64) -> f64 {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn write_le(buf: &mut Vec<u8>, x: f64) {
        buf.extend_from_slice(&x.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}
