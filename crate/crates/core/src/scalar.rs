//! Floating-point element types the refactoring pipeline accepts.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

/// Element type tag stored in stream headers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    /// Relative rounding error when a working-precision (f64) value is
    /// narrowed to this type.
    pub fn output_roundoff(self) -> f64 {
        match self {
            DType::F32 => f32::EPSILON as f64 * 0.5,
            DType::F64 => 0.0,
        }
    }
}

impl std::str::FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" | "float32" => Ok(DType::F32),
            "f64" | "float64" => Ok(DType::F64),
            other => Err(format!("unknown dtype '{other}' (expected f32 or f64)")),
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

/// Scalar element type: `f32` or `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + 'static
{
    const DTYPE: DType;
    /// Significand precision including the implicit bit.
    const MANTISSA_DIGITS: u32;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn to_f64_exact(self) -> f64 {
        self.to_f64().expect("float to f64")
    }

    #[inline]
    fn from_f64_round(v: f64) -> Self {
        Self::from_f64(v).expect("f64 to float")
    }
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;
    const MANTISSA_DIGITS: u32 = f32::MANTISSA_DIGITS;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;
    const MANTISSA_DIGITS: u32 = f64::MANTISSA_DIGITS;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// `x * 2^exp` without intermediate overflow of the scale factor.
pub fn ldexp<T: Real>(mut x: T, mut exp: i32) -> T {
    let two = T::one() + T::one();
    let step = 60;
    while exp > step {
        x = x * two.powi(step);
        exp -= step;
    }
    while exp < -step {
        x = x * two.powi(-step);
        exp += step;
    }
    x * two.powi(exp)
}

/// Exact `2^exp` as f64 (saturating to 0 / inf outside the range).
pub fn pow2(exp: i32) -> f64 {
    ldexp(1.0f64, exp)
}

/// Decode a raw little-endian buffer into values.
pub fn values_from_le_bytes<T: Real>(bytes: &[u8]) -> Vec<T> {
    bytes
        .chunks_exact(T::DTYPE.size())
        .map(T::read_le)
        .collect()
}

pub fn values_to_le_bytes<T: Real>(values: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * T::DTYPE.size());
    for &v in values {
        v.write_le(&mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ldexp_large_shifts() {
        assert_eq!(ldexp(1.0f64, 1000), 2f64.powi(1000));
        assert_eq!(ldexp(3.0f64, -1070), 3.0 * 2f64.powi(-1070));
        assert_eq!(ldexp(1.5f32, -3), 0.1875);
    }

    #[test]
    fn le_roundtrip() {
        let v = vec![1.5f32, -0.0, f32::MAX];
        assert_eq!(values_from_le_bytes::<f32>(&values_to_le_bytes(&v)), v);
    }
}
