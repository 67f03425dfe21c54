//! Storage dtypes and their little-endian element codecs.
//!
//! Every value in the toolkit is worked on as `f64`. Narrowing to a storage
//! dtype rounds to nearest, ties to even. NaN payloads are carried through the
//! widen/narrow pair so that a tensor read and written back is bit-identical.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DType {
    F64,
    F32,
    F16,
    BF16,
}

impl DType {
    pub const ALL: [DType; 4] = [DType::F64, DType::F32, DType::F16, DType::BF16];

    pub fn byte_width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F64 => "F64",
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
        }
    }

    /// Largest finite magnitude.
    pub fn max_finite(self) -> f64 {
        match self {
            DType::F64 => f64::MAX,
            DType::F32 => f32::MAX as f64,
            DType::F16 => 65504.0,
            DType::BF16 => f32::from_bits(0x7F7F_0000) as f64,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "F64" => Ok(DType::F64),
            "F32" => Ok(DType::F32),
            "F16" => Ok(DType::F16),
            "BF16" => Ok(DType::BF16),
            other => Err(other.to_string()),
        }
    }
}

/// Binary layout of a narrow IEEE-style float.
#[derive(Clone, Copy)]
struct Format {
    mant_bits: u32,
    exp_bits: u32,
}

const F16_FMT: Format = Format {
    mant_bits: 10,
    exp_bits: 5,
};
const BF16_FMT: Format = Format {
    mant_bits: 7,
    exp_bits: 8,
};
const F32_FMT: Format = Format {
    mant_bits: 23,
    exp_bits: 8,
};

impl Format {
    fn bias(self) -> i32 {
        (1 << (self.exp_bits - 1)) - 1
    }

    fn exp_max(self) -> u64 {
        (1 << self.exp_bits) - 1
    }

    fn widen(self, bits: u64) -> f64 {
        let total = self.mant_bits + self.exp_bits;
        let sign = (bits >> total) & 1;
        let exp = (bits >> self.mant_bits) & self.exp_max();
        let mant = bits & ((1 << self.mant_bits) - 1);
        let signed = |v: f64| if sign == 1 { -v } else { v };
        if exp == self.exp_max() {
            if mant == 0 {
                return signed(f64::INFINITY);
            }
            let payload = mant << (52 - self.mant_bits);
            return f64::from_bits((sign << 63) | (0x7FF << 52) | payload);
        }
        let scale = |e: i32| 2f64.powi(e);
        if exp == 0 {
            // subnormal: mant * 2^(1 - bias - mant_bits)
            signed(mant as f64 * scale(1 - self.bias() - self.mant_bits as i32))
        } else {
            let m = (mant | (1 << self.mant_bits)) as f64;
            signed(m * scale(exp as i32 - self.bias() - self.mant_bits as i32))
        }
    }

    /// Round-to-nearest-even narrowing. Returns `None` when a finite input
    /// rounds past the largest finite value.
    fn narrow(self, x: f64) -> Option<u64> {
        let total = self.mant_bits + self.exp_bits;
        let bits = x.to_bits();
        let sign = bits >> 63;
        let sign_bit = sign << total;
        if x.is_nan() {
            let mut payload = (bits & ((1 << 52) - 1)) >> (52 - self.mant_bits);
            if payload == 0 {
                payload = 1 << (self.mant_bits - 1);
            }
            return Some(sign_bit | (self.exp_max() << self.mant_bits) | payload);
        }
        if x.is_infinite() {
            return Some(sign_bit | (self.exp_max() << self.mant_bits));
        }
        let abs = x.abs();
        if abs == 0.0 {
            return Some(sign_bit);
        }
        let min_normal_exp = 1 - self.bias();
        let f64_exp = ((bits >> 52) & 0x7FF) as i32;
        // floor(log2(abs)); f64 subnormals are far below every narrow range
        let e = if f64_exp == 0 { -1075 } else { f64_exp - 1023 };
        if e < min_normal_exp {
            let q = abs * 2f64.powi(self.mant_bits as i32 - min_normal_exp);
            let m = q.round_ties_even() as u64;
            // m == 2^mant_bits lands exactly on the smallest normal encoding
            return Some(sign_bit | m);
        }
        let mut e = e;
        let mut m = (abs * 2f64.powi(self.mant_bits as i32 - e)).round_ties_even() as u64;
        if m == 1 << (self.mant_bits + 1) {
            m >>= 1;
            e += 1;
        }
        let biased = (e + self.bias()) as u64;
        if biased >= self.exp_max() {
            return None;
        }
        Some(sign_bit | (biased << self.mant_bits) | (m & ((1 << self.mant_bits) - 1)))
    }

    fn max_bits(self) -> u64 {
        ((self.exp_max() - 1) << self.mant_bits) | ((1 << self.mant_bits) - 1)
    }
}

pub fn f16_bits_to_f64(bits: u16) -> f64 {
    F16_FMT.widen(bits as u64)
}

pub fn bf16_bits_to_f64(bits: u16) -> f64 {
    BF16_FMT.widen(bits as u64)
}

fn f32_bits_to_f64(bits: u32) -> f64 {
    F32_FMT.widen(bits as u64)
}

/// Narrow to F16 bits, `None` on overflow.
pub fn f64_to_f16_bits(x: f64) -> Option<u16> {
    F16_FMT.narrow(x).map(|b| b as u16)
}

/// Narrow to BF16 bits, `None` on overflow.
pub fn f64_to_bf16_bits(x: f64) -> Option<u16> {
    BF16_FMT.narrow(x).map(|b| b as u16)
}

fn f64_to_f32_bits(x: f64) -> Option<u32> {
    F32_FMT.narrow(x).map(|b| b as u32)
}

/// Decode a little-endian payload into widened values.
pub fn decode(dtype: DType, bytes: &[u8]) -> Vec<f64> {
    match dtype {
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32_bits_to_f64(u32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        DType::F16 => bytes
            .chunks_exact(2)
            .map(|c| f16_bits_to_f64(u16::from_le_bytes([c[0], c[1]])))
            .collect(),
        DType::BF16 => bytes
            .chunks_exact(2)
            .map(|c| bf16_bits_to_f64(u16::from_le_bytes([c[0], c[1]])))
            .collect(),
    }
}

/// Encode values into the little-endian payload for `dtype`.
///
/// With `saturate`, finite values that would round to infinity are clamped
/// to the largest finite value of the target dtype instead of failing.
pub fn encode(dtype: DType, values: &[f64], saturate: bool, name: &str) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(values.len() * dtype.byte_width());
    let overflow = |v: f64| Error::Overflow {
        name: name.to_string(),
        dtype: dtype.as_str(),
        value: v,
    };
    match dtype {
        DType::F64 => {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        DType::F32 => {
            for &v in values {
                let bits = match f64_to_f32_bits(v) {
                    Some(b) => b,
                    None if saturate => saturated(F32_FMT, v) as u32,
                    None => return Err(overflow(v)),
                };
                out.extend_from_slice(&bits.to_le_bytes());
            }
        }
        DType::F16 | DType::BF16 => {
            let fmt = if dtype == DType::F16 { F16_FMT } else { BF16_FMT };
            for &v in values {
                let bits = match fmt.narrow(v) {
                    Some(b) => b as u16,
                    None if saturate => saturated(fmt, v) as u16,
                    None => return Err(overflow(v)),
                };
                out.extend_from_slice(&bits.to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn saturated(fmt: Format, v: f64) -> u64 {
    let sign = if v.is_sign_negative() { 1u64 } else { 0 };
    (sign << (fmt.mant_bits + fmt.exp_bits)) | fmt.max_bits()
}

/// Round `v` to the nearest value representable in `dtype`.
pub fn quantize(dtype: DType, v: f64) -> Option<f64> {
    match dtype {
        DType::F64 => Some(v),
        DType::F32 => f64_to_f32_bits(v).map(f32_bits_to_f64),
        DType::F16 => F16_FMT.narrow(v).map(|b| F16_FMT.widen(b)),
        DType::BF16 => BF16_FMT.narrow(v).map(|b| BF16_FMT.widen(b)),
    }
}
