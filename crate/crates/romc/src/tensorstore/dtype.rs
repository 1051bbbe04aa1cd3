//! Element types stored in weight archives and their f32 conversions.
//!
//! Archives may hold f16 or bf16 payloads (checkpoints usually do); all
//! in-memory math runs on f32, so loads widen and saves narrow. Widening is
//! value-exact for every representable input; narrowing rounds to nearest,
//! ties to even.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dtype {
    F32,
    F16,
    BF16,
}

impl Dtype {
    pub const fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }

    /// Archive header spelling.
    pub const fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "F32" => Ok(Dtype::F32),
            "F16" => Ok(Dtype::F16),
            "BF16" => Ok(Dtype::BF16),
            other => Err(Error::Format(format!("unsupported dtype {other:?}"))),
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub fn f16_to_f32(bits: u16) -> f32 {
    let sign = (bits as u32 >> 15) << 31;
    let exp = (bits >> 10) & 0x1F;
    let man = (bits & 0x3FF) as u32;
    let out = if exp == 0 {
        if man == 0 {
            sign
        } else {
            // subnormal: renormalize into an f32 normal
            let mut e: u32 = 113;
            let mut m = man;
            while m & 0x400 == 0 {
                m <<= 1;
                e -= 1;
            }
            sign | (e << 23) | ((m & 0x3FF) << 13)
        }
    } else if exp == 0x1F {
        if man == 0 {
            sign | 0x7F80_0000
        } else {
            // NaN: quietize, keep the payload
            sign | 0x7FC0_0000 | (man << 13)
        }
    } else {
        sign | ((exp as u32 + 112) << 23) | (man << 13)
    };
    f32::from_bits(out)
}

pub fn f32_to_f16(x: f32) -> u16 {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xFF) as i32;
    let man = bits & 0x7F_FFFF;

    if exp == 0xFF {
        return if man == 0 {
            sign | 0x7C00
        } else {
            sign | 0x7C00 | 0x200 | (man >> 13) as u16
        };
    }

    let half_exp = exp - 127 + 15;
    if half_exp >= 0x1F {
        return sign | 0x7C00;
    }
    if half_exp <= 0 {
        // subnormal or zero in f16
        if half_exp < -10 {
            return sign;
        }
        let full = man | 0x80_0000;
        let shift = (14 - half_exp) as u32;
        let mut half_man = (full >> shift) as u16;
        let rem = full & ((1 << shift) - 1);
        let halfway = 1u32 << (shift - 1);
        if rem > halfway || (rem == halfway && half_man & 1 == 1) {
            half_man += 1;
        }
        return sign | half_man;
    }

    let mut half_man = (man >> 13) as u16;
    let rem = man & 0x1FFF;
    if rem > 0x1000 || (rem == 0x1000 && half_man & 1 == 1) {
        half_man += 1;
    }
    // a mantissa carry bumps the exponent, possibly into infinity
    sign | (((half_exp as u16) << 10) + half_man)
}

pub fn bf16_to_f32(bits: u16) -> f32 {
    let wide = (bits as u32) << 16;
    if bits & 0x7FFF > 0x7F80 {
        // NaN: quietize, keep the payload
        f32::from_bits(wide | 0x0040_0000)
    } else {
        f32::from_bits(wide)
    }
}

pub fn f32_to_bf16(x: f32) -> u16 {
    let bits = x.to_bits();
    if x.is_nan() {
        // keep the sign and top payload bits, force a quiet mantissa bit
        return ((bits >> 16) as u16) | 0x0040;
    }
    let lsb = (bits >> 16) & 1;
    ((bits.wrapping_add(0x7FFF + lsb)) >> 16) as u16
}

/// Decode a little-endian payload into f32 values.
pub fn decode(dtype: Dtype, bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % dtype.width() != 0 {
        return Err(Error::Format(format!(
            "payload of {} bytes is not a multiple of {}-byte {}",
            bytes.len(),
            dtype.width(),
            dtype
        )));
    }
    let values = match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::F16 => bytes
            .chunks_exact(2)
            .map(|c| f16_to_f32(u16::from_le_bytes([c[0], c[1]])))
            .collect(),
        Dtype::BF16 => bytes
            .chunks_exact(2)
            .map(|c| bf16_to_f32(u16::from_le_bytes([c[0], c[1]])))
            .collect(),
    };
    Ok(values)
}

/// Encode f32 values into the little-endian payload for `dtype`.
pub fn encode(dtype: Dtype, values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * dtype.width());
    match dtype {
        Dtype::F32 => {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Dtype::F16 => {
            for v in values {
                out.extend_from_slice(&f32_to_f16(*v).to_le_bytes());
            }
        }
        Dtype::BF16 => {
            for v in values {
                out.extend_from_slice(&f32_to_bf16(*v).to_le_bytes());
            }
        }
    }
    out
}
