//! bfloat16 storage patterns and single-bit corruption semantics.
//!
//! A pattern is a raw 16-bit word: bit 15 is the sign, bits 14..=7 the biased
//! exponent (`E7..E0`, bias 127) and bits 6..=0 the mantissa (`M6..M0`).
//! Conversion from a working-precision float rounds to nearest, ties to even,
//! with full subnormal support and saturation to infinity on overflow.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Scalar;

/// A 16-bit bfloat16 encoding.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
#[repr(transparent)]
pub struct Bf16Pattern(pub u16);

impl Bf16Pattern {
    pub const ZERO: Self = Self(0x0000);
    pub const ONE: Self = Self(0x3F80);
    pub const INFINITY: Self = Self(0x7F80);
    pub const NEG_INFINITY: Self = Self(0xFF80);
    /// Quiet NaN produced when encoding any NaN input.
    pub const CANONICAL_NAN: Self = Self(0x7FC0);

    pub const fn from_bits(bits: u16) -> Self {
        Self(bits)
    }

    pub const fn bits(self) -> u16 {
        self.0
    }

    pub const fn sign(self) -> bool {
        self.0 & 0x8000 != 0
    }

    pub const fn biased_exponent(self) -> u16 {
        (self.0 >> 7) & 0xFF
    }

    pub const fn mantissa(self) -> u16 {
        self.0 & 0x7F
    }

    pub const fn is_nan(self) -> bool {
        self.biased_exponent() == 0xFF && self.mantissa() != 0
    }

    pub const fn is_infinite(self) -> bool {
        self.biased_exponent() == 0xFF && self.mantissa() == 0
    }

    pub const fn is_finite(self) -> bool {
        self.biased_exponent() != 0xFF
    }

    pub const fn is_normal(self) -> bool {
        let e = self.biased_exponent();
        e != 0 && e != 0xFF
    }

    pub const fn is_subnormal(self) -> bool {
        self.biased_exponent() == 0 && self.mantissa() != 0
    }

    /// Little-endian byte image, the form used by every file and digest.
    pub const fn to_le_bytes(self) -> [u8; 2] {
        self.0.to_le_bytes()
    }

    pub const fn from_le_bytes(bytes: [u8; 2]) -> Self {
        Self(u16::from_le_bytes(bytes))
    }
}

impl fmt::Debug for Bf16Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bf16Pattern({:#06x})", self.0)
    }
}

impl fmt::Display for Bf16Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#06x}", self.0)
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("bit position {0} is outside 0..=15")]
pub struct BitPositionError(pub u8);

/// Index of one bit inside a pattern, 0 = LSB.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct BitPosition(u8);

impl BitPosition {
    pub const SIGN: Self = Self(15);

    pub const fn new(p: u8) -> Result<Self, BitPositionError> {
        if p < 16 {
            Ok(Self(p))
        } else {
            Err(BitPositionError(p))
        }
    }

    pub const fn get(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = BitPosition> {
        (0..16).map(BitPosition)
    }
}

impl TryFrom<u8> for BitPosition {
    type Error = BitPositionError;

    fn try_from(p: u8) -> Result<Self, Self::Error> {
        Self::new(p)
    }
}

impl From<BitPosition> for u8 {
    fn from(p: BitPosition) -> u8 {
        p.0
    }
}

impl fmt::Debug for BitPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "bit{}", self.0)
    }
}

impl fmt::Display for BitPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FieldKind {
    Sign,
    Exponent,
    Mantissa,
}

/// Semantic role of one bit position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BitField {
    pub kind: FieldKind,
    /// `k` in `E_k` / `M_k`; zero for the sign bit.
    pub index_within_field: u8,
    /// The `k` of the `2^k` value weight; `None` for the sign bit, whose weight is `±`.
    pub weight_exponent: Option<i32>,
}

impl BitField {
    /// Conventional symbol: `s`, `E7`, `M0`, ...
    pub fn symbol(&self) -> String {
        match self.kind {
            FieldKind::Sign => "s".to_string(),
            FieldKind::Exponent => format!("E{}", self.index_within_field),
            FieldKind::Mantissa => format!("M{}", self.index_within_field),
        }
    }
}

pub fn classify_bit(p: BitPosition) -> BitField {
    let p = p.get();
    match p {
        15 => BitField {
            kind: FieldKind::Sign,
            index_within_field: 0,
            weight_exponent: None,
        },
        7..=14 => BitField {
            kind: FieldKind::Exponent,
            index_within_field: p - 7,
            weight_exponent: Some(p as i32 - 7),
        },
        _ => BitField {
            kind: FieldKind::Mantissa,
            index_within_field: p,
            weight_exponent: Some(p as i32 - 7),
        },
    }
}

/// `b XOR (1 << p)`.
#[inline]
pub fn flip_bit(b: Bf16Pattern, p: BitPosition) -> Bf16Pattern {
    Bf16Pattern(b.0 ^ (1u16 << p.get()))
}

#[inline]
pub fn encode<S: Scalar>(x: S) -> Bf16Pattern {
    x.to_bf16()
}

#[inline]
pub fn decode<S: Scalar>(b: Bf16Pattern) -> S {
    S::from_bf16(b)
}

/// Effect of flipping one bit of a finite value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Perturbation<S> {
    /// `decode(flipped) - decode(original)`.
    Finite(S),
    Nan,
    Infinite {
        positive: bool,
    },
}

impl<S: Scalar> Perturbation<S> {
    pub fn is_finite(&self) -> bool {
        matches!(self, Perturbation::Finite(_))
    }

    pub fn magnitude(&self) -> S {
        match *self {
            Perturbation::Finite(d) => d.abs(),
            _ => S::infinity(),
        }
    }
}

/// Outcome of flipping bit `p` of a finite pattern.
///
/// Non-finite inputs are a contract violation; they are reported as the tag
/// of the flipped pattern, which keeps the function total.
pub fn perturbation<S: Scalar>(b: Bf16Pattern, p: BitPosition) -> Perturbation<S> {
    debug_assert!(b.is_finite(), "perturbation of non-finite pattern {b:?}");
    let flipped = flip_bit(b, p);
    if flipped.is_nan() {
        Perturbation::Nan
    } else if flipped.is_infinite() {
        Perturbation::Infinite {
            positive: !flipped.sign(),
        }
    } else {
        Perturbation::Finite(decode::<S>(flipped) - decode::<S>(b))
    }
}

/// Round `sig * 2^scale` (with `sig < 2^63`) to a bfloat16 magnitude.
fn round_magnitude(sig: u64, scale: i32) -> u16 {
    if sig == 0 {
        return 0;
    }
    let top = 63 - sig.leading_zeros() as i32;
    let exp = top + scale;
    if exp > 127 {
        return Bf16Pattern::INFINITY.0;
    }
    let normal = exp >= -126;
    let lsb_exp = exp.max(-126) - 7;
    let shift = lsb_exp - scale;
    let units: u64 = if shift <= 0 {
        sig << (-shift) as u32
    } else if shift > 63 {
        // Below half of the smallest subnormal.
        0
    } else {
        let shift = shift as u32;
        let kept = sig >> shift;
        let rem = sig & ((1u64 << shift) - 1);
        let half = 1u64 << (shift - 1);
        if rem > half || (rem == half && kept & 1 == 1) {
            kept + 1
        } else {
            kept
        }
    };
    let bits: u64 = if normal {
        (((exp + 127) as u64) << 7) + units - 128
    } else {
        units
    };
    bits.min(Bf16Pattern::INFINITY.0 as u64) as u16
}

fn encode_parts(negative: bool, is_nan: bool, is_inf: bool, sig: u64, scale: i32) -> Bf16Pattern {
    if is_nan {
        return Bf16Pattern::CANONICAL_NAN;
    }
    let sign = if negative { 0x8000 } else { 0 };
    if is_inf {
        return Bf16Pattern(sign | Bf16Pattern::INFINITY.0);
    }
    Bf16Pattern(sign | round_magnitude(sig, scale))
}

impl Scalar for f32 {
    fn to_bf16(self) -> Bf16Pattern {
        let bits = self.to_bits();
        let exp = ((bits >> 23) & 0xFF) as i32;
        let frac = (bits & 0x7F_FFFF) as u64;
        let (sig, scale) = if exp == 0 {
            (frac, -149)
        } else {
            (frac | 1 << 23, exp - 150)
        };
        encode_parts(
            bits >> 31 == 1,
            self.is_nan(),
            self.is_infinite(),
            sig,
            scale,
        )
    }

    #[inline]
    fn from_bf16(pattern: Bf16Pattern) -> Self {
        f32::from_bits((pattern.0 as u32) << 16)
    }
}

impl Scalar for f64 {
    fn to_bf16(self) -> Bf16Pattern {
        let bits = self.to_bits();
        let exp = ((bits >> 52) & 0x7FF) as i32;
        let frac = bits & 0xF_FFFF_FFFF_FFFF;
        let (sig, scale) = if exp == 0 {
            (frac, -1074)
        } else {
            (frac | 1 << 52, exp - 1075)
        };
        encode_parts(
            bits >> 63 == 1,
            self.is_nan(),
            self.is_infinite(),
            sig,
            scale,
        )
    }

    fn from_bf16(pattern: Bf16Pattern) -> Self {
        if pattern.biased_exponent() == 0xFF {
            // Build the word directly so NaN payloads survive the widening.
            let sign = (pattern.sign() as u64) << 63;
            let payload = (pattern.mantissa() as u64) << 45;
            f64::from_bits(sign | 0x7FF0_0000_0000_0000 | payload)
        } else {
            f32::from_bf16(pattern) as f64
        }
    }
}
