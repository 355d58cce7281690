//! Sign-magnitude fixed-point quantization and MSB-first bit-plane layout.
//!
//! A value is `sign * magnitude * 2^-frac_bits * scale`, where `scale` is a
//! per-tensor factor kept outside the value itself. Keys are decomposed into
//! bit planes (MSB first) for the bit-serial engine; [`exact_fxp_dot`] is the
//! wide integer oracle the engine is checked against.

use serde::{Deserialize, Serialize};

use crate::error::{dim_check, Error, Result};
use crate::scalar::Scalar;

/// Bit layout of a sign-magnitude fixed-point number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantSpec {
    /// Sign bit plus magnitude bits.
    pub total_bits: u32,
    /// Fractional bits of the magnitude.
    pub frac_bits: u32,
}

impl QuantSpec {
    pub const MAX_TOTAL_BITS: u32 = 32;

    pub fn new(total_bits: u32, frac_bits: u32) -> Result<Self> {
        let spec = Self {
            total_bits,
            frac_bits,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `total_bits` bits with every magnitude bit fractional: values live in (-1, +1).
    pub fn unit(total_bits: u32) -> Result<Self> {
        Self::new(total_bits, total_bits.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_bits < 2 {
            return Err(Error::Config(format!(
                "total_bits must be at least 2 (sign + magnitude), got {}",
                self.total_bits
            )));
        }
        if self.total_bits > Self::MAX_TOTAL_BITS {
            return Err(Error::Config(format!(
                "total_bits above {} not supported, got {}",
                Self::MAX_TOTAL_BITS,
                self.total_bits
            )));
        }
        if self.frac_bits > 60 {
            return Err(Error::Config(format!(
                "frac_bits above 60 not supported, got {}",
                self.frac_bits
            )));
        }
        Ok(())
    }

    pub fn magnitude_bits(&self) -> u32 {
        self.total_bits - 1
    }

    pub fn max_magnitude(&self) -> u32 {
        ((1u64 << self.magnitude_bits()) - 1) as u32
    }

    /// Weight of one magnitude LSB, before the tensor scale.
    pub fn lsb(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    /// Largest representable magnitude, before the tensor scale.
    pub fn max_value(&self) -> f64 {
        self.max_magnitude() as f64 * self.lsb()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sign {
    Pos,
    Neg,
}

impl Sign {
    pub fn as_i64(self) -> i64 {
        match self {
            Sign::Pos => 1,
            Sign::Neg => -1,
        }
    }

    /// `true` when the product of two values with these signs is non-negative.
    pub fn concordant(self, other: Sign) -> bool {
        self == other
    }
}

/// A quantized scalar. Zero always carries [`Sign::Pos`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FixedPointValue {
    sign: Sign,
    magnitude: u32,
    spec: QuantSpec,
}

impl FixedPointValue {
    pub fn new(sign: Sign, magnitude: u32, spec: QuantSpec) -> Result<Self> {
        spec.validate()?;
        if magnitude > spec.max_magnitude() {
            return Err(Error::Config(format!(
                "magnitude {magnitude} does not fit {} magnitude bits",
                spec.magnitude_bits()
            )));
        }
        let sign = if magnitude == 0 { Sign::Pos } else { sign };
        Ok(Self {
            sign,
            magnitude,
            spec,
        })
    }

    /// Builds a value from its signed integer code (`sign * magnitude`).
    pub fn from_signed(code: i64, spec: QuantSpec) -> Result<Self> {
        let sign = if code < 0 { Sign::Neg } else { Sign::Pos };
        let magnitude = u32::try_from(code.unsigned_abs())
            .map_err(|_| Error::Config(format!("code {code} does not fit a 32-bit magnitude")))?;
        Self::new(sign, magnitude, spec)
    }

    pub fn zero(spec: QuantSpec) -> Self {
        Self {
            sign: Sign::Pos,
            magnitude: 0,
            spec,
        }
    }

    pub fn sign(&self) -> Sign {
        self.sign
    }

    pub fn magnitude(&self) -> u32 {
        self.magnitude
    }

    pub fn spec(&self) -> QuantSpec {
        self.spec
    }

    /// Signed integer code, in units of one LSB.
    pub fn signed_code(&self) -> i64 {
        self.sign.as_i64() * self.magnitude as i64
    }

    pub fn dequantize<T: Scalar>(&self, scale: T) -> T {
        T::of(self.signed_code() as f64 * self.spec.lsb()) * scale
    }
}

/// Round-to-nearest (ties away from zero), saturating quantizer.
pub fn quantize<T: Scalar>(x: T, spec: QuantSpec, scale: T) -> Result<FixedPointValue> {
    spec.validate()?;
    let scale = scale.as_f64();
    if scale <= 0.0 || !scale.is_finite() {
        return Err(Error::Config(format!(
            "scale must be positive and finite, got {scale}"
        )));
    }
    let x = x.as_f64();
    if x.is_nan() {
        return Err(Error::Parameter("cannot quantize NaN".into()));
    }
    let units = x / scale * (spec.frac_bits as f64).exp2();
    let max = spec.max_magnitude() as f64;
    let magnitude = units.abs().round().min(max) as u32;
    let sign = if units < 0.0 { Sign::Neg } else { Sign::Pos };
    FixedPointValue::new(sign, magnitude, spec)
}

pub fn quantize_slice<T: Scalar>(
    xs: &[T],
    spec: QuantSpec,
    scale: T,
) -> Result<Vec<FixedPointValue>> {
    xs.iter().map(|&x| quantize(x, spec, scale)).collect()
}

fn common_spec(values: &[FixedPointValue], what: &str) -> Result<Option<QuantSpec>> {
    let Some(first) = values.first() else {
        return Ok(None);
    };
    let spec = first.spec;
    if values.iter().any(|v| v.spec != spec) {
        return Err(Error::Config(format!("{what} mixes quantization specs")));
    }
    Ok(Some(spec))
}

/// Sign bits plus MSB-first magnitude planes of a key vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitPlaneMatrix {
    spec: QuantSpec,
    signs: Vec<Sign>,
    /// `planes[j]` holds bit `magnitude_bits - 1 - j` of every element.
    planes: Vec<Vec<bool>>,
}

impl BitPlaneMatrix {
    pub fn spec(&self) -> QuantSpec {
        self.spec
    }

    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }

    pub fn signs(&self) -> &[Sign] {
        &self.signs
    }

    pub fn plane_count(&self) -> usize {
        self.planes.len()
    }

    /// Plane `index`, 1-based, MSB first.
    pub fn plane(&self, index: usize) -> &[bool] {
        &self.planes[index - 1]
    }

    /// Weight of plane `index` (1-based) in LSB units of the key spec.
    pub fn plane_weight_code(&self, index: usize) -> i64 {
        1i64 << (self.planes.len() - index)
    }

    /// Real weight of plane `index` (1-based); `2^-index` for unit specs.
    pub fn plane_weight(&self, index: usize) -> f64 {
        self.plane_weight_code(index) as f64 * self.spec.lsb()
    }

    pub fn reconstruct(&self) -> Vec<FixedPointValue> {
        (0..self.len())
            .map(|i| {
                let magnitude = self
                    .planes
                    .iter()
                    .fold(0u32, |acc, plane| (acc << 1) | plane[i] as u32);
                FixedPointValue::new(self.signs[i], magnitude, self.spec)
                    .expect("planes hold at most magnitude_bits bits")
            })
            .collect()
    }
}

pub fn to_bit_planes(column: &[FixedPointValue]) -> Result<BitPlaneMatrix> {
    let spec = common_spec(column, "key column")?
        .ok_or_else(|| Error::Dimension("cannot decompose an empty key column".into()))?;
    let bits = spec.magnitude_bits();
    let planes = (1..=bits)
        .map(|j| {
            let shift = bits - j;
            column
                .iter()
                .map(|v| (v.magnitude >> shift) & 1 == 1)
                .collect()
        })
        .collect();
    Ok(BitPlaneMatrix {
        spec,
        signs: column.iter().map(|v| v.sign).collect(),
        planes,
    })
}

/// Exact dot product of two fixed-point vectors, in units of `2^-frac_bits`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExactDot {
    pub code: i128,
    pub frac_bits: u32,
}

impl ExactDot {
    pub fn value<T: Scalar>(&self) -> T {
        T::of(self.code as f64 * (-(self.frac_bits as f64)).exp2())
    }
}

/// Exact integer dot product with no intermediate rounding.
///
/// The accumulator is an `i128`: products of two 32-bit magnitudes need 62
/// bits, leaving headroom for vectors far longer than any attention head.
pub fn exact_fxp_dot(q: &[FixedPointValue], k: &[FixedPointValue]) -> Result<ExactDot> {
    dim_check(q.len() == k.len(), || {
        format!("q has {} elements, k has {}", q.len(), k.len())
    })?;
    let q_spec = common_spec(q, "query vector")?;
    let k_spec = common_spec(k, "key vector")?;
    let frac_bits = match (q_spec, k_spec) {
        (Some(a), Some(b)) => a.frac_bits + b.frac_bits,
        _ => 0,
    };
    let code = q
        .iter()
        .zip(k)
        .map(|(a, b)| a.signed_code() as i128 * b.signed_code() as i128)
        .sum();
    Ok(ExactDot { code, frac_bits })
}
