use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error};

/// Storage format that loss values are rounded to before the optimizer sees them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Fp64,
    Fp32,
    Bf16,
    Fp16,
}

impl Precision {
    /// `(significand bits incl. the implicit one, min normal exponent, max exponent)`.
    fn layout(self) -> Option<(i32, i32, i32)> {
        match self {
            Precision::Fp64 => None,
            Precision::Fp32 => Some((24, -126, 127)),
            Precision::Bf16 => Some((8, -126, 127)),
            Precision::Fp16 => Some((11, -14, 15)),
        }
    }

    /// Largest finite value of the format.
    pub fn max_finite(self) -> f64 {
        match self.layout() {
            None => f64::MAX,
            Some((p, _, emax)) => (2.0 - pow2(1 - p)) * pow2(emax),
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fp64" | "f64" => Ok(Precision::Fp64),
            "fp32" | "f32" => Ok(Precision::Fp32),
            "bf16" => Ok(Precision::Bf16),
            "fp16" | "f16" => Ok(Precision::Fp16),
            other => Err(invalid(format!("unknown precision '{other}'"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Precision::Fp64 => "fp64",
            Precision::Fp32 => "fp32",
            Precision::Bf16 => "bf16",
            Precision::Fp16 => "fp16",
        };
        f.write_str(s)
    }
}

/// A rounded value and whether rounding saturated to infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantized {
    pub value: f64,
    pub overflow: bool,
}

#[inline]
fn pow2(e: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&e));
    f64::from_bits(((e + 1023) as u64) << 52)
}

/// Rounds `value` to the nearest representable value of `precision`
/// (ties to even, subnormals included) and widens the result back to `f64`.
///
/// Magnitudes that round past the format's largest finite value become `±∞`
/// with `overflow` set. NaN passes through.
pub fn quantize(value: f64, precision: Precision) -> Quantized {
    let Some((p, emin, emax)) = precision.layout() else {
        return Quantized {
            value,
            overflow: value.is_infinite(),
        };
    };
    if value.is_nan() {
        return Quantized {
            value,
            overflow: false,
        };
    }
    if value.is_infinite() {
        return Quantized {
            value,
            overflow: true,
        };
    }
    if value == 0.0 {
        return Quantized {
            value,
            overflow: false,
        };
    }
    let a = value.abs();
    let biased = ((a.to_bits() >> 52) & 0x7ff) as i32;
    // f64 subnormals sit far below every target format's smallest subnormal
    let exp = if biased == 0 { -1023 } else { biased - 1023 };
    let ulp = pow2(exp.max(emin) - (p - 1));
    let rounded = (a / ulp).round_ties_even() * ulp;
    let max = (2.0 - pow2(1 - p)) * pow2(emax);
    if rounded > max {
        return Quantized {
            value: f64::INFINITY.copysign(value),
            overflow: true,
        };
    }
    Quantized {
        value: rounded.copysign(value),
        overflow: false,
    }
}
