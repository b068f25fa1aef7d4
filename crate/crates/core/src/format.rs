//! Flexible minifloat formats `(x, y, z, b)` and their bit-exact value semantics.
//!
//! A format is described by a sign-bit count `x` (0 or 1), an exponent width
//! `y`, a fraction width `z`, and an arbitrary integer exponent bias `b`. The
//! total width is `n = x + y + z`. All codes encode finite values: there are no
//! infinity or NaN encodings, so the all-ones exponent field is an ordinary
//! binade.
//!
//! Code layout, most significant bit first: `[sign][exponent][fraction]`.
//!
//! * exponent field `e == 0`: subnormal, `(-1)^s * 0.f * 2^(1 - b)`
//! * exponent field `e >= 1`: normal, `(-1)^s * 1.f * 2^(e - b)`
//!
//! Values are carried as `f64`, which represents every value of every valid
//! format exactly. Conversion to binary32 is provided by [`to_fp32_bits`],
//! which mirrors a hardware converter datapath.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest accepted total width.
pub const MIN_WIDTH: u8 = 4;
/// Largest accepted total width.
pub const MAX_WIDTH: u8 = 16;
/// Smallest accepted exponent bias.
pub const MIN_BIAS: i32 = -128;
/// Largest accepted exponent bias.
pub const MAX_BIAS: i32 = 127;

// Largest unbiased exponent an f64 normal can carry.
const F64_MAX_EXP: i32 = 1023;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FormatError {
    #[error("field widths x={x}, y={y}, z={z} do not sum to n={n}")]
    WidthMismatch { x: u8, y: u8, z: u8, n: u8 },
    #[error("sign-bit count must be 0 or 1, got {0}")]
    BadSign(u8),
    #[error("exponent width must be at least 1, got {0}")]
    BadExponent(u8),
    #[error("total width must be in [4, 16], got {0}")]
    BadWidth(u8),
    #[error("exponent bias must be in [-128, 127], got {0}")]
    BadBias(i32),
    #[error("format {0} has a largest exponent beyond the range of binary64")]
    UnrepresentableRange(FormatSpec),
    #[error("cannot encode NaN")]
    NaNInput,
    #[error("cannot encode infinite value {0}")]
    InfiniteInput(f64),
    #[error("negative value {value} cannot be encoded in unsigned format {format}")]
    NegativeToUnsigned { value: f64, format: FormatSpec },
    #[error("code {code:#x} has more than {width} significant bits")]
    CodeOutOfRange { code: u32, width: u8 },
    #[error("value of code {code:#x} in {format} exceeds the binary32 range")]
    Fp32Overflow { code: u16, format: FormatSpec },
    #[error("cannot parse format {0:?}; expected x,y,z,b")]
    Parse(String),
}

/// One member of the flexible floating-point family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FormatSpec {
    sign_bits: u8,
    exponent_bits: u8,
    fraction_bits: u8,
    bias: i16,
}

/// Exponent bias used by conventional formats: `2^(y-1) - 1`.
pub fn default_bias(exponent_bits: u8) -> i32 {
    (1i32 << (exponent_bits.max(1) - 1)) - 1
}

impl FormatSpec {
    /// Validates and builds a format from its `(x, y, z, b, n)` parameters.
    pub fn new(x: u8, y: u8, z: u8, b: i32, n: u8) -> Result<Self, FormatError> {
        if x > 1 {
            return Err(FormatError::BadSign(x));
        }
        if !(MIN_WIDTH..=MAX_WIDTH).contains(&n) {
            return Err(FormatError::BadWidth(n));
        }
        if y < 1 {
            return Err(FormatError::BadExponent(y));
        }
        if u16::from(x) + u16::from(y) + u16::from(z) != u16::from(n) {
            return Err(FormatError::WidthMismatch { x, y, z, n });
        }
        if !(MIN_BIAS..=MAX_BIAS).contains(&b) {
            return Err(FormatError::BadBias(b));
        }
        let spec = FormatSpec {
            sign_bits: x,
            exponent_bits: y,
            fraction_bits: z,
            bias: b as i16,
        };
        if spec.max_exponent() > F64_MAX_EXP {
            return Err(FormatError::UnrepresentableRange(spec));
        }
        Ok(spec)
    }

    /// Builds `(x, y, z, b)` with `n` inferred from the field widths.
    pub fn from_fields(x: u8, y: u8, z: u8, b: i32) -> Result<Self, FormatError> {
        let n = u16::from(x) + u16::from(y) + u16::from(z);
        Self::new(x, y, z, b, u8::try_from(n).unwrap_or(u8::MAX))
    }

    /// Builds `(x, y, z)` with the conventional bias for `y`.
    pub fn with_default_bias(x: u8, y: u8, z: u8) -> Result<Self, FormatError> {
        Self::from_fields(x, y, z, default_bias(y))
    }

    /// Same field widths, different bias.
    pub fn with_bias(self, b: i32) -> Result<Self, FormatError> {
        Self::new(self.sign_bits, self.exponent_bits, self.fraction_bits, b, self.width())
    }

    pub fn sign_bits(self) -> u8 {
        self.sign_bits
    }

    pub fn exponent_bits(self) -> u8 {
        self.exponent_bits
    }

    pub fn fraction_bits(self) -> u8 {
        self.fraction_bits
    }

    pub fn bias(self) -> i32 {
        i32::from(self.bias)
    }

    pub fn width(self) -> u8 {
        self.sign_bits + self.exponent_bits + self.fraction_bits
    }

    pub fn is_signed(self) -> bool {
        self.sign_bits == 1
    }

    /// Number of distinct codes, `2^n`.
    pub fn code_count(self) -> u32 {
        1u32 << self.width()
    }

    /// Largest magnitude code: exponent and fraction fields all ones.
    pub fn max_magnitude_code(self) -> u16 {
        ((1u32 << (self.exponent_bits + self.fraction_bits)) - 1) as u16
    }

    fn sign_mask(self) -> u16 {
        if self.is_signed() {
            1 << (self.exponent_bits + self.fraction_bits)
        } else {
            0
        }
    }

    /// Unbiased exponent of the top binade.
    pub(crate) fn max_exponent(self) -> i32 {
        ((1i32 << self.exponent_bits) - 1) - self.bias()
    }

    /// Unbiased exponent of the smallest normal binade.
    pub(crate) fn min_normal_exponent(self) -> i32 {
        1 - self.bias()
    }

    /// Whether every value of this format has an exact binary32 encoding.
    pub fn fits_binary32(self) -> bool {
        self.max_exponent() <= 127
    }
}

impl fmt::Display for FormatSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({},{},{},{})",
            self.sign_bits, self.exponent_bits, self.fraction_bits, self.bias
        )
    }
}

impl FromStr for FormatSpec {
    type Err = FormatError;

    /// Parses `x,y,z,b` or `x,y,z` (default bias), optionally wrapped in parentheses.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || FormatError::Parse(s.to_string());
        let inner = s.trim().trim_start_matches('(').trim_end_matches(')');
        let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
        if parts.len() != 3 && parts.len() != 4 {
            return Err(bad());
        }
        let x: u8 = parts[0].parse().map_err(|_| bad())?;
        let y: u8 = parts[1].parse().map_err(|_| bad())?;
        let z: u8 = parts[2].parse().map_err(|_| bad())?;
        match parts.get(3) {
            Some(b) => FormatSpec::from_fields(x, y, z, b.parse().map_err(|_| bad())?),
            None => FormatSpec::with_default_bias(x, y, z),
        }
    }
}

/// `2^exp` as an exact f64. `exp` must lie in the f64 normal range.
pub(crate) fn pow2(exp: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&exp), "2^{exp} outside the f64 normal range");
    f64::from_bits(((exp + 1023) as u64) << 52)
}

/// `floor(log2(|v|))` for a finite, nonzero f64, read off the exponent bits.
pub(crate) fn floor_log2(v: f64) -> i32 {
    let bits = v.abs().to_bits();
    let biased = (bits >> 52) as i32;
    if biased == 0 {
        let mantissa = bits & ((1u64 << 52) - 1);
        // subnormal: leading one position within the 52-bit field
        -1074 + (63 - mantissa.leading_zeros() as i32)
    } else {
        biased - 1023
    }
}

/// The interval of magnitudes a format can represent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeWindow {
    /// Smallest positive magnitude. Equals `min_normal` when `z == 0`.
    pub min_subnormal: f64,
    /// Smallest magnitude with an implicit leading one.
    pub min_normal: f64,
    /// Largest finite magnitude.
    pub max: f64,
}

impl RangeWindow {
    pub fn contains_magnitude(&self, mag: f64) -> bool {
        mag >= self.min_subnormal && mag <= self.max
    }
}

/// Boundaries of the representable magnitude range of `fmt`.
pub fn range_window(fmt: FormatSpec) -> RangeWindow {
    let z = i32::from(fmt.fraction_bits());
    let min_normal = pow2(fmt.min_normal_exponent());
    let min_subnormal = pow2(fmt.min_normal_exponent() - z);
    let max = (2.0 - pow2(-z)) * pow2(fmt.max_exponent());
    RangeWindow {
        min_subnormal,
        min_normal,
        max,
    }
}

/// Exact value of `code` under `fmt`. The negative-zero code decodes to `-0.0`.
pub fn decode(fmt: FormatSpec, code: u16) -> Result<f64, FormatError> {
    if u32::from(code) >= fmt.code_count() {
        return Err(FormatError::CodeOutOfRange {
            code: code.into(),
            width: fmt.width(),
        });
    }
    Ok(decode_unchecked(fmt, code))
}

pub(crate) fn decode_unchecked(fmt: FormatSpec, code: u16) -> f64 {
    let z = u32::from(fmt.fraction_bits());
    let negative = code & fmt.sign_mask() != 0;
    let mag = code & fmt.max_magnitude_code();
    let exp_field = i32::from(mag >> z);
    let frac = f64::from(mag & ((1u16 << z) - 1));
    let value = if exp_field == 0 {
        frac * pow2(fmt.min_normal_exponent() - z as i32)
    } else {
        (pow2(z as i32) + frac) * pow2(exp_field - fmt.bias() - z as i32)
    };
    if negative {
        -value
    } else {
        value
    }
}

/// Round-to-nearest-even encoding of `v` into `fmt`.
///
/// Exact ties go to the neighbour whose magnitude code is even, which is the
/// neighbour with a zero fraction LSB whenever `z >= 1`. Magnitudes above the
/// window maximum saturate; anything at or below half the smallest positive
/// value becomes the `+0` code.
pub fn encode_rne(fmt: FormatSpec, v: f64) -> Result<u16, FormatError> {
    if v.is_nan() {
        return Err(FormatError::NaNInput);
    }
    if v.is_infinite() {
        return Err(FormatError::InfiniteInput(v));
    }
    if !fmt.is_signed() && v < 0.0 {
        return Err(FormatError::NegativeToUnsigned { value: v, format: fmt });
    }
    let mag = encode_magnitude(fmt, v.abs());
    if mag == 0 || v > 0.0 {
        Ok(mag)
    } else {
        Ok(fmt.sign_mask() | mag)
    }
}

fn encode_magnitude(fmt: FormatSpec, mag: f64) -> u16 {
    let z = i32::from(fmt.fraction_bits());
    let min_normal_exp = fmt.min_normal_exponent();
    // half of the smallest subnormal
    if mag <= pow2(min_normal_exp - z - 1) {
        return 0;
    }
    let max_code = fmt.max_magnitude_code();
    let exp = floor_log2(mag);
    if exp > fmt.max_exponent() {
        return max_code;
    }
    // quantum of the binade (or of the subnormal region)
    let binade = exp.max(min_normal_exp);
    let scaled = mag * pow2(z - binade);
    let whole = scaled.floor();
    let rem = scaled - whole;
    // code of the neighbour at or below `mag`
    let base = if exp < min_normal_exp {
        0
    } else {
        (((binade + fmt.bias()) as u32) << z) - (1u32 << z)
    };
    let lower = base + whole as u32;
    let code = if rem > 0.5 || (rem == 0.5 && lower % 2 == 1) {
        lower + 1
    } else {
        lower
    };
    code.min(u32::from(max_code)) as u16
}

/// IEEE-754 binary32 bit pattern with the same value as `code`.
///
/// Models the converter datapath: recover the sign from `x`, split the exponent
/// and fraction fields using `y`, rebias the exponent by `127 - b`, and left
/// align the fraction. Subnormal inputs are normalized by shifting out leading
/// zeros; values below the binary32 normal range land on binary32 subnormals,
/// which hold them exactly because `z <= 15` and `b <= 127`.
pub fn to_fp32_bits(fmt: FormatSpec, code: u16) -> Result<u32, FormatError> {
    if u32::from(code) >= fmt.code_count() {
        return Err(FormatError::CodeOutOfRange {
            code: code.into(),
            width: fmt.width(),
        });
    }
    let z = i32::from(fmt.fraction_bits());
    let sign = if code & fmt.sign_mask() != 0 { 1u32 << 31 } else { 0 };
    let mag = code & fmt.max_magnitude_code();
    let exp_field = i32::from(mag >> z);
    let frac = u32::from(mag & ((1u16 << z) - 1));

    if exp_field == 0 && frac == 0 {
        return Ok(sign);
    }
    // normalize to 1.m * 2^exp with `mant_bits` explicit fraction bits in `mant`
    let (exp, mant, mant_bits) = if exp_field == 0 {
        let lead = 31 - frac.leading_zeros() as i32;
        (
            fmt.min_normal_exponent() - z + lead,
            frac & !(1u32 << lead),
            lead,
        )
    } else {
        (exp_field - fmt.bias(), frac, z)
    };
    let biased = exp + 127;
    if biased >= 255 {
        return Err(FormatError::Fp32Overflow { code, format: fmt });
    }
    if biased >= 1 {
        return Ok(sign | ((biased as u32) << 23) | (mant << (23 - mant_bits)));
    }
    // binary32 subnormal: significand = value / 2^-149, always an integer here
    let significand = (mant | (1u32 << mant_bits)) << (exp + 149 - mant_bits);
    Ok(sign | significand)
}

/// All distinct finite values of a format, ascending, with canonical codes.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    format: FormatSpec,
    values: Vec<f64>,
    codes: Vec<u16>,
}

/// Decodes every code of `fmt`, merges `±0`, and sorts ascending.
pub fn enumerate_values(fmt: FormatSpec) -> ValueTable {
    let mut entries: Vec<(f64, u16)> = (0..fmt.code_count())
        .map(|c| c as u16)
        .filter(|&c| !(c == fmt.sign_mask() && fmt.is_signed()))
        .map(|c| (decode_unchecked(fmt, c), c))
        .collect();
    entries.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (values, codes) = entries.into_iter().unzip();
    ValueTable {
        format: fmt,
        values,
        codes,
    }
}

impl ValueTable {
    pub fn format(&self) -> FormatSpec {
        self.format
    }

    /// Strictly increasing distinct values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Canonical code of `values()[i]`.
    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn code_of(&self, value: f64) -> Option<u16> {
        self.values
            .binary_search_by(|probe| probe.total_cmp(&(value + 0.0)))
            .ok()
            .map(|i| self.codes[i])
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        *self.values.last().expect("tables are never empty")
    }
}

/// Precomputed decode table for fast bulk conversion.
#[derive(Debug, Clone)]
pub struct Codec {
    format: FormatSpec,
    decoded: Vec<f64>,
}

impl Codec {
    pub fn new(format: FormatSpec) -> Self {
        let decoded = (0..format.code_count())
            .map(|c| decode_unchecked(format, c as u16))
            .collect();
        Codec { format, decoded }
    }

    pub fn format(&self) -> FormatSpec {
        self.format
    }

    pub fn encode(&self, v: f64) -> Result<u16, FormatError> {
        encode_rne(self.format, v)
    }

    /// Value of a code already known to be in range.
    pub fn value(&self, code: u16) -> f64 {
        self.decoded[usize::from(code)]
    }

    /// Round `v` to the nearest representable value.
    pub fn round(&self, v: f64) -> Result<f64, FormatError> {
        self.encode(v).map(|c| self.value(c))
    }
}
