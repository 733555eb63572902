use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::CodecError;

/// A precision point `E<e>M<m>`.
///
/// `mantissa_bits` counts every stored mantissa bit, including the explicit
/// leading (integer) bit, so an `E5M4` element holds values `0..16` that
/// decode as `mantissa / 8 * 2^shared_exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BitWidthConfig {
    exponent_bits: u8,
    mantissa_bits: u8,
}

impl BitWidthConfig {
    pub const MAX_EXPONENT_BITS: u8 = 8;
    pub const MAX_MANTISSA_BITS: u8 = 11;

    pub fn new(exponent_bits: u8, mantissa_bits: u8) -> Result<Self, CodecError> {
        if !(1..=Self::MAX_EXPONENT_BITS).contains(&exponent_bits)
            || !(1..=Self::MAX_MANTISSA_BITS).contains(&mantissa_bits)
        {
            return Err(CodecError::InvalidConfig {
                exponent_bits,
                mantissa_bits,
            });
        }
        Ok(Self {
            exponent_bits,
            mantissa_bits,
        })
    }

    /// `E5Mm`, the family used throughout training.
    pub fn e5(mantissa_bits: u8) -> Self {
        Self::new(5, mantissa_bits).expect("mantissa width out of range")
    }

    pub fn exponent_bits(&self) -> u8 {
        self.exponent_bits
    }

    pub fn mantissa_bits(&self) -> u8 {
        self.mantissa_bits
    }

    pub fn label(&self) -> String {
        self.to_string()
    }

    /// IEEE-style bias, `2^(e-1) - 1` (15 for five exponent bits).
    pub fn bias(&self) -> i32 {
        (1i32 << (self.exponent_bits - 1)) - 1
    }

    /// Smallest unbiased shared exponent. Biased 0 is reserved for all-zero groups.
    pub fn min_exponent(&self) -> i32 {
        1 - self.bias()
    }

    pub fn max_exponent(&self) -> i32 {
        ((1i32 << self.exponent_bits) - 1) - self.bias()
    }

    pub(crate) fn mantissa_limit(&self) -> u32 {
        1u32 << self.mantissa_bits
    }

    /// Same exponent field, different mantissa width.
    pub fn with_mantissa_bits(&self, mantissa_bits: u8) -> Result<Self, CodecError> {
        Self::new(self.exponent_bits, mantissa_bits)
    }
}

impl fmt::Display for BitWidthConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "E{}M{}", self.exponent_bits, self.mantissa_bits)
    }
}

impl FromStr for BitWidthConfig {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CodecError::BadLabel(s.to_string());
        let rest = s
            .trim()
            .strip_prefix(['E', 'e'])
            .ok_or_else(bad)?;
        let (e, m) = rest.split_once(['M', 'm']).ok_or_else(bad)?;
        let e: u8 = e.parse().map_err(|_| bad())?;
        let m: u8 = m.parse().map_err(|_| bad())?;
        Self::new(e, m)
    }
}

/// Ordered set of bit-widths sharing one exponent width, highest mantissa first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitWidthSet {
    widths: Vec<BitWidthConfig>,
}

impl BitWidthSet {
    /// Builds a set from any ordering; entries are sorted by descending mantissa width.
    pub fn new(mut widths: Vec<BitWidthConfig>) -> Result<Self, CodecError> {
        if widths.is_empty() {
            return Err(CodecError::EmptyWidthSet);
        }
        let e = widths[0].exponent_bits;
        if let Some(w) = widths.iter().find(|w| w.exponent_bits != e) {
            return Err(CodecError::ExponentBitsMismatch {
                expected: e,
                found: w.exponent_bits,
            });
        }
        widths.sort_by_key(|w| std::cmp::Reverse(w.mantissa_bits));
        if let Some(pair) = widths.windows(2).find(|p| p[0].mantissa_bits == p[1].mantissa_bits) {
            return Err(CodecError::DuplicateWidth(pair[0].label()));
        }
        Ok(Self { widths })
    }

    /// `E<e>M<hi>` down to `E<e>M<lo>`, inclusive.
    pub fn range(exponent_bits: u8, hi: u8, lo: u8) -> Result<Self, CodecError> {
        let (hi, lo) = if hi >= lo { (hi, lo) } else { (lo, hi) };
        let widths = (lo..=hi)
            .rev()
            .map(|m| BitWidthConfig::new(exponent_bits, m))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(widths)
    }

    /// E5M8 through E5M3.
    pub fn standard() -> Self {
        Self::range(5, 8, 3).expect("static range")
    }

    pub fn singleton(width: BitWidthConfig) -> Self {
        Self {
            widths: vec![width],
        }
    }

    pub fn widths(&self) -> &[BitWidthConfig] {
        &self.widths
    }

    pub fn len(&self) -> usize {
        self.widths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.widths.is_empty()
    }

    pub fn highest(&self) -> BitWidthConfig {
        self.widths[0]
    }

    pub fn lowest(&self) -> BitWidthConfig {
        *self.widths.last().expect("non-empty")
    }

    pub fn contains(&self, width: &BitWidthConfig) -> bool {
        self.widths.contains(width)
    }

    pub fn position(&self, width: &BitWidthConfig) -> Option<usize> {
        self.widths.iter().position(|w| w == width)
    }

    pub fn iter(&self) -> impl Iterator<Item = &BitWidthConfig> {
        self.widths.iter()
    }
}

impl FromStr for BitWidthSet {
    type Err = CodecError;

    /// Accepts `E5M8..E5M3` or a comma-separated list `E5M8,E5M4`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some((a, b)) = s.split_once("..") {
            let a: BitWidthConfig = a.parse()?;
            let b: BitWidthConfig = b.parse()?;
            if a.exponent_bits != b.exponent_bits {
                return Err(CodecError::ExponentBitsMismatch {
                    expected: a.exponent_bits,
                    found: b.exponent_bits,
                });
            }
            return Self::range(a.exponent_bits, a.mantissa_bits, b.mantissa_bits);
        }
        let widths = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(widths)
    }
}

impl fmt::Display for BitWidthSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let labels: Vec<String> = self.widths.iter().map(|w| w.label()).collect();
        f.write_str(&labels.join(","))
    }
}

/// Rounding applied when reducing an aligned mantissa to the stored width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RoundingMode {
    /// Drop the low-order bits. Cross-precision conversion is bit-exact only in this mode.
    #[default]
    TruncateTowardZero,
    RoundHalfEven,
}

impl RoundingMode {
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            RoundingMode::TruncateTowardZero => x.trunc(),
            RoundingMode::RoundHalfEven => x.round_ties_even(),
        }
    }
}
