use super::{BitWidthConfig, CodecError, RoundingMode};

pub const DEFAULT_GROUP_SIZE: usize = 64;

/// A tensor stored as shared-exponent groups.
///
/// Every run of `group_size` consecutive elements (row-major) shares one
/// biased exponent. Each element keeps a sign bit and a `mantissa_bits`-wide
/// unsigned mantissa whose top bit is the explicit integer bit:
///
/// ```text
/// value = (-1)^sign * mantissa / 2^(m-1) * 2^(biased - bias)
/// ```
///
/// A biased exponent of 0 marks a group whose inputs were all zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SefpTensor {
    shape: Vec<usize>,
    group_size: usize,
    config: BitWidthConfig,
    shared_exponents: Vec<u8>,
    signs: Vec<bool>,
    mantissas: Vec<u16>,
}

impl SefpTensor {
    /// Assembles a tensor from raw planes, checking every structural invariant.
    pub fn from_parts(
        shape: Vec<usize>,
        group_size: usize,
        config: BitWidthConfig,
        shared_exponents: Vec<u8>,
        signs: Vec<bool>,
        mantissas: Vec<u16>,
    ) -> Result<Self, CodecError> {
        let tensor = Self {
            shape,
            group_size,
            config,
            shared_exponents,
            signs,
            mantissas,
        };
        tensor.validate()?;
        Ok(tensor)
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        let malformed = |msg: String| Err(CodecError::Malformed(msg));
        if self.group_size == 0 {
            return Err(CodecError::ZeroGroupSize);
        }
        let n = self.len();
        if self.signs.len() != n || self.mantissas.len() != n {
            return malformed(format!(
                "expected {n} signs and mantissas, found {} and {}",
                self.signs.len(),
                self.mantissas.len()
            ));
        }
        if self.shared_exponents.len() != self.group_count() {
            return malformed(format!(
                "expected {} shared exponents, found {}",
                self.group_count(),
                self.shared_exponents.len()
            ));
        }
        let limit = self.config.mantissa_limit();
        let lead = limit >> 1;
        let max_biased = (1u32 << self.config.exponent_bits()) - 1;
        for (g, &biased) in self.shared_exponents.iter().enumerate() {
            if u32::from(biased) > max_biased {
                return malformed(format!("group {g}: exponent {biased} exceeds field width"));
            }
            let span = self.group_range(g);
            let group = &self.mantissas[span.clone()];
            if let Some(i) = group.iter().position(|&m| u32::from(m) >= limit) {
                return malformed(format!("element {}: mantissa wider than {} bits", span.start + i, self.config.mantissa_bits()));
            }
            match biased {
                0 if group.iter().any(|&m| m != 0) => {
                    return malformed(format!("group {g}: zero group carries nonzero mantissas"));
                }
                // The minimum exponent also hosts groups whose true maximum lies below it.
                0 | 1 => {}
                _ if !group.iter().any(|&m| u32::from(m) >= lead) => {
                    return malformed(format!("group {g}: no normalized element"));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn group_count(&self) -> usize {
        self.len().div_ceil(self.group_size)
    }

    pub fn config(&self) -> BitWidthConfig {
        self.config
    }

    /// Biased exponents, one per group.
    pub fn shared_exponents(&self) -> &[u8] {
        &self.shared_exponents
    }

    pub fn signs(&self) -> &[bool] {
        &self.signs
    }

    pub fn mantissas(&self) -> &[u16] {
        &self.mantissas
    }

    /// Unbiased exponent of group `g`, or `None` for a zero group.
    pub fn unbiased_exponent(&self, g: usize) -> Option<i32> {
        match self.shared_exponents[g] {
            0 => None,
            b => Some(i32::from(b) - self.config.bias()),
        }
    }

    fn group_range(&self, g: usize) -> std::ops::Range<usize> {
        let start = g * self.group_size;
        start..(start + self.group_size).min(self.len())
    }

    /// Same data viewed under a different shape with the same element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, CodecError> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(CodecError::Malformed(format!(
                "cannot reshape {} elements into {:?}",
                self.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Exact binary exponent of a finite nonzero value: `2^e <= |x| < 2^(e+1)`.
pub(crate) fn binary_exponent(x: f64) -> i32 {
    let bits = x.abs().to_bits();
    let biased = (bits >> 52) as i32;
    if biased == 0 {
        let frac = bits & ((1u64 << 52) - 1);
        -1074 + (63 - frac.leading_zeros() as i32)
    } else {
        biased - 1023
    }
}

/// Quantizes a flat vector (shape `[len]`).
pub fn quantize(
    values: &[f64],
    config: BitWidthConfig,
    group_size: usize,
    mode: RoundingMode,
) -> Result<SefpTensor, CodecError> {
    quantize_with_shape(values, vec![values.len()], config, group_size, mode)
}

pub fn quantize_with_shape(
    values: &[f64],
    shape: Vec<usize>,
    config: BitWidthConfig,
    group_size: usize,
    mode: RoundingMode,
) -> Result<SefpTensor, CodecError> {
    if group_size == 0 {
        return Err(CodecError::ZeroGroupSize);
    }
    let n: usize = shape.iter().product();
    if n != values.len() {
        return Err(CodecError::Malformed(format!(
            "shape {:?} holds {n} elements but {} values were given",
            shape,
            values.len()
        )));
    }
    if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(CodecError::NonFinite { index, value });
    }

    let groups = n.div_ceil(group_size);
    let mut shared_exponents = Vec::with_capacity(groups);
    let mut mantissas = vec![0u16; n];
    let signs: Vec<bool> = values.iter().map(|v| v.is_sign_negative()).collect();

    for (g, chunk) in values.chunks(group_size).enumerate() {
        let start = g * group_size;
        let biased = quantize_group(
            chunk,
            start,
            config,
            mode,
            &mut mantissas[start..start + chunk.len()],
        )?;
        shared_exponents.push(biased);
    }

    Ok(SefpTensor {
        shape,
        group_size,
        config,
        shared_exponents,
        signs,
        mantissas,
    })
}

/// Aligns one group to its largest exponent and reduces every mantissa to
/// the configured width. Returns the biased shared exponent.
fn quantize_group(
    chunk: &[f64],
    offset: usize,
    config: BitWidthConfig,
    mode: RoundingMode,
    out: &mut [u16],
) -> Result<u8, CodecError> {
    let Some((argmax, max_exp)) = chunk
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, v)| (i, binary_exponent(*v)))
        .max_by_key(|&(_, e)| e)
    else {
        out.fill(0);
        return Ok(0);
    };
    if max_exp > config.max_exponent() {
        return Err(CodecError::ExponentOverflow {
            index: offset + argmax,
            exponent: max_exp,
            max: config.max_exponent(),
        });
    }
    let mut shared = max_exp.max(config.min_exponent());
    let limit = config.mantissa_limit();
    let m = i32::from(config.mantissa_bits());

    loop {
        let scale = exp2i(m - 1 - shared);
        let mut carried = false;
        for (slot, v) in out.iter_mut().zip(chunk) {
            let q = mode.apply(v.abs() * scale);
            if q >= f64::from(limit) {
                carried = true;
                break;
            }
            *slot = q as u16;
        }
        if !carried {
            break;
        }
        // Rounding carried the group maximum past the top bit.
        if shared < config.max_exponent() {
            shared += 1;
        } else {
            for (slot, v) in out.iter_mut().zip(chunk) {
                *slot = (mode.apply(v.abs() * scale)).min(f64::from(limit - 1)) as u16;
            }
            break;
        }
    }
    Ok((shared + config.bias()) as u8)
}

/// `2^k` for any `k` representable as a normal or subnormal double.
fn exp2i(k: i32) -> f64 {
    if (-1022..=1023).contains(&k) {
        f64::from_bits(((k + 1023) as u64) << 52)
    } else {
        2f64.powi(k)
    }
}

pub fn dequantize(tensor: &SefpTensor) -> Vec<f64> {
    let m = i32::from(tensor.config.mantissa_bits());
    let mut out = Vec::with_capacity(tensor.len());
    for g in 0..tensor.group_count() {
        let range = tensor.group_range(g);
        match tensor.unbiased_exponent(g) {
            None => out.extend(range.map(|i| if tensor.signs[i] { -0.0 } else { 0.0 })),
            Some(e) => {
                let step = exp2i(e - (m - 1));
                out.extend(range.map(|i| {
                    let mag = f64::from(tensor.mantissas[i]) * step;
                    if tensor.signs[i] {
                        -mag
                    } else {
                        mag
                    }
                }));
            }
        }
    }
    out
}

/// Narrows every mantissa to `target` by dropping low-order bits.
///
/// Exponents and signs are untouched, so the result equals quantizing the
/// original values directly at `target` under truncation.
pub fn truncate_precision(
    tensor: &SefpTensor,
    target: BitWidthConfig,
) -> Result<SefpTensor, CodecError> {
    let source = tensor.config;
    if target.exponent_bits() != source.exponent_bits() {
        return Err(CodecError::ExponentBitsMismatch {
            expected: source.exponent_bits(),
            found: target.exponent_bits(),
        });
    }
    if target.mantissa_bits() > source.mantissa_bits() {
        return Err(CodecError::Widening {
            from: source.label(),
            to: target.label(),
        });
    }
    let shift = source.mantissa_bits() - target.mantissa_bits();
    Ok(SefpTensor {
        shape: tensor.shape.clone(),
        group_size: tensor.group_size,
        config: target,
        shared_exponents: tensor.shared_exponents.clone(),
        signs: tensor.signs.clone(),
        mantissas: tensor.mantissas.iter().map(|&m| m >> shift).collect(),
    })
}

/// Quantization-error term `(w*2^m - [w*2^m]) / 2^m` with round-half-even brackets.
///
/// A sawtooth in `w` with period and peak-to-peak range `1/2^m`.
pub fn quantization_error_grad(values: &[f64], mantissa_bits: u8) -> Vec<f64> {
    quantization_error_grad_with(values, mantissa_bits, RoundingMode::RoundHalfEven)
}

pub fn quantization_error_grad_with(
    values: &[f64],
    mantissa_bits: u8,
    mode: RoundingMode,
) -> Vec<f64> {
    let scale = exp2i(i32::from(mantissa_bits));
    values
        .iter()
        .map(|&w| {
            let s = w * scale;
            (s - mode.apply(s)) / scale
        })
        .collect()
}
