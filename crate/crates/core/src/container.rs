//! `.sefp` container: a flat, byte-exact file of named SEFP tensors, plus the
//! analytic memory estimator for weights and KV cache.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SEFP" | version u8 | e u8 | m u8 | group_size u32 | tensor_count u32
//! per tensor:
//!   name_len u16 | name (UTF-8) | rank u8 | dims u64 * rank
//!   exponents: one byte per group (biased)
//!   signs:     1 bit per element, MSB-first, padded to a byte
//!   mantissas: m bits per element, MSB-first, padded to a byte
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sefp::{BitWidthConfig, CodecError, SefpTensor};

pub const MAGIC: [u8; 4] = *b"SEFP";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 15;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic {0:02x?}, not a SEFP container")]
    BadMagic([u8; 4]),
    #[error("unknown container version {0}")]
    UnknownVersion(u8),
    #[error("truncated container while reading {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after last tensor")]
    TrailingBytes(usize),
    #[error("tensor {name:?} is {found} with group size {found_group}, container is {expected} with group size {expected_group}")]
    MixedConfig {
        name: String,
        expected: String,
        expected_group: usize,
        found: String,
        found_group: usize,
    },
    #[error("tensor name is {0} bytes, limit is 65535")]
    NameTooLong(usize),
    #[error("too many tensors or dimensions for the format: {0}")]
    TooLarge(String),
    #[error("tensor name is not UTF-8")]
    BadName,
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Width and group size shared by every tensor of a container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContainerHeader {
    pub config: BitWidthConfig,
    pub group_size: usize,
    pub tensor_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    config: BitWidthConfig,
    group_size: usize,
    tensors: Vec<(String, SefpTensor)>,
}

impl Container {
    pub fn new(config: BitWidthConfig, group_size: usize) -> Self {
        Self {
            config,
            group_size,
            tensors: Vec::new(),
        }
    }

    /// Takes config and group size from the first tensor; fails on an empty list.
    pub fn from_tensors(tensors: Vec<(String, SefpTensor)>) -> Result<Self, ContainerError> {
        let first = tensors
            .first()
            .map(|(_, t)| (t.config(), t.group_size()))
            .ok_or(ContainerError::Truncated("tensor list (empty, no config to infer)"))?;
        let mut c = Self::new(first.0, first.1);
        for (name, t) in tensors {
            c.push(name, t)?;
        }
        Ok(c)
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: SefpTensor) -> Result<(), ContainerError> {
        let name = name.into();
        if tensor.config() != self.config || tensor.group_size() != self.group_size {
            return Err(ContainerError::MixedConfig {
                name,
                expected: self.config.label(),
                expected_group: self.group_size,
                found: tensor.config().label(),
                found_group: tensor.group_size(),
            });
        }
        if name.len() > u16::MAX as usize {
            return Err(ContainerError::NameTooLong(name.len()));
        }
        self.tensors.push((name, tensor));
        Ok(())
    }

    pub fn header(&self) -> ContainerHeader {
        ContainerHeader {
            config: self.config,
            group_size: self.group_size,
            tensor_count: self.tensors.len(),
        }
    }

    pub fn config(&self) -> BitWidthConfig {
        self.config
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn tensors(&self) -> &[(String, SefpTensor)] {
        &self.tensors
    }

    pub fn into_tensors(self) -> Vec<(String, SefpTensor)> {
        self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&SefpTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Applies `f` to every tensor, e.g. a precision truncation.
    pub fn try_map(
        self,
        f: impl Fn(&SefpTensor) -> Result<SefpTensor, CodecError>,
    ) -> Result<Self, ContainerError> {
        let mut out: Option<Container> = None;
        let (config, group) = (self.config, self.group_size);
        for (name, t) in self.tensors {
            let mapped = f(&t)?;
            let c = out.get_or_insert_with(|| Container::new(mapped.config(), mapped.group_size()));
            c.push(name, mapped)?;
        }
        Ok(out.unwrap_or_else(|| Container::new(config, group)))
    }
}

fn pack_signs(signs: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; signs.len().div_ceil(8)];
    for (i, &s) in signs.iter().enumerate() {
        if s {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

fn unpack_signs(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect()
}

fn pack_mantissas(mantissas: &[u16], bits: u8) -> Vec<u8> {
    let bits = bits as usize;
    let mut out = vec![0u8; (mantissas.len() * bits).div_ceil(8)];
    let mut pos = 0;
    for &v in mantissas {
        for b in (0..bits).rev() {
            if (v >> b) & 1 == 1 {
                out[pos / 8] |= 0x80 >> (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

fn unpack_mantissas(bytes: &[u8], n: usize, bits: u8) -> Vec<u16> {
    let mut pos = 0;
    (0..n)
        .map(|_| {
            let mut v = 0u16;
            for _ in 0..bits {
                v = (v << 1) | u16::from(bytes[pos / 8] & (0x80 >> (pos % 8)) != 0);
                pos += 1;
            }
            v
        })
        .collect()
}

/// Payload bytes for `elements` values in `groups` groups at `m` mantissa bits.
pub fn payload_len(elements: usize, groups: usize, m: u8) -> usize {
    groups + elements.div_ceil(8) + (elements * m as usize).div_ceil(8)
}

/// Serializes the container; returns the number of bytes written.
pub fn write<W: Write>(container: &Container, sink: &mut W) -> Result<usize, ContainerError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.push(VERSION);
    buf.push(container.config.exponent_bits());
    buf.push(container.config.mantissa_bits());
    let group = u32::try_from(container.group_size)
        .map_err(|_| ContainerError::TooLarge(format!("group size {}", container.group_size)))?;
    buf.extend_from_slice(&group.to_le_bytes());
    let count = u32::try_from(container.tensors.len())
        .map_err(|_| ContainerError::TooLarge(format!("{} tensors", container.tensors.len())))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, t) in &container.tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| ContainerError::TooLarge(format!("rank {}", t.shape().len())))?;
        buf.push(rank);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.extend_from_slice(t.shared_exponents());
        buf.extend_from_slice(&pack_signs(t.signs()));
        buf.extend_from_slice(&pack_mantissas(t.mantissas(), container.config.mantissa_bits()));
    }
    sink.write_all(&buf)?;
    Ok(buf.len())
}

pub fn to_bytes(container: &Container) -> Result<Vec<u8>, ContainerError> {
    let mut out = Vec::new();
    write(container, &mut out)?;
    Ok(out)
}

fn read_exact<R: Read>(src: &mut R, n: usize, what: &'static str) -> Result<Vec<u8>, ContainerError> {
    // grows with the data actually present, so a lying header cannot force a huge allocation
    let mut buf = Vec::new();
    src.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() < n {
        return Err(ContainerError::Truncated(what));
    }
    Ok(buf)
}

fn read_array<const N: usize, R: Read>(src: &mut R, what: &'static str) -> Result<[u8; N], ContainerError> {
    let v = read_exact(src, N, what)?;
    Ok(v.try_into().expect("length checked"))
}

/// Parses a whole container; the stream must end right after the last tensor.
pub fn read<R: Read>(source: &mut R) -> Result<Container, ContainerError> {
    let magic: [u8; 4] = read_array(source, "magic")?;
    if magic != MAGIC {
        return Err(ContainerError::BadMagic(magic));
    }
    let [version] = read_array(source, "version")?;
    if version != VERSION {
        return Err(ContainerError::UnknownVersion(version));
    }
    let [e, m] = read_array(source, "bit-width")?;
    let config = BitWidthConfig::new(e, m)?;
    let group_size = u32::from_le_bytes(read_array(source, "group size")?) as usize;
    let count = u32::from_le_bytes(read_array(source, "tensor count")?) as usize;
    let mut container = Container::new(config, group_size);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_array(source, "name length")?) as usize;
        let name = String::from_utf8(read_exact(source, name_len, "name")?).map_err(|_| ContainerError::BadName)?;
        let [rank] = read_array(source, "rank")?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let d = u64::from_le_bytes(read_array(source, "dims")?);
            shape.push(usize::try_from(d).map_err(|_| ContainerError::TooLarge(format!("dimension {d}")))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(16).is_some())
            .ok_or_else(|| ContainerError::TooLarge(format!("shape {shape:?}")))?;
        if group_size == 0 {
            return Err(CodecError::ZeroGroupSize.into());
        }
        let groups = n.div_ceil(group_size);
        let exps = read_exact(source, groups, "shared exponents")?;
        let signs = unpack_signs(&read_exact(source, n.div_ceil(8), "sign plane")?, n);
        let mant_bytes = read_exact(source, (n * m as usize).div_ceil(8), "mantissa plane")?;
        let mantissas = unpack_mantissas(&mant_bytes, n, m);
        let t = SefpTensor::from_parts(shape, group_size, config, exps, signs, mantissas)?;
        container.push(name, t)?;
    }
    let mut rest = Vec::new();
    source.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(ContainerError::TrailingBytes(rest.len()));
    }
    Ok(container)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Container, ContainerError> {
    read(&mut &bytes[..])
}

/// How weights or KV entries are stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoragePrecision {
    Fp16,
    Sefp(BitWidthConfig),
}

impl std::str::FromStr for StoragePrecision {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("fp16") {
            Ok(StoragePrecision::Fp16)
        } else {
            s.parse().map(StoragePrecision::Sefp)
        }
    }
}

impl std::fmt::Display for StoragePrecision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StoragePrecision::Fp16 => f.write_str("fp16"),
            StoragePrecision::Sefp(c) => write!(f, "{c}"),
        }
    }
}

/// Storage bits per element: 16 for fp16, `1 + m + e/group_size` for SEFP.
pub fn bits_per_element(precision: StoragePrecision, group_size: usize) -> f64 {
    match precision {
        StoragePrecision::Fp16 => 16.0,
        StoragePrecision::Sefp(c) => {
            1.0 + f64::from(c.mantissa_bits()) + f64::from(c.exponent_bits()) / group_size as f64
        }
    }
}

/// KV-cache storage relative to the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvPrecision {
    Fp16,
    /// Same format as the weights.
    #[default]
    SameAsWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceModelSpec {
    #[serde(default)]
    pub name: String,
    pub parameter_count: u64,
    pub layer_count: u64,
    pub kv_head_count: u64,
    pub head_dim: u64,
    pub context_tokens: u64,
    #[serde(default)]
    pub kv_precision: KvPrecision,
}

impl DeviceModelSpec {
    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("parameter_count", self.parameter_count),
            ("layer_count", self.layer_count),
            ("kv_head_count", self.kv_head_count),
            ("head_dim", self.head_dim),
            ("context_tokens", self.context_tokens),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((f, _)) => Err(format!("{f} must be positive")),
            None => Ok(()),
        }
    }

    /// K and V entries across all layers for the full context.
    pub fn kv_elements(&self) -> u64 {
        2 * self.layer_count * self.kv_head_count * self.head_dim * self.context_tokens
    }
}

pub const GIB: f64 = (1u64 << 30) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MemoryEstimate {
    pub bits_per_weight: f64,
    pub weight_bytes: f64,
    pub kv_bytes: f64,
    pub total_bytes: f64,
}

impl MemoryEstimate {
    pub fn total_gib(&self) -> f64 {
        self.total_bytes / GIB
    }
}

pub fn estimate_memory(spec: &DeviceModelSpec, precision: StoragePrecision, group_size: usize) -> MemoryEstimate {
    let bits_per_weight = bits_per_element(precision, group_size);
    let kv_bits = match spec.kv_precision {
        KvPrecision::Fp16 => 16.0,
        KvPrecision::SameAsWeights => bits_per_weight,
    };
    let weight_bytes = spec.parameter_count as f64 * bits_per_weight / 8.0;
    let kv_bytes = spec.kv_elements() as f64 * kv_bits / 8.0;
    MemoryEstimate {
        bits_per_weight,
        weight_bytes,
        kv_bytes,
        total_bytes: weight_bytes + kv_bytes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sefp::{quantize_with_shape, RoundingMode};

    fn tensor(values: &[f64], shape: Vec<usize>, m: u8, group: usize) -> SefpTensor {
        quantize_with_shape(values, shape, BitWidthConfig::e5(m), group, RoundingMode::TruncateTowardZero).unwrap()
    }

    #[test]
    fn empty_container_is_header_only() {
        let c = Container::new(BitWidthConfig::e5(4), 64);
        let bytes = to_bytes(&c).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(bytes, b"SEFP\x01\x05\x04\x40\x00\x00\x00\x00\x00\x00\x00");
        assert_eq!(from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn one_group_payload_size() {
        let vals: Vec<f64> = (0..64).map(|i| i as f64 / 64.0 - 0.5).collect();
        let c = Container::from_tensors(vec![("w".into(), tensor(&vals, vec![64], 4, 64))]).unwrap();
        let bytes = to_bytes(&c).unwrap();
        let meta = 2 + 1 + 1 + 8;
        assert_eq!(bytes.len(), HEADER_LEN + meta + 1 + 8 + 32);
        assert_eq!(payload_len(64, 1, 4), 41);
        assert_eq!(from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn bit_packing_is_msb_first() {
        assert_eq!(pack_signs(&[true, false, false, false, false, false, false, false, true]), vec![0x80, 0x80]);
        assert_eq!(pack_mantissas(&[0b101, 0b011, 0b111], 3), vec![0b1010_1111, 0b1000_0000]);
        assert_eq!(unpack_mantissas(&[0b1010_1111, 0b1000_0000], 3, 3), vec![5, 3, 7]);
    }

    #[test]
    fn read_errors_are_distinct() {
        let c = Container::from_tensors(vec![("a".into(), tensor(&[1.0, -2.0, 0.5], vec![3], 5, 2))]).unwrap();
        let bytes = to_bytes(&c).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(ContainerError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(from_bytes(&bad), Err(ContainerError::UnknownVersion(2))));
        for cut in [3, 10, HEADER_LEN + 1, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut]), Err(ContainerError::Truncated(_))), "cut {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(from_bytes(&long), Err(ContainerError::TrailingBytes(1))));
    }

    #[test]
    fn huge_declared_shape_does_not_allocate() {
        let mut bytes = to_bytes(&Container::new(BitWidthConfig::e5(4), 64)).unwrap();
        bytes[11] = 1;
        bytes.extend_from_slice(&[1, 0, b'x', 1]);
        bytes.extend_from_slice(&(1u64 << 40).to_le_bytes());
        assert!(matches!(from_bytes(&bytes), Err(ContainerError::Truncated(_))));
    }

    #[test]
    fn mixed_configs_rejected() {
        let a = tensor(&[1.0], vec![1], 4, 64);
        let b = tensor(&[1.0], vec![1], 3, 64);
        let err = Container::from_tensors(vec![("a".into(), a.clone()), ("b".into(), b)]).unwrap_err();
        assert!(matches!(err, ContainerError::MixedConfig { .. }));
        let mut c = Container::new(BitWidthConfig::e5(4), 64);
        assert!(matches!(c.push("x".repeat(70_000), a), Err(ContainerError::NameTooLong(70_000))));
    }

    fn llama3_8b() -> DeviceModelSpec {
        DeviceModelSpec {
            name: "llama3-8b".into(),
            parameter_count: 8_030_000_000,
            layer_count: 32,
            kv_head_count: 8,
            head_dim: 128,
            context_tokens: 2000,
            kv_precision: KvPrecision::SameAsWeights,
        }
    }

    #[test]
    fn memory_arithmetic() {
        let e5m4 = StoragePrecision::Sefp(BitWidthConfig::e5(4));
        assert_eq!(bits_per_element(e5m4, 64), 5.078125);
        let spec = llama3_8b();
        let fp = estimate_memory(&spec, StoragePrecision::Fp16, 64);
        // weights 16.06e9 B, KV 131,072,000 elements * 2 B
        assert_eq!(fp.weight_bytes, 16.06e9);
        assert_eq!(fp.kv_bytes, 262_144_000.0);
        let q = estimate_memory(&spec, e5m4, 64);
        assert!((q.total_gib() - 4.77).abs() / 4.77 < 0.05);
        assert!((fp.total_gib() - 15.20).abs() / 15.20 < 0.05);
        let mut prev = 0.0;
        for m in 3..=8 {
            let t = estimate_memory(&spec, StoragePrecision::Sefp(BitWidthConfig::e5(m)), 64).total_bytes;
            assert!(t > prev);
            prev = t;
        }
    }

    #[test]
    fn spec_json_round_trip() {
        let json = r#"{"parameter_count":8030000000,"layer_count":32,"kv_head_count":8,"head_dim":128,"context_tokens":2000}"#;
        let spec: DeviceModelSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.kv_precision, KvPrecision::SameAsWeights);
        assert!(spec.validate().is_ok());
        assert!(DeviceModelSpec { head_dim: 0, ..spec }.validate().is_err());
        assert_eq!("fp16".parse::<StoragePrecision>().unwrap(), StoragePrecision::Fp16);
        assert_eq!("E5M4".parse::<StoragePrecision>().unwrap().to_string(), "E5M4");
    }
}
