//! Tensors, model bundles, and the `FFPB` binary container.
//!
//! Stream layout (all integers little-endian):
//!
//! ```text
//! "FFPB"  u32 version  u32 tensor_count
//! per tensor:
//!   u16 name_len, name (UTF-8)
//!   u8 role (0 = weight, 1 = activation)
//!   u8 dtype (0 = FP32, 1 = FFP8)
//!   if FFP8: u8 x, u8 y, u8 z, i16 b
//!   u8 rank, u32 extent * rank
//!   payload: FP32 as 4 bytes each; codes as 1 byte each when n <= 8, else 2 bytes
//! u32 layer_count
//! per layer:
//!   u16 name_len, name
//!   u8 kind (0 = input, 1 = dense, 2 = relu, 3 = output)
//!   u8 ref_count, per ref: u16 len, tensor name
//! u32 metadata_count
//! per entry: u16 key_len, key, u32 value_len, value
//! ```
//!
//! Writing is canonical, so `write(read(s)) == s` for every stream `read` accepts.

use std::collections::HashSet;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{range_window, Codec, FormatError, FormatSpec};

pub const MAGIC: &[u8; 4] = b"FFPB";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("stream does not start with the FFPB magic")]
    BadMagic,
    #[error("unsupported container version {0}")]
    BadVersion(u32),
    #[error("stream ended early")]
    TruncatedStream,
    #[error("duplicate tensor name {0:?}")]
    DuplicateTensorName(String),
    #[error("layer {layer:?} references unknown tensor {tensor:?}")]
    UnresolvedReference { layer: String, tensor: String },
    #[error("invalid {field} tag {tag}")]
    BadTag { field: &'static str, tag: u8 },
    #[error("name is not valid UTF-8")]
    BadUtf8,
    #[error("{0} is too long for the container")]
    TooLong(&'static str),
    #[error("tensor {name:?}: shape {shape:?} holds {expected} elements, payload has {actual}")]
    ShapeMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("tensor {0:?} has a zero extent")]
    ZeroExtent(String),
    #[error("code {code:#x} in tensor {name:?} does not fit its format")]
    CodeOutOfRange { name: String, code: u16 },
    #[error("{0} trailing bytes after the bundle")]
    TrailingBytes(usize),
    #[error("tensor {0:?} not found")]
    MissingTensor(String),
    #[error("tensor {0:?} holds FFP8 codes where FP32 data is required")]
    NotFp32(String),
    #[error("tensor {0:?} holds FP32 data where FFP8 codes are required")]
    NotQuantized(String),
    #[error("tensor {0:?} contains a non-finite value")]
    NonFinite(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Weight,
    Activation,
}

impl Role {
    fn tag(self) -> u8 {
        match self {
            Role::Weight => 0,
            Role::Activation => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, BundleError> {
        match tag {
            0 => Ok(Role::Weight),
            1 => Ok(Role::Activation),
            _ => Err(BundleError::BadTag { field: "role", tag }),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Weight => "weight",
            Role::Activation => "activation",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Fp32(Vec<f32>),
    Codes { format: FormatSpec, codes: Vec<u16> },
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::Fp32(v) => v.len(),
            Payload::Codes { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bitwise equality (FP32 compared by bit pattern, so NaN and `-0.0` are distinguished).
    pub fn bit_eq(&self, other: &Payload) -> bool {
        match (self, other) {
            (Payload::Fp32(a), Payload::Fp32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (a, b) => a == b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub role: Role,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl Tensor {
    pub fn fp32(name: impl Into<String>, role: Role, shape: Vec<usize>, data: Vec<f32>) -> Result<Self, BundleError> {
        let t = Tensor {
            name: name.into(),
            role,
            shape,
            payload: Payload::Fp32(data),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn validate(&self) -> Result<(), BundleError> {
        if self.shape.contains(&0) {
            return Err(BundleError::ZeroExtent(self.name.clone()));
        }
        if self.element_count() != self.payload.len() {
            return Err(BundleError::ShapeMismatch {
                name: self.name.clone(),
                shape: self.shape.clone(),
                expected: self.element_count(),
                actual: self.payload.len(),
            });
        }
        if let Payload::Codes { format, codes } = &self.payload {
            if let Some(&code) = codes.iter().find(|&&c| u32::from(c) >= format.code_count()) {
                return Err(BundleError::CodeOutOfRange {
                    name: self.name.clone(),
                    code,
                });
            }
        }
        Ok(())
    }

    pub fn as_fp32(&self) -> Result<&[f32], BundleError> {
        match &self.payload {
            Payload::Fp32(v) => Ok(v),
            Payload::Codes { .. } => Err(BundleError::NotFp32(self.name.clone())),
        }
    }

    pub fn format(&self) -> Option<FormatSpec> {
        match &self.payload {
            Payload::Fp32(_) => None,
            Payload::Codes { format, .. } => Some(*format),
        }
    }

    /// FP32 view of the payload, dequantizing code tensors.
    pub fn to_fp32_values(&self) -> Result<Vec<f32>, BundleError> {
        match &self.payload {
            Payload::Fp32(v) => Ok(v.clone()),
            Payload::Codes { .. } => match dequantize_tensor(self)?.payload {
                Payload::Fp32(v) => Ok(v),
                Payload::Codes { .. } => unreachable!("dequantize yields FP32"),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Input,
    Dense,
    Relu,
    Output,
}

impl LayerKind {
    fn tag(self) -> u8 {
        match self {
            LayerKind::Input => 0,
            LayerKind::Dense => 1,
            LayerKind::Relu => 2,
            LayerKind::Output => 3,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, BundleError> {
        match tag {
            0 => Ok(LayerKind::Input),
            1 => Ok(LayerKind::Dense),
            2 => Ok(LayerKind::Relu),
            3 => Ok(LayerKind::Output),
            _ => Err(BundleError::BadTag { field: "layer kind", tag }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    /// Tensor names; dense layers reference `[weight, bias]`.
    pub tensors: Vec<String>,
}

/// Named tensors plus a linear layer chain and free-form metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelBundle {
    pub layers: Vec<Layer>,
    pub tensors: Vec<Tensor>,
    pub metadata: Vec<(String, String)>,
}

impl ModelBundle {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn metadata_value(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn dense_layers(&self) -> impl Iterator<Item = &Layer> {
        self.layers.iter().filter(|l| l.kind == LayerKind::Dense)
    }

    /// Checks tensor validity, name uniqueness, and that layer references resolve.
    pub fn validate(&self) -> Result<(), BundleError> {
        let mut names = HashSet::new();
        for t in &self.tensors {
            if !names.insert(t.name.as_str()) {
                return Err(BundleError::DuplicateTensorName(t.name.clone()));
            }
            t.validate()?;
        }
        for layer in &self.layers {
            for r in &layer.tensors {
                if !names.contains(r.as_str()) {
                    return Err(BundleError::UnresolvedReference {
                        layer: layer.name.clone(),
                        tensor: r.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Bitwise structural equality.
    pub fn bit_eq(&self, other: &ModelBundle) -> bool {
        self.layers == other.layers
            && self.metadata == other.metadata
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.name == b.name && a.role == b.role && a.shape == b.shape && a.payload.bit_eq(&b.payload)
            })
    }
}

fn put_str16(out: &mut Vec<u8>, s: &str, what: &'static str) -> Result<(), BundleError> {
    let len = u16::try_from(s.len()).map_err(|_| BundleError::TooLong(what))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

/// Serializes a bundle to its canonical byte stream.
pub fn write_bundle(m: &ModelBundle) -> Result<Vec<u8>, BundleError> {
    m.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(m.tensors.len()).map_err(|_| BundleError::TooLong("tensor list"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for t in &m.tensors {
        put_str16(&mut out, &t.name, "tensor name")?;
        out.push(t.role.tag());
        match &t.payload {
            Payload::Fp32(_) => out.push(0),
            Payload::Codes { format, .. } => {
                out.push(1);
                out.push(format.sign_bits());
                out.push(format.exponent_bits());
                out.push(format.fraction_bits());
                out.extend_from_slice(&(format.bias() as i16).to_le_bytes());
            }
        }
        let rank = u8::try_from(t.shape.len()).map_err(|_| BundleError::TooLong("tensor rank"))?;
        out.push(rank);
        for &extent in &t.shape {
            let e = u32::try_from(extent).map_err(|_| BundleError::TooLong("tensor extent"))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        match &t.payload {
            Payload::Fp32(values) => {
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Payload::Codes { format, codes } => {
                if format.width() <= 8 {
                    out.extend(codes.iter().map(|&c| c as u8));
                } else {
                    for c in codes {
                        out.extend_from_slice(&c.to_le_bytes());
                    }
                }
            }
        }
    }
    let layers = u32::try_from(m.layers.len()).map_err(|_| BundleError::TooLong("layer list"))?;
    out.extend_from_slice(&layers.to_le_bytes());
    for layer in &m.layers {
        put_str16(&mut out, &layer.name, "layer name")?;
        out.push(layer.kind.tag());
        let refs = u8::try_from(layer.tensors.len()).map_err(|_| BundleError::TooLong("layer references"))?;
        out.push(refs);
        for r in &layer.tensors {
            put_str16(&mut out, r, "tensor reference")?;
        }
    }
    let entries = u32::try_from(m.metadata.len()).map_err(|_| BundleError::TooLong("metadata"))?;
    out.extend_from_slice(&entries.to_le_bytes());
    for (k, v) in &m.metadata {
        put_str16(&mut out, k, "metadata key")?;
        let len = u32::try_from(v.len()).map_err(|_| BundleError::TooLong("metadata value"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(v.as_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BundleError> {
        let end = self.pos.checked_add(n).ok_or(BundleError::TruncatedStream)?;
        let slice = self.buf.get(self.pos..end).ok_or(BundleError::TruncatedStream)?;
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, BundleError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, BundleError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn i16(&mut self) -> Result<i16, BundleError> {
        Ok(i16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, BundleError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn utf8(&mut self, len: usize) -> Result<String, BundleError> {
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| BundleError::BadUtf8)
    }

    fn str16(&mut self) -> Result<String, BundleError> {
        let len = self.u16()?;
        self.utf8(len.into())
    }
}

/// Parses a complete `FFPB` stream.
pub fn read_bundle(bytes: &[u8]) -> Result<ModelBundle, BundleError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic = cur.take(4).map_err(|_| BundleError::BadMagic)?;
    if magic != MAGIC {
        return Err(BundleError::BadMagic);
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(BundleError::BadVersion(version));
    }
    let count = cur.u32()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name = cur.str16()?;
        let role = Role::from_tag(cur.u8()?)?;
        let format = match cur.u8()? {
            0 => None,
            1 => {
                let x = cur.u8()?;
                let y = cur.u8()?;
                let z = cur.u8()?;
                let b = cur.i16()?;
                Some(FormatSpec::from_fields(x, y, z, b.into())?)
            }
            tag => return Err(BundleError::BadTag { field: "dtype", tag }),
        };
        let rank = cur.u8()?;
        let shape = (0..rank)
            .map(|_| cur.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let elements = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or(BundleError::TruncatedStream)?;
        let payload = match format {
            None => {
                let raw = cur.take(elements.checked_mul(4).ok_or(BundleError::TruncatedStream)?)?;
                Payload::Fp32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            Some(format) => {
                let codes = if format.width() <= 8 {
                    cur.take(elements)?.iter().map(|&b| u16::from(b)).collect()
                } else {
                    let raw = cur.take(elements.checked_mul(2).ok_or(BundleError::TruncatedStream)?)?;
                    raw.chunks_exact(2)
                        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                        .collect()
                };
                Payload::Codes { format, codes }
            }
        };
        tensors.push(Tensor {
            name,
            role,
            shape,
            payload,
        });
    }
    let layer_count = cur.u32()?;
    let mut layers = Vec::new();
    for _ in 0..layer_count {
        let name = cur.str16()?;
        let kind = LayerKind::from_tag(cur.u8()?)?;
        let refs = cur.u8()?;
        let tensors = (0..refs).map(|_| cur.str16()).collect::<Result<Vec<_>, _>>()?;
        layers.push(Layer { name, kind, tensors });
    }
    let entries = cur.u32()?;
    let mut metadata = Vec::new();
    for _ in 0..entries {
        let key = cur.str16()?;
        let len = cur.u32()?;
        let value = cur.utf8(len as usize)?;
        metadata.push((key, value));
    }
    if cur.pos != bytes.len() {
        return Err(BundleError::TrailingBytes(bytes.len() - cur.pos));
    }
    let bundle = ModelBundle {
        layers,
        tensors,
        metadata,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn write_bundle_to<W: Write>(m: &ModelBundle, mut w: W) -> Result<(), BundleError> {
    w.write_all(&write_bundle(m)?)?;
    Ok(())
}

pub fn read_bundle_from<R: Read>(mut r: R) -> Result<ModelBundle, BundleError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    read_bundle(&buf)
}

/// Window occupancy and error of one quantization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    /// Elements with `0 < |v| < min_subnormal`.
    pub below_window_count: u64,
    /// Elements with `|v| > max`.
    pub above_window_count: u64,
    pub in_window_count: u64,
    pub mse: f64,
    pub max_abs_err: f64,
    /// `+inf` when the quantization is lossless.
    pub sqnr_db: f64,
}

impl QuantReport {
    pub fn element_count(&self) -> u64 {
        self.below_window_count + self.above_window_count + self.in_window_count
    }
}

/// `10 log10(signal / noise)`, `+inf` when the noise power is zero.
pub fn sqnr_db(signal_power: f64, noise_power: f64) -> f64 {
    if noise_power > 0.0 {
        10.0 * (signal_power / noise_power).log10()
    } else {
        f64::INFINITY
    }
}

/// Rounds `values` through `codec`, returning codes and the quantization report.
pub(crate) fn quantize_values(values: &[f32], codec: &Codec) -> Result<(Vec<u16>, QuantReport), FormatError> {
    let window = range_window(codec.format());
    let mut codes = Vec::with_capacity(values.len());
    let (mut below, mut above) = (0u64, 0u64);
    let (mut signal, mut noise, mut max_abs_err) = (0.0f64, 0.0f64, 0.0f64);
    for &v in values {
        let v = f64::from(v);
        let code = codec.encode(v)?;
        let err = codec.value(code) - v;
        let mag = v.abs();
        if mag > 0.0 && mag < window.min_subnormal {
            below += 1;
        } else if mag > window.max {
            above += 1;
        }
        signal += v * v;
        noise += err * err;
        max_abs_err = max_abs_err.max(err.abs());
        codes.push(code);
    }
    let n = values.len() as u64;
    let report = QuantReport {
        below_window_count: below,
        above_window_count: above,
        in_window_count: n - below - above,
        mse: if n == 0 { 0.0 } else { noise / n as f64 },
        max_abs_err,
        sqnr_db: sqnr_db(signal, noise),
    };
    Ok((codes, report))
}

/// Encodes an FP32 tensor elementwise with round-to-nearest-even.
pub fn quantize_tensor(t: &Tensor, fmt: FormatSpec) -> Result<(Tensor, QuantReport), BundleError> {
    let values = t.as_fp32()?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(BundleError::NonFinite(t.name.clone()));
    }
    let (codes, report) = quantize_values(values, &Codec::new(fmt))?;
    let q = Tensor {
        name: t.name.clone(),
        role: t.role,
        shape: t.shape.clone(),
        payload: Payload::Codes { format: fmt, codes },
    };
    Ok((q, report))
}

/// Expands an FFP8 code tensor to FP32 through the binary32 converter.
pub fn dequantize_tensor(t: &Tensor) -> Result<Tensor, BundleError> {
    let Payload::Codes { format, codes } = &t.payload else {
        return Err(BundleError::NotQuantized(t.name.clone()));
    };
    let lut = fp32_lookup(*format)?;
    let values = codes
        .iter()
        .map(|&c| {
            lut.get(usize::from(c))
                .copied()
                .ok_or(BundleError::CodeOutOfRange {
                    name: t.name.clone(),
                    code: c,
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Tensor {
        name: t.name.clone(),
        role: t.role,
        shape: t.shape.clone(),
        payload: Payload::Fp32(values),
    })
}

fn fp32_lookup(format: FormatSpec) -> Result<Vec<f32>, FormatError> {
    (0..format.code_count())
        .map(|c| crate::format::to_fp32_bits(format, c as u16).map(f32::from_bits))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e4m3() -> FormatSpec {
        FormatSpec::from_fields(1, 4, 3, 7).unwrap()
    }

    fn small_bundle() -> ModelBundle {
        ModelBundle {
            layers: vec![Layer {
                name: "fc".into(),
                kind: LayerKind::Dense,
                tensors: vec!["w".into()],
            }],
            tensors: vec![Tensor::fp32("w", Role::Weight, vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap()],
            metadata: vec![("origin".into(), "test".into())],
        }
    }

    #[test]
    fn single_tensor_layout() {
        let m = ModelBundle {
            layers: vec![],
            tensors: vec![Tensor::fp32("w", Role::Weight, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()],
            metadata: vec![],
        };
        let bytes = write_bundle(&m).unwrap();
        // magic + version + count, then name(2+1) role dtype rank extents(8)
        let header = 4 + 4 + 4 + 3 + 1 + 1 + 1 + 8;
        assert_eq!(bytes.len(), header + 16 + 4 + 4);
        assert_eq!(&bytes[..4], b"FFPB");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[header..header + 4], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[header + 12..header + 16], &4.0f32.to_le_bytes());
        assert!(read_bundle(&bytes).unwrap().bit_eq(&m));
    }

    #[test]
    fn round_trip_with_codes() {
        let mut m = small_bundle();
        let (q, _) = quantize_tensor(&m.tensors[0], e4m3()).unwrap();
        let wide = FormatSpec::from_fields(1, 5, 10, 15).unwrap();
        let (q16, _) = quantize_tensor(&Tensor::fp32("h", Role::Activation, vec![3], vec![0.1, 0.2, -7.0]).unwrap(), wide).unwrap();
        m.tensors[0] = q;
        m.tensors.push(q16);
        let bytes = write_bundle(&m).unwrap();
        let back = read_bundle(&bytes).unwrap();
        assert!(back.bit_eq(&m));
        assert_eq!(write_bundle(&back).unwrap(), bytes);
    }

    #[test]
    fn reader_errors() {
        let bytes = write_bundle(&small_bundle()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_bundle(&bad), Err(BundleError::BadMagic)));
        assert!(matches!(read_bundle(b"FF"), Err(BundleError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(read_bundle(&bad), Err(BundleError::BadVersion(2))));
        for cut in [8, 12, 20, bytes.len() - 1] {
            assert!(matches!(read_bundle(&bytes[..cut]), Err(BundleError::TruncatedStream)), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(read_bundle(&extra), Err(BundleError::TrailingBytes(1))));
    }

    #[test]
    fn duplicate_and_unresolved() {
        let mut m = small_bundle();
        m.tensors.push(m.tensors[0].clone());
        assert!(matches!(write_bundle(&m), Err(BundleError::DuplicateTensorName(_))));
        let mut m = small_bundle();
        m.layers[0].tensors.push("missing".into());
        assert!(matches!(write_bundle(&m), Err(BundleError::UnresolvedReference { .. })));
    }

    #[test]
    fn quantize_counts_window() {
        let t = Tensor::fp32("t", Role::Weight, vec![3], vec![0.001, 0.5, 100.0]).unwrap();
        let (_, r) = quantize_tensor(&t, e4m3()).unwrap();
        assert_eq!(r.below_window_count, 1);
        assert_eq!(r.above_window_count, 0);
        assert_eq!(r.in_window_count, 2);
    }

    #[test]
    fn zeros_quantize_losslessly() {
        let t = Tensor::fp32("z", Role::Activation, vec![4], vec![0.0; 4]).unwrap();
        let (q, r) = quantize_tensor(&t, e4m3()).unwrap();
        assert_eq!(q.payload, Payload::Codes { format: e4m3(), codes: vec![0; 4] });
        assert_eq!(r.mse, 0.0);
        assert_eq!(r.sqnr_db, f64::INFINITY);
        assert_eq!(dequantize_tensor(&q).unwrap().as_fp32().unwrap(), &[0.0; 4]);
    }

    #[test]
    fn dequantize_max_codes() {
        let t = Tensor {
            name: "m".into(),
            role: Role::Weight,
            shape: vec![3],
            payload: Payload::Codes { format: e4m3(), codes: vec![0x7F; 3] },
        };
        assert_eq!(dequantize_tensor(&t).unwrap().as_fp32().unwrap(), &[480.0; 3]);
    }

    #[test]
    fn representable_tensor_is_fixed_point() {
        let data = vec![1.0, -0.5, 0.375, 480.0, 2f32.powi(-9)];
        let t = Tensor::fp32("r", Role::Weight, vec![5], data.clone()).unwrap();
        let (q, r) = quantize_tensor(&t, e4m3()).unwrap();
        assert_eq!(dequantize_tensor(&q).unwrap().as_fp32().unwrap(), data.as_slice());
        assert_eq!(r.sqnr_db, f64::INFINITY);
    }

    #[test]
    fn non_finite_rejected() {
        let t = Tensor::fp32("n", Role::Weight, vec![1], vec![f32::NAN]).unwrap();
        assert!(matches!(quantize_tensor(&t, e4m3()), Err(BundleError::NonFinite(_))));
    }

    #[test]
    fn shape_checks() {
        assert!(matches!(
            Tensor::fp32("s", Role::Weight, vec![2, 3], vec![0.0; 5]),
            Err(BundleError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            Tensor::fp32("s", Role::Weight, vec![0], vec![]),
            Err(BundleError::ZeroExtent(_))
        ));
    }
}
