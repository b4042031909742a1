//! 2-bit ternary packing and the `.twn` model container.
//!
//! Code assignment: `00` is 0, `01` is +1, `10` is -1, `11` is invalid.
//! Weight `j` of a group sits in bits `2*(j % 4)..2*(j % 4)+2` of byte
//! `j / 4`, and every group starts on a fresh byte. Padding bits are written
//! as zero and ignored on read.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "TWN1"  version:u16  layer_count:u16  input_rank:u8  input_dims:u32*rank
//! layer*  (kind:u8 followed by a kind-specific body)
//!   1 conv     mode:u8 stride:u16 pad:u16 weight:tensor bias:tensor
//!   2 dense    mode:u8 weight:tensor bias:tensor
//!   3 bn       eps:f32 gamma beta running_mean running_var  (tensors)
//!   4 relu
//!   5 maxpool  size:u16 stride:u16
//!   6 hinge    squared:u8
//!   7 softmax
//! tensor: tag:u8 rank:u8 dims:u32*rank, then
//!   tag 0 (raw)     f32 * numel
//!   tag 1 (packed)  groups:u32 group_size:u32 alphas:f32*groups bits
//! mode: 0 full, 1 ternary, 2 binary
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::nn::WeightMode;
use crate::quantizer::TernaryCode;
use crate::tensor::{DenseTensor, Shape, TensorError};

pub const MAGIC: &[u8; 4] = b"TWN1";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum PackError {
    #[error("{codes} codes do not fill {groups} groups of {group_size}")]
    LengthMismatch {
        codes: usize,
        groups: usize,
        group_size: usize,
    },
    #[error("shape {shape} holds {expected} weights, got {got}")]
    ShapeMismatch { shape: Shape, expected: usize, got: usize },
    #[error("group size must be positive")]
    ZeroGroupSize,
    #[error("scale {index} is {value}; scales must be finite and non-negative")]
    InvalidAlpha { index: usize, value: f32 },
    #[error("invalid 2-bit code 0b11 for weight {weight} (byte {byte})")]
    InvalidCode { weight: usize, byte: usize },
    #[error("packed buffer holds {got} bytes, expected {expected}")]
    BitsLength { expected: usize, got: usize },
    #[error("truncated input at byte offset {offset}: need {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown {what} tag {tag} at byte offset {offset}")]
    UnknownTag { what: &'static str, tag: u8, offset: usize },
    #[error("{0} trailing bytes after the last layer")]
    TrailingBytes(usize),
    #[error("invalid layer record {index}: {reason}")]
    InvalidLayer { index: usize, reason: String },
    #[error("model has no packed weight layers")]
    NoPackedLayers,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Ternary weights stored at two bits each, plus one scale per group.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedTernaryTensor {
    pub shape: Shape,
    pub groups: usize,
    pub group_size: usize,
    pub alphas: Vec<f32>,
    pub bits: Vec<u8>,
}

fn group_bytes(group_size: usize) -> usize {
    group_size.div_ceil(4)
}

fn encode(code: TernaryCode) -> u8 {
    match code {
        TernaryCode::Zero => 0b00,
        TernaryCode::Pos => 0b01,
        TernaryCode::Neg => 0b10,
    }
}

fn check_alphas(alphas: &[f32]) -> Result<(), PackError> {
    match alphas.iter().position(|a| !a.is_finite() || *a < 0.0) {
        Some(index) => Err(PackError::InvalidAlpha {
            index,
            value: alphas[index],
        }),
        None => Ok(()),
    }
}

/// Packs `codes` (row-major over `shape`) in groups of `group_size`, one
/// scale per group.
pub fn pack(
    shape: &Shape,
    codes: &[TernaryCode],
    alphas: &[f32],
    group_size: usize,
) -> Result<PackedTernaryTensor, PackError> {
    if group_size == 0 {
        return Err(PackError::ZeroGroupSize);
    }
    if codes.len() != shape.numel() {
        return Err(PackError::ShapeMismatch {
            shape: shape.clone(),
            expected: shape.numel(),
            got: codes.len(),
        });
    }
    if codes.len() != alphas.len() * group_size {
        return Err(PackError::LengthMismatch {
            codes: codes.len(),
            groups: alphas.len(),
            group_size,
        });
    }
    check_alphas(alphas)?;
    let stride = group_bytes(group_size);
    let mut bits = vec![0u8; alphas.len() * stride];
    for (g, chunk) in codes.chunks(group_size).enumerate() {
        let dst = &mut bits[g * stride..(g + 1) * stride];
        for (j, &c) in chunk.iter().enumerate() {
            dst[j / 4] |= encode(c) << (2 * (j % 4));
        }
    }
    Ok(PackedTernaryTensor {
        shape: shape.clone(),
        groups: alphas.len(),
        group_size,
        alphas: alphas.to_vec(),
        bits,
    })
}

impl PackedTernaryTensor {
    /// Validates raw parts, including every stored code.
    pub fn from_parts(
        shape: Shape,
        group_size: usize,
        alphas: Vec<f32>,
        bits: Vec<u8>,
    ) -> Result<Self, PackError> {
        if group_size == 0 {
            return Err(PackError::ZeroGroupSize);
        }
        let groups = alphas.len();
        if shape.numel() != groups * group_size {
            return Err(PackError::LengthMismatch {
                codes: shape.numel(),
                groups,
                group_size,
            });
        }
        check_alphas(&alphas)?;
        let expected = groups * group_bytes(group_size);
        if bits.len() != expected {
            return Err(PackError::BitsLength {
                expected,
                got: bits.len(),
            });
        }
        let packed = Self {
            shape,
            groups,
            group_size,
            alphas,
            bits,
        };
        packed.codes()?;
        Ok(packed)
    }

    pub fn len(&self) -> usize {
        self.groups * self.group_size
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Decodes the codes, rejecting any `11` pattern in a weight slot.
    pub fn codes(&self) -> Result<Vec<TernaryCode>, PackError> {
        let expected = self.groups * group_bytes(self.group_size);
        if self.bits.len() < expected {
            return Err(PackError::Truncated {
                offset: self.bits.len(),
                needed: expected - self.bits.len(),
            });
        }
        let stride = group_bytes(self.group_size);
        let mut out = Vec::with_capacity(self.len());
        for g in 0..self.groups {
            let src = &self.bits[g * stride..(g + 1) * stride];
            for j in 0..self.group_size {
                let code = match (src[j / 4] >> (2 * (j % 4))) & 0b11 {
                    0b00 => TernaryCode::Zero,
                    0b01 => TernaryCode::Pos,
                    0b10 => TernaryCode::Neg,
                    _ => {
                        return Err(PackError::InvalidCode {
                            weight: g * self.group_size + j,
                            byte: g * stride + j / 4,
                        })
                    }
                };
                out.push(code);
            }
        }
        Ok(out)
    }

    /// Weight payload: code bytes plus scale bytes.
    pub fn payload_bytes(&self) -> usize {
        self.bits.len() + 4 * self.alphas.len()
    }

    /// `alpha * code` per weight.
    pub fn dequantize(&self) -> Result<DenseTensor, PackError> {
        let codes = self.codes()?;
        let values = codes
            .iter()
            .enumerate()
            .map(|(i, c)| self.alphas[i / self.group_size] * c.as_f32())
            .collect();
        Ok(DenseTensor::from_vec(self.shape.clone(), values)?)
    }
}

/// Inverse of [`pack`].
pub fn unpack(packed: &PackedTernaryTensor) -> Result<(Vec<TernaryCode>, Vec<f32>), PackError> {
    Ok((packed.codes()?, packed.alphas.clone()))
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightRecord {
    Raw(DenseTensor),
    Packed(PackedTernaryTensor),
}

impl WeightRecord {
    pub fn shape(&self) -> &Shape {
        match self {
            WeightRecord::Raw(t) => t.shape(),
            WeightRecord::Packed(p) => &p.shape,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerRecord {
    Conv {
        mode: WeightMode,
        stride: u16,
        pad: u16,
        weight: WeightRecord,
        bias: DenseTensor,
    },
    Dense {
        mode: WeightMode,
        weight: WeightRecord,
        bias: DenseTensor,
    },
    BatchNorm {
        eps: f32,
        gamma: DenseTensor,
        beta: DenseTensor,
        running_mean: DenseTensor,
        running_var: DenseTensor,
    },
    Relu,
    MaxPool {
        size: u16,
        stride: u16,
    },
    Hinge {
        squared: bool,
    },
    SoftmaxCrossEntropy,
}

impl LayerRecord {
    fn tag(&self) -> u8 {
        match self {
            LayerRecord::Conv { .. } => 1,
            LayerRecord::Dense { .. } => 2,
            LayerRecord::BatchNorm { .. } => 3,
            LayerRecord::Relu => 4,
            LayerRecord::MaxPool { .. } => 5,
            LayerRecord::Hinge { .. } => 6,
            LayerRecord::SoftmaxCrossEntropy => 7,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerRecord::Conv { .. } => "conv",
            LayerRecord::Dense { .. } => "fc",
            LayerRecord::BatchNorm { .. } => "bn",
            LayerRecord::Relu => "relu",
            LayerRecord::MaxPool { .. } => "maxpool",
            LayerRecord::Hinge { .. } => "hinge",
            LayerRecord::SoftmaxCrossEntropy => "softmax",
        }
    }
}

/// In-memory form of a `.twn` file.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    /// Per-example input dims, without the batch dimension.
    pub input_dims: Vec<usize>,
    pub layers: Vec<LayerRecord>,
}

fn mode_tag(mode: WeightMode) -> u8 {
    match mode {
        WeightMode::Full => 0,
        WeightMode::Ternary => 1,
        WeightMode::Binary => 2,
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn dims(&mut self, dims: &[usize]) {
        self.u8(u8::try_from(dims.len()).expect("rank fits u8"));
        for &d in dims {
            self.u32(u32::try_from(d).expect("dimension fits u32"));
        }
    }
    fn raw(&mut self, t: &DenseTensor) {
        self.u8(0);
        self.dims(t.shape().dims());
        for &v in t.data() {
            self.f32(v);
        }
    }
    fn weight(&mut self, w: &WeightRecord) {
        match w {
            WeightRecord::Raw(t) => self.raw(t),
            WeightRecord::Packed(p) => {
                self.u8(1);
                self.dims(p.shape.dims());
                self.u32(u32::try_from(p.groups).expect("group count fits u32"));
                self.u32(u32::try_from(p.group_size).expect("group size fits u32"));
                for &a in &p.alphas {
                    self.f32(a);
                }
                self.0.extend_from_slice(&p.bits);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PackError> {
        let rest = self.buf.len() - self.pos;
        if rest < n {
            return Err(PackError::Truncated {
                offset: self.buf.len(),
                needed: n - rest,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, PackError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, PackError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, PackError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, PackError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, PackError> {
        let bytes = self.take(n.checked_mul(4).ok_or(PackError::Truncated {
            offset: self.buf.len(),
            needed: usize::MAX,
        })?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn dims(&mut self) -> Result<Vec<usize>, PackError> {
        let rank = self.u8()?;
        (0..rank).map(|_| self.u32().map(|d| d as usize)).collect()
    }
    fn shape(&mut self) -> Result<Shape, PackError> {
        Ok(Shape::new(self.dims()?)?)
    }
    fn mode(&mut self) -> Result<WeightMode, PackError> {
        let offset = self.pos;
        match self.u8()? {
            0 => Ok(WeightMode::Full),
            1 => Ok(WeightMode::Ternary),
            2 => Ok(WeightMode::Binary),
            tag => Err(PackError::UnknownTag {
                what: "weight mode",
                tag,
                offset,
            }),
        }
    }
    fn weight(&mut self) -> Result<WeightRecord, PackError> {
        let offset = self.pos;
        let tag = self.u8()?;
        let shape = self.shape()?;
        match tag {
            0 => {
                let values = self.f32s(shape.numel())?;
                Ok(WeightRecord::Raw(DenseTensor::from_vec(shape, values)?))
            }
            1 => {
                let groups = self.u32()? as usize;
                let group_size = self.u32()? as usize;
                let alphas = self.f32s(groups)?;
                let nbytes = groups
                    .checked_mul(group_bytes(group_size))
                    .ok_or(PackError::ZeroGroupSize)?;
                let bits = self.take(nbytes)?.to_vec();
                Ok(WeightRecord::Packed(PackedTernaryTensor::from_parts(
                    shape, group_size, alphas, bits,
                )?))
            }
            tag => Err(PackError::UnknownTag {
                what: "tensor",
                tag,
                offset,
            }),
        }
    }
    fn raw(&mut self) -> Result<DenseTensor, PackError> {
        match self.weight()? {
            WeightRecord::Raw(t) => Ok(t),
            WeightRecord::Packed(_) => Err(PackError::UnknownTag {
                what: "raw tensor",
                tag: 1,
                offset: self.pos,
            }),
        }
    }
}

fn check_weight(index: usize, mode: WeightMode, weight: &WeightRecord, outputs: usize) -> Result<(), PackError> {
    let invalid = |reason: String| Err(PackError::InvalidLayer { index, reason });
    match (mode, weight) {
        (WeightMode::Full, WeightRecord::Raw(_)) => {}
        (WeightMode::Full, WeightRecord::Packed(_)) => return invalid("full-precision layer with packed weights".into()),
        (_, WeightRecord::Raw(_)) => return invalid(format!("{mode} layer with raw weights")),
        (_, WeightRecord::Packed(p)) => {
            let row = p.shape.numel() / outputs.max(1);
            if p.group_size % row.max(1) != 0 {
                return invalid(format!("group size {} splits an output row of {row}", p.group_size));
            }
            if mode == WeightMode::Binary && p.codes()?.contains(&TernaryCode::Zero) {
                return invalid("binary layer contains zero codes".into());
            }
        }
    }
    Ok(())
}

impl ModelFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u16(VERSION);
        w.u16(u16::try_from(self.layers.len()).expect("layer count fits u16"));
        w.dims(&self.input_dims);
        for layer in &self.layers {
            w.u8(layer.tag());
            match layer {
                LayerRecord::Conv {
                    mode,
                    stride,
                    pad,
                    weight,
                    bias,
                } => {
                    w.u8(mode_tag(*mode));
                    w.u16(*stride);
                    w.u16(*pad);
                    w.weight(weight);
                    w.raw(bias);
                }
                LayerRecord::Dense { mode, weight, bias } => {
                    w.u8(mode_tag(*mode));
                    w.weight(weight);
                    w.raw(bias);
                }
                LayerRecord::BatchNorm {
                    eps,
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    w.f32(*eps);
                    for t in [gamma, beta, running_mean, running_var] {
                        w.raw(t);
                    }
                }
                LayerRecord::Relu | LayerRecord::SoftmaxCrossEntropy => {}
                LayerRecord::MaxPool { size, stride } => {
                    w.u16(*size);
                    w.u16(*stride);
                }
                LayerRecord::Hinge { squared } => w.u8(u8::from(*squared)),
            }
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, PackError> {
        let mut r = Reader { buf, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(PackError::BadMagic(magic));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(PackError::UnsupportedVersion(version));
        }
        let count = r.u16()? as usize;
        let input_dims = r.dims()?;
        let mut layers = Vec::with_capacity(count);
        for index in 0..count {
            let offset = r.pos;
            let layer = match r.u8()? {
                1 => {
                    let mode = r.mode()?;
                    let stride = r.u16()?;
                    let pad = r.u16()?;
                    let weight = r.weight()?;
                    let bias = r.raw()?;
                    if weight.shape().rank() != 4 || bias.len() != weight.shape().dims()[0] || stride == 0 {
                        return Err(PackError::InvalidLayer {
                            index,
                            reason: format!("conv weight {} with {} biases, stride {stride}", weight.shape(), bias.len()),
                        });
                    }
                    check_weight(index, mode, &weight, bias.len())?;
                    LayerRecord::Conv {
                        mode,
                        stride,
                        pad,
                        weight,
                        bias,
                    }
                }
                2 => {
                    let mode = r.mode()?;
                    let weight = r.weight()?;
                    let bias = r.raw()?;
                    if weight.shape().rank() != 2 || bias.len() != weight.shape().dims()[0] {
                        return Err(PackError::InvalidLayer {
                            index,
                            reason: format!("fc weight {} with {} biases", weight.shape(), bias.len()),
                        });
                    }
                    check_weight(index, mode, &weight, bias.len())?;
                    LayerRecord::Dense { mode, weight, bias }
                }
                3 => {
                    let eps = r.f32()?;
                    let gamma = r.raw()?;
                    let beta = r.raw()?;
                    let running_mean = r.raw()?;
                    let running_var = r.raw()?;
                    let c = gamma.len();
                    if !(eps > 0.0 && eps.is_finite())
                        || [&beta, &running_mean, &running_var].iter().any(|t| t.len() != c)
                        || running_var.data().iter().any(|&v| v <= 0.0)
                    {
                        return Err(PackError::InvalidLayer {
                            index,
                            reason: "inconsistent batch-norm parameters".into(),
                        });
                    }
                    LayerRecord::BatchNorm {
                        eps,
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                    }
                }
                4 => LayerRecord::Relu,
                5 => {
                    let size = r.u16()?;
                    let stride = r.u16()?;
                    if size == 0 || stride == 0 {
                        return Err(PackError::InvalidLayer {
                            index,
                            reason: "pooling size and stride must be positive".into(),
                        });
                    }
                    LayerRecord::MaxPool { size, stride }
                }
                6 => {
                    let offset = r.pos;
                    match r.u8()? {
                        0 => LayerRecord::Hinge { squared: false },
                        1 => LayerRecord::Hinge { squared: true },
                        tag => {
                            return Err(PackError::UnknownTag {
                                what: "hinge flag",
                                tag,
                                offset,
                            })
                        }
                    }
                }
                7 => LayerRecord::SoftmaxCrossEntropy,
                tag => {
                    return Err(PackError::UnknownTag {
                        what: "layer",
                        tag,
                        offset,
                    })
                }
            };
            layers.push(layer);
        }
        if r.pos != buf.len() {
            return Err(PackError::TrailingBytes(buf.len() - r.pos));
        }
        Ok(Self { input_dims, layers })
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), PackError> {
        let io = |source| PackError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut tmp_name = path.as_os_str().to_owned();
        tmp_name.push(".tmp");
        let tmp = Path::new(&tmp_name);
        let mut f = fs::File::create(tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, PackError> {
        let bytes = fs::read(path).map_err(|source| PackError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCompression {
    pub layer: usize,
    pub kind: &'static str,
    pub mode: WeightMode,
    pub weights: usize,
    pub groups: usize,
    pub fp32_bytes: usize,
    pub packed_bytes: usize,
    pub zero_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressionReport {
    pub layers: Vec<LayerCompression>,
    /// Weights of the packed layers only.
    pub weights: usize,
    pub fp32_bytes: usize,
    pub fp64_bytes: usize,
    /// Code bytes plus scale bytes.
    pub packed_bytes: usize,
    pub ratio: f64,
    pub ratio_vs_fp64: f64,
    /// Magic, version, counts, shapes, tags and layer hyperparameters.
    pub header_bytes: usize,
    /// Biases, batch-norm parameters and any full-precision weights.
    pub float_side_bytes: usize,
    pub file_bytes: usize,
}

/// Weight-only compression of the packed layers of a model, with the rest
/// of the file accounted for separately.
pub fn compression_report(model: &ModelFile) -> Result<CompressionReport, PackError> {
    let mut layers = Vec::new();
    let mut float_side = 0usize;
    for (i, layer) in model.layers.iter().enumerate() {
        match layer {
            LayerRecord::Conv { mode, weight, bias, .. } | LayerRecord::Dense { mode, weight, bias } => {
                float_side += 4 * bias.len();
                match weight {
                    WeightRecord::Raw(t) => float_side += 4 * t.len(),
                    WeightRecord::Packed(p) => {
                        let zeros = p.codes()?.iter().filter(|&&c| c == TernaryCode::Zero).count();
                        layers.push(LayerCompression {
                            layer: i,
                            kind: layer.kind(),
                            mode: *mode,
                            weights: p.len(),
                            groups: p.groups,
                            fp32_bytes: 4 * p.len(),
                            packed_bytes: p.payload_bytes(),
                            zero_fraction: if p.is_empty() { 0.0 } else { zeros as f64 / p.len() as f64 },
                        })
                    }
                }
            }
            LayerRecord::BatchNorm { gamma, .. } => float_side += 4 * 4 * gamma.len(),
            _ => {}
        }
    }
    if layers.is_empty() {
        return Err(PackError::NoPackedLayers);
    }
    let weights: usize = layers.iter().map(|l| l.weights).sum();
    let packed_bytes: usize = layers.iter().map(|l| l.packed_bytes).sum();
    let file_bytes = model.to_bytes().len();
    Ok(CompressionReport {
        weights,
        fp32_bytes: 4 * weights,
        fp64_bytes: 8 * weights,
        packed_bytes,
        ratio: 4.0 * weights as f64 / packed_bytes as f64,
        ratio_vs_fp64: 8.0 * weights as f64 / packed_bytes as f64,
        header_bytes: file_bytes - packed_bytes - float_side,
        float_side_bytes: float_side,
        file_bytes,
        layers,
    })
}
