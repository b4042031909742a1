//! Layers and networks with straight-through ternary training.
//!
//! A weighted layer keeps full-precision master weights. Training forward
//! passes requantize them, then run on the effective weights `alpha * codes`;
//! the backward pass uses those same effective weights for input gradients
//! and hands the gradient with respect to them straight to the masters.
//! Evaluation runs ternary and binary layers on the multiplication-free
//! kernels.

pub mod gradcheck;
pub mod layers;
pub mod loss;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{KernelError, SignedRows, TernaryOperandView};
use crate::packfmt::{pack, LayerRecord, ModelFile, PackError, WeightRecord};
use crate::quantizer::{binarize_sign, ternarize_heuristic, QuantError, TernaryCode};
use crate::tensor::{DenseTensor, Rng, Shape, TensorError};
use layers::{BnCache, ConvCache, PoolCache};
pub use loss::{hinge_loss, softmax_cross_entropy, LossKind};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.9;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid network: {0}")]
    Invalid(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("batch norm needs at least 2 values per channel in training, got {0}")]
    BatchTooSmall(usize),
    #[error("cannot quantize layer {layer} group {group}: {source}")]
    Quantize {
        layer: usize,
        group: usize,
        #[source]
        source: QuantError,
    },
    #[error("non-finite loss {loss} (scores range {min}..{max})")]
    NonFiniteLoss { loss: f64, min: f32, max: f32 },
    #[error("non-finite values in layer {layer} output: {source}")]
    NonFinite {
        layer: usize,
        #[source]
        source: TensorError,
    },
    #[error("training labels are required")]
    MissingLabels,
    #[error("forward pass is stale: parameters changed after it ran")]
    StaleForward,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Pack(#[from] PackError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    Full,
    Ternary,
    Binary,
}

impl WeightMode {
    pub const ALL: [WeightMode; 3] = [WeightMode::Ternary, WeightMode::Binary, WeightMode::Full];

    pub fn name(self) -> &'static str {
        match self {
            WeightMode::Full => "full",
            WeightMode::Ternary => "ternary",
            WeightMode::Binary => "binary",
        }
    }

    /// TWN, BPWN or FPWN.
    pub fn network_label(self) -> &'static str {
        match self {
            WeightMode::Full => "FPWN",
            WeightMode::Ternary => "TWN",
            WeightMode::Binary => "BPWN",
        }
    }
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeightMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "full" | "fp" | "fpwn" => Ok(WeightMode::Full),
            "ternary" | "twn" => Ok(WeightMode::Ternary),
            "binary" | "bpwn" => Ok(WeightMode::Binary),
            _ => Err(format!("unknown weight mode {s:?} (expected ternary, binary or full)")),
        }
    }
}

/// Which weights share one scale factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// One scale per output channel or unit.
    PerOutput,
    /// One scale for the whole layer.
    PerLayer,
}

impl FromStr for Grouping {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "channel" | "output" | "per_output" => Ok(Grouping::PerOutput),
            "layer" | "per_layer" => Ok(Grouping::PerLayer),
            _ => Err(format!("unknown grouping {s:?} (expected channel or layer)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantCache {
    pub codes: Vec<TernaryCode>,
    pub alphas: Vec<f32>,
    pub group_size: usize,
    /// Parameter generation the cache was computed from.
    generation: u64,
    effective: Vec<f32>,
    rows: SignedRows,
}

impl QuantCache {
    fn new(shape: &Shape, codes: Vec<TernaryCode>, alphas: Vec<f32>, group_size: usize, generation: u64) -> Self {
        let effective = codes
            .iter()
            .enumerate()
            .map(|(i, c)| alphas[i / group_size] * c.as_f32())
            .collect();
        let rows = SignedRows::from_view(TernaryOperandView {
            codes: &codes,
            alphas: &alphas,
            group_size,
            shape,
        });
        Self {
            codes,
            alphas,
            group_size,
            generation,
            effective,
            rows,
        }
    }

    pub fn effective_weights(&self) -> &[f32] {
        &self.effective
    }

    pub fn zero_fraction(&self) -> f64 {
        if self.codes.is_empty() {
            return 0.0;
        }
        self.codes.iter().filter(|&&c| c == TernaryCode::Zero).count() as f64 / self.codes.len() as f64
    }
}

/// Quantizes `weight` group by group with the rule-of-thumb threshold
/// (ternary) or sign binarization. Full mode yields `None`.
pub fn quantize_weights(
    weight: &DenseTensor,
    mode: WeightMode,
    group_size: usize,
    layer: usize,
    generation: u64,
) -> Result<Option<QuantCache>, NnError> {
    if mode == WeightMode::Full {
        return Ok(None);
    }
    let mut codes = Vec::with_capacity(weight.len());
    let mut alphas = Vec::with_capacity(weight.len() / group_size.max(1));
    for (group, chunk) in weight.data().chunks(group_size).enumerate() {
        let err = |source| NnError::Quantize { layer, group, source };
        match mode {
            WeightMode::Ternary => {
                let sol = ternarize_heuristic(chunk).map_err(err)?;
                codes.extend(sol.codes);
                alphas.push(sol.alpha);
            }
            WeightMode::Binary => {
                let sol = binarize_sign(chunk).map_err(err)?;
                codes.extend(sol.codes);
                alphas.push(sol.alpha);
            }
            WeightMode::Full => unreachable!(),
        }
    }
    Ok(Some(QuantCache::new(weight.shape(), codes, alphas, group_size, generation)))
}

/// Parameters shared by convolution and fully connected layers.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedLayer {
    weight: DenseTensor,
    bias: Vec<f32>,
    pub mode: WeightMode,
    pub grouping: Grouping,
    cache: Option<QuantCache>,
}

impl WeightedLayer {
    fn new(weight: DenseTensor, bias: Vec<f32>, mode: WeightMode, grouping: Grouping) -> Self {
        Self {
            weight,
            bias,
            mode,
            grouping,
            cache: None,
        }
    }

    pub fn weight(&self) -> &DenseTensor {
        &self.weight
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape().dims()[0]
    }

    pub fn group_size(&self) -> usize {
        match self.grouping {
            Grouping::PerOutput => self.weight.len() / self.outputs(),
            Grouping::PerLayer => self.weight.len(),
        }
    }

    /// Cache computed from the current masters, if any.
    pub fn cache(&self, generation: u64) -> Option<&QuantCache> {
        self.cache.as_ref().filter(|c| c.generation == generation)
    }

    fn quantize(&mut self, layer: usize, generation: u64) -> Result<(), NnError> {
        self.cache = quantize_weights(&self.weight, self.mode, self.group_size(), layer, generation)?;
        Ok(())
    }

    /// Current cache, or a fresh temporary one when stale.
    fn quantized(&self, layer: usize, generation: u64) -> Result<std::borrow::Cow<'_, QuantCache>, NnError> {
        match self.cache(generation) {
            Some(c) => Ok(std::borrow::Cow::Borrowed(c)),
            None => Ok(std::borrow::Cow::Owned(
                quantize_weights(&self.weight, self.mode, self.group_size(), layer, generation)?
                    .expect("quantized mode"),
            )),
        }
    }

    fn to_record(&self, layer: usize, generation: u64) -> Result<WeightRecord, NnError> {
        if self.mode == WeightMode::Full {
            return Ok(WeightRecord::Raw(self.weight.clone()));
        }
        let q = self.quantized(layer, generation)?;
        Ok(WeightRecord::Packed(pack(self.weight.shape(), &q.codes, &q.alphas, q.group_size)?))
    }

    fn from_record(
        mode: WeightMode,
        record: &WeightRecord,
        bias: &DenseTensor,
        generation: u64,
    ) -> Result<Self, NnError> {
        match record {
            WeightRecord::Raw(t) => Ok(Self::new(t.clone(), bias.data().to_vec(), mode, Grouping::PerOutput)),
            WeightRecord::Packed(p) => {
                let codes = p.codes()?;
                let row = p.shape.numel() / p.shape.dims()[0].max(1);
                let grouping = if p.groups <= 1 && p.group_size != row {
                    Grouping::PerLayer
                } else if p.group_size == row {
                    Grouping::PerOutput
                } else {
                    return Err(NnError::Invalid(format!(
                        "group size {} is neither a row ({row}) nor the layer",
                        p.group_size
                    )));
                };
                let cache = QuantCache::new(&p.shape, codes, p.alphas.clone(), p.group_size, generation);
                let weight = DenseTensor::from_vec(p.shape.clone(), cache.effective.clone())?;
                Ok(Self {
                    weight,
                    bias: bias.data().to_vec(),
                    mode,
                    grouping,
                    cache: Some(cache),
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv {
        params: WeightedLayer,
        stride: usize,
        pad: usize,
    },
    Dense(WeightedLayer),
    BatchNorm(BatchNorm),
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
    Loss(LossKind),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::Dense(_) => "fc",
            Layer::BatchNorm(_) => "bn",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::Loss(LossKind::Hinge { .. }) => "hinge",
            Layer::Loss(LossKind::SoftmaxCrossEntropy) => "softmax",
        }
    }

    pub fn weighted(&self) -> Option<&WeightedLayer> {
        match self {
            Layer::Conv { params, .. } | Layer::Dense(params) => Some(params),
            _ => None,
        }
    }

    fn weighted_mut(&mut self) -> Option<&mut WeightedLayer> {
        match self {
            Layer::Conv { params, .. } | Layer::Dense(params) => Some(params),
            _ => None,
        }
    }
}

/// Architecture description for one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv {
        out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        /// `None` uses the network default.
        mode: Option<WeightMode>,
        grouping: Option<Grouping>,
    },
    Dense {
        out: usize,
        mode: Option<WeightMode>,
        grouping: Option<Grouping>,
    },
    BatchNorm,
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
    Loss(LossKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId {
    pub layer: usize,
    pub kind: ParamKind,
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer {} {:?}", self.layer, self.kind)
    }
}

#[derive(Debug, Clone)]
enum LayerCache {
    Conv { cache: ConvCache, weights: Vec<f32> },
    Dense { input: DenseTensor, weights: Vec<f32> },
    BatchNorm(BnCache),
    Relu { input: DenseTensor },
    MaxPool(PoolCache),
    Loss { dscores: Vec<f32> },
}

/// Result of a forward pass. Training passes also carry what the backward
/// pass needs.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub mode: Mode,
    pub scores: DenseTensor,
    pub loss: Option<f64>,
    pub predictions: Vec<usize>,
    /// Output shape of every layer, in order.
    pub shapes: Vec<Shape>,
    input_shape: Shape,
    caches: Vec<LayerCache>,
    generation: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad {
    None,
    Weighted { weight: Vec<f32>, bias: Vec<f32> },
    BatchNorm { gamma: Vec<f32>, beta: Vec<f32> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    pub input: Option<DenseTensor>,
}

impl ForwardPass {
    /// Parameter generation the pass ran against.
    pub fn generation(&self) -> u64 {
        self.generation
    }
}

impl Gradients {
    /// Gradient slices in the same order as [`Network::params`].
    pub fn params(&self) -> Vec<(ParamId, &[f32])> {
        let mut out = Vec::new();
        for (layer, g) in self.layers.iter().enumerate() {
            match g {
                LayerGrad::None => {}
                LayerGrad::Weighted { weight, bias } => {
                    out.push((ParamId { layer, kind: ParamKind::Weight }, &weight[..]));
                    out.push((ParamId { layer, kind: ParamKind::Bias }, &bias[..]));
                }
                LayerGrad::BatchNorm { gamma, beta } => {
                    out.push((ParamId { layer, kind: ParamKind::Gamma }, &gamma[..]));
                    out.push((ParamId { layer, kind: ParamKind::Beta }, &beta[..]));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_dims: Vec<usize>,
    layers: Vec<Layer>,
    /// Bumped whenever parameters may have changed.
    generation: u64,
}

fn flat_dims(dims: &[usize]) -> usize {
    dims.iter().product()
}

/// Output dims (without batch) of `layer` given its input dims.
fn infer_dims(layer: &Layer, dims: &[usize]) -> Result<Vec<usize>, NnError> {
    match layer {
        Layer::Conv { params, stride, pad } => {
            let &[c, h, w] = dims else {
                return Err(NnError::Invalid(format!("conv needs [c, h, w] input, got {dims:?}")));
            };
            let wshape = params.weight.shape();
            let x = Shape::new([1, c, h, w])?;
            let geo = layers::conv_geometry(&x, wshape, *stride, *pad)?;
            Ok(vec![geo.cout, geo.out_height(), geo.out_width()])
        }
        Layer::Dense(params) => {
            let &[out, inp] = params.weight.shape().dims() else {
                return Err(NnError::Invalid("fc weight must be rank 2".into()));
            };
            if inp != flat_dims(dims) {
                return Err(NnError::Invalid(format!("fc expects {inp} inputs, got {dims:?}")));
            }
            Ok(vec![out])
        }
        Layer::BatchNorm(bn) => {
            if dims.first() != Some(&bn.gamma.len()) {
                return Err(NnError::Invalid(format!(
                    "batch norm over {} channels after {dims:?}",
                    bn.gamma.len()
                )));
            }
            Ok(dims.to_vec())
        }
        Layer::Relu => Ok(dims.to_vec()),
        Layer::MaxPool { size, stride } => {
            let &[c, h, w] = dims else {
                return Err(NnError::Invalid(format!("max pool needs [c, h, w] input, got {dims:?}")));
            };
            Ok(vec![c, layers::pool_out(h, *size, *stride)?, layers::pool_out(w, *size, *stride)?])
        }
        Layer::Loss(_) => {
            if dims.len() != 1 {
                return Err(NnError::Invalid(format!("loss needs flat scores, got {dims:?}")));
            }
            Ok(dims.to_vec())
        }
    }
}

fn argmax_rows(scores: &DenseTensor) -> Vec<usize> {
    let classes = scores.shape().dims()[1];
    scores
        .data()
        .chunks_exact(classes.max(1))
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

impl Network {
    /// Checks shape consistency and that a loss layer, if present, is last.
    pub fn new(input_dims: Vec<usize>, layers: Vec<Layer>) -> Result<Self, NnError> {
        let net = Self {
            input_dims,
            layers,
            generation: 0,
        };
        net.output_dims()?;
        Ok(net)
    }

    /// Builds a network with Gaussian `sqrt(2 / fan_in)` weight init and
    /// zero biases. `default_mode` applies to layers without an explicit
    /// mode.
    pub fn build(input_dims: &[usize], specs: &[LayerSpec], default_mode: WeightMode, seed: u64) -> Result<Self, NnError> {
        let mut rng = Rng::new(seed);
        let mut dims = input_dims.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let layer = match *spec {
                LayerSpec::Conv {
                    out,
                    kh,
                    kw,
                    stride,
                    pad,
                    mode,
                    grouping,
                } => {
                    let cin = *dims.first().ok_or_else(|| NnError::Invalid("conv after scalar".into()))?;
                    let shape = Shape::new([out, cin, kh, kw])?;
                    let weight = he_init(&mut rng, shape, cin * kh * kw)?;
                    Layer::Conv {
                        params: WeightedLayer::new(
                            weight,
                            vec![0.0; out],
                            mode.unwrap_or(default_mode),
                            grouping.unwrap_or(Grouping::PerOutput),
                        ),
                        stride,
                        pad,
                    }
                }
                LayerSpec::Dense { out, mode, grouping } => {
                    let fan_in = flat_dims(&dims);
                    let weight = he_init(&mut rng, Shape::new([out, fan_in])?, fan_in)?;
                    Layer::Dense(WeightedLayer::new(
                        weight,
                        vec![0.0; out],
                        mode.unwrap_or(default_mode),
                        grouping.unwrap_or(Grouping::PerLayer),
                    ))
                }
                LayerSpec::BatchNorm => Layer::BatchNorm(BatchNorm::new(*dims.first().unwrap_or(&0))),
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool { size, stride } => Layer::MaxPool { size, stride },
                LayerSpec::Loss(kind) => Layer::Loss(kind),
            };
            dims = infer_dims(&layer, &dims)?;
            layers.push(layer);
        }
        Self::new(input_dims.to_vec(), layers)
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Dims of the final output (the scores), without batch.
    pub fn output_dims(&self) -> Result<Vec<usize>, NnError> {
        if self.input_dims.is_empty() {
            return Err(NnError::Invalid("input dims are empty".into()));
        }
        let mut dims = self.input_dims.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if matches!(layer, Layer::Loss(_)) && i + 1 != self.layers.len() {
                return Err(NnError::Invalid(format!("loss layer {i} is not last")));
            }
            dims = infer_dims(layer, &dims).map_err(|e| NnError::Invalid(format!("layer {i} ({}): {e}", layer.kind())))?;
        }
        Ok(dims)
    }

    pub fn loss_kind(&self) -> Option<LossKind> {
        match self.layers.last() {
            Some(Layer::Loss(kind)) => Some(*kind),
            _ => None,
        }
    }

    pub fn classes(&self) -> usize {
        self.output_dims().map(|d| d[0]).unwrap_or(0)
    }

    /// Weighted layer modes, in order.
    pub fn weight_modes(&self) -> Vec<WeightMode> {
        self.layers.iter().filter_map(|l| l.weighted().map(|w| w.mode)).collect()
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Requantizes every non-full weighted layer whose cache predates the
    /// current masters.
    pub fn quantize(&mut self) -> Result<(), NnError> {
        let generation = self.generation;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let Some(w) = layer.weighted_mut() {
                if w.mode != WeightMode::Full && w.cache(generation).is_some() {
                    continue;
                }
                w.quantize(i, generation)?;
            }
        }
        Ok(())
    }

    /// True when every ternary or binary layer has a cache computed from
    /// the current masters.
    pub fn is_quantized(&self) -> bool {
        self.layers
            .iter()
            .filter_map(Layer::weighted)
            .all(|w| w.mode == WeightMode::Full || w.cache(self.generation).is_some())
    }

    /// Current quantization of layer `index`, if fresh.
    pub fn quant_cache(&self, index: usize) -> Option<&QuantCache> {
        self.layers.get(index)?.weighted()?.cache(self.generation)
    }

    /// Trainable parameters in a fixed order.
    pub fn params(&self) -> Vec<(ParamId, &[f32])> {
        let mut out = Vec::new();
        for (layer, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Conv { params, .. } | Layer::Dense(params) => {
                    out.push((ParamId { layer, kind: ParamKind::Weight }, params.weight.data()));
                    out.push((ParamId { layer, kind: ParamKind::Bias }, &params.bias[..]));
                }
                Layer::BatchNorm(bn) => {
                    out.push((ParamId { layer, kind: ParamKind::Gamma }, &bn.gamma[..]));
                    out.push((ParamId { layer, kind: ParamKind::Beta }, &bn.beta[..]));
                }
                _ => {}
            }
        }
        out
    }

    /// Mutable parameters in the order of [`Network::params`]. Invalidates
    /// quantization caches. Callers must keep values finite.
    pub fn params_mut(&mut self) -> Vec<(ParamId, &mut [f32])> {
        self.generation += 1;
        let mut out = Vec::new();
        for (layer, l) in self.layers.iter_mut().enumerate() {
            match l {
                Layer::Conv { params, .. } | Layer::Dense(params) => {
                    out.push((ParamId { layer, kind: ParamKind::Weight }, params.weight.data_mut()));
                    out.push((ParamId { layer, kind: ParamKind::Bias }, &mut params.bias[..]));
                }
                Layer::BatchNorm(bn) => {
                    out.push((ParamId { layer, kind: ParamKind::Gamma }, &mut bn.gamma[..]));
                    out.push((ParamId { layer, kind: ParamKind::Beta }, &mut bn.beta[..]));
                }
                _ => {}
            }
        }
        out
    }

    fn check_input(&self, x: &DenseTensor) -> Result<usize, NnError> {
        let dims = x.shape().dims();
        if dims.len() != self.input_dims.len() + 1 || dims[1..] != self.input_dims[..] {
            return Err(NnError::Shape(format!(
                "input {} does not match network input {:?}",
                x.shape(),
                self.input_dims
            )));
        }
        Ok(dims[0])
    }

    /// Forward pass. Training requantizes, uses batch statistics, updates
    /// running statistics and keeps caches for [`Network::backward`];
    /// evaluation mutates nothing.
    pub fn forward(&mut self, x: &DenseTensor, labels: Option<&[usize]>, mode: Mode) -> Result<ForwardPass, NnError> {
        match mode {
            Mode::Train => self.forward_train(x, labels.ok_or(NnError::MissingLabels)?),
            Mode::Eval => self.forward_eval(x, labels),
        }
    }

    pub fn forward_train(&mut self, x: &DenseTensor, labels: &[usize]) -> Result<ForwardPass, NnError> {
        let batch = self.check_input(x)?;
        self.quantize()?;
        let generation = self.generation;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut act = x.clone();
        let mut loss = None;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let (next, cache) = match layer {
                Layer::Conv { params, stride, pad } => {
                    let weights = match params.cache(generation) {
                        Some(q) => q.effective.clone(),
                        None => params.weight.data().to_vec(),
                    };
                    let (y, cache) =
                        layers::conv_forward(&act, &weights, params.weight.shape(), &params.bias, *stride, *pad, true)?;
                    (
                        y,
                        LayerCache::Conv {
                            cache: cache.expect("kept"),
                            weights,
                        },
                    )
                }
                Layer::Dense(params) => {
                    let weights = match params.cache(generation) {
                        Some(q) => q.effective.clone(),
                        None => params.weight.data().to_vec(),
                    };
                    let outputs = params.outputs();
                    let y = layers::dense_forward(act.data(), batch, &weights, outputs, &params.bias);
                    let y = DenseTensor::from_vec(Shape::new([batch, outputs])?, y)
                        .map_err(|source| NnError::NonFinite { layer: i, source })?;
                    (y, LayerCache::Dense { input: act, weights })
                }
                Layer::BatchNorm(bn) => {
                    let (y, cache) = layers::batch_norm_train(&act, &bn.gamma, &bn.beta, bn.eps)?;
                    for c in 0..bn.gamma.len() {
                        bn.running_mean[c] = bn.momentum * bn.running_mean[c] + (1.0 - bn.momentum) * cache.batch_mean[c];
                        bn.running_var[c] = bn.momentum * bn.running_var[c] + (1.0 - bn.momentum) * cache.batch_var[c];
                    }
                    (y, LayerCache::BatchNorm(cache))
                }
                Layer::Relu => (layers::relu_forward(&act), LayerCache::Relu { input: act }),
                Layer::MaxPool { size, stride } => {
                    let (y, cache) = layers::max_pool_forward(&act, *size, *stride)?;
                    (y, LayerCache::MaxPool(cache))
                }
                Layer::Loss(kind) => {
                    let (l, dscores) = kind.evaluate(&act, labels)?;
                    loss = Some(l);
                    (act, LayerCache::Loss { dscores })
                }
            };
            shapes.push(next.shape().clone());
            caches.push(cache);
            act = next;
        }
        let scores = flatten_scores(act)?;
        check_loss(loss, &scores)?;
        Ok(ForwardPass {
            mode: Mode::Train,
            predictions: argmax_rows(&scores),
            scores,
            loss,
            shapes,
            input_shape: x.shape().clone(),
            caches,
            generation,
        })
    }

    /// Inference: ternary and binary layers run on the multiplication-free
    /// kernels, batch norm uses running statistics.
    pub fn forward_eval(&self, x: &DenseTensor, labels: Option<&[usize]>) -> Result<ForwardPass, NnError> {
        let batch = self.check_input(x)?;
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut act = x.clone();
        let mut loss = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let next = match layer {
                Layer::Conv { params, stride, pad } => {
                    if params.mode == WeightMode::Full {
                        let (y, _) = layers::conv_forward(
                            &act,
                            params.weight.data(),
                            params.weight.shape(),
                            &params.bias,
                            *stride,
                            *pad,
                            false,
                        )?;
                        y
                    } else {
                        let q = params.quantized(i, self.generation)?;
                        ternary_conv(&act, params.weight.shape(), &q.rows, &params.bias, *stride, *pad)?
                    }
                }
                Layer::Dense(params) => {
                    let outputs = params.outputs();
                    let y = if params.mode == WeightMode::Full {
                        layers::dense_forward(act.data(), batch, params.weight.data(), outputs, &params.bias)
                    } else {
                        let q = params.quantized(i, self.generation)?;
                        let inputs = q.rows.row_len();
                        let mut y = vec![0.0f32; batch * outputs];
                        for (xrow, yrow) in act.data().chunks_exact(inputs).zip(y.chunks_exact_mut(outputs)) {
                            q.rows.dot_rows(xrow, &params.bias, yrow);
                        }
                        y
                    };
                    DenseTensor::from_vec(Shape::new([batch, outputs])?, y)
                        .map_err(|source| NnError::NonFinite { layer: i, source })?
                }
                Layer::BatchNorm(bn) => {
                    layers::batch_norm_eval(&act, &bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var, bn.eps)?
                }
                Layer::Relu => layers::relu_forward(&act),
                Layer::MaxPool { size, stride } => layers::max_pool_forward(&act, *size, *stride)?.0,
                Layer::Loss(kind) => {
                    if let Some(labels) = labels {
                        loss = Some(kind.evaluate(&act, labels)?.0);
                    }
                    act
                }
            };
            shapes.push(next.shape().clone());
            act = next;
        }
        let scores = flatten_scores(act)?;
        check_loss(loss, &scores)?;
        Ok(ForwardPass {
            mode: Mode::Eval,
            predictions: argmax_rows(&scores),
            scores,
            loss,
            shapes,
            input_shape: x.shape().clone(),
            caches: Vec::new(),
            generation: self.generation,
        })
    }

    /// Gradients of the loss of a training forward pass. Weight gradients
    /// are taken with respect to the effective weights and apply unchanged
    /// to the masters.
    pub fn backward(&self, pass: &ForwardPass, input_grad: bool) -> Result<Gradients, NnError> {
        if pass.mode != Mode::Train || pass.caches.len() != self.layers.len() {
            return Err(NnError::Invalid("backward needs a training forward pass of this network".into()));
        }
        if pass.generation != self.generation {
            return Err(NnError::StaleForward);
        }
        if !matches!(pass.caches.last(), Some(LayerCache::Loss { .. })) {
            return Err(NnError::Invalid("backward needs a loss layer".into()));
        }
        let mut grads = vec![LayerGrad::None; self.layers.len()];
        let mut g: Vec<f32> = Vec::new();
        for i in (0..self.layers.len()).rev() {
            let in_shape = if i == 0 { &pass.input_shape } else { &pass.shapes[i - 1] };
            let need_input = i > 0 || input_grad;
            let out_shape = &pass.shapes[i];
            g = match (&self.layers[i], &pass.caches[i]) {
                (Layer::Loss(_), LayerCache::Loss { dscores }) => dscores.clone(),
                (Layer::Conv { .. }, LayerCache::Conv { cache, weights }) => {
                    let dy = DenseTensor::from_vec(out_shape.clone(), g)?;
                    let r = layers::conv_backward(&dy, weights, cache, need_input);
                    grads[i] = LayerGrad::Weighted {
                        weight: r.weight,
                        bias: r.bias,
                    };
                    r.input.unwrap_or_default()
                }
                (Layer::Dense(params), LayerCache::Dense { input, weights }) => {
                    let batch = input.shape().dims()[0];
                    let r = layers::dense_backward(&g, input.data(), batch, weights, params.outputs(), need_input);
                    grads[i] = LayerGrad::Weighted {
                        weight: r.weight,
                        bias: r.bias,
                    };
                    r.input.unwrap_or_default()
                }
                (Layer::BatchNorm(bn), LayerCache::BatchNorm(cache)) => {
                    let dy = DenseTensor::from_vec(out_shape.clone(), g)?;
                    let r = layers::batch_norm_backward(&dy, &bn.gamma, cache)?;
                    grads[i] = LayerGrad::BatchNorm {
                        gamma: r.gamma,
                        beta: r.beta,
                    };
                    r.input
                }
                (Layer::Relu, LayerCache::Relu { input }) => layers::relu_backward(&g, input.data()),
                (Layer::MaxPool { .. }, LayerCache::MaxPool(cache)) => layers::max_pool_backward(&g, cache),
                _ => return Err(NnError::Invalid(format!("cache mismatch at layer {i}"))),
            };
            if !need_input {
                break;
            }
            debug_assert_eq!(g.len(), in_shape.numel());
        }
        let input = if input_grad {
            Some(DenseTensor::from_vec(pass.input_shape.clone(), g)?)
        } else {
            None
        };
        Ok(Gradients { layers: grads, input })
    }

    /// Packs the network into the `.twn` container form.
    pub fn to_model_file(&self) -> Result<ModelFile, NnError> {
        let mut records = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let tensor = |v: &[f32]| DenseTensor::from_vec(Shape::new([v.len()])?, v.to_vec());
            records.push(match layer {
                Layer::Conv { params, stride, pad } => LayerRecord::Conv {
                    mode: params.mode,
                    stride: u16::try_from(*stride).map_err(|_| NnError::Invalid("stride exceeds u16".into()))?,
                    pad: u16::try_from(*pad).map_err(|_| NnError::Invalid("padding exceeds u16".into()))?,
                    weight: params.to_record(i, self.generation)?,
                    bias: tensor(&params.bias)?,
                },
                Layer::Dense(params) => LayerRecord::Dense {
                    mode: params.mode,
                    weight: params.to_record(i, self.generation)?,
                    bias: tensor(&params.bias)?,
                },
                Layer::BatchNorm(bn) => LayerRecord::BatchNorm {
                    eps: bn.eps,
                    gamma: tensor(&bn.gamma)?,
                    beta: tensor(&bn.beta)?,
                    running_mean: tensor(&bn.running_mean)?,
                    running_var: tensor(&bn.running_var)?,
                },
                Layer::Relu => LayerRecord::Relu,
                Layer::MaxPool { size, stride } => LayerRecord::MaxPool {
                    size: u16::try_from(*size).map_err(|_| NnError::Invalid("pool size exceeds u16".into()))?,
                    stride: u16::try_from(*stride).map_err(|_| NnError::Invalid("pool stride exceeds u16".into()))?,
                },
                Layer::Loss(LossKind::Hinge { squared }) => LayerRecord::Hinge { squared: *squared },
                Layer::Loss(LossKind::SoftmaxCrossEntropy) => LayerRecord::SoftmaxCrossEntropy,
            });
        }
        Ok(ModelFile {
            input_dims: self.input_dims.clone(),
            layers: records,
        })
    }

    /// Rebuilds a network from a model file. Ternary and binary layers get
    /// masters equal to their dequantized weights and a ready cache.
    pub fn from_model_file(model: &ModelFile) -> Result<Self, NnError> {
        let mut layers = Vec::with_capacity(model.layers.len());
        for record in &model.layers {
            layers.push(match record {
                LayerRecord::Conv {
                    mode,
                    stride,
                    pad,
                    weight,
                    bias,
                } => Layer::Conv {
                    params: WeightedLayer::from_record(*mode, weight, bias, 0)?,
                    stride: usize::from(*stride),
                    pad: usize::from(*pad),
                },
                LayerRecord::Dense { mode, weight, bias } => {
                    let mut params = WeightedLayer::from_record(*mode, weight, bias, 0)?;
                    if matches!(weight, WeightRecord::Raw(_)) {
                        params.grouping = Grouping::PerLayer;
                    }
                    Layer::Dense(params)
                }
                LayerRecord::BatchNorm {
                    eps,
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => Layer::BatchNorm(BatchNorm {
                    gamma: gamma.data().to_vec(),
                    beta: beta.data().to_vec(),
                    running_mean: running_mean.data().to_vec(),
                    running_var: running_var.data().to_vec(),
                    eps: *eps,
                    momentum: BN_MOMENTUM,
                }),
                LayerRecord::Relu => Layer::Relu,
                LayerRecord::MaxPool { size, stride } => Layer::MaxPool {
                    size: usize::from(*size),
                    stride: usize::from(*stride),
                },
                LayerRecord::Hinge { squared } => Layer::Loss(LossKind::Hinge { squared: *squared }),
                LayerRecord::SoftmaxCrossEntropy => Layer::Loss(LossKind::SoftmaxCrossEntropy),
            });
        }
        Self::new(model.input_dims.clone(), layers)
    }
}

fn he_init(rng: &mut Rng, shape: Shape, fan_in: usize) -> Result<DenseTensor, NnError> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let data = (0..shape.numel()).map(|_| (rng.normal() * std) as f32).collect();
    Ok(DenseTensor::from_vec(shape, data)?)
}

fn ternary_conv(
    x: &DenseTensor,
    wshape: &Shape,
    rows: &SignedRows,
    bias: &[f32],
    stride: usize,
    pad: usize,
) -> Result<DenseTensor, NnError> {
    let geo = layers::conv_geometry(x.shape(), wshape, stride, pad)?;
    let mut out = vec![0.0f32; geo.batch * geo.out_image_len()];
    let mut cols = vec![0.0f32; geo.patch_len() * geo.out_spatial()];
    for b in 0..geo.batch {
        let image = &x.data()[b * geo.in_image_len()..][..geo.in_image_len()];
        crate::kernels::im2col(&geo, image, &mut cols);
        rows.apply_to_columns(&cols, geo.out_spatial(), bias, &mut out[b * geo.out_image_len()..][..geo.out_image_len()]);
    }
    Ok(DenseTensor::from_vec(
        Shape::new([geo.batch, geo.cout, geo.out_height(), geo.out_width()])?,
        out,
    )?)
}

fn flatten_scores(act: DenseTensor) -> Result<DenseTensor, NnError> {
    let dims = act.shape().dims();
    let batch = dims[0];
    let rest = flat_dims(&dims[1..]);
    Ok(act.reshape(Shape::new([batch, rest])?)?)
}

fn check_loss(loss: Option<f64>, scores: &DenseTensor) -> Result<(), NnError> {
    match loss {
        Some(l) if !l.is_finite() => {
            let min = scores.data().iter().copied().fold(f32::INFINITY, f32::min);
            let max = scores.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
            Err(NnError::NonFiniteLoss { loss: l, min, max })
        }
        _ => Ok(()),
    }
}

/// Reduced LeNet used for the desk-scale MNIST runs:
/// 16-C5 + MP2 + 32-C5 + MP2 + 256-FC + SVM, each weighted layer followed by
/// batch norm and ReLU.
pub fn lenet_small() -> Vec<LayerSpec> {
    let conv = |out| LayerSpec::Conv {
        out,
        kh: 5,
        kw: 5,
        stride: 1,
        pad: 2,
        mode: None,
        grouping: None,
    };
    let fc = |out| LayerSpec::Dense {
        out,
        mode: None,
        grouping: None,
    };
    let pool = LayerSpec::MaxPool { size: 2, stride: 2 };
    vec![
        conv(16),
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        pool.clone(),
        conv(32),
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        pool,
        fc(256),
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        fc(10),
        LayerSpec::Loss(LossKind::Hinge { squared: true }),
    ]
}

#[cfg(test)]
mod tests;
