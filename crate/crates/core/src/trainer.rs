//! SGD with momentum, multi-step learning-rate decay and per-epoch
//! validation.
//!
//! Every iteration runs quantize, forward, backward, update in that order.
//! Gradients come from the effective (quantized) weights and are applied to
//! the full-precision masters.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::nn::{LayerSpec, Mode, Network, NnError, ParamId, ParamKind, WeightMode};
use crate::packfmt::PackError;
use crate::tensor::Rng;

const SHUFFLE_STREAM: u64 = 0x5348_5546;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dataset {0} is empty")]
    EmptyDataset(String),
    #[error("dataset does not fit the network: {0}")]
    DatasetMismatch(String),
    #[error("non-finite gradient for {param}")]
    NonFiniteGradient { param: ParamId },
    #[error("update produced non-finite values in {param}")]
    NonFiniteUpdate { param: ParamId },
    #[error("gradients do not match parameters: {0}")]
    GradientMismatch(String),
    #[error("training diverged in epoch {epoch} step {step}: {cause}")]
    Diverged {
        epoch: usize,
        step: usize,
        cause: String,
        /// Best network seen before the failure (the initial one if no
        /// epoch completed).
        last_good: Box<Network>,
    },
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Pack(#[from] PackError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_mode: WeightMode,
}

impl TrainConfig {
    /// MNIST hyperparameters: lr 0.01 divided by 10 at epochs 15 and 25,
    /// momentum 0.9, weight decay 1e-4, batch 50.
    pub fn mnist(weight_mode: WeightMode, epochs: usize, seed: u64) -> Self {
        Self {
            initial_lr: 0.01,
            lr_decay_epochs: vec![15, 25],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 50,
            epochs,
            seed,
            weight_mode,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad(format!("initial_lr must be positive, got {}", self.initial_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return bad(format!("lr_decay_factor must be positive, got {}", self.lr_decay_factor));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("decay epochs must be strictly increasing: {:?}", self.lr_decay_epochs));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        Ok(())
    }

    /// Builds a freshly initialized network seeded from this config.
    pub fn build_network(&self, input_dims: &[usize], specs: &[LayerSpec]) -> Result<Network, TrainError> {
        Ok(Network::build(input_dims, specs, self.weight_mode, self.seed)?)
    }
}

/// Learning rate for zero-based `epoch`.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    let steps = config.lr_decay_epochs.iter().filter(|&&d| d <= epoch).count();
    config.initial_lr * config.lr_decay_factor.powi(steps as i32)
}

/// Velocities for every trainable parameter, in [`Network::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub momentum: f32,
    pub velocity: Vec<Vec<f32>>,
}

impl MomentumState {
    pub fn new(network: &Network, momentum: f64) -> Self {
        Self::for_lengths(network.params().iter().map(|(_, p)| p.len()), momentum)
    }

    pub fn for_lengths(lengths: impl IntoIterator<Item = usize>, momentum: f64) -> Self {
        Self {
            momentum: momentum as f32,
            velocity: lengths.into_iter().map(|n| vec![0.0; n]).collect(),
        }
    }
}

/// `v <- momentum * v - lr * (g + wd * w); w <- w + v`. Weight decay only
/// touches weight tensors, not biases or batch-norm parameters. All
/// gradients are checked before anything is written.
pub fn sgd_step(
    params: Vec<(ParamId, &mut [f32])>,
    grads: &[(ParamId, &[f32])],
    state: &mut MomentumState,
    lr: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(TrainError::GradientMismatch(format!(
            "{} parameters, {} gradients, {} velocities",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for ((id, p), ((gid, g), v)) in params.iter().zip(grads.iter().zip(&state.velocity)) {
        if id != gid || p.len() != g.len() || p.len() != v.len() {
            return Err(TrainError::GradientMismatch(format!("{id} against {gid}")));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFiniteGradient { param: *id });
        }
    }
    let (lr, mu) = (lr as f32, state.momentum);
    for ((id, p), ((_, g), v)) in params.into_iter().zip(grads.iter().zip(&mut state.velocity)) {
        let wd = if id.kind == ParamKind::Weight { weight_decay as f32 } else { 0.0 };
        for ((w, &g), v) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            *v = mu * *v - lr * (g + wd * *w);
            let next = *w + *v;
            if !next.is_finite() {
                return Err(TrainError::NonFiniteUpdate { param: id });
            }
            *w = next;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evaluation {
    pub correct: usize,
    pub total: usize,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

fn check_fit(network: &Network, data: &Dataset) -> Result<(), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset(data.tag.clone()));
    }
    if data.example_dims() != network.input_dims() {
        return Err(TrainError::DatasetMismatch(format!(
            "{} examples are {:?}, network expects {:?}",
            data.tag,
            data.example_dims(),
            network.input_dims()
        )));
    }
    if data.classes > network.classes() {
        return Err(TrainError::DatasetMismatch(format!(
            "{} has {} classes, network scores {}",
            data.tag,
            data.classes,
            network.classes()
        )));
    }
    Ok(())
}

/// Top-1 accuracy in evaluation mode. The network is not modified.
pub fn evaluate(network: &Network, data: &Dataset, batch_size: usize) -> Result<Evaluation, TrainError> {
    check_fit(network, data)?;
    let batch_size = batch_size.max(1);
    let mut correct = 0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (x, labels) = data.batch(chunk);
        let pass = network.forward_eval(&x, None)?;
        correct += pass.predictions.iter().zip(&labels).filter(|(p, y)| p == y).count();
    }
    Ok(Evaluation {
        correct,
        total: data.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's examples.
    pub loss: f64,
    /// Accuracy of the training-mode forward passes during the epoch.
    pub train_acc: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// FPWN, TWN, BPWN, or MIXED.
    pub network: String,
    pub config: TrainConfig,
    pub train_tag: String,
    pub val_tag: String,
    pub param_count: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    /// Accuracy of the best checkpoint on a separate test split, if one
    /// was evaluated.
    pub test_acc: Option<f64>,
    pub test_tag: Option<String>,
    pub model_path: Option<PathBuf>,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "epoch,loss,val_acc,lr";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.loss, e.val_acc, e.lr);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

pub fn network_label(network: &Network) -> String {
    let modes = network.weight_modes();
    match modes.first() {
        Some(&m) if modes.iter().all(|&x| x == m) => m.network_label().to_string(),
        _ => "MIXED".to_string(),
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    /// Network from the epoch with the best validation accuracy.
    pub best: Network,
    /// Network after the last epoch.
    pub last: Network,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Quantize,
    Forward,
    Backward,
    Update,
}

/// Asserts the per-iteration order quantize, forward, backward, update.
#[derive(Debug, Default)]
struct StepOrder(Option<Phase>);

impl StepOrder {
    fn enter(&mut self, phase: Phase) {
        let expected = match self.0 {
            None | Some(Phase::Update) => Phase::Quantize,
            Some(Phase::Quantize) => Phase::Forward,
            Some(Phase::Forward) => Phase::Backward,
            Some(Phase::Backward) => Phase::Update,
        };
        assert_eq!(phase, expected, "training step out of order");
        self.0 = Some(phase);
    }
}

fn is_divergence(e: &NnError) -> bool {
    matches!(e, NnError::NonFiniteLoss { .. } | NnError::NonFinite { .. })
}

fn save_checkpoint(network: &Network, path: &Path) -> Result<(), TrainError> {
    network.to_model_file()?.save(path)?;
    Ok(())
}

/// Trains `network` in place of a copy and returns the report with the
/// best and final networks. With `checkpoint`, the best network is written
/// there as a `.twn` file whenever validation accuracy improves.
pub fn train(
    network: Network,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    check_fit(&network, train_set)?;
    check_fit(&network, val_set)?;
    if network.loss_kind().is_none() {
        return Err(TrainError::Nn(NnError::Invalid("training needs a loss layer".into())));
    }

    let mut net = network;
    let mut state = MomentumState::new(&net, config.momentum);
    let mut rng = Rng::new(config.seed).fork(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(usize, f64, Network)> = None;
    let mut records = Vec::with_capacity(config.epochs);
    let mut step_order = StepOrder::default();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = lr_schedule(epoch, config);
        rng.shuffle(&mut order);
        let (mut loss_sum, mut seen, mut correct) = (0.0f64, 0usize, 0usize);
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let diverged = |cause: String, best: &Option<(usize, f64, Network)>, net: &Network| {
                let last_good = best.as_ref().map_or_else(|| net.clone(), |b| b.2.clone());
                TrainError::Diverged {
                    epoch,
                    step,
                    cause,
                    last_good: Box::new(last_good),
                }
            };
            let (x, labels) = train_set.batch(chunk);

            step_order.enter(Phase::Quantize);
            net.quantize()?;
            let generation = net.generation();

            step_order.enter(Phase::Forward);
            let pass = match net.forward(&x, Some(&labels), Mode::Train) {
                Ok(p) => p,
                Err(e) if is_divergence(&e) => return Err(diverged(e.to_string(), &best, &net)),
                Err(e) => return Err(e.into()),
            };
            assert_eq!(pass.generation(), generation, "forward ran on stale quantization");
            assert!(net.is_quantized(), "forward ran without fresh quantization");

            step_order.enter(Phase::Backward);
            let grads = net.backward(&pass, false)?;

            step_order.enter(Phase::Update);
            let grad_slices = grads.params();
            match sgd_step(net.params_mut(), &grad_slices, &mut state, lr, config.weight_decay) {
                Ok(()) => {}
                Err(e @ (TrainError::NonFiniteGradient { .. } | TrainError::NonFiniteUpdate { .. })) => {
                    return Err(diverged(e.to_string(), &best, &net));
                }
                Err(e) => return Err(e),
            }

            let loss = pass.loss.expect("training pass has a loss");
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
            correct += pass.predictions.iter().zip(&labels).filter(|(p, y)| p == y).count();
        }

        net.quantize()?;
        let val = evaluate(&net, val_set, config.batch_size)?.accuracy();
        if best.as_ref().is_none_or(|b| val > b.1) {
            if let Some(path) = checkpoint {
                save_checkpoint(&net, path)?;
            }
            best = Some((epoch, val, net.clone()));
        }
        records.push(EpochRecord {
            epoch,
            loss: loss_sum / seen.max(1) as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
            val_acc: val,
            lr,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }

    let (best_epoch, best_val_acc, best_net) = best.expect("at least one epoch");
    let report = TrainReport {
        network: network_label(&net),
        config: config.clone(),
        train_tag: train_set.tag.clone(),
        val_tag: val_set.tag.clone(),
        param_count: net.param_count(),
        epochs: records,
        best_epoch,
        best_val_acc,
        test_acc: None,
        test_tag: None,
        model_path: checkpoint.map(Path::to_path_buf),
    };
    Ok(TrainOutcome {
        report,
        best: best_net,
        last: net,
    })
}
