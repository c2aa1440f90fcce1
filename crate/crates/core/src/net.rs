//! Dense feed-forward network with manual backpropagation.
//!
//! One parameter store serves two heads: a linear embedding output (the
//! Siamese backbone) or a single sigmoid unit trained with binary
//! cross-entropy (the classifier / machine annotator).
//!
//! Weights are stored row-major, `outputs x inputs`, one [`Dense`] per
//! layer. Hidden layers apply the configured activation; the last layer is
//! linear.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::rng::{self, ChaCha8Rng};

/// Probability clamp used by the sigmoid head and [`bce_loss`].
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => libm::tanh(z),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    #[default]
    Embedding,
    SigmoidClassifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    /// Width of the embedding head. Ignored by the classifier head, which
    /// always ends in one logit.
    pub embed_dim: usize,
    pub activation: Activation,
    pub head: Head,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_dim: 16,
            hidden_dims: vec![32, 16],
            embed_dim: 8,
            activation: Activation::Relu,
            head: Head::Embedding,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn classifier(input_dim: usize) -> Self {
        NetConfig { input_dim, head: Head::SigmoidClassifier, ..NetConfig::default() }
    }

    pub fn embedding(input_dim: usize) -> Self {
        NetConfig { input_dim, head: Head::Embedding, ..NetConfig::default() }
    }

    pub fn output_dim(&self) -> usize {
        match self.head {
            Head::Embedding => self.embed_dim,
            Head::SigmoidClassifier => 1,
        }
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut widths = Vec::with_capacity(self.hidden_dims.len() + 2);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden_dims);
        widths.push(self.output_dim());
        widths
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths().contains(&0) {
            return Err(Error::config("network dimensions must all be >= 1"));
        }
        Ok(())
    }
}

/// One fully connected layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DenseRepr", into = "DenseRepr")]
pub struct Dense {
    inputs: usize,
    outputs: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DenseRepr {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl TryFrom<DenseRepr> for Dense {
    type Error = Error;

    fn try_from(r: DenseRepr) -> Result<Self> {
        let outputs = r.weights.len();
        let inputs = r.weights.first().map_or(0, Vec::len);
        if r.weights.iter().any(|row| row.len() != inputs) {
            return Err(Error::config("ragged weight matrix"));
        }
        Dense::from_parts(inputs, outputs, r.weights.concat(), r.bias)
    }
}

impl From<Dense> for DenseRepr {
    fn from(d: Dense) -> Self {
        let weights = d.weights.chunks(d.inputs.max(1)).map(<[f64]>::to_vec).collect();
        DenseRepr { weights, bias: d.bias }
    }
}

impl Dense {
    pub fn from_parts(inputs: usize, outputs: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::config("layer dimensions must be >= 1"));
        }
        if weights.len() != inputs * outputs {
            return Err(Error::DimensionMismatch { expected: inputs * outputs, found: weights.len() });
        }
        if bias.len() != outputs {
            return Err(Error::DimensionMismatch { expected: outputs, found: bias.len() });
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer parameters"));
        }
        Ok(Dense { inputs, outputs, weights, bias })
    }

    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense { inputs, outputs, weights: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    /// Row-major `outputs x inputs`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.inputs).zip(&self.bias).map(|(row, b)| {
            row.iter().zip(x).fold(*b, |acc, (w, xi)| acc + w * xi)
        }));
    }
}

/// Per-layer gradients, same shapes as the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &NetParams) -> Self {
        Gradients {
            weights: params.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: params.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn clear(&mut self) {
        self.slices_mut().for_each(|s| s.fill(0.0));
    }

    pub fn scale(&mut self, factor: f64) {
        self.slices_mut().flatten().for_each(|g| *g *= factor);
    }

    pub fn add(&mut self, other: &Gradients) {
        for (dst, src) in self.slices_mut().zip(other.slices()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }

    /// All components flattened in parameter order (see [`NetParams::flat`]).
    pub fn flat(&self) -> Vec<f64> {
        self.slices().flatten().copied().collect()
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.slices().flatten().map(|g| g * g).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.slices().flatten().all(|g| g.is_finite())
    }

    fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.weights.iter().zip(&self.bias).flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
    }

    fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.weights.iter_mut().zip(self.bias.iter_mut()).flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()])
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct Trace {
    /// Input of every layer plus the final linear output.
    activations: Vec<Vec<f64>>,
    /// Pre-activation of every layer.
    pre: Vec<Vec<f64>>,
}

impl Trace {
    /// Output of the last (linear) layer: embedding or logit.
    pub fn output(&self) -> &[f64] {
        self.activations.last().map_or(&[], Vec::as_slice)
    }
}

/// Network weights plus the configuration they were built from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsRepr", into = "ParamsRepr")]
pub struct NetParams {
    config: NetConfig,
    layers: Vec<Dense>,
}

#[derive(Serialize, Deserialize)]
struct ParamsRepr {
    config: NetConfig,
    layers: Vec<Dense>,
}

impl TryFrom<ParamsRepr> for NetParams {
    type Error = Error;

    fn try_from(r: ParamsRepr) -> Result<Self> {
        NetParams::from_layers(r.config, r.layers)
    }
}

impl From<NetParams> for ParamsRepr {
    fn from(p: NetParams) -> Self {
        ParamsRepr { config: p.config, layers: p.layers }
    }
}

impl NetParams {
    /// Seeded Glorot-uniform weights, zero biases.
    pub fn init(config: &NetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(config.seed);
        let widths = config.widths();
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
                let mut layer = Dense::zeros(fan_in, fan_out);
                layer.weights.iter_mut().for_each(|v| *v = rng.random_range(-bound..=bound));
                layer
            })
            .collect();
        Ok(NetParams { config: config.clone(), layers })
    }

    pub fn zeros(config: &NetConfig) -> Result<Self> {
        config.validate()?;
        let layers = config.widths().windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(NetParams { config: config.clone(), layers })
    }

    pub fn from_layers(config: NetConfig, layers: Vec<Dense>) -> Result<Self> {
        config.validate()?;
        let widths = config.widths();
        if layers.len() != widths.len() - 1 {
            return Err(Error::DimensionMismatch { expected: widths.len() - 1, found: layers.len() });
        }
        for (layer, w) in layers.iter().zip(widths.windows(2)) {
            if layer.inputs != w[0] {
                return Err(Error::DimensionMismatch { expected: w[0], found: layer.inputs });
            }
            if layer.outputs != w[1] {
                return Err(Error::DimensionMismatch { expected: w[1], found: layer.outputs });
            }
            if layer.weights.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("layer parameters"));
            }
        }
        Ok(NetParams { config, layers })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters flattened layer by layer, weights before biases.
    pub fn flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias)).copied().collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::DimensionMismatch { expected: self.num_params(), found: values.len() });
        }
        let mut src = values.iter();
        for layer in &mut self.layers {
            for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *v = *src.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.input_dim {
            return Err(Error::DimensionMismatch { expected: self.config.input_dim, found: x.len() });
        }
        Ok(())
    }

    pub fn trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let n = self.layers.len();
        let mut activations = Vec::with_capacity(n + 1);
        let mut pre = Vec::with_capacity(n);
        activations.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.outputs);
            layer.affine(&activations[i], &mut z);
            let a = if i + 1 < n {
                z.iter().map(|&v| self.config.activation.apply(v)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
            activations.push(a);
        }
        if activations[n].iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forward pass"));
        }
        Ok(Trace { activations, pre })
    }

    /// Embedding for the embedding head, `[probability]` for the classifier.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let trace = self.trace(x)?;
        Ok(match self.config.head {
            Head::Embedding => trace.output().to_vec(),
            Head::SigmoidClassifier => vec![clamp_prob(sigmoid(trace.output()[0]))],
        })
    }

    pub fn probability(&self, x: &[f64]) -> Result<f64> {
        if self.config.head != Head::SigmoidClassifier {
            return Err(Error::config("probability requires a sigmoid classifier head"));
        }
        Ok(self.forward(x)?[0])
    }

    /// Accumulates parameter gradients into `grads`, given the gradient of
    /// the loss with respect to the last layer's linear output.
    pub fn backward(&self, trace: &Trace, d_output: &[f64], grads: &mut Gradients) {
        let mut delta = d_output.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &trace.activations[i];
            let gw = &mut grads.weights[i];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                row.iter_mut().zip(input).for_each(|(g, a)| *g += d * a);
            }
            grads.bias[i].iter_mut().zip(&delta).for_each(|(g, d)| *g += d);
            if i == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.inputs];
            for (row, d) in layer.weights.chunks_exact(layer.inputs).zip(&delta) {
                prev.iter_mut().zip(row).for_each(|(p, w)| *p += w * d);
            }
            let act = self.config.activation;
            for ((p, z), a) in prev.iter_mut().zip(&trace.pre[i - 1]).zip(&trace.activations[i]) {
                *p *= act.derivative(*z, *a);
            }
            delta = prev;
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Binary cross-entropy with the probability clamped to `[eps, 1 - eps]`.
pub fn bce_loss(prob: f64, label: Label) -> f64 {
    let p = clamp_prob(prob);
    match label {
        Label::Malignant => -libm::log(p),
        Label::Benign => -libm::log(1.0 - p),
    }
}

/// A labeled feature vector borrowed from a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Example<'a> {
    pub features: &'a [f64],
    pub label: Label,
}

/// A differentiable per-item loss over a network.
pub trait Objective<T> {
    /// Adds the gradient of the loss on `item` into `grads` and returns the loss.
    fn accumulate(&self, params: &NetParams, item: &T, grads: &mut Gradients) -> Result<f64>;

    fn loss(&self, params: &NetParams, item: &T) -> Result<f64>;
}

/// Binary cross-entropy through the sigmoid head.
#[derive(Clone, Copy, Debug, Default)]
pub struct Bce;

impl Objective<Example<'_>> for Bce {
    fn accumulate(&self, params: &NetParams, item: &Example<'_>, grads: &mut Gradients) -> Result<f64> {
        let trace = params.trace(item.features)?;
        let p = sigmoid(trace.output()[0]);
        params.backward(&trace, &[p - item.label.as_f64()], grads);
        Ok(bce_loss(p, item.label))
    }

    fn loss(&self, params: &NetParams, item: &Example<'_>) -> Result<f64> {
        let trace = params.trace(item.features)?;
        Ok(bce_loss(sigmoid(trace.output()[0]), item.label))
    }
}

/// Sum-reduced loss and gradient of `objective` over a batch.
pub fn backprop<T, O: Objective<T>>(params: &NetParams, batch: &[T], objective: &O) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut grads = Gradients::zeros_like(params);
    let mut loss = 0.0;
    for item in batch {
        loss += objective.accumulate(params, item, &mut grads)?;
    }
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    Ok((loss, grads))
}

/// Binary cross-entropy backprop over a batch, sum reduction.
pub fn bce_backprop(params: &NetParams, batch: &[Example<'_>]) -> Result<(f64, Gradients)> {
    if params.config.head != Head::SigmoidClassifier {
        return Err(Error::config("cross-entropy needs a sigmoid classifier head"));
    }
    backprop(params, batch, &Bce)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub fine_tune_learning_rate: f64,
    pub fine_tune_epochs: usize,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 100,
            fine_tune_learning_rate: 1e-4,
            fine_tune_epochs: 50,
            batch_size: 1,
            validation_fraction: 0.2,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::config("validation_fraction must lie strictly between 0 and 1"));
        }
        for (name, lr) in [("learning_rate", self.learning_rate), ("fine_tune_learning_rate", self.fine_tune_learning_rate)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::config(alloc::format!("{name} must be finite and non-negative")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        Ok(())
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    m: Gradients,
    v: Gradients,
}

impl Optimizer {
    fn new(kind: OptimizerKind, lr: f64, params: &NetParams) -> Self {
        let zeros = Gradients::zeros_like(params);
        Optimizer { kind, lr, step: 0, m: zeros.clone(), v: zeros }
    }

    fn apply(&mut self, params: &mut NetParams, grads: &Gradients) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (i, layer) in params.layers.iter_mut().enumerate() {
                    layer.weights.iter_mut().zip(&grads.weights[i]).for_each(|(w, g)| *w -= self.lr * g);
                    layer.bias.iter_mut().zip(&grads.bias[i]).for_each(|(b, g)| *b -= self.lr * g);
                }
            }
            OptimizerKind::Adam => {
                self.step = self.step.saturating_add(1);
                let c1 = 1.0 - libm::pow(ADAM_BETA1, f64::from(self.step));
                let c2 = 1.0 - libm::pow(ADAM_BETA2, f64::from(self.step));
                let lr = self.lr;
                let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *p -= lr * (*m / c1) / (libm::sqrt(*v / c2) + ADAM_EPS);
                };
                for (i, layer) in params.layers.iter_mut().enumerate() {
                    for (j, w) in layer.weights.iter_mut().enumerate() {
                        update(w, grads.weights[i][j], &mut self.m.weights[i][j], &mut self.v.weights[i][j]);
                    }
                    for (j, b) in layer.bias.iter_mut().enumerate() {
                        update(b, grads.bias[i][j], &mut self.m.bias[i][j], &mut self.v.bias[i][j]);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: Option<usize>,
    pub warnings: Vec<String>,
}

/// Learning rate, epoch count and batching for one optimization run.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Schedule {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

/// Mini-batch descent keeping the parameters of the epoch with the lowest
/// validation loss (training loss when there is no validation data).
/// Reported training loss is the mean over the epoch, measured before each
/// update.
pub(crate) fn descend<T, O, F>(
    objective: &O,
    init: NetParams,
    schedule: Schedule,
    rng: &mut ChaCha8Rng,
    mut epoch_items: F,
    validation: &[T],
    log: &mut TrainLog,
) -> Result<NetParams>
where
    O: Objective<T>,
    F: FnMut(&mut ChaCha8Rng) -> Result<Vec<T>>,
{
    let mut params = init;
    let mut best: Option<(f64, NetParams)> = None;
    let mut optimizer = Optimizer::new(schedule.optimizer, schedule.lr, &params);
    let mut grads = Gradients::zeros_like(&params);
    for epoch in 1..=schedule.epochs {
        let items = epoch_items(rng)?;
        if items.is_empty() {
            return Err(Error::Empty("training items"));
        }
        let mut total = 0.0;
        for batch in items.chunks(schedule.batch_size) {
            grads.clear();
            for item in batch {
                total += objective.accumulate(&params, item, &mut grads)?;
            }
            if !grads.is_finite() {
                return Err(Error::NonFinite("gradient"));
            }
            grads.scale(1.0 / batch.len() as f64);
            optimizer.apply(&mut params, &grads);
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("parameters"));
        }
        let train_loss = total / items.len() as f64;
        let val_loss = if validation.is_empty() {
            None
        } else {
            let mut sum = 0.0;
            for item in validation {
                sum += objective.loss(&params, item)?;
            }
            Some(sum / validation.len() as f64)
        };
        let score = val_loss.unwrap_or(train_loss);
        if !score.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        log.epochs.push(EpochRecord { epoch, train_loss, val_loss });
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, params.clone()));
            log.best_epoch = Some(epoch);
        }
    }
    Ok(best.map_or(params, |(_, p)| p))
}

/// Splits items into (train, validation), taking `floor(fraction * n)` of
/// each class for validation after a seeded shuffle.
pub(crate) fn validation_split<T: Clone>(
    items: &[T],
    label_of: impl Fn(&T) -> Label,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<T>, Vec<T>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [Label::Benign, Label::Malignant] {
        let mut members: Vec<&T> = items.iter().filter(|t| label_of(t) == class).collect();
        members.shuffle(rng);
        let n_val = libm::floor(fraction * members.len() as f64) as usize;
        let n_val = n_val.min(members.len().saturating_sub(1));
        val.extend(members[..n_val].iter().map(|t| (*t).clone()));
        train.extend(members[n_val..].iter().map(|t| (*t).clone()));
    }
    (train, val)
}

fn check_examples(dim: usize, data: &[Example<'_>]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    if let Some(bad) = data.iter().find(|e| e.features.len() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, found: bad.features.len() });
    }
    Ok(())
}

fn bce_run(
    init: NetParams,
    lr: f64,
    epochs: usize,
    config: &TrainConfig,
    data: &[Example<'_>],
) -> Result<(NetParams, TrainLog)> {
    config.validate()?;
    if init.config.head != Head::SigmoidClassifier {
        return Err(Error::config("classifier training needs a sigmoid classifier head"));
    }
    check_examples(init.input_dim(), data)?;
    let mut log = TrainLog::default();
    let malignant = data.iter().filter(|e| e.label == Label::Malignant).count();
    if malignant == 0 || malignant == data.len() {
        log.warnings.push(String::from("training data contains a single class"));
    }
    let mut rng = rng::seeded(config.seed);
    let (train, val) = validation_split(data, |e| e.label, config.validation_fraction, &mut rng);
    let schedule = Schedule { lr, epochs, batch_size: config.batch_size, optimizer: config.optimizer };
    let params = descend(
        &Bce,
        init,
        schedule,
        &mut rng,
        |rng| {
            let mut items = train.clone();
            items.shuffle(rng);
            Ok(items)
        },
        &val,
        &mut log,
    )?;
    Ok((params, log))
}

/// Trains a fresh classifier from `net` with binary cross-entropy.
pub fn train(config: &TrainConfig, net: &NetConfig, data: &[Example<'_>]) -> Result<(NetParams, TrainLog)> {
    bce_run(NetParams::init(net)?, config.learning_rate, config.epochs, config, data)
}

/// Continues classifier training from `params` at the fine-tuning rate.
pub fn fine_tune(params: &NetParams, config: &TrainConfig, data: &[Example<'_>]) -> Result<(NetParams, TrainLog)> {
    if let Some(bad) = data.iter().find(|e| e.features.len() != params.input_dim()) {
        return Err(Error::DimensionMismatch { expected: params.input_dim(), found: bad.features.len() });
    }
    bce_run(params.clone(), config.fine_tune_learning_rate, config.fine_tune_epochs, config, data)
}

/// Hard prediction at the 0.5 threshold (exactly 0.5 is benign).
pub fn predict(params: &NetParams, x: &[f64]) -> Result<Label> {
    Ok(if params.probability(x)? > 0.5 { Label::Malignant } else { Label::Benign })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn tiny(head: Head, activation: Activation, hidden: &[usize], seed: u64) -> NetParams {
        let config = NetConfig { input_dim: 3, hidden_dims: hidden.to_vec(), embed_dim: 2, activation, head, seed };
        NetParams::init(&config).unwrap()
    }

    /// Central finite differences of the summed loss.
    fn numeric_grad<T, O: Objective<T>>(params: &NetParams, batch: &[T], obj: &O, h: f64) -> Vec<f64> {
        let base = params.flat();
        let loss_at = |vals: &[f64]| {
            let mut p = params.clone();
            p.set_flat(vals).unwrap();
            batch.iter().map(|item| obj.loss(&p, item).unwrap()).sum::<f64>()
        };
        (0..base.len())
            .map(|i| {
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus[i] += h;
                minus[i] -= h;
                (loss_at(&plus) - loss_at(&minus)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn zero_network_gives_half() {
        let p = NetParams::zeros(&NetConfig { input_dim: 4, ..NetConfig::classifier(4) }).unwrap();
        assert_eq!(p.forward(&[1.0, -2.0, 3.0, 9.0]).unwrap(), vec![0.5]);
    }

    #[test]
    fn identity_layer_embedding() {
        let config = NetConfig { input_dim: 2, hidden_dims: vec![], embed_dim: 2, ..NetConfig::default() };
        let layer = Dense::from_parts(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]).unwrap();
        let p = NetParams::from_layers(config, vec![layer]).unwrap();
        assert_eq!(p.forward(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn relu_blocks_negative_preactivations() {
        let config = NetConfig { input_dim: 2, hidden_dims: vec![3], embed_dim: 1, ..NetConfig::default() };
        let hidden = Dense::from_parts(2, 3, vec![-1.0; 6], vec![-0.5; 3]).unwrap();
        let out = Dense::from_parts(3, 1, vec![1.0; 3], vec![0.25]).unwrap();
        let p = NetParams::from_layers(config, vec![hidden, out]).unwrap();
        let trace = p.trace(&[1.0, 2.0]).unwrap();
        assert_eq!(trace.activations[1], vec![0.0; 3]);
        assert_eq!(trace.output(), &[0.25]);
    }

    #[test]
    fn dimension_mismatch() {
        let p = tiny(Head::Embedding, Activation::Relu, &[4], 1);
        assert_eq!(p.forward(&[1.0]), Err(Error::DimensionMismatch { expected: 3, found: 1 }));
    }

    #[test]
    fn bce_examples() {
        assert!((bce_loss(0.5, Label::Malignant) - core::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(1.0 - 1e-15, Label::Malignant) < 1e-11);
        assert!((bce_loss(0.9, Label::Benign) - core::f64::consts::LN_10).abs() < 1e-9);
        assert!(bce_loss(0.0, Label::Malignant).is_finite());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let xs = [[0.3, -1.2, 0.8], [1.5, 0.1, -0.4], [-0.7, 0.9, 0.2]];
        for (k, act) in [Activation::Tanh, Activation::Relu].into_iter().enumerate() {
            let mut p = tiny(Head::SigmoidClassifier, act, &[5, 4], 10 + k as u64);
            // Nonzero biases keep ReLU pre-activations off the kink at 0.
            let shifted: Vec<f64> = p.flat().iter().map(|v| v + 0.05).collect();
            p.set_flat(&shifted).unwrap();
            let batch: Vec<_> = xs
                .iter()
                .zip([Label::Malignant, Label::Benign, Label::Malignant])
                .map(|(x, label)| Example { features: x, label })
                .collect();
            let (_, g) = bce_backprop(&p, &batch).unwrap();
            let numeric = numeric_grad(&p, &batch, &Bce, 1e-5);
            for (i, (a, n)) in g.flat().iter().zip(&numeric).enumerate() {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
                assert!(rel < 1e-4 || (a - n).abs() < 1e-9, "{k} {i}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn zero_signal_zero_gradient() {
        // A saturated, correct prediction carries no learning signal.
        let config = NetConfig { input_dim: 1, hidden_dims: vec![], ..NetConfig::classifier(1) };
        let layer = Dense::from_parts(1, 1, vec![0.0], vec![40.0]).unwrap();
        let p = NetParams::from_layers(config, vec![layer]).unwrap();
        let batch = [Example { features: &[1.0], label: Label::Malignant }];
        let (loss, g) = bce_backprop(&p, &batch).unwrap();
        assert!(loss < 1e-12);
        assert!(g.norm() < 1e-8);
    }

    #[test]
    fn duplicated_sample_doubles_gradient() {
        let p = tiny(Head::SigmoidClassifier, Activation::Tanh, &[4], 3);
        let e = Example { features: &[0.2, 0.4, -1.0], label: Label::Benign };
        let (_, single) = bce_backprop(&p, &[e]).unwrap();
        let (_, double) = bce_backprop(&p, &[e, e]).unwrap();
        for (s, d) in single.flat().iter().zip(double.flat()) {
            assert_eq!(2.0 * s, d);
        }
    }

    #[test]
    fn empty_batch_is_an_error() {
        let p = tiny(Head::SigmoidClassifier, Activation::Tanh, &[4], 3);
        assert_eq!(bce_backprop(&p, &[]).unwrap_err(), Error::Empty("batch"));
    }

    fn blobs(n: usize, seed: u64) -> Vec<([f64; 2], Label)> {
        let mut rng = rng::seeded(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        (0..n)
            .map(|i| {
                let label = if i % 2 == 0 { Label::Benign } else { Label::Malignant };
                let c = if label == Label::Malignant { 2.5 } else { -2.5 };
                ([c + noise.sample(&mut rng), c + noise.sample(&mut rng)], label)
            })
            .collect()
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = blobs(200, 5);
        let examples: Vec<_> = data.iter().map(|(x, l)| Example { features: x, label: *l }).collect();
        let net = NetConfig { input_dim: 2, hidden_dims: vec![8], ..NetConfig::classifier(2) };
        let (params, log) = train(&TrainConfig::default(), &net, &examples).unwrap();
        let correct = examples.iter().filter(|e| predict(&params, e.features).unwrap() == e.label).count();
        assert!(correct as f64 / examples.len() as f64 >= 0.95);
        assert_eq!(log.epochs.len(), 100);
        assert!(log.warnings.is_empty());
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let data = blobs(20, 1);
        let examples: Vec<_> = data.iter().map(|(x, l)| Example { features: x, label: *l }).collect();
        let net = NetConfig { input_dim: 2, ..NetConfig::classifier(2) };
        let config = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let (params, log) = train(&config, &net, &examples).unwrap();
        assert_eq!(params, NetParams::init(&net).unwrap());
        assert!(log.epochs.is_empty());

        let tune = TrainConfig { fine_tune_epochs: 0, ..TrainConfig::default() };
        assert_eq!(fine_tune(&params, &tune, &examples).unwrap().0, params);
        let frozen = TrainConfig { fine_tune_learning_rate: 0.0, fine_tune_epochs: 3, ..TrainConfig::default() };
        assert_eq!(fine_tune(&params, &frozen, &examples).unwrap().0, params);
    }

    #[test]
    fn fine_tune_shape_mismatch() {
        let net = NetConfig { input_dim: 3, ..NetConfig::classifier(3) };
        let params = NetParams::init(&net).unwrap();
        let bad = [Example { features: &[1.0, 2.0], label: Label::Benign }];
        assert!(matches!(fine_tune(&params, &TrainConfig::default(), &bad), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn training_is_deterministic() {
        let data = blobs(40, 2);
        let examples: Vec<_> = data.iter().map(|(x, l)| Example { features: x, label: *l }).collect();
        let net = NetConfig { input_dim: 2, seed: 9, ..NetConfig::classifier(2) };
        let config = TrainConfig { epochs: 5, seed: 4, ..TrainConfig::default() };
        let a = train(&config, &net, &examples).unwrap();
        let b = train(&config, &net, &examples).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_class_warns_but_trains() {
        let data = blobs(10, 2);
        let examples: Vec<_> =
            data.iter().map(|(x, _)| Example { features: x, label: Label::Malignant }).collect();
        let net = NetConfig { input_dim: 2, ..NetConfig::classifier(2) };
        let config = TrainConfig { epochs: 2, ..TrainConfig::default() };
        let (_, log) = train(&config, &net, &examples).unwrap();
        assert_eq!(log.warnings.len(), 1);
        assert_eq!(log.epochs.len(), 2);
    }

    #[test]
    fn full_batch_sgd_loss_is_non_increasing() {
        let data = blobs(60, 8);
        let examples: Vec<_> = data.iter().map(|(x, l)| Example { features: x, label: *l }).collect();
        let net = NetConfig { input_dim: 2, hidden_dims: vec![], ..NetConfig::classifier(2) };
        let config = TrainConfig {
            learning_rate: 1e-4,
            epochs: 30,
            batch_size: examples.len(),
            optimizer: OptimizerKind::Sgd,
            ..TrainConfig::default()
        };
        let (_, log) = train(&config, &net, &examples).unwrap();
        for w in log.epochs.windows(2) {
            assert!(w[1].train_loss <= w[0].train_loss + 1e-15);
        }
    }

    #[test]
    fn params_round_trip_through_repr() {
        let p = tiny(Head::Embedding, Activation::Relu, &[4, 3], 2);
        let repr = ParamsRepr::from(p.clone());
        assert_eq!(NetParams::try_from(repr).unwrap(), p);
    }

    #[test]
    fn invalid_train_config() {
        assert!(TrainConfig { validation_fraction: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn sigmoid_output_in_open_unit_interval(z in -1e6f64..1e6) {
            let config = NetConfig { input_dim: 1, hidden_dims: vec![], ..NetConfig::classifier(1) };
            let layer = Dense::from_parts(1, 1, vec![1.0], vec![0.0]).unwrap();
            let p = NetParams::from_layers(config, vec![layer]).unwrap();
            let prob = p.probability(&[z]).unwrap();
            prop_assert!(prob > 0.0 && prob < 1.0);
        }
    }
}
