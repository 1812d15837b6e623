//! Deep belief network: stacked restricted Boltzmann machines pretrained
//! greedily with contrastive divergence, topped by a sigmoid output layer
//! and fine-tuned with backpropagation.
//!
//! Visible units are Bernoulli with real-valued activations in `[0, 1]`, so
//! min-max normalised features feed the first layer directly.
//!
//! One CD-k step on a mini-batch `V0` (rows are instances):
//!
//! 1. `P0 = sigmoid(V0 W + c)`;
//! 2. `H` = Bernoulli draws from `P0`, row by row, unit by unit;
//! 3. for `step = 1..=k`: `Vr = sigmoid(H W' + b)`, `Pr = sigmoid(Vr W + c)`,
//!    and unless `step == k`, `H` = Bernoulli draws from `Pr`;
//! 4. `dW = (V0' P0 - Vr' Pr) / B`, `db = mean(V0 - Vr)`,
//!    `dc = mean(P0 - Pr)`; parameters move by `learning_rate` times these.
//!
//! Mini-batches are consecutive slices of an order reshuffled every epoch
//! with the seeded generator; the last batch may be short.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::Label;
use crate::features::Normalizer;
use crate::rng::SplitMix64;

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const INPUT_WIDTH: usize = 12;
pub const CLASS_COUNT: usize = 2;

#[derive(Debug, Error)]
pub enum DbnError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("input value {value} at row {row}, column {col} is outside [0, 1]")]
    Unnormalized { row: usize, col: usize, value: f64 },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("unsupported model format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt model file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = DbnError> = std::result::Result<T, E>;

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sigmoid_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(sigmoid);
}

/// Supervised objective used during fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `(1/B) sum_b 1/2 sum_j (o_j - t_j)^2` over sigmoid outputs.
    #[default]
    MeanSquared,
    /// `-(1/B) sum_b sum_j t_j ln o_j` over softmax outputs.
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub fine_tune_epochs: usize,
    pub pretrain_epochs: usize,
    pub cd_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_init_std: f64,
    pub loss: Loss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.2,
            fine_tune_epochs: 100,
            pretrain_epochs: 50,
            cd_steps: 1,
            batch_size: 10,
            seed: 0,
            weight_init_std: 0.01,
            loss: Loss::MeanSquared,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(DbnError::InvalidConfig(format!(
                "learning rate must be a finite non-negative number, got {}",
                self.learning_rate
            )));
        }
        if self.cd_steps == 0 || self.batch_size == 0 {
            return Err(DbnError::InvalidConfig(
                "cd_steps and batch_size must be at least 1".into(),
            ));
        }
        if !(self.weight_init_std >= 0.0 && self.weight_init_std.is_finite()) {
            return Err(DbnError::InvalidConfig(format!(
                "weight_init_std must be finite and non-negative, got {}",
                self.weight_init_std
            )));
        }
        Ok(())
    }
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut SplitMix64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || std * rng.next_gaussian())
}

fn sample_bernoulli(p: &Array2<f64>, rng: &mut SplitMix64) -> Array2<f64> {
    p.mapv(|q| if rng.bernoulli(q) { 1.0 } else { 0.0 })
}

/// One restricted Boltzmann machine; `weights` is visible x hidden.
#[derive(Debug, Clone, PartialEq)]
pub struct RbmLayer {
    pub weights: Array2<f64>,
    pub visible_bias: Array1<f64>,
    pub hidden_bias: Array1<f64>,
}

/// Log-likelihood ascent direction estimated for one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RbmGradient {
    pub weights: Array2<f64>,
    pub visible_bias: Array1<f64>,
    pub hidden_bias: Array1<f64>,
}

impl RbmLayer {
    pub fn zeros(visible: usize, hidden: usize) -> Self {
        Self {
            weights: Array2::zeros((visible, hidden)),
            visible_bias: Array1::zeros(visible),
            hidden_bias: Array1::zeros(hidden),
        }
    }

    /// Gaussian weights with the given standard deviation, zero biases.
    pub fn random(visible: usize, hidden: usize, std: f64, rng: &mut SplitMix64) -> Self {
        Self {
            weights: gaussian_matrix(visible, hidden, std, rng),
            ..Self::zeros(visible, hidden)
        }
    }

    pub fn visible_len(&self) -> usize {
        self.weights.nrows()
    }

    pub fn hidden_len(&self) -> usize {
        self.weights.ncols()
    }

    fn check(&self) -> Result<()> {
        if self.visible_bias.len() != self.visible_len() || self.hidden_bias.len() != self.hidden_len() {
            return Err(DbnError::DimensionMismatch(format!(
                "{}x{} weights with {} visible and {} hidden biases",
                self.visible_len(),
                self.hidden_len(),
                self.visible_bias.len(),
                self.hidden_bias.len()
            )));
        }
        if self.weights.iter().chain(&self.visible_bias).chain(&self.hidden_bias).any(|v| !v.is_finite()) {
            return Err(DbnError::NonFinite("RBM parameters"));
        }
        Ok(())
    }

    pub fn hidden_probs(&self, visible: &ArrayView2<f64>) -> Array2<f64> {
        let mut h = visible.dot(&self.weights) + &self.hidden_bias;
        sigmoid_inplace(&mut h);
        h
    }

    pub fn visible_probs(&self, hidden: &ArrayView2<f64>) -> Array2<f64> {
        let mut v = hidden.dot(&self.weights.t()) + &self.visible_bias;
        sigmoid_inplace(&mut v);
        v
    }

    /// CD-k estimate of the log-likelihood gradient on `batch`.
    pub fn contrastive_divergence(
        &self,
        batch: &ArrayView2<f64>,
        k: usize,
        rng: &mut SplitMix64,
    ) -> RbmGradient {
        let b = batch.nrows() as f64;
        let p0 = self.hidden_probs(batch);
        let mut h = sample_bernoulli(&p0, rng);
        let mut vr = Array2::zeros(batch.raw_dim());
        let mut pr = Array2::zeros(p0.raw_dim());
        for step in 1..=k.max(1) {
            vr = self.visible_probs(&h.view());
            pr = self.hidden_probs(&vr.view());
            if step < k {
                h = sample_bernoulli(&pr, rng);
            }
        }
        RbmGradient {
            weights: (batch.t().dot(&p0) - vr.t().dot(&pr)) / b,
            visible_bias: (batch.to_owned() - &vr).sum_axis(Axis(0)) / b,
            hidden_bias: (p0 - &pr).sum_axis(Axis(0)) / b,
        }
    }

    pub fn apply_gradient(&mut self, grad: &RbmGradient, learning_rate: f64) {
        self.weights.scaled_add(learning_rate, &grad.weights);
        self.visible_bias.scaled_add(learning_rate, &grad.visible_bias);
        self.hidden_bias.scaled_add(learning_rate, &grad.hidden_bias);
    }

    /// Mean binary cross-entropy between `data` and its one-step
    /// mean-field reconstruction.
    pub fn reconstruction_cross_entropy(&self, data: &ArrayView2<f64>) -> f64 {
        let h = self.hidden_probs(data);
        let v = self.visible_probs(&h.view());
        let eps = 1e-12;
        let total: f64 = data
            .iter()
            .zip(v.iter())
            .map(|(&x, &r)| -(x * (r + eps).ln() + (1.0 - x) * (1.0 - r + eps).ln()))
            .sum();
        total / data.nrows() as f64
    }
}

/// Final classification layer; `weights` is hidden x classes.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DbnModel {
    pub layers: Vec<RbmLayer>,
    pub output: OutputLayer,
    pub normalizer: Option<Normalizer>,
    pub loss: Loss,
}

/// Parameter-shaped gradient of the supervised loss.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGradient {
    /// `(weights, hidden_bias)` per hidden layer.
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
    pub output_weights: Array2<f64>,
    pub output_bias: Array1<f64>,
}

fn validate_unit_interval(data: &ArrayView2<f64>) -> Result<()> {
    for ((row, col), &value) in data.indexed_iter() {
        if !(0.0..=1.0).contains(&value) {
            return Err(DbnError::Unnormalized { row, col, value });
        }
    }
    Ok(())
}

fn one_hot(labels: &[Label]) -> Array2<f64> {
    let mut t = Array2::zeros((labels.len(), CLASS_COUNT));
    for (i, l) in labels.iter().enumerate() {
        t[[i, class_index(*l)]] = 1.0;
    }
    t
}

pub fn class_index(label: Label) -> usize {
    match label {
        Label::Asthma => 0,
        Label::Healthy => 1,
    }
}

/// Arg-max over `(asthma, healthy)` scores; ties go to asthma.
pub fn label_from_scores(scores: &[f64]) -> Label {
    if scores[0] >= scores[1] {
        Label::Asthma
    } else {
        Label::Healthy
    }
}

fn batch_rows(data: &ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    data.select(Axis(0), idx)
}

impl DbnModel {
    /// Stacks `layers` under a fresh output layer drawn with `std`.
    pub fn from_layers(layers: Vec<RbmLayer>, std: f64, rng: &mut SplitMix64) -> Result<Self> {
        let top = layers
            .last()
            .map(RbmLayer::hidden_len)
            .ok_or_else(|| DbnError::DimensionMismatch("at least one hidden layer is required".into()))?;
        let model = Self {
            output: OutputLayer {
                weights: gaussian_matrix(top, CLASS_COUNT, std, rng),
                bias: Array1::zeros(CLASS_COUNT),
            },
            layers,
            normalizer: None,
            loss: Loss::MeanSquared,
        };
        model.validate()?;
        Ok(model)
    }

    /// Every parameter zero, for widths `input -> sizes... -> 2`.
    pub fn zeros(input: usize, sizes: &[usize]) -> Self {
        let mut layers = Vec::new();
        let mut prev = input;
        for &s in sizes {
            layers.push(RbmLayer::zeros(prev, s));
            prev = s;
        }
        Self {
            layers,
            output: OutputLayer {
                weights: Array2::zeros((prev, CLASS_COUNT)),
                bias: Array1::zeros(CLASS_COUNT),
            },
            normalizer: None,
            loss: Loss::MeanSquared,
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, RbmLayer::visible_len)
    }

    /// Layer widths from input to output, e.g. `[12, 160, 130, 2]`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_width()];
        s.extend(self.layers.iter().map(RbmLayer::hidden_len));
        s.push(self.output.weights.ncols());
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(DbnError::DimensionMismatch("model has no hidden layers".into()));
        }
        for l in &self.layers {
            l.check()?;
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].hidden_len() != pair[1].visible_len() {
                return Err(DbnError::DimensionMismatch(format!(
                    "layer {} emits {} units but layer {} expects {}",
                    i + 1,
                    pair[0].hidden_len(),
                    i + 2,
                    pair[1].visible_len()
                )));
            }
        }
        let top = self.layers.last().unwrap().hidden_len();
        if self.output.weights.nrows() != top
            || self.output.weights.ncols() != CLASS_COUNT
            || self.output.bias.len() != CLASS_COUNT
        {
            return Err(DbnError::DimensionMismatch(format!(
                "output layer is {}x{} with {} biases; expected {top}x{CLASS_COUNT}",
                self.output.weights.nrows(),
                self.output.weights.ncols(),
                self.output.bias.len()
            )));
        }
        if self.output.weights.iter().chain(&self.output.bias).any(|v| !v.is_finite()) {
            return Err(DbnError::NonFinite("output layer"));
        }
        if let Some(n) = &self.normalizer {
            if n.width() != self.input_width() {
                return Err(DbnError::DimensionMismatch(format!(
                    "normalizer width {} vs input width {}",
                    n.width(),
                    self.input_width()
                )));
            }
        }
        Ok(())
    }

    fn check_input(&self, inputs: &ArrayView2<f64>) -> Result<()> {
        if inputs.ncols() != self.input_width() {
            return Err(DbnError::DimensionMismatch(format!(
                "input has {} features, model expects {}",
                inputs.ncols(),
                self.input_width()
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(DbnError::NonFinite("input"));
        }
        Ok(())
    }

    /// Activations of every layer; the last entry holds the class scores.
    fn activations(&self, inputs: &ArrayView2<f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 2);
        acts.push(inputs.to_owned());
        for layer in &self.layers {
            let next = layer.hidden_probs(&acts.last().unwrap().view());
            acts.push(next);
        }
        let mut out = acts.last().unwrap().dot(&self.output.weights) + &self.output.bias;
        match self.loss {
            Loss::MeanSquared => sigmoid_inplace(&mut out),
            Loss::CrossEntropy => {
                for mut row in out.rows_mut() {
                    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    row.mapv_inplace(|v| (v - m).exp());
                    let s = row.sum();
                    row /= s;
                }
            }
        }
        acts.push(out);
        acts
    }

    /// Class scores `(asthma, healthy)` for each input row.
    pub fn forward_batch(&self, inputs: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(inputs)?;
        Ok(self.activations(inputs).pop().unwrap())
    }

    pub fn forward(&self, input: &[f64]) -> Result<[f64; CLASS_COUNT]> {
        let row = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| DbnError::DimensionMismatch(e.to_string()))?;
        let out = self.forward_batch(&row)?;
        Ok([out[[0, 0]], out[[0, 1]]])
    }

    pub fn predict(&self, inputs: &[Vec<f64>]) -> Result<Vec<Label>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let data = rows_to_array(inputs)?;
        let scores = self.forward_batch(&data.view())?;
        Ok(scores
            .rows()
            .into_iter()
            .map(|r| label_from_scores(&[r[0], r[1]]))
            .collect())
    }

    /// Supervised loss on `(inputs, targets)`.
    pub fn loss_value(&self, inputs: &ArrayView2<f64>, targets: &ArrayView2<f64>) -> f64 {
        let out = self.activations(inputs).pop().unwrap();
        let b = inputs.nrows() as f64;
        match self.loss {
            Loss::MeanSquared => 0.5 * (&out - targets).mapv(|e| e * e).sum() / b,
            Loss::CrossEntropy => {
                -targets
                    .iter()
                    .zip(out.iter())
                    .map(|(&t, &o)| if t > 0.0 { t * o.max(1e-300).ln() } else { 0.0 })
                    .sum::<f64>()
                    / b
            }
        }
    }

    /// Backpropagated gradient of [`DbnModel::loss_value`].
    pub fn gradient(&self, inputs: &ArrayView2<f64>, targets: &ArrayView2<f64>) -> NetworkGradient {
        let acts = self.activations(inputs);
        let b = inputs.nrows() as f64;
        let out = acts.last().unwrap();
        let mut delta = match self.loss {
            Loss::MeanSquared => (out - targets) * &out.mapv(|o| o * (1.0 - o)) / b,
            Loss::CrossEntropy => (out - targets) / b,
        };
        let top = &acts[acts.len() - 2];
        let output_weights = top.t().dot(&delta);
        let output_bias = delta.sum_axis(Axis(0));

        let mut layers = vec![(Array2::zeros((0, 0)), Array1::zeros(0)); self.layers.len()];
        let mut upstream = &self.output.weights;
        for l in (0..self.layers.len()).rev() {
            let a = &acts[l + 1];
            delta = delta.dot(&upstream.t()) * &a.mapv(|v| v * (1.0 - v));
            layers[l] = (acts[l].t().dot(&delta), delta.sum_axis(Axis(0)));
            upstream = &self.layers[l].weights;
        }
        NetworkGradient {
            layers,
            output_weights,
            output_bias,
        }
    }

    fn descend(&mut self, grad: &NetworkGradient, learning_rate: f64) {
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(&grad.layers) {
            layer.weights.scaled_add(-learning_rate, gw);
            layer.hidden_bias.scaled_add(-learning_rate, gb);
        }
        self.output.weights.scaled_add(-learning_rate, &grad.output_weights);
        self.output.bias.scaled_add(-learning_rate, &grad.output_bias);
    }
}

pub fn rows_to_array(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(DbnError::DimensionMismatch("rows have differing widths".into()));
    }
    Ok(Array2::from_shape_vec((rows.len(), width), rows.concat()).expect("shape checked"))
}

fn epoch_batches(n: usize, batch_size: usize, rng: &mut SplitMix64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Per-layer reconstruction cross-entropy before training and after each
/// epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainHistory {
    pub reconstruction: Vec<Vec<f64>>,
}

/// Trains one RBM in place on `data` for `epochs` passes.
pub fn train_rbm(
    layer: &mut RbmLayer,
    data: &ArrayView2<f64>,
    epochs: usize,
    config: &TrainConfig,
    rng: &mut SplitMix64,
) -> Vec<f64> {
    let mut history = vec![layer.reconstruction_cross_entropy(data)];
    for _ in 0..epochs {
        for idx in epoch_batches(data.nrows(), config.batch_size, rng) {
            let batch = batch_rows(data, &idx);
            let grad = layer.contrastive_divergence(&batch.view(), config.cd_steps, rng);
            layer.apply_gradient(&grad, config.learning_rate);
        }
        history.push(layer.reconstruction_cross_entropy(data));
    }
    history
}

/// Greedy layer-wise pretraining. Each trained layer's hidden probabilities
/// become the next layer's training data.
pub fn pretrain(
    data: &ArrayView2<f64>,
    sizes: &[usize],
    config: &TrainConfig,
) -> Result<(Vec<RbmLayer>, PretrainHistory)> {
    config.validate()?;
    if data.nrows() == 0 {
        return Err(DbnError::EmptyTrainingSet);
    }
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(DbnError::DimensionMismatch(format!("invalid hidden sizes {sizes:?}")));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(DbnError::NonFinite("pretraining data"));
    }
    validate_unit_interval(data)?;

    let mut rng = SplitMix64::new(config.seed);
    let mut layers = Vec::with_capacity(sizes.len());
    let mut history = PretrainHistory::default();
    let mut input = data.to_owned();
    for &hidden in sizes {
        let mut layer = RbmLayer::random(input.ncols(), hidden, config.weight_init_std, &mut rng);
        let h = train_rbm(&mut layer, &input.view(), config.pretrain_epochs, config, &mut rng);
        history.reconstruction.push(h);
        input = layer.hidden_probs(&input.view());
        layers.push(layer);
    }
    Ok((layers, history))
}

/// Full-training-set loss after each fine-tuning epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FineTuneHistory {
    pub loss: Vec<f64>,
}

/// Mini-batch gradient descent on the supervised loss.
pub fn fine_tune(
    model: &mut DbnModel,
    data: &ArrayView2<f64>,
    labels: &[Label],
    config: &TrainConfig,
) -> Result<FineTuneHistory> {
    config.validate()?;
    if data.nrows() == 0 {
        return Err(DbnError::EmptyTrainingSet);
    }
    if data.nrows() != labels.len() {
        return Err(DbnError::DimensionMismatch(format!(
            "{} rows but {} labels",
            data.nrows(),
            labels.len()
        )));
    }
    model.check_input(data)?;
    model.loss = config.loss;
    let targets = one_hot(labels);
    let mut rng = SplitMix64::new(config.seed ^ 0xF1AE_7E0D_5EED_0001);
    let mut history = FineTuneHistory::default();
    for _ in 0..config.fine_tune_epochs {
        for idx in epoch_batches(data.nrows(), config.batch_size, &mut rng) {
            let x = batch_rows(data, &idx);
            let t = targets.select(Axis(0), &idx);
            let grad = model.gradient(&x.view(), &t.view());
            model.descend(&grad, config.learning_rate);
        }
        history.loss.push(model.loss_value(data, &targets.view()));
    }
    Ok(history)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingHistory {
    pub pretrain: PretrainHistory,
    pub fine_tune: FineTuneHistory,
}

/// Pretrains the hidden stack, adds an output layer, fine-tunes, and
/// attaches `normalizer` to the model. `data` must already be normalised.
pub fn train(
    data: &ArrayView2<f64>,
    labels: &[Label],
    sizes: &[usize],
    config: &TrainConfig,
    normalizer: Option<Normalizer>,
) -> Result<(DbnModel, TrainingHistory)> {
    let (layers, pretrain_history) = pretrain(data, sizes, config)?;
    let mut rng = SplitMix64::new(!config.seed);
    let mut model = DbnModel::from_layers(layers, config.weight_init_std, &mut rng)?;
    let fine = fine_tune(&mut model, data, labels, config)?;
    model.normalizer = normalizer;
    model.validate()?;
    Ok((
        model,
        TrainingHistory {
            pretrain: pretrain_history,
            fine_tune: fine,
        },
    ))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    c: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputFile {
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    version: u32,
    sizes: Vec<usize>,
    #[serde(default)]
    loss: Loss,
    layers: Vec<LayerFile>,
    output: OutputFile,
    normalizer: Option<Normalizer>,
}

fn matrix_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn matrix_from_rows(rows: Vec<Vec<f64>>, what: &str) -> std::result::Result<Array2<f64>, String> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(format!("ragged {what} matrix"));
    }
    Array2::from_shape_vec((r, c), rows.concat()).map_err(|e| e.to_string())
}

impl DbnModel {
    pub fn to_json(&self) -> String {
        let file = ModelFile {
            version: MODEL_FORMAT_VERSION,
            sizes: self.sizes(),
            loss: self.loss,
            layers: self
                .layers
                .iter()
                .map(|l| LayerFile {
                    w: matrix_rows(&l.weights),
                    b: l.visible_bias.to_vec(),
                    c: l.hidden_bias.to_vec(),
                })
                .collect(),
            output: OutputFile {
                w: matrix_rows(&self.output.weights),
                b: self.output.bias.to_vec(),
            },
            normalizer: self.normalizer.clone(),
        };
        serde_json::to_string(&file).expect("model serialises")
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let corrupt = |reason: String| DbnError::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| corrupt(e.to_string()))?;
        let version = raw
            .get("version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| corrupt("missing version".into()))?;
        if version != u64::from(MODEL_FORMAT_VERSION) {
            return Err(DbnError::VersionMismatch {
                found: version as u32,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        let file: ModelFile = serde_json::from_value(raw).map_err(|e| corrupt(e.to_string()))?;
        let layers = file
            .layers
            .into_iter()
            .map(|l| {
                Ok(RbmLayer {
                    weights: matrix_from_rows(l.w, "layer")?,
                    visible_bias: Array1::from(l.b),
                    hidden_bias: Array1::from(l.c),
                })
            })
            .collect::<std::result::Result<Vec<_>, String>>()
            .map_err(corrupt)?;
        let model = DbnModel {
            layers,
            output: OutputLayer {
                weights: matrix_from_rows(file.output.w, "output").map_err(corrupt)?,
                bias: Array1::from(file.output.b),
            },
            normalizer: file.normalizer,
            loss: file.loss,
        };
        model.validate().map_err(|e| corrupt(e.to_string()))?;
        if model.sizes() != file.sizes {
            return Err(corrupt(format!(
                "declared sizes {:?} but layers give {:?}",
                file.sizes,
                model.sizes()
            )));
        }
        Ok(model)
    }
}

pub fn save_model(model: &DbnModel, path: &Path) -> Result<()> {
    fs::write(path, model.to_json() + "\n").map_err(|source| DbnError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<DbnModel> {
    let text = fs::read_to_string(path).map_err(|source| DbnError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    DbnModel::from_json(&text, path)
}
