//! Feedforward ON/OFF classifiers: ReLU hidden layers, one sigmoid output,
//! mean binary cross-entropy trained by mini-batch SGD.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::signalio::MedState;

pub const PROB_CLAMP: f64 = 1e-7;
const MODEL_FORMAT_VERSION: u32 = 1;
pub const SEARCH_WIDTHS: [usize; 5] = [32, 64, 128, 256, 512];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DnnArchitecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
}

impl DnnArchitecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>) -> Result<Self> {
        let arch = Self { input_dim, hidden };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidInput("input dimension must be positive".into()));
        }
        if !(1..=3).contains(&self.hidden.len()) {
            return Err(Error::InvalidInput(format!(
                "expected 1 to 3 hidden layers, got {}",
                self.hidden.len()
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidInput("hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// True when every hidden width is one of the searched widths.
    pub fn in_search_space(&self) -> bool {
        self.validate().is_ok() && self.hidden.iter().all(|w| SEARCH_WIDTHS.contains(w))
    }

    /// Layer sizes including input and the single output unit.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.hidden.len() + 2);
        s.push(self.input_dim);
        s.extend(&self.hidden);
        s.push(1);
        s
    }

    pub fn num_params(&self) -> usize {
        self.sizes().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Hidden widths joined with `-`, e.g. `512-128`.
    pub fn hidden_label(&self) -> String {
        self.hidden
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("-")
    }
}

/// Weights are stored `fan_in × fan_out`, so a layer computes `x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DnnModel {
    pub architecture: DnnArchitecture,
    pub layers: Vec<Layer>,
}

/// Gradients with the same layout as the model's layers.
pub type Gradients = Vec<Layer>;

/// He initialization: weights from N(0, 2 / fan_in), zero biases.
pub fn init_network(arch: &DnnArchitecture, seed: u64) -> Result<DnnModel> {
    arch.validate()?;
    let mut rng = crate::seed::rng_from(seed);
    let layers = arch
        .sizes()
        .windows(2)
        .map(|w| {
            let normal = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).expect("positive std");
            Layer {
                weights: Array2::from_shape_simple_fn((w[0], w[1]), || normal.sample(&mut rng)),
                bias: Array1::zeros(w[1]),
            }
        })
        .collect();
    Ok(DnnModel {
        architecture: arch.clone(),
        layers,
    })
}

/// Logistic function kept strictly inside (0, 1) even for saturated inputs.
fn sigmoid(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

impl DnnModel {
    pub fn input_dim(&self) -> usize {
        self.architecture.input_dim
    }

    pub fn num_params(&self) -> usize {
        self.architecture.num_params()
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: cols,
            });
        }
        Ok(())
    }

    /// Activations of every layer; the last entry holds output probabilities.
    fn activations(&self, batch: ArrayView2<'_, f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        let mut current = batch.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = current.dot(&layer.weights);
            z += &layer.bias;
            if i == last {
                z.mapv_inplace(sigmoid);
            } else {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z.clone());
            current = z;
        }
        acts
    }

    /// Flat view of every parameter, layer by layer, weights (row-major) then bias.
    pub fn parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_parameter(&mut self, index: usize, value: f64) {
        let mut i = index;
        for l in &mut self.layers {
            if i < l.weights.len() {
                let cols = l.weights.ncols();
                l.weights[[i / cols, i % cols]] = value;
                return;
            }
            i -= l.weights.len();
            if i < l.bias.len() {
                l.bias[i] = value;
                return;
            }
            i -= l.bias.len();
        }
        panic!("parameter index {index} out of range");
    }

    fn apply_step(&mut self, grads: &Gradients, rate: f64) {
        for (l, g) in self.layers.iter_mut().zip(grads) {
            l.weights.scaled_add(-rate, &g.weights);
            l.bias.scaled_add(-rate, &g.bias);
        }
    }
}

pub fn forward(model: &DnnModel, batch: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    model.check_input(batch.ncols())?;
    let out = model.activations(batch).pop().expect("at least one layer");
    Ok(out.column(0).to_owned())
}

fn check_labels(labels: &[f64], rows: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::DimensionMismatch {
            expected: rows,
            got: labels.len(),
        });
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidInput("labels must be 0 or 1".into()));
    }
    Ok(())
}

/// Mean (optionally weighted) binary cross-entropy and its gradient.
///
/// The loss value uses clamped probabilities; the gradient is that of the
/// unclamped loss, `p - y` at the output pre-activation, so saturated wrong
/// predictions still receive a learning signal.
pub fn loss_and_grad(
    model: &DnnModel,
    batch: ArrayView2<'_, f64>,
    labels: &[f64],
    sample_weights: Option<&[f64]>,
) -> Result<(f64, Gradients)> {
    model.check_input(batch.ncols())?;
    check_labels(labels, batch.nrows())?;
    if let Some(w) = sample_weights {
        if w.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: labels.len(),
                got: w.len(),
            });
        }
    }
    let n = batch.nrows() as f64;
    let weight = |i: usize| sample_weights.map_or(1.0, |w| w[i]);
    let acts = model.activations(batch);
    let probs = acts.last().expect("output layer").column(0);
    let loss = probs
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (&p, &y))| weight(i) * bce(p, y))
        .sum::<f64>()
        / n;

    let mut delta = Array2::from_shape_fn((batch.nrows(), 1), |(i, _)| weight(i) * (probs[i] - labels[i]) / n);
    let mut grads: Vec<Layer> = Vec::with_capacity(model.layers.len());
    for l in (0..model.layers.len()).rev() {
        let input = if l == 0 { batch } else { acts[l - 1].view() };
        grads.push(Layer {
            weights: input.t().dot(&delta),
            bias: delta.sum_axis(Axis(0)),
        });
        if l > 0 {
            let mut back = delta.dot(&model.layers[l].weights.t());
            back.zip_mut_with(&acts[l - 1], |d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
            delta = back;
        }
    }
    grads.reverse();
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Weight samples inversely to their class frequency.
    pub balance_classes: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.003,
            batch_size: 32,
            max_epochs: 200,
            patience: 20,
            seed: 0,
            balance_classes: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidInput(
                "learning rate must be finite and non-negative".into(),
            ));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidInput(
                "batch size and epoch budget must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Frames with per-frame 0/1 targets (ON = 1).
#[derive(Debug, Clone)]
pub struct FrameDataset {
    pub frames: Array2<f64>,
    pub labels: Vec<f64>,
}

/// A whole recording with its utterance-level target.
#[derive(Debug, Clone)]
pub struct LabelledUtterance {
    pub frames: Array2<f64>,
    pub state: MedState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Zero when the initial parameters were never beaten.
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
}

pub fn dev_accuracy(model: &DnnModel, dev: &[LabelledUtterance]) -> Result<f64> {
    let mut correct = 0usize;
    for utt in dev {
        let probs = forward(model, utt.frames.view())?;
        if utterance_decision(probs.as_slice().expect("contiguous"))?.label == utt.state {
            correct += 1;
        }
    }
    Ok(correct as f64 / dev.len() as f64)
}

/// Mini-batch SGD with a per-epoch seeded shuffle. Keeps the parameters with
/// the best dev utterance accuracy (earliest epoch on ties, the untrained
/// network counting as epoch 0) and stops after `patience` epochs without
/// improvement.
pub fn train(
    model: DnnModel,
    data: &FrameDataset,
    dev: &[LabelledUtterance],
    cfg: &TrainConfig,
) -> Result<(DnnModel, TrainHistory)> {
    cfg.validate()?;
    model.check_input(data.frames.ncols())?;
    check_labels(&data.labels, data.frames.nrows())?;
    let positives = data.labels.iter().filter(|&&y| y == 1.0).count();
    let n = data.labels.len();
    if positives == 0 || positives == n {
        return Err(Error::InvalidInput("training data must contain both classes".into()));
    }
    if dev.is_empty() {
        return Err(Error::InvalidInput("empty development set".into()));
    }
    if dev.iter().any(|u| u.state == MedState::Unknown) {
        return Err(Error::InvalidInput("development utterances need a known state".into()));
    }
    let weights: Option<Vec<f64>> = cfg.balance_classes.then(|| {
        let w_pos = n as f64 / (2.0 * positives as f64);
        let w_neg = n as f64 / (2.0 * (n - positives) as f64);
        data.labels
            .iter()
            .map(|&y| if y == 1.0 { w_pos } else { w_neg })
            .collect()
    });

    let mut rng = crate::seed::rng_from(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut current = model;
    let mut best = current.clone();
    let mut best_acc = dev_accuracy(&current, dev)?;
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    let mut batch_labels = Vec::with_capacity(cfg.batch_size);
    let mut batch_weights = Vec::with_capacity(cfg.batch_size);

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.frames.select(Axis(0), chunk);
            batch_labels.clear();
            batch_labels.extend(chunk.iter().map(|&i| data.labels[i]));
            let w = weights.as_ref().map(|w| {
                batch_weights.clear();
                batch_weights.extend(chunk.iter().map(|&i| w[i]));
                batch_weights.as_slice()
            });
            let (loss, grads) = loss_and_grad(&current, batch.view(), &batch_labels, w)?;
            if cfg.learning_rate > 0.0 {
                current.apply_step(&grads, cfg.learning_rate);
            }
            loss_sum += loss;
            batches += 1;
        }
        if !current.all_finite() {
            return Err(Error::Degenerate(format!("parameters diverged at epoch {epoch}")));
        }
        let acc = dev_accuracy(&current, dev)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            dev_accuracy: acc,
        });
        if acc > best_acc {
            best_acc = acc;
            best_epoch = epoch;
            best = current.clone();
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    Ok((
        best,
        TrainHistory {
            epochs,
            best_epoch,
            best_dev_accuracy: best_acc,
        },
    ))
}

pub fn predict_frames(model: &DnnModel, feat: &FeatureMatrix) -> Result<Vec<f64>> {
    Ok(forward(model, feat.values.view())?.to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtteranceDecision {
    pub mean_prob: f64,
    pub label: MedState,
    pub frame_count: usize,
}

/// Mean frame probability; ON iff strictly above 0.5.
pub fn utterance_decision(probs: &[f64]) -> Result<UtteranceDecision> {
    if probs.is_empty() {
        return Err(Error::InvalidInput("no frame probabilities".into()));
    }
    let mean_prob = probs.iter().sum::<f64>() / probs.len() as f64;
    Ok(UtteranceDecision {
        mean_prob,
        label: if mean_prob > 0.5 { MedState::On } else { MedState::Off },
        frame_count: probs.len(),
    })
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelRecord {
    version: u32,
    architecture: DnnArchitecture,
    layers: Vec<LayerRecord>,
    train_config: Option<TrainConfig>,
    dev_accuracy: Option<f64>,
}

/// A model with the training settings that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub model: DnnModel,
    pub train_config: Option<TrainConfig>,
    pub dev_accuracy: Option<f64>,
}

impl SavedModel {
    pub fn to_json(&self) -> Result<String> {
        let record = ModelRecord {
            version: MODEL_FORMAT_VERSION,
            architecture: self.model.architecture.clone(),
            layers: self
                .model
                .layers
                .iter()
                .map(|l| LayerRecord {
                    rows: l.weights.nrows(),
                    cols: l.weights.ncols(),
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
            train_config: self.train_config.clone(),
            dev_accuracy: self.dev_accuracy,
        };
        serde_json::to_string(&record).map_err(|e| Error::parse("dnn model", e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let bad = |m: String| Error::parse("dnn model", m);
        let record: ModelRecord = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if record.version != MODEL_FORMAT_VERSION {
            return Err(bad(format!("unsupported version {}", record.version)));
        }
        record.architecture.validate()?;
        let sizes = record.architecture.sizes();
        if record.layers.len() != sizes.len() - 1 {
            return Err(bad("layer count does not match architecture".into()));
        }
        let mut layers = Vec::with_capacity(record.layers.len());
        for (l, w) in record.layers.into_iter().zip(sizes.windows(2)) {
            if l.rows != w[0] || l.cols != w[1] || l.bias.len() != w[1] {
                return Err(bad("layer shape does not match architecture".into()));
            }
            let weights = Array2::from_shape_vec((l.rows, l.cols), l.weights).map_err(|e| bad(e.to_string()))?;
            layers.push(Layer {
                weights,
                bias: Array1::from(l.bias),
            });
        }
        Ok(Self {
            model: DnnModel {
                architecture: record.architecture,
                layers,
            },
            train_config: record.train_config,
            dev_accuracy: record.dev_accuracy,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureKind;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn zero_model(arch: &DnnArchitecture) -> DnnModel {
        let mut m = init_network(arch, 0).unwrap();
        for l in &mut m.layers {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        m
    }

    #[test]
    fn init_is_seeded_he() {
        let arch = DnnArchitecture::new(512, vec![512]).unwrap();
        let a = init_network(&arch, 3).unwrap();
        assert_eq!(a, init_network(&arch, 3).unwrap());
        assert_ne!(a, init_network(&arch, 4).unwrap());
        let w = &a.layers[0].weights;
        let mean = w.mean().unwrap();
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let expected = 2.0 / 512.0;
        assert!((var - expected).abs() < 0.2 * expected, "{var}");
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        assert!(DnnArchitecture::new(4, vec![]).is_err());
        assert!(DnnArchitecture::new(4, vec![8, 8, 8, 8]).is_err());
    }

    #[test]
    fn zero_network_outputs_half() {
        let m = zero_model(&DnnArchitecture::new(3, vec![4, 2]).unwrap());
        let out = forward(&m, array![[1.0, -2.0, 3.0], [0.0, 0.0, 0.0]].view()).unwrap();
        assert_eq!(out.to_vec(), vec![0.5, 0.5]);
        assert!(forward(&m, array![[1.0, 2.0]].view()).is_err());
    }

    #[test]
    fn relu_blocks_negative_input() {
        let mut m = zero_model(&DnnArchitecture::new(1, vec![1]).unwrap());
        m.layers[0].weights[[0, 0]] = -1.0;
        m.layers[1].weights[[0, 0]] = 5.0;
        let out = forward(&m, array![[1.0]].view()).unwrap();
        assert_eq!(out[0], 0.5);
    }

    #[test]
    fn hand_computed_two_two_one() {
        let m = DnnModel {
            architecture: DnnArchitecture::new(2, vec![2]).unwrap(),
            layers: vec![
                Layer {
                    weights: array![[0.5, -1.0], [0.25, 0.75]],
                    bias: array![0.1, -0.2],
                },
                Layer {
                    weights: array![[1.5], [-0.5]],
                    bias: array![0.05],
                },
            ],
        };
        let (x0, x1) = (0.8, -0.4);
        let h0 = (0.5 * x0 + 0.25 * x1 + 0.1_f64).max(0.0);
        let h1 = (-1.0 * x0 + 0.75 * x1 - 0.2_f64).max(0.0);
        let z = 1.5 * h0 - 0.5 * h1 + 0.05;
        let expected = 1.0 / (1.0 + (-z).exp());
        let out = forward(&m, array![[x0, x1]].view()).unwrap();
        assert!((out[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_at_half_is_ln2() {
        let m = zero_model(&DnnArchitecture::new(2, vec![3]).unwrap());
        let (loss, _) = loss_and_grad(&m, array![[1.0, 1.0]].view(), &[1.0], None).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(loss_and_grad(&m, array![[1.0, 1.0]].view(), &[0.5], None).is_err());
    }

    fn finite_difference_check(arch: &DnnArchitecture, seed: u64, samples: usize) -> f64 {
        let mut rng = crate::seed::rng_from(seed);
        let model = init_network(arch, seed).unwrap();
        let batch = Array2::from_shape_simple_fn((5, arch.input_dim), || StandardNormal.sample(&mut rng));
        let labels: Vec<f64> = (0..5).map(|i| (i % 2) as f64).collect();
        let (_, grads) = loss_and_grad(&model, batch.view(), &labels, None).unwrap();
        let analytic: Vec<f64> = grads
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect();
        let params = model.parameters();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let picks: Vec<usize> = if samples >= params.len() {
            (0..params.len()).collect()
        } else {
            (0..samples).map(|_| rng.random_range(0..params.len())).collect()
        };
        for i in picks {
            let mut plus = model.clone();
            plus.set_parameter(i, params[i] + h);
            let mut minus = model.clone();
            minus.set_parameter(i, params[i] - h);
            let lp = loss_and_grad(&plus, batch.view(), &labels, None).unwrap().0;
            let lm = loss_and_grad(&minus, batch.view(), &labels, None).unwrap().0;
            let numeric = (lp - lm) / (2.0 * h);
            let scale = analytic[i].abs().max(numeric.abs());
            if scale > 1e-7 {
                worst = worst.max((analytic[i] - numeric).abs() / scale);
            }
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let arch = DnnArchitecture::new(6, vec![8, 4]).unwrap();
        let worst = finite_difference_check(&arch, 21, usize::MAX);
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn fitted_sample_has_small_gradient() {
        let mut m = zero_model(&DnnArchitecture::new(2, vec![2]).unwrap());
        m.layers[1].bias[0] = 30.0;
        let (_, grads) = loss_and_grad(&m, array![[0.3, 0.1]].view(), &[1.0], None).unwrap();
        let norm: f64 = grads
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        assert!(norm < 1e-6);
    }

    fn blobs(seed: u64, per_class: usize) -> FrameDataset {
        let mut rng = crate::seed::rng_from(seed);
        let n = 2 * per_class;
        let labels: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let frames = Array2::from_shape_fn((n, 2), |(i, d)| {
            let c = if labels[i] == 1.0 { 2.0 } else { -2.0 };
            let z: f64 = StandardNormal.sample(&mut rng);
            if d == 0 {
                c + 0.5 * z
            } else {
                z
            }
        });
        FrameDataset { frames, labels }
    }

    fn dev_from(data: &FrameDataset) -> Vec<LabelledUtterance> {
        let pick = |y: f64| {
            let idx: Vec<usize> = (0..data.labels.len())
                .filter(|&i| data.labels[i] == y)
                .take(20)
                .collect();
            data.frames.select(Axis(0), &idx)
        };
        vec![
            LabelledUtterance {
                frames: pick(1.0),
                state: MedState::On,
            },
            LabelledUtterance {
                frames: pick(0.0),
                state: MedState::Off,
            },
        ]
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = blobs(1, 500);
        let held_out = blobs(2, 100);
        let dev: Vec<LabelledUtterance> = (0..200)
            .map(|i| LabelledUtterance {
                frames: held_out.frames.select(Axis(0), &[i]),
                state: if held_out.labels[i] == 1.0 {
                    MedState::On
                } else {
                    MedState::Off
                },
            })
            .collect();
        let arch = DnnArchitecture::new(2, vec![8]).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            max_epochs: 50,
            patience: 50,
            seed: 5,
            ..Default::default()
        };
        let (trained, history) = train(init_network(&arch, 1).unwrap(), &data, &dev, &cfg).unwrap();
        let probs = forward(&trained, data.frames.view()).unwrap();
        let correct = probs
            .iter()
            .zip(&data.labels)
            .filter(|(p, y)| (**p > 0.5) == (**y == 1.0))
            .count();
        assert!(correct as f64 / 1000.0 >= 0.99, "{correct}");
        assert!(history.best_dev_accuracy >= 0.98);

        let (again, history2) = train(init_network(&arch, 1).unwrap(), &data, &dev, &cfg).unwrap();
        assert_eq!(again, trained);
        assert_eq!(history2, history);
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        let data = blobs(3, 40);
        let dev = dev_from(&data);
        let arch = DnnArchitecture::new(2, vec![4]).unwrap();
        let init = init_network(&arch, 2).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 3,
            ..Default::default()
        };
        let (out, _) = train(init.clone(), &data, &dev, &cfg).unwrap();
        assert_eq!(out, init);

        let one_class = FrameDataset {
            frames: data.frames.clone(),
            labels: vec![1.0; data.labels.len()],
        };
        assert!(train(init, &one_class, &dev, &cfg).is_err());
    }

    #[test]
    fn small_steps_reduce_loss() {
        let data = blobs(4, 16);
        let arch = DnnArchitecture::new(2, vec![16, 8]).unwrap();
        let mut m = init_network(&arch, 9).unwrap();
        let initial = loss_and_grad(&m, data.frames.view(), &data.labels, None).unwrap().0;
        for _ in 0..100 {
            let (_, g) = loss_and_grad(&m, data.frames.view(), &data.labels, None).unwrap();
            m.apply_step(&g, 1e-4);
        }
        let last = loss_and_grad(&m, data.frames.view(), &data.labels, None).unwrap().0;
        assert!(last <= initial);
    }

    #[test]
    fn predict_matches_row_wise_forward() {
        let arch = DnnArchitecture::new(5, vec![64, 32]).unwrap();
        let m = init_network(&arch, 7).unwrap();
        let mut rng = crate::seed::rng_from(1);
        let values = Array2::from_shape_simple_fn((37, 5), || StandardNormal.sample(&mut rng));
        let probs = predict_frames(&m, &FeatureMatrix::new(values.clone(), FeatureKind::Stacked, 10.0)).unwrap();
        assert_eq!(probs.len(), 37);
        for (i, row) in values.rows().into_iter().enumerate() {
            let single = forward(&m, row.insert_axis(Axis(0))).unwrap();
            assert_eq!(single[0].to_bits(), probs[i].to_bits());
        }
        let zero = zero_model(&arch);
        let half = predict_frames(&zero, &FeatureMatrix::new(values, FeatureKind::Stacked, 10.0)).unwrap();
        assert!(half.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn utterance_decisions() {
        let d = utterance_decision(&[0.9, 0.8, 0.7]).unwrap();
        assert!((d.mean_prob - 0.8).abs() < 1e-15);
        assert_eq!(d.label, MedState::On);
        assert_eq!(d.frame_count, 3);
        assert_eq!(utterance_decision(&[0.5, 0.5]).unwrap().label, MedState::Off);
        assert!(utterance_decision(&[]).is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let arch = DnnArchitecture::new(3, vec![5, 4]).unwrap();
        let saved = SavedModel {
            model: init_network(&arch, 2).unwrap(),
            train_config: Some(TrainConfig::default()),
            dev_accuracy: Some(0.75),
        };
        assert_eq!(SavedModel::from_json(&saved.to_json().unwrap()).unwrap(), saved);
        assert!(SavedModel::from_json("{\"version\":2}").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn outputs_are_probabilities(seed in any::<u64>(), scale in 0.1f64..50.0) {
            let arch = DnnArchitecture::new(4, vec![16, 8]).unwrap();
            let m = init_network(&arch, seed).unwrap();
            let mut rng = crate::seed::rng_from(seed ^ 1);
            let x = Array2::from_shape_simple_fn((10, 4), || scale * rng.random_range(-1.0..1.0));
            let p = forward(&m, x.view()).unwrap();
            prop_assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
            let labels: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
            prop_assert!(loss_and_grad(&m, x.view(), &labels, None).unwrap().0.is_finite());
        }

        #[test]
        fn decision_ignores_order(mut probs in proptest::collection::vec(0.0f64..1.0, 1..30)) {
            let a = utterance_decision(&probs).unwrap();
            probs.reverse();
            let b = utterance_decision(&probs).unwrap();
            prop_assert_eq!(a.label, b.label);
            prop_assert!((a.mean_prob - b.mean_prob).abs() < 1e-12);
        }
    }
}
