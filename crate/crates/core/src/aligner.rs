//! Feed-forward state classifier used as a transcription-free alignment.
//!
//! ReLU hidden layers, softmax output, trained with mini-batch SGD and
//! momentum on frame-level cross-entropy against Viterbi state labels.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::{FeatureKind, FeatureSequence};
use crate::hmm::{AlignmentMatrix, AlignmentSource, HmmError};
use crate::NUM_STATES;

#[derive(Debug, Error, PartialEq)]
pub enum MlpError {
    #[error("class {0} has no training examples")]
    MissingClass(usize),
    #[error("loss became non-finite in epoch {epoch}; the last stable model is attached")]
    NonFiniteLoss { epoch: usize, checkpoint: Box<MlpModel> },
    #[error("expected spliced filterbank input, got {0:?}")]
    WrongKind(FeatureKind),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    BadConfig(&'static str),
    #[error(transparent)]
    Alignment(#[from] HmmError),
}

/// One affine layer, `y = W x + b` with `W` of shape out x in.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<Layer>,
    /// Per-input mean and inverse standard deviation applied before layer 0.
    pub input_mean: Array1<f64>,
    pub input_scale: Array1<f64>,
    /// Log relative frequency of each output class in the training labels.
    pub log_priors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpTrainConfig {
    pub hidden: Vec<usize>,
    pub num_outputs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate multiplier applied after every epoch.
    pub lr_decay: f64,
    pub momentum: f64,
    pub held_out: f64,
    pub seed: u64,
}

impl Default for MlpTrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![512; 4],
            num_outputs: NUM_STATES,
            epochs: 10,
            batch_size: 256,
            learning_rate: 0.05,
            lr_decay: 0.7,
            momentum: 0.9,
            held_out: 0.1,
            seed: 0,
        }
    }
}

/// Per-epoch losses of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub held_out_loss: Vec<f64>,
    /// `-log` of the most frequent class prior on the held-out split.
    pub prior_baseline: f64,
}

impl MlpModel {
    /// Uniform initialization with bound `sqrt(6 / fan_in)`, zero biases.
    pub fn init(input: usize, hidden: &[usize], outputs: usize, rng: &mut impl Rng) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(outputs);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                Layer { weights: Array2::from_shape_fn((w[1], w[0]), |_| rng.gen_range(-bound..bound)), bias: Array1::zeros(w[1]) }
            })
            .collect();
        Self {
            layers,
            input_mean: Array1::zeros(input),
            input_scale: Array1::ones(input),
            log_priors: vec![-(outputs as f64).ln(); outputs],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").weights.nrows()
    }

    fn normalize(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.input_mean) * &self.input_scale
    }

    /// Pre-activations and activations of every layer for normalized input.
    fn forward(&self, x: Array2<f64>) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let mut acts = vec![x];
        let mut pre = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let z = acts[l].dot(&layer.weights.t()) + &layer.bias;
            let a = if l == last { softmax_rows(&z) } else { z.mapv(|v| v.max(0.0)) };
            pre.push(z);
            acts.push(a);
        }
        (pre, acts)
    }

    /// Softmax outputs for raw (unnormalized) input rows.
    pub fn predict(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let (_, mut acts) = self.forward(self.normalize(x));
        acts.pop().expect("output layer")
    }
}

fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Gradients with the same layout as [`MlpModel::layers`].
pub type Gradients = Vec<Layer>;

/// Mean cross-entropy of `labels` given raw inputs `x`, and its gradient
/// with respect to every weight and bias.
pub fn loss_and_gradients(model: &MlpModel, x: ArrayView2<f64>, labels: &[usize]) -> (f64, Gradients) {
    let b = x.nrows();
    let (pre, acts) = model.forward(model.normalize(x));
    let probs = acts.last().expect("output layer");
    let mut loss = 0.0;
    let mut delta = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        loss -= probs[[i, y]].max(f64::MIN_POSITIVE).ln();
        delta[[i, y]] -= 1.0;
    }
    delta /= b as f64;
    let mut grads: Vec<Layer> = Vec::with_capacity(model.layers.len());
    for l in (0..model.layers.len()).rev() {
        let gw = delta.t().dot(&acts[l]);
        let gb = delta.sum_axis(Axis(0));
        grads.push(Layer { weights: gw, bias: gb });
        if l > 0 {
            let mut back = delta.dot(&model.layers[l].weights);
            back.zip_mut_with(&pre[l - 1], |d, &z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
            delta = back;
        }
    }
    grads.reverse();
    (loss / b as f64, grads)
}

fn mean_loss(model: &MlpModel, x: &Array2<f64>, labels: &[usize], idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return f64::NAN;
    }
    let mut total = 0.0;
    for chunk in idx.chunks(1024) {
        let batch = x.select(Axis(0), chunk);
        let probs = model.predict(batch.view());
        for (i, &k) in chunk.iter().enumerate() {
            total -= probs[[i, labels[k]]].max(f64::MIN_POSITIVE).ln();
        }
    }
    total / idx.len() as f64
}

/// Trains on rows of `x` with integer class labels.
pub fn train_mlp(x: &Array2<f64>, labels: &[usize], cfg: &MlpTrainConfig) -> Result<(MlpModel, TrainReport), MlpError> {
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.num_outputs < 2 {
        return Err(MlpError::BadConfig("epochs, batch size and output count must be positive"));
    }
    if !(cfg.held_out > 0.0 && cfg.held_out < 0.5) {
        return Err(MlpError::BadConfig("held-out fraction must lie in (0, 0.5)"));
    }
    if x.nrows() != labels.len() || x.nrows() == 0 {
        return Err(MlpError::ShapeMismatch(format!("{} rows, {} labels", x.nrows(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= cfg.num_outputs) {
        return Err(MlpError::ShapeMismatch(format!("label {bad} exceeds output count {}", cfg.num_outputs)));
    }
    let mut counts = vec![0usize; cfg.num_outputs];
    for &y in labels {
        counts[y] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(MlpError::MissingClass(missing));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    order.shuffle(&mut rng);
    let n_held = ((x.nrows() as f64 * cfg.held_out).round() as usize).clamp(1, x.nrows() - 1);
    let (held, train) = order.split_at(n_held);
    let mut train = train.to_vec();

    let mut model = MlpModel::init(x.ncols(), &cfg.hidden, cfg.num_outputs, &mut rng);
    let train_rows = x.select(Axis(0), &train);
    let mean = train_rows.mean_axis(Axis(0)).expect("non-empty");
    let var = train_rows.var_axis(Axis(0), 0.0);
    model.input_mean = mean;
    model.input_scale = var.mapv(|v| if v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 });
    model.log_priors = counts.iter().map(|&c| (c as f64 / labels.len() as f64).ln()).collect();

    let mut held_counts = vec![0usize; cfg.num_outputs];
    for &k in held {
        held_counts[labels[k]] += 1;
    }
    let max_prior = *held_counts.iter().max().expect("classes") as f64 / held.len() as f64;
    let mut report = TrainReport { train_loss: Vec::new(), held_out_loss: Vec::new(), prior_baseline: -max_prior.ln() };

    let mut velocity: Vec<Layer> =
        model.layers.iter().map(|l| Layer { weights: Array2::zeros(l.weights.dim()), bias: Array1::zeros(l.bias.len()) }).collect();
    let mut lr = cfg.learning_rate;
    for epoch in 0..cfg.epochs {
        let checkpoint = model.clone();
        train.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in train.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), batch);
            let yb: Vec<usize> = batch.iter().map(|&k| labels[k]).collect();
            let (loss, grads) = loss_and_gradients(&model, xb.view(), &yb);
            if !loss.is_finite() || grads.iter().any(|g| g.weights.iter().any(|v| !v.is_finite())) {
                return Err(MlpError::NonFiniteLoss { epoch, checkpoint: Box::new(checkpoint) });
            }
            total += loss * batch.len() as f64;
            for ((layer, vel), g) in model.layers.iter_mut().zip(&mut velocity).zip(&grads) {
                vel.weights.zip_mut_with(&g.weights, |v, &gw| *v = cfg.momentum * *v - lr * gw);
                vel.bias.zip_mut_with(&g.bias, |v, &gb| *v = cfg.momentum * *v - lr * gb);
                layer.weights += &vel.weights;
                layer.bias += &vel.bias;
            }
        }
        let held_loss = mean_loss(&model, x, labels, held);
        if !held_loss.is_finite() {
            return Err(MlpError::NonFiniteLoss { epoch, checkpoint: Box::new(checkpoint) });
        }
        report.train_loss.push(total / train.len() as f64);
        report.held_out_loss.push(held_loss);
        log::info!("mlp epoch {epoch}: train {:.4} held-out {:.4} lr {lr:.4}", total / train.len() as f64, held_loss);
        lr *= cfg.lr_decay;
    }
    Ok((model, report))
}

/// Frame-level state posteriors from spliced filterbank features.
pub fn mlp_posteriors(model: &MlpModel, feats: &FeatureSequence) -> Result<AlignmentMatrix, MlpError> {
    if !matches!(feats.kind(), FeatureKind::Spliced { .. }) {
        return Err(MlpError::WrongKind(feats.kind()));
    }
    if feats.dim() != model.input_dim() || model.output_dim() != NUM_STATES {
        return Err(MlpError::ShapeMismatch(format!(
            "model maps {} -> {}, features have {} columns",
            model.input_dim(),
            model.output_dim(),
            feats.dim()
        )));
    }
    let mut probs = Array2::zeros((feats.num_frames(), NUM_STATES));
    for start in (0..feats.num_frames()).step_by(1024) {
        let end = (start + 1024).min(feats.num_frames());
        let p = model.predict(feats.frames().slice(s![start..end, ..]));
        probs.slice_mut(s![start..end, ..]).assign(&p);
    }
    Ok(AlignmentMatrix::new(probs, AlignmentSource::Dnn)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_output_layer_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = MlpModel::init(1320, &[8], NUM_STATES, &mut rng);
        let last = m.layers.last_mut().unwrap();
        last.weights.fill(0.0);
        let feats = FeatureSequence::new(Array2::from_shape_fn((4, 1320), |(i, j)| (i * j) as f64 * 1e-3), FeatureKind::Spliced { context: 5 }).unwrap();
        let a = mlp_posteriors(&m, &feats).unwrap();
        assert!(a.posteriors().iter().all(|p| (p - 1.0 / 33.0).abs() < 1e-15));
    }

    #[test]
    fn wrong_kind() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = MlpModel::init(60, &[4], NUM_STATES, &mut rng);
        let feats = FeatureSequence::new(Array2::zeros((2, 60)), FeatureKind::Mfcc60).unwrap();
        assert_eq!(mlp_posteriors(&m, &feats).unwrap_err(), MlpError::WrongKind(FeatureKind::Mfcc60));
    }

    #[test]
    fn separable_toy_problem() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((400, 3), |(i, j)| if j == 0 { if i % 2 == 0 { 1.0 } else { -1.0 } } else { 0.0 } + rng.gen_range(-0.5..0.5));
        let y: Vec<usize> = (0..400).map(|i| i % 2).collect();
        let cfg = MlpTrainConfig { hidden: vec![4], num_outputs: 2, epochs: 20, batch_size: 16, learning_rate: 0.05, seed: 2, ..Default::default() };
        let (m, report) = train_mlp(&x, &y, &cfg).unwrap();
        let p = m.predict(x.view());
        let correct = (0..400).filter(|&i| (p[[i, 1]] > p[[i, 0]]) == (y[i] == 1)).count();
        assert!(correct as f64 / 400.0 >= 0.99, "{correct}");
        assert!(report.held_out_loss.last().unwrap() < &report.prior_baseline);
    }

    #[test]
    fn missing_class() {
        let x = Array2::zeros((10, 2));
        let y: Vec<usize> = (0..10).map(|i| i % 32).collect();
        assert_eq!(train_mlp(&x, &y, &MlpTrainConfig::default()).unwrap_err(), MlpError::MissingClass(10));
    }

    #[test]
    fn deterministic_training() {
        let x = Array2::from_shape_fn((60, 2), |(i, j)| ((i * 7 + j * 3) % 11) as f64);
        let y: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let cfg = MlpTrainConfig { hidden: vec![5], num_outputs: 3, epochs: 3, batch_size: 8, seed: 9, ..Default::default() };
        assert_eq!(train_mlp(&x, &y, &cfg).unwrap(), train_mlp(&x, &y, &cfg).unwrap());
    }
}
