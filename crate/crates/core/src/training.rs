//! Cross-entropy loss, Adam, and the epoch loop.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchId, Dropout, Network};
use crate::autograd::{mean_nll, GradientSet};
use crate::class::NUM_CLASSES;
use crate::data::{batch_iter, mix, AugmentConfig, SampleSource};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// Class indices for one batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelBatch(Vec<usize>);

impl LabelBatch {
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(Error::usage(format!("label {bad} out of range")));
        }
        Ok(Self(labels))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn one_hot<T: Scalar>(&self) -> Tensor4<T> {
        Tensor4::from_fn([self.0.len(), 1, 1, NUM_CLASSES], |n, _, _, c| {
            if self.0[n] == c {
                T::one()
            } else {
                T::zero()
            }
        })
    }
}

/// Mean categorical cross-entropy of probability rows, `p_true` clamped at 1e-7.
pub fn cross_entropy<T: Scalar>(probs: &Tensor4<T>, labels: &LabelBatch) -> Result<T> {
    let [n, h, w, c] = probs.dims();
    if h != 1 || w != 1 || n != labels.len() || n == 0 {
        return Err(Error::shape(format!(
            "probabilities {:?} do not match {} labels",
            probs.dims(),
            labels.len()
        )));
    }
    if labels.as_slice().iter().any(|&l| l >= c) {
        return Err(Error::usage("label out of range"));
    }
    Ok(mean_nll(probs, labels.as_slice()))
}

#[derive(Clone, Debug)]
struct Moments<T> {
    name: String,
    m: Vec<T>,
    v: Vec<T>,
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct AdamState<T = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: Vec<Moments<T>>,
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new(1e-4, 0.9, 0.999, 1e-7)
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Second-moment estimates, for inspection.
    pub fn second_moments(&self) -> impl Iterator<Item = &[T]> {
        self.moments.iter().map(|m| m.v.as_slice())
    }

    /// One update over named parameter slices and their gradients, which
    /// must keep the same names and lengths on every call.
    pub fn step_slices(&mut self, params: &mut [(String, &mut [T])], grads: &[&[T]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::usage(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(Error::usage(format!("gradient for {name} has the wrong length")));
            }
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|(name, p)| Moments {
                    name: name.clone(),
                    m: vec![T::zero(); p.len()],
                    v: vec![T::zero(); p.len()],
                })
                .collect();
        } else if self.moments.len() != params.len()
            || self
                .moments
                .iter()
                .zip(params.iter())
                .any(|(m, (name, p))| m.name != *name || m.m.len() != p.len())
        {
            return Err(Error::usage("parameters do not match the optimizer state"));
        }

        self.t += 1;
        let t = self.t as i32;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let one_minus_b1 = T::of(1.0 - self.beta1);
        let one_minus_b2 = T::of(1.0 - self.beta2);
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);
        for (((_, p), g), mo) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            for i in 0..p.len() {
                let gi = g[i];
                mo.m[i] = b1 * mo.m[i] + one_minus_b1 * gi;
                mo.v[i] = b2 * mo.v[i] + one_minus_b2 * gi * gi;
                let m_hat = mo.m[i] / c1;
                let v_hat = mo.v[i] / c2;
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn step(&mut self, network: &mut Network<T>, grads: &GradientSet<T>) -> Result<()> {
        let mut params = network.tensors_mut();
        let mut gs = Vec::with_capacity(params.len());
        for (name, _) in &params {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::usage(format!("no gradient for {name}")))?;
            gs.push(g.data());
        }
        if grads.len() != params.len() {
            return Err(Error::usage("gradient set has extra entries"));
        }
        self.step_slices(&mut params, &gs)
    }
}

/// Training hyperparameters. Every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: ArchId,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Dropout rate before conv10; `None` disables it.
    pub dropout: Option<f64>,
    /// Validate after every epoch instead of only after the last.
    pub validate_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: ArchId::Variant1,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            augment: true,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            dropout: None,
            validate_each_epoch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::usage("epochs must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::usage("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::usage("learning_rate must be positive"));
        }
        if let Some(r) = self.dropout {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::usage("dropout must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn optimizer<T: Scalar>(&self) -> AdamState<T> {
        AdamState::new(self.learning_rate, self.beta1, self.beta2, self.epsilon)
    }
}

/// One line of the epoch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    /// Measured wall time; the only field that differs between identical runs.
    pub wall_ms: u64,
}

fn argmax_row<T: Scalar>(row: &[T]) -> usize {
    // ties go to the lowest index
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// One Adam step per batch. `epoch` is zero-based and seeds dropout masks.
pub fn train_epoch<I>(
    network: &mut Network<f32>,
    batches: I,
    state: &mut AdamState<f32>,
    config: &TrainConfig,
    epoch: usize,
) -> Result<EpochLog>
where
    I: IntoIterator<Item = Result<(Tensor4<f32>, LabelBatch)>>,
{
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[config.seed, epoch as u64, 0xD80]));
    let mut loss_sum = 0.0f64;
    let mut batches_seen = 0usize;
    let mut correct = 0usize;
    let mut seen = 0usize;
    for item in batches {
        let (images, labels) = item?;
        let dropout = config.dropout.map(|rate| Dropout { rate, rng: &mut rng });
        let out = network.loss_and_grads(&images, labels.as_slice(), dropout)?;
        state.step(network, &out.grads)?;
        loss_sum += out.loss as f64;
        batches_seen += 1;
        for (row, &l) in out.probs.data().chunks(NUM_CLASSES).zip(labels.as_slice()) {
            correct += usize::from(argmax_row(row) == l);
        }
        seen += labels.len();
    }
    if batches_seen == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(EpochLog {
        epoch: epoch + 1,
        mean_loss: loss_sum / batches_seen as f64,
        train_acc: correct as f64 / seen as f64,
        val_acc: None,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

/// Evaluation output for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub truth: usize,
    pub predicted: usize,
    /// Probability of the positive (parasitized) class.
    pub score: f64,
}

pub fn evaluate<I>(network: &Network<f32>, batches: I) -> Result<Vec<Prediction>>
where
    I: IntoIterator<Item = Result<(Tensor4<f32>, LabelBatch)>>,
{
    let mut out = Vec::new();
    for item in batches {
        let (images, labels) = item?;
        let probs = network.predict(&images)?;
        for (row, &truth) in probs.data().chunks(NUM_CLASSES).zip(labels.as_slice()) {
            out.push(Prediction {
                truth,
                predicted: argmax_row(row),
                score: row[crate::class::Class::Parasitized.index()] as f64,
            });
        }
    }
    Ok(out)
}

/// Evaluates a whole source in its natural order.
pub fn evaluate_source<S: SampleSource + ?Sized>(
    network: &Network<f32>,
    source: &S,
    batch_size: usize,
) -> Result<Vec<Prediction>> {
    if source.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut out = Vec::with_capacity(source.len());
    let indices: Vec<usize> = (0..source.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let images = chunk.iter().map(|&i| source.pixels(i)).collect::<Result<Vec<_>>>()?;
        let labels = LabelBatch::new(chunk.iter().map(|&i| source.label(i).index()).collect())?;
        out.extend(evaluate(network, [Ok((Tensor4::stack(&images)?, labels))])?);
    }
    Ok(out)
}

pub fn prediction_accuracy(preds: &[Prediction]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().filter(|p| p.truth == p.predicted).count() as f64 / preds.len() as f64
}

/// Result of [`fit`].
pub struct FitOutcome {
    pub logs: Vec<EpochLog>,
    /// Final validation predictions, when a validation source was given.
    pub validation: Option<Vec<Prediction>>,
}

/// Full training run: `config.epochs` epochs over `train`, validating on
/// `validation` after each epoch or only after the last. `on_epoch` sees
/// each log line as it is produced.
pub fn fit<S, V>(
    network: &mut Network<f32>,
    train: &S,
    validation: Option<&V>,
    config: &TrainConfig,
    augment: &AugmentConfig,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<FitOutcome>
where
    S: SampleSource + ?Sized,
    V: SampleSource + ?Sized,
{
    config.validate()?;
    let mut state = config.optimizer();
    let mut logs = Vec::with_capacity(config.epochs);
    let mut last_val = None;
    for epoch in 0..config.epochs {
        let aug = config.augment.then_some(augment);
        let batches = batch_iter(train, config.batch_size, config.seed, epoch as u64, aug)?;
        let mut log = train_epoch(network, batches, &mut state, config, epoch)?;
        let is_last = epoch + 1 == config.epochs;
        if let Some(v) = validation.filter(|v| !v.is_empty()) {
            if config.validate_each_epoch || is_last {
                let preds = evaluate_source(network, v, config.batch_size)?;
                log.val_acc = Some(prediction_accuracy(&preds));
                last_val = Some(preds);
            }
        }
        on_epoch(&log)?;
        logs.push(log);
    }
    Ok(FitOutcome {
        logs,
        validation: last_val,
    })
}
