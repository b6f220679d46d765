use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, TrainingMetadata};
use super::network::{sigmoid, softmax, Network, ReluBackward};
use super::tensor::Tensor3;
use crate::error::{Error, Result};
use crate::evalkit;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    BceWithLogits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Draw samples with probability inversely proportional to their class
    /// frequency.
    pub balanced_sampling: bool,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            balanced_sampling: true,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Training targets, one entry per training input.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    MultiLabel(Vec<Vec<f64>>),
}

impl Targets {
    fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::MultiLabel(v) => v.len(),
        }
    }

    fn kind(&self) -> LossKind {
        match self {
            Targets::Classes(_) => LossKind::CrossEntropy,
            Targets::MultiLabel(_) => LossKind::BceWithLogits,
        }
    }

    /// Loss of one sample and its gradient with respect to the logits.
    fn loss_and_grad(&self, i: usize, logits: &[f64]) -> (f64, Vec<f64>) {
        match self {
            Targets::Classes(y) => {
                let mut p = softmax(logits);
                let loss = -p[y[i]].max(f64::MIN_POSITIVE).ln();
                p[y[i]] -= 1.0;
                (loss, p)
            }
            Targets::MultiLabel(t) => {
                let k = logits.len() as f64;
                let mut loss = 0.0;
                let grad = logits
                    .iter()
                    .zip(&t[i])
                    .map(|(&z, &y)| {
                        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
                        (sigmoid(z) - y) / k
                    })
                    .collect();
                (loss / k, grad)
            }
        }
    }
}

/// Mean loss of `net` over `inputs`.
pub(crate) fn mean_loss(net: &Network, inputs: &[Tensor3], targets: &Targets) -> Result<f64> {
    let mut total = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let logits = net.logits(x)?;
        total += targets.loss_and_grad(i, &logits).0;
    }
    Ok(total / inputs.len().max(1) as f64)
}

/// Inverse-class-frequency sampler with replacement.
#[derive(Debug, Clone)]
pub struct WeightedSampler {
    index: WeightedIndex<f64>,
}

impl WeightedSampler {
    pub fn new(labels: &[usize], n_classes: usize) -> Result<Self> {
        let mut counts = vec![0usize; n_classes];
        for &l in labels {
            if l >= n_classes {
                return Err(Error::Config(format!("label {l} outside {n_classes} classes")));
            }
            counts[l] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Config(format!(
                "class {empty} has no samples; weighted sampling needs every class"
            )));
        }
        let weights: Vec<f64> = labels.iter().map(|&l| 1.0 / counts[l] as f64).collect();
        let index = WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self { index })
    }

    pub fn draw(&self, rng: &mut rng::Rng) -> usize {
        self.index.sample(rng)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, config: &TrainConfig) -> Self {
        Self {
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best selection score.
    pub network: Network,
    pub metadata: TrainingMetadata,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_network(&self.network, self.metadata.clone())
    }
}

pub type Augmenter<'a> = &'a dyn Fn(&Tensor3, u64) -> Tensor3;

/// Mini-batch Adam training with per-epoch model selection.
///
/// `strata` labels every input for the weighted sampler; `select` scores
/// the network after each epoch and the highest score wins (earliest epoch on
/// ties).
#[allow(clippy::too_many_arguments)]
pub fn train_network(
    mut net: Network,
    inputs: &[Tensor3],
    targets: &Targets,
    strata: &[usize],
    n_strata: usize,
    config: &TrainConfig,
    augment: Option<Augmenter<'_>>,
    select: &mut dyn FnMut(&Network) -> Result<f64>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if inputs.is_empty() || inputs.len() != targets.len() || inputs.len() != strata.len() {
        return Err(Error::Shape(format!(
            "{} inputs, {} targets, {} strata",
            inputs.len(),
            targets.len(),
            strata.len()
        )));
    }
    for x in inputs {
        net.check_input(x)?;
    }
    let sampler = if config.balanced_sampling {
        Some(WeightedSampler::new(strata, n_strata)?)
    } else {
        None
    };
    let initial_loss = mean_loss(&net, inputs, targets)?;
    let mut rng = rng::seeded(rng::derive(config.seed, "train/order"));
    let mut adam = Adam::new(net.params().len(), config);
    let mut grads = vec![0.0; net.params().len()];
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut val_curve = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Network)> = None;

    for epoch in 0..config.epochs {
        let order: Vec<usize> = match &sampler {
            Some(s) => (0..inputs.len()).map(|_| s.draw(&mut rng)).collect(),
            None => {
                let mut o: Vec<usize> = (0..inputs.len()).collect();
                o.shuffle(&mut rng);
                o
            }
        };
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            grads.fill(0.0);
            for (j, &i) in batch.iter().enumerate() {
                let trace = match augment {
                    Some(aug) if config.augment => {
                        let step = ((epoch * inputs.len()) + b * config.batch_size + j) as u64;
                        let seed = rng::derive_index(config.seed, "train/augment", step);
                        net.trace(&aug(&inputs[i], seed))?
                    }
                    _ => net.trace(&inputs[i])?,
                };
                let (loss, dlogits) = targets.loss_and_grad(i, &trace.logits);
                epoch_loss += loss;
                net.backward(&trace, &dlogits, &mut grads, ReluBackward::Exact);
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= scale);
            adam.step(net.params_mut(), &grads);
            net.quantize();
        }
        let mean = epoch_loss / order.len() as f64;
        let score = select(&net)?;
        log::info!("epoch {}: loss {mean:.4}, selection score {score:.4}", epoch + 1);
        loss_curve.push(mean);
        val_curve.push(score);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch + 1, net.clone()));
        }
    }
    let (best_score, best_epoch, network) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        network,
        metadata: TrainingMetadata {
            epochs: config.epochs,
            seed: config.seed,
            loss: targets.kind(),
            initial_loss,
            loss_curve,
            selection_curve: val_curve,
            best_epoch,
            best_score,
        },
    })
}

/// Trains a grading network with cross-entropy, keeping the epoch with the
/// best validation balanced accuracy.
#[allow(clippy::too_many_arguments)]
pub fn train_grader(
    net: Network,
    train_inputs: &[Tensor3],
    train_grades: &[usize],
    val_inputs: &[Tensor3],
    val_grades: &[usize],
    config: &TrainConfig,
    augment: Option<Augmenter<'_>>,
) -> Result<TrainOutcome> {
    let n_classes = net.spec().n_outputs;
    let targets = Targets::Classes(train_grades.to_vec());
    let mut select = |n: &Network| -> Result<f64> {
        if val_inputs.is_empty() {
            return Ok(0.0);
        }
        let mut pred = Vec::with_capacity(val_inputs.len());
        for x in val_inputs {
            pred.push(super::network::argmax(&n.logits(x)?));
        }
        let cm = evalkit::confusion(val_grades, &pred, n_classes)?;
        Ok(evalkit::balanced_accuracy(&cm))
    };
    train_network(
        net,
        train_inputs,
        &targets,
        train_grades,
        n_classes,
        config,
        augment,
        &mut select,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinynet::NetworkSpec;
    use rand::Rng;

    fn toy_spec() -> NetworkSpec {
        NetworkSpec {
            input_channels: 1,
            input_height: 8,
            input_width: 8,
            block_channels: vec![3, 4],
            n_outputs: 2,
        }
    }

    /// Class 0: bright left half. Class 1: bright right half.
    fn toy_data(n: usize, seed: u64) -> (Vec<Tensor3>, Vec<usize>) {
        let mut r = rng::seeded(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let mut t = Tensor3::zeros(1, 8, 8);
            for row in 0..8 {
                for col in 0..8 {
                    let bright = (col < 4) == (y == 0);
                    t.data[row * 8 + col] = if bright { 0.8 } else { 0.1 } + 0.05 * r.random::<f64>();
                }
            }
            xs.push(t);
            ys.push(y);
        }
        (xs, ys)
    }

    fn quick_config(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 5,
            lr: 1e-2,
            batch_size: 8,
            augment: false,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_decreases_on_separable_toy() {
        let (xs, ys) = toy_data(40, 1);
        let net = Network::init(toy_spec(), 2).unwrap();
        let out = train_grader(net, &xs, &ys, &xs, &ys, &quick_config(3), None).unwrap();
        let last = *out.metadata.loss_curve.last().unwrap();
        assert!(last < out.metadata.initial_loss, "{last} vs {}", out.metadata.initial_loss);
        assert_eq!(out.metadata.loss_curve.len(), 5);
        assert!(out.metadata.best_epoch >= 1 && out.metadata.best_epoch <= 5);
    }

    #[test]
    fn fixed_seed_gives_identical_checkpoints() {
        let (xs, ys) = toy_data(24, 4);
        let run = || {
            let net = Network::init(toy_spec(), 5).unwrap();
            train_grader(net, &xs, &ys, &xs, &ys, &quick_config(6), None)
                .unwrap()
                .checkpoint()
                .to_bytes()
                .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn weighted_sampler_balances_classes() {
        // 90 / 10 imbalance; inverse-frequency weights give each class half
        // of the total mass.
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 90)).collect();
        let sampler = WeightedSampler::new(&labels, 2).unwrap();
        let mut r = rng::seeded(11);
        let draws = 10_000;
        let minority = (0..draws).filter(|_| labels[sampler.draw(&mut r)] == 1).count();
        let frac = minority as f64 / draws as f64;
        assert!((frac - 0.5).abs() <= 0.05, "minority fraction {frac}");
    }

    #[test]
    fn sampler_rejects_empty_class() {
        assert!(matches!(WeightedSampler::new(&[0, 0, 2], 3), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let d = TrainConfig::default();
        assert_eq!((d.epochs, d.lr, d.beta1, d.beta2, d.eps), (100, 1e-3, 0.9, 0.999, 1e-8));
    }

    #[test]
    fn bce_targets_train() {
        let (xs, ys) = toy_data(32, 8);
        let t = Targets::MultiLabel(ys.iter().map(|&y| vec![y as f64, 1.0 - y as f64]).collect());
        let net = Network::init(toy_spec(), 9).unwrap();
        let mut select = |_: &Network| Ok(0.0);
        let out = train_network(net, &xs, &t, &ys, 2, &quick_config(10), None, &mut select).unwrap();
        assert_eq!(out.metadata.loss, LossKind::BceWithLogits);
        assert!(*out.metadata.loss_curve.last().unwrap() < out.metadata.initial_loss);
    }
}
