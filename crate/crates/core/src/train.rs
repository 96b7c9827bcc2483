//! Supervised training and evaluation loops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{optimizer_step, AutodiffError, Optimizer, Tape, Tensor};
use crate::data::Dataset;
use crate::model::{ModelError, Network, ParamKind};

/// Samples per evaluation pass; bounds memory, not results.
pub const EVAL_CHUNK: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("loss diverged at step {step}: {detail}")]
    DivergedLoss { step: usize, detail: String },
    #[error("evaluation split is empty")]
    EmptySplit,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub optimizer: Optimizer,
    /// May be fractional; see [`steps_for`].
    pub epochs: f64,
    /// Seeds the batch order.
    pub seed: u64,
    /// Training samples used to re-estimate batch-norm statistics after the
    /// last step (0 keeps the running averages).
    #[serde(default = "default_recalibration")]
    pub bn_recalibration: usize,
}

fn default_recalibration() -> usize {
    1024
}

impl TrainConfig {
    pub fn steps(&self, n_samples: usize) -> usize {
        steps_for(self.epochs, n_samples, self.batch_size)
    }
}

/// `max(1, floor(epochs · ceil(n / batch)))`.
pub fn steps_for(epochs: f64, n_samples: usize, batch: usize) -> usize {
    let per_epoch = n_samples.div_ceil(batch.max(1));
    ((epochs * per_epoch as f64).floor() as usize).max(1)
}

/// Seeded epoch-wise shuffling; the last batch of an epoch may be short.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        BatchSampler {
            order: (0..n).collect(),
            pos: n,
            batch: batch.max(1),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let start = std::mem::replace(&mut self.pos, end);
        &self.order[start..end]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Accuracy on the training batch itself.
    pub accuracy: f64,
}

fn diverged(step: usize) -> impl Fn(ModelError) -> TrainError {
    move |e| match e {
        ModelError::Autodiff(AutodiffError::NonFinite(op)) => TrainError::DivergedLoss {
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => TrainError::Model(other),
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits.data().chunks(c).map(argmax).collect()
}

/// Options for one optimisation step.
pub struct StepOptions<'a> {
    pub optimizer: &'a Optimizer,
    /// Parameters that receive gradients and updates.
    pub update: &'a dyn Fn(ParamKind) -> bool,
    /// Optional rewrite of the collected architecture-logit gradients.
    pub rewrite_logit_grads: Option<&'a mut dyn FnMut(&mut Network)>,
}

/// Forward, backward and update on one batch; running batch-norm statistics
/// are always refreshed.
pub fn train_step(
    net: &mut Network,
    x: &Tensor,
    labels: &[usize],
    step: usize,
    opts: StepOptions<'_>,
) -> Result<StepRecord, TrainError> {
    let mut tape = Tape::new();
    let fwd = net.forward(&mut tape, x, true).map_err(diverged(step))?;
    let loss = net.loss(&mut tape, &fwd, labels).map_err(diverged(step))?;
    let loss_value = tape.value(loss).item();
    let grads = tape
        .backward(loss)
        .map_err(ModelError::from)
        .map_err(diverged(step))?;
    net.load_grads(&grads, &fwd.leaves, opts.update);
    if let Some(f) = opts.rewrite_logit_grads {
        f(net);
    }
    let update = opts.update;
    optimizer_step(
        net.params_mut()
            .into_iter()
            .filter(|(k, _)| update(*k))
            .map(|(_, p)| p),
        opts.optimizer,
    );
    if net.params().iter().any(|(_, p)| !p.value.is_finite()) {
        return Err(TrainError::DivergedLoss {
            step,
            detail: "non-finite parameter after update".into(),
        });
    }
    net.update_running_stats(&fwd.stats);
    let preds = predictions(tape.value(fwd.logits));
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(StepRecord {
        step,
        loss: loss_value,
        accuracy: correct as f64 / labels.len() as f64,
    })
}

/// Trains all non-architecture parameters for `n_steps` batches drawn with
/// the order seed `cfg.seed`.
pub fn train_steps(
    net: &mut Network,
    data: &Dataset,
    cfg: &TrainConfig,
    n_steps: usize,
) -> Result<Vec<StepRecord>, TrainError> {
    let mut sampler = BatchSampler::new(data.len(), cfg.batch_size, cfg.seed);
    let update = |k: ParamKind| k != ParamKind::ArchLogit;
    let mut trace = Vec::with_capacity(n_steps);
    for step in 0..n_steps {
        let (x, y) = data.batch(sampler.next_batch());
        let opts = StepOptions {
            optimizer: &cfg.optimizer,
            update: &update,
            rewrite_logit_grads: None,
        };
        trace.push(train_step(net, &x, &y, step, opts)?);
    }
    if n_steps > 0 {
        recalibrate_bn(net, data, cfg.bn_recalibration, cfg.batch_size)?;
    }
    Ok(trace)
}

/// Sets running batch-norm statistics to the average batch statistics of
/// the first `max_samples` training samples under the current weights.
pub fn recalibrate_bn(
    net: &mut Network,
    data: &Dataset,
    max_samples: usize,
    batch: usize,
) -> Result<(), TrainError> {
    let n = max_samples.min(data.len());
    if n == 0 {
        return Ok(());
    }
    let idx: Vec<usize> = (0..n).collect();
    let mut passes = Vec::new();
    for chunk in idx.chunks(batch.max(2)) {
        if chunk.len() < 2 && !passes.is_empty() {
            continue;
        }
        let (x, _) = data.batch(chunk);
        let mut tape = Tape::new();
        passes.push(net.forward(&mut tape, &x, true).map_err(diverged(0))?.stats);
    }
    net.set_running_stats(&passes);
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub error: f64,
    pub loss: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Eval-mode accuracy, error and mean loss; never mutates `net`.
pub fn evaluate(net: &Network, split: &Dataset) -> Result<Evaluation, TrainError> {
    if split.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let n_classes = net.spec.n_classes;
    let mut confusion = vec![vec![0; n_classes]; n_classes];
    let mut loss_sum = 0.0;
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = split.batch(chunk);
        let mut tape = Tape::new();
        let fwd = net.forward(&mut tape, &x, false).map_err(diverged(0))?;
        let ce = tape
            .softmax_cross_entropy(fwd.logits, &y)
            .map_err(ModelError::from)
            .map_err(diverged(0))?;
        loss_sum += tape.value(ce).item() * chunk.len() as f64;
        for (p, &t) in predictions(tape.value(fwd.logits)).into_iter().zip(&y) {
            confusion[t][p] += 1;
        }
    }
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let accuracy = correct as f64 / split.len() as f64;
    Ok(Evaluation {
        accuracy,
        error: 1.0 - accuracy,
        loss: loss_sum / split.len() as f64,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groups::PointGroup;
    use crate::model::{build, BackboneSpec, Mode};

    fn spec() -> BackboneSpec {
        BackboneSpec {
            n_conv_layers: 2,
            base_expanded_width: 8,
            widen_after: None,
            pool_after: vec![1],
            kernel_size: 3,
            in_channels: 1,
            n_classes: 10,
            head_hidden_width: 16,
            mode: Mode::Static(vec![PointGroup::C2; 2]),
        }
    }

    fn data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = Tensor::uniform(&[n, 1, 8, 8], -1.0, 1.0, &mut rng);
        Dataset::new(images, (0..n).map(|i| i % 10).collect(), 10).unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 10,
            optimizer: Optimizer::adam(0.01),
            epochs: 1.0,
            seed: 3,
            bn_recalibration: 1024,
        }
    }

    #[test]
    fn fractional_epochs() {
        assert_eq!(steps_for(0.5, 2000, 64), 16);
        assert_eq!(steps_for(0.01, 100, 64), 1);
        assert_eq!(steps_for(5.0, 2000, 64), 160);
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(7, 3, 1);
        let mut epoch: Vec<usize> = Vec::new();
        for _ in 0..3 {
            epoch.extend_from_slice(s.next_batch());
        }
        epoch.sort();
        assert_eq!(epoch, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn zero_steps_leave_the_network_unchanged() {
        let mut net = build(&spec(), 1).unwrap();
        let before = net.clone();
        assert!(train_steps(&mut net, &data(10, 1), &cfg(), 0).unwrap().is_empty());
        assert_eq!(net, before);
    }

    #[test]
    fn memorises_ten_samples() {
        let ds = data(10, 2);
        let mut net = build(&spec(), 2).unwrap();
        let trace = train_steps(&mut net, &ds, &cfg(), 500).unwrap();
        assert!(trace.last().unwrap().loss < 0.01, "{:?}", trace.last());
        assert_eq!(evaluate(&net, &ds).unwrap().accuracy, 1.0);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = data(30, 3);
        let run = || {
            let mut net = build(&spec(), 4).unwrap();
            let t = train_steps(&mut net, &ds, &cfg(), 7).unwrap();
            (net, t)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn evaluation_is_pure_and_matches_confusion_oracle() {
        let ds = data(250, 5);
        let mut net = build(&spec(), 6).unwrap();
        train_steps(&mut net, &ds, &cfg(), 5).unwrap();
        let before = net.clone();
        let ev = evaluate(&net, &ds).unwrap();
        assert_eq!(net, before);
        // independent count from a single full-batch pass
        let preds = predictions(&net.logits(&ds.images()).unwrap());
        let correct = preds.iter().zip(&ds.labels).filter(|(p, l)| p == l).count();
        assert_eq!(ev.accuracy, correct as f64 / 250.0);
        assert_eq!(ev.error, 1.0 - ev.accuracy);
        assert!(evaluate(&net, &ds.subset(&[])).is_err());
    }

    #[test]
    fn untrained_net_is_near_chance() {
        let ds = data(500, 7);
        let net = build(&spec(), 8).unwrap();
        let acc = evaluate(&net, &ds).unwrap().accuracy;
        assert!((acc - 0.1).abs() <= 0.1, "{acc}");
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let ds = data(20, 9);
        let mut net = build(&spec(), 10).unwrap();
        let c = TrainConfig {
            optimizer: Optimizer::sgd(1e200),
            ..cfg()
        };
        let r = train_steps(&mut net, &ds, &c, 20);
        assert!(matches!(r, Err(TrainError::DivergedLoss { .. })), "{r:?}");
    }
}
