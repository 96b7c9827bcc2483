//! Differentiable search over mixed layers. Each iteration takes one Adam
//! step on the architecture logits (batch A), then one on everything else
//! (an independently drawn batch B).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Optimizer;
use crate::data::Dataset;
use crate::gconv::softmax;
use crate::groups::PointGroup;
use crate::model::{build, BackboneSpec, ConvUnit, Mode, ModelError, Network, ParamKind};
use crate::seeds::sub_seed;
use crate::train::{
    recalibrate_bn, steps_for, train_step, train_steps, BatchSampler, StepOptions, StepRecord,
    TrainConfig, TrainError,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffConfig {
    pub epochs: f64,
    pub batch_size: usize,
    pub psi_optimizer: Optimizer,
    pub z_optimizer: Optimizer,
    pub seed: u64,
    #[serde(default = "recal")]
    pub bn_recalibration: usize,
}

fn recal() -> usize {
    1024
}

impl Default for DiffConfig {
    fn default() -> Self {
        DiffConfig {
            epochs: 5.0,
            batch_size: 64,
            psi_optimizer: Optimizer::adam(0.01),
            z_optimizer: Optimizer::adam(0.01),
            seed: 0,
            bn_recalibration: recal(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub epoch: f64,
    pub layer: usize,
    pub group: PointGroup,
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchState {
    pub groups: Vec<Vec<PointGroup>>,
    pub logits: Vec<Vec<f64>>,
    pub trajectory: Vec<TrajectoryRow>,
}

impl ArchState {
    pub fn from_network(net: &Network) -> Result<Self, ModelError> {
        let mut groups = Vec::new();
        let mut logits = Vec::new();
        for u in &net.convs {
            match u {
                ConvUnit::Mixed(m) => {
                    groups.push(m.groups());
                    logits.push(m.logits.value.data().to_vec());
                }
                _ => return Err(ModelError::WrongMode("expected a mixed network".into())),
            }
        }
        Ok(ArchState {
            groups,
            logits,
            trajectory: Vec::new(),
        })
    }

    /// Mixture weights of layer `l`.
    pub fn z(&self, l: usize) -> Vec<f64> {
        softmax(&self.logits[l])
    }

    /// Summed weight of `set` in layer `l`.
    pub fn mass(&self, l: usize, set: &[PointGroup]) -> f64 {
        self.groups[l]
            .iter()
            .zip(self.z(l))
            .filter(|(g, _)| set.contains(g))
            .map(|(_, z)| z)
            .sum()
    }

    fn sync(&mut self, net: &Network) -> Result<(), ModelError> {
        let fresh = ArchState::from_network(net)?;
        self.logits = fresh.logits;
        Ok(())
    }

    fn record(&mut self, epoch: f64) {
        for l in 0..self.logits.len() {
            for (g, z) in self.groups[l].clone().into_iter().zip(self.z(l)) {
                self.trajectory.push(TrajectoryRow { epoch, layer: l, group: g, z });
            }
        }
    }
}

/// How architecture-logit gradients are used.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ZUpdate {
    Gradient,
    /// Each layer's logit gradient is permuted at random before the step.
    Shuffled { force_identity: bool },
}

pub struct DiffResult {
    pub network: Network,
    pub arch: ArchState,
    /// Weight-step records (one per iteration).
    pub trace: Vec<StepRecord>,
}

/// Mixed network for `spec`, seeded from the `init` stream.
pub fn build_mixed(spec: &BackboneSpec, seed: u64) -> Result<Network, ModelError> {
    if !matches!(spec.mode, Mode::Mixed(_)) {
        return Err(ModelError::WrongMode("search needs mode = mixed".into()));
    }
    build(spec, sub_seed(seed, "init", 0))
}

pub fn equinas_d(spec: &BackboneSpec, cfg: &DiffConfig, train: &Dataset) -> Result<DiffResult, TrainError> {
    search(build_mixed(spec, cfg.seed)?, cfg, train, ZUpdate::Gradient)
}

pub fn random_z_ablation(
    spec: &BackboneSpec,
    cfg: &DiffConfig,
    train: &Dataset,
    force_identity: bool,
) -> Result<DiffResult, TrainError> {
    search(
        build_mixed(spec, cfg.seed)?,
        cfg,
        train,
        ZUpdate::Shuffled { force_identity },
    )
}

fn shuffle_logit_grads(net: &mut Network, rng: &mut ChaCha8Rng) {
    for u in net.convs.iter_mut() {
        if let ConvUnit::Mixed(m) = u {
            m.logits.grad.data_mut().shuffle(rng);
        }
    }
}

/// The alternating loop on an already built mixed network.
pub fn search(
    mut net: Network,
    cfg: &DiffConfig,
    train: &Dataset,
    z_update: ZUpdate,
) -> Result<DiffResult, TrainError> {
    let mut arch = ArchState::from_network(&net)?;
    let per_epoch = steps_for(1.0, train.len(), cfg.batch_size);
    let iters = steps_for(cfg.epochs, train.len(), cfg.batch_size);
    let mut batch_a = BatchSampler::new(train.len(), cfg.batch_size, sub_seed(cfg.seed, "arch", 0));
    let mut batch_b = BatchSampler::new(train.len(), cfg.batch_size, sub_seed(cfg.seed, "order", 0));
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "ablation", 0));
    let only_z = |k: ParamKind| k == ParamKind::ArchLogit;
    let not_z = |k: ParamKind| k != ParamKind::ArchLogit;
    let mut trace = Vec::with_capacity(iters);
    for it in 0..iters {
        let (x, y) = train.batch(batch_a.next_batch());
        let mut rewrite = |n: &mut Network| shuffle_logit_grads(n, &mut rng);
        let rewrite_logit_grads: Option<&mut dyn FnMut(&mut Network)> = match z_update {
            ZUpdate::Shuffled { force_identity: false } => Some(&mut rewrite),
            _ => None,
        };
        train_step(
            &mut net,
            &x,
            &y,
            it,
            StepOptions {
                optimizer: &cfg.z_optimizer,
                update: &only_z,
                rewrite_logit_grads,
            },
        )?;
        let (x, y) = train.batch(batch_b.next_batch());
        trace.push(train_step(
            &mut net,
            &x,
            &y,
            it,
            StepOptions {
                optimizer: &cfg.psi_optimizer,
                update: &not_z,
                rewrite_logit_grads: None,
            },
        )?);
        let done = it + 1;
        if done % per_epoch == 0 || done == iters {
            arch.sync(&net)?;
            arch.record(done as f64 / per_epoch as f64);
        }
    }
    if iters > 0 {
        recalibrate_bn(&mut net, train, cfg.bn_recalibration, cfg.batch_size)?;
    }
    arch.sync(&net)?;
    Ok(DiffResult {
        network: net,
        arch,
        trace,
    })
}

/// Fresh weights with the searched mixture frozen, trained for `cfg.epochs`.
pub fn retrain(
    spec: &BackboneSpec,
    arch: &ArchState,
    cfg: &DiffConfig,
    train: &Dataset,
) -> Result<(Network, Vec<StepRecord>), TrainError> {
    let mut net = build(spec, sub_seed(cfg.seed, "init", 1))?;
    let mut layer = 0;
    for u in net.convs.iter_mut() {
        if let ConvUnit::Mixed(m) = u {
            let src = arch
                .logits
                .get(layer)
                .filter(|v| v.len() == m.logits.numel())
                .ok_or_else(|| ModelError::InvalidSpec("architecture does not match spec".into()))?;
            m.logits.value.data_mut().copy_from_slice(src);
            layer += 1;
        }
    }
    let tc = TrainConfig {
        batch_size: cfg.batch_size,
        optimizer: cfg.psi_optimizer,
        epochs: cfg.epochs,
        seed: sub_seed(cfg.seed, "order", 1),
        bn_recalibration: cfg.bn_recalibration,
    };
    let n = tc.steps(train.len());
    let trace = train_steps(&mut net, train, &tc, n)?;
    Ok((net, trace))
}
