//! The image-classification backbone: a lifting layer and group convolutions,
//! each followed by batch norm and ReLU, optional 2×2 average pools, group
//! pooling, and a two-layer dense head.
//!
//! Every network lives in a fixed *top* group's regular layout: activation
//! channel `b·|top| + idx_top(g)`. Batch-norm statistics are shared over
//! each block of `|top|` channels, so relaxing a layer (which only reroutes
//! channels inside blocks) leaves the whole network function unchanged.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    AutodiffError, BatchStats, Gradients, NormMode, Parameter, Tape, Tensor, Var,
};
use crate::gconv::{routed_layer, GConvError, GConvLayer, KernelInput, MixedLayer};
use crate::groups::{GroupError, PointGroup};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
/// L2 weight on the unconstrained pathway of residual-pathway-prior layers.
pub const RPP_L2: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid backbone spec: {0}")]
    InvalidSpec(String),
    #[error("operation needs a different network mode: {0}")]
    WrongMode(String),
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error(transparent)]
    GConv(#[from] GConvError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "groups", rename_all = "lowercase")]
pub enum Mode {
    /// One group per conv layer, non-increasing along depth.
    Static(Vec<PointGroup>),
    /// Every conv layer mixes all listed groups.
    Mixed(Vec<PointGroup>),
    /// `D4` pathway plus an L2-penalised `C1` pathway in every layer.
    Rpp,
}

fn default_layers() -> usize {
    8
}
fn default_width() -> usize {
    32
}
fn default_widen() -> Option<usize> {
    Some(4)
}
fn default_pools() -> Vec<usize> {
    vec![2, 4, 6, 8]
}
fn default_k() -> usize {
    3
}
fn default_in() -> usize {
    1
}
fn default_classes() -> usize {
    10
}
fn default_hidden() -> usize {
    64
}

mod zero_is_none {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(v.unwrap_or(0) as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        Ok(Some(usize::deserialize(d)?).filter(|&n| n > 0))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    #[serde(default = "default_layers")]
    pub n_conv_layers: usize,
    #[serde(default = "default_width")]
    pub base_expanded_width: usize,
    /// Layers after this (1-based) index have twice the base width; 0 in
    /// config files means never.
    #[serde(default = "default_widen", with = "zero_is_none")]
    pub widen_after: Option<usize>,
    /// 1-based layer indices followed by a 2×2 average pool.
    #[serde(default = "default_pools")]
    pub pool_after: Vec<usize>,
    #[serde(default = "default_k")]
    pub kernel_size: usize,
    #[serde(default = "default_in")]
    pub in_channels: usize,
    #[serde(default = "default_classes")]
    pub n_classes: usize,
    #[serde(default = "default_hidden")]
    pub head_hidden_width: usize,
    pub mode: Mode,
}

impl BackboneSpec {
    /// Desk-scale defaults with the given mode.
    pub fn desk(mode: Mode) -> Self {
        BackboneSpec {
            n_conv_layers: default_layers(),
            base_expanded_width: default_width(),
            widen_after: default_widen(),
            pool_after: default_pools(),
            kernel_size: default_k(),
            in_channels: default_in(),
            n_classes: default_classes(),
            head_hidden_width: default_hidden(),
            mode,
        }
    }

    pub fn uniform(group: PointGroup, n_layers: usize) -> Mode {
        Mode::Static(vec![group; n_layers])
    }

    /// Expanded output width of conv layer `l` (0-based).
    pub fn width(&self, l: usize) -> usize {
        match self.widen_after {
            Some(w) if l >= w => 2 * self.base_expanded_width,
            _ => self.base_expanded_width,
        }
    }

    /// Expanded input width of conv layer `l` (0-based).
    pub fn in_width(&self, l: usize) -> usize {
        if l == 0 {
            self.in_channels
        } else {
            self.width(l - 1)
        }
    }

    pub fn pools_after(&self, l: usize) -> bool {
        self.pool_after.contains(&(l + 1))
    }

    /// Group whose regular layout the network's activations use.
    pub fn top_group(&self) -> Result<PointGroup, ModelError> {
        match &self.mode {
            Mode::Static(g) => g
                .first()
                .copied()
                .ok_or_else(|| ModelError::InvalidSpec("empty genotype".into())),
            Mode::Mixed(gs) => {
                if gs.is_empty() {
                    return Err(ModelError::InvalidSpec("empty group set".into()));
                }
                // smallest listed group containing all others, else D4
                Ok(gs
                    .iter()
                    .copied()
                    .find(|&t| gs.iter().all(|g| g.is_subgroup_of(t)))
                    .unwrap_or(PointGroup::D4))
            }
            Mode::Rpp => Ok(PointGroup::D4),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidSpec(m));
        if self.n_conv_layers == 0 {
            return bad("at least one conv layer is required".into());
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(GroupError::EvenKernel(self.kernel_size).into());
        }
        if self.n_classes < 2 || self.head_hidden_width == 0 || self.in_channels == 0 {
            return bad("need ≥ 2 classes, a hidden width and an input channel".into());
        }
        if let Some(&p) = self.pool_after.iter().find(|&&p| p == 0 || p > self.n_conv_layers) {
            return bad(format!("pool index {p} outside 1..={}", self.n_conv_layers));
        }
        if let Mode::Static(g) = &self.mode {
            check_genotype(g)?;
            if g.len() != self.n_conv_layers {
                return bad(format!(
                    "genotype has {} groups for {} layers",
                    g.len(),
                    self.n_conv_layers
                ));
            }
        }
        let top = self.top_group()?;
        for l in 0..self.n_conv_layers {
            if !self.width(l).is_multiple_of(top.order()) {
                return bad(format!(
                    "layer {} width {} not divisible by |{top}|",
                    l + 1,
                    self.width(l)
                ));
            }
        }
        Ok(())
    }
}

/// Checks the non-increasing constraint `g[l+1] ≤ g[l]`.
pub fn check_genotype(g: &[PointGroup]) -> Result<(), ModelError> {
    for (l, w) in g.windows(2).enumerate() {
        if !w[1].is_subgroup_of(w[0]) {
            return Err(ModelError::InvalidSpec(format!(
                "layer {} group {} is not a subgroup of layer {} group {}",
                l + 2,
                w[1],
                l + 1,
                w[0]
            )));
        }
    }
    Ok(())
}

pub fn genotype_string(g: &[PointGroup]) -> String {
    g.iter().map(|p| p.name()).collect::<Vec<_>>().join("-")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Kernel,
    /// The unconstrained pathway of a residual-pathway-prior layer.
    FreeKernel,
    ArchLogit,
    Norm,
    Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConvUnit {
    Static(GConvLayer),
    Mixed(MixedLayer),
    Rpp { equi: GConvLayer, free: GConvLayer },
    /// A single unstructured filter `[E_out, E_in, k, k]` (collapsed form).
    Plain(Parameter),
}

impl ConvUnit {
    fn params_mut(&mut self) -> Vec<(ParamKind, &mut Parameter)> {
        match self {
            ConvUnit::Static(l) => vec![(ParamKind::Kernel, &mut l.kernel.weights)],
            ConvUnit::Mixed(m) => {
                let mut v = vec![(ParamKind::ArchLogit, &mut m.logits)];
                v.extend(
                    m.branches
                        .iter_mut()
                        .map(|b| (ParamKind::Kernel, &mut b.kernel.weights)),
                );
                v
            }
            ConvUnit::Rpp { equi, free } => vec![
                (ParamKind::Kernel, &mut equi.kernel.weights),
                (ParamKind::FreeKernel, &mut free.kernel.weights),
            ],
            ConvUnit::Plain(p) => vec![(ParamKind::Kernel, p)],
        }
    }

    fn params(&self) -> Vec<(ParamKind, &Parameter)> {
        match self {
            ConvUnit::Static(l) => vec![(ParamKind::Kernel, &l.kernel.weights)],
            ConvUnit::Mixed(m) => {
                let mut v = vec![(ParamKind::ArchLogit, &m.logits)];
                v.extend(m.branches.iter().map(|b| (ParamKind::Kernel, &b.kernel.weights)));
                v
            }
            ConvUnit::Rpp { equi, free } => vec![
                (ParamKind::Kernel, &equi.kernel.weights),
                (ParamKind::FreeKernel, &free.kernel.weights),
            ],
            ConvUnit::Plain(p) => vec![(ParamKind::Kernel, p)],
        }
    }

    /// Records the physical filter; leaves are pushed in `params` order.
    fn record(&self, tape: &mut Tape, leaves: &mut Vec<Var>) -> Result<Var, ModelError> {
        Ok(match self {
            ConvUnit::Static(l) => {
                let (w, leaf) = l.record(tape)?;
                leaves.push(leaf);
                w
            }
            ConvUnit::Mixed(m) => {
                let (w, logits, branch) = m.record(tape)?;
                leaves.push(logits);
                leaves.extend(branch);
                w
            }
            ConvUnit::Rpp { equi, free } => {
                let (we, le) = equi.record(tape)?;
                let (wf, lf) = free.record(tape)?;
                leaves.push(le);
                leaves.push(lf);
                tape.add(we, wf)?
            }
            ConvUnit::Plain(p) => {
                let leaf = tape.param(p.value.clone());
                leaves.push(leaf);
                leaf
            }
        })
    }

    /// The plain filter this unit currently applies.
    pub fn filter(&self) -> Result<Tensor, ModelError> {
        Ok(match self {
            ConvUnit::Static(l) => l.physical_filter()?,
            ConvUnit::Mixed(m) => m.collapse()?,
            ConvUnit::Rpp { equi, free } => {
                equi.physical_filter()?.add(&free.physical_filter()?)
            }
            ConvUnit::Plain(p) => p.value.clone(),
        })
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.numel()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Channels sharing one set of statistics.
    pub group: usize,
}

impl BatchNorm {
    pub fn new(blocks: usize, group: usize) -> Self {
        BatchNorm {
            gamma: Parameter::new(Tensor::filled(&[blocks], 1.0)),
            beta: Parameter::new(Tensor::zeros(&[blocks])),
            running_mean: vec![0.0; blocks],
            running_var: vec![1.0; blocks],
            group,
        }
    }

    fn record(
        &self,
        tape: &mut Tape,
        x: Var,
        train: bool,
        leaves: &mut Vec<Var>,
    ) -> Result<(Var, Option<BatchStats>), ModelError> {
        let g = tape.param(self.gamma.value.clone());
        let b = tape.param(self.beta.value.clone());
        leaves.push(g);
        leaves.push(b);
        let mode = if train {
            NormMode::Batch
        } else {
            NormMode::Running {
                mean: &self.running_mean,
                var: &self.running_var,
            }
        };
        Ok(tape.batch_norm(x, g, b, self.group, BN_EPS, mode)?)
    }

    fn update(&mut self, stats: &BatchStats) {
        for (r, m) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Parameter,
    pub b: Parameter,
}

impl Dense {
    fn he_uniform(n_out: usize, n_in: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / n_in as f64).sqrt();
        Dense {
            w: Parameter::new(Tensor::uniform(&[n_out, n_in], -bound, bound, rng)),
            b: Parameter::new(Tensor::zeros(&[n_out])),
        }
    }

    fn record(&self, tape: &mut Tape, x: Var, leaves: &mut Vec<Var>) -> Result<Var, ModelError> {
        let w = tape.param(self.w.value.clone());
        let b = tape.param(self.b.value.clone());
        leaves.push(w);
        leaves.push(b);
        Ok(tape.dense(x, w, b)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: BackboneSpec,
    pub top: PointGroup,
    pub convs: Vec<ConvUnit>,
    pub norms: Vec<BatchNorm>,
    pub fc1: Dense,
    pub head_norm: BatchNorm,
    pub fc2: Dense,
    /// Named seeds that produced this network (recorded in checkpoints).
    pub seeds: BTreeMap<String, u64>,
}

/// Values recorded by one forward pass.
pub struct Forward {
    pub logits: Var,
    /// One leaf per entry of [`Network::params`], in the same order.
    pub leaves: Vec<Var>,
    /// Batch statistics per batch norm (train mode only).
    pub stats: Vec<BatchStats>,
}

/// Deterministically builds a network from `spec` and an init seed.
pub fn build(spec: &BackboneSpec, seed: u64) -> Result<Network, ModelError> {
    spec.validate()?;
    let top = spec.top_group()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = spec.kernel_size;
    let mut convs = Vec::with_capacity(spec.n_conv_layers);
    for l in 0..spec.n_conv_layers {
        let input = if l == 0 {
            KernelInput::Image
        } else {
            KernelInput::Group
        };
        let (e_out, e_in) = (spec.width(l), spec.in_width(l));
        let unit = match &spec.mode {
            Mode::Static(g) => ConvUnit::Static(routed_layer(g[l], top, input, e_out, e_in, k, &mut rng)?),
            Mode::Mixed(gs) => ConvUnit::Mixed(MixedLayer::init(gs, top, input, e_out, e_in, k, &mut rng)?),
            Mode::Rpp => ConvUnit::Rpp {
                equi: routed_layer(PointGroup::D4, top, input, e_out, e_in, k, &mut rng)?,
                free: routed_layer(PointGroup::C1, top, input, e_out, e_in, k, &mut rng)?,
            },
        };
        convs.push(unit);
    }
    let norms = (0..spec.n_conv_layers)
        .map(|l| BatchNorm::new(spec.width(l) / top.order(), top.order()))
        .collect();
    let pooled = spec.width(spec.n_conv_layers - 1) / top.order();
    let fc1 = Dense::he_uniform(spec.head_hidden_width, pooled, &mut rng);
    let fc2 = Dense::he_uniform(spec.n_classes, spec.head_hidden_width, &mut rng);
    Ok(Network {
        spec: spec.clone(),
        top,
        convs,
        norms,
        fc1,
        head_norm: BatchNorm::new(spec.head_hidden_width, 1),
        fc2,
        seeds: BTreeMap::from([("init".to_string(), seed)]),
    })
}

/// Residual-pathway-prior network; `spec.mode` must be [`Mode::Rpp`].
pub fn build_rpp(spec: &BackboneSpec, seed: u64) -> Result<Network, ModelError> {
    if spec.mode != Mode::Rpp {
        return Err(ModelError::InvalidSpec("build_rpp needs mode = rpp".into()));
    }
    build(spec, seed)
}

impl Network {
    pub fn params(&self) -> Vec<(ParamKind, &Parameter)> {
        let mut v = Vec::new();
        for (unit, bn) in self.convs.iter().zip(&self.norms) {
            v.extend(unit.params());
            v.push((ParamKind::Norm, &bn.gamma));
            v.push((ParamKind::Norm, &bn.beta));
        }
        v.push((ParamKind::Dense, &self.fc1.w));
        v.push((ParamKind::Dense, &self.fc1.b));
        v.push((ParamKind::Norm, &self.head_norm.gamma));
        v.push((ParamKind::Norm, &self.head_norm.beta));
        v.push((ParamKind::Dense, &self.fc2.w));
        v.push((ParamKind::Dense, &self.fc2.b));
        v
    }

    pub fn params_mut(&mut self) -> Vec<(ParamKind, &mut Parameter)> {
        let mut v = Vec::new();
        for (unit, bn) in self.convs.iter_mut().zip(self.norms.iter_mut()) {
            v.extend(unit.params_mut());
            v.push((ParamKind::Norm, &mut bn.gamma));
            v.push((ParamKind::Norm, &mut bn.beta));
        }
        v.push((ParamKind::Dense, &mut self.fc1.w));
        v.push((ParamKind::Dense, &mut self.fc1.b));
        v.push((ParamKind::Norm, &mut self.head_norm.gamma));
        v.push((ParamKind::Norm, &mut self.head_norm.beta));
        v.push((ParamKind::Dense, &mut self.fc2.w));
        v.push((ParamKind::Dense, &mut self.fc2.b));
        v
    }

    /// Trainable scalars (frozen weight-norm gains excluded).
    pub fn param_count(&self) -> usize {
        self.params().iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.numel()).sum()
    }

    /// Scalars in conv kernels only.
    pub fn conv_param_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|(k, _)| matches!(k, ParamKind::Kernel | ParamKind::FreeKernel))
            .map(|(_, p)| p.numel())
            .sum()
    }

    /// Per-layer groups for static networks.
    pub fn genotype(&self) -> Option<Vec<PointGroup>> {
        self.convs
            .iter()
            .map(|u| match u {
                ConvUnit::Static(l) => Some(l.group()),
                _ => None,
            })
            .collect()
    }

    pub fn is_mixed(&self) -> bool {
        self.convs.iter().any(|u| matches!(u, ConvUnit::Mixed(_)))
    }

    /// Records the network on `tape`. In train mode batch norms use batch
    /// statistics (returned in [`Forward::stats`]); otherwise running ones.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, train: bool) -> Result<Forward, ModelError> {
        let mut leaves = Vec::new();
        let mut stats = Vec::new();
        let pad = (self.spec.kernel_size - 1) / 2;
        let mut h = tape.constant(x.clone());
        for (l, (unit, bn)) in self.convs.iter().zip(&self.norms).enumerate() {
            let w = unit.record(tape, &mut leaves)?;
            let y = tape.conv2d(h, w, 1, pad)?;
            let (y, s) = bn.record(tape, y, train, &mut leaves)?;
            stats.extend(s);
            h = tape.relu(y)?;
            if self.spec.pools_after(l) {
                h = tape.avg_pool2(h)?;
            }
        }
        let pooled = tape.global_avg_pool(h)?;
        let pooled = tape.group_mean(pooled, self.top.order())?;
        let z = self.fc1.record(tape, pooled, &mut leaves)?;
        let (z, s) = self.head_norm.record(tape, z, train, &mut leaves)?;
        stats.extend(s);
        let z = tape.relu(z)?;
        let logits = self.fc2.record(tape, z, &mut leaves)?;
        Ok(Forward {
            logits,
            leaves,
            stats,
        })
    }

    /// Cross-entropy plus, for residual-pathway-prior layers, the L2 penalty
    /// on the free pathway.
    pub fn loss(&self, tape: &mut Tape, fwd: &Forward, labels: &[usize]) -> Result<Var, ModelError> {
        let mut loss = tape.softmax_cross_entropy(fwd.logits, labels)?;
        for ((kind, _), &leaf) in self.params().iter().zip(&fwd.leaves) {
            if *kind == ParamKind::FreeKernel {
                let sq = tape.sum_squares(leaf)?;
                let pen = tape.scale(sq, RPP_L2)?;
                loss = tape.add(loss, pen)?;
            }
        }
        Ok(loss)
    }

    pub fn rpp_penalty(&self) -> f64 {
        self.params()
            .iter()
            .filter(|(k, _)| *k == ParamKind::FreeKernel)
            .map(|(_, p)| RPP_L2 * p.value.dot(&p.value))
            .sum()
    }

    /// Eval-mode logits for a batch.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, x, false)?;
        Ok(tape.value(fwd.logits).clone())
    }

    /// Overwrites `grad` of every parameter selected by `keep` from `grads`.
    pub fn load_grads(&mut self, grads: &Gradients, leaves: &[Var], keep: impl Fn(ParamKind) -> bool) {
        for ((kind, p), &leaf) in self.params_mut().into_iter().zip(leaves) {
            p.zero_grad();
            if keep(kind) {
                if let Some(g) = grads.slice(leaf) {
                    p.accumulate(g);
                }
            }
        }
    }

    /// Folds batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        let norms = self.norms.iter_mut().chain(std::iter::once(&mut self.head_norm));
        for (bn, s) in norms.zip(stats) {
            bn.update(s);
        }
    }

    /// Replaces running statistics with the average of `passes` (each one
    /// forward pass worth of batch statistics).
    pub fn set_running_stats(&mut self, passes: &[Vec<BatchStats>]) {
        if passes.is_empty() {
            return;
        }
        let n = passes.len() as f64;
        let norms = self.norms.iter_mut().chain(std::iter::once(&mut self.head_norm));
        for (i, bn) in norms.enumerate() {
            bn.running_mean.iter_mut().for_each(|v| *v = 0.0);
            bn.running_var.iter_mut().for_each(|v| *v = 0.0);
            for pass in passes {
                for (r, m) in bn.running_mean.iter_mut().zip(&pass[i].mean) {
                    *r += m / n;
                }
                for (r, v) in bn.running_var.iter_mut().zip(&pass[i].var) {
                    *r += v / n;
                }
            }
        }
    }

    /// Relaxes static layer `l` to `target`, keeping the genotype valid.
    pub fn relax_layer(&self, l: usize, target: PointGroup) -> Result<Network, ModelError> {
        let mut genotype = self
            .genotype()
            .ok_or_else(|| ModelError::WrongMode("relaxation needs a static network".into()))?;
        if l >= genotype.len() {
            return Err(ModelError::InvalidSpec(format!("no conv layer {}", l + 1)));
        }
        let layer = match &self.convs[l] {
            ConvUnit::Static(layer) => layer,
            _ => unreachable!("genotype() succeeded"),
        };
        let relaxed = layer.relaxed(target)?;
        genotype[l] = target;
        check_genotype(&genotype)?;
        let mut net = self.clone();
        net.convs[l] = ConvUnit::Static(relaxed);
        net.spec.mode = Mode::Static(genotype);
        Ok(net)
    }

    /// Replaces every conv unit by its single plain filter.
    pub fn collapsed(&self) -> Result<Network, ModelError> {
        let mut net = self.clone();
        for unit in net.convs.iter_mut() {
            *unit = ConvUnit::Plain(Parameter::new(unit.filter()?));
        }
        Ok(net)
    }
}

/// Network constrained to `relaxed_to` whose initial weights are exactly
/// `initial`-equivariant: built over `initial`, then every layer relaxed.
pub fn build_prior_baseline(
    initial: PointGroup,
    relaxed_to: PointGroup,
    spec: &BackboneSpec,
    seed: u64,
) -> Result<Network, ModelError> {
    if !relaxed_to.is_subgroup_of(initial) {
        return Err(GroupError::NotASubgroup {
            sub: relaxed_to,
            sup: initial,
        }
        .into());
    }
    let mut s = spec.clone();
    s.mode = BackboneSpec::uniform(initial, spec.n_conv_layers);
    let mut net = build(&s, seed)?;
    for l in (0..spec.n_conv_layers).rev() {
        net = net.relax_layer(l, relaxed_to)?;
    }
    Ok(net)
}
