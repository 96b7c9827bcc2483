//! Group-equivariant layers realised as structured standard convolutions.
//!
//! A kernel over group `G` stores `ψ` as `[c_out, c_in, S, k, k]` with
//! `S = |G|` (group convolution) or `S = 1` (lifting). Expansion produces a
//! plain `[c_out·|G|, c_in·S, k, k]` filter whose channel index is
//! `c·|G| + idx(t)` in the canonical element order.
//!
//! Inside a network every layer additionally carries *routes*: permutations
//! from its canonical expanded channels to the network's physical channels.
//! Relaxing a layer rewrites its parameters and its routes together, so the
//! physical filter (and hence the network function) is bit-for-bit unchanged.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, AutodiffError, Parameter, Tape, Tensor, Var};
use crate::groups::{
    act_on_grid, coset_representatives, grid_permutation, regular_perm, CosetReps,
    GroupElement, GroupError, PointGroup,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GConvError {
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("group mismatch: {0}")]
    GroupMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// What a kernel convolves: a plain image (lifting) or a group feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelInput {
    Image,
    Group,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GKernel {
    pub group: PointGroup,
    pub input: KernelInput,
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
    pub weights: Parameter,
}

impl GKernel {
    pub fn new(
        group: PointGroup,
        input: KernelInput,
        c_out: usize,
        c_in: usize,
        k: usize,
        params: Tensor,
    ) -> Result<Self, GConvError> {
        if k.is_multiple_of(2) {
            return Err(GroupError::EvenKernel(k).into());
        }
        let s = match input {
            KernelInput::Image => 1,
            KernelInput::Group => group.order(),
        };
        let expected = [c_out, c_in, s, k, k];
        if params.shape() != expected {
            return Err(GConvError::ShapeMismatch(format!(
                "{group} kernel needs {expected:?}, got {:?}",
                params.shape()
            )));
        }
        Ok(GKernel {
            group,
            input,
            c_out,
            c_in,
            k,
            weights: Parameter::new(params),
        })
    }

    /// He-uniform initialisation with fan-in over expanded input channels.
    pub fn he_uniform(
        group: PointGroup,
        input: KernelInput,
        c_out: usize,
        c_in: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, GConvError> {
        let s = match input {
            KernelInput::Image => 1,
            KernelInput::Group => group.order(),
        };
        let fan_in = (c_in * s * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let params = Tensor::uniform(&[c_out, c_in, s, k, k], -bound, bound, rng);
        Self::new(group, input, c_out, c_in, k, params)
    }

    pub fn params(&self) -> &Tensor {
        &self.weights.value
    }

    pub fn is_lifting(&self) -> bool {
        self.input == KernelInput::Image
    }

    /// Size of the stored group axis (`|G|`, or 1 for lifting kernels).
    pub fn s_in(&self) -> usize {
        match self.input {
            KernelInput::Image => 1,
            KernelInput::Group => self.group.order(),
        }
    }

    pub fn expanded_out(&self) -> usize {
        self.c_out * self.group.order()
    }

    pub fn expanded_in(&self) -> usize {
        self.c_in * self.s_in()
    }

    pub fn expanded_shape(&self) -> [usize; 4] {
        [self.expanded_out(), self.expanded_in(), self.k, self.k]
    }

    pub fn param_count(&self) -> usize {
        self.weights.numel()
    }

    /// For every entry of the expanded filter, the flat index of the `ψ`
    /// entry it copies: `expanded[(d,t),(c,s),q] = ψ[d, c, idx(t⁻¹s), act(t)[q]]`.
    pub fn expansion_index(&self) -> Result<Vec<usize>, GConvError> {
        let g = self.group;
        let (k2, s_in) = (self.k * self.k, self.s_in());
        let grid: Vec<Vec<usize>> = g
            .elements()
            .iter()
            .map(|&t| act_on_grid(t, self.k))
            .collect::<Result<_, _>>()?;
        let e_in = self.expanded_in();
        let mut index = Vec::with_capacity(self.expanded_out() * e_in * k2);
        for d in 0..self.c_out {
            for (ti, &t) in g.elements().iter().enumerate() {
                let t_inv = t.inverse();
                for c in 0..self.c_in {
                    for si in 0..s_in {
                        let gi = match self.input {
                            KernelInput::Image => 0,
                            KernelInput::Group => g.idx(t_inv.product(g.elements()[si])),
                        };
                        let base = ((d * self.c_in + c) * s_in + gi) * k2;
                        index.extend(grid[ti].iter().map(|&q| base + q));
                    }
                }
            }
        }
        Ok(index)
    }
}

/// Expands `ψ` into a plain convolution filter in the canonical layout.
pub fn expand_kernel(kern: &GKernel) -> Result<Tensor, GConvError> {
    let index = kern.expansion_index()?;
    Ok(kern.params().gather(&index, &kern.expanded_shape()))
}

/// Canonical-to-physical route for a `group` layer living in a `top`-regular
/// layout of `blocks` blocks: channel `(b, s)` over `group`, element `h`,
/// lands on `b·|top| + idx_top(h·s)` with `s ∈ reps(group, top)`.
pub fn layout_route(
    group: PointGroup,
    top: PointGroup,
    blocks: usize,
) -> Result<Vec<usize>, GConvError> {
    let reps = coset_representatives(group, top)?;
    let mut route = Vec::with_capacity(blocks * top.order());
    for b in 0..blocks {
        for &s in &reps.reps {
            for &h in group.elements() {
                route.push(b * top.order() + top.idx(h.product(s)));
            }
        }
    }
    Ok(route)
}

/// A group (or lifting) convolution layer as it sits inside a network.
#[derive(Clone, Debug, PartialEq)]
pub struct GConvLayer {
    pub kernel: GKernel,
    /// Canonical expanded output channel → physical output channel.
    pub out_route: Vec<usize>,
    /// Canonical expanded input channel → physical input channel.
    pub in_route: Vec<usize>,
    /// Frozen weight-norm gain; when present `kernel.weights` is the direction.
    pub gain: Option<Parameter>,
}

impl GConvLayer {
    /// Layer with identity routes (canonical layout is the physical layout).
    pub fn new(kernel: GKernel) -> Self {
        let out_route = (0..kernel.expanded_out()).collect();
        let in_route = (0..kernel.expanded_in()).collect();
        GConvLayer {
            kernel,
            out_route,
            in_route,
            gain: None,
        }
    }

    pub fn with_routes(
        kernel: GKernel,
        out_route: Vec<usize>,
        in_route: Vec<usize>,
    ) -> Result<Self, GConvError> {
        if !is_permutation(&out_route, kernel.expanded_out())
            || !is_permutation(&in_route, kernel.expanded_in())
        {
            return Err(GConvError::ShapeMismatch(
                "routes must be permutations of the expanded channels".into(),
            ));
        }
        Ok(GConvLayer {
            kernel,
            out_route,
            in_route,
            gain: None,
        })
    }

    /// Switches to the weight-norm parameterisation with a frozen gain equal
    /// to the current kernel norm, so the effective kernel is unchanged.
    pub fn with_weight_norm(mut self) -> Result<Self, GConvError> {
        let norm = self.kernel.params().norm();
        if norm < 1e-12 {
            return Err(AutodiffError::ZeroNorm.into());
        }
        self.gain = Some(Parameter::frozen(Tensor::scalar(norm)));
        Ok(self)
    }

    pub fn group(&self) -> PointGroup {
        self.kernel.group
    }

    pub fn is_lifting(&self) -> bool {
        self.kernel.is_lifting()
    }

    /// The kernel `ψ` actually applied (`gain · v/‖v‖` under weight norm).
    pub fn effective_params(&self) -> Result<Tensor, GConvError> {
        let v = self.kernel.params();
        match &self.gain {
            None => Ok(v.clone()),
            Some(g) => {
                let n = v.norm();
                if n < 1e-12 {
                    return Err(AutodiffError::ZeroNorm.into());
                }
                Ok(v.scale(g.value.item() / n))
            }
        }
    }

    /// Index from physical filter entries to `ψ` entries.
    pub fn physical_index(&self) -> Result<Vec<usize>, GConvError> {
        let exp = self.kernel.expansion_index()?;
        let (e_in, k2) = (self.kernel.expanded_in(), self.kernel.k * self.kernel.k);
        let mut phys = vec![0; exp.len()];
        for (i, &po) in self.out_route.iter().enumerate() {
            for (j, &pi) in self.in_route.iter().enumerate() {
                let src = (i * e_in + j) * k2;
                let dst = (po * e_in + pi) * k2;
                phys[dst..dst + k2].copy_from_slice(&exp[src..src + k2]);
            }
        }
        Ok(phys)
    }

    /// Plain convolution filter over physical channels.
    pub fn physical_filter(&self) -> Result<Tensor, GConvError> {
        let index = self.physical_index()?;
        Ok(self
            .effective_params()?
            .gather(&index, &self.kernel.expanded_shape()))
    }

    /// Records the physical filter on `tape`; returns `(filter, ψ leaf)`.
    pub fn record(&self, tape: &mut Tape) -> Result<(Var, Var), GConvError> {
        let leaf = tape.param(self.kernel.params().clone());
        let psi = match &self.gain {
            None => leaf,
            Some(g) => tape.weight_norm(leaf, g.value.item())?,
        };
        let index: Rc<[usize]> = self.physical_index()?.into();
        let filter = tape.gather(psi, index, &self.kernel.expanded_shape())?;
        Ok((filter, leaf))
    }

    pub fn param_count(&self) -> usize {
        self.kernel.param_count()
    }

    /// Equivariance relaxation to `target ≤ group` with canonical representatives.
    pub fn relaxed(&self, target: PointGroup) -> Result<GConvLayer, GConvError> {
        let reps = coset_representatives(target, self.group())?;
        self.relaxed_with(&reps)
    }

    /// Equivariance relaxation with an explicit representative system.
    pub fn relaxed_with(&self, reps: &CosetReps) -> Result<GConvLayer, GConvError> {
        if reps.sup != self.group() {
            return Err(GConvError::GroupMismatch(format!(
                "representatives of {}\\{} applied to a {} layer",
                reps.sub,
                reps.sup,
                self.group()
            )));
        }
        reps.validate()?;
        let kern = &self.kernel;
        let (g, h) = (kern.group, reps.sub);
        let nr = reps.len();
        let k2 = kern.k * kern.k;
        let (c_out, c_in) = (kern.c_out * nr, c_in_of(kern, nr));
        let grid: Vec<Vec<usize>> = reps
            .reps
            .iter()
            .map(|&t| act_on_grid(t, kern.k))
            .collect::<Result<_, _>>()?;
        let old = kern.params().data();
        let (s_old, s_new) = (kern.s_in(), if kern.is_lifting() { 1 } else { h.order() });
        let mut new = Vec::with_capacity(kern.param_count() * nr);
        match kern.input {
            KernelInput::Group => {
                for d in 0..kern.c_out {
                    for (ti, &t) in reps.reps.iter().enumerate() {
                        for c in 0..kern.c_in {
                            for &s in &reps.reps {
                                for &hp in h.elements() {
                                    let gi = g.idx(t.inverse().product(hp).product(s));
                                    let base = ((d * kern.c_in + c) * s_old + gi) * k2;
                                    new.extend(grid[ti].iter().map(|&q| old[base + q]));
                                }
                            }
                        }
                    }
                }
            }
            KernelInput::Image => {
                for d in 0..kern.c_out {
                    for grid_t in &grid {
                        for c in 0..kern.c_in {
                            let base = (d * kern.c_in + c) * k2;
                            new.extend(grid_t.iter().map(|&q| old[base + q]));
                        }
                    }
                }
            }
        }
        let params = Tensor::new(vec![c_out, c_in, s_new, kern.k, kern.k], new)?;
        let kernel = GKernel::new(h, kern.input, c_out, c_in, kern.k, params)?;

        let mut out_route = Vec::with_capacity(self.out_route.len());
        for d in 0..kern.c_out {
            for &t in &reps.reps {
                for &gp in h.elements() {
                    out_route.push(self.out_route[d * g.order() + g.idx(gp.product(t))]);
                }
            }
        }
        let in_route = match kern.input {
            KernelInput::Image => self.in_route.clone(),
            KernelInput::Group => {
                let mut r = Vec::with_capacity(self.in_route.len());
                for c in 0..kern.c_in {
                    for &s in &reps.reps {
                        for &sp in h.elements() {
                            r.push(self.in_route[c * g.order() + g.idx(sp.product(s))]);
                        }
                    }
                }
                r
            }
        };
        let gain = self
            .gain
            .as_ref()
            .map(|p| Parameter::frozen(p.value.scale((nr as f64).sqrt())));
        Ok(GConvLayer {
            kernel,
            out_route,
            in_route,
            gain,
        })
    }
}

fn c_in_of(kern: &GKernel, nr: usize) -> usize {
    match kern.input {
        KernelInput::Image => kern.c_in,
        KernelInput::Group => kern.c_in * nr,
    }
}

fn is_permutation(p: &[usize], n: usize) -> bool {
    let mut seen = vec![false; n];
    p.len() == n && p.iter().all(|&i| i < n && !std::mem::replace(&mut seen[i], true))
}

/// Relaxes a group-convolution layer; see [`GConvLayer::relaxed`].
pub fn relax(layer: &GConvLayer, target: PointGroup) -> Result<GConvLayer, GConvError> {
    if layer.is_lifting() {
        return Err(GConvError::GroupMismatch(
            "relax expects a group convolution; use relax_lifting".into(),
        ));
    }
    layer.relaxed(target)
}

/// Relaxes a lifting layer; see [`GConvLayer::relaxed`].
pub fn relax_lifting(layer: &GConvLayer, target: PointGroup) -> Result<GConvLayer, GConvError> {
    if !layer.is_lifting() {
        return Err(GConvError::GroupMismatch(
            "relax_lifting expects a lifting layer".into(),
        ));
    }
    layer.relaxed(target)
}

/// Feature map `B × C·|G| × H × W` with channel index `c·|G| + idx(g)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub group: PointGroup,
    pub channels: usize,
}

impl FeatureMap {
    pub fn new(tensor: Tensor, group: PointGroup, channels: usize) -> Result<Self, GConvError> {
        let s = tensor.shape();
        if s.len() != 4 || s[1] != channels * group.order() {
            return Err(GConvError::ShapeMismatch(format!(
                "{channels} {group} channels do not fit tensor {s:?}"
            )));
        }
        Ok(FeatureMap {
            tensor,
            group,
            channels,
        })
    }

    /// Applies `g`: spatial action plus left-regular action on each block.
    pub fn transformed(&self, g: GroupElement) -> Result<FeatureMap, GConvError> {
        let perm = regular_perm(g, self.group)?;
        let s = self.tensor.shape();
        let (b, h, w) = (s[0], s[2], s[3]);
        if h != w {
            return Err(GConvError::ShapeMismatch("square maps only".into()));
        }
        let order = self.group.order();
        let rotated = transform_image(&self.tensor, g)?;
        let src = rotated.data();
        let mut out = vec![0.0; src.len()];
        let plane = h * w;
        for bi in 0..b {
            for c in 0..self.channels {
                for si in 0..order {
                    let from = ((bi * self.channels + c) * order + si) * plane;
                    let to = ((bi * self.channels + c) * order + perm[si]) * plane;
                    out[to..to + plane].copy_from_slice(&src[from..from + plane]);
                }
            }
        }
        FeatureMap::new(Tensor::new(s.to_vec(), out)?, self.group, self.channels)
    }
}

/// Applies the spatial action of `g` to every plane of a `[B, C, n, n]` tensor.
pub fn transform_image(x: &Tensor, g: GroupElement) -> Result<Tensor, GConvError> {
    transform_image_with(x, &grid_permutation(g, square_side(x)?))
}

pub(crate) fn square_side(x: &Tensor) -> Result<usize, GConvError> {
    let s = x.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(GConvError::ShapeMismatch(format!(
            "expected square [B, C, n, n] tensor, got {s:?}"
        )));
    }
    Ok(s[2])
}

pub(crate) fn transform_image_with(x: &Tensor, perm: &[usize]) -> Result<Tensor, GConvError> {
    let plane = perm.len();
    let mut out = Vec::with_capacity(x.len());
    for chunk in x.data().chunks(plane) {
        out.extend(perm.iter().map(|&p| chunk[p]));
    }
    Ok(Tensor::new(x.shape().to_vec(), out)?)
}

pub enum GInput<'a> {
    Image(&'a Tensor),
    Features(&'a FeatureMap),
}

/// `[f ⋆_G ψ]` computed as a standard convolution with the expanded kernel, in
/// the kernel's canonical channel layout (routes are not applied).
pub fn gconv_forward(layer: &GConvLayer, input: GInput<'_>) -> Result<FeatureMap, GConvError> {
    let kern = &layer.kernel;
    let x = match (input, kern.input) {
        (GInput::Image(x), KernelInput::Image) => x,
        (GInput::Features(f), KernelInput::Group) => {
            if f.group != kern.group || f.channels != kern.c_in {
                return Err(GConvError::GroupMismatch(format!(
                    "{} layer with {} inputs got {} channels over {}",
                    kern.group, kern.c_in, f.channels, f.group
                )));
            }
            &f.tensor
        }
        _ => {
            return Err(GConvError::GroupMismatch(
                "lifting layers take images, group layers take feature maps".into(),
            ))
        }
    };
    if x.shape().len() != 4 || x.shape()[1] != kern.expanded_in() {
        return Err(GConvError::ShapeMismatch(format!(
            "input {:?} does not carry {} channels",
            x.shape(),
            kern.expanded_in()
        )));
    }
    let mut filter_kernel = kern.clone();
    filter_kernel.weights.value = layer.effective_params()?;
    let filter = expand_kernel(&filter_kernel)?;
    let y = autodiff::conv2d_forward(x, &filter, 1, (kern.k - 1) / 2)?;
    FeatureMap::new(y, kern.group, kern.c_out)
}

/// Direct evaluation of `Σ_h Σ_c Σ_y f_c(h)(y) ψ_{d,c}((x,g)⁻¹(y,h))` by
/// coordinate arithmetic; the oracle for the expansion path. For lifting
/// kernels `input` must be the image as a `C1` feature map.
pub fn gconv_reference(kern: &GKernel, input: &FeatureMap) -> Result<FeatureMap, GConvError> {
    let g = kern.group;
    let (s_in, expected_group) = match kern.input {
        KernelInput::Image => (1, PointGroup::C1),
        KernelInput::Group => (g.order(), g),
    };
    if input.group != expected_group || input.channels != kern.c_in {
        return Err(GConvError::ShapeMismatch(format!(
            "reference conv expects {} channels over {expected_group}",
            kern.c_in
        )));
    }
    let sh = input.tensor.shape();
    let (b, h, w) = (sh[0], sh[2], sh[3]);
    let (k, r) = (kern.k as i64, (kern.k as i64 - 1) / 2);
    let psi = kern.params().data();
    let f = input.tensor.data();
    let order = g.order();
    let mut out = vec![0.0; b * kern.c_out * order * h * w];
    for bi in 0..b {
        for d in 0..kern.c_out {
            for (ti, &t) in g.elements().iter().enumerate() {
                let t_inv = t.inverse();
                for i in 0..h as i64 {
                    for j in 0..w as i64 {
                        let mut acc = 0.0;
                        for c in 0..kern.c_in {
                            for si in 0..s_in {
                                // group part of (x,t)⁻¹(y,s) is t⁻¹s
                                let gi = match kern.input {
                                    KernelInput::Image => 0,
                                    KernelInput::Group => g.idx(t_inv.product(g.elements()[si])),
                                };
                                for di in -r..=r {
                                    for dj in -r..=r {
                                        let (yi, yj) = (i + di, j + dj);
                                        if yi < 0 || yj < 0 || yi >= h as i64 || yj >= w as i64 {
                                            continue;
                                        }
                                        // spatial part t⁻¹(y − x), offset (dx, dy) = (dj, −di)
                                        let (px, py) = t_inv.apply_to_point((dj, -di));
                                        let (ki, kj) = (r - py, px + r);
                                        if ki < 0 || kj < 0 || ki >= k || kj >= k {
                                            continue;
                                        }
                                        let pv = psi[(((d * kern.c_in + c) * s_in + gi) * kern.k
                                            + ki as usize)
                                            * kern.k
                                            + kj as usize];
                                        let fv = f[(((bi * kern.c_in + c) * s_in + si) * h
                                            + yi as usize)
                                            * w
                                            + yj as usize];
                                        acc += fv * pv;
                                    }
                                }
                            }
                        }
                        out[(((bi * kern.c_out + d) * order + ti) * h + i as usize) * w
                            + j as usize] = acc;
                    }
                }
            }
        }
    }
    FeatureMap::new(
        Tensor::new(vec![b, kern.c_out * order, h, w], out)?,
        g,
        kern.c_out,
    )
}

/// Mean over the `|G|` group positions of each channel block.
pub fn group_pool(fm: &FeatureMap) -> Result<Tensor, GConvError> {
    let mut tape = Tape::new();
    let x = tape.constant(fm.tensor.clone());
    let y = tape.group_mean(x, fm.group.order())?;
    Ok(tape.value(y).clone())
}

/// A `[G]`-mixed layer: branches over different groups laid out in a common
/// physical basis, mixed by `z = softmax(logits)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedLayer {
    pub branches: Vec<GConvLayer>,
    pub logits: Parameter,
    pub e_out: usize,
    pub e_in: usize,
    pub k: usize,
}

impl MixedLayer {
    pub fn new(branches: Vec<GConvLayer>, logits: Parameter) -> Result<Self, GConvError> {
        let first = branches
            .first()
            .ok_or_else(|| GConvError::ShapeMismatch("mixed layer without branches".into()))?;
        let shape = first.kernel.expanded_shape();
        if branches.iter().any(|b| b.kernel.expanded_shape() != shape) {
            return Err(GConvError::ShapeMismatch(
                "branches expand to different filter shapes".into(),
            ));
        }
        if logits.value.shape() != [branches.len()] {
            return Err(GConvError::ShapeMismatch("one logit per branch".into()));
        }
        Ok(MixedLayer {
            e_out: shape[0],
            e_in: shape[1],
            k: shape[2],
            branches,
            logits,
        })
    }

    /// One branch per group, each He-initialised under a frozen weight norm,
    /// laid out in the `top`-regular physical basis; logits start at zero.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        groups: &[PointGroup],
        top: PointGroup,
        input: KernelInput,
        e_out: usize,
        e_in: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, GConvError> {
        let mut branches = Vec::with_capacity(groups.len());
        for &g in groups {
            branches.push(routed_layer(g, top, input, e_out, e_in, k, rng)?.with_weight_norm()?);
        }
        Self::new(branches, Parameter::new(Tensor::zeros(&[groups.len()])))
    }

    pub fn groups(&self) -> Vec<PointGroup> {
        self.branches.iter().map(GConvLayer::group).collect()
    }

    pub fn mix_weights(&self) -> Vec<f64> {
        softmax(self.logits.value.data())
    }

    /// `Σ_G z_G · expand(ψ^G)` in the physical basis.
    pub fn collapse(&self) -> Result<Tensor, GConvError> {
        let z = self.mix_weights();
        let mut acc = Tensor::zeros(&[self.e_out, self.e_in, self.k, self.k]);
        for (b, &zi) in self.branches.iter().zip(&z) {
            acc.add_assign(&b.physical_filter()?.scale(zi));
        }
        Ok(acc)
    }

    /// Single convolution with the collapsed filter.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor, GConvError> {
        Ok(autodiff::conv2d_forward(input, &self.collapse()?, 1, (self.k - 1) / 2)?)
    }

    /// Weighted sum of the per-branch convolutions.
    pub fn forward_branch_sum(&self, input: &Tensor) -> Result<Tensor, GConvError> {
        let z = self.mix_weights();
        let mut acc: Option<Tensor> = None;
        for (b, &zi) in self.branches.iter().zip(&z) {
            let y = autodiff::conv2d_forward(input, &b.physical_filter()?, 1, (self.k - 1) / 2)?
                .scale(zi);
            match acc.as_mut() {
                None => acc = Some(y),
                Some(a) => a.add_assign(&y),
            }
        }
        Ok(acc.expect("at least one branch"))
    }

    /// Records the collapsed filter; returns `(filter, logits leaf, ψ leaves)`.
    pub fn record(&self, tape: &mut Tape) -> Result<(Var, Var, Vec<Var>), GConvError> {
        let logits = tape.param(self.logits.value.clone());
        let z = tape.softmax(logits)?;
        let mut filters = Vec::with_capacity(self.branches.len());
        let mut leaves = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let (f, leaf) = b.record(tape)?;
            filters.push(f);
            leaves.push(leaf);
        }
        let w = tape.mix(z, &filters)?;
        Ok((w, logits, leaves))
    }

    pub fn param_count(&self) -> usize {
        self.branches.iter().map(GConvLayer::param_count).sum::<usize>() + self.logits.numel()
    }
}

/// `[G]`-mixed convolution; see [`MixedLayer::forward`].
pub fn mixed_forward(layer: &MixedLayer, input: &Tensor) -> Result<Tensor, GConvError> {
    layer.forward(input)
}

/// Single plain filter equivalent to the mixed layer.
pub fn collapse(layer: &MixedLayer) -> Result<Tensor, GConvError> {
    layer.collapse()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// He-initialised `group` layer of expanded widths `e_out × e_in` routed into
/// the `top`-regular physical layout.
pub fn routed_layer(
    group: PointGroup,
    top: PointGroup,
    input: KernelInput,
    e_out: usize,
    e_in: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<GConvLayer, GConvError> {
    let order = group.order();
    if !e_out.is_multiple_of(top.order()) || !group.is_subgroup_of(top) {
        return Err(GConvError::ShapeMismatch(format!(
            "{group} layer of width {e_out} cannot live in a {top} layout"
        )));
    }
    let c_in = match input {
        KernelInput::Image => e_in,
        KernelInput::Group => {
            if !e_in.is_multiple_of(top.order()) {
                return Err(GConvError::ShapeMismatch(format!(
                    "input width {e_in} not divisible by |{top}|"
                )));
            }
            e_in / order
        }
    };
    let kernel = GKernel::he_uniform(group, input, e_out / order, c_in, k, rng)?;
    let out_route = layout_route(group, top, e_out / top.order())?;
    let in_route = match input {
        KernelInput::Image => (0..e_in).collect(),
        KernelInput::Group => layout_route(group, top, e_in / top.order())?,
    };
    GConvLayer::with_routes(kernel, out_route, in_route)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groups::compose_representatives;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_layer(g: PointGroup, input: KernelInput, c_out: usize, c_in: usize, seed: u64) -> GConvLayer {
        GConvLayer::new(GKernel::he_uniform(g, input, c_out, c_in, 3, &mut rng(seed)).unwrap())
    }

    fn random_features(g: PointGroup, c: usize, n: usize, seed: u64) -> FeatureMap {
        let t = Tensor::uniform(&[2, c * g.order(), n, n], -1.0, 1.0, &mut rng(seed));
        FeatureMap::new(t, g, c).unwrap()
    }

    #[test]
    fn c1_expansion_is_identity() {
        let l = random_layer(PointGroup::C1, KernelInput::Group, 3, 2, 1);
        let e = expand_kernel(&l.kernel).unwrap();
        assert_eq!(e.shape(), &[3, 2, 3, 3]);
        assert_eq!(e.data(), l.kernel.params().data());
    }

    #[test]
    fn c4_expansion_blocks_are_rotated_copies() {
        let l = random_layer(PointGroup::C4, KernelInput::Group, 1, 1, 2);
        let e = expand_kernel(&l.kernel).unwrap();
        assert_eq!(e.shape(), &[4, 4, 3, 3]);
        let g = PointGroup::C4;
        let block = |t: usize, s: usize| &e.data()[(t * 4 + s) * 9..(t * 4 + s + 1) * 9];
        for (ti, &t) in g.elements().iter().enumerate() {
            let rot = act_on_grid(t, 3).unwrap();
            for (si, &s) in g.elements().iter().enumerate() {
                let base = block(0, g.idx(t.inverse().product(s)));
                let expected: Vec<f64> = rot.iter().map(|&q| base[q]).collect();
                assert_eq!(block(ti, si), expected.as_slice());
            }
        }
    }

    #[test]
    fn even_kernels_are_rejected() {
        let p = Tensor::zeros(&[1, 1, 4, 2, 2]);
        assert!(matches!(
            GKernel::new(PointGroup::C4, KernelInput::Group, 1, 1, 2, p),
            Err(GConvError::Group(GroupError::EvenKernel(2)))
        ));
    }

    #[test]
    fn reference_hand_computed_c2_pointwise_case() {
        // 1×1 kernel over C2: out(e) = ψ(e)f(e) + ψ(r²)f(r²), out(r²) = ψ(r²)f(e) + ψ(e)f(r²),
        // with f(r²) read at the spatial point itself (1×1 kernels ignore rotation).
        let params = Tensor::new(vec![1, 1, 2, 1, 1], vec![2.0, -3.0]).unwrap();
        let kern = GKernel::new(PointGroup::C2, KernelInput::Group, 1, 1, 1, params).unwrap();
        let f = Tensor::new(vec![1, 2, 1, 1], vec![5.0, 7.0]).unwrap();
        let fm = FeatureMap::new(f, PointGroup::C2, 1).unwrap();
        let out = gconv_reference(&kern, &fm).unwrap();
        assert_eq!(out.tensor.data(), &[2.0 * 5.0 - 3.0 * 7.0, -3.0 * 5.0 + 2.0 * 7.0]);
        let fast = gconv_forward(&GConvLayer::new(kern), GInput::Features(&fm)).unwrap();
        assert_eq!(fast.tensor.data(), out.tensor.data());
    }

    #[test]
    fn reference_delta_and_zero_kernels() {
        let g = PointGroup::D4;
        let mut p = Tensor::zeros(&[1, 1, 8, 3, 3]);
        p.data_mut()[4] = 1.0; // identity element, centre pixel
        let kern = GKernel::new(g, KernelInput::Group, 1, 1, 3, p).unwrap();
        let fm = random_features(g, 1, 4, 3);
        assert!(gconv_reference(&kern, &fm).unwrap().tensor.max_abs_diff(&fm.tensor) < 1e-15);
        let zero = GKernel::new(g, KernelInput::Group, 1, 1, 3, Tensor::zeros(&[1, 1, 8, 3, 3])).unwrap();
        assert_eq!(gconv_reference(&zero, &fm).unwrap().tensor.max_abs(), 0.0);
    }

    #[test]
    fn expansion_matches_reference_on_random_cases() {
        let mut case = 0;
        for g in PointGroup::ALL {
            for input in [KernelInput::Image, KernelInput::Group] {
                for seed in 0..2u64 {
                    case += 1;
                    let layer = random_layer(g, input, 2, 2, 100 + case);
                    let fm = match input {
                        KernelInput::Image => random_features(PointGroup::C1, 2, 5, seed),
                        KernelInput::Group => random_features(g, 2, 5, seed),
                    };
                    let fast = match input {
                        KernelInput::Image => gconv_forward(&layer, GInput::Image(&fm.tensor)),
                        KernelInput::Group => gconv_forward(&layer, GInput::Features(&fm)),
                    }
                    .unwrap();
                    let slow = gconv_reference(&layer.kernel, &fm).unwrap();
                    assert!(fast.tensor.max_abs_diff(&slow.tensor) < 1e-10, "{g} {input:?}");
                }
            }
        }
        assert!(case >= 20);
    }

    #[test]
    fn c1_layer_is_standard_convolution() {
        let layer = random_layer(PointGroup::C1, KernelInput::Group, 3, 2, 4);
        let fm = random_features(PointGroup::C1, 2, 6, 5);
        let y = gconv_forward(&layer, GInput::Features(&fm)).unwrap();
        let plain = autodiff::conv2d_forward(&fm.tensor, layer.kernel.params().clone().reshape(&[3, 2, 3, 3]).as_ref().unwrap(), 1, 1).unwrap();
        assert_eq!(y.tensor, plain);
    }

    #[test]
    fn lifting_is_equivariant_to_rotation() {
        let layer = random_layer(PointGroup::C4, KernelInput::Image, 2, 1, 6);
        let img = Tensor::uniform(&[1, 1, 6, 6], -1.0, 1.0, &mut rng(7));
        let y = gconv_forward(&layer, GInput::Image(&img)).unwrap();
        let rotated = transform_image(&img, GroupElement::R).unwrap();
        let y_rot = gconv_forward(&layer, GInput::Image(&rotated)).unwrap();
        let expected = y.transformed(GroupElement::R).unwrap();
        assert!(y_rot.tensor.max_abs_diff(&expected.tensor) < 1e-10);
    }

    #[test]
    fn group_layers_are_equivariant() {
        for g in PointGroup::ALL {
            let layer = random_layer(g, KernelInput::Group, 2, 2, 8);
            let fm = random_features(g, 2, 5, 9);
            let y = gconv_forward(&layer, GInput::Features(&fm)).unwrap();
            for &a in g.elements() {
                let ya = gconv_forward(&layer, GInput::Features(&fm.transformed(a).unwrap())).unwrap();
                let expected = y.transformed(a).unwrap();
                assert!(ya.tensor.max_abs_diff(&expected.tensor) < 1e-10, "{g} {a}");
            }
        }
    }

    #[test]
    fn relax_to_same_group_is_identity() {
        let l = random_layer(PointGroup::D4, KernelInput::Group, 2, 3, 10);
        assert_eq!(relax(&l, PointGroup::D4).unwrap(), l);
        let lift = random_layer(PointGroup::D4, KernelInput::Image, 2, 1, 11);
        assert_eq!(relax_lifting(&lift, PointGroup::D4).unwrap(), lift);
    }

    #[test]
    fn relaxed_kernel_shape() {
        let l = random_layer(PointGroup::C4, KernelInput::Group, 4, 3, 12);
        let r = relax(&l, PointGroup::C2).unwrap();
        assert_eq!(r.kernel.params().shape(), &[8, 6, 2, 3, 3]);
        let lift = random_layer(PointGroup::D4, KernelInput::Image, 2, 1, 13);
        let rl = relax_lifting(&lift, PointGroup::C1).unwrap();
        assert_eq!(rl.kernel.expanded_out(), 16);
        assert_eq!(rl.param_count(), 8 * lift.param_count());
    }

    #[test]
    fn relaxation_preserves_physical_filter_exactly() {
        for g in PointGroup::ALL {
            for h in PointGroup::ALL {
                if !h.is_subgroup_of(g) {
                    continue;
                }
                for input in [KernelInput::Image, KernelInput::Group] {
                    let l = random_layer(g, input, 2, 2, 14);
                    let r = l.relaxed(h).unwrap();
                    assert_eq!(r.physical_filter().unwrap(), l.physical_filter().unwrap());
                    assert_eq!(r.param_count(), l.param_count() * g.order() / h.order());
                }
            }
        }
    }

    #[test]
    fn relaxed_layer_reproduces_the_reshaped_output() {
        // [f̃ ⋆_G' ψ̃]_(d,t)(g') = [f ⋆_G ψ]_d(g't), with f̃_(c,s)(h') = f_c(h's)
        let (g, h) = (PointGroup::D4, PointGroup::C2);
        let l = random_layer(g, KernelInput::Group, 2, 2, 15);
        let fm = random_features(g, 2, 5, 16);
        let reps = coset_representatives(h, g).unwrap();
        let r = l.relaxed_with(&reps).unwrap();
        let nr = reps.len();
        let plane = 25;
        let mut relaxed_in = vec![0.0; fm.tensor.len()];
        let src = fm.tensor.data();
        for b in 0..2 {
            for c in 0..2 {
                for (si, &s) in reps.reps.iter().enumerate() {
                    for (hi, &hp) in h.elements().iter().enumerate() {
                        let from = ((b * 2 + c) * 8 + g.idx(hp.product(s))) * plane;
                        let to = ((b * 2 * nr + c * nr + si) * 2 + hi) * plane;
                        relaxed_in[to..to + plane].copy_from_slice(&src[from..from + plane]);
                    }
                }
            }
        }
        let fm_relaxed = FeatureMap::new(Tensor::new(fm.tensor.shape().to_vec(), relaxed_in).unwrap(), h, 2 * nr).unwrap();
        let y = gconv_forward(&l, GInput::Features(&fm)).unwrap();
        let yr = gconv_forward(&r, GInput::Features(&fm_relaxed)).unwrap();
        for b in 0..2 {
            for d in 0..2 {
                for (ti, &t) in reps.reps.iter().enumerate() {
                    for (gi, &gp) in h.elements().iter().enumerate() {
                        let a = ((b * 2 + d) * 8 + g.idx(gp.product(t))) * plane;
                        let c = ((b * 2 * nr + d * nr + ti) * 2 + gi) * plane;
                        for q in 0..plane {
                            let (u, v) = (y.tensor.data()[a + q], yr.tensor.data()[c + q]);
                            assert!((u - v).abs() < 1e-10);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn two_step_relaxation_equals_direct_with_composed_representatives() {
        let chains = [
            (PointGroup::D4, PointGroup::C4, PointGroup::C2),
            (PointGroup::D4, PointGroup::D2, PointGroup::C2),
            (PointGroup::D4, PointGroup::D2, PointGroup::D1),
            (PointGroup::C4, PointGroup::C2, PointGroup::C1),
            (PointGroup::D2, PointGroup::D1, PointGroup::C1),
        ];
        for (a, b, c) in chains {
            for input in [KernelInput::Image, KernelInput::Group] {
                let l = random_layer(a, input, 2, 2, 17);
                let two = l.relaxed(b).unwrap().relaxed(c).unwrap();
                let comp = compose_representatives(
                    &coset_representatives(c, b).unwrap(),
                    &coset_representatives(b, a).unwrap(),
                )
                .unwrap();
                let direct = l.relaxed_with(&comp).unwrap();
                assert_eq!(two, direct, "{a}->{b}->{c}");
                let canonical = l.relaxed(c).unwrap();
                assert_eq!(two.physical_filter().unwrap(), canonical.physical_filter().unwrap());
            }
        }
    }

    #[test]
    fn group_pool_examples() {
        let fm = random_features(PointGroup::C1, 3, 4, 18);
        assert_eq!(group_pool(&fm).unwrap(), fm.tensor);
        let c = FeatureMap::new(Tensor::filled(&[2, 16, 3, 3], 0.7), PointGroup::D4, 2).unwrap();
        assert!(group_pool(&c).unwrap().data().iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    fn mixed(seed: u64) -> MixedLayer {
        let mut r = rng(seed);
        let mut m = MixedLayer::init(&PointGroup::ALL, PointGroup::D4, KernelInput::Group, 16, 8, 3, &mut r).unwrap();
        m.logits.value = Tensor::uniform(&[6], -2.0, 2.0, &mut r);
        m
    }

    #[test]
    fn mixed_branch_sum_equals_collapsed_filter() {
        for seed in 0..5 {
            let m = mixed(seed);
            let z: f64 = m.mix_weights().iter().sum();
            assert!((z - 1.0).abs() < 1e-12);
            let x = Tensor::uniform(&[2, 8, 6, 6], -1.0, 1.0, &mut rng(seed + 50));
            let a = m.forward(&x).unwrap();
            let b = m.forward_branch_sum(&x).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-10);
        }
    }

    #[test]
    fn one_hot_mixture_is_the_pure_layer() {
        let mut m = mixed(3);
        m.logits.value = Tensor::new(vec![6], vec![-1e3, -1e3, -1e3, -1e3, 0.0, -1e3]).unwrap();
        let c4 = &m.branches[4];
        assert_eq!(c4.group(), PointGroup::C4);
        let pure = c4.physical_filter().unwrap();
        assert_eq!(m.collapse().unwrap(), pure);
        let mut sum_norm = 0.0;
        for (b, z) in m.branches.iter().zip(m.mix_weights()) {
            sum_norm += z * b.physical_filter().unwrap().norm();
        }
        assert!(m.collapse().unwrap().norm() <= sum_norm + 1e-12);
    }

    #[test]
    fn singleton_c1_mixture_is_ordinary_convolution() {
        let m = MixedLayer::init(&[PointGroup::C1], PointGroup::C1, KernelInput::Group, 4, 3, 3, &mut rng(4)).unwrap();
        assert_eq!(m.mix_weights(), vec![1.0]);
        let x = Tensor::uniform(&[1, 3, 5, 5], -1.0, 1.0, &mut rng(5));
        let w = m.branches[0].effective_params().unwrap().reshape(&[4, 3, 3, 3]).unwrap();
        assert!(m.forward(&x).unwrap().max_abs_diff(&autodiff::conv2d_forward(&x, &w, 1, 1).unwrap()) < 1e-14);
    }

    #[test]
    fn routed_branches_share_the_physical_representation() {
        // every branch is equivariant w.r.t. the D4-regular physical layout
        let m = mixed(6);
        let x = Tensor::uniform(&[1, 8, 5, 5], -1.0, 1.0, &mut rng(7));
        let fx = FeatureMap::new(x.clone(), PointGroup::D4, 1).unwrap();
        for b in &m.branches {
            let w = b.physical_filter().unwrap();
            let y = FeatureMap::new(autodiff::conv2d_forward(&x, &w, 1, 1).unwrap(), PointGroup::D4, 2).unwrap();
            for &a in b.group().elements() {
                let xa = fx.transformed(a).unwrap();
                let ya = autodiff::conv2d_forward(&xa.tensor, &w, 1, 1).unwrap();
                assert!(ya.max_abs_diff(&y.transformed(a).unwrap().tensor) < 1e-10, "{}", b.group());
            }
        }
    }

    #[test]
    fn parameter_count_law() {
        let e = 32;
        for g in PointGroup::ALL {
            let l = routed_layer(g, PointGroup::D4, KernelInput::Group, e, e, 3, &mut rng(8)).unwrap();
            assert_eq!(l.param_count(), e * e * 9 / g.order());
        }
    }
}
