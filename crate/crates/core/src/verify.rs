//! Self-check suites run by `equinas verify`. Each returns the largest
//! residual it saw against a fixed tolerance.

use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, AutodiffError, NormMode, Tape, Tensor, Var};
use crate::gconv::{
    gconv_forward, transform_image, FeatureMap, GConvError, GConvLayer, GInput, GKernel,
    KernelInput, MixedLayer,
};
use crate::groups::{coset_representatives, compose_representatives, regular_perm, GroupElement, PointGroup};
use crate::model::{build, BackboneSpec, ConvUnit, Mode, Network};

/// Spatial action applied to `[B, C, n, n]` tensors.
pub type SpatialAction = dyn Fn(&Tensor, GroupElement) -> Result<Tensor, GConvError> + Sync;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub pass: bool,
    pub max_residual: f64,
    pub tolerance: f64,
    pub seconds: f64,
    pub detail: String,
}

impl SuiteReport {
    fn new(name: &str, max_residual: f64, tolerance: f64, extra_ok: bool, start: Instant, detail: String) -> Self {
        SuiteReport {
            name: name.into(),
            pass: extra_ok && max_residual.is_finite() && max_residual < tolerance,
            max_residual,
            tolerance,
            seconds: start.elapsed().as_secs_f64(),
            detail,
        }
    }

    fn failed(name: &str, tolerance: f64, start: Instant, err: impl std::fmt::Display) -> Self {
        SuiteReport {
            name: name.into(),
            pass: false,
            max_residual: f64::INFINITY,
            tolerance,
            seconds: start.elapsed().as_secs_f64(),
            detail: err.to_string(),
        }
    }
}

type Res<T> = Result<T, Box<dyn std::error::Error>>;

fn toy_spec(mode: Mode, pools: Vec<usize>) -> BackboneSpec {
    BackboneSpec {
        n_conv_layers: 3,
        base_expanded_width: 8,
        widen_after: None,
        pool_after: pools,
        kernel_size: 3,
        in_channels: 1,
        n_classes: 10,
        head_hidden_width: 8,
        mode,
    }
}

fn pick<T: Copy>(rng: &mut impl Rng, v: &[T]) -> T {
    v[rng.gen_range(0..v.len())]
}

fn proper_subgroups(g: PointGroup) -> Vec<PointGroup> {
    PointGroup::ALL
        .into_iter()
        .filter(|&h| h != g && h.is_subgroup_of(g))
        .collect()
}

/// Random non-increasing genotype of length 3 with at least one relaxable layer.
fn random_triple(rng: &mut impl Rng) -> (Vec<PointGroup>, usize, PointGroup) {
    loop {
        let mut g = vec![pick(rng, &PointGroup::ALL)];
        for _ in 1..3 {
            let last = *g.last().unwrap();
            let subs: Vec<PointGroup> = PointGroup::ALL.into_iter().filter(|h| h.is_subgroup_of(last)).collect();
            g.push(pick(rng, &subs));
        }
        let moves: Vec<(usize, PointGroup)> = (0..3)
            .flat_map(|l| {
                let next = g.get(l + 1).copied();
                proper_subgroups(g[l])
                    .into_iter()
                    .filter(move |&h| next.is_none_or(|n| n.is_subgroup_of(h)))
                    .map(move |h| (l, h))
            })
            .collect();
        if !moves.is_empty() {
            let (l, h) = pick(rng, &moves);
            return (g, l, h);
        }
    }
}

/// Relaxation keeps end-to-end logits; two-step relaxation equals the
/// direct one with composed representatives.
pub fn morphism_suite(seed: u64, trials: usize) -> SuiteReport {
    let start = Instant::now();
    let tol = 1e-9;
    let run = || -> Res<(f64, usize, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        let (mut chains, mut mismatches) = (0, 0);
        for t in 0..trials {
            let (geno, l, h) = random_triple(&mut rng);
            let net = build(&toy_spec(Mode::Static(geno.clone()), vec![1, 2]), seed ^ t as u64)?;
            let x = Tensor::uniform(&[3, 1, 12, 12], -1.0, 1.0, &mut rng);
            let before = net.logits(&x)?;
            let relaxed = net.relax_layer(l, h)?;
            worst = worst.max(relaxed.logits(&x)?.max_abs_diff(&before));
            let mids: Vec<PointGroup> = proper_subgroups(geno[l])
                .into_iter()
                .filter(|&m| m != h && h.is_subgroup_of(m))
                .collect();
            if let (Some(&m), ConvUnit::Static(layer)) = (mids.first(), &net.convs[l]) {
                chains += 1;
                let two = layer.relaxed(m)?.relaxed(h)?;
                let reps = compose_representatives(&coset_representatives(h, m)?, &coset_representatives(m, geno[l])?)?;
                if two != layer.relaxed_with(&reps)? {
                    mismatches += 1;
                }
                let two_net = net.relax_layer(l, m)?.relax_layer(l, h)?;
                worst = worst.max(two_net.logits(&x)?.max_abs_diff(&before));
            }
        }
        Ok((worst, chains, mismatches))
    };
    match run() {
        Ok((worst, chains, mismatches)) => SuiteReport::new(
            "morphism",
            worst,
            tol,
            mismatches == 0,
            start,
            format!("{trials} relaxations, {chains} two-step chains, {mismatches} mismatches"),
        ),
        Err(e) => SuiteReport::failed("morphism", tol, start, e),
    }
}

fn transform_features(fm: &FeatureMap, g: GroupElement, action: &SpatialAction) -> Res<FeatureMap> {
    let perm = regular_perm(g, fm.group)?;
    let moved = action(&fm.tensor, g)?;
    let s = moved.shape().to_vec();
    let (order, plane) = (fm.group.order(), s[2] * s[3]);
    let src = moved.data();
    let mut out = vec![0.0; src.len()];
    for block in 0..s[0] * fm.channels {
        for (si, &to) in perm.iter().enumerate() {
            let a = (block * order + si) * plane;
            let b = (block * order + to) * plane;
            out[b..b + plane].copy_from_slice(&src[a..a + plane]);
        }
    }
    Ok(FeatureMap::new(Tensor::new(s, out)?, fm.group, fm.channels)?)
}

fn relu_fm(fm: FeatureMap) -> FeatureMap {
    let mut t = fm.tensor;
    t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    FeatureMap { tensor: t, ..fm }
}

fn stack_forward(layers: &[GConvLayer], x: &Tensor) -> Res<FeatureMap> {
    let mut fm = gconv_forward(&layers[0], GInput::Image(x))?;
    for l in &layers[1..] {
        fm = gconv_forward(l, GInput::Features(&relu_fm(fm)))?;
    }
    Ok(fm)
}

/// `h(g·x) = g·h(x)` on three-layer group-conv stacks and eval-mode logit
/// invariance of full networks, for every element of every group.
pub fn equivariance_suite_with(seed: u64, action: &SpatialAction) -> SuiteReport {
    let start = Instant::now();
    let (tol_stack, tol_logits) = (1e-9, 1e-6);
    let run = || -> Res<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut stack_worst, mut logit_worst): (f64, f64) = (0.0, 0.0);
        for g in PointGroup::ALL {
            let layers = vec![
                GConvLayer::new(GKernel::he_uniform(g, KernelInput::Image, 2, 1, 3, &mut rng)?),
                GConvLayer::new(GKernel::he_uniform(g, KernelInput::Group, 2, 2, 3, &mut rng)?),
                GConvLayer::new(GKernel::he_uniform(g, KernelInput::Group, 3, 2, 3, &mut rng)?),
            ];
            let x = Tensor::uniform(&[2, 1, 9, 9], -1.0, 1.0, &mut rng);
            let base = stack_forward(&layers, &x)?;
            let net = build(&toy_spec(BackboneSpec::uniform(g, 3), vec![1, 2]), rng.gen())?;
            let xi = Tensor::uniform(&[2, 1, 16, 16], -1.0, 1.0, &mut rng);
            let logits = net.logits(&xi)?;
            for &e in g.elements() {
                let lhs = stack_forward(&layers, &action(&x, e)?)?;
                let rhs = transform_features(&base, e, action)?;
                stack_worst = stack_worst.max(lhs.tensor.max_abs_diff(&rhs.tensor));
                logit_worst = logit_worst.max(net.logits(&action(&xi, e)?)?.max_abs_diff(&logits));
            }
        }
        Ok((stack_worst, logit_worst))
    };
    match run() {
        Ok((s, l)) => SuiteReport::new(
            "equivariance",
            // report relative to each tolerance so one number covers both
            (s / tol_stack).max(l / tol_logits) * tol_stack,
            tol_stack,
            true,
            start,
            format!("stack residual {s:.3e} (tol {tol_stack:e}), logit residual {l:.3e} (tol {tol_logits:e})"),
        ),
        Err(e) => SuiteReport::failed("equivariance", tol_stack, start, e),
    }
}

pub fn equivariance_suite(seed: u64) -> SuiteReport {
    equivariance_suite_with(seed, &transform_image)
}

fn randomize_logits(net: &mut Network, rng: &mut impl Rng) {
    for u in net.convs.iter_mut() {
        if let ConvUnit::Mixed(m) = u {
            m.logits.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
        }
    }
}

/// Weighted branch outputs equal the output of the collapsed filter.
pub fn mixed_collapse_suite(seed: u64, layers: usize) -> SuiteReport {
    let start = Instant::now();
    let (tol_layer, tol_net) = (1e-10, 1e-9);
    let run = || -> Res<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..layers {
            let input = if rng.gen_bool(0.5) { KernelInput::Image } else { KernelInput::Group };
            let e_out = 8 * rng.gen_range(1..3);
            let e_in = match input {
                KernelInput::Image => rng.gen_range(1..3),
                KernelInput::Group => 8 * rng.gen_range(1..3),
            };
            let mut m = MixedLayer::init(&PointGroup::ALL, PointGroup::D4, input, e_out, e_in, 3, &mut rng)?;
            m.logits.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
            let x = Tensor::uniform(&[2, e_in, 7, 7], -1.0, 1.0, &mut rng);
            worst = worst.max(m.forward_branch_sum(&x)?.max_abs_diff(&m.forward(&x)?));
        }
        let mut net = build(&toy_spec(Mode::Mixed(PointGroup::ALL.to_vec()), vec![1, 2]), seed)?;
        randomize_logits(&mut net, &mut rng);
        let x = Tensor::uniform(&[2, 1, 12, 12], -1.0, 1.0, &mut rng);
        let net_res = net.collapsed()?.logits(&x)?.max_abs_diff(&net.logits(&x)?);
        Ok((worst, net_res))
    };
    match run() {
        Ok((lw, nw)) => SuiteReport::new(
            "mixed_collapse",
            lw,
            tol_layer,
            nw < tol_net,
            start,
            format!("{layers} layers, network residual {nw:.3e} (tol {tol_net:e})"),
        ),
        Err(e) => SuiteReport::failed("mixed_collapse", tol_layer, start, e),
    }
}

/// Layer parameters scale as `1/|G|` at fixed expanded width.
pub fn param_law_suite() -> SuiteReport {
    let start = Instant::now();
    let run = || -> Res<(f64, bool)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = 32;
        let count = |g: PointGroup, rng: &mut ChaCha8Rng| -> Res<usize> {
            Ok(GKernel::he_uniform(g, KernelInput::Group, e / g.order(), e / g.order(), 3, rng)?.param_count())
        };
        let d4 = count(PointGroup::D4, &mut rng)?;
        let c4 = count(PointGroup::C4, &mut rng)?;
        let mut worst: f64 = 0.0;
        for g in PointGroup::ALL {
            let ratio = count(g, &mut rng)? as f64 / d4 as f64;
            worst = worst.max((ratio - 8.0 / g.order() as f64).abs());
        }
        Ok((worst, c4 == 2 * d4))
    };
    match run() {
        Ok((w, doubling)) => SuiteReport::new(
            "param_law",
            w,
            f64::EPSILON,
            doubling,
            start,
            format!("C4 = 2 x D4: {doubling}"),
        ),
        Err(e) => SuiteReport::failed("param_law", f64::EPSILON, start, e),
    }
}

fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> Result<Var, AutodiffError> {
    let shape = t.value(y).shape().to_vec();
    let w = t.constant(Tensor::uniform(&shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)));
    let p = t.mul(y, w)?;
    t.sum(p)
}

type Check<'a> = (&'static str, Box<dyn Fn(&mut Tape, Var) -> Result<Var, AutodiffError> + 'a>, Tensor);

/// Central-difference checks for every tape op and a two-layer group-conv loss.
pub fn gradient_suite(seed: u64) -> SuiteReport {
    let start = Instant::now();
    let tol = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |shape: &[usize]| Tensor::uniform(shape, -1.0, 1.0, &mut rng);
    let x4 = u(&[2, 2, 5, 5]);
    let w4 = u(&[3, 2, 3, 3]);
    let bn_x = u(&[3, 4, 2, 2]);
    let pool_x = u(&[2, 4, 4, 4]);
    let dense_x = u(&[2, 3]);
    let dense_w = u(&[4, 3]);
    let vec6 = u(&[6]);
    let img = u(&[2, 1, 7, 7]);
    let lift = GKernel::he_uniform(PointGroup::C4, KernelInput::Image, 1, 1, 3, &mut rng).unwrap();
    let group = GKernel::he_uniform(PointGroup::C4, KernelInput::Group, 3, 1, 3, &mut rng).unwrap();
    let (l1, l2) = (GConvLayer::new(lift.clone()), GConvLayer::new(group.clone()));
    let idx = Rc::<[usize]>::from(vec![5, 0, 0, 3, 2, 1, 4, 4]);
    let gconv_loss = |t: &mut Tape, p1: Var, p2: Option<Var>| -> Result<Var, AutodiffError> {
        let i1: Rc<[usize]> = l1.physical_index().expect("index").into();
        let i2: Rc<[usize]> = l2.physical_index().expect("index").into();
        let f1 = t.gather(p1, i1, &l1.kernel.expanded_shape())?;
        let p2 = match p2 {
            Some(v) => v,
            None => t.constant(group.params().clone()),
        };
        let f2 = t.gather(p2, i2, &l2.kernel.expanded_shape())?;
        let x = t.constant(img.clone());
        let h = t.conv2d(x, f1, 1, 1)?;
        let h = t.relu(h)?;
        let h = t.conv2d(h, f2, 1, 1)?;
        let h = t.global_avg_pool(h)?;
        let h = t.group_mean(h, 4)?;
        t.softmax_cross_entropy(h, &[2, 0])
    };
    let checks: Vec<Check> = vec![
        ("conv2d/x", Box::new(|t, x| { let w = t.constant(w4.clone()); let y = t.conv2d(x, w, 1, 1)?; weighted_sum(t, y, 1) }), x4.clone()),
        ("conv2d/w", Box::new(|t, w| { let x = t.constant(x4.clone()); let y = t.conv2d(x, w, 2, 1)?; weighted_sum(t, y, 2) }), w4.clone()),
        ("relu", Box::new(|t, x| { let y = t.relu(x)?; weighted_sum(t, y, 3) }), x4.clone()),
        ("batch_norm/batch", Box::new(|t, x| {
            let g = t.constant(Tensor::new(vec![2], vec![1.3, 0.7])?);
            let b = t.constant(Tensor::new(vec![2], vec![0.1, -0.2])?);
            let (y, _) = t.batch_norm(x, g, b, 2, 1e-5, NormMode::Batch)?;
            weighted_sum(t, y, 4)
        }), bn_x.clone()),
        ("batch_norm/running", Box::new(|t, x| {
            let g = t.constant(Tensor::new(vec![2], vec![1.3, 0.7])?);
            let b = t.constant(Tensor::zeros(&[2]));
            let (y, _) = t.batch_norm(x, g, b, 2, 1e-5, NormMode::Running { mean: &[0.1, -0.3], var: &[1.2, 0.8] })?;
            weighted_sum(t, y, 5)
        }), bn_x.clone()),
        ("batch_norm/gamma", Box::new(|t, g| {
            let x = t.constant(bn_x.clone());
            let b = t.constant(Tensor::zeros(&[2]));
            let (y, _) = t.batch_norm(x, g, b, 2, 1e-5, NormMode::Batch)?;
            weighted_sum(t, y, 6)
        }), Tensor::new(vec![2], vec![1.3, 0.7]).unwrap()),
        ("avg_pool2", Box::new(|t, x| { let y = t.avg_pool2(x)?; weighted_sum(t, y, 7) }), pool_x.clone()),
        ("global_avg_pool", Box::new(|t, x| { let y = t.global_avg_pool(x)?; weighted_sum(t, y, 8) }), pool_x.clone()),
        ("group_mean", Box::new(|t, x| { let y = t.global_avg_pool(x)?; let y = t.group_mean(y, 2)?; weighted_sum(t, y, 9) }), pool_x.clone()),
        ("dense/x", Box::new(|t, x| { let w = t.constant(dense_w.clone()); let b = t.constant(Tensor::zeros(&[4])); let y = t.dense(x, w, b)?; weighted_sum(t, y, 10) }), dense_x.clone()),
        ("dense/w", Box::new(|t, w| { let x = t.constant(dense_x.clone()); let b = t.constant(Tensor::zeros(&[4])); let y = t.dense(x, w, b)?; weighted_sum(t, y, 11) }), dense_w.clone()),
        ("softmax_cross_entropy", Box::new(|t, x| t.softmax_cross_entropy(x, &[1, 0])), dense_x.clone()),
        ("gather", Box::new(|t, v| { let y = t.gather(v, idx.clone(), &[2, 4])?; weighted_sum(t, y, 12) }), vec6.clone()),
        ("softmax", Box::new(|t, v| { let y = t.softmax(v)?; weighted_sum(t, y, 13) }), vec6.clone()),
        ("mix", Box::new(|t, z| {
            let a = t.constant(Tensor::new(vec![2], vec![0.5, -1.0])?);
            let b = t.constant(Tensor::new(vec![2], vec![2.0, 0.25])?);
            let c = t.mul(a, b)?;
            let m = t.mix(z, &[a, b, c])?;
            t.sum_squares(m)
        }), Tensor::new(vec![3], vec![0.2, 0.5, 0.3]).unwrap()),
        ("weight_norm", Box::new(|t, v| { let y = t.weight_norm(v, 2.5)?; weighted_sum(t, y, 14) }), vec6.clone()),
        ("add/scale/mul/sum", Box::new(|t, v| { let a = t.add(v, v)?; let b = t.scale(a, 0.3)?; let c = t.mul(b, v)?; t.sum(c) }), vec6.clone()),
        ("sum_squares", Box::new(|t, v| t.sum_squares(v)), vec6.clone()),
        ("gconv2/lifting", Box::new(|t, p| gconv_loss(t, p, None)), lift.params().clone()),
        ("gconv2/group", Box::new(|t, p| { let p1 = t.constant(lift.params().clone()); gconv_loss(t, p1, Some(p)) }), group.params().clone()),
    ];
    let mut worst: f64 = 0.0;
    let mut worst_name = "";
    for (name, f, point) in &checks {
        match grad_check(f.as_ref(), point) {
            Ok(e) if e > worst => {
                worst = e;
                worst_name = name;
            }
            Ok(_) => {}
            Err(e) => return SuiteReport::failed("gradients", tol, start, format!("{name}: {e}")),
        }
    }
    SuiteReport::new(
        "gradients",
        worst,
        tol,
        true,
        start,
        format!("{} checks, worst {worst_name}", checks.len()),
    )
}

pub fn run_all(seed: u64) -> Vec<SuiteReport> {
    vec![
        morphism_suite(seed, 20),
        equivariance_suite(seed),
        mixed_collapse_suite(seed, 20),
        param_law_suite(),
        gradient_suite(seed),
    ]
}
