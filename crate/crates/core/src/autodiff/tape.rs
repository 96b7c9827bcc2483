//! Reverse-mode tape. Every op validates its output, records a backward
//! closure, and returns a [`Var`] handle.

use std::rc::Rc;

use super::conv::{conv2d_backward, conv2d_forward_geom, gemm, ConvGeometry};
use super::{AutodiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

type Backward = Box<dyn Fn(&[Tensor], &[f64], &mut GradSink)>;

#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    requires: Vec<bool>,
    backward: Vec<Option<Backward>>,
}

/// Accumulator handed to backward closures.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    requires: &'a [bool],
    lens: &'a [usize],
}

impl GradSink<'_> {
    pub fn wants(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Runs `f` on the (zero-initialised on first use) gradient buffer of `v`.
    pub fn with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.requires[v.0] {
            return;
        }
        let len = self.lens[v.0];
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(buf);
    }

    pub fn add(&mut self, v: Var, g: &[f64]) {
        self.with(v, |buf| {
            for (a, b) in buf.iter_mut().zip(g) {
                *a += b;
            }
        });
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros if `v` did not influence it.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(self.shapes[v.0].clone(), g.clone()),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn slice(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

/// Batch statistics returned by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running averages.
    pub var: Vec<f64>,
}

pub enum NormMode<'a> {
    Batch,
    Running { mean: &'a [f64], var: &'a [f64] },
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    fn push(
        &mut self,
        value: Tensor,
        requires: bool,
        backward: Option<Backward>,
        op: &'static str,
    ) -> Result<Var, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite(op));
        }
        self.values.push(value);
        self.requires.push(requires);
        self.backward.push(if requires { backward } else { None });
        Ok(Var(self.values.len() - 1))
    }

    fn req(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires[v.0])
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.values.push(value);
        self.requires.push(true);
        self.backward.push(None);
        Var(self.values.len() - 1)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.values.push(value);
        self.requires.push(false);
        self.backward.push(None);
        Var(self.values.len() - 1)
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        if self.values[loss.0].len() != 1 {
            return Err(AutodiffError::ShapeMismatch(
                "backward needs a scalar loss".into(),
            ));
        }
        let lens: Vec<usize> = self.values.iter().map(Tensor::len).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(back) = &self.backward[i] else {
                continue;
            };
            let Some(dy) = grads[i].take() else {
                continue;
            };
            let mut sink = GradSink {
                grads: &mut grads,
                requires: &self.requires,
                lens: &lens,
            };
            back(&self.values, &dy, &mut sink);
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(AutodiffError::NonFinite("backward"));
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.values.iter().map(|t| t.shape().to_vec()).collect(),
        })
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, AutodiffError> {
        let g = ConvGeometry::new(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        let out = conv2d_forward_geom(&g, self.value(x).data(), self.value(w).data());
        let back: Backward = Box::new(move |vals, dy, sink| {
            let (dx, dw) = conv2d_backward(
                &g,
                vals[x.0].data(),
                vals[w.0].data(),
                dy,
                sink.wants(x),
                sink.wants(w),
            );
            if let Some(dx) = dx {
                sink.add(x, &dx);
            }
            if let Some(dw) = dw {
                sink.add(w, &dw);
            }
        });
        let r = self.req(&[x, w]);
        self.push(out, r, Some(back), "conv2d")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let v = self.value(x);
        let out = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().map(|&a| a.max(0.0)).collect(),
        );
        let back: Backward = Box::new(move |vals, dy, sink| {
            let xv = vals[x.0].data();
            sink.with(x, |g| {
                for ((g, &d), &a) in g.iter_mut().zip(dy).zip(xv) {
                    if a > 0.0 {
                        *g += d;
                    }
                }
            });
        });
        let r = self.req(&[x]);
        self.push(out, r, Some(back), "relu")
    }

    /// Batch norm over `[B, C, ...]` where statistics and the affine map are
    /// shared by blocks of `group` consecutive channels.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        group: usize,
        eps: f64,
        mode: NormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>), AutodiffError> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 || group == 0 || !shape[1].is_multiple_of(group) {
            return Err(AutodiffError::ShapeMismatch(format!(
                "batch_norm over {shape:?} with channel group {group}"
            )));
        }
        let (b, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let blocks = c / group;
        if self.value(gamma).len() != blocks || self.value(beta).len() != blocks {
            return Err(AutodiffError::ShapeMismatch(format!(
                "batch_norm affine needs {blocks} entries"
            )));
        }
        let block_of = move |i: usize| (i / spatial) % c / group;
        let n = (b * group * spatial) as f64;
        let xv = self.value(x).data();
        let (mean, var_biased, stats) = match mode {
            NormMode::Batch => {
                let mut mean = vec![0.0; blocks];
                for (i, v) in xv.iter().enumerate() {
                    mean[block_of(i)] += v;
                }
                mean.iter_mut().for_each(|m| *m /= n);
                let mut var = vec![0.0; blocks];
                for (i, v) in xv.iter().enumerate() {
                    let d = v - mean[block_of(i)];
                    var[block_of(i)] += d * d;
                }
                var.iter_mut().for_each(|s| *s /= n);
                let unbiased = var
                    .iter()
                    .map(|s| if n > 1.0 { s * n / (n - 1.0) } else { *s })
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            NormMode::Running { mean, var } => {
                if mean.len() != blocks || var.len() != blocks {
                    return Err(AutodiffError::ShapeMismatch(
                        "running statistics length".into(),
                    ));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let batch_mode = stats.is_some();
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let xhat: Vec<f64> = xv
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean[block_of(i)]) * inv_std[block_of(i)])
            .collect();
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, h)| gv[block_of(i)] * h + bv[block_of(i)])
            .collect();
        let back: Backward = Box::new(move |vals, dy, sink| {
            let gv = vals[gamma.0].data();
            let mut sum_dy = vec![0.0; blocks];
            let mut sum_dy_xhat = vec![0.0; blocks];
            for (i, (&d, &h)) in dy.iter().zip(&xhat).enumerate() {
                sum_dy[block_of(i)] += d;
                sum_dy_xhat[block_of(i)] += d * h;
            }
            sink.add(gamma, &sum_dy_xhat);
            sink.add(beta, &sum_dy);
            sink.with(x, |g| {
                for (i, gi) in g.iter_mut().enumerate() {
                    let j = block_of(i);
                    let scale = gv[j] * inv_std[j];
                    *gi += if batch_mode {
                        scale * (dy[i] - sum_dy[j] / n - xhat[i] * sum_dy_xhat[j] / n)
                    } else {
                        scale * dy[i]
                    };
                }
            });
        });
        let r = self.req(&[x, gamma, beta]);
        let v = self.push(Tensor::from_parts(shape, out), r, Some(back), "batch_norm")?;
        Ok((v, stats))
    }

    /// 2×2 average pooling with stride 2 (trailing odd rows/columns dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 || shape[2] < 2 || shape[3] < 2 {
            return Err(AutodiffError::ShapeMismatch(format!("avg_pool2 on {shape:?}")));
        }
        let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            for i in 0..ho {
                for j in 0..wo {
                    let base = p * h * w + 2 * i * w + 2 * j;
                    out[(p * ho + i) * wo + j] =
                        0.25 * (xv[base] + xv[base + 1] + xv[base + w] + xv[base + w + 1]);
                }
            }
        }
        let back: Backward = Box::new(move |_, dy, sink| {
            sink.with(x, |g| {
                for p in 0..planes {
                    for i in 0..ho {
                        for j in 0..wo {
                            let d = 0.25 * dy[(p * ho + i) * wo + j];
                            let base = p * h * w + 2 * i * w + 2 * j;
                            g[base] += d;
                            g[base + 1] += d;
                            g[base + w] += d;
                            g[base + w + 1] += d;
                        }
                    }
                }
            });
        });
        let r = self.req(&[x]);
        self.push(
            Tensor::from_parts(vec![shape[0], shape[1], ho, wo], out),
            r,
            Some(back),
            "avg_pool2",
        )
    }

    /// Mean over all spatial positions: `[B, C, H, W] → [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "global_avg_pool on {shape:?}"
            )));
        }
        let hw = shape[2] * shape[3];
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let back: Backward = Box::new(move |_, dy, sink| {
            sink.with(x, |g| {
                for (chunk, &d) in g.chunks_mut(hw).zip(dy) {
                    chunk.iter_mut().for_each(|v| *v += d / hw as f64);
                }
            });
        });
        let r = self.req(&[x]);
        self.push(
            Tensor::from_parts(vec![shape[0], shape[1]], out),
            r,
            Some(back),
            "global_avg_pool",
        )
    }

    /// Mean over blocks of `size` consecutive channels along axis 1.
    pub fn group_mean(&mut self, x: Var, size: usize) -> Result<Var, AutodiffError> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 || size == 0 || !shape[1].is_multiple_of(size) {
            return Err(AutodiffError::ShapeMismatch(format!(
                "group_mean of {shape:?} by {size}"
            )));
        }
        let rest: usize = shape[2..].iter().product();
        let (b, c) = (shape[0], shape[1]);
        let co = c / size;
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * co * rest];
        for bi in 0..b {
            for ch in 0..c {
                let src = &xv[(bi * c + ch) * rest..][..rest];
                let dst = &mut out[(bi * co + ch / size) * rest..][..rest];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s / size as f64;
                }
            }
        }
        let back: Backward = Box::new(move |_, dy, sink| {
            sink.with(x, |g| {
                for bi in 0..b {
                    for ch in 0..c {
                        let src = &dy[(bi * co + ch / size) * rest..][..rest];
                        let dst = &mut g[(bi * c + ch) * rest..][..rest];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s / size as f64;
                        }
                    }
                }
            });
        });
        let mut oshape = shape.clone();
        oshape[1] = co;
        let r = self.req(&[x]);
        self.push(Tensor::from_parts(oshape, out), r, Some(back), "group_mean")
    }

    /// `y = x · wᵀ + b` for `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.value(b).len() != ws[0] {
            return Err(AutodiffError::ShapeMismatch(format!(
                "dense with input {xs:?} and weight {ws:?}"
            )));
        }
        let (batch, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out: Vec<f64> = (0..batch)
            .flat_map(|_| self.value(b).data().iter().copied())
            .collect();
        gemm(
            batch,
            fin,
            fout,
            self.value(x).data(),
            (fin as isize, 1),
            self.value(w).data(),
            (1, fin as isize),
            1.0,
            &mut out,
        );
        let back: Backward = Box::new(move |vals, dy, sink| {
            if sink.wants(x) {
                let mut dx = vec![0.0; batch * fin];
                gemm(
                    batch,
                    fout,
                    fin,
                    dy,
                    (fout as isize, 1),
                    vals[w.0].data(),
                    (fin as isize, 1),
                    0.0,
                    &mut dx,
                );
                sink.add(x, &dx);
            }
            if sink.wants(w) {
                let mut dw = vec![0.0; fout * fin];
                gemm(
                    fout,
                    batch,
                    fin,
                    dy,
                    (1, fout as isize),
                    vals[x.0].data(),
                    (fin as isize, 1),
                    0.0,
                    &mut dw,
                );
                sink.add(w, &dw);
            }
            sink.with(b, |g| {
                for row in dy.chunks(fout) {
                    for (gi, d) in g.iter_mut().zip(row) {
                        *gi += d;
                    }
                }
            });
        });
        let r = self.req(&[x, w, b]);
        self.push(
            Tensor::from_parts(vec![batch, fout], out),
            r,
            Some(back),
            "dense",
        )
    }

    /// Mean softmax cross-entropy of `logits: [B, n]` against class labels.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
    ) -> Result<Var, AutodiffError> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || labels.iter().any(|&l| l >= shape[1]) {
            return Err(AutodiffError::ShapeMismatch(format!(
                "cross entropy of {shape:?} against {} labels",
                labels.len()
            )));
        }
        let (b, n) = (shape[0], shape[1]);
        let mut probs = vec![0.0; b * n];
        let mut loss = 0.0;
        for (i, row) in self.value(logits).data().chunks(n).enumerate() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for (p, v) in probs[i * n..(i + 1) * n].iter_mut().zip(row) {
                *p = (v - mx).exp() / z;
            }
            loss += mx + z.ln() - row[labels[i]];
        }
        loss /= b as f64;
        let labels = labels.to_vec();
        let back: Backward = Box::new(move |_, dy, sink| {
            let s = dy[0] / b as f64;
            sink.with(logits, |g| {
                for (i, &l) in labels.iter().enumerate() {
                    for j in 0..n {
                        let onehot = if j == l { 1.0 } else { 0.0 };
                        g[i * n + j] += s * (probs[i * n + j] - onehot);
                    }
                }
            });
        });
        let r = self.req(&[logits]);
        self.push(Tensor::scalar(loss), r, Some(back), "softmax_cross_entropy")
    }

    /// `out[i] = src[index[i]]`, reshaped to `shape`.
    pub fn gather(
        &mut self,
        src: Var,
        index: Rc<[usize]>,
        shape: &[usize],
    ) -> Result<Var, AutodiffError> {
        let n = self.value(src).len();
        if index.len() != shape.iter().product::<usize>() || index.iter().any(|&i| i >= n) {
            return Err(AutodiffError::ShapeMismatch("gather index out of range".into()));
        }
        let out = self.value(src).gather(&index, shape);
        let back: Backward = Box::new(move |_, dy, sink| {
            sink.with(src, |g| {
                for (&i, d) in index.iter().zip(dy) {
                    g[i] += d;
                }
            });
        });
        let r = self.req(&[src]);
        self.push(out, r, Some(back), "gather")
    }

    /// Softmax of a 1-d tensor.
    pub fn softmax(&mut self, v: Var) -> Result<Var, AutodiffError> {
        let data = self.value(v).data();
        let mx = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = data.iter().map(|x| (x - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|x| x / z).collect();
        let pc = p.clone();
        let back: Backward = Box::new(move |_, dy, sink| {
            let dot: f64 = pc.iter().zip(dy).map(|(a, b)| a * b).sum();
            sink.with(v, |g| {
                for ((gi, &pi), &d) in g.iter_mut().zip(&pc).zip(dy) {
                    *gi += pi * (d - dot);
                }
            });
        });
        let r = self.req(&[v]);
        let shape = self.value(v).shape().to_vec();
        self.push(Tensor::from_parts(shape, p), r, Some(back), "softmax")
    }

    /// `Σ_i weights[i] · parts[i]` for a 1-d `weights` tensor.
    pub fn mix(&mut self, weights: Var, parts: &[Var]) -> Result<Var, AutodiffError> {
        if self.value(weights).len() != parts.len() || parts.is_empty() {
            return Err(AutodiffError::ShapeMismatch("mix weight count".into()));
        }
        let shape = self.value(parts[0]).shape().to_vec();
        if parts.iter().any(|&p| self.value(p).shape() != shape.as_slice()) {
            return Err(AutodiffError::ShapeMismatch("mix part shapes differ".into()));
        }
        let z = self.value(weights).data().to_vec();
        let mut out = vec![0.0; self.value(parts[0]).len()];
        for (&p, &zi) in parts.iter().zip(&z) {
            for (o, v) in out.iter_mut().zip(self.value(p).data()) {
                *o += zi * v;
            }
        }
        let parts_owned = parts.to_vec();
        let back: Backward = Box::new(move |vals, dy, sink| {
            let z = vals[weights.0].data();
            let dz: Vec<f64> = parts_owned
                .iter()
                .map(|p| vals[p.0].data().iter().zip(dy).map(|(a, b)| a * b).sum())
                .collect();
            sink.add(weights, &dz);
            for (&p, &zi) in parts_owned.iter().zip(z) {
                sink.with(p, |g| {
                    for (gi, d) in g.iter_mut().zip(dy) {
                        *gi += zi * d;
                    }
                });
            }
        });
        let mut all = parts.to_vec();
        all.push(weights);
        let r = self.req(&all);
        self.push(Tensor::from_parts(shape, out), r, Some(back), "mix")
    }

    /// Weight-norm reparameterisation `gain · v / ‖v‖₂` with a fixed gain.
    pub fn weight_norm(&mut self, v: Var, gain: f64) -> Result<Var, AutodiffError> {
        let norm = self.value(v).norm();
        if norm < 1e-12 {
            return Err(AutodiffError::ZeroNorm);
        }
        let out = self.value(v).scale(gain / norm);
        let back: Backward = Box::new(move |vals, dy, sink| {
            let vv = vals[v.0].data();
            let dot: f64 = vv.iter().zip(dy).map(|(a, b)| a * b).sum();
            let s = gain / norm;
            sink.with(v, |g| {
                for ((gi, &d), &x) in g.iter_mut().zip(dy).zip(vv) {
                    *gi += s * (d - x * dot / (norm * norm));
                }
            });
        });
        let r = self.req(&[v]);
        self.push(out, r, Some(back), "weight_norm")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(AutodiffError::ShapeMismatch("add shapes differ".into()));
        }
        let out = self.value(a).add(self.value(b));
        let back: Backward = Box::new(move |_, dy, sink| {
            sink.add(a, dy);
            sink.add(b, dy);
        });
        let r = self.req(&[a, b]);
        self.push(out, r, Some(back), "add")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        let out = self.value(a).scale(c);
        let back: Backward = Box::new(move |_, dy, sink| {
            sink.with(a, |g| {
                for (gi, d) in g.iter_mut().zip(dy) {
                    *gi += c * d;
                }
            });
        });
        let r = self.req(&[a]);
        self.push(out, r, Some(back), "scale")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s = self.value(a).data().iter().sum();
        let back: Backward = Box::new(move |_, dy, sink| {
            sink.with(a, |g| g.iter_mut().for_each(|gi| *gi += dy[0]));
        });
        let r = self.req(&[a]);
        self.push(Tensor::scalar(s), r, Some(back), "sum")
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s = self.value(a).data().iter().map(|v| v * v).sum();
        let back: Backward = Box::new(move |vals, dy, sink| {
            let av = vals[a.0].data();
            sink.with(a, |g| {
                for (gi, &x) in g.iter_mut().zip(av) {
                    *gi += 2.0 * x * dy[0];
                }
            });
        });
        let r = self.req(&[a]);
        self.push(Tensor::scalar(s), r, Some(back), "sum_squares")
    }

    /// Elementwise product (used by tests and weighting of probe losses).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(AutodiffError::ShapeMismatch("mul shapes differ".into()));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out = Tensor::from_parts(
            self.value(a).shape().to_vec(),
            av.iter().zip(bv).map(|(x, y)| x * y).collect(),
        );
        let back: Backward = Box::new(move |vals, dy, sink| {
            let (av, bv) = (vals[a.0].data(), vals[b.0].data());
            sink.with(a, |g| {
                for ((gi, d), y) in g.iter_mut().zip(dy).zip(bv) {
                    *gi += d * y;
                }
            });
            sink.with(b, |g| {
                for ((gi, d), x) in g.iter_mut().zip(dy).zip(av) {
                    *gi += d * x;
                }
            });
        });
        let r = self.req(&[a, b]);
        self.push(out, r, Some(back), "mul")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_example() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn uniform_logits_give_ln10() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(&[1, 10]));
        for label in 0..10 {
            let l = t.softmax_cross_entropy(x, &[label]).unwrap();
            assert!((t.value(l).item() - 10f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_channel_normalises_to_beta() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::filled(&[4, 2, 3, 3], 5.0));
        let g = t.param(Tensor::filled(&[2], 1.5));
        let b = t.param(Tensor::new(vec![2], vec![0.0, 0.25]).unwrap());
        let (y, stats) = t.batch_norm(x, g, b, 1, 1e-5, NormMode::Batch).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![5.0, 5.0]);
        let data = t.value(y).data();
        assert!(data[..9].iter().all(|v| v.abs() < 1e-12));
        assert!(data[9..18].iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let mut t = Tape::new();
        let a = t.param(Tensor::scalar(3.0));
        let b = t.param(Tensor::scalar(4.0));
        let s = t.sum_squares(a).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).item(), 6.0);
        assert_eq!(g.get(b).item(), 0.0);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut t = Tape::new();
        let a = t.param(Tensor::scalar(1e200));
        assert!(matches!(t.sum_squares(a), Err(AutodiffError::NonFinite(_))));
    }

    #[test]
    fn zero_norm_is_an_error() {
        let mut t = Tape::new();
        let a = t.param(Tensor::zeros(&[3]));
        assert!(matches!(t.weight_norm(a, 1.0), Err(AutodiffError::ZeroNorm)));
    }
}
