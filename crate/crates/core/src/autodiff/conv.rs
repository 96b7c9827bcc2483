//! 2-D cross-correlation via im2col + GEMM, plus a nested-loop reference.

use super::{AutodiffError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        filter: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self, AutodiffError> {
        let mismatch = |msg: String| Err(AutodiffError::ShapeMismatch(msg));
        if input.len() != 4 || filter.len() != 4 {
            return mismatch(format!("conv2d expects 4-d tensors, got {input:?} and {filter:?}"));
        }
        let (batch, c_in, h, w) = (input[0], input[1], input[2], input[3]);
        let (c_out, fc, kh, kw) = (filter[0], filter[1], filter[2], filter[3]);
        if fc != c_in || kh != kw {
            return mismatch(format!("filter {filter:?} incompatible with input {input:?}"));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return mismatch(format!("bad stride/padding for input {input:?}"));
        }
        Ok(ConvGeometry {
            batch,
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.c_out, self.h_out, self.w_out]
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// `c[m×n] = alpha · a[m×k] · b[k×n] + beta · c`, with arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices sized for the stated dimensions and strides;
    // `c` is a dense row-major m×n block that does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(g: &ConvGeometry, x: &[f64], cols: &mut [f64]) {
    let (k, hw) = (g.k, g.out_pixels());
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((c * k + ki) * k + kj) * hw..][..hw];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut row[oh * g.w_out..(oh + 1) * g.w_out];
                    if ih < 0 || ih >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *d = if iw >= 0 && iw < g.w as isize {
                            src[iw as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeometry, cols: &[f64], dx: &mut [f64]) {
    let (k, hw) = (g.k, g.out_pixels());
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((c * k + ki) * k + kj) * hw..][..hw];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.w_out {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += row[oh * g.w_out + ow];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(
    input: &Tensor,
    filter: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor, AutodiffError> {
    let g = ConvGeometry::new(input.shape(), filter.shape(), stride, pad)?;
    Ok(conv2d_forward_geom(&g, input.data(), filter.data()))
}

pub(crate) fn conv2d_forward_geom(g: &ConvGeometry, x: &[f64], w: &[f64]) -> Tensor {
    let (p, hw) = (g.patch_len(), g.out_pixels());
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * hw;
    let mut out = vec![0.0; g.batch * out_len];
    let mut cols = vec![0.0; p * hw];
    for b in 0..g.batch {
        im2col(g, &x[b * in_len..(b + 1) * in_len], &mut cols);
        gemm(
            g.c_out,
            p,
            hw,
            w,
            (p as isize, 1),
            &cols,
            (hw as isize, 1),
            0.0,
            &mut out[b * out_len..(b + 1) * out_len],
        );
    }
    Tensor::from_parts(g.output_shape().to_vec(), out)
}

/// Returns `(d input, d filter)`; either side is skipped when not requested.
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (p, hw) = (g.patch_len(), g.out_pixels());
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * hw;
    let mut dx = want_dx.then(|| vec![0.0; g.batch * in_len]);
    let mut dw = want_dw.then(|| vec![0.0; g.c_out * p]);
    let mut cols = vec![0.0; p * hw];
    let mut dcols = if want_dx { vec![0.0; p * hw] } else { Vec::new() };
    for b in 0..g.batch {
        let dyb = &dy[b * out_len..(b + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            im2col(g, &x[b * in_len..(b + 1) * in_len], &mut cols);
            // dW[c_out × p] += dY[c_out × hw] · colsᵀ[hw × p]
            gemm(
                g.c_out,
                hw,
                p,
                dyb,
                (hw as isize, 1),
                &cols,
                (1, hw as isize),
                1.0,
                dw,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[p × hw] = Wᵀ[p × c_out] · dY[c_out × hw]
            gemm(
                p,
                g.c_out,
                hw,
                w,
                (1, p as isize),
                dyb,
                (hw as isize, 1),
                0.0,
                &mut dcols,
            );
            col2im(g, &dcols, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    (dx, dw)
}

/// Six-loop cross-correlation with zero padding; the oracle for conv tests.
pub fn conv2d_naive(
    input: &Tensor,
    filter: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor, AutodiffError> {
    let g = ConvGeometry::new(input.shape(), filter.shape(), stride, pad)?;
    let (x, w) = (input.data(), filter.data());
    let mut out = Tensor::zeros(&g.output_shape());
    let o = out.data_mut();
    for b in 0..g.batch {
        for d in 0..g.c_out {
            for oh in 0..g.h_out {
                for ow in 0..g.w_out {
                    let mut acc = 0.0;
                    for c in 0..g.c_in {
                        for ki in 0..g.k {
                            for kj in 0..g.k {
                                let ih = (oh * stride + ki) as isize - pad as isize;
                                let iw = (ow * stride + kj) as isize - pad as isize;
                                if ih < 0 || iw < 0 || ih >= g.h as isize || iw >= g.w as isize {
                                    continue;
                                }
                                acc += x[((b * g.c_in + c) * g.h + ih as usize) * g.w
                                    + iw as usize]
                                    * w[((d * g.c_in + c) * g.k + ki) * g.k + kj];
                            }
                        }
                    }
                    o[((b * g.c_out + d) * g.h_out + oh) * g.w_out + ow] = acc;
                }
            }
        }
    }
    Ok(out)
}
