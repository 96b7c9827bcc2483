//! Minimal dense-tensor engine with reverse-mode differentiation.

mod conv;
mod optim;
mod tape;
mod tensor;

pub use conv::{conv2d_forward, conv2d_naive, ConvGeometry};
pub use optim::{optimizer_step, Moments, Optimizer, Parameter};
pub use tape::{BatchStats, GradSink, Gradients, NormMode, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("weight-norm direction has (near) zero norm")]
    ZeroNorm,
}

/// Central-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Compares the reverse-mode gradient of `f` at `point` with central
/// differences; returns `max |a − b| / max(1, |a|, |b|)` over coordinates.
///
/// `f` records a scalar function of its leaf argument on the given tape.
pub fn grad_check<F>(f: F, point: &Tensor) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    let analytic = tape.backward(y)?.get(x);

    let eval = |p: Tensor| -> Result<f64, AutodiffError> {
        let mut t = Tape::new();
        let x = t.constant(p);
        let y = f(&mut t, x)?;
        Ok(t.value(y).item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += GRAD_CHECK_STEP;
        let mut minus = point.clone();
        minus.data_mut()[i] -= GRAD_CHECK_STEP;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * GRAD_CHECK_STEP);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs()));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::rc::Rc;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn sum_of_squares_gradient() {
        let p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut t = Tape::new();
        let x = t.param(p.clone());
        let y = t.sum_squares(x).unwrap();
        assert_eq!(t.backward(y).unwrap().get(x).data(), &[2.0, 4.0]);
        assert!(grad_check(|t, x| t.sum_squares(x), &p).unwrap() < 1e-9);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let p = Tensor::new(vec![3], vec![0.3, -1.0, 2.0]).unwrap();
        let f = |t: &mut Tape, x: Var| {
            let z = t.scale(x, 0.0)?;
            t.sum(z)
        };
        let mut t = Tape::new();
        let x = t.param(p.clone());
        let y = f(&mut t, x).unwrap();
        assert!(t.backward(y).unwrap().get(x).data().iter().all(|&g| g == 0.0));
        assert_eq!(grad_check(f, &p).unwrap(), 0.0);
    }

    fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> Result<Var, AutodiffError> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::uniform(t.value(y).shape(), -1.0, 1.0, &mut r);
        let w = t.constant(w);
        let p = t.mul(y, w)?;
        t.sum(p)
    }

    #[test]
    fn conv2d_gradients() {
        let mut r = rng();
        let x0 = Tensor::uniform(&[2, 2, 5, 5], -1.0, 1.0, &mut r);
        let w0 = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r);
        let wc = w0.clone();
        let err = grad_check(
            |t, x| {
                let w = t.constant(wc.clone());
                let y = t.conv2d(x, w, 1, 1)?;
                weighted_sum(t, y, 1)
            },
            &x0,
        )
        .unwrap();
        assert!(err < 1e-6, "dx err {err}");
        let err = grad_check(
            |t, w| {
                let x = t.constant(x0.clone());
                let y = t.conv2d(x, w, 2, 1)?;
                weighted_sum(t, y, 2)
            },
            &w0,
        )
        .unwrap();
        assert!(err < 1e-6, "dw err {err}");
    }

    #[test]
    fn batch_norm_gradients() {
        let mut r = rng();
        let x0 = Tensor::uniform(&[3, 4, 2, 2], -1.0, 1.0, &mut r);
        for mode in 0..2 {
            let err = grad_check(
                |t, x| {
                    let g = t.constant(Tensor::new(vec![2], vec![1.3, 0.7]).unwrap());
                    let b = t.constant(Tensor::new(vec![2], vec![0.1, -0.2]).unwrap());
                    let (rm, rv) = ([0.1, -0.3], [1.2, 0.8]);
                    let m = if mode == 0 {
                        NormMode::Batch
                    } else {
                        NormMode::Running { mean: &rm, var: &rv }
                    };
                    let (y, _) = t.batch_norm(x, g, b, 2, 1e-5, m)?;
                    weighted_sum(t, y, 3)
                },
                &x0,
            )
            .unwrap();
            assert!(err < 1e-6, "bn mode {mode} err {err}");
        }
        let g0 = Tensor::new(vec![2], vec![1.3, 0.7]).unwrap();
        let err = grad_check(
            |t, g| {
                let x = t.constant(x0.clone());
                let b = t.constant(Tensor::zeros(&[2]));
                let (y, _) = t.batch_norm(x, g, b, 2, 1e-5, NormMode::Batch)?;
                weighted_sum(t, y, 4)
            },
            &g0,
        )
        .unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn pooling_dense_and_loss_gradients() {
        let mut r = rng();
        let x0 = Tensor::uniform(&[2, 4, 5, 4], -1.0, 1.0, &mut r);
        let w0 = Tensor::uniform(&[3, 2], -1.0, 1.0, &mut r);
        let err = grad_check(
            |t, x| {
                let p = t.avg_pool2(x)?;
                let p = t.relu(p)?;
                let g = t.global_avg_pool(p)?;
                let g = t.group_mean(g, 2)?;
                let w = t.constant(w0.clone());
                let b = t.constant(Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
                let y = t.dense(g, w, b)?;
                t.softmax_cross_entropy(y, &[2, 0])
            },
            &x0,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
        let in0 = Tensor::uniform(&[2, 2], -1.0, 1.0, &mut r);
        let err = grad_check(
            |t, w| {
                let x = t.constant(in0.clone());
                let b = t.constant(Tensor::zeros(&[3]));
                let y = t.dense(x, w, b)?;
                t.softmax_cross_entropy(y, &[1, 2])
            },
            &w0,
        )
        .unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn gather_softmax_mix_weightnorm_gradients() {
        let mut r = rng();
        let v0 = Tensor::uniform(&[6], -1.0, 1.0, &mut r);
        let idx: Rc<[usize]> = Rc::from(vec![5, 0, 0, 3, 2, 1, 4, 4]);
        let err = grad_check(
            |t, v| {
                let n = t.weight_norm(v, 2.5)?;
                let g = t.gather(n, idx.clone(), &[2, 4])?;
                let h = t.gather(v, idx.clone(), &[2, 4])?;
                let z = t.constant(Tensor::new(vec![2], vec![0.3, 0.7]).unwrap());
                let m = t.mix(z, &[g, h])?;
                weighted_sum(t, m, 5)
            },
            &v0,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
        let l0 = Tensor::uniform(&[3], -1.0, 1.0, &mut r);
        let err = grad_check(
            |t, l| {
                let z = t.softmax(l)?;
                let a = t.constant(Tensor::uniform(&[4], -1.0, 1.0, &mut rng()));
                let b = t.constant(Tensor::uniform(&[4], 0.0, 2.0, &mut rng()));
                let c = t.constant(Tensor::filled(&[4], 0.5));
                let m = t.mix(z, &[a, b, c])?;
                let s = t.sum_squares(m)?;
                let q = t.add(s, s)?;
                t.scale(q, 0.5)
            },
            &l0,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn weight_norm_properties() {
        let mut r = rng();
        let v = Tensor::uniform(&[2, 3, 3], -1.0, 1.0, &mut r);
        let mut t = Tape::new();
        let a = t.constant(v.clone());
        let b = t.constant(v.scale(10.0));
        let wa = t.weight_norm(a, 1.7).unwrap();
        let wb = t.weight_norm(b, 1.7).unwrap();
        assert!(t.value(wa).max_abs_diff(t.value(wb)) < 1e-15);
        assert!((t.value(wa).norm() - 1.7).abs() < 1e-12);

        let mut t = Tape::new();
        let x = t.param(v.clone());
        let w = t.weight_norm(x, 1.7).unwrap();
        let y = weighted_sum(&mut t, w, 9).unwrap();
        let g = t.backward(y).unwrap().get(x);
        assert!(g.dot(&v).abs() < 1e-12);
    }
}
