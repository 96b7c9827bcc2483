use serde::{Deserialize, Serialize};

use super::Tensor;

/// Adam moment estimates carried by a parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    pub moments: Option<Moments>,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            value,
            grad,
            trainable: true,
            moments: None,
        }
    }

    pub fn frozen(value: Tensor) -> Self {
        Parameter {
            trainable: false,
            ..Parameter::new(value)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    pub fn accumulate(&mut self, g: &[f64]) {
        for (a, b) in self.grad.data_mut().iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam {
        lr: f64,
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr }
    }

    pub fn with_lr(self, new_lr: f64) -> Self {
        match self {
            Optimizer::Sgd { .. } => Optimizer::Sgd { lr: new_lr },
            Optimizer::Adam { beta1, beta2, eps, .. } => Optimizer::Adam {
                lr: new_lr,
                beta1,
                beta2,
                eps,
            },
        }
    }
}

/// Applies one update to every trainable parameter using its `grad`.
pub fn optimizer_step<'a>(params: impl IntoIterator<Item = &'a mut Parameter>, opt: &Optimizer) {
    for p in params {
        if !p.trainable {
            continue;
        }
        match *opt {
            Optimizer::Sgd { lr } => {
                for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                    *v -= lr * g;
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let n = p.value.len();
                let mom = p.moments.get_or_insert_with(|| Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    step: 0,
                });
                mom.step += 1;
                let c1 = 1.0 - beta1.powi(mom.step as i32);
                let c2 = 1.0 - beta2.powi(mom.step as i32);
                for (((x, &g), m), v) in p
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(p.grad.data())
                    .zip(mom.m.iter_mut())
                    .zip(mom.v.iter_mut())
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *x -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}
