//! First-order optimizers over any parameter container.

use serde::{Deserialize, Serialize};

use crate::model::layers::Param;
use crate::model::{Network, Scalar};

/// Something whose trainable parameters can be walked in a fixed order.
pub trait Parameters<F> {
    fn for_each_trainable(&mut self, f: &mut dyn FnMut(&mut Param<F>));
}

impl<F: Scalar> Parameters<F> for Network<F> {
    fn for_each_trainable(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.visit_mut(&mut |p, trainable| {
            if trainable {
                f(p)
            }
        });
    }
}

impl<F: Scalar> Parameters<F> for [Param<F>] {
    fn for_each_trainable(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.iter_mut().for_each(f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(crate::Error::invalid(format!("unknown optimizer `{other}` (expected adam|sgd)"))),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const SGD_MOMENTUM: f64 = 0.9;

/// Adam or momentum SGD. Moment estimates are kept in `f64`.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Optimizer {
            kind,
            learning_rate,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients. Gradients are left
    /// untouched; callers zero them before the next accumulation.
    pub fn step<F: Scalar, P: Parameters<F> + ?Sized>(&mut self, params: &mut P) {
        self.step += 1;
        let t = self.step as i32;
        let lr = self.learning_rate;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let kind = self.kind;
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut k = 0;
        params.for_each_trainable(&mut |p| {
            if ms.len() <= k {
                ms.push(vec![0.0; p.value.len()]);
                vs.push(vec![0.0; p.value.len()]);
            }
            let (m, v) = (&mut ms[k], &mut vs[k]);
            match kind {
                OptimizerKind::Adam => {
                    for i in 0..p.value.len() {
                        let g = p.grad[i].as_f64();
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                        let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
                        p.value[i] = F::of(p.value[i].as_f64() - update);
                    }
                }
                OptimizerKind::Sgd => {
                    for i in 0..p.value.len() {
                        m[i] = SGD_MOMENTUM * m[i] + p.grad[i].as_f64();
                        p.value[i] = F::of(p.value[i].as_f64() - lr * m[i]);
                    }
                }
            }
            k += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// f(x, y) = (x - 3)² + 10·(y + 1)²
    fn grad(x: f64, y: f64) -> (f64, f64) {
        (2.0 * (x - 3.0), 20.0 * (y + 1.0))
    }

    #[test]
    fn adam_matches_scalar_reference() {
        let mut params = vec![Param::<f64>::new(vec![0.5]), Param::new(vec![2.0])];
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.05);

        let (mut x, mut y) = (0.5f64, 2.0f64);
        let (mut mx, mut my, mut vx, mut vy) = (0.0, 0.0, 0.0, 0.0);
        for t in 1..=100 {
            let (gx, gy) = grad(params[0].value[0], params[1].value[0]);
            params[0].grad[0] = gx;
            params[1].grad[0] = gy;
            opt.step(params.as_mut_slice());

            let (gx, gy) = grad(x, y);
            mx = 0.9 * mx + 0.1 * gx;
            my = 0.9 * my + 0.1 * gy;
            vx = 0.999 * vx + 0.001 * gx * gx;
            vy = 0.999 * vy + 0.001 * gy * gy;
            let (b1, b2) = (1.0 - 0.9f64.powi(t), 1.0 - 0.999f64.powi(t));
            x -= 0.05 * (mx / b1) / ((vx / b2).sqrt() + 1e-8);
            y -= 0.05 * (my / b1) / ((vy / b2).sqrt() + 1e-8);

            assert!((params[0].value[0] - x).abs() < 1e-9);
            assert!((params[1].value[0] - y).abs() < 1e-9);
        }
        assert!((x - 3.0).abs() < 0.5 && (y + 1.0).abs() < 0.5);
    }

    #[test]
    fn sgd_momentum_descends() {
        let mut params = vec![Param::<f64>::new(vec![0.0]), Param::new(vec![0.0])];
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.01);
        for _ in 0..500 {
            let (gx, gy) = grad(params[0].value[0], params[1].value[0]);
            params[0].grad[0] = gx;
            params[1].grad[0] = gy;
            opt.step(params.as_mut_slice());
        }
        assert!((params[0].value[0] - 3.0).abs() < 1e-6);
        assert!((params[1].value[0] + 1.0).abs() < 1e-6);
        assert_eq!(opt.steps_taken(), 500);
    }
}
