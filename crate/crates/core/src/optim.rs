//! First-order optimizers over flat parameter buffers.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adagrad,
    Adam,
}

/// Plain SGD, Adagrad or Adam with state sized to the parameter buffer.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, len: usize) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adagrad => (Vec::new(), vec![0.0; len]),
            OptimizerKind::Adam => (vec![0.0; len], vec![0.0; len]),
        };
        Optimizer { kind, lr, m, v, t: 0 }
    }

    pub fn adam(lr: f64, len: usize) -> Self {
        Self::new(OptimizerKind::Adam, lr, len)
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Descends along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        if self.lr == 0.0 {
            return;
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adagrad => {
                for ((p, g), v) in params.iter_mut().zip(grad).zip(&mut self.v) {
                    *v += g * g;
                    *p -= self.lr * g / (v.sqrt() + 1e-10);
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - BETA1.powi(self.t as i32);
                let bc2 = 1.0 - BETA2.powi(self.t as i32);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
                    self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
                    let mh = self.m[i] / bc1;
                    let vh = self.v[i] / bc2;
                    params[i] -= self.lr * mh / (vh.sqrt() + EPS);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut opt = Optimizer::adam(0.0, 2);
        opt.step(&mut p, &[3.0, 4.0]);
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn minimizes_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adagrad, OptimizerKind::Adam] {
            let mut p = vec![3.0, -4.0];
            let lr = if kind == OptimizerKind::Adagrad { 1.0 } else { 0.1 };
            let mut opt = Optimizer::new(kind, lr, 2);
            for _ in 0..2000 {
                let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
                opt.step(&mut p, &g);
            }
            assert!(p.iter().all(|x| x.abs() < 1e-2), "{kind:?}: {p:?}");
        }
    }
}
