//! First-order optimizers over flat parameter vectors.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain gradient step with decoupled weight decay.
    Sgd,
    /// Adam moments with decoupled weight decay (AdamW).
    Adam,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n_params: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Moves `params` against `grad` (minimization). For ascent pass the
    /// negated gradient.
    pub fn descend(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len(), "gradient length");
        self.step += 1;
        let lr = self.lr;
        let decay = 1.0 - lr * self.weight_decay;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p = *p * decay - lr * g;
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - self.beta1.powi(self.step as i32);
                let bc2 = 1.0 - self.beta2.powi(self.step as i32);
                for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                    *p = *p * decay - lr * update;
                }
            }
        }
    }
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = (step as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}
