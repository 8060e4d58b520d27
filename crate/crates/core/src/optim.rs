//! AdamW: adaptive moments with decoupled weight decay.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::config::OptimizerConfig;
use crate::tape::Matrix;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(cfg: &OptimizerConfig) -> Self {
        AdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of `params` with `grads` (same order and shapes every call).
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Matrix::zeros(g.raw_dim())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let decay = 1.0 - lr * self.weight_decay;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(p.raw_dim(), g.raw_dim(), "gradient shape");
            Zip::from(&mut **p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *p *= decay;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr_in_gradient_sign() {
        let cfg = OptimizerConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-12, weight_decay: 0.0, batch_size: 1 };
        let mut opt = AdamW::new(&cfg);
        let mut p = array![[1.0, -2.0]];
        opt.step(&mut [&mut p], &[array![[3.0, -0.5]]]);
        assert!((p[[0, 0]] - 0.9).abs() < 1e-9);
        assert!((p[[0, 1]] + 1.9).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let cfg = OptimizerConfig { lr: 0.01, weight_decay: 0.5, ..OptimizerConfig::classifier_default() };
        let mut opt = AdamW::new(&cfg);
        let mut p = array![[2.0]];
        opt.step(&mut [&mut p], &[array![[0.0]]]);
        assert_eq!(p[[0, 0]], 2.0 * (1.0 - 0.01 * 0.5));
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = OptimizerConfig { lr: 0.05, weight_decay: 0.0, ..OptimizerConfig::token_default() };
        let mut opt = AdamW::new(&cfg);
        let mut p = array![[5.0, -3.0]];
        for _ in 0..2000 {
            let g = &p * 2.0;
            opt.step(&mut [&mut p], &[g]);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2), "{p:?}");
    }
}
