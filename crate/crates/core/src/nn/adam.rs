use serde::{Deserialize, Serialize};

use super::Params;

/// Adaptive-moment optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, len: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update; returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut Params<f32>, grads: &Params<f32>) -> f32 {
        let norm = grads.norm();
        let clip = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            ..
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let iter = params
            .data_mut()
            .iter_mut()
            .zip(grads.data())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()));
        for ((p, &g), (m, v)) in iter {
            let g = g * clip;
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
            if lr != 0.0 {
                *p -= lr * update;
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::nn::ParamLayout;

    fn quad() -> (Params<f32>, Params<f32>) {
        let mut layout = ParamLayout::new();
        layout.add("x", &[2]);
        let layout = Arc::new(layout);
        let mut p = Params::zeros(Arc::clone(&layout));
        p.data_mut().copy_from_slice(&[3.0, -2.0]);
        (p, Params::zeros(layout))
    }

    #[test]
    fn minimizes_a_quadratic() {
        let (mut p, mut g) = quad();
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            2,
        );
        for _ in 0..2000 {
            let x = p.data().to_vec();
            g.data_mut().copy_from_slice(&[2.0 * x[0], 2.0 * x[1]]);
            adam.step(&mut p, &g);
        }
        assert!(p.norm() < 1e-2, "{:?}", p.data());
    }

    #[test]
    fn zero_learning_rate_leaves_params_untouched() {
        let (mut p, mut g) = quad();
        let before = p.clone();
        g.data_mut().copy_from_slice(&[1e6, -3.0]);
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
            2,
        );
        adam.step(&mut p, &g);
        assert_eq!(p, before);
    }
}
