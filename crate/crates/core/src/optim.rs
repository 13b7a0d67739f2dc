//! Adam without weight decay.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    /// Moment buffers shaped like `shapes` (tensor lengths).
    pub fn new(cfg: AdamConfig, shapes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = shapes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { cfg, m, v, t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update. Tensors with `mask[i] == false` are left untouched.
    pub fn step(&mut self, params: &mut [&mut Vec<f32>], grads: &[Vec<f32>], mask: &[bool], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t);
        let bc2 = 1.0 - b2.powi(self.t);
        let step = (lr * bc2.sqrt() / bc1) as f32;
        let eps = (self.cfg.eps * bc2.sqrt()) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        for (i, p) in params.iter_mut().enumerate() {
            if !mask[i] {
                continue;
            }
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                p[j] -= step * m[j] / (v[j].sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // with bias correction the first update is lr * sign(g)
        let mut p = vec![1.0f32, -2.0, 0.5];
        let g = vec![vec![0.3f32, -4.0, 0.0]];
        let mut opt = Adam::new(AdamConfig::default(), [3]);
        opt.step(&mut [&mut p], &g, &[true], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-6);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn masked_tensors_stay_put() {
        let mut a = vec![1.0f32; 2];
        let mut b = vec![1.0f32; 2];
        let g = vec![vec![1.0f32; 2], vec![1.0; 2]];
        let mut opt = Adam::new(AdamConfig::default(), [2, 2]);
        opt.step(&mut [&mut a, &mut b], &g, &[true, false], 0.01);
        assert!(a[0] < 1.0);
        assert_eq!(b, vec![1.0; 2]);
    }

    #[test]
    fn minimises_quadratic() {
        let mut x = vec![5.0f32, -3.0];
        let mut opt = Adam::new(AdamConfig::default(), [2]);
        for _ in 0..2000 {
            let g = vec![x.iter().map(|v| 2.0 * v).collect::<Vec<_>>()];
            opt.step(&mut [&mut x], &g, &[true], 0.05);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2));
    }
}
