//! AdamW with linear warmup and cosine decay.

use crate::nn::ParamBundle;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub total_steps: usize,
}

impl AdamWConfig {
    /// β = (0.9, 0.99), no weight decay, 3% warmup.
    pub fn new(lr: f64, total_steps: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.0, warmup_ratio: 0.03, total_steps }
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.total_steps as f64).ceil() as usize
    }

    /// Learning rate used for the update at 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = self.warmup_steps();
        if step < warm {
            return self.lr * (step + 1) as f64 / warm as f64;
        }
        let span = self.total_steps.saturating_sub(warm).max(1);
        let progress = ((step - warm) as f64 / span as f64).min(1.0);
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Optimizer state for one [`ParamBundle`]. Frozen parameters are skipped
/// entirely, so their values stay bit-identical.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

impl AdamW {
    pub fn new(config: AdamWConfig, bundle: &ParamBundle) -> Self {
        let zeros = || bundle.iter().map(|p| vec![0.0; p.value.numel()]).collect::<Vec<_>>();
        Self { config, m: zeros(), v: zeros(), step: 0 }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, bundle: &mut ParamBundle, grads: &[Option<Tensor>]) {
        let c = self.config;
        let lr = c.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            if bundle.params()[i].frozen {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let value = bundle.value_mut(i).data_mut();
            for (j, &gj) in grad.data().iter().enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                value[j] -= lr * (update + c.weight_decay * value[j]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let c = AdamWConfig::new(1.0, 100);
        assert_eq!(c.warmup_steps(), 3);
        assert!((c.lr_at(0) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.lr_at(2), 1.0);
        assert_eq!(c.lr_at(3), 1.0);
        assert!(c.lr_at(50) < 1.0 && c.lr_at(50) > c.lr_at(90));
        assert!(c.lr_at(99) > 0.0);
    }

    #[test]
    fn minimizes_a_quadratic_and_skips_frozen() {
        let mut pb = ParamBundle::new();
        pb.add("x", Tensor::vector(vec![3.0, -2.0]));
        pb.add("y", Tensor::vector(vec![1.0]));
        pb.set_frozen_prefix("y", true);
        let mut opt = AdamW::new(AdamWConfig::new(0.1, 300), &pb);
        for _ in 0..300 {
            let x = pb.value(0).clone();
            let grad = x.map(|v| 2.0 * v);
            opt.step(&mut pb, &[Some(grad), Some(Tensor::vector(vec![5.0]))]);
        }
        assert!(pb.value(0).data().iter().all(|v| v.abs() < 1e-2));
        assert_eq!(pb.value(1).data(), &[1.0]);
    }
}
