//! SGD with momentum and a step-wise learning-rate schedule.

use crate::autodiff::Tensor;

/// Learning rate multiplied by `factor` at each milestone epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiStepLr {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl MultiStepLr {
    /// Rate for a 0-based epoch.
    pub fn rate(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base * self.factor.powi(passed as i32)
    }
}

/// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// `grads[i]` is the gradient of `params[i]`; `None` counts as zero.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Option<&Tensor>], lr: f64) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.velocity.len(), "parameter set changed under the optimizer");
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            let data = p.data_mut();
            for (i, (pi, vi)) in data.iter_mut().zip(v.iter_mut()).enumerate() {
                let gi = g.map_or(0.0, |g| g.data()[i]) + self.weight_decay * *pi;
                *vi = self.momentum * *vi + gi;
                *pi -= lr * *vi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps_at_milestones() {
        let s = MultiStepLr {
            base: 0.4,
            milestones: vec![80, 120],
            factor: 0.1,
        };
        assert_eq!(s.rate(0), 0.4);
        assert_eq!(s.rate(79), 0.4);
        assert!((s.rate(80) - 0.04).abs() < 1e-15);
        assert!((s.rate(159) - 0.004).abs() < 1e-15);
    }

    #[test]
    fn momentum_update_by_hand() {
        let mut p = Tensor::vector(vec![1.0]).unwrap();
        let g = Tensor::vector(vec![0.5]).unwrap();
        let mut opt = Sgd::new(0.9, 0.1);
        opt.step(vec![&mut p], &[Some(&g)], 0.1);
        // v = 0.5 + 0.1 = 0.6; p = 1 - 0.06
        assert!((p.data()[0] - 0.94).abs() < 1e-15);
        opt.step(vec![&mut p], &[Some(&g)], 0.1);
        // v = 0.54 + 0.5 + 0.094 = 1.134; p = 0.94 - 0.1134
        assert!((p.data()[0] - 0.8266).abs() < 1e-12);
    }
}
