//! Adam optimizer and the warm-up + cosine-annealing learning-rate schedule.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::ParamSet;

/// Adam with bias correction (beta1 = 0.9, beta2 = 0.999, eps = 1e-8 by
/// default).
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Adam { beta1, beta2, eps, m, v, t: 0 }
    }

    pub fn with_defaults(params: &ParamSet) -> Self {
        Adam::new(params, 0.9, 0.999, 1e-8)
    }

    /// One update; `grads` is aligned with the param set.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>], lr: f64) {
        assert_eq!(grads.len(), self.m.len(), "gradient/parameter count mismatch");
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for (i, p) in params.iter_mut().enumerate() {
            let g = &grads[i];
            assert_eq!(g.len(), p.value.len(), "gradient extent mismatch for {}", p.name);
            for j in 0..g.len() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g[j];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                p.value[j] -= lr * mhat / (libm::sqrt(vhat) + self.eps);
            }
        }
    }
}

/// Linear warm-up to `lr_max`, then cosine annealing to ~0 at the last step.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, lr_max: f64) -> f64 {
    debug_assert!(step < total_steps && warmup_steps > 0 && warmup_steps < total_steps);
    if step < warmup_steps {
        lr_max * (step + 1) as f64 / warmup_steps as f64
    } else {
        let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
        lr_max * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
    }
}
