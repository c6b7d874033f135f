use alloc::vec;
use alloc::vec::Vec;

/// Adam with decoupled weight decay over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(n: usize, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -=
                lr * (m_hat / (libm::sqrt(v_hat) + self.eps) + self.weight_decay * params[i]);
        }
    }
}

/// Cosine decay from `base` at step 0 to zero at step `total - 1`, no restarts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn rate(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            return self.base;
        }
        let last = (self.total_steps - 1) as f64;
        let progress = (step as f64).min(last) / last;
        self.base * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut opt = AdamW::new(3, 0.0);
        let mut p = [1.0, -2.0, 0.5];
        opt.step(&mut p, &[0.0; 3], 0.1);
        assert_eq!(p, [1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_the_rate() {
        let mut opt = AdamW::new(1, 0.0);
        let mut p = [0.0];
        opt.step(&mut p, &[5.0], 0.01);
        assert!((p[0] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn decoupled_decay_shrinks_weights() {
        let mut opt = AdamW::new(1, 0.1);
        let mut p = [2.0];
        opt.step(&mut p, &[0.0], 0.5);
        assert!((p[0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn cosine_endpoints() {
        let s = CosineSchedule {
            base: 1e-3,
            total_steps: 11,
        };
        assert_eq!(s.rate(0), 1e-3);
        assert!((s.rate(5) - 5e-4).abs() < 1e-15);
        assert!(s.rate(10).abs() < 1e-18);
        assert!(s.rate(50).abs() < 1e-18);
    }
}
