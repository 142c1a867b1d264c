//! AdamW with a warmup + polynomial-decay schedule.
//!
//! The same optimizer drives backbone pretraining, soft-prompt tuning, and
//! cross-encoder finetuning; only the hyperparameters differ per stage.

/// Decoupled-weight-decay Adam over one flat parameter array.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamW {
    pub fn new(len: usize) -> Self {
        AdamW {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update step. `params`, `grads`, and the internal state must all
    /// have the same length.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, weight_decay: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + weight_decay * params[i]);
        }
    }
}

/// Learning-rate schedule: linear warmup over a fraction of total steps,
/// then polynomial decay to zero.
#[derive(Debug, Clone, Copy)]
pub struct PolySchedule {
    pub base_lr: f64,
    pub total_steps: u64,
    pub warmup_fraction: f64,
    pub power: f64,
}

impl PolySchedule {
    pub fn new(base_lr: f64, total_steps: u64, warmup_fraction: f64) -> Self {
        PolySchedule {
            base_lr,
            total_steps: total_steps.max(1),
            warmup_fraction,
            power: 1.0,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let warmup = ((self.total_steps as f64) * self.warmup_fraction).ceil() as u64;
        if warmup > 0 && step < warmup {
            return self.base_lr * (step + 1) as f64 / warmup as f64;
        }
        if self.total_steps <= warmup {
            return self.base_lr;
        }
        let progress = (step.saturating_sub(warmup)) as f64 / (self.total_steps - warmup) as f64;
        self.base_lr * (1.0 - progress.min(1.0)).powf(self.power)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_descends_a_quadratic() {
        // Minimize (p - 3)^2 from p = 0.
        let mut params = vec![0.0f64];
        let mut opt = AdamW::new(1);
        for _ in 0..2000 {
            let grad = vec![2.0 * (params[0] - 3.0)];
            opt.step(&mut params, &grad, 0.01, 0.0);
        }
        assert!((params[0] - 3.0).abs() < 1e-3, "got {}", params[0]);
    }

    #[test]
    fn schedule_warms_up_then_decays_to_zero() {
        let sched = PolySchedule::new(1e-4, 100, 0.06);
        assert!(sched.lr_at(0) < 1e-4);
        assert!((sched.lr_at(5) - 1e-4).abs() < 1e-12);
        assert!(sched.lr_at(50) < 1e-4);
        assert!(sched.lr_at(99) > 0.0);
        assert!(sched.lr_at(100) == 0.0);
    }

    #[test]
    fn weight_decay_shrinks_params_without_gradient() {
        let mut params = vec![1.0f64];
        let mut opt = AdamW::new(1);
        opt.step(&mut params, &[0.0], 0.1, 0.5);
        assert!(params[0] < 1.0);
    }
}
