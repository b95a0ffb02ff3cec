//! Adam with decoupled weight decay and a linear warmup / linear decay
//! learning-rate schedule.

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    params: AdamParams,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(params: AdamParams, len: usize) -> Self {
        Self {
            params,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update with learning rate `lr`. Entries with `decay_mask[i] ==
    /// false` (biases) are not decayed.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64, decay_mask: &[bool]) {
        let AdamParams {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.params;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            if decay_mask[i] {
                theta[i] -= lr * weight_decay * theta[i];
            }
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Learning rate at 0-based `step`: ramps linearly up to `base` over
/// `warmup` steps, then decays linearly to 0 at `total`.
pub fn linear_schedule(base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    base * (total - step.min(total)) as f64 / (total - warmup) as f64
}
