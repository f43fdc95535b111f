//! AdamW with decoupled weight decay, plus the two learning-rate schedules
//! the decoders train with (cosine annealing and one-cycle).

/// AdamW over a flat parameter vector. Moment buffers are public so the
/// checkpoint writer can persist and restore them.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamW {
    pub fn new(param_count: usize, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    /// One update: `p ← p − lr·(m̂/(√v̂+ε) + wd·p)`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer/params size mismatch");
        assert_eq!(params.len(), grads.len(), "grads size mismatch");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

/// Learning rate as a function of the global step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// Cosine annealing from `max_lr` down to 0 over `total_steps`.
    Cosine {
        max_lr: f64,
        total_steps: u64,
    },
    /// One-cycle: cosine warmup from `max_lr/25` to `max_lr` over the first
    /// 30% of steps, then cosine decay to `max_lr/25/1e4`.
    OneCycle {
        max_lr: f64,
        total_steps: u64,
    },
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Cosine {
                max_lr,
                total_steps,
            } => {
                let t = (step.min(total_steps)) as f64 / total_steps.max(1) as f64;
                0.5 * max_lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
            LrSchedule::OneCycle {
                max_lr,
                total_steps,
            } => {
                let initial = max_lr / 25.0;
                let min_lr = initial / 1e4;
                let warm = ((total_steps as f64) * 0.3).max(1.0);
                let cos_interp = |start: f64, end: f64, pct: f64| {
                    end + (start - end) / 2.0 * (1.0 + (std::f64::consts::PI * pct).cos())
                };
                let s = step.min(total_steps) as f64;
                if s < warm {
                    cos_interp(initial, max_lr, s / warm)
                } else {
                    let rest = (total_steps as f64 - warm).max(1.0);
                    cos_interp(max_lr, min_lr, (s - warm) / rest)
                }
            }
        }
    }
}
