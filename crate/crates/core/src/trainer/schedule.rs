use std::f64::consts::PI;

/// Step-indexed schedules for one training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedules {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub momentum_start: f64,
    pub momentum_end: f64,
    pub tau_t_start: f64,
    pub tau_t_end: f64,
    pub tau_t_warmup_steps: u64,
}

impl Schedules {
    /// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at
    /// `total_steps`.
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return if self.total_steps == self.warmup_steps && step == self.warmup_steps {
                self.base_lr
            } else {
                0.0
            };
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let t = (step - self.warmup_steps) as f64 / span;
        0.5 * self.base_lr * (1.0 + (PI * t).cos())
    }

    /// Cosine ramp of the teacher EMA momentum from start to end.
    pub fn momentum(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.momentum_end;
        }
        let t = (step.min(self.total_steps)) as f64 / self.total_steps as f64;
        self.momentum_end - (self.momentum_end - self.momentum_start) * 0.5 * (1.0 + (PI * t).cos())
    }

    /// Teacher temperature: linear warmup, then constant.
    pub fn tau_t(&self, step: u64) -> f64 {
        if step >= self.tau_t_warmup_steps {
            return self.tau_t_end;
        }
        let t = step as f64 / self.tau_t_warmup_steps as f64;
        self.tau_t_start + (self.tau_t_end - self.tau_t_start) * t
    }
}
