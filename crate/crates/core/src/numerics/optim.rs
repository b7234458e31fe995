use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8, 0.01)
    }
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. Parameters are matched to their moment
    /// buffers by position, so callers must pass them in a stable order.
    /// A parameter without a gradient is treated as having a zero gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor], lr: f64) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::invalid(
                "adamw_step",
                format!("learning rate must be > 0, got {lr}"),
            ));
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
                .collect();
        }
        if self.moments.len() != params.len() {
            return Err(Error::shape(
                "adamw_step",
                &[self.moments.len()],
                &[params.len()],
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for (p, (m, v)) in params.iter_mut().zip(self.moments.iter_mut()) {
            if m.len() != p.numel() {
                return Err(Error::shape("adamw_step", &[m.len()], p.shape()));
            }
            let grad = p.grad.take();
            let data = p.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bias1;
                let vhat = v[i] / bias2;
                data[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * data[i]);
            }
        }
        Ok(())
    }
}

/// Linear warm-up from `max_lr / 25` to `max_lr`, then cosine annealing to
/// `max_lr / 1e4`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneCycleSchedule {
    pub max_lr: f64,
    pub total_steps: usize,
    pub warmup_fraction: f64,
}

pub const ONE_CYCLE_START_DIV: f64 = 25.0;
pub const ONE_CYCLE_END_DIV: f64 = 1e4;

impl OneCycleSchedule {
    pub fn new(max_lr: f64, total_steps: usize, warmup_fraction: f64) -> Result<Self> {
        if !(max_lr > 0.0) {
            return Err(Error::Config(format!("max_lr must be > 0, got {max_lr}")));
        }
        if total_steps < 2 {
            return Err(Error::Config("one-cycle needs at least 2 steps".into()));
        }
        if !(warmup_fraction > 0.0 && warmup_fraction < 1.0) {
            return Err(Error::Config(format!(
                "warmup_fraction must lie in (0, 1), got {warmup_fraction}"
            )));
        }
        Ok(Self {
            max_lr,
            total_steps,
            warmup_fraction,
        })
    }

    /// Step at which the peak learning rate is reached.
    pub fn warmup_end(&self) -> usize {
        ((self.warmup_fraction * self.total_steps as f64).round() as usize)
            .clamp(1, self.total_steps - 1)
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::invalid(
                "one_cycle_lr",
                format!("step {step} outside [0, {}]", self.total_steps),
            ));
        }
        let start = self.max_lr / ONE_CYCLE_START_DIV;
        let end = self.max_lr / ONE_CYCLE_END_DIV;
        let peak = self.warmup_end();
        Ok(match step.cmp(&peak) {
            std::cmp::Ordering::Equal => self.max_lr,
            std::cmp::Ordering::Less => start + (self.max_lr - start) * step as f64 / peak as f64,
            std::cmp::Ordering::Greater => {
                let p = (step - peak) as f64 / (self.total_steps - peak) as f64;
                end + (self.max_lr - end) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
            }
        })
    }
}
