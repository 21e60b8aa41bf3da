//! AdamW with a linear-warmup cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Final learning rate as a fraction of `peak_lr`.
    pub floor_ratio: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl OptimConfig {
    pub fn with_steps(total_steps: usize, peak_lr: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            peak_lr,
            warmup_steps: (total_steps / 20).max(1).min(total_steps),
            total_steps,
            floor_ratio: 0.1,
            grad_clip: Some(1.0),
        }
    }

    /// Linear warmup from 0 to `peak_lr`, then cosine decay to
    /// `floor_ratio * peak_lr` at `total_steps`.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Input(format!("step {step} beyond schedule of {}", self.total_steps)));
        }
        if step < self.warmup_steps {
            return Ok(self.peak_lr * step as f64 / self.warmup_steps as f64);
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        let progress = if span == 0 {
            1.0
        } else {
            (step - self.warmup_steps) as f64 / span as f64
        };
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        Ok(self.peak_lr * (self.floor_ratio + (1.0 - self.floor_ratio) * cos))
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: OptimConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: usize,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: OptimConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    /// Updates applied so far.
    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update at the scheduled learning rate for the current step.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<f64> {
        let lr = self.config.lr_at(self.step.min(self.config.total_steps))?;
        self.apply(params, grads, lr)?;
        Ok(lr)
    }

    /// One update at an explicit learning rate.
    pub fn apply(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim("adamw", format!("{} params, {} grads", params.len(), grads.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::dim("adamw", format!("{:?} vs {:?}", p.shape(), g.shape())));
            }
            if !g.is_finite() {
                return Err(Error::Training {
                    step: self.step,
                    detail: "non-finite gradient".into(),
                });
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        let clip = match self.config.grad_clip {
            Some(max) => {
                let norm = grads
                    .iter()
                    .flat_map(|g| g.data())
                    .map(|x| x.as_f64() * x.as_f64())
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let decay = T::lit(1.0 - lr * c.weight_decay);
        let (lr_t, eps, clip) = (T::lit(lr), T::lit(c.eps), T::lit(clip));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gr)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gr = gr * clip;
                m[j] = b1 * m[j] + (T::one() - b1) * gr;
                v[j] = b2 * v[j] + (T::one() - b2) * gr * gr;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w = *w * decay - lr_t * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
