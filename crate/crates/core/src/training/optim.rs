//! AdamW with decoupled weight decay.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{PlvmError, Result};
use crate::nn::Parameterized;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub name: String,
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            name: "adamw".into(),
            lr: 1e-4,
            batch_size: 2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name != "adamw" {
            return Err(PlvmError::InvalidConfig(format!("unknown optimizer `{}`", self.name)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 {
            return Err(PlvmError::InvalidConfig(format!(
                "lr {} must be > 0 and batch size {} ≥ 1",
                self.lr, self.batch_size
            )));
        }
        Ok(())
    }
}

/// Learning-rate multiplier per step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear warmup, then cosine decay to `floor` × the base rate.
    WarmupCosine { warmup: usize, floor: f64 },
}

impl LrSchedule {
    /// Factor for 1-based `step` out of `total`.
    pub fn factor(&self, step: usize, total: usize) -> f64 {
        match *self {
            Self::Constant => 1.0,
            Self::WarmupCosine { warmup, floor } => {
                let warm = if warmup == 0 { 1.0 } else { (step as f64 / warmup as f64).min(1.0) };
                let t = step as f64 / total.max(1) as f64;
                let cos = 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos());
                warm * (floor + (1.0 - floor) * cos)
            }
        }
    }
}

struct Moments<S> {
    m: Matrix<S>,
    v: Matrix<S>,
}

pub struct AdamW<S> {
    config: OptimizerConfig,
    step: u32,
    state: HashMap<String, Moments<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            state: HashMap::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    /// For schedules; the moments are kept.
    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// Updates every parameter that has an entry in `grads` (keyed by name).
    pub fn step(&mut self, params: &mut dyn Parameterized<S>, grads: &HashMap<String, Matrix<S>>) {
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let bc1 = S::of(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = S::of(1.0 - c.beta2.powi(self.step as i32));
        let lr = S::of(c.lr);
        let eps = S::of(c.eps);
        let decay = S::of(1.0 - c.lr * c.weight_decay);
        let state = &mut self.state;
        params.visit_mut("", &mut |name, p| {
            let Some(g) = grads.get(&name) else { return };
            let st = state.entry(name).or_insert_with(|| Moments {
                m: Matrix::zeros(p.rows(), p.cols()),
                v: Matrix::zeros(p.rows(), p.cols()),
            });
            let (pm, m, v) = (p.as_mut_slice(), st.m.as_mut_slice(), st.v.as_mut_slice());
            for (i, &gi) in g.as_slice().iter().enumerate() {
                m[i] = b1 * m[i] + (S::one() - b1) * gi;
                v[i] = b2 * v[i] + (S::one() - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                pm[i] = pm[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }
}
