//! Adam with coupled L2 weight decay.

use crate::error::{invalid, shape_err, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if !ok {
            return invalid(format!("bad optimizer settings {self:?}"));
        }
        Ok(())
    }
}

/// Optimizer state: one first and second moment buffer per parameter,
/// in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Ok(Self {
            config,
            m: zeros.clone(),
            v: zeros,
            steps: 0,
        })
    }

    /// Rebuilds state from saved buffers.
    pub fn from_state(config: AdamConfig, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, steps: u64) -> Result<Self> {
        config.validate()?;
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return shape_err("moment buffers disagree");
        }
        Ok(Self { config, m, v, steps })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One update. Parameters with no gradient still decay.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return shape_err(format!(
                "{} gradients for {} parameters ({} moment buffers)",
                grads.len(),
                params.len(),
                self.m.len()
            ));
        }
        let c = self.config;
        self.steps += 1;
        let bc1 = 1.0 - c.beta1.powf(self.steps as f64);
        let bc2 = 1.0 - c.beta2.powf(self.steps as f64);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            if p.len() != self.m[k].len() {
                return shape_err(format!("moment buffer {k} has wrong length"));
            }
            let g = grads[k].as_deref();
            if let Some(g) = g {
                if g.len() != p.len() {
                    return shape_err(format!("gradient {k} has wrong length"));
                }
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g[i]) + c.weight_decay * p[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
