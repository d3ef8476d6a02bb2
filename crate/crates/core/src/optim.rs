//! Adam with bias correction and a cosine learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{shape_err, Result};
use crate::params::VineParams;
use crate::tensor::Tensor;

/// Cosine annealing from `base` at step 0 to `base / 100` at the last step.
pub fn cosine_lr(base: f64, step: usize, total_steps: usize) -> f64 {
    let floor = base / 100.0;
    if total_steps <= 1 {
        return base;
    }
    let t = step.min(total_steps - 1) as f64 / (total_steps - 1) as f64;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. Paths missing from `grads` or
    /// rejected by `trainable` are left untouched.
    pub fn update<'a>(
        &mut self,
        params: &mut VineParams,
        grads: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
        lr: f64,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<()> {
        let grads: BTreeMap<&str, &Tensor> = grads.into_iter().collect();
        for (path, g) in &grads {
            if let Some(p) = params.get(path) {
                if p.shape() != g.shape() {
                    return Err(shape_err("adam_update", p.shape(), g.shape()));
                }
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (path, p) in params.iter_mut() {
            let Some(g) = grads.get(path) else { continue };
            if !trainable(path) {
                continue;
            }
            let st = self.state.entry(path.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            for (((x, &gi), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(&mut st.m).zip(&mut st.v) {
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
