use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{Gradients, Param, ParamStore};
use crate::real::Real;

/// Adam moments; weight decay is deliberately absent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<R: Real> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<R>>,
    v: Vec<Vec<R>>,
}

impl<R: Real> Adam<R> {
    pub fn new(config: AdamConfig, params: &ParamStore<R>) -> Self {
        let zeros: Vec<Vec<R>> = params.iter().map(|p| vec![R::zero(); p.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore<R>, grads: &Gradients<R>, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (R::of(beta1), R::of(beta2));
        let (ob1, ob2) = (R::of(1.0 - beta1), R::of(1.0 - beta2));
        let step_size = R::of(lr / bc1);
        let inv_bc2 = R::of(1.0 / bc2);
        let eps = R::of(eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(&grads.grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.data.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + ob1 * gi;
                v[i] = b2 * v[i] + ob2 * gi * gi;
                p.data[i] -= step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
        }
    }

    /// Moments as named tensors (`m/<name>`, `v/<name>`) for checkpoints.
    pub fn state_tensors(&self, params: &ParamStore<R>) -> Vec<Param<R>> {
        let mut out = Vec::new();
        for (kind, buf) in [("m", &self.m), ("v", &self.v)] {
            for (p, data) in params.iter().zip(buf) {
                out.push(Param {
                    name: format!("{kind}/{}", p.name),
                    shape: p.shape.clone(),
                    data: data.clone(),
                });
            }
        }
        out
    }

    pub fn restore(
        config: AdamConfig,
        params: &ParamStore<R>,
        step: u64,
        state: &[Param<R>],
    ) -> Result<Self> {
        let n = params.len();
        if state.len() != 2 * n {
            return Err(Error::Checkpoint(format!(
                "optimizer state has {} tensors, expected {}",
                state.len(),
                2 * n
            )));
        }
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for (i, p) in params.iter().enumerate() {
            for (kind, src, dst) in [("m", &state[i], &mut m), ("v", &state[n + i], &mut v)] {
                if src.name != format!("{kind}/{}", p.name) || src.data.len() != p.len() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer tensor {} does not match parameter {}",
                        src.name, p.name
                    )));
                }
                dst.push(src.data.clone());
            }
        }
        Ok(Self { config, step, m, v })
    }
}
