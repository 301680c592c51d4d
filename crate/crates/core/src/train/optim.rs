//! Adam with two learning-rate groups (projection vs everything else) and
//! per-network gradient-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Model;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// One Adam update of a flat parameter slice. `t` is the 1-based step.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    cfg: AdamConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (((p, &g), mi), vi) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

fn is_projection(name: &str) -> bool {
    name.starts_with("projection.")
}

/// Global L2 norms of the projection group and of the rest.
pub fn group_norms(grads: &Model) -> (f64, f64) {
    let (mut proj, mut rest) = (0.0, 0.0);
    for (name, g) in grads.tensors() {
        if is_projection(&name) {
            proj += g.sum_sq();
        } else {
            rest += g.sum_sq();
        }
    }
    (proj.sqrt(), rest.sqrt())
}

fn module(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Scales each network (projection, policy, value, encoder) so its norm is
/// at most `max_norm`. Returns the pre-clip projection and rest norms.
pub fn clip_groups(grads: &mut Model, max_norm: f64) -> (f64, f64) {
    let norms = group_norms(grads);
    let mut sq: Vec<(String, f64)> = Vec::new();
    for (name, g) in grads.tensors() {
        let m = module(&name);
        match sq.iter_mut().find(|(k, _)| k == m) {
            Some((_, s)) => *s += g.sum_sq(),
            None => sq.push((m.to_string(), g.sum_sq())),
        }
    }
    for (name, g) in grads.tensors_mut() {
        let n = sq.iter().find(|(k, _)| k == module(&name)).unwrap().1.sqrt();
        if n > max_norm {
            g.scale(max_norm / n);
        }
    }
    norms
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Model,
    v: Model,
}

impl Adam {
    pub fn new(model: &Model, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: model.zeros_like(),
            v: model.zeros_like(),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Model, lr_projection: f64, lr_rest: f64) {
        self.step += 1;
        let t = self.step;
        let cfg = self.config;
        let params = model.tensors_mut();
        let g = grads.tensors();
        let m = self.m.tensors_mut();
        let v = self.v.tensors_mut();
        for ((((name, p), (_, g)), (_, m)), (_, v)) in params.into_iter().zip(g).zip(m).zip(v) {
            let lr = if is_projection(&name) {
                lr_projection
            } else {
                lr_rest
            };
            adam_update(&mut p.data, &g.data, &mut m.data, &mut v.data, t, lr, cfg);
        }
    }

    /// `u64 step | m tensors | v tensors`, f64 little-endian, canonical order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.step.to_le_bytes().to_vec();
        for model in [&self.m, &self.v] {
            for (_, t) in model.tensors() {
                for x in &t.data {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(model: &Model, config: AdamConfig, bytes: &[u8]) -> Result<Self> {
        let mut adam = Self::new(model, config);
        let total: usize = model.tensors().iter().map(|(_, t)| t.len()).sum();
        if bytes.len() != 8 + 16 * total {
            return Err(Error::Format("optimizer state size mismatch".into()));
        }
        adam.step = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let mut vals = bytes[8..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        for model in [&mut adam.m, &mut adam.v] {
            for (_, t) in model.tensors_mut() {
                t.data.iter_mut().for_each(|x| *x = vals.next().unwrap());
            }
        }
        Ok(adam)
    }
}
