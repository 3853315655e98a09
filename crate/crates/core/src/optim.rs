//! Adaptive-moment optimizer with bias correction and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::numerics::{NumericsError, Tensor};
use crate::params::{ParamGroup, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm limit; `0` disables clipping.
    pub clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.97,
            eps: 1e-8,
            weight_decay: 0.0,
            clip: 5.0,
        }
    }
}

/// Global L2 norm of a gradient set.
pub fn global_norm(grads: &[Option<Tensor<f32>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|t| t.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor<f32>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            *g = g.map(|v| v * s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    /// First and second moments per parameter index; empty until the parameter is first updated.
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            step: 0,
            m: vec![Vec::new(); n_params],
            v: vec![Vec::new(); n_params],
        }
    }
}

pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self {
            config,
            state: AdamState::new(n_params),
        }
    }

    /// Clips, then applies one update to every parameter with a gradient.
    /// `lr` maps a parameter group to its learning rate; groups mapped to
    /// `None` are left untouched. Returns the pre-clip gradient norm.
    pub fn step(
        &mut self,
        store: &mut ParamStore<f32>,
        mut grads: Vec<Option<Tensor<f32>>>,
        lr: impl Fn(ParamGroup) -> Option<f64>,
    ) -> Result<f64, NumericsError> {
        for (i, g) in grads.iter_mut().enumerate() {
            if lr(store.group(ParamId(i))).is_none() {
                *g = None;
            }
        }
        let norm = clip_global_norm(&mut grads, self.config.clip);
        self.state.step += 1;
        let t = self.state.step as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let id = ParamId(i);
            let rate = lr(store.group(id)).unwrap_or(0.0);
            let p = store.get(id);
            let n = p.numel();
            let m = &mut self.state.m[i];
            let v = &mut self.state.v[i];
            if m.is_empty() {
                *m = vec![0.0; n];
                *v = vec![0.0; n];
            }
            let mut out = p.to_vec();
            for j in 0..n {
                let gj = g.data()[j] as f64;
                let mj = c.beta1 * m[j] as f64 + (1.0 - c.beta1) * gj;
                let vj = c.beta2 * v[j] as f64 + (1.0 - c.beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let upd = (mj / bc1) / ((vj / bc2).sqrt() + c.eps) + c.weight_decay * out[j] as f64;
                out[j] = (out[j] as f64 - rate * upd) as f32;
            }
            store.set(id, Tensor::new(p.shape().to_vec(), out)?)?;
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_to_five() {
        let mut grads = vec![Some(Tensor::new(vec![2], vec![6.0f32, 8.0]).unwrap()), None];
        let before = clip_global_norm(&mut grads, 5.0);
        assert!((before - 10.0).abs() < 1e-9);
        assert!((global_norm(&grads) - 5.0).abs() < 1e-6);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add(
            "w",
            ParamGroup::Backbone,
            Tensor::new(vec![2], vec![1.0, -1.0]).unwrap(),
        );
        let mut opt = Adam::new(AdamConfig::default(), 1);
        let g = Tensor::new(vec![2], vec![0.5, -2.0]).unwrap();
        opt.step(&mut store, vec![Some(g)], |_| Some(0.1)).unwrap();
        let p = store.get(id).data();
        assert!(
            (p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6,
            "{p:?}"
        );
    }
}
