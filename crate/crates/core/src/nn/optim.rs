use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::{ParamId, ParamSet};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient before the moment updates.
    pub weight_decay: f64,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-6, clip_norm: None }
    }
}

/// Adaptive-moment optimizer over a subset of a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub ids: Vec<ParamId>,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(ps: &ParamSet, ids: Vec<ParamId>, cfg: AdamConfig) -> Self {
        let m: Vec<Tensor> = ids.iter().map(|&id| Tensor::zeros(ps.get(id).shape())).collect();
        Self { cfg, ids, step: 0, v: m.clone(), m }
    }

    /// Optimizer over every parameter in `ps`.
    pub fn all(ps: &ParamSet, cfg: AdamConfig) -> Self {
        Self::new(ps, ps.iter().map(|(id, _, _)| id).collect(), cfg)
    }

    pub fn update(&mut self, ps: &mut ParamSet, grads: &Gradients) {
        self.step += 1;
        let c = self.cfg;
        let scale = match c.clip_norm {
            Some(max) => {
                let norm = self
                    .ids
                    .iter()
                    .filter_map(|&id| grads.get(id))
                    .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (k, &id) in self.ids.iter().enumerate() {
            let grad = grads.get(id);
            let p = ps.get_mut(id);
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for j in 0..m.len() {
                let gj = grad.map_or(0.0, |g| g.data()[j] * scale) + c.weight_decay * p.data()[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p.data_mut()[j] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_parameter_hand_computed() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Tensor::scalar(2.0));
        let cfg = AdamConfig { lr: 0.1, weight_decay: 0.01, ..Default::default() };
        let mut opt = Adam::all(&ps, cfg);
        // f(x) = x^2, so grad = 2x.
        let (mut x, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let grads = Gradients { params: vec![Some(Tensor::scalar(2.0 * ps.get(id).item()))] };
            opt.update(&mut ps, &grads);
            let gr = 2.0 * x + 0.01 * x;
            m = 0.9 * m + 0.1 * gr;
            v = 0.999 * v + 0.001 * gr * gr;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((ps.get(id).item() - x).abs() < 1e-10);
        }
    }

    #[test]
    fn untouched_ids_stay_fixed() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::scalar(1.0));
        let b = ps.add("b", Tensor::scalar(1.0));
        let mut opt = Adam::new(&ps, vec![a], AdamConfig::default());
        let grads = Gradients { params: vec![Some(Tensor::scalar(1.0)), Some(Tensor::scalar(1.0))] };
        opt.update(&mut ps, &grads);
        assert!(ps.get(a).item() < 1.0);
        assert_eq!(ps.get(b).item(), 1.0);
    }
}
