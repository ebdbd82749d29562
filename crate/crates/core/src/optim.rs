//! AdamW with decoupled weight decay on weights of rank ≥ 2.

use std::collections::BTreeMap;

use crate::nn::Params;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 6e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update; parameters without an entry in `grads` are left untouched.
    pub fn step(&mut self, params: &mut Params<f32>, grads: &BTreeMap<String, Tensor<f32>>) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let decay = if p.shape().len() >= 2 { c.weight_decay } else { 0.0 };
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi as f64;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let upd = (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                let wf = *w as f64;
                *w = (wf - c.lr * (upd + decay * wf)) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Params::<f32>::new();
        p.insert("b", Tensor::new(&[2], vec![1.0, 1.0]).unwrap());
        let mut g = BTreeMap::new();
        g.insert("b".to_string(), Tensor::new(&[2], vec![0.5, -3.0]).unwrap());
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            ..Default::default()
        });
        opt.step(&mut p, &g);
        let d = p.get("b").unwrap().data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn decay_applies_only_to_matrices() {
        let mut p = Params::<f32>::new();
        p.insert("w", Tensor::full(&[1, 1], 1.0));
        p.insert("b", Tensor::full(&[1], 1.0));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::zeros(&[1, 1]));
        g.insert("b".to_string(), Tensor::zeros(&[1]));
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        });
        opt.step(&mut p, &g);
        assert!((p.get("w").unwrap()[0] - 0.95).abs() < 1e-6);
        assert_eq!(p.get("b").unwrap()[0], 1.0);
    }
}
