use std::collections::BTreeMap;

use super::params::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments for a named parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One bias-corrected Adam update. Parameters without a gradient entry
    /// are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        for (name, p) in params.iter() {
            if let Some(g) = grads.get(name) {
                if g.shape() != p.shape() {
                    return Err(Error::Dimension(format!(
                        "gradient for {name} has shape {:?}, parameter has {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
            }
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; p.len()]);
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; p.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Tensor;

    fn single(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(v));
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = single(3.0);
        let mut adam = AdamState::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut params, &single(0.0)).unwrap();
        }
        assert_eq!(params.get("w").unwrap().item(), 3.0);
        assert_eq!(adam.m["w"][0], 0.0);
        assert_eq!(adam.t, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = single(0.0);
        let mut adam = AdamState::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        adam.step(&mut params, &single(1.0)).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction.
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((params.get("w").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr_times_sign() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
        let mut g = ParamSet::new();
        g.insert("w", Tensor::new(&[2], vec![2.5, -0.3]).unwrap());
        let mut adam = AdamState::new(AdamConfig::default());
        let mut prev = p.get("w").unwrap().data().to_vec();
        for _ in 0..2000 {
            adam.step(&mut p, &g).unwrap();
            let cur = p.get("w").unwrap().data().to_vec();
            let steps: Vec<f64> = cur.iter().zip(&prev).map(|(c, q)| c - q).collect();
            prev = cur;
            if adam.t == 2000 {
                assert!((steps[0] + 1e-3).abs() < 1e-9, "{steps:?}");
                assert!((steps[1] - 1e-3).abs() < 1e-9, "{steps:?}");
            }
        }
    }

    #[test]
    fn missing_gradient_skips_parameter() {
        let mut params = single(1.0);
        params.insert("other", Tensor::scalar(2.0));
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut params, &single(1.0)).unwrap();
        assert_eq!(params.get("other").unwrap().item(), 2.0);
        assert!(!adam.m.contains_key("other"));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = single(1.0);
        let mut g = ParamSet::new();
        g.insert("w", Tensor::zeros(&[2]));
        let mut adam = AdamState::new(AdamConfig::default());
        assert!(adam.step(&mut params, &g).is_err());
        assert_eq!(adam.t, 0);
    }
}
