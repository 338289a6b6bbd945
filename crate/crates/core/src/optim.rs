//! Adaptive-moment (Adam) optimizer over named parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    #[serde(skip)]
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: BTreeMap::new() }
    }

    /// Apply one update. Parameters without a gradient entry are left alone
    /// and keep their moment estimates.
    pub fn update<'a>(&mut self, params: impl IntoIterator<Item = (String, &'a mut Tensor)>, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params {
            let Some(g) = grads.get(&name) else { continue };
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (vec![0.0; p.numel()], vec![0.0; p.numel()]));
            for (((w, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
    }
}

impl Adam {
    /// First and second moment estimates as `adam.m.<name>` / `adam.v.<name>` tensors.
    pub fn moment_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, (m, v)) in &self.moments {
            out.insert(format!("adam.m.{name}"), Tensor::new(vec![m.len()], m.clone()).expect("flat"));
            out.insert(format!("adam.v.{name}"), Tensor::new(vec![v.len()], v.clone()).expect("flat"));
        }
        out
    }

    /// Inverse of [`Adam::moment_tensors`]; other entries in `tensors` are ignored.
    pub fn restore_moments(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        self.moments.clear();
        for (key, m) in tensors.range("adam.m.".to_string()..) {
            let Some(name) = key.strip_prefix("adam.m.") else { break };
            let v = tensors
                .get(&format!("adam.v.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("second moment for {name} missing")))?;
            if v.numel() != m.numel() {
                return Err(Error::Checkpoint(format!("moment sizes differ for {name}")));
            }
            self.moments.insert(name.to_string(), (m.data().to_vec(), v.data().to_vec()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut opt = Adam::new(1e-3);
        let grads = BTreeMap::from([("p".to_string(), Tensor::zeros(&[3]))]);
        opt.update([("p".to_string(), &mut p)], &grads);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_the_gradient() {
        let mut p = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let mut opt = Adam::new(0.1);
        let grads = BTreeMap::from([("p".to_string(), Tensor::new(vec![2], vec![3.0, -0.5]).unwrap())]);
        opt.update([("p".to_string(), &mut p)], &grads);
        assert!((p.data()[0] + 0.1).abs() < 1e-6);
        assert!((p.data()[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Tensor::new(vec![1], vec![5.0]).unwrap();
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = BTreeMap::from([("p".to_string(), Tensor::new(vec![1], vec![2.0 * (p.data()[0] - 1.0)]).unwrap())]);
            opt.update([("p".to_string(), &mut p)], &g);
        }
        assert!((p.data()[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn moments_round_trip_through_tensors() {
        let mut p = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let mut opt = Adam::new(0.1);
        let grads = BTreeMap::from([("w".to_string(), Tensor::new(vec![2], vec![0.3, -0.7]).unwrap())]);
        opt.update([("w".to_string(), &mut p)], &grads);
        let mut copy = Adam { step: opt.step, ..Adam::new(0.1) };
        copy.restore_moments(&opt.moment_tensors()).unwrap();
        assert_eq!(copy, opt);
        let mut q = p.clone();
        opt.update([("w".to_string(), &mut p)], &grads);
        copy.update([("w".to_string(), &mut q)], &grads);
        assert_eq!(p, q);
    }
}
