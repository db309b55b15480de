//! Trainable parameters and the Adam optimizer.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named trainable tensor with its Adam moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub grad: Option<Vec<f64>>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    step_count: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        let n = tensor.len();
        Parameter {
            name: name.into(),
            tensor,
            grad: None,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.adam_m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.adam_v
    }

    /// Adds `g` into the pending gradient.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.tensor.len() {
            return Err(Error::Shape(format!(
                "gradient of length {} for parameter `{}` with {} values",
                g.len(),
                self.name,
                self.tensor.len()
            )));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Adam with bias correction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Adam {
            lr,
            ..Adam::default()
        }
    }

    /// Applies one update to every parameter and clears their gradients.
    /// Fails without touching anything if any parameter lacks a gradient.
    pub fn step(&self, params: &mut [Parameter]) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::Invalid(format!(
                "adam step: parameter `{}` has no gradient",
                p.name
            )));
        }
        for p in params.iter_mut() {
            let grad = p.grad.take().expect("checked above");
            p.step_count += 1;
            let t = p.step_count as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let values = p.tensor.data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                p.adam_m[i] = self.beta1 * p.adam_m[i] + (1.0 - self.beta1) * g;
                p.adam_v[i] = self.beta2 * p.adam_v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = p.adam_m[i] / c1;
                let v_hat = p.adam_v[i] / c2;
                values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Parameter {
        Parameter::new("w", Tensor::scalar(v))
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let adam = Adam::with_lr(0.01);
        for g in [3.7, -0.5] {
            let mut p = [scalar_param(1.0)];
            p[0].grad = Some(vec![g]);
            adam.step(&mut p).unwrap();
            let delta = p[0].tensor.data()[0] - 1.0;
            let want = -0.01 * g.signum();
            assert!(((delta - want) / want).abs() < 1e-6, "{delta} vs {want}");
            assert!(p[0].grad.is_none());
            assert_eq!(p[0].step_count(), 1);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut p = [scalar_param(2.0)];
        p[0].grad = Some(vec![0.0]);
        Adam::default().step(&mut p).unwrap();
        assert_eq!(p[0].tensor.data()[0], 2.0);
        assert_eq!(p[0].first_moment(), &[0.0]);
        assert_eq!(p[0].second_moment(), &[0.0]);
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut p = [scalar_param(2.0), scalar_param(1.0)];
        p[0].grad = Some(vec![1.0]);
        assert!(Adam::default().step(&mut p).is_err());
        assert_eq!(p[0].tensor.data()[0], 2.0);
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        // f(w) = (w - 3)^2, reference run of 100 steps at lr 0.1.
        let adam = Adam::with_lr(0.1);
        let mut p = [scalar_param(0.0)];
        for _ in 0..100 {
            let w = p[0].tensor.data()[0];
            p[0].grad = Some(vec![2.0 * (w - 3.0)]);
            adam.step(&mut p).unwrap();
        }
        let w = p[0].tensor.data()[0];
        assert!((w - 3.0).abs() < 0.5, "w = {w}");
        assert!(p[0].second_moment().iter().all(|&v| v >= 0.0));
    }
}
