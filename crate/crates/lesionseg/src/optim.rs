//! Adam optimizer with bias correction. Updates apply in place to
//! trainable parameters only; frozen parameters stay bit-identical.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::layers::NamedParam;
use crate::tensor::Element;

#[derive(Clone)]
struct Moments<E> {
    m: Vec<E>,
    v: Vec<E>,
}

/// Per-parameter first/second moment state keyed by tensor identity.
#[derive(Clone)]
pub struct Adam<E: Element> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    state: HashMap<u64, Moments<E>>,
}

impl<E: Element> Default for Adam<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Adam<E> {
    pub fn new() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step_count: 0, state: HashMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One bias-corrected update at learning rate `lr_t`. Parameters whose
    /// `trainable` flag is clear are skipped entirely (no state decay).
    /// Non-finite gradients abort with a training error naming the tensor.
    pub fn step(&mut self, params: &[NamedParam<E>], lr_t: f64) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = E::from_f64(1.0 - self.beta1.powi(t));
        let bc2 = E::from_f64(1.0 - self.beta2.powi(t));
        let b1 = E::from_f64(self.beta1);
        let b2 = E::from_f64(self.beta2);
        let eps = E::from_f64(self.eps);
        let lr = E::from_f64(lr_t);

        for p in params {
            if !p.tensor.trainable() {
                continue;
            }
            let Some(grad) = p.tensor.grad() else { continue };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient on parameter '{}'",
                    p.name
                )));
            }
            let moments = self.state.entry(p.tensor.id()).or_insert_with(|| Moments {
                m: vec![E::zero(); grad.len()],
                v: vec![E::zero(); grad.len()],
            });
            let mut data = p.tensor.data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                moments.m[i] = b1 * moments.m[i] + (E::one() - b1) * g;
                moments.v[i] = b2 * moments.v[i] + (E::one() - b2) * g * g;
                let m_hat = moments.m[i] / bc1;
                let v_hat = moments.v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.step_count = 0;
        self.state.clear();
    }
}

#[cfg(test)]
mod tests {
    use crate::layers::ParamKind;
    use crate::tensor::Tensor;

    use super::*;

    fn scalar_param(v: f64) -> NamedParam<f64> {
        NamedParam {
            name: "p".into(),
            tensor: Tensor::param([1], vec![v]).unwrap(),
            kind: ParamKind::ConvWeight,
        }
    }

    #[test]
    fn first_step_is_a_sign_update() {
        let p = scalar_param(1.0);
        p.tensor.accumulate_grad(&[0.5]);
        let mut adam = Adam::new();
        adam.step(std::slice::from_ref(&p), 0.01).unwrap();
        let moved = 1.0 - p.tensor.to_vec()[0];
        // First bias-corrected step is about -lr * sign(g).
        assert!((moved - 0.01).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn zero_grad_leaves_parameter_but_increments_step() {
        let p = scalar_param(1.0);
        p.tensor.accumulate_grad(&[0.0]);
        let mut adam = Adam::new();
        adam.step(std::slice::from_ref(&p), 0.1).unwrap();
        assert_eq!(p.tensor.to_vec()[0], 1.0);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn hundred_steps_minimize_a_parabola() {
        // f(p) = p^2 from p = 1 at lr 0.1.
        let p = scalar_param(1.0);
        let mut adam = Adam::new();
        for _ in 0..100 {
            let value = p.tensor.to_vec()[0];
            p.tensor.zero_grad();
            p.tensor.accumulate_grad(&[2.0 * value]);
            adam.step(std::slice::from_ref(&p), 0.1).unwrap();
        }
        let end = p.tensor.to_vec()[0];
        assert!(end.abs() < 0.1, "ended at {end}");
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let p = scalar_param(3.0);
        p.tensor.accumulate_grad(&[1.0]);
        let mut adam = Adam::new();
        adam.step(std::slice::from_ref(&p), 0.0).unwrap();
        assert_eq!(p.tensor.to_vec()[0], 3.0);
    }

    #[test]
    fn frozen_parameter_is_bit_identical() {
        let p = scalar_param(0.75);
        p.tensor.set_trainable(false);
        p.tensor.accumulate_grad(&[2.0]);
        let mut adam = Adam::new();
        for _ in 0..5 {
            adam.step(std::slice::from_ref(&p), 0.1).unwrap();
        }
        assert_eq!(p.tensor.to_vec()[0].to_bits(), 0.75f64.to_bits());
    }

    #[test]
    fn nan_gradient_is_a_training_error() {
        let p = scalar_param(1.0);
        p.tensor.accumulate_grad(&[f64::NAN]);
        let mut adam = Adam::new();
        let err = adam.step(std::slice::from_ref(&p), 0.1).unwrap_err();
        assert!(matches!(err, Error::Training(_)));
    }
}
