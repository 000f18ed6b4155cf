//! ADAM parameter updates with bias correction.

use serde::{Deserialize, Serialize};

use super::{Gradients, ModelParameters, TensorError};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.learning_rate > 0.0) {
            return Err(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(format!("betas must be in (0,1), got {} {}", self.beta1, self.beta2));
        }
        if !(self.epsilon > 0.0) {
            return Err(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        Ok(())
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

/// One ADAM step over every trainable parameter. Parameters without a
/// gradient in `grads` receive a zero gradient: their values stay fixed but
/// their step count still advances.
pub fn adam_step(
    params: &mut ModelParameters,
    grads: &Gradients,
    config: &AdamConfig,
) -> Result<(), TensorError> {
    adam_step_decayed(params, grads, config, 0.0)
}

/// ADAM with decoupled weight decay: w -= lr * (update + decay * w).
pub fn adam_step_decayed(
    params: &mut ModelParameters,
    grads: &Gradients,
    config: &AdamConfig,
    weight_decay: f64,
) -> Result<(), TensorError> {
    let names = params.trainable_names();
    for name in names {
        let grad = grads.param(&name);
        if let Some(g) = grad {
            if !g.all_finite() {
                return Err(TensorError::NonFiniteGradient(name));
            }
        }
        let (tensor, adam) = params
            .tensor_and_adam_mut(&name)
            .expect("trainable name must exist");
        adam.step += 1;
        let t = adam.step;
        let bc1 = 1.0 - config.beta1.powi(t as i32);
        let bc2 = 1.0 - config.beta2.powi(t as i32);
        let data = tensor.data_mut();
        for i in 0..data.len() {
            let gi = grad.map(|g| g.data()[i]).unwrap_or(0.0);
            adam.m[i] = config.beta1 * adam.m[i] + (1.0 - config.beta1) * gi;
            adam.v[i] = config.beta2 * adam.v[i] + (1.0 - config.beta2) * gi * gi;
            let m_hat = adam.m[i] / bc1;
            let v_hat = adam.v[i] / bc2;
            data[i] -= config.learning_rate
                * (m_hat / (v_hat.sqrt() + config.epsilon) + weight_decay * data[i]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Mode, Tensor};

    #[test]
    fn zero_gradient_is_fixed_point_but_counts_steps() {
        let mut params = ModelParameters::new();
        params.insert("w", Tensor::new(vec![1], vec![0.7]));
        // Build a loss that never touches w: gradient map is empty.
        let mut g = Graph::new(Mode::Train);
        let c = g.input(Tensor::scalar(1.0), true);
        let loss = g.mse(c, c).unwrap();
        let grads = g.backward(loss).unwrap();
        let cfg = AdamConfig::new(0.01);
        adam_step(&mut params, &grads, &cfg).unwrap();
        assert_eq!(params.get("w").unwrap().data()[0], 0.7);
        assert_eq!(params.step_count("w"), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // f(w) = w  =>  g = 1; bias-corrected first ADAM step is ~lr.
        let mut params = ModelParameters::new();
        params.insert("w", Tensor::new(vec![1], vec![0.0]));
        let mut g = Graph::new(Mode::Train);
        let w = g.param(&params, "w").unwrap();
        let one = g.constant(Tensor::scalar(1.0));
        let lin = g.mul(w, one).unwrap(); // loss = w, gradient 1
        let grads = g.backward(lin).unwrap();
        let cfg = AdamConfig::new(0.01);
        adam_step(&mut params, &grads, &cfg).unwrap();
        let w_after = params.get("w").unwrap().data()[0];
        assert!((w_after + 0.01).abs() < 1e-6, "w after one step: {w_after}");
    }

    #[test]
    fn converges_on_quadratic() {
        // f(w) = (w-2)^2 minimized at 2 within 500 steps at lr 0.05.
        let mut params = ModelParameters::new();
        params.insert("w", Tensor::new(vec![1], vec![0.0]));
        let cfg = AdamConfig::new(0.05);
        for _ in 0..500 {
            let mut g = Graph::new(Mode::Train);
            let w = g.param(&params, "w").unwrap();
            let target = g.constant(Tensor::scalar(2.0));
            let loss = g.mse(w, target).unwrap();
            let grads = g.backward(loss).unwrap();
            adam_step(&mut params, &grads, &cfg).unwrap();
        }
        let w = params.get("w").unwrap().data()[0];
        assert!((w - 2.0).abs() < 1e-3, "w = {w}");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut params = ModelParameters::new();
        params.insert("bad", Tensor::new(vec![1], vec![1.0]));
        let mut g = Graph::new(Mode::Train);
        let w = g.param(&params, "bad").unwrap();
        let inf = g.constant(Tensor::scalar(f64::INFINITY));
        let lin = g.mul(w, inf).unwrap();
        let grads = g.backward(lin).unwrap();
        let err = adam_step(&mut params, &grads, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("bad"));
    }
}
