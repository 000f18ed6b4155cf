//! Central finite-difference verification of backward-pass gradients.
//!
//! The checker evaluates the loss with forward passes only, so it stays
//! independent of the reverse-mode code it validates. Used by the test suite
//! and the acceptance gate.

use super::{Gradients, Graph, Mode, ModelParameters, NodeId, Tensor};

pub const FD_STEP: f64 = 1e-5;

/// Builds a scalar loss node from an input leaf. Must be deterministic:
/// called repeatedly under perturbed parameters and inputs.
pub trait LossBuilder {
    fn build(&self, g: &mut Graph, input: NodeId, params: &ModelParameters) -> NodeId;
}

impl<F> LossBuilder for F
where
    F: Fn(&mut Graph, NodeId, &ModelParameters) -> NodeId,
{
    fn build(&self, g: &mut Graph, input: NodeId, params: &ModelParameters) -> NodeId {
        self(g, input, params)
    }
}

fn eval_loss(builder: &dyn LossBuilder, mode: Mode, input: &Tensor, params: &ModelParameters) -> f64 {
    let mut g = Graph::new(mode);
    let x = g.input(input.clone(), true);
    let loss = builder.build(&mut g, x, params);
    g.value(loss).item()
}

fn analytic(
    builder: &dyn LossBuilder,
    mode: Mode,
    input: &Tensor,
    params: &ModelParameters,
) -> (Gradients, NodeId) {
    let mut g = Graph::new(mode);
    let x = g.input(input.clone(), true);
    let loss = builder.build(&mut g, x, params);
    (g.backward(loss).expect("backward"), x)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Maximum relative error between analytic and central finite-difference
/// gradients, over every trainable parameter element and every input element.
pub fn max_gradient_error(
    builder: &dyn LossBuilder,
    mode: Mode,
    input: &Tensor,
    params: &ModelParameters,
) -> f64 {
    let (grads, input_node) = analytic(builder, mode, input, params);
    let mut worst: f64 = 0.0;

    for name in params.trainable_names() {
        let n = params.get(&name).unwrap().len();
        for i in 0..n {
            let mut plus = params.clone();
            plus.get_mut(&name).unwrap().data_mut()[i] += FD_STEP;
            let mut minus = params.clone();
            minus.get_mut(&name).unwrap().data_mut()[i] -= FD_STEP;
            let numeric = (eval_loss(builder, mode, input, &plus)
                - eval_loss(builder, mode, input, &minus))
                / (2.0 * FD_STEP);
            let a = grads.param(&name).map(|t| t.data()[i]).unwrap_or(0.0);
            worst = worst.max(rel_err(a, numeric));
        }
    }

    let analytic_input = grads.wrt(input_node);
    for i in 0..input.len() {
        let mut plus = input.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = input.clone();
        minus.data_mut()[i] -= FD_STEP;
        let numeric = (eval_loss(builder, mode, &plus, params)
            - eval_loss(builder, mode, &minus, params))
            / (2.0 * FD_STEP);
        let a = analytic_input.map(|g| g[i]).unwrap_or(0.0);
        worst = worst.max(rel_err(a, numeric));
    }

    worst
}
