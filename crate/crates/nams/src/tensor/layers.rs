//! MLP assembly: affine stacks with the batchnorm + leaky-ReLU + dropout
//! hidden-layer pattern shared by every network in this crate.

use serde::{Deserialize, Serialize};

use super::{Graph, Mode, ModelParameters, NodeId, Tensor, TensorError};
use crate::rng::Pcg32;

/// Running-stat EMA momentum for batchnorm.
const BN_MOMENTUM: f64 = 0.1;

/// What each hidden layer applies after its affine transform.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct HiddenLayout {
    pub batchnorm: bool,
    pub leaky_slope: f64,
    pub dropout: f64,
}

impl HiddenLayout {
    /// batchnorm + leaky ReLU(0.2) + dropout(0.5), the encoder/decoder/
    /// predictor hidden-layer recipe.
    pub fn standard() -> Self {
        Self {
            batchnorm: true,
            leaky_slope: 0.2,
            dropout: 0.5,
        }
    }

    /// batchnorm + plain ReLU, no dropout (direct-regression recipe).
    pub fn relu_batchnorm() -> Self {
        Self {
            batchnorm: true,
            leaky_slope: 0.0,
            dropout: 0.0,
        }
    }

    pub fn plain(leaky_slope: f64) -> Self {
        Self {
            batchnorm: false,
            leaky_slope,
            dropout: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub enum OutputActivation {
    Linear,
    Sigmoid,
}

/// A fully-connected network: hidden layers under a shared [`HiddenLayout`],
/// then a linear (or sigmoid) output layer. Parameters live in a
/// [`ModelParameters`] store under `{name}.{layer}.{field}` keys.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Mlp {
    pub name: String,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub layout: HiddenLayout,
    pub output_activation: OutputActivation,
}

impl Mlp {
    fn dims(&self) -> Vec<(usize, usize)> {
        let mut sizes = vec![self.input_dim];
        sizes.extend_from_slice(&self.hidden);
        sizes.push(self.output_dim);
        sizes.windows(2).map(|w| (w[0], w[1])).collect()
    }

    fn key(&self, layer: usize, field: &str) -> String {
        format!("{}.{}.{}", self.name, layer, field)
    }

    /// Register freshly initialized parameters (He-style fan-in scaling on
    /// weights, zero biases, identity batchnorm).
    pub fn init_params(&self, params: &mut ModelParameters, rng: &mut Pcg32) {
        let n_layers = self.dims().len();
        for (layer, (fan_in, fan_out)) in self.dims().into_iter().enumerate() {
            let gain = 2.0 / (1.0 + self.layout.leaky_slope * self.layout.leaky_slope);
            let std = (gain / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.next_normal() * std)
                .collect();
            params.insert(&self.key(layer, "w"), Tensor::new(vec![fan_in, fan_out], w));
            params.insert(&self.key(layer, "b"), Tensor::zeros(vec![fan_out]));
            let is_hidden = layer + 1 < n_layers;
            if is_hidden && self.layout.batchnorm {
                params.insert(
                    &self.key(layer, "bn_gamma"),
                    Tensor::new(vec![fan_out], vec![1.0; fan_out]),
                );
                params.insert(&self.key(layer, "bn_beta"), Tensor::zeros(vec![fan_out]));
                params.insert_non_trainable(
                    &self.key(layer, "bn_mean"),
                    Tensor::zeros(vec![fan_out]),
                );
                params.insert_non_trainable(
                    &self.key(layer, "bn_var"),
                    Tensor::new(vec![fan_out], vec![1.0; fan_out]),
                );
            }
        }
    }

    /// Training-mode pass: batchnorm uses batch statistics (and folds them
    /// into the running estimates), dropout is live and draws from `rng`.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        x: NodeId,
        params: &mut ModelParameters,
        rng: &mut Pcg32,
    ) -> Result<NodeId, TensorError> {
        assert_eq!(g.mode(), Mode::Train, "forward_train on an eval graph");
        self.forward_inner(g, x, params, Some(rng))
    }

    /// Inference-mode pass: running statistics, no dropout, immutable params.
    pub fn forward_eval(
        &self,
        g: &mut Graph,
        x: NodeId,
        params: &ModelParameters,
    ) -> Result<NodeId, TensorError> {
        assert_eq!(g.mode(), Mode::Eval, "forward_eval on a train graph");
        // Eval never mutates; the unsafe-free way to share one code path is a
        // local clone of the (small) running-stat vectors, read via `params`.
        let mut h = x;
        let n_layers = self.dims().len();
        for (layer, _) in self.dims().into_iter().enumerate() {
            let w = g.param(params, &self.key(layer, "w"))?;
            let b = g.param(params, &self.key(layer, "b"))?;
            h = g.affine(h, w, b)?;
            let is_hidden = layer + 1 < n_layers;
            if is_hidden {
                if self.layout.batchnorm {
                    let gamma = g.param(params, &self.key(layer, "bn_gamma"))?;
                    let beta = g.param(params, &self.key(layer, "bn_beta"))?;
                    let mean = params.get(&self.key(layer, "bn_mean")).unwrap().data().to_vec();
                    let var = params.get(&self.key(layer, "bn_var")).unwrap().data().to_vec();
                    let (id, _) = g.batchnorm(h, gamma, beta, &mean, &var)?;
                    h = id;
                }
                h = g.leaky_relu(h, self.layout.leaky_slope);
            } else if self.output_activation == OutputActivation::Sigmoid {
                h = g.sigmoid(h);
            }
        }
        Ok(h)
    }

    fn forward_inner(
        &self,
        g: &mut Graph,
        x: NodeId,
        params: &mut ModelParameters,
        mut rng: Option<&mut Pcg32>,
    ) -> Result<NodeId, TensorError> {
        let mut h = x;
        let n_layers = self.dims().len();
        for (layer, _) in self.dims().into_iter().enumerate() {
            let w = g.param(params, &self.key(layer, "w"))?;
            let b = g.param(params, &self.key(layer, "b"))?;
            h = g.affine(h, w, b)?;
            let is_hidden = layer + 1 < n_layers;
            if is_hidden {
                if self.layout.batchnorm {
                    let gamma = g.param(params, &self.key(layer, "bn_gamma"))?;
                    let beta = g.param(params, &self.key(layer, "bn_beta"))?;
                    let mean_key = self.key(layer, "bn_mean");
                    let var_key = self.key(layer, "bn_var");
                    let mean = params.get(&mean_key).unwrap().data().to_vec();
                    let var = params.get(&var_key).unwrap().data().to_vec();
                    let (id, stats) = g.batchnorm(h, gamma, beta, &mean, &var)?;
                    h = id;
                    if let Some(stats) = stats {
                        params.update_running_stat(&mean_key, &stats.mean, BN_MOMENTUM);
                        params.update_running_stat(&var_key, &stats.var, BN_MOMENTUM);
                    }
                }
                h = g.leaky_relu(h, self.layout.leaky_slope);
                if self.layout.dropout > 0.0 {
                    let rng = rng
                        .as_deref_mut()
                        .expect("dropout in train mode needs an rng");
                    h = g.dropout(h, self.layout.dropout, rng);
                }
            } else if self.output_activation == OutputActivation::Sigmoid {
                h = g.sigmoid(h);
            }
        }
        Ok(h)
    }
}
