//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Ops are appended in execution order, so node indices already form a
//! topological order; backward is a single reverse sweep that visits every
//! node exactly once.

use std::collections::HashMap;

use super::{matmul, matmul_a_bt_acc, matmul_at_b_acc, Tensor, TensorError};
use crate::rng::Pcg32;

pub type NodeId = usize;

const BN_EPS: f64 = 1e-5;
const BCE_CLAMP: f64 = 1e-7;

/// Whether stochastic/statistics layers behave as in training or inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: NodeId, w: NodeId, b: NodeId },
    LeakyRelu { x: NodeId, slope: f64 },
    Sigmoid { x: NodeId },
    BatchNormTrain { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor, inv_std: Vec<f64> },
    BatchNormEval { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor, inv_std: Vec<f64> },
    Dropout { x: NodeId, mask: Vec<f64> },
    Concat { a: NodeId, b: NodeId },
    Slice { x: NodeId, start: usize, len: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    Exp { x: NodeId },
    Mse { a: NodeId, b: NodeId },
    Bce { pred: NodeId, target: NodeId },
    KlGaussian { mu: NodeId, logvar: NodeId },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Batch statistics observed by a train-mode batchnorm, handed back to the
/// caller so it can fold them into the running estimates.
#[derive(Clone, Debug)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    // leaf node -> parameter name, for gradient collection
    param_leaves: Vec<(NodeId, String)>,
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            param_leaves: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Constant leaf; never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, false)
    }

    /// Input leaf; gradient is tracked when `requires_grad` is set (used by
    /// the latent search, which differentiates with respect to its input).
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, t, requires_grad)
    }

    /// Leaf bound to a named parameter; snapshots the current tensor value.
    pub fn param(
        &mut self,
        params: &super::ModelParameters,
        name: &str,
    ) -> Result<NodeId, TensorError> {
        let entry = params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
        let id = self.push(Op::Leaf, entry.clone(), true);
        self.param_leaves.push((id, name.to_string()));
        Ok(id)
    }

    fn check_same_shape(&self, what: &str, a: NodeId, b: NodeId) -> Result<(), TensorError> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(TensorError::ShapeMismatch {
                node: what.to_string(),
                expected: self.nodes[a].value.shape().to_vec(),
                got: self.nodes[b].value.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// y = x·W + b for x [B,I], W [I,O], b [O].
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (batch, in_dim) = self.nodes[x].value.rows_cols();
        let (w_in, out_dim) = self.nodes[w].value.rows_cols();
        if w_in != in_dim || self.nodes[b].value.len() != out_dim {
            return Err(TensorError::ShapeMismatch {
                node: "affine".to_string(),
                expected: vec![in_dim, out_dim],
                got: self.nodes[w].value.shape().to_vec(),
            });
        }
        let mut y = matmul(
            self.nodes[x].value.data(),
            self.nodes[w].value.data(),
            batch,
            in_dim,
            out_dim,
        );
        let bias = self.nodes[b].value.data();
        for r in 0..batch {
            for c in 0..out_dim {
                y[r * out_dim + c] += bias[c];
            }
        }
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(
            Op::Affine { x, w, b },
            Tensor::new(vec![batch, out_dim], y),
            rg,
        ))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let v = self.nodes[x]
            .value
            .map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.requires(x);
        self.push(Op::LeakyRelu { x, slope }, v, rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.map(|v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.requires(x);
        self.push(Op::Sigmoid { x }, v, rg)
    }

    /// Batch normalization over the batch axis of x [B,F], with affine
    /// (gamma, beta). Train mode normalizes by batch statistics and reports
    /// them; eval mode uses the provided running statistics.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<(NodeId, Option<BnBatchStats>), TensorError> {
        let (batch, feat) = self.nodes[x].value.rows_cols();
        let (mean, var, stats) = match self.mode {
            Mode::Train => {
                if batch < 2 {
                    return Err(TensorError::BatchnormBatchOne);
                }
                let xd = self.nodes[x].value.data();
                let mut mean = vec![0.0; feat];
                for r in 0..batch {
                    for c in 0..feat {
                        mean[c] += xd[r * feat + c];
                    }
                }
                for m in mean.iter_mut() {
                    *m /= batch as f64;
                }
                let mut var = vec![0.0; feat];
                for r in 0..batch {
                    for c in 0..feat {
                        let d = xd[r * feat + c] - mean[c];
                        var[c] += d * d;
                    }
                }
                for v in var.iter_mut() {
                    *v /= batch as f64;
                }
                let stats = BnBatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(stats))
            }
            Mode::Eval => (running_mean.to_vec(), running_var.to_vec(), None),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let xd = self.nodes[x].value.data();
        let mut xhat = vec![0.0; batch * feat];
        for r in 0..batch {
            for c in 0..feat {
                xhat[r * feat + c] = (xd[r * feat + c] - mean[c]) * inv_std[c];
            }
        }
        let g = self.nodes[gamma].value.data();
        let bt = self.nodes[beta].value.data();
        let mut y = vec![0.0; batch * feat];
        for r in 0..batch {
            for c in 0..feat {
                y[r * feat + c] = g[c] * xhat[r * feat + c] + bt[c];
            }
        }
        let xhat = Tensor::new(vec![batch, feat], xhat);
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let op = match self.mode {
            Mode::Train => Op::BatchNormTrain { x, gamma, beta, xhat, inv_std },
            Mode::Eval => Op::BatchNormEval { x, gamma, beta, xhat, inv_std },
        };
        let id = self.push(op, Tensor::new(vec![batch, feat], y), rg);
        Ok((id, stats))
    }

    /// Inverted dropout: train mode zeroes units with probability `rate` and
    /// scales survivors by 1/(1-rate); eval mode is the identity.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut Pcg32) -> NodeId {
        assert!((0.0..1.0).contains(&rate), "dropout rate {rate}");
        if self.mode == Mode::Eval || rate == 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let n = self.nodes[x].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.next_f64() < keep { scale } else { 0.0 })
            .collect();
        let xd = self.nodes[x].value.data();
        let y: Vec<f64> = xd.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.nodes[x].value.shape().to_vec();
        let rg = self.requires(x);
        self.push(Op::Dropout { x, mask }, Tensor::new(shape, y), rg)
    }

    /// Concatenate along the feature axis: [B,Fa] ++ [B,Fb] -> [B,Fa+Fb].
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ra, ca) = self.nodes[a].value.rows_cols();
        let (rb, cb) = self.nodes[b].value.rows_cols();
        if ra != rb {
            return Err(TensorError::ShapeMismatch {
                node: "concat".to_string(),
                expected: vec![ra],
                got: vec![rb],
            });
        }
        let mut y = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            y.extend_from_slice(self.nodes[a].value.row(r));
            y.extend_from_slice(self.nodes[b].value.row(r));
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(
            Op::Concat { a, b },
            Tensor::new(vec![ra, ca + cb], y),
            rg,
        ))
    }

    /// Columns [start, start+len) of x.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (rows, cols) = self.nodes[x].value.rows_cols();
        assert!(start + len <= cols, "slice out of range");
        let xd = self.nodes[x].value.data();
        let mut y = Vec::with_capacity(rows * len);
        for r in 0..rows {
            y.extend_from_slice(&xd[r * cols + start..r * cols + start + len]);
        }
        let rg = self.requires(x);
        self.push(Op::Slice { x, start, len }, Tensor::new(vec![rows, len], y), rg)
    }

    /// Split the feature axis into consecutive blocks of the given sizes.
    pub fn split(&mut self, x: NodeId, sizes: &[usize]) -> Vec<NodeId> {
        let (_, cols) = self.nodes[x].value.rows_cols();
        assert_eq!(sizes.iter().sum::<usize>(), cols, "split sizes must cover all columns");
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &len in sizes {
            out.push(self.slice(x, start, len));
            start += len;
        }
        out
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check_same_shape("add", a, b)?;
        let v: Vec<f64> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a].value.shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Add { a, b }, Tensor::new(shape, v), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check_same_shape("sub", a, b)?;
        let v: Vec<f64> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a].value.shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Sub { a, b }, Tensor::new(shape, v), rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check_same_shape("mul", a, b)?;
        let v: Vec<f64> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a].value.shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Mul { a, b }, Tensor::new(shape, v), rg))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.nodes[x].value.map(|v| c * v);
        let rg = self.requires(x);
        self.push(Op::Scale { x, c }, v, rg)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.map(f64::exp);
        let rg = self.requires(x);
        self.push(Op::Exp { x }, v, rg)
    }

    /// Mean squared error over all elements; scalar output.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check_same_shape("mse", a, b)?;
        let n = self.nodes[a].value.len() as f64;
        let s: f64 = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Mse { a, b }, Tensor::scalar(s / n), rg))
    }

    /// Binary cross-entropy, mean over all elements. Predictions are clamped
    /// to [1e-7, 1-1e-7] before the logs; gradients use the clamped values.
    pub fn bce(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, TensorError> {
        self.check_same_shape("bce", pred, target)?;
        let n = self.nodes[pred].value.len() as f64;
        let s: f64 = self.nodes[pred]
            .value
            .data()
            .iter()
            .zip(self.nodes[target].value.data())
            .map(|(p, t)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let rg = self.requires(pred) || self.requires(target);
        Ok(self.push(Op::Bce { pred, target }, Tensor::scalar(s / n), rg))
    }

    /// Closed-form KL(N(mu, diag sigma^2) || N(0, I)) with sigma^2 = exp(logvar),
    /// averaged over batch rows: mean_b 1/2 sum_f (mu^2 + e^lv - 1 - lv).
    pub fn kl_gaussian(&mut self, mu: NodeId, logvar: NodeId) -> Result<NodeId, TensorError> {
        self.check_same_shape("kl_gaussian", mu, logvar)?;
        let (rows, _) = self.nodes[mu].value.rows_cols();
        let s: f64 = self.nodes[mu]
            .value
            .data()
            .iter()
            .zip(self.nodes[logvar].value.data())
            .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
            .sum();
        let rg = self.requires(mu) || self.requires(logvar);
        Ok(self.push(
            Op::KlGaussian { mu, logvar },
            Tensor::scalar(s / rows as f64),
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss node. Returns gradients keyed by
    /// parameter name (accumulated across reuses) and by node id for marked
    /// inputs. Parameters that the loss never reached are absent here; the
    /// optimizer treats them as zero.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        if !self.nodes[loss].value.is_scalar() {
            return Err(TensorError::LossNotScalar(
                self.nodes[loss].value.shape().to_vec(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let dy = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                grads[id] = Some(dy);
                continue;
            }
            self.propagate(id, &dy, &mut grads);
            grads[id] = Some(dy);
        }

        let mut by_param: HashMap<String, Tensor> = HashMap::new();
        for (node, name) in &self.param_leaves {
            if let Some(g) = &grads[*node] {
                let shape = self.nodes[*node].value.shape().to_vec();
                by_param
                    .entry(name.clone())
                    .and_modify(|acc| {
                        for (a, b) in acc.data_mut().iter_mut().zip(g) {
                            *a += b;
                        }
                    })
                    .or_insert_with(|| Tensor::new(shape, g.clone()));
            }
        }
        Ok(Gradients {
            by_param,
            by_node: grads,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: NodeId, delta: &[f64]) {
        if !self.nodes[target].requires_grad {
            return;
        }
        match &mut grads[target] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => grads[target] = Some(delta.to_vec()),
        }
    }

    fn propagate(&self, id: NodeId, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (batch, in_dim) = self.nodes[*x].value.rows_cols();
                let (_, out_dim) = self.nodes[*w].value.rows_cols();
                if self.nodes[*x].requires_grad {
                    let mut dx = vec![0.0; batch * in_dim];
                    matmul_a_bt_acc(dy, self.nodes[*w].value.data(), batch, out_dim, in_dim, &mut dx);
                    self.accumulate(grads, *x, &dx);
                }
                if self.nodes[*w].requires_grad {
                    let mut dw = vec![0.0; in_dim * out_dim];
                    matmul_at_b_acc(
                        self.nodes[*x].value.data(),
                        dy,
                        in_dim,
                        batch,
                        out_dim,
                        &mut dw,
                    );
                    self.accumulate(grads, *w, &dw);
                }
                if self.nodes[*b].requires_grad {
                    let mut db = vec![0.0; out_dim];
                    for r in 0..batch {
                        for c in 0..out_dim {
                            db[c] += dy[r * out_dim + c];
                        }
                    }
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xd = self.nodes[*x].value.data();
                let dx: Vec<f64> = xd
                    .iter()
                    .zip(dy)
                    .map(|(v, g)| if *v > 0.0 { *g } else { slope * g })
                    .collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Sigmoid { x } => {
                let s = self.nodes[id].value.data();
                let dx: Vec<f64> = s.iter().zip(dy).map(|(s, g)| g * s * (1.0 - s)).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                let (batch, feat) = xhat.rows_cols();
                let bf = batch as f64;
                let g = self.nodes[*gamma].value.data();
                let xh = xhat.data();
                if self.nodes[*gamma].requires_grad {
                    let mut dg = vec![0.0; feat];
                    for r in 0..batch {
                        for c in 0..feat {
                            dg[c] += dy[r * feat + c] * xh[r * feat + c];
                        }
                    }
                    self.accumulate(grads, *gamma, &dg);
                }
                if self.nodes[*beta].requires_grad {
                    let mut db = vec![0.0; feat];
                    for r in 0..batch {
                        for c in 0..feat {
                            db[c] += dy[r * feat + c];
                        }
                    }
                    self.accumulate(grads, *beta, &db);
                }
                if self.nodes[*x].requires_grad {
                    // dxhat = dy * gamma; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
                    let mut mean_dxh = vec![0.0; feat];
                    let mut mean_dxh_xh = vec![0.0; feat];
                    for r in 0..batch {
                        for c in 0..feat {
                            let dxh = dy[r * feat + c] * g[c];
                            mean_dxh[c] += dxh;
                            mean_dxh_xh[c] += dxh * xh[r * feat + c];
                        }
                    }
                    for c in 0..feat {
                        mean_dxh[c] /= bf;
                        mean_dxh_xh[c] /= bf;
                    }
                    let mut dx = vec![0.0; batch * feat];
                    for r in 0..batch {
                        for c in 0..feat {
                            let dxh = dy[r * feat + c] * g[c];
                            dx[r * feat + c] = inv_std[c]
                                * (dxh - mean_dxh[c] - xh[r * feat + c] * mean_dxh_xh[c]);
                        }
                    }
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::BatchNormEval { x, gamma, beta, xhat, inv_std } => {
                let (batch, feat) = xhat.rows_cols();
                let g = self.nodes[*gamma].value.data();
                let xh = xhat.data();
                if self.nodes[*gamma].requires_grad {
                    let mut dg = vec![0.0; feat];
                    for r in 0..batch {
                        for c in 0..feat {
                            dg[c] += dy[r * feat + c] * xh[r * feat + c];
                        }
                    }
                    self.accumulate(grads, *gamma, &dg);
                }
                if self.nodes[*beta].requires_grad {
                    let mut db = vec![0.0; feat];
                    for r in 0..batch {
                        for c in 0..feat {
                            db[c] += dy[r * feat + c];
                        }
                    }
                    self.accumulate(grads, *beta, &db);
                }
                if self.nodes[*x].requires_grad {
                    // Running stats are constants, so dx is a plain rescale.
                    let mut dx = vec![0.0; batch * feat];
                    for r in 0..batch {
                        for c in 0..feat {
                            dx[r * feat + c] = dy[r * feat + c] * g[c] * inv_std[c];
                        }
                    }
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::Dropout { x, mask } => {
                let dx: Vec<f64> = dy.iter().zip(mask).map(|(g, m)| g * m).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Concat { a, b } => {
                let (rows, ca) = self.nodes[*a].value.rows_cols();
                let (_, cb) = self.nodes[*b].value.rows_cols();
                let cols = ca + cb;
                if self.nodes[*a].requires_grad {
                    let mut da = vec![0.0; rows * ca];
                    for r in 0..rows {
                        da[r * ca..(r + 1) * ca].copy_from_slice(&dy[r * cols..r * cols + ca]);
                    }
                    self.accumulate(grads, *a, &da);
                }
                if self.nodes[*b].requires_grad {
                    let mut db = vec![0.0; rows * cb];
                    for r in 0..rows {
                        db[r * cb..(r + 1) * cb]
                            .copy_from_slice(&dy[r * cols + ca..(r + 1) * cols]);
                    }
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Slice { x, start, len } => {
                let (rows, cols) = self.nodes[*x].value.rows_cols();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&dy[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, dy);
                self.accumulate(grads, *b, dy);
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, dy);
                let neg: Vec<f64> = dy.iter().map(|g| -g).collect();
                self.accumulate(grads, *b, &neg);
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].requires_grad {
                    let da: Vec<f64> = dy
                        .iter()
                        .zip(self.nodes[*b].value.data())
                        .map(|(g, v)| g * v)
                        .collect();
                    self.accumulate(grads, *a, &da);
                }
                if self.nodes[*b].requires_grad {
                    let db: Vec<f64> = dy
                        .iter()
                        .zip(self.nodes[*a].value.data())
                        .map(|(g, v)| g * v)
                        .collect();
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = dy.iter().map(|g| g * c).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Exp { x } => {
                let v = self.nodes[id].value.data();
                let dx: Vec<f64> = dy.iter().zip(v).map(|(g, e)| g * e).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Mse { a, b } => {
                let n = self.nodes[*a].value.len() as f64;
                let scale = 2.0 * dy[0] / n;
                let ad = self.nodes[*a].value.data();
                let bd = self.nodes[*b].value.data();
                if self.nodes[*a].requires_grad {
                    let da: Vec<f64> = ad.iter().zip(bd).map(|(x, y)| scale * (x - y)).collect();
                    self.accumulate(grads, *a, &da);
                }
                if self.nodes[*b].requires_grad {
                    let db: Vec<f64> = ad.iter().zip(bd).map(|(x, y)| -scale * (x - y)).collect();
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Bce { pred, target } => {
                let n = self.nodes[*pred].value.len() as f64;
                let scale = dy[0] / n;
                let pd = self.nodes[*pred].value.data();
                let td = self.nodes[*target].value.data();
                if self.nodes[*pred].requires_grad {
                    let dp: Vec<f64> = pd
                        .iter()
                        .zip(td)
                        .map(|(p, t)| {
                            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                            scale * (-t / p + (1.0 - t) / (1.0 - p))
                        })
                        .collect();
                    self.accumulate(grads, *pred, &dp);
                }
                if self.nodes[*target].requires_grad {
                    let dt: Vec<f64> = pd
                        .iter()
                        .map(|p| {
                            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                            scale * (-(p.ln()) + (1.0 - p).ln())
                        })
                        .collect();
                    self.accumulate(grads, *target, &dt);
                }
            }
            Op::KlGaussian { mu, logvar } => {
                let (rows, _) = self.nodes[*mu].value.rows_cols();
                let scale = dy[0] / rows as f64;
                if self.nodes[*mu].requires_grad {
                    let dm: Vec<f64> = self.nodes[*mu]
                        .value
                        .data()
                        .iter()
                        .map(|m| scale * m)
                        .collect();
                    self.accumulate(grads, *mu, &dm);
                }
                if self.nodes[*logvar].requires_grad {
                    let dlv: Vec<f64> = self.nodes[*logvar]
                        .value
                        .data()
                        .iter()
                        .map(|lv| scale * 0.5 * (lv.exp() - 1.0))
                        .collect();
                    self.accumulate(grads, *logvar, &dlv);
                }
            }
        }
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    by_param: HashMap<String, Tensor>,
    by_node: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradients supplied directly by name, for optimizer updates computed
    /// outside the graph (e.g. score-function estimators).
    pub fn from_named(entries: Vec<(String, Tensor)>) -> Self {
        Self {
            by_param: entries.into_iter().collect(),
            by_node: Vec::new(),
        }
    }

    /// Gradient for a named parameter; parameters the loss never reached
    /// report `None` (treated as zero downstream).
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.by_param.get(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_param.iter()
    }

    /// Gradient with respect to a marked input node.
    pub fn wrt(&self, node: NodeId) -> Option<&[f64]> {
        self.by_node.get(node).and_then(|g| g.as_deref())
    }
}
