//! Direct regression baseline: a feedforward network trained with MSE to map
//! averaged image features straight to the design vector.

use serde::{Deserialize, Serialize};

use super::BaselineError;
use crate::features::FeatureVector;
use crate::rng::Pcg32;
use crate::sim::DesignVector;
use crate::tensor::{
    adam_step_decayed, AdamConfig, Graph, HiddenLayout, Mlp, Mode, ModelParameters,
    OutputActivation, Tensor,
};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DrConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Decoupled L2 weight decay applied with each ADAM step.
    pub weight_decay: f64,
    pub train_frac: f64,
    pub seed: u64,
}

impl DrConfig {
    /// Five 500-unit hidden layers, lr 1e-3, batch 1000, 80/20 split,
    /// regularizer strength 0.5.
    pub fn paper_defaults(seed: u64) -> Self {
        Self {
            hidden: vec![500; 5],
            epochs: 400,
            batch: 1000,
            adam: AdamConfig::new(1e-3),
            weight_decay: 0.5,
            train_frac: 0.8,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DrModel {
    pub mlp: Mlp,
    pub params: ModelParameters,
    pub k_flat: usize,
    pub k_sloped: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DrCurvePoint {
    pub epoch: usize,
    pub train_mse: f64,
    pub test_mse: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DrReport {
    pub curves: Vec<DrCurvePoint>,
    /// Held-out MSE of always predicting the training-set mean design.
    pub mean_predictor_mse: f64,
}

impl DrModel {
    pub fn save(&self, dir: &std::path::Path) -> Result<(), BaselineError> {
        std::fs::create_dir_all(dir).map_err(|e| BaselineError::Io(e.to_string()))?;
        let meta = serde_json::json!({
            "mlp": self.mlp,
            "k_flat": self.k_flat,
            "k_sloped": self.k_sloped,
        });
        std::fs::write(
            dir.join("dr_config.json"),
            serde_json::to_string_pretty(&meta).map_err(|e| BaselineError::Io(e.to_string()))?,
        )
        .map_err(|e| BaselineError::Io(e.to_string()))?;
        self.params
            .save(&dir.join("dr_params.json"))
            .map_err(|e| BaselineError::Io(e.to_string()))?;
        Ok(())
    }

    pub fn load(dir: &std::path::Path) -> Result<Self, BaselineError> {
        let meta: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.join("dr_config.json"))
                .map_err(|e| BaselineError::Io(e.to_string()))?,
        )
        .map_err(|e| BaselineError::Io(e.to_string()))?;
        let mlp: Mlp = serde_json::from_value(meta["mlp"].clone())
            .map_err(|e| BaselineError::Io(e.to_string()))?;
        let k_flat = meta["k_flat"].as_u64().unwrap_or(0) as usize;
        let k_sloped = meta["k_sloped"].as_u64().unwrap_or(0) as usize;
        let params = ModelParameters::load(&dir.join("dr_params.json"))
            .map_err(|e| BaselineError::Io(e.to_string()))?;
        Ok(Self {
            mlp,
            params,
            k_flat,
            k_sloped,
        })
    }
}

/// Train the regressor on (averaged features, design) pairs sampled
/// uniformly over the design space.
pub fn train_dr(
    dataset: &[(FeatureVector, DesignVector)],
    cfg: &DrConfig,
) -> Result<(DrModel, DrReport), BaselineError> {
    if dataset.len() < 4 {
        return Err(BaselineError::Config(format!(
            "dr training needs at least 4 examples, got {}",
            dataset.len()
        )));
    }
    cfg.adam.validate().map_err(BaselineError::Config)?;
    let feat_dim = dataset[0].0.dim();
    let k_flat = dataset[0].1.flat.len();
    let k_sloped = dataset[0].1.sloped.len();
    let design_dim = k_flat + k_sloped;

    let mlp = Mlp {
        name: "dr".to_string(),
        input_dim: feat_dim,
        hidden: cfg.hidden.clone(),
        output_dim: design_dim,
        layout: HiddenLayout::relu_batchnorm(),
        output_activation: OutputActivation::Linear,
    };
    let mut params = ModelParameters::new();
    let mut init_rng = Pcg32::with_stream(cfg.seed, 0xD0);
    mlp.init_params(&mut params, &mut init_rng);

    let mut split_rng = Pcg32::with_stream(cfg.seed, 0xD1);
    let order = split_rng.shuffled_indices(dataset.len());
    let n_train = ((dataset.len() as f64 * cfg.train_frac) as usize).clamp(2, dataset.len() - 1);
    let train_idx = &order[..n_train];
    let test_idx = &order[n_train..];

    // mean-design predictor as the sanity floor
    let mut mean_design = vec![0.0; design_dim];
    for &i in train_idx {
        for (m, v) in mean_design.iter_mut().zip(dataset[i].1.concat()) {
            *m += v;
        }
    }
    for m in mean_design.iter_mut() {
        *m /= n_train as f64;
    }
    let mean_predictor_mse = mse_over(dataset, test_idx, |_| mean_design.clone());

    let mut model = DrModel {
        mlp,
        params,
        k_flat,
        k_sloped,
    };
    let mut epoch_rng = Pcg32::with_stream(cfg.seed, 0xD2);
    let mut drop_rng = Pcg32::with_stream(cfg.seed, 0xD3);
    let mut curves = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let perm = epoch_rng.shuffled_indices(train_idx.len());
        let shuffled: Vec<usize> = perm.iter().map(|&i| train_idx[i]).collect();
        let mut train_mse = 0.0;
        let mut batches = 0.0f64;
        for chunk in shuffled.chunks(cfg.batch.max(2)) {
            if chunk.len() < 2 {
                continue;
            }
            let x_rows: Vec<Vec<f64>> = chunk
                .iter()
                .map(|&i| dataset[i].0.values().to_vec())
                .collect();
            let d_rows: Vec<Vec<f64>> = chunk.iter().map(|&i| dataset[i].1.concat()).collect();
            let mut g = Graph::new(Mode::Train);
            let x = g.input(Tensor::from_rows(&x_rows), false);
            let out = model
                .mlp
                .forward_train(&mut g, x, &mut model.params, &mut drop_rng)
                .map_err(BaselineError::Tensor)?;
            let target = g.constant(Tensor::from_rows(&d_rows));
            let loss = g.mse(out, target).map_err(BaselineError::Tensor)?;
            let loss_val = g.value(loss).item();
            if !loss_val.is_finite() {
                return Err(BaselineError::Diverged { epoch });
            }
            let grads = g.backward(loss).map_err(BaselineError::Tensor)?;
            adam_step_decayed(&mut model.params, &grads, &cfg.adam, cfg.weight_decay)
                .map_err(BaselineError::Tensor)?;
            train_mse += loss_val;
            batches += 1.0;
        }
        let test_mse = if test_idx.is_empty() {
            f64::NAN
        } else {
            let preds = predict_rows(&model, dataset, test_idx)?;
            mse_against(dataset, test_idx, &preds)
        };
        curves.push(DrCurvePoint {
            epoch,
            train_mse: train_mse / batches.max(1.0),
            test_mse,
        });
    }
    Ok((
        model,
        DrReport {
            curves,
            mean_predictor_mse,
        },
    ))
}

fn predict_rows(
    model: &DrModel,
    dataset: &[(FeatureVector, DesignVector)],
    idx: &[usize],
) -> Result<Vec<Vec<f64>>, BaselineError> {
    let x_rows: Vec<Vec<f64>> = idx.iter().map(|&i| dataset[i].0.values().to_vec()).collect();
    let mut g = Graph::new(Mode::Eval);
    let x = g.input(Tensor::from_rows(&x_rows), false);
    let out = model
        .mlp
        .forward_eval(&mut g, x, &model.params)
        .map_err(BaselineError::Tensor)?;
    let t = g.value(out);
    Ok((0..idx.len()).map(|r| t.row(r).to_vec()).collect())
}

fn mse_over(
    dataset: &[(FeatureVector, DesignVector)],
    idx: &[usize],
    f: impl Fn(usize) -> Vec<f64>,
) -> f64 {
    let mut acc = 0.0;
    let mut n = 0.0f64;
    for &i in idx {
        let truth = dataset[i].1.concat();
        let pred = f(i);
        for (p, t) in pred.iter().zip(&truth) {
            acc += (p - t) * (p - t);
            n += 1.0;
        }
    }
    acc / n.max(1.0)
}

fn mse_against(
    dataset: &[(FeatureVector, DesignVector)],
    idx: &[usize],
    preds: &[Vec<f64>],
) -> f64 {
    let mut acc = 0.0;
    let mut n = 0.0f64;
    for (j, &i) in idx.iter().enumerate() {
        let truth = dataset[i].1.concat();
        for (p, t) in preds[j].iter().zip(&truth) {
            acc += (p - t) * (p - t);
            n += 1.0;
        }
    }
    acc / n.max(1.0)
}

/// Per-group argmax of the regressor output. Total: any feature vector maps
/// to some valid discrete design.
pub fn infer_dr(model: &DrModel, target: &FeatureVector) -> Result<DesignVector, BaselineError> {
    let mut g = Graph::new(Mode::Eval);
    let x = g.input(Tensor::new(vec![1, target.dim()], target.values().to_vec()), false);
    let out = model
        .mlp
        .forward_eval(&mut g, x, &model.params)
        .map_err(BaselineError::Tensor)?;
    let relaxed = DesignVector::from_concat(g.value(out).row(0), model.k_flat);
    Ok(relaxed.discretized())
}
