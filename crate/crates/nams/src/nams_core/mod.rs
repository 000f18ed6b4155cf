//! The neural-adjoint meta-simulation model: a variational encoder/decoder
//! pair embedding one-hot designs into a smooth 10-D latent space, plus a
//! predictor that maps latent codes to expected image features. Training
//! fits all three on uniformly sampled simulations; inference searches the
//! latent space by gradient descent against target features, with no
//! simulator in the loop.

mod search;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use search::{
    estimate_sigma_per_dim, infer_population, na_search, rejection_sample, DesignPopulation,
    PopulationEntry, PopulationSource, SearchCandidate, SearchConfig, SearchResult, VoteDetails,
};
pub use train::{train_nams, LossCurvePoint, TrainConfig};

use crate::sim::DesignVector;
use crate::tensor::{
    Graph, HiddenLayout, Mlp, Mode, ModelParameters, OutputActivation, Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum NamsError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("all {0} search restarts failed")]
    AllRestartsFailed(usize),
    #[error("rejection rate must lie in [0,1], got {0}")]
    InvalidRejectionRate(f64),
    #[error("search failed for target {index}: {source}")]
    TargetSearch {
        index: usize,
        #[source]
        source: Box<NamsError>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model io: {0}")]
    Io(String),
}

/// Architecture and loss weights.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NamsConfig {
    pub k_flat: usize,
    pub k_sloped: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub lambda_p: f64,
    pub lambda_d: f64,
    pub lambda_kld: f64,
}

impl NamsConfig {
    pub fn design_dim(&self) -> usize {
        self.k_flat + self.k_sloped
    }
}

/// A sampled design embedding with its Gaussian parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub z: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Encoder E, decoder D, and predictor P over one parameter store.
#[derive(Clone, Debug)]
pub struct NamsModel {
    pub config: NamsConfig,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub predictor: Mlp,
    pub params: ModelParameters,
}

impl NamsModel {
    pub fn new(config: NamsConfig, seed: u64) -> Self {
        let layout = HiddenLayout::standard();
        let encoder = Mlp {
            name: "enc".to_string(),
            input_dim: config.design_dim(),
            hidden: config.hidden.clone(),
            output_dim: 2 * config.latent_dim,
            layout,
            output_activation: OutputActivation::Linear,
        };
        let decoder = Mlp {
            name: "dec".to_string(),
            input_dim: config.latent_dim,
            hidden: config.hidden.clone(),
            output_dim: config.design_dim(),
            layout,
            output_activation: OutputActivation::Sigmoid,
        };
        let predictor = Mlp {
            name: "pred".to_string(),
            input_dim: config.latent_dim,
            hidden: config.hidden.clone(),
            output_dim: config.feature_dim,
            layout,
            output_activation: OutputActivation::Linear,
        };
        let mut params = ModelParameters::new();
        let mut rng = crate::rng::Pcg32::with_stream(seed, 0xA11);
        encoder.init_params(&mut params, &mut rng);
        decoder.init_params(&mut params, &mut rng);
        predictor.init_params(&mut params, &mut rng);
        Self {
            config,
            encoder,
            decoder,
            predictor,
            params,
        }
    }

    /// Reparameterized encoding of one design (inference mode): z = mu + e * sigma
    /// with sigma = exp(logvar / 2).
    pub fn encode(&self, design: &DesignVector, noise: &[f64]) -> Result<LatentCode, NamsError> {
        assert_eq!(noise.len(), self.config.latent_dim);
        let mut g = Graph::new(Mode::Eval);
        let d = g.input(
            Tensor::new(vec![1, design.len()], design.concat()),
            false,
        );
        let enc = self.encoder.forward_eval(&mut g, d, &self.params)?;
        let parts = g.split(enc, &[self.config.latent_dim, self.config.latent_dim]);
        let mu = g.value(parts[0]).data().to_vec();
        let logvar = g.value(parts[1]).data().to_vec();
        let sigma: Vec<f64> = logvar.iter().map(|lv| (0.5 * lv).exp()).collect();
        let z: Vec<f64> = mu
            .iter()
            .zip(&sigma)
            .zip(noise)
            .map(|((m, s), e)| m + e * s)
            .collect();
        Ok(LatentCode { z, mu, sigma })
    }

    /// Mean embeddings (e = 0) for a batch of designs, inference mode.
    pub fn encode_mu_batch(&self, designs: &[DesignVector]) -> Result<Vec<Vec<f64>>, NamsError> {
        if designs.is_empty() {
            return Ok(Vec::new());
        }
        let rows: Vec<Vec<f64>> = designs.iter().map(|d| d.concat()).collect();
        let mut g = Graph::new(Mode::Eval);
        let d = g.input(Tensor::from_rows(&rows), false);
        let enc = self.encoder.forward_eval(&mut g, d, &self.params)?;
        let mu_node = g.slice(enc, 0, self.config.latent_dim);
        let mu = g.value(mu_node);
        Ok((0..designs.len()).map(|r| mu.row(r).to_vec()).collect())
    }

    /// Decode latent rows to relaxed design vectors, inference mode.
    pub fn decode_batch(&self, zs: &[Vec<f64>]) -> Result<Vec<DesignVector>, NamsError> {
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new(Mode::Eval);
        let z = g.input(Tensor::from_rows(zs), false);
        let dec = self.decoder.forward_eval(&mut g, z, &self.params)?;
        let out = g.value(dec);
        Ok((0..zs.len())
            .map(|r| DesignVector::from_concat(out.row(r), self.config.k_flat))
            .collect())
    }

    /// Predicted features for latent rows, inference mode (P frozen).
    pub fn predict_batch(&self, zs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, NamsError> {
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new(Mode::Eval);
        let z = g.input(Tensor::from_rows(zs), false);
        let pred = self.predictor.forward_eval(&mut g, z, &self.params)?;
        let out = g.value(pred);
        Ok((0..zs.len()).map(|r| out.row(r).to_vec()).collect())
    }

    pub fn save(&self, dir: &Path) -> Result<(), NamsError> {
        std::fs::create_dir_all(dir).map_err(|e| NamsError::Io(e.to_string()))?;
        let cfg = serde_json::to_string_pretty(&self.config).map_err(|e| NamsError::Io(e.to_string()))?;
        std::fs::write(dir.join("nams_config.json"), cfg).map_err(|e| NamsError::Io(e.to_string()))?;
        self.params.save(&dir.join("nams_params.json"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, NamsError> {
        let cfg = std::fs::read_to_string(dir.join("nams_config.json"))
            .map_err(|e| NamsError::Io(e.to_string()))?;
        let config: NamsConfig =
            serde_json::from_str(&cfg).map_err(|e| NamsError::Io(e.to_string()))?;
        let params = ModelParameters::load(&dir.join("nams_params.json"))?;
        let mut model = Self::new(config, 0);
        model.params = params;
        Ok(model)
    }
}
