//! Distribution-matching baseline: per-group multinomials over texture ids,
//! updated by a score-function (REINFORCE) estimator of the KL objective
//! between kernel density estimates of generated and target features.
//! Every update simulates a fresh batch — nothing is amortized.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kde::{kde_log_density, silverman_bandwidth, Pca};
use super::BaselineError;
use crate::features::{dihedral_feature, FeatureVector};
use crate::nams_core::{DesignPopulation, PopulationEntry, PopulationSource};
use crate::rng::Pcg32;
use crate::sim::{DesignVector, Image, RoofKind, SimError};
use crate::tensor::{adam_step, AdamConfig, Gradients, ModelParameters, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Ms2Config {
    /// T: optimization iterations.
    pub iters: usize,
    /// N: designs simulated per iteration.
    pub batch: usize,
    pub adam: AdamConfig,
    /// Dimension of the PCA projection the densities live in.
    pub kde_dim: usize,
    /// Fixed bandwidth; None selects Silverman's rule on the projected
    /// target corpus.
    pub bandwidth: Option<f64>,
    /// Designs sampled from the final multinomials.
    pub population_size: usize,
    pub seed: u64,
}

impl Ms2Config {
    pub fn desk_defaults(seed: u64) -> Self {
        Self {
            iters: 50,
            batch: 64,
            adam: AdamConfig::new(0.05),
            kde_dim: 8,
            bandwidth: None,
            population_size: 12,
            seed,
        }
    }
}

/// Unconstrained logits per design group; probabilities are the softmax.
#[derive(Clone, Debug)]
pub struct Ms2State {
    params: ModelParameters,
    pub iter: usize,
    pub bandwidth: f64,
    pub pca: Pca,
}

pub fn softmax(theta: &[f64]) -> Vec<f64> {
    let max = theta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = theta.iter().map(|t| (t - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl Ms2State {
    pub fn new(k_flat: usize, k_sloped: usize, bandwidth: f64, pca: Pca) -> Self {
        let mut params = ModelParameters::new();
        params.insert("theta_flat", Tensor::zeros(vec![k_flat]));
        params.insert("theta_sloped", Tensor::zeros(vec![k_sloped]));
        Self {
            params,
            iter: 0,
            bandwidth,
            pca,
        }
    }

    pub fn theta(&self, roof: RoofKind) -> &[f64] {
        let name = match roof {
            RoofKind::Flat => "theta_flat",
            RoofKind::Sloped => "theta_sloped",
        };
        self.params.get(name).unwrap().data()
    }

    pub fn probs(&self, roof: RoofKind) -> Vec<f64> {
        softmax(self.theta(roof))
    }

    /// (index, probability) of the current mode.
    pub fn mode(&self, roof: RoofKind) -> (usize, f64) {
        let p = self.probs(roof);
        let idx = crate::sim::argmax(&p);
        (idx, p[idx])
    }

    fn assert_simplex(&self) -> Result<(), BaselineError> {
        for roof in [RoofKind::Flat, RoofKind::Sloped] {
            let p = self.probs(roof);
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || p.iter().any(|&x| !(x > 0.0)) {
                return Err(BaselineError::SimplexViolation(format!(
                    "{roof:?}: sum {sum}, min {:?}",
                    p.iter().cloned().fold(f64::INFINITY, f64::min)
                )));
            }
        }
        Ok(())
    }
}

/// The score-function estimator shared by the real step and its oracles:
/// grad_k = (1/N) sum_i score_i * (1[d_i = k] - p_k).
pub fn reinforce_gradient(probs: &[f64], samples: &[usize], scores: &[f64]) -> Vec<f64> {
    assert_eq!(samples.len(), scores.len());
    let n = samples.len() as f64;
    let mut grad = vec![0.0; probs.len()];
    for (&d, &score) in samples.iter().zip(scores) {
        for (k, g) in grad.iter_mut().enumerate() {
            let indicator = if d == k { 1.0 } else { 0.0 };
            *g += score * (indicator - probs[k]) / n;
        }
    }
    grad
}

fn sample_categorical(probs: &[f64], rng: &mut Pcg32) -> usize {
    let u = rng.next_f64();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Ms2StepDiagnostics {
    pub mean_score: f64,
    pub sim_calls: usize,
    pub mode_flat: usize,
    pub mode_prob_flat: f64,
    pub mode_sloped: usize,
    pub mode_prob_sloped: f64,
}

/// One REINFORCE update. Simulates exactly `cfg.batch` designs through the
/// provided simulator handle, scores each against the KDE pair, and applies
/// one ADAM step to the logits.
pub fn ms2_reinforce_step<F>(
    state: &mut Ms2State,
    targets_projected: &[Vec<f64>],
    simulate: &mut F,
    cfg: &Ms2Config,
    design_rng: &mut Pcg32,
    zeta_rng: &mut Pcg32,
) -> Result<Ms2StepDiagnostics, BaselineError>
where
    F: FnMut(&DesignVector, u64) -> Result<Image, SimError>,
{
    if cfg.batch < 2 {
        return Err(BaselineError::Config(format!(
            "reinforce step needs N >= 2, got {}",
            cfg.batch
        )));
    }
    let p_flat = state.probs(RoofKind::Flat);
    let p_sloped = state.probs(RoofKind::Sloped);
    let k_flat = p_flat.len();
    let k_sloped = p_sloped.len();

    // draw the whole batch first so the stream consumption is independent of
    // evaluation order, then render in parallel
    let mut flat_samples = Vec::with_capacity(cfg.batch);
    let mut sloped_samples = Vec::with_capacity(cfg.batch);
    let mut zetas = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.batch {
        flat_samples.push(sample_categorical(&p_flat, design_rng));
        sloped_samples.push(sample_categorical(&p_sloped, design_rng));
        zetas.push(zeta_rng.next_u64());
    }
    let images: Vec<Image> = flat_samples
        .iter()
        .zip(&sloped_samples)
        .zip(&zetas)
        .map(|((&f, &s), &zeta)| {
            let design = DesignVector::one_hot(f, s, k_flat, k_sloped);
            simulate(&design, zeta).map_err(|e| BaselineError::Simulation {
                flat: f,
                sloped: s,
                source: e,
            })
        })
        .collect::<Result<_, _>>()?;
    let batch_projected: Vec<Vec<f64>> = images
        .par_iter()
        .map(|image| {
            let feature =
                dihedral_feature(image).map_err(|e| BaselineError::Config(e.to_string()))?;
            Ok(state.pca.project(feature.values()))
        })
        .collect::<Result<_, BaselineError>>()?;

    let mut scores = Vec::with_capacity(cfg.batch);
    for x in &batch_projected {
        let log_g = kde_log_density(&batch_projected, x, state.bandwidth)?;
        let log_t = kde_log_density(targets_projected, x, state.bandwidth)?;
        scores.push(log_g - log_t);
    }
    let mean_score: f64 = scores.iter().sum::<f64>() / scores.len() as f64;

    let grad_flat = reinforce_gradient(&p_flat, &flat_samples, &scores);
    let grad_sloped = reinforce_gradient(&p_sloped, &sloped_samples, &scores);
    let grads = Gradients::from_named(vec![
        ("theta_flat".to_string(), Tensor::new(vec![k_flat], grad_flat)),
        (
            "theta_sloped".to_string(),
            Tensor::new(vec![k_sloped], grad_sloped),
        ),
    ]);
    adam_step(&mut state.params, &grads, &cfg.adam).map_err(BaselineError::Tensor)?;
    state.iter += 1;
    state.assert_simplex()?;

    let (mode_flat, mode_prob_flat) = state.mode(RoofKind::Flat);
    let (mode_sloped, mode_prob_sloped) = state.mode(RoofKind::Sloped);
    Ok(Ms2StepDiagnostics {
        mean_score,
        sim_calls: cfg.batch,
        mode_flat,
        mode_prob_flat,
        mode_sloped,
        mode_prob_sloped,
    })
}

/// One row of the per-iteration search log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Ms2IterationRecord {
    pub iter: usize,
    pub est_kl_score_mean: f64,
    pub sim_calls_cum: usize,
    pub mode_flat: usize,
    pub mode_sloped: usize,
    pub mode_prob_flat: f64,
    pub mode_prob_sloped: f64,
}

pub struct Ms2SearchOutput {
    pub state: Ms2State,
    pub iterations: Vec<Ms2IterationRecord>,
    pub population: DesignPopulation,
    pub sim_calls: usize,
}

/// Full search against one target corpus: T iterations of N simulations,
/// then a population sampled from the final multinomials. Consumes exactly
/// T * N simulator calls.
pub fn ms2_search<F>(
    targets: &[FeatureVector],
    pca: &Pca,
    k_flat: usize,
    k_sloped: usize,
    simulate: &mut F,
    cfg: &Ms2Config,
) -> Result<Ms2SearchOutput, BaselineError>
where
    F: FnMut(&DesignVector, u64) -> Result<Image, SimError>,
{
    if targets.is_empty() {
        return Err(BaselineError::EmptySamples);
    }
    let targets_projected: Vec<Vec<f64>> =
        targets.iter().map(|t| pca.project(t.values())).collect();
    let bandwidth = match cfg.bandwidth {
        Some(h) if h > 0.0 => h,
        Some(h) => return Err(BaselineError::BadBandwidth(h)),
        None => silverman_bandwidth(&targets_projected)?,
    };
    let mut state = Ms2State::new(k_flat, k_sloped, bandwidth, pca.clone());
    let mut design_rng = Pcg32::with_stream(cfg.seed, 0x52);
    let mut zeta_rng = Pcg32::with_stream(cfg.seed, 0x53);

    let mut iterations = Vec::with_capacity(cfg.iters);
    let mut sim_calls = 0usize;
    let mut last_mean_score = 0.0;
    for iter in 0..cfg.iters {
        let diag = ms2_reinforce_step(
            &mut state,
            &targets_projected,
            simulate,
            cfg,
            &mut design_rng,
            &mut zeta_rng,
        )?;
        sim_calls += diag.sim_calls;
        last_mean_score = diag.mean_score;
        iterations.push(Ms2IterationRecord {
            iter,
            est_kl_score_mean: diag.mean_score,
            sim_calls_cum: sim_calls,
            mode_flat: diag.mode_flat,
            mode_sloped: diag.mode_sloped,
            mode_prob_flat: diag.mode_prob_flat,
            mode_prob_sloped: diag.mode_prob_sloped,
        });
    }

    let mut pop_rng = Pcg32::with_stream(cfg.seed, 0x54);
    let p_flat = state.probs(RoofKind::Flat);
    let p_sloped = state.probs(RoofKind::Sloped);
    let entries = (0..cfg.population_size)
        .map(|_| PopulationEntry {
            flat_idx: sample_categorical(&p_flat, &mut pop_rng),
            sloped_idx: sample_categorical(&p_sloped, &mut pop_rng),
            source: PopulationSource::Searched,
            loss: last_mean_score,
        })
        .collect();

    Ok(Ms2SearchOutput {
        state,
        iterations,
        population: DesignPopulation { entries },
        sim_calls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_log_softmax_matches_finite_differences() {
        let mut rng = Pcg32::new(31);
        for _ in 0..20 {
            let k = 5;
            let theta: Vec<f64> = (0..k).map(|_| rng.range_f64(-2.0, 2.0)).collect();
            let p = softmax(&theta);
            for j in 0..k {
                // analytic d/dtheta_i of ln softmax(theta)_j = 1[i=j] - p_i
                let h = 1e-6;
                for i in 0..k {
                    let mut tp = theta.clone();
                    tp[i] += h;
                    let mut tm = theta.clone();
                    tm[i] -= h;
                    let fd = (softmax(&tp)[j].ln() - softmax(&tm)[j].ln()) / (2.0 * h);
                    let analytic = if i == j { 1.0 - p[i] } else { -p[i] };
                    assert!(
                        (fd - analytic).abs() < 1e-6,
                        "i={i} j={j}: fd {fd} vs analytic {analytic}"
                    );
                }
            }
        }
    }

    #[test]
    fn constant_score_gives_zero_expected_gradient() {
        let mut rng = Pcg32::new(32);
        let k = 4;
        let theta: Vec<f64> = vec![0.3, -0.7, 1.1, 0.0];
        let p = softmax(&theta);
        let steps = 2000;
        let n = 16;
        let mut means = vec![0.0; k];
        let mut sq = vec![0.0; k];
        for _ in 0..steps {
            let samples: Vec<usize> = (0..n).map(|_| sample_categorical(&p, &mut rng)).collect();
            let scores = vec![2.5; n];
            let g = reinforce_gradient(&p, &samples, &scores);
            for i in 0..k {
                means[i] += g[i];
                sq[i] += g[i] * g[i];
            }
        }
        for i in 0..k {
            let mean = means[i] / steps as f64;
            let var = sq[i] / steps as f64 - mean * mean;
            let se = (var / steps as f64).sqrt();
            assert!(
                mean.abs() < 3.0 * se + 1e-12,
                "component {i}: mean {mean} exceeds 3 x SE {se}"
            );
        }
    }

    /// Two categories, G the identity map, target distribution q: the
    /// objective is KL(p_theta || q) and the estimator's Monte-Carlo mean
    /// must match the analytic gradient within 1%.
    #[test]
    fn two_category_estimator_matches_analytic_kl_gradient() {
        let mut rng = Pcg32::new(33);
        let theta = vec![0.4, -0.2];
        let p = softmax(&theta);
        let q = [0.3, 0.7];
        // analytic: dKL/dtheta_k = p_k (s_k - sum_c p_c s_c), s_c = ln(p_c/q_c)
        let s: Vec<f64> = (0..2).map(|c| (p[c] / q[c]).ln()).collect();
        let s_bar: f64 = (0..2).map(|c| p[c] * s[c]).sum();
        let analytic: Vec<f64> = (0..2).map(|k| p[k] * (s[k] - s_bar)).collect();

        let n = 100_000;
        let samples: Vec<usize> = (0..n).map(|_| sample_categorical(&p, &mut rng)).collect();
        let scores: Vec<f64> = samples.iter().map(|&d| s[d]).collect();
        let estimate = reinforce_gradient(&p, &samples, &scores);
        for k in 0..2 {
            let rel = (estimate[k] - analytic[k]).abs() / analytic[k].abs();
            assert!(
                rel < 0.01,
                "component {k}: estimate {} vs analytic {} (rel {rel})",
                estimate[k],
                analytic[k]
            );
        }
    }

    #[test]
    fn categorical_sampler_matches_probs() {
        let mut rng = Pcg32::new(34);
        let p = vec![0.1, 0.2, 0.3, 0.4];
        let n = 200_000;
        let mut counts = vec![0usize; 4];
        for _ in 0..n {
            counts[sample_categorical(&p, &mut rng)] += 1;
        }
        for (i, c) in counts.iter().enumerate() {
            let f = *c as f64 / n as f64;
            assert!((f - p[i]).abs() < 0.005, "bin {i}: {f}");
        }
    }
}
