//! Amortized design inference: multi-restart gradient descent on the frozen
//! predictor with respect to the latent code, majority voting over the best
//! candidates, and rejection diversification of the inferred designs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{NamsError, NamsModel};
use crate::features::FeatureVector;
use crate::rng::{derive_seed, Pcg32};
use crate::sim::{sample_uniform_design, DesignVector};
use crate::tensor::{adam_step, AdamConfig, Graph, Mode, ModelParameters, Tensor};

/// Tolerance for the per-restart descent check: a restart whose final loss
/// exceeds its initial loss by more than this is flagged failed and excluded
/// from the vote pool.
const DESCENT_TOL: f64 = 1e-9;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchConfig {
    /// M: independent random restarts.
    pub restarts: usize,
    /// k: init range is +-k * sigma_j in latent dimension j.
    pub init_range_mult: f64,
    /// S: candidates entering the majority vote.
    pub vote_pool: usize,
    pub iters: usize,
    pub adam: AdamConfig,
    /// Per-dimension standard deviation of the training-corpus embeddings.
    pub sigma_per_dim: Vec<f64>,
}

impl SearchConfig {
    pub fn paper_defaults(sigma_per_dim: Vec<f64>) -> Self {
        Self {
            restarts: 1000,
            init_range_mult: 3.0,
            vote_pool: 50,
            iters: 200,
            adam: AdamConfig::new(0.01),
            sigma_per_dim,
        }
    }

    pub fn validate(&self) -> Result<(), NamsError> {
        if self.restarts == 0 || self.iters == 0 || self.vote_pool == 0 {
            return Err(NamsError::Config(
                "restarts, iters and vote_pool must be positive".into(),
            ));
        }
        if self.vote_pool > self.restarts {
            return Err(NamsError::Config(format!(
                "vote pool S={} exceeds restarts M={}",
                self.vote_pool, self.restarts
            )));
        }
        if !(self.init_range_mult > 0.0) {
            return Err(NamsError::Config("init_range_mult must be positive".into()));
        }
        if self.sigma_per_dim.iter().any(|s| !(*s > 0.0)) {
            return Err(NamsError::Config("sigma_per_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Per-dimension standard deviation of the mean embeddings of a design
/// corpus (the e = 0 encodings).
pub fn estimate_sigma_per_dim(
    model: &NamsModel,
    designs: &[DesignVector],
) -> Result<Vec<f64>, NamsError> {
    let mus = model.encode_mu_batch(designs)?;
    if mus.is_empty() {
        return Err(NamsError::Config("sigma estimation needs a nonempty corpus".into()));
    }
    let dim = mus[0].len();
    let n = mus.len() as f64;
    let mut mean = vec![0.0; dim];
    for mu in &mus {
        for (m, v) in mean.iter_mut().zip(mu) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0; dim];
    for mu in &mus {
        for (j, v) in mu.iter().enumerate() {
            var[j] += (v - mean[j]) * (v - mean[j]);
        }
    }
    Ok(var
        .into_iter()
        // floor keeps degenerate dimensions searchable
        .map(|v| (v / n).sqrt().max(1e-3))
        .collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchCandidate {
    pub z: Vec<f64>,
    pub loss: f64,
    pub flat: usize,
    pub sloped: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VoteDetails {
    /// (texture id, supporting candidates) per group, sorted by id.
    pub flat_votes: Vec<(usize, usize)>,
    pub sloped_votes: Vec<(usize, usize)>,
    /// No candidate decoded to the jointly voted design; d* was assembled
    /// from the per-group votes directly.
    pub mismatch: bool,
    /// Restarts excluded for NaN or non-descent.
    pub failed_restarts: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchResult {
    pub z_star: Vec<f64>,
    pub d_star: DesignVector,
    /// The S best candidates, ascending by loss.
    pub candidates: Vec<SearchCandidate>,
    pub vote: VoteDetails,
    pub search_loss: f64,
}

/// Multi-restart neural-adjoint search for one target feature group. The
/// predictor runs frozen in inference mode; all M descents execute as one
/// batched ADAM on an [M, latent] variable (rows are independent because
/// inference-mode layers never mix batch rows).
pub fn na_search(
    model: &NamsModel,
    target: &FeatureVector,
    cfg: &SearchConfig,
    seed: u64,
) -> Result<SearchResult, NamsError> {
    cfg.validate()?;
    let latent = model.config.latent_dim;
    if cfg.sigma_per_dim.len() != latent {
        return Err(NamsError::Config(format!(
            "sigma_per_dim has {} entries for latent dim {}",
            cfg.sigma_per_dim.len(),
            latent
        )));
    }
    let m = cfg.restarts;
    let feat = target.dim();

    let mut init_rng = Pcg32::with_stream(seed, 0x5EA);
    let mut z0 = Vec::with_capacity(m * latent);
    for _ in 0..m {
        for j in 0..latent {
            let half = cfg.init_range_mult * cfg.sigma_per_dim[j];
            z0.push(init_rng.range_f64(-half, half));
        }
    }

    let target_rows: Vec<Vec<f64>> = vec![target.values().to_vec(); m];
    let target_tensor = Tensor::from_rows(&target_rows);

    let mut z_store = ModelParameters::new();
    z_store.insert("z", Tensor::new(vec![m, latent], z0));

    let mut initial_losses = vec![0.0; m];
    let mut final_losses = vec![0.0; m];
    for iter in 0..cfg.iters {
        let mut g = Graph::new(Mode::Eval);
        let z = g.param(&z_store, "z")?;
        let pred = model.predictor.forward_eval(&mut g, z, &model.params)?;
        let t = g.constant(target_tensor.clone());
        let diff = g.sub(pred, t)?;
        let sq = g.mul(diff, diff)?;
        // row losses for ranking; the scalar mean drives the descent (rows
        // are independent, so each row's gradient is its own loss gradient
        // up to one shared constant)
        let sq_val = g.value(sq);
        for r in 0..m {
            let row_loss: f64 = sq_val.row(r).iter().sum::<f64>() / feat as f64;
            if iter == 0 {
                initial_losses[r] = row_loss;
            }
            final_losses[r] = row_loss;
        }
        let loss = g.mse(pred, t)?;
        let grads = g.backward(loss)?;
        adam_step(&mut z_store, &grads, &cfg.adam)?;
    }
    // losses after the final update
    {
        let zs: Vec<Vec<f64>> = {
            let zt = z_store.get("z").unwrap();
            (0..m).map(|r| zt.row(r).to_vec()).collect()
        };
        let preds = model.predict_batch(&zs)?;
        for r in 0..m {
            final_losses[r] = preds[r]
                .iter()
                .zip(target.values())
                .map(|(p, x)| (p - x) * (p - x))
                .sum::<f64>()
                / feat as f64;
        }
    }

    let mut ok: Vec<usize> = Vec::with_capacity(m);
    let mut failed = 0usize;
    for r in 0..m {
        if final_losses[r].is_finite() && final_losses[r] <= initial_losses[r] + DESCENT_TOL {
            ok.push(r);
        } else {
            failed += 1;
        }
    }
    if ok.is_empty() {
        return Err(NamsError::AllRestartsFailed(m));
    }
    ok.sort_by(|&a, &b| {
        final_losses[a]
            .partial_cmp(&final_losses[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    let pool: Vec<usize> = ok.into_iter().take(cfg.vote_pool).collect();

    let zt = z_store.get("z").unwrap();
    let pool_z: Vec<Vec<f64>> = pool.iter().map(|&r| zt.row(r).to_vec()).collect();
    let decoded = model.decode_batch(&pool_z)?;
    let candidates: Vec<SearchCandidate> = pool
        .iter()
        .zip(pool_z.iter())
        .zip(decoded.iter())
        .map(|((&r, z), d)| {
            let (flat, sloped) = d.argmax_indices();
            SearchCandidate {
                z: z.clone(),
                loss: final_losses[r],
                flat,
                sloped,
            }
        })
        .collect();

    let (flat_star, flat_votes) = vote_group(&candidates, |c| c.flat);
    let (sloped_star, sloped_votes) = vote_group(&candidates, |c| c.sloped);

    let matching = candidates
        .iter()
        .find(|c| c.flat == flat_star && c.sloped == sloped_star);
    let (z_star, search_loss, mismatch) = match matching {
        Some(c) => (c.z.clone(), c.loss, false),
        None => (candidates[0].z.clone(), candidates[0].loss, true),
    };
    let d_star = DesignVector::one_hot(
        flat_star,
        sloped_star,
        model.config.k_flat,
        model.config.k_sloped,
    );

    Ok(SearchResult {
        z_star,
        d_star,
        candidates,
        vote: VoteDetails {
            flat_votes,
            sloped_votes,
            mismatch,
            failed_restarts: failed,
        },
        search_loss,
    })
}

/// Majority vote over one design group. Ties break toward the value whose
/// supporters have the smallest mean search loss, then the smallest id.
fn vote_group(
    candidates: &[SearchCandidate],
    key: impl Fn(&SearchCandidate) -> usize,
) -> (usize, Vec<(usize, usize)>) {
    let mut counts: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for c in candidates {
        let e = counts.entry(key(c)).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += c.loss;
    }
    let mut best: Option<(usize, usize, f64)> = None;
    for (&id, &(count, loss_sum)) in &counts {
        let mean_loss = loss_sum / count as f64;
        let better = match best {
            None => true,
            Some((_, bc, bl)) => {
                count > bc || (count == bc && mean_loss < bl)
                // equal count and equal mean loss falls through to the
                // smallest id, which the BTreeMap iteration order provides
            }
        };
        if better {
            best = Some((id, count, mean_loss));
        }
    }
    let votes: Vec<(usize, usize)> = counts.iter().map(|(&id, &(c, _))| (id, c)).collect();
    (best.unwrap().0, votes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopulationSource {
    Searched,
    RejectedUniform,
}

/// With probability r, replace the searched design with a uniform draw.
pub fn rejection_sample(
    d_star: &DesignVector,
    r: f64,
    rng: &mut Pcg32,
) -> Result<(DesignVector, PopulationSource), NamsError> {
    if !(0.0..=1.0).contains(&r) {
        return Err(NamsError::InvalidRejectionRate(r));
    }
    let k_flat = d_star.flat.len();
    let k_sloped = d_star.sloped.len();
    if rng.next_f64() < r {
        Ok((
            sample_uniform_design(rng, k_flat, k_sloped),
            PopulationSource::RejectedUniform,
        ))
    } else {
        Ok((d_star.clone(), PopulationSource::Searched))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PopulationEntry {
    pub flat_idx: usize,
    pub sloped_idx: usize,
    pub source: PopulationSource,
    pub loss: f64,
}

impl PopulationEntry {
    pub fn design(&self, k_flat: usize, k_sloped: usize) -> DesignVector {
        DesignVector::one_hot(self.flat_idx, self.sloped_idx, k_flat, k_sloped)
    }
}

/// The inferred designs for a set of targets; all entries discrete.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct DesignPopulation {
    pub entries: Vec<PopulationEntry>,
}

impl DesignPopulation {
    pub fn save(&self, path: &Path) -> Result<(), NamsError> {
        let mut f = std::fs::File::create(path).map_err(|e| NamsError::Io(e.to_string()))?;
        for e in &self.entries {
            let line = serde_json::to_string(e).map_err(|x| NamsError::Io(x.to_string()))?;
            writeln!(f, "{line}").map_err(|x| NamsError::Io(x.to_string()))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NamsError> {
        let text = std::fs::read_to_string(path).map_err(|e| NamsError::Io(e.to_string()))?;
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| NamsError::Io(format!("{e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { entries })
    }
}

/// Search every target group independently (in parallel, reduced in target
/// order) and apply rejection diversification. Makes zero simulator calls.
pub fn infer_population(
    model: &NamsModel,
    targets: &[FeatureVector],
    cfg: &SearchConfig,
    r: f64,
    seed: u64,
) -> Result<DesignPopulation, NamsError> {
    if !(0.0..=1.0).contains(&r) {
        return Err(NamsError::InvalidRejectionRate(r));
    }
    let results: Vec<Result<PopulationEntry, NamsError>> = targets
        .par_iter()
        .enumerate()
        .map(|(i, target)| {
            let search = na_search(model, target, cfg, derive_seed(seed, i as u64)).map_err(
                |e| NamsError::TargetSearch {
                    index: i,
                    source: Box::new(e),
                },
            )?;
            let mut rng = Pcg32::with_stream(derive_seed(seed ^ 0xA3C7, i as u64), 0x12);
            let (design, source) = rejection_sample(&search.d_star, r, &mut rng)?;
            let (flat_idx, sloped_idx) = design.discrete_indices().expect("discrete by construction");
            Ok(PopulationEntry {
                flat_idx,
                sloped_idx,
                source,
                loss: search.search_loss,
            })
        })
        .collect();
    let entries = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(DesignPopulation { entries })
}
