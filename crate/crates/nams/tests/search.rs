//! Latent-search behavior: convergence on a convex toy landscape, voting,
//! rejection sampling statistics, and the reparameterization identities.

use nams::features::FeatureVector;
use nams::nams_core::{
    infer_population, na_search, rejection_sample, NamsConfig, NamsModel, PopulationSource,
    SearchConfig,
};
use nams::rng::Pcg32;
use nams::sim::DesignVector;
use nams::tensor::{AdamConfig, Graph, Mode, Tensor};

/// A model whose predictor is a single affine layer with orthonormal weights
/// and whose decoder is all-zero (every z decodes to design (0,0)).
fn orthonormal_toy_model(latent: usize, seed: u64) -> NamsModel {
    let config = NamsConfig {
        k_flat: 4,
        k_sloped: 4,
        latent_dim: latent,
        hidden: vec![],
        feature_dim: latent,
        lambda_p: 1.0,
        lambda_d: 1.0,
        lambda_kld: 0.0,
    };
    let mut model = NamsModel::new(config, seed);
    // Gram-Schmidt an orthonormal basis from seeded noise
    let mut rng = Pcg32::new(seed ^ 0x0b);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < latent {
        let mut v: Vec<f64> = (0..latent).map(|_| rng.next_normal()).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for x in v.iter_mut() {
                *x /= norm;
            }
            basis.push(v);
        }
    }
    let mut a = vec![0.0; latent * latent];
    for (i, row) in basis.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            a[i * latent + j] = v;
        }
    }
    for name in model.params.trainable_names() {
        for v in model.params.get_mut(&name).unwrap().data_mut() {
            *v = 0.0;
        }
    }
    *model.params.get_mut("pred.0.w").unwrap() = Tensor::new(vec![latent, latent], a);
    model
}

#[test]
fn convex_landscape_every_restart_recovers_z0() {
    let latent = 10;
    let model = orthonormal_toy_model(latent, 3);
    let mut rng = Pcg32::new(17);
    let z0: Vec<f64> = (0..latent).map(|_| rng.range_f64(-1.0, 1.0)).collect();
    let target = FeatureVector(model.predict_batch(&[z0.clone()]).unwrap()[0].clone());
    let cfg = SearchConfig {
        restarts: 8,
        init_range_mult: 3.0,
        vote_pool: 8,
        iters: 600,
        adam: AdamConfig::new(0.05),
        sigma_per_dim: vec![1.0; latent],
    };
    let result = na_search(&model, &target, &cfg, 5).unwrap();
    assert_eq!(result.vote.failed_restarts, 0);
    for c in &result.candidates {
        let dist: f64 = c
            .z
            .iter()
            .zip(&z0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(dist < 1e-3, "restart ended {dist} from z0");
    }
    // all-zero decoder: every candidate decodes to (0,0), the vote is
    // unanimous and z* is the loss minimizer
    assert_eq!(result.d_star.discrete_indices(), Some((0, 0)));
    assert_eq!(result.z_star, result.candidates[0].z);
    assert!(!result.vote.mismatch);
}

#[test]
fn single_restart_degenerates_to_plain_descent() {
    let latent = 6;
    let model = orthonormal_toy_model(latent, 4);
    let target = FeatureVector(model.predict_batch(&[vec![0.4; 6]]).unwrap()[0].clone());
    let cfg = SearchConfig {
        restarts: 1,
        init_range_mult: 2.0,
        vote_pool: 1,
        iters: 300,
        adam: AdamConfig::new(0.05),
        sigma_per_dim: vec![1.0; latent],
    };
    let result = na_search(&model, &target, &cfg, 7).unwrap();
    assert_eq!(result.candidates.len(), 1);
    assert_eq!(result.z_star, result.candidates[0].z);
    assert_eq!(
        result.d_star.discrete_indices().unwrap(),
        (result.candidates[0].flat, result.candidates[0].sloped)
    );
}

#[test]
fn search_is_deterministic_under_fixed_seed() {
    let model = orthonormal_toy_model(6, 9);
    let target = FeatureVector(model.predict_batch(&[vec![-0.3; 6]]).unwrap()[0].clone());
    let cfg = SearchConfig {
        restarts: 12,
        init_range_mult: 3.0,
        vote_pool: 5,
        iters: 50,
        adam: AdamConfig::new(0.02),
        sigma_per_dim: vec![0.5; 6],
    };
    let a = na_search(&model, &target, &cfg, 42).unwrap();
    let b = na_search(&model, &target, &cfg, 42).unwrap();
    assert_eq!(a.z_star, b.z_star);
    assert_eq!(a.d_star, b.d_star);
    assert_eq!(a.vote.flat_votes, b.vote.flat_votes);
    let c = na_search(&model, &target, &cfg, 43).unwrap();
    assert!(a.z_star != c.z_star);
}

#[test]
fn vote_pool_larger_than_restarts_is_rejected() {
    let model = orthonormal_toy_model(4, 11);
    let target = FeatureVector(vec![0.0; 4]);
    let cfg = SearchConfig {
        restarts: 3,
        init_range_mult: 3.0,
        vote_pool: 5,
        iters: 10,
        adam: AdamConfig::new(0.02),
        sigma_per_dim: vec![1.0; 4],
    };
    assert!(na_search(&model, &target, &cfg, 1).is_err());
}

/// dz/dmu = I and dz/dsigma = diag(e) through the reparameterization,
/// against finite differences.
#[test]
fn reparameterization_jacobian() {
    let dim = 3;
    let e = [0.7, -1.3, 0.4];
    let mu0 = [0.2, -0.5, 1.0];
    let sigma0 = [0.9, 1.4, 0.3];
    let h = 1e-6;
    for j in 0..dim {
        let build = |mu: &[f64], sigma: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
            let mut g = Graph::new(Mode::Eval);
            let mu_n = g.input(Tensor::new(vec![1, dim], mu.to_vec()), true);
            let sig_n = g.input(Tensor::new(vec![1, dim], sigma.to_vec()), true);
            let e_n = g.constant(Tensor::new(vec![1, dim], e.to_vec()));
            let es = g.mul(e_n, sig_n).unwrap();
            let z = g.add(mu_n, es).unwrap();
            let zj = g.slice(z, j, 1);
            let grads = g.backward(zj).unwrap();
            (
                g.value(zj).item(),
                grads.wrt(mu_n).unwrap().to_vec(),
                grads.wrt(sig_n).unwrap().to_vec(),
            )
        };
        let (_, dmu, dsigma) = build(&mu0, &sigma0);
        for i in 0..dim {
            let expect_mu = if i == j { 1.0 } else { 0.0 };
            let expect_sigma = if i == j { e[i] } else { 0.0 };
            assert!((dmu[i] - expect_mu).abs() < 1e-12);
            assert!((dsigma[i] - expect_sigma).abs() < 1e-12);
            // finite differences
            let mut mu_p = mu0;
            mu_p[i] += h;
            let mut mu_m = mu0;
            mu_m[i] -= h;
            let fd_mu = (build(&mu_p, &sigma0).0 - build(&mu_m, &sigma0).0) / (2.0 * h);
            assert!((fd_mu - expect_mu).abs() < 1e-6);
            let mut s_p = sigma0;
            s_p[i] += h;
            let mut s_m = sigma0;
            s_m[i] -= h;
            let fd_s = (build(&mu0, &s_p).0 - build(&mu0, &s_m).0) / (2.0 * h);
            assert!((fd_s - expect_sigma).abs() < 1e-6);
        }
    }
}

/// Argmax discretization is invariant to the sigmoid: picking on pre-sigmoid
/// logits equals picking on post-sigmoid outputs.
#[test]
fn discretization_invariant_to_monotone_transform() {
    let mut rng = Pcg32::new(15);
    for _ in 0..200 {
        let logits: Vec<f64> = (0..8).map(|_| rng.range_f64(-4.0, 4.0)).collect();
        let sig: Vec<f64> = logits.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let d_logits = DesignVector::from_concat(&logits, 4);
        let d_sig = DesignVector::from_concat(&sig, 4);
        assert_eq!(d_logits.argmax_indices(), d_sig.argmax_indices());
    }
}

#[test]
fn rejection_rates_match_r() {
    let d = DesignVector::one_hot(3, 5, 16, 16);
    for (r, expect) in [(0.0, 0.0), (0.25, 0.25), (1.0, 1.0)] {
        let mut rng = Pcg32::new(1000 + (r * 100.0) as u64);
        let n = 10_000;
        let mut replaced = 0;
        for _ in 0..n {
            let (out, source) = rejection_sample(&d, r, &mut rng).unwrap();
            assert!(out.is_discrete());
            if source == PopulationSource::RejectedUniform {
                replaced += 1;
            } else {
                assert_eq!(out, d);
            }
        }
        let frac = replaced as f64 / n as f64;
        assert!(
            (frac - expect).abs() <= 0.02,
            "r={r}: replacement fraction {frac}"
        );
    }
    assert!(rejection_sample(&d, -0.1, &mut Pcg32::new(1)).is_err());
    assert!(rejection_sample(&d, 1.1, &mut Pcg32::new(1)).is_err());
}

#[test]
fn population_inference_covers_targets_without_simulation() {
    let model = orthonormal_toy_model(5, 21);
    let cfg = SearchConfig {
        restarts: 4,
        init_range_mult: 2.0,
        vote_pool: 2,
        iters: 30,
        adam: AdamConfig::new(0.02),
        sigma_per_dim: vec![1.0; 5],
    };
    let empty = infer_population(&model, &[], &cfg, 0.0, 3).unwrap();
    assert!(empty.entries.is_empty());

    let targets: Vec<FeatureVector> = (0..7)
        .map(|i| {
            let z: Vec<f64> = (0..5).map(|j| 0.1 * (i as f64) - 0.2 * j as f64).collect();
            FeatureVector(model.predict_batch(&[z]).unwrap()[0].clone())
        })
        .collect();
    let pop = infer_population(&model, &targets, &cfg, 0.0, 3).unwrap();
    assert_eq!(pop.entries.len(), targets.len());
    for e in &pop.entries {
        assert_eq!(e.source, PopulationSource::Searched);
    }
    // determinism across calls
    let pop2 = infer_population(&model, &targets, &cfg, 0.0, 3).unwrap();
    assert_eq!(pop, pop2);
}

#[test]
fn population_roundtrips_through_jsonl() {
    let model = orthonormal_toy_model(4, 30);
    let cfg = SearchConfig {
        restarts: 2,
        init_range_mult: 2.0,
        vote_pool: 1,
        iters: 10,
        adam: AdamConfig::new(0.02),
        sigma_per_dim: vec![1.0; 4],
    };
    let targets = vec![FeatureVector(vec![0.1; 4]), FeatureVector(vec![-0.4; 4])];
    let pop = infer_population(&model, &targets, &cfg, 1.0, 8).unwrap();
    for e in &pop.entries {
        assert_eq!(e.source, PopulationSource::RejectedUniform);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("population.jsonl");
    pop.save(&path).unwrap();
    let loaded = nams::nams_core::DesignPopulation::load(&path).unwrap();
    assert_eq!(loaded, pop);
}
