//! The experiment suite: design-inference accuracy with and without a design
//! gap (E1/E2), simulation-budget accounting (E4), and the downstream
//! segmentation-proxy comparison.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use super::corpus::generate_corpus_in_memory;
use super::report::{csv_to_svg_bars, fmt_f64, write_csv, CsvTable};
use super::{
    CountedSimulator, ExperimentConfig, HarnessError, Provenance, SimCallCounter, SimPhase,
};
use crate::baselines::{
    infer_dr, ms2_search, train_dr, DrConfig, DrModel, Ms2Config, Ms2SearchOutput, Pca,
};
use crate::downstream::{build_training_set, eval_iou, train_proxy, ProxyConfig};
use crate::features::{group_features, FeatureVector};
use crate::nams_core::{
    estimate_sigma_per_dim, infer_population, DesignPopulation, NamsConfig, NamsModel,
    PopulationEntry, PopulationSource, SearchConfig, TrainConfig,
};
use crate::rng::{derive_seed, Pcg32};
use crate::sim::{
    apply_appearance_gap, build_bank_pair, sample_uniform_design, texture_similarity_rank,
    texture_swatch, DesignVector, RoofKind, TextureBank, TextureSpec,
};
use crate::tensor::AdamConfig;

pub const METHODS: [&str; 4] = ["uniform", "dr", "ms2", "nams"];

/// 1-based rank of the bank texture `inferred_id` by similarity to the true
/// texture's swatch. Rank 1 with an in-domain truth is the truth itself.
pub fn score_rank(true_spec: &TextureSpec, bank_textures: &[TextureSpec], inferred_id: usize) -> usize {
    let ranked = texture_similarity_rank(&texture_swatch(true_spec), bank_textures);
    ranked
        .iter()
        .position(|(id, _)| *id == inferred_id)
        .expect("inferred id must be a bank member")
        + 1
}

#[derive(Clone, Debug)]
pub struct AccuracyRow {
    pub trial: usize,
    pub method: String,
    pub roof: RoofKind,
    pub top_n: usize,
    pub hits: usize,
    pub n_targets: usize,
}

impl AccuracyRow {
    pub fn accuracy(&self) -> f64 {
        self.hits as f64 / self.n_targets as f64
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub experiment: String,
    pub rows: Vec<AccuracyRow>,
    pub sim_calls: Vec<(SimPhase, u64)>,
}

impl ExperimentReport {
    /// Mean accuracy across trials.
    pub fn mean_accuracy(&self, method: &str, roof: RoofKind, top_n: usize) -> f64 {
        let matching: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.roof == roof && r.top_n == top_n)
            .map(|r| r.accuracy())
            .collect();
        matching.iter().sum::<f64>() / matching.len().max(1) as f64
    }

    /// Per-trial accuracies, trial-ordered.
    pub fn trial_accuracies(&self, method: &str, roof: RoofKind, top_n: usize) -> Vec<f64> {
        let mut rows: Vec<&AccuracyRow> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.roof == roof && r.top_n == top_n)
            .collect();
        rows.sort_by_key(|r| r.trial);
        rows.iter().map(|r| r.accuracy()).collect()
    }

    pub fn phase_calls(&self, phase: SimPhase) -> u64 {
        self.sim_calls
            .iter()
            .find(|(p, _)| *p == phase)
            .map(|(_, c)| *c)
            .unwrap_or(0)
    }
}

/// Everything E1/E2/downstream share: banks, corpus, trained (or loaded)
/// models, the latent-init scale, and the KDE projection basis.
struct Prepared {
    in_domain: TextureBank,
    held_out: TextureBank,
    counter: SimCallCounter,
    nams: NamsModel,
    dr: DrModel,
    sigma_per_dim: Vec<f64>,
    pca: Pca,
    timings: Vec<(String, f64)>,
}

fn prepare(config: &ExperimentConfig, out_dir: &Path) -> Result<Prepared, HarnessError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let (in_domain, held_out) = build_bank_pair(config.banks.k_flat, config.banks.k_sloped)?;
    let counter = SimCallCounter::new();
    let mut timings = Vec::new();

    let t0 = Instant::now();
    let corpus = generate_corpus_in_memory(config, &in_domain, &counter, SimPhase::NamsTrain)?;
    timings.push(("corpus_generation".to_string(), t0.elapsed().as_secs_f64()));

    let (nams, dr) = match &config.model_dir {
        Some(dir) => {
            let dir = Path::new(dir);
            (NamsModel::load(dir)?, DrModel::load(dir)?)
        }
        None => {
            let t1 = Instant::now();
            let nams_dataset: Vec<(DesignVector, FeatureVector)> = corpus
                .iter()
                .map(|e| (e.design.clone(), e.feature.clone()))
                .collect();
            let mut nams = NamsModel::new(
                NamsConfig {
                    k_flat: config.banks.k_flat,
                    k_sloped: config.banks.k_sloped,
                    latent_dim: config.nams.latent_dim,
                    hidden: config.nams.hidden.clone(),
                    feature_dim: crate::features::FEATURE_DIM,
                    lambda_p: config.nams.lambda_p,
                    lambda_d: config.nams.lambda_d,
                    lambda_kld: config.nams.lambda_kld,
                },
                derive_seed(config.seed, 0x11),
            );
            let curves = crate::nams_core::train_nams(
                &mut nams,
                &nams_dataset,
                &TrainConfig {
                    epochs: config.nams.epochs,
                    batch: config.nams.batch,
                    adam: AdamConfig::new(config.nams.lr),
                    holdout_frac: config.nams.holdout_frac,
                    seed: derive_seed(config.seed, 0x12),
                },
            )?;
            timings.push(("train_nams".to_string(), t1.elapsed().as_secs_f64()));

            let t2 = Instant::now();
            let dr_dataset: Vec<(FeatureVector, DesignVector)> = corpus
                .iter()
                .map(|e| (e.feature.clone(), e.design.clone()))
                .collect();
            let (dr, dr_report) = train_dr(
                &dr_dataset,
                &DrConfig {
                    hidden: vec![config.dr.hidden_units; config.dr.hidden_layers],
                    epochs: config.dr.epochs,
                    batch: config.dr_batch_for(dr_dataset.len()),
                    adam: AdamConfig::new(config.dr.lr),
                    weight_decay: config.dr.weight_decay,
                    train_frac: config.dr.train_frac,
                    seed: derive_seed(config.seed, 0x13),
                },
            )?;
            timings.push(("train_dr".to_string(), t2.elapsed().as_secs_f64()));

            let models_dir = out_dir.join("models");
            nams.save(&models_dir)?;
            dr.save(&models_dir).map_err(HarnessError::from)?;
            write_train_curves(&models_dir, &curves, &dr_report)?;
            (nams, dr)
        }
    };

    let designs: Vec<DesignVector> = corpus.iter().map(|e| e.design.clone()).collect();
    let sigma_per_dim = estimate_sigma_per_dim(&nams, &designs)?;
    let features: Vec<Vec<f64>> = corpus.iter().map(|e| e.feature.values().to_vec()).collect();
    let pca = Pca::fit(&features, config.ms2.kde_dim)?;

    Ok(Prepared {
        in_domain,
        held_out,
        counter,
        nams,
        dr,
        sigma_per_dim,
        pca,
        timings,
    })
}

fn write_train_curves(
    dir: &Path,
    curves: &[crate::nams_core::LossCurvePoint],
    dr_report: &crate::baselines::DrReport,
) -> Result<(), HarnessError> {
    let mut t = CsvTable::new(&["epoch", "total", "l_p", "l_d", "l_kld", "holdout_total"]);
    for c in curves {
        t.push(vec![
            c.epoch.to_string(),
            fmt_f64(c.total),
            fmt_f64(c.l_p),
            fmt_f64(c.l_d),
            fmt_f64(c.l_kld),
            fmt_f64(c.holdout_total),
        ]);
    }
    write_csv(&dir.join("nams_training_curve.csv"), &t)?;
    let mut t = CsvTable::new(&["epoch", "train_mse", "test_mse", "mean_predictor_mse"]);
    for c in &dr_report.curves {
        t.push(vec![
            c.epoch.to_string(),
            fmt_f64(c.train_mse),
            fmt_f64(c.test_mse),
            fmt_f64(dr_report.mean_predictor_mse),
        ]);
    }
    write_csv(&dir.join("dr_training_curve.csv"), &t)?;
    Ok(())
}

fn search_config(config: &ExperimentConfig, sigma_per_dim: Vec<f64>) -> SearchConfig {
    SearchConfig {
        restarts: config.nams.search.restarts,
        init_range_mult: config.nams.search.init_range_mult,
        vote_pool: config.nams.search.vote_pool,
        iters: config.nams.search.iters,
        adam: AdamConfig::new(config.nams.search.lr),
        sigma_per_dim,
    }
}

/// Render the target groups for one trial: `n_groups` groups of nine tiles
/// of the same design, fresh nuisance seed per tile.
fn render_target_groups(
    config: &ExperimentConfig,
    design: &DesignVector,
    bank: &TextureBank,
    counter: &SimCallCounter,
    trial_seed: u64,
) -> Result<Vec<FeatureVector>, HarnessError> {
    let n_groups = config.experiment.target_groups_per_trial;
    let per = config.corpus.images_per_design;
    (0..n_groups)
        .into_par_iter()
        .map(|gi| {
            let sim = CountedSimulator::new(bank, counter, SimPhase::TargetGen);
            let mut images = Vec::with_capacity(per);
            for j in 0..per {
                let zeta = derive_seed(trial_seed ^ 0x7A66, (gi * per + j) as u64);
                let out = sim.simulate(design, zeta)?;
                let image = if config.appearance_gap {
                    apply_appearance_gap(&out.image, derive_seed(zeta, 0xA9))
                } else {
                    out.image
                };
                images.push(image);
            }
            Ok(group_features(&images)?.averaged)
        })
        .collect()
}

struct TrialOutcome {
    /// method -> inferred designs, one per target group (or population entry).
    inferred: Vec<(String, Vec<(usize, usize)>)>,
    true_flat: usize,
    true_sloped: usize,
}

#[allow(clippy::too_many_arguments)]
fn run_trial(
    config: &ExperimentConfig,
    prepared: &Prepared,
    search_cfg: &SearchConfig,
    target_bank: &TextureBank,
    trial: usize,
    out_dir: &Path,
    experiment: &str,
) -> Result<TrialOutcome, HarnessError> {
    let trial_seed = derive_seed(config.seed ^ 0xE1E2, trial as u64);
    let mut trial_rng = Pcg32::with_stream(trial_seed, 0x71);
    let true_design = sample_uniform_design(
        &mut trial_rng,
        target_bank.k(RoofKind::Flat),
        target_bank.k(RoofKind::Sloped),
    );
    let (true_flat, true_sloped) = true_design.discrete_indices().unwrap();

    let targets = render_target_groups(
        config,
        &true_design,
        target_bank,
        &prepared.counter,
        trial_seed,
    )?;

    // uniform baseline: one uniform in-domain design per target
    let uniform: Vec<(usize, usize)> = (0..targets.len())
        .map(|_| {
            sample_uniform_design(&mut trial_rng, config.banks.k_flat, config.banks.k_sloped)
                .discrete_indices()
                .unwrap()
        })
        .collect();

    // direct regression: zero simulator calls
    let dr: Vec<(usize, usize)> = targets
        .iter()
        .map(|t| Ok(infer_dr(&prepared.dr, t)?.discrete_indices().unwrap()))
        .collect::<Result<_, HarnessError>>()?;

    // neural-adjoint search: zero simulator calls
    let nams_pop = infer_population(
        &prepared.nams,
        &targets,
        search_cfg,
        config.nams.rejection_rate,
        derive_seed(trial_seed, 0x99),
    )?;
    let nams: Vec<(usize, usize)> = nams_pop
        .entries
        .iter()
        .map(|e| (e.flat_idx, e.sloped_idx))
        .collect();
    nams_pop.save(&out_dir.join(format!("{experiment}_nams_population_trial{trial}.jsonl")))?;

    // distribution matching: T*N simulator calls against this trial's corpus
    let sim = CountedSimulator::new(&prepared.in_domain, &prepared.counter, SimPhase::Ms2Search);
    let mut sim_fn = |d: &DesignVector, z: u64| sim.simulate(d, z).map(|o| o.image);
    let ms2_out: Ms2SearchOutput = ms2_search(
        &targets,
        &prepared.pca,
        config.banks.k_flat,
        config.banks.k_sloped,
        &mut sim_fn,
        &Ms2Config {
            iters: config.ms2.iters,
            batch: config.ms2.batch,
            adam: AdamConfig::new(config.ms2.lr),
            kde_dim: config.ms2.kde_dim,
            bandwidth: config.ms2.bandwidth,
            population_size: targets.len(),
            seed: derive_seed(trial_seed, 0x98),
        },
    )?;
    write_ms2_iterations(
        &out_dir.join(format!("{experiment}_ms2_iterations_trial{trial}.csv")),
        &ms2_out,
    )?;
    let ms2: Vec<(usize, usize)> = ms2_out
        .population
        .entries
        .iter()
        .map(|e| (e.flat_idx, e.sloped_idx))
        .collect();

    Ok(TrialOutcome {
        inferred: vec![
            ("uniform".to_string(), uniform),
            ("dr".to_string(), dr),
            ("ms2".to_string(), ms2),
            ("nams".to_string(), nams),
        ],
        true_flat,
        true_sloped,
    })
}

fn write_ms2_iterations(path: &Path, out: &Ms2SearchOutput) -> Result<(), HarnessError> {
    let mut t = CsvTable::new(&[
        "iter",
        "est_kl_score_mean",
        "sim_calls_cum",
        "mode_flat",
        "mode_sloped",
        "mode_prob_flat",
        "mode_prob_sloped",
    ]);
    for r in &out.iterations {
        t.push(vec![
            r.iter.to_string(),
            fmt_f64(r.est_kl_score_mean),
            r.sim_calls_cum.to_string(),
            r.mode_flat.to_string(),
            r.mode_sloped.to_string(),
            fmt_f64(r.mode_prob_flat),
            fmt_f64(r.mode_prob_sloped),
        ]);
    }
    write_csv(path, &t)
}

fn run_design_inference_experiment(
    config: &ExperimentConfig,
    out_dir: &Path,
    experiment: &str,
) -> Result<ExperimentReport, HarnessError> {
    let mut prepared = prepare(config, out_dir)?;
    let search_cfg = search_config(config, prepared.sigma_per_dim.clone());
    search_cfg.validate()?;

    // E1 targets come from the in-domain bank (no design gap); E2 targets
    // from the held-out bank (design gap).
    let use_held_out = experiment == "e2";

    let mut rows = Vec::new();
    let mut details = CsvTable::new(&[
        "experiment",
        "trial",
        "method",
        "target",
        "true_flat",
        "true_sloped",
        "inferred_flat",
        "inferred_sloped",
        "rank_flat",
        "rank_sloped",
    ]);
    let t_trials = Instant::now();
    for trial in 0..config.experiment.trials {
        let target_bank = if use_held_out {
            &prepared.held_out
        } else {
            &prepared.in_domain
        };
        let outcome = run_trial(
            config,
            &prepared,
            &search_cfg,
            target_bank,
            trial,
            out_dir,
            experiment,
        )?;
        let true_flat_spec = &target_bank.flat[outcome.true_flat];
        let true_sloped_spec = &target_bank.sloped[outcome.true_sloped];
        for (method, inferred) in &outcome.inferred {
            let mut hits: std::collections::BTreeMap<(RoofKind, usize), usize> =
                std::collections::BTreeMap::new();
            for (ti, &(fi, si)) in inferred.iter().enumerate() {
                let rank_flat = score_rank(true_flat_spec, &prepared.in_domain.flat, fi);
                let rank_sloped = score_rank(true_sloped_spec, &prepared.in_domain.sloped, si);
                for &n in &config.experiment.top_ns {
                    *hits.entry((RoofKind::Flat, n)).or_insert(0) +=
                        (rank_flat <= n) as usize;
                    *hits.entry((RoofKind::Sloped, n)).or_insert(0) +=
                        (rank_sloped <= n) as usize;
                }
                details.push(vec![
                    experiment.to_string(),
                    trial.to_string(),
                    method.clone(),
                    ti.to_string(),
                    outcome.true_flat.to_string(),
                    outcome.true_sloped.to_string(),
                    fi.to_string(),
                    si.to_string(),
                    rank_flat.to_string(),
                    rank_sloped.to_string(),
                ]);
            }
            for ((roof, n), h) in hits {
                rows.push(AccuracyRow {
                    trial,
                    method: method.clone(),
                    roof,
                    top_n: n,
                    hits: h,
                    n_targets: inferred.len(),
                });
            }
        }
    }
    prepared
        .timings
        .push(("trials".to_string(), t_trials.elapsed().as_secs_f64()));

    let report = ExperimentReport {
        experiment: experiment.to_string(),
        rows,
        sim_calls: prepared.counter.snapshot(),
    };
    write_experiment_outputs(config, out_dir, experiment, &report, &details, &prepared.timings)?;
    Ok(report)
}

fn roof_name(roof: RoofKind) -> &'static str {
    match roof {
        RoofKind::Flat => "flat",
        RoofKind::Sloped => "sloped",
    }
}

fn write_experiment_outputs(
    config: &ExperimentConfig,
    out_dir: &Path,
    experiment: &str,
    report: &ExperimentReport,
    details: &CsvTable,
    timings: &[(String, f64)],
) -> Result<(), HarnessError> {
    let mut results = CsvTable::new(&[
        "experiment",
        "trial",
        "method",
        "roof",
        "top_n",
        "hits",
        "n_targets",
        "accuracy",
    ]);
    for r in &report.rows {
        results.push(vec![
            experiment.to_string(),
            r.trial.to_string(),
            r.method.clone(),
            roof_name(r.roof).to_string(),
            r.top_n.to_string(),
            r.hits.to_string(),
            r.n_targets.to_string(),
            fmt_f64(r.accuracy()),
        ]);
    }
    write_csv(&out_dir.join(format!("{experiment}_results.csv")), &results)?;
    write_csv(&out_dir.join(format!("{experiment}_details.csv")), details)?;
    let svg = csv_to_svg_bars(
        &results,
        &["method", "roof", "top_n"],
        "accuracy",
        &format!("{experiment} design-inference accuracy"),
    )?;
    std::fs::write(out_dir.join(format!("{experiment}_bars.svg")), svg)?;
    write_sim_calls(out_dir, report)?;

    let mut summary = serde_json::Map::new();
    summary.insert("experiment".into(), experiment.into());
    for method in METHODS {
        for roof in [RoofKind::Flat, RoofKind::Sloped] {
            for &n in &config.experiment.top_ns {
                let key = format!("{method}_{}_top{n}", roof_name(roof));
                summary.insert(
                    key,
                    serde_json::Value::from(report.mean_accuracy(method, roof, n)),
                );
            }
        }
    }
    std::fs::write(
        out_dir.join(format!("{experiment}_summary.json")),
        serde_json::to_string_pretty(&serde_json::Value::Object(summary))
            .map_err(|e| HarnessError::Io(e.to_string()))?,
    )?;

    Provenance::new(config, vec![config.seed]).write(&out_dir.join("provenance.json"))?;
    write_timings(out_dir, timings)?;
    Ok(())
}

fn write_sim_calls(out_dir: &Path, report: &ExperimentReport) -> Result<(), HarnessError> {
    let mut t = CsvTable::new(&["phase", "count"]);
    for (phase, count) in &report.sim_calls {
        t.push(vec![phase.name().to_string(), count.to_string()]);
    }
    write_csv(&out_dir.join("sim_calls.csv"), &t)
}

/// Wall-clock diagnostics; intentionally not CSV/JSON since durations vary
/// between identical runs.
fn write_timings(out_dir: &Path, timings: &[(String, f64)]) -> Result<(), HarnessError> {
    let mut f = std::fs::File::create(out_dir.join("timings.txt"))?;
    for (label, secs) in timings {
        writeln!(f, "{label}: {secs:.3}s")?;
    }
    Ok(())
}

/// E1: no design gap; targets rendered from in-domain designs.
pub fn run_e1(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentReport, HarnessError> {
    run_design_inference_experiment(config, out_dir, "e1")
}

/// E2: design gap; targets rendered from the held-out bank and scored by
/// nearest in-domain texture rank.
pub fn run_e2(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentReport, HarnessError> {
    run_design_inference_experiment(config, out_dir, "e2")
}

// ---------------------------------------------------------------------------
// E4: amortization accounting

#[derive(Clone, Debug)]
pub struct E4Report {
    pub nams_train_sims: u64,
    pub nams_infer_sims_per_domain: u64,
    pub dr_infer_sims_per_domain: u64,
    pub ms2_sims_per_domain: u64,
    /// Smallest number of target domains at which the one-time NAMS budget
    /// beats MS2's per-domain cost.
    pub crossover_domains: u64,
    /// Live micro-check counters.
    pub live_nams_infer_calls: u64,
    pub live_dr_infer_calls: u64,
    pub live_ms2_calls: u64,
    pub live_ms2_expected: u64,
}

/// Budget arithmetic from the configuration plus a live micro-run that
/// verifies the amortization contract on real code paths.
pub fn run_e4(config: &ExperimentConfig, out_dir: &Path) -> Result<E4Report, HarnessError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let nams_train_sims =
        (config.corpus.n_designs * config.corpus.images_per_design) as u64;
    let ms2_sims_per_domain = (config.ms2.iters * config.ms2.batch) as u64;
    let crossover_domains = nams_train_sims / ms2_sims_per_domain + 1;

    // live micro-check: tiny untrained models, two dummy targets
    let (in_domain, _) = build_bank_pair(config.banks.k_flat, config.banks.k_sloped)?;
    let counter = SimCallCounter::new();
    let tiny = NamsModel::new(
        NamsConfig {
            k_flat: config.banks.k_flat,
            k_sloped: config.banks.k_sloped,
            latent_dim: 4,
            hidden: vec![8],
            feature_dim: crate::features::FEATURE_DIM,
            lambda_p: 1.0,
            lambda_d: 1.0,
            lambda_kld: 0.0,
        },
        derive_seed(config.seed, 0xE4),
    );
    let targets = vec![
        FeatureVector(vec![0.1; crate::features::FEATURE_DIM]),
        FeatureVector(vec![0.3; crate::features::FEATURE_DIM]),
    ];
    let tiny_search = SearchConfig {
        restarts: 4,
        init_range_mult: 2.0,
        vote_pool: 2,
        iters: 10,
        adam: AdamConfig::new(0.02),
        sigma_per_dim: vec![1.0; 4],
    };
    infer_population(&tiny, &targets, &tiny_search, 0.0, config.seed)?;
    let live_nams_infer_calls = counter.count(SimPhase::NamsInfer);

    // DR inference on the same dummy targets
    let dr_dataset: Vec<(FeatureVector, DesignVector)> = (0..8)
        .map(|i| {
            let mut rng = Pcg32::with_stream(derive_seed(config.seed, 0xE5 + i), 1);
            let d = sample_uniform_design(&mut rng, config.banks.k_flat, config.banks.k_sloped);
            (
                FeatureVector((0..crate::features::FEATURE_DIM).map(|_| rng.next_f64()).collect()),
                d,
            )
        })
        .collect();
    let (dr_model, _) = train_dr(
        &dr_dataset,
        &DrConfig {
            hidden: vec![8],
            epochs: 1,
            batch: 4,
            adam: AdamConfig::new(1e-3),
            weight_decay: 0.0,
            train_frac: 0.75,
            seed: config.seed,
        },
    )?;
    for t in &targets {
        infer_dr(&dr_model, t)?;
    }
    let live_dr_infer_calls = counter.count(SimPhase::DrInfer);

    // MS2 micro-search: exactly T*N live calls
    let micro_iters = 3usize;
    let micro_batch = 4usize;
    let corpus_features: Vec<Vec<f64>> = (0..10)
        .map(|i| {
            let mut rng = Pcg32::with_stream(derive_seed(config.seed, 0xF0 + i), 2);
            (0..crate::features::FEATURE_DIM).map(|_| rng.next_f64()).collect()
        })
        .collect();
    let pca = Pca::fit(&corpus_features, config.ms2.kde_dim)?;
    let sim = CountedSimulator::new(&in_domain, &counter, SimPhase::Ms2Search);
    let mut sim_fn = |d: &DesignVector, z: u64| sim.simulate(d, z).map(|o| o.image);
    ms2_search(
        &targets,
        &pca,
        config.banks.k_flat,
        config.banks.k_sloped,
        &mut sim_fn,
        &Ms2Config {
            iters: micro_iters,
            batch: micro_batch,
            adam: AdamConfig::new(0.05),
            kde_dim: config.ms2.kde_dim,
            bandwidth: None,
            population_size: 2,
            seed: config.seed,
        },
    )?;
    let live_ms2_calls = counter.count(SimPhase::Ms2Search);

    let report = E4Report {
        nams_train_sims,
        nams_infer_sims_per_domain: 0,
        dr_infer_sims_per_domain: 0,
        ms2_sims_per_domain,
        crossover_domains,
        live_nams_infer_calls,
        live_dr_infer_calls,
        live_ms2_calls,
        live_ms2_expected: (micro_iters * micro_batch) as u64,
    };

    let mut t = CsvTable::new(&["metric", "value"]);
    for (k, v) in [
        ("nams_train_sims", report.nams_train_sims),
        ("nams_infer_sims_per_domain", report.nams_infer_sims_per_domain),
        ("dr_infer_sims_per_domain", report.dr_infer_sims_per_domain),
        ("ms2_sims_per_domain", report.ms2_sims_per_domain),
        ("crossover_domains", report.crossover_domains),
        ("live_nams_infer_calls", report.live_nams_infer_calls),
        ("live_dr_infer_calls", report.live_dr_infer_calls),
        ("live_ms2_calls", report.live_ms2_calls),
        ("live_ms2_expected", report.live_ms2_expected),
    ] {
        t.push(vec![k.to_string(), v.to_string()]);
    }
    write_csv(&out_dir.join("e4_accounting.csv"), &t)?;
    Provenance::new(config, vec![config.seed]).write(&out_dir.join("provenance.json"))?;

    // wall-clock probe, diagnostics only
    let t0 = Instant::now();
    let probe_design = DesignVector::one_hot(0, 0, config.banks.k_flat, config.banks.k_sloped);
    for z in 0..20u64 {
        let out = crate::sim::simulate(&probe_design, z, &in_domain)?;
        crate::features::dihedral_feature(&out.image)?;
    }
    let per_sim = t0.elapsed().as_secs_f64() / 20.0;
    write_timings(
        out_dir,
        &[("simulate_plus_features_per_image".to_string(), per_sim)],
    )?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// downstream comparison

#[derive(Clone, Debug)]
pub struct IoURow {
    pub strategy: String,
    pub seed: usize,
    pub iou: f64,
    pub n_tiles: usize,
    pub sim_calls: u64,
}

#[derive(Clone, Debug)]
pub struct DownstreamRun {
    pub rows: Vec<IoURow>,
}

impl DownstreamRun {
    pub fn mean_iou(&self, strategy: &str) -> f64 {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.strategy == strategy)
            .map(|r| r.iou)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    /// Standard error of the mean IoU across seeds.
    pub fn se_iou(&self, strategy: &str) -> f64 {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.strategy == strategy)
            .map(|r| r.iou)
            .collect();
        if v.len() < 2 {
            return 0.0;
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (v.len() - 1) as f64;
        (var / v.len() as f64).sqrt()
    }
}

pub const DOWNSTREAM_STRATEGIES: [&str; 5] = ["uniform", "dr", "ms2", "nams", "gt"];

/// Train the segmentation proxy on populations produced by each strategy and
/// score IoU on held-out tiles of the true design, over several seeds.
pub fn run_downstream(
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<DownstreamRun, HarnessError> {
    let prepared = prepare(config, out_dir)?;
    let search_cfg = search_config(config, prepared.sigma_per_dim.clone());
    let mut rows = Vec::new();

    for seed_idx in 0..config.downstream.seeds {
        let sseed = derive_seed(config.seed ^ 0xD54E, seed_idx as u64);
        let mut srng = Pcg32::with_stream(sseed, 0x40);
        let true_design =
            sample_uniform_design(&mut srng, config.banks.k_flat, config.banks.k_sloped);
        let targets = render_target_groups(
            config,
            &true_design,
            &prepared.in_domain,
            &prepared.counter,
            sseed,
        )?;
        let n = targets.len();

        let mut populations: Vec<(String, DesignPopulation)> = Vec::new();
        let (tf, ts) = true_design.discrete_indices().unwrap();
        populations.push((
            "gt".to_string(),
            DesignPopulation {
                entries: (0..n)
                    .map(|_| PopulationEntry {
                        flat_idx: tf,
                        sloped_idx: ts,
                        source: PopulationSource::Searched,
                        loss: 0.0,
                    })
                    .collect(),
            },
        ));
        populations.push((
            "uniform".to_string(),
            DesignPopulation {
                entries: (0..n)
                    .map(|_| {
                        let d = sample_uniform_design(
                            &mut srng,
                            config.banks.k_flat,
                            config.banks.k_sloped,
                        );
                        let (f, s) = d.discrete_indices().unwrap();
                        PopulationEntry {
                            flat_idx: f,
                            sloped_idx: s,
                            source: PopulationSource::RejectedUniform,
                            loss: 0.0,
                        }
                    })
                    .collect(),
            },
        ));
        populations.push((
            "dr".to_string(),
            DesignPopulation {
                entries: targets
                    .iter()
                    .map(|t| {
                        let d = infer_dr(&prepared.dr, t)?;
                        let (f, s) = d.discrete_indices().unwrap();
                        Ok(PopulationEntry {
                            flat_idx: f,
                            sloped_idx: s,
                            source: PopulationSource::Searched,
                            loss: 0.0,
                        })
                    })
                    .collect::<Result<Vec<_>, HarnessError>>()?,
            },
        ));
        populations.push((
            "nams".to_string(),
            infer_population(
                &prepared.nams,
                &targets,
                &search_cfg,
                config.nams.rejection_rate,
                derive_seed(sseed, 0x41),
            )?,
        ));
        let sim = CountedSimulator::new(&prepared.in_domain, &prepared.counter, SimPhase::Ms2Search);
        let mut sim_fn = |d: &DesignVector, z: u64| sim.simulate(d, z).map(|o| o.image);
        let ms2_out = ms2_search(
            &targets,
            &prepared.pca,
            config.banks.k_flat,
            config.banks.k_sloped,
            &mut sim_fn,
            &Ms2Config {
                iters: config.ms2.iters,
                batch: config.ms2.batch,
                adam: AdamConfig::new(config.ms2.lr),
                kde_dim: config.ms2.kde_dim,
                bandwidth: config.ms2.bandwidth,
                population_size: n,
                seed: derive_seed(sseed, 0x42),
            },
        )?;
        populations.push(("ms2".to_string(), ms2_out.population));

        // fresh evaluation tiles of the true design
        let eval_sim =
            CountedSimulator::new(&prepared.in_domain, &prepared.counter, SimPhase::TargetGen);
        let eval_tiles: Vec<(crate::sim::Image, crate::sim::Mask)> = (0..config
            .downstream
            .eval_tiles)
            .map(|i| {
                let out = eval_sim.simulate(&true_design, derive_seed(sseed ^ 0xE7A1, i as u64))?;
                Ok((out.image, out.mask))
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;

        for (strategy, population) in populations {
            let before = prepared.counter.count(SimPhase::Downstream);
            let ds_sim =
                CountedSimulator::new(&prepared.in_domain, &prepared.counter, SimPhase::Downstream);
            let mut sim_fn = |d: &DesignVector, z: u64| ds_sim.simulate(d, z);
            let pixel_set = build_training_set(
                &population,
                config.banks.k_flat,
                config.banks.k_sloped,
                config.downstream.tiles_per_design,
                derive_seed(sseed, 0x43),
                &mut sim_fn,
            )?;
            let (classifier, _) = train_proxy(
                &pixel_set,
                &ProxyConfig {
                    epochs: config.downstream.proxy_epochs,
                    batch: config.downstream.proxy_batch,
                    adam: AdamConfig::new(config.downstream.proxy_lr),
                    seed: derive_seed(sseed, 0x44),
                },
            )?;
            let report = eval_iou(&classifier, &eval_tiles)?;
            rows.push(IoURow {
                strategy,
                seed: seed_idx,
                iou: report.iou,
                n_tiles: report.n_tiles,
                sim_calls: prepared.counter.count(SimPhase::Downstream) - before,
            });
        }
    }

    let mut t = CsvTable::new(&["strategy", "seed", "iou", "n_tiles", "sim_calls"]);
    for r in &rows {
        t.push(vec![
            r.strategy.clone(),
            r.seed.to_string(),
            fmt_f64(r.iou),
            r.n_tiles.to_string(),
            r.sim_calls.to_string(),
        ]);
    }
    write_csv(&out_dir.join("iou_report.csv"), &t)?;
    let svg = csv_to_svg_bars(&t, &["strategy"], "iou", "downstream proxy IoU by strategy")?;
    std::fs::write(out_dir.join("iou_bars.svg"), svg)?;

    let run = DownstreamRun { rows };
    let mut summary = serde_json::Map::new();
    for s in DOWNSTREAM_STRATEGIES {
        summary.insert(format!("{s}_mean_iou"), run.mean_iou(s).into());
        summary.insert(format!("{s}_se_iou"), run.se_iou(s).into());
    }
    std::fs::write(
        out_dir.join("downstream_summary.json"),
        serde_json::to_string_pretty(&serde_json::Value::Object(summary))
            .map_err(|e| HarnessError::Io(e.to_string()))?,
    )?;
    let mut counter_report = ExperimentReport {
        experiment: "downstream".to_string(),
        rows: Vec::new(),
        sim_calls: prepared.counter.snapshot(),
    };
    write_sim_calls(out_dir, &counter_report)?;
    counter_report.sim_calls.clear();
    Provenance::new(config, vec![config.seed]).write(&out_dir.join("provenance.json"))?;
    write_timings(out_dir, &prepared.timings)?;
    Ok(run)
}
