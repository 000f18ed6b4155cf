//! File-based operations behind the CLI subcommands that are not whole
//! experiments: corpus generation, standalone model training, amortized
//! inference over stored targets, and standalone distribution-matching
//! search.

use std::path::Path;

use super::corpus::{gen_training_corpus, load_corpus_features};
use super::report::{fmt_f64, write_csv, CsvTable};
use super::{
    CountedSimulator, ExperimentConfig, HarnessError, Provenance, SimCallCounter, SimPhase,
};
use crate::baselines::{ms2_search, train_dr, DrConfig, DrModel, Ms2Config, Pca};
use crate::features::{read_feature_records, FeatureVector};
use crate::nams_core::{
    estimate_sigma_per_dim, infer_population, NamsConfig, NamsModel, SearchConfig, TrainConfig,
};
use crate::rng::derive_seed;
use crate::sim::{build_bank_pair, DesignVector};
use crate::tensor::AdamConfig;

fn write_sim_calls_table(out_dir: &Path, counter: &SimCallCounter) -> Result<(), HarnessError> {
    let mut t = CsvTable::new(&["phase", "count"]);
    for (phase, count) in counter.snapshot() {
        t.push(vec![phase.name().to_string(), count.to_string()]);
    }
    write_csv(&out_dir.join("sim_calls.csv"), &t)
}

/// `gen-corpus`: render the uniform training corpus to disk.
pub fn cli_gen_corpus(config: &ExperimentConfig, out_dir: &Path) -> Result<(), HarnessError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let (in_domain, _) = build_bank_pair(config.banks.k_flat, config.banks.k_sloped)?;
    let counter = SimCallCounter::new();
    gen_training_corpus(config, &in_domain, &counter, &out_dir.join("corpus"))?;
    write_sim_calls_table(out_dir, &counter)?;
    Provenance::new(config, vec![config.seed]).write(&out_dir.join("provenance.json"))?;
    Ok(())
}

fn corpus_dataset(
    config: &ExperimentConfig,
    corpus_dir: &Path,
) -> Result<Vec<(DesignVector, FeatureVector)>, HarnessError> {
    let entries = load_corpus_features(
        &corpus_dir.join("features.jsonl"),
        config.banks.k_flat,
        config.banks.k_sloped,
    )?;
    Ok(entries
        .into_iter()
        .map(|e| (e.design, e.feature))
        .collect())
}

/// `train-nams`: fit the encoder/decoder/predictor on a stored corpus.
pub fn cli_train_nams(
    config: &ExperimentConfig,
    corpus_dir: &Path,
    out_dir: &Path,
) -> Result<(), HarnessError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let dataset = corpus_dataset(config, corpus_dir)?;
    let mut model = NamsModel::new(
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
        &mut model,
        &dataset,
        &TrainConfig {
            epochs: config.nams.epochs,
            batch: config.nams.batch,
            adam: AdamConfig::new(config.nams.lr),
            holdout_frac: config.nams.holdout_frac,
            seed: derive_seed(config.seed, 0x12),
        },
    )?;
    let models_dir = out_dir.join("models");
    model.save(&models_dir)?;
    let mut t = CsvTable::new(&["epoch", "total", "l_p", "l_d", "l_kld", "holdout_total"]);
    for c in &curves {
        t.push(vec![
            c.epoch.to_string(),
            fmt_f64(c.total),
            fmt_f64(c.l_p),
            fmt_f64(c.l_d),
            fmt_f64(c.l_kld),
            fmt_f64(c.holdout_total),
        ]);
    }
    write_csv(&models_dir.join("nams_training_curve.csv"), &t)?;
    Provenance::new(config, vec![config.seed]).write(&out_dir.join("provenance.json"))?;
    Ok(())
}

/// `train-dr`: fit the direct-regression baseline on a stored corpus.
pub fn cli_train_dr(
    config: &ExperimentConfig,
    corpus_dir: &Path,
    out_dir: &Path,
) -> Result<(), HarnessError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let dataset: Vec<(FeatureVector, DesignVector)> = corpus_dataset(config, corpus_dir)?
        .into_iter()
        .map(|(d, f)| (f, d))
        .collect();
    let (model, report) = train_dr(
        &dataset,
        &DrConfig {
            hidden: vec![config.dr.hidden_units; config.dr.hidden_layers],
            epochs: config.dr.epochs,
            batch: config.dr_batch_for(dataset.len()),
            adam: AdamConfig::new(config.dr.lr),
            weight_decay: config.dr.weight_decay,
            train_frac: config.dr.train_frac,
            seed: derive_seed(config.seed, 0x13),
        },
    )?;
    let models_dir = out_dir.join("models");
    model.save(&models_dir).map_err(HarnessError::from)?;
    let mut t = CsvTable::new(&["epoch", "train_mse", "test_mse", "mean_predictor_mse"]);
    for c in &report.curves {
        t.push(vec![
            c.epoch.to_string(),
            fmt_f64(c.train_mse),
            fmt_f64(c.test_mse),
            fmt_f64(report.mean_predictor_mse),
        ]);
    }
    write_csv(&models_dir.join("dr_training_curve.csv"), &t)?;
    Provenance::new(config, vec![config.seed]).write(&out_dir.join("provenance.json"))?;
    Ok(())
}

fn load_targets(path: &Path) -> Result<Vec<FeatureVector>, HarnessError> {
    let records = read_feature_records(path)?;
    Ok(records.into_iter().map(|r| FeatureVector(r.feature)).collect())
}

/// `infer`: amortized design inference for stored target feature groups.
/// Both NAMS (latent search) and DR (regression) run; neither touches the
/// simulator, which the emitted sim_calls.csv records.
pub fn cli_infer(
    config: &ExperimentConfig,
    model_dir: &Path,
    corpus_dir: &Path,
    targets_path: &Path,
    out_dir: &Path,
) -> Result<(), HarnessError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let counter = SimCallCounter::new();
    let nams = NamsModel::load(model_dir)?;
    let dr = DrModel::load(model_dir).map_err(HarnessError::from)?;
    let corpus = load_corpus_features(
        &corpus_dir.join("features.jsonl"),
        config.banks.k_flat,
        config.banks.k_sloped,
    )?;
    let designs: Vec<DesignVector> = corpus.iter().map(|e| e.design.clone()).collect();
    let sigma = estimate_sigma_per_dim(&nams, &designs)?;
    let targets = load_targets(targets_path)?;

    let population = infer_population(
        &nams,
        &targets,
        &SearchConfig {
            restarts: config.nams.search.restarts,
            init_range_mult: config.nams.search.init_range_mult,
            vote_pool: config.nams.search.vote_pool,
            iters: config.nams.search.iters,
            adam: AdamConfig::new(config.nams.search.lr),
            sigma_per_dim: sigma,
        },
        config.nams.rejection_rate,
        derive_seed(config.seed, 0x21),
    )?;
    population.save(&out_dir.join("nams_population.jsonl"))?;

    let mut t = CsvTable::new(&["target", "flat_idx", "sloped_idx"]);
    for (i, target) in targets.iter().enumerate() {
        let d = crate::baselines::infer_dr(&dr, target)?;
        let (f, s) = d.discrete_indices().unwrap();
        t.push(vec![i.to_string(), f.to_string(), s.to_string()]);
    }
    write_csv(&out_dir.join("dr_inferences.csv"), &t)?;

    write_sim_calls_table(out_dir, &counter)?;
    Provenance::new(config, vec![config.seed]).write(&out_dir.join("provenance.json"))?;
    Ok(())
}

/// `ms2-search`: distribution matching against stored targets, with live
/// simulation.
pub fn cli_ms2_search(
    config: &ExperimentConfig,
    corpus_dir: &Path,
    targets_path: &Path,
    out_dir: &Path,
) -> Result<(), HarnessError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let (in_domain, _) = build_bank_pair(config.banks.k_flat, config.banks.k_sloped)?;
    let counter = SimCallCounter::new();
    let corpus = load_corpus_features(
        &corpus_dir.join("features.jsonl"),
        config.banks.k_flat,
        config.banks.k_sloped,
    )?;
    let features: Vec<Vec<f64>> = corpus.iter().map(|e| e.feature.values().to_vec()).collect();
    let pca = Pca::fit(&features, config.ms2.kde_dim)?;
    let targets = load_targets(targets_path)?;

    let sim = CountedSimulator::new(&in_domain, &counter, SimPhase::Ms2Search);
    let mut sim_fn = |d: &DesignVector, z: u64| sim.simulate(d, z).map(|o| o.image);
    let out = ms2_search(
        &targets,
        &pca,
        config.banks.k_flat,
        config.banks.k_sloped,
        &mut sim_fn,
        &Ms2Config {
            iters: config.ms2.iters,
            batch: config.ms2.batch,
            adam: AdamConfig::new(config.ms2.lr),
            kde_dim: config.ms2.kde_dim,
            bandwidth: config.ms2.bandwidth,
            population_size: config.ms2.population_size,
            seed: derive_seed(config.seed, 0x22),
        },
    )?;
    out.population.save(&out_dir.join("ms2_population.jsonl"))?;
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
    write_csv(&out_dir.join("ms2_iterations.csv"), &t)?;
    write_sim_calls_table(out_dir, &counter)?;
    Provenance::new(config, vec![config.seed]).write(&out_dir.join("provenance.json"))?;
    Ok(())
}

/// `report`: regenerate every SVG from its CSV source in place. Returns the
/// files written.
pub fn cli_report(out_dir: &Path) -> Result<Vec<std::path::PathBuf>, HarnessError> {
    let mut written = Vec::new();
    let specs: [(&str, &[&str], &str, &str, &str); 3] = [
        (
            "e1_results.csv",
            &["method", "roof", "top_n"],
            "accuracy",
            "e1 design-inference accuracy",
            "e1_bars.svg",
        ),
        (
            "e2_results.csv",
            &["method", "roof", "top_n"],
            "accuracy",
            "e2 design-inference accuracy",
            "e2_bars.svg",
        ),
        (
            "iou_report.csv",
            &["strategy"],
            "iou",
            "downstream proxy IoU by strategy",
            "iou_bars.svg",
        ),
    ];
    for (csv_name, labels, value, title, svg_name) in specs {
        let csv_path = out_dir.join(csv_name);
        if !csv_path.exists() {
            continue;
        }
        let table = super::report::read_csv(&csv_path)?;
        let svg = super::report::csv_to_svg_bars(&table, labels, value, title)?;
        let svg_path = out_dir.join(svg_name);
        std::fs::write(&svg_path, svg)?;
        written.push(svg_path);
    }
    Ok(written)
}
