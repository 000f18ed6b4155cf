//! Experiment orchestration: configuration profiles, simulator-call
//! accounting, corpus generation, the E1/E2/E4 and downstream experiment
//! runners, and report emission.

mod corpus;
mod experiments;
mod ops;
mod report;

pub use corpus::{gen_training_corpus, generate_corpus_in_memory, load_corpus_features, CorpusEntry};
pub use experiments::{
    run_downstream, run_e1, run_e2, run_e4, score_rank, DownstreamRun, E4Report, ExperimentReport,
    DOWNSTREAM_STRATEGIES, METHODS,
};
pub use ops::{cli_gen_corpus, cli_infer, cli_ms2_search, cli_report, cli_train_dr, cli_train_nams};
pub use report::{
    csv_to_svg_bars, read_csv, write_csv, CsvTable, CSV_FORMAT_VERSION, SVG_FORMAT_VERSION,
};

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::BaselineError;
use crate::downstream::DownstreamError;
use crate::features::FeatureError;
use crate::nams_core::NamsError;
use crate::sim::{simulate, DesignVector, SimError, SimOutput, TextureBank};
use crate::tensor::TensorError;

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(String),
}

impl HarnessError {
    /// Process exit code contract: 2 for configuration, 3 for numerics.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Numerical(_) | HarnessError::Io(_) => 3,
        }
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

impl From<SimError> for HarnessError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Io(io) => HarnessError::Io(io.to_string()),
            other => HarnessError::Config(other.to_string()),
        }
    }
}

impl From<TensorError> for HarnessError {
    fn from(e: TensorError) -> Self {
        HarnessError::Numerical(e.to_string())
    }
}

impl From<NamsError> for HarnessError {
    fn from(e: NamsError) -> Self {
        match e {
            NamsError::Config(c) => HarnessError::Config(c),
            NamsError::Io(io) => HarnessError::Io(io),
            other => HarnessError::Numerical(other.to_string()),
        }
    }
}

impl From<BaselineError> for HarnessError {
    fn from(e: BaselineError) -> Self {
        match e {
            BaselineError::Config(c) => HarnessError::Config(c),
            BaselineError::Io(io) => HarnessError::Io(io),
            other => HarnessError::Numerical(other.to_string()),
        }
    }
}

impl From<DownstreamError> for HarnessError {
    fn from(e: DownstreamError) -> Self {
        HarnessError::Numerical(e.to_string())
    }
}

impl From<FeatureError> for HarnessError {
    fn from(e: FeatureError) -> Self {
        HarnessError::Numerical(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Minutes-scale defaults on a laptop CPU.
    Desk,
    /// The published constants; expect hours.
    Paper,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BankConfig {
    pub k_flat: usize,
    pub k_sloped: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CorpusConfig {
    pub n_designs: usize,
    pub images_per_design: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SearchSection {
    pub restarts: usize,
    pub init_range_mult: f64,
    pub vote_pool: usize,
    pub iters: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NamsSection {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub lambda_p: f64,
    pub lambda_d: f64,
    pub lambda_kld: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub holdout_frac: f64,
    pub search: SearchSection,
    pub rejection_rate: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DrSection {
    pub hidden_units: usize,
    pub hidden_layers: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub train_frac: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Ms2Section {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub kde_dim: usize,
    pub bandwidth: Option<f64>,
    pub population_size: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ExperimentSection {
    pub trials: usize,
    pub target_groups_per_trial: usize,
    pub top_ns: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DownstreamSection {
    pub seeds: usize,
    pub tiles_per_design: usize,
    pub eval_tiles: usize,
    pub proxy_epochs: usize,
    pub proxy_batch: usize,
    pub proxy_lr: f64,
}

/// The complete experiment configuration; serialized as documented JSON with
/// an explicit version field. Seeds are always explicit.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    pub version: u32,
    pub profile: Profile,
    pub seed: u64,
    pub banks: BankConfig,
    pub corpus: CorpusConfig,
    pub nams: NamsSection,
    pub dr: DrSection,
    pub ms2: Ms2Section,
    pub experiment: ExperimentSection,
    pub downstream: DownstreamSection,
    /// Apply the appearance-gap post-process to target renders.
    pub appearance_gap: bool,
    /// Load pre-trained models from this directory instead of training.
    pub model_dir: Option<String>,
}

impl ExperimentConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            version: CONFIG_FORMAT_VERSION,
            profile: Profile::Desk,
            seed,
            banks: BankConfig {
                k_flat: 16,
                k_sloped: 16,
            },
            corpus: CorpusConfig {
                n_designs: 400,
                images_per_design: 9,
            },
            nams: NamsSection {
                latent_dim: 10,
                hidden: vec![256, 512],
                lambda_p: 0.005,
                lambda_d: 1.0,
                lambda_kld: 0.0005,
                epochs: 2500,
                batch: 64,
                lr: 1e-3,
                holdout_frac: 0.1,
                search: SearchSection {
                    restarts: 200,
                    init_range_mult: 3.0,
                    vote_pool: 50,
                    iters: 200,
                    lr: 0.01,
                },
                rejection_rate: 0.0,
            },
            dr: DrSection {
                hidden_units: 128,
                hidden_layers: 5,
                epochs: 400,
                batch: 1000,
                lr: 1e-3,
                weight_decay: 0.5,
                train_frac: 0.8,
            },
            ms2: Ms2Section {
                iters: 50,
                batch: 64,
                lr: 0.05,
                kde_dim: 8,
                bandwidth: None,
                population_size: 12,
            },
            experiment: ExperimentSection {
                trials: 4,
                target_groups_per_trial: 12,
                top_ns: vec![1, 3],
            },
            downstream: DownstreamSection {
                seeds: 3,
                tiles_per_design: 4,
                eval_tiles: 24,
                proxy_epochs: 16,
                proxy_batch: 256,
                proxy_lr: 2e-3,
            },
            appearance_gap: false,
            model_dir: None,
        }
    }

    pub fn paper(seed: u64) -> Self {
        let mut cfg = Self::desk(seed);
        cfg.profile = Profile::Paper;
        cfg.banks = BankConfig {
            k_flat: 40,
            k_sloped: 44,
        };
        cfg.corpus = CorpusConfig {
            n_designs: 1700,
            images_per_design: 9,
        };
        cfg.nams.hidden = vec![1024, 2048];
        cfg.nams.epochs = 50_000;
        cfg.nams.batch = 64;
        cfg.nams.search = SearchSection {
            restarts: 1000,
            init_range_mult: 3.0,
            vote_pool: 50,
            iters: 200,
            lr: 0.01,
        };
        cfg.dr = DrSection {
            hidden_units: 500,
            hidden_layers: 5,
            epochs: 400,
            batch: 1000,
            lr: 1e-3,
            weight_decay: 0.5,
            train_frac: 0.8,
        };
        cfg.ms2 = Ms2Section {
            iters: 200,
            batch: 500,
            lr: 0.05,
            kde_dim: 8,
            bandwidth: None,
            population_size: 12,
        };
        cfg.experiment.top_ns = vec![1, 10];
        cfg
    }

    pub fn for_profile(profile: Profile, seed: u64) -> Self {
        match profile {
            Profile::Desk => Self::desk(seed),
            Profile::Paper => Self::paper(seed),
        }
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read config {path:?}: {e}")))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("bad config json: {e}")))?;
        if cfg.version != CONFIG_FORMAT_VERSION {
            return Err(HarnessError::Config(format!(
                "unsupported config version {} (expected {CONFIG_FORMAT_VERSION})",
                cfg.version
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| HarnessError::Io(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| HarnessError::Io(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.banks.k_flat < 2 || self.banks.k_sloped < 2 {
            return Err(HarnessError::Config("bank sizes must be >= 2".into()));
        }
        if self.corpus.images_per_design != crate::features::GROUP_SIZE {
            return Err(HarnessError::Config(format!(
                "images_per_design must be {} (the feature-group contract)",
                crate::features::GROUP_SIZE
            )));
        }
        if self.nams.search.vote_pool > self.nams.search.restarts {
            return Err(HarnessError::Config(
                "search.vote_pool must not exceed search.restarts".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.nams.rejection_rate) {
            return Err(HarnessError::Config(
                "nams.rejection_rate must lie in [0,1]".into(),
            ));
        }
        if self.experiment.trials == 0 || self.experiment.target_groups_per_trial == 0 {
            return Err(HarnessError::Config(
                "experiment.trials and target_groups_per_trial must be positive".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Desk scaling rule for the DR batch size.
    pub fn dr_batch_for(&self, dataset_len: usize) -> usize {
        self.dr.batch.min((dataset_len / 10).max(2))
    }
}

// ---------------------------------------------------------------------------
// simulator-call accounting

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimPhase {
    NamsTrain,
    NamsInfer,
    DrTrain,
    DrInfer,
    Ms2Search,
    Downstream,
    TargetGen,
}

impl SimPhase {
    pub const ALL: [SimPhase; 7] = [
        SimPhase::NamsTrain,
        SimPhase::NamsInfer,
        SimPhase::DrTrain,
        SimPhase::DrInfer,
        SimPhase::Ms2Search,
        SimPhase::Downstream,
        SimPhase::TargetGen,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SimPhase::NamsTrain => "nams_train",
            SimPhase::NamsInfer => "nams_infer",
            SimPhase::DrTrain => "dr_train",
            SimPhase::DrInfer => "dr_infer",
            SimPhase::Ms2Search => "ms2_search",
            SimPhase::Downstream => "downstream",
            SimPhase::TargetGen => "target_gen",
        }
    }
}

/// Monotone per-phase simulator-call counts. The amortization contract pins
/// `nams_infer` and `dr_infer` to zero for every experiment.
#[derive(Debug, Default)]
pub struct SimCallCounter {
    counts: [AtomicU64; 7],
}

impl SimCallCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, phase: SimPhase) {
        self.counts[phase as usize].fetch_add(1, Ordering::Relaxed);
    }

    pub fn count(&self, phase: SimPhase) -> u64 {
        self.counts[phase as usize].load(Ordering::Relaxed)
    }

    pub fn snapshot(&self) -> Vec<(SimPhase, u64)> {
        SimPhase::ALL.iter().map(|&p| (p, self.count(p))).collect()
    }
}

/// The counted simulator handle every experiment renders through.
pub struct CountedSimulator<'a> {
    pub bank: &'a TextureBank,
    pub counter: &'a SimCallCounter,
    pub phase: SimPhase,
}

impl<'a> CountedSimulator<'a> {
    pub fn new(bank: &'a TextureBank, counter: &'a SimCallCounter, phase: SimPhase) -> Self {
        Self {
            bank,
            counter,
            phase,
        }
    }

    pub fn simulate(&self, design: &DesignVector, zeta: u64) -> Result<SimOutput, SimError> {
        self.counter.record(self.phase);
        simulate(design, zeta, self.bank)
    }
}

/// Reproducibility record written next to every report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub config_version: u32,
    pub csv_format_version: u32,
    pub svg_format_version: u32,
    pub param_format_version: u32,
    pub feature_format_version: u32,
    pub seeds: Vec<u64>,
}

impl Provenance {
    pub fn new(config: &ExperimentConfig, seeds: Vec<u64>) -> Self {
        Self {
            config_hash: config.hash(),
            config_version: config.version,
            csv_format_version: report::CSV_FORMAT_VERSION,
            svg_format_version: report::SVG_FORMAT_VERSION,
            param_format_version: crate::tensor::PARAM_FORMAT_VERSION,
            feature_format_version: crate::features::FEATURE_FORMAT_VERSION,
            seeds,
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), HarnessError> {
        let json =
            serde_json::to_string_pretty(self).map_err(|e| HarnessError::Io(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| HarnessError::Io(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrip_and_hash_stability() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::desk(7);
        let path = dir.path().join("config.json");
        cfg.save(&path).unwrap();
        let loaded = ExperimentConfig::load(&path).unwrap();
        assert_eq!(loaded, cfg);
        assert_eq!(loaded.hash(), cfg.hash());
        let other = ExperimentConfig::desk(8);
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn config_rejects_bad_version_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::desk(1);
        cfg.version = 99;
        let path = dir.path().join("bad.json");
        cfg.save(&path).unwrap();
        assert!(ExperimentConfig::load(&path).is_err());

        let mut cfg = ExperimentConfig::desk(1);
        cfg.nams.search.vote_pool = cfg.nams.search.restarts + 1;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::desk(1);
        cfg.corpus.images_per_design = 8;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn counter_counts_per_phase() {
        let counter = SimCallCounter::new();
        let bank = TextureBank::new(crate::sim::BankKind::InDomain, 4, 4);
        let handle = CountedSimulator::new(&bank, &counter, SimPhase::Ms2Search);
        let d = DesignVector::one_hot(0, 1, 4, 4);
        for z in 0..5 {
            handle.simulate(&d, z).unwrap();
        }
        assert_eq!(counter.count(SimPhase::Ms2Search), 5);
        assert_eq!(counter.count(SimPhase::NamsInfer), 0);
        assert_eq!(counter.count(SimPhase::DrInfer), 0);
    }

    #[test]
    fn paper_profile_carries_published_constants() {
        let cfg = ExperimentConfig::paper(0);
        assert_eq!(cfg.banks.k_flat, 40);
        assert_eq!(cfg.banks.k_sloped, 44);
        assert_eq!(cfg.corpus.n_designs, 1700);
        assert_eq!(cfg.nams.hidden, vec![1024, 2048]);
        assert_eq!(cfg.nams.epochs, 50_000);
        assert_eq!(cfg.nams.search.restarts, 1000);
        assert_eq!(cfg.nams.search.vote_pool, 50);
        assert_eq!(cfg.dr.hidden_units, 500);
        assert_eq!(cfg.ms2.iters, 200);
        assert_eq!(cfg.ms2.batch, 500);
        assert_eq!(cfg.experiment.top_ns, vec![1, 10]);
    }
}
