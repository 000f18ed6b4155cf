//! Training-corpus generation: uniformly sampled designs, nine fresh-seed
//! renders per design, grouped features. On-disk form writes PPM/PGM tiles,
//! a JSON-lines manifest, and the feature records.

use std::path::Path;

use rayon::prelude::*;

use super::{CountedSimulator, ExperimentConfig, HarnessError, SimCallCounter, SimPhase};
use crate::features::{group_features, FeatureRecord, FeatureVector, FEATURE_FORMAT_VERSION};
use crate::rng::{derive_seed, Pcg32};
use crate::sim::{
    sample_uniform_design, tile_paths, write_manifest, DesignVector, ManifestRecord, TextureBank,
};

/// One corpus group: a design, the seeds of its renders, and the averaged
/// feature vector.
#[derive(Clone, Debug)]
pub struct CorpusEntry {
    pub design: DesignVector,
    pub zetas: Vec<u64>,
    pub feature: FeatureVector,
}

/// Generate the corpus without touching disk. Parallel over designs; output
/// order is the design order, so results are deterministic in the seed.
pub fn generate_corpus_in_memory(
    config: &ExperimentConfig,
    bank: &TextureBank,
    counter: &SimCallCounter,
    phase: SimPhase,
) -> Result<Vec<CorpusEntry>, HarnessError> {
    let mut design_rng = Pcg32::with_stream(config.seed, 0xC0);
    let designs: Vec<DesignVector> = (0..config.corpus.n_designs)
        .map(|_| sample_uniform_design(&mut design_rng, config.banks.k_flat, config.banks.k_sloped))
        .collect();
    let per = config.corpus.images_per_design;
    let entries: Result<Vec<CorpusEntry>, HarnessError> = designs
        .into_par_iter()
        .enumerate()
        .map(|(i, design)| {
            let sim = CountedSimulator::new(bank, counter, phase);
            let mut images = Vec::with_capacity(per);
            let mut zetas = Vec::with_capacity(per);
            for j in 0..per {
                let zeta = derive_seed(config.seed ^ 0xC0FF, (i * per + j) as u64);
                let out = sim.simulate(&design, zeta)?;
                images.push(out.image);
                zetas.push(zeta);
            }
            let group = group_features(&images)?;
            Ok(CorpusEntry {
                design,
                zetas,
                feature: group.averaged,
            })
        })
        .collect();
    entries
}

/// Generate the corpus and write every artifact under `dir`: tiles, masks,
/// the manifest, and features.jsonl.
pub fn gen_training_corpus(
    config: &ExperimentConfig,
    bank: &TextureBank,
    counter: &SimCallCounter,
    dir: &Path,
) -> Result<Vec<CorpusEntry>, HarnessError> {
    std::fs::create_dir_all(dir)?;
    let entries = generate_corpus_in_memory(config, bank, counter, SimPhase::NamsTrain)?;
    let per = config.corpus.images_per_design;
    let mut manifest = Vec::with_capacity(entries.len() * per);
    for (i, entry) in entries.iter().enumerate() {
        let (f, s) = entry.design.discrete_indices().expect("corpus designs are discrete");
        for (j, &zeta) in entry.zetas.iter().enumerate() {
            let index = i * per + j;
            let (img_path, mask_path) = tile_paths(dir, index);
            // renders are cheap and pure; re-render rather than hold all
            // tiles in memory
            let out = crate::sim::simulate(&entry.design, zeta, bank)?;
            out.image.write_ppm(&img_path)?;
            out.mask.write_pgm(&mask_path)?;
            manifest.push(ManifestRecord {
                path: img_path.file_name().unwrap().to_string_lossy().into_owned(),
                mask_path: mask_path.file_name().unwrap().to_string_lossy().into_owned(),
                design: [f, s],
                zeta,
                bank: bank.kind.name().to_string(),
            });
        }
    }
    write_manifest(&dir.join("manifest.jsonl"), &manifest)?;
    let records: Vec<FeatureRecord> = entries
        .iter()
        .map(|e| {
            let (f, s) = e.design.discrete_indices().unwrap();
            FeatureRecord {
                v: FEATURE_FORMAT_VERSION,
                design: [f, s],
                zetas: e.zetas.clone(),
                feature: e.feature.values().to_vec(),
            }
        })
        .collect();
    crate::features::write_feature_records(&dir.join("features.jsonl"), &records)?;
    Ok(entries)
}

/// Rebuild corpus entries from a features.jsonl written by
/// [`gen_training_corpus`].
pub fn load_corpus_features(
    path: &Path,
    k_flat: usize,
    k_sloped: usize,
) -> Result<Vec<CorpusEntry>, HarnessError> {
    let records = crate::features::read_feature_records(path)?;
    Ok(records
        .into_iter()
        .map(|r| CorpusEntry {
            design: DesignVector::one_hot(r.design[0], r.design[1], k_flat, k_sloped),
            zetas: r.zetas,
            feature: FeatureVector(r.feature),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::BankKind;

    fn small_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk(3);
        cfg.corpus.n_designs = 2;
        cfg
    }

    #[test]
    fn corpus_counts_and_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let bank = TextureBank::new(BankKind::InDomain, 16, 16);
        let counter = SimCallCounter::new();
        let entries = gen_training_corpus(&cfg, &bank, &counter, dir.path()).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(counter.count(SimPhase::NamsTrain), 18, "2 designs x 9 images");
        let manifest = crate::sim::read_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(manifest.len(), 18);
        let loaded = load_corpus_features(&dir.path().join("features.jsonl"), 16, 16).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].design, entries[0].design);
        for (a, b) in loaded[0]
            .feature
            .values()
            .iter()
            .zip(entries[0].feature.values())
        {
            assert_eq!(a, b, "features must round-trip exactly");
        }
    }

    #[test]
    fn corpus_is_deterministic() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let bank = TextureBank::new(BankKind::InDomain, 16, 16);
        let c1 = SimCallCounter::new();
        let c2 = SimCallCounter::new();
        gen_training_corpus(&cfg, &bank, &c1, dir1.path()).unwrap();
        gen_training_corpus(&cfg, &bank, &c2, dir2.path()).unwrap();
        for name in ["manifest.jsonl", "features.jsonl", "tile_000000.ppm", "tile_000017_mask.pgm"] {
            let a = std::fs::read(dir1.path().join(name)).unwrap();
            let b = std::fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn design_frequencies_uniform_at_scale() {
        let mut cfg = ExperimentConfig::desk(9);
        cfg.corpus.n_designs = 10_000;
        let mut rng = Pcg32::with_stream(cfg.seed, 0xC0);
        let mut counts = vec![0usize; 16];
        for _ in 0..cfg.corpus.n_designs {
            let d = sample_uniform_design(&mut rng, 16, 16);
            counts[d.discrete_indices().unwrap().0] += 1;
        }
        for c in counts {
            let f = c as f64 / cfg.corpus.n_designs as f64;
            assert!((f - 1.0 / 16.0).abs() < 0.015, "flat frequency {f}");
        }
    }
}
