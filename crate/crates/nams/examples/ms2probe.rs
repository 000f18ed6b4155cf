use nams::baselines::{ms2_search, Ms2Config, Pca};
use nams::features::{group_features, FeatureVector};
use nams::harness::{generate_corpus_in_memory, ExperimentConfig, SimCallCounter, SimPhase};
use nams::rng::derive_seed;
use nams::sim::{build_bank_pair, simulate, DesignVector};
use nams::tensor::AdamConfig;

fn main() {
    let cfg = ExperimentConfig::desk(0);
    let (bank, _) = build_bank_pair(16, 16).unwrap();
    let counter = SimCallCounter::new();
    let corpus = generate_corpus_in_memory(&cfg, &bank, &counter, SimPhase::NamsTrain).unwrap();
    let features: Vec<Vec<f64>> = corpus.iter().map(|e| e.feature.values().to_vec()).collect();

    for kde_dim in [8usize, 4] {
        let pca = Pca::fit(&features, kde_dim).unwrap();
        for (lr, iters, batch, h) in [
            (0.05, 50usize, 64usize, None),
            (0.1, 50, 64, None),
            (0.2, 50, 64, None),
            (0.1, 50, 64, Some(0.05)),
            (0.1, 100, 64, None),
        ] {
            let mut ok_trials = 0;
            for trial in 0..4u64 {
                let true_d = DesignVector::one_hot((3 + 4 * trial as usize) % 16, (7 + 3 * trial as usize) % 16, 16, 16);
                let targets: Vec<FeatureVector> = (0..12)
                    .map(|g| {
                        let images: Vec<_> = (0..9)
                            .map(|j| simulate(&true_d, derive_seed(8000 + trial * 100 + g, j), &bank).unwrap().image)
                            .collect();
                        group_features(&images).unwrap().averaged
                    })
                    .collect();
                let mut sim_fn = |d: &DesignVector, z: u64| simulate(d, z, &bank).map(|o| o.image);
                let out = ms2_search(&targets, &pca, 16, 16, &mut sim_fn, &Ms2Config {
                    iters, batch, adam: AdamConfig::new(lr), kde_dim,
                    bandwidth: h, population_size: 12, seed: derive_seed(42, trial),
                }).unwrap();
                let (tf, _) = true_d.discrete_indices().unwrap();
                let probs = out.state.probs(nams::sim::RoofKind::Flat);
                let lift = probs[tf] > 2.0 / 16.0;
                ok_trials += lift as usize;
                if lr == 0.1 && iters == 50 && h.is_none() && kde_dim == 8 && trial == 0 {
                    let last = out.iterations.last().unwrap();
                    println!("  trial0 trajectory: final mode_flat {} p {:.3}, true {} p_true {:.3}, score {:.3}",
                        last.mode_flat, last.mode_prob_flat, tf, probs[tf], last.est_kl_score_mean);
                }
            }
            println!("kde{kde_dim} lr{lr} T{iters} N{batch} h{:?}: mode-prob lift on true flat in {ok_trials}/4 trials", h);
        }
    }
}
