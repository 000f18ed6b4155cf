//! Downstream segmentation proxy: a per-pixel classifier over 3x3 RGB
//! neighborhoods, trained on tiles simulated from a design population and
//! scored by building-class IoU on held-out target tiles. Keeps the
//! augmentation-strategy comparison cheap while preserving its structure.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nams_core::DesignPopulation;
use crate::rng::{derive_seed, Pcg32};
use crate::sim::{Image, Mask, SimError, LABEL_BACKGROUND};
use crate::tensor::{
    adam_step, AdamConfig, Graph, HiddenLayout, Mlp, Mode, ModelParameters, OutputActivation,
    Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum DownstreamError {
    #[error("empty design population")]
    EmptyPopulation,
    #[error("empty pixel dataset")]
    EmptyDataset,
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Flattened 3x3 RGB neighborhood (27 values in [0,1]) with a binary
/// building label. Neighborhoods sit fully inside the tile.
#[derive(Clone, Debug)]
pub struct PixelSample {
    pub features: Vec<f64>,
    pub label: f64,
}

fn neighborhood(image: &Image, x: usize, y: usize) -> Vec<f64> {
    let mut f = Vec::with_capacity(27);
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            let px = image.get_f((x as i64 + dx) as usize, (y as i64 + dy) as usize);
            f.extend_from_slice(&px);
        }
    }
    f
}

/// Per-tile cap on samples per class.
const SAMPLES_PER_CLASS: usize = 120;

/// Simulate `tiles_per_design` tiles for every population entry and extract
/// class-balanced pixel samples (equal building/background counts per tile
/// where the tile allows it).
pub fn build_training_set<F>(
    population: &DesignPopulation,
    k_flat: usize,
    k_sloped: usize,
    tiles_per_design: usize,
    seed: u64,
    simulate: &mut F,
) -> Result<Vec<PixelSample>, DownstreamError>
where
    F: FnMut(&crate::sim::DesignVector, u64) -> Result<crate::sim::SimOutput, SimError>,
{
    if population.entries.is_empty() {
        return Err(DownstreamError::EmptyPopulation);
    }
    let mut samples = Vec::new();
    for (ei, entry) in population.entries.iter().enumerate() {
        let design = entry.design(k_flat, k_sloped);
        for t in 0..tiles_per_design {
            let zeta = derive_seed(seed, (ei * tiles_per_design + t) as u64);
            let out = simulate(&design, zeta)?;
            let mut rng = Pcg32::with_stream(zeta, 0xD5);
            extract_balanced(&out.image, &out.mask, &mut rng, &mut samples);
        }
    }
    Ok(samples)
}

fn extract_balanced(image: &Image, mask: &Mask, rng: &mut Pcg32, out: &mut Vec<PixelSample>) {
    let (w, h) = (image.width(), image.height());
    let mut building = Vec::new();
    let mut background = Vec::new();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            if mask.get(x, y) == LABEL_BACKGROUND {
                background.push((x, y));
            } else {
                building.push((x, y));
            }
        }
    }
    let per_class = SAMPLES_PER_CLASS.min(building.len()).min(background.len());
    for (pool, label) in [(building, 1.0), (background, 0.0)] {
        let mut pool = pool;
        for i in 0..per_class {
            let j = i + rng.next_below((pool.len() - i) as u32) as usize;
            pool.swap(i, j);
            let (x, y) = pool[i];
            out.push(PixelSample {
                features: neighborhood(image, x, y),
                label,
            });
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProxyConfig {
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch: 256,
            adam: AdamConfig::new(2e-3),
            seed: 0,
        }
    }
}

/// One hidden layer of 32 units, sigmoid output, binary cross-entropy.
#[derive(Clone, Debug)]
pub struct ProxyClassifier {
    mlp: Mlp,
    params: ModelParameters,
}

impl ProxyClassifier {
    /// Building probability per interior pixel of a tile.
    pub fn predict_tile(&self, image: &Image) -> Result<Vec<Vec<f64>>, DownstreamError> {
        let (w, h) = (image.width(), image.height());
        let mut rows = Vec::with_capacity((w - 2) * (h - 2));
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                rows.push(neighborhood(image, x, y));
            }
        }
        let mut g = Graph::new(Mode::Eval);
        let input = g.input(Tensor::from_rows(&rows), false);
        let out = self.mlp.forward_eval(&mut g, input, &self.params)?;
        let t = g.value(out);
        let mut grid = vec![vec![0.0; w - 2]; h - 2];
        let mut i = 0;
        for row in grid.iter_mut() {
            for cell in row.iter_mut() {
                *cell = t.row(i)[0];
                i += 1;
            }
        }
        Ok(grid)
    }
}

/// Train the proxy; training BCE must decrease or the data is unusable.
pub fn train_proxy(
    dataset: &[PixelSample],
    cfg: &ProxyConfig,
) -> Result<(ProxyClassifier, Vec<f64>), DownstreamError> {
    if dataset.is_empty() {
        return Err(DownstreamError::EmptyDataset);
    }
    let mlp = Mlp {
        name: "proxy".to_string(),
        input_dim: 27,
        hidden: vec![32],
        output_dim: 1,
        layout: HiddenLayout::plain(0.2),
        output_activation: OutputActivation::Sigmoid,
    };
    let mut params = ModelParameters::new();
    let mut rng = Pcg32::with_stream(cfg.seed, 0xD6);
    mlp.init_params(&mut params, &mut rng);
    let mut epoch_rng = Pcg32::with_stream(cfg.seed, 0xD7);
    let mut drop_rng = Pcg32::with_stream(cfg.seed, 0xD8);

    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_rng.shuffled_indices(dataset.len());
        let mut total = 0.0;
        let mut batches = 0.0f64;
        for chunk in order.chunks(cfg.batch.max(2)) {
            if chunk.len() < 2 {
                continue;
            }
            let x_rows: Vec<Vec<f64>> = chunk.iter().map(|&i| dataset[i].features.clone()).collect();
            let y_rows: Vec<Vec<f64>> = chunk.iter().map(|&i| vec![dataset[i].label]).collect();
            let mut g = Graph::new(Mode::Train);
            let x = g.input(Tensor::from_rows(&x_rows), false);
            let out = mlp.forward_train(&mut g, x, &mut params, &mut drop_rng)?;
            let target = g.constant(Tensor::from_rows(&y_rows));
            let loss = g.bce(out, target)?;
            let v = g.value(loss).item();
            if !v.is_finite() {
                return Err(DownstreamError::Diverged { epoch });
            }
            let grads = g.backward(loss)?;
            adam_step(&mut params, &grads, &cfg.adam)?;
            total += v;
            batches += 1.0;
        }
        curve.push(total / batches.max(1.0));
    }
    Ok((ProxyClassifier { mlp, params }, curve))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IoUReport {
    pub iou: f64,
    pub n_tiles: usize,
}

/// Building-class IoU at threshold 0.5 over all interior pixels of all
/// tiles. Zero union with zero intersection scores 1 (both empty).
pub fn eval_iou(
    classifier: &ProxyClassifier,
    tiles: &[(Image, Mask)],
) -> Result<IoUReport, DownstreamError> {
    let mut intersection = 0usize;
    let mut union = 0usize;
    for (image, mask) in tiles {
        let probs = classifier.predict_tile(image)?;
        for (yy, row) in probs.iter().enumerate() {
            for (xx, &p) in row.iter().enumerate() {
                let pred = p >= 0.5;
                let truth = mask.get(xx + 1, yy + 1) != LABEL_BACKGROUND;
                if pred && truth {
                    intersection += 1;
                }
                if pred || truth {
                    union += 1;
                }
            }
        }
    }
    let iou = if union == 0 {
        1.0
    } else {
        intersection as f64 / union as f64
    };
    Ok(IoUReport {
        iou,
        n_tiles: tiles.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nams_core::{PopulationEntry, PopulationSource};
    use crate::sim::{simulate, BankKind, TextureBank};

    fn population(entries: &[(usize, usize)]) -> DesignPopulation {
        DesignPopulation {
            entries: entries
                .iter()
                .map(|&(f, s)| PopulationEntry {
                    flat_idx: f,
                    sloped_idx: s,
                    source: PopulationSource::Searched,
                    loss: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn training_set_accounting_and_balance() {
        let bank = TextureBank::new(BankKind::InDomain, 16, 16);
        let pop = population(&[(2, 3)]);
        let mut calls = 0usize;
        let mut sim = |d: &crate::sim::DesignVector, z: u64| {
            calls += 1;
            simulate(d, z, &bank)
        };
        let samples = build_training_set(&pop, 16, 16, 2, 7, &mut sim).unwrap();
        assert_eq!(calls, 2, "one simulator call per tile");
        assert!(!samples.is_empty());
        let building = samples.iter().filter(|s| s.label == 1.0).count();
        let frac = building as f64 / samples.len() as f64;
        assert!(
            (0.45..=0.55).contains(&frac),
            "building-label fraction {frac}"
        );
        // determinism
        let mut sim2 = |d: &crate::sim::DesignVector, z: u64| simulate(d, z, &bank);
        let again = build_training_set(&pop, 16, 16, 2, 7, &mut sim2).unwrap();
        assert_eq!(samples.len(), again.len());
        assert_eq!(samples[0].features, again[0].features);
    }

    #[test]
    fn linearly_separable_colors_reach_high_accuracy() {
        // dark pixels background, bright pixels building
        let mut rng = Pcg32::new(3);
        let mut dataset = Vec::new();
        for _ in 0..600 {
            let label = if rng.next_f64() < 0.5 { 1.0 } else { 0.0 };
            let base = if label > 0.5 { 0.8 } else { 0.2 };
            let features: Vec<f64> = (0..27)
                .map(|_| (base + 0.1 * rng.next_normal()).clamp(0.0, 1.0))
                .collect();
            dataset.push(PixelSample { features, label });
        }
        let cfg = ProxyConfig {
            epochs: 60,
            batch: 64,
            adam: AdamConfig::new(3e-3),
            seed: 0,
        };
        let (clf, curve) = train_proxy(&dataset, &cfg).unwrap();
        assert!(curve.last().unwrap() < &curve[0]);
        let mut hits = 0;
        for s in &dataset {
            let mut g = Graph::new(Mode::Eval);
            let x = g.input(Tensor::from_rows(&[s.features.clone()]), false);
            let out = clf.mlp.forward_eval(&mut g, x, &clf.params).unwrap();
            let p = g.value(out).item();
            if (p >= 0.5) == (s.label > 0.5) {
                hits += 1;
            }
        }
        let acc = hits as f64 / dataset.len() as f64;
        assert!(acc > 0.99, "training accuracy {acc}");
    }

    #[test]
    fn constant_label_dataset_predicts_that_label() {
        let mut rng = Pcg32::new(4);
        let dataset: Vec<PixelSample> = (0..300)
            .map(|_| PixelSample {
                features: (0..27).map(|_| rng.next_f64()).collect(),
                label: 1.0,
            })
            .collect();
        let (clf, _) = train_proxy(&dataset, &ProxyConfig::default()).unwrap();
        let mut g = Graph::new(Mode::Eval);
        let rows: Vec<Vec<f64>> = (0..20).map(|_| (0..27).map(|_| rng.next_f64()).collect()).collect();
        let x = g.input(Tensor::from_rows(&rows), false);
        let out = clf.mlp.forward_eval(&mut g, x, &clf.params).unwrap();
        for r in 0..20 {
            assert!(g.value(out).row(r)[0] > 0.5);
        }
    }

    #[test]
    fn train_proxy_is_deterministic() {
        let mut rng = Pcg32::new(5);
        let dataset: Vec<PixelSample> = (0..200)
            .map(|_| PixelSample {
                features: (0..27).map(|_| rng.next_f64()).collect(),
                label: if rng.next_f64() < 0.5 { 1.0 } else { 0.0 },
            })
            .collect();
        let (_, c1) = train_proxy(&dataset, &ProxyConfig::default()).unwrap();
        let (_, c2) = train_proxy(&dataset, &ProxyConfig::default()).unwrap();
        assert_eq!(c1, c2);
    }

    #[test]
    fn iou_edge_cases_and_brute_force() {
        let bank = TextureBank::new(BankKind::InDomain, 16, 16);
        let pop = population(&[(1, 1), (5, 9)]);
        let mut sim = |d: &crate::sim::DesignVector, z: u64| simulate(d, z, &bank);
        let samples = build_training_set(&pop, 16, 16, 3, 11, &mut sim).unwrap();
        let (clf, _) = train_proxy(&samples, &ProxyConfig::default()).unwrap();

        let tiles: Vec<(Image, Mask)> = (0..3)
            .map(|i| {
                let out = simulate(
                    &crate::sim::DesignVector::one_hot(1, 1, 16, 16),
                    900 + i,
                    &bank,
                )
                .unwrap();
                (out.image, out.mask)
            })
            .collect();
        let report = eval_iou(&clf, &tiles).unwrap();
        assert!((0.0..=1.0).contains(&report.iou));

        // brute force recomputation per pixel
        let mut inter = 0usize;
        let mut uni = 0usize;
        for (img, mask) in &tiles {
            let probs = clf.predict_tile(img).unwrap();
            for y in 1..img.height() - 1 {
                for x in 1..img.width() - 1 {
                    let pred = probs[y - 1][x - 1] >= 0.5;
                    let truth = mask.get(x, y) != LABEL_BACKGROUND;
                    inter += (pred && truth) as usize;
                    uni += (pred || truth) as usize;
                }
            }
        }
        assert_eq!(report.iou, inter as f64 / uni as f64);

        // permutation invariance
        let mut reordered = tiles.clone();
        reordered.reverse();
        assert_eq!(eval_iou(&clf, &reordered).unwrap().iou, report.iou);
    }
}
