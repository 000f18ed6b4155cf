//! The black-box tile simulator: procedurally placed flat- and sloped-roof
//! buildings over a speckled ground plane, rooftop textures selected by the
//! design vector, all nuisance variation driven by a single 64-bit seed.

pub mod image;
pub mod texture;

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use image::{Image, Mask, LABEL_BACKGROUND, LABEL_FLAT, LABEL_SLOPED};
pub use texture::{
    build_bank_pair, texture_similarity_rank, texture_swatch, BankKind, Pattern, RoofKind,
    TextureBank, TextureSpec,
};

use crate::rng::Pcg32;

/// Tile edge length in pixels.
pub const TILE: usize = 64;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("simulator requires a discrete one-hot design; got a relaxed vector")]
    RelaxedDesign,
    #[error("texture id {id} out of range for bank of size {k}")]
    BadTextureId { id: usize, k: usize },
    #[error("unknown texture bank {0}")]
    UnknownBank(String),
    #[error("bank construction failed: {0}")]
    BankConstruction(String),
    #[error("bad image file: {0}")]
    BadImageFile(String),
    #[error("bad manifest: {0}")]
    BadManifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Concatenated per-group selection of a flat-roof and a sloped-roof texture.
/// Discrete designs are exact one-hots; relaxed designs (decoder outputs)
/// carry arbitrary values in [0,1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignVector {
    pub flat: Vec<f64>,
    pub sloped: Vec<f64>,
}

impl DesignVector {
    pub fn one_hot(flat_idx: usize, sloped_idx: usize, k_flat: usize, k_sloped: usize) -> Self {
        assert!(flat_idx < k_flat && sloped_idx < k_sloped);
        let mut flat = vec![0.0; k_flat];
        flat[flat_idx] = 1.0;
        let mut sloped = vec![0.0; k_sloped];
        sloped[sloped_idx] = 1.0;
        Self { flat, sloped }
    }

    pub fn from_concat(values: &[f64], k_flat: usize) -> Self {
        assert!(values.len() > k_flat);
        Self {
            flat: values[..k_flat].to_vec(),
            sloped: values[k_flat..].to_vec(),
        }
    }

    pub fn concat(&self) -> Vec<f64> {
        let mut v = self.flat.clone();
        v.extend_from_slice(&self.sloped);
        v
    }

    pub fn len(&self) -> usize {
        self.flat.len() + self.sloped.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Exact one-hot indices, or None for relaxed vectors.
    pub fn discrete_indices(&self) -> Option<(usize, usize)> {
        fn one_hot_index(v: &[f64]) -> Option<usize> {
            let mut hit = None;
            for (i, &x) in v.iter().enumerate() {
                if x == 1.0 {
                    if hit.is_some() {
                        return None;
                    }
                    hit = Some(i);
                } else if x != 0.0 {
                    return None;
                }
            }
            hit
        }
        Some((one_hot_index(&self.flat)?, one_hot_index(&self.sloped)?))
    }

    pub fn is_discrete(&self) -> bool {
        self.discrete_indices().is_some()
    }

    /// Per-group argmax (ties to the lower index); the discretization used on
    /// relaxed decoder outputs.
    pub fn argmax_indices(&self) -> (usize, usize) {
        (argmax(&self.flat), argmax(&self.sloped))
    }

    /// Round to the exact one-hot at the argmax of each group.
    pub fn discretized(&self) -> DesignVector {
        let (f, s) = self.argmax_indices();
        DesignVector::one_hot(f, s, self.flat.len(), self.sloped.len())
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One uniformly random discrete design.
pub fn sample_uniform_design(rng: &mut Pcg32, k_flat: usize, k_sloped: usize) -> DesignVector {
    let f = rng.next_below(k_flat as u32) as usize;
    let s = rng.next_below(k_sloped as u32) as usize;
    DesignVector::one_hot(f, s, k_flat, k_sloped)
}

/// A rendered tile plus its ground truth.
#[derive(Clone, Debug)]
pub struct SimOutput {
    pub image: Image,
    pub mask: Mask,
    pub design_used: DesignVector,
    pub zeta: u64,
}

fn pixel_noise01(seed: u64, x: usize, y: usize) -> f64 {
    let mut s = seed ^ ((x as u64) << 24) ^ ((y as u64) << 46) ^ 0x5851f42d4c957f2d;
    crate::rng::splitmix64(&mut s) as f64 / u64::MAX as f64
}

/// Render a tile. Pure in (design, zeta, bank): identical inputs give
/// bit-identical outputs. Rejects relaxed designs — the black box only
/// accepts valid discrete designs.
pub fn simulate(design: &DesignVector, zeta: u64, bank: &TextureBank) -> Result<SimOutput, SimError> {
    let (flat_idx, sloped_idx) = design.discrete_indices().ok_or(SimError::RelaxedDesign)?;
    if flat_idx >= bank.flat.len() {
        return Err(SimError::BadTextureId {
            id: flat_idx,
            k: bank.flat.len(),
        });
    }
    if sloped_idx >= bank.sloped.len() {
        return Err(SimError::BadTextureId {
            id: sloped_idx,
            k: bank.sloped.len(),
        });
    }
    let flat_tex = &bank.flat[flat_idx];
    let sloped_tex = &bank.sloped[sloped_idx];

    let root = Pcg32::new(zeta);
    let mut ground_rng = root.split("ground");
    let mut layout_rng = root.split("layout");

    // speckled ground plane
    let ground_hsv = [
        ground_rng.range_f64(0.20, 0.36),
        ground_rng.range_f64(0.15, 0.35),
        ground_rng.range_f64(0.35, 0.60),
    ];
    let noise_seed = root.split("noise").next_u64();
    let mut img = Image::filled(TILE, TILE, [0, 0, 0]);
    let mut mask = Mask::filled(TILE, TILE, LABEL_BACKGROUND);
    for y in 0..TILE {
        for x in 0..TILE {
            let jitter = (pixel_noise01(noise_seed, x, y) - 0.5) * 0.06;
            let rgb = image::hsv_to_rgb([
                ground_hsv[0],
                ground_hsv[1],
                (ground_hsv[2] + jitter).clamp(0.0, 1.0),
            ]);
            img.set(x, y, image::quantize(rgb));
        }
    }

    // 3..=8 axis-aligned rectangular buildings, painter's order
    let n_buildings = layout_rng.range_inclusive(3, 8);
    for _ in 0..n_buildings {
        let bw = layout_rng.range_inclusive(8, 24) as usize;
        let bh = layout_rng.range_inclusive(8, 24) as usize;
        let x0 = layout_rng.next_below((TILE - bw + 1) as u32) as usize;
        let y0 = layout_rng.next_below((TILE - bh + 1) as u32) as usize;
        let is_flat = layout_rng.next_f64() < 0.5;
        for dy in 0..bh {
            for dx in 0..bw {
                let (x, y) = (x0 + dx, y0 + dy);
                let rgb = if is_flat {
                    flat_tex.color_at(dx, dy)
                } else {
                    // two-tone ridge along the longer axis
                    let mut rgb = sloped_tex.color_at(dx, dy);
                    let lit = if bw >= bh { dx * 2 < bw } else { dy * 2 < bh };
                    let shade = if lit { 0.12 } else { -0.12 };
                    let mut hsv = image::rgb_to_hsv(rgb);
                    hsv[2] = (hsv[2] + shade).clamp(0.0, 1.0);
                    rgb = image::hsv_to_rgb(hsv);
                    rgb
                };
                img.set(x, y, image::quantize(rgb));
                mask.set(x, y, if is_flat { LABEL_FLAT } else { LABEL_SLOPED });
            }
        }
    }

    Ok(SimOutput {
        image: img,
        mask,
        design_used: design.clone(),
        zeta,
    })
}

/// Optional appearance-gap post-process for target renders: gamma shift,
/// 3x3 box blur, additive sensor noise. Off by default in every profile.
pub fn apply_appearance_gap(image: &Image, seed: u64) -> Image {
    let (w, h) = (image.width(), image.height());
    let mut gamma = Image::filled(w, h, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            let px = image.get_f(x, y);
            gamma.set(
                x,
                y,
                image::quantize([px[0].powf(1.15), px[1].powf(1.15), px[2].powf(1.15)]),
            );
        }
    }
    let mut out = Image::filled(w, h, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            let mut count = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                        let px = gamma.get_f(nx as usize, ny as usize);
                        for c in 0..3 {
                            acc[c] += px[c];
                        }
                        count += 1.0;
                    }
                }
            }
            let noise = (pixel_noise01(seed, x, y) - 0.5) * (8.0 / 255.0);
            out.set(
                x,
                y,
                image::quantize([
                    acc[0] / count + noise,
                    acc[1] / count + noise,
                    acc[2] / count + noise,
                ]),
            );
        }
    }
    out
}

/// One manifest line per rendered image.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestRecord {
    pub path: String,
    pub mask_path: String,
    pub design: [usize; 2],
    pub zeta: u64,
    pub bank: String,
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<(), SimError> {
    let mut f = std::fs::File::create(path)?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| SimError::BadManifest(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, SimError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| SimError::BadManifest(e.to_string())))
        .collect()
}

/// Directory layout helper for corpus image files.
pub fn tile_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("tile_{index:06}.ppm")),
        dir.join(format!("tile_{index:06}_mask.pgm")),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank() -> TextureBank {
        TextureBank::new(BankKind::InDomain, 16, 16)
    }

    #[test]
    fn simulate_is_bit_deterministic() {
        let b = bank();
        let d = DesignVector::one_hot(3, 7, 16, 16);
        let a = simulate(&d, 12345, &b).unwrap();
        let c = simulate(&d, 12345, &b).unwrap();
        assert_eq!(a.image, c.image);
        assert_eq!(a.mask, c.mask);
        let e = simulate(&d, 12346, &b).unwrap();
        assert_ne!(a.image, e.image);
    }

    #[test]
    fn simulate_rejects_relaxed_design() {
        let b = bank();
        let mut d = DesignVector::one_hot(0, 0, 16, 16);
        d.flat[1] = 0.4;
        assert!(matches!(simulate(&d, 1, &b), Err(SimError::RelaxedDesign)));
    }

    #[test]
    fn flat_red_design_dominates_flat_mask_hue() {
        // texture 0 is solid red; modal hue of flat-labelled pixels must sit
        // within 10 degrees of red
        let b = bank();
        let d = DesignVector::one_hot(0, 5, 16, 16);
        let mut checked = 0;
        for zeta in 0..40u64 {
            let out = simulate(&d, zeta, &b).unwrap();
            let mut hist = [0usize; 36];
            let mut n = 0;
            for y in 0..TILE {
                for x in 0..TILE {
                    if out.mask.get(x, y) == LABEL_FLAT {
                        let [h, _, _] = image::rgb_to_hsv(out.image.get_f(x, y));
                        hist[((h * 36.0) as usize).min(35)] += 1;
                        n += 1;
                    }
                }
            }
            if n == 0 {
                continue;
            }
            checked += 1;
            let modal = hist.iter().enumerate().max_by_key(|(_, c)| **c).unwrap().0;
            let modal_deg = modal as f64 * 10.0 + 5.0;
            let dist = (modal_deg - 0.0).abs().min(360.0 - (modal_deg - 0.0).abs());
            assert!(dist <= 10.0, "modal hue {modal_deg} deg off red at zeta {zeta}");
        }
        assert!(checked > 20, "too few tiles with flat buildings: {checked}");
    }

    #[test]
    fn building_fraction_in_expected_band() {
        let b = bank();
        let d = DesignVector::one_hot(4, 4, 16, 16);
        let mut mean = 0.0;
        let n = 1000;
        for zeta in 0..n {
            let out = simulate(&d, zeta, &b).unwrap();
            let frac = out.mask.building_fraction();
            assert!(frac > 0.0, "no building pixels at zeta {zeta}");
            mean += frac;
        }
        mean /= n as f64;
        assert!(
            (0.05..=0.6).contains(&mean),
            "mean building fraction {mean}"
        );
    }

    #[test]
    fn uniform_design_sampling_is_uniform() {
        let mut rng = Pcg32::new(99);
        let n = 100_000;
        let mut flat_counts = vec![0usize; 16];
        for _ in 0..n {
            let d = sample_uniform_design(&mut rng, 16, 16);
            assert!(d.is_discrete());
            let (f, _) = d.discrete_indices().unwrap();
            flat_counts[f] += 1;
        }
        for c in flat_counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 1.0 / 16.0).abs() < 0.01, "freq {freq}");
        }
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let records = vec![
            ManifestRecord {
                path: "tile_000000.ppm".into(),
                mask_path: "tile_000000_mask.pgm".into(),
                design: [3, 7],
                zeta: 42,
                bank: "in_domain".into(),
            },
            ManifestRecord {
                path: "tile_000001.ppm".into(),
                mask_path: "tile_000001_mask.pgm".into(),
                design: [0, 15],
                zeta: 43,
                bank: "held_out".into(),
            },
        ];
        write_manifest(&path, &records).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), records);
    }

    #[test]
    fn same_flat_texture_gives_smaller_swatch_distance() {
        // weak design-monotonicity: sharing the flat texture means zero
        // flat-swatch distance, differing means strictly positive
        let b = bank();
        for i in 0..16 {
            for j in 0..16 {
                let di = texture_swatch(&b.flat[i]);
                let dj = texture_swatch(&b.flat[j]);
                let dist = image::hsv_distance(image::mean_hsv(&di), image::mean_hsv(&dj));
                if i == j {
                    assert!(dist < 1e-12);
                } else {
                    assert!(dist > 1e-4, "textures {i} and {j} too close: {dist}");
                }
            }
        }
    }
}
