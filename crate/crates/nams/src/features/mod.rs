//! Hand-crafted image features, dihedral augmentation, and the 9-image /
//! 72-feature group-averaging contract that every matching loss runs on.
//!
//! Feature layout (78-D):
//!   [0..24)  three 8-bin histograms over H, S, V (each block sums to 1)
//!   [24..30) per-channel RGB mean and standard deviation
//!   [30..34) oriented gradient energies (E, NE, N, NW directions)
//!   [34..46) 2x2 spatial grid of mean HSV per quadrant
//!   [46..78) joint 8x4 hue-saturation histogram (sums to 1); the marginal
//!            histograms alone cannot attribute hue mass to the flat versus
//!            sloped texture when the two share a hue bin

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::image::{mean_hsv, rgb_to_hsv, Image};

pub const FEATURE_DIM: usize = 78;
pub const GROUP_SIZE: usize = 9;
pub const FEATURE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("augment8 requires a square image, got {0}x{1}")]
    NonSquare(usize, usize),
    #[error("a feature group needs exactly {GROUP_SIZE} images, got {0}")]
    WrongGroupSize(usize),
    #[error("bad feature file: {0}")]
    BadFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fixed-dimension summary of one image (or an averaged group).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Deterministic 46-D feature extraction.
pub fn extract(image: &Image) -> FeatureVector {
    let (w, h) = (image.width(), image.height());
    let n = (w * h) as f64;
    let mut out = Vec::with_capacity(FEATURE_DIM);

    // 3 x 8-bin HSV histograms
    let mut hist = [[0.0f64; 8]; 3];
    for y in 0..h {
        for x in 0..w {
            let hsv = rgb_to_hsv(image.get_f(x, y));
            for (c, &v) in hsv.iter().enumerate() {
                let bin = ((v * 8.0) as usize).min(7);
                hist[c][bin] += 1.0;
            }
        }
    }
    for channel in &hist {
        for &b in channel {
            out.push(b / n);
        }
    }

    // RGB mean / std
    let mut mean = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    for y in 0..h {
        for x in 0..w {
            let px = image.get_f(x, y);
            for c in 0..3 {
                mean[c] += px[c];
                sq[c] += px[c] * px[c];
            }
        }
    }
    for c in 0..3 {
        mean[c] /= n;
    }
    for m in mean {
        out.push(m);
    }
    for c in 0..3 {
        out.push((sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt());
    }

    // oriented gradient energies on luminance, directions E, NE, N, NW
    let lum = |x: usize, y: usize| {
        let px = image.get_f(x, y);
        (px[0] + px[1] + px[2]) / 3.0
    };
    let dirs: [(i64, i64); 4] = [(1, 0), (1, 1), (0, 1), (-1, 1)];
    for (dx, dy) in dirs {
        let mut acc = 0.0;
        let mut count = 0.0;
        for y in 0..h {
            for x in 0..w {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                    acc += (lum(nx as usize, ny as usize) - lum(x, y)).abs();
                    count += 1.0;
                }
            }
        }
        out.push(if count > 0.0 { acc / count } else { 0.0 });
    }

    // 2x2 grid of mean HSV
    for qy in 0..2 {
        for qx in 0..2 {
            let (x0, x1) = (qx * w / 2, (qx + 1) * w / 2);
            let (y0, y1) = (qy * h / 2, (qy + 1) * h / 2);
            let mut quad = Image::filled(x1 - x0, y1 - y0, [0, 0, 0]);
            for y in y0..y1 {
                for x in x0..x1 {
                    quad.set(x - x0, y - y0, image.get(x, y));
                }
            }
            let m = mean_hsv(&quad);
            out.extend_from_slice(&m);
        }
    }

    // joint 8x4 hue-saturation histogram
    let mut joint = [0.0f64; 32];
    for y in 0..h {
        for x in 0..w {
            let [hue, sat, _] = rgb_to_hsv(image.get_f(x, y));
            let hb = ((hue * 8.0) as usize).min(7);
            let sb = ((sat * 4.0) as usize).min(3);
            joint[hb * 4 + sb] += 1.0;
        }
    }
    for b in joint {
        out.push(b / n);
    }

    debug_assert_eq!(out.len(), FEATURE_DIM);
    FeatureVector(out)
}

/// The 8 dihedral variants of a square image: four rotations of the original
/// and four rotations of its horizontal flip.
pub fn augment8(image: &Image) -> Result<Vec<Image>, FeatureError> {
    if image.width() != image.height() {
        return Err(FeatureError::NonSquare(image.width(), image.height()));
    }
    let mut out = Vec::with_capacity(8);
    let mut r = image.clone();
    for _ in 0..4 {
        out.push(r.clone());
        r = r.rotate90();
    }
    let mut f = image.flip_horizontal();
    for _ in 0..4 {
        out.push(f.clone());
        f = f.rotate90();
    }
    Ok(out)
}

/// Mean feature over the 8 dihedral augmentations of a single image. Used
/// where a method sees one image per design draw rather than a full group.
pub fn dihedral_feature(image: &Image) -> Result<FeatureVector, FeatureError> {
    let mut acc = vec![0.0f64; FEATURE_DIM];
    for aug in augment8(image)? {
        let f = extract(&aug);
        for (a, v) in acc.iter_mut().zip(f.values()) {
            *a += v;
        }
    }
    for a in acc.iter_mut() {
        *a /= 8.0;
    }
    Ok(FeatureVector(acc))
}

/// Nine images sharing one design, reduced to the mean feature of their 72
/// dihedral augmentations. The atomic matching unit everywhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub averaged: FeatureVector,
}

pub fn group_features(images: &[Image]) -> Result<FeatureGroup, FeatureError> {
    if images.len() != GROUP_SIZE {
        return Err(FeatureError::WrongGroupSize(images.len()));
    }
    let mut acc = vec![0.0f64; FEATURE_DIM];
    let mut count = 0.0;
    for image in images {
        for aug in augment8(image)? {
            let f = extract(&aug);
            for (a, v) in acc.iter_mut().zip(f.values()) {
                *a += v;
            }
            count += 1.0;
        }
    }
    for a in acc.iter_mut() {
        *a /= count;
    }
    Ok(FeatureGroup {
        averaged: FeatureVector(acc),
    })
}

/// One stored feature group: design indices, member seeds, averaged feature.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FeatureRecord {
    pub v: u32,
    pub design: [usize; 2],
    pub zetas: Vec<u64>,
    pub feature: Vec<f64>,
}

pub fn write_feature_records(path: &Path, records: &[FeatureRecord]) -> Result<(), FeatureError> {
    let mut f = std::fs::File::create(path)?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| FeatureError::BadFile(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

pub fn read_feature_records(path: &Path) -> Result<Vec<FeatureRecord>, FeatureError> {
    let text = std::fs::read_to_string(path)?;
    let records: Result<Vec<FeatureRecord>, FeatureError> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str::<FeatureRecord>(l).map_err(|e| FeatureError::BadFile(e.to_string())))
        .collect();
    let records = records?;
    for r in &records {
        if r.v != FEATURE_FORMAT_VERSION {
            return Err(FeatureError::BadFile(format!(
                "unsupported feature format version {}",
                r.v
            )));
        }
    }
    Ok(records)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Pcg32;
    use crate::sim::{simulate, BankKind, DesignVector, TextureBank};

    fn random_square(rng: &mut Pcg32, n: usize) -> Image {
        let mut img = Image::filled(n, n, [0, 0, 0]);
        for y in 0..n {
            for x in 0..n {
                img.set(
                    x,
                    y,
                    [
                        rng.next_below(256) as u8,
                        rng.next_below(256) as u8,
                        rng.next_below(256) as u8,
                    ],
                );
            }
        }
        img
    }

    #[test]
    fn constant_image_features() {
        let img = Image::filled(16, 16, [200, 60, 60]);
        let f = extract(&img);
        let v = f.values();
        // each histogram block has all mass in one bin
        for c in 0..3 {
            let block = &v[c * 8..(c + 1) * 8];
            assert!((block.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(block.iter().filter(|&&b| b > 0.0).count(), 1);
        }
        // stds and gradient energies are all zero (up to one-pass rounding)
        for &std in &v[27..30] {
            assert!(std.abs() < 1e-7);
        }
        for &e in &v[30..34] {
            assert_eq!(e, 0.0);
        }
        // joint hue-sat block: one occupied cell
        let joint = &v[46..78];
        assert!((joint.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(joint.iter().filter(|&&b| b > 0.0).count(), 1);
    }

    #[test]
    fn extract_is_deterministic() {
        let mut rng = Pcg32::new(8);
        let img = random_square(&mut rng, 16);
        assert_eq!(extract(&img), extract(&img));
    }

    #[test]
    fn histogram_blocks_sum_to_one_and_entries_bounded() {
        let mut rng = Pcg32::new(88);
        for _ in 0..20 {
            let img = random_square(&mut rng, 12);
            let f = extract(&img);
            let v = f.values();
            for c in 0..3 {
                let s: f64 = v[c * 8..(c + 1) * 8].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
            let joint_sum: f64 = v[46..78].iter().sum();
            assert!((joint_sum - 1.0).abs() < 1e-12);
            for &x in v {
                assert!(x.is_finite());
            }
            for &x in &v[..24] {
                assert!((0.0..=1.0).contains(&x));
            }
            for &x in &v[24..27] {
                assert!((0.0..=1.0).contains(&x));
            }
            for &x in &v[46..78] {
                assert!((0.0..=1.0).contains(&x));
            }
        }
    }

    #[test]
    fn augment8_rejects_non_square() {
        let img = Image::filled(4, 6, [0, 0, 0]);
        assert!(matches!(
            augment8(&img),
            Err(FeatureError::NonSquare(4, 6))
        ));
    }

    #[test]
    fn augment8_preserves_pixel_multiset() {
        let mut rng = Pcg32::new(5);
        let img = random_square(&mut rng, 8);
        let mut base: Vec<[u8; 3]> = Vec::new();
        for y in 0..8 {
            for x in 0..8 {
                base.push(img.get(x, y));
            }
        }
        base.sort();
        for aug in augment8(&img).unwrap() {
            assert_eq!(aug.width(), 8);
            let mut pix: Vec<[u8; 3]> = Vec::new();
            for y in 0..8 {
                for x in 0..8 {
                    pix.push(aug.get(x, y));
                }
            }
            pix.sort();
            assert_eq!(pix, base);
        }
    }

    #[test]
    fn augment8_closed_under_pre_rotation() {
        let mut rng = Pcg32::new(6);
        let img = random_square(&mut rng, 8);
        let set_of = |imgs: Vec<Image>| {
            let mut v: Vec<Vec<u8>> = imgs.into_iter().map(|i| i.raw().to_vec()).collect();
            v.sort();
            v
        };
        let a = set_of(augment8(&img).unwrap());
        let b = set_of(augment8(&img.rotate90()).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn symmetric_image_group_average_equals_single_extract() {
        let img = Image::filled(8, 8, [90, 120, 200]);
        let group = group_features(&vec![img.clone(); 9]).unwrap();
        let single = extract(&img);
        for (a, b) in group.averaged.values().iter().zip(single.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn group_average_invariant_to_member_permutation_and_dihedral_transform() {
        let mut rng = Pcg32::new(44);
        let images: Vec<Image> = (0..9).map(|_| random_square(&mut rng, 8)).collect();
        let g1 = group_features(&images).unwrap();

        let mut permuted = images.clone();
        permuted.rotate_left(4);
        let g2 = group_features(&permuted).unwrap();
        for (a, b) in g1.averaged.values().iter().zip(g2.averaged.values()) {
            assert!((a - b).abs() < 1e-12);
        }

        // dihedral invariance: transform every member by a fixed rotation+flip
        let transformed: Vec<Image> = images
            .iter()
            .map(|i| i.rotate90().flip_horizontal())
            .collect();
        let g3 = group_features(&transformed).unwrap();
        for (a, b) in g1.averaged.values().iter().zip(g3.averaged.values()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn group_requires_exactly_nine() {
        let img = Image::filled(8, 8, [1, 2, 3]);
        assert!(matches!(
            group_features(&vec![img; 8]),
            Err(FeatureError::WrongGroupSize(8))
        ));
    }

    /// Same design / different nuisance seeds must look more alike in feature
    /// space than different flat textures; this separation is what every
    /// downstream experiment relies on.
    #[test]
    fn features_separate_designs_from_nuisance() {
        let bank = TextureBank::new(BankKind::InDomain, 16, 16);
        let mut rng = Pcg32::new(77);
        let mut same = 0.0;
        let mut diff = 0.0;
        let pairs = 100;
        for p in 0..pairs {
            let f1 = rng.next_below(16) as usize;
            let mut f2 = rng.next_below(16) as usize;
            while f2 == f1 {
                f2 = rng.next_below(16) as usize;
            }
            let s = rng.next_below(16) as usize;
            let d1 = DesignVector::one_hot(f1, s, 16, 16);
            let d2 = DesignVector::one_hot(f2, s, 16, 16);
            let base = 10_000 + 3 * p as u64;
            let a = extract(&simulate(&d1, base, &bank).unwrap().image);
            let b = extract(&simulate(&d1, base + 1, &bank).unwrap().image);
            let c = extract(&simulate(&d2, base + 2, &bank).unwrap().image);
            same += cosine_similarity(a.values(), b.values());
            diff += cosine_similarity(a.values(), c.values());
        }
        same /= pairs as f64;
        diff /= pairs as f64;
        assert!(
            same > diff,
            "same-design similarity {same} not above cross-design {diff}"
        );
    }

    #[test]
    fn feature_records_roundtrip_and_version_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.jsonl");
        let records = vec![FeatureRecord {
            v: FEATURE_FORMAT_VERSION,
            design: [1, 2],
            zetas: vec![5, 6, 7],
            feature: vec![0.25; FEATURE_DIM],
        }];
        write_feature_records(&path, &records).unwrap();
        assert_eq!(read_feature_records(&path).unwrap(), records);

        std::fs::write(&path, "{\"v\":9,\"design\":[0,0],\"zetas\":[],\"feature\":[]}\n").unwrap();
        assert!(read_feature_records(&path).is_err());
    }
}
