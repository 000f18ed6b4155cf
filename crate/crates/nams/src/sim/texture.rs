//! Rooftop texture banks: deterministic texture definitions, swatch
//! rendering, and mean-HSV similarity ranking.

use serde::{Deserialize, Serialize};

use super::image::{hsv_distance, hsv_to_rgb, mean_hsv, quantize, Image};
use super::SimError;
use crate::rng::splitmix64;

pub const SWATCH_SIZE: usize = 16;

/// Minimum hue-sat distance required between an in-domain texture and any
/// held-out texture of the same roof group.
const MIN_BANK_SEPARATION: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pattern {
    Solid,
    Stripe,
    Checker,
    Speckle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RoofKind {
    Flat,
    Sloped,
}

/// One rooftop texture; a pure function of (bank kind, roof group, id).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    pub id: usize,
    pub base_hsv: [f64; 3],
    pub pattern: Pattern,
    pub pattern_scale: usize,
    pub pattern_contrast: f64,
    seed: u64,
}

impl TextureSpec {
    /// Color at texel (dx, dy), before quantization.
    pub fn color_at(&self, dx: usize, dy: usize) -> [f64; 3] {
        let [h, s, v] = self.base_hsv;
        let v = match self.pattern {
            Pattern::Solid => v,
            Pattern::Stripe => {
                if (dx / self.pattern_scale) % 2 == 0 {
                    v + self.pattern_contrast / 2.0
                } else {
                    v - self.pattern_contrast / 2.0
                }
            }
            Pattern::Checker => {
                if (dx / self.pattern_scale + dy / self.pattern_scale) % 2 == 0 {
                    v + self.pattern_contrast / 2.0
                } else {
                    v - self.pattern_contrast / 2.0
                }
            }
            Pattern::Speckle => {
                let mut s = self
                    .seed
                    .wrapping_add((dx as u64) << 32)
                    .wrapping_add(dy as u64);
                let r = splitmix64(&mut s) as f64 / u64::MAX as f64;
                v + (r - 0.5) * self.pattern_contrast
            }
        };
        hsv_to_rgb([h, s, v.clamp(0.0, 1.0)])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankKind {
    InDomain,
    HeldOut,
}

impl BankKind {
    pub fn name(&self) -> &'static str {
        match self {
            BankKind::InDomain => "in_domain",
            BankKind::HeldOut => "held_out",
        }
    }

    pub fn parse(s: &str) -> Result<Self, SimError> {
        match s {
            "in_domain" => Ok(BankKind::InDomain),
            "held_out" => Ok(BankKind::HeldOut),
            other => Err(SimError::UnknownBank(other.to_string())),
        }
    }
}

/// Flat and sloped texture lists for one bank kind. Held-out banks sit on
/// hue midpoints between in-domain hues (with a deterministic off-center
/// nudge), so every held-out texture has a unique nearest in-domain
/// neighbor and the two banks never share a base color.
#[derive(Clone, Debug)]
pub struct TextureBank {
    pub kind: BankKind,
    pub flat: Vec<TextureSpec>,
    pub sloped: Vec<TextureSpec>,
}

fn frac(x: f64) -> f64 {
    x - x.floor()
}

fn make_texture(kind: BankKind, roof: RoofKind, id: usize, k: usize) -> TextureSpec {
    // Hue lattice: flat in-domain on i/K, sloped in-domain offset a quarter
    // step, held-out on perturbed midpoints of its group's lattice.
    let group_offset = match roof {
        RoofKind::Flat => 0.0,
        RoofKind::Sloped => 0.25,
    };
    let nudge = if id % 2 == 0 { 0.12 } else { -0.12 };
    let hue = match kind {
        BankKind::InDomain => (id as f64 + group_offset) / k as f64,
        BankKind::HeldOut => (id as f64 + group_offset + 0.5 + nudge) / k as f64,
    }
    .rem_euclid(1.0);
    let (sat_phase, val_phase) = match (kind, roof) {
        (BankKind::InDomain, RoofKind::Flat) => (0.90, 0.95),
        (BankKind::InDomain, RoofKind::Sloped) => (0.55, 0.20),
        (BankKind::HeldOut, RoofKind::Flat) => (0.40, 0.30),
        (BankKind::HeldOut, RoofKind::Sloped) => (0.70, 0.60),
    };
    let sat = 0.55 + 0.35 * frac(id as f64 * 0.381966 + sat_phase);
    let val = 0.45 + 0.45 * frac(id as f64 * 0.618034 + val_phase);
    let pattern = match (id + if kind == BankKind::HeldOut { 2 } else { 0 }) % 4 {
        0 => Pattern::Solid,
        1 => Pattern::Stripe,
        2 => Pattern::Checker,
        _ => Pattern::Speckle,
    };
    let pattern_scale = [2, 4, 8][(id / 4) % 3];
    let pattern_contrast = 0.15 + 0.2 * frac(id as f64 * 0.23 + 0.5);
    let mut seed_src = (id as u64) << 8
        | (roof == RoofKind::Sloped) as u64
        | ((kind == BankKind::HeldOut) as u64) << 1;
    let seed = splitmix64(&mut seed_src);
    TextureSpec {
        id,
        base_hsv: [hue, sat, val],
        pattern,
        pattern_scale,
        pattern_contrast,
        seed,
    }
}

impl TextureBank {
    pub fn new(kind: BankKind, k_flat: usize, k_sloped: usize) -> Self {
        assert!(k_flat >= 2 && k_sloped >= 2, "banks need at least 2 textures");
        let flat = (0..k_flat)
            .map(|i| make_texture(kind, RoofKind::Flat, i, k_flat))
            .collect();
        let sloped = (0..k_sloped)
            .map(|i| make_texture(kind, RoofKind::Sloped, i, k_sloped))
            .collect();
        Self { kind, flat, sloped }
    }

    pub fn textures(&self, roof: RoofKind) -> &[TextureSpec] {
        match roof {
            RoofKind::Flat => &self.flat,
            RoofKind::Sloped => &self.sloped,
        }
    }

    pub fn k(&self, roof: RoofKind) -> usize {
        self.textures(roof).len()
    }
}

/// Build the in-domain/held-out bank pair and enforce the separation and
/// nearest-neighbor-uniqueness guarantees.
pub fn build_bank_pair(k_flat: usize, k_sloped: usize) -> Result<(TextureBank, TextureBank), SimError> {
    let in_domain = TextureBank::new(BankKind::InDomain, k_flat, k_sloped);
    let held_out = TextureBank::new(BankKind::HeldOut, k_flat, k_sloped);
    for roof in [RoofKind::Flat, RoofKind::Sloped] {
        for ho in held_out.textures(roof) {
            for id in in_domain.textures(roof) {
                let d = hsv_distance(
                    [ho.base_hsv[0], ho.base_hsv[1], 0.0],
                    [id.base_hsv[0], id.base_hsv[1], 0.0],
                );
                if d < MIN_BANK_SEPARATION {
                    return Err(SimError::BankConstruction(format!(
                        "held-out {:?} {} too close to in-domain {} (hue-sat distance {d:.4})",
                        roof, ho.id, id.id
                    )));
                }
            }
            let ranked = texture_similarity_rank(&texture_swatch(ho), in_domain.textures(roof));
            if ranked[1].1 - ranked[0].1 < 1e-9 {
                return Err(SimError::BankConstruction(format!(
                    "held-out {:?} {} has an ambiguous nearest in-domain neighbor",
                    roof, ho.id
                )));
            }
        }
    }
    Ok((in_domain, held_out))
}

/// Deterministic 16x16 patch rendering of a texture.
pub fn texture_swatch(spec: &TextureSpec) -> Image {
    let mut img = Image::filled(SWATCH_SIZE, SWATCH_SIZE, [0, 0, 0]);
    for y in 0..SWATCH_SIZE {
        for x in 0..SWATCH_SIZE {
            img.set(x, y, quantize(spec.color_at(x, y)));
        }
    }
    img
}

/// Rank every texture of a bank group by mean-HSV distance to a query patch,
/// ascending; ties broken by lower texture id.
pub fn texture_similarity_rank(query: &Image, textures: &[TextureSpec]) -> Vec<(usize, f64)> {
    assert!(query.width() > 0 && query.height() > 0, "empty query patch");
    let q = mean_hsv(query);
    let mut ranked: Vec<(usize, f64)> = textures
        .iter()
        .map(|t| (t.id, hsv_distance(q, mean_hsv(&texture_swatch(t)))))
        .collect();
    ranked.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    ranked
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn swatch_is_deterministic() {
        let bank = TextureBank::new(BankKind::InDomain, 16, 16);
        for t in &bank.flat {
            assert_eq!(texture_swatch(t), texture_swatch(t));
        }
    }

    #[test]
    fn solid_swatch_is_one_color() {
        let bank = TextureBank::new(BankKind::InDomain, 16, 16);
        let t = &bank.flat[0];
        assert_eq!(t.pattern, Pattern::Solid);
        let img = texture_swatch(t);
        let first = img.get(0, 0);
        for y in 0..SWATCH_SIZE {
            for x in 0..SWATCH_SIZE {
                assert_eq!(img.get(x, y), first);
            }
        }
    }

    #[test]
    fn checker_swatch_has_two_colors_in_period() {
        // id 2 is Checker with scale 2; find a scale-4 checker explicitly
        let spec = TextureSpec {
            id: 0,
            base_hsv: [0.6, 0.8, 0.5],
            pattern: Pattern::Checker,
            pattern_scale: 4,
            pattern_contrast: 0.3,
            seed: 1,
        };
        let img = texture_swatch(&spec);
        let mut colors = std::collections::BTreeSet::new();
        for y in 0..SWATCH_SIZE {
            for x in 0..SWATCH_SIZE {
                colors.insert(img.get(x, y));
            }
        }
        assert_eq!(colors.len(), 2);
        // 4-pixel period: (0,0) and (4,0) differ, (0,0) and (8,0) match
        assert_ne!(img.get(0, 0), img.get(4, 0));
        assert_eq!(img.get(0, 0), img.get(8, 0));
    }

    #[test]
    fn self_similarity_ranks_first_with_zero_distance() {
        let bank = TextureBank::new(BankKind::InDomain, 16, 16);
        for k in 0..16 {
            let ranked = texture_similarity_rank(&texture_swatch(&bank.flat[k]), &bank.flat);
            assert_eq!(ranked[0].0, k);
            assert!(ranked[0].1 < 1e-12);
        }
    }

    #[test]
    fn rank_matches_brute_force_and_is_symmetric() {
        let bank = TextureBank::new(BankKind::InDomain, 8, 8);
        // brute force: pairwise mean-HSV distances computed directly
        let means: Vec<[f64; 3]> = bank
            .flat
            .iter()
            .map(|t| mean_hsv(&texture_swatch(t)))
            .collect();
        for q in 0..8 {
            let ranked = texture_similarity_rank(&texture_swatch(&bank.flat[q]), &bank.flat);
            let mut brute: Vec<(usize, f64)> = (0..8)
                .map(|j| (j, hsv_distance(means[q], means[j])))
                .collect();
            brute.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            let ranked_ids: Vec<usize> = ranked.iter().map(|r| r.0).collect();
            let brute_ids: Vec<usize> = brute.iter().map(|r| r.0).collect();
            assert_eq!(ranked_ids, brute_ids);
        }
        for a in 0..8 {
            for b in 0..8 {
                assert!((hsv_distance(means[a], means[b]) - hsv_distance(means[b], means[a])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bank_pair_constructs_with_guarantees() {
        let (in_domain, held_out) = build_bank_pair(16, 16).unwrap();
        assert_eq!(in_domain.flat.len(), 16);
        assert_eq!(held_out.sloped.len(), 16);
    }

    #[test]
    fn flat_texture_zero_is_solid_red() {
        let bank = TextureBank::new(BankKind::InDomain, 16, 16);
        let t = &bank.flat[0];
        assert_eq!(t.base_hsv[0], 0.0);
        assert_eq!(t.pattern, Pattern::Solid);
        assert!(t.base_hsv[1] > 0.5 && t.base_hsv[2] > 0.5);
    }
}
