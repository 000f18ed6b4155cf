//! Seeded, splittable PRNG used everywhere randomness is needed.
//!
//! A PCG-XSH-RR 32-bit generator with SplitMix64 seeding. Every stream is a
//! pure function of a 64-bit seed plus a stream label, so identical seeds
//! produce identical byte streams on every platform. No global state.

/// SplitMix64 step; used for seeding and for deriving child seeds.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// FNV-1a over a label, for turning stream names into stream selectors.
fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// PCG-XSH-RR 64/32 generator.
#[derive(Clone, Debug)]
pub struct Pcg32 {
    state: u64,
    inc: u64,
    spare_normal: Option<f64>,
}

impl Pcg32 {
    /// Stream 0 generator for a seed.
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Generator on an explicit stream; distinct streams from the same seed
    /// are independent.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut sm = seed;
        let init_state = splitmix64(&mut sm);
        let inc = (stream << 1) | 1;
        let mut rng = Self {
            state: 0,
            inc,
            spare_normal: None,
        };
        rng.state = init_state.wrapping_add(inc);
        rng.next_u32();
        rng
    }

    /// Derive an independent child generator from a label. Does not consume
    /// state from `self`, so the derivation is order-independent.
    pub fn split(&self, label: &str) -> Pcg32 {
        let mut sm = self.state ^ self.inc;
        let child_seed = splitmix64(&mut sm) ^ fnv1a(label);
        Pcg32::with_stream(child_seed, fnv1a(label) >> 1)
    }

    pub fn next_u32(&mut self) -> u32 {
        let old = self.state;
        self.state = old
            .wrapping_mul(6364136223846793005)
            .wrapping_add(self.inc);
        let xorshifted = (((old >> 18) ^ old) >> 27) as u32;
        let rot = (old >> 59) as u32;
        xorshifted.rotate_right(rot)
    }

    pub fn next_u64(&mut self) -> u64 {
        ((self.next_u32() as u64) << 32) | self.next_u32() as u64
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n) via Lemire-style rejection (unbiased).
    pub fn next_below(&mut self, n: u32) -> u32 {
        assert!(n > 0, "next_below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let r = self.next_u32();
            if r >= threshold {
                return r % n;
            }
        }
    }

    /// Uniform integer in [lo, hi] inclusive.
    pub fn range_inclusive(&mut self, lo: u32, hi: u32) -> u32 {
        assert!(lo <= hi);
        lo + self.next_below(hi - lo + 1)
    }

    /// Uniform real in [lo, hi).
    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller; pairs are cached so draws stay cheap.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.next_f64().max(1e-300);
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher-Yates shuffle of indices 0..n.
    pub fn shuffled_indices(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.next_below((i + 1) as u32) as usize;
            idx.swap(i, j);
        }
        idx
    }
}

/// Deterministic per-item seed for fan-out over indexed work (parallel trials,
/// restarts, tiles). Pure function of (seed, index).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut sm = seed ^ index.wrapping_mul(0x9e3779b97f4a7c15);
    splitmix64(&mut sm)
}
