//! 8-bit RGB tiles, label masks, color-space helpers, and binary PPM/PGM IO.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use super::SimError;

/// Interleaved-RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height * 3);
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn raw(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Pixel as normalized [0,1] floats.
    pub fn get_f(&self, x: usize, y: usize) -> [f64; 3] {
        let [r, g, b] = self.get(x, y);
        [r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0]
    }

    pub fn rotate90(&self) -> Image {
        assert_eq!(self.width, self.height, "rotate90 needs a square image");
        let n = self.width;
        let mut out = Image::filled(n, n, [0, 0, 0]);
        for y in 0..n {
            for x in 0..n {
                // (x, y) -> (n-1-y, x): counter-clockwise quarter turn
                out.set(n - 1 - y, x, self.get(x, y));
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<(), SimError> {
        let mut f = std::fs::File::create(path)?;
        write!(f, "P6\n{} {}\n255\n", self.width, self.height)?;
        f.write_all(&self.data)?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Image, SimError> {
        let bytes = std::fs::read(path)?;
        let (w, h, pixels) = parse_netpbm(&bytes, b"P6", 3)?;
        Ok(Image::from_raw(w, h, pixels))
    }
}

/// Per-pixel semantic labels of a tile.
pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_FLAT: u8 = 1;
pub const LABEL_SLOPED: u8 = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl Mask {
    pub fn filled(width: usize, height: usize, label: u8) -> Self {
        Self {
            width,
            height,
            labels: vec![label; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, label: u8) {
        self.labels[y * self.width + x] = label;
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Fraction of pixels carrying any building label.
    pub fn building_fraction(&self) -> f64 {
        let b = self.labels.iter().filter(|&&l| l != LABEL_BACKGROUND).count();
        b as f64 / self.labels.len() as f64
    }

    pub fn write_pgm(&self, path: &Path) -> Result<(), SimError> {
        let mut f = std::fs::File::create(path)?;
        write!(f, "P5\n{} {}\n255\n", self.width, self.height)?;
        f.write_all(&self.labels)?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<Mask, SimError> {
        let bytes = std::fs::read(path)?;
        let (w, h, labels) = parse_netpbm(&bytes, b"P5", 1)?;
        Ok(Mask {
            width: w,
            height: h,
            labels,
        })
    }
}

fn parse_netpbm(bytes: &[u8], magic: &[u8], channels: usize) -> Result<(usize, usize, Vec<u8>), SimError> {
    let mut cursor = std::io::Cursor::new(bytes);
    let mut header_fields = Vec::new();
    let mut magic_buf = [0u8; 2];
    cursor.read_exact(&mut magic_buf)?;
    if magic_buf != magic[..2] {
        return Err(SimError::BadImageFile("wrong magic".into()));
    }
    // header: width, height, maxval as whitespace-separated tokens, with
    // optional '#' comment lines
    while header_fields.len() < 3 {
        let mut line = String::new();
        if cursor.read_line(&mut line)? == 0 {
            return Err(SimError::BadImageFile("truncated header".into()));
        }
        for tok in line.split('#').next().unwrap_or("").split_whitespace() {
            header_fields.push(
                tok.parse::<usize>()
                    .map_err(|_| SimError::BadImageFile(format!("bad header token {tok}")))?,
            );
        }
    }
    let (w, h, maxval) = (header_fields[0], header_fields[1], header_fields[2]);
    if maxval != 255 {
        return Err(SimError::BadImageFile(format!("unsupported maxval {maxval}")));
    }
    let mut pixels = vec![0u8; w * h * channels];
    cursor.read_exact(&mut pixels)?;
    Ok((w, h, pixels))
}

/// RGB [0,1] -> HSV with h in [0,1).
pub fn rgb_to_hsv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

/// HSV with h in [0,1) -> RGB [0,1].
pub fn hsv_to_rgb(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub fn quantize(rgb: [f64; 3]) -> [u8; 3] {
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [q(rgb[0]), q(rgb[1]), q(rgb[2])]
}

/// Mean HSV triple over an image, with the hue averaged circularly.
pub fn mean_hsv(image: &Image) -> [f64; 3] {
    let mut sin_sum = 0.0;
    let mut cos_sum = 0.0;
    let mut s_sum = 0.0;
    let mut v_sum = 0.0;
    let n = (image.width() * image.height()) as f64;
    for y in 0..image.height() {
        for x in 0..image.width() {
            let [h, s, v] = rgb_to_hsv(image.get_f(x, y));
            let angle = h * std::f64::consts::TAU;
            sin_sum += angle.sin();
            cos_sum += angle.cos();
            s_sum += s;
            v_sum += v;
        }
    }
    let mean_h = (sin_sum / n)
        .atan2(cos_sum / n)
        .rem_euclid(std::f64::consts::TAU)
        / std::f64::consts::TAU;
    [mean_h, s_sum / n, v_sum / n]
}

/// Euclidean distance between HSV triples with circular hue, weighted [2,1,1].
pub fn hsv_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let raw = (a[0] - b[0]).abs().rem_euclid(1.0);
    let dh = raw.min(1.0 - raw);
    let ds = a[1] - b[1];
    let dv = a[2] - b[2];
    ((2.0 * dh) * (2.0 * dh) + ds * ds + dv * dv).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_roundtrip() {
        let mut rng = crate::rng::Pcg32::new(4);
        for _ in 0..2000 {
            let rgb = [rng.next_f64(), rng.next_f64(), rng.next_f64()];
            let back = hsv_to_rgb(rgb_to_hsv(rgb));
            for c in 0..3 {
                assert!((rgb[c] - back[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn red_is_hue_zero() {
        let [h, s, v] = rgb_to_hsv([1.0, 0.0, 0.0]);
        assert_eq!([h, s, v], [0.0, 1.0, 1.0]);
    }

    #[test]
    fn hue_distance_wraps() {
        let d = hsv_distance([0.02, 0.5, 0.5], [0.98, 0.5, 0.5]);
        assert!((d - 2.0 * 0.04).abs() < 1e-12);
    }

    #[test]
    fn ppm_pgm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::filled(5, 3, [10, 20, 30]);
        img.set(4, 2, [1, 2, 3]);
        let p = dir.path().join("t.ppm");
        img.write_ppm(&p).unwrap();
        assert_eq!(Image::read_ppm(&p).unwrap(), img);

        let mut mask = Mask::filled(5, 3, 0);
        mask.set(0, 1, 2);
        let m = dir.path().join("t.pgm");
        mask.write_pgm(&m).unwrap();
        assert_eq!(Mask::read_pgm(&m).unwrap(), mask);
    }

    #[test]
    fn rotate_four_times_is_identity() {
        let mut img = Image::filled(4, 4, [0, 0, 0]);
        img.set(1, 0, [255, 0, 0]);
        img.set(2, 3, [0, 255, 0]);
        let r = img.rotate90().rotate90().rotate90().rotate90();
        assert_eq!(r, img);
    }
}
