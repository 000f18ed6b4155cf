//! Isotropic-Gaussian kernel density estimation with log-sum-exp
//! stabilization, plus the PCA projection that keeps the estimates
//! meaningful at low sample counts.

use serde::{Deserialize, Serialize};

use super::BaselineError;

/// log[(1/N) sum_i N(x; x_i, h^2 I)], stable for any query point.
pub fn kde_log_density(samples: &[Vec<f64>], x: &[f64], h: f64) -> Result<f64, BaselineError> {
    if samples.is_empty() {
        return Err(BaselineError::EmptySamples);
    }
    if !(h > 0.0) {
        return Err(BaselineError::BadBandwidth(h));
    }
    let d = x.len() as f64;
    let inv2h2 = 1.0 / (2.0 * h * h);
    let mut exponents = Vec::with_capacity(samples.len());
    for s in samples {
        debug_assert_eq!(s.len(), x.len());
        let sq: f64 = s.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        exponents.push(-sq * inv2h2);
    }
    let max = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = exponents.iter().map(|e| (e - max).exp()).sum();
    Ok(max + sum.ln() - (samples.len() as f64).ln()
        - 0.5 * d * (2.0 * std::f64::consts::PI * h * h).ln())
}

/// Silverman's rule of thumb for an isotropic bandwidth:
/// h = sigma_bar * (4 / ((d + 2) n))^(1/(d+4)), with sigma_bar the root of
/// the mean per-dimension variance.
pub fn silverman_bandwidth(samples: &[Vec<f64>]) -> Result<f64, BaselineError> {
    if samples.is_empty() {
        return Err(BaselineError::EmptySamples);
    }
    let d = samples[0].len();
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var_sum = 0.0;
    for s in samples {
        for (j, v) in s.iter().enumerate() {
            var_sum += (v - mean[j]) * (v - mean[j]);
        }
    }
    let sigma_bar = (var_sum / (n * d as f64)).sqrt();
    let h = sigma_bar * (4.0 / ((d as f64 + 2.0) * n)).powf(1.0 / (d as f64 + 4.0));
    // degenerate corpora (all points equal) still need a usable kernel
    Ok(h.max(1e-3))
}

/// PCA basis: orthonormal rows, fit once on a reference corpus, used to
/// project features before density estimation.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// One row per retained component.
    pub components: Vec<Vec<f64>>,
}

impl Pca {
    pub fn fit(samples: &[Vec<f64>], out_dim: usize) -> Result<Pca, BaselineError> {
        if samples.is_empty() {
            return Err(BaselineError::EmptySamples);
        }
        let d = samples[0].len();
        let out_dim = out_dim.min(d);
        let n = samples.len() as f64;
        let mut mean = vec![0.0; d];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut cov = vec![0.0; d * d];
        for s in samples {
            for i in 0..d {
                let di = s[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (s[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / n;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        let (eigvals, eigvecs) = jacobi_eigen(&cov, d);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap().then(a.cmp(&b)));
        let components = order[..out_dim]
            .iter()
            .map(|&k| {
                let mut v: Vec<f64> = (0..d).map(|i| eigvecs[i * d + k]).collect();
                // sign convention: largest-magnitude entry positive
                let lead = v
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                if v[lead] < 0.0 {
                    for x in v.iter_mut() {
                        *x = -*x;
                    }
                }
                v
            })
            .collect();
        Ok(Pca { mean, components })
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| {
                c.iter()
                    .zip(x)
                    .zip(&self.mean)
                    .map(|((ci, xi), mi)| ci * (xi - mi))
                    .sum()
            })
            .collect()
    }

    pub fn project_all(&self, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        xs.iter().map(|x| self.project(x)).collect()
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, column eigenvectors). Deterministic sweep order.
fn jacobi_eigen(matrix: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                off += a[i * d + j] * a[i * d + j];
            }
        }
        if off < 1e-22 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigvals = (0..d).map(|i| a[i * d + i]).collect();
    (eigvals, v)
}
