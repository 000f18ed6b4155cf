//! Standalone loss evaluators used by oracles and tests. The differentiable
//! versions live on [`Graph`](super::Graph) as fused scalar nodes.

/// Closed-form KL(N(mu, diag sigma^2) || N(0, I)) = 1/2 sum(mu^2 + sigma^2 - 1 - ln sigma^2).
pub fn kl_gaussian_closed_form(mu: &[f64], sigma: &[f64]) -> f64 {
    assert_eq!(mu.len(), sigma.len());
    mu.iter()
        .zip(sigma)
        .map(|(m, s)| {
            let var = s * s;
            0.5 * (m * m + var - 1.0 - var.ln())
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Pcg32;

    #[test]
    fn standard_normal_has_zero_kl() {
        assert_eq!(kl_gaussian_closed_form(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn unit_mean_shift_is_half() {
        let kl = kl_gaussian_closed_form(&[1.0], &[1.0]);
        assert!((kl - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_nonnegative_and_zero_only_at_standard() {
        let mut rng = Pcg32::new(9);
        for _ in 0..200 {
            let mu = [rng.range_f64(-2.0, 2.0)];
            let sigma = [rng.range_f64(0.1, 3.0)];
            let kl = kl_gaussian_closed_form(&mu, &sigma);
            assert!(kl >= 0.0, "kl = {kl} for mu={:?} sigma={:?}", mu, sigma);
            if mu[0].abs() > 1e-3 || (sigma[0] - 1.0).abs() > 1e-3 {
                assert!(kl > 0.0);
            }
        }
    }

    /// Monte-Carlo oracle: KL = E_q[ln q(z) - ln p(z)] for z ~ q.
    #[test]
    fn matches_monte_carlo_estimate() {
        let (mu, sigma) = (0.7, 1.6);
        let mut rng = Pcg32::new(123);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let z = mu + sigma * rng.next_normal();
            // ln q - ln p with the common constant cancelled
            let ln_q = -((z - mu) * (z - mu)) / (2.0 * sigma * sigma) - sigma.ln();
            let ln_p = -z * z / 2.0;
            acc += ln_q - ln_p;
        }
        let mc = acc / n as f64;
        let closed = kl_gaussian_closed_form(&[mu], &[sigma]);
        assert!(
            (mc - closed).abs() < 1e-2,
            "mc {mc} vs closed form {closed}"
        );
    }
}
