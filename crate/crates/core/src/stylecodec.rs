//! Style latent math: the Gaussian posterior over the style space, the
//! reparameterized sample, the KL regularizer against N(0, I), and prior
//! sampling for generation.
//!
//! The neural encoder that produces posteriors from images lives in
//! [`crate::styleenc`]; everything here is closed-form and framework-free.

use ndarray::Array1;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// log-sigma is clamped to this magnitude for numeric stability.
pub const LOG_SIGMA_CLAMP: f32 = 10.0;

/// Diagonal Gaussian over the style space, parameterized as (mu, log sigma).
#[derive(Debug, Clone, PartialEq)]
pub struct StylePosterior {
    mu: Array1<f32>,
    log_sigma: Array1<f32>,
}

impl StylePosterior {
    /// Construct from mean and log standard deviation; log sigma is clamped
    /// to [-LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP].
    pub fn new(mu: Array1<f32>, log_sigma: Array1<f32>) -> Result<Self> {
        if mu.len() != log_sigma.len() {
            return Err(Error::dimension(format!(
                "mu has {} entries, log_sigma has {}",
                mu.len(),
                log_sigma.len()
            )));
        }
        if mu.iter().chain(log_sigma.iter()).any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite posterior parameter"));
        }
        let log_sigma = log_sigma.mapv(|v| v.clamp(-LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP));
        Ok(Self { mu, log_sigma })
    }

    /// Standard posterior N(0, I) of the given dimension.
    pub fn standard(d_style: usize) -> Self {
        Self {
            mu: Array1::zeros(d_style),
            log_sigma: Array1::zeros(d_style),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &Array1<f32> {
        &self.mu
    }

    pub fn log_sigma(&self) -> &Array1<f32> {
        &self.log_sigma
    }

    pub fn sigma(&self) -> Array1<f32> {
        self.log_sigma.mapv(f32::exp)
    }

    /// KL(N(mu, diag(sigma^2)) || N(0, I)) =
    /// sum_i 1/2 (mu_i^2 + sigma_i^2 - 1 - 2 log sigma_i).
    pub fn kl_to_standard_normal(&self) -> Result<f64> {
        let mut total = 0.0f64;
        for (m, ls) in self.mu.iter().zip(self.log_sigma.iter()) {
            let (m, ls) = (*m as f64, *ls as f64);
            let s2 = (2.0 * ls).exp();
            total += 0.5 * (m * m + s2 - 1.0 - 2.0 * ls);
        }
        if !total.is_finite() {
            return Err(Error::numeric("KL diverged to a non-finite value"));
        }
        Ok(total)
    }
}

/// A sampled point in the style space.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleLatent(pub Array1<f32>);

impl StyleLatent {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn zeros(d_style: usize) -> Self {
        Self(Array1::zeros(d_style))
    }
}

/// Reparameterized sample `s = mu + sigma * eps`.
pub fn sample(post: &StylePosterior, eps: &Array1<f32>) -> Result<StyleLatent> {
    if eps.len() != post.dim() {
        return Err(Error::dimension(format!(
            "eps has {} entries, posterior dimension is {}",
            eps.len(),
            post.dim()
        )));
    }
    let sigma = post.sigma();
    Ok(StyleLatent(&post.mu + &(&sigma * eps)))
}

/// Draw `s ~ N(0, sigma_style^2 I)`; `sigma_style = 0` yields the zero vector.
pub fn prior_sample<R: Rng>(
    sigma_style: f64,
    d_style: usize,
    rng: &mut R,
) -> Result<StyleLatent> {
    if sigma_style < 0.0 {
        return Err(Error::config("sigma_style", "must be >= 0"));
    }
    if sigma_style == 0.0 {
        return Ok(StyleLatent::zeros(d_style));
    }
    let s = Array1::from_shape_fn(d_style, |_| {
        let z: f32 = rng.sample(StandardNormal);
        z * sigma_style as f32
    });
    Ok(StyleLatent(s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_init_head_gives_standard_posterior() {
        let p = StylePosterior::new(Array1::zeros(8), Array1::zeros(8)).unwrap();
        assert_eq!(p.mu().len(), 8);
        assert!(p.sigma().iter().all(|&s| s == 1.0));
        assert_eq!(p.kl_to_standard_normal().unwrap(), 0.0);
    }

    #[test]
    fn sample_hand_case() {
        let p = StylePosterior::new(array![1.0, 2.0], array![0.5f32.ln(), 0.0]).unwrap();
        let s = sample(&p, &array![2.0, -1.0]).unwrap();
        assert_relative_eq!(s.0[0], 2.0, max_relative = 1e-6);
        assert_relative_eq!(s.0[1], 1.0, max_relative = 1e-6);
    }

    #[test]
    fn sample_eps_zero_returns_mu() {
        let p = StylePosterior::new(array![0.3, -0.8, 1.5], array![0.1, -0.2, 0.4]).unwrap();
        let s = sample(&p, &Array1::zeros(3)).unwrap();
        assert_eq!(s.0, p.mu().clone());
    }

    #[test]
    fn sigma_zero_limit_collapses_to_mu() {
        // log sigma below the clamp floor: sigma = e^-10, negligible.
        let p = StylePosterior::new(array![0.5], array![-1e9]).unwrap();
        let s = sample(&p, &array![1000.0]).unwrap();
        assert_relative_eq!(s.0[0], 0.5, epsilon = 1e-1);
        assert_eq!(p.log_sigma()[0], -LOG_SIGMA_CLAMP);
    }

    #[test]
    fn sample_dimension_mismatch() {
        let p = StylePosterior::standard(4);
        assert!(sample(&p, &Array1::zeros(3)).is_err());
    }

    #[test]
    fn kl_closed_form_unit_cases() {
        let p = StylePosterior::new(array![1.0], array![0.0]).unwrap();
        assert_relative_eq!(p.kl_to_standard_normal().unwrap(), 0.5, max_relative = 1e-7);
    }

    #[test]
    fn kl_nonnegative_and_zero_iff_standard() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let mu = Array1::from_shape_fn(6, |_| rng.gen_range(-2.0f32..2.0));
            let ls = Array1::from_shape_fn(6, |_| rng.gen_range(-1.5f32..1.5));
            let p = StylePosterior::new(mu.clone(), ls.clone()).unwrap();
            let kl = p.kl_to_standard_normal().unwrap();
            assert!(kl >= 0.0);
            let standard = mu.iter().all(|&m| m == 0.0) && ls.iter().all(|&l| l == 0.0);
            if !standard {
                assert!(kl > 0.0);
            }
        }
    }

    #[test]
    fn kl_matches_monte_carlo_oracle() {
        // E_q[log q - log p] over 1e5 draws, both densities evaluated
        // directly; agreement within 3 standard errors.
        let p = StylePosterior::new(array![0.7, -0.4], array![0.3, -0.5]).unwrap();
        let closed = p.kl_to_standard_normal().unwrap();

        let mu = [0.7f64, -0.4];
        let sigma = [0.3f64.exp(), (-0.5f64).exp()];
        let n = 100_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for _ in 0..n {
            let mut term = 0.0f64;
            for d in 0..2 {
                let z: f64 = rng.sample(StandardNormal);
                let x = mu[d] + sigma[d] * z;
                // log q(x) - log p(x) for the d-th coordinate
                let log_q = -0.5 * z * z - sigma[d].ln();
                let log_p = -0.5 * x * x;
                term += log_q - log_p;
            }
            sum += term;
            sumsq += term * term;
        }
        let mean = sum / n as f64;
        let var = (sumsq / n as f64 - mean * mean).max(0.0);
        let se = (var / n as f64).sqrt();
        assert!(
            (closed - mean).abs() <= 3.0 * se,
            "closed {closed} vs MC {mean} +- {se}"
        );
    }

    #[test]
    fn prior_sample_sigma_zero_is_zero_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = prior_sample(0.0, 16, &mut rng).unwrap();
        assert!(s.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prior_sample_negative_sigma_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(prior_sample(-0.1, 4, &mut rng).is_err());
    }

    #[test]
    fn prior_sample_deterministic_under_seed() {
        let a = prior_sample(0.5, 32, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = prior_sample(0.5, 32, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn prior_sample_empirical_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let d = 4;
        let n = 100_000;
        let mut acc = vec![0.0f64; d];
        for _ in 0..n {
            let s = prior_sample(0.5, d, &mut rng).unwrap();
            for (a, v) in acc.iter_mut().zip(s.0.iter()) {
                *a += (*v as f64) * (*v as f64);
            }
        }
        for a in acc {
            let std = (a / n as f64).sqrt();
            assert!((0.49..=0.51).contains(&std), "std {std} outside [0.49, 0.51]");
        }
    }
}
