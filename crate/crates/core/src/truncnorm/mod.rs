//! Normal distribution truncated from below at zero, N⁰(μ, σ²).

pub mod std_normal;

use rand::distr::Open01;
use rand::Rng;

use crate::error::{Error, Result};

pub use std_normal::inverse_mills;

/// Normal distribution with location `mu` and scale `sigma`, conditioned on
/// being nonnegative.
///
/// `mu` is the location of the parent normal, not the mean of the truncated
/// variable; see [`TruncatedNormal::mean`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedNormal {
    mu: f64,
    sigma: f64,
}

impl TruncatedNormal {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() {
            return Err(Error::InvalidParameter(format!("location {mu} is not finite")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "scale must be positive and finite, got {sigma}"
            )));
        }
        Ok(Self { mu, sigma })
    }

    pub fn location(&self) -> f64 {
        self.mu
    }

    pub fn scale(&self) -> f64 {
        self.sigma
    }

    fn standardized_location(&self) -> f64 {
        self.mu / self.sigma
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if x < 0.0 {
            return 0.0;
        }
        self.ln_pdf(x).exp()
    }

    /// Log density; `-inf` below zero. Stays finite for locations far below
    /// zero where the normalizing Φ(μ/σ) underflows.
    pub fn ln_pdf(&self, x: f64) -> f64 {
        if x < 0.0 {
            return f64::NEG_INFINITY;
        }
        std_normal::ln_pdf((x - self.mu) / self.sigma)
            - self.sigma.ln()
            - std_normal::ln_cdf(self.standardized_location())
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let t = self.standardized_location();
        let z = (x - self.mu) / self.sigma;
        if z > 0.0 {
            1.0 - (std_normal::ln_cdf(-z) - std_normal::ln_cdf(t)).exp()
        } else {
            ((std_normal::cdf(z) - std_normal::cdf(-t)) / std_normal::cdf(t)).max(0.0)
        }
    }

    /// Mean κ = μ + σ φ(μ/σ)/Φ(μ/σ).
    pub fn mean(&self) -> f64 {
        self.mu + self.sigma * inverse_mills(self.standardized_location())
    }

    /// Variance ϱ² = σ²(1 − (μ/σ)λ − λ²) with λ = φ(μ/σ)/Φ(μ/σ).
    pub fn variance(&self) -> f64 {
        let t = self.standardized_location();
        let lambda = inverse_mills(t);
        self.sigma * self.sigma * (1.0 - t * lambda - lambda * lambda)
    }

    /// Closed-form inverse of [`cdf`](Self::cdf).
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::ProbabilityOutOfRange(p));
        }
        Ok(self.quantile_unchecked(p))
    }

    pub(crate) fn quantile_unchecked(&self, p: f64) -> f64 {
        let t = self.standardized_location();
        let x = if t >= 0.0 {
            // lower-tail form: Φ⁻¹(Φ(−μ/σ) + p Φ(μ/σ))
            let arg = std_normal::cdf(-t) + p * std_normal::cdf(t);
            self.mu + self.sigma * std_normal::quantile(arg.min(1.0 - f64::EPSILON / 2.0))
        } else {
            // upper-tail form, well conditioned when Φ(μ/σ) is small
            let arg = (1.0 - p) * std_normal::cdf(t);
            if arg > 0.0 {
                self.mu - self.sigma * std_normal::quantile(arg)
            } else {
                let ln_arg = (1.0 - p).ln() + std_normal::ln_cdf(t);
                self.mu - self.sigma * quantile_from_ln(ln_arg)
            }
        };
        x.max(0.0)
    }

    /// Inverse-CDF draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.sample(Open01);
        self.quantile_unchecked(u)
    }
}

// Φ⁻¹ for probabilities that only exist as logarithms.
fn quantile_from_ln(ln_p: f64) -> f64 {
    let mut x = -(-2.0 * ln_p).sqrt();
    for _ in 0..50 {
        let step = (std_normal::ln_cdf(x) - ln_p) / inverse_mills(x);
        x -= step;
        if step.abs() <= 1e-15 * x.abs() {
            break;
        }
    }
    x
}
