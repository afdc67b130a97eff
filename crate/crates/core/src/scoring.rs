//! Closed-form CRPS for mixtures of zero-truncated normals, and point-forecast
//! error scores.
//!
//! The CRPS of a predictive `F` at observation `x` is E|X − x| − ½E|X − X'|.
//! For a truncated-normal mixture both expectations reduce to pairwise
//! kernels: `S1` (component vs. observation) and `S2` (component vs.
//! component). `S2` carries a correction integral `C` that has no closed form
//! and is evaluated by adaptive quadrature.

use crate::error::Result;
use crate::mixture::{BmaModel, ForecastCase, Predictive};
use crate::quadrature::{integrate, Tolerance};
use crate::truncnorm::{std_normal, TruncatedNormal};

/// Absolute tolerance for the correction integral.
pub const CORRECTION_TOLERANCE: f64 = 1e-9;

// Below these normalizing masses the closed forms lose too many digits to
// cancellation and the expectations are integrated directly instead.
const S1_DIRECT_BELOW: f64 = 1e-6;
const S2_DIRECT_BELOW: f64 = 1e-4;

/// Parameters of the difference of two independent normals N(μ₁,σ₁²) − N(μ₂,σ₂²).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifferenceParams {
    pub mu_d: f64,
    pub sigma_d: f64,
    pub rho_d: f64,
}

impl DifferenceParams {
    pub fn new(mu1: f64, mu2: f64, sigma1: f64, sigma2: f64) -> Self {
        let sigma_d = sigma1.hypot(sigma2);
        Self {
            mu_d: mu1 - mu2,
            sigma_d,
            rho_d: (mu1 * sigma2 * sigma2 + mu2 * sigma1 * sigma1) / (sigma1 * sigma2 * sigma_d),
        }
    }
}

/// A(μ, σ²) = E|Y| for Y ~ N(μ, σ²); `sigma` is the standard deviation.
pub fn abs_moment_a(mu: f64, sigma: f64) -> f64 {
    let t = mu / sigma;
    mu * (2.0 * std_normal::cdf(t) - 1.0) + 2.0 * sigma * std_normal::pdf(t)
}

/// S1 = E|X − x| for X ~ N⁰(μ, σ²) and x ≥ 0.
pub fn crps_term_s1(x: f64, mu: f64, sigma: f64) -> Result<f64> {
    let t = mu / sigma;
    let mass = std_normal::cdf(t);
    if mass < S1_DIRECT_BELOW {
        return s1_by_quadrature(x, mu, sigma);
    }
    let d = x - mu;
    let v = (abs_moment_a(d, sigma) + d * (mass - 1.0) - sigma * std_normal::pdf(t)) / mass;
    Ok(v.max(0.0))
}

fn s1_by_quadrature(x: f64, mu: f64, sigma: f64) -> Result<f64> {
    let kernel = TruncatedNormal::new(mu, sigma)?;
    let tol = Tolerance {
        absolute: 1e-14,
        relative: 1e-11,
        max_subintervals: 1000,
    };
    let upper = x.max(mu).max(0.0) + 40.0 * sigma;
    let below = integrate(|y| (x - y) * kernel.pdf(y), 0.0, x, tol)?;
    let above = integrate(|y| (y - x) * kernel.pdf(y), x, upper, tol)?;
    Ok(below.value + above.value)
}

/// Correction integral C(μ₁, μ₂, σ₁, σ₂) of `S2`, integrated on
/// [0, |μ_d|/σ_d + 12] to absolute tolerance [`CORRECTION_TOLERANCE`].
pub fn crps_correction_c(mu1: f64, mu2: f64, sigma1: f64, sigma2: f64) -> Result<f64> {
    correction_with_tolerance(mu1, mu2, sigma1, sigma2, CORRECTION_TOLERANCE)
}

fn correction_with_tolerance(mu1: f64, mu2: f64, sigma1: f64, sigma2: f64, absolute: f64) -> Result<f64> {
    let d = DifferenceParams::new(mu1, mu2, sigma1, sigma2);
    let shift = d.mu_d / d.sigma_d;
    let (r12, r21) = (sigma2 / sigma1, sigma1 / sigma2);
    let integrand = |u: f64| {
        u * (std_normal::pdf(u - shift) * std_normal::cdf(r12 * u - d.rho_d)
            + std_normal::pdf(u + shift) * std_normal::cdf(r21 * u - d.rho_d))
    };
    let upper = shift.abs() + 12.0;
    let tol = Tolerance {
        absolute,
        relative: 0.0,
        max_subintervals: 1000,
    };
    integrate(integrand, 0.0, upper, tol).map(|r| r.value).map_err(|e| match e {
        crate::Error::QuadratureFailure { lower, upper, error, context } => crate::Error::QuadratureFailure {
            lower,
            upper,
            error,
            context: format!("{context}; C(mu1={mu1}, mu2={mu2}, sigma1={sigma1}, sigma2={sigma2})"),
        },
        other => other,
    })
}

/// S2 = E|X₁ − X₂| for independent X_i ~ N⁰(μ_i, σ_i²).
pub fn crps_term_s2(mu1: f64, mu2: f64, sigma1: f64, sigma2: f64) -> Result<f64> {
    let mass = std_normal::cdf(mu1 / sigma1) * std_normal::cdf(mu2 / sigma2);
    if mass < S2_DIRECT_BELOW {
        return s2_by_quadrature(mu1, mu2, sigma1, sigma2);
    }
    let sigma_d = sigma1.hypot(sigma2);
    // Tighten the correction tolerance as the normalizing mass shrinks.
    let tol = (CORRECTION_TOLERANCE * mass).max(1e-13);
    let c = correction_with_tolerance(mu1, mu2, sigma1, sigma2, tol)?;
    let v = (abs_moment_a(mu1 - mu2, sigma_d) - sigma_d * c) / mass;
    Ok(v.max(0.0))
}

/// E|X₁ − X₂| from the density of |X₁ − X₂| evaluated in log space.
fn s2_by_quadrature(mu1: f64, mu2: f64, sigma1: f64, sigma2: f64) -> Result<f64> {
    let d = DifferenceParams::new(mu1, mu2, sigma1, sigma2);
    let ln_norm = d.sigma_d.ln() + std_normal::ln_cdf(mu1 / sigma1) + std_normal::ln_cdf(mu2 / sigma2);
    let density = |x: f64| {
        let a = std_normal::ln_pdf((x - d.mu_d) / d.sigma_d)
            + std_normal::ln_cdf(d.rho_d - sigma2 * x / (sigma1 * d.sigma_d));
        let b = std_normal::ln_pdf((x + d.mu_d) / d.sigma_d)
            + std_normal::ln_cdf(d.rho_d - sigma1 * x / (sigma2 * d.sigma_d));
        (a - ln_norm).exp() + (b - ln_norm).exp()
    };
    let tol = Tolerance {
        absolute: 1e-14,
        relative: 1e-11,
        max_subintervals: 2000,
    };
    let upper = d.mu_d.abs() + mu1.max(mu2).max(0.0) + 40.0 * d.sigma_d;
    Ok(integrate(|x| x * density(x), 0.0, upper, tol)?.value)
}

/// CRPS of a predictive mixture at observation `x`.
pub fn crps_predictive(pred: &Predictive, x: f64) -> Result<f64> {
    let sigma = pred.sigma();
    let comps = pred.components();
    let mut first = 0.0;
    for c in comps {
        first += c.weight * crps_term_s1(x, c.location, sigma)?;
    }
    let mut second = 0.0;
    for (i, ci) in comps.iter().enumerate() {
        second += ci.weight * ci.weight * crps_term_s2(ci.location, ci.location, sigma, sigma)?;
        for cj in &comps[i + 1..] {
            second += 2.0 * ci.weight * cj.weight * crps_term_s2(ci.location, cj.location, sigma, sigma)?;
        }
    }
    Ok((first - 0.5 * second).max(0.0))
}

/// CRPS of the model's predictive for `case` at observation `x`.
pub fn crps_mixture(model: &BmaModel, case: &ForecastCase, x: f64) -> Result<f64> {
    crps_predictive(&model.predictive(case)?, x)
}

/// Mean absolute error and root mean square error.
pub fn mae_rmse(forecasts: &[f64], observations: &[f64]) -> Result<(f64, f64)> {
    if forecasts.len() != observations.len() {
        return Err(crate::Error::LengthMismatch {
            left: forecasts.len(),
            right: observations.len(),
        });
    }
    if forecasts.is_empty() {
        return Err(crate::Error::Empty("forecast/observation pairs"));
    }
    let n = forecasts.len() as f64;
    let (abs, sq) = forecasts
        .iter()
        .zip(observations)
        .fold((0.0, 0.0), |(a, s), (f, o)| {
            let e = f - o;
            (a + e.abs(), s + e * e)
        });
    Ok((abs / n, (sq / n).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{Component, GroupParams, GroupSpec};
    use chrono::NaiveDate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

    /// Direct quadrature of ∫(F(y) − 1{y ≥ x})² dy with composite Simpson panels.
    fn crps_by_definition(pred: &Predictive, x: f64) -> f64 {
        let simpson = |a: f64, b: f64, f: &dyn Fn(f64) -> f64| {
            let n = (((b - a) / 2e-3).ceil() as usize).max(2) & !1usize;
            let h = (b - a) / n as f64;
            let mut s = f(a) + f(b);
            for i in 1..n {
                s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
            }
            s * h / 3.0
        };
        let upper = pred.upper_bracket().max(x) + 10.0 * pred.sigma();
        simpson(0.0, x, &|y| pred.cdf(y).powi(2)) + simpson(x, upper, &|y| (1.0 - pred.cdf(y)).powi(2))
    }

    fn mc_abs_diff(mu1: f64, mu2: f64, s1: f64, s2: f64, n: usize, seed: u64) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |mu: f64, s: f64| loop {
            let z: f64 = StandardNormal.sample(&mut rng);
            let y = mu + s * z;
            if y >= 0.0 {
                break y;
            }
        };
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let d = (draw(mu1, s1) - draw(mu2, s2)).abs();
            sum += d;
            sq += d * d;
        }
        let mean = sum / n as f64;
        (mean, ((sq / n as f64 - mean * mean) / n as f64).sqrt())
    }

    #[test]
    fn abs_moment_examples() {
        assert!((abs_moment_a(0.0, 1.0) - SQRT_2_OVER_PI).abs() < 1e-12);
        assert_eq!(abs_moment_a(1.3, 0.7), abs_moment_a(-1.3, 0.7));
        assert!((abs_moment_a(1.0, 1.0) - 1.16663).abs() < 1e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000_000;
        let mc = (0..n)
            .map(|_| { let z: f64 = StandardNormal.sample(&mut rng); (1.0 + z).abs() })
            .sum::<f64>()
            / n as f64;
        assert!((mc - abs_moment_a(1.0, 1.0)).abs() < 1.5e-3);
        assert!(abs_moment_a(-2.0, 0.5) >= 2.0);
    }

    #[test]
    fn s1_examples() {
        assert!((crps_term_s1(0.0, 0.0, 1.0).unwrap() - SQRT_2_OVER_PI).abs() < 1e-12);
        assert!((crps_term_s1(30.0, 30.0, 1.0).unwrap() - 0.79788).abs() < 1e-5);
        let exact = crps_term_s1(1.0, 1.0, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let d = TruncatedNormal::new(1.0, 2.0).unwrap();
        let n = 10_000_000;
        let (mut s, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let v = (d.sample(&mut rng) - 1.0).abs();
            s += v;
            sq += v * v;
        }
        let mean = s / n as f64;
        let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn s1_direct_route_agrees_with_closed_form_at_switch() {
        // just above the switch both routes are available
        let (x, sigma) = (0.7, 1.1);
        let mu = -4.7 * sigma;
        let closed = {
            let t = mu / sigma;
            let mass = std_normal::cdf(t);
            (abs_moment_a(x - mu, sigma) + (x - mu) * (mass - 1.0) - sigma * std_normal::pdf(t)) / mass
        };
        let direct = s1_by_quadrature(x, mu, sigma).unwrap();
        assert!((closed - direct).abs() < 1e-7, "{closed} vs {direct}");
        assert!(crps_term_s1(0.3, -80.0, 1.0).unwrap().is_finite());
    }

    #[test]
    fn correction_vanishes_without_truncation() {
        assert!(crps_correction_c(30.0, 30.0, 1.0, 1.0).unwrap().abs() < 1e-8);
        let s2 = crps_term_s2(30.0, 30.0, 1.0, 1.0).unwrap();
        assert!((s2 - 2f64.sqrt() * SQRT_2_OVER_PI).abs() < 1e-6);
    }

    #[test]
    fn s2_symmetry() {
        for (a, b, s, t) in [(0.5, 2.0, 1.0, 0.3), (-1.0, 3.0, 2.0, 1.5), (4.0, 4.5, 0.2, 0.9)] {
            let x = crps_term_s2(a, b, s, t).unwrap();
            let y = crps_term_s2(b, a, t, s).unwrap();
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn s2_half_normal_pair_matches_sampling_oracle() {
        let (mc, se) = mc_abs_diff(0.0, 0.0, 1.0, 1.0, 10_000_000, 29);
        let s2 = crps_term_s2(0.0, 0.0, 1.0, 1.0).unwrap();
        assert!((s2 - mc).abs() < 4.0 * se);
        assert!((s2 - 0.6610).abs() < 1e-3, "{s2}");
        // closed form for a half-normal pair: 2(√2 − 1)√(2/π)
        assert!((s2 - 2.0 * (2f64.sqrt() - 1.0) * SQRT_2_OVER_PI).abs() < 1e-8);
    }

    #[test]
    fn s2_direct_route_agrees_at_switch() {
        let (m1, m2) = (-2.0, -1.6);
        let mass = std_normal::cdf(m1) * std_normal::cdf(m2);
        assert!(mass > S2_DIRECT_BELOW);
        let closed = crps_term_s2(m1, m2, 1.0, 1.0).unwrap();
        let direct = s2_by_quadrature(m1, m2, 1.0, 1.0).unwrap();
        assert!((closed - direct).abs() < 1e-7, "{closed} vs {direct}");
        let deep = crps_term_s2(-40.0, -35.0, 1.0, 1.2).unwrap();
        assert!(deep.is_finite() && deep >= 0.0);
    }

    #[test]
    fn s2_bounded_by_sum_of_means() {
        for (mu, s) in [(0.0, 1.0), (2.0, 0.5), (-1.0, 2.0), (10.0, 3.0)] {
            let s2 = crps_term_s2(mu, mu, s, s).unwrap();
            let m = TruncatedNormal::new(mu, s).unwrap().mean();
            assert!(s2 >= 0.0 && s2 <= 2.0 * m + 1e-12);
        }
    }

    fn day() -> NaiveDate {
        NaiveDate::from_ymd_opt(2011, 1, 1).unwrap()
    }

    #[test]
    fn single_component_crps_matches_definition() {
        let d = TruncatedNormal::new(1.5, 1.2).unwrap();
        let median = d.quantile(0.5).unwrap();
        let pred = Predictive::new(vec![Component { weight: 1.0, location: 1.5 }], 1.2).unwrap();
        let analytic = crps_predictive(&pred, median).unwrap();
        assert!((analytic - crps_by_definition(&pred, median)).abs() < 1e-6);
    }

    #[test]
    fn sharp_accurate_forecast_scores_near_zero() {
        let pred = Predictive::new(vec![Component { weight: 1.0, location: 4.0 }], 1e-3).unwrap();
        assert!(crps_predictive(&pred, 4.0).unwrap() < 1e-3);
    }

    #[test]
    fn eleven_member_model_matches_definition() {
        let model = BmaModel::new(
            GroupSpec::two_group(),
            vec![
                GroupParams { weight: 0.35, alpha: 0.4, beta: 0.85 },
                GroupParams { weight: 0.065, alpha: 0.1, beta: 1.05 },
            ],
            1.3,
        )
        .unwrap();
        let members = [3.1, 2.0, 4.4, 0.3, 5.2, 3.3, 1.7, 2.9, 0.0, 3.8, 4.9];
        let case = ForecastCase::complete("X", day(), &members, 2.6);
        for x in [0.0, 0.8, 2.6, 7.5] {
            let analytic = crps_mixture(&model, &case, x).unwrap();
            let oracle = crps_by_definition(&model.predictive(&case).unwrap(), x);
            assert!((analytic - oracle).abs() < 1e-5, "x={x}: {analytic} vs {oracle}");
        }
    }

    #[test]
    fn mae_rmse_examples() {
        assert_eq!(mae_rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), (0.0, 0.0));
        assert_eq!(mae_rmse(&[2.0, 0.0], &[1.0, 1.0]).unwrap(), (1.0, 1.0));
        let (mae, rmse) = mae_rmse(&[1.0, 4.0], &[1.0, 1.0]).unwrap();
        assert_eq!(mae, 1.5);
        assert!((rmse - 2.1213).abs() < 1e-4);
        assert!(mae_rmse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mae_rmse(&[], &[]).is_err());
    }
}
