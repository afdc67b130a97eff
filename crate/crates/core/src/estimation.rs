//! Parameter estimation for [`BmaModel`]: pooled linear regression for the
//! location coefficients and three EM schemes for weights and scale.
//!
//! * naive: α, β from regressing observations on member forecasts; EM for ω, σ.
//! * mean-corrected: regression fixes the component *means*; per-case
//!   locations are corrected inside EM, then α, β are refitted to them.
//! * full-ML: ω, α, β and σ all updated inside EM.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mixture::{log_sum_exp, BmaModel, ForecastCase, GroupParams, GroupSpec};
use crate::truncnorm::{inverse_mills, std_normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Naive,
    MeanCorrected,
    FullMl,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Naive, Variant::MeanCorrected, Variant::FullMl];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Naive => "naive",
            Variant::MeanCorrected => "mean-corrected",
            Variant::FullMl => "full-ml",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Variant::Naive),
            "mean-corrected" => Ok(Variant::MeanCorrected),
            "full-ml" => Ok(Variant::FullMl),
            other => Err(Error::InvalidParameter(format!(
                "unknown variant `{other}` (expected naive, mean-corrected or full-ml)"
            ))),
        }
    }
}

/// How full-ML sets the per-case locations after the α/β update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LocationUpdate {
    /// μ = α + β f with the freshly updated coefficients.
    #[default]
    CurrentFit,
    /// μ = μ⁽⁰⁾ − σ λ((α + β f)/σ): corrects the initial regression mean.
    RegressionAnchored,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmConfig {
    pub variant: Variant,
    /// Stop when |Δℓ| < tol·|ℓ|.
    pub tol: f64,
    pub max_iters: usize,
    pub min_sigma: f64,
    pub location_update: LocationUpdate,
}

impl EmConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            tol: 1e-7,
            max_iters: 500,
            min_sigma: 1e-4,
            location_update: LocationUpdate::CurrentFit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(Error::InvalidParameter(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be at least 1".into()));
        }
        if self.min_sigma.is_nan() || self.min_sigma <= 0.0 {
            return Err(Error::InvalidParameter(format!("min_sigma must be positive, got {}", self.min_sigma)));
        }
        Ok(())
    }
}

impl Default for EmConfig {
    fn default() -> Self {
        Self::new(Variant::FullMl)
    }
}

/// Complete training cases flattened to a row-major forecast matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    spec: GroupSpec,
    forecasts: Vec<f64>,
    observations: Vec<f64>,
}

impl TrainingSet {
    /// Requires at least two cases per group (one regression pair each).
    pub fn new(spec: GroupSpec, cases: &[ForecastCase]) -> Result<Self> {
        let need = 2 * spec.group_count();
        Self::with_minimum(spec, cases, need)
    }

    pub fn with_minimum(spec: GroupSpec, cases: &[ForecastCase], min_cases: usize) -> Result<Self> {
        let m = spec.total_members();
        let mut forecasts = Vec::with_capacity(cases.len() * m);
        let mut observations = Vec::with_capacity(cases.len());
        for case in cases {
            if case.members.len() != m {
                return Err(Error::LayoutMismatch(format!(
                    "case {}/{} has {} members, spec has {}",
                    case.station,
                    case.date,
                    case.members.len(),
                    m
                )));
            }
            let values = case.member_values().ok_or_else(|| Error::MissingMembers {
                station: case.station.clone(),
                date: case.date.to_string(),
                missing: case.missing_members(),
            })?;
            let x = case.observation.ok_or_else(|| Error::MissingObservation {
                station: case.station.clone(),
                date: case.date.to_string(),
            })?;
            forecasts.extend(values);
            observations.push(x);
        }
        Self::build(spec, forecasts, observations, min_cases)
    }

    /// Row-major `forecasts` (one row of M member values per case).
    pub fn from_matrix(spec: GroupSpec, forecasts: Vec<f64>, observations: Vec<f64>) -> Result<Self> {
        let need = 2 * spec.group_count();
        Self::build(spec, forecasts, observations, need)
    }

    fn build(spec: GroupSpec, forecasts: Vec<f64>, observations: Vec<f64>, min_cases: usize) -> Result<Self> {
        let m = spec.total_members();
        if forecasts.len() != observations.len() * m {
            return Err(Error::LengthMismatch {
                left: forecasts.len(),
                right: observations.len() * m,
            });
        }
        if observations.len() < min_cases.max(1) {
            return Err(Error::InsufficientTraining {
                got: observations.len(),
                need: min_cases.max(1),
            });
        }
        if forecasts.iter().chain(&observations).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidParameter("training values must be finite and nonnegative".into()));
        }
        Ok(Self {
            spec,
            forecasts,
            observations,
        })
    }

    pub fn spec(&self) -> &GroupSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn forecasts(&self, case: usize) -> &[f64] {
        let m = self.spec.total_members();
        &self.forecasts[case * m..(case + 1) * m]
    }

    pub fn observation(&self, case: usize) -> f64 {
        self.observations[case]
    }

    pub fn observations(&self) -> &[f64] {
        &self.observations
    }

    /// (forecast, observation) pairs of every member of group `k`, case by case.
    fn group_pairs(&self, k: usize) -> impl Iterator<Item = (f64, f64)> + '_ {
        let m = self.spec.total_members();
        let groups = self.spec.member_groups();
        (0..self.len()).flat_map(move |n| {
            (0..m)
                .filter(move |&i| groups[i] == k)
                .map(move |i| (self.forecasts[n * m + i], self.observations[n]))
        })
    }
}

/// Ordinary least-squares line `y ≈ intercept + slope·x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    /// All regressors equal: slope set to 0, intercept to the mean response.
    pub singular: bool,
}

pub fn ols(pairs: impl IntoIterator<Item = (f64, f64)>) -> Result<LinearFit> {
    let pairs: Vec<(f64, f64)> = pairs.into_iter().collect();
    if pairs.is_empty() {
        return Err(Error::Empty("regression pairs"));
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for &(x, y) in &pairs {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 1e-24 * n * mx.abs().max(1.0).powi(2) {
        return Ok(LinearFit {
            intercept: my,
            slope: 0.0,
            singular: true,
        });
    }
    let slope = sxy / sxx;
    Ok(LinearFit {
        intercept: my - slope * mx,
        slope,
        singular: false,
    })
}

/// Pooled OLS of observations on the forecasts of every member of `group`.
pub fn regress_location(training: &TrainingSet, group: &str) -> Result<LinearFit> {
    let k = training
        .spec
        .index_of(group)
        .ok_or_else(|| Error::UnknownGroup(group.to_string()))?;
    ols(training.group_pairs(k))
}

/// Mean-correction map μ ↦ anchor − σ λ(μ/σ).
pub fn mean_correction(anchor: f64, location: f64, sigma: f64) -> f64 {
    anchor - sigma * inverse_mills(location / sigma)
}

/// Member-level posterior membership probabilities, one row per case.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    members: usize,
    values: Vec<f64>,
}

impl Responsibilities {
    pub fn case(&self, n: usize) -> &[f64] {
        &self.values[n * self.members..(n + 1) * self.members]
    }

    pub fn cases(&self) -> usize {
        self.values.len() / self.members
    }

    /// Sum over the members of each group for case `n`.
    pub fn group_totals(&self, spec: &GroupSpec, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; spec.group_count()];
        for (z, &k) in self.case(n).iter().zip(spec.member_groups()) {
            out[k] += z;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitDiagnostics {
    pub variant: Variant,
    pub location_update: LocationUpdate,
    pub cases: usize,
    pub iterations: usize,
    pub converged: bool,
    pub initial_log_likelihood: f64,
    pub final_log_likelihood: f64,
    pub sigma_floor_hit: bool,
    /// Groups whose regression design was singular.
    pub singular_regression: Vec<String>,
    /// Groups whose full-ML α or β update had a zero denominator at least once.
    pub degenerate_updates: Vec<String>,
}

impl FitDiagnostics {
    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "variant={}", self.variant);
        if self.variant == Variant::FullMl {
            let mode = match self.location_update {
                LocationUpdate::CurrentFit => "current-fit",
                LocationUpdate::RegressionAnchored => "regression-anchored",
            };
            let _ = writeln!(out, "location_update={mode}");
        }
        let _ = writeln!(out, "cases={}", self.cases);
        let _ = writeln!(out, "iterations={}", self.iterations);
        let _ = writeln!(out, "converged={}", self.converged);
        let _ = writeln!(out, "initial_log_likelihood={:.16e}", self.initial_log_likelihood);
        let _ = writeln!(out, "final_log_likelihood={:.16e}", self.final_log_likelihood);
        let _ = writeln!(out, "sigma_floor_hit={}", self.sigma_floor_hit);
        let _ = writeln!(out, "singular_regression={}", self.singular_regression.join(","));
        let _ = writeln!(out, "degenerate_updates={}", self.degenerate_updates.join(","));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub model: BmaModel,
    pub diagnostics: FitDiagnostics,
}

/// ln g(x | μ, σ) for the zero-truncated normal kernel.
fn ln_kernel(x: f64, mu: f64, sigma: f64, ln_sigma: f64) -> f64 {
    std_normal::ln_pdf((x - mu) / sigma) - ln_sigma - std_normal::ln_cdf(mu / sigma)
}

/// E step over per-case member locations. Returns responsibilities and the
/// observed-data log-likelihood at the supplied parameters.
fn e_step(
    training: &TrainingSet,
    locations: &[f64],
    member_weights: &[f64],
    sigma: f64,
) -> Result<(Responsibilities, f64)> {
    let m = training.spec.total_members();
    let ln_w: Vec<f64> = member_weights.iter().map(|w| w.ln()).collect();
    let ln_sigma = sigma.ln();
    let mut values = vec![0.0; locations.len()];
    let mut total = 0.0;
    let mut terms = vec![0.0; m];
    for n in 0..training.len() {
        let x = training.observations[n];
        let row = &locations[n * m..(n + 1) * m];
        for i in 0..m {
            terms[i] = ln_w[i] + ln_kernel(x, row[i], sigma, ln_sigma);
        }
        let lse = log_sum_exp(&terms);
        if !lse.is_finite() {
            return Err(Error::NonFiniteLikelihood { case_index: n });
        }
        total += lse;
        for (z, t) in values[n * m..(n + 1) * m].iter_mut().zip(&terms) {
            *z = (t - lse).exp();
        }
    }
    Ok((Responsibilities { members: m, values }, total))
}

fn model_locations(model: &BmaModel, training: &TrainingSet) -> Vec<f64> {
    let m = training.spec.total_members();
    let mut out = Vec::with_capacity(training.forecasts.len());
    for n in 0..training.len() {
        let f = training.forecasts(n);
        out.extend((0..m).map(|i| model.location(i, f[i])));
    }
    out
}

fn member_weights(model: &BmaModel) -> Vec<f64> {
    model
        .spec()
        .member_groups()
        .iter()
        .map(|&k| model.params()[k].weight)
        .collect()
}

fn check_compatible(model: &BmaModel, training: &TrainingSet) -> Result<()> {
    if model.spec() != training.spec() {
        return Err(Error::LayoutMismatch(format!(
            "model groups {} vs training groups {}",
            model.spec(),
            training.spec()
        )));
    }
    Ok(())
}

/// Observed-data log-likelihood Σ log predictive density over the training cases.
pub fn log_likelihood(model: &BmaModel, training: &TrainingSet) -> Result<f64> {
    check_compatible(model, training)?;
    let locations = model_locations(model, training);
    e_step(training, &locations, &member_weights(model), model.sigma()).map(|(_, l)| l)
}

/// Responsibilities of every member under `model`.
pub fn responsibilities(model: &BmaModel, training: &TrainingSet) -> Result<Responsibilities> {
    check_compatible(model, training)?;
    let locations = model_locations(model, training);
    e_step(training, &locations, &member_weights(model), model.sigma()).map(|(z, _)| z)
}

pub fn fit_naive(training: &TrainingSet, config: &EmConfig) -> Result<Fit> {
    fit(training, &EmConfig { variant: Variant::Naive, ..*config })
}

pub fn fit_mean_corrected(training: &TrainingSet, config: &EmConfig) -> Result<Fit> {
    fit(training, &EmConfig { variant: Variant::MeanCorrected, ..*config })
}

pub fn fit_full_ml(training: &TrainingSet, config: &EmConfig) -> Result<Fit> {
    fit(training, &EmConfig { variant: Variant::FullMl, ..*config })
}

/// Regression start shared by all variants: coefficients, uniform weights and
/// σ⁽⁰⁾ from the pooled regression residuals.
pub fn initial_model(training: &TrainingSet, min_sigma: f64) -> Result<(BmaModel, Vec<bool>)> {
    let spec = training.spec.clone();
    let m = spec.total_members();
    let mut params = Vec::with_capacity(spec.group_count());
    let mut singular = Vec::with_capacity(spec.group_count());
    for k in 0..spec.group_count() {
        let lf = ols(training.group_pairs(k))?;
        singular.push(lf.singular);
        params.push(GroupParams {
            weight: 1.0 / m as f64,
            alpha: lf.intercept,
            beta: lf.slope,
        });
    }
    let mut sq = 0.0;
    for n in 0..training.len() {
        let x = training.observations[n];
        for (i, f) in training.forecasts(n).iter().enumerate() {
            let p = &params[spec.group_of(i)];
            sq += (x - p.alpha - p.beta * f).powi(2);
        }
    }
    let sigma = (sq / (training.len() * m) as f64).sqrt().max(min_sigma);
    Ok((BmaModel::normalized(spec, params, sigma)?, singular))
}

pub fn fit(training: &TrainingSet, config: &EmConfig) -> Result<Fit> {
    config.validate()?;
    let spec = training.spec.clone();
    let m = spec.total_members();
    let g = spec.group_count();
    let groups = spec.member_groups().to_vec();
    let n_cases = training.len();
    let nf = n_cases as f64;

    let (start, singular) = initial_model(training, config.min_sigma)?;
    let anchors = model_locations(&start, training);
    let mut locations = anchors.clone();
    let mut weights: Vec<f64> = vec![1.0 / m as f64; g];
    let mut alpha: Vec<f64> = start.params().iter().map(|p| p.alpha).collect();
    let mut beta: Vec<f64> = start.params().iter().map(|p| p.beta).collect();
    let mut sigma = start.sigma();
    let mut floor_hit = start.sigma() <= config.min_sigma;
    let mut degenerate = vec![false; g];

    let mut previous: Option<f64> = None;
    let mut converged = false;
    let mut iterations = 0;
    let mut last_ll = f64::NAN;
    let mut ll_is_current = false;
    while iterations < config.max_iters {
        let mw: Vec<f64> = groups.iter().map(|&k| weights[k]).collect();
        let (z, ll) = e_step(training, &locations, &mw, sigma)?;
        last_ll = ll;
        ll_is_current = true;
        if let Some(prev) = previous {
            if (ll - prev).abs() < config.tol * ll.abs() {
                converged = true;
                break;
            }
        }
        previous = Some(ll);

        let mut group_z = vec![0.0; g];
        for n in 0..n_cases {
            for (zi, &k) in z.case(n).iter().zip(&groups) {
                group_z[k] += zi;
            }
        }
        for k in 0..g {
            weights[k] = group_z[k] / (nf * spec.groups()[k].members as f64);
        }

        match config.variant {
            Variant::Naive => {}
            Variant::MeanCorrected => {
                for (mu, a) in locations.iter_mut().zip(&anchors) {
                    *mu = mean_correction(*a, *mu, sigma);
                }
            }
            Variant::FullMl => {
                let corr: Vec<f64> = locations.iter().map(|mu| sigma * inverse_mills(mu / sigma)).collect();
                let mut num_a = vec![0.0; g];
                for n in 0..n_cases {
                    let x = training.observations[n];
                    let f = training.forecasts(n);
                    let zc = z.case(n);
                    for i in 0..m {
                        let k = groups[i];
                        num_a[k] += zc[i] * (x - beta[k] * f[i] - corr[n * m + i]);
                    }
                }
                for k in 0..g {
                    if group_z[k] > 0.0 {
                        alpha[k] = num_a[k] / group_z[k];
                    } else {
                        degenerate[k] = true;
                    }
                }
                let (mut num_b, mut den_b) = (vec![0.0; g], vec![0.0; g]);
                for n in 0..n_cases {
                    let x = training.observations[n];
                    let f = training.forecasts(n);
                    let zc = z.case(n);
                    for i in 0..m {
                        let k = groups[i];
                        num_b[k] += zc[i] * f[i] * (x - alpha[k] - corr[n * m + i]);
                        den_b[k] += zc[i] * f[i] * f[i];
                    }
                }
                for k in 0..g {
                    if den_b[k] > 0.0 {
                        beta[k] = num_b[k] / den_b[k];
                    } else {
                        degenerate[k] = true;
                    }
                }
                for n in 0..n_cases {
                    let f = training.forecasts(n);
                    for i in 0..m {
                        let k = groups[i];
                        let fit = alpha[k] + beta[k] * f[i];
                        locations[n * m + i] = match config.location_update {
                            LocationUpdate::CurrentFit => fit,
                            LocationUpdate::RegressionAnchored => mean_correction(anchors[n * m + i], fit, sigma),
                        };
                    }
                }
            }
        }

        let (mut spread, mut correction) = (0.0, 0.0);
        for n in 0..n_cases {
            let x = training.observations[n];
            let zc = z.case(n);
            for i in 0..m {
                let mu = locations[n * m + i];
                spread += zc[i] * (x - mu) * (x - mu);
                correction += zc[i] * mu * inverse_mills(mu / sigma);
            }
        }
        let s2 = spread / nf + sigma * correction / nf;
        if correction < 0.0 {
            log::trace!("negative scale correction term {correction:e} at iteration {iterations}");
        }
        let next = if s2 > 0.0 { s2.sqrt() } else { 0.0 };
        if next <= config.min_sigma || next.is_nan() {
            floor_hit = true;
        }
        sigma = next.max(config.min_sigma);
        iterations += 1;
        ll_is_current = false;
    }

    match config.variant {
        Variant::Naive | Variant::FullMl => {}
        Variant::MeanCorrected => {
            let groups = &groups;
            let locations = &locations;
            for k in 0..g {
                let pairs = (0..n_cases).flat_map(|n| {
                    let f = training.forecasts(n);
                    let locs = &locations[n * m..(n + 1) * m];
                    (0..m).filter(move |&i| groups[i] == k).map(move |i| (f[i], locs[i]))
                });
                let lf = ols(pairs)?;
                alpha[k] = lf.intercept;
                beta[k] = lf.slope;
            }
        }
    }

    let params = (0..g)
        .map(|k| GroupParams {
            weight: weights[k],
            alpha: alpha[k],
            beta: beta[k],
        })
        .collect();
    let model = BmaModel::normalized(spec.clone(), params, sigma)?;

    let initial_log_likelihood = log_likelihood(&start, training)?;
    // The internal likelihood only describes the returned model when the
    // EM locations are exactly the model's α + β f.
    let final_log_likelihood = match config.variant {
        Variant::Naive if ll_is_current => last_ll,
        Variant::FullMl if ll_is_current && config.location_update == LocationUpdate::CurrentFit => last_ll,
        _ => log_likelihood(&model, training)?,
    };
    let names = |flags: &[bool]| -> Vec<String> {
        flags
            .iter()
            .zip(spec.groups())
            .filter(|(f, _)| **f)
            .map(|(_, gr)| gr.id.clone())
            .collect()
    };
    let diagnostics = FitDiagnostics {
        variant: config.variant,
        location_update: config.location_update,
        cases: n_cases,
        iterations,
        converged,
        initial_log_likelihood,
        final_log_likelihood,
        sigma_floor_hit: floor_hit,
        singular_regression: names(&singular),
        degenerate_updates: names(&degenerate),
    };
    if !converged {
        log::warn!(
            "{} EM stopped after {} iterations without meeting tol {:e}",
            config.variant,
            iterations,
            config.tol
        );
    }
    Ok(Fit { model, diagnostics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::truncnorm::TruncatedNormal;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Gamma, StandardNormal};

    fn pair_spec() -> GroupSpec {
        GroupSpec::new([("a", 1), ("b", 1)]).unwrap()
    }

    fn set(spec: GroupSpec, rows: &[(&[f64], f64)]) -> TrainingSet {
        let mut f = Vec::new();
        let mut x = Vec::new();
        for (r, o) in rows {
            f.extend_from_slice(r);
            x.push(*o);
        }
        TrainingSet::build(spec, f, x, 1).unwrap()
    }

    /// Cases from a known mixture; members share a gamma signal plus noise.
    fn simulate(
        spec: &GroupSpec,
        truth: &[GroupParams],
        sigma: f64,
        noise: f64,
        shift: f64,
        n: usize,
        seed: u64,
    ) -> TrainingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gamma = Gamma::new(2.0, 2.0).unwrap();
        let m = spec.total_members();
        let probs: Vec<f64> = spec.member_groups().iter().map(|&k| truth[k].weight).collect();
        let (mut f, mut x) = (Vec::new(), Vec::new());
        for _ in 0..n {
            let s: f64 = gamma.sample(&mut rng);
            let row: Vec<f64> = (0..m)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    (s + noise * e).max(0.0) + shift
                })
                .collect();
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = m - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            let p = truth[spec.group_of(pick)];
            let d = TruncatedNormal::new(p.alpha + p.beta * row[pick], sigma).unwrap();
            x.push(d.sample(&mut rng));
            f.extend(row);
        }
        TrainingSet::from_matrix(spec.clone(), f, x).unwrap()
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("ml".parse::<Variant>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = EmConfig::new(Variant::Naive);
        assert!(c.validate().is_ok());
        c.tol = 0.0;
        assert!(c.validate().is_err());
        let c = EmConfig { max_iters: 0, ..EmConfig::default() };
        assert!(c.validate().is_err());
        let c = EmConfig { min_sigma: -1.0, ..EmConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn training_set_requires_complete_cases() {
        let day = chrono::NaiveDate::from_ymd_opt(2010, 10, 1).unwrap();
        let spec = pair_spec();
        let good = ForecastCase::complete("A", day, &[1.0, 2.0], 1.5);
        let mut gap = good.clone();
        gap.members[1] = None;
        let mut blind = good.clone();
        blind.observation = None;
        assert!(matches!(
            TrainingSet::new(spec.clone(), &[good.clone(), gap]),
            Err(Error::MissingMembers { .. })
        ));
        assert!(matches!(
            TrainingSet::new(spec.clone(), &[good.clone(), blind]),
            Err(Error::MissingObservation { .. })
        ));
        assert!(matches!(
            TrainingSet::new(spec.clone(), std::slice::from_ref(&good)),
            Err(Error::InsufficientTraining { got: 1, need: 4 })
        ));
        let ts = TrainingSet::new(spec, &vec![good; 4]).unwrap();
        assert_eq!(ts.len(), 4);
        assert_eq!(ts.forecasts(3), &[1.0, 2.0]);
    }

    #[test]
    fn ols_examples() {
        let lf = ols([(1.0, 2.0), (2.0, 3.0), (3.0, 5.0)]).unwrap();
        assert!((lf.intercept - 1.0 / 3.0).abs() < 1e-14);
        assert!((lf.slope - 1.5).abs() < 1e-14);
        let lf = ols([(1.0, 1.0), (4.0, 4.0), (2.5, 2.5)]).unwrap();
        assert!(lf.intercept.abs() < 1e-14 && (lf.slope - 1.0).abs() < 1e-14);
        let lf = ols([(1.0, 7.0), (4.0, 7.0), (2.5, 7.0)]).unwrap();
        assert!((lf.intercept - 7.0).abs() < 1e-14 && lf.slope.abs() < 1e-14);
        let lf = ols([(3.0, 1.0), (3.0, 2.0)]).unwrap();
        assert!(lf.singular);
        assert_eq!((lf.intercept, lf.slope), (1.5, 0.0));
    }

    #[test]
    fn regression_pools_members_of_a_group() {
        let spec = GroupSpec::new([("c", 1), ("p", 2)]).unwrap();
        let ts = set(spec, &[(&[1.0, 1.0, 3.0], 2.0), (&[2.0, 2.0, 2.0], 3.0), (&[3.0, 3.0, 1.0], 5.0)]);
        let c = regress_location(&ts, "c").unwrap();
        assert!((c.intercept - 1.0 / 3.0).abs() < 1e-14 && (c.slope - 1.5).abs() < 1e-14);
        let oracle = ols([(1.0, 2.0), (3.0, 2.0), (2.0, 3.0), (2.0, 3.0), (3.0, 5.0), (1.0, 5.0)]).unwrap();
        assert_eq!(regress_location(&ts, "p").unwrap(), oracle);
        assert!(matches!(regress_location(&ts, "zz"), Err(Error::UnknownGroup(_))));
    }

    #[test]
    fn two_case_e_step_by_hand() {
        let spec = pair_spec();
        let model = BmaModel::new(
            spec.clone(),
            vec![
                GroupParams { weight: 0.5, alpha: 0.0, beta: 1.0 },
                GroupParams { weight: 0.5, alpha: 1.0, beta: 0.5 },
            ],
            1.0,
        )
        .unwrap();
        let ts = set(spec, &[(&[2.0, 4.0], 2.5), (&[0.5, 1.0], 0.2)]);
        let z = responsibilities(&model, &ts).unwrap();
        let g = |mu: f64, x: f64| TruncatedNormal::new(mu, 1.0).unwrap().pdf(x);
        let hand = [
            (g(2.0, 2.5), g(3.0, 2.5)),
            (g(0.5, 0.2), g(1.5, 0.2)),
        ];
        for (n, (ga, gb)) in hand.iter().enumerate() {
            let za = ga / (ga + gb);
            assert!((z.case(n)[0] - za).abs() < 1e-14);
            assert!((z.case(n)[0] + z.case(n)[1] - 1.0).abs() < 1e-14);
        }
        let ll = log_likelihood(&model, &ts).unwrap();
        let hand_ll: f64 = hand.iter().map(|(a, b)| (0.5 * a + 0.5 * b).ln()).sum();
        assert!((ll - hand_ll).abs() < 1e-13);

        // one EM pass from uniform weights: ω_k = mean responsibility
        let cfg = EmConfig { max_iters: 1, ..EmConfig::new(Variant::Naive) };
        let fit = fit_naive(&ts, &cfg).unwrap();
        let start = initial_model(&ts, 1e-4).unwrap().0;
        let z0 = responsibilities(&start, &ts).unwrap();
        let w_a = (z0.case(0)[0] + z0.case(1)[0]) / 2.0;
        assert!((fit.model.params()[0].weight - w_a).abs() < 1e-14);
        assert_eq!(fit.diagnostics.iterations, 1);
        assert!(!fit.diagnostics.converged);
    }

    #[test]
    fn log_likelihood_single_component_and_additivity() {
        let spec = GroupSpec::new([("only", 1)]).unwrap();
        let model = BmaModel::new(spec.clone(), vec![GroupParams { weight: 1.0, alpha: 0.3, beta: 0.8 }], 1.2).unwrap();
        let one = set(spec.clone(), &[(&[3.0], 2.0)]);
        let d = TruncatedNormal::new(0.3 + 0.8 * 3.0, 1.2).unwrap();
        assert!((log_likelihood(&model, &one).unwrap() - d.ln_pdf(2.0)).abs() < 1e-14);
        let rows: Vec<(&[f64], f64)> = vec![(&[3.0], 2.0), (&[1.0], 0.4), (&[5.5], 6.1)];
        let base = set(spec.clone(), &rows);
        let doubled = set(spec, &[rows.clone(), rows].concat());
        let (a, b) = (log_likelihood(&model, &base).unwrap(), log_likelihood(&model, &doubled).unwrap());
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn identical_groups_get_identical_weights() {
        let spec = pair_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rows = Vec::new();
        for _ in 0..200 {
            let f: f64 = rng.random_range(0.5..8.0);
            let x = TruncatedNormal::new(0.4 + 0.9 * f, 1.0).unwrap().sample(&mut rng);
            rows.push((vec![f, f], x));
        }
        let ts = TrainingSet::build(
            spec,
            rows.iter().flat_map(|r| r.0.clone()).collect(),
            rows.iter().map(|r| r.1).collect(),
            1,
        )
        .unwrap();
        for v in Variant::ALL {
            let fit = fit(&ts, &EmConfig::new(v)).unwrap();
            let p = fit.model.params();
            assert!((p[0].weight - p[1].weight).abs() < 1e-6, "{v}");
            assert!((p[0].alpha - p[1].alpha).abs() < 1e-5, "{v}");
            assert!((p[0].beta - p[1].beta).abs() < 1e-5, "{v}");
        }
    }

    #[test]
    fn case_order_does_not_matter() {
        let spec = GroupSpec::two_group();
        let truth = [
            GroupParams { weight: 0.6, alpha: 0.5, beta: 0.9 },
            GroupParams { weight: 0.04, alpha: 0.2, beta: 1.0 },
        ];
        let ts = simulate(&spec, &truth, 1.0, 1.5, 0.0, 300, 11);
        let mut order: Vec<usize> = (0..ts.len()).collect();
        order.reverse();
        order.rotate_left(37);
        let f: Vec<f64> = order.iter().flat_map(|&n| ts.forecasts(n).to_vec()).collect();
        let x: Vec<f64> = order.iter().map(|&n| ts.observation(n)).collect();
        let shuffled = TrainingSet::from_matrix(spec, f, x).unwrap();
        for v in Variant::ALL {
            let a = fit(&ts, &EmConfig::new(v)).unwrap();
            let b = fit(&shuffled, &EmConfig::new(v)).unwrap();
            assert_eq!(a.diagnostics.iterations, b.diagnostics.iterations);
            for (p, q) in a.model.params().iter().zip(b.model.params()) {
                assert!((p.weight - q.weight).abs() < 1e-10);
                assert!((p.alpha - q.alpha).abs() < 1e-10);
                assert!((p.beta - q.beta).abs() < 1e-10);
            }
            assert!((a.model.sigma() - b.model.sigma()).abs() < 1e-10);
        }
    }

    #[test]
    fn mean_correction_fixed_point() {
        // the anchor is the mean of N⁰(1, 1); the location it corrects to is 1
        let anchor = TruncatedNormal::new(1.0, 1.0).unwrap().mean();
        assert!((anchor - 1.287_599_8).abs() < 1e-6);
        let mut mu = anchor;
        for _ in 0..200 {
            mu = mean_correction(anchor, mu, 1.0);
        }
        assert!((mu - 1.0).abs() < 1e-10, "{mu}");
        // large locations need no correction
        assert!((mean_correction(12.0, 12.0, 1.0) - 12.0).abs() < 1e-12);
    }

    #[test]
    fn mean_corrected_without_truncation_keeps_regression() {
        let spec = GroupSpec::two_group();
        let truth = [
            GroupParams { weight: 0.6, alpha: 0.5, beta: 0.9 },
            GroupParams { weight: 0.04, alpha: 0.2, beta: 1.0 },
        ];
        let ts = simulate(&spec, &truth, 1.0, 1.5, 15.0, 300, 3);
        let fit = fit_mean_corrected(&ts, &EmConfig::new(Variant::MeanCorrected)).unwrap();
        for (k, g) in spec.groups().iter().enumerate() {
            let r = regress_location(&ts, &g.id).unwrap();
            let p = fit.model.params()[k];
            assert!((p.alpha - r.intercept).abs() < 1e-6);
            assert!((p.beta - r.slope).abs() < 1e-6);
        }
    }

    #[test]
    fn single_component_recovery() {
        let spec = GroupSpec::two_group();
        let truth = [
            GroupParams { weight: 1.0, alpha: 0.5, beta: 0.9 },
            GroupParams { weight: 0.0, alpha: 0.2, beta: 1.0 },
        ];
        let ts = simulate(&spec, &truth, 1.0, 1.5, 0.0, 2000, 8);
        let fit = fit_naive(&ts, &EmConfig::new(Variant::Naive)).unwrap();
        let w = fit.model.params();
        assert!((w[0].weight - 1.0).abs() < 0.02, "{:?}", w);

        let truth = [
            GroupParams { weight: 0.0, alpha: 0.5, beta: 0.9 },
            GroupParams { weight: 0.1, alpha: 0.2, beta: 1.0 },
        ];
        let ts = simulate(&spec, &truth, 1.0, 1.5, 0.0, 2000, 9);
        let fit = fit_naive(&ts, &EmConfig::new(Variant::Naive)).unwrap();
        assert!((fit.model.params()[1].weight - 0.1).abs() < 0.02, "{:?}", fit.model.params());
    }

    #[test]
    fn full_ml_truncation_free_matches_ols() {
        let spec = GroupSpec::new([("only", 1)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (mut f, mut x) = (Vec::new(), Vec::new());
        for _ in 0..2000 {
            let v: f64 = rng.random_range(15.0..30.0);
            let e: f64 = StandardNormal.sample(&mut rng);
            f.push(v);
            x.push(1.2 + 0.85 * v + 0.9 * e);
        }
        let ts = TrainingSet::from_matrix(spec, f.clone(), x.clone()).unwrap();
        let lf = ols(f.iter().copied().zip(x.iter().copied())).unwrap();
        let resid = (f.iter().zip(&x).map(|(a, b)| (b - lf.intercept - lf.slope * a).powi(2)).sum::<f64>()
            / f.len() as f64)
            .sqrt();
        let cfg = EmConfig { tol: 1e-14, max_iters: 200_000, ..EmConfig::new(Variant::FullMl) };
        let fit = fit_full_ml(&ts, &cfg).unwrap();
        let p = fit.model.params()[0];
        assert!((p.alpha - lf.intercept).abs() < 1e-4, "{} vs {}", p.alpha, lf.intercept);
        assert!((p.beta - lf.slope).abs() < 1e-4);
        assert!((fit.model.sigma() / resid - 1.0).abs() < 0.01);
    }

    #[test]
    fn full_ml_recovers_two_group_truth() {
        let spec = GroupSpec::two_group();
        let truth = [
            GroupParams { weight: 0.6, alpha: 0.5, beta: 0.9 },
            GroupParams { weight: 0.04, alpha: 0.2, beta: 1.0 },
        ];
        let ts = simulate(&spec, &truth, 1.0, 1.5, 0.0, 5000, 2024);
        let fit = fit_full_ml(&ts, &EmConfig::new(Variant::FullMl)).unwrap();
        assert!((fit.model.sigma() - 1.0).abs() < 0.05);
        for (p, t) in fit.model.params().iter().zip(&truth) {
            assert!((p.weight - t.weight).abs() < 0.05);
        }
        assert!(fit.diagnostics.final_log_likelihood >= fit.diagnostics.initial_log_likelihood);
    }

    #[test]
    fn anchored_full_ml_runs_and_flags() {
        let spec = GroupSpec::two_group();
        let truth = [
            GroupParams { weight: 0.6, alpha: 0.5, beta: 0.9 },
            GroupParams { weight: 0.04, alpha: 0.2, beta: 1.0 },
        ];
        let ts = simulate(&spec, &truth, 1.0, 1.5, 0.0, 400, 9);
        let cfg = EmConfig { location_update: LocationUpdate::RegressionAnchored, ..EmConfig::new(Variant::FullMl) };
        let fit = fit(&ts, &cfg).unwrap();
        assert!(fit.model.sigma() > 0.0);
        let kv = fit.diagnostics.to_kv_string();
        assert!(kv.contains("location_update=regression-anchored"));
        assert!(kv.contains("variant=full-ml"));
    }

    #[test]
    fn degenerate_inputs_are_flagged() {
        let spec = pair_spec();
        // group b always forecasts zero: singular regression and Σ z f² = 0
        let rows: Vec<(&[f64], f64)> = vec![
            (&[1.0, 0.0], 1.2),
            (&[2.0, 0.0], 2.1),
            (&[3.0, 0.0], 2.7),
            (&[4.0, 0.0], 4.4),
        ];
        let ts = set(spec, &rows);
        let fit = fit_full_ml(&ts, &EmConfig::new(Variant::FullMl)).unwrap();
        assert_eq!(fit.diagnostics.singular_regression, vec!["b".to_string()]);
        assert!(fit.diagnostics.degenerate_updates.contains(&"b".to_string()));
        let total: f64 = fit.model.params().iter().map(|p| p.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigma_floor() {
        let spec = GroupSpec::new([("only", 1)]).unwrap();
        let rows: Vec<(&[f64], f64)> = vec![(&[1.0], 1.0), (&[2.0], 2.0), (&[3.0], 3.0)];
        let ts = set(spec, &rows);
        let cfg = EmConfig { min_sigma: 1e-3, ..EmConfig::new(Variant::Naive) };
        let fit = fit_naive(&ts, &cfg).unwrap();
        assert_eq!(fit.model.sigma(), 1e-3);
        assert!(fit.diagnostics.sigma_floor_hit);
    }

    #[test]
    fn diagnostics_kv() {
        let spec = GroupSpec::two_group();
        let truth = [
            GroupParams { weight: 0.6, alpha: 0.5, beta: 0.9 },
            GroupParams { weight: 0.04, alpha: 0.2, beta: 1.0 },
        ];
        let ts = simulate(&spec, &truth, 1.0, 1.5, 0.0, 200, 1);
        let fit = fit_naive(&ts, &EmConfig::new(Variant::Naive)).unwrap();
        let kv = fit.diagnostics.to_kv_string();
        for key in ["variant=naive", "iterations=", "converged=true", "final_log_likelihood=", "degenerate_updates="] {
            assert!(kv.contains(key), "{key} missing from\n{kv}");
        }
        assert!(!kv.contains("location_update"));
    }
}
