//! Calibration and sharpness diagnostics for BMA predictives and raw ensembles.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mixture::{BmaModel, ForecastCase, Predictive};
use crate::scoring::{crps_predictive, mae_rmse};

/// Default central-interval levels, in percent.
pub const DEFAULT_LEVELS: [f64; 2] = [66.7, 90.0];

/// Probability integral transform values, one per verification case.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PitSample {
    values: Vec<f64>,
}

impl PitSample {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter(format!("PIT value {v} outside [0, 1]")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Counts over `bins` equal-width bins of [0, 1]; 1.0 falls in the last bin.
    pub fn histogram(&self, bins: usize) -> Vec<usize> {
        let mut counts = vec![0; bins.max(1)];
        let b = counts.len();
        for &v in &self.values {
            counts[((v * b as f64) as usize).min(b - 1)] += 1;
        }
        counts
    }

    /// Mean |u₍ᵢ₎ − i/(n+1)| between sorted values and uniform plotting positions.
    pub fn uniform_discrepancy(&self) -> f64 {
        let mut v = self.values.clone();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        v.iter()
            .enumerate()
            .map(|(i, u)| (u - (i + 1) as f64 / (n + 1.0)).abs())
            .sum::<f64>()
            / n
    }
}

/// Predictive CDF at the verifying observation.
pub fn pit(model: &BmaModel, case: &ForecastCase) -> Result<f64> {
    let x = observation_of(case)?;
    Ok(model.predictive(case)?.cdf(x))
}

fn observation_of(case: &ForecastCase) -> Result<f64> {
    case.observation.ok_or_else(|| Error::MissingObservation {
        station: case.station.clone(),
        date: case.date.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankHistogram {
    /// counts[r − 1] is the number of observations with rank r.
    pub counts: Vec<usize>,
    /// Cases skipped for missing members or observation.
    pub skipped: usize,
}

/// Rank of each observation among the M member values (1 = below all), with
/// ties broken uniformly at random from a generator seeded with `seed`.
pub fn rank_histogram(cases: &[ForecastCase], members: usize, seed: u64) -> RankHistogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0; members + 1];
    let mut skipped = 0;
    for case in cases {
        let (Some(values), Some(x)) = (case.member_values(), case.observation) else {
            skipped += 1;
            continue;
        };
        if values.len() != members {
            skipped += 1;
            continue;
        }
        let below = values.iter().filter(|&&v| v < x).count();
        let ties = values.iter().filter(|&&v| v == x).count();
        let rank = below + if ties > 0 { rng.random_range(0..=ties) } else { 0 };
        counts[rank] += 1;
    }
    RankHistogram { counts, skipped }
}

/// Percentage of complete cases whose observation lies within the ensemble range.
pub fn ensemble_containment(cases: &[ForecastCase]) -> Result<f64> {
    let mut total = 0usize;
    let mut inside = 0usize;
    for case in cases {
        let (Some(values), Some(x)) = (case.member_values(), case.observation) else {
            continue;
        };
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        total += 1;
        if lo <= x && x <= hi {
            inside += 1;
        }
    }
    if total == 0 {
        return Err(Error::Empty("complete cases"));
    }
    Ok(100.0 * inside as f64 / total as f64)
}

/// Nominal containment (M − 1)/(M + 1) of an M-member ensemble, in percent.
pub fn nominal_containment(members: usize) -> f64 {
    100.0 * (members as f64 - 1.0) / (members as f64 + 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsTest {
    pub statistic: f64,
    pub p_value: f64,
}

/// One-sample Kolmogorov–Smirnov test against Uniform(0, 1) with the
/// asymptotic p-value Q(√n·D).
pub fn ks_uniform_test(sample: &PitSample) -> Result<KsTest> {
    if sample.is_empty() {
        return Err(Error::Empty("PIT sample"));
    }
    let mut v = sample.values.clone();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let statistic = v
        .iter()
        .enumerate()
        .map(|(i, &u)| ((i + 1) as f64 / n - u).max(u - i as f64 / n))
        .fold(0.0, f64::max);
    Ok(KsTest {
        statistic,
        p_value: kolmogorov_survival(n.sqrt() * statistic),
    })
}

/// Q(λ) = P(K > λ) for the Kolmogorov distribution.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.0 {
        // Jacobi-transformed series, fast for small λ
        let c = std::f64::consts::PI * std::f64::consts::PI / (8.0 * lambda * lambda);
        let mut sum = 0.0;
        for k in 1..=100 {
            let j = (2 * k - 1) as f64;
            let term = (-j * j * c).exp();
            sum += term;
            if term < 1e-12 {
                break;
            }
        }
        return (1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * sum).clamp(0.0, 1.0);
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-12 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Sample quantile by Hyndman and Fan's Definition 7: h = (n − 1)p + 1,
/// linear interpolation between the ⌊h⌋-th and (⌊h⌋+1)-th order statistics.
pub fn hyndman_fan_quantile(sample: &[f64], p: f64) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::Empty("quantile sample"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::ProbabilityOutOfRange(p));
    }
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(sorted_quantile(&v, p))
}

fn sorted_quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p + 1.0;
    let lo = h.floor() as usize;
    if lo >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[lo - 1] + (h - lo as f64) * (sorted[lo] - sorted[lo - 1])
}

/// CRPS of the empirical CDF of `members` at `x`: E|X − x| − ½E|X − X′|.
pub fn crps_raw_ensemble(members: &[f64], x: f64) -> Result<f64> {
    if members.is_empty() {
        return Err(Error::Empty("ensemble members"));
    }
    let mut v = members.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let first = v.iter().map(|m| (m - x).abs()).sum::<f64>() / n;
    // Σᵢ Σⱼ |vᵢ − vⱼ| = 2 Σᵢ (2i − n − 1) v₍ᵢ₎ over the sorted sample
    let pairs: f64 = v
        .iter()
        .enumerate()
        .map(|(i, m)| (2.0 * (i + 1) as f64 - n - 1.0) * m)
        .sum::<f64>()
        * 2.0;
    Ok(first - 0.5 * pairs / (n * n))
}

/// Central interval of the raw ensemble from Definition-7 quantiles.
pub fn ensemble_interval(members: &[f64], level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!("interval level {level} outside (0,1)")));
    }
    let tail = 0.5 * (1.0 - level);
    Ok((hyndman_fan_quantile(members, tail)?, hyndman_fan_quantile(members, 1.0 - tail)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalScore {
    /// Nominal level in percent.
    pub level: f64,
    pub coverage: f64,
    pub average_width: f64,
}

/// Coverage (percent, bounds inclusive) and average width of central intervals.
pub fn interval_scores(intervals: &[(f64, f64)], observations: &[f64], level: f64) -> Result<IntervalScore> {
    if intervals.len() != observations.len() {
        return Err(Error::LengthMismatch {
            left: intervals.len(),
            right: observations.len(),
        });
    }
    if intervals.is_empty() {
        return Err(Error::Empty("intervals"));
    }
    let n = intervals.len() as f64;
    let inside = intervals
        .iter()
        .zip(observations)
        .filter(|((lo, hi), x)| lo <= *x && *x <= hi)
        .count();
    Ok(IntervalScore {
        level,
        coverage: 100.0 * inside as f64 / n,
        average_width: intervals.iter().map(|(lo, hi)| hi - lo).sum::<f64>() / n,
    })
}

/// Per-case ingredients of a [`VerificationReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct CaseScore {
    pub observation: f64,
    pub crps: f64,
    /// Median point forecast.
    pub median: f64,
    /// One central interval per requested level.
    pub intervals: Vec<(f64, f64)>,
    pub pit: Option<f64>,
    pub renormalized: bool,
}

/// Levels in percent.
pub fn score_predictive(pred: &Predictive, x: f64, levels: &[f64]) -> Result<CaseScore> {
    let intervals = levels
        .iter()
        .map(|l| pred.central_interval(l / 100.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(CaseScore {
        observation: x,
        crps: crps_predictive(pred, x)?,
        median: pred.median(),
        intervals,
        pit: Some(pred.cdf(x)),
        renormalized: false,
    })
}

pub fn score_ensemble(members: &[f64], x: f64, levels: &[f64]) -> Result<CaseScore> {
    let intervals = levels
        .iter()
        .map(|l| ensemble_interval(members, l / 100.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(CaseScore {
        observation: x,
        crps: crps_raw_ensemble(members, x)?,
        median: hyndman_fan_quantile(members, 0.5)?,
        intervals,
        pit: None,
        renormalized: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub label: String,
    pub case_count: usize,
    pub mean_crps: f64,
    pub mae: f64,
    pub rmse: f64,
    pub intervals: Vec<IntervalScore>,
    pub ks: Option<KsTest>,
    pub pit: PitSample,
    pub renormalized_cases: usize,
}

pub fn assemble_report(label: &str, levels: &[f64], scores: &[CaseScore]) -> Result<VerificationReport> {
    if scores.is_empty() {
        return Err(Error::Empty("verification cases"));
    }
    let n = scores.len();
    let obs: Vec<f64> = scores.iter().map(|s| s.observation).collect();
    let medians: Vec<f64> = scores.iter().map(|s| s.median).collect();
    let (mae, rmse) = mae_rmse(&medians, &obs)?;
    let mut intervals = Vec::with_capacity(levels.len());
    for (j, &level) in levels.iter().enumerate() {
        let iv: Vec<(f64, f64)> = scores
            .iter()
            .map(|s| s.intervals.get(j).copied().ok_or(Error::LengthMismatch {
                left: s.intervals.len(),
                right: levels.len(),
            }))
            .collect::<Result<_>>()?;
        intervals.push(interval_scores(&iv, &obs, level)?);
    }
    let pit_values: Vec<f64> = scores.iter().filter_map(|s| s.pit).collect();
    let pit = PitSample::new(pit_values)?;
    let ks = if pit.is_empty() { None } else { Some(ks_uniform_test(&pit)?) };
    Ok(VerificationReport {
        label: label.to_string(),
        case_count: n,
        mean_crps: scores.iter().map(|s| s.crps).sum::<f64>() / n as f64,
        mae,
        rmse,
        intervals,
        ks,
        pit,
        renormalized_cases: scores.iter().filter(|s| s.renormalized).count(),
    })
}

/// `%g`-style rendering with six significant digits.
pub fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let s = format!("{v:.5e}");
        let (mantissa, e) = s.split_once('e').expect("exponent form");
        let mantissa = if mantissa.contains('.') {
            mantissa.trim_end_matches('0').trim_end_matches('.')
        } else {
            mantissa
        };
        format!("{mantissa}e{e}")
    }
}

fn level_label(level: f64) -> String {
    sig6(level)
}

/// Score table: one column per report.
pub fn render_table(reports: &[VerificationReport]) -> String {
    let mut rows: Vec<(String, Vec<String>)> = vec![
        ("cases".into(), reports.iter().map(|r| r.case_count.to_string()).collect()),
        ("mean CRPS".into(), reports.iter().map(|r| sig6(r.mean_crps)).collect()),
        ("MAE".into(), reports.iter().map(|r| sig6(r.mae)).collect()),
        ("RMSE".into(), reports.iter().map(|r| sig6(r.rmse)).collect()),
    ];
    if let Some(first) = reports.first() {
        for (j, iv) in first.intervals.iter().enumerate() {
            let l = level_label(iv.level);
            rows.push((
                format!("width {l}%"),
                reports.iter().map(|r| sig6(r.intervals[j].average_width)).collect(),
            ));
            rows.push((
                format!("coverage {l}%"),
                reports.iter().map(|r| sig6(r.intervals[j].coverage)).collect(),
            ));
        }
    }
    rows.push((
        "KS statistic".into(),
        reports.iter().map(|r| r.ks.map_or("-".into(), |k| sig6(k.statistic))).collect(),
    ));
    rows.push((
        "KS p-value".into(),
        reports.iter().map(|r| r.ks.map_or("-".into(), |k| sig6(k.p_value))).collect(),
    ));
    rows.push((
        "renormalized".into(),
        reports.iter().map(|r| r.renormalized_cases.to_string()).collect(),
    ));
    let head_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    let col_w: Vec<usize> = reports
        .iter()
        .enumerate()
        .map(|(j, r)| rows.iter().map(|row| row.1[j].len()).max().unwrap_or(0).max(r.label.len()))
        .collect();
    let mut out = String::new();
    let _ = write!(out, "{:head_w$}", "");
    for (r, w) in reports.iter().zip(&col_w) {
        let _ = write!(out, "  {:>w$}", r.label);
    }
    out.push('\n');
    for (name, cells) in &rows {
        let _ = write!(out, "{name:head_w$}");
        for (c, w) in cells.iter().zip(&col_w) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
    }
    out
}

/// Machine-readable report: `forecast,metric,value`, one row per metric.
pub fn render_csv(reports: &[VerificationReport]) -> String {
    let mut out = String::from("forecast,metric,value\n");
    for r in reports {
        let mut row = |metric: &str, value: String| {
            let _ = writeln!(out, "{},{},{}", r.label, metric, value);
        };
        row("cases", r.case_count.to_string());
        row("mean_crps", sig6(r.mean_crps));
        row("mae", sig6(r.mae));
        row("rmse", sig6(r.rmse));
        for iv in &r.intervals {
            let l = level_label(iv.level);
            row(&format!("width_{l}"), sig6(iv.average_width));
            row(&format!("coverage_{l}"), sig6(iv.coverage));
        }
        if let Some(ks) = r.ks {
            row("ks_statistic", sig6(ks.statistic));
            row("ks_p_value", sig6(ks.p_value));
        }
        row("renormalized_cases", r.renormalized_cases.to_string());
    }
    out
}

/// Bin table `bin_lower,bin_upper,<label>...` of PIT histograms.
pub fn render_pit_histograms(reports: &[VerificationReport], bins: usize) -> String {
    let with_pit: Vec<&VerificationReport> = reports.iter().filter(|r| !r.pit.is_empty()).collect();
    let hists: Vec<Vec<usize>> = with_pit.iter().map(|r| r.pit.histogram(bins)).collect();
    let mut out = String::from("bin_lower,bin_upper");
    for r in &with_pit {
        out.push(',');
        out.push_str(&r.label);
    }
    out.push('\n');
    for b in 0..bins {
        let _ = write!(out, "{},{}", sig6(b as f64 / bins as f64), sig6((b + 1) as f64 / bins as f64));
        for h in &hists {
            let _ = write!(out, ",{}", h[b]);
        }
        out.push('\n');
    }
    out
}

pub fn render_rank_histogram(hist: &RankHistogram) -> String {
    let mut out = String::from("rank,count\n");
    for (r, c) in hist.counts.iter().enumerate() {
        let _ = writeln!(out, "{},{}", r + 1, c);
    }
    let _ = writeln!(out, "skipped,{}", hist.skipped);
    out
}
