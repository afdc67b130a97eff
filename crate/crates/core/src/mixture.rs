//! Bayesian-model-averaging mixtures of zero-truncated normals over groups of
//! exchangeable ensemble members.

use std::fmt::Write as _;
use std::path::Path;

use chrono::NaiveDate;

use crate::error::{Error, Result};
use crate::truncnorm::TruncatedNormal;

/// Tolerance on Σ M_k ω_k = 1.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-10;

const QUANTILE_MAX_ITERS: usize = 200;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub id: String,
    pub members: usize,
}

/// Ordered layout of exchangeable member groups. Member `i` of an ensemble
/// belongs to the group whose column block contains `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSpec {
    groups: Vec<Group>,
    member_group: Vec<usize>,
}

impl GroupSpec {
    pub fn new<S: Into<String>>(groups: impl IntoIterator<Item = (S, usize)>) -> Result<Self> {
        let groups: Vec<Group> = groups
            .into_iter()
            .map(|(id, members)| Group {
                id: id.into(),
                members,
            })
            .collect();
        if groups.is_empty() {
            return Err(Error::InvalidParameter("group spec has no groups".into()));
        }
        for (k, g) in groups.iter().enumerate() {
            if g.members == 0 {
                return Err(Error::InvalidParameter(format!("group `{}` has no members", g.id)));
            }
            if g.id.is_empty() || g.id.contains(|c: char| c == '.' || c == ',' || c == ':' || c == '=' || c.is_whitespace()) {
                return Err(Error::InvalidParameter(format!("invalid group label `{}`", g.id)));
            }
            if groups[..k].iter().any(|h| h.id == g.id) {
                return Err(Error::InvalidParameter(format!("duplicate group label `{}`", g.id)));
            }
        }
        let member_group = groups
            .iter()
            .enumerate()
            .flat_map(|(k, g)| std::iter::repeat_n(k, g.members))
            .collect();
        Ok(Self {
            groups,
            member_group,
        })
    }

    /// Control member plus ten exchangeable perturbed members.
    pub fn two_group() -> Self {
        Self::new([("control", 1), ("perturbed", 10)]).expect("valid preset")
    }

    /// Control member plus the odd- and even-numbered perturbed members as
    /// separate groups.
    pub fn three_group() -> Self {
        Self::new([("control", 1), ("odd", 5), ("even", 5)]).expect("valid preset")
    }

    /// Parse `id:count,id:count,...`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut groups = Vec::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (id, count) = part
                .split_once(':')
                .ok_or_else(|| Error::InvalidParameter(format!("group entry `{part}` is not id:count")))?;
            let count: usize = count
                .trim()
                .parse()
                .map_err(|_| Error::InvalidParameter(format!("bad member count in `{part}`")))?;
            groups.push((id.trim().to_string(), count));
        }
        Self::new(groups)
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    /// Total ensemble size M.
    pub fn total_members(&self) -> usize {
        self.member_group.len()
    }

    pub fn group_of(&self, member: usize) -> usize {
        self.member_group[member]
    }

    pub fn member_groups(&self) -> &[usize] {
        &self.member_group
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.id == id)
    }

    /// Member column labels `<group>.<idx>` with 1-based indices.
    pub fn member_labels(&self) -> Vec<String> {
        self.groups
            .iter()
            .flat_map(|g| (1..=g.members).map(move |i| format!("{}.{}", g.id, i)))
            .collect()
    }
}

impl std::fmt::Display for GroupSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.groups.iter().map(|g| format!("{}:{}", g.id, g.members)).collect();
        f.write_str(&parts.join(","))
    }
}

/// Per-group weight (carried by each member of the group), intercept and slope.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupParams {
    pub weight: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BmaModel {
    spec: GroupSpec,
    params: Vec<GroupParams>,
    sigma: f64,
}

impl BmaModel {
    pub fn new(spec: GroupSpec, params: Vec<GroupParams>, sigma: f64) -> Result<Self> {
        if params.len() != spec.group_count() {
            return Err(Error::LayoutMismatch(format!(
                "{} parameter sets for {} groups",
                params.len(),
                spec.group_count()
            )));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
        }
        for (g, p) in spec.groups().iter().zip(&params) {
            if !(p.weight >= 0.0 && p.weight.is_finite()) {
                return Err(Error::InvalidParameter(format!("weight of `{}` is {}", g.id, p.weight)));
            }
            if !p.alpha.is_finite() || !p.beta.is_finite() {
                return Err(Error::InvalidParameter(format!("non-finite coefficients for `{}`", g.id)));
            }
        }
        let total: f64 = spec
            .groups()
            .iter()
            .zip(&params)
            .map(|(g, p)| g.members as f64 * p.weight)
            .sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::InvalidParameter(format!(
                "member weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { spec, params, sigma })
    }

    /// Like [`new`](Self::new) but rescales the weights so that Σ M_k ω_k = 1.
    pub fn normalized(spec: GroupSpec, mut params: Vec<GroupParams>, sigma: f64) -> Result<Self> {
        let total: f64 = spec
            .groups()
            .iter()
            .zip(&params)
            .map(|(g, p)| g.members as f64 * p.weight)
            .sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::InvalidParameter(format!("cannot normalize weight total {total}")));
        }
        for p in &mut params {
            p.weight /= total;
        }
        Self::new(spec, params, sigma)
    }

    pub fn spec(&self) -> &GroupSpec {
        &self.spec
    }

    pub fn params(&self) -> &[GroupParams] {
        &self.params
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Location α_k + β_k f of member `member` given its forecast.
    pub fn location(&self, member: usize, forecast: f64) -> f64 {
        let p = &self.params[self.spec.group_of(member)];
        p.alpha + p.beta * forecast
    }

    /// Predictive distribution for a complete case.
    pub fn predictive(&self, case: &ForecastCase) -> Result<Predictive> {
        self.check_layout(case)?;
        let missing = case.missing_members();
        if missing > 0 {
            return Err(Error::MissingMembers {
                station: case.station.clone(),
                date: case.date.to_string(),
                missing,
            });
        }
        Ok(self.build_predictive(case))
    }

    /// Predictive distribution that drops missing members and rescales the
    /// remaining weights to sum to one. The flag reports whether any
    /// renormalization took place.
    pub fn predictive_renormalized(&self, case: &ForecastCase) -> Result<(Predictive, bool)> {
        self.check_layout(case)?;
        if case.members.iter().all(Option::is_none) {
            return Err(Error::MissingMembers {
                station: case.station.clone(),
                date: case.date.to_string(),
                missing: case.members.len(),
            });
        }
        let renormalized = case.missing_members() > 0;
        Ok((self.build_predictive(case), renormalized))
    }

    /// Predictive for member forecasts already laid out in spec order.
    pub fn predictive_from_members(&self, members: &[f64]) -> Result<Predictive> {
        if members.len() != self.spec.total_members() {
            return Err(Error::LayoutMismatch(format!(
                "{} member values for an ensemble of {}",
                members.len(),
                self.spec.total_members()
            )));
        }
        let opts: Vec<Option<f64>> = members.iter().copied().map(Some).collect();
        Ok(self.components_for(&opts))
    }

    fn check_layout(&self, case: &ForecastCase) -> Result<()> {
        if case.members.len() != self.spec.total_members() {
            return Err(Error::LayoutMismatch(format!(
                "case {}/{} has {} members, model expects {}",
                case.station,
                case.date,
                case.members.len(),
                self.spec.total_members()
            )));
        }
        Ok(())
    }

    fn build_predictive(&self, case: &ForecastCase) -> Predictive {
        self.components_for(&case.members)
    }

    fn components_for(&self, members: &[Option<f64>]) -> Predictive {
        let mut components: Vec<Component> = Vec::with_capacity(members.len());
        let mut offset = 0;
        for (g, p) in self.spec.groups().iter().zip(&self.params) {
            let start = components.len();
            for f in members[offset..offset + g.members].iter().flatten() {
                components.push(Component {
                    weight: p.weight,
                    location: p.alpha + p.beta * f,
                });
            }
            // Canonical order inside a group makes every sum invariant under
            // permutations of exchangeable members.
            components[start..].sort_by(|a, b| a.location.total_cmp(&b.location));
            offset += g.members;
        }
        if members.iter().any(Option::is_none) {
            let total: f64 = components.iter().map(|c| c.weight).sum();
            for c in &mut components {
                c.weight /= total;
            }
        }
        Predictive {
            components,
            sigma: self.sigma,
        }
    }

    pub fn predictive_pdf(&self, case: &ForecastCase, x: f64) -> Result<f64> {
        Ok(self.predictive(case)?.pdf(x))
    }

    pub fn predictive_cdf(&self, case: &ForecastCase, x: f64) -> Result<f64> {
        Ok(self.predictive(case)?.cdf(x))
    }

    pub fn predictive_quantile(&self, case: &ForecastCase, p: f64) -> Result<f64> {
        self.predictive(case)?.quantile(p)
    }

    pub fn central_interval(&self, case: &ForecastCase, level: f64) -> Result<(f64, f64)> {
        self.predictive(case)?.central_interval(level)
    }

    /// Serialize as `key=value` lines with 17 significant digits.
    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        for (g, p) in self.spec.groups().iter().zip(&self.params) {
            let _ = writeln!(out, "group.{}.members={}", g.id, g.members);
            let _ = writeln!(out, "group.{}.weight={:.16e}", g.id, p.weight);
            let _ = writeln!(out, "group.{}.alpha={:.16e}", g.id, p.alpha);
            let _ = writeln!(out, "group.{}.beta={:.16e}", g.id, p.beta);
        }
        let _ = writeln!(out, "sigma={:.16e}", self.sigma);
        out
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Parse {
            path: "<model>".into(),
            line,
            message,
        };
        let mut order: Vec<String> = Vec::new();
        let mut members: Vec<Option<usize>> = Vec::new();
        let mut params: Vec<[Option<f64>; 3]> = Vec::new();
        let mut sigma = None;
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(line_no, format!("expected key=value, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "sigma" {
                sigma = Some(parse_f64(value).ok_or_else(|| bad(line_no, format!("bad number `{value}`")))?);
                continue;
            }
            let rest = key
                .strip_prefix("group.")
                .ok_or_else(|| bad(line_no, format!("unknown key `{key}`")))?;
            let (id, field) = rest
                .rsplit_once('.')
                .ok_or_else(|| bad(line_no, format!("malformed key `{key}`")))?;
            let k = match order.iter().position(|o| o == id) {
                Some(k) => k,
                None => {
                    order.push(id.to_string());
                    members.push(None);
                    params.push([None; 3]);
                    order.len() - 1
                }
            };
            match field {
                "members" => {
                    members[k] = Some(
                        value
                            .parse()
                            .map_err(|_| bad(line_no, format!("bad member count `{value}`")))?,
                    )
                }
                "weight" | "alpha" | "beta" => {
                    let slot = ["weight", "alpha", "beta"].iter().position(|f| *f == field).unwrap();
                    params[k][slot] =
                        Some(parse_f64(value).ok_or_else(|| bad(line_no, format!("bad number `{value}`")))?);
                }
                other => return Err(bad(line_no, format!("unknown field `{other}`"))),
            }
        }
        let mut groups = Vec::new();
        let mut gp = Vec::new();
        for ((id, m), p) in order.iter().zip(members).zip(params) {
            let m = m.ok_or_else(|| bad(0, format!("group `{id}` lacks a member count")))?;
            groups.push((id.clone(), m));
            match p {
                [Some(weight), Some(alpha), Some(beta)] => gp.push(GroupParams { weight, alpha, beta }),
                _ => return Err(bad(0, format!("group `{id}` lacks weight/alpha/beta"))),
            }
        }
        let sigma = sigma.ok_or_else(|| bad(0, "missing sigma".into()))?;
        Self::new(GroupSpec::new(groups)?, gp, sigma)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv_str(&text).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                message,
            },
            other => other,
        })
    }
}

fn parse_f64(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// One (station, date) record. `members` follows the [`GroupSpec`] column
/// order; `None` marks a missing member.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastCase {
    pub station: String,
    pub date: NaiveDate,
    pub members: Vec<Option<f64>>,
    pub observation: Option<f64>,
}

impl ForecastCase {
    pub fn complete(station: impl Into<String>, date: NaiveDate, members: &[f64], observation: f64) -> Self {
        Self {
            station: station.into(),
            date,
            members: members.iter().copied().map(Some).collect(),
            observation: Some(observation),
        }
    }

    pub fn missing_members(&self) -> usize {
        self.members.iter().filter(|m| m.is_none()).count()
    }

    pub fn has_full_ensemble(&self) -> bool {
        self.missing_members() == 0
    }

    /// Member values if none is missing.
    pub fn member_values(&self) -> Option<Vec<f64>> {
        self.members.iter().copied().collect()
    }

    pub fn present_members(&self) -> Vec<f64> {
        self.members.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub location: f64,
}

/// Fully specified predictive mixture for one case: Σ_i w_i g(x | μ_i, σ).
#[derive(Debug, Clone, PartialEq)]
pub struct Predictive {
    components: Vec<Component>,
    sigma: f64,
}

impl Predictive {
    pub fn new(components: Vec<Component>, sigma: f64) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Empty("mixture components"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if components.iter().any(|c| c.weight < 0.0 || !c.location.is_finite())
            || (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE
        {
            return Err(Error::InvalidParameter("mixture weights must be a probability vector".into()));
        }
        Ok(Self { components, sigma })
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    fn kernel(&self, c: &Component) -> TruncatedNormal {
        TruncatedNormal::new(c.location, self.sigma).expect("validated parameters")
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if x < 0.0 {
            return 0.0;
        }
        self.components
            .iter()
            .map(|c| c.weight * self.kernel(c).pdf(x))
            .sum()
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if x < 0.0 {
            return f64::NEG_INFINITY;
        }
        let terms: Vec<f64> = self
            .components
            .iter()
            .filter(|c| c.weight > 0.0)
            .map(|c| c.weight.ln() + self.kernel(c).ln_pdf(x))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let v: f64 = self
            .components
            .iter()
            .map(|c| c.weight * self.kernel(c).cdf(x))
            .sum();
        v.clamp(0.0, 1.0)
    }

    /// Upper end of the bisection bracket: max location + 12σ (at least 12σ).
    pub fn upper_bracket(&self) -> f64 {
        let top = self
            .components
            .iter()
            .map(|c| c.location)
            .fold(f64::NEG_INFINITY, f64::max);
        top.max(0.0) + 12.0 * self.sigma
    }

    /// Quantile by bisection on the monotone mixture CDF.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::ProbabilityOutOfRange(p));
        }
        let (mut lo, mut hi) = (0.0, self.upper_bracket());
        while self.cdf(hi) < p {
            hi *= 2.0;
        }
        for _ in 0..QUANTILE_MAX_ITERS {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi || hi - lo <= 1e-14 * hi.max(1e-300) {
                break;
            }
            if self.cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    pub fn median(&self) -> f64 {
        self.quantile(0.5).expect("0.5 is a valid probability")
    }

    pub fn central_interval(&self, level: f64) -> Result<(f64, f64)> {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::InvalidParameter(format!("interval level {level} outside (0,1)")));
        }
        let tail = 0.5 * (1.0 - level);
        Ok((self.quantile(tail)?, self.quantile(1.0 - tail)?))
    }

    /// Mean of the mixture.
    pub fn mean(&self) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * self.kernel(c).mean())
            .sum()
    }
}

pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}
