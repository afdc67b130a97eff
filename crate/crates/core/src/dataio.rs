//! Archive CSV ingestion, sliding training windows, the missing-data policy and
//! a synthetic archive generator.
//!
//! Archive schema: header `station,date,<group>.<idx>...,obs`, one row per
//! (station, date), ISO dates, dot decimals, empty field = missing.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::mixture::{BmaModel, ForecastCase, GroupParams, GroupSpec};
use crate::truncnorm::TruncatedNormal;

const DATE_FORMAT: &str = "%Y-%m-%d";

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    spec: GroupSpec,
    cases: Vec<ForecastCase>,
}

impl Archive {
    pub fn new(spec: GroupSpec, cases: Vec<ForecastCase>) -> Result<Self> {
        let mut seen = HashSet::new();
        for c in &cases {
            if c.members.len() != spec.total_members() {
                return Err(Error::LayoutMismatch(format!(
                    "case {}/{} has {} members, spec has {}",
                    c.station,
                    c.date,
                    c.members.len(),
                    spec.total_members()
                )));
            }
            if !seen.insert((c.station.clone(), c.date)) {
                return Err(Error::DuplicateKey {
                    station: c.station.clone(),
                    date: c.date.to_string(),
                });
            }
        }
        Ok(Self { spec, cases })
    }

    pub fn spec(&self) -> &GroupSpec {
        &self.spec
    }

    pub fn cases(&self) -> &[ForecastCase] {
        &self.cases
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    /// Distinct dates in ascending order.
    pub fn dates(&self) -> Vec<NaiveDate> {
        let mut d: Vec<NaiveDate> = self.cases.iter().map(|c| c.date).collect();
        d.sort();
        d.dedup();
        d
    }

    pub fn date_range(&self) -> Option<(NaiveDate, NaiveDate)> {
        let first = self.cases.iter().map(|c| c.date).min()?;
        let last = self.cases.iter().map(|c| c.date).max()?;
        Some((first, last))
    }

    /// Cases of one date in station order.
    pub fn cases_on(&self, date: NaiveDate) -> Vec<&ForecastCase> {
        let mut v: Vec<&ForecastCase> = self.cases.iter().filter(|c| c.date == date).collect();
        v.sort_by(|a, b| a.station.cmp(&b.station));
        v
    }

    /// Training-usable cases dated in [date − days, date − 1], ordered by date then station.
    pub fn training_cases(&self, date: NaiveDate, days: usize) -> Vec<ForecastCase> {
        let start = date - Days::new(days as u64);
        let mut window: Vec<ForecastCase> = self
            .cases
            .iter()
            .filter(|c| c.date >= start && c.date < date)
            .cloned()
            .collect();
        window.sort_by(|a, b| (a.date, &a.station).cmp(&(b.date, &b.station)));
        filter_complete(window).0
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        let mut header = vec!["station".to_string(), "date".to_string()];
        header.extend(self.spec.member_labels());
        header.push("obs".into());
        let cell = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        let rows = std::iter::once(header).chain(self.cases.iter().map(|c| {
            let mut row = vec![c.station.clone(), c.date.format(DATE_FORMAT).to_string()];
            row.extend(c.members.iter().map(|m| cell(*m)));
            row.push(cell(c.observation));
            row
        }));
        for row in rows {
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }
}

/// Parse an archive file. With `expected`, the header's groups must match it.
pub fn parse_archive(path: &Path, expected: Option<&GroupSpec>) -> Result<Archive> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_archive_str(&text, path, expected)
}

pub fn parse_archive_str(text: &str, path: &Path, expected: Option<&GroupSpec>) -> Result<Archive> {
    let bad = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = match records.next() {
        None => return Err(bad(1, "empty archive (no header)".into())),
        Some(r) => r.map_err(|e| bad(1, e.to_string()))?,
    };
    let spec = parse_header(&header).map_err(|m| bad(1, m))?;
    if let Some(exp) = expected {
        for g in spec.groups() {
            if exp.index_of(&g.id).is_none() {
                return Err(Error::UnknownGroup(g.id.clone()));
            }
        }
        if exp != &spec {
            return Err(Error::LayoutMismatch(format!("archive groups {spec} differ from requested {exp}")));
        }
    }
    let m = spec.total_members();
    let mut cases = Vec::new();
    let mut seen = HashSet::new();
    for record in records {
        let record = record.map_err(|e| bad(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line_no = record.position().map_or(0, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != m + 3 {
            return Err(bad(line_no, format!("expected {} fields, found {}", m + 3, record.len())));
        }
        let station = &record[0];
        if station.is_empty() {
            return Err(bad(line_no, "empty station id".into()));
        }
        let date = NaiveDate::parse_from_str(&record[1], DATE_FORMAT)
            .map_err(|_| bad(line_no, format!("bad date `{}`", &record[1])))?;
        let value = |s: &str| -> std::result::Result<Option<f64>, String> {
            if s.is_empty() {
                return Ok(None);
            }
            match s.parse::<f64>() {
                Ok(v) if v.is_finite() && v >= 0.0 => Ok(Some(v)),
                Ok(v) => Err(format!("value {v} is not a finite nonnegative number")),
                Err(_) => Err(format!("bad number `{s}`")),
            }
        };
        let members = (2..2 + m)
            .map(|i| value(&record[i]))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(line_no, e))?;
        let observation = value(&record[m + 2]).map_err(|e| bad(line_no, e))?;
        if !seen.insert((station.to_string(), date)) {
            return Err(Error::DuplicateKey {
                station: station.to_string(),
                date: date.to_string(),
            });
        }
        cases.push(ForecastCase {
            station: station.to_string(),
            date,
            members,
            observation,
        });
    }
    Archive::new(spec, cases)
}

fn parse_header(header: &csv::StringRecord) -> std::result::Result<GroupSpec, String> {
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 4 || cols[0] != "station" || cols[1] != "date" || cols[cols.len() - 1] != "obs" {
        return Err("header must be `station,date,<group>.<idx>...,obs`".into());
    }
    let mut groups: Vec<(String, usize)> = Vec::new();
    for col in &cols[2..cols.len() - 1] {
        let (id, idx) = col
            .rsplit_once('.')
            .ok_or_else(|| format!("member column `{col}` is not <group>.<idx>"))?;
        let idx: usize = idx.parse().map_err(|_| format!("bad member index in `{col}`"))?;
        match groups.last_mut() {
            Some((last, count)) if last == id => {
                if idx != *count + 1 {
                    return Err(format!("member column `{col}` out of order"));
                }
                *count += 1;
            }
            _ => {
                if groups.iter().any(|(g, _)| g == id) {
                    return Err(format!("columns of group `{id}` are not contiguous"));
                }
                if idx != 1 {
                    return Err(format!("group `{id}` must start at index 1"));
                }
                groups.push((id.to_string(), 1));
            }
        }
    }
    GroupSpec::new(groups).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SkipTally {
    pub incomplete_ensemble: usize,
    pub missing_observation: usize,
}

impl SkipTally {
    pub fn total(&self) -> usize {
        self.incomplete_ensemble + self.missing_observation
    }

    pub fn reasons(&self) -> [(&'static str, usize); 2] {
        [
            ("incomplete-ensemble", self.incomplete_ensemble),
            ("missing-observation", self.missing_observation),
        ]
    }
}

/// Split into training-usable cases (all members and observation present) and
/// a tally of the rest. A case missing both counts as incomplete-ensemble.
pub fn filter_complete(cases: Vec<ForecastCase>) -> (Vec<ForecastCase>, SkipTally) {
    let mut tally = SkipTally::default();
    let usable = cases
        .into_iter()
        .filter(|c| {
            if !c.has_full_ensemble() {
                tally.incomplete_ensemble += 1;
                false
            } else if c.observation.is_none() {
                tally.missing_observation += 1;
                false
            } else {
                true
            }
        })
        .collect();
    (usable, tally)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedDate {
    pub date: NaiveDate,
    pub training_cases: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    pub training_days: usize,
    pub dates: Vec<PlannedDate>,
    /// Candidate dates left out, with the reason.
    pub omitted: Vec<(NaiveDate, String)>,
    /// Why the plan is empty, when it is.
    pub note: Option<String>,
}

/// Verification dates whose full `training_days` calendar window lies inside
/// the archive and holds at least `min_cases` usable cases.
pub fn plan_windows(archive: &Archive, training_days: usize, min_cases: usize) -> WindowPlan {
    let mut plan = WindowPlan {
        training_days,
        dates: Vec::new(),
        omitted: Vec::new(),
        note: None,
    };
    let Some((first, last)) = archive.date_range() else {
        plan.note = Some("archive has no cases".into());
        return plan;
    };
    let span = (last - first).num_days() as usize + 1;
    if training_days == 0 {
        plan.note = Some("training length must be at least one day".into());
        return plan;
    }
    if span < training_days + 1 {
        plan.note = Some(format!(
            "archive spans {span} days, need at least {} for a {training_days}-day training window",
            training_days + 1
        ));
        return plan;
    }
    let earliest = first + Days::new(training_days as u64);
    for date in archive.dates().into_iter().filter(|d| *d >= earliest) {
        let n = archive.training_cases(date, training_days).len();
        if n >= min_cases.max(1) {
            plan.dates.push(PlannedDate {
                date,
                training_cases: n,
            });
        } else {
            plan.omitted.push((date, format!("{n} usable training cases, need {}", min_cases.max(1))));
        }
    }
    if plan.dates.is_empty() {
        plan.note = Some("no date has enough usable training data".into());
    }
    plan
}

/// Settings of the synthetic archive generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub stations: usize,
    pub days: usize,
    pub start: NaiveDate,
    pub spec: GroupSpec,
    /// Generating model: per-member weights, α, β and σ.
    pub truth: BmaModel,
    /// Member forecast = offset + scale·signal + member_noise·ε, per group.
    pub member_offset: Vec<f64>,
    pub member_scale: Vec<f64>,
    pub member_noise: f64,
    /// Gamma shape and scale of the latent signal.
    pub signal_shape: f64,
    pub signal_scale: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Ten stations over 176 days from 2010-10-01 with the default truth for `spec`.
    pub fn new(spec: GroupSpec, seed: u64) -> Self {
        let truth = default_truth(&spec);
        let g = spec.group_count();
        Self {
            stations: 10,
            days: 176,
            start: NaiveDate::from_ymd_opt(2010, 10, 1).expect("valid date"),
            spec,
            truth,
            member_offset: vec![0.0; g],
            member_scale: vec![1.0; g],
            member_noise: 0.577,
            signal_shape: 2.0,
            signal_scale: 2.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stations == 0 || self.days == 0 {
            return Err(Error::InvalidParameter("stations and days must be positive".into()));
        }
        if self.truth.spec() != &self.spec {
            return Err(Error::LayoutMismatch("truth model groups differ from spec".into()));
        }
        let g = self.spec.group_count();
        if self.member_offset.len() != g || self.member_scale.len() != g {
            return Err(Error::LayoutMismatch("member transforms must be given for every group".into()));
        }
        if !(self.member_noise >= 0.0 && self.member_noise.is_finite()) {
            return Err(Error::InvalidParameter(format!("member_noise {} must be >= 0", self.member_noise)));
        }
        if !(self.signal_shape > 0.0 && self.signal_scale > 0.0) {
            return Err(Error::InvalidParameter("signal shape and scale must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "stations={}", self.stations);
        let _ = writeln!(out, "days={}", self.days);
        let _ = writeln!(out, "start={}", self.start.format(DATE_FORMAT));
        let _ = writeln!(out, "groups={}", self.spec);
        for (k, g) in self.spec.groups().iter().enumerate() {
            let p = self.truth.params()[k];
            let _ = writeln!(out, "truth.{}.weight={}", g.id, p.weight);
            let _ = writeln!(out, "truth.{}.alpha={}", g.id, p.alpha);
            let _ = writeln!(out, "truth.{}.beta={}", g.id, p.beta);
            let _ = writeln!(out, "member.{}.offset={}", g.id, self.member_offset[k]);
            let _ = writeln!(out, "member.{}.scale={}", g.id, self.member_scale[k]);
        }
        let _ = writeln!(out, "sigma={}", self.truth.sigma());
        let _ = writeln!(out, "member_noise={}", self.member_noise);
        let _ = writeln!(out, "signal_shape={}", self.signal_shape);
        let _ = writeln!(out, "signal_scale={}", self.signal_scale);
        let _ = writeln!(out, "seed={}", self.seed);
        out
    }

    /// Parse `key=value` lines; unspecified keys keep the defaults of
    /// [`SynthConfig::new`] for the given (or default two-group) spec.
    pub fn from_kv_str(text: &str, path: &Path) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(n + 1, format!("expected key=value, got `{line}`")))?;
            entries.push((n + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let spec = match entries.iter().find(|e| e.1 == "groups") {
            Some((line, _, v)) => GroupSpec::parse(v).map_err(|e| bad(*line, e.to_string()))?,
            None => GroupSpec::two_group(),
        };
        let mut cfg = SynthConfig::new(spec.clone(), 0);
        let mut params: Vec<GroupParams> = cfg.truth.params().to_vec();
        let mut sigma = cfg.truth.sigma();
        for (line, key, value) in &entries {
            let line = *line;
            let num = || value.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad(line, format!("bad number `{value}`")));
            let int = || value.parse::<u64>().map_err(|_| bad(line, format!("bad integer `{value}`")));
            match key.as_str() {
                "groups" => {}
                "stations" => cfg.stations = int()? as usize,
                "days" => cfg.days = int()? as usize,
                "start" => {
                    cfg.start = NaiveDate::parse_from_str(value, DATE_FORMAT)
                        .map_err(|_| bad(line, format!("bad date `{value}`")))?
                }
                "sigma" => sigma = num()?,
                "member_noise" => cfg.member_noise = num()?,
                "signal_shape" => cfg.signal_shape = num()?,
                "signal_scale" => cfg.signal_scale = num()?,
                "seed" => cfg.seed = int()?,
                other => {
                    let (prefix, rest) = other
                        .split_once('.')
                        .ok_or_else(|| bad(line, format!("unknown key `{other}`")))?;
                    let (id, field) = rest
                        .rsplit_once('.')
                        .ok_or_else(|| bad(line, format!("unknown key `{other}`")))?;
                    let k = spec.index_of(id).ok_or_else(|| Error::UnknownGroup(id.to_string()))?;
                    match (prefix, field) {
                        ("truth", "weight") => params[k].weight = num()?,
                        ("truth", "alpha") => params[k].alpha = num()?,
                        ("truth", "beta") => params[k].beta = num()?,
                        ("member", "offset") => cfg.member_offset[k] = num()?,
                        ("member", "scale") => cfg.member_scale[k] = num()?,
                        _ => return Err(bad(line, format!("unknown key `{other}`"))),
                    }
                }
            }
        }
        cfg.truth = BmaModel::new(spec, params, sigma)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv_str(&text, path)
    }
}

/// First group: 60% of the total weight, α = 1.5, β = 0.9; remaining groups
/// share 40% evenly per member with α = 1, β = 1; σ = 1. A single group gets
/// uniform weights.
pub fn default_truth(spec: &GroupSpec) -> BmaModel {
    let m = spec.total_members() as f64;
    let groups = spec.groups();
    let lead = groups[0].members as f64;
    let params = (0..groups.len())
        .map(|k| {
            let weight = if groups.len() == 1 {
                1.0 / m
            } else if k == 0 {
                0.6 / lead
            } else {
                0.4 / (m - lead)
            };
            if k == 0 {
                GroupParams { weight, alpha: 1.5, beta: 0.9 }
            } else {
                GroupParams { weight, alpha: 1.0, beta: 1.0 }
            }
        })
        .collect();
    BmaModel::normalized(spec.clone(), params, 1.0).expect("valid default truth")
}

/// Draw a synthetic archive: per (station, day) a gamma latent signal, member
/// forecasts as noisy affine transforms of it, and an observation from the
/// truth mixture given those members.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Archive> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let gamma = Gamma::new(config.signal_shape, config.signal_scale)
        .map_err(|e| Error::InvalidParameter(format!("signal distribution: {e}")))?;
    let spec = &config.spec;
    let groups = spec.member_groups();
    let member_weights: Vec<f64> = groups.iter().map(|&k| config.truth.params()[k].weight).collect();
    let width = config.stations.to_string().len().max(2);
    let mut cases = Vec::with_capacity(config.stations * config.days);
    for d in 0..config.days {
        let date = config.start + Days::new(d as u64);
        for s in 0..config.stations {
            let signal: f64 = gamma.sample(&mut rng);
            let members: Vec<f64> = groups
                .iter()
                .map(|&k| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    (config.member_offset[k] + config.member_scale[k] * signal + config.member_noise * e).max(0.0)
                })
                .collect();
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = members.len() - 1;
            for (i, w) in member_weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            let location = config.truth.location(pick, members[pick]);
            let x = TruncatedNormal::new(location, config.truth.sigma())?.sample(&mut rng);
            cases.push(ForecastCase::complete(
                format!("S{:0width$}", s + 1),
                date,
                &members,
                x,
            ));
        }
    }
    Archive::new(spec.clone(), cases)
}
