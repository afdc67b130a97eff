//! Command-line front end: fit, predict, verify and simulate.
//!
//! Exit codes: 0 success, 2 input error, 3 numerical failure or non-convergence.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::dataio::{self, Archive, SynthConfig};
use crate::error::Error;
use crate::estimation::{self, EmConfig, Fit, TrainingSet, Variant};
use crate::mixture::{BmaModel, ForecastCase, GroupSpec};
use crate::verification::{self, CaseScore, VerificationReport, DEFAULT_LEVELS};

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

const PIT_BINS: usize = 10;
const ENSEMBLE_LABEL: &str = "ensemble";

#[derive(Debug, Parser)]
#[command(name = "tnbma", version, about = "Truncated-normal BMA calibration of ensemble forecasts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one model per verification date (or a single date).
    Fit(FitArgs),
    /// Predictive summaries for every station on one date.
    Predict(PredictArgs),
    /// Rolling fit-then-score of all variants against the raw ensemble.
    Verify(VerifyArgs),
    /// Write a synthetic archive.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ArchiveArgs {
    #[arg(long)]
    pub archive: PathBuf,
    /// `two-group`, `three-group`, a file holding `id:n,...`, or the spec inline.
    /// Without it the archive header decides.
    #[arg(long)]
    pub groups: Option<String>,
    #[arg(long, default_value_t = 28)]
    pub training_days: usize,
    #[arg(long, default_value_t = 500)]
    pub max_iters: usize,
    /// Worker threads; defaults to the number of processors.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: ArchiveArgs,
    #[arg(long, default_value = "full-ml")]
    pub variant: Variant,
    #[arg(long)]
    pub date: Option<NaiveDate>,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: ArchiveArgs,
    #[arg(long)]
    pub date: NaiveDate,
    /// Saved model; without it the model is fitted on the date's training window.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value = "full-ml")]
    pub variant: Variant,
    /// Central interval levels in percent.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LEVELS)]
    pub levels: Vec<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: ArchiveArgs,
    /// Restrict to one variant; all three by default.
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LEVELS)]
    pub levels: Vec<f64>,
    /// Seeds the rank-histogram tie breaking.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Key-value generator config; defaults apply without it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub groups: Option<String>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }

    fn numerical(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_NUMERICAL,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_INPUT };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Parse arguments, run, and translate the outcome into an exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_INPUT) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("tnbma: {e}");
            ExitCode::from(e.code)
        }
    }
}

/// Run a parsed command; returns the text meant for stdout.
pub fn run(cli: &Cli) -> CliResult<String> {
    match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Verify(a) => cmd_verify(a).map(|v| v.table),
        Command::Simulate(a) => cmd_simulate(a),
    }
}

pub fn resolve_groups(preset: &str) -> CliResult<GroupSpec> {
    match preset {
        "two-group" => return Ok(GroupSpec::two_group()),
        "three-group" => return Ok(GroupSpec::three_group()),
        _ => {}
    }
    let path = Path::new(preset);
    if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::from(Error::io(path, e)))?;
        return Ok(GroupSpec::parse(text.trim())?);
    }
    if preset.contains(':') {
        return Ok(GroupSpec::parse(preset)?);
    }
    Err(CliError::input(format!(
        "--groups `{preset}` is neither a preset (two-group, three-group), a file, nor an `id:n,...` spec"
    )))
}

fn check_levels(levels: &[f64]) -> CliResult<()> {
    if levels.is_empty() {
        return Err(CliError::input("at least one interval level is required"));
    }
    for &l in levels {
        if !(l > 0.0 && l < 100.0) {
            return Err(CliError::input(format!("interval level {l} is outside (0, 100)")));
        }
    }
    Ok(())
}

fn load_archive(common: &ArchiveArgs) -> CliResult<Archive> {
    let expected = common.groups.as_deref().map(resolve_groups).transpose()?;
    let archive = dataio::parse_archive(&common.archive, expected.as_ref())?;
    if archive.is_empty() {
        return Err(CliError::input(format!("{}: archive holds no cases", common.archive.display())));
    }
    log::info!(
        "{}: {} cases, groups {}",
        common.archive.display(),
        archive.cases().len(),
        archive.spec()
    );
    Ok(archive)
}

fn min_training(spec: &GroupSpec) -> usize {
    2 * spec.group_count()
}

fn thread_pool(jobs: Option<usize>) -> CliResult<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        if n == 0 {
            return Err(CliError::input("--jobs must be at least 1"));
        }
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| CliError::input(format!("cannot start worker pool: {e}")))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e).into())
}

fn em_config(variant: Variant, common: &ArchiveArgs) -> CliResult<EmConfig> {
    let config = EmConfig {
        max_iters: common.max_iters,
        ..EmConfig::new(variant)
    };
    config.validate()?;
    Ok(config)
}

fn fit_window(archive: &Archive, date: NaiveDate, days: usize, config: &EmConfig) -> crate::Result<Fit> {
    let cases = archive.training_cases(date, days);
    let training = TrainingSet::with_minimum(archive.spec().clone(), &cases, min_training(archive.spec()))?;
    estimation::fit(&training, config)
}

fn planned_dates(archive: &Archive, days: usize, single: Option<NaiveDate>) -> CliResult<Vec<NaiveDate>> {
    let plan = dataio::plan_windows(archive, days, min_training(archive.spec()));
    for (date, reason) in &plan.omitted {
        log::info!("skipping {date}: {reason}");
    }
    match single {
        Some(d) => {
            if plan.dates.iter().any(|p| p.date == d) {
                Ok(vec![d])
            } else if archive.cases_on(d).is_empty() {
                Err(Error::UnknownDate(d.to_string()).into())
            } else {
                let why = plan
                    .omitted
                    .iter()
                    .find(|(o, _)| *o == d)
                    .map(|(_, r)| r.clone())
                    .unwrap_or_else(|| format!("its {days}-day training window is not inside the archive"));
                Err(CliError::input(format!("cannot fit {d}: {why}")))
            }
        }
        None => {
            if plan.dates.is_empty() {
                let note = plan.note.unwrap_or_else(|| "no verification dates".into());
                return Err(CliError::input(note));
            }
            Ok(plan.dates.into_iter().map(|p| p.date).collect())
        }
    }
}

pub fn cmd_fit(args: &FitArgs) -> CliResult<String> {
    let common = &args.common;
    let archive = load_archive(common)?;
    let config = em_config(args.variant, common)?;
    let dates = planned_dates(&archive, common.training_days, args.date)?;
    let pool = thread_pool(common.jobs)?;
    let fits: Vec<crate::Result<Fit>> = pool.install(|| {
        dates
            .par_iter()
            .map(|&d| fit_window(&archive, d, common.training_days, &config))
            .collect()
    });

    create_dir(&common.out)?;
    let mut summary = String::from("date,cases,iterations,converged,sigma,final_log_likelihood\n");
    let mut unconverged = 0usize;
    let mut failed = Vec::new();
    for (date, fit) in dates.iter().zip(&fits) {
        let diag_path = common.out.join(format!("diagnostics-{date}.txt"));
        match fit {
            Ok(fit) => {
                fit.model.save(&common.out.join(format!("model-{date}.txt")))?;
                write_file(&diag_path, &fit.diagnostics.to_kv_string())?;
                let d = &fit.diagnostics;
                let _ = writeln!(
                    summary,
                    "{date},{},{},{},{},{:.10e}",
                    d.cases,
                    d.iterations,
                    d.converged,
                    fit.model.sigma(),
                    d.final_log_likelihood
                );
                if !d.converged {
                    unconverged += 1;
                }
            }
            Err(e) => {
                write_file(&diag_path, &format!("variant={}\nerror={e}\n", args.variant))?;
                let _ = writeln!(summary, "{date},,,false,,");
                failed.push((*date, e));
            }
        }
    }
    write_file(&common.out.join("fit-summary.csv"), &summary)?;

    if let Some((date, e)) = failed.iter().find(|(_, e)| !e.is_numerical()) {
        return Err(CliError::input(format!("fit for {date}: {e}")));
    }
    if let Some((date, e)) = failed.first() {
        return Err(CliError::numerical(format!(
            "{} of {} fits failed, first at {date}: {e}",
            failed.len(),
            dates.len()
        )));
    }
    if unconverged > 0 {
        return Err(CliError::numerical(format!(
            "{unconverged} of {} fits did not converge within {} iterations",
            dates.len(),
            common.max_iters
        )));
    }
    Ok(format!(
        "fitted {} {} model(s) into {}\n",
        dates.len(),
        args.variant,
        common.out.display()
    ))
}

pub fn cmd_predict(args: &PredictArgs) -> CliResult<String> {
    let common = &args.common;
    check_levels(&args.levels)?;
    let archive = load_archive(common)?;
    let cases = archive.cases_on(args.date);
    if cases.is_empty() {
        return Err(Error::UnknownDate(args.date.to_string()).into());
    }
    let model = match &args.model {
        Some(path) => BmaModel::load(path)?,
        None => {
            let config = em_config(args.variant, common)?;
            planned_dates(&archive, common.training_days, Some(args.date))?;
            let fit = fit_window(&archive, args.date, common.training_days, &config)?;
            if !fit.diagnostics.converged {
                log::warn!("fit for {} did not converge", args.date);
            }
            fit.model
        }
    };
    if model.spec() != archive.spec() {
        return Err(Error::LayoutMismatch(format!(
            "model groups {} differ from archive groups {}",
            model.spec(),
            archive.spec()
        ))
        .into());
    }

    let labels = archive.spec().member_labels();
    let mut out = String::from("station,date,observation,median");
    for l in &args.levels {
        let l = verification::sig6(*l);
        let _ = write!(out, ",lower_{l},upper_{l}");
    }
    out.push_str(",renormalized,sigma");
    for label in &labels {
        let _ = write!(out, ",weight_{label},location_{label}");
    }
    out.push('\n');

    let mut skipped = 0usize;
    for case in &cases {
        let (pred, renormalized) = match model.predictive_renormalized(case) {
            Ok(p) => p,
            Err(Error::MissingMembers { .. }) => {
                log::warn!("{}/{}: no ensemble members, skipped", case.station, case.date);
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let _ = write!(out, "{},{},", case.station, case.date);
        if let Some(x) = case.observation {
            let _ = write!(out, "{x}");
        }
        let _ = write!(out, ",{}", pred.median());
        for l in &args.levels {
            let (lo, hi) = pred.central_interval(l / 100.0)?;
            let _ = write!(out, ",{lo},{hi}");
        }
        let _ = write!(out, ",{},{}", u8::from(renormalized), pred.sigma());
        let mut components = pred.components().iter();
        for m in &case.members {
            match m {
                Some(_) => {
                    let c = components.next().expect("one component per present member");
                    let _ = write!(out, ",{},{}", c.weight, c.location);
                }
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    create_dir(&common.out)?;
    let path = common.out.join(format!("predict-{}.csv", args.date));
    write_file(&path, &out)?;
    Ok(format!(
        "wrote {} predictions ({skipped} skipped) to {}\n",
        cases.len() - skipped,
        path.display()
    ))
}

/// Everything `verify` writes, also returned for callers that want it in memory.
#[derive(Debug, Clone)]
pub struct VerifyOutput {
    pub reports: Vec<VerificationReport>,
    pub table: String,
    pub files: Vec<PathBuf>,
}

struct DateResult {
    /// Per variant: the fit summary and the scores of that date's cases.
    variants: Vec<crate::Result<(Fit, Vec<CaseScore>)>>,
    ensemble: crate::Result<Vec<CaseScore>>,
}

fn verification_cases(archive: &Archive, date: NaiveDate) -> Vec<&ForecastCase> {
    archive
        .cases_on(date)
        .into_iter()
        .filter(|c| c.observation.is_some() && c.members.iter().any(Option::is_some))
        .collect()
}

fn score_date(
    archive: &Archive,
    date: NaiveDate,
    configs: &[EmConfig],
    common: &ArchiveArgs,
    levels: &[f64],
) -> DateResult {
    let cases = verification_cases(archive, date);
    let variants = configs
        .iter()
        .map(|config| {
            let fit = fit_window(archive, date, common.training_days, config)?;
            let scores = cases
                .iter()
                .map(|c| {
                    let (pred, renormalized) = fit.model.predictive_renormalized(c)?;
                    let x = c.observation.expect("filtered on observation");
                    let mut s = verification::score_predictive(&pred, x, levels)?;
                    s.renormalized = renormalized;
                    Ok(s)
                })
                .collect::<crate::Result<Vec<_>>>()?;
            Ok((fit, scores))
        })
        .collect();
    let ensemble = cases
        .iter()
        .map(|c| {
            let x = c.observation.expect("filtered on observation");
            let mut s = verification::score_ensemble(&c.present_members(), x, levels)?;
            s.renormalized = !c.has_full_ensemble();
            Ok(s)
        })
        .collect();
    DateResult { variants, ensemble }
}

pub fn cmd_verify(args: &VerifyArgs) -> CliResult<VerifyOutput> {
    let common = &args.common;
    check_levels(&args.levels)?;
    let archive = load_archive(common)?;
    let variants: Vec<Variant> = match args.variant {
        Some(v) => vec![v],
        None => Variant::ALL.to_vec(),
    };
    let configs = variants
        .iter()
        .map(|&v| em_config(v, common))
        .collect::<CliResult<Vec<_>>>()?;
    let dates = planned_dates(&archive, common.training_days, None)?;
    let pool = thread_pool(common.jobs)?;
    let results: Vec<DateResult> = pool.install(|| {
        dates
            .par_iter()
            .map(|&d| score_date(&archive, d, &configs, common, &args.levels))
            .collect()
    });

    let mut fits_csv = String::from("date,variant,cases,iterations,converged,sigma,final_log_likelihood,status\n");
    let mut per_variant: Vec<Vec<CaseScore>> = vec![Vec::new(); variants.len()];
    let mut ensemble_scores = Vec::new();
    let mut failures: Vec<(NaiveDate, Variant, Error)> = Vec::new();
    let mut unconverged = 0usize;
    for (date, result) in dates.iter().zip(results) {
        for (j, outcome) in result.variants.into_iter().enumerate() {
            let v = variants[j];
            match outcome {
                Ok((fit, scores)) => {
                    let d = &fit.diagnostics;
                    let _ = writeln!(
                        fits_csv,
                        "{date},{v},{},{},{},{},{:.10e},ok",
                        d.cases,
                        d.iterations,
                        d.converged,
                        fit.model.sigma(),
                        d.final_log_likelihood
                    );
                    if !d.converged {
                        unconverged += 1;
                    }
                    per_variant[j].extend(scores);
                }
                Err(e) => {
                    let _ = writeln!(fits_csv, "{date},{v},,,false,,,{}", csv_text(&e.to_string()));
                    failures.push((*date, v, e));
                }
            }
        }
        ensemble_scores.extend(result.ensemble?);
    }

    let mut reports = Vec::with_capacity(variants.len() + 1);
    for (v, scores) in variants.iter().zip(&per_variant) {
        if scores.is_empty() {
            log::warn!("{v}: no verification cases scored");
            continue;
        }
        reports.push(verification::assemble_report(v.as_str(), &args.levels, scores)?);
    }
    if ensemble_scores.is_empty() {
        return Err(Error::Empty("verification cases").into());
    }
    reports.push(verification::assemble_report(ENSEMBLE_LABEL, &args.levels, &ensemble_scores)?);

    let verified: Vec<ForecastCase> = dates
        .iter()
        .flat_map(|&d| verification_cases(&archive, d))
        .cloned()
        .collect();
    let members = archive.spec().total_members();
    let ranks = verification::rank_histogram(&verified, members, args.seed);

    let mut containment = String::from("metric,value\n");
    match verification::ensemble_containment(&verified) {
        Ok(c) => {
            let _ = writeln!(containment, "observed_percent,{}", verification::sig6(c));
        }
        Err(_) => containment.push_str("observed_percent,\n"),
    }
    let _ = writeln!(
        containment,
        "nominal_percent,{}",
        verification::sig6(verification::nominal_containment(members))
    );

    let table = verification::render_table(&reports);
    let files = [
        ("scores.txt", table.clone()),
        ("scores.csv", verification::render_csv(&reports)),
        ("ks.csv", render_ks(&reports)),
        ("pit-histogram.csv", verification::render_pit_histograms(&reports, PIT_BINS)),
        ("rank-histogram.csv", verification::render_rank_histogram(&ranks)),
        ("containment.csv", containment),
        ("fits.csv", fits_csv),
    ];
    create_dir(&common.out)?;
    let mut written = Vec::with_capacity(files.len());
    for (name, body) in files {
        let path = common.out.join(name);
        write_file(&path, &body)?;
        written.push(path);
    }

    if let Some((date, v, e)) = failures.iter().find(|(_, _, e)| !e.is_numerical()) {
        return Err(CliError::input(format!("{v} fit for {date}: {e}")));
    }
    if let Some((date, v, e)) = failures.first() {
        return Err(CliError::numerical(format!(
            "{} fit(s) failed, first {v} at {date}: {e}",
            failures.len()
        )));
    }
    if unconverged > 0 {
        return Err(CliError::numerical(format!(
            "{unconverged} fit(s) did not converge within {} iterations",
            common.max_iters
        )));
    }
    Ok(VerifyOutput {
        reports,
        table,
        files: written,
    })
}

fn csv_text(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

/// One row per forecast: KS statistic and p-value of the PIT sample.
fn render_ks(reports: &[VerificationReport]) -> String {
    let mut out = String::from("forecast,cases,ks_statistic,ks_p_value\n");
    for r in reports {
        if let Some(ks) = r.ks {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.label,
                r.pit.len(),
                verification::sig6(ks.statistic),
                verification::sig6(ks.p_value)
            );
        }
    }
    out
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<String> {
    let mut config = match &args.config {
        Some(path) => SynthConfig::load(path)?,
        None => {
            let spec = match &args.groups {
                Some(g) => resolve_groups(g)?,
                None => GroupSpec::two_group(),
            };
            SynthConfig::new(spec, args.seed.unwrap_or(0))
        }
    };
    if args.config.is_some() {
        if let Some(g) = &args.groups {
            let spec = resolve_groups(g)?;
            if spec != config.spec {
                return Err(Error::LayoutMismatch(format!(
                    "--groups {spec} differs from config groups {}",
                    config.spec
                ))
                .into());
            }
        }
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    let archive = dataio::generate_synthetic(&config)?;
    create_dir(&args.out)?;
    let path = args.out.join("archive.csv");
    archive.save(&path)?;
    write_file(&args.out.join("synth-config.txt"), &config.to_kv_string())?;
    Ok(format!(
        "seed={}\nwrote {} cases ({} stations x {} days) to {}\n",
        config.seed,
        archive.cases().len(),
        config.stations,
        config.days,
        path.display()
    ))
}
