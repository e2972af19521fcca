use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tvexp_core::data::{read_cohort, write_cohort, ReadOptions, TimeBasis};
use tvexp_core::estimators::{
    estimate_jm, estimate_locf, estimate_mi_with, estimate_rc, ImputationModel, JmBaseline, Method, MiOptions,
    DEFAULT_IMPUTATIONS, DEFAULT_N_BOOT, DEFAULT_N_QUAD,
};
use tvexp_core::lmm::LmmSpec;
use tvexp_core::numerics::RngStream;
use tvexp_core::par;
use tvexp_core::simulate::{generate, preset, write_truth};
use tvexp_core::study::{
    emit_report, read_report, run_study, ReportFormat, StudyConfig, StudyReport, DEFAULT_REPLICATES,
};

/// Exit status when the run finished but some method produced no metrics.
const INCOMPLETE: u8 = 2;

#[derive(Parser)]
#[command(name = "tvexp", version, about = "Time-varying exposure association estimators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one cohort from a scenario preset.
    Simulate {
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Override the number of subjects.
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one method to a cohort and print the estimate as JSON.
    Fit(FitArgs),
    /// Run a Monte Carlo study.
    Study(StudyArgs),
    /// Re-emit a saved study report in another format.
    Report {
        /// Directory holding `report.json` (or subdirectories that do), or
        /// the JSON file itself.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Output directory; defaults to the input directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
    Svg,
}

#[derive(Clone, Copy, ValueEnum)]
enum BasisKind {
    Polynomial,
    Spline,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Weibull,
    Piecewise,
}

#[derive(Clone, Copy, ValueEnum)]
enum Imputation {
    LastVisit,
    EventAware,
}

impl From<Baseline> for JmBaseline {
    fn from(b: Baseline) -> Self {
        match b {
            Baseline::Weibull => JmBaseline::Weibull,
            Baseline::Piecewise => JmBaseline::PiecewiseConstant,
        }
    }
}

impl From<Imputation> for ImputationModel {
    fn from(m: Imputation) -> Self {
        match m {
            Imputation::LastVisit => ImputationModel::LastVisit,
            Imputation::EventAware => ImputationModel::EventAware,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, value_parser = parse_method)]
    method: Method,
    #[arg(long)]
    longitudinal: PathBuf,
    #[arg(long)]
    survival: PathBuf,
    #[arg(long, value_enum, default_value_t = BasisKind::Polynomial)]
    basis: BasisKind,
    /// Polynomial degree of the exposure trajectory.
    #[arg(long, default_value_t = 1)]
    degree: usize,
    /// Interior knots of the natural spline basis, comma separated. When
    /// absent, `--n-knots` quantile knots are placed on the visit times.
    #[arg(long, value_delimiter = ',')]
    knots: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    n_knots: usize,
    /// Number of imputations for MI.
    #[arg(long = "imputations", default_value_t = DEFAULT_IMPUTATIONS)]
    m: usize,
    #[arg(long, value_enum, default_value_t = Imputation::LastVisit)]
    imputation_model: Imputation,
    /// Optional bootstrap layer on top of Rubin's rule for MI.
    #[arg(long)]
    mi_boot: Option<usize>,
    /// Bootstrap draws for RC and PE-RC; 0 reports the naive Cox SE.
    #[arg(long, default_value_t = DEFAULT_N_BOOT)]
    n_boot: usize,
    #[arg(long, default_value_t = DEFAULT_N_QUAD)]
    n_quad: usize,
    #[arg(long, value_enum, default_value_t = Baseline::Weibull)]
    baseline: Baseline,
    /// Calibrate on every visit, including those after the event. Same as
    /// `--method pe-rc`.
    #[arg(long)]
    post_event: bool,
    /// Reject visits recorded after the event or censoring time.
    #[arg(long)]
    strict: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct StudyArgs {
    /// JSON document with the fields of the study configuration. Other
    /// flags are ignored when it is given.
    #[arg(long, conflicts_with = "scenario")]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    scenario: Option<String>,
    #[arg(long, default_value_t = DEFAULT_REPLICATES)]
    replicates: usize,
    #[arg(long, value_delimiter = ',', value_parser = parse_method, default_value = "locf,rc,pe_rc,mi,jm")]
    methods: Vec<Method>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Override the number of subjects per replicate.
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_N_BOOT)]
    n_boot: usize,
    #[arg(long = "imputations", default_value_t = DEFAULT_IMPUTATIONS)]
    m: usize,
    #[arg(long, value_enum, default_value_t = Imputation::LastVisit)]
    imputation_model: Imputation,
    #[arg(long, default_value_t = DEFAULT_N_QUAD)]
    n_quad: usize,
    #[arg(long, value_enum, default_value_t = Baseline::Weibull)]
    baseline: Baseline,
    #[arg(long)]
    out: PathBuf,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse()
        .map_err(|e: tvexp_core::estimators::EstimatorError| e.to_string())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate {
            scenario,
            seed,
            subjects,
            out,
        } => simulate(&scenario, seed, subjects, &out),
        Command::Fit(args) => fit(&args),
        Command::Study(args) => study(&args),
        Command::Report { input, format, out } => report(&input, format, out.as_deref()),
    }
}

fn simulate(label: &str, seed: u64, subjects: Option<usize>, out: &Path) -> Result<ExitCode> {
    let mut cfg = preset(label)?;
    if let Some(n) = subjects {
        cfg.n_subjects = n;
    }
    let (cohort, truth) = generate(&cfg, &RngStream::new(seed, 0))?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_cohort(&cohort, &out.join("longitudinal.csv"), &out.join("survival.csv"))?;
    // Visits continue past the event here, as post-event calibration needs.
    write_cohort(
        &truth.full_cohort,
        &out.join("longitudinal_full.csv"),
        &out.join("survival_full.csv"),
    )?;
    write_truth(&cohort, &truth, &out.join("truth.csv"))?;
    eprintln!(
        "scenario {label}: {} subjects, {} events, {} visits",
        cohort.len(),
        cohort.n_events(),
        cohort.n_visits()
    );
    Ok(ExitCode::SUCCESS)
}

fn fit(a: &FitArgs) -> Result<ExitCode> {
    let (cohort, read) = read_cohort(&a.longitudinal, &a.survival, ReadOptions { strict: a.strict })?;
    if read.dropped_missing > 0 {
        eprintln!("dropped {} visits with missing values", read.dropped_missing);
    }
    let basis = match a.basis {
        BasisKind::Polynomial => TimeBasis::polynomial(a.degree),
        BasisKind::Spline if a.knots.is_empty() => {
            TimeBasis::natural_spline_from_times(&cohort.all_visit_times(), a.n_knots)?
        }
        BasisKind::Spline => {
            let times = cohort.all_visit_times();
            let lo = times.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            TimeBasis::natural_spline(a.knots.clone(), (lo, hi))?
        }
    };
    let spec = LmmSpec::shared(basis);
    let stream = RngStream::new(a.seed, 0);
    let method = if a.post_event && a.method == Method::Rc {
        Method::PeRc
    } else {
        a.method
    };
    if a.post_event && method != Method::PeRc {
        bail!("--post-event applies to regression calibration only");
    }
    let res = par::with_jobs(a.jobs, || match method {
        Method::Locf => estimate_locf(&cohort),
        Method::Rc => estimate_rc(&cohort, &spec, false, a.n_boot, &stream),
        Method::PeRc => estimate_rc(&cohort, &spec, true, a.n_boot, &stream),
        Method::Mi => estimate_mi_with(
            &cohort,
            &spec,
            &MiOptions {
                m_imputations: a.m,
                n_boot: a.mi_boot,
                model: a.imputation_model.into(),
            },
            &stream,
        ),
        Method::Jm => estimate_jm(&cohort, &spec, a.baseline.into(), a.n_quad),
    })?;
    println!("{}", serde_json::to_string(&res)?);
    Ok(ExitCode::SUCCESS)
}

fn study(a: &StudyArgs) -> Result<ExitCode> {
    let cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<StudyConfig>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => {
            let mut sc = preset(a.scenario.as_deref().unwrap_or_default())?;
            if let Some(n) = a.subjects {
                sc.n_subjects = n;
            }
            let mut cfg = StudyConfig::new(sc, a.methods.clone(), a.replicates, a.seed);
            cfg.parallelism = a.jobs;
            cfg.n_boot = a.n_boot;
            cfg.m_imputations = a.m;
            cfg.imputation_model = a.imputation_model.into();
            cfg.n_quad = a.n_quad;
            cfg.jm_baseline = a.baseline.into();
            cfg
        }
    };
    let report = run_study(&cfg)?;
    emit_report(std::slice::from_ref(&report), ReportFormat::Csv, &a.out)?;
    emit_report(std::slice::from_ref(&report), ReportFormat::Json, &a.out)?;
    print_summary(&report);
    Ok(exit_for(&[report]))
}

fn print_summary(r: &StudyReport) {
    println!(
        "scenario {} (gamma = {}), {} replicates",
        r.scenario, r.gamma_true, r.n_replicates
    );
    for s in &r.summaries {
        match &s.metrics {
            Some(m) => println!(
                "  {:<6} mean {:>8.4}  bias {:>8.4}  sd {:>7.4}  se {:>7.4}  cr {:.3}  mse {:.5}  ({} ok, {} failed)",
                s.method.to_string(),
                m.mean,
                m.bias,
                m.emp_sd,
                m.mean_se,
                m.coverage,
                m.mse,
                s.n_converged,
                s.n_failed
            ),
            None => println!(
                "  {:<6} no metrics ({} ok, {} failed)",
                s.method.to_string(),
                s.n_converged,
                s.n_failed
            ),
        }
    }
}

fn exit_for(reports: &[StudyReport]) -> ExitCode {
    if reports.iter().all(StudyReport::complete) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(INCOMPLETE)
    }
}

fn collect_reports(input: &Path) -> Result<Vec<StudyReport>> {
    if input.is_file() {
        return Ok(read_report(input)?);
    }
    let direct = input.join("report.json");
    if direct.is_file() {
        return Ok(read_report(&direct)?);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("report.json").is_file())
        .collect();
    dirs.sort();
    let mut out = Vec::new();
    for d in dirs {
        out.extend(read_report(&d.join("report.json"))?);
    }
    if out.is_empty() {
        bail!("no report.json found under {}", input.display());
    }
    Ok(out)
}

fn report(input: &Path, format: Format, out: Option<&Path>) -> Result<ExitCode> {
    let reports = collect_reports(input)?;
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None if input.is_file() => input.parent().map(Path::to_path_buf).unwrap_or_default(),
        None => input.to_path_buf(),
    };
    let format = match format {
        Format::Csv => ReportFormat::Csv,
        Format::Json => ReportFormat::Json,
        Format::Svg => ReportFormat::Svg,
    };
    for p in emit_report(&reports, format, &dir)? {
        println!("{}", p.display());
    }
    Ok(exit_for(&reports))
}
