use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mplm_core::coefficients::{catalog, method, parse_rational, TABLE_METHODS};
use mplm_core::harness::{
    convergence_study, fmt_float, default_exponents, reference_solution_with, step_from_exponent,
    step_ladder, work_precision, work_precision_csv, HBase, Metric, Reference, ReferenceIntegrator,
    StudyOptions, REFERENCE_REFINEMENT,
};
use mplm_core::integrator::DEFAULT_FLOOR;
use mplm_core::pds::check_conservativity;
use mplm_core::problems::{BuildOptions, DiffusionGrid, ProblemFile, Profile, PROBLEM_NAMES};
use mplm_core::{Error, Integrator, LmCoefficients, PdsProblem};
use num_rational::Rational64;
use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
    #[error("validation failed")]
    Validation,
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation => 1,
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::UnknownMethod(_)
            | Error::UnknownProblem(_)
            | Error::Config(_)
            | Error::InvalidProblem(_)
            | Error::InvalidInitialState(_)
            | Error::InvalidCoefficients { .. }
            | Error::Grid(_)
            | Error::DimensionMismatch { .. }
            | Error::Io(_) => CliError::Usage(e.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

/// Positivity-preserving, conservative multistep integrators for
/// production-destruction systems.
#[derive(Debug, Parser)]
#[command(name = "mplm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Integrate one problem with one method and write the trajectory as CSV.
    Solve(SolveArgs),
    /// Tabulate errors and observed orders over a ladder of step sizes.
    Convergence(ConvergenceArgs),
    /// Time every (method, step size) cell.
    WorkPrecision(WorkPrecisionArgs),
    /// Check the coefficient catalog and the built-in problems.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
struct ProblemArgs {
    /// Built-in problem name.
    #[arg(long, required_unless_present = "problem_file", conflicts_with = "problem_file")]
    problem: Option<String>,
    /// TOML problem description.
    #[arg(long)]
    problem_file: Option<PathBuf>,
    /// Value substituted for zero initial components and zero solution entries.
    #[arg(long, env = "MPLM_FLOOR")]
    floor: Option<f64>,
    /// Number of diffusion grid intervals.
    #[arg(long, default_value_t = 200)]
    nx: usize,
    /// Diffusion initial profile: `constant` or `bump`.
    #[arg(long, default_value = "constant")]
    profile: String,
}

struct LoadedProblem {
    name: String,
    problem: PdsProblem,
    grid: Option<DiffusionGrid>,
}

impl ProblemArgs {
    fn load(&self) -> CliResult<LoadedProblem> {
        let floor = self.floor.unwrap_or(DEFAULT_FLOOR);
        if !(floor > 0.0) {
            return Err(CliError::Usage(format!("floor must be positive, got {floor}")));
        }
        let opts = BuildOptions {
            floor,
            nx: self.nx,
            profile: Profile::parse(&self.profile)?,
        };
        let file = match (&self.problem, &self.problem_file) {
            (_, Some(path)) => ProblemFile::load(path)?,
            (Some(name), None) => {
                if !PROBLEM_NAMES.contains(&name.as_str()) {
                    return Err(Error::UnknownProblem(name.clone()).into());
                }
                ProblemFile {
                    kind: name.clone(),
                    ..ProblemFile::default()
                }
            }
            (None, None) => return Err(CliError::Usage("no problem given".into())),
        };
        Ok(LoadedProblem {
            name: file.kind.clone(),
            problem: file.build(&opts)?,
            grid: file.grid(&opts)?,
        })
    }
}

#[derive(Debug, Args)]
struct LadderArgs {
    /// Exponent range `m0:m1`, giving h = base / 2^m; defaults to the problem's table range.
    #[arg(long, value_parser = parse_range)]
    h_exp_range: Option<(i32, i32)>,
    /// What h is measured against: `unit` or `horizon`.
    #[arg(long, default_value = "unit")]
    h_base: String,
}

impl LadderArgs {
    fn steps(&self, loaded: &LoadedProblem) -> CliResult<Vec<f64>> {
        let (m0, m1) = match self.h_exp_range {
            Some(r) => r,
            None => default_exponents(&loaded.name).ok_or_else(|| {
                CliError::Usage(format!("no default exponent range for `{}`; pass --h-exp-range", loaded.name))
            })?,
        };
        Ok(step_ladder(&loaded.problem, m0, m1, HBase::parse(&self.h_base)?)?)
    }
}

fn parse_range(s: &str) -> Result<(i32, i32), String> {
    let (a, b) = s.split_once(':').ok_or("expected m0:m1")?;
    let m0: i32 = a.trim().parse().map_err(|e| format!("{a}: {e}"))?;
    let m1: i32 = b.trim().parse().map_err(|e| format!("{b}: {e}"))?;
    if m0 > m1 {
        return Err(format!("m0 = {m0} exceeds m1 = {m1}"));
    }
    Ok((m0, m1))
}

#[derive(Debug, Args)]
struct SolveArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[arg(long)]
    method: String,
    /// Step size exponent m in h = base / 2^m.
    #[arg(long)]
    h_exp: i32,
    #[arg(long, default_value = "unit")]
    h_base: String,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Check the M-matrix property of every system.
    #[arg(long)]
    validate: bool,
}

#[derive(Debug, Args)]
struct StudyArgs {
    /// Comma-separated method names, or `all` for the six tabulated methods.
    #[arg(long, visible_alias = "method", default_value = "all")]
    methods: String,
    #[command(flatten)]
    ladder: LadderArgs,
    /// `max`, `mean-rel` or `rel-max`; defaults per problem.
    #[arg(long)]
    metric: Option<String>,
    /// Relative self-convergence required of numerical references.
    #[arg(long, default_value_t = 1e-6)]
    reference_tol: f64,
    /// Integrator for numerical references: `rk6` or a catalog method
    /// (useful for stiff problems).
    #[arg(long, default_value = "rk6")]
    reference_method: String,
    /// Concurrent study cells.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    validate: bool,
}

impl StudyArgs {
    fn methods(&self) -> CliResult<Vec<LmCoefficients>> {
        let names: Vec<&str> = if self.methods.trim() == "all" {
            TABLE_METHODS.to_vec()
        } else {
            self.methods.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
        };
        if names.is_empty() {
            return Err(CliError::Usage("no methods given".into()));
        }
        names.into_iter().map(|n| method(n).map_err(CliError::from)).collect()
    }

    fn reference(&self, loaded: &LoadedProblem, h_min: f64) -> CliResult<Reference> {
        let integrator = match self.reference_method.as_str() {
            "rk6" => ReferenceIntegrator::Rk6,
            name => {
                method(name)?;
                ReferenceIntegrator::Method(name.to_string())
            }
        };
        Ok(reference_solution_with(
            &loaded.problem,
            h_min,
            self.reference_tol,
            &integrator,
            REFERENCE_REFINEMENT,
        )?)
    }

    fn options(&self, loaded: &LoadedProblem) -> CliResult<StudyOptions> {
        let metric = match &self.metric {
            Some(m) => Metric::parse(m)?,
            None => Metric::default_for(&loaded.name),
        };
        let mut opts = StudyOptions::new(metric);
        opts.jobs = self.jobs.max(1);
        opts.diffusion = loaded.grid;
        opts.integrator.validate = self.validate;
        Ok(opts)
    }
}

#[derive(Debug, Args)]
struct ConvergenceArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[command(flatten)]
    study: StudyArgs,
    /// Directory receiving one `<problem>_<method>.csv` per method.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Leave the wall-time column out of the CSV files.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Debug, Args)]
struct WorkPrecisionArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[command(flatten)]
    study: StudyArgs,
    /// Timed runs per cell after one warm-up run.
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    /// TOML file with additional or perturbed coefficient sets.
    #[arg(long)]
    extra_coeffs: Option<PathBuf>,
}

/// Extra coefficient sets for `validate`.
///
/// ```toml
/// [[method]]
/// name = "custom"
/// order = 2
/// alpha = ["0", "1"]
/// beta = ["1/2", "1/2"]
///
/// [[perturb]]
/// method = "mplm-4-3"
/// beta_index = 1
/// delta = "1/1000"
/// ```
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExtraCoeffs {
    #[serde(default)]
    method: Vec<MethodSpec>,
    #[serde(default)]
    perturb: Vec<Perturbation>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MethodSpec {
    name: String,
    order: usize,
    alpha: Vec<String>,
    beta: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Perturbation {
    method: String,
    beta_index: usize,
    delta: String,
}

fn rationals(v: &[String]) -> CliResult<Vec<Rational64>> {
    v.iter().map(|s| parse_rational(s).map_err(CliError::from)).collect()
}

impl ExtraCoeffs {
    fn load(path: &Path) -> CliResult<Self> {
        toml::from_str(&fs::read_to_string(path)?).map_err(|e| CliError::Usage(e.to_string()))
    }

    /// Applies perturbations in place and appends new sets.
    fn apply(&self, sets: &mut Vec<LmCoefficients>) -> CliResult<()> {
        for p in &self.perturb {
            let slot = sets
                .iter_mut()
                .find(|c| c.name() == p.method)
                .ok_or_else(|| CliError::from(Error::UnknownMethod(p.method.clone())))?;
            *slot = slot.with_beta_shift(p.beta_index, parse_rational(&p.delta)?)?;
        }
        for m in &self.method {
            sets.push(LmCoefficients::new(
                &m.name,
                m.order,
                rationals(&m.alpha)?,
                rationals(&m.beta)?,
            )?);
        }
        Ok(())
    }
}

fn open_output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(io::BufWriter::new(io::stdout().lock())),
    })
}

fn cmd_solve(args: &SolveArgs) -> CliResult<()> {
    let loaded = args.problem.load()?;
    let coeffs = method(&args.method)?;
    let h = step_from_exponent(&loaded.problem, args.h_exp, HBase::parse(&args.h_base)?)?;
    let traj = Integrator::new(&loaded.problem, coeffs)?
        .validate(args.validate)
        .run(h)?;
    let mut out = open_output(args.out.as_deref())?;
    let header: Vec<String> = (1..=traj.dim()).map(|i| format!("y_{i}")).collect();
    writeln!(out, "t,{}", header.join(","))?;
    for (t, y) in traj.times().iter().zip(traj.states()) {
        let row: Vec<String> = y.iter().map(|v| fmt_float(*v)).collect();
        writeln!(out, "{},{}", fmt_float(*t), row.join(","))?;
    }
    out.flush()?;
    let s = &traj.summary;
    eprintln!(
        "{} {} h={h:e}: steps={} min_component={:e} conservation_residual={:e} clamps={} solves={}",
        loaded.problem.label,
        args.method,
        s.steps,
        s.min_component,
        traj.relative_mass_residual(),
        s.clamps,
        s.linear_solves
    );
    Ok(())
}

fn cmd_convergence(args: &ConvergenceArgs) -> CliResult<()> {
    let loaded = args.problem.load()?;
    let methods = args.study.methods()?;
    let hs = args.study.ladder.steps(&loaded)?;
    let opts = args.study.options(&loaded)?;
    let reference = args.study.reference(&loaded, *hs.last().unwrap())?;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
    }
    let mut stdout = io::stdout().lock();
    for coeffs in &methods {
        let report = convergence_study(&loaded.problem, coeffs, &hs, &reference, &opts)?;
        writeln!(stdout, "{}", report.to_table())?;
        if let Some(dir) = &args.out {
            let path = dir.join(format!("{}_{}.csv", loaded.name, coeffs.name()));
            fs::write(&path, report.to_csv(!args.no_timing))?;
            log::info!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn cmd_work_precision(args: &WorkPrecisionArgs) -> CliResult<()> {
    if args.repeats == 0 {
        return Err(CliError::Usage("--repeats must be at least 1".into()));
    }
    let loaded = args.problem.load()?;
    let methods = args.study.methods()?;
    let hs = args.study.ladder.steps(&loaded)?;
    let opts = args.study.options(&loaded)?;
    let reference = args.study.reference(&loaded, *hs.last().unwrap())?;
    let rows = work_precision(&loaded.problem, &methods, &hs, args.repeats, &reference, &opts)?;
    let mut out = open_output(args.out.as_deref())?;
    out.write_all(work_precision_csv(&rows).as_bytes())?;
    out.flush()?;
    Ok(())
}

fn cmd_validate(args: &ValidateArgs) -> CliResult<()> {
    let mut sets = catalog();
    if let Some(path) = &args.extra_coeffs {
        ExtraCoeffs::load(path)?.apply(&mut sets)?;
    }
    let mut ok = true;
    let zero = Rational64::from_integer(0);
    for c in &sets {
        let residuals = c.order_residuals();
        let bad: Vec<(usize, Rational64)> = residuals
            .iter()
            .enumerate()
            .filter(|(_, r)| **r != zero)
            .map(|(q, r)| (q, *r))
            .collect();
        if bad.is_empty() {
            println!("method {}: order {} conditions hold exactly", c.name(), c.order());
        } else {
            ok = false;
            for (q, r) in bad {
                println!("method {}: order condition q={q} violated, residual {r}", c.name());
            }
        }
    }
    let opts = BuildOptions {
        nx: 20,
        ..BuildOptions::default()
    };
    for name in PROBLEM_NAMES {
        let pr = ProblemFile {
            kind: name.to_string(),
            ..ProblemFile::default()
        }
        .build(&opts)?;
        let samples: Vec<Vec<f64>> = (1..=5)
            .map(|k| {
                pr.y0()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v.max(1e-3) * (1.0 + 0.1 * ((k * (i + 1)) % 7) as f64))
                    .collect()
            })
            .collect();
        let residual = check_conservativity(&pr, &samples)?;
        if residual == 0.0 {
            println!("problem {name}: conservative");
        } else {
            ok = false;
            println!("problem {name}: conservativity residual {residual:e}");
        }
    }
    if ok {
        Ok(())
    } else {
        Err(CliError::Validation)
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Convergence(a) => cmd_convergence(a),
        Command::WorkPrecision(a) => cmd_work_precision(a),
        Command::Validate(a) => cmd_validate(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
