//! Reference solutions, error metrics and convergence / work-precision studies.

use std::fmt::Write as _;
use std::io;
use std::time::Instant;

use rayon::prelude::*;

use crate::coefficients::LmCoefficients;
use crate::error::{Error, Result};
use crate::integrator::{grid_steps, Integrator, IntegratorOptions, Trajectory};
use crate::pds::PdsProblem;
use crate::problems::DiffusionGrid;

/// Reference step is `h_min / REFERENCE_REFINEMENT`.
pub const REFERENCE_REFINEMENT: usize = 4;
/// Errors below this fraction of `max_n ||ref||_inf` count as round-off.
pub const PLATEAU_FRACTION: f64 = 1e-12;

/// Error measure of a convergence study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// `E(h) = max_n ||ref - y||_inf`
    MaxAbs,
    /// Componentwise RMS error over mean reference value, averaged over components.
    MeanRelative,
    /// `E(h) / max_n ||ref||_inf`
    RelativeMax,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::MaxAbs => "max",
            Metric::MeanRelative => "mean-rel",
            Metric::RelativeMax => "rel-max",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Metric::MaxAbs),
            "mean-rel" => Ok(Metric::MeanRelative),
            "rel-max" => Ok(Metric::RelativeMax),
            other => Err(Error::Config(format!(
                "unknown metric `{other}` (expected max, mean-rel or rel-max)"
            ))),
        }
    }

    /// Metric reported for each built-in problem in the published tables.
    pub fn default_for(problem: &str) -> Self {
        match problem {
            "saceirqd" => Metric::RelativeMax,
            "diffusion" => Metric::MeanRelative,
            _ => Metric::MaxAbs,
        }
    }
}

/// Exponent range `m` of `h = 2^-m` used in the published tables.
pub fn default_exponents(problem: &str) -> Option<(i32, i32)> {
    match problem {
        "linear" => Some((5, 11)),
        "algal" => Some((3, 9)),
        "brusselator" => Some((5, 12)),
        "saceirqd" => Some((1, 8)),
        "diffusion" => Some((9, 12)),
        "appendix" => Some((5, 11)),
        _ => None,
    }
}

/// Constant the published table headers multiply `h` by; reported as
/// metadata only.
pub fn reported_h_scale(problem: &str) -> Option<f64> {
    match problem {
        "algal" => Some(1.07),
        "brusselator" => Some(0.80),
        "saceirqd" => Some(0.35),
        _ => None,
    }
}

/// What `h = base / 2^m` is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HBase {
    #[default]
    Unit,
    Horizon,
}

impl HBase {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "unit" | "1" => Ok(HBase::Unit),
            "horizon" | "T" => Ok(HBase::Horizon),
            other => Err(Error::Config(format!(
                "unknown h base `{other}` (expected unit or horizon)"
            ))),
        }
    }
}

/// `h = base / 2^m`, checked against the grid of `problem`.
pub fn step_from_exponent(problem: &PdsProblem, m: i32, base: HBase) -> Result<f64> {
    let b = match base {
        HBase::Unit => 1.0,
        HBase::Horizon => problem.horizon,
    };
    let h = b * 2f64.powi(-m);
    grid_steps(problem.horizon, h)?;
    Ok(h)
}

/// Step sizes for `m0..=m1`, coarsest first.
pub fn step_ladder(problem: &PdsProblem, m0: i32, m1: i32, base: HBase) -> Result<Vec<f64>> {
    if m0 > m1 {
        return Err(Error::Config(format!("empty exponent range {m0}:{m1}")));
    }
    (m0..=m1).map(|m| step_from_exponent(problem, m, base)).collect()
}

/// Exact or numerically converged solution used to measure errors.
#[derive(Clone)]
pub enum Reference {
    Analytic(PdsProblem),
    /// States at `t = i * spacing`.
    Sampled {
        spacing: f64,
        dim: usize,
        data: Vec<f64>,
        /// `max_n ||fine - finer||_inf` between the two reference runs.
        self_convergence: f64,
    },
}

impl std::fmt::Debug for Reference {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Reference::Analytic(p) => write!(f, "Reference::Analytic({})", p.label),
            Reference::Sampled {
                spacing,
                dim,
                data,
                self_convergence,
            } => f
                .debug_struct("Reference::Sampled")
                .field("spacing", spacing)
                .field("dim", dim)
                .field("samples", &(data.len() / dim.max(&1)))
                .field("self_convergence", self_convergence)
                .finish(),
        }
    }
}

impl Reference {
    /// Writes the reference value at `t = n h` into `out`.
    pub fn fill(&self, h: f64, n: usize, out: &mut [f64]) -> Result<()> {
        match self {
            Reference::Analytic(p) => {
                let f = p.analytic.as_ref().expect("analytic reference");
                f(n as f64 * h, out);
                Ok(())
            }
            Reference::Sampled {
                spacing, dim, data, ..
            } => {
                let ratio = h / spacing;
                let r = ratio.round();
                if r < 1.0 || (ratio - r).abs() > 1e-9 * ratio {
                    return Err(Error::Reference(format!(
                        "step {h} is not a multiple of the reference spacing {spacing}"
                    )));
                }
                let i = n * r as usize;
                let chunk = data.get(i * dim..(i + 1) * dim).ok_or_else(|| {
                    Error::Reference(format!("t = {} lies beyond the reference", n as f64 * h))
                })?;
                out.copy_from_slice(chunk);
                Ok(())
            }
        }
    }

    pub fn self_convergence(&self) -> f64 {
        match self {
            Reference::Analytic(_) => 0.0,
            Reference::Sampled {
                self_convergence, ..
            } => *self_convergence,
        }
    }
}

/// Integrator used for numerical reference solutions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum ReferenceIntegrator {
    /// Explicit sixth-order Runge-Kutta with compensated updates.
    #[default]
    Rk6,
    /// A catalog method by name.
    Method(String),
}

/// Analytic solution when the problem carries one; otherwise a fine-step
/// run at `h_min / REFERENCE_REFINEMENT` of the sixth-order Runge-Kutta
/// integrator, checked against a run at half that step.
pub fn reference_solution(problem: &PdsProblem, h_min: f64, tol: f64) -> Result<Reference> {
    reference_solution_with(problem, h_min, tol, &ReferenceIntegrator::Rk6, REFERENCE_REFINEMENT)
}

/// Fails if the two runs differ by more than `tol * max_n ||ref||_inf`.
pub fn reference_solution_with(
    problem: &PdsProblem,
    h_min: f64,
    tol: f64,
    integrator: &ReferenceIntegrator,
    refinement: usize,
) -> Result<Reference> {
    if problem.analytic.is_some() {
        return Ok(Reference::Analytic(problem.clone()));
    }
    let refinement = refinement.max(1);
    let fine = h_min / refinement as f64;
    let run = |h: f64, stride: usize| -> Result<Trajectory> {
        let traj = match integrator {
            ReferenceIntegrator::Rk6 => crate::integrator::rk6_run(problem, h, stride),
            ReferenceIntegrator::Method(name) => Integrator::by_name(problem, name)
                .and_then(|i| i.record_every(stride).run(h)),
        };
        traj.map_err(|e| Error::Reference(format!("reference run at h = {h}: {e}")))
    };
    let (a, b) = rayon::join(|| run(fine, refinement), || run(fine / 2.0, 2 * refinement));
    let (a, b) = (a?, b?);
    if a.len() != b.len() {
        return Err(Error::Reference("reference runs recorded different grids".into()));
    }
    let mut diff = 0.0_f64;
    let mut scale = 0.0_f64;
    for (ya, yb) in a.states().zip(b.states()) {
        for (u, v) in ya.iter().zip(yb) {
            diff = diff.max((u - v).abs());
            scale = scale.max(v.abs());
        }
    }
    if !(diff <= tol * scale) {
        return Err(Error::Reference(format!(
            "reference not self-converged: difference {diff:e} exceeds {tol:e} x {scale:e}"
        )));
    }
    log::info!(
        "{} reference at h = {fine:e}: self-convergence {diff:e}",
        problem.label
    );
    Ok(Reference::Sampled {
        spacing: h_min,
        dim: problem.dim(),
        data: b.states().flatten().copied().collect(),
        self_convergence: diff,
    })
}

fn check_grid(traj: &Trajectory) -> Result<()> {
    if traj.step_indices().iter().enumerate().any(|(i, &n)| i != n) {
        return Err(Error::Metric("trajectory must record every step".into()));
    }
    Ok(())
}

fn for_each_pair(
    traj: &Trajectory,
    reference: &Reference,
    mut f: impl FnMut(usize, &[f64], &[f64]),
) -> Result<()> {
    check_grid(traj)?;
    let mut r = vec![0.0; traj.dim()];
    for (n, y) in traj.states().enumerate() {
        reference.fill(traj.h, n, &mut r)?;
        f(n, y, &r);
    }
    Ok(())
}

/// `max_n ||ref - y^n||_inf`
pub fn max_abs_error(traj: &Trajectory, reference: &Reference) -> Result<f64> {
    let mut e = 0.0_f64;
    for_each_pair(traj, reference, |_, y, r| {
        for (a, b) in y.iter().zip(r) {
            e = e.max((a - b).abs());
        }
    })?;
    Ok(e)
}

/// `max_n ||ref||_inf` over the trajectory grid.
pub fn reference_max_norm(traj: &Trajectory, reference: &Reference) -> Result<f64> {
    let mut m = 0.0_f64;
    for_each_pair(traj, reference, |_, _, r| {
        m = r.iter().fold(m, |acc, v| acc.max(v.abs()));
    })?;
    Ok(m)
}

/// `E(h) / max_n ||ref||_inf`
pub fn relative_max_error(traj: &Trajectory, reference: &Reference) -> Result<f64> {
    let e = max_abs_error(traj, reference)?;
    let m = reference_max_norm(traj, reference)?;
    if m == 0.0 {
        return Err(Error::Metric("reference is identically zero".into()));
    }
    Ok(e / m)
}

/// `(1/N) sum_i sqrt(mean_n (ref_i - y_i)^2) / mean_n ref_i` over steps `1..=n`.
pub fn mean_relative_error(traj: &Trajectory, reference: &Reference) -> Result<f64> {
    let n = traj.dim();
    let mut sq = vec![0.0; n];
    let mut sum = vec![0.0; n];
    let mut count = 0usize;
    for_each_pair(traj, reference, |step, y, r| {
        if step == 0 {
            return;
        }
        count += 1;
        for i in 0..n {
            sq[i] += (r[i] - y[i]).powi(2);
            sum[i] += r[i];
        }
    })?;
    if count == 0 {
        return Err(Error::Metric("no steps after t = 0".into()));
    }
    let c = count as f64;
    let mut total = 0.0;
    for i in 0..n {
        if sum[i] == 0.0 {
            return Err(Error::Metric(format!("reference component {i} sums to zero")));
        }
        total += (sq[i] / c).sqrt() / (sum[i] / c);
    }
    Ok(total / n as f64)
}

pub fn metric_value(metric: Metric, traj: &Trajectory, reference: &Reference) -> Result<f64> {
    match metric {
        Metric::MaxAbs => max_abs_error(traj, reference),
        Metric::MeanRelative => mean_relative_error(traj, reference),
        Metric::RelativeMax => relative_max_error(traj, reference),
    }
}

/// `log2(E(h) / E(h/2))`
pub fn observed_order(coarse: f64, fine: f64) -> f64 {
    (coarse / fine).log2()
}

/// Residuals of a diffusion run against the initial profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassResidual {
    /// `dx max_n sum_j |v_j - f(x_j)|`
    pub r_h: f64,
    /// `dx max_n |sum_j v_j - sum_j f(x_j)|`
    pub conservation: f64,
}

pub fn mass_residual(traj: &Trajectory, grid: &DiffusionGrid) -> Result<MassResidual> {
    let f = grid.initial_values();
    if f.len() != traj.dim() {
        return Err(Error::DimensionMismatch {
            expected: f.len(),
            got: traj.dim(),
        });
    }
    let total: f64 = f.iter().sum();
    let mut r_h = 0.0_f64;
    let mut cons = 0.0_f64;
    for y in traj.states() {
        r_h = r_h.max(y.iter().zip(&f).map(|(v, fj)| (v - fj).abs()).sum());
        cons = cons.max((y.iter().sum::<f64>() - total).abs());
    }
    Ok(MassResidual {
        r_h: grid.dx() * r_h,
        conservation: grid.dx() * cons,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub h: f64,
    pub error: f64,
    /// Undefined on the first row.
    pub p_hat: Option<f64>,
    /// Relative mass drift, or the absolute discrete-mass residual for diffusion.
    pub conservation_residual: f64,
    pub min_component: f64,
    pub wall_time_s: f64,
    /// Only for diffusion studies.
    pub r_h: Option<f64>,
    /// `max_n ||ref||_inf`, used to detect the round-off plateau.
    pub ref_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub method: String,
    pub problem: String,
    pub metric: Metric,
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceReport {
    /// Errors below this value count as round-off.
    pub fn plateau_threshold(&self, row: &ConvergenceRow) -> f64 {
        match self.metric {
            Metric::MaxAbs => PLATEAU_FRACTION * row.ref_norm,
            Metric::MeanRelative | Metric::RelativeMax => PLATEAU_FRACTION,
        }
    }

    fn above_plateau(&self, row: &ConvergenceRow) -> bool {
        row.error >= self.plateau_threshold(row)
    }

    /// Rates whose pair lies above the round-off plateau, coarsest first.
    pub fn rates_before_plateau(&self) -> Vec<f64> {
        self.rows
            .windows(2)
            .take_while(|w| self.above_plateau(&w[0]) && self.above_plateau(&w[1]))
            .filter_map(|w| w[1].p_hat)
            .collect()
    }

    /// Rate of the last pair before the plateau.
    pub fn final_rate(&self) -> Option<f64> {
        self.rates_before_plateau().last().copied()
    }

    pub fn max_rate(&self) -> Option<f64> {
        self.rates_before_plateau().into_iter().reduce(f64::max)
    }

    pub fn has_r_h(&self) -> bool {
        self.rows.iter().any(|r| r.r_h.is_some())
    }

    /// CSV text; `timing = false` drops the wall-time column.
    pub fn to_csv(&self, timing: bool) -> String {
        let mut s = String::new();
        s.push_str("method,problem,h,metric,error,p_hat,conservation_residual,min_component");
        if timing {
            s.push_str(",wall_time_s");
        }
        let r_h = self.has_r_h();
        if r_h {
            s.push_str(",r_h");
        }
        s.push('\n');
        for row in &self.rows {
            let _ = write!(
                s,
                "{},{},{},{},{},{},{},{}",
                self.method,
                self.problem,
                fmt_float(row.h),
                self.metric.name(),
                fmt_float(row.error),
                row.p_hat.map(fmt_float).unwrap_or_else(|| "NA".into()),
                fmt_float(row.conservation_residual),
                fmt_float(row.min_component),
            );
            if timing {
                let _ = write!(s, ",{}", fmt_float(row.wall_time_s));
            }
            if r_h {
                let _ = write!(s, ",{}", row.r_h.map(fmt_float).unwrap_or_else(|| "NA".into()));
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, w: &mut impl io::Write) -> Result<()> {
        w.write_all(self.to_csv(true).as_bytes())?;
        Ok(())
    }

    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let mut s = format!("{} on {} ({})\n", self.method, self.problem, self.metric.name());
        let _ = writeln!(s, "{:>14} {:>12} {:>7} {:>12} {:>12}", "h", "error", "p_hat", "mass", "min");
        for row in &self.rows {
            let _ = writeln!(
                s,
                "{:>14.6e} {:>12.3e} {:>7} {:>12.3e} {:>12.3e}",
                row.h,
                row.error,
                row.p_hat.map(|p| format!("{p:.2}")).unwrap_or_else(|| "-".into()),
                row.conservation_residual,
                row.min_component
            );
        }
        s
    }
}

/// Floats with 17 significant digits.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Settings shared by studies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudyOptions {
    pub metric: Metric,
    pub integrator: IntegratorOptions,
    /// Grid used for the diffusion residual columns.
    pub diffusion: Option<DiffusionGrid>,
    /// Maximum concurrent cells; 1 runs sequentially.
    pub jobs: usize,
}

impl StudyOptions {
    pub fn new(metric: Metric) -> Self {
        Self {
            metric,
            integrator: IntegratorOptions::default(),
            diffusion: None,
            jobs: 1,
        }
    }
}

fn run_cells<T: Send>(jobs: usize, n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    if jobs <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

/// Runs `coeffs` at every `h` (coarsest first) and tabulates errors and rates.
pub fn convergence_study(
    problem: &PdsProblem,
    coeffs: &LmCoefficients,
    h_list: &[f64],
    reference: &Reference,
    opts: &StudyOptions,
) -> Result<ConvergenceReport> {
    if h_list.windows(2).any(|w| ((w[0] / w[1]) - 2.0).abs() > 1e-12) {
        return Err(Error::Config("step sizes must halve from row to row".into()));
    }
    let integrator = Integrator::new(problem, coeffs.clone())?.options(IntegratorOptions {
        record_every: 1,
        ..opts.integrator
    });
    let cells = run_cells(opts.jobs, h_list.len(), |i| {
        let h = h_list[i];
        let start = Instant::now();
        let traj = integrator.run(h)?;
        let wall = start.elapsed().as_secs_f64();
        let error = metric_value(opts.metric, &traj, reference)?;
        let ref_norm = reference_max_norm(&traj, reference)?;
        let (conservation_residual, r_h) = match &opts.diffusion {
            Some(grid) => {
                let m = mass_residual(&traj, grid)?;
                (m.conservation, Some(m.r_h))
            }
            None => (traj.relative_mass_residual(), None),
        };
        Ok(ConvergenceRow {
            h,
            error,
            p_hat: None,
            conservation_residual,
            min_component: traj.summary.min_component,
            wall_time_s: wall,
            r_h,
            ref_norm,
        })
    })?;
    let mut rows = cells;
    for i in 1..rows.len() {
        rows[i].p_hat = Some(observed_order(rows[i - 1].error, rows[i].error));
    }
    Ok(ConvergenceReport {
        method: coeffs.name().to_string(),
        problem: problem.label.clone(),
        metric: opts.metric,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkPrecisionRow {
    pub method: String,
    pub problem: String,
    pub h: f64,
    pub error: f64,
    pub time_median_s: f64,
    pub time_mean_s: f64,
    pub repeats: usize,
}

/// Times `repeats` runs per `(method, h)` after one discarded warm-up run.
/// Cells always run one at a time so timings do not interfere.
pub fn work_precision(
    problem: &PdsProblem,
    methods: &[LmCoefficients],
    h_list: &[f64],
    repeats: usize,
    reference: &Reference,
    opts: &StudyOptions,
) -> Result<Vec<WorkPrecisionRow>> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(methods.len() * h_list.len());
    for coeffs in methods {
        let integrator = Integrator::new(problem, coeffs.clone())?.options(IntegratorOptions {
            record_every: 1,
            ..opts.integrator
        });
        for &h in h_list {
            let traj = integrator.run(h)?;
            let error = metric_value(opts.metric, &traj, reference)?;
            let mut times = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let start = Instant::now();
                std::hint::black_box(integrator.run(h)?);
                times.push(start.elapsed().as_secs_f64());
            }
            times.sort_by(f64::total_cmp);
            let median = if repeats % 2 == 1 {
                times[repeats / 2]
            } else {
                0.5 * (times[repeats / 2 - 1] + times[repeats / 2])
            };
            let mean = times.iter().sum::<f64>() / repeats as f64;
            out.push(WorkPrecisionRow {
                method: coeffs.name().to_string(),
                problem: problem.label.clone(),
                h,
                error,
                time_median_s: if repeats == 1 { mean } else { median },
                time_mean_s: mean,
                repeats,
            });
        }
    }
    Ok(out)
}

pub fn work_precision_csv(rows: &[WorkPrecisionRow]) -> String {
    let mut s = String::from("method,problem,h,error,time_median_s,time_mean_s,repeats\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.method,
            r.problem,
            fmt_float(r.h),
            fmt_float(r.error),
            fmt_float(r.time_median_s),
            fmt_float(r.time_mean_s),
            r.repeats
        );
    }
    s
}
