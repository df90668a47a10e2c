//! Modified Patankar linear multistep integration.
//!
//! One step of an order-`p` method solves `p` linear systems: the
//! `p - 1` levels of the weight-denominator ladder, then the outer system.
//! Production matrices and loss vectors are evaluated once per history
//! state and shared by every level.

use std::collections::VecDeque;

use crate::coefficients::{method, LmCoefficients, MethodLadder};
use crate::error::{Error, Result};
use crate::linsolve::{self, PdTerms, SystemMatrix};
use crate::matrix::Matrix;
use crate::pds::{rhs_into, PdsProblem};

/// Smallest positive normal double, the default positivity floor.
pub const DEFAULT_FLOOR: f64 = f64::MIN_POSITIVE;

/// A stored state together with its rate evaluations.
#[derive(Debug, Clone)]
pub struct HistoryEntry {
    pub state: Vec<f64>,
    pub production: Matrix,
    pub loss: Vec<f64>,
}

impl HistoryEntry {
    pub fn new(problem: &PdsProblem, state: Vec<f64>) -> Result<Self> {
        let n = problem.dim();
        if state.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: state.len(),
            });
        }
        let mut production = Matrix::zeros(n, problem.structure());
        let mut loss = vec![0.0; n];
        problem.system.evaluate(&state, &mut production, &mut loss);
        Ok(Self {
            state,
            production,
            loss,
        })
    }

    fn terms(&self) -> PdTerms<'_> {
        PdTerms {
            production: &self.production,
            loss: &self.loss,
        }
    }
}

/// The last `capacity` states, newest first: `get(1)` is `y^{n-1}`.
#[derive(Debug, Clone)]
pub struct StepHistory {
    entries: VecDeque<HistoryEntry>,
    capacity: usize,
}

impl StepHistory {
    pub fn new(capacity: usize) -> Self {
        Self {
            entries: VecDeque::with_capacity(capacity.max(1)),
            capacity: capacity.max(1),
        }
    }

    /// Builds a history from states listed oldest first.
    pub fn from_states(problem: &PdsProblem, states: &[Vec<f64>], capacity: usize) -> Result<Self> {
        let mut h = Self::new(capacity);
        for s in states {
            h.push(problem, s.clone())?;
        }
        Ok(h)
    }

    /// Appends the newest state, dropping the oldest when full.
    pub fn push(&mut self, problem: &PdsProblem, state: Vec<f64>) -> Result<()> {
        let entry = HistoryEntry::new(problem, state)?;
        if self.entries.len() == self.capacity {
            self.entries.pop_back();
        }
        self.entries.push_front(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `y^{n-r}` for `r >= 1`.
    pub fn state(&self, r: usize) -> &[f64] {
        &self.entries[r - 1].state
    }

    pub fn newest(&self) -> &[f64] {
        self.state(1)
    }

    fn terms(&self) -> Vec<PdTerms<'_>> {
        self.entries.iter().map(HistoryEntry::terms).collect()
    }

    /// `sum_r alpha_r y^{n-r}`
    fn combine(&self, alpha: &[f64]) -> Vec<f64> {
        let mut b = vec![0.0; self.entries[0].state.len()];
        for (a, e) in alpha.iter().zip(&self.entries) {
            if *a != 0.0 {
                for (bi, yi) in b.iter_mut().zip(&e.state) {
                    *bi += a * yi;
                }
            }
        }
        b
    }

    fn require(&self, k: usize) -> Result<()> {
        if self.entries.len() < k {
            return Err(Error::InvalidProblem(format!(
                "history holds {} states but {k} are required",
                self.entries.len()
            )));
        }
        Ok(())
    }
}

/// How Patankar weight denominators are produced.
#[derive(Debug, Clone, PartialEq)]
pub enum PwdStrategy {
    /// Recursive embedding through a ladder of lower-order methods.
    Embedding(MethodLadder),
    /// `sigma = y^{n-1}`; first-order accurate, kept for experiments.
    Lagged,
}

/// Configuration of the startup procedure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StartupConfig {
    /// Runge-Kutta substeps per interval before any refinement.
    pub substeps: usize,
    /// Maximum number of substep doublings.
    pub max_depth: u32,
}

impl Default for StartupConfig {
    fn default() -> Self {
        Self {
            substeps: 4,
            max_depth: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorOptions {
    /// Check the M-matrix property of every assembled system.
    pub validate: bool,
    /// Exact zeros in a solution are lifted to this value.
    pub floor: f64,
    /// Keep every `record_every`-th state (the final state is always kept).
    pub record_every: usize,
    pub startup: StartupConfig,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        Self {
            validate: false,
            floor: DEFAULT_FLOOR,
            record_every: 1,
            startup: StartupConfig::default(),
        }
    }
}

/// Per-recorded-state diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    pub min_component: f64,
    /// `|e^T y^n - e^T y^0|`
    pub mass_residual: f64,
    /// Components lifted to the floor in this step.
    pub clamps: usize,
}

/// Totals over every step, recorded or not.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub steps: usize,
    pub min_component: f64,
    pub max_mass_residual: f64,
    pub clamps: usize,
    pub linear_solves: usize,
    /// Substeps per interval the startup finished with.
    pub startup_substeps: usize,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub method: String,
    pub h: f64,
    dim: usize,
    steps: Vec<usize>,
    times: Vec<f64>,
    states: Vec<f64>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub summary: RunSummary,
    invariant: f64,
}

impl Trajectory {
    fn new(method: &str, h: f64, y0: &[f64]) -> Self {
        Self {
            method: method.to_string(),
            h,
            dim: y0.len(),
            steps: Vec::new(),
            times: Vec::new(),
            states: Vec::new(),
            diagnostics: Vec::new(),
            summary: RunSummary {
                steps: 0,
                min_component: f64::INFINITY,
                max_mass_residual: 0.0,
                clamps: 0,
                linear_solves: 0,
                startup_substeps: 0,
            },
            invariant: y0.iter().sum(),
        }
    }

    fn observe(&mut self, n: usize, h: f64, y: &[f64], clamps: usize, keep: bool) {
        let min_component = y.iter().copied().fold(f64::INFINITY, f64::min);
        let mass_residual = (y.iter().sum::<f64>() - self.invariant).abs();
        let s = &mut self.summary;
        s.steps = n;
        s.min_component = s.min_component.min(min_component);
        s.max_mass_residual = s.max_mass_residual.max(mass_residual);
        s.clamps += clamps;
        if keep {
            self.steps.push(n);
            self.times.push(n as f64 * h);
            self.states.extend_from_slice(y);
            self.diagnostics.push(StepDiagnostics {
                min_component,
                mass_residual,
                clamps,
            });
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of recorded states.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Step indices of the recorded states.
    pub fn step_indices(&self) -> &[usize] {
        &self.steps
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.dim.max(1))
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    /// `e^T y^0`
    pub fn invariant(&self) -> f64 {
        self.invariant
    }

    /// `max_n |e^T y^n - e^T y^0| / e^T y^0`
    pub fn relative_mass_residual(&self) -> f64 {
        self.summary.max_mass_residual / self.invariant.abs()
    }
}

/// Number of steps `T / h`, which must be a whole number.
pub fn grid_steps(horizon: f64, h: f64) -> Result<usize> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Grid(format!("step size must be positive, got {h}")));
    }
    let ratio = horizon / h;
    let n = ratio.round();
    if n < 1.0 || (ratio - n).abs() > 1e-12 * ratio.max(1.0) {
        return Err(Error::Grid(format!(
            "T/h = {horizon}/{h} = {ratio} is not a positive integer"
        )));
    }
    Ok(n as usize)
}

fn check_finite(step: usize, y: &[f64]) -> Result<()> {
    match y.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { step, index }),
        None => Ok(()),
    }
}

fn lift(y: &mut [f64], floor: f64) -> usize {
    let mut lifted = 0;
    for v in y.iter_mut() {
        if *v <= 0.0 {
            *v = floor;
            lifted += 1;
        }
    }
    lifted
}

fn validate_matrix(step: usize, m: &SystemMatrix) -> Result<()> {
    let report = linsolve::verify_mmatrix(m);
    if report.passed() {
        Ok(())
    } else {
        Err(Error::NotMMatrix {
            step,
            detail: report
                .violations
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("; "),
        })
    }
}

/// Shared solve for ladder levels and outer steps.
struct Stepper<'a> {
    h: f64,
    step: usize,
    validate: bool,
    floor: f64,
    solves: &'a mut usize,
}

impl Stepper<'_> {
    fn solve(
        &mut self,
        history: &StepHistory,
        coeffs: &LmCoefficients,
        sigma: &[f64],
    ) -> Result<(Vec<f64>, usize)> {
        let k = coeffs.steps();
        history.require(k)?;
        let terms = history.terms();
        let system = linsolve::assemble_split(&terms[..k], coeffs.beta(), sigma, self.h)
            .map_err(|source| Error::Step {
                step: self.step,
                source,
            })?;
        if self.validate {
            validate_matrix(self.step, &system.matrix)?;
        }
        let b = history.combine(coeffs.alpha());
        let sol = linsolve::solve_split(&system, &b).map_err(|source| Error::Step {
            step: self.step,
            source,
        })?;
        *self.solves += 1;
        let mut x = sol.x;
        check_finite(self.step, &x)?;
        let lifted = lift(&mut x, self.floor);
        Ok((x, lifted))
    }
}

/// One modified Patankar Euler step `(I - h Phi(y)) y^n = y` with `sigma = y`.
pub fn mpe_step(y_prev: &[f64], h: f64, problem: &PdsProblem) -> Result<Vec<f64>> {
    let mut history = StepHistory::new(1);
    history.push(problem, y_prev.to_vec())?;
    let mpe = method("mpe")?;
    let mut solves = 0;
    let mut s = Stepper {
        h,
        step: 1,
        validate: false,
        floor: DEFAULT_FLOOR,
        solves: &mut solves,
    };
    Ok(s.solve(&history, &mpe, y_prev)?.0)
}

/// Weight denominators `sigma^{n(s)}` for every ladder level, starting with
/// `sigma^{n(0)} = y^{n-1}`. The last entry is the one used by the outer step.
pub fn pwd_levels(history: &StepHistory, h: f64, ladder: &MethodLadder) -> Result<Vec<Vec<f64>>> {
    let mut solves = 0;
    pwd_levels_inner(
        history,
        ladder,
        &mut Stepper {
            h,
            step: 0,
            validate: false,
            floor: DEFAULT_FLOOR,
            solves: &mut solves,
        },
    )
    .map(|(levels, _)| levels)
}

fn pwd_levels_inner(
    history: &StepHistory,
    ladder: &MethodLadder,
    stepper: &mut Stepper<'_>,
) -> Result<(Vec<Vec<f64>>, usize)> {
    history.require(1)?;
    let mut levels = vec![history.newest().to_vec()];
    let mut lifted = 0;
    for (s, level) in ladder.levels().iter().enumerate() {
        let prev = levels.last().unwrap();
        let (sigma, l) = stepper.solve(history, level, prev).map_err(|e| match e {
            Error::Step {
                step,
                source: crate::error::LinsolveError::PwdViolation { index, value },
            } => Error::PwdInvariant {
                step,
                level: s,
                index,
                value,
            },
            other => other,
        })?;
        lifted += l;
        levels.push(sigma);
    }
    Ok((levels, lifted))
}

/// `sigma^{n(p-1)}` computed from the history alone.
pub fn compute_pwd_ladder(history: &StepHistory, h: f64, ladder: &MethodLadder) -> Result<Vec<f64>> {
    Ok(pwd_levels(history, h, ladder)?.pop().unwrap())
}

/// Solves the outer system of one MPLM step for a given `sigma`.
pub fn mplm_step(
    history: &StepHistory,
    h: f64,
    coeffs: &LmCoefficients,
    sigma: &[f64],
) -> Result<Vec<f64>> {
    let mut solves = 0;
    Stepper {
        h,
        step: 0,
        validate: false,
        floor: DEFAULT_FLOOR,
        solves: &mut solves,
    }
    .solve(history, coeffs, sigma)
    .map(|(y, _)| y)
}

// Seven-stage sixth-order explicit Runge-Kutta tableau.
const RK_C: [f64; 7] = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0, 0.5, 0.5, 1.0];
const RK_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 3.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 2.0 / 3.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 12.0, 1.0 / 3.0, -1.0 / 12.0, 0.0, 0.0, 0.0],
    [-1.0 / 16.0, 9.0 / 8.0, -3.0 / 16.0, -3.0 / 8.0, 0.0, 0.0],
    [0.0, 9.0 / 8.0, -3.0 / 8.0, -3.0 / 4.0, 0.5, 0.0],
    [9.0 / 44.0, -9.0 / 11.0, 63.0 / 44.0, 18.0 / 11.0, 0.0, -16.0 / 11.0],
];
const RK_B: [f64; 7] = [
    11.0 / 120.0,
    0.0,
    27.0 / 40.0,
    27.0 / 40.0,
    -4.0 / 15.0,
    -4.0 / 15.0,
    11.0 / 120.0,
];

struct Rk6<'a> {
    problem: &'a PdsProblem,
    p: Matrix,
    k: Vec<Vec<f64>>,
    stage: Vec<f64>,
    /// Kahan compensation for the state update, used by [`Rk6::compensated_step`].
    carry: Vec<f64>,
}

impl<'a> Rk6<'a> {
    fn new(problem: &'a PdsProblem) -> Self {
        let n = problem.dim();
        debug_assert_eq!(RK_C.len(), RK_B.len());
        Self {
            problem,
            p: Matrix::zeros(n, problem.structure()),
            k: vec![vec![0.0; n]; 7],
            stage: vec![0.0; n],
            carry: vec![0.0; n],
        }
    }

    fn stages(&mut self, y: &[f64], dt: f64) {
        for s in 0..7 {
            self.stage.copy_from_slice(y);
            for (j, a) in RK_A[s][..s].iter().enumerate() {
                if *a != 0.0 {
                    for (st, kj) in self.stage.iter_mut().zip(&self.k[j]) {
                        *st += dt * a * kj;
                    }
                }
            }
            let (_, tail) = self.k.split_at_mut(s);
            rhs_into(self.problem, &self.stage, &mut self.p, &mut tail[0]);
        }
    }

    fn increment(&self, i: usize, dt: f64) -> f64 {
        let mut acc = 0.0;
        for (s, b) in RK_B.iter().enumerate() {
            acc += b * self.k[s][i];
        }
        dt * acc
    }

    /// One step with a compensated state update, so long runs do not
    /// accumulate the rounding of `y + dy`.
    fn compensated_step(&mut self, y: &mut [f64], dt: f64) {
        self.stages(y, dt);
        for i in 0..y.len() {
            let dy = self.increment(i, dt) - self.carry[i];
            let next = y[i] + dy;
            self.carry[i] = (next - y[i]) - dy;
            y[i] = next;
        }
    }

    fn step(&mut self, y: &mut [f64], dt: f64) {
        self.stages(y, dt);
        for (s, b) in RK_B.iter().enumerate() {
            if *b != 0.0 {
                for (yi, ki) in y.iter_mut().zip(&self.k[s]) {
                    *yi += dt * b * ki;
                }
            }
        }
    }

    /// Integrates one interval of length `h` with `substeps` steps and
    /// rescales to the invariant. Returns `None` on a non-positive or
    /// non-finite result.
    fn interval(&mut self, y0: &[f64], h: f64, substeps: usize, invariant: f64) -> Option<Vec<f64>> {
        let mut y = y0.to_vec();
        let dt = h / substeps as f64;
        for _ in 0..substeps {
            self.step(&mut y, dt);
        }
        if y.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return None;
        }
        let scale = invariant / y.iter().sum::<f64>();
        y.iter_mut().for_each(|v| *v *= scale);
        Some(y)
    }
}

/// Advances `count` intervals of length `h` from `y^0` with explicit
/// sixth-order Runge-Kutta sub-steps, rescaling each result to
/// `e^T y = e^T y^0`. A non-positive component doubles the substep count
/// (kept for later intervals) and retries the interval.
///
/// Returns the final substep count.
fn rk6_march(
    problem: &PdsProblem,
    h: f64,
    count: usize,
    config: StartupConfig,
    mut sink: impl FnMut(usize, &[f64]),
) -> Result<usize> {
    let invariant = problem.invariant();
    let mut rk = Rk6::new(problem);
    let mut substeps = config.substeps.max(1);
    let mut depth = 0;
    let mut y = problem.y0().to_vec();
    for interval in 1..=count {
        loop {
            if let Some(next) = rk.interval(&y, h, substeps, invariant) {
                y = next;
                break;
            }
            if depth == config.max_depth {
                return Err(Error::Startup {
                    interval,
                    reason: format!(
                        "no positive state after {} refinements ({substeps} substeps)",
                        config.max_depth
                    ),
                });
            }
            depth += 1;
            substeps *= 2;
            log::debug!("interval {interval}: refining to {substeps} Runge-Kutta substeps");
        }
        sink(interval, &y);
    }
    Ok(substeps)
}

/// Starting values `y^1 .. y^{count}` and the final substep count.
pub fn startup_states(
    problem: &PdsProblem,
    h: f64,
    count: usize,
    config: StartupConfig,
) -> Result<(Vec<Vec<f64>>, usize)> {
    let mut out = Vec::with_capacity(count);
    let substeps = rk6_march(problem, h, count, config, |_, y| out.push(y.to_vec()))?;
    Ok((out, substeps))
}

/// Whole-horizon run of the sixth-order Runge-Kutta scheme with compensated
/// updates and no rescaling (the scheme keeps linear invariants itself).
/// Used for reference solutions; fails on a non-positive state.
pub fn rk6_run(problem: &PdsProblem, h: f64, record_every: usize) -> Result<Trajectory> {
    let total = grid_steps(problem.horizon, h)?;
    let stride = record_every.max(1);
    let mut traj = Trajectory::new("rk6", h, problem.y0());
    traj.observe(0, h, problem.y0(), 0, true);
    let mut rk = Rk6::new(problem);
    let mut y = problem.y0().to_vec();
    for n in 1..=total {
        rk.compensated_step(&mut y, h);
        if y.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Startup {
                interval: n,
                reason: "reference run left the positive orthant".into(),
            });
        }
        traj.observe(n, h, &y, 0, n % stride == 0 || n == total);
    }
    traj.summary.startup_substeps = 1;
    Ok(traj)
}

/// `y^1 .. y^{k-1}` for `coeffs` on the grid of `problem`, truncated to the
/// number of grid steps when the horizon is shorter.
pub fn startup(problem: &PdsProblem, h: f64, coeffs: &LmCoefficients) -> Result<Vec<Vec<f64>>> {
    let total = grid_steps(problem.horizon, h)?;
    let count = (coeffs.steps() - 1).min(total);
    Ok(startup_states(problem, h, count, StartupConfig::default())?.0)
}

/// Integration driver for one problem and method.
#[derive(Debug, Clone)]
pub struct Integrator<'a> {
    problem: &'a PdsProblem,
    coeffs: LmCoefficients,
    strategy: PwdStrategy,
    options: IntegratorOptions,
}

impl<'a> Integrator<'a> {
    /// Uses the default ladder for the method's order.
    pub fn new(problem: &'a PdsProblem, coeffs: LmCoefficients) -> Result<Self> {
        let ladder = MethodLadder::for_method(&coeffs)?;
        Self::with_strategy(problem, coeffs, PwdStrategy::Embedding(ladder))
    }

    pub fn by_name(problem: &'a PdsProblem, name: &str) -> Result<Self> {
        Self::new(problem, method(name)?)
    }

    pub fn with_strategy(
        problem: &'a PdsProblem,
        coeffs: LmCoefficients,
        strategy: PwdStrategy,
    ) -> Result<Self> {
        if let PwdStrategy::Embedding(ladder) = &strategy {
            ladder.check_compatible(&coeffs)?;
        }
        Ok(Self {
            problem,
            coeffs,
            strategy,
            options: IntegratorOptions::default(),
        })
    }

    pub fn options(mut self, options: IntegratorOptions) -> Self {
        self.options = options;
        self
    }

    pub fn validate(mut self, on: bool) -> Self {
        self.options.validate = on;
        self
    }

    pub fn floor(mut self, floor: f64) -> Self {
        self.options.floor = floor;
        self
    }

    pub fn record_every(mut self, stride: usize) -> Self {
        self.options.record_every = stride.max(1);
        self
    }

    pub fn coefficients(&self) -> &LmCoefficients {
        &self.coeffs
    }

    pub fn run(&self, h: f64) -> Result<Trajectory> {
        if !(self.options.floor > 0.0) {
            return Err(Error::Config(format!(
                "positivity floor must be positive, got {}",
                self.options.floor
            )));
        }
        let problem = self.problem;
        let total = grid_steps(problem.horizon, h)?;
        let k = self.coeffs.steps();
        let stride = self.options.record_every.max(1);
        let keep = |n: usize| n % stride == 0 || n == total;

        let mut traj = Trajectory::new(self.coeffs.name(), h, problem.y0());
        let mut history = StepHistory::new(k);
        history.push(problem, problem.y0().to_vec())?;
        traj.observe(0, h, problem.y0(), 0, true);

        let start_count = (k - 1).min(total);
        let (starts, substeps) =
            startup_states(problem, h, start_count, self.options.startup)?;
        traj.summary.startup_substeps = if start_count > 0 { substeps } else { 0 };
        for (m, y) in starts.into_iter().enumerate() {
            traj.observe(m + 1, h, &y, 0, keep(m + 1));
            history.push(problem, y)?;
        }

        let mut solves = 0;
        for n in k..=total {
            let mut stepper = Stepper {
                h,
                step: n,
                validate: self.options.validate,
                floor: self.options.floor,
                solves: &mut solves,
            };
            let (sigma, lifted_sigma) = match &self.strategy {
                PwdStrategy::Embedding(ladder) => {
                    let (mut levels, l) = pwd_levels_inner(&history, ladder, &mut stepper)?;
                    (levels.pop().unwrap(), l)
                }
                PwdStrategy::Lagged => (history.newest().to_vec(), 0),
            };
            let (y, lifted) = stepper.solve(&history, &self.coeffs, &sigma)?;
            traj.observe(n, h, &y, lifted + lifted_sigma, keep(n));
            history.push(problem, y)?;
        }
        traj.summary.linear_solves = solves;
        if traj.summary.clamps > 0 {
            log::debug!(
                "{} on {}: {} component(s) lifted to the floor",
                self.coeffs.name(),
                problem.label,
                traj.summary.clamps
            );
        }
        Ok(traj)
    }
}

/// Integrates `problem` with the named catalog method. `ladder` replaces the
/// default weight-denominator ladder when given.
pub fn integrate(
    problem: &PdsProblem,
    method_name: &str,
    h: f64,
    ladder: Option<MethodLadder>,
) -> Result<Trajectory> {
    let coeffs = method(method_name)?;
    let integrator = match ladder {
        Some(l) => Integrator::with_strategy(problem, coeffs, PwdStrategy::Embedding(l))?,
        None => Integrator::new(problem, coeffs)?,
    };
    integrator.run(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pds::ProductionDestruction;
    use std::sync::Arc;

    struct Exchange;

    impl ProductionDestruction for Exchange {
        fn dim(&self) -> usize {
            2
        }
        fn production(&self, y: &[f64], p: &mut Matrix) {
            p.set(0, 1, y[1]);
            p.set(1, 0, 5.0 * y[0]);
        }
    }

    fn linear() -> PdsProblem {
        PdsProblem::new("linear", Arc::new(Exchange), vec![0.9, 0.1], 2.0, DEFAULT_FLOOR)
            .unwrap()
            .with_analytic(|t, y| {
                y[0] = 1.0 / 6.0 + (0.9 - 1.0 / 6.0) * (-6.0 * t).exp();
                y[1] = 1.0 - y[0];
            })
    }

    fn slope(hs: &[f64], errs: &[f64]) -> f64 {
        let n = hs.len() as f64;
        let xs: Vec<f64> = hs.iter().map(|h| h.log2()).collect();
        let ys: Vec<f64> = errs.iter().map(|e| e.log2()).collect();
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        num / den
    }

    #[test]
    fn mpe_matches_hand_solution() {
        let y = mpe_step(&[0.9, 0.1], 1.0, &linear()).unwrap();
        assert!((y[0] - 1.9 / 7.0).abs() < 1e-14);
        assert!((y[1] - 5.1 / 7.0).abs() < 1e-14);
    }

    #[test]
    fn mpe_with_zero_step_is_identity() {
        let y = mpe_step(&[0.9, 0.1], 0.0, &linear()).unwrap();
        assert_eq!(y, vec![0.9, 0.1]);
    }

    #[test]
    fn huge_step_stays_positive_and_conservative() {
        let pr = linear();
        for name in crate::coefficients::METHOD_NAMES {
            let mut hist = StepHistory::new(10);
            for _ in 0..10 {
                hist.push(&pr, pr.y0().to_vec()).unwrap();
            }
            let c = method(name).unwrap();
            let ladder = MethodLadder::for_method(&c).unwrap();
            let sigma = compute_pwd_ladder(&hist, 10.0, &ladder).unwrap();
            let y = mplm_step(&hist, 10.0, &c, &sigma).unwrap();
            assert!(y.iter().all(|v| *v > 0.0), "{name}: {y:?}");
            assert!((y[0] + y[1] - 1.0).abs() < 1e-14, "{name}");
        }
    }

    #[test]
    fn level_one_of_ladder_is_mpe() {
        let pr = linear();
        let y = vec![0.4, 0.6];
        let hist = StepHistory::from_states(&pr, &[y.clone()], 2).unwrap();
        let ladder = MethodLadder::for_order(2).unwrap();
        let sigma = compute_pwd_ladder(&hist, 0.3, &ladder).unwrap();
        assert_eq!(sigma, mpe_step(&y, 0.3, &pr).unwrap());
    }

    #[test]
    fn mpe_coefficients_with_lagged_sigma_equal_mpe_step() {
        let pr = linear();
        let y = vec![0.7, 0.3];
        let hist = StepHistory::from_states(&pr, &[y.clone()], 1).unwrap();
        let out = mplm_step(&hist, 0.25, &method("mpe").unwrap(), &y).unwrap();
        assert_eq!(out, mpe_step(&y, 0.25, &pr).unwrap());
    }

    #[test]
    fn zero_step_ladder_returns_alpha_combination() {
        let pr = linear();
        let states: Vec<Vec<f64>> = (0..4).map(|i| vec![0.2 + 0.1 * i as f64, 0.8 - 0.1 * i as f64]).collect();
        let hist = StepHistory::from_states(&pr, &states, 4).unwrap();
        let ladder = MethodLadder::for_order(4).unwrap();
        let levels = pwd_levels(&hist, 0.0, &ladder).unwrap();
        for (s, level) in ladder.levels().iter().enumerate() {
            let expect: Vec<f64> = (0..2)
                .map(|i| {
                    level
                        .alpha()
                        .iter()
                        .enumerate()
                        .map(|(r, a)| a * hist.state(r + 1)[i])
                        .sum()
                })
                .collect();
            for i in 0..2 {
                assert!((levels[s + 1][i] - expect[i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sigma_ignores_candidate_state() {
        let pr = linear();
        let traj = Integrator::by_name(&pr, "mplm-4-3").unwrap().run(0.125).unwrap();
        let states: Vec<Vec<f64>> = (0..4).map(|i| traj.state(i).to_vec()).collect();
        let hist = StepHistory::from_states(&pr, &states, 4).unwrap();
        let ladder = MethodLadder::for_order(3).unwrap();
        let a = compute_pwd_ladder(&hist, 0.125, &ladder).unwrap();
        let y = mplm_step(&hist, 0.125, &method("mplm-4-3").unwrap(), &a).unwrap();
        let _perturbed: Vec<f64> = y.iter().map(|v| v * 1.5).collect();
        let b = compute_pwd_ladder(&hist, 0.125, &ladder).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn startup_is_empty_for_one_step_methods() {
        assert!(startup(&linear(), 0.25, &method("mpe").unwrap()).unwrap().is_empty());
    }

    #[test]
    fn startup_is_conservative_and_accurate() {
        let pr = linear();
        let c = method("mplm-2-2").unwrap();
        let mut hs = Vec::new();
        let mut errs = Vec::new();
        for m in 5..=8 {
            let h = 2f64.powi(-m);
            let s = startup(&pr, h, &c).unwrap();
            assert_eq!(s.len(), 1);
            assert!((s[0][0] + s[0][1] - 1.0).abs() < 1e-15);
            let exact = pr.exact(h).unwrap();
            hs.push(h);
            errs.push((s[0][0] - exact[0]).abs().max((s[0][1] - exact[1]).abs()).max(1e-300));
        }
        // RK error sits far below h^2; only require it to shrink at least that fast.
        assert!(errs.iter().all(|e| *e < 1e-10), "{errs:?}");
    }

    #[test]
    fn short_horizon_truncates_startup() {
        let pr = linear();
        let traj = Integrator::by_name(&pr, "mplm-10-6").unwrap().run(0.5).unwrap();
        assert_eq!(traj.len(), 5);
        assert_eq!(traj.step_indices(), &[0, 1, 2, 3, 4]);
    }

    #[test]
    fn grid_must_divide_horizon() {
        assert_eq!(grid_steps(2.0, 0.25).unwrap(), 8);
        assert_eq!(grid_steps(10.0, 10.0 / 3.0).unwrap(), 3);
        assert!(matches!(grid_steps(2.0, 0.3), Err(Error::Grid(_))));
        assert!(grid_steps(2.0, 0.0).is_err());
    }

    #[test]
    fn mplm22_error_matches_published_scale() {
        let pr = linear();
        let h = 2f64.powi(-6);
        let traj = Integrator::by_name(&pr, "mplm-2-2").unwrap().run(h).unwrap();
        let e = traj
            .states()
            .zip(traj.times())
            .map(|(y, t)| {
                let ex = pr.exact(*t).unwrap();
                (y[0] - ex[0]).abs().max((y[1] - ex[1]).abs())
            })
            .fold(0.0, f64::max);
        assert!(e > 1.52e-3 / 3.0 && e < 1.52e-3 * 3.0, "{e}");
    }

    #[test]
    fn high_order_run_approaches_steady_state() {
        let pr = linear();
        let traj = Integrator::by_name(&pr, "mplm-10-6").unwrap().validate(true).run(2f64.powi(-5)).unwrap();
        assert_eq!(traj.len(), 65);
        assert!(traj.summary.min_component > 0.0);
        assert!(traj.relative_mass_residual() < 1e-14);
        let last = traj.last();
        assert!((last[0] - 1.0 / 6.0).abs() < 1e-4);
        assert!(traj.summary.linear_solves > 0);
    }

    #[test]
    fn lagged_weights_reduce_order() {
        let pr = linear();
        let c = method("mplm-4-3").unwrap();
        let mut errs = Vec::new();
        let hs: Vec<f64> = (6..=9).map(|m| 2f64.powi(-m)).collect();
        for &h in &hs {
            let traj = Integrator::with_strategy(&pr, c.clone(), PwdStrategy::Lagged)
                .unwrap()
                .run(h)
                .unwrap();
            let ex = pr.exact(2.0).unwrap();
            errs.push((traj.last()[0] - ex[0]).abs());
        }
        assert!(slope(&hs, &errs) < 1.5);
    }

    #[test]
    fn record_stride_keeps_final_state() {
        let pr = linear();
        let traj = Integrator::by_name(&pr, "mpe").unwrap().record_every(16).run(2f64.powi(-5)).unwrap();
        assert_eq!(traj.step_indices(), &[0, 16, 32, 48, 64]);
        assert_eq!(traj.summary.steps, 64);
    }
}
