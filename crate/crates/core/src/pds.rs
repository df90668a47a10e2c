//! Production-destruction systems `y' = (P(y) - D(y)) e`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::matrix::{Matrix, Structure};

/// Rates of a production-destruction system.
///
/// `production` fills `p_ij(y)`, the rate at which constituent `j` feeds
/// constituent `i`. Implementations must be pure functions of the state.
pub trait ProductionDestruction: Send + Sync {
    fn dim(&self) -> usize;

    /// Sparsity of the production matrix; used to pick the banded solver.
    fn structure(&self) -> Structure {
        Structure::Dense
    }

    /// Writes `P(y)` into `p`, which is zeroed and has [`Self::structure`].
    fn production(&self, y: &[f64], p: &mut Matrix);

    /// Writes `D(y)` into `d` (zeroed, transposed structure).
    ///
    /// Defaults to `P(y)^T`, which makes the system fully conservative.
    fn destruction(&self, y: &[f64], d: &mut Matrix) {
        let mut p = Matrix::zeros(self.dim(), self.structure());
        self.production(y, &mut p);
        p.for_each_stored(|i, j, v| {
            if v != 0.0 {
                d.set(j, i, v)
            }
        });
    }

    /// Writes `D(y) e` into `loss`.
    fn loss(&self, y: &[f64], loss: &mut [f64]) {
        let mut d = Matrix::zeros(self.dim(), self.structure().transposed());
        self.destruction(y, &mut d);
        d.row_sums_into(loss);
    }

    /// Writes `P(y)` into `p` and `D(y) e` into `loss` in one pass.
    ///
    /// Systems whose destruction matrix is `P^T` can override this with
    /// [`transpose_loss`] to skip building `D`.
    fn evaluate(&self, y: &[f64], p: &mut Matrix, loss: &mut [f64]) {
        self.production(y, p);
        self.loss(y, loss);
    }
}

/// `D e` for `D = P^T`, i.e. the column sums of `p`.
pub fn transpose_loss(p: &Matrix, loss: &mut [f64]) {
    loss.iter_mut().for_each(|l| *l = 0.0);
    p.for_each_stored(|_, j, v| loss[j] += v);
}

/// Exact solution `t -> y(t)`, written into the output slice.
pub type AnalyticSolution = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;

/// A production-destruction initial value problem on `[0, horizon]`.
#[derive(Clone)]
pub struct PdsProblem {
    pub label: String,
    pub system: Arc<dyn ProductionDestruction>,
    y0: Vec<f64>,
    pub horizon: f64,
    pub analytic: Option<AnalyticSolution>,
    /// Indices of `y0` that were raised to the positivity floor.
    pub floored: Vec<usize>,
}

impl fmt::Debug for PdsProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PdsProblem")
            .field("label", &self.label)
            .field("dim", &self.dim())
            .field("y0", &self.y0)
            .field("horizon", &self.horizon)
            .field("analytic", &self.analytic.is_some())
            .field("floored", &self.floored)
            .finish()
    }
}

impl PdsProblem {
    /// Builds a problem, replacing components of `y0` below `floor` by `floor`.
    pub fn new(
        label: impl Into<String>,
        system: Arc<dyn ProductionDestruction>,
        y0: Vec<f64>,
        horizon: f64,
        floor: f64,
    ) -> Result<Self> {
        let dim = system.dim();
        if dim == 0 {
            return Err(Error::InvalidProblem("dimension must be at least 1".into()));
        }
        if y0.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: y0.len(),
            });
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidProblem(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        let (y0, floored) = sanitize_initial(&y0, floor)?;
        Ok(Self {
            label: label.into(),
            system,
            y0,
            horizon,
            analytic: None,
            floored,
        })
    }

    pub fn with_analytic(mut self, f: impl Fn(f64, &mut [f64]) + Send + Sync + 'static) -> Self {
        self.analytic = Some(Arc::new(f));
        self
    }

    pub fn dim(&self) -> usize {
        self.system.dim()
    }

    pub fn y0(&self) -> &[f64] {
        &self.y0
    }

    /// `e^T y0`
    pub fn invariant(&self) -> f64 {
        self.y0.iter().sum()
    }

    pub fn structure(&self) -> Structure {
        self.system.structure()
    }

    pub fn exact(&self, t: f64) -> Option<Vec<f64>> {
        self.analytic.as_ref().map(|f| {
            let mut y = vec![0.0; self.dim()];
            f(t, &mut y);
            y
        })
    }
}

fn check_state(problem: &PdsProblem, y: &[f64]) -> Result<()> {
    if y.len() != problem.dim() {
        return Err(Error::DimensionMismatch {
            expected: problem.dim(),
            got: y.len(),
        });
    }
    Ok(())
}

/// Evaluates `(P(y), D(y))`, rejecting negative or non-finite entries.
pub fn eval_pd(problem: &PdsProblem, y: &[f64]) -> Result<(Matrix, Matrix)> {
    check_state(problem, y)?;
    let n = problem.dim();
    let mut p = Matrix::zeros(n, problem.structure());
    let mut d = Matrix::zeros(n, problem.structure().transposed());
    problem.system.production(y, &mut p);
    problem.system.destruction(y, &mut d);
    check_non_negative("P", &p)?;
    check_non_negative("D", &d)?;
    Ok((p, d))
}

fn check_non_negative(name: &'static str, m: &Matrix) -> Result<()> {
    let mut bad = None;
    m.for_each_stored(|i, j, v| {
        if bad.is_none() && !(v >= 0.0 && v.is_finite()) {
            bad = Some((i, j, v));
        }
    });
    match bad {
        Some((row, col, value)) => Err(Error::StructuralViolation {
            matrix: name,
            row,
            col,
            value,
        }),
        None => Ok(()),
    }
}

/// Largest violation of `p_ij = d_ji` and zero diagonals over `samples`.
pub fn check_conservativity(problem: &PdsProblem, samples: &[Vec<f64>]) -> Result<f64> {
    let mut worst = 0.0_f64;
    for y in samples {
        let (p, d) = eval_pd(problem, y)?;
        let n = problem.dim();
        for i in 0..n {
            worst = worst.max(p.get(i, i).abs()).max(d.get(i, i).abs());
            for j in 0..n {
                worst = worst.max((p.get(i, j) - d.get(j, i)).abs());
            }
        }
    }
    Ok(worst)
}

/// Right-hand side `(P(y) - D(y)) e`.
pub fn rhs(problem: &PdsProblem, y: &[f64]) -> Result<Vec<f64>> {
    check_state(problem, y)?;
    let mut out = vec![0.0; problem.dim()];
    let mut p = Matrix::zeros(problem.dim(), problem.structure());
    rhs_into(problem, y, &mut p, &mut out);
    Ok(out)
}

/// Allocation-free right-hand side; `p` is scratch space with the problem's structure.
pub(crate) fn rhs_into(problem: &PdsProblem, y: &[f64], p: &mut Matrix, out: &mut [f64]) {
    p.fill_zero();
    problem.system.evaluate(y, p, out);
    for (i, o) in out.iter_mut().enumerate() {
        let gain: f64 = p.row_span(i).map(|j| p.get(i, j)).sum();
        *o = gain - *o;
    }
}

/// Replaces components below `floor` by `floor`; returns the new state and
/// the modified indices.
pub fn sanitize_initial(y0: &[f64], floor: f64) -> Result<(Vec<f64>, Vec<usize>)> {
    if !(floor > 0.0) {
        return Err(Error::InvalidInitialState(format!(
            "floor must be positive, got {floor}"
        )));
    }
    if let Some((i, v)) = y0
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v >= 0.0) || !v.is_finite())
    {
        return Err(Error::InvalidInitialState(format!(
            "component {i} is {v}; initial values must be non-negative"
        )));
    }
    if y0.iter().all(|v| *v == 0.0) {
        return Err(Error::InvalidInitialState(
            "all components are zero".into(),
        ));
    }
    let mut out = y0.to_vec();
    let mut modified = Vec::new();
    for (i, v) in out.iter_mut().enumerate() {
        if *v < floor {
            *v = floor;
            modified.push(i);
        }
    }
    Ok((out, modified))
}
