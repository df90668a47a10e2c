//! Assembly and solution of the linearly implicit system `M y = sum_r alpha_r y^{n-r}`.
//!
//! For a fully conservative system with positive Patankar weight denominators
//! the assembled matrix has a positive diagonal, non-positive off-diagonal
//! entries and strictly diagonally dominant columns (every column sums to
//! exactly one). Gaussian elimination on such a matrix never needs to pivot
//! and never cancels, so the solution of a non-negative right-hand side is
//! non-negative in floating point as well.

use crate::error::LinsolveError;
use crate::matrix::{BandMatrix, DenseMatrix, Matrix, Structure};

/// The system matrix `M` of one linearly implicit stage.
pub type SystemMatrix = Matrix;

/// Production matrix and destruction row sums `D(y) e` of one history state.
#[derive(Debug, Clone, Copy)]
pub struct PdTerms<'a> {
    pub production: &'a Matrix,
    pub loss: &'a [f64],
}

/// Result of [`solve`].
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub x: Vec<f64>,
    /// Number of round-off negatives that were clamped to zero.
    pub clamped: usize,
}

/// Builds `M = I - h sum_r beta_r (P(y^{n-r}) - diag(D(y^{n-r}) e)) diag(1/sigma)`.
///
/// `terms` holds the history evaluations newest first; only the first
/// `beta.len()` entries are used.
pub fn assemble(
    terms: &[PdTerms<'_>],
    beta: &[f64],
    sigma: &[f64],
    h: f64,
) -> Result<SystemMatrix, LinsolveError> {
    Ok(assemble_split(terms, beta, sigma, h)?.matrix)
}

/// `M` together with `G = M - I`, assembled without ever adding the identity
/// to `G`, so small step sizes keep every digit of the off-identity part.
#[derive(Debug, Clone)]
pub struct SplitSystem {
    pub matrix: SystemMatrix,
    pub offset: Matrix,
}

pub fn assemble_split(
    terms: &[PdTerms<'_>],
    beta: &[f64],
    sigma: &[f64],
    h: f64,
) -> Result<SplitSystem, LinsolveError> {
    let n = sigma.len();
    if !(h >= 0.0 && h.is_finite()) {
        return Err(LinsolveError::InvalidArgument(format!(
            "step size must be non-negative and finite, got {h}"
        )));
    }
    if terms.len() < beta.len() {
        return Err(LinsolveError::InvalidArgument(format!(
            "{} history evaluations for {} beta coefficients",
            terms.len(),
            beta.len()
        )));
    }
    if let Some((r, &b)) = beta.iter().enumerate().find(|(_, b)| !(**b >= 0.0)) {
        return Err(LinsolveError::InvalidArgument(format!(
            "beta[{r}] = {b} is negative"
        )));
    }
    for (index, &value) in sigma.iter().enumerate() {
        if !(value > 0.0) || !value.is_finite() {
            return Err(LinsolveError::PwdViolation { index, value });
        }
    }
    let used = &terms[..beta.len()];
    for t in used {
        if t.production.dim() != n {
            return Err(LinsolveError::DimensionMismatch {
                expected: n,
                got: t.production.dim(),
            });
        }
        if t.loss.len() != n {
            return Err(LinsolveError::DimensionMismatch {
                expected: n,
                got: t.loss.len(),
            });
        }
    }

    let structure = common_structure(used);
    let mut g = Matrix::zeros(n, structure);
    // Divide rather than multiply by 1/sigma: a subnormal sigma has no
    // finite reciprocal, while p / sigma usually stays finite.
    for (t, &b) in used.iter().zip(beta) {
        if b == 0.0 {
            continue;
        }
        let hb = h * b;
        t.production.for_each_stored(|i, j, p| {
            if p != 0.0 {
                g.add(i, j, -hb * p / sigma[j]);
            }
        });
        for (i, &l) in t.loss.iter().enumerate() {
            g.add(i, i, hb * l / sigma[i]);
        }
    }

    let mut bad = None;
    g.for_each_stored(|i, j, v| {
        if bad.is_none() && !v.is_finite() {
            bad = Some((i, j, v));
        }
    });
    if let Some((row, col, value)) = bad {
        return Err(LinsolveError::NonFinite { row, col, value });
    }
    let mut m = g.clone();
    for i in 0..n {
        m.add(i, i, 1.0);
    }
    Ok(SplitSystem { matrix: m, offset: g })
}

fn common_structure(terms: &[PdTerms<'_>]) -> Structure {
    let mut it = terms.iter().map(|t| t.production.structure());
    match it.next() {
        Some(first) if it.all(|s| s == first) => first,
        Some(_) => Structure::Dense,
        None => Structure::Dense,
    }
}

/// LU factors of a system matrix.
#[derive(Debug, Clone)]
pub enum Factorization {
    /// Row-pivoted dense LU; `perm[k]` is the row swapped into position `k`.
    Dense { lu: DenseMatrix, perm: Vec<usize> },
    /// Band LU without pivoting.
    Banded { lu: BandMatrix },
}

impl Factorization {
    pub fn new(m: &SystemMatrix) -> Result<Self, LinsolveError> {
        match m {
            Matrix::Dense(d) => factor_dense(d),
            Matrix::Banded(b) => factor_banded(b),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Factorization::Dense { lu, .. } => lu.dim(),
            Factorization::Banded { lu } => lu.dim(),
        }
    }

    /// Solves with the stored factors; no sign checks.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        match self {
            Factorization::Dense { lu, perm } => {
                let n = lu.dim();
                for (k, &p) in perm.iter().enumerate() {
                    x.swap(k, p);
                }
                for i in 0..n {
                    let row = lu.row(i);
                    let acc: f64 = (0..i).map(|j| row[j] * x[j]).sum();
                    x[i] -= acc;
                }
                for i in (0..n).rev() {
                    let row = lu.row(i);
                    let acc: f64 = (i + 1..n).map(|j| row[j] * x[j]).sum();
                    x[i] = (x[i] - acc) / row[i];
                }
            }
            Factorization::Banded { lu } => {
                let n = lu.dim();
                for i in 0..n {
                    for j in i.saturating_sub(lu.lower())..i {
                        x[i] -= lu.get(i, j) * x[j];
                    }
                }
                for i in (0..n).rev() {
                    let mut acc = x[i];
                    for j in i + 1..(i + lu.upper() + 1).min(n) {
                        acc -= lu.get(i, j) * x[j];
                    }
                    x[i] = acc / lu.get(i, i);
                }
            }
        }
        x
    }
}

fn factor_dense(m: &DenseMatrix) -> Result<Factorization, LinsolveError> {
    let n = m.dim();
    let mut a = m.clone();
    let mut perm = Vec::with_capacity(n);
    for k in 0..n {
        let (piv_row, piv_abs) = (k..n)
            .map(|i| (i, a.get(i, k).abs()))
            .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        let pivot = a.get(piv_row, k);
        if !(piv_abs > 0.0) || !pivot.is_finite() {
            return Err(LinsolveError::Singular { row: k, pivot });
        }
        perm.push(piv_row);
        if piv_row != k {
            for j in 0..n {
                let t = a.get(k, j);
                a.set(k, j, a.get(piv_row, j));
                a.set(piv_row, j, t);
            }
        }
        for i in k + 1..n {
            let factor = a.get(i, k) / pivot;
            a.set(i, k, factor);
            if factor == 0.0 {
                continue;
            }
            for j in k + 1..n {
                a.add(i, j, -factor * a.get(k, j));
            }
        }
    }
    Ok(Factorization::Dense { lu: a, perm })
}

fn factor_banded(m: &BandMatrix) -> Result<Factorization, LinsolveError> {
    let n = m.dim();
    let (lower, upper) = (m.lower(), m.upper());
    let mut a = m.clone();
    for k in 0..n {
        let pivot = a.get(k, k);
        if pivot == 0.0 || !pivot.is_finite() {
            return Err(LinsolveError::Singular { row: k, pivot });
        }
        let row_end = (k + lower + 1).min(n);
        let col_end = (k + upper + 1).min(n);
        for i in k + 1..row_end {
            let factor = a.get(i, k) / pivot;
            a.set(i, k, factor);
            if factor == 0.0 {
                continue;
            }
            for j in k + 1..col_end {
                let v = a.get(i, j) - factor * a.get(k, j);
                a.set(i, j, v);
            }
        }
    }
    Ok(Factorization::Banded { lu: a })
}

fn clamp_round_off(x: &mut [f64], b_norm: f64) -> Result<usize, LinsolveError> {
    let threshold = 16.0 * x.len() as f64 * f64::EPSILON * b_norm;
    let mut clamped = 0;
    for (index, xi) in x.iter_mut().enumerate() {
        if *xi < 0.0 {
            if -*xi <= threshold {
                *xi = 0.0;
                clamped += 1;
            } else {
                return Err(LinsolveError::NegativeSolution {
                    index,
                    value: *xi,
                    threshold,
                });
            }
        }
    }
    if clamped > 0 {
        log::debug!("clamped {clamped} round-off negative component(s) to zero");
    }
    Ok(clamped)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |a, x| a.max(x.abs()))
}

/// Solves `M x = b`, clamping round-off negatives of magnitude at most
/// `16 N eps ||b||_inf` to zero.
pub fn solve(m: &SystemMatrix, b: &[f64]) -> Result<Solution, LinsolveError> {
    let n = m.dim();
    if b.len() != n {
        return Err(LinsolveError::DimensionMismatch {
            expected: n,
            got: b.len(),
        });
    }
    let mut x = Factorization::new(m)?.solve(b);
    let clamped = clamp_round_off(&mut x, inf_norm(b))?;
    Ok(Solution { x, clamped })
}

/// Solves `(I + G) x = b` as `x = b + z` with `(I + G) z = -G b`.
///
/// The rounding of `1 + G_ii` is nearly identical from step to step, so in a
/// direct solve it accumulates linearly over a run; here it only perturbs
/// `z = O(h)`. The increment is used only while every `G_jj <= 1/2` (large
/// `G` makes `G b` cancel); components with `|z_i| > b_i / 2` are taken from
/// the direct solve, which keeps them non-negative.
pub fn solve_split(system: &SplitSystem, b: &[f64]) -> Result<Solution, LinsolveError> {
    let n = system.matrix.dim();
    if b.len() != n {
        return Err(LinsolveError::DimensionMismatch {
            expected: n,
            got: b.len(),
        });
    }
    let lu = Factorization::new(&system.matrix)?;
    if (0..n).any(|j| !(system.offset.get(j, j) <= 0.5)) {
        let mut x = lu.solve(b);
        let clamped = clamp_round_off(&mut x, inf_norm(b))?;
        return Ok(Solution { x, clamped });
    }
    let mut r = system.offset.matvec(b);
    r.iter_mut().for_each(|v| *v = -*v);
    let z = lu.solve(&r);
    let mut x: Vec<f64> = b.iter().zip(&z).map(|(bi, zi)| bi + zi).collect();
    let cancelled: Vec<usize> = (0..n)
        .filter(|&i| !(z[i].abs() <= 0.5 * b[i]) || !(x[i] > 0.0))
        .collect();
    let mut clamped = 0;
    if !cancelled.is_empty() {
        let mut direct = lu.solve(b);
        clamped = clamp_round_off(&mut direct, inf_norm(b))?;
        for i in cancelled {
            x[i] = direct[i];
        }
    }
    Ok(Solution { x, clamped })
}

/// Row-pivoted LU solve of a dense system.
pub fn solve_dense(m: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>, LinsolveError> {
    Ok(factor_dense(m)?.solve(b))
}

/// Banded elimination without pivoting (Thomas algorithm when both
/// bandwidths are one). Only stable for diagonally dominant matrices such as
/// the assembled system matrices.
pub fn solve_banded(m: &BandMatrix, b: &[f64]) -> Result<Vec<f64>, LinsolveError> {
    Ok(factor_banded(m)?.solve(b))
}

/// One failed M-matrix check.
#[derive(Debug, Clone, PartialEq)]
pub enum MMatrixViolation {
    NonPositiveDiagonal { index: usize, value: f64 },
    PositiveOffDiagonal { row: usize, col: usize, value: f64 },
    ColumnNotDominant { col: usize, diagonal: f64, off_sum: f64 },
}

impl std::fmt::Display for MMatrixViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::NonPositiveDiagonal { index, value } => {
                write!(f, "diagonal M[{index}][{index}] = {value:e} is not positive")
            }
            Self::PositiveOffDiagonal { row, col, value } => {
                write!(f, "off-diagonal M[{row}][{col}] = {value:e} is positive")
            }
            Self::ColumnNotDominant {
                col,
                diagonal,
                off_sum,
            } => write!(
                f,
                "column {col} not dominant: diagonal {diagonal:e} <= off-diagonal sum {off_sum:e}"
            ),
        }
    }
}

/// Outcome of [`verify_mmatrix`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MMatrixReport {
    pub violations: Vec<MMatrixViolation>,
}

impl MMatrixReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn positive_diagonal(&self) -> bool {
        !self
            .violations
            .iter()
            .any(|v| matches!(v, MMatrixViolation::NonPositiveDiagonal { .. }))
    }

    pub fn nonpositive_off_diagonal(&self) -> bool {
        !self
            .violations
            .iter()
            .any(|v| matches!(v, MMatrixViolation::PositiveOffDiagonal { .. }))
    }

    pub fn column_dominant(&self) -> bool {
        !self
            .violations
            .iter()
            .any(|v| matches!(v, MMatrixViolation::ColumnNotDominant { .. }))
    }
}

/// Checks the sign pattern and column dominance of `m`.
///
/// Dominance is strict up to a rounding allowance of `4 (n + 1) eps |m_jj|`:
/// once the off-diagonal sum passes `2^53` the identity part of `M` is below
/// the precision of its diagonal.
pub fn verify_mmatrix(m: &SystemMatrix) -> MMatrixReport {
    let n = m.dim();
    let mut violations = Vec::new();
    let mut off_sums = vec![0.0; n];
    m.for_each_stored(|i, j, v| {
        if i == j {
            if !(v > 0.0) {
                violations.push(MMatrixViolation::NonPositiveDiagonal { index: i, value: v });
            }
        } else {
            if v > 0.0 {
                violations.push(MMatrixViolation::PositiveOffDiagonal {
                    row: i,
                    col: j,
                    value: v,
                });
            }
            off_sums[j] += v.abs();
        }
    });
    for (col, &off_sum) in off_sums.iter().enumerate() {
        let diagonal = m.get(col, col);
        let slack = 4.0 * (n + 1) as f64 * f64::EPSILON * diagonal.abs();
        if !(diagonal > off_sum || (diagonal > 1.0 && diagonal - off_sum >= -slack)) {
            violations.push(MMatrixViolation::ColumnNotDominant {
                col,
                diagonal,
                off_sum,
            });
        }
    }
    MMatrixReport { violations }
}
