//! Explicit linear multistep coefficient sets with non-negative weights.
//!
//! Coefficients are held as exact rationals; the floating point copies used
//! by the integrator are converted once at construction.

use std::fmt;

use num_rational::Rational64;
use num_traits::{ToPrimitive, Zero};

use crate::error::{Error, Result};

/// Stable method identifiers, in catalog order.
pub const METHOD_NAMES: [&str; 8] = [
    "mpe",
    "mplm-2-2",
    "mplm-4-3",
    "mplm-5-4",
    "mplm-7-5",
    "mplm-10-6",
    "zhu-3-2",
    "zhu-4-3",
];

/// Methods with a table of published convergence results, one per order 1..=6.
pub const TABLE_METHODS: [&str; 6] = [
    "mpe",
    "mplm-2-2",
    "mplm-4-3",
    "mplm-5-4",
    "mplm-7-5",
    "mplm-10-6",
];

/// Coefficients `(alpha, beta)` of `y^n = sum_r alpha_r y^{n-r} + h sum_r beta_r f(y^{n-r})`,
/// indexed from `r = 1`.
#[derive(Clone, PartialEq)]
pub struct LmCoefficients {
    name: String,
    order: usize,
    alpha: Vec<Rational64>,
    beta: Vec<Rational64>,
    alpha_f: Vec<f64>,
    beta_f: Vec<f64>,
}

impl fmt::Debug for LmCoefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: &[Rational64]| v.iter().map(|r| r.to_string()).collect::<Vec<_>>();
        f.debug_struct("LmCoefficients")
            .field("name", &self.name)
            .field("k", &self.steps())
            .field("p", &self.order)
            .field("alpha", &show(&self.alpha))
            .field("beta", &show(&self.beta))
            .finish()
    }
}

fn r(n: i64, d: i64) -> Rational64 {
    Rational64::new(n, d)
}

fn ints(v: &[i64]) -> Vec<Rational64> {
    v.iter().map(|&n| Rational64::from_integer(n)).collect()
}

impl LmCoefficients {
    /// Validates shape and sign; order conditions are checked separately by
    /// [`LmCoefficients::order_residuals`].
    pub fn new(
        name: impl Into<String>,
        order: usize,
        alpha: Vec<Rational64>,
        beta: Vec<Rational64>,
    ) -> Result<Self> {
        let name = name.into();
        let invalid = |reason: String| Error::InvalidCoefficients {
            method: name.clone(),
            reason,
        };
        if alpha.is_empty() {
            return Err(invalid("at least one step is required".into()));
        }
        if alpha.len() != beta.len() {
            return Err(invalid(format!(
                "alpha has {} entries but beta has {}",
                alpha.len(),
                beta.len()
            )));
        }
        if order == 0 {
            return Err(invalid("order must be at least 1".into()));
        }
        for (label, v) in [("alpha", &alpha), ("beta", &beta)] {
            if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| **x < Rational64::zero()) {
                return Err(invalid(format!("{label}[{}] = {x} is negative", i + 1)));
            }
        }
        let to_f = |v: &[Rational64]| -> Vec<f64> { v.iter().map(|x| x.to_f64().unwrap()).collect() };
        Ok(Self {
            alpha_f: to_f(&alpha),
            beta_f: to_f(&beta),
            name,
            order,
            alpha,
            beta,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Step count `k`.
    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    /// Convergence order `p`.
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha_f
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta_f
    }

    pub fn alpha_exact(&self) -> &[Rational64] {
        &self.alpha
    }

    pub fn beta_exact(&self) -> &[Rational64] {
        &self.beta
    }

    /// Exact residuals: `[sum alpha - 1, c_1, .., c_p]` with
    /// `c_q = sum_r (r^q alpha_r - q r^{q-1} beta_r)`.
    pub fn order_residuals(&self) -> Vec<Rational64> {
        let mut out = Vec::with_capacity(self.order + 1);
        out.push(self.alpha.iter().sum::<Rational64>() - Rational64::from_integer(1));
        for q in 1..=self.order as u32 {
            let c = self
                .alpha
                .iter()
                .zip(&self.beta)
                .enumerate()
                .map(|(i, (a, b))| {
                    let r = (i + 1) as i64;
                    *a * r.pow(q) - *b * (q as i64 * r.pow(q - 1))
                })
                .sum::<Rational64>();
            out.push(c);
        }
        out
    }

    /// Builds a copy with `beta_{index}` (1-based) shifted by `delta`.
    pub fn with_beta_shift(&self, index: usize, delta: Rational64) -> Result<Self> {
        let mut beta = self.beta.clone();
        beta[index - 1] += delta;
        Self::new(self.name.clone(), self.order, self.alpha.clone(), beta)
    }
}

/// `|residual|` of every order condition as floating point values
/// (length `p + 1`).
pub fn validate_order_conditions(coeffs: &LmCoefficients) -> Vec<f64> {
    coeffs
        .order_residuals()
        .iter()
        .map(|x| x.to_f64().unwrap().abs())
        .collect()
}

/// Parses `"35/18"`, `"2"` or `"-1/3"` into a rational.
pub fn parse_rational(s: &str) -> Result<Rational64> {
    let s = s.trim();
    let bad = || Error::Config(format!("`{s}` is not a rational number"));
    match s.split_once('/') {
        Some((n, d)) => {
            let n: i64 = n.trim().parse().map_err(|_| bad())?;
            let d: i64 = d.trim().parse().map_err(|_| bad())?;
            if d == 0 {
                return Err(bad());
            }
            Ok(Rational64::new(n, d))
        }
        None => s.parse::<i64>().map(Rational64::from_integer).map_err(|_| bad()),
    }
}

fn build(name: &str, order: usize, alpha: Vec<Rational64>, beta: Vec<Rational64>) -> LmCoefficients {
    LmCoefficients::new(name, order, alpha, beta).expect("catalog entries are well formed")
}

/// All built-in coefficient sets, in [`METHOD_NAMES`] order.
pub fn catalog() -> Vec<LmCoefficients> {
    let zero = Rational64::zero;
    vec![
        build("mpe", 1, ints(&[1]), ints(&[1])),
        build("mplm-2-2", 2, ints(&[0, 1]), ints(&[2, 0])),
        build(
            "mplm-4-3",
            3,
            vec![r(1, 4), zero(), r(3, 4), zero()],
            vec![r(35, 18), r(1, 3), zero(), r(2, 9)],
        ),
        build(
            "mplm-5-4",
            4,
            ints(&[0, 0, 0, 0, 1]),
            vec![r(75, 32), zero(), r(25, 48), r(25, 12), r(5, 96)],
        ),
        build(
            "mplm-7-5",
            5,
            ints(&[0, 0, 0, 0, 0, 0, 1]),
            vec![
                r(12, 5),
                zero(),
                r(197, 720),
                r(701, 360),
                r(43, 30),
                r(107, 360),
                r(467, 720),
            ],
        ),
        build(
            "mplm-10-6",
            6,
            ints(&[0, 0, 0, 0, 0, 0, 0, 0, 0, 1]),
            vec![
                r(11125, 4536),
                zero(),
                zero(),
                r(50, 27),
                r(85, 36),
                zero(),
                zero(),
                r(125, 63),
                r(25, 24),
                r(25, 81),
            ],
        ),
        // Second-order strong-stability-preserving three-step scheme. The
        // forcing sits on the newest history state.
        build(
            "zhu-3-2",
            2,
            vec![r(3, 4), zero(), r(1, 4)],
            vec![r(3, 2), zero(), zero()],
        ),
        build(
            "zhu-4-3",
            3,
            vec![r(16, 27), zero(), zero(), r(11, 27)],
            vec![r(16, 9), zero(), zero(), r(4, 9)],
        ),
    ]
}

/// Looks up a catalog method by its stable name.
pub fn method(name: &str) -> Result<LmCoefficients> {
    catalog()
        .into_iter()
        .find(|c| c.name() == name)
        .ok_or_else(|| Error::UnknownMethod(name.to_string()))
}

/// Ordered coefficient sets of orders `1, 2, ..` used to build Patankar
/// weight denominators level by level.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodLadder {
    levels: Vec<LmCoefficients>,
}

/// Methods making up the default ladder, order 1 through 5.
const LADDER_METHODS: [&str; 5] = ["mpe", "mplm-2-2", "mplm-4-3", "mplm-5-4", "mplm-7-5"];

impl MethodLadder {
    /// `levels[s]` must have order `s + 1` and `levels[0]` must be the
    /// one-step Euler-type method.
    pub fn new(levels: Vec<LmCoefficients>) -> Result<Self> {
        for (s, level) in levels.iter().enumerate() {
            if level.order() != s + 1 {
                return Err(Error::InvalidCoefficients {
                    method: level.name().to_string(),
                    reason: format!("ladder level {} must have order {}", s + 1, s + 1),
                });
            }
        }
        if let Some(first) = levels.first() {
            let one = Rational64::from_integer(1);
            if first.steps() != 1 || first.alpha_exact()[0] != one || first.beta_exact()[0] != one {
                return Err(Error::InvalidCoefficients {
                    method: first.name().to_string(),
                    reason: "ladder level 1 must be alpha = beta = (1)".into(),
                });
            }
        }
        Ok(Self { levels })
    }

    /// Default ladder for an order-`p` outer method: orders `1..=p-1`.
    pub fn for_order(p: usize) -> Result<Self> {
        if p > LADDER_METHODS.len() + 1 {
            return Err(Error::InvalidCoefficients {
                method: format!("order {p}"),
                reason: format!("default ladder supports outer orders up to {}", LADDER_METHODS.len() + 1),
            });
        }
        let levels = LADDER_METHODS[..p.saturating_sub(1)]
            .iter()
            .map(|n| method(n))
            .collect::<Result<Vec<_>>>()?;
        Self::new(levels)
    }

    /// Default ladder for `outer`.
    pub fn for_method(outer: &LmCoefficients) -> Result<Self> {
        Self::for_order(outer.order())
    }

    pub fn levels(&self) -> &[LmCoefficients] {
        &self.levels
    }

    /// Highest order provided (0 for an empty ladder).
    pub fn order(&self) -> usize {
        self.levels.len()
    }

    /// Keeps levels of order `< p`.
    pub fn truncated(&self, p: usize) -> Self {
        Self {
            levels: self.levels[..self.levels.len().min(p.saturating_sub(1))].to_vec(),
        }
    }

    /// Checks that no level needs more history than `outer` keeps.
    pub fn check_compatible(&self, outer: &LmCoefficients) -> Result<()> {
        for level in &self.levels {
            if level.steps() > outer.steps() {
                return Err(Error::InvalidCoefficients {
                    method: outer.name().to_string(),
                    reason: format!(
                        "ladder level {} needs {} steps but the method keeps {}",
                        level.name(),
                        level.steps(),
                        outer.steps()
                    ),
                });
            }
        }
        Ok(())
    }
}
