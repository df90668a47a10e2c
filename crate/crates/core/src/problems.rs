//! Built-in production-destruction test problems.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::integrator::DEFAULT_FLOOR;
use crate::matrix::{Matrix, Structure};
use crate::pds::{transpose_loss, PdsProblem, ProductionDestruction};

/// Stable problem identifiers.
pub const PROBLEM_NAMES: [&str; 6] = [
    "linear",
    "algal",
    "brusselator",
    "saceirqd",
    "diffusion",
    "appendix",
];

/// Linear two-species exchange: `p_12 = y_2`, `p_21 = a y_1`.
#[derive(Debug, Clone, Copy)]
pub struct LinearExchange {
    pub a: f64,
}

impl ProductionDestruction for LinearExchange {
    fn dim(&self) -> usize {
        2
    }
    fn production(&self, y: &[f64], p: &mut Matrix) {
        p.set(0, 1, y[1]);
        p.set(1, 0, self.a * y[0]);
    }
    fn evaluate(&self, y: &[f64], p: &mut Matrix, loss: &mut [f64]) {
        self.production(y, p);
        loss[0] = self.a * y[0];
        loss[1] = y[1];
    }
}

pub fn linear_test() -> PdsProblem {
    linear_with(5.0, vec![0.9, 0.1], 2.0, DEFAULT_FLOOR).expect("built-in parameters are valid")
}

pub fn linear_with(a: f64, y0: Vec<f64>, horizon: f64, floor: f64) -> Result<PdsProblem> {
    positive_param("a", a)?;
    let pr = PdsProblem::new("linear", Arc::new(LinearExchange { a }), y0, horizon, floor)?;
    let m = pr.invariant();
    let y10 = pr.y0()[0];
    let c = m / (1.0 + a);
    Ok(pr.with_analytic(move |t, y| {
        y[0] = c + (y10 - c) * (-(1.0 + a) * t).exp();
        y[1] = m - y[0];
    }))
}

/// Nutrient, phytoplankton and detritus in an algal bloom.
#[derive(Debug, Clone, Copy)]
pub struct AlgalBloom {
    pub a: f64,
}

impl ProductionDestruction for AlgalBloom {
    fn dim(&self) -> usize {
        3
    }
    fn production(&self, y: &[f64], p: &mut Matrix) {
        p.set(1, 0, y[0] * y[1] / (y[0] + 1.0));
        p.set(2, 1, self.a * y[1]);
    }
    fn evaluate(&self, y: &[f64], p: &mut Matrix, loss: &mut [f64]) {
        self.production(y, p);
        transpose_loss(p, loss);
    }
}

pub fn algal_bloom() -> PdsProblem {
    algal_with(0.3, vec![9.98, 0.01, 0.01], 30.0, DEFAULT_FLOOR).expect("built-in parameters are valid")
}

pub fn algal_with(a: f64, y0: Vec<f64>, horizon: f64, floor: f64) -> Result<PdsProblem> {
    positive_param("a", a)?;
    PdsProblem::new("algal", Arc::new(AlgalBloom { a }), y0, horizon, floor)
}

/// Six-species Brusselator reaction network.
#[derive(Debug, Clone, Copy)]
pub struct Brusselator {
    pub k: [f64; 4],
}

impl ProductionDestruction for Brusselator {
    fn dim(&self) -> usize {
        6
    }
    fn production(&self, y: &[f64], p: &mut Matrix) {
        let [k1, k2, k3, k4] = self.k;
        p.set(2, 1, k2 * y[1] * y[4]);
        p.set(3, 4, k4 * y[4]);
        p.set(4, 0, k1 * y[0]);
        p.set(4, 5, k3 * y[4] * y[4] * y[5]);
        p.set(5, 4, k2 * y[1] * y[4]);
    }
    fn evaluate(&self, y: &[f64], p: &mut Matrix, loss: &mut [f64]) {
        self.production(y, p);
        transpose_loss(p, loss);
    }
}

pub fn brusselator() -> PdsProblem {
    brusselator_with(
        [1.0; 4],
        vec![10.0, 10.0, 0.0, 0.0, 0.1, 0.1],
        10.0,
        DEFAULT_FLOOR,
    )
    .expect("built-in parameters are valid")
}

pub fn brusselator_with(k: [f64; 4], y0: Vec<f64>, horizon: f64, floor: f64) -> Result<PdsProblem> {
    for (i, v) in k.iter().enumerate() {
        positive_param(&format!("k{}", i + 1), *v)?;
    }
    PdsProblem::new("brusselator", Arc::new(Brusselator { k }), y0, horizon, floor)
}

/// Parameters of the eight-compartment epidemic model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaceirqdParams {
    pub population: f64,
    pub alpha: f64,
    pub beta: f64,
    pub mu: f64,
    pub eta: f64,
    pub sigma: f64,
    pub tau: f64,
    pub xi: f64,
    pub gamma: f64,
    pub delta: f64,
    pub lambda: f64,
    pub kd: f64,
}

/// `1e-4 * c0 * int_0^{1e4} exp(-c1 t) dt`
pub fn averaged_rate(c0: f64, c1: f64) -> f64 {
    1e-4 * c0 * (-(-c1 * 1e4_f64).exp_m1()) / c1
}

impl Default for SaceirqdParams {
    fn default() -> Self {
        Self {
            population: 6.046e7,
            alpha: 0.0194,
            beta: 7.567,
            mu: 2.278e-6,
            eta: 9.180e-7,
            sigma: 1.4633e-3,
            tau: 1.109e-4,
            xi: 0.263,
            gamma: 0.021,
            delta: 0.077,
            lambda: averaged_rate(0.157, 0.025),
            kd: averaged_rate(0.779, 0.061),
        }
    }
}

/// Compartments S, A, C, E, I, R, Q, D.
#[derive(Debug, Clone, Copy)]
pub struct Saceirqd {
    pub params: SaceirqdParams,
}

impl ProductionDestruction for Saceirqd {
    fn dim(&self) -> usize {
        8
    }
    fn production(&self, y: &[f64], p: &mut Matrix) {
        let c = &self.params;
        p.set(1, 3, c.xi * y[3]);
        p.set(2, 0, c.alpha * y[0]);
        p.set(3, 0, y[0] * (c.eta + (c.beta * y[4] + c.sigma * y[1]) / c.population));
        p.set(3, 2, c.mu * y[2]);
        p.set(4, 1, c.tau * y[1]);
        p.set(4, 3, c.gamma * y[3]);
        p.set(5, 6, c.lambda * y[6]);
        p.set(6, 4, c.delta * y[4]);
        p.set(7, 6, c.kd * y[6]);
    }
    fn evaluate(&self, y: &[f64], p: &mut Matrix, loss: &mut [f64]) {
        self.production(y, p);
        transpose_loss(p, loss);
    }
}

pub fn saceirqd() -> PdsProblem {
    saceirqd_with(
        SaceirqdParams::default(),
        vec![60459997.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0],
        180.0,
        DEFAULT_FLOOR,
    )
    .expect("built-in parameters are valid")
}

pub fn saceirqd_with(
    params: SaceirqdParams,
    y0: Vec<f64>,
    horizon: f64,
    floor: f64,
) -> Result<PdsProblem> {
    let c = &params;
    for (name, v) in [
        ("population", c.population),
        ("alpha", c.alpha),
        ("beta", c.beta),
        ("mu", c.mu),
        ("eta", c.eta),
        ("sigma", c.sigma),
        ("tau", c.tau),
        ("xi", c.xi),
        ("gamma", c.gamma),
        ("delta", c.delta),
        ("lambda", c.lambda),
        ("kd", c.kd),
    ] {
        positive_param(name, v)?;
    }
    PdsProblem::new("saceirqd", Arc::new(Saceirqd { params }), y0, horizon, floor)
}

/// Diffusion coefficient `D(x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Diffusivity {
    /// `1e-2 (x - 2/3)^2 atan(2x - 3) / (2x - 3) + 1e-5`
    Heterogeneous,
    Constant(f64),
}

impl Diffusivity {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Diffusivity::Heterogeneous => {
                let z = 2.0 * x - 3.0;
                let sinc = if z == 0.0 { 1.0 } else { z.atan() / z };
                1e-2 * (x - 2.0 / 3.0).powi(2) * sinc + 1e-5
            }
            Diffusivity::Constant(d) => d,
        }
    }
}

/// Initial profile `f(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Profile {
    /// `2 - 2 sin^2(pi/2 - 1/4)`, independent of `x`.
    #[default]
    Constant,
    /// `2 - 2 sin^2(pi x / 2 - 1/4)`
    Bump,
}

impl Profile {
    pub fn eval(&self, x: f64) -> f64 {
        let arg = match self {
            Profile::Constant => PI / 2.0 - 0.25,
            Profile::Bump => PI * x / 2.0 - 0.25,
        };
        2.0 - 2.0 * arg.sin().powi(2)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Profile::Constant),
            "bump" => Ok(Profile::Bump),
            other => Err(Error::Config(format!(
                "unknown profile `{other}` (expected constant or bump)"
            ))),
        }
    }
}

/// Finite-volume grid with `nx + 1` cells centred at `(j + 1/2) dx`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionGrid {
    pub length: f64,
    pub nx: usize,
    pub diffusivity: Diffusivity,
    pub profile: Profile,
}

impl Default for DiffusionGrid {
    fn default() -> Self {
        Self {
            length: 1.0,
            nx: 200,
            diffusivity: Diffusivity::Heterogeneous,
            profile: Profile::Constant,
        }
    }
}

impl DiffusionGrid {
    pub fn with_nx(nx: usize) -> Self {
        Self {
            nx,
            ..Self::default()
        }
    }

    pub fn dx(&self) -> f64 {
        self.length / self.nx as f64
    }

    pub fn cells(&self) -> usize {
        self.nx + 1
    }

    pub fn center(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.dx()
    }

    /// `D` at the edge between cells `j` and `j + 1`.
    pub fn edge_coefficient(&self, j: usize) -> f64 {
        self.diffusivity.eval((j + 1) as f64 * self.dx())
    }

    pub fn initial_values(&self) -> Vec<f64> {
        (0..self.cells()).map(|j| self.profile.eval(self.center(j))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 {
            return Err(Error::Grid(format!("need at least 2 cells, got nx = {}", self.nx)));
        }
        if !(self.length > 0.0 && self.length.is_finite()) {
            return Err(Error::Grid(format!("length must be positive, got {}", self.length)));
        }
        for j in 0..self.nx {
            let d = self.edge_coefficient(j);
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Grid(format!("diffusion coefficient {d} at edge {j} is not positive")));
            }
        }
        Ok(())
    }
}

/// Semi-discrete diffusion as a PDS with tridiagonal coupling.
#[derive(Debug, Clone)]
pub struct DiffusionSystem {
    /// `D_{j+1/2} / dx^2` for `j = 0 .. nx - 1`.
    coupling: Vec<f64>,
}

impl DiffusionSystem {
    pub fn new(grid: &DiffusionGrid) -> Result<Self> {
        grid.validate()?;
        let dx2 = grid.dx() * grid.dx();
        Ok(Self {
            coupling: (0..grid.nx).map(|j| grid.edge_coefficient(j) / dx2).collect(),
        })
    }
}

impl ProductionDestruction for DiffusionSystem {
    fn dim(&self) -> usize {
        self.coupling.len() + 1
    }
    fn structure(&self) -> Structure {
        Structure::Banded { lower: 1, upper: 1 }
    }
    fn production(&self, y: &[f64], p: &mut Matrix) {
        for (j, c) in self.coupling.iter().enumerate() {
            p.set(j, j + 1, c * y[j + 1]);
            p.set(j + 1, j, c * y[j]);
        }
    }
    fn evaluate(&self, y: &[f64], p: &mut Matrix, loss: &mut [f64]) {
        self.production(y, p);
        let n = self.dim();
        for (j, l) in loss.iter_mut().enumerate() {
            let left = if j > 0 { self.coupling[j - 1] } else { 0.0 };
            let right = if j + 1 < n { self.coupling[j] } else { 0.0 };
            *l = (left + right) * y[j];
        }
    }
}

pub fn diffusion_fv(grid: DiffusionGrid) -> Result<PdsProblem> {
    diffusion_with(grid, 60.0, DEFAULT_FLOOR)
}

pub fn diffusion_with(grid: DiffusionGrid, horizon: f64, floor: f64) -> Result<PdsProblem> {
    let system = DiffusionSystem::new(&grid)?;
    let pr = PdsProblem::new("diffusion", Arc::new(system), grid.initial_values(), horizon, floor)?;
    Ok(match grid.profile {
        // A constant state is an equilibrium of the discrete system.
        Profile::Constant => {
            let c = grid.profile.eval(0.0);
            pr.with_analytic(move |_, y| y.iter_mut().for_each(|v| *v = c))
        }
        Profile::Bump => pr,
    })
}

/// Single channel `p_{j*, i*} = mu y_{i*}` among `n` otherwise inert species.
#[derive(Debug, Clone, Copy)]
pub struct AppendixSystem {
    pub n: usize,
    pub mu: f64,
    pub source: usize,
    pub target: usize,
}

impl ProductionDestruction for AppendixSystem {
    fn dim(&self) -> usize {
        self.n
    }
    fn production(&self, y: &[f64], p: &mut Matrix) {
        p.set(self.target, self.source, self.mu * y[self.source]);
    }
    fn evaluate(&self, y: &[f64], p: &mut Matrix, loss: &mut [f64]) {
        self.production(y, p);
        loss.iter_mut().for_each(|l| *l = 0.0);
        loss[self.source] = self.mu * y[self.source];
    }
}

/// `i_star` and `j_star` are 0-based.
pub fn appendix_pds(mu: f64, i_star: usize, j_star: usize, n: usize) -> Result<PdsProblem> {
    appendix_with(mu, i_star, j_star, vec![1.0; n], 2.0, DEFAULT_FLOOR)
}

pub fn appendix_with(
    mu: f64,
    i_star: usize,
    j_star: usize,
    y0: Vec<f64>,
    horizon: f64,
    floor: f64,
) -> Result<PdsProblem> {
    positive_param("mu", mu)?;
    let n = y0.len();
    if n < 2 || i_star >= n || j_star >= n || i_star == j_star {
        return Err(Error::InvalidProblem(format!(
            "need distinct indices below n = {n}, got i* = {i_star}, j* = {j_star}"
        )));
    }
    let system = AppendixSystem {
        n,
        mu,
        source: i_star,
        target: j_star,
    };
    let pr = PdsProblem::new("appendix", Arc::new(system), y0, horizon, floor)?;
    let start = pr.y0().to_vec();
    Ok(pr.with_analytic(move |t, y| {
        y.copy_from_slice(&start);
        let moved = start[i_star] * -(-mu * t).exp_m1();
        y[i_star] -= moved;
        y[j_star] += moved;
    }))
}

fn positive_param(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidProblem(format!("parameter {name} must be positive, got {v}")))
    }
}

/// Options applied when building a problem by name.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildOptions {
    pub floor: f64,
    pub nx: usize,
    pub profile: Profile,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            floor: DEFAULT_FLOOR,
            nx: 200,
            profile: Profile::Constant,
        }
    }
}

/// Builds a built-in problem with default parameters.
pub fn by_name(name: &str, opts: &BuildOptions) -> Result<PdsProblem> {
    ProblemFile {
        kind: name.to_string(),
        ..ProblemFile::default()
    }
    .build(opts)
}

/// Problem description read from TOML.
///
/// ```toml
/// kind = "linear"
/// horizon = 3.0
/// y0 = [0.5, 0.5]
/// [params]
/// a = 2.0
/// ```
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub kind: String,
    pub horizon: Option<f64>,
    pub y0: Option<Vec<f64>>,
    /// Dimension of the appendix system when `y0` is absent.
    pub dim: Option<usize>,
    pub nx: Option<usize>,
    pub profile: Option<String>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl ProblemFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Grid of a diffusion problem; `None` for other kinds.
    pub fn grid(&self, opts: &BuildOptions) -> Result<Option<DiffusionGrid>> {
        if self.kind != "diffusion" {
            return Ok(None);
        }
        let mut params = Params::new(&self.kind, &self.params);
        self.grid_with(opts, &mut params).map(Some)
    }

    fn grid_with(&self, opts: &BuildOptions, params: &mut Params<'_>) -> Result<DiffusionGrid> {
        let profile = match &self.profile {
            Some(s) => Profile::parse(s)?,
            None => opts.profile,
        };
        Ok(DiffusionGrid {
            length: params.take("length", 1.0),
            nx: self.nx.unwrap_or(opts.nx),
            diffusivity: match params.get("diffusivity") {
                Some(d) => Diffusivity::Constant(d),
                None => Diffusivity::Heterogeneous,
            },
            profile,
        })
    }

    pub fn build(&self, opts: &BuildOptions) -> Result<PdsProblem> {
        let mut params = Params::new(&self.kind, &self.params);
        let floor = opts.floor;
        let pr = match self.kind.as_str() {
            "linear" => {
                let a = params.take("a", 5.0);
                let y0 = self.y0.clone().unwrap_or_else(|| vec![0.9, 0.1]);
                linear_with(a, y0, self.horizon.unwrap_or(2.0), floor)?
            }
            "algal" => {
                let a = params.take("a", 0.3);
                let y0 = self.y0.clone().unwrap_or_else(|| vec![9.98, 0.01, 0.01]);
                algal_with(a, y0, self.horizon.unwrap_or(30.0), floor)?
            }
            "brusselator" => {
                let k = [
                    params.take("k1", 1.0),
                    params.take("k2", 1.0),
                    params.take("k3", 1.0),
                    params.take("k4", 1.0),
                ];
                let y0 = self
                    .y0
                    .clone()
                    .unwrap_or_else(|| vec![10.0, 10.0, 0.0, 0.0, 0.1, 0.1]);
                brusselator_with(k, y0, self.horizon.unwrap_or(10.0), floor)?
            }
            "saceirqd" => {
                let d = SaceirqdParams::default();
                let p = SaceirqdParams {
                    population: params.take("population", d.population),
                    alpha: params.take("alpha", d.alpha),
                    beta: params.take("beta", d.beta),
                    mu: params.take("mu", d.mu),
                    eta: params.take("eta", d.eta),
                    sigma: params.take("sigma", d.sigma),
                    tau: params.take("tau", d.tau),
                    xi: params.take("xi", d.xi),
                    gamma: params.take("gamma", d.gamma),
                    delta: params.take("delta", d.delta),
                    lambda: params.take("lambda", d.lambda),
                    kd: params.take("kd", d.kd),
                };
                let y0 = self
                    .y0
                    .clone()
                    .unwrap_or_else(|| vec![60459997.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
                saceirqd_with(p, y0, self.horizon.unwrap_or(180.0), floor)?
            }
            "diffusion" => {
                let grid = self.grid_with(opts, &mut params)?;
                if self.y0.is_some() {
                    return Err(Error::Config(
                        "diffusion takes its initial state from the profile, not y0".into(),
                    ));
                }
                diffusion_with(grid, self.horizon.unwrap_or(60.0), floor)?
            }
            "appendix" => {
                let mu = params.take("mu", 1.0);
                let i_star = params.take_index("i_star", 0)?;
                let j_star = params.take_index("j_star", 1)?;
                let y0 = match (&self.y0, self.dim) {
                    (Some(y), _) => y.clone(),
                    (None, Some(n)) => vec![1.0; n],
                    (None, None) => vec![1.0; 3],
                };
                appendix_with(mu, i_star, j_star, y0, self.horizon.unwrap_or(2.0), floor)?
            }
            other => return Err(Error::UnknownProblem(other.to_string())),
        };
        params.finish()?;
        if let (Some(d), Some(y)) = (self.dim, &self.y0) {
            if d != y.len() {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: y.len(),
                });
            }
        }
        Ok(pr)
    }
}

/// Tracks which parameters were consumed so typos are reported.
struct Params<'a> {
    kind: &'a str,
    values: &'a BTreeMap<String, f64>,
    used: Vec<&'static str>,
}

impl<'a> Params<'a> {
    fn new(kind: &'a str, values: &'a BTreeMap<String, f64>) -> Self {
        Self {
            kind,
            values,
            used: Vec::new(),
        }
    }

    fn get(&mut self, key: &'static str) -> Option<f64> {
        self.used.push(key);
        self.values.get(key).copied()
    }

    fn take(&mut self, key: &'static str, default: f64) -> f64 {
        self.get(key).unwrap_or(default)
    }

    fn take_index(&mut self, key: &'static str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) if v >= 1.0 && v.fract() == 0.0 => Ok(v as usize - 1),
            Some(v) => Err(Error::Config(format!("{key} must be a 1-based index, got {v}"))),
        }
    }

    fn finish(self) -> Result<()> {
        match self.values.keys().find(|k| !self.used.contains(&k.as_str())) {
            Some(k) => Err(Error::Config(format!(
                "unknown parameter `{k}` for problem `{}`",
                self.kind
            ))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pds::{check_conservativity, eval_pd, rhs};

    fn all() -> Vec<PdsProblem> {
        PROBLEM_NAMES
            .iter()
            .map(|n| by_name(n, &BuildOptions { nx: 20, ..BuildOptions::default() }).unwrap())
            .collect()
    }

    #[test]
    fn initial_states() {
        assert_eq!(linear_test().y0(), &[0.9, 0.1]);
        assert!((algal_bloom().invariant() - 10.0).abs() < 1e-14);
        assert!((brusselator().invariant() - 20.2).abs() < 1e-13);
        assert_eq!(brusselator().floored, vec![2, 3]);
        assert_eq!(saceirqd().y0()[0], 60459997.0);
        assert_eq!(saceirqd().floored, vec![1, 2, 5, 7]);
    }

    #[test]
    fn linear_steady_state() {
        let pr = linear_test();
        let y = pr.exact(50.0).unwrap();
        assert!((y[0] - 1.0 / 6.0).abs() < 1e-15);
        let y = pr.exact(0.7).unwrap();
        assert!((y[0] + y[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn algal_rhs_third_component() {
        let r = rhs(&algal_bloom(), &[9.98, 0.01, 0.01]).unwrap();
        assert!((r[2] - 0.003).abs() < 1e-17);
        assert!((r.iter().sum::<f64>()).abs() < 1e-17);
    }

    #[test]
    fn brusselator_cubic_term() {
        let pr = brusselator();
        let y = [1.0, 2.0, 3.0, 4.0, 0.5, 3.0];
        let (p, _) = eval_pd(&pr, &y).unwrap();
        assert_eq!(p.get(4, 5), 0.25 * 3.0);
    }

    #[test]
    fn saceirqd_averaged_rates() {
        let c = SaceirqdParams::default();
        assert!((c.lambda - 6.28e-4).abs() < 1e-12, "{}", c.lambda);
        assert!((c.kd - 1e-4 * 0.779 / 0.061).abs() < 1e-15);
        assert!((c.kd - 1.277e-3).abs() < 1e-6);
    }

    #[test]
    fn every_problem_is_fully_conservative() {
        for pr in all() {
            let n = pr.dim();
            let samples: Vec<Vec<f64>> = (0..50)
                .map(|s| (0..n).map(|i| 0.1 + ((s * 7 + i * 13) % 17) as f64 * 0.37).collect())
                .collect();
            assert_eq!(check_conservativity(&pr, &samples).unwrap(), 0.0, "{}", pr.label);
        }
    }

    #[test]
    fn fast_loss_matches_destruction_row_sums() {
        for pr in all() {
            let n = pr.dim();
            let y: Vec<f64> = (0..n).map(|i| 0.3 + i as f64 * 0.11).collect();
            let (_, d) = eval_pd(&pr, &y).unwrap();
            let mut p = Matrix::zeros(n, pr.structure());
            let mut loss = vec![0.0; n];
            pr.system.evaluate(&y, &mut p, &mut loss);
            for (a, b) in loss.iter().zip(d.row_sums()) {
                assert!((a - b).abs() <= 1e-14 * b.abs().max(1.0), "{}", pr.label);
            }
        }
    }

    #[test]
    fn diffusion_stencil_with_constant_coefficient() {
        let grid = DiffusionGrid {
            length: 1.0,
            nx: 3,
            diffusivity: Diffusivity::Constant(2.0),
            profile: Profile::Constant,
        };
        let pr = diffusion_fv(grid).unwrap();
        assert_eq!(pr.structure(), Structure::Banded { lower: 1, upper: 1 });
        // c = D / dx^2 = 18; the linear operator is c * [-1 1 0 0; 1 -2 1 0; 0 1 -2 1; 0 0 1 -1].
        let expect = [
            [-18.0, 18.0, 0.0, 0.0],
            [18.0, -36.0, 18.0, 0.0],
            [0.0, 18.0, -36.0, 18.0],
            [0.0, 0.0, 18.0, -18.0],
        ];
        for j in 0..4 {
            let mut e = vec![0.0; 4];
            e[j] = 1.0;
            let col = rhs(&pr, &e).unwrap();
            for i in 0..4 {
                assert!((col[i] - expect[i][j]).abs() < 1e-12, "({i},{j}) {}", col[i]);
            }
        }
    }

    #[test]
    fn diffusion_constant_profile_is_an_equilibrium() {
        let pr = diffusion_fv(DiffusionGrid::with_nx(50)).unwrap();
        let f = Profile::Constant.eval(0.3);
        assert!((f - 0.12242).abs() < 1e-5, "{f}");
        let r = rhs(&pr, pr.y0()).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-12));
        let mass: f64 = rhs(&pr, &DiffusionGrid { profile: Profile::Bump, ..DiffusionGrid::with_nx(50) }.initial_values())
            .unwrap()
            .iter()
            .sum();
        assert!(mass.abs() < 1e-9);
    }

    #[test]
    fn diffusion_rejects_tiny_grid() {
        assert!(matches!(diffusion_fv(DiffusionGrid::with_nx(1)), Err(Error::Grid(_))));
    }

    #[test]
    fn appendix_solution_and_plug_in_residual() {
        let pr = appendix_pds(1.0, 0, 1, 4).unwrap();
        assert_eq!(pr.exact(0.0).unwrap(), vec![1.0; 4]);
        let y = pr.exact(1.0).unwrap();
        assert!((y[0] - 0.367879441171442).abs() < 1e-14);
        assert!((y.iter().sum::<f64>() - 4.0).abs() < 1e-14);
        for t in [0.1, 0.5, 1.3, 2.0] {
            let y = pr.exact(t).unwrap();
            let eps = 1e-5;
            let yp = pr.exact(t + eps).unwrap();
            let ym = pr.exact(t - eps).unwrap();
            let f = rhs(&pr, &y).unwrap();
            for i in 0..4 {
                let d = (yp[i] - ym[i]) / (2.0 * eps);
                assert!((d - f[i]).abs() < 1e-9);
            }
        }
        assert!(appendix_pds(1.0, 1, 1, 3).is_err());
        assert!(appendix_pds(-1.0, 0, 1, 3).is_err());
    }

    #[test]
    fn problem_file_overrides_and_typos() {
        let f = ProblemFile::from_toml("kind = \"linear\"\nhorizon = 3.0\n[params]\na = 2.0\n").unwrap();
        let pr = f.build(&BuildOptions::default()).unwrap();
        assert_eq!(pr.horizon, 3.0);
        assert!((pr.exact(100.0).unwrap()[0] - 1.0 / 3.0).abs() < 1e-15);
        let f = ProblemFile::from_toml("kind = \"linear\"\n[params]\nb = 2.0\n").unwrap();
        assert!(matches!(f.build(&BuildOptions::default()), Err(Error::Config(_))));
        assert!(ProblemFile::from_toml("kind = \"linear\"\nbogus = 1\n").is_err());
        assert!(matches!(by_name("nope", &BuildOptions::default()), Err(Error::UnknownProblem(_))));
        let f = ProblemFile::from_toml("kind = \"appendix\"\ndim = 5\n[params]\ni_star = 3\nj_star = 5\nmu = 2.0\n").unwrap();
        let pr = f.build(&BuildOptions::default()).unwrap();
        assert_eq!(pr.dim(), 5);
        assert!((pr.exact(1.0).unwrap()[4] - (2.0 - (-2.0f64).exp())).abs() < 1e-15);
    }
}
