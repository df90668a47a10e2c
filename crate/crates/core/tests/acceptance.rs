//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.

use std::time::{Duration, Instant};

use mplm_core::coefficients::{catalog, method, MethodLadder, METHOD_NAMES, TABLE_METHODS};
use mplm_core::harness::{
    convergence_study, mass_residual, default_exponents, reference_solution, step_ladder, HBase,
    Metric, Reference, StudyOptions,
};
use mplm_core::integrator::{compute_pwd_ladder, mpe_step, Integrator, PwdStrategy, StepHistory};
use mplm_core::linsolve::{assemble, solve, PdTerms};
use mplm_core::matrix::Matrix;
use mplm_core::problems::{
    appendix_pds, by_name, diffusion_fv, linear_test, BuildOptions, DiffusionGrid, Profile,
    PROBLEM_NAMES,
};
use num_rational::Rational64;

fn report(id: u32, title: &str, ok: bool, detail: &str, elapsed: Duration) {
    println!(
        "criterion {id} [{title}]: {} ({detail}; {:.2} s)",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
}

/// Test 1 exact solution with `a = 5`, `y0 = (0.9, 0.1)`.
fn linear_exact(t: f64) -> [f64; 2] {
    let a = 5.0;
    let c = 1.0 / (1.0 + a);
    let y1 = c + (0.9 - c) * (-(1.0 + a) * t).exp();
    [y1, 1.0 - y1]
}

/// Least-squares slope of `log2 e` against `log2 h`.
fn fitted_slope(h: &[f64], e: &[f64]) -> f64 {
    let x: Vec<f64> = h.iter().map(|v| v.log2()).collect();
    let y: Vec<f64> = e.iter().map(|v| v.log2()).collect();
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn criterion_1_coefficient_validation() {
    let start = Instant::now();
    let sets = catalog();
    let mut worst_f64 = 0.0_f64;
    let mut exact_ok = true;
    for c in &sets {
        exact_ok &= c.order_residuals().iter().all(|r| *r == Rational64::from_integer(0));
        // sum alpha = 1 and sum_r r^q alpha_r = q sum_r r^(q-1) beta_r
        let k = c.steps();
        let s: f64 = c.alpha().iter().sum();
        worst_f64 = worst_f64.max((s - 1.0).abs());
        for q in 1..=c.order() as i32 {
            let mut lhs = 0.0;
            let mut rhs = 0.0;
            for r in 1..=k {
                let rf = r as f64;
                lhs += rf.powi(q) * c.alpha()[r - 1];
                rhs += q as f64 * rf.powi(q - 1) * c.beta()[r - 1];
            }
            worst_f64 = worst_f64.max((lhs - rhs).abs() / rhs.abs().max(1.0));
        }
    }
    let elapsed = start.elapsed();
    let ok = sets.len() == 8 && exact_ok && worst_f64 <= 1e-12 && elapsed < Duration::from_secs(1);
    report(
        1,
        "coefficient validation",
        ok,
        &format!("{} sets, exact residuals zero: {exact_ok}, f64 residual {worst_f64:.1e}", sets.len()),
        elapsed,
    );
    assert!(ok);
}

#[derive(PartialEq)]
enum Violation {
    Run,
    Sign,
    Mass,
}

struct SweepOutcome {
    min_component: f64,
    worst_relative_mass: f64,
    diffusion_mass: f64,
    failures: Vec<(Violation, String)>,
}

fn positivity_conservation_sweep() -> SweepOutcome {
    let mut out = SweepOutcome {
        min_component: f64::INFINITY,
        worst_relative_mass: 0.0,
        diffusion_mass: 0.0,
        failures: Vec::new(),
    };
    for name in PROBLEM_NAMES {
        let pr = by_name(name, &BuildOptions::default()).unwrap();
        let t = pr.horizon;
        for m in METHOD_NAMES {
            for div in [1.0, 3.0, 10.0, 100.0] {
                let h = t / div;
                let traj = match Integrator::by_name(&pr, m).unwrap().run(h) {
                    Ok(t) => t,
                    Err(e) => {
                        out.failures.push((Violation::Run, format!("{name}/{m}/T/{div}: {e}")));
                        continue;
                    }
                };
                let e0: f64 = pr.y0().iter().sum();
                for y in traj.states() {
                    let min = y.iter().copied().fold(f64::INFINITY, f64::min);
                    out.min_component = out.min_component.min(min);
                    if !(min > 0.0) {
                        out.failures.push((Violation::Sign, format!("{name}/{m}/T/{div}: component {min:e}")));
                    }
                    let drift = (y.iter().sum::<f64>() - e0).abs() / e0;
                    out.worst_relative_mass = out.worst_relative_mass.max(drift);
                    if drift > 1e-11 {
                        out.failures.push((Violation::Mass, format!("{name}/{m}/T/{div}: mass drift {drift:e}")));
                    }
                }
                if name == "diffusion" {
                    let grid = DiffusionGrid::with_nx(200);
                    let r = mass_residual(&traj, &grid).unwrap();
                    out.diffusion_mass = out.diffusion_mass.max(r.conservation);
                    if r.conservation > 1e-11 {
                        out.failures.push((
                            Violation::Mass,
                            format!("{name}/{m}/T/{div}: discrete mass {:e}", r.conservation),
                        ));
                    }
                }
            }
        }
    }
    out
}

#[test]
fn criteria_2_and_3_positivity_and_conservation() {
    let start = Instant::now();
    let out = positivity_conservation_sweep();
    let elapsed = start.elapsed();
    let any = |v: Violation| out.failures.iter().any(|(k, _)| *k == v);
    let ran = !any(Violation::Run);
    let ok2 = ran && !any(Violation::Sign) && out.min_component > 0.0 && elapsed < Duration::from_secs(30);
    let ok3 = ran && !any(Violation::Mass);
    report(
        2,
        "unconditional positivity",
        ok2,
        &format!("min component {:e}", out.min_component),
        elapsed,
    );
    report(
        3,
        "unconditional conservation",
        ok3,
        &format!(
            "worst relative drift {:.1e}, diffusion discrete mass {:.1e}",
            out.worst_relative_mass, out.diffusion_mass
        ),
        elapsed,
    );
    for (_, f) in out.failures.iter().take(20) {
        println!("  {f}");
    }
    assert!(ok2 && ok3);
}

#[test]
fn criterion_4_linear_test_anchors() {
    let start = Instant::now();
    let pr = linear_test();
    let hs = step_ladder(&pr, 5, 11, HBase::Unit).unwrap();
    let reference = Reference::Analytic(pr.clone());
    let opts = StudyOptions {
        jobs: 4,
        ..StudyOptions::new(Metric::MaxAbs)
    };
    // published max errors, h = 2^-5 .. 2^-11
    let published: [(&str, [f64; 7]); 5] = [
        ("mplm-2-2", [4.92e-3, 1.52e-3, 4.24e-4, 1.12e-4, 2.89e-5, 7.34e-6, 1.85e-6]),
        ("mplm-4-3", [6.71e-4, 1.41e-4, 2.37e-5, 3.48e-6, 4.72e-7, 6.16e-8, 7.87e-9]),
        ("mplm-5-4", [2.70e-4, 3.02e-5, 2.57e-6, 1.91e-7, 1.36e-8, 9.63e-10, 6.88e-11]),
        ("mplm-7-5", [1.12e-4, 8.53e-6, 4.64e-7, 1.93e-8, 7.09e-10, 2.49e-11, 7.98e-13]),
        ("mplm-10-6", [4.52e-5, 3.51e-6, 1.15e-7, 2.71e-9, 5.30e-11, 6.95e-13, 3.34e-13]),
    ];
    let mut notes = Vec::new();
    let mut ok = true;

    let mpe = convergence_study(&pr, &method("mpe").unwrap(), &hs, &reference, &opts).unwrap();
    let e5 = mpe.rows[0].error;
    let mpe_ok = (e5 / 2.34e-2 - 1.0).abs() <= 0.10;
    ok &= mpe_ok;
    notes.push(format!("mpe E(2^-5) {e5:.3e}"));

    for (name, table) in published {
        let rep = convergence_study(&pr, &method(name).unwrap(), &hs, &reference, &opts).unwrap();
        let threshold = rep.plateau_threshold(&rep.rows[0]);
        let mut worst_ratio = 1.0_f64;
        for (row, &pub_e) in rep.rows.iter().zip(&table) {
            if row.error < threshold || pub_e < threshold {
                continue;
            }
            let ratio = (row.error / pub_e).max(pub_e / row.error);
            worst_ratio = worst_ratio.max(ratio);
        }
        let fin = rep.final_rate().unwrap_or(f64::NAN);
        let max = rep.max_rate().unwrap_or(f64::NAN);
        let rate_ok = match name {
            "mplm-2-2" => {
                let p11 = rep.rows.last().unwrap().p_hat.unwrap();
                (1.9..=2.1).contains(&p11)
            }
            "mplm-4-3" => (2.85..=3.1).contains(&fin),
            "mplm-5-4" => fin >= 3.6,
            "mplm-7-5" => fin >= 4.7,
            _ => max >= 5.6,
        };
        let this = rate_ok && worst_ratio <= 3.0;
        ok &= this;
        notes.push(format!("{name} final {fin:.2} max {max:.2} ratio {worst_ratio:.2}"));
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(120);
    report(4, "linear test anchors", ok, &notes.join(", "), elapsed);
    assert!(ok);
}

#[test]
fn criterion_5_nonlinear_order_patterns() {
    let start = Instant::now();
    let mut ok = true;
    let mut notes = Vec::new();
    for name in ["algal", "brusselator", "saceirqd"] {
        let pr = by_name(name, &BuildOptions::default()).unwrap();
        let (m0, m1) = default_exponents(name).unwrap();
        let hs = step_ladder(&pr, m0, m1, HBase::Unit).unwrap();
        let reference = reference_solution(&pr, *hs.last().unwrap(), 1e-6).unwrap();
        let opts = StudyOptions {
            jobs: 4,
            ..StudyOptions::new(Metric::default_for(name))
        };
        for m in TABLE_METHODS {
            let c = method(m).unwrap();
            let p = c.order() as f64;
            let rep = convergence_study(&pr, &c, &hs, &reference, &opts).unwrap();
            let fin = rep.final_rate();
            let need = if c.order() <= 4 { p - 0.35 } else { p - 0.7 };
            let this = fin.is_some_and(|r| r >= need);
            ok &= this;
            if !this || c.order() >= 5 {
                notes.push(format!("{name}/{m} {:.2}", fin.unwrap_or(f64::NAN)));
            }
        }
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(600);
    report(5, "nonlinear order patterns", ok, &notes.join(", "), elapsed);
    assert!(ok);
}

#[test]
fn criterion_6_weight_denominator_consistency() {
    let start = Instant::now();
    let pr = linear_test();
    let t_n = 1.0;
    let hs: Vec<f64> = (5..=10).map(|m| 2f64.powi(-m)).collect();
    let mut ok = true;
    let mut notes = Vec::new();
    for p in 2..=5 {
        let ladder = MethodLadder::for_order(p).unwrap();
        let depth = ladder.levels().iter().map(|l| l.steps()).max().unwrap();
        let mut errs = Vec::new();
        for &h in &hs {
            let states: Vec<Vec<f64>> = (1..=depth)
                .rev()
                .map(|r| linear_exact(t_n - r as f64 * h).to_vec())
                .collect();
            let hist = StepHistory::from_states(&pr, &states, depth).unwrap();
            let sigma = compute_pwd_ladder(&hist, h, &ladder).unwrap();
            let exact = linear_exact(t_n);
            errs.push(
                sigma
                    .iter()
                    .zip(exact)
                    .map(|(s, y)| (s - y).abs())
                    .fold(0.0, f64::max),
            );
        }
        let fitted = fitted_slope(&hs, &errs);
        let n = errs.len();
        let slope = (errs[n - 2] / errs[n - 1]).log2();
        let this = slope >= p as f64 - 0.3;
        ok &= this;
        notes.push(format!("p={p} slope {slope:.2} (fit {fitted:.2})"));
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(30);
    report(6, "weight denominator consistency", ok, &notes.join(", "), elapsed);
    assert!(ok);
}

#[test]
fn criterion_7_lagged_weights_lose_order() {
    let start = Instant::now();
    let pr = appendix_pds(1.0, 0, 1, 3).unwrap();
    let c = method("mplm-4-3").unwrap();
    let hs: Vec<f64> = (5..=9).map(|m| 2f64.powi(-m)).collect();
    let reference = Reference::Analytic(pr.clone());
    let run = |strategy: PwdStrategy| -> Vec<f64> {
        hs.iter()
            .map(|&h| {
                let traj = Integrator::with_strategy(&pr, c.clone(), strategy.clone())
                    .unwrap()
                    .run(h)
                    .unwrap();
                mplm_core::harness::max_abs_error(&traj, &reference).unwrap()
            })
            .collect()
    };
    let lagged = run(PwdStrategy::Lagged);
    let ladder = run(PwdStrategy::Embedding(MethodLadder::for_method(&c).unwrap()));
    let last = |e: &[f64]| (e[e.len() - 2] / e[e.len() - 1]).log2();
    let (pl, pe) = (last(&lagged), last(&ladder));
    let elapsed = start.elapsed();
    let ok = pl <= 1.5 && pe >= 2.7 && elapsed < Duration::from_secs(30);
    report(
        7,
        "lagged weights lose order",
        ok,
        &format!("lagged p {pl:.2}, ladder p {pe:.2}"),
        elapsed,
    );
    assert!(ok);
}

#[test]
fn criterion_8_oracle_equivalence() {
    let start = Instant::now();
    let pr = linear_test();
    let y = mpe_step(pr.y0(), 1.0, &pr).unwrap();
    let expect = [1.9 / 7.0, 5.1 / 7.0];
    let mpe_err = y.iter().zip(expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let grid = DiffusionGrid {
        profile: Profile::Bump,
        ..DiffusionGrid::with_nx(200)
    };
    let dpr = diffusion_fv(grid).unwrap();
    let state = dpr.y0().to_vec();
    let mut p = Matrix::zeros(dpr.dim(), dpr.structure());
    let mut loss = vec![0.0; dpr.dim()];
    dpr.system.evaluate(&state, &mut p, &mut loss);
    let terms = [PdTerms {
        production: &p,
        loss: &loss,
    }];
    let h = 0.05;
    let banded = assemble(&terms, &[1.0], &state, h).unwrap();
    let dense = Matrix::Dense(banded.to_dense());
    let xb = solve(&banded, &state).unwrap().x;
    let xd = solve(&dense, &state).unwrap().x;
    let scale = xd.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let lin_err = xb.iter().zip(&xd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
    let banded_kind = matches!(banded, Matrix::Banded(_));

    let elapsed = start.elapsed();
    let ok = mpe_err <= 1e-14 && banded_kind && lin_err <= 1e-12 && elapsed < Duration::from_secs(1);
    report(
        8,
        "oracle equivalence",
        ok,
        &format!("mpe error {mpe_err:.1e}, dense vs banded {lin_err:.1e}"),
        elapsed,
    );
    assert!(ok);
}

#[test]
fn criterion_9_determinism() {
    let start = Instant::now();
    let pr = by_name("brusselator", &BuildOptions::default()).unwrap();
    let hs = step_ladder(&pr, 5, 8, HBase::Unit).unwrap();
    let csv = |jobs: usize| {
        let reference = reference_solution(&pr, hs[3], 1e-6).unwrap();
        let opts = StudyOptions {
            jobs,
            ..StudyOptions::new(Metric::MaxAbs)
        };
        convergence_study(&pr, &method("mplm-5-4").unwrap(), &hs, &reference, &opts)
            .unwrap()
            .to_csv(false)
    };
    let a = csv(1);
    let b = csv(1);
    let c = csv(4);
    let elapsed = start.elapsed();
    let ok = a == b && a == c && !a.contains("wall_time");
    report(
        9,
        "determinism",
        ok,
        &format!("{} bytes, sequential and parallel runs identical: {}", a.len(), a == c),
        elapsed,
    );
    assert!(ok);
}
