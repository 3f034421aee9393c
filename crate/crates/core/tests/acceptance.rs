//! Acceptance criteria, one test each. Every test prints a single PASS/FAIL line.

use std::f64::consts::PI;
use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, Matrix2};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use statrs::distribution::{ContinuousCDF, Normal};

use lsband::contour::extract_contour;
use lsband::density_models::MixtureDensity;
use lsband::kde::{kernel_constants, Bandwidth, BandwidthClass, DataSet, Kde};
use lsband::levels::{probability_content_values, tau_level, tau_level_values, EvalGrid, GridValues, DEFAULT_TAU_TOL};
use lsband::montecarlo::{compare_methods, risk_curve, simulated_risk, SimConfig};
use lsband::optimize::{from_params, minimize, OptimOptions};
use lsband::risk::{hdr_risk, ls_risk, psi_term, RiskInputs};
use lsband::selector::{
    lscv_bandwidth, lscv_criterion, select_bandwidth, RiskModel, SelectionResult, SelectorConfig, Target,
};
use lsband::Error;

fn report(id: &str, pass: bool, start: Instant, limit_secs: f64, detail: String) {
    let secs = start.elapsed().as_secs_f64();
    let pass = pass && secs < limit_secs;
    // written to the handle directly so the line survives output capture
    let line = format!("{id} {}: {detail} [{secs:.2}s, limit {limit_secs}s]\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "{id} failed: {detail} in {secs:.2}s");
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, eps: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, eps: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * eps {
            left + right + delta / 15.0
        } else {
            rec(f, a, m, fa, flm, fm, left, 0.5 * eps, depth - 1) + rec(f, m, b, fm, frm, fb, right, 0.5 * eps, depth - 1)
        }
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, eps, 50)
}

#[test]
fn ac1_normal_integral_identity() {
    let start = Instant::now();
    let std = Normal::standard();
    let a_values = [-3.0, -2.3, -1.6, -0.9, -0.2];
    let b_values = [-3.0, -1.5, 0.0, 1.5, 3.0];
    let mut worst: f64 = 0.0;
    for &a in &a_values {
        for &b in &b_values {
            // the integrand has a kink at x = 0 only
            let f = |x: f64| {
                let t = a * x + b;
                if x < 0.0 {
                    std.cdf(-t)
                } else {
                    std.cdf(t)
                }
            };
            let half_width = (12.0 + f64::abs(b)) / -a;
            let quad = adaptive_simpson(&f, -half_width, 0.0, 1e-12) + adaptive_simpson(&f, 0.0, half_width, 1e-12);
            worst = worst.max((quad - psi_term(b) / -a).abs());
        }
    }
    report("AC1", worst <= 1e-7, start, 1.0, format!("max |quadrature - psi(b)/(-a)| = {worst:.3e} over 25 pairs"));
}

#[test]
fn ac2_tau_level_of_standard_normal() {
    let start = Instant::now();
    let model = MixtureDensity::standard_bivariate_normal();
    let grid = EvalGrid::square(-6.0, 6.0, 512).unwrap();
    let mut worst: f64 = 0.0;
    for tau in [0.2, 0.5, 0.8] {
        let level = tau_level(&model, tau, &grid, DEFAULT_TAU_TOL).unwrap();
        let exact = tau / (2.0 * PI);
        worst = worst.max((level - exact).abs() / exact);
    }
    report("AC2", worst <= 0.01, start, 5.0, format!("max relative error {worst:.3e} for tau in {{0.2, 0.5, 0.8}}"));
}

#[test]
fn ac3_contour_length_convergence() {
    let start = Instant::now();
    let counts = [128usize, 256, 512];
    let errors: Vec<f64> = counts
        .iter()
        .map(|&m| {
            let grid = EvalGrid::square(-1.5, 1.5, m).unwrap();
            let values = GridValues::from_fn(grid, |x| x[0].hypot(x[1]));
            let contour = extract_contour(&values, 1.0).unwrap();
            (contour.total_length() - 2.0 * PI).abs()
        })
        .collect();
    // least-squares slope of log error against log m
    let xs: Vec<f64> = counts.iter().map(|&m| (m as f64).ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 3.0, ys.iter().sum::<f64>() / 3.0);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    let order = -slope;
    let rel512 = errors[2] / (2.0 * PI);
    report(
        "AC3",
        rel512 <= 0.005 && order >= 1.8,
        start,
        10.0,
        format!("relative length error at 512^2 = {rel512:.3e}, empirical order {order:.3} (errors {errors:?})"),
    );
}

#[test]
fn ac4_risk_matches_simulation_for_small_h() {
    let start = Instant::now();
    let config = SimConfig::new(MixtureDensity::standard_bivariate_normal(), 2000, Target::Hdr { tau: 0.5 }, 50, 1).unwrap();
    let curve = risk_curve(&config, &[0.08, 0.12, 0.18]).unwrap();
    let rel: Vec<f64> = curve
        .rows
        .iter()
        .map(|r| (r.approx_risk - r.sim_risk).abs() / r.sim_risk)
        .collect();
    let worst = rel.iter().cloned().fold(0.0, f64::max);
    let rows: Vec<String> = curve
        .rows
        .iter()
        .zip(&rel)
        .map(|(r, e)| format!("h={} sim={:.4} approx={:.4} rel={:.3}", r.h, r.sim_risk, r.approx_risk, e))
        .collect();
    report("AC4", worst <= 0.25, start, 600.0, rows.join("; "));
}

#[test]
fn ac5_oracle_bandwidth_rate() {
    let start = Instant::now();
    let model = MixtureDensity::standard_bivariate_normal();
    let grid = EvalGrid::square(-6.0, 6.0, 512).unwrap();
    let ns = [500usize, 2000, 8000, 32000];
    let h_opt: Vec<f64> = ns
        .iter()
        .map(|&n| {
            let oracle =
                RiskModel::from_fields(Target::Hdr { tau: 0.5 }, n, &grid, &model, &model, &model, DEFAULT_TAU_TOL)
                    .unwrap();
            let objective = |p: &[f64]| {
                let bw = from_params(p, BandwidthClass::Scalar).ok()?;
                oracle.risk(&bw).ok().map(|r| r.risk)
            };
            let x0 = [(n as f64).powf(-1.0 / 6.0).ln()];
            let out = minimize(&objective, &x0, &OptimOptions::default());
            assert!(out.converged, "optimizer did not converge at n = {n}");
            out.x[0].exp()
        })
        .collect();
    let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = h_opt.iter().map(|h| h.ln()).collect();
    let k = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    report(
        "AC5",
        (slope + 1.0 / 6.0).abs() <= 0.05,
        start,
        120.0,
        format!("log-log slope {slope:.4} (target -1/6), h_opt = {h_opt:.4?}"),
    );
}

#[test]
fn ac6_selector_near_simulated_minimizer() {
    let start = Instant::now();
    let model = MixtureDensity::standard_bivariate_normal();
    let data = model.sample(2000, 2024);
    let selected = match select_bandwidth(&data, &SelectorConfig::hdr(0.5)) {
        Ok(r) => r,
        Err(Error::NoConvergence(r)) => *r,
        Err(e) => panic!("selection failed: {e}"),
    };
    let h_sel = selected.bandwidth.matrix()[(0, 0)].sqrt();
    let config = SimConfig::new(model, 2000, Target::Hdr { tau: 0.5 }, 50, 1).unwrap();
    let hs: Vec<f64> = (0..15).map(|i| 0.15 + 0.025 * i as f64).collect();
    let curve = risk_curve(&config, &hs).unwrap();
    let h_mc = curve.sim_argmin().unwrap();
    let rel = (h_sel - h_mc).abs() / h_mc;
    report(
        "AC6",
        rel <= 0.25,
        start,
        900.0,
        format!("selected h = {h_sel:.4}, simulated minimizer h = {h_mc:.4}, relative gap {rel:.3}"),
    );
}

#[test]
fn ac7_hdr_selector_beats_lscv_on_sharp_mode() {
    let start = Instant::now();
    let config = SimConfig::new(MixtureDensity::sharp_mode(), 2000, Target::Hdr { tau: 0.2 }, 20, 1).unwrap();
    let cmp = compare_methods(&config, BandwidthClass::Full).unwrap();
    assert_eq!(cmp.rows.len(), 20);
    let pass = cmp.median_hdr_error < cmp.median_lscv_error && cmp.wilcoxon.p_value < 0.1;
    report(
        "AC7",
        pass,
        start,
        2700.0,
        format!(
            "median error HDR {:.4} vs LSCV {:.4}, Wilcoxon p = {:.3e} ({:?}, {} pairs)",
            cmp.median_hdr_error, cmp.median_lscv_error, cmp.wilcoxon.p_value, cmp.wilcoxon.method, cmp.wilcoxon.n_used
        ),
    );
}

fn gauss2(x: [f64; 2], h: &Matrix2<f64>) -> f64 {
    let det = h[(0, 0)] * h[(1, 1)] - h[(0, 1)] * h[(1, 0)];
    let q = (h[(1, 1)] * x[0] * x[0] - 2.0 * h[(0, 1)] * x[0] * x[1] + h[(0, 0)] * x[1] * x[1]) / det;
    (-0.5 * q).exp() / (2.0 * PI * det.sqrt())
}

/// `int f_hat^2 - (2/n) sum_i f_hat_{-i}(X_i)` by midpoint quadrature and direct sums.
fn lscv_by_quadrature(points: &[[f64; 2]], h: &Matrix2<f64>) -> f64 {
    let n = points.len() as f64;
    let f_hat = |x: [f64; 2]| points.iter().map(|p| gauss2([x[0] - p[0], x[1] - p[1]], h)).sum::<f64>() / n;
    let reach = 9.0 * h.symmetric_eigenvalues().max().sqrt();
    let lo = [0, 1].map(|k| points.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min) - reach);
    let hi = [0, 1].map(|k| points.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max) + reach);
    let m = 1200;
    let dx = [(hi[0] - lo[0]) / m as f64, (hi[1] - lo[1]) / m as f64];
    let mut integral = 0.0;
    for j in 0..m {
        for i in 0..m {
            let x = [lo[0] + (i as f64 + 0.5) * dx[0], lo[1] + (j as f64 + 0.5) * dx[1]];
            integral += f_hat(x).powi(2);
        }
    }
    integral *= dx[0] * dx[1];
    let loo: f64 = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| gauss2([p[0] - q[0], p[1] - q[1]], h))
                .sum::<f64>()
                / (n - 1.0)
        })
        .sum();
    integral - 2.0 / n * loo
}

#[test]
fn ac8_lscv_closed_form_matches_quadrature() {
    let start = Instant::now();
    let data = MixtureDensity::standard_bivariate_normal().sample(10, 8);
    let points: Vec<[f64; 2]> = (0..data.n()).map(|i| data.point2(i)).collect();
    let params = [[-0.9, 0.3, -1.2], [-0.4, -0.5, -0.7], [-1.5, 0.1, -1.0]];
    let mut worst: f64 = 0.0;
    for p in params {
        let bw = from_params(&p, BandwidthClass::Full).unwrap();
        let h = bw.as_matrix2().unwrap();
        let closed = lscv_criterion(&data, &bw).unwrap();
        let quad = lscv_by_quadrature(&points, &h);
        worst = worst.max((closed - quad).abs());
    }
    report("AC8", worst <= 1e-4, start, 5.0, format!("max |closed form - quadrature| = {worst:.3e} over 3 bandwidths"));
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(Config::with_cases(cases), TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn full_bandwidth() -> impl Strategy<Value = Bandwidth> {
    (-1.6f64..-0.2, -0.6f64..0.6, -1.6f64..-0.2).prop_map(|(a, b, c)| from_params(&[a, b, c], BandwidthClass::Full).unwrap())
}

fn small_sample() -> impl Strategy<Value = DataSet> {
    prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..20)
        .prop_map(|pts| DataSet::from_rows(&pts.iter().map(|&(x, y)| [x, y]).collect::<Vec<_>>()).unwrap())
}

fn is_spd(rows: &[Vec<f64>]) -> bool {
    let m = DMatrix::from_fn(2, 2, |i, j| rows[i][j]);
    (m[(0, 1)] - m[(1, 0)]).abs() <= 1e-12 * m.amax() && m.cholesky().is_some()
}

fn accept(r: lsband::Result<SelectionResult>) -> Result<SelectionResult, TestCaseError> {
    match r {
        Ok(r) => Ok(r),
        Err(Error::NoConvergence(r)) => Ok(*r),
        Err(e) => Err(TestCaseError::fail(format!("selection error: {e}"))),
    }
}

fn property_kde(failures: &mut Vec<String>) {
    let result = runner(32).run(&(small_sample(), full_bandwidth(), -1.5f64..1.5, -1.5f64..1.5), |(data, bw, x, y)| {
        let kde = Kde::new(data.clone(), bw.clone()).unwrap();
        let grid = EvalGrid::covering(&data, &bw, 256).unwrap();
        let mass = kde.grid_density(&grid).values().iter().sum::<f64>() * grid.cell_area();
        prop_assert!((mass - 1.0).abs() < 1e-3, "mass {}", mass);
        let step = 1e-5;
        let g = kde.gradient(&[x, y]);
        let hs = kde.hessian(&[x, y]);
        let scale = 1.0 + g.norm() + hs.norm();
        for k in 0..2 {
            let mut up = [x, y];
            let mut down = [x, y];
            up[k] += step;
            down[k] -= step;
            let fd = (kde.density(&up) - kde.density(&down)) / (2.0 * step);
            prop_assert!((fd - g[k]).abs() < 1e-5 * scale, "gradient {} vs {}", g[k], fd);
            let fd_grad = (kde.gradient(&up) - kde.gradient(&down)) / (2.0 * step);
            for r in 0..2 {
                prop_assert!((fd_grad[r] - hs[(r, k)]).abs() < 1e-5 * scale, "hessian {} vs {}", hs[(r, k)], fd_grad[r]);
            }
        }
        prop_assert!((hs[(0, 1)] - hs[(1, 0)]).abs() <= 1e-14 * scale);
        Ok(())
    });
    if let Err(e) = result {
        failures.push(format!("kde: {e}"));
    }
}

fn property_psi(failures: &mut Vec<String>) {
    let result = runner(256).run(&(-40.0f64..40.0), |b| {
        let p = psi_term(b);
        prop_assert_eq!(p, psi_term(-b));
        prop_assert!(p > 0.0 && p >= b.abs() * (1.0 - 4.0 * f64::EPSILON));
        Ok(())
    });
    if let Err(e) = result {
        failures.push(format!("psi: {e}"));
    }
}

fn property_additivity(failures: &mut Vec<String>) {
    let model = MixtureDensity::standard_bivariate_normal();
    let grid = EvalGrid::square(-5.0, 5.0, 128).unwrap();
    let level = 0.5 / (2.0 * PI);
    let inputs = RiskInputs::from_density(&model, 1000, level, &grid, kernel_constants(2)).unwrap();
    let k = inputs.contour.segments.len();
    let subset = |keep: &[bool], want: bool| -> Option<RiskInputs> {
        let idx: Vec<usize> = (0..k).filter(|&i| keep[i] == want).collect();
        if idx.is_empty() {
            return None;
        }
        let mut contour = inputs.contour.clone();
        contour.segments = idx.iter().map(|&i| inputs.contour.segments[i].clone()).collect();
        let hessians = idx.iter().map(|&i| inputs.hessians[i]).collect();
        Some(RiskInputs::new(inputs.n, inputs.level, contour, hessians, inputs.region_hessian, inputs.kernel).unwrap())
    };
    let result = runner(32).run(&(prop::collection::vec(any::<bool>(), k), 0.05f64..0.8), |(keep, h)| {
        let bw = Bandwidth::scalar(h, 2).unwrap();
        let whole = ls_risk(&bw, &inputs).unwrap();
        let parts: f64 = [true, false]
            .iter()
            .filter_map(|&w| subset(&keep, w))
            .map(|s| ls_risk(&bw, &s).unwrap().risk)
            .sum();
        prop_assert!((whole.risk - parts).abs() <= 1e-12 * whole.risk);
        for report in [whole, hdr_risk(&bw, &inputs).unwrap()] {
            let sum: f64 = report.per_segment.iter().map(|s| s.contribution).sum();
            prop_assert!((report.risk - sum).abs() <= 1e-12 * report.risk);
        }
        Ok(())
    });
    if let Err(e) = result {
        failures.push(format!("additivity: {e}"));
    }
}

fn property_nesting(failures: &mut Vec<String>) {
    let result = runner(24).run(&(any::<u64>(), 0.15f64..0.6, 0.02f64..0.98, 0.02f64..0.98), |(seed, h, t1, t2)| {
        let (t1, t2) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let data = MixtureDensity::sharp_mode().sample(200, seed);
        let bw = Bandwidth::scalar(h, 2).unwrap();
        let grid = EvalGrid::covering(&data, &bw, 128).unwrap();
        let values = Kde::new(data, bw).unwrap().grid_density(&grid);
        let l1 = tau_level_values(&values, t1, DEFAULT_TAU_TOL).unwrap();
        let l2 = tau_level_values(&values, t2, DEFAULT_TAU_TOL).unwrap();
        prop_assert!(l1 <= l2, "levels {} > {} for tau {} < {}", l1, l2, t1, t2);
        let inner = values.values().iter().filter(|&&v| v >= l2);
        prop_assert!(inner.clone().all(|&v| v >= l1));
        let c1 = probability_content_values(&values, l1).unwrap();
        let c2 = probability_content_values(&values, l2).unwrap();
        prop_assert!(c1 >= c2);
        Ok(())
    });
    if let Err(e) = result {
        failures.push(format!("nesting: {e}"));
    }
}

fn property_determinism(failures: &mut Vec<String>) {
    let result = runner(6).run(&any::<u64>(), |seed| {
        let model = MixtureDensity::sharp_mode();
        let data = model.sample(300, seed);
        let again = model.sample(300, seed);
        prop_assert_eq!(data.as_slice(), again.as_slice());
        let config = SelectorConfig::hdr(0.3);
        let a = serde_json::to_string(&accept(select_bandwidth(&data, &config))?).unwrap();
        let b = serde_json::to_string(&accept(select_bandwidth(&data, &config))?).unwrap();
        prop_assert_eq!(a, b);
        let mut sim = SimConfig::new(model, 300, Target::Hdr { tau: 0.3 }, 2, seed).unwrap();
        sim.grid = sim.grid.with_counts(96).unwrap();
        let bw = Bandwidth::scalar(0.3, 2).unwrap();
        prop_assert_eq!(simulated_risk(&sim, &bw).unwrap(), simulated_risk(&sim, &bw).unwrap());
        Ok(())
    });
    if let Err(e) = result {
        failures.push(format!("determinism: {e}"));
    }
}

fn property_spd(failures: &mut Vec<String>) {
    let classes = prop_oneof![
        Just(BandwidthClass::Scalar),
        Just(BandwidthClass::Diagonal),
        Just(BandwidthClass::Full)
    ];
    let result = runner(12).run(&(any::<u64>(), classes, any::<bool>()), |(seed, class, sharp)| {
        let model = if sharp {
            MixtureDensity::sharp_mode()
        } else {
            MixtureDensity::standard_bivariate_normal()
        };
        let data = model.sample(150, seed);
        let results = [
            accept(select_bandwidth(&data, &SelectorConfig::hdr(0.25).with_class(class)))?,
            accept(lscv_bandwidth(&data, class))?,
        ];
        for r in &results {
            prop_assert!(is_spd(&r.bandwidth.rows()), "H = {:?}", r.bandwidth.rows());
            prop_assert!(r.trace.iter().all(|t| is_spd(&t.bandwidth)));
            prop_assert!(r.risk.is_finite());
        }
        Ok(())
    });
    if let Err(e) = result {
        failures.push(format!("spd: {e}"));
    }
}

#[test]
fn ac9_property_suites() {
    let start = Instant::now();
    let mut failures = Vec::new();
    property_kde(&mut failures);
    property_psi(&mut failures);
    property_additivity(&mut failures);
    property_nesting(&mut failures);
    property_determinism(&mut failures);
    property_spd(&mut failures);
    let detail = if failures.is_empty() {
        "kde normalization and derivatives, psi evenness and positivity, per-segment additivity, \
         level-set nesting, seeded determinism, SPD selections"
            .to_string()
    } else {
        failures.join(" | ")
    };
    report("AC9", failures.is_empty(), start, 60.0, detail);
}
