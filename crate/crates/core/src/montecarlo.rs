//! Monte Carlo estimates of the true symmetric-difference risk under a known
//! Gaussian mixture, risk curves against the asymptotic approximation, and paired
//! comparisons of the plug-in selector with LSCV.
//!
//! Replication `r` draws its sample with seed `seed + r`; results are reduced in
//! replication order, so every output is a deterministic function of the config.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::density_models::{spherical_tau_level, MixtureDensity};
use crate::error::{Error, Result};
use crate::field::PlanarField;
use crate::kde::{Bandwidth, BandwidthClass, DataSet, Kde};
use crate::levels::{tau_level_values, EvalGrid, GridValues, DEFAULT_TAU_TOL};
use crate::selector::{lscv_bandwidth, select_bandwidth, RiskModel, SelectionResult, SelectorConfig, Target};

/// Default nodes per axis of the simulation grid.
pub const DEFAULT_SIM_GRID: usize = 400;

/// Half-width of the simulation box in component standard deviations.
const BOX_SDS: f64 = 6.0;

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub model: MixtureDensity,
    pub n: usize,
    pub target: Target,
    pub reps: usize,
    pub seed: u64,
    pub grid: EvalGrid,
}

impl SimConfig {
    /// Configuration with the default grid over the model's `+/- 6 sd` box.
    pub fn new(model: MixtureDensity, n: usize, target: Target, reps: usize, seed: u64) -> Result<Self> {
        let grid = model_grid(&model, DEFAULT_SIM_GRID)?;
        Ok(Self {
            model,
            n,
            target,
            reps,
            seed,
            grid,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.model.dim() != 2 {
            return Err(Error::DimensionError("simulations are implemented for d = 2".into()));
        }
        if self.reps == 0 {
            return Err(Error::InvalidInput("at least one replication is required".into()));
        }
        if self.n < 2 {
            return Err(Error::InvalidInput("sample size must be at least 2".into()));
        }
        Ok(())
    }

    fn rep_seed(&self, rep: usize) -> u64 {
        self.seed.wrapping_add(rep as u64)
    }
}

/// Box covering every component to `+/- 6 sd` on each axis.
pub fn model_grid(model: &MixtureDensity, count: usize) -> Result<EvalGrid> {
    let (lo, hi) = model.bounding_box(BOX_SDS);
    if lo.len() != 2 {
        return Err(Error::DimensionError("model grid requires a bivariate model".into()));
    }
    EvalGrid::new([lo[0], lo[1]], [hi[0], hi[1]], [count, count])
}

/// True density on the simulation grid together with the true level.
struct Truth {
    values: GridValues,
    level: f64,
}

impl Truth {
    fn new(config: &SimConfig) -> Result<Self> {
        let values = config.model.grid_values(&config.grid);
        let level = match config.target {
            Target::Ls { level } => level,
            Target::Hdr { tau } => match spherical_tau_level(&config.model, tau) {
                Ok(level) => level,
                Err(Error::NotSpherical) => tau_level_values(&values, tau, DEFAULT_TAU_TOL)?,
                Err(e) => return Err(e),
            },
        };
        values.check_coverage(level)?;
        Ok(Self { values, level })
    }

    fn mass(&self, estimate: &GridValues, est_level: f64) -> f64 {
        symdiff_on_grid(&self.values, self.level, estimate.values().iter().map(|&v| v >= est_level))
    }
}

fn symdiff_on_grid(truth: &GridValues, level: f64, membership: impl Iterator<Item = bool>) -> f64 {
    let s: f64 = truth
        .values()
        .iter()
        .zip(membership)
        .filter(|(&f, m)| (f >= level) != *m)
        .map(|(&f, _)| f)
        .sum();
    s * truth.grid().cell_area()
}

/// `mu_f0(L symdiff L_hat)`: midpoint quadrature of `f0` over the nodes where
/// `1{f0 >= true_level}` and `est_membership` disagree.
pub fn symdiff_mass(
    model: &MixtureDensity,
    true_level: f64,
    est_membership: impl Fn([f64; 2]) -> bool + Sync,
    grid: &EvalGrid,
) -> Result<f64> {
    let truth = model.grid_values(grid);
    truth.check_coverage(true_level)?;
    let [nx, ny] = grid.counts;
    let membership: Vec<bool> = (0..nx * ny)
        .into_par_iter()
        .map(|k| est_membership(grid.node(k % nx, k / nx)))
        .collect();
    Ok(symdiff_on_grid(&truth, true_level, membership.into_iter()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimRisk {
    pub mean: f64,
    pub se: f64,
    /// Per-replication errors in replication order.
    pub errors: Vec<f64>,
}

fn mean_se(errors: Vec<f64>) -> SimRisk {
    let m = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / m;
    let se = if errors.len() > 1 {
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (m - 1.0);
        (var / m).sqrt()
    } else {
        0.0
    };
    SimRisk { mean, se, errors }
}

/// Level estimate and symmetric-difference error of one kernel estimate.
fn estimate_error(config: &SimConfig, truth: &Truth, data: DataSet, bandwidth: &Bandwidth) -> Result<f64> {
    let values = Kde::new(data, bandwidth.clone())?.grid_values(&config.grid);
    let level = match config.target {
        Target::Ls { level } => level,
        Target::Hdr { tau } => tau_level_values(&values, tau, DEFAULT_TAU_TOL)?,
    };
    Ok(truth.mass(&values, level))
}

fn simulate_with(config: &SimConfig, truth: &Truth, bandwidth: &Bandwidth) -> Result<SimRisk> {
    let errors = (0..config.reps)
        .into_par_iter()
        .map(|rep| {
            let data = config.model.sample(config.n, config.rep_seed(rep));
            estimate_error(config, truth, data, bandwidth)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_se(errors))
}

/// Mean and standard error of the symmetric-difference error of the plug-in
/// estimator with a fixed bandwidth, over `config.reps` replications.
pub fn simulated_risk(config: &SimConfig, bandwidth: &Bandwidth) -> Result<SimRisk> {
    config.validate()?;
    let truth = Truth::new(config)?;
    simulate_with(config, &truth, bandwidth)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RiskCurveRow {
    pub h: f64,
    pub sim_risk: f64,
    pub sim_se: f64,
    pub approx_risk: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RiskCurve {
    pub rows: Vec<RiskCurveRow>,
}

impl RiskCurve {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Csv(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    fn argmin(&self, key: impl Fn(&RiskCurveRow) -> f64) -> Option<f64> {
        self.rows.iter().min_by(|a, b| key(a).total_cmp(&key(b))).map(|r| r.h)
    }

    /// Bandwidth with the smallest simulated risk.
    pub fn sim_argmin(&self) -> Option<f64> {
        self.argmin(|r| r.sim_risk)
    }

    /// Bandwidth with the smallest approximate risk.
    pub fn approx_argmin(&self) -> Option<f64> {
        self.argmin(|r| r.approx_risk)
    }
}

/// The asymptotic risk computed from the true density's own fields.
pub fn oracle_model(config: &SimConfig) -> Result<RiskModel> {
    let m = &config.model;
    RiskModel::from_fields(config.target, config.n, &config.grid, m, m, m, DEFAULT_TAU_TOL)
}

/// Simulated and approximate risk of the scalar bandwidths `h^2 I`, sorted by `h`.
pub fn risk_curve(config: &SimConfig, hs: &[f64]) -> Result<RiskCurve> {
    config.validate()?;
    if hs.is_empty() {
        return Err(Error::InvalidInput("risk curve needs at least one bandwidth".into()));
    }
    let mut hs = hs.to_vec();
    hs.sort_by(f64::total_cmp);
    let truth = Truth::new(config)?;
    let oracle = oracle_model(config)?;
    let rows = hs
        .iter()
        .map(|&h| {
            let bw = Bandwidth::scalar(h, 2)?;
            let sim = simulate_with(config, &truth, &bw)?;
            Ok(RiskCurveRow {
                h,
                sim_risk: sim.mean,
                sim_se: sim.se,
                approx_risk: oracle.risk(&bw)?.risk,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RiskCurve { rows })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
    NoDifference,
}

/// One-sided Wilcoxon signed-rank test of `H1: x > y` on paired data.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WilcoxonResult {
    /// Pairs with a nonzero difference.
    pub n_used: usize,
    /// Sum of ranks of the positive differences.
    pub statistic: f64,
    pub p_value: f64,
    pub method: WilcoxonMethod,
}

/// Largest number of nonzero differences handled by the exact null distribution.
pub const WILCOXON_EXACT_MAX: usize = 25;

/// Signed-rank test that `x - y` tends to be positive. Zero differences are
/// dropped and tied magnitudes share their average rank.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    if x.len() != y.len() {
        return Err(Error::DimensionError("paired samples differ in length".into()));
    }
    let mut diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Ok(WilcoxonResult {
            n_used: 0,
            statistic: 0.0,
            p_value: 1.0,
            method: WilcoxonMethod::NoDifference,
        });
    }
    diffs.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let n = diffs.len();
    // doubled average ranks stay integral
    let mut doubled = vec![0u64; n];
    let mut tie_correction = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[j + 1].abs() == diffs[i].abs() {
            j += 1;
        }
        let rank2 = (i + 1 + j + 1) as u64;
        doubled[i..=j].iter_mut().for_each(|r| *r = rank2);
        let t = (j - i + 1) as f64;
        tie_correction += t * t * t - t;
        i = j + 1;
    }
    let w2: u64 = diffs.iter().zip(&doubled).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let statistic = w2 as f64 / 2.0;
    if n <= WILCOXON_EXACT_MAX {
        let total: u64 = doubled.iter().sum();
        let mut counts = vec![0f64; total as usize + 1];
        counts[0] = 1.0;
        let mut reach = 0usize;
        for &r in &doubled {
            let r = r as usize;
            for s in (0..=reach).rev() {
                if counts[s] > 0.0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let upper: f64 = counts[w2 as usize..].iter().sum();
        return Ok(WilcoxonResult {
            n_used: n,
            statistic,
            p_value: upper / 2f64.powi(n as i32),
            method: WilcoxonMethod::Exact,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_correction / 48.0;
    let z = (statistic - mean - 0.5) / var.sqrt();
    let p_value = 1.0 - Normal::standard().cdf(z);
    Ok(WilcoxonResult {
        n_used: n,
        statistic,
        p_value,
        method: WilcoxonMethod::Normal,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairedRow {
    pub rep: usize,
    pub hdr_error: f64,
    pub lscv_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Comparison {
    pub rows: Vec<PairedRow>,
    pub hdr_bandwidths: Vec<Vec<Vec<f64>>>,
    pub lscv_bandwidths: Vec<Vec<Vec<f64>>>,
    /// Tests whether LSCV errors exceed the plug-in selector's errors.
    pub wilcoxon: WilcoxonResult,
    pub median_hdr_error: f64,
    pub median_lscv_error: f64,
    /// Replications on which an optimizer reported non-convergence.
    pub non_converged: usize,
}

impl Comparison {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Csv(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k == 0 {
        return f64::NAN;
    }
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Accepts the best point of a non-converged run, noting that it happened.
fn accept_best(result: Result<SelectionResult>) -> Result<(SelectionResult, bool)> {
    match result {
        Ok(r) => Ok((r, true)),
        Err(Error::NoConvergence(r)) => Ok((*r, false)),
        Err(e) => Err(e),
    }
}

/// Paired errors of the plug-in selector and LSCV, both optimized over `class`,
/// on `config.reps` fresh samples.
pub fn compare_methods(config: &SimConfig, class: BandwidthClass) -> Result<Comparison> {
    config.validate()?;
    let truth = Truth::new(config)?;
    let selector_config = SelectorConfig::new(config.target).with_class(class);
    let per_rep = (0..config.reps)
        .into_par_iter()
        .map(|rep| {
            let data = config.model.sample(config.n, config.rep_seed(rep));
            let (hdr, ok_hdr) = accept_best(select_bandwidth(&data, &selector_config))?;
            let (lscv, ok_lscv) = accept_best(lscv_bandwidth(&data, class))?;
            let hdr_error = estimate_error(config, &truth, data.clone(), &hdr.bandwidth)?;
            let lscv_error = estimate_error(config, &truth, data, &lscv.bandwidth)?;
            Ok((
                PairedRow {
                    rep,
                    hdr_error,
                    lscv_error,
                },
                hdr.bandwidth.rows(),
                lscv.bandwidth.rows(),
                !(ok_hdr && ok_lscv),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<PairedRow> = per_rep.iter().map(|r| r.0.clone()).collect();
    let hdr_errors: Vec<f64> = rows.iter().map(|r| r.hdr_error).collect();
    let lscv_errors: Vec<f64> = rows.iter().map(|r| r.lscv_error).collect();
    Ok(Comparison {
        wilcoxon: wilcoxon_signed_rank(&lscv_errors, &hdr_errors)?,
        median_hdr_error: median(&hdr_errors),
        median_lscv_error: median(&lscv_errors),
        non_converged: per_rep.iter().filter(|r| r.3).count(),
        hdr_bandwidths: per_rep.iter().map(|r| r.1.clone()).collect(),
        lscv_bandwidths: per_rep.into_iter().map(|r| r.2).collect(),
        rows,
    })
}
