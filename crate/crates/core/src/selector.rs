//! Plug-in bandwidth selection for level sets and highest density regions, plus
//! the least-squares cross-validation baseline.
//!
//! The estimated risk replaces every unknown in the asymptotic risk by a pilot
//! estimate: the level `f_tau` and the region `{f >= f_tau}` come from the `H0`
//! estimate, the curve and its normals from the `H1` estimate at that level, and
//! all second derivatives from the `H2` estimate. These ingredients do not depend
//! on the bandwidth being scored, so they are computed once per sample.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contour::{attach_normals, extract_contour, Contour};
use crate::error::{Error, Result};
use crate::field::PlanarField;
use crate::kde::{kernel_constants, Bandwidth, BandwidthClass, DataSet, Kde};
use crate::levels::{tau_level_values, EvalGrid, GridValues, DEFAULT_TAU_TOL};
use crate::optimize::{from_params, lex_cmp, minimize, to_params, Method, OptimOptions};
use crate::pilot::{pilot_bandwidths, PilotBandwidths, MIN_PILOT_SAMPLE};
use crate::risk::{hdr_risk, ls_risk, region_hessian_matrix, RiskInputs, RiskReport};

/// Default nodes per axis of the selector grid.
pub const DEFAULT_GRID_COUNT: usize = 256;

/// What the selected bandwidth is tuned for.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Target {
    /// Level set at a fixed level `c > 0`.
    Ls { level: f64 },
    /// Highest density region excluding probability `tau`.
    Hdr { tau: f64 },
}

impl Target {
    fn validate(&self) -> Result<()> {
        match *self {
            Target::Ls { level } if !(level > 0.0 && level.is_finite()) => {
                Err(Error::InvalidInput(format!("level must be positive, got {level}")))
            }
            Target::Hdr { tau } if !(tau > 0.0 && tau < 1.0) => {
                Err(Error::InvalidInput(format!("tau must lie in (0, 1), got {tau}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SelectorConfig {
    pub target: Target,
    pub class: BandwidthClass,
    /// Evaluation box; `None` covers the data padded by the widest pilot.
    pub grid: Option<EvalGrid>,
    pub grid_count: usize,
    pub optimizer: Method,
    /// Starting bandwidths; `None` uses the density pilot scaled by 0.5, 1 and 2.
    pub starts: Option<Vec<Bandwidth>>,
    pub max_iter: usize,
    pub tol: f64,
    /// Relative tolerance of the τ-level bisection.
    pub tau_tol: f64,
}

impl SelectorConfig {
    pub fn hdr(tau: f64) -> Self {
        Self::new(Target::Hdr { tau })
    }

    pub fn ls(level: f64) -> Self {
        Self::new(Target::Ls { level })
    }

    pub fn new(target: Target) -> Self {
        Self {
            target,
            class: BandwidthClass::Scalar,
            grid: None,
            grid_count: DEFAULT_GRID_COUNT,
            optimizer: Method::Newton,
            starts: None,
            max_iter: 100,
            tol: 1e-10,
            tau_tol: DEFAULT_TAU_TOL,
        }
    }

    pub fn with_class(mut self, class: BandwidthClass) -> Self {
        self.class = class;
        self
    }

    pub fn with_grid_count(mut self, count: usize) -> Self {
        self.grid_count = count;
        self
    }

    pub fn with_grid(mut self, grid: EvalGrid) -> Self {
        self.grid = Some(grid);
        self
    }

    fn optim_options(&self) -> OptimOptions {
        OptimOptions {
            method: self.optimizer,
            max_iter: self.max_iter,
            tol: self.tol,
            ..OptimOptions::default()
        }
    }

    fn validate(&self) -> Result<()> {
        self.target.validate()?;
        if !(self.tol > 0.0) || !(self.tau_tol > 0.0) {
            return Err(Error::InvalidInput("tolerances must be positive".into()));
        }
        if matches!(&self.starts, Some(s) if s.is_empty()) {
            return Err(Error::InvalidInput("at least one starting bandwidth is required".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TraceEntry {
    #[serde(rename = "H")]
    pub bandwidth: Vec<Vec<f64>>,
    pub risk: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SelectionResult {
    #[serde(rename = "H")]
    pub bandwidth: Bandwidth,
    pub risk: f64,
    pub converged: bool,
    pub trace: Vec<TraceEntry>,
    pub f_tau_hat: Option<f64>,
    pub class: BandwidthClass,
    pub restarts_used: usize,
    /// Starts on which Newton failed and Nelder-Mead took over.
    pub fallbacks: usize,
    pub pilot: Option<PilotBandwidths>,
}

/// Bandwidth-independent ingredients of a risk approximation, ready to be scored
/// at many bandwidths.
#[derive(Clone, Debug)]
pub struct RiskModel {
    pub target: Target,
    pub inputs: RiskInputs,
    /// The level used: `c` for level sets, the estimated `f_tau` for HDRs.
    pub level: f64,
}

impl RiskModel {
    /// Builds the model from three fields standing in for `f`, `grad f` and
    /// `hess f`. Passing the true density three times yields the oracle risk.
    pub fn from_fields<F0, F1, F2>(
        target: Target,
        n: usize,
        grid: &EvalGrid,
        density: &F0,
        gradient: &F1,
        hessian: &F2,
        tau_tol: f64,
    ) -> Result<Self>
    where
        F0: PlanarField + ?Sized,
        F1: PlanarField + ?Sized,
        F2: PlanarField + ?Sized,
    {
        target.validate()?;
        let kernel = kernel_constants(2);
        match target {
            Target::Hdr { tau } => {
                let v0 = density.grid_values(grid);
                let level = tau_level_values(&v0, tau, tau_tol)?;
                let region = region_hessian_matrix(hessian, &v0, level)?;
                let v1 = gradient.grid_values(grid);
                let inputs = RiskInputs::from_fields(n, level, &v1, gradient, hessian, Some(region), kernel)?;
                Ok(Self { target, inputs, level })
            }
            Target::Ls { level } => {
                let v1 = gradient.grid_values(grid);
                let inputs = RiskInputs::from_fields(n, level, &v1, gradient, hessian, None, kernel)?;
                Ok(Self { target, inputs, level })
            }
        }
    }

    /// Pilot-based estimate from a sample.
    pub fn estimated(data: &DataSet, config: &SelectorConfig, pilots: &PilotBandwidths) -> Result<Self> {
        data.require_dim(2)?;
        let grid = selector_grid(data, config, pilots)?;
        let k0 = Kde::new(data.clone(), pilots.h0.clone())?;
        let k1 = Kde::new(data.clone(), pilots.h1.clone())?;
        let k2 = Kde::new(data.clone(), pilots.h2.clone())?;
        Self::from_fields(config.target, data.n(), &grid, &k0, &k1, &k2, config.tau_tol)
    }

    pub fn risk(&self, bandwidth: &Bandwidth) -> Result<RiskReport> {
        match self.target {
            Target::Ls { .. } => ls_risk(bandwidth, &self.inputs),
            Target::Hdr { .. } => hdr_risk(bandwidth, &self.inputs),
        }
    }
}

fn selector_grid(data: &DataSet, config: &SelectorConfig, pilots: &PilotBandwidths) -> Result<EvalGrid> {
    match config.grid {
        Some(g) => Ok(g),
        None => {
            let widest = [&pilots.h0, &pilots.h1, &pilots.h2]
                .into_iter()
                .max_by(|a, b| a.max_eigenvalue().total_cmp(&b.max_eigenvalue()))
                .expect("three pilots");
            EvalGrid::covering(data, widest, config.grid_count)
        }
    }
}

/// Estimated risk at `bandwidth` from pilot estimates of the unknown fields.
pub fn estimated_risk(
    bandwidth: &Bandwidth,
    data: &DataSet,
    config: &SelectorConfig,
    pilots: &PilotBandwidths,
) -> Result<RiskReport> {
    config.validate()?;
    RiskModel::estimated(data, config, pilots)?.risk(bandwidth)
}

/// Default starts: `base` conformed to `class` and scaled by 0.5, 1 and 2.
fn default_starts(base: &Bandwidth, class: BandwidthClass) -> Result<Vec<Bandwidth>> {
    let conformed = base.conform(class)?;
    [0.5, 1.0, 2.0].iter().map(|&s| conformed.scaled(s)).collect()
}

/// Runs the optimizer from each start and keeps the lowest point visited.
fn optimize_over_class(
    objective: &(dyn Fn(&Bandwidth) -> Option<f64> + Sync),
    starts: &[Bandwidth],
    class: BandwidthClass,
    opts: &OptimOptions,
) -> Result<(SelectionResult, bool)> {
    let param_objective = |p: &[f64]| from_params(p, class).ok().and_then(|h| objective(&h));
    let x0s: Vec<Vec<f64>> = starts.iter().map(|s| to_params(s, class)).collect::<Result<_>>()?;
    let runs: Vec<_> = x0s.par_iter().map(|x0| minimize(&param_objective, x0, opts)).collect();

    let mut trace = Vec::new();
    let mut best: Option<(Vec<f64>, f64)> = None;
    for run in &runs {
        for (x, v) in &run.trace {
            if !v.is_finite() {
                continue;
            }
            let h = from_params(x, class)?;
            trace.push(TraceEntry {
                bandwidth: h.rows(),
                risk: *v,
            });
            let better = match &best {
                None => true,
                Some((bx, bv)) => v < bv || (v == bv && lex_cmp(x, bx).is_lt()),
            };
            if better {
                best = Some((x.clone(), *v));
            }
        }
    }
    let converged = runs.iter().any(|r| r.converged);
    let fallbacks = runs.iter().filter(|r| r.fell_back).count();
    let (x, risk) = best.ok_or_else(|| {
        Error::InvalidInput("the objective is undefined at every starting bandwidth".into())
    })?;
    Ok((
        SelectionResult {
            bandwidth: from_params(&x, class)?,
            risk,
            converged,
            trace,
            f_tau_hat: None,
            class,
            restarts_used: runs.len(),
            fallbacks,
            pilot: None,
        },
        converged,
    ))
}

/// Minimizes the estimated risk over `config.class`.
pub fn select_bandwidth(data: &DataSet, config: &SelectorConfig) -> Result<SelectionResult> {
    config.validate()?;
    data.require_dim(2)?;
    data.require_rows(MIN_PILOT_SAMPLE)?;
    let pilots = pilot_bandwidths(data)?;
    let model = RiskModel::estimated(data, config, &pilots)?;
    select_with_model(&model, &pilots, config)
}

/// Minimizes a prepared risk model; starts default to the density pilot.
pub fn select_with_model(model: &RiskModel, pilots: &PilotBandwidths, config: &SelectorConfig) -> Result<SelectionResult> {
    let starts = match &config.starts {
        Some(s) => s.clone(),
        None => default_starts(&pilots.h0, config.class)?,
    };
    let objective = |h: &Bandwidth| model.risk(h).ok().map(|r| r.risk);
    let (mut result, converged) = optimize_over_class(&objective, &starts, config.class, &config.optim_options())?;
    result.pilot = Some(pilots.clone());
    if matches!(model.target, Target::Hdr { .. }) {
        result.f_tau_hat = Some(model.level);
    }
    if converged {
        Ok(result)
    } else {
        Err(Error::NoConvergence(Box::new(result)))
    }
}

/// Closed-form Gaussian LSCV criterion with pairwise differences cached.
pub struct LscvCriterion {
    n: usize,
    diffs: Vec<[f64; 2]>,
}

impl LscvCriterion {
    pub fn new(data: &DataSet) -> Result<Self> {
        data.require_dim(2)?;
        data.require_rows(2)?;
        let n = data.n();
        let mut diffs = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            let a = data.point2(i);
            for j in (i + 1)..n {
                let b = data.point2(j);
                diffs.push([a[0] - b[0], a[1] - b[1]]);
            }
        }
        Ok(Self { n, diffs })
    }

    /// `(1/n^2) sum_{i,j} phi_{2H}(X_i - X_j) - 2/(n(n-1)) sum_{i != j} phi_H(X_i - X_j)`
    pub fn eval(&self, bandwidth: &Bandwidth) -> Result<f64> {
        let p = bandwidth.inverse();
        let (p11, p12, p22) = (p[(0, 0)], 0.5 * (p[(0, 1)] + p[(1, 0)]), p[(1, 1)]);
        let det = bandwidth.as_matrix2()?.determinant();
        // phi_H(u) = exp(-q/2) / (2 pi sqrt|H|), phi_2H(u) = exp(-q/4) / (4 pi sqrt|H|)
        let norm_h = 1.0 / (2.0 * PI * det.sqrt());
        let norm_2h = 0.5 * norm_h;
        let chunk = 1 << 14;
        let partial: Vec<(f64, f64)> = self
            .diffs
            .par_chunks(chunk)
            .map(|block| {
                let (mut s2, mut s1) = (0.0, 0.0);
                for u in block {
                    let q = p11 * u[0] * u[0] + 2.0 * p12 * u[0] * u[1] + p22 * u[1] * u[1];
                    let e = (-0.25 * q).exp();
                    s2 += e;
                    s1 += e * e;
                }
                (s2, s1)
            })
            .collect();
        let (s2, s1) = partial.iter().fold((0.0, 0.0), |acc, v| (acc.0 + v.0, acc.1 + v.1));
        let n = self.n as f64;
        let first = (n * norm_2h + 2.0 * norm_2h * s2) / (n * n);
        let second = 2.0 / (n * (n - 1.0)) * 2.0 * norm_h * s1;
        Ok(first - second)
    }
}

/// LSCV criterion at `bandwidth`.
pub fn lscv_criterion(data: &DataSet, bandwidth: &Bandwidth) -> Result<f64> {
    LscvCriterion::new(data)?.eval(bandwidth)
}

/// Normal-scale bandwidth `n^{-2/(d+4)} (4/(d+2))^{2/(d+4)} S` for `d = 2`.
pub fn normal_scale_bandwidth(data: &DataSet) -> Result<Bandwidth> {
    let cov = data.sample_covariance()?;
    let n = data.n() as f64;
    Bandwidth::new(cov * n.powf(-1.0 / 3.0), BandwidthClass::Full)
        .map_err(|_| Error::DegenerateSample("sample covariance is singular".into()))
}

/// Minimizes the LSCV criterion over `class`, starting from the normal-scale
/// bandwidth scaled by 0.5, 1 and 2.
pub fn lscv_bandwidth(data: &DataSet, class: BandwidthClass) -> Result<SelectionResult> {
    data.require_dim(2)?;
    data.require_rows(MIN_PILOT_SAMPLE)?;
    let criterion = LscvCriterion::new(data)?;
    let starts = default_starts(&normal_scale_bandwidth(data)?, class)?;
    let objective = |h: &Bandwidth| criterion.eval(h).ok();
    let (result, converged) = optimize_over_class(&objective, &starts, class, &OptimOptions::default())?;
    if converged {
        Ok(result)
    } else {
        Err(Error::NoConvergence(Box::new(result)))
    }
}

/// A plug-in highest density region `{x : f_hat(x) >= f_tau_hat}`.
#[derive(Clone, Debug)]
pub struct HdrEstimate {
    pub kde: Kde,
    pub f_tau_hat: f64,
    pub contour: Contour,
    pub grid_values: GridValues,
}

impl HdrEstimate {
    pub fn contains(&self, x: [f64; 2]) -> bool {
        self.kde.value(x) >= self.f_tau_hat
    }

    pub fn bandwidth(&self) -> &Bandwidth {
        self.kde.bandwidth()
    }
}

/// Estimates the HDR of probability `1 - tau` with bandwidth `bandwidth` on a
/// `grid_count`-square grid covering the data.
pub fn hdr_estimate(data: &DataSet, bandwidth: &Bandwidth, tau: f64, grid_count: usize) -> Result<HdrEstimate> {
    data.require_dim(2)?;
    let grid = EvalGrid::covering(data, bandwidth, grid_count)?;
    let kde = Kde::new(data.clone(), bandwidth.clone())?;
    let values = kde.grid_values(&grid);
    let f_tau_hat = tau_level_values(&values, tau, DEFAULT_TAU_TOL)?;
    let contour = attach_normals(extract_contour(&values, f_tau_hat)?, &kde)?;
    Ok(HdrEstimate {
        kde,
        f_tau_hat,
        contour,
        grid_values: values,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct NoveltySummary {
    /// Fraction of label-0 points rejected.
    pub fpr: Option<f64>,
    /// Fraction of label-1 points rejected.
    pub tpr: Option<f64>,
    pub n_normal: usize,
    pub n_anomaly: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct NoveltyResult {
    #[serde(rename = "H")]
    pub bandwidth: Bandwidth,
    pub f_tau_hat: f64,
    /// Estimated density at each test point.
    pub density: Vec<f64>,
    /// `true` when the point falls outside the estimated HDR.
    pub reject: Vec<bool>,
    pub summary: Option<NoveltySummary>,
}

/// Flags test points outside the estimated `1 - tau` HDR of `train`.
///
/// With `bandwidth = None` a full-class HDR bandwidth is selected first. Labels,
/// when given, are 0 for normal and 1 for anomalous points.
pub fn novelty_classify(
    train: &DataSet,
    tau: f64,
    test: &DataSet,
    bandwidth: Option<&Bandwidth>,
    labels: Option<&[u8]>,
) -> Result<NoveltyResult> {
    test.require_dim(2)?;
    if let Some(l) = labels {
        if l.len() != test.n() {
            return Err(Error::InvalidInput(format!("{} labels for {} test points", l.len(), test.n())));
        }
        if let Some(bad) = l.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidInput(format!("labels must be 0 or 1, found {bad}")));
        }
    }
    let h = match bandwidth {
        Some(h) => h.clone(),
        None => {
            let config = SelectorConfig::hdr(tau).with_class(BandwidthClass::Full);
            match select_bandwidth(train, &config) {
                Ok(r) => r.bandwidth,
                Err(Error::NoConvergence(r)) => r.bandwidth,
                Err(e) => return Err(e),
            }
        }
    };
    let hdr = hdr_estimate(train, &h, tau, DEFAULT_GRID_COUNT)?;
    let density: Vec<f64> = (0..test.n()).into_par_iter().map(|i| hdr.kde.value(test.point2(i))).collect();
    let reject: Vec<bool> = density.iter().map(|&v| v < hdr.f_tau_hat).collect();
    let summary = labels.map(|l| {
        let count = |label: u8| l.iter().filter(|&&v| v == label).count();
        let rejected = |label: u8| l.iter().zip(&reject).filter(|(&v, &r)| v == label && r).count();
        let rate = |label: u8| {
            let total = count(label);
            (total > 0).then(|| rejected(label) as f64 / total as f64)
        };
        NoveltySummary {
            fpr: rate(0),
            tpr: rate(1),
            n_normal: count(0),
            n_anomaly: count(1),
        }
    });
    Ok(NoveltyResult {
        bandwidth: h,
        f_tau_hat: hdr.f_tau_hat,
        density,
        reject,
        summary,
    })
}
