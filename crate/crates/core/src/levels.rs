//! Probability content of super-level sets and its inversion to the τ-level.
//!
//! Integrals use the midpoint rule on a rectangular grid whose nodes sit at cell
//! centres. A grid only counts as covering a level when every boundary node is
//! below `1e-3` times that level, so mass lost outside the box is negligible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::PlanarField;
use crate::kde::{Bandwidth, DataSet, Kde};

/// Smallest per-axis node count accepted for quadrature.
pub const MIN_QUADRATURE_COUNT: usize = 64;

/// Boundary values must stay below this fraction of the queried level.
pub const COVERAGE_RATIO: f64 = 1e-3;

/// Kernel standard deviations of padding added by [`EvalGrid::covering`].
pub const COVER_SDS: f64 = 5.0;

/// Default relative tolerance of the τ-level bisection.
pub const DEFAULT_TAU_TOL: f64 = 1e-6;

/// A rectangular box split into `counts[0] x counts[1]` equal cells; nodes are the
/// cell centres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub x_min: [f64; 2],
    pub x_max: [f64; 2],
    pub counts: [usize; 2],
}

impl EvalGrid {
    pub fn new(x_min: [f64; 2], x_max: [f64; 2], counts: [usize; 2]) -> Result<Self> {
        for k in 0..2 {
            if !(x_min[k].is_finite() && x_max[k].is_finite() && x_max[k] > x_min[k]) {
                return Err(Error::InvalidInput(format!(
                    "grid axis {k} has invalid bounds [{}, {}]",
                    x_min[k], x_max[k]
                )));
            }
            if counts[k] < 2 {
                return Err(Error::InvalidInput(format!("grid axis {k} needs at least 2 nodes")));
            }
        }
        Ok(Self { x_min, x_max, counts })
    }

    /// `[lo, hi]^2` with `count` nodes per axis.
    pub fn square(lo: f64, hi: f64, count: usize) -> Result<Self> {
        Self::new([lo, lo], [hi, hi], [count, count])
    }

    /// Data bounding box widened by `5 sqrt(lambda_max(H))` on every side.
    pub fn covering(data: &DataSet, bandwidth: &Bandwidth, count: usize) -> Result<Self> {
        data.require_dim(2)?;
        let (lo, hi) = data
            .bounding_box()
            .ok_or_else(|| Error::InvalidInput("cannot cover an empty data set".into()))?;
        let pad = COVER_SDS * bandwidth.max_eigenvalue().sqrt();
        Self::new([lo[0] - pad, lo[1] - pad], [hi[0] + pad, hi[1] + pad], [count, count])
    }

    pub fn spacing(&self) -> [f64; 2] {
        [
            (self.x_max[0] - self.x_min[0]) / self.counts[0] as f64,
            (self.x_max[1] - self.x_min[1]) / self.counts[1] as f64,
        ]
    }

    pub fn cell_area(&self) -> f64 {
        let [dx, dy] = self.spacing();
        dx * dy
    }

    pub fn cell_diagonal(&self) -> f64 {
        let [dx, dy] = self.spacing();
        dx.hypot(dy)
    }

    /// Node coordinates along axis `k`.
    pub fn axis(&self, k: usize) -> Vec<f64> {
        let step = self.spacing()[k];
        (0..self.counts[k])
            .map(|i| self.x_min[k] + (i as f64 + 0.5) * step)
            .collect()
    }

    pub fn node(&self, i: usize, j: usize) -> [f64; 2] {
        let [dx, dy] = self.spacing();
        [
            self.x_min[0] + (i as f64 + 0.5) * dx,
            self.x_min[1] + (j as f64 + 0.5) * dy,
        ]
    }

    pub fn len(&self) -> usize {
        self.counts[0] * self.counts[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The same box with `count` nodes per axis.
    pub fn with_counts(&self, count: usize) -> Result<Self> {
        Self::new(self.x_min, self.x_max, [count, count])
    }
}

/// Field values cached on the nodes of an [`EvalGrid`], row-major (`j * nx + i`).
#[derive(Clone, Debug, PartialEq)]
pub struct GridValues {
    grid: EvalGrid,
    values: Vec<f64>,
}

impl GridValues {
    pub fn new(grid: EvalGrid, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.len(), "value count must match the grid");
        Self { grid, values }
    }

    pub fn from_fn(grid: EvalGrid, f: impl Fn([f64; 2]) -> f64) -> Self {
        let [nx, ny] = grid.counts;
        let mut values = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                values.push(f(grid.node(i, j)));
            }
        }
        Self { grid, values }
    }

    pub fn grid(&self) -> &EvalGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.grid.counts[0] + i]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn boundary_max(&self) -> f64 {
        let [nx, ny] = self.grid.counts;
        let mut m = f64::NEG_INFINITY;
        for i in 0..nx {
            m = m.max(self.get(i, 0)).max(self.get(i, ny - 1));
        }
        for j in 0..ny {
            m = m.max(self.get(0, j)).max(self.get(nx - 1, j));
        }
        m
    }

    /// Midpoint-rule integral of `weight(value) * 1{value >= level}`.
    fn masked_sum(&self, level: f64) -> f64 {
        let s: f64 = self.values.iter().filter(|&&v| v >= level).sum();
        s * self.grid.cell_area()
    }

    /// Checks that the grid is fine enough and that the boundary is negligible
    /// relative to `level` (or to the maximum when `level` is zero).
    pub fn check_coverage(&self, level: f64) -> Result<()> {
        let [nx, ny] = self.grid.counts;
        if nx < MIN_QUADRATURE_COUNT || ny < MIN_QUADRATURE_COUNT {
            return Err(Error::GridCoverage(format!(
                "{nx}x{ny} grid is coarser than the {MIN_QUADRATURE_COUNT} nodes per axis needed for quadrature"
            )));
        }
        let reference = if level > 0.0 { level } else { self.max() };
        let boundary = self.boundary_max();
        if boundary > COVERAGE_RATIO * reference {
            return Err(Error::GridCoverage(format!(
                "boundary value {boundary:.3e} exceeds {COVERAGE_RATIO:e} x {reference:.3e}; enlarge the box"
            )));
        }
        Ok(())
    }
}

/// `psi(f, y) = integral of f 1{f >= y}` by the midpoint rule on `grid`.
pub fn probability_content<F: PlanarField + ?Sized>(field: &F, level: f64, grid: &EvalGrid) -> Result<f64> {
    probability_content_values(&field.grid_values(grid), level)
}

/// [`probability_content`] on precomputed grid values.
pub fn probability_content_values(values: &GridValues, level: f64) -> Result<f64> {
    if !(level >= 0.0) {
        return Err(Error::InvalidInput(format!("level must be non-negative, got {level}")));
    }
    if level > values.max() {
        return Ok(0.0);
    }
    values.check_coverage(level)?;
    Ok(values.masked_sum(level))
}

/// Grid values sorted in decreasing order with running midpoint-rule sums, so the
/// content of any super-level set is a binary search away.
struct ContentTable {
    sorted: Vec<f64>,
    prefix: Vec<f64>,
}

impl ContentTable {
    fn new(values: &GridValues) -> Self {
        let mut sorted = values.values().to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let area = values.grid().cell_area();
        let mut prefix = Vec::with_capacity(sorted.len() + 1);
        let mut acc = 0.0;
        prefix.push(0.0);
        for v in &sorted {
            acc += v;
            prefix.push(acc * area);
        }
        Self { sorted, prefix }
    }

    fn content(&self, level: f64) -> f64 {
        let k = self.sorted.partition_point(|&v| v >= level);
        self.prefix[k]
    }
}

/// The level `f_tau` whose super-level set holds probability `1 - tau`, by bisection
/// on `(0, max]` until the bracket is narrower than `tol * max`.
pub fn tau_level<F: PlanarField + ?Sized>(field: &F, tau: f64, grid: &EvalGrid, tol: f64) -> Result<f64> {
    tau_level_values(&field.grid_values(grid), tau, tol)
}

/// [`tau_level`] on precomputed grid values.
pub fn tau_level_values(values: &GridValues, tau: f64, tol: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidInput(format!("tau must lie in (0, 1), got {tau}")));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    let max = values.max();
    if !(max > 0.0) {
        return Err(Error::InvalidInput("field is not positive anywhere on the grid".into()));
    }
    let table = ContentTable::new(values);
    let target = 1.0 - tau;
    let (mut lo, mut hi) = (0.0, max);
    while hi - lo >= tol * max {
        let mid = 0.5 * (lo + hi);
        if table.content(mid) <= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    values.check_coverage(hi)?;
    Ok(hi)
}

/// Resampling estimate of the τ-level: draw `m` points from the kernel estimate and
/// return the empirical τ-quantile of the estimate at those points.
pub fn tau_level_resample(data: &DataSet, bandwidth: &Bandwidth, tau: f64, m: usize, seed: u64) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidInput(format!("tau must lie in (0, 1), got {tau}")));
    }
    if m < 1000 {
        return Err(Error::InvalidInput(format!("need at least 1000 resamples, got {m}")));
    }
    let kde = Kde::new(data.clone(), bandwidth.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = kde.sample(m, &mut rng);
    use rayon::prelude::*;
    let mut values: Vec<f64> = (0..m).into_par_iter().map(|i| kde.density(draws.row(i))).collect();
    values.sort_by(f64::total_cmp);
    let k = ((tau * m as f64).ceil() as usize).clamp(1, m) - 1;
    Ok(values[k])
}
