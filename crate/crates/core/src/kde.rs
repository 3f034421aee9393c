//! Gaussian kernel density estimation under a general SPD bandwidth matrix.
//!
//! The estimator is
//!
//! ```text
//! f(x) = (1/n) sum_i |H|^{-1/2} K(H^{-1/2} (x - X_i))
//! ```
//!
//! with `K` the standard `d`-variate normal density. Derivatives are analytic.
//! Sums run over every observation; no tail truncation is applied.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix2, SymmetricEigen, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::PlanarField;
use crate::levels::{EvalGrid, GridValues};

/// An `n x d` sample stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSet {
    points: Vec<f64>,
    n: usize,
    d: usize,
}

impl DataSet {
    /// Builds a data set from row-major values. `values.len()` must be a multiple of `d`.
    pub fn new(values: Vec<f64>, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::DimensionError("dimension must be at least 1".into()));
        }
        if !values.len().is_multiple_of(d) {
            return Err(Error::DimensionError(format!(
                "{} values cannot be split into rows of length {d}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite entry in row {} column {}",
                pos / d,
                pos % d
            )));
        }
        let n = values.len() / d;
        Ok(Self { points: values, n, d })
    }

    pub fn from_rows(rows: &[[f64; 2]]) -> Result<Self> {
        Self::new(rows.iter().flat_map(|r| r.iter().copied()).collect(), 2)
    }

    pub fn from_vec_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(2, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionError("rows have differing lengths".into()));
        }
        Self::new(rows.concat(), d)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.points[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.points.chunks_exact(self.d)
    }

    /// Row `i` of a two-dimensional data set.
    pub fn point2(&self, i: usize) -> [f64; 2] {
        [self.points[2 * i], self.points[2 * i + 1]]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.points
    }

    pub(crate) fn require_dim(&self, d: usize) -> Result<()> {
        if self.d != d {
            return Err(Error::DimensionError(format!(
                "expected {d}-dimensional data, got {}",
                self.d
            )));
        }
        Ok(())
    }

    pub(crate) fn require_rows(&self, min: usize) -> Result<()> {
        if self.n < min {
            return Err(Error::InvalidInput(format!(
                "need at least {min} observations, got {}",
                self.n
            )));
        }
        Ok(())
    }

    /// Applies `x -> A x + shift` to every row.
    pub fn affine(&self, a: &DMatrix<f64>, shift: &[f64]) -> Result<Self> {
        if a.nrows() != self.d || a.ncols() != self.d || shift.len() != self.d {
            return Err(Error::DimensionError("affine map does not match data dimension".into()));
        }
        let mut out = Vec::with_capacity(self.points.len());
        for row in self.rows() {
            for r in 0..self.d {
                let mut acc = shift[r];
                for c in 0..self.d {
                    acc += a[(r, c)] * row[c];
                }
                out.push(acc);
            }
        }
        Self::new(out, self.d)
    }

    /// Unbiased sample covariance. Rows are centred on the first observation before
    /// accumulating, which keeps the result unchanged under exact translations.
    pub fn sample_covariance(&self) -> Result<DMatrix<f64>> {
        self.require_rows(2)?;
        let d = self.d;
        let origin = self.row(0).to_vec();
        let mut mean = vec![0.0; d];
        for row in self.rows() {
            for k in 0..d {
                mean[k] += row[k] - origin[k];
            }
        }
        mean.iter_mut().for_each(|m| *m /= self.n as f64);
        let mut cov = DMatrix::zeros(d, d);
        for row in self.rows() {
            for a in 0..d {
                let da = row[a] - origin[a] - mean[a];
                for b in a..d {
                    cov[(a, b)] += da * (row[b] - origin[b] - mean[b]);
                }
            }
        }
        let scale = 1.0 / (self.n as f64 - 1.0);
        for a in 0..d {
            for b in a..d {
                cov[(a, b)] *= scale;
                cov[(b, a)] = cov[(a, b)];
            }
        }
        Ok(cov)
    }

    pub fn bounding_box(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        if self.n == 0 {
            return None;
        }
        let mut lo = self.row(0).to_vec();
        let mut hi = lo.clone();
        for row in self.rows() {
            for k in 0..self.d {
                lo[k] = lo[k].min(row[k]);
                hi[k] = hi[k].max(row[k]);
            }
        }
        Some((lo, hi))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandwidthClass {
    /// `h^2 I`
    Scalar,
    Diagonal,
    Full,
}

impl BandwidthClass {
    /// Number of free parameters for a `d x d` matrix of this class.
    pub fn n_params(self, d: usize) -> usize {
        match self {
            BandwidthClass::Scalar => 1,
            BandwidthClass::Diagonal => d,
            BandwidthClass::Full => d * (d + 1) / 2,
        }
    }
}

impl std::str::FromStr for BandwidthClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "scalar" => Ok(BandwidthClass::Scalar),
            "diag" | "diagonal" => Ok(BandwidthClass::Diagonal),
            "full" => Ok(BandwidthClass::Full),
            other => Err(Error::InvalidInput(format!("unknown bandwidth class `{other}`"))),
        }
    }
}

/// A symmetric positive-definite bandwidth matrix together with the factors
/// reused by every evaluation.
#[derive(Clone, Debug)]
pub struct Bandwidth {
    matrix: DMatrix<f64>,
    class: BandwidthClass,
    inverse: DMatrix<f64>,
    inv_sqrt: DMatrix<f64>,
    sqrt: DMatrix<f64>,
    det: f64,
}

const SYMMETRY_TOL: f64 = 1e-12;

impl Bandwidth {
    pub fn new(matrix: DMatrix<f64>, class: BandwidthClass) -> Result<Self> {
        let d = matrix.nrows();
        if d == 0 || matrix.ncols() != d {
            return Err(Error::InvalidBandwidth(format!(
                "bandwidth must be square, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBandwidth("non-finite entry".into()));
        }
        let scale = matrix.amax();
        for r in 0..d {
            for c in (r + 1)..d {
                if (matrix[(r, c)] - matrix[(c, r)]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::InvalidBandwidth("matrix is not symmetric".into()));
                }
            }
        }
        let matrix = (&matrix + matrix.transpose()) * 0.5;
        let off_diagonal_zero = (0..d).all(|r| (0..d).all(|c| r == c || matrix[(r, c)] == 0.0));
        match class {
            BandwidthClass::Scalar => {
                let h2 = matrix[(0, 0)];
                let equal = (0..d).all(|k| (matrix[(k, k)] - h2).abs() <= SYMMETRY_TOL * h2.abs());
                if !off_diagonal_zero || !equal {
                    return Err(Error::InvalidBandwidth(
                        "scalar class requires a multiple of the identity".into(),
                    ));
                }
            }
            BandwidthClass::Diagonal if !off_diagonal_zero => {
                return Err(Error::InvalidBandwidth(
                    "diagonal class requires zero off-diagonal entries".into(),
                ));
            }
            _ => {}
        }

        if off_diagonal_zero {
            let diag: Vec<f64> = (0..d).map(|k| matrix[(k, k)]).collect();
            if diag.iter().any(|&v| v <= 0.0) {
                return Err(Error::InvalidBandwidth("matrix is not positive definite".into()));
            }
            let det = diag.iter().product();
            return Ok(Self {
                inverse: DMatrix::from_diagonal(&DVector::from_iterator(d, diag.iter().map(|v| 1.0 / v))),
                inv_sqrt: DMatrix::from_diagonal(&DVector::from_iterator(
                    d,
                    diag.iter().map(|v| 1.0 / v.sqrt()),
                )),
                sqrt: DMatrix::from_diagonal(&DVector::from_iterator(d, diag.iter().map(|v| v.sqrt()))),
                matrix,
                class,
                det,
            });
        }

        let eig = SymmetricEigen::new(matrix.clone());
        if eig.eigenvalues.iter().any(|&l| l <= 0.0 || !l.is_finite()) {
            return Err(Error::InvalidBandwidth("matrix is not positive definite".into()));
        }
        let v = &eig.eigenvectors;
        let with = |f: &dyn Fn(f64) -> f64| {
            let diag = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
            let m = v * diag * v.transpose();
            (&m + m.transpose()) * 0.5
        };
        Ok(Self {
            inverse: with(&|l| 1.0 / l),
            inv_sqrt: with(&|l| 1.0 / l.sqrt()),
            sqrt: with(&f64::sqrt),
            det: eig.eigenvalues.iter().product(),
            matrix,
            class,
        })
    }

    /// `h^2 I` in dimension `d`.
    pub fn scalar(h: f64, d: usize) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidBandwidth(format!("scalar bandwidth must be positive, got {h}")));
        }
        Self::new(DMatrix::identity(d, d) * (h * h), BandwidthClass::Scalar)
    }

    /// Diagonal bandwidth with the given variances on the diagonal.
    pub fn diagonal(entries: &[f64]) -> Result<Self> {
        Self::new(
            DMatrix::from_diagonal(&DVector::from_column_slice(entries)),
            BandwidthClass::Diagonal,
        )
    }

    pub fn full(matrix: DMatrix<f64>) -> Result<Self> {
        Self::new(matrix, BandwidthClass::Full)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidBandwidth("bandwidth rows must form a square matrix".into()));
        }
        let m = DMatrix::from_fn(d, d, |r, c| rows[r][c]);
        Self::full(m)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn class(&self) -> BandwidthClass {
        self.class
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    pub fn inv_sqrt(&self) -> &DMatrix<f64> {
        &self.inv_sqrt
    }

    /// Symmetric square root `H^{1/2}`.
    pub fn sqrt(&self) -> &DMatrix<f64> {
        &self.sqrt
    }

    pub fn det(&self) -> f64 {
        self.det
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        if self.is_diagonal() {
            return self.matrix.diagonal().max();
        }
        SymmetricEigen::new(self.matrix.clone()).eigenvalues.max()
    }

    pub fn eigenvalues(&self) -> DVector<f64> {
        SymmetricEigen::new(self.matrix.clone()).eigenvalues
    }

    fn is_diagonal(&self) -> bool {
        let d = self.dim();
        (0..d).all(|r| (0..d).all(|c| r == c || self.matrix[(r, c)] == 0.0))
    }

    /// The same matrix multiplied by `factor > 0`, keeping the class.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(&self.matrix * factor, self.class)
    }

    /// Projects onto `class`: scalar keeps the geometric-mean eigenvalue,
    /// diagonal keeps the diagonal.
    pub fn conform(&self, class: BandwidthClass) -> Result<Self> {
        let d = self.dim();
        match class {
            BandwidthClass::Scalar => {
                let h2 = self.det.powf(1.0 / d as f64);
                Self::new(DMatrix::identity(d, d) * h2, class)
            }
            BandwidthClass::Diagonal => Self::new(DMatrix::from_diagonal(&self.matrix.diagonal()), class),
            BandwidthClass::Full => Self::new(self.matrix.clone(), class),
        }
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.matrix.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    pub fn as_matrix2(&self) -> Result<Matrix2<f64>> {
        if self.dim() != 2 {
            return Err(Error::DimensionError(format!(
                "expected a 2x2 bandwidth, got {0}x{0}",
                self.dim()
            )));
        }
        Ok(Matrix2::new(
            self.matrix[(0, 0)],
            self.matrix[(0, 1)],
            self.matrix[(1, 0)],
            self.matrix[(1, 1)],
        ))
    }
}

impl Serialize for Bandwidth {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows().serialize(serializer)
    }
}

/// Roughness and second moment of the kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KernelConstants {
    /// `R(K) = integral of K^2`
    pub r_k: f64,
    /// `mu_2(K)`
    pub mu2_k: f64,
    pub d: usize,
}

/// Gaussian kernel constants: `R(K) = (4 pi)^{-d/2}`, `mu_2(K) = 1`.
pub fn kernel_constants(d: usize) -> KernelConstants {
    KernelConstants {
        r_k: (4.0 * PI).powf(-(d as f64) / 2.0),
        mu2_k: 1.0,
        d,
    }
}

/// A kernel density estimate: data plus bandwidth with cached factors.
#[derive(Clone, Debug)]
pub struct Kde {
    data: DataSet,
    bandwidth: Bandwidth,
    /// `H^{-1}` row-major.
    precision: Vec<f64>,
    /// `(1/n) (2 pi)^{-d/2} |H|^{-1/2}`
    scale: f64,
}

impl Kde {
    pub fn new(data: DataSet, bandwidth: Bandwidth) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidInput("kernel density estimate needs at least one observation".into()));
        }
        if bandwidth.dim() != data.dim() {
            return Err(Error::DimensionError(format!(
                "bandwidth is {0}x{0} but data has dimension {1}",
                bandwidth.dim(),
                data.dim()
            )));
        }
        let d = data.dim();
        let precision = bandwidth.inverse().transpose().as_slice().to_vec();
        let scale = (2.0 * PI).powf(-(d as f64) / 2.0) / bandwidth.det().sqrt() / data.n() as f64;
        Ok(Self {
            data,
            bandwidth,
            precision,
            scale,
        })
    }

    pub fn data(&self) -> &DataSet {
        &self.data
    }

    pub fn bandwidth(&self) -> &Bandwidth {
        &self.bandwidth
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.data.dim() {
            return Err(Error::DimensionError(format!(
                "query has length {} but data has dimension {}",
                x.len(),
                self.data.dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite query point".into()));
        }
        Ok(())
    }

    #[inline]
    fn quad2(&self, dx: f64, dy: f64) -> f64 {
        let p = &self.precision;
        p[0] * dx * dx + 2.0 * p[1] * dx * dy + p[3] * dy * dy
    }

    /// Density at `x`.
    pub fn density(&self, x: &[f64]) -> f64 {
        if self.data.dim() == 2 {
            return self.density2([x[0], x[1]]);
        }
        let d = self.data.dim();
        let mut u = vec![0.0; d];
        let mut sum = 0.0;
        for row in self.data.rows() {
            for k in 0..d {
                u[k] = x[k] - row[k];
            }
            sum += (-0.5 * quad_form(&self.precision, &u)).exp();
        }
        sum * self.scale
    }

    fn density2(&self, x: [f64; 2]) -> f64 {
        let pts = self.data.as_slice();
        let mut sum = 0.0;
        for p in pts.chunks_exact(2) {
            sum += (-0.5 * self.quad2(x[0] - p[0], x[1] - p[1])).exp();
        }
        sum * self.scale
    }

    /// `-(1/n) sum_i K_H(x - X_i) H^{-1} (x - X_i)`
    pub fn gradient(&self, x: &[f64]) -> DVector<f64> {
        let d = self.data.dim();
        let mut u = vec![0.0; d];
        let mut acc = vec![0.0; d];
        for row in self.data.rows() {
            for k in 0..d {
                u[k] = x[k] - row[k];
            }
            let w = (-0.5 * quad_form(&self.precision, &u)).exp();
            for k in 0..d {
                acc[k] += w * u[k];
            }
        }
        // H^{-1} is applied once to the weighted sum
        let mut g = DVector::zeros(d);
        for r in 0..d {
            g[r] = -self.scale * (0..d).map(|c| self.precision[r * d + c] * acc[c]).sum::<f64>();
        }
        g
    }

    /// `(1/n) sum_i K_H(u_i) (H^{-1} u_i u_i' H^{-1} - H^{-1})`, symmetric by construction.
    pub fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.data.dim();
        let mut u = vec![0.0; d];
        let mut v = vec![0.0; d];
        let mut outer = vec![0.0; d * d];
        let mut wsum = 0.0;
        for row in self.data.rows() {
            for k in 0..d {
                u[k] = x[k] - row[k];
            }
            for r in 0..d {
                v[r] = (0..d).map(|c| self.precision[r * d + c] * u[c]).sum();
            }
            let q: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            let w = (-0.5 * q).exp();
            wsum += w;
            for r in 0..d {
                for c in r..d {
                    outer[r * d + c] += w * v[r] * v[c];
                }
            }
        }
        let mut h = DMatrix::zeros(d, d);
        for r in 0..d {
            for c in r..d {
                let p = 0.5 * (self.precision[r * d + c] + self.precision[c * d + r]);
                let val = self.scale * (outer[r * d + c] - wsum * p);
                h[(r, c)] = val;
                h[(c, r)] = val;
            }
        }
        h
    }

    fn gradient2(&self, x: [f64; 2]) -> Vector2<f64> {
        let p = &self.precision;
        let (mut ax, mut ay) = (0.0, 0.0);
        for pt in self.data.as_slice().chunks_exact(2) {
            let (dx, dy) = (x[0] - pt[0], x[1] - pt[1]);
            let w = (-0.5 * self.quad2(dx, dy)).exp();
            ax += w * dx;
            ay += w * dy;
        }
        Vector2::new(
            -self.scale * (p[0] * ax + p[1] * ay),
            -self.scale * (p[2] * ax + p[3] * ay),
        )
    }

    fn hessian2(&self, x: [f64; 2]) -> Matrix2<f64> {
        let p = &self.precision;
        let p12 = 0.5 * (p[1] + p[2]);
        let (mut sxx, mut sxy, mut syy, mut ws) = (0.0, 0.0, 0.0, 0.0);
        for pt in self.data.as_slice().chunks_exact(2) {
            let (dx, dy) = (x[0] - pt[0], x[1] - pt[1]);
            let vx = p[0] * dx + p12 * dy;
            let vy = p12 * dx + p[3] * dy;
            let w = (-0.5 * (dx * vx + dy * vy)).exp();
            ws += w;
            sxx += w * vx * vx;
            sxy += w * vx * vy;
            syy += w * vy * vy;
        }
        let s = self.scale;
        let off = s * (sxy - ws * p12);
        Matrix2::new(s * (sxx - ws * p[0]), off, off, s * (syy - ws * p[3]))
    }

    /// Exact evaluation on every node of a two-dimensional grid.
    ///
    /// Diagonal bandwidths factor into a product of one-dimensional kernels and
    /// reduce to a matrix product. Otherwise the kernel is evaluated along each
    /// grid column by the Gaussian ratio recurrence, started at the column's peak.
    pub fn grid_density(&self, grid: &EvalGrid) -> GridValues {
        assert_eq!(self.data.dim(), 2, "grid evaluation requires two-dimensional data");
        if self.bandwidth.is_diagonal() {
            self.grid_density_separable(grid)
        } else {
            self.grid_density_recurrence(grid)
        }
    }

    fn grid_density_separable(&self, grid: &EvalGrid) -> GridValues {
        let n = self.data.n();
        let [nx, ny] = grid.counts;
        let xs = grid.axis(0);
        let ys = grid.axis(1);
        let (px, py) = (self.precision[0], self.precision[3]);
        // factor(i, a) = exp(-p (g_a - X_i)^2 / 2), laid out n x m column-major
        let factor = |axis: &[f64], k: usize, p: f64| {
            DMatrix::from_fn(n, axis.len(), |i, a| {
                let t = axis[a] - self.data.as_slice()[2 * i + k];
                (-0.5 * p * t * t).exp()
            })
        };
        let fx = factor(&xs, 0, px);
        let fy = factor(&ys, 1, py);
        let m = fx.transpose() * fy;
        debug_assert_eq!(m.shape(), (nx, ny));
        let values = m.as_slice().iter().map(|v| v * self.scale).collect();
        GridValues::new(*grid, values)
    }

    fn grid_density_recurrence(&self, grid: &EvalGrid) -> GridValues {
        let [nx, ny] = grid.counts;
        let xs = grid.axis(0);
        let ys = grid.axis(1);
        let dy_step = grid.spacing()[1];
        let p = &self.precision;
        let (p11, p12, p22) = (p[0], 0.5 * (p[1] + p[2]), p[3]);
        let shear = p12 / p22;
        let marginal = p11 - p12 * p12 / p22;
        let rho = (-p22 * dy_step * dy_step).exp();
        let pts = self.data.as_slice();

        // columns[a * ny + b] holds node (a, b)
        let mut columns = vec![0.0; nx * ny];
        columns.par_chunks_mut(ny).enumerate().for_each(|(a, col)| {
            let gx = xs[a];
            for pt in pts.chunks_exact(2) {
                let dx = gx - pt[0];
                let amp = (-0.5 * marginal * dx * dx).exp();
                if amp == 0.0 {
                    continue;
                }
                // t_b = (y_b - Y) + shear * dx, the exponent is -p22 t_b^2 / 2
                let t0 = ys[0] - pt[1] + shear * dx;
                let peak = (-t0 / dy_step).round().clamp(0.0, (ny - 1) as f64) as usize;
                let tp = t0 + peak as f64 * dy_step;
                let e_peak = amp * (-0.5 * p22 * tp * tp).exp();
                if e_peak == 0.0 {
                    continue;
                }
                col[peak] += e_peak;
                let mut e = e_peak;
                let mut ratio = (-0.5 * p22 * (2.0 * dy_step * tp + dy_step * dy_step)).exp();
                for v in col.iter_mut().skip(peak + 1) {
                    e *= ratio;
                    if e == 0.0 {
                        break;
                    }
                    *v += e;
                    ratio *= rho;
                }
                let mut e = e_peak;
                let mut ratio = (-0.5 * p22 * (dy_step * dy_step - 2.0 * dy_step * tp)).exp();
                for v in col[..peak].iter_mut().rev() {
                    e *= ratio;
                    if e == 0.0 {
                        break;
                    }
                    *v += e;
                    ratio *= rho;
                }
            }
        });
        let mut values = vec![0.0; nx * ny];
        for a in 0..nx {
            for b in 0..ny {
                values[b * nx + a] = columns[a * ny + b] * self.scale;
            }
        }
        GridValues::new(*grid, values)
    }

    /// Draws `m` points from the estimate: a uniformly chosen observation plus
    /// `H^{1/2} z` with `z` standard normal.
    pub fn sample<R: rand::Rng + ?Sized>(&self, m: usize, rng: &mut R) -> DataSet {
        use rand_distr::{Distribution, StandardNormal};
        let d = self.data.dim();
        let root = self.bandwidth.sqrt();
        let mut out = Vec::with_capacity(m * d);
        let mut z = vec![0.0; d];
        for _ in 0..m {
            let i = rng.random_range(0..self.data.n());
            z.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
            let row = self.data.row(i);
            for r in 0..d {
                out.push(row[r] + (0..d).map(|c| root[(r, c)] * z[c]).sum::<f64>());
            }
        }
        DataSet::new(out, d).expect("finite draws")
    }
}

impl PlanarField for Kde {
    fn value(&self, x: [f64; 2]) -> f64 {
        self.density2(x)
    }

    fn gradient(&self, x: [f64; 2]) -> Vector2<f64> {
        self.gradient2(x)
    }

    fn hessian(&self, x: [f64; 2]) -> Matrix2<f64> {
        self.hessian2(x)
    }

    fn grid_values(&self, grid: &EvalGrid) -> GridValues {
        self.grid_density(grid)
    }
}

fn quad_form(precision: &[f64], u: &[f64]) -> f64 {
    let d = u.len();
    let mut q = 0.0;
    for r in 0..d {
        let mut row = 0.0;
        for c in 0..d {
            row += precision[r * d + c] * u[c];
        }
        q += u[r] * row;
    }
    q
}

fn check_queries(data: &DataSet, queries: &DataSet) -> Result<()> {
    if queries.dim() != data.dim() {
        return Err(Error::DimensionError(format!(
            "queries have dimension {} but data has dimension {}",
            queries.dim(),
            data.dim()
        )));
    }
    Ok(())
}

/// Density at each query row.
pub fn kde_density(data: &DataSet, bandwidth: &Bandwidth, queries: &DataSet) -> Result<Vec<f64>> {
    check_queries(data, queries)?;
    let kde = Kde::new(data.clone(), bandwidth.clone())?;
    Ok(queries.rows().map(|q| kde.density(q)).collect::<Vec<_>>())
}

pub fn kde_gradient(data: &DataSet, bandwidth: &Bandwidth, x: &[f64]) -> Result<DVector<f64>> {
    let kde = Kde::new(data.clone(), bandwidth.clone())?;
    kde.check_point(x)?;
    Ok(kde.gradient(x))
}

pub fn kde_hessian(data: &DataSet, bandwidth: &Bandwidth, x: &[f64]) -> Result<DMatrix<f64>> {
    let kde = Kde::new(data.clone(), bandwidth.clone())?;
    kde.check_point(x)?;
    Ok(kde.hessian(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normal_sample(n: usize, seed: u64) -> DataSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..2 * n).map(|_| rng.sample(StandardNormal)).collect();
        DataSet::new(v, 2).unwrap()
    }

    fn origin() -> DataSet {
        DataSet::from_rows(&[[0.0, 0.0]]).unwrap()
    }

    #[test]
    fn density_at_kernel_centre() {
        let q = origin();
        let v = kde_density(&origin(), &Bandwidth::scalar(1.0, 2).unwrap(), &q).unwrap();
        assert_relative_eq!(v[0], 1.0 / (2.0 * PI), epsilon = 1e-15);
        let v = kde_density(&origin(), &Bandwidth::scalar(2.0, 2).unwrap(), &q).unwrap();
        assert_relative_eq!(v[0], 0.039788735772973836, epsilon = 1e-15);
    }

    #[test]
    fn density_integrates_to_one() {
        let data = normal_sample(500, 3);
        let h = Bandwidth::scalar(0.2f64.sqrt(), 2).unwrap();
        let kde = Kde::new(data, h).unwrap();
        let grid = EvalGrid::square(-6.0, 6.0, 400).unwrap();
        let total: f64 = kde.grid_density(&grid).values().iter().sum::<f64>() * grid.cell_area();
        assert!((total - 1.0).abs() < 1e-3, "total {total}");
    }

    #[test]
    fn gradient_vanishes_by_symmetry() {
        let g = kde_gradient(&origin(), &Bandwidth::scalar(1.0, 2).unwrap(), &[0.0, 0.0]).unwrap();
        assert_eq!(g.norm(), 0.0);
        let pair = DataSet::from_rows(&[[-1.0, 0.0], [1.0, 0.0]]).unwrap();
        let g = kde_gradient(&pair, &Bandwidth::scalar(1.0, 2).unwrap(), &[0.0, 0.0]).unwrap();
        assert!(g.norm() < 1e-17);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = normal_sample(20, 11);
        let h = Bandwidth::scalar(0.5f64.sqrt(), 2).unwrap();
        let kde = Kde::new(data, h).unwrap();
        let x = [0.3, -0.2];
        let g = kde.gradient(&x);
        let step = 1e-5;
        for k in 0..2 {
            let mut hi = x;
            let mut lo = x;
            hi[k] += step;
            lo[k] -= step;
            let fd = (kde.density(&hi) - kde.density(&lo)) / (2.0 * step);
            assert!((fd - g[k]).abs() < 1e-6, "axis {k}: fd {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn hessian_at_peak_and_symmetry() {
        let h = kde_hessian(&origin(), &Bandwidth::scalar(1.0, 2).unwrap(), &[0.0, 0.0]).unwrap();
        assert_relative_eq!(h[(0, 0)], -1.0 / (2.0 * PI), epsilon = 1e-15);
        assert_relative_eq!(h[(1, 1)], -1.0 / (2.0 * PI), epsilon = 1e-15);
        assert_eq!(h[(0, 1)], 0.0);

        let data = normal_sample(20, 5);
        let full = Bandwidth::full(DMatrix::from_row_slice(2, 2, &[0.4, 0.13, 0.13, 0.25])).unwrap();
        let kde = Kde::new(data, full).unwrap();
        let h = kde.hessian(&[0.1, 0.7]);
        assert_eq!(h[(0, 1)].to_bits(), h[(1, 0)].to_bits());
        let h2 = PlanarField::hessian(&kde, [0.1, 0.7]);
        assert_eq!(h2[(0, 1)].to_bits(), h2[(1, 0)].to_bits());
    }

    #[test]
    fn hessian_matches_finite_differences_of_gradient() {
        let data = normal_sample(20, 8);
        let full = Bandwidth::full(DMatrix::from_row_slice(2, 2, &[0.5, -0.1, -0.1, 0.3])).unwrap();
        let kde = Kde::new(data, full).unwrap();
        let x = [0.2, 0.4];
        let h = kde.hessian(&x);
        let step = 1e-5;
        for k in 0..2 {
            let mut hi = x;
            let mut lo = x;
            hi[k] += step;
            lo[k] -= step;
            let col = (kde.gradient(&hi) - kde.gradient(&lo)) / (2.0 * step);
            for r in 0..2 {
                assert!((col[r] - h[(r, k)]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn planar_paths_agree_with_generic() {
        let data = normal_sample(30, 21);
        let full = Bandwidth::full(DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.2])).unwrap();
        let kde = Kde::new(data, full).unwrap();
        let x = [0.25, -0.4];
        assert_relative_eq!(kde.density(&x), PlanarField::value(&kde, x), max_relative = 1e-14);
        let g = kde.gradient(&x);
        let g2 = PlanarField::gradient(&kde, x);
        assert_relative_eq!(g[0], g2[0], max_relative = 1e-12);
        assert_relative_eq!(g[1], g2[1], max_relative = 1e-12);
        let h = kde.hessian(&x);
        let h2 = PlanarField::hessian(&kde, x);
        for r in 0..2 {
            for c in 0..2 {
                assert_relative_eq!(h[(r, c)], h2[(r, c)], max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn grid_paths_match_pointwise_density() {
        let data = normal_sample(50, 4);
        let grid = EvalGrid::new([-3.0, -2.5], [3.0, 3.5], [41, 37]).unwrap();
        for h in [
            Bandwidth::diagonal(&[0.2, 0.05]).unwrap(),
            Bandwidth::full(DMatrix::from_row_slice(2, 2, &[0.2, -0.07, -0.07, 0.1])).unwrap(),
        ] {
            let kde = Kde::new(data.clone(), h).unwrap();
            let gv = kde.grid_density(&grid);
            for j in (0..37).step_by(5) {
                for i in (0..41).step_by(7) {
                    let p = grid.node(i, j);
                    let direct = kde.density(&p);
                    let v = gv.get(i, j);
                    assert!((v - direct).abs() <= 1e-12 * direct.max(1e-300) + 1e-300, "{v} vs {direct}");
                }
            }
        }
    }

    #[test]
    fn scalar_affine_equivariance() {
        let data = normal_sample(40, 9);
        let c = 2.5;
        let scaled = DataSet::new(data.as_slice().iter().map(|v| v * c).collect(), 2).unwrap();
        let k1 = Kde::new(data, Bandwidth::scalar(0.4, 2).unwrap()).unwrap();
        let k2 = Kde::new(scaled, Bandwidth::scalar(0.4 * c, 2).unwrap()).unwrap();
        let x = [0.3, 0.8];
        let a = k1.density(&x);
        let b = k2.density(&[x[0] * c, x[1] * c]);
        assert_relative_eq!(b, a / (c * c), max_relative = 1e-12);
    }

    #[test]
    fn kernel_constants_are_gaussian() {
        assert_relative_eq!(kernel_constants(2).r_k, 0.07957747154594767, epsilon = 1e-15);
        assert_relative_eq!(kernel_constants(1).r_k, 0.28209479177387814, epsilon = 1e-15);
        for d in 1..5 {
            assert_eq!(kernel_constants(d).mu2_k, 1.0);
        }
    }

    #[test]
    fn roughness_matches_quadrature() {
        // integral of phi^2 over the line, by a fine trapezoid rule
        let step = 1e-3;
        let one_d: f64 = (-12000..=12000)
            .map(|k| {
                let x = k as f64 * step;
                let p = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
                p * p * step
            })
            .sum();
        assert_relative_eq!(kernel_constants(1).r_k, one_d, max_relative = 1e-10);
        assert_relative_eq!(kernel_constants(2).r_k, one_d * one_d, max_relative = 1e-10);
    }

    #[test]
    fn rejects_bad_bandwidths() {
        let not_spd = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(Bandwidth::full(not_spd), Err(Error::InvalidBandwidth(_))));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.2, 1.0]);
        assert!(matches!(Bandwidth::full(asym), Err(Error::InvalidBandwidth(_))));
        let not_scalar = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        assert!(Bandwidth::new(not_scalar, BandwidthClass::Scalar).is_err());
        assert!(Bandwidth::scalar(0.0, 2).is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let q = DataSet::new(vec![0.0, 0.0, 0.0], 3).unwrap();
        let err = kde_density(&origin(), &Bandwidth::scalar(1.0, 2).unwrap(), &q).unwrap_err();
        assert!(matches!(err, Error::DimensionError(_)));
        let err = Kde::new(origin(), Bandwidth::scalar(1.0, 3).unwrap()).unwrap_err();
        assert!(matches!(err, Error::DimensionError(_)));
    }

    #[test]
    fn one_dimensional_estimate() {
        let data = DataSet::new(vec![-1.0, 0.5, 2.0], 1).unwrap();
        let kde = Kde::new(data, Bandwidth::scalar(0.7, 1).unwrap()).unwrap();
        let step = 1e-3;
        let total: f64 = (-10000..10000).map(|k| kde.density(&[k as f64 * step]) * step).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn covariance_is_translation_invariant_for_exact_shifts() {
        let data = DataSet::from_rows(&[[0.5, 1.25], [2.0, -0.75], [-1.5, 0.0], [0.25, 3.0]]).unwrap();
        let shifted = data.affine(&DMatrix::identity(2, 2), &[1024.0, -512.0]).unwrap();
        assert_eq!(data.sample_covariance().unwrap(), shifted.sample_covariance().unwrap());
    }
}
