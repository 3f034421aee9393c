//! Asymptotic symmetric-difference risk of plug-in level-set and HDR estimators.
//!
//! With `A_x = -|grad f(x)| / sqrt(R(K) c)` and
//! `B_x = -sqrt(n |H|^{1/2}) D1(x, H) / sqrt(R(K) c)`, where
//! `D1(x, H) = mu2(K) tr(H hess f(x)) / 2`, the level-set risk is
//!
//! ```text
//! LS(H) = c / sqrt(n |H|^{1/2}) * integral over {f = c} of psi(B_x) / (-A_x)
//! psi(b) = 2 phi(b) + 2 Phi(b) b - b
//! ```
//!
//! For highest density regions the level itself is estimated, which shifts `B_x`
//! by a term proportional to `D2(H) = w0 (V1(H) + V2(H))`, with
//! `w0 = (integral of 1/|grad f|)^{-1}`, `V1 = integral of D1/|grad f|` over the
//! curve and `V2 = (1/f_tau) * integral of D1` over the super-level set.
//!
//! Curve integrals use the midpoint rule on contour segments.

use std::f64::consts::PI;

use nalgebra::Matrix2;
use rayon::prelude::*;
use serde::Serialize;
use statrs::function::erf::erf;

use crate::contour::{attach_normals, extract_contour, neumaier, Contour};
use crate::error::{Error, Result};
use crate::field::PlanarField;
use crate::kde::{Bandwidth, KernelConstants};
use crate::levels::{EvalGrid, GridValues};

/// `2 phi(b) + 2 Phi(b) b - b`, evaluated through `|b|` so that it is exactly even.
///
/// Equals `-a` times the integral of `|Phi(a x + b) - 1{x < 0}|` over the line for
/// any `a < 0`.
pub fn psi_term(b: f64) -> f64 {
    let a = b.abs();
    let phi = (-0.5 * a * a).exp() / (2.0 * PI).sqrt();
    2.0 * phi + a * erf(a / std::f64::consts::SQRT_2)
}

/// `mu2(K) tr(H hess) / 2`
pub fn d1(hessian: &Matrix2<f64>, bandwidth: &Matrix2<f64>, mu2: f64) -> f64 {
    0.5 * mu2 * trace_product(bandwidth, hessian)
}

/// `tr(A B)` for symmetric 2x2 matrices.
fn trace_product(a: &Matrix2<f64>, b: &Matrix2<f64>) -> f64 {
    a[(0, 0)] * b[(0, 0)] + a[(0, 1)] * b[(1, 0)] + a[(1, 0)] * b[(0, 1)] + a[(1, 1)] * b[(1, 1)]
}

/// Bandwidth-independent ingredients of the risk approximations.
///
/// Hessians are stored rather than `tr(H hess f)` so a single set of inputs can be
/// evaluated at many bandwidths. The region integral is linear in `H`, so the
/// integrated Hessian matrix over the super-level set is stored once.
#[derive(Clone, Debug)]
pub struct RiskInputs {
    pub n: usize,
    /// `c` for level sets, `f_tau` for highest density regions.
    pub level: f64,
    pub contour: Contour,
    pub grad_norms: Vec<f64>,
    /// `hess f` at each segment midpoint.
    pub hessians: Vec<Matrix2<f64>>,
    /// Integral of `hess f` over `{f >= level}`, needed for HDR risk only.
    pub region_hessian: Option<Matrix2<f64>>,
    pub kernel: KernelConstants,
}

impl RiskInputs {
    pub fn new(
        n: usize,
        level: f64,
        contour: Contour,
        hessians: Vec<Matrix2<f64>>,
        region_hessian: Option<Matrix2<f64>>,
        kernel: KernelConstants,
    ) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidInput(format!("sample size must be at least 2, got {n}")));
        }
        if !(level > 0.0 && level.is_finite()) {
            return Err(Error::InvalidInput(format!("level must be positive, got {level}")));
        }
        let grad_norms = contour.grad_norms()?;
        if let Some(pos) = grad_norms.iter().position(|&g| !(g > 0.0)) {
            let m = contour.segments[pos].midpoint;
            return Err(Error::DegenerateGradient {
                norm: grad_norms[pos],
                x: m[0],
                y: m[1],
            });
        }
        if hessians.len() != contour.segments.len() {
            return Err(Error::DimensionError(format!(
                "{} Hessians for {} segments",
                hessians.len(),
                contour.segments.len()
            )));
        }
        if kernel.d != 2 {
            return Err(Error::DimensionError("risk approximations are implemented for d = 2".into()));
        }
        Ok(Self {
            n,
            level,
            contour,
            grad_norms,
            hessians,
            region_hessian,
            kernel,
        })
    }

    /// Inputs built from separate fields: the curve is the `level` contour of
    /// `curve_values`, normals and gradient norms come from `gradient_field`, and
    /// Hessians from `hessian_field`.
    pub fn from_fields<G, H>(
        n: usize,
        level: f64,
        curve_values: &GridValues,
        gradient_field: &G,
        hessian_field: &H,
        region_hessian: Option<Matrix2<f64>>,
        kernel: KernelConstants,
    ) -> Result<Self>
    where
        G: PlanarField + ?Sized,
        H: PlanarField + ?Sized,
    {
        let contour = attach_normals(extract_contour(curve_values, level)?, gradient_field)?;
        let hessians = contour
            .segments
            .par_iter()
            .map(|s| hessian_field.hessian(s.midpoint))
            .collect();
        Self::new(n, level, contour, hessians, region_hessian, kernel)
    }

    /// Inputs where one field supplies everything, e.g. a known true density.
    pub fn from_density<F: PlanarField + ?Sized>(
        field: &F,
        n: usize,
        level: f64,
        grid: &EvalGrid,
        kernel: KernelConstants,
    ) -> Result<Self> {
        let values = field.grid_values(grid);
        let region = region_hessian_matrix(field, &values, level)?;
        Self::from_fields(n, level, &values, field, field, Some(region), kernel)
    }

    pub fn lengths(&self) -> impl Iterator<Item = f64> + '_ {
        self.contour.segments.iter().map(|s| s.length)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SegmentRisk {
    pub a: f64,
    /// `B_x` for level sets, `C_x` for highest density regions.
    pub b_or_c: f64,
    pub contribution: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HdrAux {
    /// Reciprocal of the boundary integral of `1 / |grad f|`.
    pub w0: f64,
    /// Boundary term of the level bias.
    pub v1: f64,
    /// Region term of the level bias.
    pub v2: f64,
    /// Bias of the estimated level, `w0 (v1 + v2)`.
    pub d2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RiskReport {
    pub risk: f64,
    pub per_segment: Vec<SegmentRisk>,
    pub aux: Option<HdrAux>,
}

struct Common {
    /// `sqrt(n |H|^{1/2})`
    root: f64,
    /// `sqrt(R(K) level)`
    sqrt_rc: f64,
    h: Matrix2<f64>,
}

fn common(bandwidth: &Bandwidth, inputs: &RiskInputs) -> Result<Common> {
    let h = bandwidth.as_matrix2()?;
    let det = bandwidth.det();
    if !(det > 0.0) {
        return Err(Error::InvalidBandwidth("bandwidth determinant is not positive".into()));
    }
    Ok(Common {
        root: (inputs.n as f64 * det.sqrt()).sqrt(),
        sqrt_rc: (inputs.kernel.r_k * inputs.level).sqrt(),
        h,
    })
}

fn assemble(inputs: &RiskInputs, cm: &Common, shift: f64, aux: Option<HdrAux>) -> RiskReport {
    let mu2 = inputs.kernel.mu2_k;
    let scale = inputs.level / cm.root;
    let per_segment: Vec<SegmentRisk> = inputs
        .hessians
        .iter()
        .zip(&inputs.grad_norms)
        .zip(inputs.lengths())
        .map(|((hess, &g), len)| {
            let a = -g / cm.sqrt_rc;
            let b = -cm.root * d1(hess, &cm.h, mu2) / cm.sqrt_rc + shift;
            SegmentRisk {
                a,
                b_or_c: b,
                contribution: scale * psi_term(b) / (-a) * len,
            }
        })
        .collect();
    RiskReport {
        risk: neumaier(per_segment.iter().map(|s| s.contribution)),
        per_segment,
        aux,
    }
}

/// Asymptotic risk of the level-set estimator at the fixed level `inputs.level`.
pub fn ls_risk(bandwidth: &Bandwidth, inputs: &RiskInputs) -> Result<RiskReport> {
    let cm = common(bandwidth, inputs)?;
    Ok(assemble(inputs, &cm, 0.0, None))
}

/// The HDR correction terms `(w0, V1, V2, D2)` at `bandwidth`.
pub fn hdr_aux(bandwidth: &Bandwidth, inputs: &RiskInputs) -> Result<HdrAux> {
    let h = bandwidth.as_matrix2()?;
    let region = inputs.region_hessian.ok_or_else(|| {
        Error::InvalidInput("HDR risk needs the integrated Hessian over the super-level set".into())
    })?;
    let mu2 = inputs.kernel.mu2_k;
    let inv_weight = neumaier(inputs.grad_norms.iter().zip(inputs.lengths()).map(|(g, l)| l / g));
    let w0 = 1.0 / inv_weight;
    let v1 = neumaier(
        inputs
            .hessians
            .iter()
            .zip(&inputs.grad_norms)
            .zip(inputs.lengths())
            .map(|((hess, g), l)| d1(hess, &h, mu2) / g * l),
    );
    let v2 = 0.5 * mu2 * trace_product(&h, &region) / inputs.level;
    Ok(HdrAux {
        w0,
        v1,
        v2,
        d2: w0 * (v1 + v2),
    })
}

/// Asymptotic risk of the plug-in highest density region estimator, with
/// `inputs.level` playing the role of `f_tau`.
pub fn hdr_risk(bandwidth: &Bandwidth, inputs: &RiskInputs) -> Result<RiskReport> {
    let aux = hdr_aux(bandwidth, inputs)?;
    hdr_risk_with_d2(bandwidth, inputs, aux.d2, Some(aux))
}

/// [`hdr_risk`] with `D2` supplied by the caller.
pub fn hdr_risk_with_d2(
    bandwidth: &Bandwidth,
    inputs: &RiskInputs,
    d2: f64,
    aux: Option<HdrAux>,
) -> Result<RiskReport> {
    let cm = common(bandwidth, inputs)?;
    let shift = cm.root / cm.sqrt_rc * d2;
    Ok(assemble(inputs, &cm, shift, aux))
}

/// Midpoint-rule integral of `hess f` over `{mask >= level}`, with `hess f`
/// taken from `field` at the nodes of the mask grid.
pub fn region_hessian_matrix<F: PlanarField + ?Sized>(
    field: &F,
    mask: &GridValues,
    level: f64,
) -> Result<Matrix2<f64>> {
    if level > mask.max() {
        return Ok(Matrix2::zeros());
    }
    mask.check_coverage(level)?;
    let grid = *mask.grid();
    let [nx, ny] = grid.counts;
    let rows: Vec<Matrix2<f64>> = (0..ny)
        .into_par_iter()
        .map(|j| {
            let mut acc = Matrix2::zeros();
            for i in 0..nx {
                if mask.get(i, j) >= level {
                    acc += field.hessian(grid.node(i, j));
                }
            }
            acc
        })
        .collect();
    let mut total = rows.iter().fold(Matrix2::zeros(), |acc, m| acc + m) * grid.cell_area();
    let off = 0.5 * (total[(0, 1)] + total[(1, 0)]);
    total[(0, 1)] = off;
    total[(1, 0)] = off;
    Ok(total)
}

/// Integral of `tr(H hess f)` over `{f >= level}` by midpoint quadrature on `grid`.
pub fn region_hess_integral<F: PlanarField + ?Sized>(
    field: &F,
    level: f64,
    bandwidth: &Bandwidth,
    grid: &EvalGrid,
) -> Result<f64> {
    let m = region_hessian_matrix(field, &field.grid_values(grid), level)?;
    Ok(trace_product(&bandwidth.as_matrix2()?, &m))
}
