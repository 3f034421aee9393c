//! Two-stage plug-in pilot bandwidths for estimating `f`, `grad f` and `hess f`.
//!
//! Each pilot has the form `H_r = h_r^2 S` with `S` the sample covariance. In the
//! coordinates where `S = I`, the AMISE-optimal scalar bandwidth for the `r`-th
//! derivative is
//!
//! ```text
//! h_r^{d+2r+4} = (d + 2r) V_r / (n Q_r)
//! V_r = (4 pi)^{-d/2} 2^{-r} prod_{j<r} (d + 2j)
//! Q_r = integral of |D^{r+2} f|^2 = (-1)^r integral of f Lap^{r+2} f
//! ```
//!
//! Stage one estimates `Q_r` from the data with a normal-scale pilot; stage two
//! plugs it into the formula above. Pairwise differences are formed before
//! whitening, so the rule is translation invariant and affine equivariant.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kde::{Bandwidth, BandwidthClass, DataSet};

/// Pilots for the density (`h0`), its gradient (`h1`) and its Hessian (`h2`).
#[derive(Clone, Debug, Serialize)]
pub struct PilotBandwidths {
    pub h0: Bandwidth,
    pub h1: Bandwidth,
    pub h2: Bandwidth,
}

impl PilotBandwidths {
    pub fn get(&self, r: usize) -> &Bandwidth {
        match r {
            0 => &self.h0,
            1 => &self.h1,
            _ => &self.h2,
        }
    }
}

/// Minimum sample size accepted by the pilot rules.
pub const MIN_PILOT_SAMPLE: usize = 10;

/// Coefficients (in `rho = |x|^2`) of the polynomial `p_s` with
/// `Lap^s exp(-rho/2) = p_s(rho) exp(-rho/2)` in dimension `d`.
fn laplacian_power_poly(s: usize, d: usize) -> Vec<f64> {
    let d = d as f64;
    let mut p = vec![1.0];
    for _ in 0..s {
        let deg = p.len();
        let dp: Vec<f64> = (1..deg).map(|k| k as f64 * p[k]).collect();
        let ddp: Vec<f64> = (1..dp.len()).map(|k| k as f64 * dp[k]).collect();
        let at = |v: &[f64], k: usize| v.get(k).copied().unwrap_or(0.0);
        // 4 rho (p'' - p' + p/4) + 2d (p' - p/2)
        let mut next = vec![0.0; deg + 1];
        for (k, out) in next.iter_mut().enumerate() {
            let inner_prev = if k >= 1 {
                at(&ddp, k - 1) - at(&dp, k - 1) + 0.25 * at(&p, k - 1)
            } else {
                0.0
            };
            *out = 4.0 * inner_prev + 2.0 * d * (at(&dp, k) - 0.5 * at(&p, k));
        }
        p = next;
    }
    p
}

fn horner(p: &[f64], x: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// `n^{-2} sum_{i,j} Lap^s phi_g (W (X_i - X_j))` where `phi_g` is the normal
/// density with covariance `g^2 I` and `W` an optional whitening map.
///
/// This estimates `integral of f Lap^s f` for the density of `W X`.
pub fn functional_estimate(data: &DataSet, s: usize, g: f64, whitening: Option<&DMatrix<f64>>) -> Result<f64> {
    if !(g > 0.0 && g.is_finite()) {
        return Err(Error::InvalidInput(format!("functional pilot must be positive, got {g}")));
    }
    data.require_rows(1)?;
    let d = data.dim();
    if let Some(w) = whitening {
        if w.nrows() != d || w.ncols() != d {
            return Err(Error::DimensionError("whitening map does not match data dimension".into()));
        }
    }
    let poly = laplacian_power_poly(s, d);
    let norm = (2.0 * PI).powf(-(d as f64) / 2.0) * g.powi(-(d as i32) - 2 * s as i32);
    let inv_g2 = 1.0 / (g * g);
    let kernel = |rho: f64| {
        let t = rho * inv_g2;
        horner(&poly, t) * (-0.5 * t).exp()
    };
    let n = data.n();
    let w: Vec<f64> = whitening.map(|m| m.transpose().as_slice().to_vec()).unwrap_or_default();
    let row_sums: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = data.row(i);
            let mut diff = vec![0.0; d];
            let mut acc = 0.0;
            for j in (i + 1)..n {
                let xj = data.row(j);
                for k in 0..d {
                    diff[k] = xi[k] - xj[k];
                }
                let rho = if w.is_empty() {
                    diff.iter().map(|v| v * v).sum()
                } else {
                    let mut rho = 0.0;
                    for r in 0..d {
                        let z: f64 = (0..d).map(|c| w[r * d + c] * diff[c]).sum();
                        rho += z * z;
                    }
                    rho
                };
                acc += kernel(rho);
            }
            acc
        })
        .collect();
    let off_diagonal: f64 = row_sums.iter().sum();
    let total = n as f64 * kernel(0.0) + 2.0 * off_diagonal;
    Ok(norm * total / (n as f64 * n as f64))
}

/// `(4 pi)^{-d/2} 2^{-r} prod_{j<r} (d + 2j)`
fn variance_constant(r: usize, d: usize) -> f64 {
    let prod: f64 = (0..r).map(|j| (d + 2 * j) as f64).product();
    (4.0 * PI).powf(-(d as f64) / 2.0) * 0.5f64.powi(r as i32) * prod
}

/// `Q_r` for the standard normal in dimension `d`.
pub fn normal_functional(r: usize, d: usize) -> f64 {
    let prod: f64 = (0..r + 2).map(|j| (d + 2 * j) as f64).product();
    (4.0 * PI).powf(-(d as f64) / 2.0) * 0.5f64.powi(r as i32 + 2) * prod
}

/// Normal-scale pilot for estimating `integral of f Lap^s f` from standardized data.
///
/// For `N(0, I)` data the estimator has expectation
/// `Lap^s phi_g(0) / n + (1 - 1/n) Lap^s phi_{2 + g^2}(0)`, where `phi_v` is the
/// normal density with covariance `v I`. The pilot is the `g` that makes this
/// equal to the target `Lap^s phi_2(0)`. Its leading-order solution is the usual
/// AMSE rule `g^{d+2s+2} = 2^{d/2+s+2} / ((d + 2s) n)`.
fn functional_pilot(s: usize, d: usize, n: usize) -> f64 {
    let (df, sf, nf) = (d as f64, s as f64, n as f64);
    // Lap^s phi_v(0) / |p_s(0)| = (2 pi v)^{-d/2} v^{-s}
    let lap_at_zero = |v: f64| (2.0 * PI * v).powf(-df / 2.0) * v.powf(-sf);
    let target = lap_at_zero(2.0);
    let bias = |g: f64| lap_at_zero(g * g) / nf + (1.0 - 1.0 / nf) * lap_at_zero(2.0 + g * g) - target;
    let asymptotic = (2f64.powf(df / 2.0 + sf + 2.0) / ((df + 2.0 * sf) * nf)).powf(1.0 / (df + 2.0 * sf + 2.0));
    // bias is decreasing in g, positive near zero and negative for large g
    let (mut lo, mut hi) = (asymptotic.ln() - 5.0, asymptotic.ln() + 5.0);
    if !(bias(lo.exp()) > 0.0 && bias(hi.exp()) < 0.0) {
        return asymptotic;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if bias(mid.exp()) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    (0.5 * (lo + hi)).exp()
}

/// Sample covariance and its inverse square root, rejecting rank-deficient samples.
fn whitening(data: &DataSet) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let cov = data.sample_covariance()?;
    let eig = SymmetricEigen::new(cov.clone());
    let top = eig.eigenvalues.max();
    if !(top > 0.0) || eig.eigenvalues.iter().any(|&l| !(l > 1e-12 * top)) {
        return Err(Error::DegenerateSample(
            "sample covariance is singular; the data lie on a lower-dimensional set".into(),
        ));
    }
    let v = &eig.eigenvectors;
    let w = v * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt())) * v.transpose();
    Ok((cov, (&w + w.transpose()) * 0.5))
}

/// Stage-one estimate of `Q_r` for the standardized data, computed with a
/// normal-scale pilot. Returns `None` when the estimate is not positive.
pub fn normal_scale_functional(data: &DataSet, r: usize) -> Result<Option<f64>> {
    data.require_rows(MIN_PILOT_SAMPLE)?;
    let (_, w) = whitening(data)?;
    let s = r + 2;
    let g = functional_pilot(s, data.dim(), data.n());
    let psi = functional_estimate(data, s, g, Some(&w))?;
    let q = if r.is_multiple_of(2) { psi } else { -psi };
    Ok((q > 0.0 && q.is_finite()).then_some(q))
}

/// Two-stage plug-in pilots `H_r = h_r^2 S` for `r = 0, 1, 2`.
pub fn pilot_bandwidths(data: &DataSet) -> Result<PilotBandwidths> {
    data.require_rows(MIN_PILOT_SAMPLE)?;
    let d = data.dim();
    let n = data.n() as f64;
    let (cov, w) = whitening(data)?;
    let make = |r: usize| -> Result<Bandwidth> {
        let s = r + 2;
        let g = functional_pilot(s, d, data.n());
        let psi = functional_estimate(data, s, g, Some(&w))?;
        let mut q = if r.is_multiple_of(2) { psi } else { -psi };
        if !(q > 0.0 && q.is_finite()) {
            q = normal_functional(r, d);
        }
        let exponent = (d + 2 * r + 4) as f64;
        let h2 = ((d + 2 * r) as f64 * variance_constant(r, d) / (n * q)).powf(2.0 / exponent);
        Bandwidth::new(&cov * h2, BandwidthClass::Full)
    };
    Ok(PilotBandwidths {
        h0: make(0)?,
        h1: make(1)?,
        h2: make(2)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density_models::MixtureDensity;
    use approx::assert_relative_eq;

    #[test]
    fn laplacian_polynomials() {
        // Lap exp(-|x|^2/2) = (|x|^2 - d) exp(-|x|^2/2)
        assert_eq!(laplacian_power_poly(1, 2), vec![-2.0, 1.0]);
        assert_eq!(laplacian_power_poly(1, 3), vec![-3.0, 1.0]);
        // d = 1: fourth derivative of exp(-x^2/2) is (x^4 - 6x^2 + 3) exp(-x^2/2)
        assert_eq!(laplacian_power_poly(2, 1), vec![3.0, -6.0, 1.0]);
    }

    #[test]
    fn laplacian_polynomial_matches_finite_differences() {
        let d = 2;
        let p1 = laplacian_power_poly(1, d);
        let p2 = laplacian_power_poly(2, d);
        let f1 = |x: f64, y: f64| {
            let rho = x * x + y * y;
            horner(&p1, rho) * (-0.5 * rho).exp()
        };
        let (x, y, h) = (0.4, -0.7, 1e-3);
        let lap = (f1(x + h, y) + f1(x - h, y) + f1(x, y + h) + f1(x, y - h) - 4.0 * f1(x, y)) / (h * h);
        let rho = x * x + y * y;
        assert!((lap - horner(&p2, rho) * (-0.5 * rho).exp()).abs() < 1e-5);
    }

    #[test]
    fn normal_reference_reproduces_the_normal_scale_rule() {
        for d in 1..4 {
            for r in 0..3 {
                let h = ((d + 2 * r) as f64 * variance_constant(r, d) / (100.0 * normal_functional(r, d)))
                    .powf(1.0 / (d + 2 * r + 4) as f64);
                let ns = (4.0 / ((d + 2 * r + 2) as f64 * 100.0)).powf(1.0 / (d + 2 * r + 4) as f64);
                assert_relative_eq!(h, ns, max_relative = 1e-14);
            }
        }
    }

    #[test]
    fn functional_pilot_approaches_the_amse_rule() {
        for s in 2..5 {
            let n = 1e12 as usize;
            let asymptotic = (2f64.powf(1.0 + s as f64 + 2.0) / ((2 + 2 * s) as f64 * n as f64))
                .powf(1.0 / (2 * s + 4) as f64);
            let g = functional_pilot(s, 2, n);
            assert!((g / asymptotic - 1.0).abs() < 0.02, "s = {s}: {g} vs {asymptotic}");
        }
    }

    #[test]
    fn functional_of_standard_normal_sample() {
        let data = MixtureDensity::standard_bivariate_normal().sample(5000, 12);
        for r in 0..3 {
            let s = r + 2;
            let g = functional_pilot(s, 2, data.n());
            let psi = functional_estimate(&data, s, g, None).unwrap();
            let q = if r % 2 == 0 { psi } else { -psi };
            let exact = normal_functional(r, 2);
            assert!((q / exact - 1.0).abs() < 0.15, "r = {r}: {q} vs {exact}");
        }
    }

    #[test]
    fn duplicated_sample_leaves_functional_unchanged() {
        let data = MixtureDensity::standard_bivariate_normal().sample(200, 4);
        let doubled = DataSet::new([data.as_slice(), data.as_slice()].concat(), 2).unwrap();
        for s in 2..5 {
            let a = functional_estimate(&data, s, 0.4, None).unwrap();
            let b = functional_estimate(&doubled, s, 0.4, None).unwrap();
            assert!(((a - b) / a).abs() < 1e-12);
        }
    }

    fn dyadic_sample(n: usize) -> DataSet {
        let raw = MixtureDensity::standard_bivariate_normal().sample(n, 31);
        DataSet::new(raw.as_slice().iter().map(|v| (v * 256.0).round() / 256.0).collect(), 2).unwrap()
    }

    #[test]
    fn translation_invariance() {
        let data = dyadic_sample(300);
        let shifted = data.affine(&DMatrix::identity(2, 2), &[64.0, -32.0]).unwrap();
        let a = pilot_bandwidths(&data).unwrap();
        let b = pilot_bandwidths(&shifted).unwrap();
        for r in 0..3 {
            assert_eq!(a.get(r).matrix(), b.get(r).matrix());
        }
        assert_eq!(normal_scale_functional(&data, 1).unwrap(), normal_scale_functional(&shifted, 1).unwrap());
    }

    #[test]
    fn affine_equivariance() {
        let data = MixtureDensity::sharp_mode().sample(400, 8);
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, -0.3, 1.2]);
        let mapped = data.affine(&a, &[1.0, -2.0]).unwrap();
        let p = pilot_bandwidths(&data).unwrap();
        let q = pilot_bandwidths(&mapped).unwrap();
        for r in 0..3 {
            let expected = &a * p.get(r).matrix() * a.transpose();
            let got = q.get(r).matrix();
            assert!((got - &expected).amax() <= 1e-9 * expected.amax());
        }
    }

    #[test]
    fn whitened_data_give_isotropic_pilots() {
        let raw = MixtureDensity::standard_bivariate_normal().sample(2000, 2);
        let (_, w) = whitening(&raw).unwrap();
        let data = raw.affine(&w, &[0.0, 0.0]).unwrap();
        let p = pilot_bandwidths(&data).unwrap();
        let ev = p.h0.eigenvalues();
        assert!((ev[0] - ev[1]).abs() < 1e-9 * ev.max());
    }

    #[test]
    fn pilots_shrink_at_the_expected_rates() {
        let model = MixtureDensity::standard_bivariate_normal();
        let ns = [500usize, 2000, 8000];
        let traces: Vec<[f64; 3]> = ns
            .iter()
            .map(|&n| {
                let p = pilot_bandwidths(&model.sample(n, n as u64)).unwrap();
                [p.h0.trace(), p.h1.trace(), p.h2.trace()]
            })
            .collect();
        for r in 0..3 {
            let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
            let ys: Vec<f64> = traces.iter().map(|t| t[r].ln()).collect();
            let mx = xs.iter().sum::<f64>() / 3.0;
            let my = ys.iter().sum::<f64>() / 3.0;
            let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
                / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
            let expected = -2.0 / (2 * r + 6) as f64;
            assert!((slope - expected).abs() < 0.08, "r = {r}: slope {slope}");
        }
        let t4 = pilot_bandwidths(&model.sample(2000, 77)).unwrap().h0.trace();
        let t1 = pilot_bandwidths(&model.sample(500, 78)).unwrap().h0.trace();
        assert!((t4 / t1 / 4f64.powf(-1.0 / 3.0) - 1.0).abs() < 0.1);
        for t in &traces {
            assert!(t[0] <= t[1] && t[1] <= t[2]);
        }
    }

    #[test]
    fn degenerate_samples_are_rejected() {
        let line: Vec<[f64; 2]> = (0..20).map(|k| [k as f64, 2.0 * k as f64]).collect();
        let data = DataSet::from_rows(&line).unwrap();
        assert!(matches!(pilot_bandwidths(&data), Err(Error::DegenerateSample(_))));
        let small = DataSet::from_rows(&[[0.0, 1.0], [1.0, 0.0], [2.0, 2.0]]).unwrap();
        assert!(pilot_bandwidths(&small).is_err());
    }
}
