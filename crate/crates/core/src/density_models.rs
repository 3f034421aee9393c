//! Gaussian mixtures with exact density, gradient, Hessian and sampler.
//!
//! Mixtures serve as known ground truth in simulations. They load from JSON of the
//! form `{"components":[{"weight":w,"mean":[..],"cov":[[..],[..]]}]}`.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::field::PlanarField;
use crate::kde::DataSet;

/// One weighted normal component as written in JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub components: Vec<ComponentSpec>,
}

#[derive(Clone, Debug)]
struct Component {
    weight: f64,
    mean: Vec<f64>,
    /// Row-major inverse covariance.
    precision: Vec<f64>,
    chol: DMatrix<f64>,
    /// `weight (2 pi)^{-d/2} |Sigma|^{-1/2}`
    scale: f64,
}

/// A validated Gaussian mixture.
#[derive(Clone, Debug)]
pub struct MixtureDensity {
    spec: MixtureSpec,
    components: Vec<Component>,
    d: usize,
}

const WEIGHT_TOL: f64 = 1e-12;

impl MixtureDensity {
    pub fn new(spec: MixtureSpec) -> Result<Self> {
        if spec.components.is_empty() {
            return Err(Error::InvalidModel("mixture has no components".into()));
        }
        let d = spec.components[0].mean.len();
        if d == 0 {
            return Err(Error::InvalidModel("component mean is empty".into()));
        }
        let mut total = 0.0;
        let mut components = Vec::with_capacity(spec.components.len());
        for (k, c) in spec.components.iter().enumerate() {
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::InvalidModel(format!("component {k} has non-positive weight")));
            }
            total += c.weight;
            if c.mean.len() != d || c.cov.len() != d || c.cov.iter().any(|r| r.len() != d) {
                return Err(Error::InvalidModel(format!("component {k} does not have dimension {d}")));
            }
            if c.mean.iter().chain(c.cov.iter().flatten()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidModel(format!("component {k} has a non-finite entry")));
            }
            let cov = DMatrix::from_fn(d, d, |r, s| c.cov[r][s]);
            let scale = cov.amax();
            for r in 0..d {
                for s in (r + 1)..d {
                    if (cov[(r, s)] - cov[(s, r)]).abs() > 1e-12 * scale {
                        return Err(Error::InvalidModel(format!("component {k} covariance is not symmetric")));
                    }
                }
            }
            let cov = (&cov + cov.transpose()) * 0.5;
            let chol = Cholesky::new(cov.clone())
                .ok_or_else(|| Error::InvalidModel(format!("component {k} covariance is singular")))?;
            let l = chol.l();
            let det: f64 = l.diagonal().iter().map(|v| v * v).product();
            if !(det > 0.0) {
                return Err(Error::InvalidModel(format!("component {k} covariance is singular")));
            }
            let inv = chol.inverse();
            let inv = (&inv + inv.transpose()) * 0.5;
            components.push(Component {
                weight: c.weight,
                mean: c.mean.clone(),
                precision: inv.transpose().as_slice().to_vec(),
                chol: l,
                scale: c.weight * (2.0 * PI).powf(-(d as f64) / 2.0) / det.sqrt(),
            });
        }
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::InvalidModel(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { spec, components, d })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: MixtureSpec = serde_json::from_str(text)
            .map_err(|e| Error::InvalidModel(format!("cannot parse mixture JSON: {e}")))?;
        Self::new(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.spec).expect("mixture spec serializes")
    }

    pub fn spec(&self) -> &MixtureSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Zero-mean normal with covariance `sigma^2 I` in dimension `d`.
    pub fn isotropic(sigma: f64, d: usize) -> Result<Self> {
        let cov = (0..d)
            .map(|r| (0..d).map(|c| if r == c { sigma * sigma } else { 0.0 }).collect())
            .collect();
        Self::new(MixtureSpec {
            components: vec![ComponentSpec {
                weight: 1.0,
                mean: vec![0.0; d],
                cov,
            }],
        })
    }

    pub fn standard_bivariate_normal() -> Self {
        Self::isotropic(1.0, 2).expect("valid model")
    }

    /// `2/3 N(0, diag(1/4, 1)) + 1/3 N(0, diag(1/4, 1) / 50)`
    pub fn sharp_mode() -> Self {
        let comp = |weight: f64, s: f64| ComponentSpec {
            weight,
            mean: vec![0.0, 0.0],
            cov: vec![vec![0.25 * s, 0.0], vec![0.0, s]],
        };
        Self::new(MixtureSpec {
            components: vec![comp(2.0 / 3.0, 1.0), comp(1.0 / 3.0, 1.0 / 50.0)],
        })
        .expect("valid model")
    }

    /// Looks up a built-in model by name (`normal` or `sharp-mode`).
    pub fn builtin(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().replace('_', "-").as_str() {
            "normal" | "standard-normal" | "bivariate-normal" => Ok(Self::standard_bivariate_normal()),
            "sharp-mode" | "sharp" => Ok(Self::sharp_mode()),
            other => Err(Error::InvalidModel(format!("unknown built-in model `{other}`"))),
        }
    }

    fn check(&self, x: &[f64]) {
        assert_eq!(x.len(), self.d, "point dimension does not match the model");
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        self.check(x);
        let mut u = vec![0.0; self.d];
        self.components
            .iter()
            .map(|c| {
                for k in 0..self.d {
                    u[k] = x[k] - c.mean[k];
                }
                c.scale * (-0.5 * quad(&c.precision, &u)).exp()
            })
            .sum()
    }

    /// `sum_k w_k phi_k(x) (-Sigma_k^{-1} (x - mu_k))`
    pub fn gradient(&self, x: &[f64]) -> DVector<f64> {
        self.check(x);
        let d = self.d;
        let mut g = DVector::zeros(d);
        let mut u = vec![0.0; d];
        for c in &self.components {
            for k in 0..d {
                u[k] = x[k] - c.mean[k];
            }
            let v = mat_vec(&c.precision, &u);
            let p = c.scale * (-0.5 * dot(&u, &v)).exp();
            for k in 0..d {
                g[k] -= p * v[k];
            }
        }
        g
    }

    /// `sum_k w_k phi_k(x) (v v' - Sigma_k^{-1})` with `v = Sigma_k^{-1}(x - mu_k)`.
    pub fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        self.check(x);
        let d = self.d;
        let mut h = DMatrix::zeros(d, d);
        let mut u = vec![0.0; d];
        for c in &self.components {
            for k in 0..d {
                u[k] = x[k] - c.mean[k];
            }
            let v = mat_vec(&c.precision, &u);
            let p = c.scale * (-0.5 * dot(&u, &v)).exp();
            for r in 0..d {
                for s in r..d {
                    h[(r, s)] += p * (v[r] * v[s] - c.precision[r * d + s]);
                }
            }
        }
        for r in 0..d {
            for s in 0..r {
                h[(r, s)] = h[(s, r)];
            }
        }
        h
    }

    /// `n` i.i.d. draws; the same seed always yields the same sample.
    pub fn sample(&self, n: usize, seed: u64) -> DataSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.d;
        let mut out = Vec::with_capacity(n * d);
        let mut z = vec![0.0; d];
        for _ in 0..n {
            let mut pick: f64 = rng.random();
            let mut comp = &self.components[self.components.len() - 1];
            for c in &self.components {
                if pick < c.weight {
                    comp = c;
                    break;
                }
                pick -= c.weight;
            }
            z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            for r in 0..d {
                let mut acc = comp.mean[r];
                for s in 0..=r {
                    acc += comp.chol[(r, s)] * z[s];
                }
                out.push(acc);
            }
        }
        DataSet::new(out, d).expect("finite draws")
    }

    /// Union over components of `mean +/- k * sd` per axis.
    pub fn bounding_box(&self, k: f64) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::INFINITY; self.d];
        let mut hi = vec![f64::NEG_INFINITY; self.d];
        for c in &self.spec.components {
            for a in 0..self.d {
                let sd = c.cov[a][a].sqrt();
                lo[a] = lo[a].min(c.mean[a] - k * sd);
                hi[a] = hi[a].max(c.mean[a] + k * sd);
            }
        }
        (lo, hi)
    }

    /// `Some(sigma)` when the model is a single zero-mean `N(0, sigma^2 I)`.
    pub fn spherical_sigma(&self) -> Option<f64> {
        if self.spec.components.len() != 1 {
            return None;
        }
        let c = &self.spec.components[0];
        let s2 = c.cov[0][0];
        let spherical = c.mean.iter().all(|&m| m == 0.0)
            && (0..self.d).all(|r| {
                (0..self.d).all(|s| {
                    let want = if r == s { s2 } else { 0.0 };
                    (c.cov[r][s] - want).abs() <= 1e-12 * s2
                })
            });
        spherical.then(|| s2.sqrt())
    }
}

impl PlanarField for MixtureDensity {
    fn value(&self, x: [f64; 2]) -> f64 {
        self.pdf(&x)
    }

    fn gradient(&self, x: [f64; 2]) -> Vector2<f64> {
        let g = MixtureDensity::gradient(self, &x);
        Vector2::new(g[0], g[1])
    }

    fn hessian(&self, x: [f64; 2]) -> Matrix2<f64> {
        let h = MixtureDensity::hessian(self, &x);
        Matrix2::new(h[(0, 0)], h[(0, 1)], h[(1, 0)], h[(1, 1)])
    }
}

/// Exact τ-level of `N(0, sigma^2 I)`: the density at the radius enclosing
/// probability `1 - tau`. In two dimensions this is `tau / (2 pi sigma^2)`.
pub fn spherical_tau_level(model: &MixtureDensity, tau: f64) -> Result<f64> {
    let sigma = model.spherical_sigma().ok_or(Error::NotSpherical)?;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidInput(format!("tau must lie in (0, 1), got {tau}")));
    }
    let d = model.dim() as f64;
    let peak = (2.0 * PI * sigma * sigma).powf(-d / 2.0);
    if model.dim() == 2 {
        return Ok(peak * tau);
    }
    let chi = ChiSquared::new(d).expect("positive degrees of freedom");
    let q = chi.inverse_cdf(1.0 - tau);
    Ok(peak * (-0.5 * q).exp())
}

fn quad(precision: &[f64], u: &[f64]) -> f64 {
    dot(u, &mat_vec(precision, u))
}

fn mat_vec(m: &[f64], u: &[f64]) -> Vec<f64> {
    let d = u.len();
    (0..d).map(|r| (0..d).map(|c| m[r * d + c] * u[c]).sum()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
