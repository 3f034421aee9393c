//! Unconstrained minimization over bandwidth classes.
//!
//! Bandwidths are mapped to free parameters (log scale for scalar and diagonal
//! classes, log-Cholesky for full matrices), so every parameter vector yields an
//! SPD matrix. The local search is a damped Newton method on finite-difference
//! derivatives with a Nelder-Mead fallback.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kde::{Bandwidth, BandwidthClass};

/// Bandwidth -> unconstrained parameters for a 2x2 matrix.
pub fn to_params(bandwidth: &Bandwidth, class: BandwidthClass) -> Result<Vec<f64>> {
    let h = bandwidth.conform(class)?.as_matrix2()?;
    Ok(match class {
        BandwidthClass::Scalar => vec![0.5 * h[(0, 0)].ln()],
        BandwidthClass::Diagonal => vec![0.5 * h[(0, 0)].ln(), 0.5 * h[(1, 1)].ln()],
        BandwidthClass::Full => {
            let l11 = h[(0, 0)].sqrt();
            let l21 = h[(1, 0)] / l11;
            let l22 = (h[(1, 1)] - l21 * l21).sqrt();
            vec![l11.ln(), l21, l22.ln()]
        }
    })
}

/// Unconstrained parameters -> 2x2 bandwidth of the given class.
pub fn from_params(params: &[f64], class: BandwidthClass) -> Result<Bandwidth> {
    if params.len() != class.n_params(2) {
        return Err(Error::DimensionError(format!(
            "{:?} class takes {} parameters, got {}",
            class,
            class.n_params(2),
            params.len()
        )));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidBandwidth("non-finite parameter".into()));
    }
    let m = match class {
        BandwidthClass::Scalar => {
            let h2 = (2.0 * params[0]).exp();
            DMatrix::from_row_slice(2, 2, &[h2, 0.0, 0.0, h2])
        }
        BandwidthClass::Diagonal => {
            DMatrix::from_row_slice(2, 2, &[(2.0 * params[0]).exp(), 0.0, 0.0, (2.0 * params[1]).exp()])
        }
        BandwidthClass::Full => {
            let l11 = params[0].exp();
            let l21 = params[1];
            let l22 = params[2].exp();
            let off = l11 * l21;
            DMatrix::from_row_slice(2, 2, &[l11 * l11, off, off, l21 * l21 + l22 * l22])
        }
    };
    Bandwidth::new(m, class)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Newton,
    NelderMead,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimOptions {
    pub method: Method,
    pub max_iter: usize,
    /// Relative tolerance on the objective.
    pub tol: f64,
    /// Central-difference step in parameter space.
    pub fd_step: f64,
    /// Initial simplex edge for Nelder-Mead.
    pub simplex_step: f64,
    /// Largest Newton step (max-norm) in parameter space.
    pub max_step: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            method: Method::Newton,
            max_iter: 100,
            tol: 1e-10,
            fd_step: 1e-4,
            simplex_step: 0.25,
            max_step: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Accepted iterates with their objective values, starting point first.
    pub trace: Vec<(Vec<f64>, f64)>,
    /// Whether Nelder-Mead took over from a failed Newton run.
    pub fell_back: bool,
}

fn eval(f: &dyn Fn(&[f64]) -> Option<f64>, x: &[f64]) -> f64 {
    match f(x) {
        Some(v) if v.is_finite() => v,
        _ => f64::INFINITY,
    }
}

/// Minimizes `f` from `x0`. `f` returns `None` where it is undefined.
pub fn minimize(f: &dyn Fn(&[f64]) -> Option<f64>, x0: &[f64], opts: &OptimOptions) -> OptimOutcome {
    match opts.method {
        Method::NelderMead => nelder_mead(f, x0, opts, Vec::new()),
        Method::Newton => {
            let newton_run = newton(f, x0, opts);
            if newton_run.converged {
                return newton_run;
            }
            let start = newton_run.x.clone();
            let mut nm = nelder_mead(f, &start, opts, newton_run.trace);
            nm.fell_back = true;
            nm.iterations += newton_run.iterations;
            nm
        }
    }
}

fn newton(f: &dyn Fn(&[f64]) -> Option<f64>, x0: &[f64], opts: &OptimOptions) -> OptimOutcome {
    let p = x0.len();
    let mut x = x0.to_vec();
    let mut fx = eval(f, &x);
    let mut trace = vec![(x.clone(), fx)];
    if !fx.is_finite() {
        return OptimOutcome {
            x,
            value: fx,
            converged: false,
            iterations: 0,
            trace,
            fell_back: false,
        };
    }
    let h = opts.fd_step;
    let shifted = |x: &[f64], moves: &[(usize, f64)]| {
        let mut y = x.to_vec();
        for &(k, d) in moves {
            y[k] += d;
        }
        eval(f, &y)
    };
    for iter in 1..=opts.max_iter {
        let mut grad = DVector::zeros(p);
        let mut hess = DMatrix::zeros(p, p);
        let mut plus = vec![0.0; p];
        let mut minus = vec![0.0; p];
        for k in 0..p {
            plus[k] = shifted(&x, &[(k, h)]);
            minus[k] = shifted(&x, &[(k, -h)]);
            grad[k] = (plus[k] - minus[k]) / (2.0 * h);
            hess[(k, k)] = (plus[k] - 2.0 * fx + minus[k]) / (h * h);
        }
        for a in 0..p {
            for b in (a + 1)..p {
                let v = (shifted(&x, &[(a, h), (b, h)]) - shifted(&x, &[(a, h), (b, -h)])
                    - shifted(&x, &[(a, -h), (b, h)])
                    + shifted(&x, &[(a, -h), (b, -h)]))
                    / (4.0 * h * h);
                hess[(a, b)] = v;
                hess[(b, a)] = v;
            }
        }
        if grad.iter().chain(hess.iter()).any(|v| !v.is_finite()) {
            break;
        }
        let grad_tol = opts.tol.sqrt() * fx.abs().max(f64::MIN_POSITIVE);
        if grad.amax() <= grad_tol {
            return OptimOutcome {
                x,
                value: fx,
                converged: true,
                iterations: iter,
                trace,
                fell_back: false,
            };
        }
        // Modified Newton: reflect negative curvature and floor tiny eigenvalues.
        let eig = SymmetricEigen::new(hess);
        let top = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
        let floor = 1e-8 * top;
        let inv = eig.eigenvalues.map(|l| 1.0 / l.abs().max(floor));
        let v = &eig.eigenvectors;
        let mut step = -(v * DMatrix::from_diagonal(&inv) * v.transpose() * &grad);
        let big = step.amax();
        if big > opts.max_step {
            step *= opts.max_step / big;
        }
        let slope = grad.dot(&step);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            let ft = eval(f, &trial);
            if ft <= fx + 1e-4 * t * slope {
                accepted = Some((trial, ft));
                break;
            }
            t *= 0.5;
        }
        let Some((next, fnext)) = accepted else {
            // no descent possible at FD resolution: a stationary point unless the
            // gradient is clearly nonzero
            let converged = grad.amax() <= 1e-3 * fx.abs();
            return OptimOutcome {
                x,
                value: fx,
                converged,
                iterations: iter,
                trace,
                fell_back: false,
            };
        };
        let moved = (t * step.amax()).abs();
        let gain = fx - fnext;
        x = next;
        fx = fnext;
        trace.push((x.clone(), fx));
        if moved < 1e-8 || gain <= opts.tol * fx.abs() {
            return OptimOutcome {
                x,
                value: fx,
                converged: true,
                iterations: iter,
                trace,
                fell_back: false,
            };
        }
    }
    OptimOutcome {
        x,
        value: fx,
        converged: false,
        iterations: opts.max_iter,
        trace,
        fell_back: false,
    }
}

fn nelder_mead(
    f: &dyn Fn(&[f64]) -> Option<f64>,
    x0: &[f64],
    opts: &OptimOptions,
    mut trace: Vec<(Vec<f64>, f64)>,
) -> OptimOutcome {
    let p = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(p + 1);
    simplex.push((x0.to_vec(), eval(f, x0)));
    for k in 0..p {
        let mut y = x0.to_vec();
        y[k] += opts.simplex_step;
        let fy = eval(f, &y);
        simplex.push((y, fy));
    }
    let order = |s: &mut Vec<(Vec<f64>, f64)>| {
        s.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| lex_cmp(&a.0, &b.0)));
    };
    order(&mut simplex);
    if trace.is_empty() {
        trace.push(simplex[0].clone());
    }
    let max_iter = opts.max_iter.max(200 * p);
    let mut converged = false;
    let mut iterations = 0;
    for iter in 1..=max_iter {
        iterations = iter;
        let best = simplex[0].1;
        let worst = simplex[p].1;
        let size = simplex[1..]
            .iter()
            .map(|(y, _)| y.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if best.is_finite() && (worst - best).abs() <= opts.tol * best.abs() && size < 1e-6 {
            converged = true;
            break;
        }
        let centroid: Vec<f64> = (0..p)
            .map(|k| simplex[..p].iter().map(|(y, _)| y[k]).sum::<f64>() / p as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[p].0)
                .map(|(c, w)| c + t * (w - c))
                .collect()
        };
        let xr = along(-1.0);
        let fr = eval(f, &xr);
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = eval(f, &xe);
            simplex[p] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[p - 1].1 {
            simplex[p] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[p].1 {
                let xc = along(-0.5);
                let fc = eval(f, &xc);
                (xc, fc)
            } else {
                let xc = along(0.5);
                let fc = eval(f, &xc);
                (xc, fc)
            };
            if fc < simplex[p].1.min(fr) {
                simplex[p] = (xc, fc);
            } else {
                let x_best = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    let y: Vec<f64> = v.0.iter().zip(&x_best).map(|(a, b)| b + 0.5 * (a - b)).collect();
                    let fy = eval(f, &y);
                    *v = (y, fy);
                }
            }
        }
        order(&mut simplex);
        if simplex[0].1 < trace.last().map_or(f64::INFINITY, |t| t.1) {
            trace.push(simplex[0].clone());
        }
    }
    let (x, value) = simplex.swap_remove(0);
    OptimOutcome {
        x,
        value,
        converged: converged && value.is_finite(),
        iterations,
        trace,
        fell_back: false,
    }
}

/// Lexicographic order on parameter vectors, used to break ties deterministically.
pub fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            other => return other,
        }
    }
    a.len().cmp(&b.len())
}
