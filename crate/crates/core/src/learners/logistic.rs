//! Penalized logistic regression on internally standardized features.
//!
//! Objective: mean log-loss + l2/2 |w|^2 + l1 |w|_1, intercept unpenalized.
//! Pure L2 uses damped Newton; any L1 term switches to accelerated proximal
//! gradient.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticOptions {
    pub l2: f64,
    pub l1: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            l1: 0.0,
            max_iter: 200,
            tol: 1e-8,
        }
    }
}

/// Fitted coefficients. `weights` act on standardized inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    pub intercept: f64,
    pub weights: Vec<f64>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Smooth part of the objective at `theta = [intercept, w...]`.
pub fn objective(theta: &[f64], x: &[Vec<f64>], y: &[f64], l2: f64) -> f64 {
    let n = y.len() as f64;
    let loss: f64 = x
        .iter()
        .zip(y)
        .map(|(r, &yi)| {
            let z = linear(theta, r);
            softplus(z) - yi * z
        })
        .sum::<f64>()
        / n;
    let pen: f64 = theta[1..].iter().map(|w| w * w).sum::<f64>() * l2 / 2.0;
    loss + pen
}

/// Analytic gradient of [`objective`].
pub fn gradient(theta: &[f64], x: &[Vec<f64>], y: &[f64], l2: f64) -> Vec<f64> {
    let n = y.len() as f64;
    let mut g = vec![0.0; theta.len()];
    for (r, &yi) in x.iter().zip(y) {
        let e = sigmoid(linear(theta, r)) - yi;
        g[0] += e;
        for (gj, xj) in g[1..].iter_mut().zip(r) {
            *gj += e * xj;
        }
    }
    for gj in &mut g {
        *gj /= n;
    }
    for (gj, w) in g[1..].iter_mut().zip(&theta[1..]) {
        *gj += l2 * w;
    }
    g
}

fn linear(theta: &[f64], r: &[f64]) -> f64 {
    theta[0] + theta[1..].iter().zip(r).map(|(w, x)| w * x).sum::<f64>()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn fit(rows: &[&[f64]], y: &[f64], opts: &LogisticOptions) -> Result<LogisticParams> {
    if rows.is_empty() {
        return Err(Error::EmptyCohort);
    }
    if opts.l2 < 0.0 || opts.l1 < 0.0 {
        return Err(Error::Argument("penalties must be non-negative".into()));
    }
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v / n;
        }
    }
    let mut scale = vec![0.0; d];
    for r in rows {
        for j in 0..d {
            scale[j] += (r[j] - mean[j]).powi(2) / n;
        }
    }
    for s in &mut scale {
        *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
    }
    let z: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| (0..d).map(|j| (r[j] - mean[j]) / scale[j]).collect())
        .collect();

    let (theta, converged, iterations) = if opts.l1 > 0.0 {
        proximal(&z, y, opts)
    } else {
        newton(&z, y, opts)
    };
    if !converged {
        log::warn!("logistic fit stopped after {iterations} iterations without converging");
    }
    Ok(LogisticParams {
        intercept: theta[0],
        weights: theta[1..].to_vec(),
        mean,
        scale,
        converged,
        iterations,
    })
}

fn newton(x: &[Vec<f64>], y: &[f64], opts: &LogisticOptions) -> (Vec<f64>, bool, usize) {
    let d = x[0].len() + 1;
    let n = y.len() as f64;
    let mut theta = vec![0.0; d];
    let mut f = objective(&theta, x, y, opts.l2);
    for it in 0..opts.max_iter {
        let g = gradient(&theta, x, y, opts.l2);
        if inf_norm(&g) < opts.tol {
            return (theta, true, it);
        }
        let mut h = DMatrix::<f64>::zeros(d, d);
        for r in x {
            let p = sigmoid(linear(&theta, r));
            let w = p * (1.0 - p) / n;
            let xt: Vec<f64> = std::iter::once(1.0).chain(r.iter().copied()).collect();
            for a in 0..d {
                let wa = w * xt[a];
                for b in a..d {
                    h[(a, b)] += wa * xt[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                h[(a, b)] = h[(b, a)];
            }
            if a > 0 {
                h[(a, a)] += opts.l2;
            }
        }
        let gv = DVector::from_vec(g.clone());
        let step = solve_pd(h, &gv);
        // backtracking on the objective
        let mut t = 1.0;
        let slope: f64 = -g.iter().zip(step.iter()).map(|(a, b)| a * b).sum::<f64>();
        loop {
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, s)| a - t * s).collect();
            let fc = objective(&cand, x, y, opts.l2);
            if fc <= f + 1e-4 * t * slope || t < 1e-10 {
                let moved = inf_norm(
                    &theta.iter().zip(&cand).map(|(a, b)| a - b).collect::<Vec<_>>(),
                );
                theta = cand;
                f = fc;
                if moved < 1e-15 {
                    let g = gradient(&theta, x, y, opts.l2);
                    return (theta, inf_norm(&g) < opts.tol.max(1e-6), it + 1);
                }
                break;
            }
            t /= 2.0;
        }
    }
    let g = gradient(&theta, x, y, opts.l2);
    (theta, inf_norm(&g) < opts.tol, opts.max_iter)
}

fn solve_pd(h: DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let mut ridge = 0.0;
    loop {
        let mut hh = h.clone();
        for a in 0..hh.nrows() {
            hh[(a, a)] += ridge;
        }
        if let Some(ch) = hh.cholesky() {
            return ch.solve(g);
        }
        ridge = if ridge == 0.0 { 1e-10 } else { ridge * 10.0 };
        if ridge > 1e6 {
            // falls back to a scaled gradient step
            return g.clone();
        }
    }
}

/// FISTA with backtracking on the smooth part.
fn proximal(x: &[Vec<f64>], y: &[f64], opts: &LogisticOptions) -> (Vec<f64>, bool, usize) {
    let d = x[0].len() + 1;
    let soft = |v: f64, t: f64| v.signum() * (v.abs() - t).max(0.0);
    let prox = |v: &[f64], step: f64| -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(j, &vj)| if j == 0 { vj } else { soft(vj, step * opts.l1) })
            .collect()
    };
    let mut theta = vec![0.0; d];
    let mut yk = theta.clone();
    let mut tk = 1.0f64;
    let mut step = 1.0f64;
    let iters = opts.max_iter.max(5000);
    for it in 0..iters {
        let g = gradient(&yk, x, y, opts.l2);
        let fy = objective(&yk, x, y, opts.l2);
        let next = loop {
            let cand = prox(
                &yk.iter().zip(&g).map(|(a, b)| a - step * b).collect::<Vec<_>>(),
                step,
            );
            let diff: Vec<f64> = cand.iter().zip(&yk).map(|(a, b)| a - b).collect();
            let quad = fy
                + g.iter().zip(&diff).map(|(a, b)| a * b).sum::<f64>()
                + diff.iter().map(|v| v * v).sum::<f64>() / (2.0 * step);
            if objective(&cand, x, y, opts.l2) <= quad + 1e-15 || step < 1e-12 {
                break cand;
            }
            step /= 2.0;
        };
        // prox-gradient mapping at the new point measures stationarity
        let gn = gradient(&next, x, y, opts.l2);
        let mapped = prox(
            &next.iter().zip(&gn).map(|(a, b)| a - step * b).collect::<Vec<_>>(),
            step,
        );
        let resid = inf_norm(&mapped.iter().zip(&next).map(|(a, b)| (a - b) / step).collect::<Vec<_>>());
        let t_next = (1.0 + (1.0 + 4.0 * tk * tk).sqrt()) / 2.0;
        let mom = (tk - 1.0) / t_next;
        yk = next.iter().zip(&theta).map(|(a, b)| a + mom * (a - b)).collect();
        theta = next;
        tk = t_next;
        if resid < opts.tol.max(1e-7) {
            return (theta, true, it + 1);
        }
    }
    (theta, false, iters)
}

impl LogisticParams {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let z = self.intercept
            + self
                .weights
                .iter()
                .zip(row)
                .zip(self.mean.iter().zip(&self.scale))
                .map(|((w, x), (m, s))| w * (x - m) / s)
                .sum::<f64>();
        sigmoid(z)
    }

    pub fn importance(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w.abs()).collect()
    }
}
