//! Frequentist comparators: LASSO by coordinate descent and L1-penalized
//! quantile regression by smoothing continuation, with K-fold cross-validation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::rng;

const LASSO_TOL: f64 = 1e-10;
const LASSO_MAX_SWEEPS: usize = 10_000;
const SMOOTH_START: f64 = 0.1;
const SMOOTH_END: f64 = 1e-6;
const FISTA_MAX_ITER: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    pub beta: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub kkt_residual: f64,
    pub sweeps: usize,
}

impl LassoFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + x.iter().zip(&self.beta).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn support(&self) -> Vec<usize> {
        support(&self.beta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileFit {
    pub beta: Vec<f64>,
    pub intercept: f64,
    pub tau: f64,
    pub lambda: f64,
    /// Huberization width of the last continuation stage.
    pub smoothing: f64,
    /// Unsmoothed penalized pinball objective at the solution.
    pub objective: f64,
}

impl QuantileFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + x.iter().zip(&self.beta).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn support(&self) -> Vec<usize> {
        support(&self.beta)
    }
}

fn support(beta: &[f64]) -> Vec<usize> {
    (0..beta.len()).filter(|&j| beta[j] != 0.0).collect()
}

#[inline]
fn soft(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Column-major copy of the covariates of `data`.
fn columns(data: &Dataset) -> Vec<Vec<f64>> {
    (0..data.p())
        .map(|j| (0..data.n()).map(|i| data.x(i, j)).collect())
        .collect()
}

fn lasso_objective(r: &[f64], beta: &[f64], lambda: f64) -> f64 {
    let n = r.len() as f64;
    r.iter().map(|v| v * v).sum::<f64>() / (2.0 * n) + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
}

/// Minimizes `(1/2n) |y - b0 - X beta|^2 + lambda |beta|_1` with an
/// unpenalized intercept.
pub fn lasso_fit(data: &Dataset, lambda: f64) -> Result<LassoFit> {
    lasso_fit_warm(data, lambda, None)
}

pub fn lasso_fit_warm(data: &Dataset, lambda: f64, warm: Option<&[f64]>) -> Result<LassoFit> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Domain(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let n = data.n();
    let p = data.p();
    let nf = n as f64;
    let mut cols = columns(data);
    let means: Vec<f64> = cols.iter().map(|c| c.iter().sum::<f64>() / nf).collect();
    for (c, m) in cols.iter_mut().zip(&means) {
        c.iter_mut().for_each(|v| *v -= m);
    }
    let ybar = data.y().iter().sum::<f64>() / nf;
    let scale: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>() / nf).collect();

    let mut beta = warm.map_or_else(|| vec![0.0; p], <[f64]>::to_vec);
    let mut r: Vec<f64> = data.y().iter().map(|y| y - ybar).collect();
    for j in 0..p {
        if beta[j] != 0.0 {
            for i in 0..n {
                r[i] -= cols[j][i] * beta[j];
            }
        }
    }
    let mut obj = lasso_objective(&r, &beta, lambda);
    let mut sweeps = 0;
    loop {
        sweeps += 1;
        let mut max_change = 0.0_f64;
        for j in 0..p {
            if scale[j] == 0.0 {
                beta[j] = 0.0;
                continue;
            }
            let c = &cols[j];
            let rho = c.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / nf + scale[j] * beta[j];
            let new = soft(rho, lambda) / scale[j];
            let delta = new - beta[j];
            if delta != 0.0 {
                for i in 0..n {
                    r[i] -= c[i] * delta;
                }
                beta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        let new_obj = lasso_objective(&r, &beta, lambda);
        debug_assert!(
            new_obj <= obj * (1.0 + 1e-12) + 1e-15,
            "coordinate descent increased the objective"
        );
        obj = new_obj;
        if max_change < LASSO_TOL {
            break;
        }
        if sweeps >= LASSO_MAX_SWEEPS {
            return Err(Error::NoConvergence {
                solver: "lasso",
                iterations: sweeps,
                gap: max_change,
            });
        }
    }
    let kkt_residual = lasso_kkt(&cols, &r, &beta, lambda);
    let intercept = ybar - means.iter().zip(&beta).map(|(m, b)| m * b).sum::<f64>();
    Ok(LassoFit {
        beta,
        intercept,
        lambda,
        kkt_residual,
        sweeps,
    })
}

fn lasso_kkt(cols: &[Vec<f64>], r: &[f64], beta: &[f64], lambda: f64) -> f64 {
    let n = r.len() as f64;
    cols.iter()
        .zip(beta)
        .map(|(c, &b)| {
            let g = c.iter().zip(r).map(|(a, v)| a * v).sum::<f64>() / n;
            if b != 0.0 {
                (g - lambda * b.signum()).abs()
            } else {
                (g.abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Largest subgradient of the loss at `beta = 0`: every larger `lambda` gives
/// the null model.
pub fn lasso_lambda_max(data: &Dataset) -> f64 {
    let n = data.n() as f64;
    let ybar = data.y().iter().sum::<f64>() / n;
    columns(data)
        .iter()
        .map(|c| {
            let m = c.iter().sum::<f64>() / n;
            (c.iter().zip(data.y()).map(|(x, y)| (x - m) * (y - ybar)).sum::<f64>() / n).abs()
        })
        .fold(0.0, f64::max)
}

// ----- quantile regression ------------------------------------------------------

#[inline]
pub fn pinball(r: f64, tau: f64) -> f64 {
    if r >= 0.0 {
        tau * r
    } else {
        (tau - 1.0) * r
    }
}

/// Huberized pinball loss of width `h`: `H_h(r)/2 + (tau - 1/2) r`, where `H_h`
/// is the Huber function. It lies below the pinball loss by at most `h/4`.
#[inline]
fn pinball_smooth(r: f64, tau: f64, h: f64) -> f64 {
    let a = r.abs();
    let hub = if a <= h { r * r / (2.0 * h) } else { a - h / 2.0 };
    0.5 * hub + (tau - 0.5) * r
}

#[inline]
fn pinball_smooth_grad(r: f64, tau: f64, h: f64) -> f64 {
    0.5 * (r / h).clamp(-1.0, 1.0) + (tau - 0.5)
}

/// `(1/n) sum pinball(y - b0 - x'beta) + lambda |beta|_1`.
pub fn quantile_objective(data: &Dataset, tau: f64, lambda: f64, intercept: f64, beta: &[f64]) -> f64 {
    let n = data.n();
    let loss: f64 = (0..n)
        .map(|i| {
            let m = intercept + data.row(i).iter().zip(beta).map(|(a, b)| a * b).sum::<f64>();
            pinball(data.y()[i] - m, tau)
        })
        .sum::<f64>()
        / n as f64;
    loss + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
}

/// `tau`-quantile (lower order statistic) used as the null-model intercept.
fn sample_quantile(y: &[f64], tau: f64) -> f64 {
    let mut v = y.to_vec();
    v.sort_by(f64::total_cmp);
    let k = ((tau * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[k - 1]
}

struct QuantileProblem<'a> {
    data: &'a Dataset,
    tau: f64,
    lambda: f64,
    /// Squared spectral norm of `[1 X]`.
    norm2: f64,
}

impl QuantileProblem<'_> {
    fn residuals(&self, w: &[f64], out: &mut [f64]) {
        let p = self.data.p();
        for (i, o) in out.iter_mut().enumerate() {
            let row = self.data.row(i);
            let mut m = w[0];
            for j in 0..p {
                m += row[j] * w[j + 1];
            }
            *o = self.data.y()[i] - m;
        }
    }

    fn smooth_value(&self, r: &[f64], h: f64) -> f64 {
        r.iter().map(|&v| pinball_smooth(v, self.tau, h)).sum::<f64>() / r.len() as f64
    }

    fn grad(&self, r: &[f64], h: f64, g: &mut [f64]) {
        let n = r.len() as f64;
        g.iter_mut().for_each(|v| *v = 0.0);
        for (i, &ri) in r.iter().enumerate() {
            let s = -pinball_smooth_grad(ri, self.tau, h) / n;
            g[0] += s;
            for (gj, xj) in g[1..].iter_mut().zip(self.data.row(i)) {
                *gj += s * xj;
            }
        }
    }

    fn prox(&self, v: &mut [f64], step: f64) {
        for x in v[1..].iter_mut() {
            *x = soft(*x, step * self.lambda);
        }
    }

    /// Accelerated proximal gradient with adaptive restart on the width-`h`
    /// problem, started from `w`.
    fn solve_stage(&self, w: &mut Vec<f64>, h: f64) -> (bool, usize) {
        let n = self.data.n();
        let d = w.len();
        let step = 2.0 * h * n as f64 / self.norm2;
        let mut y = w.clone();
        let mut t = 1.0_f64;
        let mut r = vec![0.0; n];
        let mut g = vec![0.0; d];
        let mut next = vec![0.0; d];
        for it in 1..=FISTA_MAX_ITER {
            self.residuals(&y, &mut r);
            self.grad(&r, h, &mut g);
            for k in 0..d {
                next[k] = y[k] - step * g[k];
            }
            self.prox(&mut next, step);
            let mut diff = 0.0_f64;
            let mut size = 0.0_f64;
            let mut restart = 0.0;
            for k in 0..d {
                diff = diff.max((next[k] - w[k]).abs());
                size = size.max(next[k].abs());
                restart += (y[k] - next[k]) * (next[k] - w[k]);
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            if restart > 0.0 {
                t = 1.0;
                y.copy_from_slice(&next);
            } else {
                let mom = (t - 1.0) / t_next;
                for k in 0..d {
                    y[k] = next[k] + mom * (next[k] - w[k]);
                }
                t = t_next;
            }
            std::mem::swap(w, &mut next);
            if diff <= 1e-13 * (1.0 + size) {
                return (true, it);
            }
        }
        (false, FISTA_MAX_ITER)
    }
}

fn spectral_norm2(data: &Dataset) -> f64 {
    // Power iteration on [1 X]'[1 X].
    let n = data.n();
    let d = data.p() + 1;
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let mut u = vec![0.0; n];
        for i in 0..n {
            u[i] = v[0] + data.row(i).iter().zip(&v[1..]).map(|(a, b)| a * b).sum::<f64>();
        }
        let mut w = vec![0.0; d];
        for i in 0..n {
            w[0] += u[i];
            for (wj, xj) in w[1..].iter_mut().zip(data.row(i)) {
                *wj += u[i] * xj;
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 1.0;
        }
        let new = norm;
        v = w.into_iter().map(|x| x / norm).collect();
        if (new - lambda).abs() <= 1e-10 * new {
            lambda = new;
            break;
        }
        lambda = new;
    }
    // Small inflation keeps the step safely below 1/L.
    lambda * 1.01
}

/// Minimizes `(1/n) sum pinball_tau(y - b0 - x'beta) + lambda |beta|_1`.
pub fn quantile_lasso_fit(data: &Dataset, tau: f64, lambda: f64) -> Result<QuantileFit> {
    quantile_lasso_fit_warm(data, tau, lambda, None)
}

pub fn quantile_lasso_fit_warm(
    data: &Dataset,
    tau: f64,
    lambda: f64,
    warm: Option<(f64, &[f64])>,
) -> Result<QuantileFit> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Domain(format!("tau must lie in (0, 1), got {tau}")));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Domain(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let prob = QuantileProblem {
        data,
        tau,
        lambda,
        norm2: spectral_norm2(data),
    };
    let mut w = match warm {
        Some((b0, beta)) => std::iter::once(b0).chain(beta.iter().copied()).collect(),
        None => {
            let mut w = vec![0.0; data.p() + 1];
            w[0] = sample_quantile(data.y(), tau);
            w
        }
    };
    let mut h = SMOOTH_START;
    let mut iterations = 0;
    loop {
        let (ok, its) = prob.solve_stage(&mut w, h);
        iterations += its;
        let last = h <= SMOOTH_END;
        if last && !ok {
            let mut r = vec![0.0; data.n()];
            prob.residuals(&w, &mut r);
            return Err(Error::NoConvergence {
                solver: "quantile lasso",
                iterations,
                gap: prob.smooth_value(&r, h),
            });
        }
        if last {
            break;
        }
        h /= 2.0;
    }
    let beta = w[1..].to_vec();
    Ok(QuantileFit {
        objective: quantile_objective(data, tau, lambda, w[0], &beta),
        intercept: w[0],
        beta,
        tau,
        lambda,
        smoothing: h,
    })
}

/// Smallest `lambda` at which the zero-coefficient fit is optimal.
pub fn quantile_lambda_max(data: &Dataset, tau: f64) -> f64 {
    let q = sample_quantile(data.y(), tau);
    let n = data.n() as f64;
    (0..data.p())
        .map(|j| {
            let s: f64 = (0..data.n())
                .map(|i| {
                    let r = data.y()[i] - q;
                    let psi = if r > 0.0 {
                        tau
                    } else if r < 0.0 {
                        tau - 1.0
                    } else {
                        0.0
                    };
                    psi * data.x(i, j)
                })
                .sum();
            (s / n).abs()
        })
        .fold(0.0, f64::max)
}

// ----- cross-validation ------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CvMethod {
    Lasso,
    Quantile { tau: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub lambda: f64,
    /// `(lambda, mean held-out loss)` in grid order.
    pub path: Vec<(f64, f64)>,
}

/// `size` log-spaced values from the null-model threshold down to `ratio` of it.
pub fn default_grid(data: &Dataset, method: CvMethod, size: usize, ratio: f64) -> Vec<f64> {
    let top = match method {
        CvMethod::Lasso => lasso_lambda_max(data),
        CvMethod::Quantile { tau } => quantile_lambda_max(data, tau),
    }
    .max(1e-12);
    if size == 1 {
        return vec![top];
    }
    (0..size)
        .map(|k| top * ratio.powf(k as f64 / (size - 1) as f64))
        .collect()
}

/// Deterministic fold label for every row.
pub fn fold_labels(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::seeded(seed));
    let mut labels = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        labels[i] = pos % folds;
    }
    labels
}

/// K-fold cross-validation over `grid`. Returns the minimizing `lambda`;
/// exact ties go to the larger `lambda`.
pub fn cv_select(
    data: &Dataset,
    method: CvMethod,
    folds: usize,
    grid: &[f64],
    seed: u64,
) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(Error::Invalid("lambda grid is empty".into()));
    }
    if folds < 2 || data.n() < folds {
        return Err(Error::Invalid(format!(
            "need 2 <= folds <= n, got folds = {folds}, n = {}",
            data.n()
        )));
    }
    // Solve from the sparsest end so warm starts follow the path.
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]));
    let labels = fold_labels(data.n(), folds, seed);
    let mut loss = vec![0.0; grid.len()];
    for k in 0..folds {
        let train: Vec<usize> = (0..data.n()).filter(|&i| labels[i] != k).collect();
        let test: Vec<usize> = (0..data.n()).filter(|&i| labels[i] == k).collect();
        let tr = data.subset(&train)?;
        let mut warm: Option<(f64, Vec<f64>)> = None;
        for &g in &order {
            let lambda = grid[g];
            let (b0, beta) = match method {
                CvMethod::Lasso => {
                    let f = lasso_fit_warm(&tr, lambda, warm.as_ref().map(|w| w.1.as_slice()))?;
                    (f.intercept, f.beta)
                }
                CvMethod::Quantile { tau } => {
                    let f = quantile_lasso_fit_warm(
                        &tr,
                        tau,
                        lambda,
                        warm.as_ref().map(|w| (w.0, w.1.as_slice())),
                    )?;
                    (f.intercept, f.beta)
                }
            };
            let l: f64 = test
                .iter()
                .map(|&i| {
                    let m = b0 + data.row(i).iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>();
                    let r = data.y()[i] - m;
                    match method {
                        CvMethod::Lasso => r * r,
                        CvMethod::Quantile { tau } => pinball(r, tau),
                    }
                })
                .sum();
            loss[g] += l;
            warm = Some((b0, beta));
        }
    }
    let n = data.n() as f64;
    let path: Vec<(f64, f64)> = grid.iter().zip(&loss).map(|(&l, &v)| (l, v / n)).collect();
    let mut best = 0;
    for g in 1..path.len() {
        let (lb, vb) = path[best];
        let (lg, vg) = path[g];
        if vg < vb || (vg == vb && lg > lb) {
            best = g;
        }
    }
    Ok(CvResult {
        lambda: path[best].0,
        path,
    })
}
