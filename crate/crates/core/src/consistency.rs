//! Numerical laboratory for selection consistency on the contrast design.
//!
//! The design has an alternating first column and `p - 1` columns of ones, so
//! it has only two distinct rows. Marginal likelihoods integrate `sigma^2`
//! analytically and the transformed coefficients `t_j = g_eta(beta_j)` by
//! nested adaptive quadrature.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;
use statrs::function::gamma::ln_gamma;

use crate::dist::{ln_normal_pdf, log_sum_exp, std_normal, LN_2PI};
use crate::error::{Error, Result};
use crate::metrics::fmt_f64;
use crate::model::{Dataset, PriorHyper};
use crate::quad;
use crate::rng::{seeded, stream};
use crate::transform::{log_jacobian, Eta};

#[cfg(test)]
mod tests;

/// `n x p` design: column 0 is `(1, -1, 1, -1, ...)`, the rest are ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AltDesign {
    n: usize,
    p: usize,
}

impl AltDesign {
    pub fn new(n: usize, p: usize) -> Result<Self> {
        if n < 2 || n % 2 != 0 {
            return Err(Error::Invalid(format!("n must be even and at least 2, got {n}")));
        }
        let cap = Self::max_p(n);
        if p < 1 || p > cap {
            return Err(Error::Invalid(format!("p must be in [1, {cap}] for n = {n}, got {p}")));
        }
        Ok(AltDesign { n, p })
    }

    /// Largest admissible `p`, `floor(n / ln 4)`.
    pub fn max_p(n: usize) -> usize {
        (n as f64 / 4f64.ln()).floor() as usize
    }

    pub fn with_max_p(n: usize) -> Result<Self> {
        Self::new(n, Self::max_p(n))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Row-major design matrix.
    pub fn x(&self) -> Vec<f64> {
        let mut x = vec![1.0; self.n * self.p];
        for i in (1..self.n).step_by(2) {
            x[i * self.p] = -1.0;
        }
        x
    }

    pub fn dataset(&self, y: Vec<f64>) -> Result<Dataset> {
        Dataset::from_row_major(self.n, self.p, self.x(), y)
    }

    /// Draws `g(y_i) = g(x_i' beta0) + sigma0 e_i` with `beta0 = (beta01, 0, ..., 0)`.
    pub fn simulate<R: Rng + ?Sized>(
        &self,
        beta01: f64,
        eta: Eta,
        sigma0: f64,
        rng: &mut R,
    ) -> Result<Dataset> {
        if !(sigma0 > 0.0 && sigma0.is_finite() && beta01.is_finite()) {
            return Err(Error::Domain(format!("beta01 = {beta01}, sigma0 = {sigma0}")));
        }
        let mut y = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let mean = eta.forward(if i % 2 == 0 { beta01 } else { -beta01 });
            let mut draw = 0.0;
            for _ in 0..100 {
                draw = eta.inverse(mean + sigma0 * std_normal(rng));
                if draw != 0.0 {
                    break;
                }
            }
            if draw == 0.0 || !draw.is_finite() {
                return Err(Error::NonFinite { what: "simulated response", index: i });
            }
            y.push(draw);
        }
        self.dataset(y)
    }
}

/// Density used for the transformed coefficients inside the marginal likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SlabKernel {
    /// `t_j ~ N(0, sigma_beta2)`, the model's own slab.
    #[default]
    Gaussian,
    /// The constant `1 / sqrt(2 pi sigma_beta2)`: drops the slab's exponential
    /// factor, which is what makes the single-column cases integrate in closed form.
    Flat,
}

/// `sigma^2 ~ IG(a, b)` and a fixed slab variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabPrior {
    pub a: f64,
    pub b: f64,
    pub sigma_beta2: f64,
    pub kernel: SlabKernel,
}

impl LabPrior {
    /// Takes `a`, `b` from `hyper` and fixes `sigma_beta2` at its hyperprior mean
    /// (mode when the mean does not exist).
    pub fn from_hyper(hyper: &PriorHyper) -> Self {
        let sigma_beta2 = if hyper.sb_a > 1.0 {
            hyper.sb_b / (hyper.sb_a - 1.0)
        } else {
            hyper.sb_b / (hyper.sb_a + 1.0)
        };
        LabPrior { a: hyper.a, b: hyper.b, sigma_beta2, kernel: SlabKernel::Gaussian }
    }

    pub fn with_kernel(mut self, kernel: SlabKernel) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("a", self.a), ("b", self.b), ("sigma_beta2", self.sigma_beta2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }

    fn log_kernel(&self, t: f64) -> f64 {
        match self.kernel {
            SlabKernel::Gaussian => ln_normal_pdf(t, 0.0, self.sigma_beta2),
            SlabKernel::Flat => -0.5 * (LN_2PI + self.sigma_beta2.ln()),
        }
    }
}

impl Default for LabPrior {
    fn default() -> Self {
        Self::from_hyper(&PriorHyper::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadOptions {
    /// Relative tolerance for every one-dimensional integral.
    pub rel_tol: f64,
    /// Largest acceptable error estimate on `log m_S`.
    pub max_log_error: f64,
    /// Grid points used to locate the mode before integrating.
    pub grid: usize,
    pub max_panels: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        QuadOptions { rel_tol: 1e-10, max_log_error: 1e-4, grid: 96, max_panels: 400 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogMarginal {
    pub log_m: f64,
    pub log_error: f64,
    pub evaluations: usize,
}

/// Rows sharing the same covariates on the support, summarised by count,
/// mean of `z` and the within-group sum of squares.
#[derive(Debug, Clone)]
struct RowGroup {
    x: Vec<f64>,
    count: f64,
    mean: f64,
    ss: f64,
}

fn row_groups(z: &[f64], data: &Dataset, cols: &[usize]) -> Vec<RowGroup> {
    let mut index: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
    let mut members: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for (i, &zi) in z.iter().enumerate() {
        let x: Vec<f64> = cols.iter().map(|&j| data.x(i, j)).collect();
        let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        let g = *index.entry(key).or_insert_with(|| {
            members.push((x, Vec::new()));
            members.len() - 1
        });
        members[g].1.push(zi);
    }
    members
        .into_iter()
        .map(|(x, zs)| {
            let count = zs.len() as f64;
            let mean = zs.iter().sum::<f64>() / count;
            let ss = zs.iter().map(|v| (v - mean).powi(2)).sum();
            RowGroup { x, count, mean, ss }
        })
        .collect()
}

/// Everything about one dataset that does not depend on the support.
struct Prepared {
    z: Vec<f64>,
    eta: Eta,
    nu: f64,
    /// `ln C_n(Y)`: Gaussian constants, the response Jacobian and the `IG(a, b)` normaliser.
    log_cn: f64,
    prior: LabPrior,
}

impl Prepared {
    fn new(data: &Dataset, eta: Eta, prior: &LabPrior) -> Result<Self> {
        prior.validate()?;
        let n = data.n() as f64;
        let log_jac = log_jacobian(data.y(), eta)?;
        let z: Vec<f64> = data.y().iter().map(|&y| eta.forward(y)).collect();
        let log_cn = -0.5 * n * LN_2PI + log_jac + prior.a * prior.b.ln() - ln_gamma(prior.a);
        Ok(Prepared { z, eta, nu: 0.5 * n + prior.a, log_cn, prior: *prior })
    }
}

struct Evidence<'a> {
    prep: &'a Prepared,
    groups: Vec<RowGroup>,
    k: usize,
    half_width: f64,
}

impl<'a> Evidence<'a> {
    fn new(prep: &'a Prepared, data: &Dataset, support: &[usize]) -> Result<Self> {
        check_support(support, data.p())?;
        let groups = row_groups(&prep.z, data, support);
        let zmax = prep.z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let k = support.len();
        let half_width = (k.max(1) as f64) * (zmax + 2.0 / prep.eta.get())
            + 1.0
            + 3.0 * prep.prior.sigma_beta2.sqrt();
        Ok(Evidence { prep, groups, k, half_width })
    }

    /// `ln` of the integrand after `sigma^2` has been integrated out, without
    /// the constant `ln C_n + ln Gamma(nu)`.
    fn log_integrand(&self, t: &[f64]) -> f64 {
        let eta = self.prep.eta;
        let mut beta = [0.0; 2];
        for (b, &tj) in beta.iter_mut().zip(t) {
            *b = eta.inverse(tj);
        }
        let mut r = 0.0;
        for g in &self.groups {
            let lin: f64 = g.x.iter().zip(&beta).map(|(x, b)| x * b).sum();
            r += g.ss + g.count * (g.mean - eta.forward(lin)).powi(2);
        }
        let kern: f64 = t.iter().map(|&tj| self.prep.prior.log_kernel(tj)).sum();
        -self.prep.nu * (0.5 * r + self.prep.prior.b).ln() + kern
    }

    fn log_constant(&self) -> f64 {
        self.prep.log_cn + ln_gamma(self.prep.nu)
    }

    fn integrate(&self, opts: &QuadOptions) -> Result<LogMarginal> {
        let kink = self.prep.eta.at_zero();
        let evals = Cell::new(0usize);
        let out = match self.k {
            0 => {
                evals.set(1);
                LineResult { log_value: self.log_integrand(&[]), rel_err: 0.0 }
            }
            1 => integrate_line(
                |t| {
                    evals.set(evals.get() + 1);
                    self.log_integrand(&[t])
                },
                kink,
                self.half_width,
                opts,
            ),
            2 => {
                let worst_inner = Cell::new(0.0f64);
                let outer = integrate_line(
                    |t1| {
                        let inner = integrate_line(
                            |t2| {
                                evals.set(evals.get() + 1);
                                self.log_integrand(&[t1, t2])
                            },
                            kink,
                            self.half_width,
                            opts,
                        );
                        if inner.log_value > f64::NEG_INFINITY {
                            worst_inner.set(worst_inner.get().max(inner.rel_err));
                        }
                        inner.log_value
                    },
                    kink,
                    self.half_width,
                    opts,
                );
                LineResult { log_value: outer.log_value, rel_err: outer.rel_err + worst_inner.get() }
            }
            k => {
                return Err(Error::Invalid(format!(
                    "quadrature handles supports of size at most 2, got {k}"
                )))
            }
        };
        // ln(I (1 + e)) - ln I = ln(1 + e)
        let log_error = out.rel_err.ln_1p();
        if !(log_error <= opts.max_log_error) || !out.log_value.is_finite() {
            return Err(Error::Quadrature { achieved: log_error, wanted: opts.max_log_error });
        }
        Ok(LogMarginal {
            log_m: self.log_constant() + out.log_value,
            log_error,
            evaluations: evals.get(),
        })
    }
}

fn check_support(support: &[usize], p: usize) -> Result<()> {
    for (i, &j) in support.iter().enumerate() {
        if j >= p {
            return Err(Error::Dimension(format!("support index {j} out of range for p = {p}")));
        }
        if support[..i].contains(&j) {
            return Err(Error::Invalid(format!("support index {j} repeated")));
        }
    }
    Ok(())
}

struct LineResult {
    log_value: f64,
    rel_err: f64,
}

fn golden_max<F: FnMut(f64) -> f64>(f: &mut F, mut a: f64, mut b: f64) -> (f64, f64) {
    const R: f64 = 0.618_033_988_749_894_8;
    let mut c = b - R * (b - a);
    let mut d = a + R * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..80 {
        if (b - a).abs() <= 1e-13 * (1.0 + a.abs().max(b.abs())) {
            break;
        }
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - R * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + R * (b - a);
            fd = f(d);
        }
    }
    if fc >= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Distance from the mode at which the log integrand has dropped by 4.
fn drop_width<F: FnMut(f64) -> f64>(f: &mut F, mode: f64, fmax: f64, dir: f64) -> f64 {
    let mut d = 1e-3 * (1.0 + mode.abs());
    if f(mode + dir * d) < fmax - 4.0 {
        while d > 1e-14 && f(mode + dir * d * 0.5) < fmax - 4.0 {
            d *= 0.5;
        }
    } else {
        for _ in 0..200 {
            d *= 2.0;
            if f(mode + dir * d) < fmax - 4.0 {
                break;
            }
        }
    }
    d
}

/// `ln` of the integral over the real line of `exp(logf)`.
///
/// The mode is found on a grid over `[-half_width, half_width]` (widened if it
/// lands on the edge) and the line is mapped onto `(-1, 1)` around it with
/// `t = mode + s u / (1 - u^2)`, using separate scales on each side.
fn integrate_line<F: FnMut(f64) -> f64>(
    mut logf: F,
    kink: f64,
    half_width: f64,
    opts: &QuadOptions,
) -> LineResult {
    let failed = LineResult { log_value: f64::NEG_INFINITY, rel_err: f64::INFINITY };
    let grid = opts.grid.max(8);
    let mut hw = half_width;
    let mut mode = kink;
    let mut fmax = logf(kink);
    for _ in 0..6 {
        let step = 2.0 * hw / grid as f64;
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for i in 0..=grid {
            let v = logf(-hw + step * i as f64);
            if v > best_val {
                best_val = v;
                best = i;
            }
        }
        if best_val > fmax {
            let lo = -hw + step * best.saturating_sub(1) as f64;
            let hi = -hw + step * (best + 1).min(grid) as f64;
            let (m, v) = golden_max(&mut logf, lo, hi);
            let centre = -hw + step * best as f64;
            (mode, fmax) = if v >= best_val { (m, v) } else { (centre, best_val) };
        }
        if best != 0 && best != grid {
            break;
        }
        hw *= 4.0;
    }
    if !fmax.is_finite() {
        return failed;
    }
    let s_left = drop_width(&mut logf, mode, fmax, -1.0);
    let s_right = drop_width(&mut logf, mode, fmax, 1.0);

    let to_u = |t: f64| {
        let phi = if t < mode { (t - mode) / s_left } else { (t - mode) / s_right };
        if phi == 0.0 {
            0.0
        } else {
            (-1.0 + (1.0 + 4.0 * phi * phi).sqrt()) / (2.0 * phi)
        }
    };
    let mut breaks = vec![-0.5, 0.0, 0.5];
    if kink != mode {
        breaks.push(to_u(kink));
    }
    let h = |u: f64| {
        let s = if u < 0.0 { s_left } else { s_right };
        let w = 1.0 - u * u;
        let t = mode + s * u / w;
        let v = (logf(t) - fmax).exp() * s * (1.0 + u * u) / (w * w);
        if v.is_finite() {
            v
        } else {
            0.0
        }
    };
    let res = quad::integrate(h, -1.0, 1.0, &breaks, 0.0, opts.rel_tol, opts.max_panels);
    if !(res.value > 0.0) {
        return failed;
    }
    LineResult { log_value: fmax + res.value.ln(), rel_err: res.abs_error / res.value }
}

/// `log m_S(Y)` at fixed `eta` for `|S| <= 2`.
pub fn marginal_likelihood_quad(
    data: &Dataset,
    support: &[usize],
    eta: Eta,
    prior: &LabPrior,
    opts: &QuadOptions,
) -> Result<LogMarginal> {
    let prep = Prepared::new(data, eta, prior)?;
    Evidence::new(&prep, data, support)?.integrate(opts)
}

/// Closed forms available without quadrature: the empty support (any kernel),
/// and, under [`SlabKernel::Flat`], a single column whose entries are all `±1`.
pub fn closed_form_log_m(
    data: &Dataset,
    support: &[usize],
    eta: Eta,
    prior: &LabPrior,
) -> Result<Option<f64>> {
    check_support(support, data.p())?;
    let prep = Prepared::new(data, eta, prior)?;
    let n = data.n() as f64;
    let (a, b, e) = (prior.a, prior.b, eta.get());
    match support {
        [] => {
            let q: f64 = prep.z.iter().map(|z| (z + 1.0 / e).powi(2)).sum::<f64>() / 2.0 + b;
            Ok(Some(prep.log_cn + ln_gamma(prep.nu) - prep.nu * q.ln()))
        }
        [j] if prior.kernel == SlabKernel::Flat => {
            // Rows with x = -1 see g(-beta) = -t - 2/eta, so flipping them turns
            // the residuals into w_i - t.
            let mut w = Vec::with_capacity(data.n());
            for (i, &z) in prep.z.iter().enumerate() {
                match data.x(i, *j) {
                    x if x == 1.0 => w.push(z),
                    x if x == -1.0 => w.push(-(z + 2.0 / e)),
                    _ => return Ok(None),
                }
            }
            let wbar = w.iter().sum::<f64>() / n;
            let q = w.iter().map(|v| (v - wbar).powi(2)).sum::<f64>() / 2.0 + b;
            let shape = (n - 1.0) / 2.0 + a;
            Ok(Some(
                prep.log_cn - 0.5 * n.ln() - 0.5 * prior.sigma_beta2.ln() + ln_gamma(shape)
                    - shape * q.ln(),
            ))
        }
        _ => Ok(None),
    }
}

/// Supports sharing the same multiset of distinct design columns, and hence
/// the same marginal likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportClass {
    pub representative: Vec<usize>,
    pub multiplicity: u64,
    pub size: usize,
    pub log_m: f64,
    pub log_error: f64,
    /// `ln pi(S)` for each member.
    pub log_prior: f64,
    /// Posterior probability of each member.
    pub posterior: f64,
    /// Posterior probability of the whole class.
    pub class_posterior: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportPosterior {
    pub p: usize,
    pub eta: f64,
    pub pi0: f64,
    pub max_support_size: usize,
    pub classes: Vec<SupportClass>,
    /// `ln` of the sum of `m_S pi(S)` over the enumerated supports.
    pub log_evidence: f64,
    /// Upper bound on the unenumerated mass relative to the enumerated mass.
    pub truncation_bound: f64,
    pub warning: Option<String>,
    column_class: Vec<usize>,
}

impl SupportPosterior {
    fn key(&self, support: &[usize]) -> Vec<usize> {
        let mut key: Vec<usize> = support.iter().map(|&j| self.column_class[j]).collect();
        key.sort_unstable();
        key
    }

    /// Posterior probability of one support; 0 if it was not enumerated.
    pub fn probability(&self, support: &[usize]) -> f64 {
        if support.iter().any(|&j| j >= self.p) {
            return 0.0;
        }
        let key = self.key(support);
        self.classes
            .iter()
            .find(|c| self.key(&c.representative) == key)
            .map_or(0.0, |c| c.posterior)
    }

    pub fn total(&self) -> f64 {
        self.classes.iter().map(|c| c.class_posterior).sum()
    }

    /// The class with the largest per-member posterior.
    pub fn modal(&self) -> &SupportClass {
        self.classes
            .iter()
            .max_by(|a, b| a.posterior.total_cmp(&b.posterior))
            .expect("the empty support is always enumerated")
    }
}

fn column_classes(data: &Dataset) -> Vec<usize> {
    let mut seen: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
    (0..data.p())
        .map(|j| {
            let col: Vec<u64> = (0..data.n()).map(|i| data.x(i, j).to_bits()).collect();
            let next = seen.len();
            *seen.entry(col).or_insert(next)
        })
        .collect()
}

fn for_each_subset(p: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(start: usize, p: usize, k: usize, cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if cur.len() == k {
            f(cur);
            return;
        }
        for j in start..p {
            if p - j < k - cur.len() {
                break;
            }
            cur.push(j);
            rec(j + 1, p, k, cur, f);
            cur.pop();
        }
    }
    rec(0, p, k, &mut Vec::with_capacity(k), f);
}

/// Posterior over all supports with `|S| <= max_support_size`, using the prior
/// `pi(S) = pi0^|S| (1 - pi0)^(p - |S|)`.
///
/// Unenumerated supports are bounded by the prior mass of `|S| > max_support_size`
/// times the largest attainable value of the `sigma^2`-integrated likelihood.
pub fn support_posterior(
    data: &Dataset,
    eta: Eta,
    pi0: f64,
    prior: &LabPrior,
    max_support_size: usize,
    opts: &QuadOptions,
) -> Result<SupportPosterior> {
    if !(pi0 > 0.0 && pi0 < 1.0) {
        return Err(Error::Domain(format!("pi0 must be in (0, 1), got {pi0}")));
    }
    if max_support_size > 2 {
        return Err(Error::Invalid(format!(
            "max_support_size must be at most 2, got {max_support_size}"
        )));
    }
    let p = data.p();
    let kmax = max_support_size.min(p);
    let prep = Prepared::new(data, eta, prior)?;
    let column_class = column_classes(data);

    let mut found: BTreeMap<Vec<usize>, (Vec<usize>, u64)> = BTreeMap::new();
    for k in 0..=kmax {
        for_each_subset(p, k, &mut |s| {
            let mut key: Vec<usize> = s.iter().map(|&j| column_class[j]).collect();
            key.sort_unstable();
            found.entry(key).or_insert_with(|| (s.to_vec(), 0)).1 += 1;
        });
    }
    let reps: Vec<(Vec<usize>, u64)> = found.into_values().collect();
    let marginals: Vec<LogMarginal> = reps
        .par_iter()
        .map(|(s, _)| Evidence::new(&prep, data, s)?.integrate(opts))
        .collect::<Result<_>>()?;

    let (lp, lq) = (pi0.ln(), (-pi0).ln_1p());
    let log_prior = |k: usize| k as f64 * lp + (p - k) as f64 * lq;
    let weights: Vec<f64> = reps
        .iter()
        .zip(&marginals)
        .map(|((s, count), m)| (*count as f64).ln() + log_prior(s.len()) + m.log_m)
        .collect();
    let log_evidence = log_sum_exp(&weights);
    let classes: Vec<SupportClass> = reps
        .into_iter()
        .zip(&marginals)
        .map(|((s, count), m)| {
            let lpr = log_prior(s.len());
            let each = (lpr + m.log_m - log_evidence).exp();
            SupportClass {
                size: s.len(),
                representative: s,
                multiplicity: count,
                log_m: m.log_m,
                log_error: m.log_error,
                log_prior: lpr,
                posterior: each,
                class_posterior: each * count as f64,
            }
        })
        .collect();

    let truncation_bound = if kmax == p {
        0.0
    } else if prior.kernel == SlabKernel::Flat {
        f64::INFINITY
    } else {
        let tail: Vec<f64> = (kmax + 1..=p)
            .map(|k| ln_binomial(p as u64, k as u64) + log_prior(k))
            .collect();
        let all: Vec<usize> = (0..p).collect();
        let r_min: f64 = row_groups(&prep.z, data, &all).iter().map(|g| g.ss).sum();
        let log_sup = prep.log_cn + ln_gamma(prep.nu) - prep.nu * (0.5 * r_min + prior.b).ln();
        (log_sum_exp(&tail) + log_sup - log_evidence).exp()
    };
    let warning = (truncation_bound > 1e-3).then(|| {
        format!(
            "supports larger than {kmax} may carry up to {truncation_bound:.3e} times the enumerated mass"
        )
    });
    Ok(SupportPosterior {
        p,
        eta: eta.get(),
        pi0,
        max_support_size: kmax,
        classes,
        log_evidence,
        truncation_bound,
        warning,
        column_class,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurveConfig {
    pub eta: f64,
    pub pi0: f64,
    pub n_grid: Vec<usize>,
    pub replications: usize,
    /// Nonzero coefficient of the alternating column; the rest are zero.
    pub beta01: f64,
    pub sigma0: f64,
    pub prior: LabPrior,
    pub max_support_size: usize,
    pub quad: QuadOptions,
    pub seed: u64,
    /// Allowed drop between consecutive grid points before the trend counts as broken.
    pub slack: f64,
}

impl Default for CurveConfig {
    fn default() -> Self {
        CurveConfig {
            eta: 1.8,
            pi0: 0.5,
            n_grid: vec![20, 60, 120, 200],
            replications: 20,
            beta01: 3.0,
            sigma0: 1.0,
            prior: LabPrior::default(),
            max_support_size: 2,
            quad: QuadOptions::default(),
            seed: 20240601,
            slack: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub n: usize,
    pub p: usize,
    pub mean_posterior: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
    pub truncation_warnings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyCurve {
    pub rows: Vec<CurveRow>,
    pub non_decreasing: bool,
}

/// Mean `P(S = {1} | D)` over replications, for each `n` with `p = floor(n / ln 4)`.
pub fn consistency_curve(cfg: &CurveConfig) -> Result<ConsistencyCurve> {
    let eta = Eta::new(cfg.eta)?;
    if cfg.replications == 0 {
        return Err(Error::Invalid("replications must be positive".into()));
    }
    if cfg.n_grid.is_empty() || cfg.n_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Invalid("n_grid must be non-empty and strictly increasing".into()));
    }
    let designs: Vec<AltDesign> =
        cfg.n_grid.iter().map(|&n| AltDesign::with_max_p(n)).collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..designs.len())
        .flat_map(|g| (0..cfg.replications).map(move |r| (g, r)))
        .collect();
    let results: Vec<(f64, bool)> = jobs
        .par_iter()
        .map(|&(g, r)| {
            let design = designs[g];
            let mut rng = stream(cfg.seed, &[design.n() as u64, r as u64]);
            let data = design.simulate(cfg.beta01, eta, cfg.sigma0, &mut rng)?;
            let post =
                support_posterior(&data, eta, cfg.pi0, &cfg.prior, cfg.max_support_size, &cfg.quad)?;
            Ok((post.probability(&[0]), post.warning.is_some()))
        })
        .collect::<Result<_>>()?;

    let rows: Vec<CurveRow> = designs
        .iter()
        .enumerate()
        .map(|(g, d)| {
            let chunk = &results[g * cfg.replications..(g + 1) * cfg.replications];
            let vals: Vec<f64> = chunk.iter().map(|c| c.0).collect();
            let m = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / m;
            let sd = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
            } else {
                0.0
            };
            CurveRow {
                n: d.n(),
                p: d.p(),
                mean_posterior: mean,
                sd,
                min: vals.iter().copied().fold(f64::INFINITY, f64::min),
                max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                truncation_warnings: chunk.iter().filter(|c| c.1).count(),
            }
        })
        .collect();
    let non_decreasing =
        rows.windows(2).all(|w| w[1].mean_posterior >= w[0].mean_posterior - cfg.slack);
    Ok(ConsistencyCurve { rows, non_decreasing })
}

pub fn write_curve_csv<W: Write>(curve: &ConsistencyCurve, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["n", "p", "mean_posterior", "sd", "min", "max", "truncation_warnings"])?;
    for r in &curve.rows {
        w.write_record([
            r.n.to_string(),
            r.p.to_string(),
            fmt_f64(r.mean_posterior),
            fmt_f64(r.sd),
            fmt_f64(r.min),
            fmt_f64(r.max),
            r.truncation_warnings.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Quadrature `m_S` against the closed-form upper bound for a two-element support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub log_m: f64,
    pub log_bound: Option<f64>,
    /// `sum T_i / 2 - 2^(2 eta - 1) n zbar_+^2 + b`; the bound is vacuous when this is not positive.
    pub denominator: f64,
    pub vacuous: bool,
    pub holds: bool,
    pub log_ratio: Option<f64>,
}

/// Logarithm of `6 C_n / (sqrt(n) sigma_beta) Gamma((n-1)/2 + a) / D^((n-1)/2 + a)`,
/// or `None` when `D <= 0`. Returns `(bound, D)`.
pub fn upper_bound_log(data: &Dataset, eta: Eta, prior: &LabPrior) -> Result<(Option<f64>, f64)> {
    let prep = Prepared::new(data, eta, prior)?;
    let n = data.n() as f64;
    let e = eta.get();
    let c = 2f64.powf(e + 1.0);
    let sum_t: f64 = prep.z.iter().map(|z| z * z - (c + 2.0) * z.abs() / e).sum();
    let sum_abs: f64 = prep.z.iter().map(|z| z.abs()).sum();
    let d = sum_t / 2.0 - 2f64.powf(2.0 * e - 1.0) * sum_abs * sum_abs / n + prior.b;
    if !(d > 0.0) {
        return Ok((None, d));
    }
    let shape = (n - 1.0) / 2.0 + prior.a;
    let log_bound = 6f64.ln() + prep.log_cn - 0.5 * n.ln() - 0.5 * prior.sigma_beta2.ln()
        + ln_gamma(shape)
        - shape * d.ln();
    Ok((Some(log_bound), d))
}

pub fn bound_check_upper(
    data: &Dataset,
    support: &[usize],
    eta: Eta,
    prior: &LabPrior,
    opts: &QuadOptions,
) -> Result<BoundCheck> {
    if support.len() != 2 {
        return Err(Error::Invalid(format!(
            "the bound covers two-element supports, got {}",
            support.len()
        )));
    }
    let log_m = marginal_likelihood_quad(data, support, eta, prior, opts)?.log_m;
    let (log_bound, denominator) = upper_bound_log(data, eta, prior)?;
    Ok(match log_bound {
        Some(lb) => BoundCheck {
            log_m,
            log_bound,
            denominator,
            vacuous: false,
            holds: log_m <= lb,
            log_ratio: Some(log_m - lb),
        },
        None => BoundCheck {
            log_m,
            log_bound: None,
            denominator,
            vacuous: true,
            holds: true,
            log_ratio: None,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub eta: f64,
    pub n: usize,
    pub replicate: usize,
    pub check: BoundCheck,
}

/// Bound checks for support `{1, 2}` on data simulated from `S = {1}` at each `eta`.
#[allow(clippy::too_many_arguments)]
pub fn bound_study(
    etas: &[f64],
    n: usize,
    replications: usize,
    beta01: f64,
    sigma0: f64,
    prior: &LabPrior,
    opts: &QuadOptions,
    seed: u64,
) -> Result<Vec<BoundRecord>> {
    let design = AltDesign::new(n, 2.min(AltDesign::max_p(n)).max(1))?;
    if design.p() < 2 {
        return Err(Error::Invalid(format!("n = {n} is too small for a two-column design")));
    }
    let jobs: Vec<(usize, usize)> =
        (0..etas.len()).flat_map(|e| (0..replications).map(move |r| (e, r))).collect();
    jobs.par_iter()
        .map(|&(e, r)| {
            let eta = Eta::new(etas[e])?;
            let mut rng = stream(seed, &[e as u64, r as u64]);
            let data = design.simulate(beta01, eta, sigma0, &mut rng)?;
            let check = bound_check_upper(&data, &[0, 1], eta, prior, opts)?;
            Ok(BoundRecord { eta: etas[e], n, replicate: r, check })
        })
        .collect()
}

pub fn write_bound_csv<W: Write>(records: &[BoundRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["eta", "n", "replicate", "log_m", "log_bound", "vacuous", "holds"])?;
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    for r in records {
        w.write_record([
            fmt_f64(r.eta),
            r.n.to_string(),
            r.replicate.to_string(),
            fmt_f64(r.check.log_m),
            opt(r.check.log_bound),
            r.check.vacuous.to_string(),
            r.check.holds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// How `A` and `b` are chosen for the residual lower bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LemmaRule {
    /// Separate case rules at `k = 2`: `A` chosen by comparing `|beta_1|` with
    /// `|beta_2|`, `b` by the sign of `t_1`. Larger `k` falls back to `MaxMagnitude`.
    TwoCoefficientCases,
    /// For every `k`: `j = argmax |beta_j|`, `A[k-j+1, k-j+1] = -1`, `b_j = -sign(t_j)`.
    MaxMagnitude,
}

/// Constant multiplying `sum |z_i| b't` (and entering `T_i`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LemmaConstant {
    /// `2^(eta + 1)`, only defined for `k = 2`.
    TwoCoefficient,
    /// `2 k^eta`.
    General,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaInstance {
    pub z: Vec<f64>,
    /// Sign applied to `beta_1` in each row.
    pub signs: Vec<f64>,
    pub t: Vec<f64>,
    pub eta: f64,
    pub k: usize,
    pub c: f64,
    #[serde(rename = "T")]
    pub t_rows: Vec<f64>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl LemmaInstance {
    pub fn new(
        z: Vec<f64>,
        signs: Vec<f64>,
        beta: &[f64],
        eta: Eta,
        rule: LemmaRule,
        constant: LemmaConstant,
    ) -> Result<Self> {
        let k = beta.len();
        if k < 2 {
            return Err(Error::Invalid(format!("need at least two coefficients, got {k}")));
        }
        if z.is_empty() || signs.len() != z.len() {
            return Err(Error::Dimension("z and signs must be non-empty and equally long".into()));
        }
        let e = eta.get();
        let c = match constant {
            LemmaConstant::General => 2.0 * (k as f64).powf(e),
            LemmaConstant::TwoCoefficient if k == 2 => 2f64.powf(e + 1.0),
            LemmaConstant::TwoCoefficient => {
                return Err(Error::Invalid("the two-coefficient constant needs k = 2".into()))
            }
        };
        let t: Vec<f64> = beta.iter().map(|&v| eta.forward(v)).collect();
        let t_rows = z.iter().map(|v| v * v - (c + 2.0) * v.abs() / e).collect();
        let mut a = vec![vec![0.0; k]; k];
        let mut b = vec![0.0; k];
        if rule == LemmaRule::TwoCoefficientCases && k == 2 {
            if beta[0].abs() >= beta[1].abs() {
                a[1][1] = -1.0;
            } else {
                a[0][0] = 1.0;
            }
            if t[0] >= 0.0 {
                b[0] = -1.0;
            } else {
                b[1] = -1.0;
            }
        } else {
            let j = (0..k).fold(0, |best, i| if beta[i].abs() > beta[best].abs() { i } else { best });
            a[k - 1 - j][k - 1 - j] = -1.0;
            b[j] = if t[j] >= 0.0 { -1.0 } else { 1.0 };
        }
        Ok(LemmaInstance { z, signs, t, eta: e, k, c, t_rows, a, b })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaOutcome {
    pub holds: bool,
    pub slack: f64,
    pub lhs: f64,
    pub rhs: f64,
}

/// Evaluates `sum (z_i - g(s_i beta_1 + beta_2 + ... + beta_k))^2 >= sum T_i + n t'At + c sum|z_i| b't`.
pub fn lemma_check(inst: &LemmaInstance, beta: &[f64]) -> Result<LemmaOutcome> {
    if beta.len() != inst.k {
        return Err(Error::Dimension(format!("beta has {} entries, instance has k = {}", beta.len(), inst.k)));
    }
    let eta = Eta::new(inst.eta)?;
    let rest: f64 = beta[1..].iter().sum();
    let lhs: f64 = inst
        .z
        .iter()
        .zip(&inst.signs)
        .map(|(z, s)| (z - eta.forward(s * beta[0] + rest)).powi(2))
        .sum();
    let n = inst.z.len() as f64;
    let quad: f64 = (0..inst.k)
        .map(|i| inst.t[i] * (0..inst.k).map(|j| inst.a[i][j] * inst.t[j]).sum::<f64>())
        .sum();
    let bt: f64 = inst.b.iter().zip(&inst.t).map(|(b, t)| b * t).sum();
    let sum_abs: f64 = inst.z.iter().map(|z| z.abs()).sum();
    let sum_t: f64 = inst.t_rows.iter().sum();
    let terms = [sum_t, n * quad, inst.c * sum_abs * bt];
    let rhs: f64 = terms.iter().sum();
    let slack = lhs - rhs;
    let scale = 1.0 + lhs.abs() + terms.iter().map(|v| v.abs()).sum::<f64>();
    Ok(LemmaOutcome { holds: slack >= -1e-10 * scale, slack, lhs, rhs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaViolation {
    pub z: Vec<f64>,
    pub signs: Vec<f64>,
    pub beta: Vec<f64>,
    pub eta: f64,
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzReport {
    pub rule: LemmaRule,
    pub constant: LemmaConstant,
    pub instances: usize,
    pub violations: usize,
    pub first_violation: Option<LemmaViolation>,
}

/// Random `(z, signs, beta, eta)` instances over several orders of magnitude,
/// with `k` drawn from `ks` and 10% of coefficients exactly zero.
pub fn lemma_fuzz(
    instances: usize,
    ks: &[usize],
    rule: LemmaRule,
    constant: LemmaConstant,
    seed: u64,
) -> Result<FuzzReport> {
    if ks.is_empty() {
        return Err(Error::Invalid("no k values to fuzz".into()));
    }
    let mut rng = seeded(seed);
    let mut violations = 0;
    let mut first_violation = None;
    for _ in 0..instances {
        let k = ks[rng.gen_range(0..ks.len())];
        let n = rng.gen_range(1..=12);
        let eta = Eta::new(rng.gen_range(0.02..1.98))?;
        let zscale = 10f64.powf(rng.gen_range(-2.0..2.0));
        let bscale = 10f64.powf(rng.gen_range(-2.0..1.5));
        let z: Vec<f64> = (0..n).map(|_| zscale * std_normal(&mut rng)).collect();
        let signs: Vec<f64> =
            (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let beta: Vec<f64> = (0..k)
            .map(|_| if rng.gen_bool(0.1) { 0.0 } else { bscale * std_normal(&mut rng) })
            .collect();
        let inst = LemmaInstance::new(z, signs, &beta, eta, rule, constant)?;
        let out = lemma_check(&inst, &beta)?;
        if !out.holds {
            violations += 1;
            if first_violation.is_none() {
                first_violation = Some(LemmaViolation {
                    z: inst.z.clone(),
                    signs: inst.signs.clone(),
                    beta: beta.clone(),
                    eta: inst.eta,
                    slack: out.slack,
                });
            }
        }
    }
    Ok(FuzzReport { rule, constant, instances, violations, first_violation })
}
