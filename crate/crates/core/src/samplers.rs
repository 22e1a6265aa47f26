//! Metropolis-within-Gibbs kernels for all model variants.
//!
//! One sweep visits, in order: `eta` (random walk on `logit(eta/2)` holding
//! `theta` fixed, then optionally a second move holding `beta` fixed), the
//! error variance, every coefficient, the spike/slab hyperparameters, and
//! finally the shift or mixing-scale blocks.
//!
//! The sampler keeps `g(y)`, `x'beta` and `g(x'beta)` cached so that a
//! coefficient move costs `O(n)`.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{
    ln_beta_pdf, ln_gamma_pdf, ln_normal_pdf, logit, sample_beta, sample_gamma,
    sample_gamma_below_one, sample_inv_gamma, sigmoid, std_normal, two_point_prob,
};
use crate::error::{Error, Result};
use crate::model::{
    beta_from_state, dot, ln_resid_density, Dataset, ErrorLaw, FittedModel,
    MixingKind, ModelSpec, ParamState, PriorHyper, NU_MIN,
};
use crate::rng;
use crate::transform::Eta;

/// Blocks that can be held at their initial value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Freeze {
    pub eta: bool,
    pub sigma2: bool,
    /// Keep every inclusion indicator fixed; active coefficients still move.
    pub inclusion: bool,
    /// Keep `pi0`, `sigma_beta2` and `pi_gamma` fixed.
    pub hyper: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub rw_scale_eta: f64,
    /// Robbins–Monro adaptation of random-walk scales during burn-in.
    pub adapt: bool,
    /// Visit coefficients in a fresh random order every sweep.
    pub randomize_order: bool,
    /// Add an `eta` move that keeps `beta` (not `theta`) fixed.
    pub eta_beta_move: bool,
    pub freeze: Freeze,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            n_iter: 20_000,
            burn_in: 10_000,
            thin: 5,
            seed: 0,
            rw_scale_eta: 0.2,
            adapt: true,
            randomize_order: false,
            eta_beta_move: true,
            freeze: Freeze::default(),
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iter == 0 || self.thin == 0 {
            return Err(Error::Invalid("n_iter and thin must be positive".into()));
        }
        if self.burn_in >= self.n_iter {
            return Err(Error::Invalid(format!(
                "burn_in ({}) must be below n_iter ({})",
                self.burn_in, self.n_iter
            )));
        }
        if !(self.rw_scale_eta > 0.0) {
            return Err(Error::Invalid("rw_scale_eta must be positive".into()));
        }
        Ok(())
    }

    pub fn expected_draws(&self) -> usize {
        (self.n_iter - self.burn_in) / self.thin
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRate {
    pub proposals: u64,
    pub accepted: u64,
    pub rate: f64,
}

/// Post-burn-in, thinned draws plus acceptance diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainOutput {
    pub spec: ModelSpec,
    pub hyper: PriorHyper,
    pub config: McmcConfig,
    pub draws: Vec<ParamState>,
    pub acceptance: BTreeMap<String, BlockRate>,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl PartialEq for ChainOutput {
    /// Wall time is not part of a chain's identity.
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.hyper == other.hyper
            && self.config == other.config
            && self.draws == other.draws
            && self.acceptance == other.acceptance
    }
}

/// A proposed Metropolis–Hastings move from the current state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Move {
    Birth { j: usize, theta: f64 },
    Death { j: usize },
    Refine { j: usize, theta: f64 },
    EtaTheta { eta: f64 },
    EtaBeta { eta: f64 },
    StudentNu { nu: f64 },
    ContaminationRho { rho: f64 },
}

#[derive(Debug, Clone, Default)]
struct Counter {
    proposals: u64,
    accepted: u64,
}

const TARGET_ACCEPT: f64 = 0.44;
const INITIAL_COEF_SCALE: f64 = 0.5;
const INITIAL_NU_SCALE: f64 = 0.5;
const INITIAL_RHO_SCALE: f64 = 0.5;

/// Proposal evaluated against the cached state, ready to be committed.
struct Pending {
    log_ratio: f64,
    loglik: f64,
    /// `Some` when the linear predictor changes.
    xb: Option<Vec<f64>>,
    gxb: Option<Vec<f64>>,
    gy: Option<Vec<f64>>,
}

/// Mutable sampler over one dataset.
pub struct Sampler {
    data: Dataset,
    spec: ModelSpec,
    hyper: PriorHyper,
    config: McmcConfig,
    state: ParamState,
    gy: Vec<f64>,
    xb: Vec<f64>,
    gxb: Vec<f64>,
    beta: Vec<f64>,
    sum_log_abs_y: f64,
    loglik: f64,
    coef_scale: Vec<f64>,
    eta_scale: f64,
    eta_beta_scale: f64,
    nu_scale: f64,
    rho_scale: f64,
    counters: BTreeMap<&'static str, Counter>,
    adapt_step: BTreeMap<String, u64>,
    iteration: usize,
    adapting: bool,
    order: Vec<usize>,
}

impl Sampler {
    pub fn new(
        data: Dataset,
        spec: ModelSpec,
        hyper: PriorHyper,
        config: McmcConfig,
        state: ParamState,
    ) -> Result<Self> {
        hyper.validate()?;
        config.validate()?;
        state.validate(spec, data.n(), data.p())?;
        let p = data.p();
        let mut s = Sampler {
            spec,
            hyper,
            eta_scale: config.rw_scale_eta,
            eta_beta_scale: config.rw_scale_eta,
            config,
            state,
            gy: Vec::new(),
            xb: Vec::new(),
            gxb: Vec::new(),
            beta: Vec::new(),
            sum_log_abs_y: data.y().iter().map(|y| y.abs().ln()).sum(),
            loglik: 0.0,
            coef_scale: vec![INITIAL_COEF_SCALE; p],
            nu_scale: INITIAL_NU_SCALE,
            rho_scale: INITIAL_RHO_SCALE,
            counters: BTreeMap::new(),
            adapt_step: BTreeMap::new(),
            iteration: 0,
            adapting: false,
            order: (0..p).collect(),
            data,
        };
        s.refresh();
        Ok(s)
    }

    pub fn state(&self) -> &ParamState {
        &self.state
    }

    pub fn into_state(self) -> ParamState {
        self.state
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    /// Cached log-likelihood of the current state.
    pub fn loglik(&self) -> f64 {
        self.loglik
    }

    /// Swap in a new response vector (same covariates) and rebuild caches.
    pub fn set_response(&mut self, y: Vec<f64>) -> Result<()> {
        self.data = self.data.with_response(y)?;
        self.sum_log_abs_y = self.data.y().iter().map(|y| y.abs().ln()).sum();
        self.refresh();
        Ok(())
    }

    /// Replace the whole state and rebuild caches.
    pub fn set_state(&mut self, state: ParamState) -> Result<()> {
        state.validate(self.spec, self.data.n(), self.data.p())?;
        self.state = state;
        self.refresh();
        Ok(())
    }

    fn refresh(&mut self) {
        let eta = self.state.eta;
        self.beta = beta_from_state(&self.state);
        self.gy = self.data.y().iter().map(|&y| eta.forward(y)).collect();
        self.xb = self.data.linear_predictor(&self.beta);
        self.gxb = self.xb.iter().map(|&v| eta.forward(v)).collect();
        self.loglik = self.loglik_with(&self.gy, &self.gxb, eta, self.state.sigma2);
    }

    #[inline]
    fn shift(&self, i: usize) -> f64 {
        self.state.shifts.as_ref().map_or(0.0, |s| s.gamma[i])
    }

    #[inline]
    fn scale(&self, i: usize) -> f64 {
        self.state.mixing.as_ref().map_or(1.0, |m| m.u[i])
    }

    fn loglik_with(&self, gy: &[f64], gxb: &[f64], eta: Eta, sigma2: f64) -> f64 {
        let mut ll = (eta.get() - 1.0) * self.sum_log_abs_y;
        for i in 0..gy.len() {
            let r = gy[i] - gxb[i] - self.shift(i);
            ll += ln_resid_density(r, sigma2, self.scale(i));
        }
        ll
    }

    /// Transformed-scale residual `g(y_i) - g(x_i'beta) - gamma_i`.
    pub fn residual(&self, i: usize) -> f64 {
        self.gy[i] - self.gxb[i] - self.shift(i)
    }

    fn is_active(&self, j: usize) -> bool {
        self.state.z[j]
    }

    // ----- proposal evaluation ----------------------------------------------

    fn coef_pending(&self, j: usize, new_beta: f64) -> Pending {
        let eta = self.state.eta;
        let delta = new_beta - self.beta[j];
        let n = self.data.n();
        let mut xb = Vec::with_capacity(n);
        let mut gxb = Vec::with_capacity(n);
        for i in 0..n {
            let v = self.xb[i] + self.data.x(i, j) * delta;
            xb.push(v);
            gxb.push(eta.forward(v));
        }
        let loglik = self.loglik_with(&self.gy, &gxb, eta, self.state.sigma2);
        Pending {
            log_ratio: 0.0,
            loglik,
            xb: Some(xb),
            gxb: Some(gxb),
            gy: None,
        }
    }

    fn eta_pending(&self, eta: Eta, beta: &[f64]) -> Pending {
        let gy: Vec<f64> = self.data.y().iter().map(|&y| eta.forward(y)).collect();
        let xb = self.data.linear_predictor(beta);
        let gxb: Vec<f64> = xb.iter().map(|&v| eta.forward(v)).collect();
        let loglik = self.loglik_with(&gy, &gxb, eta, self.state.sigma2);
        Pending {
            log_ratio: 0.0,
            loglik,
            xb: Some(xb),
            gxb: Some(gxb),
            gy: Some(gy),
        }
    }

    fn eta_prior_logit(&self, eta: f64) -> f64 {
        // Beta prior on eta/2 plus the Jacobian of the logit map.
        let h = eta / 2.0;
        ln_beta_pdf(h, self.hyper.c1, self.hyper.d1) + h.ln() + (1.0 - h).ln()
    }

    fn evaluate(&self, mv: Move) -> Pending {
        let st = &self.state;
        match mv {
            Move::Birth { j, theta } => {
                let mut p = self.coef_pending(j, st.eta.inverse(theta));
                // Slab density and birth proposal cancel. Death is chosen with
                // probability 1/2 from the new state, birth with probability 1.
                p.log_ratio = p.loglik - self.loglik + (1.0 - st.pi0).ln() - st.pi0.ln()
                    + 0.5f64.ln();
                p
            }
            Move::Death { j } => {
                let mut p = self.coef_pending(j, 0.0);
                p.log_ratio =
                    p.loglik - self.loglik + st.pi0.ln() - (1.0 - st.pi0).ln() - 0.5f64.ln();
                p
            }
            Move::Refine { j, theta } => {
                let mut p = self.coef_pending(j, st.eta.inverse(theta));
                p.log_ratio = p.loglik - self.loglik + ln_normal_pdf(theta, 0.0, st.sigma_beta2)
                    - ln_normal_pdf(st.theta[j], 0.0, st.sigma_beta2);
                p
            }
            Move::EtaTheta { eta } => {
                let Ok(e) = Eta::new(eta) else {
                    return rejected();
                };
                let beta: Vec<f64> = st
                    .theta
                    .iter()
                    .zip(&st.z)
                    .map(|(&t, &z)| if z { e.inverse(t) } else { 0.0 })
                    .collect();
                let mut p = self.eta_pending(e, &beta);
                p.log_ratio = p.loglik - self.loglik + self.eta_prior_logit(eta)
                    - self.eta_prior_logit(st.eta.get());
                p
            }
            Move::EtaBeta { eta } => {
                let Ok(e) = Eta::new(eta) else {
                    return rejected();
                };
                let mut p = self.eta_pending(e, &self.beta);
                let mut lr = p.loglik - self.loglik + self.eta_prior_logit(eta)
                    - self.eta_prior_logit(st.eta.get());
                for j in 0..st.z.len() {
                    if st.z[j] {
                        let b = self.beta[j];
                        let t_new = e.forward(b);
                        lr += ln_normal_pdf(t_new, 0.0, st.sigma_beta2)
                            - ln_normal_pdf(st.theta[j], 0.0, st.sigma_beta2);
                        // |d theta'/d theta| = g'_{eta'}(b) / g'_{eta}(b) = |b|^(eta' - eta).
                        lr += (eta - st.eta.get()) * b.abs().ln();
                    }
                }
                p.log_ratio = if lr.is_nan() { f64::NEG_INFINITY } else { lr };
                p
            }
            Move::StudentNu { nu } => {
                let m = st.mixing.as_ref().expect("Student-t state");
                if nu <= NU_MIN {
                    return rejected();
                }
                let ld = |v: f64| -> f64 {
                    m.u.iter()
                        .map(|&u| ln_gamma_pdf(u, v / 2.0, v / 2.0))
                        .sum::<f64>()
                        - self.hyper.nu_rate * (v - NU_MIN)
                        + (v - NU_MIN).ln()
                };
                Pending {
                    log_ratio: ld(nu) - ld(m.nu),
                    loglik: self.loglik,
                    xb: None,
                    gxb: None,
                    gy: None,
                }
            }
            Move::ContaminationRho { rho } => {
                let m = st.mixing.as_ref().expect("contaminated-normal state");
                if !(rho > 0.0 && rho < 1.0) {
                    return rejected();
                }
                let mut loglik = self.loglik;
                for i in 0..self.data.n() {
                    if m.contaminated[i] {
                        let r = self.residual(i);
                        loglik += ln_resid_density(r, st.sigma2, rho)
                            - ln_resid_density(r, st.sigma2, m.rho);
                    }
                }
                let lp = |v: f64| {
                    ln_beta_pdf(v, self.hyper.cn_rho_a, self.hyper.cn_rho_b) + v.ln() + (1.0 - v).ln()
                };
                Pending {
                    log_ratio: loglik - self.loglik + lp(rho) - lp(m.rho),
                    loglik,
                    xb: None,
                    gxb: None,
                    gy: None,
                }
            }
        }
    }

    /// Log Metropolis–Hastings ratio (target and proposal terms) of `mv`.
    pub fn log_ratio(&self, mv: Move) -> f64 {
        self.evaluate(mv).log_ratio
    }

    fn commit(&mut self, mv: Move, p: Pending) {
        if let Some(xb) = p.xb {
            self.xb = xb;
        }
        if let Some(gxb) = p.gxb {
            self.gxb = gxb;
        }
        if let Some(gy) = p.gy {
            self.gy = gy;
        }
        self.loglik = p.loglik;
        let st = &mut self.state;
        match mv {
            Move::Birth { j, theta } | Move::Refine { j, theta } => {
                st.z[j] = true;
                st.theta[j] = theta;
                self.beta[j] = st.eta.inverse(theta);
            }
            Move::Death { j } => {
                st.z[j] = false;
                st.theta[j] = 0.0;
                self.beta[j] = 0.0;
            }
            Move::EtaTheta { eta } => {
                st.eta = Eta::new(eta).expect("validated");
                self.beta = beta_from_state(st);
            }
            Move::EtaBeta { eta } => {
                let e = Eta::new(eta).expect("validated");
                st.eta = e;
                for j in 0..st.z.len() {
                    if st.z[j] {
                        st.theta[j] = e.forward(self.beta[j]);
                    }
                }
            }
            Move::StudentNu { nu } => {
                st.mixing.as_mut().expect("mixing").nu = nu;
            }
            Move::ContaminationRho { rho } => {
                let m = st.mixing.as_mut().expect("mixing");
                m.rho = rho;
                for i in 0..m.u.len() {
                    if m.contaminated[i] {
                        m.u[i] = rho;
                    }
                }
            }
        }
    }

    /// Applies `mv` unconditionally.
    pub fn force(&mut self, mv: Move) {
        let p = self.evaluate(mv);
        self.commit(mv, p);
    }

    fn metropolis<R: Rng + ?Sized>(&mut self, mv: Move, block: &'static str, rng: &mut R) -> bool {
        let p = self.evaluate(mv);
        let accept = p.log_ratio.is_finite() && rng.gen::<f64>().ln() < p.log_ratio
            || p.log_ratio == f64::INFINITY;
        let c = self.counters.entry(block).or_default();
        c.proposals += 1;
        if accept {
            c.accepted += 1;
            self.commit(mv, p);
        }
        accept
    }

    fn adapt(&mut self, key: String, scale: f64, accepted: bool) -> f64 {
        if !(self.adapting && self.config.adapt) {
            return scale;
        }
        let t = self.adapt_step.entry(key).or_insert(0);
        *t += 1;
        let gain = (*t as f64).powf(-0.6);
        let a = if accepted { 1.0 } else { 0.0 };
        (scale.ln() + gain * (a - TARGET_ACCEPT)).exp().clamp(1e-8, 1e3)
    }

    // ----- blocks -------------------------------------------------------------

    pub fn update_eta<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        if self.config.freeze.eta {
            return;
        }
        let h = self.state.eta.get() / 2.0;
        let prop = 2.0 * sigmoid(logit(h) + self.eta_scale * std_normal(rng));
        let acc = self.metropolis(Move::EtaTheta { eta: prop }, "eta", rng);
        self.eta_scale = self.adapt("eta".into(), self.eta_scale, acc);

        if self.config.eta_beta_move {
            let h = self.state.eta.get() / 2.0;
            let prop = 2.0 * sigmoid(logit(h) + self.eta_beta_scale * std_normal(rng));
            let acc = self.metropolis(Move::EtaBeta { eta: prop }, "eta_beta_fixed", rng);
            self.eta_beta_scale = self.adapt("eta_beta".into(), self.eta_beta_scale, acc);
        }
    }

    pub fn update_sigma2<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        if self.config.freeze.sigma2 {
            return;
        }
        let n = self.data.n();
        let ss: f64 = (0..n)
            .map(|i| self.scale(i) * self.residual(i).powi(2))
            .sum();
        self.state.sigma2 = sample_inv_gamma(rng, self.hyper.a + n as f64 / 2.0, self.hyper.b + ss / 2.0);
        self.loglik = self.loglik_with(&self.gy, &self.gxb, self.state.eta, self.state.sigma2);
    }

    pub fn update_coefficient<R: Rng + ?Sized>(&mut self, j: usize, rng: &mut R) {
        let sb = self.state.sigma_beta2.sqrt();
        let frozen = self.config.freeze.inclusion;
        if !self.is_active(j) {
            if frozen {
                return;
            }
            let theta = sb * std_normal(rng);
            self.metropolis(Move::Birth { j, theta }, "birth", rng);
        } else if !frozen && rng.gen::<bool>() {
            self.metropolis(Move::Death { j }, "death", rng);
        } else {
            let theta = self.state.theta[j] + self.coef_scale[j] * std_normal(rng);
            let acc = self.metropolis(Move::Refine { j, theta }, "refine", rng);
            self.coef_scale[j] = self.adapt(format!("coef{j}"), self.coef_scale[j], acc);
        }
    }

    pub fn update_hyper<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        if self.config.freeze.hyper {
            return;
        }
        let h = &self.hyper;
        let st = &mut self.state;
        let k = st.z.iter().filter(|&&z| z).count();
        let p = st.z.len();
        st.pi0 = sample_beta(rng, h.pi0_a + (p - k) as f64, h.pi0_b + k as f64);
        let ss: f64 = st
            .theta
            .iter()
            .zip(&st.z)
            .filter(|(_, &z)| z)
            .map(|(t, _)| t * t)
            .sum();
        st.sigma_beta2 = sample_inv_gamma(rng, h.sb_a + k as f64 / 2.0, h.sb_b + ss / 2.0);
        if let Some(s) = st.shifts.as_mut() {
            let kg = s.active.iter().filter(|&&a| a).count();
            let n = s.active.len();
            s.pi_gamma = sample_beta(
                rng,
                h.pi_gamma_a + (n - kg) as f64,
                h.pi_gamma_b + kg as f64,
            );
        }
    }

    pub fn update_gamma<R: Rng + ?Sized>(&mut self, i: usize, rng: &mut R) {
        let sigma2 = self.state.sigma2;
        let sg2 = self.hyper.sg2;
        let d = self.gy[i] - self.gxb[i];
        let Some(s) = self.state.shifts.as_mut() else {
            return;
        };
        let v = 1.0 / (1.0 / sg2 + 1.0 / sigma2);
        let m = v * d / sigma2;
        let w1 = (1.0 - s.pi_gamma).ln() + ln_normal_pdf(d, 0.0, sigma2 + sg2);
        let w0 = s.pi_gamma.ln() + ln_normal_pdf(d, 0.0, sigma2);
        if rng.gen::<f64>() < two_point_prob(w1, w0) {
            s.active[i] = true;
            s.gamma[i] = m + v.sqrt() * std_normal(rng);
        } else {
            s.active[i] = false;
            s.gamma[i] = 0.0;
        }
    }

    pub fn update_u<R: Rng + ?Sized>(&mut self, i: usize, rng: &mut R) {
        let Some(kind) = self.spec.mixing() else {
            return;
        };
        let r2s = self.residual(i).powi(2) / self.state.sigma2;
        let m = self.state.mixing.as_mut().expect("mixing block");
        match kind {
            MixingKind::StudentT => {
                m.u[i] = sample_gamma(rng, (m.nu + 1.0) / 2.0, (m.nu + r2s) / 2.0)
                    .max(f64::MIN_POSITIVE);
            }
            MixingKind::Slash => {
                m.u[i] = sample_gamma_below_one(rng, m.nu + 0.5, r2s / 2.0);
            }
            MixingKind::Contaminated => {
                let wc = m.nu.ln() + 0.5 * m.rho.ln() - m.rho * r2s / 2.0;
                let w1 = (1.0 - m.nu).ln() - r2s / 2.0;
                let c = rng.gen::<f64>() < two_point_prob(wc, w1);
                m.contaminated[i] = c;
                m.u[i] = if c { m.rho } else { 1.0 };
            }
        }
    }

    pub fn update_mixing_params<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let Some(kind) = self.spec.mixing() else {
            return;
        };
        let n = self.data.n() as f64;
        match kind {
            MixingKind::StudentT => {
                let nu = self.state.mixing.as_ref().expect("mixing").nu;
                let prop = NU_MIN + ((nu - NU_MIN).ln() + self.nu_scale * std_normal(rng)).exp();
                let acc = self.metropolis(Move::StudentNu { nu: prop }, "nu", rng);
                self.nu_scale = self.adapt("nu".into(), self.nu_scale, acc);
            }
            MixingKind::Slash => {
                let h = &self.hyper;
                let m = self.state.mixing.as_mut().expect("mixing");
                let sum_log_u: f64 = m.u.iter().map(|u| u.ln()).sum();
                m.nu = sample_gamma(rng, h.slash_a + n, h.slash_b - sum_log_u).max(f64::MIN_POSITIVE);
            }
            MixingKind::Contaminated => {
                let h = &self.hyper;
                let m = self.state.mixing.as_mut().expect("mixing");
                let k = m.contaminated.iter().filter(|&&c| c).count() as f64;
                m.nu = sample_beta(rng, h.cn_nu_a + k, h.cn_nu_b + n - k);
                let rho = m.rho;
                let prop = sigmoid(logit(rho) + self.rho_scale * std_normal(rng));
                let acc = self.metropolis(Move::ContaminationRho { rho: prop }, "rho", rng);
                self.rho_scale = self.adapt("rho".into(), self.rho_scale, acc);
            }
        }
    }

    fn check(&self, block: &str) -> Result<()> {
        let st = &self.state;
        let ok = self.loglik.is_finite()
            && st.sigma2.is_finite()
            && st.sigma2 > 0.0
            && st.sigma_beta2.is_finite()
            && st.sigma_beta2 > 0.0
            && st.theta.iter().all(|t| t.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Divergence {
                iteration: self.iteration,
                block: block.to_string(),
            })
        }
    }

    /// One full sweep over every block.
    pub fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        self.update_eta(rng);
        self.check("eta")?;
        self.update_sigma2(rng);
        self.check("sigma2")?;
        if self.config.randomize_order {
            self.order.shuffle(rng);
        }
        for k in 0..self.order.len() {
            let j = self.order[k];
            self.update_coefficient(j, rng);
        }
        self.check("coefficients")?;
        self.update_hyper(rng);
        self.check("hyper")?;
        if self.spec.has_shifts() {
            for i in 0..self.data.n() {
                self.update_gamma(i, rng);
            }
            self.loglik = self.loglik_with(&self.gy, &self.gxb, self.state.eta, self.state.sigma2);
            self.check("gamma")?;
        }
        if self.spec.mixing().is_some() {
            for i in 0..self.data.n() {
                self.update_u(i, rng);
            }
            self.loglik = self.loglik_with(&self.gy, &self.gxb, self.state.eta, self.state.sigma2);
            self.update_mixing_params(rng);
            self.check("mixing")?;
        }
        self.iteration += 1;
        Ok(())
    }

    fn acceptance(&self) -> BTreeMap<String, BlockRate> {
        self.counters
            .iter()
            .map(|(k, c)| {
                let rate = if c.proposals > 0 {
                    c.accepted as f64 / c.proposals as f64
                } else {
                    0.0
                };
                (
                    k.to_string(),
                    BlockRate {
                        proposals: c.proposals,
                        accepted: c.accepted,
                        rate,
                    },
                )
            })
            .collect()
    }
}

fn rejected() -> Pending {
    Pending {
        log_ratio: f64::NEG_INFINITY,
        loglik: f64::NAN,
        xb: None,
        gxb: None,
        gy: None,
    }
}

/// Runs a chain from the default initial state.
pub fn run_chain(
    data: &Dataset,
    spec: ModelSpec,
    hyper: &PriorHyper,
    config: &McmcConfig,
) -> Result<ChainOutput> {
    let init = ParamState::initial(data, spec, hyper);
    run_chain_from(data, spec, hyper, config, init)
}

pub fn run_chain_from(
    data: &Dataset,
    spec: ModelSpec,
    hyper: &PriorHyper,
    config: &McmcConfig,
    init: ParamState,
) -> Result<ChainOutput> {
    let start = Instant::now();
    let mut rng = rng::seeded(config.seed);
    let mut sampler = Sampler::new(data.clone(), spec, hyper.clone(), config.clone(), init)?;
    let mut draws = Vec::with_capacity(config.expected_draws());
    sampler.adapting = true;
    for it in 0..config.n_iter {
        if it == config.burn_in {
            sampler.adapting = false;
        }
        sampler.sweep(&mut rng)?;
        if it >= config.burn_in && (it + 1 - config.burn_in) % config.thin == 0 {
            draws.push(sampler.state.clone());
        }
    }
    Ok(ChainOutput {
        spec,
        hyper: hyper.clone(),
        config: config.clone(),
        draws,
        acceptance: sampler.acceptance(),
        wall_time: start.elapsed(),
    })
}

fn one_block<F>(
    state: &ParamState,
    data: &Dataset,
    spec: ModelSpec,
    hyper: &PriorHyper,
    f: F,
) -> Result<ParamState>
where
    F: FnOnce(&mut Sampler),
{
    let config = McmcConfig {
        n_iter: 1,
        burn_in: 0,
        ..McmcConfig::default()
    };
    let mut s = Sampler::new(data.clone(), spec, hyper.clone(), config, state.clone())?;
    f(&mut s);
    Ok(s.state)
}

/// Exact Gibbs draw of the error variance.
pub fn update_sigma2<R: Rng + ?Sized>(
    state: &ParamState,
    data: &Dataset,
    spec: ModelSpec,
    hyper: &PriorHyper,
    rng: &mut R,
) -> Result<ParamState> {
    one_block(state, data, spec, hyper, |s| s.update_sigma2(rng))
}

/// One birth, death or refinement move on coefficient `j`.
pub fn update_coefficient<R: Rng + ?Sized>(
    state: &ParamState,
    j: usize,
    data: &Dataset,
    spec: ModelSpec,
    hyper: &PriorHyper,
    rng: &mut R,
) -> Result<ParamState> {
    if j >= data.p() {
        return Err(Error::Dimension(format!("coefficient index {j} out of range")));
    }
    one_block(state, data, spec, hyper, |s| s.update_coefficient(j, rng))
}

/// Random-walk move(s) on `eta`.
pub fn update_eta<R: Rng + ?Sized>(
    state: &ParamState,
    data: &Dataset,
    spec: ModelSpec,
    hyper: &PriorHyper,
    rng: &mut R,
) -> Result<ParamState> {
    one_block(state, data, spec, hyper, |s| s.update_eta(rng))
}

/// Gibbs draw of shift `i` (location-shift model only).
pub fn update_gamma<R: Rng + ?Sized>(
    state: &ParamState,
    i: usize,
    data: &Dataset,
    hyper: &PriorHyper,
    rng: &mut R,
) -> Result<ParamState> {
    one_block(state, data, ModelSpec::TbsoSg, hyper, |s| s.update_gamma(i, rng))
}

/// Gibbs draw of mixing scale `i` (normal-independent models only).
pub fn update_u<R: Rng + ?Sized>(
    state: &ParamState,
    i: usize,
    data: &Dataset,
    spec: ModelSpec,
    hyper: &PriorHyper,
    rng: &mut R,
) -> Result<ParamState> {
    if spec.mixing().is_none() {
        return Err(Error::StateMismatch {
            model: spec.label(),
            reason: "no mixing scales".into(),
        });
    }
    one_block(state, data, spec, hyper, |s| s.update_u(i, rng))
}

pub fn update_mixing_params<R: Rng + ?Sized>(
    state: &ParamState,
    data: &Dataset,
    spec: ModelSpec,
    hyper: &PriorHyper,
    rng: &mut R,
) -> Result<ParamState> {
    if spec.mixing().is_none() {
        return Err(Error::StateMismatch {
            model: spec.label(),
            reason: "no mixing parameters".into(),
        });
    }
    one_block(state, data, spec, hyper, |s| s.update_mixing_params(rng))
}

/// Conjugate updates of `pi0`, `sigma_beta2` and `pi_gamma`.
pub fn update_hyper<R: Rng + ?Sized>(
    state: &ParamState,
    hyper: &PriorHyper,
    rng: &mut R,
) -> ParamState {
    let h = hyper;
    let mut st = state.clone();
    let k = st.z.iter().filter(|&&z| z).count();
    let p = st.z.len();
    st.pi0 = sample_beta(rng, h.pi0_a + (p - k) as f64, h.pi0_b + k as f64);
    let ss: f64 = st
        .theta
        .iter()
        .zip(&st.z)
        .filter(|(_, &z)| z)
        .map(|(t, _)| t * t)
        .sum();
    st.sigma_beta2 = sample_inv_gamma(rng, h.sb_a + k as f64 / 2.0, h.sb_b + ss / 2.0);
    if let Some(s) = st.shifts.as_mut() {
        let kg = s.active.iter().filter(|&&a| a).count();
        let n = s.active.len();
        s.pi_gamma = sample_beta(rng, h.pi_gamma_a + (n - kg) as f64, h.pi_gamma_b + kg as f64);
    }
    st
}

// ----- posterior summaries ----------------------------------------------------

/// Type-7 sample quantile of sorted data.
pub fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSummary {
    pub inclusion: f64,
    pub selected: bool,
    /// Mean, median and 95% equal-tailed interval of `beta_j` given inclusion.
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub ci95: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportSummary {
    pub threshold: f64,
    pub selected: Vec<usize>,
    pub coefficients: Vec<CoefficientSummary>,
    /// Thresholded point estimate: conditional mean for selected `j`, zero otherwise.
    pub beta_hat: Vec<f64>,
    pub eta_mean: f64,
    pub sigma2_mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shifts: Option<ShiftSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixing: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSummary {
    pub inclusion: Vec<f64>,
    pub selected: Vec<usize>,
    pub gamma_hat: Vec<f64>,
}

impl SupportSummary {
    /// Plug-in model for prediction at posterior-mean `eta`, `sigma2` and mixing.
    pub fn fitted_model(&self, spec: ModelSpec) -> FittedModel {
        let sigma = self.sigma2_mean.sqrt();
        let law = match (spec.mixing(), self.mixing) {
            (Some(MixingKind::StudentT), Some((nu, _))) => ErrorLaw::StudentT { sigma, nu },
            (Some(MixingKind::Slash), Some((nu, _))) => ErrorLaw::Slash { sigma, nu },
            (Some(MixingKind::Contaminated), Some((nu, rho))) => {
                ErrorLaw::Contaminated { sigma, nu, rho }
            }
            _ => ErrorLaw::Normal { sigma },
        };
        FittedModel {
            eta: Eta::new(self.eta_mean).unwrap_or(Eta::ONE),
            beta: self.beta_hat.clone(),
            law,
        }
    }
}

/// Median-probability selection: `j` is selected when its inclusion frequency
/// strictly exceeds `threshold` (ties are not selected).
pub fn select_support(chain: &ChainOutput, threshold: f64) -> Result<SupportSummary> {
    let draws = &chain.draws;
    if draws.is_empty() {
        return Err(Error::EmptyChain);
    }
    let m = draws.len() as f64;
    let p = draws[0].theta.len();
    let betas: Vec<Vec<f64>> = draws.iter().map(beta_from_state).collect();
    let mut coefficients = Vec::with_capacity(p);
    let mut selected = Vec::new();
    let mut beta_hat = vec![0.0; p];
    for j in 0..p {
        let mut vals: Vec<f64> = draws
            .iter()
            .zip(&betas)
            .filter(|(d, _)| d.z[j])
            .map(|(_, b)| b[j])
            .collect();
        let inclusion = vals.len() as f64 / m;
        let is_sel = inclusion > threshold;
        let (mean, median, ci95) = if vals.is_empty() {
            (None, None, None)
        } else {
            vals.sort_by(f64::total_cmp);
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            (
                Some(mean),
                Some(sorted_quantile(&vals, 0.5)),
                Some((sorted_quantile(&vals, 0.025), sorted_quantile(&vals, 0.975))),
            )
        };
        if is_sel {
            selected.push(j);
            beta_hat[j] = mean.unwrap_or(0.0);
        }
        coefficients.push(CoefficientSummary {
            inclusion,
            selected: is_sel,
            mean,
            median,
            ci95,
        });
    }
    let shifts = draws[0].shifts.as_ref().map(|s0| {
        let n = s0.gamma.len();
        let mut inclusion = vec![0.0; n];
        let mut sum = vec![0.0; n];
        for d in draws {
            let s = d.shifts.as_ref().expect("shift block in every draw");
            for i in 0..n {
                if s.active[i] {
                    inclusion[i] += 1.0;
                    sum[i] += s.gamma[i];
                }
            }
        }
        let mut selected = Vec::new();
        let mut gamma_hat = vec![0.0; n];
        for i in 0..n {
            if inclusion[i] / m > threshold {
                selected.push(i);
                gamma_hat[i] = sum[i] / inclusion[i];
            }
            inclusion[i] /= m;
        }
        ShiftSummary {
            inclusion,
            selected,
            gamma_hat,
        }
    });
    let mixing = draws[0].mixing.as_ref().map(|_| {
        let nu = draws.iter().map(|d| d.mixing.as_ref().unwrap().nu).sum::<f64>() / m;
        let rho = draws.iter().map(|d| d.mixing.as_ref().unwrap().rho).sum::<f64>() / m;
        (nu, rho)
    });
    Ok(SupportSummary {
        threshold,
        selected,
        coefficients,
        beta_hat,
        eta_mean: draws.iter().map(|d| d.eta.get()).sum::<f64>() / m,
        sigma2_mean: draws.iter().map(|d| d.sigma2).sum::<f64>() / m,
        shifts,
        mixing,
    })
}

/// Fitted median `x_i' beta_hat` for every row.
pub fn fitted_medians(data: &Dataset, beta_hat: &[f64]) -> Vec<f64> {
    (0..data.n()).map(|i| dot(data.row(i), beta_hat)).collect()
}
