//! Data, model variants, parameter state and the posterior density pieces.
//!
//! Coefficients are carried on the transformed scale, `theta_j = g_eta(beta_j)`.
//! Under that parameterisation the slab is a plain `N(0, sigma_beta2)` and the
//! original coefficients are recovered with `g_eta^{-1}`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dist::{
    ln_beta_pdf, ln_gamma_pdf, ln_inv_gamma_pdf, ln_normal_pdf, sample_beta, sample_gamma,
    sample_inv_gamma, std_normal, LN_2PI,
};
use crate::error::{Error, Result};
use crate::quad;
use crate::transform::Eta;

/// Per-column standardisation applied at ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaling {
    pub column: String,
    pub mean: f64,
    pub scale: f64,
}

/// Covariates (row-major `n x p`) and the response on its original scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    n: usize,
    p: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    #[serde(default)]
    pub covariate_names: Vec<String>,
    #[serde(default)]
    pub response_name: Option<String>,
    #[serde(default)]
    pub scaling: Vec<ColumnScaling>,
}

impl Dataset {
    pub fn new(rows: Vec<Vec<f64>>, y: Vec<f64>) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::Dimension("ragged covariate rows".into()));
        }
        Self::from_row_major(n, p, rows.into_iter().flatten().collect(), y)
    }

    pub fn from_row_major(n: usize, p: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if n < 2 {
            return Err(Error::Invalid(format!("need at least 2 observations, got {n}")));
        }
        if p < 1 {
            return Err(Error::Invalid("need at least one covariate".into()));
        }
        if x.len() != n * p || y.len() != n {
            return Err(Error::Dimension(format!(
                "x has {} entries and y has {}, expected {}x{} and {}",
                x.len(),
                y.len(),
                n,
                p,
                n
            )));
        }
        if let Some(index) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "covariate",
                index: index / p,
            });
        }
        for (index, &v) in y.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: "response",
                    index,
                });
            }
            if v == 0.0 {
                return Err(Error::ZeroResponse { index });
            }
        }
        Ok(Dataset {
            n,
            p,
            x,
            y,
            covariate_names: (0..p).map(|j| format!("x{}", j + 1)).collect(),
            response_name: None,
            scaling: Vec::new(),
        })
    }

    /// A dataset with `p` covariates and no observations. Running a chain on it
    /// samples the prior.
    pub fn prior_only(p: usize) -> Self {
        Dataset {
            n: 0,
            p,
            x: Vec::new(),
            y: Vec::new(),
            covariate_names: (0..p).map(|j| format!("x{}", j + 1)).collect(),
            response_name: None,
            scaling: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    #[inline]
    pub fn x(&self, i: usize, j: usize) -> f64 {
        self.x[i * self.p + j]
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x_row_major(&self) -> &[f64] {
        &self.x
    }

    /// Replace the response, keeping covariates. Zero or non-finite values are rejected.
    pub fn with_response(&self, y: Vec<f64>) -> Result<Self> {
        let mut d = Self::from_row_major(self.n, self.p, self.x.clone(), y)?;
        d.covariate_names = self.covariate_names.clone();
        d.response_name = self.response_name.clone();
        d.scaling = self.scaling.clone();
        Ok(d)
    }

    /// Rows selected by `idx`, in order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let x = idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        let y = idx.iter().map(|&i| self.y[i]).collect();
        let mut d = Self::from_row_major(idx.len(), self.p, x, y)?;
        d.covariate_names = self.covariate_names.clone();
        Ok(d)
    }

    pub fn linear_predictor(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| dot(self.row(i), beta)).collect()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Normal-independent mixing families for the error scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixingKind {
    StudentT,
    Slash,
    Contaminated,
}

/// The five model variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelSpec {
    #[serde(rename = "tbs")]
    TbsSg,
    #[serde(rename = "tbso")]
    TbsoSg,
    #[serde(rename = "tbst")]
    TbstSg,
    #[serde(rename = "tbss")]
    TbssSg,
    #[serde(rename = "tbscn")]
    TbscnSg,
}

impl ModelSpec {
    pub const ALL: [ModelSpec; 5] = [
        ModelSpec::TbsSg,
        ModelSpec::TbsoSg,
        ModelSpec::TbstSg,
        ModelSpec::TbssSg,
        ModelSpec::TbscnSg,
    ];

    pub fn mixing(self) -> Option<MixingKind> {
        match self {
            ModelSpec::TbstSg => Some(MixingKind::StudentT),
            ModelSpec::TbssSg => Some(MixingKind::Slash),
            ModelSpec::TbscnSg => Some(MixingKind::Contaminated),
            _ => None,
        }
    }

    pub fn has_shifts(self) -> bool {
        self == ModelSpec::TbsoSg
    }

    pub fn label(self) -> &'static str {
        match self {
            ModelSpec::TbsSg => "TBS-SG",
            ModelSpec::TbsoSg => "TBSO-SG",
            ModelSpec::TbstSg => "TBSt-SG",
            ModelSpec::TbssSg => "TBSS-SG",
            ModelSpec::TbscnSg => "TBSCN-SG",
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            ModelSpec::TbsSg => "tbs",
            ModelSpec::TbsoSg => "tbso",
            ModelSpec::TbstSg => "tbst",
            ModelSpec::TbssSg => "tbss",
            ModelSpec::TbscnSg => "tbscn",
        }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ModelSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase().replace(['-', '_'], "");
        let spec = match lower.as_str() {
            "tbs" | "tbssg" => ModelSpec::TbsSg,
            "tbso" | "tbsosg" => ModelSpec::TbsoSg,
            "tbst" | "tbstsg" => ModelSpec::TbstSg,
            "tbss" | "tbsssg" => ModelSpec::TbssSg,
            "tbscn" | "tbscnsg" => ModelSpec::TbscnSg,
            _ => return Err(Error::Invalid(format!("unknown model `{s}`"))),
        };
        Ok(spec)
    }
}

/// Prior hyperparameters for every variant.
///
/// `pi0` and `pi_gamma` are the spike (zero) probabilities, so their Beta
/// priors are written as (zero-weight, nonzero-weight).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorHyper {
    /// Inverse-gamma shape and rate for the error variance.
    pub a: f64,
    pub b: f64,
    /// Beta parameters for `eta / 2`.
    pub c1: f64,
    pub d1: f64,
    pub pi0_a: f64,
    pub pi0_b: f64,
    /// Inverse-gamma hyperprior on the slab variance.
    pub sb_a: f64,
    pub sb_b: f64,
    pub pi_gamma_a: f64,
    pub pi_gamma_b: f64,
    /// Slab variance of the location shifts.
    pub sg2: f64,
    /// Rate of the exponential prior on `nu - 2` (Student-t).
    pub nu_rate: f64,
    pub slash_a: f64,
    pub slash_b: f64,
    pub cn_nu_a: f64,
    pub cn_nu_b: f64,
    pub cn_rho_a: f64,
    pub cn_rho_b: f64,
}

/// Lower end of the Student-t degrees of freedom support.
pub const NU_MIN: f64 = 2.0;

impl Default for PriorHyper {
    fn default() -> Self {
        PriorHyper {
            a: 2.0,
            b: 2.0,
            c1: 1.0,
            d1: 1.0,
            pi0_a: 1.0,
            pi0_b: 1.0,
            sb_a: 2.0,
            sb_b: 2.0,
            pi_gamma_a: 9.0,
            pi_gamma_b: 1.0,
            sg2: 100.0,
            nu_rate: 0.1,
            slash_a: 1.0,
            slash_b: 0.1,
            cn_nu_a: 1.0,
            cn_nu_b: 9.0,
            cn_rho_a: 1.0,
            cn_rho_b: 1.0,
        }
    }
}

impl PriorHyper {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("a", self.a),
            ("b", self.b),
            ("c1", self.c1),
            ("d1", self.d1),
            ("pi0_a", self.pi0_a),
            ("pi0_b", self.pi0_b),
            ("sb_a", self.sb_a),
            ("sb_b", self.sb_b),
            ("pi_gamma_a", self.pi_gamma_a),
            ("pi_gamma_b", self.pi_gamma_b),
            ("sg2", self.sg2),
            ("nu_rate", self.nu_rate),
            ("slash_a", self.slash_a),
            ("slash_b", self.slash_b),
            ("cn_nu_a", self.cn_nu_a),
            ("cn_nu_b", self.cn_nu_b),
            ("cn_rho_a", self.cn_rho_a),
            ("cn_rho_b", self.cn_rho_b),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Invalid(format!("hyperparameter {name} = {v} must be > 0")));
            }
        }
        Ok(())
    }
}

/// Sparse location shifts (TBSO only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftState {
    pub gamma: Vec<f64>,
    pub active: Vec<bool>,
    pub pi_gamma: f64,
}

/// Latent precision scales for the normal-independent variants.
///
/// For the contaminated normal `u_i` is `rho` when `contaminated[i]` and `1`
/// otherwise; the flags are empty for the other kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingState {
    pub u: Vec<f64>,
    pub nu: f64,
    pub rho: f64,
    #[serde(default)]
    pub contaminated: Vec<bool>,
}

/// Full MCMC state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamState {
    pub eta: Eta,
    pub sigma2: f64,
    pub theta: Vec<f64>,
    pub z: Vec<bool>,
    pub pi0: f64,
    pub sigma_beta2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shifts: Option<ShiftState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixing: Option<MixingState>,
}

impl ParamState {
    /// Neutral starting point: `eta = 1`, everything excluded, unit scales.
    pub fn initial(data: &Dataset, spec: ModelSpec, hyper: &PriorHyper) -> Self {
        let n = data.n();
        let p = data.p();
        // At eta = 1 the residual from a zero predictor is g1(y) - g1(0) = y.
        let sigma2 = if n >= 2 {
            let m = data.y().iter().sum::<f64>() / n as f64;
            let v = data.y().iter().map(|y| (y - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            if v.is_finite() && v > 0.0 {
                v
            } else {
                1.0
            }
        } else {
            1.0
        };
        let shifts = spec.has_shifts().then(|| ShiftState {
            gamma: vec![0.0; n],
            active: vec![false; n],
            pi_gamma: hyper.pi_gamma_a / (hyper.pi_gamma_a + hyper.pi_gamma_b),
        });
        let mixing = spec.mixing().map(|kind| match kind {
            MixingKind::StudentT => MixingState {
                u: vec![1.0; n],
                nu: NU_MIN + 1.0 / hyper.nu_rate,
                rho: 1.0,
                contaminated: Vec::new(),
            },
            MixingKind::Slash => MixingState {
                u: vec![1.0; n],
                nu: hyper.slash_a / hyper.slash_b,
                rho: 1.0,
                contaminated: Vec::new(),
            },
            MixingKind::Contaminated => MixingState {
                u: vec![1.0; n],
                nu: hyper.cn_nu_a / (hyper.cn_nu_a + hyper.cn_nu_b),
                rho: hyper.cn_rho_a / (hyper.cn_rho_a + hyper.cn_rho_b),
                contaminated: vec![false; n],
            },
        });
        ParamState {
            eta: Eta::ONE,
            sigma2,
            theta: vec![0.0; p],
            z: vec![false; p],
            pi0: 0.5,
            sigma_beta2: 1.0,
            shifts,
            mixing,
        }
    }

    pub fn n_active(&self) -> usize {
        self.z.iter().filter(|&&b| b).count()
    }

    /// Structural checks against a model and problem size.
    pub fn validate(&self, spec: ModelSpec, n: usize, p: usize) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::StateMismatch {
                model: spec.label(),
                reason,
            })
        };
        if self.theta.len() != p || self.z.len() != p {
            return fail(format!("coefficient vectors must have length {p}"));
        }
        if self.z.iter().zip(&self.theta).any(|(&z, &t)| !z && t != 0.0) {
            return fail("excluded coefficient with nonzero theta".into());
        }
        if !(self.sigma2 > 0.0 && self.sigma_beta2 > 0.0 && self.pi0 > 0.0 && self.pi0 < 1.0) {
            return fail("variance or spike probability out of range".into());
        }
        match (&self.shifts, spec.has_shifts()) {
            (Some(s), true) => {
                if s.gamma.len() != n || s.active.len() != n {
                    return fail(format!("shift vectors must have length {n}"));
                }
                if s.active.iter().zip(&s.gamma).any(|(&a, &g)| !a && g != 0.0) {
                    return fail("inactive shift with nonzero gamma".into());
                }
            }
            (None, false) => {}
            (Some(_), false) => return fail("unexpected shift block".into()),
            (None, true) => return fail("missing shift block".into()),
        }
        match (&self.mixing, spec.mixing()) {
            (Some(m), Some(kind)) => {
                if m.u.len() != n {
                    return fail(format!("mixing scales must have length {n}"));
                }
                match kind {
                    MixingKind::StudentT => {
                        if m.u.iter().any(|&u| u <= 0.0) || m.nu <= NU_MIN {
                            return fail("Student-t scales must be positive, nu > 2".into());
                        }
                    }
                    MixingKind::Slash => {
                        if m.u.iter().any(|&u| u <= 0.0 || u > 1.0) || m.nu <= 0.0 {
                            return fail("slash scales must lie in (0, 1]".into());
                        }
                    }
                    MixingKind::Contaminated => {
                        if m.contaminated.len() != n || !(m.rho > 0.0 && m.rho <= 1.0) {
                            return fail("contaminated-normal flags or rho invalid".into());
                        }
                        let ok = m
                            .u
                            .iter()
                            .zip(&m.contaminated)
                            .all(|(&u, &c)| u == if c { m.rho } else { 1.0 });
                        if !ok {
                            return fail("u must equal rho on contaminated rows, 1 elsewhere".into());
                        }
                    }
                }
            }
            (None, None) => {}
            (Some(_), None) => return fail("unexpected mixing block".into()),
            (None, Some(_)) => return fail("missing mixing block".into()),
        }
        Ok(())
    }
}

/// Coefficients on the original scale.
pub fn beta_from_state(state: &ParamState) -> Vec<f64> {
    state
        .theta
        .iter()
        .zip(&state.z)
        .map(|(&t, &z)| if z { state.eta.inverse(t) } else { 0.0 })
        .collect()
}

/// Location shift of row `i`, zero without a shift block.
#[inline]
pub(crate) fn shift_of(state: &ParamState, i: usize) -> f64 {
    state.shifts.as_ref().map_or(0.0, |s| s.gamma[i])
}

#[inline]
pub(crate) fn scale_of(state: &ParamState, i: usize) -> f64 {
    state.mixing.as_ref().map_or(1.0, |m| m.u[i])
}

/// Data log-likelihood on the original response scale, Jacobian included.
pub fn log_likelihood(state: &ParamState, data: &Dataset, spec: ModelSpec) -> Result<f64> {
    state.validate(spec, data.n(), data.p())?;
    let beta = beta_from_state(state);
    let eta = state.eta;
    let mut ll = 0.0;
    for i in 0..data.n() {
        let y = data.y()[i];
        let mean = eta.forward(dot(data.row(i), &beta)) + shift_of(state, i);
        let var = state.sigma2 / scale_of(state, i);
        let term = ln_normal_pdf(eta.forward(y), mean, var) + (eta.get() - 1.0) * y.abs().ln();
        if !term.is_finite() {
            return Err(Error::NonFinite {
                what: "log-likelihood term",
                index: i,
            });
        }
        ll += term;
    }
    Ok(ll)
}

/// Log prior density of the whole state.
pub fn log_prior(state: &ParamState, spec: ModelSpec, hyper: &PriorHyper) -> Result<f64> {
    let n = state
        .shifts
        .as_ref()
        .map(|s| s.gamma.len())
        .or_else(|| state.mixing.as_ref().map(|m| m.u.len()))
        .unwrap_or(0);
    state.validate(spec, n, state.theta.len())?;
    let mut lp = 0.0;
    for (&t, &z) in state.theta.iter().zip(&state.z) {
        lp += if z {
            (1.0 - state.pi0).ln() + ln_normal_pdf(t, 0.0, state.sigma_beta2)
        } else {
            state.pi0.ln()
        };
    }
    lp += ln_inv_gamma_pdf(state.sigma2, hyper.a, hyper.b);
    lp += ln_beta_pdf(state.eta.get() / 2.0, hyper.c1, hyper.d1) - std::f64::consts::LN_2;
    lp += ln_beta_pdf(state.pi0, hyper.pi0_a, hyper.pi0_b);
    lp += ln_inv_gamma_pdf(state.sigma_beta2, hyper.sb_a, hyper.sb_b);
    if let Some(s) = &state.shifts {
        for (&g, &a) in s.gamma.iter().zip(&s.active) {
            lp += if a {
                (1.0 - s.pi_gamma).ln() + ln_normal_pdf(g, 0.0, hyper.sg2)
            } else {
                s.pi_gamma.ln()
            };
        }
        lp += ln_beta_pdf(s.pi_gamma, hyper.pi_gamma_a, hyper.pi_gamma_b);
    }
    if let (Some(m), Some(kind)) = (&state.mixing, spec.mixing()) {
        lp += log_mixing_density(m, kind) + log_mixing_prior(m, kind, hyper);
    }
    Ok(lp)
}

/// `sum_i log H(u_i | nu)` for the given family.
pub fn log_mixing_density(m: &MixingState, kind: MixingKind) -> f64 {
    match kind {
        MixingKind::StudentT => m
            .u
            .iter()
            .map(|&u| ln_gamma_pdf(u, m.nu / 2.0, m.nu / 2.0))
            .sum(),
        MixingKind::Slash => m
            .u
            .iter()
            .map(|&u| {
                if u > 0.0 && u <= 1.0 {
                    m.nu.ln() + (m.nu - 1.0) * u.ln()
                } else {
                    f64::NEG_INFINITY
                }
            })
            .sum(),
        MixingKind::Contaminated => m
            .contaminated
            .iter()
            .map(|&c| if c { m.nu.ln() } else { (1.0 - m.nu).ln() })
            .sum(),
    }
}

/// Prior on the mixing parameters (`nu`, and `rho` for the contaminated normal).
pub fn log_mixing_prior(m: &MixingState, kind: MixingKind, hyper: &PriorHyper) -> f64 {
    match kind {
        MixingKind::StudentT => {
            if m.nu > NU_MIN {
                hyper.nu_rate.ln() - hyper.nu_rate * (m.nu - NU_MIN)
            } else {
                f64::NEG_INFINITY
            }
        }
        MixingKind::Slash => ln_gamma_pdf(m.nu, hyper.slash_a, hyper.slash_b),
        MixingKind::Contaminated => {
            ln_beta_pdf(m.nu, hyper.cn_nu_a, hyper.cn_nu_b)
                + ln_beta_pdf(m.rho, hyper.cn_rho_a, hyper.cn_rho_b)
        }
    }
}

pub fn log_posterior(
    state: &ParamState,
    data: &Dataset,
    spec: ModelSpec,
    hyper: &PriorHyper,
) -> Result<f64> {
    Ok(log_likelihood(state, data, spec)? + log_prior(state, spec, hyper)?)
}

/// Fitted conditional median `x' beta`.
pub fn median_predict(x: &[f64], beta: &[f64]) -> f64 {
    assert_eq!(x.len(), beta.len(), "covariate and coefficient lengths differ");
    dot(x, beta)
}

/// Distribution of the transformed-scale error `U^{-1/2} e`, `e ~ N(0, sigma2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ErrorLaw {
    Normal { sigma: f64 },
    StudentT { sigma: f64, nu: f64 },
    Slash { sigma: f64, nu: f64 },
    Contaminated { sigma: f64, nu: f64, rho: f64 },
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

impl ErrorLaw {
    pub fn from_state(state: &ParamState, spec: ModelSpec) -> Self {
        let sigma = state.sigma2.sqrt();
        match (spec.mixing(), &state.mixing) {
            (Some(MixingKind::StudentT), Some(m)) => ErrorLaw::StudentT { sigma, nu: m.nu },
            (Some(MixingKind::Slash), Some(m)) => ErrorLaw::Slash { sigma, nu: m.nu },
            (Some(MixingKind::Contaminated), Some(m)) => ErrorLaw::Contaminated {
                sigma,
                nu: m.nu,
                rho: m.rho,
            },
            _ => ErrorLaw::Normal { sigma },
        }
    }

    pub fn sigma(&self) -> f64 {
        match *self {
            ErrorLaw::Normal { sigma }
            | ErrorLaw::StudentT { sigma, .. }
            | ErrorLaw::Slash { sigma, .. }
            | ErrorLaw::Contaminated { sigma, .. } => sigma,
        }
    }

    /// Marginal CDF, integrating the normal CDF over the mixing law where needed.
    pub fn cdf(&self, z: f64) -> f64 {
        match *self {
            ErrorLaw::Normal { sigma } => std_normal_cdf(z / sigma),
            ErrorLaw::Contaminated { sigma, nu, rho } => {
                nu * std_normal_cdf(z * rho.sqrt() / sigma) + (1.0 - nu) * std_normal_cdf(z / sigma)
            }
            ErrorLaw::Slash { sigma, nu } => {
                // With w = u^nu the mixing law is uniform on (0, 1).
                let f = |w: f64| std_normal_cdf(z * w.powf(0.5 / nu) / sigma);
                quad::integrate(f, 0.0, 1.0, &[], 1e-13, 1e-13, 2000).value
            }
            ErrorLaw::StudentT { sigma, nu } => {
                // u = e^s with u ~ Gamma(nu/2, rate nu/2).
                let k = nu / 2.0;
                let log_norm = k * k.ln() - statrs::function::gamma::ln_gamma(k);
                let f = |s: f64| {
                    let u = s.exp();
                    let log_w = log_norm + k * s - k * u;
                    std_normal_cdf(z * (0.5 * s).exp() / sigma) * log_w.exp()
                };
                let lo = -(60.0 / k).min(700.0);
                let hi = (2.0 + 60.0 / k).ln() + 3.0;
                quad::integrate(f, lo, hi, &[0.0], 1e-14, 1e-13, 4000).value
            }
        }
    }

    /// `alpha`-quantile; the mixed laws are inverted by bisection.
    pub fn quantile(&self, alpha: f64) -> f64 {
        assert!(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0, 1)");
        if alpha == 0.5 {
            return 0.0;
        }
        let sigma = self.sigma();
        if let ErrorLaw::Normal { .. } = self {
            return sigma * Normal::new(0.0, 1.0).unwrap().inverse_cdf(alpha);
        }
        let mut hi = sigma;
        while self.cdf(hi) < alpha.max(1.0 - alpha) {
            hi *= 2.0;
            if hi > 1e12 * sigma {
                break;
            }
        }
        let (mut lo, mut hi) = if alpha > 0.5 { (0.0, hi) } else { (-hi, 0.0) };
        while hi - lo > 1e-10 * sigma.max(1e-300) {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < alpha {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Point summary used for prediction: `eta`, original-scale coefficients, error law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub eta: Eta,
    pub beta: Vec<f64>,
    pub law: ErrorLaw,
}

impl FittedModel {
    pub fn from_state(state: &ParamState, spec: ModelSpec) -> Self {
        FittedModel {
            eta: state.eta,
            beta: beta_from_state(state),
            law: ErrorLaw::from_state(state, spec),
        }
    }

    pub fn median(&self, x: &[f64]) -> f64 {
        median_predict(x, &self.beta)
    }

    /// `g^{-1}(g(x' beta) + z_alpha)`.
    pub fn quantile(&self, x: &[f64], alpha: f64) -> f64 {
        let m = self.median(x);
        if alpha == 0.5 {
            return m;
        }
        self.eta
            .inverse(self.eta.forward(m) + self.law.quantile(alpha))
    }
}

/// Conditional `alpha`-quantile of the response at `x` under `state`.
pub fn quantile_predict(x: &[f64], state: &ParamState, spec: ModelSpec, alpha: f64) -> f64 {
    FittedModel::from_state(state, spec).quantile(x, alpha)
}

/// Draws a full state from the prior for a problem with `n` rows and `p` covariates.
pub fn sample_prior<R: Rng + ?Sized>(
    spec: ModelSpec,
    hyper: &PriorHyper,
    n: usize,
    p: usize,
    rng: &mut R,
) -> ParamState {
    let eta = loop {
        if let Ok(e) = Eta::new(2.0 * sample_beta(rng, hyper.c1, hyper.d1)) {
            break e;
        }
    };
    let pi0 = sample_beta(rng, hyper.pi0_a, hyper.pi0_b);
    let sigma_beta2 = sample_inv_gamma(rng, hyper.sb_a, hyper.sb_b);
    let mut z = vec![false; p];
    let mut theta = vec![0.0; p];
    for j in 0..p {
        if rng.gen::<f64>() >= pi0 {
            z[j] = true;
            theta[j] = sigma_beta2.sqrt() * std_normal(rng);
        }
    }
    let sigma2 = sample_inv_gamma(rng, hyper.a, hyper.b);
    let shifts = spec.has_shifts().then(|| {
        let pi_gamma = sample_beta(rng, hyper.pi_gamma_a, hyper.pi_gamma_b);
        let mut gamma = vec![0.0; n];
        let mut active = vec![false; n];
        for i in 0..n {
            if rng.gen::<f64>() >= pi_gamma {
                active[i] = true;
                gamma[i] = hyper.sg2.sqrt() * std_normal(rng);
            }
        }
        ShiftState {
            gamma,
            active,
            pi_gamma,
        }
    });
    let mixing = spec.mixing().map(|kind| match kind {
        MixingKind::StudentT => {
            let nu = NU_MIN + sample_gamma(rng, 1.0, hyper.nu_rate);
            let u = (0..n).map(|_| sample_gamma(rng, nu / 2.0, nu / 2.0)).collect();
            MixingState {
                u,
                nu,
                rho: 1.0,
                contaminated: Vec::new(),
            }
        }
        MixingKind::Slash => {
            let nu = sample_gamma(rng, hyper.slash_a, hyper.slash_b);
            let u = (0..n)
                .map(|_| {
                    rng.gen::<f64>()
                        .max(f64::MIN_POSITIVE)
                        .powf(1.0 / nu)
                        .max(f64::MIN_POSITIVE)
                })
                .collect();
            MixingState {
                u,
                nu,
                rho: 1.0,
                contaminated: Vec::new(),
            }
        }
        MixingKind::Contaminated => {
            let nu = sample_beta(rng, hyper.cn_nu_a, hyper.cn_nu_b);
            let rho = sample_beta(rng, hyper.cn_rho_a, hyper.cn_rho_b);
            let contaminated: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < nu).collect();
            let u = contaminated
                .iter()
                .map(|&c| if c { rho } else { 1.0 })
                .collect();
            MixingState {
                u,
                nu,
                rho,
                contaminated,
            }
        }
    });
    ParamState {
        eta,
        sigma2,
        theta,
        z,
        pi0,
        sigma_beta2,
        shifts,
        mixing,
    }
}

/// Forward simulation of the response given covariate rows (row-major, `p` wide).
///
/// Zero draws are redrawn; non-finite draws are an error.
pub fn simulate_response<R: Rng + ?Sized>(
    state: &ParamState,
    x: &[f64],
    p: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n = x.len() / p.max(1);
    let beta = beta_from_state(state);
    let eta = state.eta;
    let sigma = state.sigma2.sqrt();
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let m = eta.forward(dot(&x[i * p..(i + 1) * p], &beta)) + shift_of(state, i);
        let s = sigma / scale_of(state, i).sqrt();
        let mut tries = 0;
        let v = loop {
            let v = eta.inverse(m + s * std_normal(rng));
            if v != 0.0 || tries > 100 {
                break v;
            }
            tries += 1;
        };
        if !v.is_finite() || v == 0.0 {
            return Err(Error::NonFinite {
                what: "simulated response",
                index: i,
            });
        }
        y.push(v);
    }
    Ok(y)
}

/// Log normal density of a residual with the variance divided by `u`.
#[inline]
pub(crate) fn ln_resid_density(r: f64, sigma2: f64, u: f64) -> f64 {
    -0.5 * (LN_2PI + sigma2.ln() - u.ln()) - 0.5 * u * r * r / sigma2
}
