//! Selection scores, the influence ratio, posterior predictive loss and
//! plot-ready residual / quantile tables.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{beta_from_state, dot, Dataset, FittedModel};
use crate::samplers::{select_support, ChainOutput};
use crate::transform::Eta;

/// Replication-averaged masking, swamping and joint-detection rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionMetrics {
    pub masking: f64,
    pub swamping: f64,
    pub n_selected: f64,
    pub joint_detection: f64,
}

/// Scores one selected set per replication against the truth.
///
/// With no true zeros the swamping rate is 0 by convention.
pub fn selection_metrics(true_beta: &[f64], selected: &[Vec<usize>]) -> Result<SelectionMetrics> {
    let truth: Vec<bool> = true_beta.iter().map(|&b| b != 0.0).collect();
    mask_metrics(&truth, selected)
}

/// As [`selection_metrics`] with the true support given as a mask.
pub fn mask_metrics(truth: &[bool], selected: &[Vec<usize>]) -> Result<SelectionMetrics> {
    let n_true = truth.iter().filter(|&&t| t).count();
    if n_true == 0 {
        return Err(Error::Undefined(
            "masking is undefined when every true coefficient is zero".into(),
        ));
    }
    if selected.is_empty() {
        return Err(Error::Invalid("no replications to score".into()));
    }
    let n_zero = truth.len() - n_true;
    let (mut m, mut s, mut k, mut jd) = (0.0, 0.0, 0.0, 0.0);
    for sel in selected {
        let mut hit = vec![false; truth.len()];
        for &j in sel {
            if j >= truth.len() {
                return Err(Error::Dimension(format!(
                    "selected index {j} outside 0..{}",
                    truth.len()
                )));
            }
            hit[j] = true;
        }
        let missed = (0..truth.len()).filter(|&j| truth[j] && !hit[j]).count();
        let swamped = (0..truth.len()).filter(|&j| !truth[j] && hit[j]).count();
        let mr = missed as f64 / n_true as f64;
        m += mr;
        if n_zero > 0 {
            s += swamped as f64 / n_zero as f64;
        }
        k += hit.iter().filter(|&&h| h).count() as f64;
        if missed == 0 {
            jd += 1.0;
        }
    }
    let r = selected.len() as f64;
    Ok(SelectionMetrics {
        masking: m / r,
        swamping: s / r,
        n_selected: k / r,
        joint_detection: jd / r,
    })
}

/// The influence quantity, implemented term for term with a positive quadratic term:
/// `sum (g(y) - g(m))^2 / (2 s^2) - n/2 log(2 pi s^2) + (eta - 1) sum log|y|`.
pub fn l_value(fitted: &[f64], y: &[f64], eta0: Eta, sigma0: f64) -> Result<f64> {
    if fitted.len() != y.len() {
        return Err(Error::Dimension("fitted and response lengths differ".into()));
    }
    let s2 = sigma0 * sigma0;
    let mut quad = 0.0;
    let mut jac = 0.0;
    for (i, (&m, &yi)) in fitted.iter().zip(y).enumerate() {
        if yi == 0.0 {
            return Err(Error::ZeroResponse { index: i });
        }
        quad += (eta0.forward(yi) - eta0.forward(m)).powi(2);
        jac += yi.abs().ln();
    }
    let n = y.len() as f64;
    Ok(quad / (2.0 * s2) - n / 2.0 * (2.0 * std::f64::consts::PI * s2).ln() + (eta0.get() - 1.0) * jac)
}

/// `L / L* - 1` from fitted medians (which may include an intercept).
pub fn l_ratio_fitted(
    fitted: &[f64],
    data: &Dataset,
    beta0: &[f64],
    eta0: Eta,
    sigma0: f64,
) -> Result<f64> {
    let l = l_value(fitted, data.y(), eta0, sigma0)?;
    let truth = data.linear_predictor(beta0);
    let l_star = l_value(&truth, data.y(), eta0, sigma0)?;
    if l_star == 0.0 {
        return Err(Error::Undefined("L* is zero".into()));
    }
    Ok(l / l_star - 1.0)
}

pub fn l_ratio(est_beta: &[f64], data: &Dataset, beta0: &[f64], eta0: Eta, sigma0: f64) -> Result<f64> {
    if est_beta.len() != data.p() || beta0.len() != data.p() {
        return Err(Error::Dimension("coefficient length differs from p".into()));
    }
    l_ratio_fitted(&data.linear_predictor(est_beta), data, beta0, eta0, sigma0)
}

/// Posterior predictive loss: the posterior mean of the summed squared
/// transformed-scale residuals (shift-corrected when shifts are present).
///
/// By default every draw uses its own `eta` and `beta`; with `plug_in` the
/// posterior-mean `eta` and thresholded `beta` are used in every draw.
pub fn ppl(chain: &ChainOutput, data: &Dataset, plug_in: bool) -> Result<f64> {
    if chain.draws.is_empty() {
        return Err(Error::EmptyChain);
    }
    let plug = if plug_in {
        let s = select_support(chain, 0.5)?;
        Some((Eta::new(s.eta_mean)?, data.linear_predictor(&s.beta_hat)))
    } else {
        None
    };
    let mut total = 0.0;
    for d in &chain.draws {
        let (eta, xb) = match &plug {
            Some((e, xb)) => (*e, xb.clone()),
            None => (d.eta, data.linear_predictor(&beta_from_state(d))),
        };
        let mut ss = 0.0;
        for i in 0..data.n() {
            let g = d.shifts.as_ref().map_or(0.0, |s| s.gamma[i]);
            ss += (eta.forward(data.y()[i]) - eta.forward(xb[i]) - g).powi(2);
        }
        total += ss;
    }
    Ok(total / chain.draws.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualKind {
    /// `y - x'beta_hat`.
    Raw,
    /// `g(y) - g(x'beta_hat) - gamma_hat`.
    Transformed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QqPoint {
    pub observed: f64,
    pub normal: f64,
}

/// Sorted residuals against standard-normal quantiles at `(i - 0.5)/n`.
pub fn residual_table(
    fit: &FittedModel,
    data: &Dataset,
    kind: ResidualKind,
    gamma_hat: Option<&[f64]>,
) -> Vec<QqPoint> {
    let n = data.n();
    let mut res: Vec<f64> = (0..n)
        .map(|i| {
            let m = dot(data.row(i), &fit.beta);
            let y = data.y()[i];
            match kind {
                ResidualKind::Raw => y - m,
                ResidualKind::Transformed => {
                    fit.eta.forward(y) - fit.eta.forward(m) - gamma_hat.map_or(0.0, |g| g[i])
                }
            }
        })
        .collect();
    res.sort_by(f64::total_cmp);
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    res.into_iter()
        .enumerate()
        .map(|(i, observed)| QqPoint {
            observed,
            normal: std.inverse_cdf((i as f64 + 0.5) / n as f64),
        })
        .collect()
}

/// Least-squares slope of a Q-Q table (observed on normal).
pub fn qq_slope(points: &[QqPoint]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.normal).sum::<f64>() / n;
    let my = points.iter().map(|p| p.observed).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.normal - mx) * (p.observed - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.normal - mx).powi(2)).sum();
    sxy / sxx
}

/// Largest distance of a Q-Q table from the 45-degree line after scaling
/// the residuals by `scale`.
pub fn qq_sup_deviation(points: &[QqPoint], scale: f64) -> f64 {
    points
        .iter()
        .map(|p| (p.observed / scale - p.normal).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileRow {
    pub index: usize,
    pub median: f64,
    pub quantiles: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileTable {
    pub alphas: Vec<f64>,
    pub rows: Vec<QuantileRow>,
}

pub fn quantile_curve_table(fit: &FittedModel, data: &Dataset, alphas: &[f64]) -> Result<QuantileTable> {
    if let Some(a) = alphas.iter().find(|&&a| !(a > 0.0 && a < 1.0)) {
        return Err(Error::Domain(format!("alpha {a} outside (0, 1)")));
    }
    // the error quantiles do not depend on x; NI laws need a root search each
    let z: Vec<f64> = alphas.iter().map(|&a| if a == 0.5 { 0.0 } else { fit.law.quantile(a) }).collect();
    let rows = (0..data.n())
        .map(|i| {
            let median = fit.median(data.row(i));
            let t = fit.eta.forward(median);
            QuantileRow {
                index: i,
                median,
                quantiles: alphas
                    .iter()
                    .zip(&z)
                    .map(|(&a, &z)| if a == 0.5 { median } else { fit.eta.inverse(t + z) })
                    .collect(),
            }
        })
        .collect();
    Ok(QuantileTable {
        alphas: alphas.to_vec(),
        rows,
    })
}

/// Shortest decimal that round-trips.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

pub fn write_qq_csv<W: Write>(points: &[QqPoint], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["observed", "normal_quantile"])?;
    for p in points {
        w.write_record([fmt_f64(p.observed), fmt_f64(p.normal)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_quantile_csv<W: Write>(table: &QuantileTable, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header = vec!["index".to_string(), "median".to_string()];
    header.extend(table.alphas.iter().map(|a| format!("q{}", fmt_f64(*a))));
    w.write_record(&header)?;
    for r in &table.rows {
        let mut rec = vec![r.index.to_string(), fmt_f64(r.median)];
        rec.extend(r.quantiles.iter().map(|q| fmt_f64(*q)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ErrorLaw, ModelSpec, ParamState, PriorHyper, ShiftState};
    use crate::samplers::McmcConfig;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;
    use std::time::Duration;

    const B0: [f64; 8] = [3.0, 1.5, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0];

    #[test]
    fn selection_counts() {
        let m = selection_metrics(&B0, &[vec![0, 1, 4]]).unwrap();
        assert_eq!((m.masking, m.swamping, m.joint_detection), (0.0, 0.0, 1.0));
        let m = selection_metrics(&B0, &[vec![0, 1, 4, 6]]).unwrap();
        assert_eq!((m.masking, m.swamping, m.joint_detection), (0.0, 0.2, 1.0));
        let m = selection_metrics(&B0, &[vec![0, 1]]).unwrap();
        assert!((m.masking - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!((m.swamping, m.joint_detection), (0.0, 0.0));
        assert!(selection_metrics(&[0.0; 3], &[vec![]]).is_err());
    }

    proptest! {
        #[test]
        fn metrics_are_rates_and_order_free(sel in prop::collection::vec(prop::collection::btree_set(0usize..8, 0..8), 1..12)) {
            let sets: Vec<Vec<usize>> = sel.iter().map(|s| s.iter().copied().collect()).collect();
            let m = selection_metrics(&B0, &sets).unwrap();
            for v in [m.masking, m.swamping, m.joint_detection] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let masked = sets.iter().filter(|s| ![0, 1, 4].iter().all(|j| s.contains(j))).count();
            prop_assert!((m.joint_detection - (1.0 - masked as f64 / sets.len() as f64)).abs() < 1e-12);
            let mut rev = sets.clone();
            rev.reverse();
            let r = selection_metrics(&B0, &rev).unwrap();
            prop_assert!((r.masking - m.masking).abs() < 1e-12);
            prop_assert!((r.swamping - m.swamping).abs() < 1e-12);
        }
    }

    fn data() -> Dataset {
        Dataset::new(
            vec![vec![1.0, 0.5], vec![2.0, -1.0], vec![0.3, 0.2]],
            vec![2.0, 1.5, 0.7],
        )
        .unwrap()
    }

    #[test]
    fn l_ratio_identity_and_sensitivity() {
        let d = data();
        let e = Eta::new(1.8).unwrap();
        assert_eq!(l_ratio(&[1.0, 0.5], &d, &[1.0, 0.5], e, 1.0).unwrap(), 0.0);
        assert_ne!(l_ratio(&[1.1, 0.5], &d, &[1.0, 0.5], e, 1.0).unwrap(), 0.0);
        // Hand evaluation at eta = 1: L = sum r^2/2 - (3/2) log(2 pi).
        let e1 = Eta::ONE;
        let r: [f64; 3] = [2.0 - 1.0, 1.5 - 2.0, 0.7 - 0.3];
        let want = r.iter().map(|v| v * v).sum::<f64>() / 2.0 - 1.5 * (2.0 * std::f64::consts::PI).ln();
        let got = l_value(&[1.0, 2.0, 0.3], d.y(), e1, 1.0).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    fn chain(draws: Vec<ParamState>, spec: ModelSpec) -> ChainOutput {
        ChainOutput {
            spec,
            hyper: PriorHyper::default(),
            config: McmcConfig::default(),
            draws,
            acceptance: BTreeMap::new(),
            wall_time: Duration::ZERO,
        }
    }

    #[test]
    fn ppl_examples() {
        // y = x1 exactly with beta = (1, 0) at eta = 1.
        let d = Dataset::new(vec![vec![2.0, 0.0], vec![-1.0, 1.0]], vec![2.0, -1.0]).unwrap();
        let mut s = ParamState::initial(&d, ModelSpec::TbsSg, &PriorHyper::default());
        s.z[0] = true;
        s.theta[0] = 0.0; // g_1(1) = 0
        assert_eq!(ppl(&chain(vec![s.clone()], ModelSpec::TbsSg), &d, false).unwrap(), 0.0);

        // With beta = 0 the residuals are y - gamma; shifts give sums of squares 4 and 6.
        let mut so = ParamState::initial(&d, ModelSpec::TbsoSg, &PriorHyper::default());
        so.shifts = Some(ShiftState {
            gamma: vec![0.0, 0.0],
            active: vec![false, false],
            pi_gamma: 0.9,
        });
        let mut s4 = so.clone();
        s4.shifts.as_mut().unwrap().gamma[0] = 2.0 - 3f64.sqrt();
        s4.shifts.as_mut().unwrap().active[0] = true;
        let mut s6 = so.clone();
        s6.shifts.as_mut().unwrap().gamma[0] = 2.0 - 5f64.sqrt();
        s6.shifts.as_mut().unwrap().active[0] = true;
        let v = ppl(&chain(vec![s4, s6], ModelSpec::TbsoSg), &d, false).unwrap();
        assert!((v - 5.0).abs() < 1e-12, "{v}");

        let mut all = so;
        {
            let sh = all.shifts.as_mut().unwrap();
            sh.gamma = vec![2.0, -1.0];
            sh.active = vec![true, true];
        }
        assert!(ppl(&chain(vec![all], ModelSpec::TbsoSg), &d, false).unwrap().abs() < 1e-12);
        assert_eq!(ppl(&chain(vec![], ModelSpec::TbsSg), &d, false), Err(Error::EmptyChain));
    }

    #[test]
    fn qq_table_shapes() {
        let d = Dataset::new(vec![vec![1.0]], vec![3.0]);
        // A one-row dataset is rejected upstream; build the Q-Q pair directly.
        assert!(d.is_err());
        let n = 1000;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![1.0]).collect();
        let y: Vec<f64> = (0..n)
            .map(|_| 10.0 + crate::dist::std_normal(&mut rng))
            .collect();
        let d = Dataset::new(rows, y).unwrap();
        let fit = FittedModel {
            eta: Eta::ONE,
            beta: vec![10.0],
            law: ErrorLaw::Normal { sigma: 1.0 },
        };
        let t = residual_table(&fit, &d, ResidualKind::Raw, None);
        assert_eq!(t.len(), n);
        let slope = qq_slope(&t);
        assert!((0.9..=1.1).contains(&slope), "{slope}");
        assert!(t.windows(2).all(|w| w[0].observed <= w[1].observed));
        let two = Dataset::new(vec![vec![1.0], vec![1.0]], vec![1.0, 3.0]).unwrap();
        let t2 = residual_table(&fit, &two, ResidualKind::Transformed, Some(&[0.0, 0.0]));
        assert!((t2[0].normal + t2[1].normal).abs() < 1e-15);
    }

    #[test]
    fn quantile_table_brackets_median() {
        let d = data();
        let fit = FittedModel {
            eta: Eta::new(0.5).unwrap(),
            beta: vec![1.0, 0.2],
            law: ErrorLaw::StudentT { sigma: 0.7, nu: 4.0 },
        };
        let t = quantile_curve_table(&fit, &d, &[0.25, 0.5, 0.75]).unwrap();
        for r in &t.rows {
            assert_eq!(r.quantiles[1], r.median);
            assert!(r.quantiles[0] < r.median && r.median < r.quantiles[2]);
        }
        assert!(quantile_curve_table(&fit, &d, &[1.0]).is_err());
        let mut buf = Vec::new();
        write_quantile_csv(&t, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("index,median,q0.25,q0.5,q0.75\n"));
    }
}
