use super::*;
use crate::dist::ln_inv_gamma_pdf;
use crate::quad::integrate;

fn sim(n: usize, p: usize, beta01: f64, eta: f64, sigma0: f64, seed: u64) -> Dataset {
    let mut rng = seeded(seed);
    AltDesign::new(n, p).unwrap().simulate(beta01, Eta::new(eta).unwrap(), sigma0, &mut rng).unwrap()
}

/// `ln` of the integral of `exp(f)` over the real line, by brute-force panels
/// around the grid maximum.
fn brute_log_integral<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64) -> f64 {
    let grid = 2000;
    let h = (hi - lo) / grid as f64;
    let mut best = f64::NEG_INFINITY;
    for i in 0..=grid {
        best = best.max(f(lo + h * i as f64));
    }
    let r = integrate(|x| (f(x) - best).exp(), lo, hi, &[], 0.0, 1e-12, 20000);
    best + r.value.ln()
}

/// `ln m_S` with `sigma^2` integrated numerically, given the residual sum of squares as a function of `t`.
fn oracle_sigma(data: &Dataset, eta: Eta, prior: &LabPrior, rss: f64) -> f64 {
    let n = data.n() as f64;
    let lj = log_jacobian(data.y(), eta).unwrap();
    let f = |s: f64| {
        let v = s.exp();
        -0.5 * n * (LN_2PI + s) - rss / (2.0 * v) + ln_inv_gamma_pdf(v, prior.a, prior.b) + s
    };
    lj + brute_log_integral(f, -30.0, 30.0)
}

#[test]
fn design_shape_and_cap() {
    let d = AltDesign::new(6, 4).unwrap();
    let x = d.x();
    assert_eq!(&x[0..4], &[1.0, 1.0, 1.0, 1.0]);
    assert_eq!(&x[4..8], &[-1.0, 1.0, 1.0, 1.0]);
    assert_eq!(AltDesign::max_p(20), 14);
    assert_eq!(AltDesign::max_p(200), 144);
    assert!(AltDesign::new(7, 1).is_err());
    assert!(AltDesign::new(20, 15).is_err());
}

#[test]
fn empty_support_matches_sigma_quadrature() {
    for &e in &[0.5, 1.0, 1.8] {
        let eta = Eta::new(e).unwrap();
        let data = sim(20, 2, 1.5, e, 0.7, 1);
        let prior = LabPrior::default();
        let closed = closed_form_log_m(&data, &[], eta, &prior).unwrap().unwrap();
        let quad = marginal_likelihood_quad(&data, &[], eta, &prior, &QuadOptions::default()).unwrap();
        assert!((closed - quad.log_m).abs() < 1e-12);
        let rss: f64 = data.y().iter().map(|&y| (eta.forward(y) - eta.at_zero()).powi(2)).sum();
        let oracle = oracle_sigma(&data, eta, &prior, rss);
        assert!((closed - oracle).abs() < 1e-8, "eta {e}: {closed} vs {oracle}");
    }
}

#[test]
fn single_column_quadrature_matches_closed_forms() {
    let flat = LabPrior::default().with_kernel(SlabKernel::Flat);
    for &e in &[0.5, 1.0, 1.2, 1.8] {
        let eta = Eta::new(e).unwrap();
        for (seed, beta01) in [(2, 0.0), (3, 2.0)] {
            let data = sim(20, 3, beta01, e, 1.0, seed);
            for col in [0usize, 1] {
                let closed = closed_form_log_m(&data, &[col], eta, &flat).unwrap().unwrap();
                let q = marginal_likelihood_quad(&data, &[col], eta, &flat, &QuadOptions::default())
                    .unwrap();
                assert!(
                    (closed - q.log_m).abs() < 1e-8,
                    "eta {e} column {col}: closed {closed} quad {} err {}",
                    q.log_m,
                    q.log_error
                );
            }
        }
    }
}

#[test]
fn gaussian_kernel_matches_nested_brute_force() {
    let prior = LabPrior::default();
    let e = 1.4;
    let eta = Eta::new(e).unwrap();
    let data = sim(12, 2, 1.0, e, 0.8, 4);
    let z: Vec<f64> = data.y().iter().map(|&y| eta.forward(y)).collect();
    for col in [0usize, 1] {
        let q = marginal_likelihood_quad(&data, &[col], eta, &prior, &QuadOptions::default()).unwrap();
        let outer = |t: f64| {
            let beta = eta.inverse(t);
            let rss: f64 = z
                .iter()
                .enumerate()
                .map(|(i, zi)| (zi - eta.forward(data.x(i, col) * beta)).powi(2))
                .sum();
            oracle_sigma(&data, eta, &prior, rss) + ln_normal_pdf(t, 0.0, prior.sigma_beta2)
        };
        let oracle = brute_log_integral(outer, -25.0, 25.0);
        assert!((q.log_m - oracle).abs() < 1e-6, "column {col}: {} vs {oracle}", q.log_m);
    }
}

#[test]
fn two_dimensional_flat_case_at_eta_one() {
    // At eta = 1 the map (t1, t2) -> (t1 + t2, t2 - t1) decouples the two row
    // types, and the flat-slab integral has the closed form
    // C_n Gamma(nu - 1) / (n sigma_beta2) * A^(1 - nu), A = (SS_odd + SS_even) / 2 + b.
    let flat = LabPrior::default().with_kernel(SlabKernel::Flat);
    let eta = Eta::new(1.0).unwrap();
    let data = sim(16, 2, 1.3, 1.0, 0.9, 5);
    let n = 16.0;
    let z: Vec<f64> = data.y().iter().map(|&y| y - 1.0).collect();
    let ss = |par: usize| {
        let g: Vec<f64> = z.iter().skip(par).step_by(2).copied().collect();
        let m = g.iter().sum::<f64>() / g.len() as f64;
        g.iter().map(|v| (v - m).powi(2)).sum::<f64>()
    };
    let big_a = (ss(0) + ss(1)) / 2.0 + flat.b;
    let nu = n / 2.0 + flat.a;
    let log_cn = -0.5 * n * LN_2PI + flat.a * flat.b.ln() - ln_gamma(flat.a);
    let closed = log_cn + ln_gamma(nu - 1.0) - (n * flat.sigma_beta2).ln() + (1.0 - nu) * big_a.ln();
    let q = marginal_likelihood_quad(&data, &[0, 1], eta, &flat, &QuadOptions::default()).unwrap();
    assert!((q.log_m - closed).abs() < 1e-7, "{} vs {closed}", q.log_m);
}

#[test]
fn two_ones_columns_reduce_to_one_at_eta_one() {
    // g(beta2 + beta3) = t2 + t3 + 1 and t2 + t3 ~ N(0, 2 sigma_beta2), so the
    // pair equals a single column with doubled slab variance on y - 1.
    let prior = LabPrior::default();
    let eta = Eta::new(1.0).unwrap();
    let data = sim(14, 3, 0.8, 1.0, 1.0, 6);
    let pair = marginal_likelihood_quad(&data, &[1, 2], eta, &prior, &QuadOptions::default()).unwrap();
    let shifted = data.with_response(data.y().iter().map(|y| y - 1.0).collect()).unwrap();
    let doubled = LabPrior { sigma_beta2: 2.0 * prior.sigma_beta2, ..prior };
    let single =
        marginal_likelihood_quad(&shifted, &[1], eta, &doubled, &QuadOptions::default()).unwrap();
    assert!((pair.log_m - single.log_m).abs() < 1e-7, "{} vs {}", pair.log_m, single.log_m);
}

#[test]
fn two_dimensional_quadrature_is_stable_under_tighter_tolerance() {
    let prior = LabPrior::default();
    for &e in &[0.6, 1.8] {
        let eta = Eta::new(e).unwrap();
        let data = sim(20, 3, 2.0, e, 1.0, 7);
        let base = marginal_likelihood_quad(&data, &[0, 1], eta, &prior, &QuadOptions::default()).unwrap();
        let tight = QuadOptions { rel_tol: 1e-12, grid: 200, max_panels: 2000, ..QuadOptions::default() };
        let fine = marginal_likelihood_quad(&data, &[0, 1], eta, &prior, &tight).unwrap();
        assert!((base.log_m - fine.log_m).abs() < 1e-7, "eta {e}: {} vs {}", base.log_m, fine.log_m);
        assert!(base.log_error <= 1e-4);
    }
}

#[test]
fn slab_variance_penalises_wide_priors() {
    let eta = Eta::new(1.8).unwrap();
    let data = sim(40, 2, 3.0, 1.8, 1.0, 8);
    let mut last = f64::INFINITY;
    for sb2 in [20.0, 40.0, 80.0, 160.0, 320.0] {
        let prior = LabPrior { sigma_beta2: sb2, ..LabPrior::default() };
        let m = marginal_likelihood_quad(&data, &[0], eta, &prior, &QuadOptions::default()).unwrap().log_m;
        assert!(m < last, "sigma_beta2 {sb2}: {m} >= {last}");
        last = m;
    }
}

#[test]
fn rejects_large_supports_and_bad_indices() {
    let data = sim(10, 3, 1.0, 1.0, 1.0, 9);
    let eta = Eta::new(1.0).unwrap();
    let (pr, o) = (LabPrior::default(), QuadOptions::default());
    assert!(marginal_likelihood_quad(&data, &[0, 1, 2], eta, &pr, &o).is_err());
    assert!(marginal_likelihood_quad(&data, &[5], eta, &pr, &o).is_err());
    assert!(marginal_likelihood_quad(&data, &[1, 1], eta, &pr, &o).is_err());
}

#[test]
fn posterior_normalises_and_ties_identical_columns() {
    let eta = Eta::new(1.2).unwrap();
    let data = sim(30, 5, 1.5, 1.2, 1.0, 10);
    let post = support_posterior(&data, eta, 0.3, &LabPrior::default(), 2, &QuadOptions::default()).unwrap();
    assert!((post.total() - 1.0).abs() < 1e-6);
    // {}, {1}, {j}, {1, j}, {j, l}
    assert_eq!(post.classes.len(), 5);
    let a = post.probability(&[0, 1]);
    assert!(a > 0.0);
    assert_eq!(a, post.probability(&[0, 3]));
    assert_eq!(post.probability(&[1, 2]), post.probability(&[4, 3]));
    let members: u64 = post.classes.iter().map(|c| c.multiplicity).sum();
    assert_eq!(members, 1 + 5 + 10);
}

#[test]
fn pure_noise_prefers_the_empty_support() {
    let eta = Eta::new(1.0).unwrap();
    let data = sim(40, 4, 0.0, 1.0, 1.0, 11);
    let post = support_posterior(&data, eta, 0.05, &LabPrior::default(), 2, &QuadOptions::default()).unwrap();
    assert!(post.modal().representative.is_empty(), "{:?}", post.modal());
}

#[test]
fn strong_signal_concentrates_on_the_contrast() {
    let eta = Eta::new(1.8).unwrap();
    let data = sim(100, 4, 3.0, 1.8, 1.0, 12);
    let post = support_posterior(&data, eta, 0.5, &LabPrior::default(), 2, &QuadOptions::default()).unwrap();
    assert!(post.probability(&[0]) > 0.9, "{}", post.probability(&[0]));
}

#[test]
fn full_enumeration_has_no_truncation() {
    let eta = Eta::new(1.0).unwrap();
    let data = sim(10, 2, 1.0, 1.0, 1.0, 13);
    let post = support_posterior(&data, eta, 0.5, &LabPrior::default(), 2, &QuadOptions::default()).unwrap();
    assert_eq!(post.truncation_bound, 0.0);
    assert!(post.warning.is_none());
    let flat = LabPrior::default().with_kernel(SlabKernel::Flat);
    let data = sim(10, 3, 1.0, 1.0, 1.0, 13);
    let post = support_posterior(&data, eta, 0.5, &flat, 1, &QuadOptions::default()).unwrap();
    assert!(post.truncation_bound.is_infinite() && post.warning.is_some());
}

#[test]
fn truncation_bound_is_an_upper_bound() {
    // With p = 3 and supports up to size 2 enumerated, the only missing support
    // is {1, 2, 3}; its class shares its likelihood supremum with {1, 2}.
    let eta = Eta::new(1.0).unwrap();
    let data = sim(12, 3, 1.0, 1.0, 1.0, 14);
    let prior = LabPrior::default();
    let post = support_posterior(&data, eta, 0.5, &prior, 2, &QuadOptions::default()).unwrap();
    let c12 = post.classes.iter().find(|c| c.representative == vec![0, 1]).unwrap();
    // m_{123} <= sup L; sup L >= m_{12}, so the bound must exceed the {1,2} mass ratio.
    let ratio = (c12.log_m + c12.log_prior - post.log_evidence).exp();
    assert!(post.truncation_bound >= ratio);
}

#[test]
fn high_snr_curve_is_saturated() {
    let cfg = CurveConfig {
        n_grid: vec![20, 40],
        replications: 4,
        beta01: 10.0,
        sigma0: 0.1,
        // g(10) is about 34.5 at eta = 1.8; the slab has to reach it.
        prior: LabPrior { sigma_beta2: 1000.0, ..LabPrior::default() },
        ..CurveConfig::default()
    };
    let curve = consistency_curve(&cfg).unwrap();
    assert!(curve.rows[0].mean_posterior > 0.99, "{:?}", curve.rows);
    assert!(curve.non_decreasing);
    let mut buf = Vec::new();
    write_curve_csv(&curve, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("n,p,mean_posterior,"));
}

#[test]
fn curve_rejects_bad_grids() {
    let bad = CurveConfig { n_grid: vec![40, 20], ..CurveConfig::default() };
    assert!(consistency_curve(&bad).is_err());
    let odd = CurveConfig { n_grid: vec![21], ..CurveConfig::default() };
    assert!(consistency_curve(&odd).is_err());
}

#[test]
fn curve_is_reproducible() {
    let cfg = CurveConfig { n_grid: vec![20], replications: 3, ..CurveConfig::default() };
    assert_eq!(consistency_curve(&cfg).unwrap(), consistency_curve(&cfg).unwrap());
}

#[test]
fn lemma_holds_at_zero_coefficients() {
    let eta = Eta::new(0.7).unwrap();
    let z = vec![0.3, -2.0, 5.0];
    let signs = vec![1.0, -1.0, 1.0];
    for rule in [LemmaRule::TwoCoefficientCases, LemmaRule::MaxMagnitude] {
        for k in [2usize, 3, 5] {
            let beta = vec![0.0; k];
            let inst = LemmaInstance::new(z.clone(), signs.clone(), &beta, eta, rule, LemmaConstant::General)
                .unwrap();
            let out = lemma_check(&inst, &beta).unwrap();
            assert!(out.holds && out.slack >= 0.0, "{rule:?} k={k}: {out:?}");
        }
    }
}

#[test]
fn lemma_hand_instance() {
    let eta = Eta::new(1.0).unwrap();
    let beta = [1.0, 1.0];
    let inst = LemmaInstance::new(
        vec![0.0, 0.0],
        vec![1.0, 1.0],
        &beta,
        eta,
        LemmaRule::TwoCoefficientCases,
        LemmaConstant::TwoCoefficient,
    )
    .unwrap();
    assert_eq!(inst.a[1][1], -1.0);
    assert_eq!(inst.b, vec![-1.0, 0.0]);
    let out = lemma_check(&inst, &beta).unwrap();
    // g_1(2) = 1 in both rows; t = (0, 0) so every right-hand term vanishes.
    assert_eq!(out.lhs, 2.0);
    assert_eq!(out.rhs, 0.0);
    assert!(out.holds);
}

#[test]
fn lemma_constants_coincide_for_two_coefficients() {
    for e in [0.3, 1.0, 1.7] {
        let eta = Eta::new(e).unwrap();
        let beta = [0.4, -1.1];
        let mk = |c| {
            LemmaInstance::new(vec![1.5, -0.2], vec![1.0, -1.0], &beta, eta, LemmaRule::MaxMagnitude, c)
                .unwrap()
        };
        let (a, b) = (mk(LemmaConstant::TwoCoefficient), mk(LemmaConstant::General));
        assert!((a.c - b.c).abs() < 1e-12 * a.c);
        for (x, y) in a.t_rows.iter().zip(&b.t_rows) {
            assert!((x - y).abs() < 1e-12 * (1.0 + x.abs()));
        }
    }
    let eta = Eta::new(1.0).unwrap();
    assert!(LemmaInstance::new(vec![1.0], vec![1.0], &[1.0, 2.0, 3.0], eta, LemmaRule::TwoCoefficientCases, LemmaConstant::TwoCoefficient).is_err());
}

#[test]
fn two_coefficient_case_rule_has_counterexamples() {
    let eta = Eta::new(1.0).unwrap();
    // t1 < 0 selects b = (0, -1), so the bound uses |t2| in place of |t1|.
    let beta = [0.5, -0.5];
    let inst = LemmaInstance::new(vec![-2.0], vec![1.0], &beta, eta, LemmaRule::TwoCoefficientCases, LemmaConstant::TwoCoefficient)
        .unwrap();
    let out = lemma_check(&inst, &beta).unwrap();
    assert!((out.lhs - 1.0).abs() < 1e-12 && (out.rhs - 1.75).abs() < 1e-12, "{out:?}");
    assert!(!out.holds);
    // |beta1| < |beta2| puts +t1^2 on the right, which can exceed the residual.
    let beta = [-0.1, 0.2];
    let inst = LemmaInstance::new(vec![0.0], vec![1.0], &beta, eta, LemmaRule::TwoCoefficientCases, LemmaConstant::TwoCoefficient)
        .unwrap();
    assert!(!lemma_check(&inst, &beta).unwrap().holds);
    // The max-magnitude rule handles both.
    for beta in [[0.5, -0.5], [-0.1, 0.2]] {
        let inst = LemmaInstance::new(vec![-2.0], vec![1.0], &beta, eta, LemmaRule::MaxMagnitude, LemmaConstant::TwoCoefficient)
            .unwrap();
        assert!(lemma_check(&inst, &beta).unwrap().holds);
    }
}

#[test]
fn max_magnitude_rule_survives_fuzzing() {
    for constant in [LemmaConstant::General, LemmaConstant::TwoCoefficient] {
        let ks: &[usize] = if constant == LemmaConstant::General { &[2, 3, 5] } else { &[2] };
        let rep = lemma_fuzz(10_000, ks, LemmaRule::MaxMagnitude, constant, 21).unwrap();
        assert_eq!(rep.violations, 0, "{:?}", rep.first_violation);
    }
    let cases = lemma_fuzz(10_000, &[2], LemmaRule::TwoCoefficientCases, LemmaConstant::TwoCoefficient, 21).unwrap();
    assert!(cases.violations > 0);
    let wide = lemma_fuzz(10_000, &[3, 5], LemmaRule::TwoCoefficientCases, LemmaConstant::General, 22).unwrap();
    assert_eq!(wide.violations, 0);
}

#[test]
fn bound_at_zero_observations_by_hand() {
    // y = 1 gives z = 0: the Jacobian vanishes and D = b.
    let n = 10usize;
    let e = 1.2;
    let eta = Eta::new(e).unwrap();
    let prior = LabPrior::default();
    let data = AltDesign::new(n, 2).unwrap().dataset(vec![1.0; n]).unwrap();
    let (lb, d) = upper_bound_log(&data, eta, &prior).unwrap();
    assert_eq!(d, prior.b);
    let nf = n as f64;
    let shape = (nf - 1.0) / 2.0 + prior.a;
    let hand = 6f64.ln() - nf / 2.0 * (2.0 * std::f64::consts::PI).ln() + prior.a * prior.b.ln()
        - ln_gamma(prior.a)
        - 0.5 * nf.ln()
        - 0.5 * prior.sigma_beta2.ln()
        + ln_gamma(shape)
        - shape * prior.b.ln();
    assert!((lb.unwrap() - hand).abs() < 1e-12);
    let check = bound_check_upper(&data, &[0, 1], eta, &prior, &QuadOptions::default()).unwrap();
    assert!(!check.vacuous);
    assert!((check.log_ratio.unwrap() - (check.log_m - hand)).abs() < 1e-12);
}

#[test]
fn bound_study_never_breaks_a_non_vacuous_bound() {
    let recs = bound_study(&[0.8, 1.2, 1.8], 20, 5, 1.0, 1.0, &LabPrior::default(), &QuadOptions::default(), 3)
        .unwrap();
    assert_eq!(recs.len(), 15);
    for r in &recs {
        assert!(r.check.vacuous || r.check.holds, "{r:?}");
        assert_eq!(r.check.vacuous, r.check.denominator <= 0.0);
    }
    let mut buf = Vec::new();
    write_bound_csv(&recs, &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 16);
}
