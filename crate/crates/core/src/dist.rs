//! Log densities and random variates used by the model and the samplers.

use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[inline]
pub fn ln_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln()) - 0.5 * d * d / var
}

/// Inverse-gamma with shape `a` and rate `b` (density ∝ x^(-a-1) e^(-b/x)).
pub fn ln_inv_gamma_pdf(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    a * b.ln() - ln_gamma(a) - (a + 1.0) * x.ln() - b / x
}

/// Gamma with shape `a` and rate `b`.
pub fn ln_gamma_pdf(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    a * b.ln() - ln_gamma(a) + (a - 1.0) * x.ln() - b * x
}

pub fn ln_beta_pdf(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return f64::NEG_INFINITY;
    }
    ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + (a - 1.0) * x.ln() + (b - 1.0) * (-x).ln_1p()
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Probability of the first branch given two unnormalised log weights.
#[inline]
pub fn two_point_prob(log_w1: f64, log_w0: f64) -> f64 {
    sigmoid(log_w1 - log_w0)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[inline]
pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Gamma variate with shape `a` and rate `b`.
pub fn sample_gamma<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    Gamma::new(a, 1.0 / b)
        .expect("gamma parameters must be positive")
        .sample(rng)
}

pub fn sample_inv_gamma<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    1.0 / sample_gamma(rng, a, b)
}

pub fn sample_beta<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    let x: f64 = Beta::new(a, b)
        .expect("beta parameters must be positive")
        .sample(rng);
    // Keep strictly inside (0, 1) so that logits stay finite.
    x.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Gamma(shape, rate) restricted to `(0, 1]`.
///
/// Exact for every `shape > 0`, `rate >= 0`: a Beta(shape, 1) envelope when the
/// rate is small, plain rejection from the untruncated gamma when most of its
/// mass is below one, and inversion of the truncated CDF otherwise.
pub fn sample_gamma_below_one<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> f64 {
    if rate <= 1.0 {
        loop {
            let u = rng.gen::<f64>().max(f64::MIN_POSITIVE).powf(1.0 / shape);
            if rng.gen::<f64>() <= (-rate * u).exp() && u > 0.0 {
                return u;
            }
        }
    }
    if shape / rate < 0.5 {
        for _ in 0..16 {
            let g = sample_gamma(rng, shape, rate);
            if g <= 1.0 && g > 0.0 {
                return g;
            }
        }
    }
    invert_truncated_gamma(rng.gen::<f64>(), shape, rate)
}

/// Solves `P(shape, rate*u) = v * P(shape, rate)` for `u` in `(0, 1]`.
///
/// Works with the log of the lower incomplete gamma integral so that large
/// shapes with small rates do not underflow.
fn invert_truncated_gamma(v: f64, shape: f64, rate: f64) -> f64 {
    let log_total = ln_lower_gamma(shape, rate);
    let target = v.max(1e-300).ln() + log_total;
    let mut lo = 0.0_f64;
    let mut hi = 1.0_f64;
    let mut u = 0.5_f64;
    for _ in 0..200 {
        let f = ln_lower_gamma(shape, rate * u) - target;
        if f > 0.0 {
            hi = u;
        } else {
            lo = u;
        }
        if (hi - lo) <= 1e-15 * hi.max(1e-300) {
            break;
        }
        // Newton step on the log scale, falling back to bisection.
        let log_dens = shape * rate.ln() + (shape - 1.0) * u.ln() - rate * u;
        let step = f / (log_dens - ln_lower_gamma(shape, rate * u)).exp();
        let cand = u - step;
        u = if cand.is_finite() && cand > lo && cand < hi {
            cand
        } else {
            0.5 * (lo + hi)
        };
    }
    u.clamp(f64::MIN_POSITIVE, 1.0)
}

/// `ln γ(a, x)`, the unnormalised lower incomplete gamma function.
pub fn ln_lower_gamma(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if x < a + 1.0 {
        // Series: γ(a,x) = x^a e^{-x} Σ x^n / (a (a+1) ... (a+n)).
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut k = a;
        for _ in 0..10_000 {
            k += 1.0;
            term *= x / k;
            sum += term;
            if term < sum * 1e-17 {
                break;
            }
        }
        a * x.ln() - x + sum.ln()
    } else {
        // γ = Γ(a) (1 - Q), Q from the Lentz continued fraction.
        let ln_q = ln_upper_gamma_cf(a, x) - ln_gamma(a);
        ln_gamma(a) + (-ln_q.exp()).ln_1p()
    }
}

fn ln_upper_gamma_cf(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..10_000 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    a * x.ln() - x + h.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{Continuous, ContinuousCDF};

    #[test]
    fn densities_match_statrs() {
        let g = statrs::distribution::Gamma::new(2.0, 2.0).unwrap();
        assert!((ln_gamma_pdf(1.0, 2.0, 2.0) - g.ln_pdf(1.0)).abs() < 1e-12);
        let ig = statrs::distribution::InverseGamma::new(3.0, 3.0).unwrap();
        assert!((ln_inv_gamma_pdf(0.7, 3.0, 3.0) - ig.ln_pdf(0.7)).abs() < 1e-12);
        let be = statrs::distribution::Beta::new(2.5, 0.7).unwrap();
        assert!((ln_beta_pdf(0.3, 2.5, 0.7) - be.ln_pdf(0.3)).abs() < 1e-12);
    }

    #[test]
    fn lower_incomplete_gamma_matches_statrs() {
        for &(a, x) in &[(0.7, 0.2), (2.5, 1.0), (10.5, 3.0), (3.0, 9.0), (50.0, 40.0)] {
            let want = statrs::function::gamma::gamma_lr(a, x).ln() + ln_gamma(a);
            assert!((ln_lower_gamma(a, x) - want).abs() < 1e-10, "{a} {x}");
        }
    }

    #[test]
    fn truncated_gamma_moments() {
        // Compare the sample mean with the truncated mean computed by quadrature.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(shape, rate) in &[(2.5, 0.0), (2.5, 0.6), (4.5, 20.0), (10.5, 10.0), (0.7, 3.0)] {
            let draws: Vec<f64> = (0..40_000)
                .map(|_| sample_gamma_below_one(&mut rng, shape, rate))
                .collect();
            assert!(draws.iter().all(|&u| u > 0.0 && u <= 1.0));
            let mean = draws.iter().sum::<f64>() / draws.len() as f64;
            let m = 20_000;
            let (mut num, mut den) = (0.0, 0.0);
            for k in 0..m {
                let u = (k as f64 + 0.5) / m as f64;
                let w = u.powf(shape - 1.0) * (-rate * u).exp();
                num += u * w;
                den += w;
            }
            let want = num / den;
            assert!((mean - want).abs() < 0.01, "{shape} {rate}: {mean} vs {want}");
        }
    }

    #[test]
    fn normal_log_pdf() {
        let n = statrs::distribution::Normal::new(1.0, 2.0).unwrap();
        assert!((ln_normal_pdf(0.3, 1.0, 4.0) - n.ln_pdf(0.3)).abs() < 1e-13);
        assert!((n.cdf(1.0) - 0.5).abs() < 1e-15);
    }
}
