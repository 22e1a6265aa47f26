//! Signed power transform `g(y) = (y |y|^(eta-1) - 1) / eta` and its companions.
//!
//! The transform is strictly increasing on the whole real line for every
//! `eta` in `(0, 2)`, which is what lets the same map be applied to the
//! response and to the linear predictor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distance kept from the endpoints of `(0, 2)`.
pub const ETA_GUARD: f64 = 1e-6;

/// Transformation parameter, guaranteed to lie in `(ETA_GUARD, 2 - ETA_GUARD)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Eta(f64);

impl Eta {
    pub fn new(eta: f64) -> Result<Self> {
        if eta.is_finite() && eta > ETA_GUARD && eta < 2.0 - ETA_GUARD {
            Ok(Eta(eta))
        } else {
            Err(Error::Domain(format!("eta = {eta} is outside (0, 2)")))
        }
    }

    /// The identity-like member of the family, `g(y) = y - 1`.
    pub const ONE: Eta = Eta(1.0);

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }

    /// `g_eta(y)`. No finiteness checks.
    #[inline]
    pub fn forward(self, y: f64) -> f64 {
        let e = self.0;
        if e == 1.0 {
            return y - 1.0;
        }
        (y.abs().powf(e).copysign(y) - 1.0) / e
    }

    /// `g_eta^{-1}(t) = sign(eta t + 1) |eta t + 1|^(1/eta)`.
    #[inline]
    pub fn inverse(self, t: f64) -> f64 {
        let e = self.0;
        if e == 1.0 {
            return t + 1.0;
        }
        let s = e * t + 1.0;
        s.abs().powf(1.0 / e).copysign(s)
    }

    /// `g_eta'(y) = |y|^(eta-1)`; `+inf` at zero when `eta < 1`.
    #[inline]
    pub fn deriv(self, y: f64) -> f64 {
        y.abs().powf(self.0 - 1.0)
    }

    /// Value of the transform at zero, `-1/eta`.
    #[inline]
    pub fn at_zero(self) -> f64 {
        -1.0 / self.0
    }
}

impl TryFrom<f64> for Eta {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Eta::new(v)
    }
}

impl From<Eta> for f64 {
    fn from(e: Eta) -> f64 {
        e.0
    }
}

fn check_finite(v: f64, what: &'static str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { what, index: 0 })
    }
}

pub fn gpow(y: f64, eta: Eta) -> Result<f64> {
    check_finite(y, "gpow argument")?;
    Ok(eta.forward(y))
}

pub fn gpow_inv(t: f64, eta: Eta) -> Result<f64> {
    check_finite(t, "gpow_inv argument")?;
    let y = eta.inverse(t);
    check_finite(y, "gpow_inv result")?;
    Ok(y)
}

/// Derivative of [`gpow`]. Returns `f64::INFINITY` at `y = 0` for `eta < 1`.
pub fn gpow_deriv(y: f64, eta: Eta) -> f64 {
    eta.deriv(y)
}

/// `(eta - 1) * sum(log |y_i|)`, the Jacobian of the response transform.
pub fn log_jacobian(y: &[f64], eta: Eta) -> Result<f64> {
    let mut acc = 0.0;
    for (index, &v) in y.iter().enumerate() {
        if v == 0.0 {
            return Err(Error::ZeroResponse { index });
        }
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: "response",
                index,
            });
        }
        acc += v.abs().ln();
    }
    Ok((eta.get() - 1.0) * acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eta(v: f64) -> Eta {
        Eta::new(v).unwrap()
    }

    #[test]
    fn rejects_out_of_range_eta() {
        assert!(Eta::new(0.0).is_err());
        assert!(Eta::new(2.0).is_err());
        assert!(Eta::new(-0.3).is_err());
        assert!(Eta::new(f64::NAN).is_err());
        assert!(Eta::new(1.999_999_5).is_err());
        assert!(Eta::new(1.99).is_ok());
    }

    #[test]
    fn gpow_examples() {
        for e in [0.3, 0.5, 1.0, 1.5, 1.9] {
            assert_eq!(gpow(1.0, eta(e)).unwrap(), 0.0);
        }
        for y in [-3.0, 0.0, 7.0] {
            assert_eq!(gpow(y, Eta::ONE).unwrap(), y - 1.0);
        }
        assert!((gpow(4.0, eta(0.5)).unwrap() - 2.0).abs() < 1e-15);
        assert!((gpow(-4.0, eta(0.5)).unwrap() + 6.0).abs() < 1e-15);
        assert!(gpow(f64::NAN, eta(0.5)).is_err());
        assert_eq!(gpow(0.0, eta(0.4)).unwrap(), -2.5);
    }

    #[test]
    fn gpow_inv_examples() {
        assert_eq!(gpow_inv(0.0, eta(0.7)).unwrap(), 1.0);
        assert!((gpow_inv(2.0, eta(0.5)).unwrap() - 4.0).abs() < 1e-15);
        for y in [-10.0, -0.1, 0.1, 50.0] {
            let back = gpow_inv(gpow(y, eta(0.7)).unwrap(), eta(0.7)).unwrap();
            assert!(((back - y) / y).abs() <= 1e-12, "{y} -> {back}");
        }
    }

    #[test]
    fn deriv_examples() {
        for y in [-2.0, 0.5, 3.0] {
            assert_eq!(gpow_deriv(y, Eta::ONE), 1.0);
        }
        assert_eq!(gpow_deriv(0.0, eta(1.5)), 0.0);
        assert!((gpow_deriv(2.0, eta(1.5)) - std::f64::consts::SQRT_2).abs() < 1e-15);
        assert_eq!(gpow_deriv(0.0, eta(0.5)), f64::INFINITY);
    }

    #[test]
    fn log_jacobian_examples() {
        assert_eq!(log_jacobian(&[3.0, -2.0], Eta::ONE).unwrap(), 0.0);
        let e = std::f64::consts::E;
        assert!((log_jacobian(&[e, e], eta(1.5)).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(log_jacobian(&[1.0, 1.0, 1.0], eta(0.3)).unwrap(), 0.0);
        assert_eq!(
            log_jacobian(&[1.0, 0.0, 2.0], eta(0.3)),
            Err(Error::ZeroResponse { index: 1 })
        );
    }

    proptest! {
        #[test]
        fn monotone(a in -1e4f64..1e4, b in -1e4f64..1e4, e in 0.05f64..1.95) {
            prop_assume!(a != b);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(eta(e).forward(lo) < eta(e).forward(hi));
        }

        #[test]
        fn odd_about_fixed_point(y in -1e4f64..1e4, e in 0.05f64..1.95) {
            let et = eta(e);
            let s = et.forward(-y) + et.forward(y);
            prop_assert!((s + 2.0 / e).abs() <= 1e-12 * (1.0 + y.abs().powf(e) / e));
        }

        #[test]
        fn roundtrip(y in -1e6f64..1e6, e in 0.05f64..1.95) {
            let et = eta(e);
            let back = et.inverse(et.forward(y));
            prop_assert!((back - y).abs() <= 1e-10 * y.abs().max(1.0), "{} {} {}", y, e, back);
        }

        #[test]
        fn derivative_matches_central_difference(y in 0.05f64..50.0, sign in prop::bool::ANY, e in 0.05f64..1.95) {
            let y = if sign { y } else { -y };
            let et = eta(e);
            let h = 1e-5 * y.abs();
            let fd = (et.forward(y + h) - et.forward(y - h)) / (2.0 * h);
            let d = et.deriv(y);
            prop_assert!(((fd - d) / d).abs() < 1e-6, "fd {} d {}", fd, d);
        }
    }
}
