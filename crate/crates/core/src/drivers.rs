//! Registry of named driver fixtures.

use std::f64::consts::E;

use serde::{Deserialize, Serialize};

use crate::bsde::Driver;
use crate::error::Result;

/// `u * sqrt(ln(e + |u|))`.
#[inline]
pub fn sqrtlog_phase(u: f64) -> f64 {
    u * (E + u.abs()).ln().sqrt()
}

/// Derivative of [`sqrtlog_phase`].
#[inline]
pub fn sqrtlog_phase_derivative(u: f64) -> f64 {
    let l = (E + u.abs()).ln();
    l.sqrt() + u.abs() / (2.0 * (E + u.abs()) * l.sqrt())
}

/// Bound of `|d/du sin(phase(u))|` on `|u| <= m`.
#[inline]
pub fn sqrtlog_lipschitz_bound(m: f64) -> f64 {
    (E + m.abs()).ln().sqrt() + 0.5
}

/// Named drivers with their parameters, as written in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriverSpec {
    /// `f = 0`.
    Zero,
    /// `f = c`.
    Const { c: f64 },
    /// `f = a y + b <z> + c` with `<z> = sum_y z(y) v(y) / sqrt(v(Gamma))`.
    Linear {
        a: f64,
        #[serde(default)]
        b: f64,
        #[serde(default)]
        c: f64,
    },
    /// `f = lambda0 [sin(phase(y)) + kappa sin(phase(<z>))]`, locally Lipschitz
    /// with `L_M <= lambda0 max(1, kappa) (sqrt(ln(e + M)) + 1/2)`.
    OscSqrtlog {
        #[serde(default = "one")]
        lambda0: f64,
        #[serde(default = "one")]
        kappa: f64,
        /// Constant `L` in `L_M <= L + sqrt(ln M)`.
        #[serde(default = "two")]
        l: f64,
        #[serde(default = "half")]
        alpha: f64,
    },
    /// Wealth generator `g = -r y + delta`.
    FinanceDiscount {
        r: f64,
        #[serde(default)]
        delta: f64,
    },
}

fn one() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}
fn half() -> f64 {
    0.5
}

impl DriverSpec {
    pub fn osc_default() -> Self {
        DriverSpec::OscSqrtlog {
            lambda0: 1.0,
            kappa: 1.0,
            l: 2.0,
            alpha: 0.5,
        }
    }

    pub fn build(&self) -> Result<Driver> {
        match *self {
            DriverSpec::Zero => {
                Ok(Driver::new("zero", f64::EPSILON, 1.0, |_| 0.0, |_| 0.0)?.with_global_lipschitz(0.0))
            }
            DriverSpec::Const { c } => Ok(Driver::new(
                format!("const({c})"),
                c.abs().max(f64::EPSILON),
                1.0,
                move |_| c,
                |_| 0.0,
            )?
            .with_global_lipschitz(0.0)),
            DriverSpec::Linear { a, b, c } => {
                let l = a.abs().max(b.abs());
                let lambda = l.max(c.abs()).max(f64::EPSILON);
                Ok(Driver::new(
                    format!("linear({a},{b},{c})"),
                    lambda,
                    1.0,
                    move |p| a * p.y + b * p.z_mean() + c,
                    move |_| l,
                )?
                .with_global_lipschitz(l))
            }
            DriverSpec::OscSqrtlog {
                lambda0,
                kappa,
                l,
                alpha,
            } => {
                let lip = lambda0.abs() * kappa.abs().max(1.0);
                Ok(Driver::new(
                    format!("osc_sqrtlog({lambda0},{kappa})"),
                    (lambda0.abs() * (1.0 + kappa.abs())).max(f64::EPSILON),
                    alpha,
                    move |p| {
                        lambda0 * (sqrtlog_phase(p.y).sin() + kappa * sqrtlog_phase(p.z_mean()).sin())
                    },
                    move |m| lip * sqrtlog_lipschitz_bound(m),
                )?
                .with_log_growth(l))
            }
            DriverSpec::FinanceDiscount { r, delta } => Ok(Driver::new(
                format!("finance_discount({r},{delta})"),
                r.abs().max(delta.abs()).max(f64::EPSILON),
                1.0,
                move |p| -r * p.y + delta,
                move |_| r.abs(),
            )?
            .with_global_lipschitz(r.abs())),
        }
    }
}
