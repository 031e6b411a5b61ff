//! Digamma and trigamma for positive arguments.
//!
//! Both shift the argument upward with the recurrence until `x ≥ 6` and then
//! evaluate the Bernoulli asymptotic series in `1/x²`.

use crate::error::{Error, Result};

const RECURRENCE_FLOOR: f64 = 6.0;

/// `B_{2k} / (2k)` for k = 1..7.
const DIGAMMA_SERIES: [f64; 7] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
];

/// `B_{2k}` for k = 1..7.
const TRIGAMMA_SERIES: [f64; 7] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
];

/// ψ(x) for `x > 0`, without the domain check.
#[inline]
pub(crate) fn psi(mut x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut acc = 0.0;
    while x < RECURRENCE_FLOOR {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    let mut series = 0.0;
    for &c in DIGAMMA_SERIES.iter().rev() {
        series = series * inv2 + c;
    }
    acc + x.ln() - 0.5 / x - series * inv2
}

/// ψ'(x) for `x > 0`, without the domain check.
#[inline]
pub(crate) fn psi1(mut x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut acc = 0.0;
    while x < RECURRENCE_FLOOR {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut series = 0.0;
    for &c in TRIGAMMA_SERIES.iter().rev() {
        series = series * inv2 + c;
    }
    acc + inv + 0.5 * inv2 + series * inv2 * inv
}

fn check(x: f64, name: &str) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} requires a finite x > 0, got {x}")))
    }
}

/// Digamma ψ(x) = d/dx ln Γ(x).
pub fn digamma(x: f64) -> Result<f64> {
    check(x, "digamma")?;
    Ok(psi(x))
}

/// Trigamma ψ'(x).
pub fn trigamma(x: f64) -> Result<f64> {
    check(x, "trigamma")?;
    Ok(psi1(x))
}
