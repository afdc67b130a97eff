//! Standard normal kernels: density, distribution function, its logarithm,
//! the inverse Mills ratio and the quantile function.

#![allow(clippy::excessive_precision)]

use std::f64::consts::FRAC_1_SQRT_2;

/// 1/√(2π)
pub const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_677_94;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_741_78;

/// Below this point φ/Φ and ln Φ switch to the Mills-ratio continued fraction.
const TAIL_SWITCH: f64 = -30.0;

/// Standard normal density φ(x).
pub fn pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Natural log of φ(x).
pub fn ln_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// Standard normal distribution function Φ(x).
pub fn cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// ln Φ(x), accurate in both tails.
pub fn ln_cdf(x: f64) -> f64 {
    if x <= TAIL_SWITCH {
        ln_pdf(x) + mills_ratio(-x).ln()
    } else if x > 0.0 {
        (-cdf(-x)).ln_1p()
    } else {
        cdf(x).ln()
    }
}

/// Mills ratio R(u) = (1 − Φ(u)) / φ(u) for large positive `u`, by the
/// backward-evaluated continued fraction 1/(u + 1/(u + 2/(u + 3/(u + …)))).
fn mills_ratio(u: f64) -> f64 {
    let mut tail = u;
    for k in (1..=60).rev() {
        tail = u + k as f64 / tail;
    }
    1.0 / tail
}

/// Inverse Mills ratio φ(t)/Φ(t).
///
/// Every truncated-normal moment and every EM location/scale update goes
/// through this ratio. For t ≤ −30 the direct quotient is replaced by the
/// continued-fraction Mills ratio so that extreme negative standardized
/// locations never produce 0/0.
pub fn inverse_mills(t: f64) -> f64 {
    if t <= TAIL_SWITCH {
        1.0 / mills_ratio(-t)
    } else {
        pdf(t) / cdf(t)
    }
}

/// Standard normal quantile Φ⁻¹(p) for p in (0, 1).
///
/// A rational starting point (absolute error below 5e-4) is polished with
/// Newton steps on ln Φ, which is concave and so converges monotonically
/// even deep in the lower tail.
pub fn quantile(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0, "quantile argument {p} outside (0,1)");
    if p > 0.5 {
        return -quantile(1.0 - p);
    }
    if p == 0.5 {
        return 0.0;
    }
    let t = (-2.0 * p.ln()).sqrt();
    let mut x = -(t
        - (2.515_517 + 0.802_853 * t + 0.010_328 * t * t)
            / (1.0 + 1.432_788 * t + 0.189_269 * t * t + 0.001_308 * t * t * t));
    let target = p.ln();
    for _ in 0..12 {
        let step = (ln_cdf(x) - target) / inverse_mills(x);
        x -= step;
        if step.abs() <= 1e-15 * x.abs().max(1.0) {
            break;
        }
    }
    x
}
