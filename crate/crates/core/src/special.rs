//! Special functions backing the Gamma machinery: log-gamma, digamma, trigamma,
//! the regularized incomplete gamma function and its inverse.

use std::f64::consts::PI;

use crate::error::{Error, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// ln Γ(x) for x > 0 (Lanczos, g = 7, n = 9).
pub fn lgamma(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    if x < 0.5 {
        // reflection keeps the approximation in its accurate range
        return (PI / (PI * x).sin()).ln() - lgamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    HALF_LN_2PI + (x + 0.5) * t.ln() - t + acc.ln()
}

/// ψ(x) = d/dx ln Γ(x) for x > 0.
pub fn digamma(mut x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))));
    acc + x.ln() - 0.5 * inv - series
}

/// ψ₁(x) = d²/dx² ln Γ(x) for x > 0.
pub fn trigamma(mut x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        + 0.5 * inv2
        + inv
            * inv2
            * (1.0 / 6.0
                - inv2
                    * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * 5.0 / 66.0))));
    acc + series
}

const MAX_ITER: usize = 500;

/// Regularized lower incomplete gamma P(a, x) = γ(a, x) / Γ(a).
pub fn gamma_p(a: f64, x: f64) -> Result<f64> {
    gamma_pq(a, x).map(|(p, _)| p)
}

/// Regularized upper incomplete gamma Q(a, x) = 1 − P(a, x).
pub fn gamma_q(a: f64, x: f64) -> Result<f64> {
    gamma_pq(a, x).map(|(_, q)| q)
}

fn gamma_pq(a: f64, x: f64) -> Result<(f64, f64)> {
    if !(a > 0.0) || !(x >= 0.0) || !a.is_finite() {
        return Err(Error::domain(
            "gamma_p",
            format!("requires a > 0, x >= 0; got a={a}, x={x}"),
        ));
    }
    if x == 0.0 {
        return Ok((0.0, 1.0));
    }
    if x.is_infinite() {
        return Ok((1.0, 0.0));
    }
    let log_prefactor = a * x.ln() - x - lgamma(a);
    if x < a + 1.0 {
        let p = series_p(a, x, log_prefactor)?;
        Ok((p, 1.0 - p))
    } else {
        let q = continued_fraction_q(a, x, log_prefactor)?;
        Ok((1.0 - q, q))
    }
}

fn series_p(a: f64, x: f64, log_prefactor: f64) -> Result<f64> {
    let mut ap = a;
    let mut term = 1.0 / a;
    let mut sum = term;
    for _ in 0..MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * f64::EPSILON {
            return Ok((log_prefactor.exp() * sum).min(1.0));
        }
    }
    Err(Error::domain(
        "gamma_p",
        format!("series failed to converge at a={a}, x={x}"),
    ))
}

/// Modified Lentz evaluation of the continued fraction for Q(a, x).
fn continued_fraction_q(a: f64, x: f64, log_prefactor: f64) -> Result<f64> {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..=MAX_ITER {
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
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < f64::EPSILON {
            return Ok((log_prefactor.exp() * h).clamp(0.0, 1.0));
        }
    }
    Err(Error::domain(
        "gamma_q",
        format!("continued fraction failed at a={a}, x={x}"),
    ))
}

/// Log-density of the unit-rate Gamma(a, 1) at x > 0.
pub fn std_gamma_log_pdf(a: f64, x: f64) -> f64 {
    (a - 1.0) * x.ln() - x - lgamma(a)
}

/// ∂P(a, x)/∂a by central differences with relative step 1e-4·a.
pub fn gamma_p_da(a: f64, x: f64) -> Result<f64> {
    let h = 1e-4 * a;
    let hi = gamma_p(a + h, x)?;
    let lo = gamma_p(a - h, x)?;
    Ok((hi - lo) / (2.0 * h))
}

/// Quantile of the unit-rate Gamma(a, 1): the x with P(a, x) = u.
///
/// Newton iterations on P inside a maintained bisection bracket.
pub fn gamma_p_inv(a: f64, u: f64) -> Result<f64> {
    if !(a > 0.0) || !(u > 0.0 && u < 1.0) {
        return Err(Error::domain(
            "gamma_p_inv",
            format!("requires a > 0, 0 < u < 1; got a={a}, u={u}"),
        ));
    }
    // Wilson–Hilferty starting point, falling back to the small-x tail for small a
    let z = normal_quantile(u);
    let wh = {
        let t = 1.0 - 1.0 / (9.0 * a) + z / (3.0 * a.sqrt());
        a * t * t * t
    };
    let tail = (u * (lgamma(a + 1.0)).exp()).powf(1.0 / a);
    let mut x = if a < 1.0 || wh <= 0.0 {
        tail.max(f64::MIN_POSITIVE)
    } else {
        wh
    };

    let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
    for _ in 0..200 {
        let p = gamma_p(a, x)?;
        let f = p - u;
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let log_pdf = std_gamma_log_pdf(a, x);
        let step = f / log_pdf.exp();
        let mut next = x - step;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = if hi.is_finite() {
                0.5 * (lo + hi)
            } else {
                2.0 * x.max(1e-300)
            };
            if lo == 0.0 && next == 0.5 * hi {
                // geometric bisection toward zero copes with extreme left tails
                next = (hi * x.max(1e-300)).sqrt().min(0.5 * hi);
            }
        }
        if (next - x).abs() <= 1e-15 * x.abs() {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

/// Standard normal quantile (Acklam's rational approximation, ~1e-9 relative).
fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    let plow = 0.02425;
    if p < plow {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - plow {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -normal_quantile(1.0 - p)
    }
}
