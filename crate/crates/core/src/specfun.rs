//! Modified Bessel functions of integer order 0 and 1, and Legendre polynomials.
//!
//! The first kind uses the power series below `ASYMPTOTIC_CUTOFF` and the
//! large-argument expansion above it. The second kind uses the log-series for
//! `x <= 2` and Steed's continued fraction beyond. Exponentially scaled
//! variants (`*_scaled`) are provided so kernel ratios stay finite for large
//! arguments.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecFunError {
    #[error("{function}: argument {x} outside domain ({requirement})")]
    Domain {
        function: &'static str,
        x: f64,
        requirement: &'static str,
    },
    #[error("{function}: unsupported order {order}")]
    Order { function: &'static str, order: i64 },
}

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
const ASYMPTOTIC_CUTOFF: f64 = 30.0;
const EPS: f64 = 1e-17;

/// Modified Bessel function of the first kind `I_order(x)`, `order` in {0, 1}.
pub fn bessel_i(order: u32, x: f64) -> Result<f64, SpecFunError> {
    if !(x >= 0.0) {
        return Err(SpecFunError::Domain {
            function: "bessel_i",
            x,
            requirement: "x >= 0",
        });
    }
    match order {
        0 => Ok(i0(x)),
        1 => Ok(i1(x)),
        o => Err(SpecFunError::Order {
            function: "bessel_i",
            order: o as i64,
        }),
    }
}

/// Modified Bessel function of the second kind `K_order(x)`, `order` in {0, 1}.
pub fn bessel_k(order: u32, x: f64) -> Result<f64, SpecFunError> {
    if !(x > 0.0) {
        return Err(SpecFunError::Domain {
            function: "bessel_k",
            x,
            requirement: "x > 0",
        });
    }
    match order {
        0 => Ok(k0(x)),
        1 => Ok(k1(x)),
        o => Err(SpecFunError::Order {
            function: "bessel_k",
            order: o as i64,
        }),
    }
}

/// Legendre polynomial `P_n(t)` by the three-term recurrence.
pub fn legendre_p(n: u32, t: f64) -> Result<f64, SpecFunError> {
    if !(t.abs() <= 1.0) {
        return Err(SpecFunError::Domain {
            function: "legendre_p",
            x: t,
            requirement: "|t| <= 1",
        });
    }
    Ok(legendre_unchecked(n, t))
}

pub(crate) fn legendre_unchecked(n: u32, t: f64) -> f64 {
    let mut p0 = 1.0;
    if n == 0 {
        return p0;
    }
    let mut p1 = t;
    for k in 1..n {
        let k = k as f64;
        let p2 = ((2.0 * k + 1.0) * t * p1 - k * p0) / (k + 1.0);
        p0 = p1;
        p1 = p2;
    }
    p1
}

/// Sum of `(x²/4)^k / (k! (k+order)!)` for `k >= start`.
fn first_kind_series(x: f64, order: u32, start: u32) -> f64 {
    let q = 0.25 * x * x;
    // term for k = 0
    let mut term = 1.0;
    for j in 1..=order {
        term /= j as f64;
    }
    let mut k = 0u32;
    while k < start {
        k += 1;
        term *= q / (k as f64 * (k + order) as f64);
    }
    let mut sum = 0.0;
    loop {
        sum += term;
        k += 1;
        term *= q / (k as f64 * (k + order) as f64);
        if term <= EPS * sum || term == 0.0 {
            sum += term;
            break;
        }
    }
    sum
}

/// Large-argument expansion of `e^{-x} I_order(x)`.
fn first_kind_asymptotic_scaled(x: f64, order: u32) -> f64 {
    let mu = 4.0 * (order * order) as f64;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..60 {
        let odd = (2 * k - 1) as f64;
        let next = -term * (mu - odd * odd) / (k as f64 * 8.0 * x);
        if next.abs() >= term.abs() {
            break;
        }
        term = next;
        sum += term;
        if term.abs() < EPS * sum.abs() {
            break;
        }
    }
    sum / (2.0 * std::f64::consts::PI * x).sqrt()
}

pub fn i0(x: f64) -> f64 {
    if x < ASYMPTOTIC_CUTOFF {
        first_kind_series(x, 0, 0)
    } else {
        first_kind_asymptotic_scaled(x, 0) * x.exp()
    }
}

pub fn i1(x: f64) -> f64 {
    if x < ASYMPTOTIC_CUTOFF {
        0.5 * x * first_kind_series(x, 1, 0)
    } else {
        first_kind_asymptotic_scaled(x, 1) * x.exp()
    }
}

/// `e^{-x} I_0(x)`.
pub fn i0_scaled(x: f64) -> f64 {
    if x < ASYMPTOTIC_CUTOFF {
        first_kind_series(x, 0, 0) * (-x).exp()
    } else {
        first_kind_asymptotic_scaled(x, 0)
    }
}

/// `e^{-x} I_1(x)`.
pub fn i1_scaled(x: f64) -> f64 {
    if x < ASYMPTOTIC_CUTOFF {
        0.5 * x * first_kind_series(x, 1, 0) * (-x).exp()
    } else {
        first_kind_asymptotic_scaled(x, 1)
    }
}

/// `I_0(x) - 1` without cancellation for small `x`.
pub fn i0_minus_one(x: f64) -> f64 {
    if x < ASYMPTOTIC_CUTOFF {
        if x == 0.0 {
            0.0
        } else {
            first_kind_series(x, 0, 1)
        }
    } else {
        i0(x) - 1.0
    }
}

/// Log-series for `K_0` and `K_1`, accurate for `0 < x <= 2`.
fn second_kind_small(x: f64) -> (f64, f64) {
    let q = 0.25 * x * x;
    let log_half = (0.5 * x).ln();

    // K0 = -(ln(x/2) + γ) I0 + Σ_{k≥1} H_k q^k/(k!)²
    let mut term = 1.0;
    let mut harmonic = 0.0;
    let mut sum0 = 0.0;
    let mut k = 0.0;
    loop {
        k += 1.0;
        term *= q / (k * k);
        harmonic += 1.0 / k;
        let add = harmonic * term;
        sum0 += add;
        if add < EPS * sum0.abs().max(1e-300) {
            break;
        }
    }
    let k0 = -(log_half + EULER_GAMMA) * i0(x) + sum0;

    // K1 = 1/x + ln(x/2) I1 - (x/4) Σ_{k≥0} (ψ(k+1)+ψ(k+2)) q^k/(k!(k+1)!)
    let mut term = 1.0;
    let mut psi_k1 = -EULER_GAMMA; // ψ(1)
    let mut sum1 = 0.0;
    let mut k = 0.0;
    loop {
        let psi_k2 = psi_k1 + 1.0 / (k + 1.0);
        let add = (psi_k1 + psi_k2) * term;
        sum1 += add;
        if add.abs() < EPS * sum1.abs() && k > 0.0 {
            break;
        }
        k += 1.0;
        term *= q / (k * (k + 1.0));
        psi_k1 = psi_k2;
    }
    let k1 = 1.0 / x + log_half * i1(x) - 0.25 * x * sum1;
    (k0, k1)
}

/// Steed's continued fraction for `e^{x} K_0(x)` and `e^{x} K_1(x)`, `x >= 2`.
fn second_kind_steed_scaled(x: f64) -> (f64, f64) {
    let a1 = 0.25;
    let mut b = 2.0 * (1.0 + x);
    let mut d = 1.0 / b;
    let mut h = d;
    let mut delh = d;
    let mut q1 = 0.0;
    let mut q2 = 1.0;
    let mut q = a1;
    let mut c = a1;
    let mut a = -a1;
    let mut s = 1.0 + q * delh;
    for i in 2..10_000 {
        let fi = i as f64;
        a -= 2.0 * (fi - 1.0);
        c = -a * c / fi;
        let qnew = (q1 - b * q2) / a;
        q1 = q2;
        q2 = qnew;
        q += c * qnew;
        b += 2.0;
        d = 1.0 / (b + a * d);
        delh = (b * d - 1.0) * delh;
        h += delh;
        let dels = q * delh;
        s += dels;
        if (dels / s).abs() < EPS {
            break;
        }
    }
    let h = a1 * h;
    let k0 = (std::f64::consts::PI / (2.0 * x)).sqrt() / s;
    let k1 = k0 * (x + 0.5 - h) / x;
    (k0, k1)
}

pub fn k0(x: f64) -> f64 {
    if x <= 2.0 {
        second_kind_small(x).0
    } else {
        second_kind_steed_scaled(x).0 * (-x).exp()
    }
}

pub fn k1(x: f64) -> f64 {
    if x <= 2.0 {
        second_kind_small(x).1
    } else {
        second_kind_steed_scaled(x).1 * (-x).exp()
    }
}

/// `e^{x} K_0(x)`.
pub fn k0_scaled(x: f64) -> f64 {
    if x <= 2.0 {
        second_kind_small(x).0 * x.exp()
    } else {
        second_kind_steed_scaled(x).0
    }
}

/// `e^{x} K_1(x)`.
pub fn k1_scaled(x: f64) -> f64 {
    if x <= 2.0 {
        second_kind_small(x).1 * x.exp()
    } else {
        second_kind_steed_scaled(x).1
    }
}

/// `(e^x K_0(x), e^x K_1(x))` in one evaluation.
pub fn k01_scaled(x: f64) -> (f64, f64) {
    if x <= 2.0 {
        let (a, b) = second_kind_small(x);
        let e = x.exp();
        (a * e, b * e)
    } else {
        second_kind_steed_scaled(x)
    }
}
