//! Green's functions and Poisson kernels of the constant-coefficient screened
//! Poisson operator `Δu − σu` on a ball, in 2D and 3D.
//!
//! Three evaluation families exist for points away from the center:
//!
//! * `*_series`: the eigenfunction expansion truncated at a caller-chosen
//!   number of terms (validation only).
//! * `*_approx`: cheap closed-form approximations that are exact when the
//!   evaluation point is the ball center and drift away from the true kernel
//!   near the boundary.
//! * [`BallKernel::green_offcentered`] / [`BallKernel::poisson_offcentered`]:
//!   exact evaluation. The Green's function is split into the free-space
//!   singular part (closed form) and the smooth image part, whose expansion
//!   converges geometrically in `|x−c||y−c|/R²`. The Poisson expansion
//!   subtracts the harmonic kernel mode by mode; very close to the sphere its
//!   high modes are replaced by their leading asymptotic form, summed in
//!   closed form (relative error below 1e-3, usually far less).
//!
//! `σ = 0` is dispatched to the harmonic closed forms everywhere.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;

use rand::Rng;
use thiserror::Error;

use crate::math::{Dim, Vec3};
use crate::specfun::{i0, i0_minus_one, i0_scaled, i1, i1_scaled, k01_scaled};

/// Relative slack allowed when checking that a point lies in or on the ball.
pub const BALL_TOLERANCE: f64 = 1e-9;

/// Consecutive rejections after which radial sampling gives up.
pub const MAX_REJECTIONS: u32 = 10_000;

static ENVELOPE_VIOLATIONS: AtomicU64 = AtomicU64::new(0);

/// Number of radial proposals seen so far whose target density exceeded the
/// rejection envelope. Any nonzero value means sampling was biased.
pub fn envelope_violations() -> u64 {
    ENVELOPE_VIOLATIONS.load(Ordering::Relaxed)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("invalid ball kernel: radius {radius}, sigma {sigma}")]
    InvalidKernel { radius: f64, sigma: f64 },
    #[error("point at distance {distance} from the center lies outside the ball of radius {radius}")]
    OutsideBall { distance: f64, radius: f64 },
    #[error("point at distance {distance} from the center is not on the sphere of radius {radius}")]
    NotOnSphere { distance: f64, radius: f64 },
    #[error("gradient kernel is singular at the ball center")]
    SingularAtCenter,
    #[error("radial rejection sampling failed after {attempts} attempts (R = {radius}, sigma = {sigma})")]
    EnvelopeFailure {
        attempts: u32,
        radius: f64,
        sigma: f64,
    },
}

/// A ball `B(c)` of radius `R` carrying a constant screening coefficient.
#[derive(Debug, Clone, Copy)]
pub struct BallKernel {
    dim: Dim,
    center: Vec3,
    radius: f64,
    sigma: f64,
    sqrt_sigma: f64,
}

/// The rejection envelope for the radial density of the centered Green's
/// function: a constant upper bound on `|∂B₁| r^{d−1} G(r) / |G|` over `[0, R]`.
pub fn envelope_bound(radius: f64, sigma: f64) -> f64 {
    let inv_sigma = if sigma > 0.0 { 1.0 / sigma } else { f64::INFINITY };
    let inv_r = 1.0 / radius;
    if radius <= sigma {
        (2.2 * inv_r.max(inv_sigma)).max(0.6 * radius.sqrt().max(sigma.sqrt()))
    } else {
        (2.2 * inv_r.min(inv_sigma)).max(0.6 * radius.sqrt().min(sigma.sqrt()))
    }
}

/// `sinh(a) / sinh(b)` for `b > 0` without overflow.
fn sinh_ratio(a: f64, b: f64) -> f64 {
    if b < 300.0 {
        a.sinh() / b.sinh()
    } else {
        (a - b).exp() * (-2.0 * a).exp_m1() / (-2.0 * b).exp_m1()
    }
}

/// `(1 − e^{−2x}) / (2x)`, so that `sinh(x)/x = e^x · sinhc_scaled(x)`.
fn sinhc_scaled(x: f64) -> f64 {
    if x < 1e-8 {
        1.0 - x
    } else {
        -(-2.0 * x).exp_m1() / (2.0 * x)
    }
}

/// `e^{−x} (cosh x − sinh(x)/x)`.
fn cosh_minus_sinhc_scaled(x: f64) -> f64 {
    if x < 1.0 {
        // Σ_{k≥1} x^{2k} 2k / (2k+1)!
        let x2 = x * x;
        let mut sum = 0.0;
        let mut t = x2 / 3.0;
        let mut k = 1.0f64;
        loop {
            sum += t;
            let next = t * x2 * (k + 1.0) / (k * (2.0 * k + 2.0) * (2.0 * k + 3.0));
            if next < 1e-18 * sum {
                break;
            }
            t = next;
            k += 1.0;
        }
        sum * (-x).exp()
    } else {
        let e2 = (-2.0 * x).exp();
        0.5 * (1.0 + e2) - (1.0 - e2) / (2.0 * x)
    }
}

/// Backward-recurrence ratios `ρ_n = I_{n+ν}(x) / I_{n−1+ν}(x)` for `n = 1..=n_max`,
/// stored at index `n`. `ν` is 0 (cylindrical) or ½ (spherical).
fn first_kind_ratios(x: f64, nu: f64, n_max: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_max + 1];
    if x == 0.0 {
        return out;
    }
    let start = n_max + 40 + 2 * x.ceil() as usize;
    let mut rho = 0.0;
    for n in (1..=start).rev() {
        rho = 1.0 / (2.0 * (n as f64 + nu) / x + rho);
        if n <= n_max {
            out[n] = rho;
        }
    }
    out
}

/// Forward-recurrence ratios `κ_n = K_{n+ν}(x) / K_{n−1+ν}(x)`, index `n = 1..=n_max`.
fn second_kind_ratios(x: f64, nu: f64, n_max: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_max + 1];
    if n_max == 0 {
        return out;
    }
    out[1] = if nu == 0.0 {
        let (k0e, k1e) = k01_scaled(x);
        k1e / k0e
    } else {
        1.0 + 1.0 / x
    };
    for n in 2..=n_max {
        out[n] = 1.0 / out[n - 1] + 2.0 * (n as f64 - 1.0 + nu) / x;
    }
    out
}

/// Polar decomposition of a pair of points relative to the ball center.
struct PairGeometry {
    r_minus: f64,
    r_plus: f64,
    cos_theta: f64,
}

impl PairGeometry {
    fn new(u: Vec3, v: Vec3) -> Self {
        let (a, b) = (u.norm(), v.norm());
        let cos_theta = if a > 0.0 && b > 0.0 {
            (u.dot(v) / (a * b)).clamp(-1.0, 1.0)
        } else {
            1.0
        };
        Self {
            r_minus: a.min(b),
            r_plus: a.max(b),
            cos_theta,
        }
    }
}

/// Angular factors: `ε_n cos(nθ)` in 2D, `(2n+1) P_n(cos θ)` in 3D.
fn angular_factors(dim: Dim, cos_theta: f64, n_max: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_max + 1];
    match dim {
        Dim::Two => {
            // Chebyshev recurrence cos(nθ) = 2 cosθ cos((n−1)θ) − cos((n−2)θ)
            let (mut c0, mut c1) = (1.0, cos_theta);
            out[0] = 1.0;
            for (n, slot) in out.iter_mut().enumerate().skip(1) {
                let c = if n == 1 { c1 } else { 2.0 * cos_theta * c1 - c0 };
                if n > 1 {
                    c0 = c1;
                    c1 = c;
                }
                *slot = 2.0 * c;
            }
        }
        Dim::Three => {
            let (mut p0, mut p1) = (1.0, cos_theta);
            out[0] = 1.0;
            for (n, slot) in out.iter_mut().enumerate().skip(1) {
                let p = if n == 1 {
                    p1
                } else {
                    let k = (n - 1) as f64;
                    let p2 = ((2.0 * k + 1.0) * cos_theta * p1 - k * p0) / (k + 1.0);
                    p0 = p1;
                    p1 = p2;
                    p2
                };
                *slot = (2 * n + 1) as f64 * p;
            }
        }
    }
    out
}

/// Logarithms `ln I_{n+ν}(x)` for `n = 0..n_terms`; `x > 0`.
fn log_first_kind(x: f64, nu: f64, n_terms: usize) -> Vec<f64> {
    let ratios = first_kind_ratios(x, nu, n_terms.saturating_sub(1));
    let mut out = Vec::with_capacity(n_terms);
    // spherical functions use i_n = sqrt(π/2x) I_{n+½}; the constant factor
    // cancels in every ratio we form, so the n = 0 value uses i_0 = sinh x / x.
    let mut acc = if nu == 0.0 {
        i0_scaled(x).ln() + x
    } else {
        x + sinhc_scaled(x).ln()
    };
    out.push(acc);
    for rho in ratios.iter().skip(1).take(n_terms.saturating_sub(1)) {
        acc += rho.ln();
        out.push(acc);
    }
    out
}

/// Logarithms `ln K_{n+ν}(x)` for `n = 0..n_terms` (spherical: `k_0 = e^{−x}/x`).
fn log_second_kind(x: f64, nu: f64, n_terms: usize) -> Vec<f64> {
    let ratios = second_kind_ratios(x, nu, n_terms.saturating_sub(1));
    let mut out = Vec::with_capacity(n_terms);
    let mut acc = if nu == 0.0 {
        k01_scaled(x).0.ln() - x
    } else {
        -x - x.ln()
    };
    out.push(acc);
    for kappa in ratios.iter().skip(1).take(n_terms.saturating_sub(1)) {
        acc += kappa.ln();
        out.push(acc);
    }
    out
}

impl BallKernel {
    pub fn new(dim: Dim, center: Vec3, radius: f64, sigma: f64) -> Result<Self, KernelError> {
        if !(radius > 0.0 && radius.is_finite() && sigma >= 0.0 && sigma.is_finite()) {
            return Err(KernelError::InvalidKernel { radius, sigma });
        }
        Ok(Self {
            dim,
            center,
            radius,
            sigma,
            sqrt_sigma: sigma.sqrt(),
        })
    }

    pub fn dim(&self) -> Dim {
        self.dim
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn volume(&self) -> f64 {
        self.dim.ball_volume(self.radius)
    }

    pub fn surface_area(&self) -> f64 {
        self.dim.sphere_area(self.radius)
    }

    fn harmonic(&self) -> bool {
        self.sigma == 0.0
    }

    /// `1/(2π)` in 2D, `1/(4π)` in 3D.
    fn prefactor(&self) -> f64 {
        1.0 / self.dim.unit_sphere_area()
    }

    fn check_inside(&self, p: Vec3) -> Result<f64, KernelError> {
        let d = (p - self.center).norm();
        if d > self.radius * (1.0 + BALL_TOLERANCE) || !d.is_finite() {
            return Err(KernelError::OutsideBall {
                distance: d,
                radius: self.radius,
            });
        }
        Ok(d)
    }

    fn check_on_sphere(&self, p: Vec3) -> Result<(), KernelError> {
        let d = (p - self.center).norm();
        if (d - self.radius).abs() > self.radius * BALL_TOLERANCE || !d.is_finite() {
            return Err(KernelError::NotOnSphere {
                distance: d,
                radius: self.radius,
            });
        }
        Ok(())
    }

    // ----------------------------------------------------------------------
    // centered expressions

    /// The closed-form radial profile `Q(ρ)` (so that `G = prefactor · Q(r)`).
    /// Valid for any `ρ > 0`, including `ρ > R` as needed by the approximations.
    fn radial_profile(&self, rho: f64) -> f64 {
        let (s, big_r) = (self.sqrt_sigma, self.radius);
        match (self.dim, self.harmonic()) {
            (Dim::Two, true) => (big_r / rho).ln(),
            (Dim::Three, true) => 1.0 / rho - 1.0 / big_r,
            (Dim::Two, false) => {
                let (a, z) = (rho * s, big_r * s);
                let ka = k01_scaled(a).0;
                let kz = k01_scaled(z).0;
                (-a).exp() * (ka - kz * i0_scaled(a) / i0_scaled(z) * (2.0 * (a - z)).exp())
            }
            (Dim::Three, false) => sinh_ratio(s * (big_r - rho), s * big_r) / rho,
        }
    }

    /// `G^σ(x, y)` for `x` at the center and `|y − x| = r`.
    pub fn green_centered(&self, r: f64) -> Result<f64, KernelError> {
        if !(r > 0.0) || r > self.radius * (1.0 + BALL_TOLERANCE) {
            return Err(KernelError::OutsideBall {
                distance: r,
                radius: self.radius,
            });
        }
        Ok(self.green_centered_unchecked(r.min(self.radius)))
    }

    pub(crate) fn green_centered_unchecked(&self, r: f64) -> f64 {
        if r >= self.radius {
            return 0.0;
        }
        (self.prefactor() * self.radial_profile(r)).max(0.0)
    }

    /// `|G^σ| = ∫_B G^σ(c, y) dy`.
    pub fn green_norm(&self) -> f64 {
        let big_r = self.radius;
        if self.harmonic() {
            return match self.dim {
                Dim::Two => big_r * big_r / 4.0,
                Dim::Three => big_r * big_r / 6.0,
            };
        }
        let z = big_r * self.sqrt_sigma;
        let mass = match self.dim {
            // 1 − 1/I0(z)
            Dim::Two => {
                if z < 30.0 {
                    i0_minus_one(z) / i0(z)
                } else {
                    1.0 - (-z).exp() / i0_scaled(z)
                }
            }
            // 1 − z / sinh z
            Dim::Three => {
                if z < 1.0 {
                    let z2 = z * z;
                    let mut term = z * z2 / 6.0;
                    let mut sum: f64 = 0.0;
                    let mut k = 1.0;
                    while term > 1e-18 * sum.max(1e-300) {
                        sum += term;
                        term *= z2 / ((2.0 * k + 2.0) * (2.0 * k + 3.0));
                        k += 1.0;
                    }
                    sum / z.sinh()
                } else {
                    1.0 - z / z.sinh()
                }
            }
        };
        mass / self.sigma
    }

    /// Probability that a walk started at the center is absorbed in the ball:
    /// `σ |G^σ|`, in `[0, 1)`.
    pub fn absorption_probability(&self) -> f64 {
        if self.harmonic() {
            0.0
        } else {
            self.sigma * self.green_norm()
        }
    }

    /// `P^σ(c, z)`, constant over the sphere.
    pub fn poisson_centered(&self) -> f64 {
        let big_r = self.radius;
        let z = big_r * self.sqrt_sigma;
        let shape = if self.harmonic() {
            1.0
        } else {
            match self.dim {
                Dim::Two => {
                    if z < 30.0 {
                        1.0 / i0(z)
                    } else {
                        (-z).exp() / i0_scaled(z)
                    }
                }
                Dim::Three => {
                    if z > 700.0 {
                        2.0 * z * (-z).exp()
                    } else {
                        z / z.sinh()
                    }
                }
            }
        };
        shape / self.surface_area()
    }

    // ----------------------------------------------------------------------
    // off-centered expressions

    /// Truncated eigenfunction expansion of `G^σ(x, y)` with `n_terms` angular
    /// modes (`n = 0..n_terms`).
    pub fn green_offcentered_series(&self, x: Vec3, y: Vec3, n_terms: usize) -> Result<f64, KernelError> {
        self.check_inside(x)?;
        self.check_inside(y)?;
        let n_terms = n_terms.max(1);
        let geo = PairGeometry::new(x - self.center, y - self.center);
        let big_r = self.radius;
        let ang = angular_factors(self.dim, geo.cos_theta, n_terms - 1);
        let (rm, rp) = (geo.r_minus, geo.r_plus);
        if rp <= 0.0 {
            return Err(KernelError::SingularAtCenter);
        }

        let sum = if self.harmonic() {
            let mut sum = 0.0;
            for (n, &a) in ang.iter().enumerate().take(n_terms) {
                let term = match self.dim {
                    Dim::Two => {
                        if n == 0 {
                            (big_r / rp).ln()
                        } else {
                            let nf = n as f64;
                            0.5 * a / nf * ((rm / rp).powi(n as i32) - (rm * rp / (big_r * big_r)).powi(n as i32))
                        }
                    }
                    Dim::Three => {
                        let pn = a / (2 * n + 1) as f64;
                        pn * (rm.powi(n as i32) / rp.powi(n as i32 + 1)
                            - (rm * rp).powi(n as i32) / big_r.powi(2 * n as i32 + 1))
                    }
                };
                sum += term;
            }
            sum
        } else {
            let s = self.sqrt_sigma;
            let nu = match self.dim {
                Dim::Two => 0.0,
                Dim::Three => 0.5,
            };
            let (za, zb, zr) = (rm * s, rp * s, big_r * s);
            let l_ib = log_first_kind(zb, nu, n_terms);
            let l_ir = log_first_kind(zr, nu, n_terms);
            let l_kb = log_second_kind(zb, nu, n_terms);
            let l_kr = log_second_kind(zr, nu, n_terms);
            let l_ia = if za > 0.0 {
                Some(log_first_kind(za, nu, n_terms))
            } else {
                None
            };
            let mut sum = 0.0;
            for n in 0..n_terms {
                let l_ia_n = match &l_ia {
                    Some(v) => v[n],
                    None if n == 0 => 0.0,
                    None => break,
                };
                let bracket = -(l_kr[n] + l_ib[n] - l_ir[n] - l_kb[n]).exp_m1();
                let mag = (l_ia_n + l_kb[n]).exp() * bracket;
                let weight = if n == 0 { 1.0 } else { ang[n] };
                sum += weight * mag;
            }
            match self.dim {
                Dim::Two => sum,
                Dim::Three => s * sum,
            }
        };
        Ok(self.prefactor() * sum)
    }

    /// Closed-form approximation of `G^σ(x, y)` from the radial profile at the
    /// direct distance and at the image distance `(R² − u·v)/R`.
    pub fn green_offcentered_approx(&self, x: Vec3, y: Vec3) -> Result<f64, KernelError> {
        self.check_inside(x)?;
        self.check_inside(y)?;
        let (u, v) = (x - self.center, y - self.center);
        let w = (y - x).norm();
        let image = (self.radius * self.radius - u.dot(v)) / self.radius;
        Ok(self.prefactor() * (self.radial_profile(w) - self.radial_profile(image)))
    }

    /// Radial flux profile `V(ρ)` paired with [`Self::radial_profile`].
    fn radial_flux(&self, rho: f64) -> f64 {
        let (s, big_r) = (self.sqrt_sigma, self.radius);
        match (self.dim, self.harmonic()) {
            (Dim::Two, true) => 1.0 / rho,
            (Dim::Three, true) => 1.0 / (rho * rho),
            (Dim::Two, false) => {
                let (a, z) = (rho * s, big_r * s);
                let (_, k1a) = k01_scaled(a);
                let (k0z, _) = k01_scaled(z);
                s * (-a).exp() * (k1a + k0z * i1_scaled(a) / i0_scaled(z) * (2.0 * (a - z)).exp())
            }
            (Dim::Three, false) => {
                let (a, z) = (rho * s, big_r * s);
                // e^{−z}/sinh z · (cosh a − sinh a / a) = 2 e^{a−2z} ce(a) / (1 − e^{−2z})
                let image = 2.0 * (a - 2.0 * z).exp() * cosh_minus_sinhc_scaled(a) / -(-2.0 * z).exp_m1();
                s / rho * ((-a).exp() * (1.0 + 1.0 / a) + image)
            }
        }
    }

    /// Closed-form approximation of `P^σ(x, z)` for `z` on the sphere.
    pub fn poisson_offcentered_approx(&self, x: Vec3, z: Vec3) -> Result<f64, KernelError> {
        self.check_inside(x)?;
        self.check_on_sphere(z)?;
        let (u, v) = (x - self.center, z - self.center);
        let w = (z - x).norm();
        let (uv, vn) = (u.dot(v), v.norm());
        let image = (self.radius * self.radius - uv) / self.radius;
        let direct = self.radial_flux(w) * (vn * vn - uv) / (w * vn);
        let reflected = if uv == 0.0 {
            0.0
        } else {
            self.radial_flux(image) * uv / (self.radius * vn)
        };
        Ok(self.prefactor() * (direct + reflected))
    }

    /// Exact `G^σ(x, y)` for arbitrary `x, y` in the ball.
    pub fn green_offcentered(&self, x: Vec3, y: Vec3) -> Result<f64, KernelError> {
        self.check_inside(x)?;
        self.check_inside(y)?;
        Ok(self.green_offcentered_unchecked(x, y))
    }

    pub(crate) fn green_offcentered_unchecked(&self, x: Vec3, y: Vec3) -> f64 {
        let (u, v) = (x - self.center, y - self.center);
        let w = (y - x).norm();
        if w == 0.0 {
            return f64::INFINITY;
        }
        let big_r = self.radius;
        let r2 = big_r * big_r;
        if self.harmonic() {
            // Kelvin image
            let image = (r2 * r2 - 2.0 * r2 * u.dot(v) + u.norm2() * v.norm2()).max(0.0).sqrt();
            let g = match self.dim {
                Dim::Two => (image / (big_r * w)).ln(),
                Dim::Three => 1.0 / w - big_r / image,
            };
            return (self.prefactor() * g).max(0.0);
        }
        let s = self.sqrt_sigma;
        let singular = match self.dim {
            Dim::Two => {
                let a = s * w;
                k01_scaled(a).0 * (-a).exp()
            }
            Dim::Three => (-s * w).exp() / w,
        };
        let geo = PairGeometry::new(u, v);
        let image = self.image_series(&geo);
        (self.prefactor() * (singular - image)).max(0.0)
    }

    /// Regular part `Σ_n a_n I_n(r₋s) I_n(r₊s) K_n(Rs)/I_n(Rs)` of the Green's
    /// function (spherical analogue in 3D, including the leading `s`).
    ///
    /// The harmonic image, whose modes the screened ones approach as `n` grows,
    /// is summed in closed form; only the difference is expanded. This keeps
    /// the truncation error small when both points approach the sphere.
    fn image_series(&self, geo: &PairGeometry) -> f64 {
        let s = self.sqrt_sigma;
        let big_r = self.radius;
        let (a, b, z) = (geo.r_minus * s, geo.r_plus * s, big_r * s);
        let t = (geo.r_minus * geo.r_plus / (big_r * big_r)).min(1.0);
        let (nu, lead) = match self.dim {
            Dim::Two => {
                let t0 = i0_scaled(a) * i0_scaled(b) * k01_scaled(z).0 / i0_scaled(z) * (a + b - 2.0 * z).exp();
                (0.0, t0)
            }
            Dim::Three => {
                let t0 = sinhc_scaled(a) * sinhc_scaled(b) / (z * sinhc_scaled(z)) * (a + b - 2.0 * z).exp();
                (0.5, s * t0)
            }
        };
        if a == 0.0 {
            return lead;
        }
        let n_max = truncation_order(t, SERIES_TOL);
        let c = geo.cos_theta;
        // harmonic modes h_n and their sum over n ≥ 1
        let (h1, harmonic): (f64, f64) = match self.dim {
            Dim::Two => (0.5 * t, -0.5 * (1.0 - 2.0 * t * c + t * t).max(0.0).ln()),
            Dim::Three => (
                t / (3.0 * big_r),
                1.0 / (big_r * (1.0 - 2.0 * t * c + t * t).max(0.0).sqrt()) - 1.0 / big_r,
            ),
        };
        let scale = harmonic.abs() + h1 / t;
        SCRATCH.with(|cell| {
            let scratch = &mut *cell.borrow_mut();
            scratch.green_ratios(self.dim, c, a, b, z, nu, n_max);
            if lead < 1e-8 * scale {
                // strongly screened: the modes are far from harmonic and decay fast
                lead * (1.0 + mode_sum(&scratch.ratio, &scratch.ang, 0.0, 0.0, 0.0))
            } else {
                let hstep = match self.dim {
                    Dim::Two => 0.0,
                    Dim::Three => 1.0,
                };
                lead + harmonic + mode_sum(&scratch.ratio, &scratch.ang, h1 / lead, t, hstep) * lead
            }
        })
    }

    /// Truncated expansion of `P^σ(x, z)` with `n_terms` modes.
    pub fn poisson_offcentered_series(&self, x: Vec3, z: Vec3, n_terms: usize) -> Result<f64, KernelError> {
        self.check_inside(x)?;
        self.check_on_sphere(z)?;
        Ok(self.poisson_series_unchecked(x, z, n_terms.max(1) - 1))
    }

    /// Exact `P^σ(x, z)` for `x` in the ball and `z` on its sphere.
    pub fn poisson_offcentered(&self, x: Vec3, z: Vec3) -> Result<f64, KernelError> {
        self.check_inside(x)?;
        self.check_on_sphere(z)?;
        Ok(self.poisson_offcentered_unchecked(x, z))
    }

    pub(crate) fn poisson_offcentered_unchecked(&self, x: Vec3, z: Vec3) -> f64 {
        let u = x - self.center;
        if self.harmonic() {
            let big_r = self.radius;
            let w = (z - x).norm();
            let num = (big_r * big_r - u.norm2()).max(0.0);
            return match self.dim {
                Dim::Two => num / (2.0 * PI * big_r * w * w),
                Dim::Three => num / (4.0 * PI * big_r * w * w * w),
            };
        }
        let big_r = self.radius;
        let un = u.norm();
        let s = self.sqrt_sigma;
        let (a, zr) = (un * s, big_r * s);
        let (nu, lead) = match self.dim {
            Dim::Two => (0.0, i0_scaled(a) / i0_scaled(zr) * (a - zr).exp()),
            Dim::Three => (0.5, sinhc_scaled(a) / sinhc_scaled(zr) * (a - zr).exp()),
        };
        if un == 0.0 {
            return lead / self.surface_area();
        }
        let t = (un / big_r).min(1.0);
        let c = (u.dot(z - self.center) / (un * big_r)).clamp(-1.0, 1.0);
        let n_max = truncation_order_capped(t, SERIES_TOL, usize::MAX / 4);
        let d = (1.0 - 2.0 * t * c + t * t).max(0.0);
        let harmonic = match self.dim {
            Dim::Two => (1.0 - t * t) / d,
            Dim::Three => (1.0 - t * t) / (d * d.sqrt()),
        } - 1.0;
        let sum = SCRATCH.with(|cell| {
            let scratch = &mut *cell.borrow_mut();
            // modes satisfy T_n ≥ lead·tⁿ, so subtracting the harmonic sum costs
            // at most a relative 1e-16/lead
            if lead < 1e-8 {
                scratch.poisson_ratios(self.dim, c, a, zr, nu, n_max.min(SERIES_CAP));
                return lead * (1.0 + mode_sum(&scratch.ratio, &scratch.ang, 0.0, 0.0, 0.0));
            }
            let w = 0.25 * zr * zr;
            let n_use = n_max.min((POISSON_TAIL_BASE + POISSON_TAIL_PER_W * w) as usize).min(SERIES_CAP);
            scratch.poisson_ratios(self.dim, c, a, zr, nu, n_use);
            let body = lead + harmonic + mode_sum(&scratch.ratio, &scratch.ang, t / lead, t, -1.0) * lead;
            if n_use == n_max {
                return body;
            }
            // beyond n_use the corrected modes are −w(1−t²)·2cos(nθ)tⁿ/n (2D)
            // or −w(1−t²)·2Pₙ(c)tⁿ (3D); their remainder sums in closed form
            let full = match self.dim {
                Dim::Two => -d.ln(),
                Dim::Three => 2.0 / d.sqrt() - 2.0,
            };
            body - w * (1.0 - t * t) * (full - leading_mode_sum(self.dim, &scratch.ang, t))
        });
        (sum / self.surface_area()).max(0.0)
    }

    fn poisson_series_unchecked(&self, x: Vec3, z: Vec3, n_max: usize) -> f64 {
        let u = x - self.center;
        let big_r = self.radius;
        let un = u.norm();
        let cos_theta = if un > 0.0 {
            (u.dot(z - self.center) / (un * big_r)).clamp(-1.0, 1.0)
        } else {
            1.0
        };
        let ang = angular_factors(self.dim, cos_theta, n_max);
        let n_max = if un == 0.0 { 0 } else { n_max };
        let sum = if self.harmonic() {
            // modes (|u|/R)^n
            let t = un / big_r;
            let mut sum = 0.0;
            let mut pow = 1.0;
            for &a in ang.iter().take(n_max + 1) {
                sum += a * pow;
                pow *= t;
            }
            sum
        } else {
            let s = self.sqrt_sigma;
            let (a, zr) = (un * s, big_r * s);
            let nu = match self.dim {
                Dim::Two => 0.0,
                Dim::Three => 0.5,
            };
            let lead = match self.dim {
                Dim::Two => i0_scaled(a) / i0_scaled(zr) * (a - zr).exp(),
                Dim::Three => sinhc_scaled(a) / sinhc_scaled(zr) * (a - zr).exp(),
            };
            if n_max == 0 {
                lead
            } else {
                let rho_a = first_kind_ratios(a, nu, n_max);
                let rho_z = first_kind_ratios(zr, nu, n_max);
                let mut acc = 0.0;
                for n in (1..=n_max).rev() {
                    acc = rho_a[n] / rho_z[n] * (ang[n] + acc);
                }
                lead * (1.0 + acc)
            }
        };
        sum / self.surface_area()
    }

    // ----------------------------------------------------------------------
    // gradients at the center

    /// `∇ₓ G^σ(x, y)` evaluated at `x = c`.
    pub fn green_gradient_centered(&self, y: Vec3) -> Result<Vec3, KernelError> {
        let r = self.check_inside(y)?;
        if r == 0.0 {
            return Err(KernelError::SingularAtCenter);
        }
        Ok(self.green_gradient_centered_unchecked(y))
    }

    pub(crate) fn green_gradient_centered_unchecked(&self, y: Vec3) -> Vec3 {
        let w = y - self.center;
        let r = w.norm().min(self.radius);
        let big_r = self.radius;
        let scale = if self.harmonic() {
            match self.dim {
                Dim::Two => (1.0 / r - r / (big_r * big_r)) / (2.0 * PI * r),
                Dim::Three => (1.0 / r - r * r / (big_r * big_r * big_r)) / (4.0 * PI * r * r),
            }
        } else {
            let s = self.sqrt_sigma;
            let (a, z) = (r * s, big_r * s);
            match self.dim {
                Dim::Two => {
                    let k1a = k01_scaled(a).1;
                    let k1z = k01_scaled(z).1;
                    let bracket = (-a).exp() * (k1a - k1z * i1_scaled(a) / i1_scaled(z) * (2.0 * (a - z)).exp());
                    s * bracket / (2.0 * PI * r)
                }
                Dim::Three => {
                    let bracket = (-a).exp()
                        * ((1.0 + 1.0 / a)
                            - (2.0 * (a - z)).exp() * (1.0 + 1.0 / z) * cosh_minus_sinhc_scaled(a)
                                / cosh_minus_sinhc_scaled(z));
                    s * bracket / (4.0 * PI * r * r)
                }
            }
        };
        w * scale
    }

    /// `∇ₓ P^σ(x, z)` evaluated at `x = c`.
    pub fn poisson_gradient_centered(&self, z: Vec3) -> Result<Vec3, KernelError> {
        self.check_on_sphere(z)?;
        Ok(self.poisson_gradient_centered_unchecked(z))
    }

    pub(crate) fn poisson_gradient_centered_unchecked(&self, z: Vec3) -> Vec3 {
        let w = z - self.center;
        let big_r = self.radius;
        let scale = if self.harmonic() {
            match self.dim {
                Dim::Two => 1.0 / (PI * big_r.powi(3)),
                Dim::Three => 3.0 / (4.0 * PI * big_r.powi(4)),
            }
        } else {
            let s = self.sqrt_sigma;
            let zr = big_r * s;
            match self.dim {
                Dim::Two => {
                    if zr < 30.0 {
                        s / (2.0 * PI * big_r * big_r * i1(zr))
                    } else {
                        s * (-zr).exp() / (2.0 * PI * big_r * big_r * i1_scaled(zr))
                    }
                }
                Dim::Three => self.sigma * (-zr).exp() / (4.0 * PI * big_r * big_r * cosh_minus_sinhc_scaled(zr)),
            }
        };
        w * scale
    }

    // ----------------------------------------------------------------------
    // sampling

    /// Radial density `|∂B₁| r^{d−1} G(r) / |G|` on `[0, R]`.
    pub fn radial_density(&self, r: f64) -> f64 {
        if r <= 0.0 || r >= self.radius {
            return 0.0;
        }
        let jac = self.dim.unit_sphere_area() * r.powi(self.dim.get() as i32 - 1);
        jac * self.green_centered_unchecked(r) / self.green_norm()
    }

    /// Draws `y ~ G^σ(c, ·)/|G^σ|` and returns it with its density.
    pub fn sample_green_centered<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(Vec3, f64), KernelError> {
        let bound = envelope_bound(self.radius, self.sigma);
        let norm = self.green_norm();
        let jac_scale = self.dim.unit_sphere_area() / norm;
        for _ in 0..MAX_REJECTIONS {
            let r = self.radius * rng.random::<f64>();
            let target = jac_scale * r.powi(self.dim.get() as i32 - 1) * self.green_centered_unchecked(r);
            if target > bound {
                ENVELOPE_VIOLATIONS.fetch_add(1, Ordering::Relaxed);
            }
            if rng.random::<f64>() * bound < target {
                let dir = sample_unit_direction(self.dim, rng);
                let pdf = self.green_centered_unchecked(r) / norm;
                return Ok((self.center + dir * r, pdf));
            }
        }
        Err(KernelError::EnvelopeFailure {
            attempts: MAX_REJECTIONS,
            radius: self.radius,
            sigma: self.sigma,
        })
    }

    /// Uniform point on the ball's sphere.
    pub fn sample_sphere<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        self.center + sample_unit_direction(self.dim, rng) * self.radius
    }

    /// Uniform point in the ball.
    pub fn sample_ball_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        let u: f64 = rng.random();
        let r = self.radius * u.powf(1.0 / self.dim.get() as f64);
        self.center + sample_unit_direction(self.dim, rng) * r
    }
}

/// `Σ_{n=1}^{N} ang_n (T_n − h_n)` with `T_n = Π_{j≤n} ratio_j` and harmonic
/// modes `h_n` starting at `h1`, `N = ratio.len() − 1`.
///
/// `hkind` selects the harmonic step `h_n/h_{n−1}`: `−1` gives `t`, `0` gives
/// `t(n−1)/n`, `1` gives `t(2n−1)/(2n+1)`. With `h1 = 0` the plain mode sum
/// is returned.
fn mode_sum(ratio: &[f64], ang: &[f64], h1: f64, t: f64, hkind: f64) -> f64 {
    let n_max = ratio.len().saturating_sub(1);
    if n_max == 0 {
        return 0.0;
    }
    let recip = reciprocals();
    let (mut tn, mut h) = (ratio[1], h1);
    let mut sum = ang[1] * (tn - h);
    for n in 2..=n_max {
        tn *= ratio[n];
        h *= if hkind < 0.0 {
            t
        } else if hkind == 0.0 {
            t - t * recip[n]
        } else {
            t - 2.0 * t * recip[2 * n + 1]
        };
        sum += ang[n] * (tn - h);
    }
    sum
}

/// `Σ_{n=1}^{N} 2cos(nθ)tⁿ/n` (2D) or `Σ_{n=1}^{N} 2Pₙ(c)tⁿ` (3D) from the
/// angular factors.
fn leading_mode_sum(dim: Dim, ang: &[f64], t: f64) -> f64 {
    let recip = reciprocals();
    let mut pow = 1.0;
    let mut sum = 0.0;
    for (n, a) in ang.iter().enumerate().skip(1) {
        pow *= t;
        sum += match dim {
            Dim::Two => a * pow * recip[n],
            Dim::Three => 2.0 * a * pow * recip[2 * n + 1],
        };
    }
    sum
}

const SERIES_TOL: f64 = 1e-13;
/// Poisson modes summed exactly before switching to the asymptotic tail, as
/// `base + per_w · (R√σ)²/4`.
const POISSON_TAIL_BASE: f64 = 1000.0;
const POISSON_TAIL_PER_W: f64 = 400.0;
const SERIES_CAP: usize = 20_000;

/// `1/n` for `n = 0..=2·SERIES_CAP + 2` (entry 0 unused).
fn reciprocals() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut v: Vec<f64> = (0..=2 * SERIES_CAP + 2).map(|n| 1.0 / n as f64).collect();
        v[0] = 0.0;
        v
    })
}

thread_local! {
    static SCRATCH: RefCell<SeriesScratch> = RefCell::new(SeriesScratch::default());
}

/// Buffers for the exact expansions. The ratios that depend only on the ball
/// (`R√σ`) are kept for the last ball seen, which next-flight evaluates many
/// times in a row.
#[derive(Default)]
struct SeriesScratch {
    ball: Option<(f64, f64)>,
    inv_rho_z: Vec<f64>,
    kap_over_rho_z: Vec<f64>,
    ratio: Vec<f64>,
    ang: Vec<f64>,
}

/// Forward angular recurrence: `ε_n cos(nθ)` in 2D, `(2n+1) P_n(c)` in 3D.
struct Angular {
    dim: Dim,
    c: f64,
    p0: f64,
    p1: f64,
}

impl Angular {
    fn new(dim: Dim, c: f64) -> Self {
        Self { dim, c, p0: 1.0, p1: 1.0 }
    }

    /// Factor for mode `n`; must be called for `n = 1, 2, ...` in order.
    #[inline(always)]
    fn next(&mut self, n: usize, recip: &[f64]) -> f64 {
        let p = if n == 1 {
            self.c
        } else {
            let k = (n - 1) as f64;
            match self.dim {
                Dim::Two => 2.0 * self.c * self.p1 - self.p0,
                Dim::Three => ((2.0 * k + 1.0) * self.c * self.p1 - k * self.p0) * recip[n],
            }
        };
        self.p0 = self.p1;
        self.p1 = p;
        match self.dim {
            Dim::Two => 2.0 * p,
            Dim::Three => (2 * n + 1) as f64 * p,
        }
    }
}

impl SeriesScratch {
    fn ensure_ball(&mut self, z: f64, nu: f64, n_max: usize) {
        let have = self.inv_rho_z.len().saturating_sub(1);
        if self.ball == Some((z, nu)) && have >= n_max {
            return;
        }
        let len = if self.ball == Some((z, nu)) { n_max.max(2 * have) } else { n_max };
        let len = len.min(SERIES_CAP + 8).max(n_max);
        let rho = first_kind_ratios(z, nu, len);
        let kap = second_kind_ratios(z, nu, len);
        self.inv_rho_z.clear();
        self.kap_over_rho_z.clear();
        for (r, k) in rho.iter().zip(&kap) {
            let inv = if *r > 0.0 { 1.0 / r } else { 0.0 };
            self.inv_rho_z.push(inv);
            self.kap_over_rho_z.push(k * inv);
        }
        self.ball = Some((z, nu));
    }

    fn reset(&mut self, n_max: usize) {
        self.ratio.clear();
        self.ratio.resize(n_max + 1, 0.0);
        self.ang.clear();
        self.ang.resize(n_max + 1, 0.0);
    }

    /// Fills the angular factors and
    /// `ratio_n = I_n(a) I_n(b) K_n(z) I_{n−1}(z) / (I_{n−1}(a) I_{n−1}(b) K_{n−1}(z) I_n(z))`.
    fn green_ratios(&mut self, dim: Dim, c: f64, a: f64, b: f64, z: f64, nu: f64, n_max: usize) {
        self.ensure_ball(z, nu, n_max);
        self.reset(n_max);
        if a == 0.0 || b == 0.0 {
            return;
        }
        let recip = reciprocals();
        let (ia, ib) = (2.0 / a, 2.0 / b);
        let (mut ra, mut rb) = (0.0, 0.0);
        for n in (n_max + 1..=n_max + 20 + b.ceil() as usize).rev() {
            let m = n as f64 + nu;
            ra = 1.0 / (m * ia + ra);
            rb = 1.0 / (m * ib + rb);
        }
        // the backward ratio chains and the forward angular chain are
        // independent, so one loop lets their latencies overlap
        let mut angular = Angular::new(dim, c);
        for k in 0..n_max {
            let n = n_max - k;
            let m = n as f64 + nu;
            ra = 1.0 / (m * ia + ra);
            rb = 1.0 / (m * ib + rb);
            self.ratio[n] = ra * rb * self.kap_over_rho_z[n];
            self.ang[k + 1] = angular.next(k + 1, recip);
        }
    }

    /// Fills the angular factors and `ratio_n = I_n(a) I_{n−1}(z) / (I_{n−1}(a) I_n(z))`.
    fn poisson_ratios(&mut self, dim: Dim, c: f64, a: f64, z: f64, nu: f64, n_max: usize) {
        self.ensure_ball(z, nu, n_max);
        self.reset(n_max);
        if a == 0.0 {
            return;
        }
        let recip = reciprocals();
        let ia = 2.0 / a;
        let mut ra = 0.0;
        for n in (n_max + 1..=n_max + 20 + a.ceil() as usize).rev() {
            ra = 1.0 / ((n as f64 + nu) * ia + ra);
        }
        let mut angular = Angular::new(dim, c);
        for k in 0..n_max {
            let n = n_max - k;
            ra = 1.0 / ((n as f64 + nu) * ia + ra);
            self.ratio[n] = ra * self.inv_rho_z[n];
            self.ang[k + 1] = angular.next(k + 1, recip);
        }
    }
}

/// Smallest `n` with `t^n < tol`, capped to keep evaluation bounded near the sphere.
fn truncation_order(t: f64, tol: f64) -> usize {
    truncation_order_capped(t, tol, SERIES_CAP)
}

fn truncation_order_capped(t: f64, tol: f64, cap: usize) -> usize {
    if t <= 0.0 {
        return 0;
    }
    if t >= 1.0 {
        return cap;
    }
    let n = (tol.ln() / t.ln()).ceil().min(cap as f64) as usize + 4;
    n.clamp(4, cap)
}

/// Uniform direction on the unit circle (2D) or unit sphere (3D).
pub fn sample_unit_direction<R: Rng + ?Sized>(dim: Dim, rng: &mut R) -> Vec3 {
    match dim {
        Dim::Two => {
            let phi = 2.0 * PI * rng.random::<f64>();
            Vec3::new2(phi.cos(), phi.sin())
        }
        Dim::Three => {
            let z = 1.0 - 2.0 * rng.random::<f64>();
            let rho = (1.0 - z * z).max(0.0).sqrt();
            let phi = 2.0 * PI * rng.random::<f64>();
            Vec3::new(rho * phi.cos(), rho * phi.sin(), z)
        }
    }
}

/// Uniform point on the sphere of radius `radius` about `center`.
pub fn sample_sphere_uniform<R: Rng + ?Sized>(dim: Dim, center: Vec3, radius: f64, rng: &mut R) -> Vec3 {
    center + sample_unit_direction(dim, rng) * radius
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specfun::{bessel_i, bessel_k};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ball(dim: Dim, r: f64, sigma: f64) -> BallKernel {
        BallKernel::new(dim, Vec3::ZERO, r, sigma).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    // textbook form, evaluated without any rescaling
    fn green_centered_oracle(dim: Dim, big_r: f64, sigma: f64, r: f64) -> f64 {
        let s = sigma.sqrt();
        match dim {
            Dim::Two => {
                let k = |x| bessel_k(0, x).unwrap();
                let i = |x| bessel_i(0, x).unwrap();
                (k(r * s) - k(big_r * s) * i(r * s) / i(big_r * s)) / (2.0 * PI)
            }
            Dim::Three => (s * (big_r - r)).sinh() / (r * (s * big_r).sinh()) / (4.0 * PI),
        }
    }

    // composite Simpson on [0, R] of the radial density before normalization
    fn green_mass_quadrature(k: &BallKernel) -> f64 {
        let n = 20_000;
        let h = k.radius() / n as f64;
        let f = |r: f64| {
            if r <= 0.0 {
                0.0
            } else {
                k.dim().unit_sphere_area() * r.powi(k.dim().get() as i32 - 1) * k.green_centered_unchecked(r)
            }
        };
        let mut sum = f(0.0) + f(k.radius());
        for j in 1..n {
            sum += if j % 2 == 1 { 4.0 } else { 2.0 } * f(j as f64 * h);
        }
        sum * h / 3.0
    }

    fn random_inside(dim: Dim, radius: f64, rng: &mut ChaCha8Rng) -> Vec3 {
        let k = ball(dim, radius, 0.0);
        k.sample_ball_uniform(rng)
    }

    #[test]
    fn centered_green_values() {
        let k0 = ball(Dim::Three, 1.0, 0.0);
        assert!((k0.green_centered(0.5).unwrap() - 0.079_577_5).abs() < 1e-7);
        let k1 = ball(Dim::Three, 1.0, 1.0);
        assert!((k1.green_centered(0.5).unwrap() - 0.070_571).abs() < 1e-5);
        for dim in [Dim::Two, Dim::Three] {
            for sigma in [0.0, 0.3, 4.0] {
                assert_eq!(ball(dim, 1.5, sigma).green_centered(1.5).unwrap(), 0.0);
            }
        }
        assert!(k1.green_centered(0.0).is_err());
        assert!(k1.green_centered(1.1).is_err());
    }

    #[test]
    fn centered_green_matches_direct_formula() {
        for dim in [Dim::Two, Dim::Three] {
            for &(big_r, sigma) in &[(1.0, 1.0), (0.3, 20.0), (2.0, 0.01), (5.0, 4.0)] {
                let k = ball(dim, big_r, sigma);
                for j in 1..20 {
                    let r = big_r * j as f64 / 20.0;
                    let want = green_centered_oracle(dim, big_r, sigma, r);
                    assert!(rel(k.green_centered(r).unwrap(), want) < 1e-10, "{dim:?} R={big_r} s={sigma} r={r}");
                }
            }
        }
    }

    #[test]
    fn green_norm_values_and_quadrature() {
        assert!((ball(Dim::Three, 1.0, 0.0).green_norm() - 1.0 / 6.0).abs() < 1e-15);
        assert!((ball(Dim::Three, 1.0, 1.0).green_norm() - 0.149_082).abs() < 1e-6);
        for dim in [Dim::Two, Dim::Three] {
            for big_r in [0.1, 1.0, 10.0] {
                for sigma in [0.0, 0.5, 2.0, 20.0] {
                    let k = ball(dim, big_r, sigma);
                    let q = green_mass_quadrature(&k);
                    assert!(rel(k.green_norm(), q) < 1e-6, "{dim:?} R={big_r} s={sigma}: {} vs {q}", k.green_norm());
                    assert!(sigma * k.green_norm() <= 1.0);
                }
            }
        }
    }

    #[test]
    fn norm_is_continuous_at_small_sigma() {
        for dim in [Dim::Two, Dim::Three] {
            let h = ball(dim, 1.0, 0.0).green_norm();
            let s = ball(dim, 1.0, 1e-9).green_norm();
            assert!(rel(s, h) < 1e-8);
        }
    }

    #[test]
    fn poisson_centered_values() {
        let area = 4.0 * PI;
        assert!((ball(Dim::Three, 1.0, 0.0).poisson_centered() - 1.0 / area).abs() < 1e-15);
        assert!((ball(Dim::Three, 1.0, 1.0).poisson_centered() - 0.067_714).abs() < 1e-6);
        assert!(((1.0 - 0.149_082) / area - 0.067_714).abs() < 1e-6);
    }

    #[test]
    fn mass_identity_on_grid() {
        for dim in [Dim::Two, Dim::Three] {
            for big_r in [0.1, 1.0, 10.0] {
                for sigma in [0.0, 1e-12, 0.5, 2.0, 20.0] {
                    let k = ball(dim, big_r, sigma);
                    let total = k.poisson_centered() * k.surface_area() + sigma * k.green_norm();
                    assert!((total - 1.0).abs() < 1e-10, "{dim:?} R={big_r} s={sigma}: {total}");
                }
            }
        }
    }

    #[test]
    fn large_screening_stays_finite() {
        for dim in [Dim::Two, Dim::Three] {
            let k = ball(dim, 10.0, 1e5);
            assert!(k.green_norm().is_finite() && k.green_norm() > 0.0);
            assert!(k.poisson_centered() >= 0.0);
            assert!(k.green_centered(1.0).unwrap().is_finite());
            let g = k.green_offcentered(Vec3::new2(1.0, 0.5), Vec3::new2(1.1, 0.4)).unwrap();
            assert!(g.is_finite() && g > 0.0);
        }
    }

    #[test]
    fn offcentered_forms_reduce_at_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for dim in [Dim::Two, Dim::Three] {
            for sigma in [0.0, 0.7, 9.0] {
                let k = ball(dim, 1.3, sigma);
                for _ in 0..10 {
                    let y = random_inside(dim, 1.3, &mut rng);
                    let g = k.green_centered(y.norm()).unwrap();
                    assert!(rel(k.green_offcentered_approx(Vec3::ZERO, y).unwrap(), g) < 1e-12);
                    assert!(rel(k.green_offcentered_series(Vec3::ZERO, y, 5).unwrap(), g) < 1e-12);
                    assert!(rel(k.green_offcentered(Vec3::ZERO, y).unwrap(), g) < 1e-12);
                    let z = k.sample_sphere(&mut rng);
                    let p = k.poisson_centered();
                    assert!(rel(k.poisson_offcentered_approx(Vec3::ZERO, z).unwrap(), p) < 1e-12);
                    assert!(rel(k.poisson_offcentered(Vec3::ZERO, z).unwrap(), p) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn series_converges_and_is_symmetric() {
        let x = Vec3::new(0.3, -0.2, 0.1);
        let y = Vec3::new(-0.1, 0.5, 0.2);
        for dim in [Dim::Two, Dim::Three] {
            let (x, y) = match dim {
                Dim::Two => (Vec3::new2(x.x, x.y), Vec3::new2(y.x, y.y)),
                Dim::Three => (x, y),
            };
            for sigma in [0.0, 1.0, 16.0] {
                let k = ball(dim, 1.0, sigma);
                let a = k.green_offcentered_series(x, y, 200).unwrap();
                let b = k.green_offcentered_series(x, y, 190).unwrap();
                assert!(rel(a, b) < 1e-8);
                let c = k.green_offcentered_series(y, x, 200).unwrap();
                assert!(rel(a, c) < 1e-10);
            }
        }
    }

    #[test]
    fn exact_green_matches_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for dim in [Dim::Two, Dim::Three] {
            for sigma in [0.0, 0.2, 3.0, 40.0] {
                let k = ball(dim, 1.0, sigma);
                for _ in 0..20 {
                    let x = random_inside(dim, 0.8, &mut rng);
                    let y = random_inside(dim, 0.8, &mut rng);
                    // the reference expansion converges like (r₋/r₊)^n
                    let (a, b) = (x.norm(), y.norm());
                    if a.min(b) / a.max(b) > 0.9 {
                        continue;
                    }
                    let series = k.green_offcentered_series(x, y, 400).unwrap();
                    let exact = k.green_offcentered(x, y).unwrap();
                    assert!(rel(exact, series) < 1e-9, "{dim:?} s={sigma}: {exact} vs {series}");
                }
            }
        }
    }

    #[test]
    fn exact_poisson_is_normal_derivative_of_exact_green() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-4;
        for dim in [Dim::Two, Dim::Three] {
            for sigma in [0.0, 0.5, 6.0] {
                let k = ball(dim, 1.0, sigma);
                for _ in 0..10 {
                    let x = random_inside(dim, 0.7, &mut rng);
                    let n = sample_unit_direction(dim, &mut rng);
                    let g1 = k.green_offcentered(x, n * (1.0 - h)).unwrap();
                    let g2 = k.green_offcentered(x, n * (1.0 - 2.0 * h)).unwrap();
                    let fd = (4.0 * g1 - g2) / (2.0 * h);
                    let p = k.poisson_offcentered(x, n).unwrap();
                    assert!(rel(p, fd) < 1e-6, "{dim:?} s={sigma}: {p} vs {fd}");
                    let ps = k.poisson_offcentered_series(x, n, 300).unwrap();
                    assert!(rel(p, ps) < 1e-10);
                }
            }
        }
    }

    #[test]
    fn exact_poisson_tail_close_to_the_sphere() {
        // long truncated expansions as the oracle, where the exact evaluation
        // switches to its asymptotic remainder
        for dim in [Dim::Two, Dim::Three] {
            for sigma in [1.0, 8.0, 100.0] {
                let k = ball(dim, 1.0, sigma);
                for delta in [1e-2, 1e-3, 1e-4] {
                    for th in [0.0f64, 1e-3, 0.05, 0.5, 3.0] {
                        let x = Vec3::axis(0) * (1.0 - delta);
                        let z = match dim {
                            Dim::Two => Vec3::new2(th.cos(), th.sin()),
                            Dim::Three => Vec3::new(th.cos(), th.sin(), 0.0),
                        };
                        let p = k.poisson_offcentered(x, z).unwrap();
                        let want = k.poisson_offcentered_series(x, z, (40.0 / delta) as usize).unwrap();
                        assert!(
                            (p - want).abs() <= 1e-3 * want.abs() + 1e-8,
                            "{dim:?} s={sigma} d={delta} th={th}: {p} vs {want}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn approx_poisson_integrates_to_mass_at_center() {
        for dim in [Dim::Two, Dim::Three] {
            for sigma in [0.0, 1.0, 10.0] {
                let k = ball(dim, 0.8, sigma);
                let want = 1.0 - sigma * k.green_norm();
                let total = sphere_quadrature(dim, 0.8, |z| k.poisson_offcentered_approx(Vec3::ZERO, z).unwrap());
                assert!((total - want).abs() < 1e-6);
            }
        }
    }

    // midpoint rule in angle (2D) or Gauss-free product rule in (cos θ, φ) (3D)
    fn sphere_quadrature(dim: Dim, radius: f64, f: impl Fn(Vec3) -> f64) -> f64 {
        match dim {
            Dim::Two => {
                let n = 2000;
                let mut s = 0.0;
                for j in 0..n {
                    let t = 2.0 * PI * (j as f64 + 0.5) / n as f64;
                    s += f(Vec3::new2(t.cos(), t.sin()) * radius);
                }
                s * 2.0 * PI * radius / n as f64
            }
            Dim::Three => {
                let (nt, np) = (400, 400);
                let mut s = 0.0;
                for i in 0..nt {
                    let c = -1.0 + 2.0 * (i as f64 + 0.5) / nt as f64;
                    let rho = (1.0 - c * c).sqrt();
                    for j in 0..np {
                        let p = 2.0 * PI * (j as f64 + 0.5) / np as f64;
                        s += f(Vec3::new(rho * p.cos(), rho * p.sin(), c) * radius);
                    }
                }
                s * 4.0 * PI * radius * radius / (nt * np) as f64
            }
        }
    }

    #[test]
    fn exact_poisson_integrates_to_one_without_screening() {
        let x = Vec3::new(0.4, 0.3, -0.2);
        let k = ball(Dim::Three, 1.0, 0.0);
        let total = sphere_quadrature(Dim::Three, 1.0, |z| k.poisson_offcentered(x, z).unwrap());
        assert!((total - 1.0).abs() < 1e-4);
        let k2 = ball(Dim::Two, 1.0, 0.0);
        let x2 = Vec3::new2(0.4, 0.3);
        let total = sphere_quadrature(Dim::Two, 1.0, |z| k2.poisson_offcentered(x2, z).unwrap());
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn green_vanishes_on_boundary() {
        for dim in [Dim::Two, Dim::Three] {
            for sigma in [0.0, 2.0] {
                let k = ball(dim, 1.0, sigma);
                let y = Vec3::new2(0.6, 0.8) * (1.0 - 1e-10);
                assert!(k.green_offcentered_approx(Vec3::ZERO, y).unwrap().abs() < 1e-8);
                assert!(k.green_offcentered(Vec3::new2(0.2, -0.3), y).unwrap().abs() < 1e-8);
            }
        }
    }

    #[test]
    fn exact_poisson_reproduces_screened_solutions() {
        // φ(y) = exp(√σ e·y) solves Δφ = σφ, so ∫ P(x, z) φ(z) dz = φ(x)
        let e = Vec3::new(0.6, 0.0, 0.8);
        for (dim, e) in [(Dim::Two, Vec3::new2(0.6, 0.8)), (Dim::Three, e)] {
            for sigma in [0.5, 4.0, 30.0] {
                let k = ball(dim, 1.0, sigma);
                let s = sigma.sqrt();
                for x in [Vec3::new2(0.3, -0.2), Vec3::new2(-0.7, 0.1), Vec3::new2(0.0, 0.9)] {
                    let total = sphere_quadrature(dim, 1.0, |z| k.poisson_offcentered(x, z).unwrap() * (s * e.dot(z)).exp());
                    let want = (s * e.dot(x)).exp();
                    assert!(rel(total, want) < 1e-4, "{dim:?} s={sigma} x={x:?}: {total} vs {want}");
                }
            }
        }
    }

    #[test]
    fn exact_kernels_near_the_sphere() {
        for dim in [Dim::Two, Dim::Three] {
            for sigma in [0.0, 1.0, 25.0] {
                let k = ball(dim, 1.0, sigma);
                let x = Vec3::new2(0.9995, 0.0);
                for j in 1..50 {
                    let phi = PI * j as f64 / 50.0;
                    let z = Vec3::new2(phi.cos(), phi.sin());
                    let p = k.poisson_offcentered(x, z).unwrap();
                    assert!(p.is_finite() && p >= 0.0);
                    let g = k.green_offcentered(x, z * 0.9995).unwrap();
                    assert!(g.is_finite() && g >= 0.0);
                }
            }
        }
    }

    #[test]
    fn approx_kernels_drift_off_center() {
        // the closed-form approximations only match at the center
        let k = ball(Dim::Two, 1.0, 1.0);
        let x = Vec3::new2(0.9, 0.0);
        let z = Vec3::new2(0.0, 1.0);
        let exact = k.poisson_offcentered(x, z).unwrap();
        let approx = k.poisson_offcentered_approx(x, z).unwrap();
        assert!(rel(approx, exact) > 1e-2);
    }

    #[test]
    fn green_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-5;
        for case in 0..20 {
            let dim = if case % 2 == 0 { Dim::Two } else { Dim::Three };
            let sigma = [0.0, 0.5, 2.0, 20.0][case % 4];
            let k = ball(dim, 1.0, sigma);
            let mut y = random_inside(dim, 0.9, &mut rng);
            while y.norm() < 0.1 {
                y = random_inside(dim, 0.9, &mut rng);
            }
            let grad = k.green_gradient_centered(y).unwrap();
            for axis in 0..dim.get() {
                let e = Vec3::axis(axis) * h;
                let fd = (k.green_offcentered(e, y).unwrap() - k.green_offcentered(-e, y).unwrap()) / (2.0 * h);
                assert!((grad[axis] - fd).abs() < 1e-5 * grad.norm(), "{dim:?} s={sigma} axis {axis}: {} vs {fd}", grad[axis]);
            }
        }
    }

    #[test]
    fn green_gradient_example_and_symmetry() {
        let k = ball(Dim::Three, 1.0, 1.0);
        let y = Vec3::new(0.5, 0.0, 0.0);
        let g = k.green_gradient_centered(y).unwrap();
        assert!(g.y == 0.0 && g.z == 0.0 && g.x > 0.0);
        let h = 1e-5;
        let e = Vec3::axis(0) * h;
        let fd = (k.green_offcentered(e, y).unwrap() - k.green_offcentered(-e, y).unwrap()) / (2.0 * h);
        assert!(rel(g.x, fd) < 1e-5);
        let g_neg = k.green_gradient_centered(-y).unwrap();
        assert!((g + g_neg).norm() < 1e-15);
        assert_eq!(k.green_gradient_centered(Vec3::ZERO), Err(KernelError::SingularAtCenter));
    }

    #[test]
    fn poisson_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-5;
        for case in 0..20 {
            let dim = if case % 2 == 0 { Dim::Two } else { Dim::Three };
            let sigma = [0.0, 1.0, 5.0, 30.0][case % 4];
            let big_r = [0.5, 1.0, 2.0][case % 3];
            let k = ball(dim, big_r, sigma);
            let z = k.sample_sphere(&mut rng);
            let grad = k.poisson_gradient_centered(z).unwrap();
            for axis in 0..dim.get() {
                let e = Vec3::axis(axis) * h;
                let fd = (k.poisson_offcentered(e, z).unwrap() - k.poisson_offcentered(-e, z).unwrap()) / (2.0 * h);
                assert!((grad[axis] - fd).abs() < 1e-5 * grad.norm(), "{dim:?} s={sigma}: {} vs {fd}", grad[axis]);
            }
        }
    }

    #[test]
    fn poisson_gradient_examples() {
        let k = ball(Dim::Two, 1.0, 1.0);
        let g = k.poisson_gradient_centered(Vec3::new2(1.0, 0.0)).unwrap();
        let want = 1.0 / (2.0 * PI) / 0.565_159_1;
        assert!(rel(g.norm(), want) < 1e-6);
        for dim in [Dim::Two, Dim::Three] {
            let k = ball(dim, 1.0, 0.0);
            let total = sphere_quadrature(dim, 1.0, |z| k.poisson_gradient_centered(z).unwrap().norm2().sqrt() * 0.0
                + k.poisson_gradient_centered(z).unwrap().x);
            assert!(total.abs() < 1e-8);
        }
        assert!(k.poisson_gradient_centered(Vec3::new2(0.5, 0.0)).is_err());
    }

    #[test]
    fn exact_kernels_are_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for dim in [Dim::Two, Dim::Three] {
            for sigma in [0.0, 1.0, 50.0] {
                let k = ball(dim, 1.0, sigma);
                for _ in 0..200 {
                    let x = random_inside(dim, 1.0, &mut rng);
                    let y = random_inside(dim, 1.0, &mut rng);
                    assert!(k.green_offcentered(x, y).unwrap() >= 0.0);
                    assert!(k.poisson_offcentered(x, k.sample_sphere(&mut rng)).unwrap() >= 0.0);
                }
            }
        }
    }

    #[test]
    fn envelope_examples() {
        assert_eq!(envelope_bound(1.0, 1.0), 2.2);
        assert_eq!(envelope_bound(1.0, 0.0), 2.2);
    }

    #[test]
    fn envelope_dominates_radial_density() {
        for dim in [Dim::Two, Dim::Three] {
            for big_r in [1e-3, 0.01, 0.1, 0.5, 1.0, 3.0, 10.0, 100.0] {
                for sigma in [0.0, 1e-3, 0.1, 1.0, 10.0, 100.0, 1e4] {
                    let k = ball(dim, big_r, sigma);
                    let h = envelope_bound(big_r, sigma);
                    let peak = (1..2000).map(|j| k.radial_density(big_r * j as f64 / 2000.0)).fold(0.0, f64::max);
                    assert!(peak <= h, "{dim:?} R={big_r} s={sigma}: {peak} > {h}");
                }
            }
        }
    }

    #[test]
    fn sampled_radii_follow_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 200_000;
        for dim in [Dim::Two, Dim::Three] {
            let k = ball(dim, 1.0, 4.0);
            let bins = 50;
            let mut hist = vec![0usize; bins];
            let mut inv_pdf = 0.0;
            for _ in 0..n {
                let (y, p) = k.sample_green_centered(&mut rng).unwrap();
                let r = y.norm();
                hist[((r / k.radius() * bins as f64) as usize).min(bins - 1)] += 1;
                inv_pdf += 1.0 / p;
                assert!(rel(p, k.green_centered(r).unwrap() / k.green_norm()) < 1e-12);
            }
            for (b, &count) in hist.iter().enumerate() {
                let (lo, hi) = (b as f64 / bins as f64, (b + 1) as f64 / bins as f64);
                let m = 40;
                let expected: f64 = (0..m)
                    .map(|j| k.radial_density(lo + (hi - lo) * (j as f64 + 0.5) / m as f64))
                    .sum::<f64>()
                    / m as f64
                    / bins as f64;
                let dev = (count as f64 / n as f64 - expected).abs();
                assert!(dev < 4.0 / (n as f64).sqrt(), "{dim:?} bin {b}: {dev}");
            }
            // heavy-tailed near the center in 2D, so only a loose check here
            let vol = inv_pdf / n as f64;
            assert!(rel(vol, k.volume()) < 0.05, "{vol} vs {}", k.volume());
        }
        assert_eq!(envelope_violations(), 0);
    }

    #[test]
    fn sphere_samples_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 100_000;
        let c = Vec3::new(1.0, -2.0, 0.5);
        let mut counts = [0usize; 8];
        let mut mean = Vec3::ZERO;
        for _ in 0..n {
            let p = sample_sphere_uniform(Dim::Three, c, 2.0, &mut rng);
            assert!(((p - c).norm() - 2.0).abs() < 1e-12);
            let d = p - c;
            mean += d;
            counts[(d.x > 0.0) as usize | ((d.y > 0.0) as usize) << 1 | ((d.z > 0.0) as usize) << 2] += 1;
        }
        mean = mean / n as f64;
        // per-coordinate std of a point on a sphere of radius 2 is 2/√3
        assert!(mean.norm() < 3.0 * 2.0 / 3f64.sqrt() / (n as f64).sqrt() * 3f64.sqrt());
        let e = n as f64 / 8.0;
        let chi2: f64 = counts.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
        // 99% quantile of chi-square with 7 degrees of freedom
        assert!(chi2 < 18.475, "{chi2}");
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(BallKernel::new(Dim::Two, Vec3::ZERO, 0.0, 1.0).is_err());
        assert!(BallKernel::new(Dim::Two, Vec3::ZERO, 1.0, -1.0).is_err());
        assert!(BallKernel::new(Dim::Two, Vec3::ZERO, 1.0, f64::NAN).is_err());
        let k = ball(Dim::Two, 1.0, 1.0);
        assert!(k.green_offcentered(Vec3::new2(1.5, 0.0), Vec3::ZERO).is_err());
        assert!(k.poisson_offcentered_approx(Vec3::ZERO, Vec3::new2(0.5, 0.0)).is_err());
    }
}
