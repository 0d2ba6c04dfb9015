//! PDE coefficients and the change of variables to a screened Poisson form.
//!
//! The problem is
//!
//! ```text
//! ∇·(α∇u) + ω·∇u − σu = −f  in Ω,    u = g  on ∂Ω
//! ```
//!
//! with drift given through a potential, `ω = 2α∇γ_ω`. Writing
//! `γ = ½ ln α + γ_ω` and `U = e^γ u` turns it into
//!
//! ```text
//! ΔU − σ′U = −f′,   σ′ = σ/α + Δγ + |∇γ|²,   f′ = e^γ f / α,   g′ = e^γ g.
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Scene;
use crate::math::{Dim, Vec3};

#[derive(Debug, Error)]
pub enum CoefficientError {
    #[error("alpha must be positive, found {value} at {point:?}")]
    NonPositiveAlpha { point: Vec3, value: f64 },
    #[error("sigma must be nonnegative, found {value} at {point:?}")]
    NegativeSigma { point: Vec3, value: f64 },
    #[error("conformal scale must be positive, found {value} at {point:?}")]
    NonPositiveScale { point: Vec3, value: f64 },
    #[error("declared drift differs from 2 alpha grad(gamma_omega) by {deviation} at {point:?}")]
    DriftMismatch { point: Vec3, deviation: f64 },
    #[error("declared drift has {0} components, expected one per dimension")]
    DriftComponents(usize),
    #[error("no drift potential to validate")]
    NoDriftPotential,
    #[error("transformed coefficients are not finite at {0:?}")]
    NonFinite(Vec3),
    #[error("sigma bar must be positive and finite, got {0}")]
    InvalidSigmaBar(f64),
    #[error("no probe point found inside the domain")]
    NoProbes,
    #[error("{0} combinator needs at least one term")]
    EmptyCombinator(&'static str),
}

/// Value, gradient and diagonal of the Hessian at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub gradient: Vec3,
    pub hess_diag: Vec3,
}

impl Jet {
    pub fn constant(value: f64) -> Self {
        Self {
            value,
            gradient: Vec3::ZERO,
            hess_diag: Vec3::ZERO,
        }
    }

    fn add(self, o: Self) -> Self {
        Self {
            value: self.value + o.value,
            gradient: self.gradient + o.gradient,
            hess_diag: self.hess_diag + o.hess_diag,
        }
    }

    fn mul(self, o: Self) -> Self {
        Self {
            value: self.value * o.value,
            gradient: self.gradient * o.value + o.gradient * self.value,
            hess_diag: self.hess_diag * o.value + self.gradient.mul_elem(o.gradient) * 2.0 + o.hess_diag * self.value,
        }
    }

    /// Restrict to the first `dim` axes.
    fn masked(mut self, dim: Dim) -> Self {
        if dim == Dim::Two {
            self.gradient.z = 0.0;
            self.hess_diag.z = 0.0;
        }
        self
    }

    pub fn laplacian(&self) -> f64 {
        self.hess_diag.x + self.hess_diag.y + self.hess_diag.z
    }
}

/// Scalar fields with closed-form derivatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarField {
    Constant {
        value: f64,
    },
    /// `a + b·x`
    Linear {
        a: f64,
        b: Vec3,
    },
    /// `amplitude · exp(c·x)`
    Exponential {
        #[serde(default = "one")]
        amplitude: f64,
        c: Vec3,
    },
    /// `baseline + amplitude · exp(−|x − center|² / width²)`
    GaussianBump {
        center: Vec3,
        amplitude: f64,
        width: f64,
        #[serde(default)]
        baseline: f64,
    },
    /// `offset + amplitude · sin(frequency·x + phase)`
    Sinusoid {
        amplitude: f64,
        frequency: Vec3,
        #[serde(default)]
        phase: f64,
        #[serde(default)]
        offset: f64,
    },
    Sum {
        terms: Vec<ScalarField>,
    },
    Product {
        factors: Vec<ScalarField>,
    },
}

fn one() -> f64 {
    1.0
}

impl ScalarField {
    pub fn constant(value: f64) -> Self {
        ScalarField::Constant { value }
    }

    pub fn linear(a: f64, b: Vec3) -> Self {
        ScalarField::Linear { a, b }
    }

    pub fn exponential(amplitude: f64, c: Vec3) -> Self {
        ScalarField::Exponential { amplitude, c }
    }

    pub fn gaussian_bump(center: Vec3, amplitude: f64, width: f64, baseline: f64) -> Self {
        ScalarField::GaussianBump {
            center,
            amplitude,
            width,
            baseline,
        }
    }

    pub fn sinusoid(amplitude: f64, frequency: Vec3, phase: f64, offset: f64) -> Self {
        ScalarField::Sinusoid {
            amplitude,
            frequency,
            phase,
            offset,
        }
    }

    pub fn sum(terms: Vec<ScalarField>) -> Self {
        ScalarField::Sum { terms }
    }

    pub fn product(factors: Vec<ScalarField>) -> Self {
        ScalarField::Product { factors }
    }

    /// Checks combinators are nonempty and parameters are usable.
    pub fn validate(&self) -> Result<(), CoefficientError> {
        match self {
            ScalarField::Sum { terms } if terms.is_empty() => Err(CoefficientError::EmptyCombinator("sum")),
            ScalarField::Product { factors } if factors.is_empty() => Err(CoefficientError::EmptyCombinator("product")),
            ScalarField::Sum { terms: c } | ScalarField::Product { factors: c } => c.iter().try_for_each(|f| f.validate()),
            _ => Ok(()),
        }
    }

    /// True when the field does not depend on position.
    pub fn is_constant(&self) -> bool {
        match self {
            ScalarField::Constant { .. } => true,
            ScalarField::Linear { b, .. } => *b == Vec3::ZERO,
            ScalarField::Exponential { c, amplitude } => *c == Vec3::ZERO || *amplitude == 0.0,
            ScalarField::GaussianBump { amplitude, .. } => *amplitude == 0.0,
            ScalarField::Sinusoid { amplitude, frequency, .. } => *amplitude == 0.0 || *frequency == Vec3::ZERO,
            ScalarField::Sum { terms: c } | ScalarField::Product { factors: c } => c.iter().all(|f| f.is_constant()),
        }
    }

    pub fn value(&self, x: Vec3) -> f64 {
        match self {
            ScalarField::Constant { value } => *value,
            ScalarField::Linear { a, b } => a + b.dot(x),
            ScalarField::Exponential { amplitude, c } => amplitude * c.dot(x).exp(),
            ScalarField::GaussianBump {
                center,
                amplitude,
                width,
                baseline,
            } => baseline + amplitude * (-(x - *center).norm2() / (width * width)).exp(),
            ScalarField::Sinusoid {
                amplitude,
                frequency,
                phase,
                offset,
            } => offset + amplitude * (frequency.dot(x) + phase).sin(),
            ScalarField::Sum { terms } => terms.iter().map(|t| t.value(x)).sum(),
            ScalarField::Product { factors } => factors.iter().map(|t| t.value(x)).product(),
        }
    }

    /// Value with derivatives along the first `dim` axes.
    pub fn jet(&self, x: Vec3, dim: Dim) -> Jet {
        self.jet_full(x).masked(dim)
    }

    fn jet_full(&self, x: Vec3) -> Jet {
        match self {
            ScalarField::Constant { value } => Jet::constant(*value),
            ScalarField::Linear { a, b } => Jet {
                value: a + b.dot(x),
                gradient: *b,
                hess_diag: Vec3::ZERO,
            },
            ScalarField::Exponential { amplitude, c } => {
                let v = amplitude * c.dot(x).exp();
                Jet {
                    value: v,
                    gradient: *c * v,
                    hess_diag: c.mul_elem(*c) * v,
                }
            }
            ScalarField::GaussianBump {
                center,
                amplitude,
                width,
                baseline,
            } => {
                let r = x - *center;
                let w2 = width * width;
                let e = amplitude * (-r.norm2() / w2).exp();
                let g = r * (-2.0 / w2);
                Jet {
                    value: baseline + e,
                    gradient: g * e,
                    hess_diag: (g.mul_elem(g) - Vec3::splat(2.0 / w2)) * e,
                }
            }
            ScalarField::Sinusoid {
                amplitude,
                frequency,
                phase,
                offset,
            } => {
                let (s, c) = (frequency.dot(x) + phase).sin_cos();
                Jet {
                    value: offset + amplitude * s,
                    gradient: *frequency * (amplitude * c),
                    hess_diag: frequency.mul_elem(*frequency) * (-amplitude * s),
                }
            }
            ScalarField::Sum { terms } => terms.iter().fold(Jet::constant(0.0), |j, t| j.add(t.jet_full(x))),
            ScalarField::Product { factors } => factors.iter().fold(Jet::constant(1.0), |j, t| j.mul(t.jet_full(x))),
        }
    }

    pub fn gradient(&self, x: Vec3, dim: Dim) -> Vec3 {
        self.jet(x, dim).gradient
    }

    pub fn laplacian(&self, x: Vec3, dim: Dim) -> f64 {
        self.jet(x, dim).laplacian()
    }
}

/// Source term: an explicit field, or derived from a reference solution so
/// that `u_ref` solves the problem exactly (with `g = u_ref` by default).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Source {
    Manufactured { manufactured: ScalarField },
    Field(ScalarField),
}

/// Coefficient tuple of the elliptic problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Problem {
    pub dim: Dim,
    pub alpha: ScalarField,
    #[serde(default = "zero_field")]
    pub sigma: ScalarField,
    #[serde(default = "zero_source")]
    pub f: Source,
    /// Dirichlet data; defaults to the reference solution, else zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<ScalarField>,
    /// Drift potential `γ_ω`, with `ω = 2α∇γ_ω`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_omega: Option<ScalarField>,
    /// Optional explicit drift components, checked against the potential.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<Vec<ScalarField>>,
    /// Conformal scale `λ`; replaces `α` by `λ²`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<ScalarField>,
}

fn zero_field() -> ScalarField {
    ScalarField::constant(0.0)
}

fn zero_source() -> Source {
    Source::Field(zero_field())
}

impl Problem {
    /// A problem with `α`, `σ`, `f`, `g` and no drift.
    pub fn new(dim: Dim, alpha: ScalarField, sigma: ScalarField, f: ScalarField, g: ScalarField) -> Self {
        Self {
            dim,
            alpha,
            sigma,
            f: Source::Field(f),
            g: Some(g),
            gamma_omega: None,
            omega: None,
            lambda: None,
        }
    }

    /// A problem whose exact solution is `u_ref`.
    pub fn manufactured(dim: Dim, alpha: ScalarField, sigma: ScalarField, gamma_omega: Option<ScalarField>, u_ref: ScalarField) -> Self {
        Self {
            dim,
            alpha,
            sigma,
            f: Source::Manufactured { manufactured: u_ref },
            g: None,
            gamma_omega,
            omega: None,
            lambda: None,
        }
    }

    pub fn laplace(dim: Dim, g: ScalarField) -> Self {
        Self::new(dim, ScalarField::constant(1.0), zero_field(), zero_field(), g)
    }

    pub fn reference_solution(&self) -> Option<&ScalarField> {
        match &self.f {
            Source::Manufactured { manufactured } => Some(manufactured),
            Source::Field(_) => None,
        }
    }

    pub fn validate_fields(&self) -> Result<(), CoefficientError> {
        self.alpha.validate()?;
        self.sigma.validate()?;
        match &self.f {
            Source::Manufactured { manufactured: f } | Source::Field(f) => f.validate()?,
        }
        for f in [&self.g, &self.gamma_omega, &self.lambda].into_iter().flatten() {
            f.validate()?;
        }
        if let Some(om) = &self.omega {
            if om.len() != self.dim.get() {
                return Err(CoefficientError::DriftComponents(om.len()));
            }
            om.iter().try_for_each(|f| f.validate())?;
        }
        Ok(())
    }

    /// Diffusion coefficient after the conformal adapter, if any.
    fn alpha_jet(&self, x: Vec3) -> Jet {
        self.alpha.jet(x, self.dim)
    }

    pub fn alpha_at(&self, x: Vec3) -> f64 {
        self.alpha.value(x)
    }

    pub fn sigma_at(&self, x: Vec3) -> f64 {
        self.sigma.value(x)
    }

    pub fn has_drift(&self) -> bool {
        self.gamma_omega.as_ref().is_some_and(|g| !g.is_constant())
    }

    /// `ω(x) = 2α(x)∇γ_ω(x)`.
    pub fn drift(&self, x: Vec3) -> Vec3 {
        match &self.gamma_omega {
            Some(p) => p.gradient(x, self.dim) * (2.0 * self.alpha.value(x)),
            None => Vec3::ZERO,
        }
    }

    /// Source term `f(x)`.
    pub fn source(&self, x: Vec3) -> f64 {
        match &self.f {
            Source::Field(f) => f.value(x),
            Source::Manufactured { manufactured: u } => {
                let a = self.alpha_jet(x);
                let uj = u.jet(x, self.dim);
                let omega = self.drift(x);
                -(a.gradient.dot(uj.gradient) + a.value * uj.laplacian()) - omega.dot(uj.gradient) + self.sigma.value(x) * uj.value
            }
        }
    }

    /// Dirichlet data `g(x)`.
    pub fn dirichlet(&self, x: Vec3) -> f64 {
        match (&self.g, &self.f) {
            (Some(g), _) => g.value(x),
            (None, Source::Manufactured { manufactured }) => manufactured.value(x),
            (None, Source::Field(_)) => 0.0,
        }
    }

    /// Constant `(α, σ, f)` if every coefficient is constant and there is no
    /// drift.
    pub fn constant_coefficients(&self) -> Option<(f64, f64, f64)> {
        let f_const = match &self.f {
            Source::Field(f) => f.is_constant(),
            Source::Manufactured { manufactured: u } => {
                let harmonic_linear = matches!(u, ScalarField::Linear { .. }) && self.sigma == zero_field();
                u.is_constant() || harmonic_linear
            }
        };
        if self.alpha.is_constant() && self.sigma.is_constant() && f_const && !self.has_drift() && self.lambda.is_none() {
            let x = Vec3::ZERO;
            Some((self.alpha.value(x), self.sigma.value(x), self.source(x)))
        } else {
            None
        }
    }
}

/// Replaces `α` by `λ²` when a conformal scale is present.
pub fn conformal_adapter(problem: &Problem) -> Problem {
    let mut p = problem.clone();
    if let Some(l) = p.lambda.take() {
        p.alpha = ScalarField::product(vec![l.clone(), l]);
    }
    p
}

/// Checks `λ > 0` on the given points before adapting.
pub fn conformal_adapter_checked(problem: &Problem, probes: &[Vec3]) -> Result<Problem, CoefficientError> {
    if let Some(l) = &problem.lambda {
        for &x in probes {
            let v = l.value(x);
            if !(v > 0.0) {
                return Err(CoefficientError::NonPositiveScale { point: x, value: v });
            }
        }
    }
    Ok(conformal_adapter(problem))
}

/// Coefficients of the transformed problem at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointCoefficients {
    pub gamma: f64,
    pub sigma_prime: f64,
    pub f_prime: f64,
}

/// Range of `σ′` over the probe set and the derived bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaBounds {
    pub sigma_prime_min: f64,
    pub sigma_prime_max: f64,
    /// `max − min`, or the fallback for constant `σ′`.
    pub sigma_bar: f64,
    /// Positivity floor `τ = 1e-6 / R²`.
    pub tau: f64,
}

/// Probe configuration for bounding `σ′`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOptions {
    pub count: usize,
    pub extra_points: Vec<Vec3>,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            count: 4096,
            extra_points: Vec::new(),
            seed: 0x5eed_0f_9b0b,
        }
    }
}

/// The problem in screened Poisson form, with its screening bounds.
#[derive(Debug, Clone)]
pub struct TransformedProblem {
    problem: Problem,
    bounds: SigmaBounds,
    sigma_kernel: f64,
}

impl TransformedProblem {
    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn dim(&self) -> Dim {
        self.problem.dim
    }

    pub fn bounds(&self) -> SigmaBounds {
        self.bounds
    }

    pub fn sigma_bar(&self) -> f64 {
        self.bounds.sigma_bar
    }

    pub fn sigma_prime_min(&self) -> f64 {
        self.bounds.sigma_prime_min
    }

    pub fn sigma_prime_max(&self) -> f64 {
        self.bounds.sigma_prime_max
    }

    /// Screening constant used for the ball kernels.
    pub fn sigma_kernel(&self) -> f64 {
        self.sigma_kernel
    }

    /// Overrides the kernel screening constant. Null weights may then leave
    /// `[0, 1]` or turn negative; estimates stay unbiased.
    pub fn with_sigma_kernel(mut self, sigma: f64) -> Result<Self, CoefficientError> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(CoefficientError::InvalidSigmaBar(sigma));
        }
        self.sigma_kernel = sigma;
        Ok(self)
    }

    /// `γ`, `∇γ` and `Δγ` at `x`.
    pub fn gamma_jet(&self, x: Vec3) -> (f64, Vec3, f64) {
        let a = self.problem.alpha_jet(x);
        gamma_parts(&self.problem, a, x)
    }

    pub fn gamma(&self, x: Vec3) -> f64 {
        let g = 0.5 * self.problem.alpha.value(x).ln();
        match &self.problem.gamma_omega {
            Some(p) => g + p.value(x),
            None => g,
        }
    }

    pub fn sigma_prime(&self, x: Vec3) -> f64 {
        self.at(x).sigma_prime
    }

    pub fn f_prime(&self, x: Vec3) -> f64 {
        self.at(x).f_prime
    }

    /// `g′ = e^γ g` at a boundary point.
    pub fn g_prime(&self, x: Vec3) -> f64 {
        self.gamma(x).exp() * self.problem.dirichlet(x)
    }

    /// All transformed coefficients at `x` in one pass.
    pub fn at(&self, x: Vec3) -> PointCoefficients {
        let p = &self.problem;
        let a = p.alpha_jet(x);
        let (gamma, grad, lap) = gamma_parts(p, a, x);
        let sigma = p.sigma.value(x);
        let f = match &p.f {
            Source::Field(f) => f.value(x),
            Source::Manufactured { manufactured: u } => {
                let uj = u.jet(x, p.dim);
                let omega = match &p.gamma_omega {
                    Some(gw) => gw.gradient(x, p.dim) * (2.0 * a.value),
                    None => Vec3::ZERO,
                };
                -(a.gradient.dot(uj.gradient) + a.value * uj.laplacian()) - omega.dot(uj.gradient) + sigma * uj.value
            }
        };
        PointCoefficients {
            gamma,
            sigma_prime: sigma / a.value + lap + grad.norm2(),
            f_prime: gamma.exp() * f / a.value,
        }
    }
}

fn gamma_parts(p: &Problem, a: Jet, x: Vec3) -> (f64, Vec3, f64) {
    let inv = 1.0 / a.value;
    let grad_ln = a.gradient * inv;
    let mut gamma = 0.5 * a.value.ln();
    let mut grad = grad_ln * 0.5;
    let mut lap = 0.5 * (a.laplacian() * inv - grad_ln.norm2());
    if let Some(w) = &p.gamma_omega {
        let j = w.jet(x, p.dim);
        gamma += j.value;
        grad += j.gradient;
        lap += j.laplacian();
    }
    (gamma, grad, lap)
}

/// `σ′` written with `√α` directly (no drift): `σ/α + ½(Δα/α − |∇ln α|²/2)`.
pub fn sigma_prime_sqrt_form(problem: &Problem, x: Vec3) -> f64 {
    let a = problem.alpha.jet(x, problem.dim);
    let grad_ln = a.gradient / a.value;
    problem.sigma.value(x) / a.value + 0.5 * (a.laplacian() / a.value - 0.5 * grad_ln.norm2())
}

/// Stratified random points inside the domain: one attempt per cell of a
/// regular grid over the bounding box, plus up to three retries in cells
/// whose first point falls outside.
pub fn stratified_probes(scene: &Scene, count: usize, seed: u64) -> Vec<Vec3> {
    let dim = scene.dim().get();
    let per_axis = ((count.max(1) as f64).powf(1.0 / dim as f64).ceil() as usize).max(1);
    let b = scene.bounds();
    let ext = b.extent();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = per_axis.pow(dim as u32);
    let mut out = Vec::with_capacity(cells.min(count));
    for cell in 0..cells {
        let mut idx = [0usize; 3];
        let mut c = cell;
        for i in idx.iter_mut().take(dim) {
            *i = c % per_axis;
            c /= per_axis;
        }
        for _ in 0..4 {
            let mut x = Vec3::ZERO;
            for a in 0..dim {
                x[a] = b.min[a] + ext[a] * (idx[a] as f64 + rng.random::<f64>()) / per_axis as f64;
            }
            if scene.contains(x) {
                out.push(x);
                break;
            }
        }
    }
    out
}

/// Transforms a problem and bounds `σ′` over probes inside the scene.
pub fn transform(problem: &Problem, scene: &Scene, probes: &ProbeOptions) -> Result<TransformedProblem, CoefficientError> {
    problem.validate_fields()?;
    let mut points = stratified_probes(scene, probes.count, probes.seed);
    points.extend(probes.extra_points.iter().copied());
    let adapted = conformal_adapter_checked(problem, &points)?;
    let bounds = sigma_bounds(&adapted, &points, scene.scale())?;
    let sigma_kernel = shifted_sigma(&bounds);
    Ok(TransformedProblem {
        problem: adapted,
        bounds,
        sigma_kernel,
    })
}

/// Recomputes the `σ′` bounds of a transformed problem with a fresh probe set.
pub fn sigma_bar_default(transformed: &TransformedProblem, scene: &Scene, probe_count: usize) -> Result<SigmaBounds, CoefficientError> {
    let points = stratified_probes(scene, probe_count, ProbeOptions::default().seed);
    sigma_bounds(&transformed.problem, &points, scene.scale())
}

fn sigma_bounds(problem: &Problem, points: &[Vec3], scale: f64) -> Result<SigmaBounds, CoefficientError> {
    if points.is_empty() {
        return Err(CoefficientError::NoProbes);
    }
    let shell = TransformedProblem {
        problem: problem.clone(),
        bounds: SigmaBounds {
            sigma_prime_min: 0.0,
            sigma_prime_max: 0.0,
            sigma_bar: 1.0,
            tau: 0.0,
        },
        sigma_kernel: 1.0,
    };
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &x in points {
        let a = problem.alpha.value(x);
        if !(a > 0.0) {
            return Err(CoefficientError::NonPositiveAlpha { point: x, value: a });
        }
        let s = problem.sigma.value(x);
        if s < 0.0 {
            return Err(CoefficientError::NegativeSigma { point: x, value: s });
        }
        let sp = shell.sigma_prime(x);
        if !sp.is_finite() {
            return Err(CoefficientError::NonFinite(x));
        }
        lo = lo.min(sp);
        hi = hi.max(sp);
    }
    let tau = 1e-6 / (scale * scale);
    let spread = hi - lo;
    let sigma_bar = if spread > 0.0 { spread.max(tau) } else { hi.max(tau) };
    Ok(SigmaBounds {
        sigma_prime_min: lo,
        sigma_prime_max: hi,
        sigma_bar,
        tau,
    })
}

fn shifted_sigma(b: &SigmaBounds) -> f64 {
    b.sigma_bar.max(b.sigma_prime_max).max(b.tau)
}

/// Screening constant for the ball kernels. It dominates `σ′` on the probes,
/// so the null factor `1 − σ′/σ_k` is nonnegative there; it exceeds one where
/// `σ′ < 0`.
pub fn shifted_sigma_for_kernels(transformed: &TransformedProblem) -> f64 {
    shifted_sigma(&transformed.bounds)
}

/// Result of comparing a declared drift with `2α∇γ_ω`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftReport {
    pub max_deviation: f64,
    pub probes: usize,
}

/// Compares the declared drift components with `2α∇γ_ω` at the probes.
/// Without declared components the report is trivially zero.
pub fn validate_drift_potential(problem: &Problem, probes: &[Vec3]) -> Result<DriftReport, CoefficientError> {
    if problem.gamma_omega.is_none() {
        return Err(CoefficientError::NoDriftPotential);
    }
    let Some(declared) = &problem.omega else {
        return Ok(DriftReport {
            max_deviation: 0.0,
            probes: probes.len(),
        });
    };
    if declared.len() != problem.dim.get() {
        return Err(CoefficientError::DriftComponents(declared.len()));
    }
    let mut worst: f64 = 0.0;
    for &x in probes {
        let w = problem.drift(x);
        let mut dev: f64 = 0.0;
        for (a, comp) in declared.iter().enumerate() {
            dev = dev.max((comp.value(x) - w[a]).abs());
        }
        if dev > 1e-8 * (1.0 + w.norm()) {
            return Err(CoefficientError::DriftMismatch { point: x, deviation: dev });
        }
        worst = worst.max(dev);
    }
    Ok(DriftReport {
        max_deviation: worst,
        probes: probes.len(),
    })
}
