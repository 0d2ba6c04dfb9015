//! Walk-on-spheres estimators.
//!
//! All estimators except the SDE baseline work on the transformed problem
//! `ΔU − σ′U = −f′` and return `u(x) = e^{−γ(x)} U(x)`. Each ball uses the
//! constant screening `σ_k` from [`TransformedProblem::sigma_kernel`] and the
//! remainder `σ_k − σ′` is handled by null collisions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coefficients::{Problem, TransformedProblem};
use crate::geometry::{GeometryError, Scene};
use crate::kernels::{sample_unit_direction, BallKernel, KernelError};
use crate::math::{Dim, Vec3};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("classic walk on spheres needs constant alpha and sigma and no drift")]
    NonConstantCoefficients,
    #[error("gradient is undefined in the epsilon shell (distance {distance} <= epsilon {epsilon})")]
    InShell { distance: f64, epsilon: f64 },
    #[error("non-finite estimate")]
    NonFinite,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Which estimator to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Classic,
    #[serde(alias = "delta_tracking")]
    Dt,
    #[serde(alias = "next_flight")]
    Nf,
    Sde,
}

impl std::str::FromStr for Estimator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "classic" => Ok(Estimator::Classic),
            "dt" | "delta-tracking" | "delta_tracking" => Ok(Estimator::Dt),
            "nf" | "next-flight" | "next_flight" => Ok(Estimator::Nf),
            "sde" => Ok(Estimator::Sde),
            other => Err(format!("unknown estimator `{other}` (classic, dt, nf, sde)")),
        }
    }
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Estimator::Classic => "classic",
            Estimator::Dt => "dt",
            Estimator::Nf => "nf",
            Estimator::Sde => "sde",
        })
    }
}

/// Off-centered kernels used by next-flight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffCenteredKernel {
    #[default]
    Exact,
    Approximate,
}

/// Density of the interior points of next flight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteriorSampling {
    Uniform,
    /// Mixture of the uniform density and the centered Green's function of
    /// the largest ball around the current point. The latter follows the
    /// peak of `G(x_l, ·)`, which has width `1/√σ`.
    #[default]
    Local,
}

/// Share of the local Green's function in [`InteriorSampling::Local`].
const LOCAL_SHARE: f64 = 0.75;

/// Static weight window `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightWindow {
    pub min: f64,
    pub max: f64,
}

impl WeightWindow {
    pub fn new(min: f64, max: f64) -> Result<Self, EstimatorError> {
        if !(min > 0.0 && min < 1.0 && max > 1.0 && max.is_finite()) {
            return Err(EstimatorError::InvalidConfig(format!("weight window needs 0 < min < 1 < max, got [{min}, {max}]")));
        }
        Ok(Self { min, max })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkConfig {
    pub epsilon: f64,
    pub max_steps: u64,
    /// Replaces the kernel screening constant.
    pub sigma_bar_override: Option<f64>,
    pub weight_window: Option<WeightWindow>,
    pub max_splits: usize,
    pub rng_seed: u64,
    pub off_centered: OffCenteredKernel,
    pub nf_interior: InteriorSampling,
    /// Time step of the SDE baseline.
    pub sde_step: f64,
    /// Estimator used for the recursive values inside the gradient estimator.
    pub gradient_inner: Estimator,
}

impl Default for WalkConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            max_steps: 10_000,
            sigma_bar_override: None,
            weight_window: None,
            max_splits: 64,
            rng_seed: 0,
            off_centered: OffCenteredKernel::Exact,
            nf_interior: InteriorSampling::Local,
            sde_step: 1e-3,
            gradient_inner: Estimator::Dt,
        }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        let bad = |m: String| Err(EstimatorError::InvalidConfig(m));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1".into());
        }
        if let Some(w) = self.weight_window {
            WeightWindow::new(w.min, w.max)?;
        }
        if let Some(s) = self.sigma_bar_override {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("sigma bar override must be positive, got {s}"));
            }
        }
        if !(self.sde_step > 0.0) {
            return bad(format!("SDE step must be positive, got {}", self.sde_step));
        }
        if self.max_splits == 0 {
            return bad("max_splits must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    #[default]
    Boundary,
    MaxSteps,
    Roulette,
}

/// Counters for one estimator call (all walkers of a split family).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WalkStats {
    pub steps: u64,
    pub distance_queries: u64,
    pub kernel_evals: u64,
    pub terminated_by: Termination,
    /// Extra walkers created by splitting.
    pub splits: u64,
    /// Null collisions with a negative weight factor.
    pub negative_weights: u64,
    /// Extremes of the null factor `1 − σ′/σ_k` seen in this call.
    pub min_null_factor: f64,
    pub max_null_factor: f64,
}

impl Default for WalkStats {
    fn default() -> Self {
        Self {
            steps: 0,
            distance_queries: 0,
            kernel_evals: 0,
            terminated_by: Termination::Boundary,
            splits: 0,
            negative_weights: 0,
            min_null_factor: f64::INFINITY,
            max_null_factor: f64::NEG_INFINITY,
        }
    }
}

/// Per-walker terminations, folded into one label for the call.
#[derive(Debug, Clone, Copy, Default)]
struct Endings {
    boundary: bool,
    max_steps: bool,
}

impl Endings {
    fn label(self) -> Termination {
        if self.max_steps {
            Termination::MaxSteps
        } else if self.boundary {
            Termination::Boundary
        } else {
            Termination::Roulette
        }
    }
}

impl WalkStats {
    fn null_factor(&mut self, w: f64) {
        self.min_null_factor = self.min_null_factor.min(w);
        self.max_null_factor = self.max_null_factor.max(w);
        if w < 0.0 {
            self.negative_weights += 1;
        }
    }

    fn absorb(&mut self, o: &WalkStats) {
        self.steps += o.steps;
        self.distance_queries += o.distance_queries;
        self.kernel_evals += o.kernel_evals;
        self.splits += o.splits;
        self.negative_weights += o.negative_weights;
        self.min_null_factor = self.min_null_factor.min(o.min_null_factor);
        self.max_null_factor = self.max_null_factor.max(o.max_null_factor);
    }
}

/// Running mean and variance (Welford), mergeable.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EstimateAccumulator {
    pub n: u64,
    pub mean: f64,
    pub m2: f64,
}

impl EstimateAccumulator {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, o: &EstimateAccumulator) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *o;
            return;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        self.mean += d * o.n as f64 / n as f64;
        self.m2 += o.m2 + d * d * (self.n as f64 * o.n as f64 / n as f64);
        self.n = n;
    }

    /// Sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            f64::NAN
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        if self.n < 2 {
            f64::NAN
        } else {
            (self.m2 / (self.n as f64 * (self.n - 1) as f64)).sqrt()
        }
    }
}

/// Totals over many estimator calls.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StatsSummary {
    pub walks: u64,
    pub steps: u64,
    pub distance_queries: u64,
    pub kernel_evals: u64,
    pub splits: u64,
    pub boundary: u64,
    pub max_steps: u64,
    pub roulette: u64,
    pub negative_weights: u64,
    pub min_null_factor: Option<f64>,
    pub max_null_factor: Option<f64>,
}

impl StatsSummary {
    pub fn add(&mut self, s: &WalkStats) {
        self.walks += 1;
        self.steps += s.steps;
        self.distance_queries += s.distance_queries;
        self.kernel_evals += s.kernel_evals;
        self.splits += s.splits;
        self.negative_weights += s.negative_weights;
        match s.terminated_by {
            Termination::Boundary => self.boundary += 1,
            Termination::MaxSteps => self.max_steps += 1,
            Termination::Roulette => self.roulette += 1,
        }
        if s.min_null_factor.is_finite() {
            self.min_null_factor = Some(self.min_null_factor.map_or(s.min_null_factor, |m| m.min(s.min_null_factor)));
            self.max_null_factor = Some(self.max_null_factor.map_or(s.max_null_factor, |m| m.max(s.max_null_factor)));
        }
    }

    pub fn merge(&mut self, o: &StatsSummary) {
        self.walks += o.walks;
        self.steps += o.steps;
        self.distance_queries += o.distance_queries;
        self.kernel_evals += o.kernel_evals;
        self.splits += o.splits;
        self.boundary += o.boundary;
        self.max_steps += o.max_steps;
        self.roulette += o.roulette;
        self.negative_weights += o.negative_weights;
        let pick = |a: Option<f64>, b: Option<f64>, f: fn(f64, f64) -> f64| match (a, b) {
            (Some(x), Some(y)) => Some(f(x, y)),
            (x, None) => x,
            (None, y) => y,
        };
        self.min_null_factor = pick(self.min_null_factor, o.min_null_factor, f64::min);
        self.max_null_factor = pick(self.max_null_factor, o.max_null_factor, f64::max);
    }

    pub fn mean_steps(&self) -> f64 {
        self.steps as f64 / self.walks.max(1) as f64
    }

    pub fn mean_queries(&self) -> f64 {
        self.distance_queries as f64 / self.walks.max(1) as f64
    }
}

// ---------------------------------------------------------------------------
// random streams

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for sample `sample` of point `point`: the key depends on the
/// seed and point, the ChaCha stream id is the sample index.
pub fn sample_rng(seed: u64, point: u64, sample: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(point.wrapping_add(0x632b_e59b_d9b4_e019))));
    rng.set_stream(sample);
    rng
}

// ---------------------------------------------------------------------------
// weight window

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WindowDecision {
    Continue(f64),
    Terminate,
    Split { count: usize, weight: f64 },
}

/// Roulette below the window, expected-value splitting above it. Signed
/// weights are handled through their magnitude.
pub fn apply_weight_window<R: Rng + ?Sized>(w: f64, window: WeightWindow, rng: &mut R) -> WindowDecision {
    let a = w.abs();
    if a < window.min {
        if rng.random::<f64>() * window.min < a {
            WindowDecision::Continue(window.min.copysign(w))
        } else {
            WindowDecision::Terminate
        }
    } else if a > window.max {
        let m = a / window.max;
        let n = m.floor();
        let count = if rng.random::<f64>() < n + 1.0 - m { n } else { n + 1.0 };
        WindowDecision::Split {
            count: count as usize,
            weight: w / m,
        }
    } else {
        WindowDecision::Continue(w)
    }
}

/// Walker on the work stack of a split family.
#[derive(Debug, Clone, Copy)]
struct Walker {
    x: Vec3,
    /// throughput in `U` space
    thr: f64,
    steps: u64,
}

/// Applies the window to a walker whose `u`-space weight is `thr·scale`.
/// Returns false when the walker dies.
fn window_step<R: Rng + ?Sized>(
    walker: &mut Walker,
    scale: f64,
    window: WeightWindow,
    max_splits: usize,
    stack: &mut Vec<Walker>,
    stats: &mut WalkStats,
    rng: &mut R,
) -> bool {
    if walker.thr == 0.0 {
        return false;
    }
    match apply_weight_window(walker.thr * scale, window, rng) {
        WindowDecision::Continue(w) => {
            walker.thr = w / scale;
            true
        }
        WindowDecision::Terminate => false,
        WindowDecision::Split { count, weight } => {
            if count == 0 {
                return false;
            }
            if stack.len() + count > max_splits {
                log::debug!("split cap {max_splits} reached, continuing with weight");
                return true;
            }
            walker.thr = weight / scale;
            for _ in 1..count {
                stack.push(*walker);
            }
            stats.splits += count as u64 - 1;
            true
        }
    }
}

fn sigma_kernel(tp: &TransformedProblem, cfg: &WalkConfig) -> f64 {
    cfg.sigma_bar_override.unwrap_or(tp.sigma_kernel())
}

fn start_check(scene: &Scene, x: Vec3) -> Result<f64, EstimatorError> {
    Ok(scene.distance_to_boundary(x)?.distance)
}

// ---------------------------------------------------------------------------
// classic walk on spheres

/// Walk on spheres for constant `α`, `σ` and no drift. The source may vary:
/// it is sampled from the centered Green's function.
pub fn wos_classic<R: Rng + ?Sized>(scene: &Scene, problem: &Problem, x: Vec3, cfg: &WalkConfig, rng: &mut R) -> Result<(f64, WalkStats), EstimatorError> {
    let at = Vec3::ZERO;
    if !problem.alpha.is_constant() || !problem.sigma.is_constant() || problem.has_drift() || problem.lambda.is_some() {
        return Err(EstimatorError::NonConstantCoefficients);
    }
    let a = problem.alpha.value(at);
    let s = problem.sigma.value(at) / a;
    let f_const = match &problem.f {
        crate::coefficients::Source::Field(f) if f.is_constant() => Some(f.value(at)),
        _ => problem.constant_coefficients().map(|c| c.2),
    };
    start_check(scene, x)?;
    let mut stats = WalkStats::default();
    let (mut acc, mut thr, mut pos) = (0.0, 1.0, x);
    let mut ended = Endings::default();
    loop {
        if stats.steps >= cfg.max_steps {
            ended.max_steps = true;
            break;
        }
        let d = scene.distance(pos);
        stats.distance_queries += 1;
        if d < cfg.epsilon {
            acc += thr * problem.dirichlet(scene.closest_point(pos));
            ended.boundary = true;
            break;
        }
        stats.steps += 1;
        let ball = BallKernel::new(scene.dim(), pos, d, s)?;
        let norm = ball.green_norm();
        let fy = match f_const {
            Some(f) => f,
            None => {
                stats.kernel_evals += 1;
                problem.source(ball.sample_green_centered(rng)?.0)
            }
        };
        acc += thr * norm * fy / a;
        thr *= 1.0 - ball.absorption_probability();
        pos = ball.sample_sphere(rng);
    }
    stats.terminated_by = ended.label();
    finite(acc, stats)
}

fn finite(v: f64, stats: WalkStats) -> Result<(f64, WalkStats), EstimatorError> {
    if v.is_finite() {
        Ok((v, stats))
    } else {
        Err(EstimatorError::NonFinite)
    }
}

// ---------------------------------------------------------------------------
// delta tracking

/// Delta-tracking estimate of `u(x)`.
pub fn delta_tracking_estimate<R: Rng + ?Sized>(
    scene: &Scene,
    tp: &TransformedProblem,
    x: Vec3,
    cfg: &WalkConfig,
    rng: &mut R,
) -> Result<(f64, WalkStats), EstimatorError> {
    start_check(scene, x)?;
    let gamma0 = tp.gamma(x);
    let mut stats = WalkStats::default();
    let big_u = dt_walk(scene, tp, x, gamma0, cfg, rng, &mut stats)?;
    finite(big_u * (-gamma0).exp(), stats)
}

/// Transformed-solution estimate `U(x)` by delta tracking. `gamma0` fixes the
/// reference for the window weights.
fn dt_walk<R: Rng + ?Sized>(
    scene: &Scene,
    tp: &TransformedProblem,
    x: Vec3,
    gamma0: f64,
    cfg: &WalkConfig,
    rng: &mut R,
    stats: &mut WalkStats,
) -> Result<f64, EstimatorError> {
    let sk = sigma_kernel(tp, cfg);
    let dim = scene.dim();
    let mut stack = vec![Walker { x, thr: 1.0, steps: 0 }];
    let mut acc = 0.0;
    let mut ended = Endings::default();
    while let Some(mut w) = stack.pop() {
        loop {
            if w.steps >= cfg.max_steps {
                ended.max_steps = true;
                break;
            }
            let d = scene.distance(w.x);
            stats.distance_queries += 1;
            if d < cfg.epsilon {
                acc += w.thr * tp.g_prime(scene.closest_point(w.x));
                ended.boundary = true;
                break;
            }
            w.steps += 1;
            stats.steps += 1;
            let ball = BallKernel::new(dim, w.x, d, sk)?;
            let (y, _) = ball.sample_green_centered(rng)?;
            stats.kernel_evals += 1;
            let norm = ball.green_norm();
            let cy = tp.at(y);
            acc += w.thr * norm * cy.f_prime;
            let gamma_next;
            if rng.random::<f64>() < sk * norm {
                let factor = 1.0 - cy.sigma_prime / sk;
                stats.null_factor(factor);
                w.thr *= factor;
                w.x = y;
                gamma_next = cy.gamma;
            } else {
                w.x = ball.sample_sphere(rng);
                gamma_next = if cfg.weight_window.is_some() { tp.gamma(w.x) } else { 0.0 };
            }
            if w.thr == 0.0 {
                break;
            }
            if let Some(win) = cfg.weight_window {
                let scale = (gamma_next - gamma0).exp();
                if !window_step(&mut w, scale, win, cfg.max_splits, &mut stack, stats, rng) {
                    break;
                }
            }
        }
    }
    stats.terminated_by = ended.label();
    Ok(acc)
}

// ---------------------------------------------------------------------------
// next flight

/// Next-flight estimate of `u(x)`.
pub fn next_flight_estimate<R: Rng + ?Sized>(
    scene: &Scene,
    tp: &TransformedProblem,
    x: Vec3,
    cfg: &WalkConfig,
    rng: &mut R,
) -> Result<(f64, WalkStats), EstimatorError> {
    start_check(scene, x)?;
    let gamma0 = tp.gamma(x);
    let mut stats = WalkStats::default();
    let big_u = nf_walk(scene, tp, x, gamma0, cfg, rng, &mut stats)?;
    finite(big_u * (-gamma0).exp(), stats)
}

/// Transformed-solution estimate `U(x)` by next flight. The exit points use
/// `rng`; the interior chains draw from a generator seeded from it, so the
/// sequence of balls does not depend on the screening.
fn nf_walk<R: Rng + ?Sized>(
    scene: &Scene,
    tp: &TransformedProblem,
    x: Vec3,
    gamma0: f64,
    cfg: &WalkConfig,
    rng: &mut R,
    stats: &mut WalkStats,
) -> Result<f64, EstimatorError> {
    let sk = sigma_kernel(tp, cfg);
    let dim = scene.dim();
    let mut chain_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
    let mut stack = vec![Walker { x, thr: 1.0, steps: 0 }];
    let mut acc = 0.0;
    let mut ended = Endings::default();
    while let Some(mut w) = stack.pop() {
        loop {
            if w.steps >= cfg.max_steps {
                ended.max_steps = true;
                break;
            }
            let d = scene.distance(w.x);
            stats.distance_queries += 1;
            if d < cfg.epsilon {
                acc += w.thr * tp.g_prime(scene.closest_point(w.x));
                ended.boundary = true;
                break;
            }
            w.steps += 1;
            stats.steps += 1;
            let ball = BallKernel::new(dim, w.x, d, sk)?;
            let z = ball.sample_sphere(rng);
            let (t_hat, s_hat) = nf_ball(&ball, tp, z, cfg, &mut chain_rng, stats)?;
            acc += w.thr * s_hat;
            w.thr *= t_hat;
            w.x = z;
            if w.thr == 0.0 {
                break;
            }
            if let Some(win) = cfg.weight_window {
                let scale = (tp.gamma(z) - gamma0).exp();
                if !window_step(&mut w, scale, win, cfg.max_splits, &mut stack, stats, rng) {
                    break;
                }
            }
        }
    }
    stats.terminated_by = ended.label();
    Ok(acc)
}

/// One ball of next flight: returns `(T̂, Ŝ)` with `U(c) ≈ T̂·U(z) + Ŝ`.
fn nf_ball<R: Rng + ?Sized>(
    ball: &BallKernel,
    tp: &TransformedProblem,
    z: Vec3,
    cfg: &WalkConfig,
    rng: &mut R,
    stats: &mut WalkStats,
) -> Result<(f64, f64), EstimatorError> {
    let sk = ball.sigma();
    let area = ball.surface_area();
    let vol = ball.volume();
    let center = ball.center();
    let (mut t_hat, mut s_hat) = (0.0, 0.0);
    let mut xc = center;
    let mut weight = 1.0;
    for link in 0..cfg.max_steps {
        let p = if link == 0 {
            ball.poisson_centered()
        } else {
            match cfg.off_centered {
                OffCenteredKernel::Exact => ball.poisson_offcentered_unchecked(xc, z),
                OffCenteredKernel::Approximate => ball.poisson_offcentered_approx(xc, z).unwrap_or(0.0),
            }
        };
        stats.kernel_evals += 1;
        t_hat += p * area * weight;
        let keep = weight.abs().min(1.0);
        if rng.random::<f64>() >= keep {
            break;
        }
        weight /= keep;
        let (xn, pdf) = match cfg.nf_interior {
            InteriorSampling::Uniform => (ball.sample_ball_uniform(rng), 1.0 / vol),
            InteriorSampling::Local => sample_local(ball, xc, rng)?,
        };
        let g = if link == 0 {
            ball.green_centered_unchecked((xn - center).norm())
        } else {
            match cfg.off_centered {
                OffCenteredKernel::Exact => ball.green_offcentered_unchecked(xc, xn),
                OffCenteredKernel::Approximate => ball.green_offcentered_approx(xc, xn).unwrap_or(0.0),
            }
        };
        stats.kernel_evals += 1;
        let cn = tp.at(xn);
        s_hat += cn.f_prime * g / pdf * weight;
        let factor = sk - cn.sigma_prime;
        stats.null_factor(factor / sk);
        weight *= g / pdf * factor;
        xc = xn;
        if weight == 0.0 {
            break;
        }
    }
    Ok((t_hat, s_hat))
}

/// Density `(d+2)(1 − |y−c|²/R²)/(2|B|)` on the ball, which vanishes on
/// the sphere like the Green's function does.
fn parabolic_pdf(ball: &BallKernel, y: Vec3) -> f64 {
    let d = ball.dim().get() as f64;
    let q = (y - ball.center()).norm2() / (ball.radius() * ball.radius());
    (d + 2.0) * (1.0 - q).max(0.0) / (2.0 * ball.volume())
}

fn sample_parabolic<R: Rng + ?Sized>(ball: &BallKernel, rng: &mut R) -> Vec3 {
    let r2 = ball.radius() * ball.radius();
    loop {
        let y = ball.sample_ball_uniform(rng);
        if rng.random::<f64>() * r2 < r2 - (y - ball.center()).norm2() {
            return y;
        }
    }
}

/// Draws from `LOCAL_SHARE·G_b(x, ·)/|G_b| + (1 − LOCAL_SHARE)·parabolic`,
/// where `b` is the largest ball around `x` inside `ball`. Returns the point
/// and the mixture density.
fn sample_local<R: Rng + ?Sized>(ball: &BallKernel, x: Vec3, rng: &mut R) -> Result<(Vec3, f64), EstimatorError> {
    let inner = ball.radius() - (x - ball.center()).norm();
    if inner <= 1e-9 * ball.radius() {
        let y = sample_parabolic(ball, rng);
        return Ok((y, parabolic_pdf(ball, y)));
    }
    let local = BallKernel::new(ball.dim(), x, inner, ball.sigma())?;
    let y = if rng.random::<f64>() < LOCAL_SHARE {
        local.sample_green_centered(rng)?.0
    } else {
        sample_parabolic(ball, rng)
    };
    let mut pdf = (1.0 - LOCAL_SHARE) * parabolic_pdf(ball, y);
    let r = (y - x).norm();
    if r < inner {
        pdf += LOCAL_SHARE * local.green_centered_unchecked(r) / local.green_norm();
    }
    Ok((y, pdf))
}

// ---------------------------------------------------------------------------
// gradient

/// Gradient estimate with the companion value estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientSample {
    pub gradient: Vec3,
    pub value: f64,
}

/// Adaptive Simpson quadrature.
fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 40)
}

/// `|∂B₁| r^{d−1} |∇ₓG(r)|`, at most one on `[0, R]`.
fn gradient_radial(ball: &BallKernel, r: f64) -> f64 {
    if r <= 0.0 {
        // the 1/r^{d−1} singularity cancels the Jacobian
        return 1.0;
    }
    if r >= ball.radius() {
        return 0.0;
    }
    let g = ball.green_gradient_centered_unchecked(ball.center() + Vec3::axis(0) * r).norm();
    ball.dim().unit_sphere_area() * r.powi(ball.dim().get() as i32 - 1) * g
}

fn inner_u<R: Rng + ?Sized>(scene: &Scene, tp: &TransformedProblem, y: Vec3, cfg: &WalkConfig, rng: &mut R, stats: &mut WalkStats) -> Result<f64, EstimatorError> {
    let mut s = WalkStats::default();
    let g0 = tp.gamma(y);
    let v = match cfg.gradient_inner {
        Estimator::Nf => nf_walk(scene, tp, y, g0, cfg, rng, &mut s)?,
        _ => dt_walk(scene, tp, y, g0, cfg, rng, &mut s)?,
    };
    stats.absorb(&s);
    Ok(v)
}

/// Estimates `∇u(x)` from the first ball centered at `x`:
/// `∇u = e^{−γ}(∫∇P U + ∫∇G (f′ + (σ_k − σ′)U)) − u∇γ`.
/// The volume term samples `|∇G|`; both terms use antithetic pairs.
pub fn gradient_estimate<R: Rng + ?Sized>(
    scene: &Scene,
    tp: &TransformedProblem,
    x: Vec3,
    cfg: &WalkConfig,
    rng: &mut R,
) -> Result<(GradientSample, WalkStats), EstimatorError> {
    let d = start_check(scene, x)?;
    if d <= cfg.epsilon {
        return Err(EstimatorError::InShell { distance: d, epsilon: cfg.epsilon });
    }
    let sk = sigma_kernel(tp, cfg);
    let dim = scene.dim();
    let ball = BallKernel::new(dim, x, d, sk)?;
    let mut stats = WalkStats {
        distance_queries: 1,
        steps: 1,
        ..WalkStats::default()
    };
    let (gamma0, grad_gamma, _) = tp.gamma_jet(x);

    // boundary term
    let z = ball.sample_sphere(rng);
    let z_flip = x * 2.0 - z;
    let uz = inner_u(scene, tp, z, cfg, rng, &mut stats)?;
    let uz_flip = inner_u(scene, tp, z_flip, cfg, rng, &mut stats)?;
    let boundary = ball.poisson_gradient_centered_unchecked(z) * (ball.surface_area() * 0.5 * (uz - uz_flip));
    stats.kernel_evals += 1;

    // volume term
    let q = |r: f64| gradient_radial(&ball, r);
    let norm = simpson(&q, 0.0, d, 1e-10 * d);
    let mut r = 0.0;
    let mut accepted = false;
    for _ in 0..crate::kernels::MAX_REJECTIONS {
        r = d * rng.random::<f64>();
        stats.kernel_evals += 1;
        if rng.random::<f64>() < q(r) {
            accepted = true;
            break;
        }
    }
    if !accepted {
        return Err(KernelError::EnvelopeFailure {
            attempts: crate::kernels::MAX_REJECTIONS,
            radius: d,
            sigma: sk,
        }
        .into());
    }
    let dir = sample_unit_direction(dim, rng);
    // ∇G is odd under reflection through the center, so y and 2x − y form an
    // antithetic pair as on the sphere
    let y = x + dir * r;
    let y_flip = x - dir * r;
    let gvec = ball.green_gradient_centered_unchecked(y);
    let mut integrand = |p: Vec3, stats: &mut WalkStats| -> Result<f64, EstimatorError> {
        let cp = tp.at(p);
        let null = sk - cp.sigma_prime;
        let mut v = cp.f_prime;
        if null != 0.0 {
            v += null * inner_u(scene, tp, p, cfg, rng, stats)?;
        }
        Ok(v)
    };
    let fy = integrand(y, &mut stats)?;
    let fy_flip = integrand(y_flip, &mut stats)?;
    let volume = if gvec.norm() > 0.0 {
        gvec.normalized() * (norm * 0.5 * (fy - fy_flip))
    } else {
        Vec3::ZERO
    };

    // value at x from an independent walk
    let u_x = inner_u(scene, tp, x, cfg, rng, &mut stats)? * (-gamma0).exp();
    let gradient = (boundary + volume) * (-gamma0).exp() - grad_gamma * u_x;
    if !gradient.is_finite() || !u_x.is_finite() {
        return Err(EstimatorError::NonFinite);
    }
    stats.terminated_by = Termination::Boundary;
    Ok((GradientSample { gradient, value: u_x }, stats))
}

// ---------------------------------------------------------------------------
// SDE baseline

/// Euler–Maruyama baseline on the original problem. The diffusion is
/// generated by `½(∇·(α∇) + ω·∇)`, so a step is
/// `X += ½(∇α + ω)h + √(αh)·N(0, I)`, with killing `½σ` and source `½f`.
/// On exit the walk is clamped to the closest boundary point.
pub fn sde_walk_estimate<R: Rng + ?Sized>(scene: &Scene, problem: &Problem, x: Vec3, h: f64, cfg: &WalkConfig, rng: &mut R) -> Result<(f64, WalkStats), EstimatorError> {
    if !(h > 0.0) {
        return Err(EstimatorError::InvalidConfig(format!("SDE step must be positive, got {h}")));
    }
    start_check(scene, x)?;
    let dim = problem.dim;
    let mut stats = WalkStats::default();
    let (mut pos, mut weight, mut acc) = (x, 1.0, 0.0);
    let mut ended = Endings::default();
    loop {
        if stats.steps >= cfg.max_steps {
            ended.max_steps = true;
            break;
        }
        stats.steps += 1;
        let (next, kill, src) = sde_increment(problem, dim, pos, h, rng);
        acc += weight * src;
        weight *= kill;
        pos = next;
        stats.distance_queries += 1;
        if !scene.contains(pos) {
            acc += weight * problem.dirichlet(scene.closest_point(pos));
            ended.boundary = true;
            break;
        }
    }
    stats.terminated_by = ended.label();
    finite(acc, stats)
}

/// One Euler–Maruyama step: next position, killing factor, source increment.
fn sde_increment<R: Rng + ?Sized>(problem: &Problem, dim: Dim, x: Vec3, h: f64, rng: &mut R) -> (Vec3, f64, f64) {
    let a = problem.alpha.jet(x, dim);
    let drift = (a.gradient + problem.drift(x)) * 0.5;
    let mut noise = Vec3::ZERO;
    for k in 0..dim.get() {
        noise[k] = rng.sample::<f64, _>(StandardNormal);
    }
    let next = x + drift * h + noise * (a.value * h).sqrt();
    let kill = (-0.5 * problem.sigma.value(x) * h).exp();
    (next, kill, 0.5 * problem.source(x) * h)
}

/// Raw increments of the SDE at `x`, for distribution tests.
pub fn sde_increments<R: Rng + ?Sized>(problem: &Problem, x: Vec3, h: f64, count: usize, rng: &mut R) -> Vec<Vec3> {
    (0..count).map(|_| sde_increment(problem, problem.dim, x, h, rng).0 - x).collect()
}

// ---------------------------------------------------------------------------
// batch solve

/// Problem handed to [`solve`]; the SDE baseline and classic walks use the
/// original coefficients, the others the transformed ones.
#[derive(Debug, Clone, Copy)]
pub struct SolveTarget<'a> {
    pub scene: &'a Scene,
    pub transformed: &'a TransformedProblem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointEstimate {
    pub point: Vec3,
    pub accumulator: EstimateAccumulator,
    pub stats: StatsSummary,
    /// Samples that failed and were excluded.
    pub flagged: u64,
    pub first_error: Option<String>,
}

impl PointEstimate {
    pub fn mean(&self) -> f64 {
        self.accumulator.mean
    }

    pub fn std_error(&self) -> f64 {
        self.accumulator.std_error()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub point: Vec3,
    pub components: [EstimateAccumulator; 3],
    pub value: EstimateAccumulator,
    pub stats: StatsSummary,
    pub flagged: u64,
    pub first_error: Option<String>,
}

impl GradientEstimate {
    pub fn mean(&self) -> Vec3 {
        Vec3::new(self.components[0].mean, self.components[1].mean, self.components[2].mean)
    }

    pub fn std_error(&self) -> Vec3 {
        let se = |a: &EstimateAccumulator| if a.n >= 2 { a.std_error() } else { 0.0 };
        Vec3::new(se(&self.components[0]), se(&self.components[1]), se(&self.components[2]))
    }
}

/// One estimator call with the given stream.
pub fn estimate_once<R: Rng + ?Sized>(target: SolveTarget, estimator: Estimator, x: Vec3, cfg: &WalkConfig, rng: &mut R) -> Result<(f64, WalkStats), EstimatorError> {
    let tp = target.transformed;
    match estimator {
        Estimator::Classic => wos_classic(target.scene, tp.problem(), x, cfg, rng),
        Estimator::Dt => delta_tracking_estimate(target.scene, tp, x, cfg, rng),
        Estimator::Nf => next_flight_estimate(target.scene, tp, x, cfg, rng),
        Estimator::Sde => sde_walk_estimate(target.scene, tp.problem(), x, cfg.sde_step, cfg, rng),
    }
}

pub(crate) const BLOCK: u64 = 256;

pub(crate) fn run_pool<T: Send>(workers: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T, EstimatorError> {
    match workers {
        None => Ok(job()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| EstimatorError::InvalidConfig(e.to_string()))?;
            Ok(pool.install(job))
        }
    }
}

fn check_points(scene: &Scene, points: &[Vec3]) -> Result<(), EstimatorError> {
    for &p in points {
        scene.distance_to_boundary(p)?;
    }
    Ok(())
}

fn blocks(n_points: usize, spp: u64) -> Vec<(usize, u64, u64)> {
    let mut tasks = Vec::new();
    for p in 0..n_points {
        let mut s = 0;
        while s < spp {
            tasks.push((p, s, (s + BLOCK).min(spp)));
            s += BLOCK;
        }
    }
    tasks
}

/// Runs `spp` samples per point. Sample `j` of point `i` always uses stream
/// [`sample_rng`]`(seed, i, j)` and partial results are merged in a fixed
/// order, so the output does not depend on the worker count.
pub fn solve(target: SolveTarget, points: &[Vec3], spp: u64, estimator: Estimator, cfg: &WalkConfig, workers: Option<usize>) -> Result<Vec<PointEstimate>, EstimatorError> {
    cfg.validate()?;
    check_points(target.scene, points)?;
    let tasks = blocks(points.len(), spp);
    let partial = run_pool(workers, || {
        tasks
            .par_iter()
            .map(|&(p, start, end)| {
                let mut acc = EstimateAccumulator::default();
                let mut stats = StatsSummary::default();
                let mut flagged = 0;
                let mut first_error = None;
                for s in start..end {
                    let mut rng = sample_rng(cfg.rng_seed, p as u64, s);
                    match estimate_once(target, estimator, points[p], cfg, &mut rng) {
                        Ok((v, st)) => {
                            acc.push(v);
                            stats.add(&st);
                        }
                        Err(e) => {
                            flagged += 1;
                            first_error.get_or_insert_with(|| e.to_string());
                        }
                    }
                }
                (p, acc, stats, flagged, first_error)
            })
            .collect::<Vec<_>>()
    })?;
    let mut out: Vec<PointEstimate> = points
        .iter()
        .map(|&point| PointEstimate {
            point,
            accumulator: EstimateAccumulator::default(),
            stats: StatsSummary::default(),
            flagged: 0,
            first_error: None,
        })
        .collect();
    for (p, acc, stats, flagged, err) in partial {
        let o = &mut out[p];
        o.accumulator.merge(&acc);
        o.stats.merge(&stats);
        o.flagged += flagged;
        if o.first_error.is_none() {
            o.first_error = err;
        }
    }
    for o in &out {
        if o.flagged > 0 {
            log::warn!("{} samples flagged at {:?}: {}", o.flagged, o.point, o.first_error.as_deref().unwrap_or(""));
        }
    }
    Ok(out)
}

/// Gradient counterpart of [`solve`].
pub fn solve_gradient(target: SolveTarget, points: &[Vec3], spp: u64, cfg: &WalkConfig, workers: Option<usize>) -> Result<Vec<GradientEstimate>, EstimatorError> {
    cfg.validate()?;
    check_points(target.scene, points)?;
    let tasks = blocks(points.len(), spp);
    let partial = run_pool(workers, || {
        tasks
            .par_iter()
            .map(|&(p, start, end)| {
                let mut comps = [EstimateAccumulator::default(); 3];
                let mut value = EstimateAccumulator::default();
                let mut stats = StatsSummary::default();
                let mut flagged = 0;
                let mut first_error = None;
                for s in start..end {
                    let mut rng = sample_rng(cfg.rng_seed, p as u64, s);
                    match gradient_estimate(target.scene, target.transformed, points[p], cfg, &mut rng) {
                        Ok((g, st)) => {
                            for (k, c) in comps.iter_mut().enumerate() {
                                c.push(g.gradient[k]);
                            }
                            value.push(g.value);
                            stats.add(&st);
                        }
                        Err(e) => {
                            flagged += 1;
                            first_error.get_or_insert_with(|| e.to_string());
                        }
                    }
                }
                (p, comps, value, stats, flagged, first_error)
            })
            .collect::<Vec<_>>()
    })?;
    let mut out: Vec<GradientEstimate> = points
        .iter()
        .map(|&point| GradientEstimate {
            point,
            components: [EstimateAccumulator::default(); 3],
            value: EstimateAccumulator::default(),
            stats: StatsSummary::default(),
            flagged: 0,
            first_error: None,
        })
        .collect();
    for (p, comps, value, stats, flagged, err) in partial {
        let o = &mut out[p];
        for k in 0..3 {
            o.components[k].merge(&comps[k]);
        }
        o.value.merge(&value);
        o.stats.merge(&stats);
        o.flagged += flagged;
        if o.first_error.is_none() {
            o.first_error = err;
        }
    }
    Ok(out)
}
