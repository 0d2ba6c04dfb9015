//! Manufactured test problems and the validation studies run on them.
//!
//! Samples use the same per-(point, sample) streams as [`solve`], so a report
//! is reproducible bit for bit from the seed and settings it embeds. Wall
//! times are the only fields that vary between runs.

use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coefficients::{transform, CoefficientError, ProbeOptions, Problem, ScalarField, TransformedProblem};
use crate::estimators::{
    estimate_once, run_pool, sample_rng, solve, solve_gradient, EstimateAccumulator, Estimator, EstimatorError, PointEstimate, SolveTarget, StatsSummary,
    WalkConfig, WeightWindow, BLOCK,
};
use crate::geometry::{GeometryError, Scene, Sdf};
use crate::math::{Dim, Vec3};
use crate::specfun::i0_scaled;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Coefficient(#[from] CoefficientError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("unknown problem `{0}`")]
    UnknownProblem(String),
    #[error("unknown study `{0}` (unbiasedness, convergence, epsilon-bias, query-count, weight-window, gradient)")]
    UnknownStudy(String),
    #[error("problem `{0}` has no reference solution")]
    NoReference(String),
    #[error("invalid study settings: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

// ---------------------------------------------------------------------------
// catalog

/// A manufactured problem on the unit disk or ball.
#[derive(Debug, Clone)]
pub struct CatalogEntry {
    pub id: &'static str,
    pub summary: &'static str,
    pub problem: Problem,
    pub boundary: Sdf,
    pub epsilon: f64,
    /// Probe points, all inside the domain.
    pub points: Vec<Vec3>,
}

/// Scene and transformed problem of a catalog entry.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scene: Scene,
    pub transformed: TransformedProblem,
}

impl Prepared {
    pub fn target(&self) -> SolveTarget<'_> {
        SolveTarget {
            scene: &self.scene,
            transformed: &self.transformed,
        }
    }
}

impl CatalogEntry {
    pub fn dim(&self) -> Dim {
        self.problem.dim
    }

    pub fn scene(&self) -> Result<Scene, HarnessError> {
        Ok(Scene::from_sdf(self.dim(), &self.boundary, self.epsilon, None)?)
    }

    pub fn prepare(&self) -> Result<Prepared, HarnessError> {
        prepare(&self.problem, self.scene()?)
    }

    pub fn reference(&self, x: Vec3) -> Option<f64> {
        self.problem.reference_solution().map(|u| u.value(x))
    }

    fn reference_or_err(&self) -> Result<&ScalarField, HarnessError> {
        self.problem.reference_solution().ok_or_else(|| HarnessError::NoReference(self.id.into()))
    }

    /// Same entry with `k` added to `σ`.
    pub fn with_sigma_shift(&self, k: f64) -> Self {
        let mut e = self.clone();
        if k != 0.0 {
            e.problem.sigma = ScalarField::sum(vec![e.problem.sigma.clone(), ScalarField::constant(k)]);
        }
        e
    }
}

fn prepare(problem: &Problem, scene: Scene) -> Result<Prepared, HarnessError> {
    let transformed = transform(problem, &scene, &ProbeOptions::default())?;
    Ok(Prepared { scene, transformed })
}

fn disk_points() -> Vec<Vec3> {
    vec![Vec3::new2(0.0, 0.0), Vec3::new2(0.3, 0.2), Vec3::new2(-0.5, 0.1), Vec3::new2(0.1, -0.7), Vec3::new2(0.55, 0.55)]
}

fn ball_points() -> Vec<Vec3> {
    vec![
        Vec3::new(0.0, 0.0, 0.0),
        Vec3::new(0.3, 0.2, -0.1),
        Vec3::new(-0.5, 0.1, 0.2),
        Vec3::new(0.1, -0.6, 0.3),
        Vec3::new(0.4, 0.4, 0.4),
    ]
}

fn entry(id: &'static str, summary: &'static str, problem: Problem) -> CatalogEntry {
    let points = match problem.dim {
        Dim::Two => disk_points(),
        Dim::Three => ball_points(),
    };
    CatalogEntry {
        id,
        summary,
        problem,
        boundary: Sdf::sphere(Vec3::ZERO, 1.0),
        epsilon: 1e-3,
        points,
    }
}

fn c(v: f64) -> ScalarField {
    ScalarField::constant(v)
}

/// The six manufactured problems, in a fixed order.
pub fn catalog() -> Vec<CatalogEntry> {
    let d2 = Dim::Two;
    let d3 = Dim::Three;
    vec![
        entry(
            "smooth-alpha-2d",
            "smooth Gaussian diffusion bump, no screening",
            Problem::manufactured(
                d2,
                ScalarField::gaussian_bump(Vec3::new2(0.2, -0.1), 1.0, 0.6, 1.0),
                c(0.0),
                None,
                ScalarField::sinusoid(1.0, Vec3::new2(1.0, 0.8), 0.3, 2.0),
            ),
        ),
        entry(
            "oscillating-alpha-2d",
            "high-frequency diffusion, mild screening",
            Problem::manufactured(
                d2,
                ScalarField::sinusoid(0.5, Vec3::new2(6.0, 4.0), 0.0, 1.5),
                c(1.0),
                None,
                ScalarField::gaussian_bump(Vec3::new2(-0.2, 0.3), 1.0, 0.7, 1.0),
            ),
        ),
        entry(
            "variable-sigma-2d",
            "unit diffusion, screening between 1 and 5",
            Problem::manufactured(
                d2,
                c(1.0),
                ScalarField::sinusoid(2.0, Vec3::new2(1.0, 2.0), 0.0, 3.0),
                None,
                ScalarField::exponential(1.0, Vec3::new2(0.6, -0.4)),
            ),
        ),
        entry(
            "high-sigma-2d",
            "sharp diffusion bump, screening between 10 and 50",
            Problem::manufactured(
                d2,
                ScalarField::gaussian_bump(Vec3::new2(0.1, 0.1), 8.0, 0.3, 1.0),
                ScalarField::gaussian_bump(Vec3::new2(-0.2, 0.2), 40.0, 0.5, 10.0),
                None,
                ScalarField::sinusoid(1.0, Vec3::new2(2.0, 1.0), 0.0, 2.0),
            ),
        ),
        entry(
            "drift-3d",
            "constant drift from a linear potential",
            Problem::manufactured(
                d3,
                c(1.0),
                c(1.0),
                Some(ScalarField::linear(0.0, Vec3::new(0.5, -0.3, 0.2))),
                ScalarField::sinusoid(1.0, Vec3::new(1.0, 1.0, 1.0), 0.2, 2.0),
            ),
        ),
        entry(
            "combined-3d",
            "variable diffusion, screening and drift",
            Problem::manufactured(
                d3,
                ScalarField::gaussian_bump(Vec3::new(0.2, 0.0, -0.1), 1.0, 0.6, 1.0),
                ScalarField::sinusoid(1.0, Vec3::new(1.0, 0.0, 1.0), 0.0, 2.0),
                Some(ScalarField::sinusoid(0.3, Vec3::new(1.0, 2.0, 0.0), 0.0, 0.0)),
                ScalarField::gaussian_bump(Vec3::new(0.0, 0.2, 0.1), 1.0, 0.8, 1.0),
            ),
        ),
    ]
}

/// Laplace problem on the unit disk whose solution is the constant 1.7.
pub fn constant_solution() -> CatalogEntry {
    entry(
        "constant-2d",
        "Laplace problem with constant boundary data",
        Problem::manufactured(Dim::Two, c(1.0), c(0.0), None, c(1.7)),
    )
}

/// Catalog entry or auxiliary problem by id.
pub fn catalog_entry(id: &str) -> Result<CatalogEntry, HarnessError> {
    catalog()
        .into_iter()
        .chain(std::iter::once(constant_solution()))
        .find(|e| e.id == id)
        .ok_or_else(|| HarnessError::UnknownProblem(id.into()))
}

/// Screened boundary layer for the ε-shell study: `Δu = σu` on the unit disk
/// with `u = 1` on the circle, so `u(r) = I0(√σ r) / I0(√σ)`.
#[derive(Debug, Clone)]
pub struct ScreenedLayer {
    pub sigma: f64,
    pub radius: f64,
}

impl Default for ScreenedLayer {
    fn default() -> Self {
        Self { sigma: 2500.0, radius: 0.9 }
    }
}

impl ScreenedLayer {
    pub const ID: &'static str = "screened-layer-2d";

    pub fn problem(&self) -> Problem {
        Problem::new(Dim::Two, c(1.0), c(self.sigma), c(0.0), c(1.0))
    }

    pub fn point(&self) -> Vec3 {
        Vec3::new2(self.radius, 0.0)
    }

    pub fn exact(&self) -> f64 {
        let k = self.sigma.sqrt();
        i0_scaled(k * self.radius) / i0_scaled(k) * (k * (self.radius - 1.0)).exp()
    }
}

// ---------------------------------------------------------------------------
// reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub label: String,
    pub axis_value: f64,
    pub point: Vec<f64>,
    pub n: u64,
    pub mean: f64,
    pub reference: Option<f64>,
    pub error: Option<f64>,
    /// Per-sample variance, except in the convergence study where it is the
    /// variance of the `n`-sample mean across replicates.
    pub variance: f64,
    pub std_error: f64,
    pub mean_steps: f64,
    pub mean_queries: f64,
    pub flagged: u64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub criterion: String,
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    fn new(criterion: &str, passed: bool, detail: String) -> Self {
        Self {
            criterion: criterion.into(),
            passed,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub study: String,
    pub problem: String,
    pub seed: u64,
    /// Name of the swept quantity: `n`, `epsilon`, `k`, `point`, ...
    pub axis: String,
    pub rows: Vec<StudyRow>,
    pub verdicts: Vec<Verdict>,
    pub wall_time: f64,
    pub settings: serde_json::Value,
}

impl StudyReport {
    pub fn passed(&self) -> bool {
        !self.verdicts.is_empty() && self.verdicts.iter().all(|v| v.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Verdict> {
        self.verdicts.iter().filter(|v| !v.passed)
    }

    pub fn write_json(&self, path: &Path) -> Result<(), HarnessError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f)?;
        f.flush()?;
        Ok(())
    }

    /// One line per row.
    pub fn write_csv(&self, path: &Path) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "label",
            "axis_value",
            "x",
            "y",
            "z",
            "n",
            "mean",
            "reference",
            "error",
            "variance",
            "std_error",
            "mean_steps",
            "mean_queries",
            "flagged",
            "wall_time",
        ])?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            let p = |k: usize| r.point.get(k).map(|v| v.to_string()).unwrap_or_default();
            w.write_record([
                r.label.clone(),
                r.axis_value.to_string(),
                p(0),
                p(1),
                p(2),
                r.n.to_string(),
                r.mean.to_string(),
                opt(r.reference),
                opt(r.error),
                r.variance.to_string(),
                r.std_error.to_string(),
                r.mean_steps.to_string(),
                r.mean_queries.to_string(),
                r.flagged.to_string(),
                r.wall_time.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn row(label: String, axis_value: f64, dim: Dim, est: &PointEstimate, reference: Option<f64>, wall_time: f64) -> StudyRow {
    let acc = &est.accumulator;
    StudyRow {
        label,
        axis_value,
        point: est.point.to_vec(dim),
        n: acc.n,
        mean: acc.mean,
        reference,
        error: reference.map(|r| acc.mean - r),
        variance: acc.variance(),
        std_error: acc.std_error(),
        mean_steps: est.stats.mean_steps(),
        mean_queries: est.stats.mean_queries(),
        flagged: est.flagged,
        wall_time,
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t0 = Instant::now();
    let out = f();
    (out, t0.elapsed().as_secs_f64())
}

fn settings_json<T: Serialize>(s: &T) -> serde_json::Value {
    serde_json::to_value(s).unwrap_or(serde_json::Value::Null)
}

fn fmt_point(p: Vec3, dim: Dim) -> String {
    let v: Vec<String> = p.to_vec(dim).iter().map(|x| format!("{x}")).collect();
    format!("({})", v.join(", "))
}

// ---------------------------------------------------------------------------
// unbiasedness

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnbiasednessSettings {
    pub estimators: Vec<Estimator>,
    pub spp: u64,
    pub seed: u64,
    /// Allowed error in combined standard errors.
    pub tolerance: f64,
    pub config: WalkConfig,
}

impl Default for UnbiasednessSettings {
    fn default() -> Self {
        Self {
            estimators: vec![Estimator::Dt, Estimator::Nf],
            spp: 100_000,
            seed: 1,
            tolerance: 3.0,
            config: WalkConfig::default(),
        }
    }
}

/// Means of each estimator at every probe point against the manufactured
/// solution, and pairwise between estimators.
pub fn unbiasedness_study(entry: &CatalogEntry, s: &UnbiasednessSettings, workers: Option<usize>) -> Result<StudyReport, HarnessError> {
    let t0 = Instant::now();
    let u = entry.reference_or_err()?;
    let prep = entry.prepare()?;
    let cfg = WalkConfig {
        epsilon: entry.epsilon,
        rng_seed: s.seed,
        ..s.config.clone()
    };
    let dim = entry.dim();
    let mut rows = Vec::new();
    let mut verdicts = Vec::new();
    let mut per_est = Vec::new();
    for &est in &s.estimators {
        let (res, wall) = timed(|| solve(prep.target(), &entry.points, s.spp, est, &cfg, workers));
        let res = res?;
        for (i, r) in res.iter().enumerate() {
            let want = u.value(r.point);
            let err = r.mean() - want;
            let se = r.std_error();
            let ok = err.abs() <= s.tolerance * se && r.flagged == 0;
            verdicts.push(Verdict::new(
                "unbiasedness",
                ok,
                format!("{est} at {}: error {err:.3e}, {:.2} SE, {} flagged", fmt_point(r.point, dim), err / se, r.flagged),
            ));
            rows.push(row(format!("{est} p{i}"), i as f64, dim, r, Some(want), wall / res.len() as f64));
        }
        per_est.push((est, res));
    }
    for a in 0..per_est.len() {
        for b in a + 1..per_est.len() {
            for (ra, rb) in per_est[a].1.iter().zip(&per_est[b].1) {
                let diff = ra.mean() - rb.mean();
                let se = ra.std_error().hypot(rb.std_error());
                verdicts.push(Verdict::new(
                    "unbiasedness",
                    diff.abs() <= s.tolerance * se,
                    format!("{} vs {} at {}: difference {diff:.3e}, {:.2} SE", per_est[a].0, per_est[b].0, fmt_point(ra.point, dim), diff / se),
                ));
            }
        }
    }
    Ok(StudyReport {
        study: StudyKind::Unbiasedness.to_string(),
        problem: entry.id.into(),
        seed: s.seed,
        axis: "point".into(),
        rows,
        verdicts,
        wall_time: t0.elapsed().as_secs_f64(),
        settings: settings_json(s),
    })
}

// ---------------------------------------------------------------------------
// convergence

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSettings {
    pub estimator: Estimator,
    /// Index into the entry's probe points.
    pub point: usize,
    pub ladder: Vec<u64>,
    pub replicates: u64,
    pub seed: u64,
    pub slope_min: f64,
    pub slope_max: f64,
    pub config: WalkConfig,
}

impl Default for ConvergenceSettings {
    fn default() -> Self {
        Self {
            estimator: Estimator::Dt,
            point: 1,
            ladder: vec![10, 100, 1000, 10_000],
            replicates: 256,
            seed: 2,
            slope_min: -1.1,
            slope_max: -0.9,
            config: WalkConfig::default(),
        }
    }
}

/// Sample values for stream indices `range` at one point, in index order.
pub fn sample_values(
    target: SolveTarget,
    estimator: Estimator,
    x: Vec3,
    point_index: u64,
    range: Range<u64>,
    cfg: &WalkConfig,
    workers: Option<usize>,
) -> Result<(Vec<f64>, StatsSummary), HarnessError> {
    cfg.validate()?;
    let chunks: Vec<Range<u64>> = (range.start..range.end)
        .step_by(BLOCK as usize)
        .map(|s| s..(s + BLOCK).min(range.end))
        .collect();
    let parts = run_pool(workers, || {
        chunks
            .par_iter()
            .map(|r| {
                let mut vals = Vec::with_capacity(r.clone().count());
                let mut stats = StatsSummary::default();
                for j in r.clone() {
                    let mut rng = sample_rng(cfg.rng_seed, point_index, j);
                    let (v, st) = estimate_once(target, estimator, x, cfg, &mut rng)?;
                    vals.push(v);
                    stats.add(&st);
                }
                Ok::<_, EstimatorError>((vals, stats))
            })
            .collect::<Vec<_>>()
    })?;
    let mut vals = Vec::with_capacity((range.end - range.start) as usize);
    let mut stats = StatsSummary::default();
    for p in parts {
        let (v, st) = p?;
        vals.extend(v);
        stats.merge(&st);
    }
    Ok((vals, stats))
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Variance of independent `N`-sample means across replicates, for each `N`
/// of the ladder, and its log-log slope against `N`.
pub fn convergence_study(entry: &CatalogEntry, s: &ConvergenceSettings, workers: Option<usize>) -> Result<StudyReport, HarnessError> {
    let t0 = Instant::now();
    if s.ladder.len() < 2 || s.replicates < 2 || s.ladder.contains(&0) {
        return Err(HarnessError::Invalid("convergence needs two ladder sizes and two replicates".into()));
    }
    let x = *entry.points.get(s.point).ok_or_else(|| HarnessError::Invalid(format!("no probe point {}", s.point)))?;
    let want = entry.reference_or_err()?.value(x);
    let prep = entry.prepare()?;
    let cfg = WalkConfig {
        epsilon: entry.epsilon,
        rng_seed: s.seed,
        ..s.config.clone()
    };
    let dim = entry.dim();
    let mut rows = Vec::new();
    let mut offset = 0;
    let mut last = EstimateAccumulator::default();
    for &n in &s.ladder {
        let total = n * s.replicates;
        let ((vals, stats), wall) = {
            let (r, w) = timed(|| sample_values(prep.target(), s.estimator, x, s.point as u64, offset..offset + total, &cfg, workers));
            (r?, w)
        };
        offset += total;
        let mut means = EstimateAccumulator::default();
        let mut pooled = EstimateAccumulator::default();
        for rep in vals.chunks(n as usize) {
            means.push(rep.iter().sum::<f64>() / n as f64);
            rep.iter().for_each(|&v| pooled.push(v));
        }
        let var = means.variance();
        rows.push(StudyRow {
            label: format!("n={n}"),
            axis_value: n as f64,
            point: x.to_vec(dim),
            n,
            mean: pooled.mean,
            reference: Some(want),
            error: Some(pooled.mean - want),
            variance: var,
            std_error: var.sqrt(),
            mean_steps: stats.mean_steps(),
            mean_queries: stats.mean_queries(),
            flagged: 0,
            wall_time: wall,
        });
        last = pooled;
    }
    let lx: Vec<f64> = rows.iter().map(|r| r.axis_value.ln()).collect();
    let ly: Vec<f64> = rows.iter().map(|r| r.variance.ln()).collect();
    let slope = fit_slope(&lx, &ly);
    let bias = last.mean - want;
    let verdicts = vec![
        Verdict::new(
            "monte-carlo-rate",
            slope >= s.slope_min && slope <= s.slope_max,
            format!("{}: slope {slope:.3}, want [{}, {}]", entry.id, s.slope_min, s.slope_max),
        ),
        Verdict::new(
            "monte-carlo-rate",
            bias.abs() <= 3.0 * last.std_error(),
            format!("{}: bias at largest n {bias:.3e}, {:.2} SE", entry.id, bias / last.std_error()),
        ),
    ];
    Ok(StudyReport {
        study: StudyKind::Convergence.to_string(),
        problem: entry.id.into(),
        seed: s.seed,
        axis: "n".into(),
        rows,
        verdicts,
        wall_time: t0.elapsed().as_secs_f64(),
        settings: settings_json(s),
    })
}

// ---------------------------------------------------------------------------
// epsilon shell

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSettings {
    pub ladder: Vec<f64>,
    pub spp: u64,
    pub seed: u64,
    pub sigma: f64,
    pub radius: f64,
    /// Required ratio between the errors at the largest and smallest ε.
    pub min_reduction: f64,
    /// Allowed ratio between the slowest and fastest wall time.
    pub max_time_ratio: f64,
    /// Run the SDE baseline at the same wall time as each WoS run.
    pub sde: bool,
    /// SDE samples as a fraction of the WoS samples; the step is chosen so
    /// the total time matches.
    pub sde_fraction: f64,
    pub sde_pilot_step: f64,
    pub sde_pilot_walks: u64,
}

impl Default for EpsilonSettings {
    fn default() -> Self {
        let layer = ScreenedLayer::default();
        Self {
            ladder: vec![1e-2, 3e-3, 1e-3, 3e-4, 1e-4],
            spp: 4_000_000,
            seed: 3,
            sigma: layer.sigma,
            radius: layer.radius,
            min_reduction: 2.0,
            max_time_ratio: 2.0,
            sde: true,
            sde_fraction: 0.1,
            sde_pilot_step: 1e-4,
            sde_pilot_walks: 4000,
        }
    }
}

/// Error of classic walk on spheres over an ε ladder, with common random
/// numbers across ε, and of the SDE baseline at matched wall time.
pub fn epsilon_bias_study(s: &EpsilonSettings, workers: Option<usize>) -> Result<StudyReport, HarnessError> {
    let t0 = Instant::now();
    if s.ladder.len() < 2 || s.ladder.windows(2).any(|w| w[1] >= w[0]) {
        return Err(HarnessError::Invalid("epsilon ladder must be decreasing with two entries".into()));
    }
    let layer = ScreenedLayer {
        sigma: s.sigma,
        radius: s.radius,
    };
    let x = layer.point();
    let want = layer.exact();
    let problem = layer.problem();
    let dim = Dim::Two;
    let mut rows = Vec::new();
    let mut wos = Vec::new();
    for &eps in &s.ladder {
        let prep = prepare(&problem, Scene::from_sdf(dim, &Sdf::sphere(Vec3::ZERO, 1.0), eps, None)?)?;
        let cfg = WalkConfig {
            epsilon: eps,
            rng_seed: s.seed,
            ..WalkConfig::default()
        };
        let (res, wall) = timed(|| solve(prep.target(), &[x], s.spp, Estimator::Classic, &cfg, workers));
        let res = res?;
        rows.push(row(format!("wos eps={eps}"), eps, dim, &res[0], Some(want), wall));
        wos.push((eps, res[0].mean() - want, res[0].std_error(), wall, prep));
    }
    let errs: Vec<f64> = wos.iter().map(|w| w.1.abs()).collect();
    let walls: Vec<f64> = wos.iter().map(|w| w.3).collect();
    let monotone = errs.windows(2).all(|w| w[1] <= w[0]);
    let reduction = errs[0] / errs[errs.len() - 1];
    let spread = walls.iter().cloned().fold(0.0, f64::max) / walls.iter().cloned().fold(f64::INFINITY, f64::min);
    let fmt_errs: Vec<String> = errs.iter().map(|e| format!("{e:.2e}")).collect();
    let mut verdicts = vec![
        Verdict::new("epsilon-bias", monotone, format!("|error| over the ladder: {}", fmt_errs.join(", "))),
        Verdict::new(
            "epsilon-bias",
            reduction >= s.min_reduction,
            format!("error reduction from largest to smallest epsilon {reduction:.2}x, want >= {}", s.min_reduction),
        ),
        Verdict::new(
            "epsilon-bias",
            spread < s.max_time_ratio,
            format!("wall time spread {spread:.2}x, want < {}", s.max_time_ratio),
        ),
    ];
    let smallest = &wos[wos.len() - 1];
    let bias_se = errs[errs.len() - 1] / smallest.2;
    verdicts.push(Verdict::new(
        "epsilon-bias",
        true,
        format!("smallest-epsilon error is {bias_se:.1} SE (informational)"),
    ));

    if s.sde {
        // pilot run for the cost per step
        let sde_n = ((s.spp as f64 * s.sde_fraction) as u64).max(2);
        let base = WalkConfig {
            max_steps: u64::MAX / 2,
            rng_seed: s.seed ^ 0x5de,
            ..WalkConfig::default()
        };
        let prep = &wos[0].4;
        let pilot_cfg = WalkConfig {
            sde_step: s.sde_pilot_step,
            ..base.clone()
        };
        let (pilot, pilot_wall) = timed(|| solve(prep.target(), &[x], s.sde_pilot_walks, Estimator::Sde, &pilot_cfg, workers));
        let pilot = pilot?;
        let per_step = pilot_wall / pilot[0].stats.steps.max(1) as f64;
        let exit_time = pilot[0].stats.mean_steps() * s.sde_pilot_step;
        for (eps, err, _, wall, _) in &wos {
            // steps per walk ≈ exit time / h
            let h = (exit_time * per_step * sde_n as f64 / wall).clamp(1e-9, 1e-1);
            let cfg = WalkConfig { sde_step: h, ..base.clone() };
            let (res, sde_wall) = timed(|| solve(prep.target(), &[x], sde_n, Estimator::Sde, &cfg, workers));
            let res = res?;
            let sde_err = res[0].mean() - want;
            rows.push(row(format!("sde h={h:.3e} matched to eps={eps}"), *eps, dim, &res[0], Some(want), sde_wall));
            verdicts.push(Verdict::new(
                "epsilon-bias",
                sde_err.abs() > err.abs(),
                format!(
                    "eps={eps}: SDE (h={h:.2e}, {sde_wall:.2}s) error {:.2e} vs WoS ({wall:.2}s) {:.2e}",
                    sde_err.abs(),
                    err.abs()
                ),
            ));
        }
    }
    Ok(StudyReport {
        study: StudyKind::EpsilonBias.to_string(),
        problem: ScreenedLayer::ID.into(),
        seed: s.seed,
        axis: "epsilon".into(),
        rows,
        verdicts,
        wall_time: t0.elapsed().as_secs_f64(),
        settings: settings_json(s),
    })
}

// ---------------------------------------------------------------------------
// distance queries

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryCountSettings {
    pub shifts: Vec<f64>,
    pub spp: u64,
    pub seed: u64,
    /// Allowed relative change of next-flight queries across shifts.
    pub flat_tolerance: f64,
    pub config: WalkConfig,
}

impl Default for QueryCountSettings {
    fn default() -> Self {
        Self {
            shifts: vec![0.0, 10.0, 40.0],
            spp: 5_000,
            seed: 4,
            flat_tolerance: 0.01,
            config: WalkConfig::default(),
        }
    }
}

/// Distance queries per walk of delta tracking and next flight on the
/// family `σ + k`.
pub fn query_count_study(entry: &CatalogEntry, s: &QueryCountSettings, workers: Option<usize>) -> Result<StudyReport, HarnessError> {
    let t0 = Instant::now();
    let dim = entry.dim();
    let mut rows = Vec::new();
    let mut per = Vec::new();
    for est in [Estimator::Dt, Estimator::Nf] {
        let mut q = Vec::new();
        for &k in &s.shifts {
            let shifted = entry.with_sigma_shift(k);
            let prep = shifted.prepare()?;
            let cfg = WalkConfig {
                epsilon: entry.epsilon,
                rng_seed: s.seed,
                ..s.config.clone()
            };
            let (res, wall) = timed(|| solve(prep.target(), &entry.points, s.spp, est, &cfg, workers));
            let res = res?;
            let mut total = StatsSummary::default();
            for (i, r) in res.iter().enumerate() {
                total.merge(&r.stats);
                rows.push(row(format!("{est} k={k} p{i}"), k, dim, r, shifted.reference(r.point), wall / res.len() as f64));
            }
            q.push(total.mean_queries());
        }
        per.push((est, q));
    }
    let list = |q: &[f64]| q.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(", ");
    let mut verdicts = Vec::new();
    for (est, q) in &per {
        match est {
            Estimator::Dt => verdicts.push(Verdict::new(
                "query-count",
                q.windows(2).all(|w| w[1] >= w[0]),
                format!("dt queries/walk over k: {}", list(q)),
            )),
            _ => {
                let spread = q.iter().cloned().fold(0.0, f64::max) / q.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;
                verdicts.push(Verdict::new(
                    "query-count",
                    spread <= s.flat_tolerance,
                    format!("nf queries/walk over k: {} (spread {:.3}%)", list(q), spread * 100.0),
                ));
            }
        }
    }
    Ok(StudyReport {
        study: StudyKind::QueryCount.to_string(),
        problem: entry.id.into(),
        seed: s.seed,
        axis: "k".into(),
        rows,
        verdicts,
        wall_time: t0.elapsed().as_secs_f64(),
        settings: settings_json(s),
    })
}

// ---------------------------------------------------------------------------
// weight window

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSettings {
    pub estimator: Estimator,
    pub window: WeightWindow,
    pub spp: u64,
    pub seed: u64,
    pub config: WalkConfig,
}

impl Default for WindowSettings {
    fn default() -> Self {
        Self {
            estimator: Estimator::Dt,
            window: WeightWindow { min: 0.1, max: 1.2 },
            spp: 40_000,
            seed: 5,
            config: WalkConfig::default(),
        }
    }
}

/// Paired runs with and without the weight window.
pub fn window_study(entry: &CatalogEntry, s: &WindowSettings, workers: Option<usize>) -> Result<StudyReport, HarnessError> {
    let t0 = Instant::now();
    let prep = entry.prepare()?;
    let dim = entry.dim();
    let base = WalkConfig {
        epsilon: entry.epsilon,
        rng_seed: s.seed,
        ..s.config.clone()
    };
    let with = WalkConfig {
        weight_window: Some(s.window),
        ..base.clone()
    };
    let (plain, w0) = timed(|| solve(prep.target(), &entry.points, s.spp, s.estimator, &base, workers));
    let (windowed, w1) = timed(|| solve(prep.target(), &entry.points, s.spp, s.estimator, &with, workers));
    let (plain, windowed) = (plain?, windowed?);
    let mut rows = Vec::new();
    let mut verdicts = Vec::new();
    let (mut v0, mut v1) = (0.0, 0.0);
    for (i, (a, b)) in plain.iter().zip(&windowed).enumerate() {
        let want = entry.reference(a.point);
        rows.push(row(format!("plain p{i}"), 0.0, dim, a, want, w0 / plain.len() as f64));
        rows.push(row(format!("window p{i}"), 1.0, dim, b, want, w1 / plain.len() as f64));
        let diff = b.mean() - a.mean();
        let se = a.std_error().hypot(b.std_error());
        verdicts.push(Verdict::new(
            "weight-window",
            diff.abs() <= 3.0 * se && a.flagged == 0 && b.flagged == 0,
            format!("mean shift at {}: {diff:.3e}, {:.2} SE", fmt_point(a.point, dim), diff / se),
        ));
        let (va, vb) = (a.accumulator.variance(), b.accumulator.variance());
        v0 += va;
        v1 += vb;
        log::info!("window p{i}: variance {va:.4e} -> {vb:.4e}");
    }
    verdicts.push(Verdict::new(
        "weight-window",
        v1 < v0,
        format!(
            "per-walk variance summed over points {v0:.4e} -> {v1:.4e} ({:.1}% lower), time {w0:.1}s -> {w1:.1}s",
            (1.0 - v1 / v0) * 100.0
        ),
    ));
    Ok(StudyReport {
        study: StudyKind::WeightWindow.to_string(),
        problem: entry.id.into(),
        seed: s.seed,
        axis: "window".into(),
        rows,
        verdicts,
        wall_time: t0.elapsed().as_secs_f64(),
        settings: settings_json(s),
    })
}

// ---------------------------------------------------------------------------
// gradient

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSettings {
    /// Number of leading probe points used.
    pub points: usize,
    pub spp: u64,
    pub seed: u64,
    pub tolerance: f64,
    pub config: WalkConfig,
}

impl Default for GradientSettings {
    fn default() -> Self {
        Self {
            points: 3,
            spp: 20_000,
            seed: 6,
            tolerance: 3.0,
            config: WalkConfig::default(),
        }
    }
}

/// Gradient estimates against the analytic gradient of the manufactured
/// solution. A constant solution must give exactly zero.
pub fn gradient_study(entry: &CatalogEntry, s: &GradientSettings, workers: Option<usize>) -> Result<StudyReport, HarnessError> {
    let t0 = Instant::now();
    let u = entry.reference_or_err()?;
    let prep = entry.prepare()?;
    let dim = entry.dim();
    let cfg = WalkConfig {
        epsilon: entry.epsilon,
        rng_seed: s.seed,
        ..s.config.clone()
    };
    let points: Vec<Vec3> = entry.points.iter().take(s.points.max(1)).copied().collect();
    let (res, wall) = timed(|| solve_gradient(prep.target(), &points, s.spp, &cfg, workers));
    let res = res?;
    let constant = u.is_constant();
    let mut rows = Vec::new();
    let mut verdicts = Vec::new();
    for (i, g) in res.iter().enumerate() {
        let want = u.gradient(g.point, dim);
        let (mean, se) = (g.mean(), g.std_error());
        for k in 0..dim.get() {
            let acc = &g.components[k];
            rows.push(StudyRow {
                label: format!("p{i} d{k}"),
                axis_value: i as f64,
                point: g.point.to_vec(dim),
                n: acc.n,
                mean: acc.mean,
                reference: Some(want[k]),
                error: Some(acc.mean - want[k]),
                variance: acc.variance(),
                std_error: se[k],
                mean_steps: g.stats.mean_steps(),
                mean_queries: g.stats.mean_queries(),
                flagged: g.flagged,
                wall_time: wall / res.len() as f64,
            });
        }
        let at = fmt_point(g.point, dim);
        if constant {
            let exact = (0..dim.get()).all(|k| g.components[k].mean == 0.0 && g.components[k].variance() == 0.0);
            verdicts.push(Verdict::new(
                "gradient",
                exact && g.flagged == 0,
                format!("constant solution at {at}: mean {:?}, every sample zero: {exact}", mean.to_vec(dim)),
            ));
        } else {
            let z: Vec<f64> = (0..dim.get()).map(|k| (mean[k] - want[k]) / se[k]).collect();
            let ok = z.iter().all(|v| v.abs() <= s.tolerance) && g.flagged == 0;
            let zs: Vec<String> = z.iter().map(|v| format!("{v:.2}")).collect();
            verdicts.push(Verdict::new(
                "gradient",
                ok,
                format!("{} at {at}: estimate {:?} vs {:?}, errors in SE [{}]", entry.id, fmt3(mean, dim), fmt3(want, dim), zs.join(", ")),
            ));
        }
    }
    Ok(StudyReport {
        study: StudyKind::Gradient.to_string(),
        problem: entry.id.into(),
        seed: s.seed,
        axis: "point".into(),
        rows,
        verdicts,
        wall_time: t0.elapsed().as_secs_f64(),
        settings: settings_json(s),
    })
}

fn fmt3(v: Vec3, dim: Dim) -> Vec<String> {
    v.to_vec(dim).iter().map(|x| format!("{x:.4}")).collect()
}

// ---------------------------------------------------------------------------
// dispatch

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    Unbiasedness,
    Convergence,
    EpsilonBias,
    QueryCount,
    WeightWindow,
    Gradient,
}

impl StudyKind {
    pub const ALL: [StudyKind; 6] = [
        StudyKind::Unbiasedness,
        StudyKind::Convergence,
        StudyKind::EpsilonBias,
        StudyKind::QueryCount,
        StudyKind::WeightWindow,
        StudyKind::Gradient,
    ];

    /// Problem used when none is given.
    pub fn default_problem(self) -> &'static str {
        match self {
            StudyKind::EpsilonBias => ScreenedLayer::ID,
            StudyKind::QueryCount => "variable-sigma-2d",
            StudyKind::WeightWindow => "high-sigma-2d",
            _ => "smooth-alpha-2d",
        }
    }
}

impl fmt::Display for StudyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StudyKind::Unbiasedness => "unbiasedness",
            StudyKind::Convergence => "convergence",
            StudyKind::EpsilonBias => "epsilon-bias",
            StudyKind::QueryCount => "query-count",
            StudyKind::WeightWindow => "weight-window",
            StudyKind::Gradient => "gradient",
        })
    }
}

impl FromStr for StudyKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, HarnessError> {
        StudyKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| HarnessError::UnknownStudy(s.into()))
    }
}

/// Settings a front end may override; `None` keeps the study default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StudyOverrides {
    pub problem: Option<String>,
    pub spp: Option<u64>,
    pub seed: Option<u64>,
    pub estimator: Option<Estimator>,
    pub window: Option<WeightWindow>,
    pub sigma_bar: Option<f64>,
}

/// Runs a study with its default settings plus `o`.
pub fn run_study(kind: StudyKind, o: &StudyOverrides, workers: Option<usize>) -> Result<StudyReport, HarnessError> {
    let seed = |d: u64| o.seed.unwrap_or(d);
    let config = WalkConfig {
        sigma_bar_override: o.sigma_bar,
        ..WalkConfig::default()
    };
    let entry = || catalog_entry(o.problem.as_deref().unwrap_or(kind.default_problem()));
    match kind {
        StudyKind::Unbiasedness => {
            let d = UnbiasednessSettings::default();
            let s = UnbiasednessSettings {
                estimators: o.estimator.map(|e| vec![e]).unwrap_or(d.estimators),
                spp: o.spp.unwrap_or(d.spp),
                seed: seed(d.seed),
                config,
                ..d
            };
            unbiasedness_study(&entry()?, &s, workers)
        }
        StudyKind::Convergence => {
            let d = ConvergenceSettings::default();
            let mut s = ConvergenceSettings {
                estimator: o.estimator.unwrap_or(d.estimator),
                seed: seed(d.seed),
                config,
                ..d
            };
            // --spp sets the largest ladder size
            if let Some(n) = o.spp {
                s.ladder = s.ladder.iter().map(|&m| (m * n / 10_000).max(1)).collect();
            }
            convergence_study(&entry()?, &s, workers)
        }
        StudyKind::EpsilonBias => {
            if let Some(p) = &o.problem {
                if p != ScreenedLayer::ID {
                    return Err(HarnessError::Invalid(format!("epsilon-bias runs on {} only", ScreenedLayer::ID)));
                }
            }
            let d = EpsilonSettings::default();
            let s = EpsilonSettings {
                spp: o.spp.unwrap_or(d.spp),
                seed: seed(d.seed),
                ..d
            };
            epsilon_bias_study(&s, workers)
        }
        StudyKind::QueryCount => {
            let d = QueryCountSettings::default();
            let s = QueryCountSettings {
                spp: o.spp.unwrap_or(d.spp),
                seed: seed(d.seed),
                config,
                ..d
            };
            query_count_study(&entry()?, &s, workers)
        }
        StudyKind::WeightWindow => {
            let d = WindowSettings::default();
            let s = WindowSettings {
                estimator: o.estimator.unwrap_or(d.estimator),
                window: o.window.unwrap_or(d.window),
                spp: o.spp.unwrap_or(d.spp),
                seed: seed(d.seed),
                config,
            };
            window_study(&entry()?, &s, workers)
        }
        StudyKind::Gradient => {
            let d = GradientSettings::default();
            let s = GradientSettings {
                spp: o.spp.unwrap_or(d.spp),
                seed: seed(d.seed),
                config,
                ..d
            };
            gradient_study(&entry()?, &s, workers)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specfun::bessel_i;

    #[test]
    fn catalog_is_well_formed() {
        let cat = catalog();
        assert_eq!(cat.len(), 6);
        let mut ids: Vec<_> = cat.iter().map(|e| e.id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 6);
        assert!(cat.iter().any(|e| e.dim() == Dim::Three));
        assert!(cat.iter().any(|e| e.problem.gamma_omega.is_some()));
        for e in &cat {
            let prep = e.prepare().unwrap();
            assert_eq!(e.points.len(), 5);
            for &p in &e.points {
                assert!(prep.scene.signed_distance(p) < -0.05, "{} {:?}", e.id, p);
                assert!(e.reference(p).unwrap().is_finite());
            }
            assert!(prep.transformed.sigma_kernel() > 0.0);
        }
    }

    #[test]
    fn high_sigma_entry_has_negative_transformed_screening() {
        // null weights exceed one there, which is what the window acts on
        let prep = catalog_entry("high-sigma-2d").unwrap().prepare().unwrap();
        assert!(prep.transformed.sigma_prime_min() < 0.0);
        assert!(prep.transformed.sigma_prime_max() >= 10.0);
    }

    #[test]
    fn lookup_by_id() {
        assert_eq!(catalog_entry("drift-3d").unwrap().dim(), Dim::Three);
        assert!(catalog_entry("constant-2d").is_ok());
        assert!(matches!(catalog_entry("nope"), Err(HarnessError::UnknownProblem(_))));
        assert!(matches!("nope".parse::<StudyKind>(), Err(HarnessError::UnknownStudy(_))));
        for k in StudyKind::ALL {
            assert_eq!(k.to_string().parse::<StudyKind>().unwrap(), k);
        }
    }

    #[test]
    fn screened_layer_solution() {
        let l = ScreenedLayer { sigma: 9.0, radius: 0.4 };
        let want = bessel_i(0, 3.0 * 0.4).unwrap() / bessel_i(0, 3.0).unwrap();
        assert!((l.exact() - want).abs() < 1e-14);
        let big = ScreenedLayer::default().exact();
        assert!(big > 0.0 && big < 1e-2);
    }

    #[test]
    fn slope_of_power_law() {
        let x: Vec<f64> = [10.0f64, 100.0, 1000.0].iter().map(|v| v.ln()).collect();
        let y: Vec<f64> = [10.0f64, 100.0, 1000.0].iter().map(|v| (3.0 / v).ln()).collect();
        assert!((fit_slope(&x, &y) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn small_unbiasedness_study_reports_every_point() {
        let e = catalog_entry("variable-sigma-2d").unwrap();
        let s = UnbiasednessSettings {
            spp: 2000,
            ..UnbiasednessSettings::default()
        };
        let r = unbiasedness_study(&e, &s, None).unwrap();
        assert_eq!(r.rows.len(), 10);
        // 10 point checks and 5 cross checks
        assert_eq!(r.verdicts.len(), 15);
        assert!(r.verdicts.iter().all(|v| v.criterion == "unbiasedness"));
        let again = unbiasedness_study(&e, &s, Some(2)).unwrap();
        let strip = |r: &StudyReport| r.rows.iter().map(|x| (x.mean, x.variance, x.n)).collect::<Vec<_>>();
        assert_eq!(strip(&r), strip(&again));
    }

    #[test]
    fn constant_solution_gradient_is_exactly_zero() {
        let s = GradientSettings {
            spp: 300,
            ..GradientSettings::default()
        };
        let r = gradient_study(&constant_solution(), &s, None).unwrap();
        assert!(r.passed(), "{:?}", r.verdicts);
    }

    #[test]
    fn sample_values_match_solve() {
        let e = catalog_entry("smooth-alpha-2d").unwrap();
        let prep = e.prepare().unwrap();
        let cfg = WalkConfig { rng_seed: 9, ..WalkConfig::default() };
        let (vals, _) = sample_values(prep.target(), Estimator::Dt, e.points[0], 0, 0..600, &cfg, None).unwrap();
        let res = solve(prep.target(), &e.points[..1], 600, Estimator::Dt, &cfg, None).unwrap();
        let mean = vals.iter().sum::<f64>() / 600.0;
        assert!((mean - res[0].mean()).abs() < 1e-12);
    }

    #[test]
    fn report_files_round_trip() {
        let e = catalog_entry("variable-sigma-2d").unwrap();
        let s = UnbiasednessSettings {
            spp: 300,
            estimators: vec![Estimator::Dt],
            ..UnbiasednessSettings::default()
        };
        let r = unbiasedness_study(&e, &s, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.write_json(&dir.path().join("r.json")).unwrap();
        r.write_csv(&dir.path().join("r.csv")).unwrap();
        let back: StudyReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
        assert_eq!(back, r);
        let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + r.rows.len());
    }
}
