//! Batch front end for `wos-core`: evaluates a scene file on a grid or a
//! point list and writes CSV, PFM, PGM and a JSON summary, or runs one of
//! the harness studies.

pub mod config;
pub mod output;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;
use wos_core::{
    solve, solve_gradient, transform, CoefficientError, Estimator, EstimatorError, GeometryError, HarnessError, ProbeOptions, SolveTarget, StatsSummary,
    StudyKind, StudyOverrides, StudyReport, Vec3,
};

pub use config::{BoundarySpec, OutputSpec, Overrides, SceneConfig, Target};
pub use output::Row;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid scene file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Config(String),
    #[error("point ({}, {}, {}) is outside the domain; use --mask-exterior to skip such points", .0.x, .0.y, .0.z)]
    Outside(Vec3),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Coefficient(#[from] CoefficientError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }
}

/// Contents of the JSON run summary.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub config: SceneConfig,
    pub seed: u64,
    pub estimator: Estimator,
    pub spp: u64,
    pub points: usize,
    pub masked: usize,
    /// Samples dropped because the walk failed.
    pub flagged: u64,
    pub sigma_kernel: f64,
    pub sigma_prime_range: [f64; 2],
    pub totals: StatsSummary,
    pub wall_time: f64,
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub summary: RunSummary,
    /// Evaluated points in target order, masked points excluded.
    pub rows: Vec<Row>,
}

/// Evaluates the scene and writes its outputs under `config.output.dir`.
pub fn run_solve(config: &SceneConfig, workers: Option<usize>) -> Result<SolveOutcome, CliError> {
    let start = Instant::now();
    config.validate()?;
    let scene = config.scene()?;
    let all = config.target.points();
    let inside: Vec<bool> = all.iter().map(|&p| scene.distance_to_boundary(p).is_ok()).collect();
    if !config.mask_exterior {
        if let Some(i) = inside.iter().position(|ok| !ok) {
            return Err(CliError::Outside(all[i]));
        }
    }
    let points: Vec<Vec3> = all.iter().zip(&inside).filter(|(_, ok)| **ok).map(|(p, _)| *p).collect();
    if points.is_empty() {
        return Err(CliError::Config("no evaluation point lies inside the domain".into()));
    }

    let probes = ProbeOptions { extra_points: points.clone(), ..ProbeOptions::default() };
    let transformed = transform(&config.problem, &scene, &probes)?;
    let mut cfg = config.walk_config();
    if matches!(config.estimator, Estimator::Dt | Estimator::Nf) {
        cfg.gradient_inner = config.estimator;
    }
    let target = SolveTarget { scene: &scene, transformed: &transformed };

    let mut totals = StatsSummary::default();
    let mut flagged = 0;
    let rows: Vec<Row> = if config.gradient {
        let est = solve_gradient(target, &points, config.spp, &cfg, workers)?;
        est.iter()
            .map(|e| {
                totals.merge(&e.stats);
                flagged += e.flagged;
                Row {
                    point: e.point,
                    mean: e.value.mean,
                    std_error: e.value.std_error(),
                    n: e.value.n,
                    avg_steps: e.stats.mean_steps(),
                    avg_queries: e.stats.mean_queries(),
                    gradient: Some((e.mean(), e.std_error())),
                }
            })
            .collect()
    } else {
        let est = solve(target, &points, config.spp, config.estimator, &cfg, workers)?;
        est.iter()
            .map(|e| {
                totals.merge(&e.stats);
                flagged += e.flagged;
                Row {
                    point: e.point,
                    mean: e.mean(),
                    std_error: e.std_error(),
                    n: e.accumulator.n,
                    avg_steps: e.stats.mean_steps(),
                    avg_queries: e.stats.mean_queries(),
                    gradient: None,
                }
            })
            .collect()
    };

    let out = &config.output;
    std::fs::create_dir_all(&out.dir).map_err(|e| CliError::io(&out.dir, e))?;
    let file = |ext: &str| out.dir.join(format!("{}.{ext}", out.name));
    let mut files = Vec::new();

    let csv_path = file("csv");
    output::write_csv(&csv_path, config.dim(), &rows, config.gradient)?;
    files.push(csv_path);

    if let Some((nx, ny)) = config.target.grid_shape() {
        let mut image = vec![f32::NAN; nx * ny];
        let mut grad = vec![f32::NAN; 3 * nx * ny];
        let mut it = rows.iter();
        for (k, ok) in inside.iter().enumerate() {
            if !ok {
                continue;
            }
            let r = it.next().expect("one row per interior point");
            image[k] = r.mean as f32;
            if let Some((g, _)) = r.gradient {
                for c in 0..3 {
                    grad[3 * k + c] = g[c] as f32;
                }
            }
        }
        let pfm = file("pfm");
        output::write_pfm(&pfm, nx, ny, 1, &image)?;
        files.push(pfm);
        let pgm = file("pgm");
        output::write_pgm(&pgm, nx, ny, &image)?;
        files.push(pgm);
        if config.gradient {
            let gp = out.dir.join(format!("{}_gradient.pfm", out.name));
            output::write_pfm(&gp, nx, ny, 3, &grad)?;
            files.push(gp);
        }
    }

    let json_path = file("json");
    files.push(json_path.clone());
    let summary = RunSummary {
        config: config.clone(),
        seed: config.seed,
        estimator: config.estimator,
        spp: config.spp,
        points: points.len(),
        masked: all.len() - points.len(),
        flagged,
        sigma_kernel: cfg.sigma_bar_override.unwrap_or(transformed.sigma_kernel()),
        sigma_prime_range: [transformed.sigma_prime_min(), transformed.sigma_prime_max()],
        totals,
        wall_time: start.elapsed().as_secs_f64(),
        files,
    };
    let text = serde_json::to_string_pretty(&summary)?;
    std::fs::write(&json_path, text).map_err(|e| CliError::io(&json_path, e))?;
    Ok(SolveOutcome { summary, rows })
}

/// Runs a harness study and writes `<study>.json` and `<study>.csv` under
/// `out_dir`. The caller maps [`StudyReport::passed`] to the exit status.
pub fn run_study(name: &str, overrides: &StudyOverrides, out_dir: &Path, workers: Option<usize>) -> Result<(StudyReport, Vec<PathBuf>), CliError> {
    let kind: StudyKind = name.parse()?;
    let report = wos_core::run_study(kind, overrides, workers)?;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let json = out_dir.join(format!("{kind}.json"));
    let csv = out_dir.join(format!("{kind}.csv"));
    report.write_json(&json)?;
    report.write_csv(&csv)?;
    Ok((report, vec![json, csv]))
}
