//! Acceptance suite: one PASS/FAIL line per criterion, with its runtime
//! against the limit.
//!
//! Run with `cargo test -p wos-cli --test acceptance`. Numeric arguments
//! select criteria (`-- 1 4 12`). Failures are reported without failing the
//! run unless `WOS_ACCEPTANCE_STRICT=1` is set.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wos_cli::{run_solve, BoundarySpec, OutputSpec, SceneConfig, Target};
use wos_core::coefficients::{sigma_prime_sqrt_form, stratified_probes};
use wos_core::harness::{
    constant_solution, convergence_study, epsilon_bias_study, gradient_study, query_count_study, unbiasedness_study, window_study, ConvergenceSettings,
    EpsilonSettings, GradientSettings, QueryCountSettings, UnbiasednessSettings, WindowSettings,
};
use wos_core::kernels::{envelope_bound, envelope_violations, BallKernel};
use wos_core::{catalog, catalog_entry, transform, Dim, Estimator, ProbeOptions, Problem, ScalarField, StudyReport, TransformedProblem, Vec3};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

type Check = fn() -> Outcome;

const CRITERIA: [(u32, &str, u64, Check); 12] = [
    (1, "kernel mass identity", 1, kernel_identity),
    (2, "off-centered kernels at the center", 10, offcentered_at_center),
    (3, "gradient kernels vs finite differences", 5, gradient_kernels),
    (4, "radial sampling histogram and envelope", 60, sampling),
    (5, "unbiasedness on the catalog", 600, unbiasedness),
    (6, "Monte Carlo rate", 300, monte_carlo_rate),
    (7, "epsilon-shell bias", 600, epsilon_bias),
    (8, "distance-query trends", 300, query_trends),
    (9, "weight window", 300, weight_window),
    (10, "gradient estimator", 300, gradient_estimator),
    (11, "transform algebra", 1, transform_algebra),
    (12, "determinism across worker counts", 60, determinism),
];

fn main() -> ExitCode {
    let picked: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let strict = std::env::var("WOS_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut failed = Vec::new();
    let mut ran = 0;
    for (id, name, limit, check) in CRITERIA {
        if !picked.is_empty() && !picked.contains(&id) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let o = check();
        let took = start.elapsed();
        let in_time = took <= Duration::from_secs(limit);
        let ok = o.passed && in_time;
        if !ok {
            failed.push(id);
        }
        let time_note = if in_time { "" } else { ", over the time limit" };
        println!(
            "criterion {id:>2} {} {name}: {} ({:.2}s, limit {limit}s{time_note})",
            if ok { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64()
        );
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed.len());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
    }
    if strict && !failed.is_empty() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn random_inside(dim: Dim, radius: f64, rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let mut v = Vec3::ZERO;
        for k in 0..dim.get() {
            v[k] = rng.random_range(-1.0..1.0);
        }
        if v.norm() < 1.0 {
            return v * radius;
        }
    }
}

fn report_lines(r: &StudyReport) -> String {
    let failed: Vec<&str> = r.failures().map(|v| v.detail.as_str()).collect();
    if failed.is_empty() {
        format!("{}: {} verdicts pass", r.problem, r.verdicts.len())
    } else {
        format!("{}: {} of {} verdicts fail: {}", r.problem, failed.len(), r.verdicts.len(), failed.join("; "))
    }
}

fn kernel_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    for dim in [Dim::Two, Dim::Three] {
        for radius in [0.1, 1.0, 10.0] {
            for sigma in [0.0, 1e-12, 0.5, 2.0, 20.0] {
                let k = BallKernel::new(dim, Vec3::ZERO, radius, sigma).unwrap();
                let total = k.poisson_centered() * k.surface_area() + sigma * k.green_norm();
                worst = worst.max((total - 1.0).abs());
            }
        }
    }
    outcome(worst < 1e-10, format!("max |P·|∂B| + σ|G| − 1| = {worst:.2e} over 30 configurations"))
}

fn offcentered_at_center() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for dim in [Dim::Two, Dim::Three] {
        for radius in [0.5, 1.0, 2.0] {
            for sigma in [0.0, 0.5, 2.0, 20.0] {
                let c = random_inside(dim, 3.0, &mut rng);
                let k = BallKernel::new(dim, c, radius, sigma).unwrap();
                for _ in 0..5 {
                    let y = c + random_inside(dim, radius, &mut rng);
                    let g = k.green_centered((y - c).norm()).unwrap();
                    worst = worst.max(rel(k.green_offcentered_series(c, y, 200).unwrap(), g));
                    worst = worst.max(rel(k.green_offcentered_approx(c, y).unwrap(), g));
                    worst = worst.max(rel(k.green_offcentered(c, y).unwrap(), g));
                    let z = k.sample_sphere(&mut rng);
                    let p = k.poisson_centered();
                    worst = worst.max(rel(k.poisson_offcentered_series(c, z, 200).unwrap(), p));
                    worst = worst.max(rel(k.poisson_offcentered_approx(c, z).unwrap(), p));
                    worst = worst.max(rel(k.poisson_offcentered(c, z).unwrap(), p));
                }
            }
        }
    }
    outcome(worst < 1e-8, format!("max relative difference {worst:.2e} (series, approximate and exact G and P against the centered forms)"))
}

fn gradient_kernels() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let dim = if case % 2 == 0 { Dim::Two } else { Dim::Three };
        let sigma = [0.0, 0.5, 2.0, 20.0][case % 4];
        let radius = [0.5, 1.0, 2.0][case % 3];
        let k = BallKernel::new(dim, Vec3::ZERO, radius, sigma).unwrap();
        let mut y = random_inside(dim, 0.9 * radius, &mut rng);
        while y.norm() < 0.1 * radius {
            y = random_inside(dim, 0.9 * radius, &mut rng);
        }
        let z = k.sample_sphere(&mut rng);
        let gg = k.green_gradient_centered(y).unwrap();
        let pg = k.poisson_gradient_centered(z).unwrap();
        for axis in 0..dim.get() {
            let e = Vec3::axis(axis) * h;
            let fd_g = (k.green_offcentered(e, y).unwrap() - k.green_offcentered(-e, y).unwrap()) / (2.0 * h);
            let fd_p = (k.poisson_offcentered(e, z).unwrap() - k.poisson_offcentered(-e, z).unwrap()) / (2.0 * h);
            worst = worst.max((gg[axis] - fd_g).abs() / gg.norm());
            worst = worst.max((pg[axis] - fd_p).abs() / pg.norm());
        }
    }
    outcome(worst < 1e-5, format!("max relative deviation {worst:.2e} at 20 configurations"))
}

fn sampling() -> Outcome {
    let n = 1_000_000;
    let bins = 50;
    let tol = 4.0 / (n as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst: f64 = 0.0;
    for dim in [Dim::Two, Dim::Three] {
        for (radius, sigma) in [(1.0, 0.0), (1.0, 4.0), (0.5, 400.0)] {
            let k = BallKernel::new(dim, Vec3::ZERO, radius, sigma).unwrap();
            let mut hist = vec![0u64; bins];
            for _ in 0..n {
                let (y, _) = k.sample_green_centered(&mut rng).unwrap();
                hist[((y.norm() / radius * bins as f64) as usize).min(bins - 1)] += 1;
            }
            for (b, &count) in hist.iter().enumerate() {
                let m = 200;
                let width = radius / bins as f64;
                let expected: f64 = (0..m).map(|j| k.radial_density(width * (b as f64 + (j as f64 + 0.5) / m as f64))).sum::<f64>() * width / m as f64;
                worst = worst.max((count as f64 / n as f64 - expected).abs());
            }
        }
    }
    let mut scan_ok = true;
    for dim in [Dim::Two, Dim::Three] {
        for radius in [1e-3, 0.01, 0.1, 0.5, 1.0, 3.0, 10.0, 100.0] {
            for sigma in [0.0, 1e-3, 0.1, 1.0, 10.0, 100.0, 1e4] {
                let k = BallKernel::new(dim, Vec3::ZERO, radius, sigma).unwrap();
                let h = envelope_bound(radius, sigma);
                scan_ok &= (1..2000).all(|j| k.radial_density(radius * j as f64 / 2000.0) <= h);
            }
        }
    }
    let violations = envelope_violations();
    outcome(
        worst < tol && scan_ok && violations == 0,
        format!("max bin deviation {worst:.2e} (limit {tol:.1e}) over 6 kernels at N = 1e6; envelope scan {}; {violations} runtime violations", if scan_ok { "clean" } else { "exceeded" }),
    )
}

fn unbiasedness() -> Outcome {
    let s = UnbiasednessSettings::default();
    let mut misses = Vec::new();
    let mut checks = 0;
    let mut cross = Vec::new();
    for entry in catalog() {
        let r = unbiasedness_study(&entry, &s, None).unwrap();
        for row in &r.rows {
            checks += 1;
            let (err, se) = (row.error.unwrap(), row.std_error);
            if !(err.abs() <= 3.0 * se) || row.flagged > 0 {
                misses.push(format!("{} {} at {:?}: {:+.2} SE", entry.id, row.label, row.point, err / se));
            }
        }
        cross.extend(r.failures().filter(|v| v.detail.contains(" vs ")).map(|v| format!("{}: {}", entry.id, v.detail)));
    }
    let mut detail = format!("{}/{checks} estimator-point means within 3 SE of the reference at N = {}", checks - misses.len(), s.spp);
    if !misses.is_empty() {
        detail += &format!("; outside: {}", misses.join(", "));
    }
    if !cross.is_empty() {
        detail += &format!("; cross-estimator notes: {}", cross.join(", "));
    }
    outcome(misses.is_empty(), detail)
}

fn monte_carlo_rate() -> Outcome {
    let s = ConvergenceSettings::default();
    let mut parts = Vec::new();
    let mut ok = true;
    for id in ["smooth-alpha-2d", "variable-sigma-2d"] {
        let r = convergence_study(&catalog_entry(id).unwrap(), &s, None).unwrap();
        ok &= r.passed();
        parts.push(report_lines(&r));
        let slope = r.verdicts.iter().find(|v| v.detail.contains("slope")).map(|v| v.detail.clone()).unwrap_or_default();
        parts.push(slope);
    }
    outcome(ok, parts.join("; "))
}

fn epsilon_bias() -> Outcome {
    let r = epsilon_bias_study(&EpsilonSettings::default(), None).unwrap();
    let lines: Vec<String> = r.verdicts.iter().take(3).map(|v| v.detail.clone()).collect();
    let sde_fails = r.failures().filter(|v| v.detail.contains("SDE")).count();
    outcome(r.passed(), format!("{}; SDE more biased at matched time on {}/{} ladder steps", lines.join("; "), r.rows.len() / 2 - sde_fails, r.rows.len() / 2))
}

fn query_trends() -> Outcome {
    let r = query_count_study(&catalog_entry("variable-sigma-2d").unwrap(), &QueryCountSettings::default(), None).unwrap();
    let details: Vec<String> = r.verdicts.iter().map(|v| v.detail.clone()).collect();
    outcome(r.passed(), details.join("; "))
}

fn weight_window() -> Outcome {
    let r = window_study(&catalog_entry("high-sigma-2d").unwrap(), &WindowSettings::default(), None).unwrap();
    let var = r.verdicts.iter().find(|v| v.detail.contains("variance")).map(|v| v.detail.clone()).unwrap_or_default();
    outcome(r.passed(), format!("{}; {var}", report_lines(&r)))
}

fn gradient_estimator() -> Outcome {
    let s = GradientSettings::default();
    let mut ok = true;
    let mut parts = Vec::new();
    for entry in [catalog_entry("smooth-alpha-2d").unwrap(), catalog_entry("variable-sigma-2d").unwrap(), constant_solution()] {
        let r = gradient_study(&entry, &s, None).unwrap();
        ok &= r.passed();
        parts.push(report_lines(&r));
    }
    outcome(ok, parts.join("; "))
}

/// `ΔU − σ′U` and `e^γ/α · (∇·(α∇u) + ω·∇u − σu)` with `U = e^γ u`, both by
/// finite differences.
fn substitution(p: &Problem, t: &TransformedProblem, u: &ScalarField, x: Vec3) -> (f64, f64) {
    let big_u = |y: Vec3| t.gamma(y).exp() * u.value(y);
    let h = 1e-4;
    let (mut lap, mut div) = (0.0, 0.0);
    let mut grad = Vec3::ZERO;
    for a in 0..p.dim.get() {
        let e = Vec3::axis(a) * h;
        lap += (big_u(x + e) - 2.0 * big_u(x) + big_u(x - e)) / (h * h);
        let flux = |y: Vec3| p.alpha.value(y) * (u.value(y + e * 0.5) - u.value(y - e * 0.5)) / h;
        div += (flux(x + e * 0.5) - flux(x - e * 0.5)) / h;
        let d = Vec3::axis(a) * 1e-6;
        grad[a] = (u.value(x + d) - u.value(x - d)) / 2e-6;
    }
    let lhs = lap - t.sigma_prime(x) * big_u(x);
    let rhs = t.gamma(x).exp() / p.alpha.value(x) * (div + p.drift(x).dot(grad) - p.sigma.value(x) * u.value(x));
    (lhs, rhs)
}

fn transform_algebra() -> Outcome {
    let (mut form, mut subst): (f64, f64) = (0.0, 0.0);
    for entry in catalog() {
        let scene = entry.scene().unwrap();
        let probes = ProbeOptions { count: 256, ..ProbeOptions::default() };
        let points = stratified_probes(&scene, 20, 24);
        let mut plain = entry.problem.clone();
        plain.gamma_omega = None;
        plain.omega = None;
        let tp = transform(&plain, &scene, &probes).unwrap();
        let t = transform(&entry.problem, &scene, &probes).unwrap();
        let u = entry.problem.reference_solution().unwrap();
        for &x in points.iter().take(20) {
            let b = sigma_prime_sqrt_form(&plain, x);
            form = form.max((tp.sigma_prime(x) - b).abs() / (1.0 + b.abs()));
            let (l, r) = substitution(&entry.problem, &t, u, x);
            subst = subst.max((l - r).abs() / (1.0 + r.abs()));
        }
    }
    outcome(
        form < 1e-10 && subst < 1e-5,
        format!("σ′ forms differ by {form:.2e} (limit 1e-10), substitution residual {subst:.2e} (limit 1e-5), 20 points per catalog problem"),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for (id, estimator) in [("oscillating-alpha-2d", Estimator::Dt), ("high-sigma-2d", Estimator::Nf)] {
        let entry = catalog_entry(id).unwrap();
        for workers in [1, 2, 4] {
            let out = dir.path().join(format!("{id}-{workers}"));
            let cfg = SceneConfig {
                problem: entry.problem.clone(),
                boundary: BoundarySpec::Sdf(entry.boundary.clone()),
                epsilon: entry.epsilon,
                estimator,
                spp: 200,
                seed: 12,
                sigma_bar: None,
                weight_window: None,
                max_steps: None,
                off_centered: Default::default(),
                nf_interior: Default::default(),
                gradient: false,
                mask_exterior: true,
                target: Target::Grid {
                    origin: Vec3::new2(-1.0, -1.0),
                    u: Vec3::new2(2.0, 0.0),
                    v: Vec3::new2(0.0, 2.0),
                    resolution: [16, 16],
                },
                output: OutputSpec { dir: out.clone(), name: "grid".into() },
            };
            run_solve(&cfg, Some(workers)).unwrap();
            runs.push((id, workers, std::fs::read(out.join("grid.csv")).unwrap()));
        }
    }
    let same = |id: &str| {
        let v: Vec<&Vec<u8>> = runs.iter().filter(|r| r.0 == id).map(|r| &r.2).collect();
        v.windows(2).all(|w| w[0] == w[1])
    };
    let ok = same("oscillating-alpha-2d") && same("high-sigma-2d");
    let bytes = runs.iter().map(|r| r.2.len()).sum::<usize>();
    outcome(ok, format!("CSV bytes identical for 1, 2 and 4 workers on two problems (DT and NF, {bytes} bytes compared): {ok}"))
}
