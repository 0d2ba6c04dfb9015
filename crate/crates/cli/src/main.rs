use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use log::info;
use wos_core::{catalog, Estimator, StudyKind, StudyOverrides, WeightWindow};
use wos_cli::{run_solve, run_study, Overrides, SceneConfig};

/// Walk-on-spheres solver for variable-coefficient elliptic PDEs.
///
/// With --config, evaluates a scene file and writes CSV, PFM, PGM and a JSON
/// summary. With --study, runs a verification study on a catalog problem and
/// exits with status 1 if any verdict fails. Flags take precedence over the
/// scene file, which takes precedence over built-in defaults.
#[derive(Debug, Parser)]
#[command(name = "wos", version)]
struct Args {
    /// Scene file (JSON).
    #[arg(long, required_unless_present_any = ["study", "list"])]
    config: Option<PathBuf>,
    /// classic, dt, nf or sde.
    #[arg(long)]
    estimator: Option<Estimator>,
    /// Walks per point.
    #[arg(long)]
    spp: Option<u64>,
    /// Width of the stopping shell.
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    workers: Option<usize>,
    /// Screening constant used by the ball kernels.
    #[arg(long)]
    sigma_bar: Option<f64>,
    /// Weight window as MIN,MAX.
    #[arg(long, value_parser = parse_window)]
    window: Option<WeightWindow>,
    /// Also estimate the gradient.
    #[arg(long)]
    gradient: bool,
    /// Skip evaluation points outside the domain.
    #[arg(long)]
    mask_exterior: bool,
    /// Study to run: unbiasedness, convergence, epsilon-bias, query-count,
    /// weight-window or gradient.
    #[arg(long, value_name = "NAME", conflicts_with = "config")]
    study: Option<String>,
    /// Catalog problem for --study.
    #[arg(long, requires = "study")]
    problem: Option<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// List catalog problems and studies.
    #[arg(long)]
    list: bool,
}

fn parse_window(s: &str) -> Result<WeightWindow, String> {
    let (a, b) = s.split_once(',').ok_or("expected MIN,MAX")?;
    let min = a.trim().parse::<f64>().map_err(|e| e.to_string())?;
    let max = b.trim().parse::<f64>().map_err(|e| e.to_string())?;
    WeightWindow::new(min, max).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(args: Args) -> Result<ExitCode, wos_cli::CliError> {
    if args.list {
        for e in catalog() {
            println!("{:<22} {}", e.id, e.summary);
        }
        for k in StudyKind::ALL {
            println!("study {k} (default problem {})", k.default_problem());
        }
        return Ok(ExitCode::SUCCESS);
    }
    if let Some(name) = &args.study {
        let o = StudyOverrides {
            problem: args.problem.clone(),
            spp: args.spp,
            seed: args.seed,
            estimator: args.estimator,
            window: args.window,
            sigma_bar: args.sigma_bar,
        };
        let out = args.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        let (report, files) = run_study(name, &o, &out, args.workers)?;
        for v in &report.verdicts {
            println!("{} [{}] {}", if v.passed { "PASS" } else { "FAIL" }, v.criterion, v.detail);
        }
        for f in files {
            info!("wrote {}", f.display());
        }
        return Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) });
    }

    let path = args.config.as_ref().expect("clap requires --config here");
    let mut cfg = SceneConfig::load(path)?;
    cfg.apply(&Overrides {
        estimator: args.estimator,
        spp: args.spp,
        epsilon: args.eps,
        seed: args.seed,
        sigma_bar: args.sigma_bar,
        window: args.window,
        gradient: args.gradient,
        mask_exterior: args.mask_exterior,
        out: args.out,
    });
    let done = run_solve(&cfg, args.workers)?;
    let s = &done.summary;
    info!(
        "{} points ({} masked), {} walks, {:.2} steps/walk, {:.2} queries/walk, {:.2}s",
        s.points,
        s.masked,
        s.totals.walks,
        s.totals.mean_steps(),
        s.totals.mean_queries(),
        s.wall_time
    );
    if s.flagged > 0 {
        log::warn!("{} samples failed and were dropped", s.flagged);
    }
    for f in &s.files {
        info!("wrote {}", f.display());
    }
    Ok(ExitCode::SUCCESS)
}
