//! Walk-on-spheres Monte Carlo solvers for elliptic PDEs with variable
//! diffusion, screening and drift:
//!
//! ```text
//! ∇·(α∇u) + ω·∇u − σu = −f  in Ω,    u = g  on ∂Ω
//! ```
//!
//! The problem is rewritten as a screened Poisson equation with constant
//! screening plus null collisions ([`coefficients`]), then estimated by
//! delta tracking or next flight over the largest empty balls of the domain
//! ([`estimators`]). No mesh or grid is built.
//!
//! ```
//! use wos_core::{solve, transform, Dim, Estimator, ProbeOptions, Problem, ScalarField, Scene, Sdf, SolveTarget, Vec3, WalkConfig};
//!
//! let scene = Scene::from_sdf(Dim::Two, &Sdf::sphere(Vec3::ZERO, 1.0), 1e-3, None)?;
//! // u = 1 + x is the exact solution; f and g are derived from it
//! let problem = Problem::manufactured(
//!     Dim::Two,
//!     ScalarField::gaussian_bump(Vec3::ZERO, 1.0, 0.5, 1.0),
//!     ScalarField::constant(2.0),
//!     None,
//!     ScalarField::linear(1.0, Vec3::new2(1.0, 0.0)),
//! );
//! let transformed = transform(&problem, &scene, &ProbeOptions::default())?;
//! let target = SolveTarget { scene: &scene, transformed: &transformed };
//! let x = Vec3::new2(0.3, 0.1);
//! let est = solve(target, &[x], 4000, Estimator::Dt, &WalkConfig::default(), None)?;
//! assert!((est[0].mean() - 1.3).abs() < 5.0 * est[0].std_error());
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod coefficients;
pub mod estimators;
pub mod geometry;
pub mod harness;
pub mod kernels;
pub mod math;
pub mod specfun;

pub use coefficients::{transform, CoefficientError, ProbeOptions, Problem, ScalarField, Source, TransformedProblem};
pub use estimators::{
    solve, solve_gradient, EstimateAccumulator, Estimator, EstimatorError, GradientEstimate, InteriorSampling, OffCenteredKernel, PointEstimate, SolveTarget, StatsSummary, WalkConfig, WeightWindow,
};
pub use geometry::{Aabb, GeometryError, Scene, Sdf};
pub use harness::{catalog, catalog_entry, run_study, CatalogEntry, HarnessError, StudyKind, StudyOverrides, StudyReport};
pub use math::{Dim, Vec3};
