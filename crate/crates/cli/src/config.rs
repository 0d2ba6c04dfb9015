//! Scene files.
//!
//! A scene file is a JSON object:
//!
//! ```json
//! {
//!   "problem": {
//!     "dim": 2,
//!     "alpha": {"type": "constant", "value": 1},
//!     "sigma": {"type": "constant", "value": 0},
//!     "f": {"manufactured": {"type": "sinusoid", "amplitude": 1, "frequency": [1, 2]}}
//!   },
//!   "boundary": {"sdf": {"type": "sphere", "center": [0, 0], "radius": 1}},
//!   "epsilon": 1e-3,
//!   "estimator": "dt",
//!   "spp": 1000,
//!   "seed": 7,
//!   "target": {"type": "grid", "origin": [-1, -1], "u": [2, 0], "v": [0, 2], "resolution": [64, 64]},
//!   "output": {"dir": "out", "name": "solution"}
//! }
//! ```
//!
//! Only `problem`, `boundary` and `target` are required. Boundary files
//! (`{"polylines": "shape.txt"}`, `{"mesh": "shape.obj"}`) are resolved
//! relative to the scene file. Command-line flags take precedence over the
//! file, which takes precedence over the defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wos_core::{Dim, Estimator, InteriorSampling, OffCenteredKernel, Problem, Scene, Sdf, Vec3, WalkConfig, WeightWindow};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub problem: Problem,
    pub boundary: BoundarySpec,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_estimator")]
    pub estimator: Estimator,
    #[serde(default = "default_spp")]
    pub spp: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_bar: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_window: Option<WeightWindow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    #[serde(default)]
    pub off_centered: OffCenteredKernel,
    #[serde(default)]
    pub nf_interior: InteriorSampling,
    /// Estimate `∇u` as well as `u`.
    #[serde(default)]
    pub gradient: bool,
    /// Skip grid points outside the domain instead of failing.
    #[serde(default)]
    pub mask_exterior: bool,
    pub target: Target,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_epsilon() -> f64 {
    1e-3
}

fn default_estimator() -> Estimator {
    Estimator::Dt
}

fn default_spp() -> u64 {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundarySpec {
    Sdf(Sdf),
    /// `POLYLINE n` blocks of `x y` rows (2D).
    Polylines(PathBuf),
    /// Triangle OBJ (3D).
    Mesh(PathBuf),
}

/// Where to evaluate the solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Target {
    /// Pixel `(i, j)` sits at `origin + (i + ½)/nx · u + (j + ½)/ny · v`.
    Grid { origin: Vec3, u: Vec3, v: Vec3, resolution: [usize; 2] },
    Points { points: Vec<Vec3> },
}

impl Target {
    pub fn points(&self) -> Vec<Vec3> {
        match self {
            Target::Grid { origin, u, v, resolution: [nx, ny] } => {
                let mut out = Vec::with_capacity(nx * ny);
                for j in 0..*ny {
                    for i in 0..*nx {
                        let a = (i as f64 + 0.5) / *nx as f64;
                        let b = (j as f64 + 0.5) / *ny as f64;
                        out.push(*origin + *u * a + *v * b);
                    }
                }
                out
            }
            Target::Points { points } => points.clone(),
        }
    }

    pub fn grid_shape(&self) -> Option<(usize, usize)> {
        match self {
            Target::Grid { resolution: [nx, ny], .. } => Some((*nx, *ny)),
            Target::Points { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    /// File stem shared by every output.
    #[serde(default = "default_name")]
    pub name: String,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_name() -> String {
    "solution".into()
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { dir: default_dir(), name: default_name() }
    }
}

/// Command-line values that replace those of the scene file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub estimator: Option<Estimator>,
    pub spp: Option<u64>,
    pub epsilon: Option<f64>,
    pub seed: Option<u64>,
    pub sigma_bar: Option<f64>,
    pub window: Option<WeightWindow>,
    pub gradient: bool,
    pub mask_exterior: bool,
    pub out: Option<PathBuf>,
}

impl SceneConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene config serializes")
    }

    /// Reads a scene file, resolves boundary paths against its directory and
    /// validates it.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        match &mut cfg.boundary {
            BoundarySpec::Polylines(p) | BoundarySpec::Mesh(p) if p.is_relative() => *p = base.join(&*p),
            _ => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dim(&self) -> Dim {
        self.problem.dim
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(e) = o.estimator {
            self.estimator = e;
        }
        if let Some(n) = o.spp {
            self.spp = n;
        }
        if let Some(e) = o.epsilon {
            self.epsilon = e;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(s) = o.sigma_bar {
            self.sigma_bar = Some(s);
        }
        if let Some(w) = o.window {
            self.weight_window = Some(w);
        }
        self.gradient |= o.gradient;
        self.mask_exterior |= o.mask_exterior;
        if let Some(d) = &o.out {
            self.output.dir = d.clone();
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.spp == 0 {
            return bad("spp must be at least 1".into());
        }
        if let Some(w) = self.weight_window {
            WeightWindow::new(w.min, w.max)?;
        }
        match &self.boundary {
            BoundarySpec::Polylines(p) | BoundarySpec::Mesh(p) if !p.is_file() => {
                return bad(format!("boundary file {} does not exist", p.display()));
            }
            BoundarySpec::Polylines(_) if self.dim() != Dim::Two => return bad("polylines need a 2D problem".into()),
            BoundarySpec::Mesh(_) if self.dim() != Dim::Three => return bad("meshes need a 3D problem".into()),
            _ => {}
        }
        match &self.target {
            Target::Grid { resolution: [nx, ny], .. } if *nx == 0 || *ny == 0 => bad("grid resolution must be positive".into()),
            Target::Points { points } if points.is_empty() => bad("point list is empty".into()),
            _ => Ok(()),
        }?;
        if self.output.name.is_empty() || self.output.name.contains(['/', '\\']) {
            return bad(format!("output name `{}` is not a plain file stem", self.output.name));
        }
        self.walk_config().validate()?;
        self.problem.validate_fields()?;
        Ok(())
    }

    pub fn scene(&self) -> Result<Scene, CliError> {
        Ok(match &self.boundary {
            BoundarySpec::Sdf(sdf) => Scene::from_sdf(self.dim(), sdf, self.epsilon, None)?,
            BoundarySpec::Polylines(p) => Scene::from_polyline_file(p, self.epsilon)?,
            BoundarySpec::Mesh(p) => Scene::from_obj_file(p, self.epsilon)?,
        })
    }

    pub fn walk_config(&self) -> WalkConfig {
        let d = WalkConfig::default();
        WalkConfig {
            epsilon: self.epsilon,
            max_steps: self.max_steps.unwrap_or(d.max_steps),
            sigma_bar_override: self.sigma_bar,
            weight_window: self.weight_window,
            rng_seed: self.seed,
            off_centered: self.off_centered,
            nf_interior: self.nf_interior,
            ..d
        }
    }
}
