//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use rskel::geometry::{presets, CurveSpec, Perturbation};
use rskel::kernels::Pde;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub pde: Pde,
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub boundary_data: BoundaryData,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_leaf_cap")]
    pub leaf_cap: usize,
    #[serde(default = "default_threads")]
    pub threads: usize,
    pub experiment: Experiment,
    #[serde(default = "default_grid")]
    pub grid_resolution: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_tol() -> f64 {
    1e-10
}

fn default_leaf_cap() -> usize {
    rskel::tree::DEFAULT_LEAF_CAP
}

fn default_threads() -> usize {
    1
}

fn default_grid() -> usize {
    50
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeometryConfig {
    Circle {
        n: usize,
    },
    Annulus {
        n: usize,
        #[serde(default = "half")]
        inner_radius: f64,
        #[serde(default = "unit")]
        outer_radius: f64,
    },
    Starfish {
        n: usize,
    },
    /// Starfish with two starfish holes on the hole path at parameters `theta`.
    /// Each hole gets `hole_fraction` of the nodes (1/6 by default).
    StarfishHoles {
        n: usize,
        theta: [f64; 2],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        hole_fraction: Option<f64>,
    },
    Custom {
        curves: Vec<CurveSpec>,
    },
}

fn half() -> f64 {
    0.5
}

fn unit() -> f64 {
    1.0
}

impl GeometryConfig {
    pub fn curves(&self) -> Vec<CurveSpec> {
        match self {
            GeometryConfig::Circle { n } => presets::circle(*n),
            GeometryConfig::Annulus {
                n,
                inner_radius,
                outer_radius,
            } => presets::annulus(*n, *inner_radius, *outer_radius),
            GeometryConfig::Starfish { n } => presets::starfish(*n),
            GeometryConfig::StarfishHoles { theta, .. } => {
                let (n_outer, n_hole) = self.starfish_split().expect("starfish preset");
                presets::starfish_with_sized_holes(n_outer, n_hole, theta[0], theta[1])
            }
            GeometryConfig::Custom { curves } => curves.clone(),
        }
    }

    /// (outer, per-hole) node counts of the starfish-with-holes preset.
    pub fn starfish_split(&self) -> Option<(usize, usize)> {
        match self {
            GeometryConfig::StarfishHoles { n, hole_fraction, .. } => Some(match hole_fraction {
                None => presets::starfish_split(*n),
                Some(f) => {
                    let h = (*n as f64 * f).round() as usize;
                    (n - 2 * h, h)
                }
            }),
            _ => None,
        }
    }

    /// Same preset with `n` nodes; custom geometries are returned unchanged.
    pub fn with_nodes(&self, n_new: usize) -> GeometryConfig {
        let mut g = self.clone();
        match &mut g {
            GeometryConfig::Circle { n }
            | GeometryConfig::Annulus { n, .. }
            | GeometryConfig::Starfish { n }
            | GeometryConfig::StarfishHoles { n, .. } => *n = n_new,
            GeometryConfig::Custom { .. } => {}
        }
        g
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundaryData {
    /// Laplace: 1 on the first hole, -1 on the second, 0 on the outer curve.
    NeumannSourceSink,
    /// Stokes: (1, 0) on the outer curve, `n` on the first hole, `-n` on the second.
    DirichletSourceSink,
    /// Rigid rotation of each annulus circle with the given angular velocities.
    AnnulusCouette {
        #[serde(default = "unit")]
        inner_omega: f64,
        #[serde(default)]
        outer_omega: f64,
    },
    /// One constant value (Laplace) or vector (Stokes) per curve, outer first.
    Constant {
        values: Vec<Vec<f64>>,
    },
    #[default]
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    /// One worker per update, all stencil updates concurrently.
    A,
    /// Two workers per update.
    B,
    /// All workers on each update, updates one after another.
    C,
}

impl Scheme {
    /// (workers per update, concurrent updates) for a total budget.
    pub fn split(self, threads: usize) -> (usize, usize) {
        let t = threads.max(1);
        match self {
            Scheme::A => (1, t),
            Scheme::B => (2.min(t), (t / 2).max(1)),
            Scheme::C => (t, 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoleMoves {
    /// Index of the moved hole (0 or 1) on the starfish hole path.
    #[serde(default)]
    pub hole: usize,
    pub count: usize,
    /// Path parameter increment per move.
    pub step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    Solve,
    Scaling {
        n_list: Vec<usize>,
        /// Thread counts to time at the largest `n` (empty to skip).
        #[serde(default)]
        threads_list: Vec<usize>,
        /// Factorizations per size; the fastest is reported.
        #[serde(default = "default_repeats")]
        repeats: usize,
    },
    Update {
        #[serde(default)]
        perturbations: Vec<Perturbation>,
        #[serde(default)]
        hole_moves: Option<HoleMoves>,
    },
    Optimize {
        theta0: [f64; 2],
        #[serde(default = "default_iters")]
        max_iters: usize,
        #[serde(default = "default_fd_step")]
        fd_step: f64,
        #[serde(default = "default_scheme")]
        scheme: Scheme,
        #[serde(default = "default_grad_tol")]
        grad_tol: f64,
    },
}

fn default_iters() -> usize {
    50
}

fn default_fd_step() -> f64 {
    1e-3
}

fn default_scheme() -> Scheme {
    Scheme::A
}

fn default_grad_tol() -> f64 {
    1e-4
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig, CliError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return bad("tol must lie in (0, 1)");
        }
        if self.leaf_cap == 0 || self.threads == 0 || self.grid_resolution == 0 {
            return bad("leaf_cap, threads and grid_resolution must be positive");
        }
        if let GeometryConfig::StarfishHoles {
            hole_fraction: Some(f), ..
        } = self.geometry
        {
            if !(f > 0.0 && f < 1.0 / 3.0) {
                return bad("hole_fraction must lie in (0, 1/3)");
            }
        }
        match &self.experiment {
            Experiment::Scaling {
                n_list,
                threads_list,
                repeats,
            } => {
                if n_list.is_empty() || n_list.contains(&0) || threads_list.contains(&0) || *repeats == 0 {
                    return bad("scaling needs a nonempty list of positive sizes and repeats >= 1");
                }
            }
            Experiment::Update { perturbations, hole_moves } => {
                if perturbations.is_empty() && hole_moves.is_none() {
                    return bad("update needs perturbations or hole_moves");
                }
                if let Some(m) = hole_moves {
                    if m.hole > 1 || m.count == 0 || !m.step.is_finite() {
                        return bad("hole_moves needs hole 0 or 1, a positive count and a finite step");
                    }
                    if !matches!(self.geometry, GeometryConfig::StarfishHoles { .. }) {
                        return bad("hole_moves requires the starfish_holes geometry");
                    }
                }
            }
            Experiment::Optimize {
                max_iters,
                fd_step,
                grad_tol,
                theta0,
                ..
            } => {
                if *max_iters == 0 || fd_step.is_nan() || *fd_step <= 0.0 || grad_tol.is_nan() || *grad_tol <= 0.0 {
                    return bad("max_iters, fd_step and grad_tol must be positive");
                }
                if !theta0.iter().all(|t| t.is_finite()) {
                    return bad("theta0 must be finite");
                }
                if !matches!(self.geometry, GeometryConfig::StarfishHoles { .. }) {
                    return bad("optimize requires the starfish_holes geometry");
                }
            }
            Experiment::Solve => {}
        }
        Ok(())
    }

    /// Applies command-line overrides.
    pub fn override_with(&mut self, threads: Option<usize>, tol: Option<f64>, out: Option<PathBuf>) -> Result<(), CliError> {
        if let Some(t) = threads {
            self.threads = t;
        }
        if let Some(t) = tol {
            self.tol = t;
        }
        if let Some(o) = out {
            self.output_dir = o;
        }
        self.validate()
    }
}

fn default_repeats() -> usize {
    3
}
