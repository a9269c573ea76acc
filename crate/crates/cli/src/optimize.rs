//! Gradient ascent over the two hole positions on the starfish hole path.
//!
//! Gradients use the 4th-order centered stencil, steps a backtracking line search
//! with an Armijo condition. Trial points closer than the minimum separation are
//! projected back onto the constraint.

use std::f64::consts::{PI, TAU};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use rskel::geometry::{presets, Boundary, Edit, Perturbation, Point};
use rskel::kernels::Pde;
use rskel::skel::{FactorOptions, Factorization};
use rskel::tree::RootBox;
use serde::Serialize;

use crate::config::{BoundaryData, GeometryConfig, Scheme};
use crate::problem::boundary_data;
use crate::CliError;

pub type Theta = [f64; 2];

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub fd_step: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub initial_step: f64,
    pub armijo: f64,
    pub shrink: f64,
    pub max_halvings: usize,
    pub min_separation: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            fd_step: 1e-3,
            max_iters: 50,
            grad_tol: 1e-4,
            initial_step: 0.1,
            armijo: 1e-4,
            shrink: 0.5,
            max_halvings: 30,
            min_separation: PI / 4.0,
        }
    }
}

/// A function of the two path parameters.
pub trait Objective {
    /// Values at `points`, possibly computed concurrently.
    fn values(&mut self, points: &[Theta]) -> Result<Vec<f64>, CliError>;

    /// The optimizer moved to `theta`.
    fn accept(&mut self, _theta: Theta) -> Result<(), CliError> {
        Ok(())
    }
}

/// Wraps a plain closure; `accept` is a no-op.
pub struct FnObjective<F>(pub F);

impl<F: FnMut(Theta) -> f64> Objective for FnObjective<F> {
    fn values(&mut self, points: &[Theta]) -> Result<Vec<f64>, CliError> {
        Ok(points.iter().map(|&p| (self.0)(p)).collect())
    }
}

const STENCIL: [f64; 4] = [-2.0, -1.0, 1.0, 2.0];

/// `(f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h` from values at `x + STENCIL·h`.
pub fn stencil_derivative(v: &[f64], h: f64) -> f64 {
    (v[0] - 8.0 * v[1] + 8.0 * v[2] - v[3]) / (12.0 * h)
}

pub fn fd_derivative(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    let v: Vec<f64> = STENCIL.iter().map(|s| f(x + s * h)).collect();
    stencil_derivative(&v, h)
}

/// The eight probe points of the gradient stencil, parameter 0 first.
pub fn stencil_points(theta: Theta, h: f64) -> Vec<Theta> {
    let mut pts = Vec::with_capacity(8);
    for k in 0..2 {
        for s in STENCIL {
            let mut p = theta;
            p[k] += s * h;
            pts.push(p);
        }
    }
    pts
}

pub fn gradient_from(values: &[f64], h: f64) -> [f64; 2] {
    [stencil_derivative(&values[..4], h), stencil_derivative(&values[4..8], h)]
}

/// Angular distance between the two parameters on the periodic path.
pub fn separation(t: Theta) -> f64 {
    let d = (t[0] - t[1]).rem_euclid(TAU);
    d.min(TAU - d)
}

/// Wraps into `[0, 2π)` and, if too close, spreads the pair symmetrically about
/// its midpoint to just beyond `min_sep`.
pub fn project(t: Theta, min_sep: f64) -> Theta {
    let w = [t[0].rem_euclid(TAU), t[1].rem_euclid(TAU)];
    if separation(w) > min_sep {
        return w;
    }
    // signed shortest offset from t0 to t1
    let mut d = (w[1] - w[0]).rem_euclid(TAU);
    if d > PI {
        d -= TAU;
    }
    let mid = w[0] + 0.5 * d;
    let half = 0.5 * min_sep * (1.0 + 1e-9);
    let sign = if d >= 0.0 { 1.0 } else { -1.0 };
    [(mid - sign * half).rem_euclid(TAU), (mid + sign * half).rem_euclid(TAU)]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Clone, Debug, Serialize)]
pub struct Iteration {
    pub iter: usize,
    pub theta: Theta,
    pub objective: f64,
    pub gradient: [f64; 2],
    /// Length of the step taken from this iterate (0 for the last one).
    pub step: f64,
    pub halvings: usize,
    pub evaluations: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct OptimizeLog {
    pub status: Status,
    pub iterations: Vec<Iteration>,
}

impl OptimizeLog {
    pub fn last(&self) -> &Iteration {
        self.iterations.last().expect("at least one iterate")
    }
}

fn norm2(g: [f64; 2]) -> f64 {
    g[0].hypot(g[1])
}

/// Maximizes `obj` from a feasible `theta0`.
pub fn maximize(obj: &mut dyn Objective, theta0: Theta, s: &Settings) -> Result<OptimizeLog, CliError> {
    if separation(theta0) <= s.min_separation {
        return Err(CliError::Optimize(format!(
            "initial separation {:.4} is not above {:.4}",
            separation(theta0),
            s.min_separation
        )));
    }
    let mut theta = [theta0[0].rem_euclid(TAU), theta0[1].rem_euclid(TAU)];
    obj.accept(theta)?;
    let mut value = obj.values(&[theta])?[0];
    let mut iterations = Vec::new();
    let status = loop {
        let start = Instant::now();
        let grad = gradient_from(&obj.values(&stencil_points(theta, s.fd_step))?, s.fd_step);
        let mut it = Iteration {
            iter: iterations.len(),
            theta,
            objective: value,
            gradient: grad,
            step: 0.0,
            halvings: 0,
            evaluations: 8,
            seconds: 0.0,
        };
        let done = if norm2(grad) <= s.grad_tol {
            Some(Status::Converged)
        } else if iterations.len() >= s.max_iters {
            Some(Status::MaxIterations)
        } else {
            None
        };
        if let Some(st) = done {
            it.seconds = start.elapsed().as_secs_f64();
            iterations.push(it);
            break st;
        }
        // trial lengths initial_step, initial_step/2, ... along the unit gradient
        let dir = [grad[0] / norm2(grad), grad[1] / norm2(grad)];
        let mut alpha = s.initial_step;
        let mut accepted = None;
        for h in 0..=s.max_halvings {
            let trial = project([theta[0] + alpha * dir[0], theta[1] + alpha * dir[1]], s.min_separation);
            let mut d = [0.0; 2];
            for k in 0..2 {
                d[k] = (trial[k] - theta[k] + PI).rem_euclid(TAU) - PI;
            }
            let v = obj.values(&[trial])?[0];
            it.evaluations += 1;
            let gain = (grad[0] * d[0] + grad[1] * d[1]).max(0.0);
            if v >= value + s.armijo * gain && norm2(d) > 0.0 {
                accepted = Some((trial, v, norm2(d), h));
                break;
            }
            alpha *= s.shrink;
        }
        match accepted {
            Some((trial, v, step, h)) => {
                obj.accept(trial)?;
                it.step = step;
                it.halvings = h;
                it.seconds = start.elapsed().as_secs_f64();
                iterations.push(it);
                theta = trial;
                value = v;
            }
            None => {
                it.seconds = start.elapsed().as_secs_f64();
                iterations.push(it);
                break Status::LineSearchFailed;
            }
        }
    };
    Ok(OptimizeLog { status, iterations })
}

/// Objective value from a solved PDE: `∂u/∂x₁` at the probe for heat problems,
/// `-u₁` at the probe for Stokes flow.
pub fn probe_objective(f: &Factorization, rhs: &[f64], probe: Point, hx: f64) -> Result<f64, CliError> {
    let (mu, lambda) = f.solve(rhs)?;
    Ok(match f.pde() {
        Pde::LaplaceNeumann => {
            let targets: Vec<Point> = STENCIL.iter().map(|s| probe + Point::new(s * hx, 0.0)).collect();
            stencil_derivative(&f.evaluate(&targets, &mu, &lambda)?, hx)
        }
        Pde::StokesDirichlet => -f.evaluate(&[probe], &mu, &lambda)?[0],
    })
}

/// Objective value at a configuration, with the boundary and factorization that produced it.
type Trial = (f64, Arc<Boundary>, Factorization);

/// PDE objective on the starfish with two holes. Every probe point is reached by
/// updating the factorization of the current iterate.
pub struct PdeObjective {
    pde: Pde,
    geometry: GeometryConfig,
    n_hole: usize,
    data: BoundaryData,
    probe: Point,
    hx: f64,
    per_update: usize,
    pool: Option<rayon::ThreadPool>,
    current: Option<(Theta, Arc<Boundary>, Factorization)>,
    last_trial: Option<(Theta, Arc<Boundary>, Factorization)>,
    opts: FactorOptions,
    root: RootBox,
    pub solves: usize,
}

impl PdeObjective {
    pub fn new(
        pde: Pde,
        geometry: GeometryConfig,
        data: BoundaryData,
        opts: FactorOptions,
        scheme: Scheme,
        threads: usize,
    ) -> Result<PdeObjective, CliError> {
        let Some((_, n_hole)) = geometry.starfish_split() else {
            return Err(CliError::Config("the objective needs the starfish_holes geometry".into()));
        };
        let (per_update, concurrent) = scheme.split(threads);
        let pool = if concurrent > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(concurrent)
                    .build()
                    .map_err(|e| CliError::Optimize(e.to_string()))?,
            )
        } else {
            None
        };
        // the root box must hold every hole position along the path
        let root = RootBox::enclosing(&Boundary::build(&presets::starfish(256))?);
        Ok(PdeObjective {
            pde,
            geometry,
            n_hole,
            data,
            probe: Point::default(),
            hx: 1e-3,
            per_update,
            pool,
            current: None,
            last_trial: None,
            opts: FactorOptions {
                workers: per_update,
                ..opts
            },
            root,
            solves: 0,
        })
    }

    fn geometry(&self, theta: Theta) -> GeometryConfig {
        let mut g = self.geometry.clone();
        if let GeometryConfig::StarfishHoles { theta: t, .. } = &mut g {
            *t = theta;
        }
        g
    }

    fn rhs(&self, b: &Boundary, theta: Theta) -> Result<Vec<f64>, CliError> {
        boundary_data(self.pde, &self.data, b, &self.geometry(theta))
    }

    fn factor_fresh(&self, theta: Theta) -> Result<(Arc<Boundary>, Factorization), CliError> {
        let b = Arc::new(Boundary::build(&self.geometry(theta).curves())?);
        let f = Factorization::factor(self.pde, b.clone(), self.root, self.opts.clone())?;
        Ok((b, f))
    }

    /// Factorization at `theta` by updating the current one.
    fn moved(&self, theta: Theta) -> Result<(Arc<Boundary>, Factorization), CliError> {
        let (cur, b, f) = self.current.as_ref().expect("objective has a current iterate");
        let n_hole = self.n_hole;
        let holes: Vec<_> = b.holes().map(|c| c.id).collect();
        let edits: Vec<Edit> = (0..2)
            .filter(|&k| theta[k] != cur[k])
            .map(|k| Edit::ReshapeHole {
                curve: holes[k],
                knots: presets::starfish_hole(theta[k], n_hole).knots,
                center: None,
            })
            .collect();
        let (nb, delta) = b.apply_perturbation(&Perturbation { edits })?;
        let nb = Arc::new(nb);
        let nf = f.update_with_workers(nb.clone(), &delta, self.per_update)?;
        Ok((nb, nf))
    }

    fn value_at(&self, theta: Theta) -> Result<(f64, Arc<Boundary>, Factorization), CliError> {
        let (b, f) = self.moved(theta)?;
        let rhs = self.rhs(&b, theta)?;
        let v = probe_objective(&f, &rhs, self.probe, self.hx)?;
        Ok((v, b, f))
    }

    pub fn current_theta(&self) -> Option<Theta> {
        self.current.as_ref().map(|c| c.0)
    }
}

impl Objective for PdeObjective {
    fn values(&mut self, points: &[Theta]) -> Result<Vec<f64>, CliError> {
        self.solves += points.len();
        let this = &*self;
        let results: Vec<Result<Trial, CliError>> = match &this.pool {
            Some(p) if points.len() > 1 => p.install(|| points.par_iter().map(|&t| this.value_at(t)).collect()),
            _ => points.iter().map(|&t| this.value_at(t)).collect(),
        };
        let mut out = Vec::with_capacity(points.len());
        let mut last = None;
        for (r, &t) in results.into_iter().zip(points) {
            let (v, b, f) = r?;
            out.push(v);
            last = Some((t, b, f));
        }
        if points.len() == 1 {
            self.last_trial = last;
        }
        Ok(out)
    }

    fn accept(&mut self, theta: Theta) -> Result<(), CliError> {
        let next = match self.last_trial.take() {
            Some((t, b, f)) if t == theta => (t, b, f),
            _ if self.current.is_some() => {
                let (b, f) = self.moved(theta)?;
                (theta, b, f)
            }
            _ => {
                let (b, f) = self.factor_fresh(theta)?;
                (theta, b, f)
            }
        };
        self.current = Some(next);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fourth_order_derivative_of_sine() {
        let d = fd_derivative(f64::sin, 1.0, 1e-2);
        assert!((d - 1f64.cos()).abs() <= 1e-7);
        // halving h cuts the error by about 16
        let e1 = (fd_derivative(f64::sin, 1.0, 4e-2) - 1f64.cos()).abs();
        let e2 = (fd_derivative(f64::sin, 1.0, 2e-2) - 1f64.cos()).abs();
        assert!(e1 / e2 > 14.0);
    }

    #[test]
    fn projection_restores_separation() {
        let s = PI / 4.0;
        let p = project([1.0, 1.2], s);
        assert!(separation(p) > s);
        assert!((0.5 * (p[0] + p[1]) - 1.1).abs() < 1e-12);
        assert!(p[0] < p[1]);
        // across the wrap point
        let p = project([0.05, TAU - 0.05], s);
        assert!(separation(p) > s);
        let q = project([2.0, 4.0], s);
        assert_eq!(q, [2.0, 4.0]);
    }

    #[test]
    fn concave_quadratic_converges() {
        let (a, b) = (1.3, 4.1);
        let mut obj = FnObjective(|t: Theta| -(t[0] - a).powi(2) - (t[1] - b).powi(2));
        let s = Settings {
            max_iters: 100,
            grad_tol: 1e-5,
            ..Default::default()
        };
        let log = maximize(&mut obj, [0.5, 3.0], &s).unwrap();
        assert_eq!(log.status, Status::Converged);
        assert!(log.iterations.len() <= 100);
        let t = log.last().theta;
        assert!((t[0] - a).abs() < 1e-4 && (t[1] - b).abs() < 1e-4);
        for w in log.iterations.windows(2) {
            assert!(w[1].objective >= w[0].objective);
        }
    }

    #[test]
    fn constraint_is_respected_when_optimum_is_infeasible() {
        // unconstrained maximum has both holes at the same place
        let mut obj = FnObjective(|t: Theta| -(t[0] - 2.0).powi(2) - (t[1] - 2.0).powi(2));
        let s = Settings::default();
        let log = maximize(&mut obj, [1.0, 3.0], &s).unwrap();
        for it in &log.iterations {
            assert!(separation(it.theta) > s.min_separation);
        }
        assert!(maximize(&mut obj, [1.0, 1.1], &s).is_err());
    }

    #[test]
    fn stencil_has_eight_points() {
        let p = stencil_points([1.0, 2.0], 0.1);
        assert_eq!(p.len(), 8);
        assert_eq!(p[0], [0.8, 2.0]);
        assert_eq!(p[7], [1.0, 2.2]);
    }
}
