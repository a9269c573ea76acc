//! Boundary data presets, analytic reference solutions and evaluation grids.

use std::sync::Arc;

use rskel::geometry::{Boundary, Point};
use rskel::kernels::{Kernel, Pde};

use crate::config::{BoundaryData, ExperimentConfig, GeometryConfig};
use crate::CliError;

/// Interior points closer than this many node spacings to the boundary are skipped;
/// the smooth quadrature is not accurate there.
pub const BOUNDARY_MARGIN: f64 = 6.0;

#[derive(Clone, Debug)]
pub struct Problem {
    pub pde: Pde,
    pub boundary: Arc<Boundary>,
    pub rhs: Vec<f64>,
}

impl Problem {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Problem, CliError> {
        Self::build(cfg.pde, &cfg.geometry, &cfg.boundary_data)
    }

    pub fn build(pde: Pde, geometry: &GeometryConfig, data: &BoundaryData) -> Result<Problem, CliError> {
        let boundary = Arc::new(Boundary::build(&geometry.curves())?);
        let rhs = boundary_data(pde, data, &boundary, geometry)?;
        check_consistent(pde, &boundary, &rhs)?;
        Ok(Problem { pde, boundary, rhs })
    }
}

/// Rejects Stokes data with net flux above `1e-10 ‖f‖`.
pub fn check_consistent(pde: Pde, boundary: &Boundary, rhs: &[f64]) -> Result<(), CliError> {
    if pde != Pde::StokesDirichlet {
        return Ok(());
    }
    let flux = Kernel::new(pde, boundary).data_flux(rhs);
    let norm = rhs.iter().map(|x| x * x).sum::<f64>().sqrt();
    if flux.abs() > 1e-10 * norm {
        return Err(CliError::Data(format!(
            "Dirichlet data has net flux {flux:e} (|f| = {norm:e}); incompressible flow needs zero"
        )));
    }
    Ok(())
}

fn per_curve(boundary: &Boundary, dpn: usize, value: impl Fn(usize, usize) -> Vec<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(boundary.n_nodes() * dpn);
    for node in 0..boundary.n_nodes() {
        out.extend(value(boundary.curve_index_of(node), node));
    }
    out
}

pub fn boundary_data(
    pde: Pde,
    data: &BoundaryData,
    boundary: &Boundary,
    geometry: &GeometryConfig,
) -> Result<Vec<f64>, CliError> {
    let dpn = pde.dofs_per_node();
    let need = |want: Pde, name: &str| {
        if pde == want {
            Ok(())
        } else {
            Err(CliError::Config(format!("{name} data does not apply to {pde:?}")))
        }
    };
    let normals = boundary.normals();
    let positions = boundary.positions();
    Ok(match data {
        BoundaryData::Zero => vec![0.0; boundary.n_nodes() * dpn],
        BoundaryData::NeumannSourceSink => {
            need(Pde::LaplaceNeumann, "neumann_source_sink")?;
            per_curve(boundary, 1, |c, _| {
                vec![match c {
                    1 => 1.0,
                    2 => -1.0,
                    _ => 0.0,
                }]
            })
        }
        BoundaryData::DirichletSourceSink => {
            need(Pde::StokesDirichlet, "dirichlet_source_sink")?;
            // The sink strength balances the discrete hole perimeters and the outer
            // flow loses its discrete outflow, so the net flux is zero to rounding.
            let mut perimeter = [0.0; 3];
            let mut outflow = 0.0;
            for (i, w) in boundary.weights().iter().enumerate() {
                let c = boundary.curve_index_of(i);
                if let Some(p) = perimeter.get_mut(c) {
                    *p += w;
                }
                if c == 0 {
                    outflow += w * normals[i].x;
                }
            }
            let sink = if perimeter[2] > 0.0 { perimeter[1] / perimeter[2] } else { 0.0 };
            let leak = outflow / perimeter[0];
            per_curve(boundary, 2, |c, i| match c {
                0 => vec![1.0 - leak * normals[i].x, -leak * normals[i].y],
                1 => vec![normals[i].x, normals[i].y],
                2 => vec![-sink * normals[i].x, -sink * normals[i].y],
                _ => vec![0.0, 0.0],
            })
        }
        BoundaryData::AnnulusCouette {
            inner_omega,
            outer_omega,
        } => {
            need(Pde::StokesDirichlet, "annulus_couette")?;
            if !matches!(geometry, GeometryConfig::Annulus { .. }) {
                return Err(CliError::Config("annulus_couette data needs the annulus geometry".into()));
            }
            per_curve(boundary, 2, |c, i| {
                let om = if c == 0 { *outer_omega } else { *inner_omega };
                let v = positions[i].perp() * om;
                vec![v.x, v.y]
            })
        }
        BoundaryData::Constant { values } => {
            if values.len() != boundary.curves().len() || values.iter().any(|v| v.len() != dpn) {
                return Err(CliError::Config(format!(
                    "constant data needs {} entries of length {dpn}",
                    boundary.curves().len()
                )));
            }
            per_curve(boundary, dpn, |c, _| values[c].clone())
        }
    })
}

/// Rigid-rotation Couette flow between concentric circles centred at the origin.
#[derive(Clone, Copy, Debug)]
pub struct Couette {
    a: f64,
    b: f64,
}

impl Couette {
    pub fn new(inner_radius: f64, outer_radius: f64, inner_omega: f64, outer_omega: f64) -> Couette {
        // u = (a + b / r^2) x^perp
        let b = (inner_omega - outer_omega) / (inner_radius.powi(-2) - outer_radius.powi(-2));
        let a = outer_omega - b / (outer_radius * outer_radius);
        Couette { a, b }
    }

    pub fn from_config(geometry: &GeometryConfig, data: &BoundaryData) -> Option<Couette> {
        match (geometry, data) {
            (
                GeometryConfig::Annulus {
                    inner_radius,
                    outer_radius,
                    ..
                },
                BoundaryData::AnnulusCouette {
                    inner_omega,
                    outer_omega,
                },
            ) => Some(Couette::new(*inner_radius, *outer_radius, *inner_omega, *outer_omega)),
            _ => None,
        }
    }

    pub fn velocity(&self, p: Point) -> Point {
        p.perp() * (self.a + self.b / p.norm_sq())
    }
}

/// `res x res` lattice over the bounding box, keeping points inside the domain and
/// at least [`BOUNDARY_MARGIN`] node spacings away from the boundary.
pub fn interior_grid(boundary: &Boundary, res: usize) -> Vec<Point> {
    let (lo, hi) = boundary.bounding_box();
    let margin = BOUNDARY_MARGIN * boundary.max_node_spacing();
    let step = |a: f64, b: f64, i: usize| {
        if res == 1 {
            0.5 * (a + b)
        } else {
            a + (b - a) * i as f64 / (res - 1) as f64
        }
    };
    let mut pts = Vec::new();
    for j in 0..res {
        for i in 0..res {
            let p = Point::new(step(lo.x, hi.x, i), step(lo.y, hi.y, j));
            if boundary.point_in_domain(p) && boundary.distance_to_nodes(p) > margin {
                pts.push(p);
            }
        }
    }
    pts
}

#[cfg(test)]
mod tests {
    use super::*;
    use rskel::geometry::presets;

    #[test]
    fn couette_matches_boundary_rotation() {
        let c = Couette::new(0.5, 1.0, 2.0, -1.0);
        let u = c.velocity(Point::new(0.5, 0.0));
        assert!((u.y - 1.0).abs() < 1e-14 && u.x.abs() < 1e-14);
        let u = c.velocity(Point::new(0.0, 1.0));
        assert!((u.x - 1.0).abs() < 1e-14 && u.y.abs() < 1e-14);
    }

    #[test]
    fn source_sink_data_is_consistent() {
        let g = GeometryConfig::StarfishHoles {
            n: 600,
            theta: [0.4, 2.9],
            hole_fraction: None,
        };
        let p = Problem::build(Pde::StokesDirichlet, &g, &BoundaryData::DirichletSourceSink).unwrap();
        assert_eq!(p.rhs.len(), 1200);
        let p = Problem::build(Pde::LaplaceNeumann, &g, &BoundaryData::NeumannSourceSink).unwrap();
        let ones = p.rhs.iter().filter(|&&v| v == 1.0).count();
        assert_eq!(ones, presets::starfish_split(600).1);
    }

    #[test]
    fn net_flux_is_rejected() {
        let g = GeometryConfig::StarfishHoles {
            n: 600,
            theta: [0.4, 2.9],
            hole_fraction: None,
        };
        let data = BoundaryData::Constant {
            values: vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]],
        };
        assert!(Problem::build(Pde::StokesDirichlet, &g, &data).is_ok());
        let b = Boundary::build(&g.curves()).unwrap();
        let f: Vec<f64> = b.normals().iter().flat_map(|n| [n.x, n.y]).collect();
        assert!(matches!(check_consistent(Pde::StokesDirichlet, &b, &f), Err(CliError::Data(_))));
    }

    #[test]
    fn grid_stays_inside_with_margin() {
        let b = Boundary::build(&presets::annulus(600, 0.5, 1.0)).unwrap();
        let pts = interior_grid(&b, 30);
        assert!(!pts.is_empty());
        for p in pts {
            let r = p.norm();
            assert!(r > 0.5 && r < 1.0);
        }
    }
}
