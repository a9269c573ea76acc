//! Boundary integral kernels for the interior Laplace-Neumann and Stokes-Dirichlet
//! problems, their proxy-surface counterparts, and the multiply-connected augmentation.
//!
//! DOF `d` lives on node `d / dpn`, component `d % dpn` (`dpn` is 1 for Laplace, 2 for Stokes).

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Boundary, Point};

const INV_2PI: f64 = 0.5 / PI;
const INV_4PI: f64 = 0.25 / PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pde {
    /// `(-1/2 I - D + N) μ = f`, `f` the inward normal derivative.
    LaplaceNeumann,
    /// `(-1/2 I + D + N) μ = f` with Stokeslet/rotlet augmentation for holes.
    StokesDirichlet,
}

impl Pde {
    pub fn dofs_per_node(self) -> usize {
        match self {
            Pde::LaplaceNeumann => 1,
            Pde::StokesDirichlet => 2,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("target ({x}, {y}) is not strictly inside the domain")]
    TargetOutside { x: f64, y: f64 },
    #[error("density has length {got}, expected {expected}")]
    BadLength { got: usize, expected: usize },
}

/// The discretized second-kind operator on a boundary, evaluated entry by entry.
#[derive(Clone, Copy, Debug)]
pub struct Kernel<'a> {
    pub pde: Pde,
    pub jump: f64,
    pub boundary: &'a Boundary,
}

impl<'a> Kernel<'a> {
    pub fn new(pde: Pde, boundary: &'a Boundary) -> Self {
        Kernel {
            pde,
            jump: -0.5,
            boundary,
        }
    }

    pub fn dpn(&self) -> usize {
        self.pde.dofs_per_node()
    }

    pub fn n_dofs(&self) -> usize {
        self.boundary.n_nodes() * self.dpn()
    }

    /// Whether the full system carries the Stokeslet/rotlet unknowns.
    pub fn augmented(&self) -> bool {
        self.pde == Pde::StokesDirichlet && self.boundary.n_holes() > 0
    }

    pub fn n_aug(&self) -> usize {
        if self.augmented() {
            3 * self.boundary.n_holes()
        } else {
            0
        }
    }

    #[inline]
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        let b = self.boundary;
        match self.pde {
            Pde::LaplaceNeumann => {
                let wj = b.weights()[j];
                let k = if i == j {
                    self.jump + b.curvatures()[i] * 0.5 * INV_2PI * wj
                } else {
                    let r = b.positions()[i] - b.positions()[j];
                    INV_2PI * r.dot(b.normals()[i]) / r.norm_sq() * wj
                };
                k + wj
            }
            Pde::StokesDirichlet => {
                let (ni, a) = (i >> 1, i & 1);
                let (nj, c) = (j >> 1, j & 1);
                let wj = b.weights()[nj];
                let nx = b.normals()[ni];
                let ny = b.normals()[nj];
                let comp = |p: Point, k: usize| if k == 0 { p.x } else { p.y };
                let mut k = comp(nx, a) * comp(ny, c) * wj;
                if ni == nj {
                    let t = Point::new(-ny.y, ny.x);
                    k += -b.curvatures()[nj] * INV_2PI * comp(t, a) * comp(t, c) * wj;
                    if a == c {
                        k += self.jump;
                    }
                } else {
                    let r = b.positions()[ni] - b.positions()[nj];
                    let r2 = r.norm_sq();
                    k += r.dot(ny) * comp(r, a) * comp(r, c) / (PI * r2 * r2) * wj;
                }
                k
            }
        }
    }

    pub fn block(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(rows.len(), cols.len());
        for (jj, &j) in cols.iter().enumerate() {
            let mut col = m.column_mut(jj);
            for (ii, &i) in rows.iter().enumerate() {
                col[ii] = self.entry(i, j);
            }
        }
        m
    }

    /// Dense `n_dofs x n_dofs` operator; for testing only.
    pub fn assemble(&self) -> DMatrix<f64> {
        let all: Vec<usize> = (0..self.n_dofs()).collect();
        self.block(&all, &all)
    }

    /// Dense bordered system `[[K, H], [Ψ, -I]]`.
    pub fn assemble_full(&self) -> DMatrix<f64> {
        let n = self.n_dofs();
        let p = self.n_aug();
        let mut m = DMatrix::zeros(n + p, n + p);
        m.view_mut((0, 0), (n, n)).copy_from(&self.assemble());
        if p > 0 {
            m.view_mut((0, n), (n, p)).copy_from(&self.h_matrix());
            m.view_mut((n, 0), (p, n)).copy_from(&self.psi_matrix());
            for i in 0..p {
                m[(n + i, n + i)] = -1.0;
            }
        }
        m
    }

    /// `K x` for the top-left operator, computed directly in `O(N^2)`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n_dofs();
        assert_eq!(x.len(), n);
        (0..n)
            .into_par_iter()
            .map(|i| (0..n).map(|j| self.entry(i, j) * x[j]).sum())
            .collect()
    }

    /// Residual of the full system `[[K, H], [Ψ, -I]] [μ; λ] - [f; 0]`, with `μ` and
    /// `λ` stacked in `x`.
    pub fn full_matvec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n_dofs();
        let p = self.n_aug();
        assert_eq!(x.len(), n + p);
        let mut y = self.matvec(&x[..n]);
        if p > 0 {
            let lam = DVector::from_column_slice(&x[n..]);
            let hl = self.h_matrix() * &lam;
            for i in 0..n {
                y[i] += hl[i];
            }
            let mu = DVector::from_column_slice(&x[..n]);
            let pm = self.psi_matrix() * mu;
            for i in 0..p {
                y.push(pm[i] - x[n + i]);
            }
        }
        y
    }

    /// Stokeslet and rotlet columns at boundary DOFs; three columns per hole,
    /// ordered `(e1 Stokeslet, e2 Stokeslet, rotlet)`.
    pub fn h_matrix(&self) -> DMatrix<f64> {
        h_at(self.boundary.positions(), &self.boundary.hole_centers())
    }

    /// Rows of `Ψ`: weighted translations and rotation over each hole.
    pub fn psi_matrix(&self) -> DMatrix<f64> {
        let b = self.boundary;
        let p = b.n_holes();
        let mut m = DMatrix::zeros(3 * p, 2 * b.n_nodes());
        for (k, hole) in b.holes().enumerate() {
            for i in hole.nodes() {
                let w = b.weights()[i];
                let x = b.positions()[i];
                m[(3 * k, 2 * i)] = w;
                m[(3 * k + 1, 2 * i + 1)] = w;
                m[(3 * k + 2, 2 * i)] = -x.y * w;
                m[(3 * k + 2, 2 * i + 1)] = x.x * w;
            }
        }
        m
    }

    /// Rows of the incoming proxy block: the field produced at `proxies` by the
    /// densities on `cols`, followed by one completion row. Rows are unscaled.
    pub fn proxy_incoming(&self, proxies: &[Point], cols: &[usize]) -> DMatrix<f64> {
        let b = self.boundary;
        let nr = 2 * proxies.len() + 1;
        let mut m = DMatrix::zeros(nr, cols.len());
        match self.pde {
            Pde::LaplaceNeumann => {
                for (jj, &j) in cols.iter().enumerate() {
                    let y = b.positions()[j];
                    let w = b.weights()[j];
                    for (k, &p) in proxies.iter().enumerate() {
                        let r = p - y;
                        let s = w / r.norm_sq();
                        m[(2 * k, jj)] = r.x * s;
                        m[(2 * k + 1, jj)] = r.y * s;
                    }
                    m[(nr - 1, jj)] = w;
                }
            }
            Pde::StokesDirichlet => {
                for (jj, &j) in cols.iter().enumerate() {
                    let (nj, c) = (j >> 1, j & 1);
                    let y = b.positions()[nj];
                    let ny = b.normals()[nj];
                    let w = b.weights()[nj];
                    let rc = |r: Point| if c == 0 { r.x } else { r.y };
                    for (k, &p) in proxies.iter().enumerate() {
                        let r = p - y;
                        let r2 = r.norm_sq();
                        let s = r.dot(ny) * rc(r) / (PI * r2 * r2) * w;
                        m[(2 * k, jj)] = s * r.x;
                        m[(2 * k + 1, jj)] = s * r.y;
                    }
                    m[(nr - 1, jj)] = w * rc(ny);
                }
            }
        }
        m
    }

    /// Rows of the outgoing proxy block: fields at `cols` (as targets) produced by
    /// sources on the proxy circle, followed by one completion row.
    pub fn proxy_outgoing(&self, proxies: &[Point], proxy_weight: f64, cols: &[usize]) -> DMatrix<f64> {
        let b = self.boundary;
        let per = match self.pde {
            Pde::LaplaceNeumann => 1,
            Pde::StokesDirichlet => 3,
        };
        let nr = per * proxies.len() + 1;
        let mut m = DMatrix::zeros(nr, cols.len());
        match self.pde {
            Pde::LaplaceNeumann => {
                for (jj, &i) in cols.iter().enumerate() {
                    let x = b.positions()[i];
                    let nx = b.normals()[i];
                    for (k, &p) in proxies.iter().enumerate() {
                        let r = x - p;
                        m[(k, jj)] = proxy_weight * r.dot(nx) / r.norm_sq();
                    }
                    m[(nr - 1, jj)] = 1.0;
                }
            }
            Pde::StokesDirichlet => {
                for (jj, &i) in cols.iter().enumerate() {
                    let (ni, a) = (i >> 1, i & 1);
                    let x = b.positions()[ni];
                    let nx = b.normals()[ni];
                    let ra = |r: Point| if a == 0 { r.x } else { r.y };
                    for (k, &p) in proxies.iter().enumerate() {
                        let r = x - p;
                        let r2 = r.norm_sq();
                        let s = proxy_weight * ra(r) / (r2 * r2);
                        m[(3 * k, jj)] = s * r.x * r.x;
                        m[(3 * k + 1, jj)] = s * r.x * r.y;
                        m[(3 * k + 2, jj)] = s * r.y * r.y;
                    }
                    m[(nr - 1, jj)] = ra(nx);
                }
            }
        }
        m
    }

    fn check_targets(&self, targets: &[Point]) -> Result<(), KernelError> {
        for t in targets {
            if !self.boundary.point_in_domain(*t) {
                return Err(KernelError::TargetOutside { x: t.x, y: t.y });
            }
        }
        Ok(())
    }

    /// Dense forward block mapping the density on `cols` to the solution at `targets`
    /// (one row per target for Laplace, two for Stokes).
    pub fn forward_block(&self, targets: &[Point], cols: &[usize]) -> Result<DMatrix<f64>, KernelError> {
        self.check_targets(targets)?;
        let dpn = self.dpn();
        let mut m = DMatrix::zeros(dpn * targets.len(), cols.len());
        for (jj, &j) in cols.iter().enumerate() {
            for (it, &t) in targets.iter().enumerate() {
                match self.pde {
                    Pde::LaplaceNeumann => m[(it, jj)] = self.forward_laplace(t, j),
                    Pde::StokesDirichlet => {
                        let v = self.forward_stokes(t, j);
                        m[(2 * it, jj)] = v.x;
                        m[(2 * it + 1, jj)] = v.y;
                    }
                }
            }
        }
        Ok(m)
    }

    #[inline]
    fn forward_laplace(&self, t: Point, j: usize) -> f64 {
        let b = self.boundary;
        -INV_2PI * (t - b.positions()[j]).norm().ln() * b.weights()[j]
    }

    #[inline]
    fn forward_stokes(&self, t: Point, j: usize) -> Point {
        let b = self.boundary;
        let (nj, c) = (j >> 1, j & 1);
        let r = t - b.positions()[nj];
        let r2 = r.norm_sq();
        let rc = if c == 0 { r.x } else { r.y };
        let s = r.dot(b.normals()[nj]) * rc / (PI * r2 * r2) * b.weights()[nj];
        r * s
    }

    /// Solution at interior `targets` from density `mu` (and `lambda` when augmented),
    /// flattened like [`Kernel::forward_block`] rows.
    pub fn evaluate(&self, targets: &[Point], mu: &[f64], lambda: &[f64]) -> Result<Vec<f64>, KernelError> {
        self.check_targets(targets)?;
        let n = self.n_dofs();
        if mu.len() != n {
            return Err(KernelError::BadLength {
                got: mu.len(),
                expected: n,
            });
        }
        if lambda.len() != self.n_aug() {
            return Err(KernelError::BadLength {
                got: lambda.len(),
                expected: self.n_aug(),
            });
        }
        let vals: Vec<Vec<f64>> = targets
            .par_iter()
            .map(|&t| match self.pde {
                Pde::LaplaceNeumann => vec![(0..n).map(|j| self.forward_laplace(t, j) * mu[j]).sum()],
                Pde::StokesDirichlet => {
                    let mut u = Point::default();
                    for (j, &m) in mu.iter().enumerate() {
                        u += self.forward_stokes(t, j) * m;
                    }
                    vec![u.x, u.y]
                }
            })
            .collect();
        let mut out: Vec<f64> = vals.into_iter().flatten().collect();
        if !lambda.is_empty() {
            let h = h_at(targets, &self.boundary.hole_centers());
            let hl = h * DVector::from_column_slice(lambda);
            for (o, v) in out.iter_mut().zip(hl.iter()) {
                *o += v;
            }
        }
        Ok(out)
    }

    /// Compatibility integral of the data: `∮ f` (Laplace) or `∮ f·n` (Stokes).
    pub fn data_flux(&self, f: &[f64]) -> f64 {
        let b = self.boundary;
        match self.pde {
            Pde::LaplaceNeumann => f.iter().zip(b.weights()).map(|(a, w)| a * w).sum(),
            Pde::StokesDirichlet => (0..b.n_nodes())
                .map(|i| (f[2 * i] * b.normals()[i].x + f[2 * i + 1] * b.normals()[i].y) * b.weights()[i])
                .sum(),
        }
    }
}

/// Stokeslet and rotlet columns evaluated at `targets` (two rows each).
pub fn h_at(targets: &[Point], centers: &[Point]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(2 * targets.len(), 3 * centers.len());
    for (k, &c) in centers.iter().enumerate() {
        for (i, &x) in targets.iter().enumerate() {
            let r = x - c;
            let r2 = r.norm_sq();
            let lg = -0.5 * r2.ln();
            m[(2 * i, 3 * k)] = INV_4PI * (lg + r.x * r.x / r2);
            m[(2 * i + 1, 3 * k)] = INV_4PI * (r.x * r.y / r2);
            m[(2 * i, 3 * k + 1)] = INV_4PI * (r.x * r.y / r2);
            m[(2 * i + 1, 3 * k + 1)] = INV_4PI * (lg + r.y * r.y / r2);
            m[(2 * i, 3 * k + 2)] = -INV_4PI * r.y / r2;
            m[(2 * i + 1, 3 * k + 2)] = INV_4PI * r.x / r2;
        }
    }
    m
}

/// `count` points evenly spaced on the circle of `radius` around `center`, with
/// their trapezoid weights `2πr / count`.
pub fn proxy_nodes(center: Point, radius: f64, count: usize) -> (Vec<Point>, Vec<f64>) {
    let pts = (0..count)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / count as f64;
            center + Point::new(radius * a.cos(), radius * a.sin())
        })
        .collect();
    (pts, vec![2.0 * PI * radius / count as f64; count])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::Lu;
    use crate::geometry::presets;

    fn solve_dense(k: &Kernel, f: &[f64]) -> Vec<f64> {
        let a = k.assemble_full();
        let n = a.nrows();
        let mut rhs = DMatrix::zeros(n, 1);
        for (i, v) in f.iter().enumerate() {
            rhs[(i, 0)] = *v;
        }
        Lu::factor(&a).unwrap().solve(&rhs).as_slice().to_vec()
    }

    #[test]
    fn laplace_diagonal_matches_off_diagonal_limit_on_circle() {
        // on a circle the off-diagonal kernel is the constant 1/(4π R); the spline
        // curvature at knots is second-order accurate
        let gap = |n: usize| {
            let b = Boundary::build(&presets::circle(n)).unwrap();
            let k = Kernel::new(Pde::LaplaceNeumann, &b);
            let off = (k.entry(0, 1) - b.weights()[1]) / b.weights()[1];
            let diag = (k.entry(1, 1) - b.weights()[1] - k.jump) / b.weights()[1];
            assert!((off - 0.25 / PI).abs() < 1e-12);
            (off - diag).abs() / off
        };
        let (e1, e2) = (gap(256), gap(512));
        assert!(e2 < 1e-4 && e2 < e1 / 3.5, "{e1:e} {e2:e}");
    }

    #[test]
    fn stokes_diagonal_matches_limit() {
        let b = Boundary::build(&presets::starfish(2048)).unwrap();
        let k = Kernel::new(Pde::StokesDirichlet, &b);
        for (a, c) in [(0, 0), (0, 1), (1, 1)] {
            let d = k.entry(2 * 100 + a, 2 * 100 + c) / b.weights()[100];
            let near = k.entry(2 * 100 + a, 2 * 101 + c) / b.weights()[101];
            let jump = if a == c { k.jump / b.weights()[100] } else { 0.0 };
            assert!((d - jump - near).abs() < 1e-2 * (1.0 + near.abs()), "{a}{c}");
        }
    }

    /// Gauss: the double-layer kernel integrates to 1/2 over the boundary for a
    /// source on the boundary.
    fn gauss_error(n: usize) -> f64 {
        let b = Boundary::build(&presets::starfish(n)).unwrap();
        let k = Kernel::new(Pde::LaplaceNeumann, &b);
        let mut worst: f64 = 0.0;
        for j in [0, n / 7, n / 2] {
            let s: f64 = (0..n)
                .map(|i| {
                    let jump = if i == j { k.jump } else { 0.0 };
                    (k.entry(i, j) - b.weights()[j] - jump) * b.weights()[i]
                })
                .sum::<f64>()
                / b.weights()[j];
            worst = worst.max((s - 0.5).abs());
        }
        worst
    }

    #[test]
    fn laplace_gauss_identity_converges() {
        let (e1, e2) = (gauss_error(800), gauss_error(1600));
        // second order: nodes on knots see the jump in the spline's third derivative
        assert!(e2 < 5e-6 && e2 < e1 / 3.5, "{e1:e} {e2:e}");
    }

    fn harmonic_error(n: usize) -> f64 {
        // f = -n_1 is the inward derivative of u = x_1
        let b = Boundary::build(&presets::starfish(n)).unwrap();
        let k = Kernel::new(Pde::LaplaceNeumann, &b);
        let f: Vec<f64> = b.normals().iter().map(|n| -n.x).collect();
        let mu = solve_dense(&k, &f);
        let pts = [Point::new(0.1, 0.2), Point::new(-0.3, 0.1), Point::new(0.5, -0.2)];
        let u = k.evaluate(&pts, &mu, &[]).unwrap();
        let c = u[0] - pts[0].x;
        u.iter()
            .zip(&pts)
            .map(|(v, p)| (v - p.x - c).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn laplace_harmonic_solution() {
        let (e1, e2) = (harmonic_error(400), harmonic_error(800));
        assert!(e2 < 3e-7 && e2 < e1 / 6.0, "{e1:e} {e2:e}");
    }

    fn nullspace_residual(n: usize) -> f64 {
        let b = Boundary::build(&presets::starfish_with_holes(n, 0.5, 3.0)).unwrap();
        let k = Kernel::new(Pde::StokesDirichlet, &b);
        let psi = k.psi_matrix();
        let mut worst: f64 = 0.0;
        for r in 0..psi.nrows() {
            let v: Vec<f64> = (0..psi.ncols())
                .map(|j| psi[(r, j)] / b.weights()[j / 2])
                .collect();
            let kv = k.matvec(&v);
            let inf = |x: &[f64]| x.iter().fold(0.0, |m: f64, a| m.max(a.abs()));
            worst = worst.max(inf(&kv) / inf(&v));
        }
        worst
    }

    #[test]
    fn stokes_nullspace_of_top_left_block() {
        let (e1, e2) = (nullspace_residual(600), nullspace_residual(1200));
        assert!(e2 < 1e-3 && e2 < e1 / 3.5, "{e1:e} {e2:e}");
    }

    #[test]
    fn stokes_couette_flow() {
        let (r1, r2, w1, w2) = (0.5, 1.0, -2.0, 1.0);
        // u = (A + B/r^2) x^perp with rigid rotation on both circles
        let bb = (w1 - w2) / (1.0 / (r1 * r1) - 1.0 / (r2 * r2));
        let aa = w2 - bb / (r2 * r2);
        let exact = |p: Point| p.perp() * (aa + bb / p.norm_sq());
        let b = Boundary::build(&presets::annulus(1200, r1, r2)).unwrap();
        let k = Kernel::new(Pde::StokesDirichlet, &b);
        let mut f = Vec::new();
        for (i, &x) in b.positions().iter().enumerate() {
            let om = if b.curve_index_of(i) == 0 { w2 } else { w1 };
            f.push(-x.y * om);
            f.push(x.x * om);
        }
        let sol = solve_dense(&k, &f);
        let n = k.n_dofs();
        let pts = [Point::new(0.7, 0.1), Point::new(-0.2, 0.68), Point::new(-0.6, -0.4)];
        let u = k.evaluate(&pts, &sol[..n], &sol[n..]).unwrap();
        for (i, p) in pts.iter().enumerate() {
            let e = exact(*p);
            assert!((u[2 * i] - e.x).abs() < 5e-7 && (u[2 * i + 1] - e.y).abs() < 5e-7);
        }
    }

    #[test]
    fn forward_rejects_outside_targets() {
        let b = Boundary::build(&presets::circle(64)).unwrap();
        let k = Kernel::new(Pde::LaplaceNeumann, &b);
        assert!(k.forward_block(&[Point::new(3.0, 0.0)], &[0]).is_err());
        assert!(k.evaluate(&[Point::new(0.0, 0.0)], &[0.0; 3], &[]).is_err());
    }
}
