//! Multiply-connected 2D boundaries built from periodic cubic splines.
//!
//! Every curve is a closed spline through a list of knots. Quadrature nodes are
//! placed uniformly in the spline parameter; the weight of a node is the local
//! arclength element `|γ'(t)| Δt`. The outer curve is oriented counterclockwise
//! and holes clockwise, so the right-hand normal `(y', -x') / |γ'|` always points
//! out of the fluid domain.

use std::f64::consts::PI;
use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Samples per knot interval used by the intersection and containment checks.
const MAX_SAMPLES_PER_SEGMENT: usize = 8;
/// Target sample count per curve for those checks.
const SAMPLE_BUDGET: usize = 4096;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    #[inline]
    pub fn dot(self, other: Point) -> f64 {
        self.x * other.x + self.y * other.y
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    #[inline]
    pub fn norm_sq(self) -> f64 {
        self.x * self.x + self.y * self.y
    }

    /// `(a, b)^⊥ = (-b, a)`.
    #[inline]
    pub fn perp(self) -> Point {
        Point::new(-self.y, self.x)
    }

    #[inline]
    pub fn cross(self, other: Point) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Point {
    type Output = Point;
    #[inline]
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Point {
    #[inline]
    fn add_assign(&mut self, o: Point) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Point {
    type Output = Point;
    #[inline]
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    #[inline]
    fn mul(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }
}

impl Neg for Point {
    type Output = Point;
    #[inline]
    fn neg(self) -> Point {
        Point::new(-self.x, -self.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Outer,
    Hole,
}

/// Stable identifier of a curve; survives perturbations that add or delete other curves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CurveId(pub u32);

impl fmt::Display for CurveId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "curve {}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSpec {
    pub knots: Vec<Point>,
    pub n_nodes: usize,
    pub orientation: Orientation,
}

impl CurveSpec {
    pub fn new(knots: Vec<Point>, n_nodes: usize, orientation: Orientation) -> Self {
        CurveSpec {
            knots,
            n_nodes,
            orientation,
        }
    }

    pub fn translated(&self, by: Point) -> CurveSpec {
        CurveSpec {
            knots: self.knots.iter().map(|&k| k + by).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("curve needs at least 4 knots, got {0}")]
    TooFewKnots(usize),
    #[error("curve has {nodes} nodes but {knots} knots; need nodes >= knots")]
    TooFewNodes { nodes: usize, knots: usize },
    #[error("knot coordinates must be finite")]
    NonFiniteKnot,
    #[error("the first curve must be the outer boundary and all others holes")]
    BadOrientationOrder,
    #[error("{0} intersects itself")]
    SelfIntersecting(CurveId),
    #[error("{a} and {b} overlap or touch (min sample distance {distance:.3e})")]
    Overlap { a: CurveId, b: CurveId, distance: f64 },
    #[error("{curve} is not inside the outer boundary (min sample distance {distance:.3e})")]
    OutsideOuter { curve: CurveId, distance: f64 },
    #[error("unknown {0}")]
    UnknownCurve(CurveId),
    #[error("{0} is the outer boundary and cannot be moved or deleted")]
    NotAHole(CurveId),
    #[error("hole center for {0} is not strictly inside the hole")]
    CenterOutsideHole(CurveId),
}

/// Periodic natural cubic spline through equally spaced knots; knot `j` sits at `t = j`.
#[derive(Clone, Debug)]
struct PeriodicSpline {
    knots: Vec<Point>,
    second: Vec<Point>,
}

impl PeriodicSpline {
    fn new(knots: &[Point]) -> Self {
        let n = knots.len();
        let rhs_x: Vec<f64> = (0..n)
            .map(|j| 6.0 * (knots[(j + 1) % n].x - 2.0 * knots[j].x + knots[(j + n - 1) % n].x))
            .collect();
        let rhs_y: Vec<f64> = (0..n)
            .map(|j| 6.0 * (knots[(j + 1) % n].y - 2.0 * knots[j].y + knots[(j + n - 1) % n].y))
            .collect();
        let mx = solve_cyclic_141(&rhs_x);
        let my = solve_cyclic_141(&rhs_y);
        PeriodicSpline {
            knots: knots.to_vec(),
            second: mx.into_iter().zip(my).map(|(x, y)| Point::new(x, y)).collect(),
        }
    }

    fn period(&self) -> f64 {
        self.knots.len() as f64
    }

    /// Position, first and second derivative at parameter `t` (taken modulo the period).
    fn eval(&self, t: f64) -> (Point, Point, Point) {
        let n = self.knots.len();
        let t = t.rem_euclid(self.period());
        let j = (t.floor() as usize).min(n - 1);
        let u = t - j as f64;
        let v = 1.0 - u;
        let (y0, y1) = (self.knots[j], self.knots[(j + 1) % n]);
        let (m0, m1) = (self.second[j], self.second[(j + 1) % n]);
        let pos = y0 * v + y1 * u + m0 * ((v * v * v - v) / 6.0) + m1 * ((u * u * u - u) / 6.0);
        let d1 = (y1 - y0) + m0 * ((1.0 - 3.0 * v * v) / 6.0) + m1 * ((3.0 * u * u - 1.0) / 6.0);
        let d2 = m0 * v + m1 * u;
        (pos, d1, d2)
    }

    fn sample(&self, per_segment: usize) -> Vec<Point> {
        let m = self.knots.len() * per_segment;
        (0..m)
            .map(|i| self.eval(i as f64 / per_segment as f64).0)
            .collect()
    }
}

/// Solves the cyclic system `M[j-1] + 4 M[j] + M[j+1] = d[j]` (Sherman-Morrison on Thomas).
fn solve_cyclic_141(d: &[f64]) -> Vec<f64> {
    let n = d.len();
    let gamma = -4.0;
    let mut diag = vec![4.0; n];
    diag[0] -= gamma;
    diag[n - 1] -= 1.0 / gamma;
    let x = solve_tridiagonal(&diag, d);
    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = 1.0;
    let z = solve_tridiagonal(&diag, &u);
    let fact = (x[0] + x[n - 1] / gamma) / (1.0 + z[0] + z[n - 1] / gamma);
    x.iter().zip(&z).map(|(xi, zi)| xi - fact * zi).collect()
}

/// Thomas algorithm with unit off-diagonals.
fn solve_tridiagonal(diag: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut x = vec![0.0; n];
    c[0] = 1.0 / diag[0];
    x[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - c[i - 1];
        c[i] = 1.0 / m;
        x[i] = (rhs[i] - x[i - 1]) / m;
    }
    for i in (0..n - 1).rev() {
        x[i] -= c[i] * x[i + 1];
    }
    x
}

#[derive(Clone, Debug)]
pub struct Curve {
    pub id: CurveId,
    pub spec: CurveSpec,
    /// Index of this curve's first node in the boundary-wide node arrays.
    pub offset: usize,
    /// For holes, a point strictly inside the hole (outside the domain).
    pub center: Option<Point>,
    samples: Vec<Point>,
}

impl Curve {
    pub fn n_nodes(&self) -> usize {
        self.spec.n_nodes
    }

    pub fn nodes(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.spec.n_nodes
    }

    pub fn is_hole(&self) -> bool {
        self.spec.orientation == Orientation::Hole
    }
}

/// A discretized multiply-connected boundary. Node data is stored contiguously,
/// curve by curve, with the outer curve first.
#[derive(Clone, Debug)]
pub struct Boundary {
    curves: Vec<Curve>,
    positions: Vec<Point>,
    normals: Vec<Point>,
    weights: Vec<f64>,
    curvatures: Vec<f64>,
    curve_of_node: Vec<u32>,
    next_id: u32,
}

struct Discretized {
    positions: Vec<Point>,
    normals: Vec<Point>,
    weights: Vec<f64>,
    curvatures: Vec<f64>,
    samples: Vec<Point>,
}

fn signed_area(pts: &[Point]) -> f64 {
    let n = pts.len();
    0.5 * (0..n).map(|i| pts[i].cross(pts[(i + 1) % n])).sum::<f64>()
}

/// Reorders knots (keeping the first) so the curve has the orientation its role requires.
fn oriented_knots(spec: &CurveSpec) -> Vec<Point> {
    let area = signed_area(&spec.knots);
    let want_ccw = spec.orientation == Orientation::Outer;
    if (area > 0.0) == want_ccw {
        spec.knots.clone()
    } else {
        let mut k = Vec::with_capacity(spec.knots.len());
        k.push(spec.knots[0]);
        k.extend(spec.knots[1..].iter().rev());
        k
    }
}

fn validate_spec(spec: &CurveSpec) -> Result<(), GeometryError> {
    if spec.knots.len() < 4 {
        return Err(GeometryError::TooFewKnots(spec.knots.len()));
    }
    if spec.n_nodes < spec.knots.len() {
        return Err(GeometryError::TooFewNodes {
            nodes: spec.n_nodes,
            knots: spec.knots.len(),
        });
    }
    if spec.knots.iter().any(|k| !k.is_finite()) {
        return Err(GeometryError::NonFiniteKnot);
    }
    Ok(())
}

fn discretize(spec: &CurveSpec) -> Discretized {
    let knots = oriented_knots(spec);
    let spline = PeriodicSpline::new(&knots);
    let n = spec.n_nodes;
    let dt = spline.period() / n as f64;
    let mut out = Discretized {
        positions: Vec::with_capacity(n),
        normals: Vec::with_capacity(n),
        weights: Vec::with_capacity(n),
        curvatures: Vec::with_capacity(n),
        samples: spline.sample((SAMPLE_BUDGET / spec.knots.len()).clamp(1, MAX_SAMPLES_PER_SEGMENT)),
    };
    for i in 0..n {
        let (p, d1, d2) = spline.eval(i as f64 * dt);
        let speed = d1.norm();
        out.positions.push(p);
        out.normals.push(Point::new(d1.y / speed, -d1.x / speed));
        out.weights.push(speed * dt);
        out.curvatures.push(d1.cross(d2) / (speed * speed * speed));
    }
    out
}

fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = (p2 - p1).cross(q1 - p1);
    let d2 = (p2 - p1).cross(q2 - p1);
    let d3 = (q2 - q1).cross(p1 - q1);
    let d4 = (q2 - q1).cross(p2 - q1);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let on = |a: Point, b: Point, c: Point, d: f64| {
        d == 0.0
            && c.x >= a.x.min(b.x)
            && c.x <= a.x.max(b.x)
            && c.y >= a.y.min(b.y)
            && c.y <= a.y.max(b.y)
    };
    on(p1, p2, q1, d1) || on(p1, p2, q2, d2) || on(q1, q2, p1, d3) || on(q1, q2, p2, d4)
}

/// Closed polygons as segment lists, bucketed on a uniform grid so crossing
/// tests only compare nearby segments.
struct SegmentGrid {
    lo: Point,
    cell: f64,
    dims: (usize, usize),
    buckets: std::collections::HashMap<(usize, usize), Vec<(usize, usize)>>,
}

impl SegmentGrid {
    fn new(polys: &[&[Point]]) -> Self {
        let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        let mut total_len = 0.0;
        let mut count = 0usize;
        for poly in polys {
            for i in 0..poly.len() {
                let p = poly[i];
                lo = Point::new(lo.x.min(p.x), lo.y.min(p.y));
                hi = Point::new(hi.x.max(p.x), hi.y.max(p.y));
                total_len += (poly[(i + 1) % poly.len()] - p).norm();
                count += 1;
            }
        }
        let span = (hi.x - lo.x).max(hi.y - lo.y).max(f64::MIN_POSITIVE);
        let cell = (2.0 * total_len / count.max(1) as f64).max(span / 4096.0);
        let dims = (
            ((hi.x - lo.x) / cell) as usize + 1,
            ((hi.y - lo.y) / cell) as usize + 1,
        );
        let mut g = SegmentGrid {
            lo,
            cell,
            dims,
            buckets: Default::default(),
        };
        for (pi, poly) in polys.iter().enumerate() {
            for i in 0..poly.len() {
                let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
                let (x0, y0) = g.cell_of(Point::new(a.x.min(b.x), a.y.min(b.y)));
                let (x1, y1) = g.cell_of(Point::new(a.x.max(b.x), a.y.max(b.y)));
                for cx in x0..=x1 {
                    for cy in y0..=y1 {
                        g.buckets.entry((cx, cy)).or_default().push((pi, i));
                    }
                }
            }
        }
        g
    }

    fn cell_of(&self, p: Point) -> (usize, usize) {
        (
            (((p.x - self.lo.x) / self.cell) as usize).min(self.dims.0 - 1),
            (((p.y - self.lo.y) / self.cell) as usize).min(self.dims.1 - 1),
        )
    }

    /// Whether any two non-adjacent segments cross; `accept` filters polygon pairs.
    fn any_crossing(&self, polys: &[&[Point]], accept: impl Fn(usize, usize) -> bool) -> bool {
        for segs in self.buckets.values() {
            for (x, &(pa, i)) in segs.iter().enumerate() {
                for &(pb, j) in &segs[x + 1..] {
                    if !accept(pa, pb) {
                        continue;
                    }
                    if pa == pb {
                        let n = polys[pa].len();
                        let d = i.abs_diff(j);
                        if d <= 1 || d == n - 1 {
                            continue;
                        }
                    }
                    let (p, q) = (polys[pa], polys[pb]);
                    if segments_intersect(p[i], p[(i + 1) % p.len()], q[j], q[(j + 1) % q.len()]) {
                        return true;
                    }
                }
            }
        }
        false
    }
}

fn self_intersects(poly: &[Point]) -> bool {
    let polys = [poly];
    SegmentGrid::new(&polys).any_crossing(&polys, |_, _| true)
}

fn polygons_cross(p: &[Point], q: &[Point]) -> bool {
    let polys = [p, q];
    SegmentGrid::new(&polys).any_crossing(&polys, |a, b| a != b)
}

fn min_distance(p: &[Point], q: &[Point]) -> f64 {
    let mut best = f64::INFINITY;
    for &a in p {
        for &b in q {
            best = best.min((a - b).norm_sq());
        }
    }
    best.sqrt()
}

/// Winding number of a closed polygon around `x`.
fn winding_number(poly: &[Point], x: Point) -> i32 {
    let n = poly.len();
    let mut w = 0;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if a.y <= x.y {
            if b.y > x.y && (b - a).cross(x - a) > 0.0 {
                w += 1;
            }
        } else if b.y <= x.y && (b - a).cross(x - a) < 0.0 {
            w -= 1;
        }
    }
    w
}

fn distance_to_polygon(poly: &[Point], x: Point) -> f64 {
    let n = poly.len();
    let mut best = f64::INFINITY;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        let ab = b - a;
        let len2 = ab.norm_sq();
        let t = if len2 > 0.0 {
            ((x - a).dot(ab) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        best = best.min((a + ab * t - x).norm());
    }
    best
}

fn polygon_centroid(pts: &[Point]) -> Point {
    let n = pts.len();
    let mut area = 0.0;
    let mut c = Point::default();
    for i in 0..n {
        let (a, b) = (pts[i], pts[(i + 1) % n]);
        let cr = a.cross(b);
        area += cr;
        c += (a + b) * cr;
    }
    c * (1.0 / (3.0 * area))
}

impl Boundary {
    pub fn build(specs: &[CurveSpec]) -> Result<Boundary, GeometryError> {
        let with_ids: Vec<(CurveId, CurveSpec, Option<Point>)> = specs
            .iter()
            .enumerate()
            .map(|(i, s)| (CurveId(i as u32), s.clone(), None))
            .collect();
        Self::assemble(with_ids, specs.len() as u32)
    }

    fn assemble(
        curves_in: Vec<(CurveId, CurveSpec, Option<Point>)>,
        next_id: u32,
    ) -> Result<Boundary, GeometryError> {
        for (i, (_, spec, _)) in curves_in.iter().enumerate() {
            validate_spec(spec)?;
            let want = if i == 0 {
                Orientation::Outer
            } else {
                Orientation::Hole
            };
            if spec.orientation != want {
                return Err(GeometryError::BadOrientationOrder);
            }
        }
        let mut b = Boundary {
            curves: Vec::with_capacity(curves_in.len()),
            positions: Vec::new(),
            normals: Vec::new(),
            weights: Vec::new(),
            curvatures: Vec::new(),
            curve_of_node: Vec::new(),
            next_id,
        };
        for (ci, (id, spec, center)) in curves_in.into_iter().enumerate() {
            let d = discretize(&spec);
            if self_intersects(&d.samples) {
                return Err(GeometryError::SelfIntersecting(id));
            }
            let offset = b.positions.len();
            let center = if spec.orientation == Orientation::Hole {
                let c = center.unwrap_or_else(|| polygon_centroid(&d.positions));
                if winding_number(&d.positions, c) == 0 {
                    return Err(GeometryError::CenterOutsideHole(id));
                }
                Some(c)
            } else {
                None
            };
            b.positions.extend_from_slice(&d.positions);
            b.normals.extend_from_slice(&d.normals);
            b.weights.extend_from_slice(&d.weights);
            b.curvatures.extend_from_slice(&d.curvatures);
            b.curve_of_node
                .extend(std::iter::repeat_n(ci as u32, spec.n_nodes));
            b.curves.push(Curve {
                id,
                spec,
                offset,
                center,
                samples: d.samples,
            });
        }
        b.check_layout()?;
        Ok(b)
    }

    /// Holes must lie inside the outer curve and be pairwise disjoint.
    fn check_layout(&self) -> Result<(), GeometryError> {
        let outer = &self.curves[0];
        for hole in &self.curves[1..] {
            if polygons_cross(&outer.samples, &hole.samples)
                || winding_number(&outer.samples, hole.samples[0]) == 0
            {
                return Err(GeometryError::OutsideOuter {
                    curve: hole.id,
                    distance: min_distance(&outer.samples, &hole.samples),
                });
            }
        }
        for (i, a) in self.curves.iter().enumerate().skip(1) {
            for b in &self.curves[i + 1..] {
                if polygons_cross(&a.samples, &b.samples)
                    || winding_number(&a.samples, b.samples[0]) != 0
                    || winding_number(&b.samples, a.samples[0]) != 0
                {
                    return Err(GeometryError::Overlap {
                        a: a.id,
                        b: b.id,
                        distance: min_distance(&a.samples, &b.samples),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn curves(&self) -> &[Curve] {
        &self.curves
    }

    pub fn curve(&self, id: CurveId) -> Option<&Curve> {
        self.curves.iter().find(|c| c.id == id)
    }

    pub fn holes(&self) -> impl Iterator<Item = &Curve> {
        self.curves.iter().filter(|c| c.is_hole())
    }

    pub fn n_holes(&self) -> usize {
        self.curves.len() - 1
    }

    pub fn hole_centers(&self) -> Vec<Point> {
        self.holes().map(|c| c.center.expect("holes carry a center")).collect()
    }

    pub fn n_nodes(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    pub fn normals(&self) -> &[Point] {
        &self.normals
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn curvatures(&self) -> &[f64] {
        &self.curvatures
    }

    /// Index into [`Boundary::curves`] of the curve owning `node`.
    pub fn curve_index_of(&self, node: usize) -> usize {
        self.curve_of_node[node] as usize
    }

    /// Scalar DOFs of `node` when each node carries `dofs_per_node` unknowns.
    pub fn dof_range(node: usize, dofs_per_node: usize) -> std::ops::Range<usize> {
        node * dofs_per_node..(node + 1) * dofs_per_node
    }

    pub fn arclength(&self, curve: usize) -> f64 {
        self.weights[self.curves[curve].nodes()].iter().sum()
    }

    /// Axis-aligned bounding box `(min, max)` of all nodes.
    pub fn bounding_box(&self) -> (Point, Point) {
        let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.positions {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        (lo, hi)
    }

    /// True iff `x` is inside the outer curve, outside every hole, and farther than
    /// `1e-12` from every node polygon.
    pub fn point_in_domain(&self, x: Point) -> bool {
        if !x.is_finite() {
            return false;
        }
        for (i, c) in self.curves.iter().enumerate() {
            let poly = &self.positions[c.nodes()];
            let w = winding_number(poly, x);
            let inside = w != 0;
            if (i == 0) != inside {
                return false;
            }
        }
        self.curves
            .iter()
            .all(|c| distance_to_polygon(&self.positions[c.nodes()], x) > 1e-12)
    }

    /// Distance from `x` to the nearest boundary node.
    pub fn distance_to_nodes(&self, x: Point) -> f64 {
        self.positions
            .iter()
            .map(|p| (*p - x).norm_sq())
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }

    /// Largest distance between consecutive nodes on any curve.
    pub fn max_node_spacing(&self) -> f64 {
        let mut h: f64 = 0.0;
        for c in &self.curves {
            let pts = &self.positions[c.nodes()];
            for i in 0..pts.len() {
                h = h.max((pts[(i + 1) % pts.len()] - pts[i]).norm());
            }
        }
        h
    }

    pub fn apply_perturbation(
        &self,
        p: &Perturbation,
    ) -> Result<(Boundary, PerturbationDelta), GeometryError> {
        let mut curves: Vec<(CurveId, CurveSpec, Option<Point>)> = self
            .curves
            .iter()
            .map(|c| (c.id, c.spec.clone(), c.center))
            .collect();
        let mut touched: Vec<CurveId> = Vec::new();
        let mut deleted: Vec<CurveId> = Vec::new();
        let mut next_id = self.next_id;
        for edit in &p.edits {
            match edit {
                Edit::MoveHole { curve, translation } => {
                    let slot = hole_slot(&mut curves, *curve)?;
                    slot.1 = slot.1.translated(*translation);
                    slot.2 = slot.2.map(|c| c + *translation);
                    touched.push(*curve);
                }
                Edit::ReshapeHole { curve, knots, center } => {
                    let slot = hole_slot(&mut curves, *curve)?;
                    slot.1.knots = knots.clone();
                    slot.2 = *center;
                    touched.push(*curve);
                }
                Edit::AddHole { spec, center } => {
                    let id = CurveId(next_id);
                    next_id += 1;
                    curves.push((id, spec.clone(), *center));
                    touched.push(id);
                }
                Edit::DeleteHole { curve } => {
                    hole_slot(&mut curves, *curve)?;
                    curves.retain(|c| c.0 != *curve);
                    deleted.push(*curve);
                }
            }
        }
        if p.edits.is_empty() {
            return Ok((
                self.clone(),
                PerturbationDelta {
                    old_nodes: Vec::new(),
                    new_nodes: Vec::new(),
                    remap: (0..self.n_nodes()).map(Some).collect(),
                },
            ));
        }

        // Curves that are edited get fresh discretizations; others are copied bit for bit.
        let mut out = Boundary {
            curves: Vec::with_capacity(curves.len()),
            positions: Vec::new(),
            normals: Vec::new(),
            weights: Vec::new(),
            curvatures: Vec::new(),
            curve_of_node: Vec::new(),
            next_id,
        };
        let mut remap = vec![None; self.n_nodes()];
        let mut old_nodes = Vec::new();
        let mut new_nodes = Vec::new();
        for old in &self.curves {
            if deleted.contains(&old.id) || touched.contains(&old.id) {
                old_nodes.extend(old.nodes());
            }
        }
        for (ci, (id, spec, center)) in curves.into_iter().enumerate() {
            let offset = out.positions.len();
            let old = self.curve(id);
            match old.filter(|_| !touched.contains(&id)) {
                Some(old) => {
                    let r = old.nodes();
                    for (k, i) in r.clone().enumerate() {
                        remap[i] = Some(offset + k);
                    }
                    out.positions.extend_from_slice(&self.positions[r.clone()]);
                    out.normals.extend_from_slice(&self.normals[r.clone()]);
                    out.weights.extend_from_slice(&self.weights[r.clone()]);
                    out.curvatures.extend_from_slice(&self.curvatures[r]);
                    out.curves.push(Curve {
                        offset,
                        ..old.clone()
                    });
                }
                None => {
                    validate_spec(&spec)?;
                    let d = discretize(&spec);
                    if self_intersects(&d.samples) {
                        return Err(GeometryError::SelfIntersecting(id));
                    }
                    let c = center.unwrap_or_else(|| polygon_centroid(&d.positions));
                    if winding_number(&d.positions, c) == 0 {
                        return Err(GeometryError::CenterOutsideHole(id));
                    }
                    new_nodes.extend(offset..offset + spec.n_nodes);
                    out.positions.extend_from_slice(&d.positions);
                    out.normals.extend_from_slice(&d.normals);
                    out.weights.extend_from_slice(&d.weights);
                    out.curvatures.extend_from_slice(&d.curvatures);
                    out.curves.push(Curve {
                        id,
                        spec,
                        offset,
                        center: Some(c),
                        samples: d.samples,
                    });
                }
            }
            let n = out.curves[ci].spec.n_nodes;
            out.curve_of_node.extend(std::iter::repeat_n(ci as u32, n));
        }
        out.check_layout()?;
        Ok((
            out,
            PerturbationDelta {
                old_nodes,
                new_nodes,
                remap,
            },
        ))
    }
}

fn hole_slot(
    curves: &mut [(CurveId, CurveSpec, Option<Point>)],
    id: CurveId,
) -> Result<&mut (CurveId, CurveSpec, Option<Point>), GeometryError> {
    let slot = curves
        .iter_mut()
        .find(|c| c.0 == id)
        .ok_or(GeometryError::UnknownCurve(id))?;
    if slot.1.orientation != Orientation::Hole {
        return Err(GeometryError::NotAHole(id));
    }
    Ok(slot)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Edit {
    MoveHole {
        curve: CurveId,
        translation: Point,
    },
    /// Replace a hole's knots (deformation or placement); `center` defaults to the centroid.
    ReshapeHole {
        curve: CurveId,
        knots: Vec<Point>,
        center: Option<Point>,
    },
    AddHole {
        spec: CurveSpec,
        center: Option<Point>,
    },
    DeleteHole {
        curve: CurveId,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub edits: Vec<Edit>,
}

/// Node-level bookkeeping of a perturbation.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationDelta {
    /// Nodes of the old boundary that moved or disappeared.
    pub old_nodes: Vec<usize>,
    /// Nodes of the new boundary that are new or moved.
    pub new_nodes: Vec<usize>,
    /// Old node index to new node index, for nodes that are bitwise unchanged.
    pub remap: Vec<Option<usize>>,
}

impl PerturbationDelta {
    pub fn is_empty(&self) -> bool {
        self.old_nodes.is_empty() && self.new_nodes.is_empty()
    }

    /// DOFs (old numbering) of nodes that moved or were removed.
    pub fn old_dofs(&self, dofs_per_node: usize) -> Vec<usize> {
        self.old_nodes
            .iter()
            .flat_map(|&n| Boundary::dof_range(n, dofs_per_node))
            .collect()
    }

    /// DOFs (new numbering) of nodes that moved or were added.
    pub fn new_dofs(&self, dofs_per_node: usize) -> Vec<usize> {
        self.new_nodes
            .iter()
            .flat_map(|&n| Boundary::dof_range(n, dofs_per_node))
            .collect()
    }

    /// Positions of every modified node, before and after the edit.
    pub fn modified_positions(&self, old: &Boundary, new: &Boundary) -> Vec<Point> {
        self.old_nodes
            .iter()
            .map(|&i| old.positions()[i])
            .chain(self.new_nodes.iter().map(|&i| new.positions()[i]))
            .collect()
    }
}

/// Closed path along which holes travel: the outer curve's spline scaled about the origin.
#[derive(Clone, Debug)]
pub struct HolePath {
    spline: PeriodicSpline,
}

impl HolePath {
    pub fn scaled(outer_knots: &[Point], scale: f64) -> Self {
        let knots: Vec<Point> = outer_knots.iter().map(|&k| k * scale).collect();
        HolePath {
            spline: PeriodicSpline::new(&knots),
        }
    }

    /// Point on the path at angle-like parameter `theta` (period `2π`).
    pub fn position(&self, theta: f64) -> Point {
        let t = theta.rem_euclid(2.0 * PI) / (2.0 * PI) * self.spline.period();
        self.spline.eval(t).0
    }
}

/// Named geometries.
pub mod presets {
    use super::*;

    pub const STARFISH_ARMS: usize = 5;
    pub const STARFISH_AMPLITUDE: f64 = 0.2;
    pub const STARFISH_KNOTS: usize = 20;
    /// Holes are starfish at this fraction of the outer size.
    pub const HOLE_SCALE: f64 = 0.16;
    /// Holes travel on the outer curve scaled by this factor.
    pub const PATH_SCALE: f64 = 0.7;

    pub fn circle_knots(center: Point, radius: f64, count: usize) -> Vec<Point> {
        (0..count)
            .map(|j| {
                let a = 2.0 * PI * j as f64 / count as f64;
                center + Point::new(radius * a.cos(), radius * a.sin())
            })
            .collect()
    }

    pub fn starfish_knots(center: Point, scale: f64) -> Vec<Point> {
        (0..STARFISH_KNOTS)
            .map(|j| {
                let a = 2.0 * PI * j as f64 / STARFISH_KNOTS as f64;
                let r = scale * (1.0 + STARFISH_AMPLITUDE * (STARFISH_ARMS as f64 * a).cos());
                center + Point::new(r * a.cos(), r * a.sin())
            })
            .collect()
    }

    /// One knot per node, so the spline agrees with the circle to rounding.
    pub fn circle(n_nodes: usize) -> Vec<CurveSpec> {
        let knots = circle_knots(Point::default(), 1.0, n_nodes);
        vec![CurveSpec::new(knots, n_nodes, Orientation::Outer)]
    }

    /// Concentric circles; two thirds of the nodes on the outer circle.
    pub fn annulus(n_nodes: usize, inner_radius: f64, outer_radius: f64) -> Vec<CurveSpec> {
        let n_outer = (2 * n_nodes).div_ceil(3);
        let n_inner = n_nodes - n_outer;
        let o = Point::default();
        vec![
            CurveSpec::new(
                circle_knots(o, outer_radius, n_outer),
                n_outer,
                Orientation::Outer,
            ),
            CurveSpec::new(
                circle_knots(o, inner_radius, n_inner),
                n_inner,
                Orientation::Hole,
            ),
        ]
    }

    pub fn hole_path() -> HolePath {
        HolePath::scaled(&starfish_knots(Point::default(), 1.0), PATH_SCALE)
    }

    /// Node counts for the starfish family: 2/3 outer, 1/6 per hole.
    pub fn starfish_split(n_nodes: usize) -> (usize, usize) {
        let n_hole = n_nodes / 6;
        (n_nodes - 2 * n_hole, n_hole)
    }

    pub fn starfish_hole(theta: f64, n_nodes: usize) -> CurveSpec {
        let c = hole_path().position(theta);
        CurveSpec::new(starfish_knots(c, HOLE_SCALE), n_nodes, Orientation::Hole)
    }

    /// Starfish outer boundary with two starfish holes placed on the hole path at
    /// parameters `theta1` and `theta2`.
    pub fn starfish_with_holes(n_nodes: usize, theta1: f64, theta2: f64) -> Vec<CurveSpec> {
        let (n_outer, n_hole) = starfish_split(n_nodes);
        starfish_with_sized_holes(n_outer, n_hole, theta1, theta2)
    }

    /// As [`starfish_with_holes`] with explicit node counts.
    pub fn starfish_with_sized_holes(n_outer: usize, n_hole: usize, theta1: f64, theta2: f64) -> Vec<CurveSpec> {
        vec![
            CurveSpec::new(
                starfish_knots(Point::default(), 1.0),
                n_outer,
                Orientation::Outer,
            ),
            starfish_hole(theta1, n_hole),
            starfish_hole(theta2, n_hole),
        ]
    }

    pub fn starfish(n_nodes: usize) -> Vec<CurveSpec> {
        vec![CurveSpec::new(
            starfish_knots(Point::default(), 1.0),
            n_nodes,
            Orientation::Outer,
        )]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_circle(knots: usize, n: usize) -> Boundary {
        Boundary::build(&[CurveSpec::new(
            presets::circle_knots(Point::default(), 1.0, knots),
            n,
            Orientation::Outer,
        )])
        .unwrap()
    }

    #[test]
    fn circle_from_eight_knots_has_circumference_close_to_two_pi() {
        let b = unit_circle(8, 256);
        // a periodic cubic spline through 8 samples shrinks the circle by about 6.5e-4
        let len = b.arclength(0);
        assert!((len - 2.0 * PI).abs() < 5e-3, "len = {len}");
        let fine = unit_circle(64, 256).arclength(0);
        assert!((fine - 2.0 * PI).abs() < 1e-5, "len = {fine}");
    }

    #[test]
    fn arclength_converges_under_refinement() {
        let lens: Vec<f64> = [512, 1024, 2048]
            .iter()
            .map(|&n| {
                Boundary::build(&presets::starfish(n))
                    .unwrap()
                    .arclength(0)
            })
            .collect();
        let e1 = (lens[0] - lens[1]).abs();
        let e2 = (lens[1] - lens[2]).abs();
        assert!(e2 <= e1 / 4.0 || e2 < 1e-13, "e1={e1:e} e2={e2:e}");
        assert!((lens[1] - lens[2]).abs() / lens[2] < 1e-8);
    }

    #[test]
    fn normals_are_unit_and_orthogonal_to_tangents() {
        let b = Boundary::build(&presets::starfish_with_holes(600, 0.3, 3.5)).unwrap();
        let spline = PeriodicSpline::new(&oriented_knots(&b.curves()[0].spec));
        for (i, n) in b.normals().iter().enumerate() {
            assert!((n.norm() - 1.0).abs() < 1e-12);
            if i < b.curves()[0].n_nodes() {
                let t = i as f64 * spline.period() / b.curves()[0].n_nodes() as f64;
                let d = spline.eval(t).1;
                assert!(n.dot(d) / d.norm() < 1e-10);
            }
        }
    }

    #[test]
    fn clockwise_square_hole_has_normals_pointing_into_the_square() {
        let outer = CurveSpec::new(
            presets::circle_knots(Point::default(), 3.0, 16),
            64,
            Orientation::Outer,
        );
        // clockwise square
        let square = vec![
            Point::new(-0.5, 0.5),
            Point::new(0.5, 0.5),
            Point::new(0.5, -0.5),
            Point::new(-0.5, -0.5),
        ];
        let hole = CurveSpec::new(square, 32, Orientation::Hole);
        let b = Boundary::build(&[outer, hole]).unwrap();
        let c = b.hole_centers()[0];
        for i in b.curves()[1].nodes() {
            let to_center = c - b.positions()[i];
            assert!(b.normals()[i].dot(to_center) > 0.0);
        }
        // outer normals point away from the origin
        for i in b.curves()[0].nodes() {
            assert!(b.normals()[i].dot(b.positions()[i]) > 0.0);
        }
    }

    #[test]
    fn starfish_family_layout() {
        let b = Boundary::build(&presets::starfish_with_holes(1200, 0.0, PI)).unwrap();
        assert_eq!(b.curves().len(), 3);
        assert_eq!(b.n_nodes(), 1200);
        let total: usize = b.curves().iter().map(|c| c.n_nodes()).sum();
        assert_eq!(total * 2, b.n_nodes() * 2);
        for (c, center) in b.holes().zip(b.hole_centers()) {
            let poly = &b.positions()[c.nodes()];
            assert_ne!(winding_number(poly, center), 0);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let few = CurveSpec::new(
            presets::circle_knots(Point::default(), 1.0, 3),
            10,
            Orientation::Outer,
        );
        assert_eq!(
            Boundary::build(&[few]).unwrap_err(),
            GeometryError::TooFewKnots(3)
        );
        // figure eight
        let bowtie = vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 1.0),
            Point::new(1.0, -1.0),
            Point::new(-1.0, 1.0),
            Point::new(-1.0, -1.0),
        ];
        let err = Boundary::build(&[CurveSpec::new(bowtie, 50, Orientation::Outer)]).unwrap_err();
        assert!(matches!(err, GeometryError::SelfIntersecting(_)));
    }

    #[test]
    fn point_in_domain_cases() {
        let b = unit_circle(64, 256);
        assert!(b.point_in_domain(Point::new(0.0, 0.0)));
        assert!(!b.point_in_domain(Point::new(2.0, 0.0)));
        let ann = Boundary::build(&presets::annulus(300, 0.5, 1.0)).unwrap();
        assert!(!ann.point_in_domain(Point::new(0.0, 0.0)));
        assert!(ann.point_in_domain(Point::new(0.75, 0.0)));
        assert!(!ann.point_in_domain(ann.positions()[0]));
    }

    #[test]
    fn empty_perturbation_is_identity() {
        let b = Boundary::build(&presets::starfish_with_holes(600, 0.0, PI)).unwrap();
        let (nb, d) = b.apply_perturbation(&Perturbation::default()).unwrap();
        assert!(d.is_empty());
        assert_eq!(nb.positions(), b.positions());
    }

    #[test]
    fn deleting_a_hole_reports_its_dofs() {
        let outer = CurveSpec::new(
            presets::circle_knots(Point::default(), 2.0, 64),
            1024,
            Orientation::Outer,
        );
        let h1 = CurveSpec::new(
            presets::circle_knots(Point::new(-0.8, 0.0), 0.3, 32),
            512,
            Orientation::Hole,
        );
        let h2 = CurveSpec::new(
            presets::circle_knots(Point::new(0.8, 0.0), 0.3, 32),
            512,
            Orientation::Hole,
        );
        let b = Boundary::build(&[outer, h1, h2]).unwrap();
        let p = Perturbation {
            edits: vec![Edit::DeleteHole { curve: CurveId(1) }],
        };
        let (nb, d) = b.apply_perturbation(&p).unwrap();
        assert_eq!(d.old_dofs(2).len(), 1024);
        assert_eq!(nb.hole_centers().len(), 1);
        assert_eq!(nb.curves()[1].id, CurveId(2));
        // surviving hole is bitwise identical
        assert_eq!(
            &nb.positions()[nb.curves()[1].nodes()],
            &b.positions()[b.curves()[2].nodes()]
        );
    }

    #[test]
    fn moving_along_path_changes_only_that_hole() {
        let b = Boundary::build(&presets::starfish_with_holes(1200, 0.0, PI)).unwrap();
        let path = presets::hole_path();
        let shift = path.position(0.2) - path.position(0.0);
        let p = Perturbation {
            edits: vec![Edit::MoveHole {
                curve: CurveId(1),
                translation: shift,
            }],
        };
        let (nb, d) = b.apply_perturbation(&p).unwrap();
        let moved: Vec<usize> = b.curves()[1].nodes().collect();
        assert_eq!(d.old_nodes, moved);
        assert_eq!(d.new_nodes, moved);
        for i in 0..b.n_nodes() {
            let same = nb.positions()[i] == b.positions()[i]
                && nb.normals()[i] == b.normals()[i]
                && nb.weights()[i] == b.weights()[i];
            assert_eq!(same, !moved.contains(&i), "node {i}");
        }
    }

    #[test]
    fn overlapping_move_is_rejected() {
        let b = Boundary::build(&presets::starfish_with_holes(1200, 0.0, PI)).unwrap();
        let c = b.hole_centers();
        let p = Perturbation {
            edits: vec![Edit::MoveHole {
                curve: CurveId(1),
                translation: c[1] - c[0],
            }],
        };
        assert!(matches!(
            b.apply_perturbation(&p).unwrap_err(),
            GeometryError::Overlap { .. }
        ));
    }

    #[test]
    fn separated_holes_on_path_are_disjoint() {
        // any pair with separation above π/4 stays feasible
        for k in 0..16 {
            let t1 = k as f64 * PI / 8.0;
            let t2 = t1 + PI / 4.0 + 1e-3;
            Boundary::build(&presets::starfish_with_holes(600, t1, t2)).unwrap();
        }
    }
}
