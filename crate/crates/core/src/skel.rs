//! Recursive skeletonization.
//!
//! Boxes are compressed level by level from the leaves up. For a box with active
//! DOFs `B`, an interpolative decomposition of the stacked near-field and proxy
//! interactions splits `B` into skeleton `S` and redundant `R` DOFs with
//! `K[:, R] ≈ K[:, S] T` (and the transpose relation for rows). The redundant DOFs
//! are then eliminated against the modified diagonal block, leaving a Schur
//! complement on `S` that is passed to the parent. The factors are stored
//! implicitly and applied as sequences of block-triangular updates.
//!
//! For multiply-connected Stokes problems only the top-left operator is factored;
//! the Stokeslet/rotlet columns `H` and the constraint rows `Ψ` are carried through
//! the transforms and folded into a small corner system at the root.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DMatrixView};
use rayon::prelude::*;
use thiserror::Error;

use crate::dense::{two_sided_id, DenseError, Lu};
use crate::geometry::{Boundary, PerturbationDelta, Point};
use crate::kernels::{proxy_nodes, Kernel, KernelError, Pde};
use crate::tree::{BoxKey, RootBox, Tree, TreeError, DEFAULT_LEAF_CAP};

/// Pivot ratio below which an `X_RR` pivot column is moved back to the skeleton.
const MIGRATION_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SkelError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("singular root block: {0}")]
    SingularRoot(DenseError),
    #[error("box {0:?}: {1}")]
    Compression(BoxKey, DenseError),
    #[error("vector has length {got}, expected {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("invalid option: {0}")]
    Options(String),
    #[error("could not build worker pool: {0}")]
    Pool(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorOptions {
    pub tol: f64,
    /// Geometric nodes per leaf.
    pub leaf_cap: usize,
    /// Points on each proxy circle.
    pub proxy_points: usize,
    /// Proxy radius as a multiple of the box circumradius.
    pub proxy_radius: f64,
    pub workers: usize,
    /// Compress boxes of a level one at a time, dropping the redundant DOFs of
    /// already compressed boxes from later near fields.
    pub propagate_zeros: bool,
}

impl Default for FactorOptions {
    fn default() -> Self {
        FactorOptions {
            tol: 1e-10,
            leaf_cap: DEFAULT_LEAF_CAP,
            proxy_points: 64,
            proxy_radius: 1.5,
            workers: 1,
            propagate_zeros: false,
        }
    }
}

impl FactorOptions {
    pub fn with_tol(tol: f64) -> Self {
        FactorOptions {
            tol,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<(), SkelError> {
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(SkelError::Options(format!("tol must be in (0, 1), got {}", self.tol)));
        }
        if self.leaf_cap == 0 || self.workers == 0 {
            return Err(SkelError::Options("leaf_cap and workers must be positive".into()));
        }
        if self.proxy_points < 8 || self.proxy_radius <= 1.0 {
            return Err(SkelError::Options(
                "need at least 8 proxy points and a proxy radius factor above 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug)]
struct BoxMatrices {
    /// `|S| x |R|`
    t: DMatrix<f64>,
    x_rr: DMatrix<f64>,
    lu: Lu,
    /// `X_SR X_RR^{-1}`
    l: DMatrix<f64>,
    /// `X_RR^{-1} X_RS`
    r: DMatrix<f64>,
    /// Skeleton block after elimination; the parent's diagonal block.
    x_ss: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct BoxFactors {
    pub key: BoxKey,
    pub active: Vec<usize>,
    pub skel: Vec<usize>,
    pub redund: Vec<usize>,
    mats: Arc<BoxMatrices>,
}

impl BoxFactors {
    pub fn interp(&self) -> &DMatrix<f64> {
        &self.mats.t
    }

    pub fn x_rr(&self) -> &DMatrix<f64> {
        &self.mats.x_rr
    }

    pub fn x_ss(&self) -> &DMatrix<f64> {
        &self.mats.x_ss
    }

    /// Whether two factors share the same stored matrices (reused, not recomputed).
    pub fn shares_matrices(&self, other: &BoxFactors) -> bool {
        Arc::ptr_eq(&self.mats, &other.mats)
    }
}

#[derive(Clone, Debug)]
struct RootFactors {
    active: Vec<usize>,
    x_ss: DMatrix<f64>,
    lu: Option<Lu>,
}

#[derive(Clone, Debug)]
struct Augmentation {
    /// `U H`, `N x 3p`
    w: DMatrix<f64>,
    /// `(Ψ V)^T`, `N x 3p`
    zt: DMatrix<f64>,
    corner: Lu,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LevelStats {
    pub level: u8,
    pub boxes: usize,
    pub recompressed: usize,
    pub max_active: usize,
    pub max_skeleton: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct FactorStats {
    /// Deepest level first.
    pub levels: Vec<LevelStats>,
    pub root_size: usize,
    /// Root block and augmentation.
    pub root_seconds: f64,
    pub seconds: f64,
}

impl FactorStats {
    pub fn recompressed(&self) -> usize {
        self.levels.iter().map(|l| l.recompressed).sum()
    }
}

#[derive(Clone)]
pub struct Factorization {
    pde: Pde,
    boundary: Arc<Boundary>,
    tree: Tree,
    opts: FactorOptions,
    boxes: BTreeMap<BoxKey, BoxFactors>,
    root: RootFactors,
    aug: Option<Augmentation>,
    stats: FactorStats,
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl std::fmt::Debug for Factorization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Factorization")
            .field("pde", &self.pde)
            .field("n_dofs", &self.n_dofs())
            .field("boxes", &self.boxes.len())
            .field("root", &self.root.active.len())
            .finish()
    }
}

fn make_pool(workers: usize) -> Result<Option<Arc<rayon::ThreadPool>>, SkelError> {
    if workers <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map(|p| Some(Arc::new(p)))
        .map_err(|e| SkelError::Pool(e.to_string()))
}

/// Runs `f` over `items` on the pool (in order), or sequentially without one.
fn par_map<T: Sync, R: Send>(
    pool: Option<&rayon::ThreadPool>,
    items: &[T],
    f: impl Fn(&T) -> R + Sync + Send,
) -> Vec<R> {
    match pool {
        Some(p) => p.install(|| items.par_iter().map(&f).collect()),
        None => items.iter().map(f).collect(),
    }
}

fn gather(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), x.ncols(), |i, j| x[(idx[i], j)])
}

fn scatter(x: &mut DMatrix<f64>, idx: &[usize], v: &DMatrix<f64>) {
    for j in 0..x.ncols() {
        for (i, &g) in idx.iter().enumerate() {
            x[(g, j)] = v[(i, j)];
        }
    }
}

fn sub(a: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| a[(rows[i], cols[j])])
}

/// Read-only context shared by all box compressions of one sweep.
struct Sweep<'a> {
    kernel: Kernel<'a>,
    tree: &'a Tree,
    opts: &'a FactorOptions,
}

impl Sweep<'_> {
    fn node_dofs(&self, nodes: &[usize]) -> Vec<usize> {
        let dpn = self.kernel.dpn();
        nodes
            .iter()
            .flat_map(|&n| Boundary::dof_range(n, dpn))
            .collect()
    }

    fn position(&self, dof: usize) -> Point {
        self.kernel.boundary.positions()[dof / self.kernel.dpn()]
    }

    fn proxy_radius(&self, key: BoxKey) -> f64 {
        self.opts.proxy_radius * std::f64::consts::SQRT_2 * self.tree.root_box().box_half_width(key.level)
    }

    /// Active DOFs of nearby boxes that fall inside the proxy circle, ascending.
    fn near_field(
        &self,
        key: BoxKey,
        active: &BTreeMap<BoxKey, Vec<usize>>,
        done: Option<&BTreeMap<BoxKey, BoxFactors>>,
    ) -> Vec<usize> {
        let root: &RootBox = self.tree.root_box();
        let c = root.box_center(key);
        let rad2 = self.proxy_radius(key).powi(2);
        let mut out = Vec::new();
        for nb in self.tree.near_boxes(key) {
            let leaf_dofs;
            let dofs: &[usize] = if nb.level == key.level {
                match done.and_then(|d| d.get(&nb)) {
                    Some(f) => &f.skel,
                    None => &active[&nb],
                }
            } else {
                leaf_dofs = self.node_dofs(&self.tree.get(nb).expect("near box exists").nodes);
                &leaf_dofs
            };
            out.extend(
                dofs.iter()
                    .copied()
                    .filter(|&d| (self.position(d) - c).norm_sq() < rad2),
            );
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Current diagonal block of a box: kernel entries between children's skeletons,
    /// with each child's own block replaced by its Schur complement.
    fn diagonal(&self, key: BoxKey, active: &[usize], boxes: &BTreeMap<BoxKey, BoxFactors>) -> DMatrix<f64> {
        let tb = self.tree.get(key).expect("box exists");
        if tb.is_leaf() {
            return self.kernel.block(active, active);
        }
        let kids: Vec<&BoxFactors> = tb.children.iter().map(|c| &boxes[c]).collect();
        let mut d = DMatrix::zeros(active.len(), active.len());
        let mut oi = 0;
        for ci in &kids {
            let mut oj = 0;
            for cj in &kids {
                let blk = if std::ptr::eq(*ci, *cj) {
                    ci.mats.x_ss.clone()
                } else {
                    self.kernel.block(&ci.skel, &cj.skel)
                };
                d.view_mut((oi, oj), (ci.skel.len(), cj.skel.len())).copy_from(&blk);
                oj += cj.skel.len();
            }
            oi += ci.skel.len();
        }
        d
    }

    fn compress(&self, key: BoxKey, active: &[usize], diag: DMatrix<f64>, near: &[usize]) -> Result<BoxFactors, SkelError> {
        let nb = active.len();
        let kernel = &self.kernel;
        let center = self.tree.root_box().box_center(key);
        let radius = self.proxy_radius(key);
        let (proxies, pw) = proxy_nodes(center, radius, self.opts.proxy_points);

        let inc_near = kernel.block(near, active);
        let inc_proxy = kernel.proxy_incoming(&proxies, active);
        let out_near = kernel.block(active, near).transpose();
        let out_proxy = kernel.proxy_outgoing(&proxies, pw[0], active);

        // Each part (near rows, proxy rows, completion row) is scaled to unit
        // Frobenius norm, so the ID tolerance applies to every part relative to its
        // own size. Otherwise the outgoing proxy rows, weighted by the proxy arc
        // length, swamp the quadrature-weighted rows at coarse levels.
        let stack_rows = |near: &DMatrix<f64>, proxy: &DMatrix<f64>| {
            let pr = proxy.nrows() - 1;
            let mut m = DMatrix::zeros(near.nrows() + proxy.nrows(), nb);
            let mut put = |at: usize, part: DMatrixView<'_, f64>| {
                let n = part.norm();
                let s = if n > 0.0 { 1.0 / n } else { 1.0 };
                m.rows_mut(at, part.nrows()).copy_from(&(part * s));
            };
            put(0, near.rows(0, near.nrows()));
            put(near.nrows(), proxy.rows(0, pr));
            put(near.nrows() + pr, proxy.rows(pr, 1));
            m
        };
        let a_in = stack_rows(&inc_near, &inc_proxy);
        let a_out = stack_rows(&out_near, &out_proxy);
        let id = two_sided_id(&a_in, &a_out, self.opts.tol).map_err(|e| SkelError::Compression(key, e))?;

        let mut s_pos = id.skeleton;
        let mut r_pos = id.redundant;
        let mut t = id.interp;
        loop {
            let k_ss = sub(&diag, &s_pos, &s_pos);
            let k_sr = sub(&diag, &s_pos, &r_pos);
            let k_rs = sub(&diag, &r_pos, &s_pos);
            let k_rr = sub(&diag, &r_pos, &r_pos);
            let tt = t.transpose();
            let x_sr = &k_sr - &k_ss * &t;
            let x_rs = &k_rs - &tt * &k_ss;
            let x_rr = &k_rr - &tt * &k_sr - &k_rs * &t + &tt * &k_ss * &t;
            let bad = match Lu::factor(&x_rr) {
                Ok(lu) if lu.min_pivot_ratio() >= MIGRATION_THRESHOLD => {
                    let r = lu.solve(&x_rs);
                    let mut lt = x_sr.transpose();
                    lu.solve_transpose_in_place(&mut lt);
                    let l = lt.transpose();
                    let x_ss = &k_ss - &x_sr * &r;
                    let pick = |p: &[usize]| p.iter().map(|&i| active[i]).collect::<Vec<_>>();
                    return Ok(BoxFactors {
                        key,
                        active: active.to_vec(),
                        skel: pick(&s_pos),
                        redund: pick(&r_pos),
                        mats: Arc::new(BoxMatrices { t, x_rr, lu, l, r, x_ss }),
                    });
                }
                Ok(lu) => lu.min_pivot_column(),
                Err(DenseError::ZeroPivot { column }) => column,
                Err(e) => return Err(SkelError::Compression(key, e)),
            };
            // move the offending redundant DOF into the skeleton
            let moved = r_pos.remove(bad);
            s_pos.push(moved);
            let mut nt = DMatrix::zeros(s_pos.len(), r_pos.len());
            for (c, oc) in (0..t.ncols()).filter(|&c| c != bad).enumerate() {
                for i in 0..t.nrows() {
                    nt[(i, c)] = t[(i, oc)];
                }
            }
            t = nt;
        }
    }
}

/// Old DOF index to new DOF index for a node remap.
fn dof_remap(delta: &PerturbationDelta, dpn: usize) -> impl Fn(usize) -> Option<usize> + '_ {
    move |d| delta.remap[d / dpn].map(|n| n * dpn + d % dpn)
}

impl Factorization {
    /// Factors the operator of `pde` on `boundary` with a fresh tree over `root`.
    pub fn factor(
        pde: Pde,
        boundary: Arc<Boundary>,
        root: RootBox,
        opts: FactorOptions,
    ) -> Result<Factorization, SkelError> {
        opts.validate()?;
        let tree = Tree::build(boundary.positions(), opts.leaf_cap, root)?;
        Self::assemble(pde, boundary, tree, opts, None)
    }

    /// Factors with the root box enclosing the boundary.
    pub fn factor_default_root(pde: Pde, boundary: Arc<Boundary>, opts: FactorOptions) -> Result<Factorization, SkelError> {
        let root = RootBox::enclosing(&boundary);
        Self::factor(pde, boundary, root, opts)
    }

    fn assemble(
        pde: Pde,
        boundary: Arc<Boundary>,
        tree: Tree,
        opts: FactorOptions,
        reuse: Option<(&Factorization, BTreeSet<BoxKey>, &PerturbationDelta)>,
    ) -> Result<Factorization, SkelError> {
        let start = Instant::now();
        let pool = match &reuse {
            Some((old, ..)) if old.opts.workers == opts.workers => old.pool.clone(),
            _ => make_pool(opts.workers)?,
        };
        let kernel = Kernel::new(pde, &boundary);
        let sw = Sweep {
            kernel,
            tree: &tree,
            opts: &opts,
        };
        let dpn = kernel.dpn();
        let mut boxes: BTreeMap<BoxKey, BoxFactors> = BTreeMap::new();
        let mut stats = FactorStats::default();

        let active_of = |key: BoxKey, boxes: &BTreeMap<BoxKey, BoxFactors>| -> Vec<usize> {
            let tb = tree.get(key).expect("box exists");
            if tb.is_leaf() {
                sw.node_dofs(&tb.nodes)
            } else {
                tb.children.iter().flat_map(|c| boxes[c].skel.iter().copied()).collect()
            }
        };

        for level in (1..=tree.depth()).rev() {
            let level_start = Instant::now();
            let keys: Vec<BoxKey> = tree.level(level).map(|b| b.key).collect();
            let active: BTreeMap<BoxKey, Vec<usize>> = keys.iter().map(|&k| (k, active_of(k, &boxes))).collect();

            // reuse untouched boxes from a previous factorization
            let mut todo = Vec::new();
            let mut reused = Vec::new();
            for &k in &keys {
                let carried = reuse.as_ref().and_then(|(old, marked, delta)| {
                    if marked.contains(&k) {
                        return None;
                    }
                    let f = old.boxes.get(&k)?;
                    let map = dof_remap(delta, dpn);
                    let remap = |v: &[usize]| v.iter().map(|&d| map(d)).collect::<Option<Vec<_>>>();
                    let act = remap(&f.active)?;
                    (act == active[&k]).then(|| BoxFactors {
                        key: k,
                        active: act,
                        skel: remap(&f.skel).expect("skeleton within active"),
                        redund: remap(&f.redund).expect("redundant within active"),
                        mats: f.mats.clone(),
                    })
                });
                match carried {
                    Some(f) => reused.push(f),
                    None => todo.push(k),
                }
            }

            let compressed: Vec<BoxFactors> = if opts.propagate_zeros {
                let mut done: BTreeMap<BoxKey, BoxFactors> = reused.iter().map(|f| (f.key, f.clone())).collect();
                let mut out = Vec::new();
                for &k in &todo {
                    let near = sw.near_field(k, &active, Some(&done));
                    let diag = sw.diagonal(k, &active[&k], &boxes);
                    let f = sw.compress(k, &active[&k], diag, &near)?;
                    done.insert(k, f.clone());
                    out.push(f);
                }
                out
            } else {
                par_map(pool.as_deref(), &todo, |&k| {
                    let near = sw.near_field(k, &active, None);
                    let diag = sw.diagonal(k, &active[&k], &boxes);
                    sw.compress(k, &active[&k], diag, &near)
                })
                .into_iter()
                .collect::<Result<_, _>>()?
            };

            let mut ls = LevelStats {
                level,
                boxes: keys.len(),
                recompressed: compressed.len(),
                ..Default::default()
            };
            for f in compressed.into_iter().chain(reused) {
                ls.max_active = ls.max_active.max(f.active.len());
                ls.max_skeleton = ls.max_skeleton.max(f.skel.len());
                boxes.insert(f.key, f);
            }
            ls.seconds = level_start.elapsed().as_secs_f64();
            stats.levels.push(ls);
        }

        let root_start = Instant::now();
        let root_active = active_of(BoxKey::ROOT, &boxes);
        let x_ss = sw.diagonal(BoxKey::ROOT, &root_active, &boxes);
        stats.root_size = root_active.len();
        let mut f = Factorization {
            pde,
            boundary: boundary.clone(),
            tree: tree.clone(),
            opts: opts.clone(),
            boxes,
            root: RootFactors {
                active: root_active,
                x_ss,
                lu: None,
            },
            aug: None,
            stats,
            pool,
        };
        if kernel.augmented() {
            f.aug = Some(f.build_augmentation(&kernel)?);
        } else {
            f.root.lu = Some(Lu::factor(&f.root.x_ss).map_err(SkelError::SingularRoot)?);
        }
        f.stats.root_seconds = root_start.elapsed().as_secs_f64();
        f.stats.seconds = start.elapsed().as_secs_f64();
        Ok(f)
    }

    fn build_augmentation(&self, kernel: &Kernel) -> Result<Augmentation, SkelError> {
        let mut w = kernel.h_matrix();
        self.apply_u(&mut w);
        let mut zt = kernel.psi_matrix().transpose();
        self.apply_vt(&mut zt);
        let p = w.ncols();
        let s = &self.root.active;
        let ns = s.len();
        // -I - Σ Z_R X_RR^{-1} W_R over all boxes
        let corrections: Vec<DMatrix<f64>> = self.par_boxes(|f| {
            if f.redund.is_empty() {
                return DMatrix::zeros(p, p);
            }
            let wr = f.mats.lu.solve(&gather(&w, &f.redund));
            gather(&zt, &f.redund).transpose() * wr
        });
        let mut lam = -DMatrix::<f64>::identity(p, p);
        for c in corrections {
            lam -= c;
        }
        let mut corner = DMatrix::zeros(ns + p, ns + p);
        corner.view_mut((0, 0), (ns, ns)).copy_from(&self.root.x_ss);
        corner.view_mut((0, ns), (ns, p)).copy_from(&gather(&w, s));
        corner.view_mut((ns, 0), (p, ns)).copy_from(&gather(&zt, s).transpose());
        corner.view_mut((ns, ns), (p, p)).copy_from(&lam);
        let corner = Lu::factor(&corner).map_err(SkelError::SingularRoot)?;
        Ok(Augmentation { w, zt, corner })
    }

    /// Refactors after a perturbation, recompressing only boxes near modified nodes.
    pub fn update(&self, new_boundary: Arc<Boundary>, delta: &PerturbationDelta) -> Result<Factorization, SkelError> {
        self.update_with_workers(new_boundary, delta, self.opts.workers)
    }

    pub fn update_with_workers(
        &self,
        new_boundary: Arc<Boundary>,
        delta: &PerturbationDelta,
        workers: usize,
    ) -> Result<Factorization, SkelError> {
        if delta.is_empty() {
            let mut f = self.clone();
            f.stats.levels.iter_mut().for_each(|l| l.recompressed = 0);
            f.stats.seconds = 0.0;
            return Ok(f);
        }
        let start = Instant::now();
        let tree = self.tree.refit(new_boundary.positions(), delta)?;
        let moved = delta.modified_positions(&self.boundary, &new_boundary);
        let marked = tree.mark_dirty(&moved);
        let opts = FactorOptions {
            workers,
            ..self.opts.clone()
        };
        let mut f = Self::assemble(self.pde, new_boundary, tree, opts, Some((self, marked, delta)))?;
        f.stats.seconds = start.elapsed().as_secs_f64();
        Ok(f)
    }

    pub fn pde(&self) -> Pde {
        self.pde
    }

    pub fn boundary(&self) -> &Arc<Boundary> {
        &self.boundary
    }

    pub fn kernel(&self) -> Kernel<'_> {
        Kernel::new(self.pde, &self.boundary)
    }

    pub fn tree(&self) -> &Tree {
        &self.tree
    }

    pub fn options(&self) -> &FactorOptions {
        &self.opts
    }

    pub fn stats(&self) -> &FactorStats {
        &self.stats
    }

    pub fn n_dofs(&self) -> usize {
        self.boundary.n_nodes() * self.pde.dofs_per_node()
    }

    /// Number of Stokeslet/rotlet unknowns (zero when not augmented).
    pub fn n_aug(&self) -> usize {
        self.aug.as_ref().map_or(0, |a| a.w.ncols())
    }

    pub fn boxes(&self) -> impl Iterator<Item = &BoxFactors> {
        self.boxes.values()
    }

    pub fn box_factors(&self, key: BoxKey) -> Option<&BoxFactors> {
        self.boxes.get(&key)
    }

    pub fn root_skeleton(&self) -> &[usize] {
        &self.root.active
    }

    fn par_boxes<R: Send>(&self, f: impl Fn(&BoxFactors) -> R + Sync + Send) -> Vec<R> {
        let all: Vec<&BoxFactors> = self.boxes.values().collect();
        par_map(self.pool.as_deref(), &all, |b| f(b))
    }

    /// Applies a per-box transform to every box of each level in `levels` order.
    fn sweep_levels(
        &self,
        x: &mut DMatrix<f64>,
        levels: impl Iterator<Item = u8>,
        op: impl Fn(&BoxFactors, &mut DMatrix<f64>, &mut DMatrix<f64>) + Sync + Send,
    ) {
        for level in levels {
            let lo = BoxKey { level, ix: 0, iy: 0 };
            let hi = BoxKey {
                level,
                ix: u32::MAX,
                iy: u32::MAX,
            };
            let items: Vec<&BoxFactors> = self
                .boxes
                .range(lo..=hi)
                .map(|(_, b)| b)
                .filter(|b| !b.redund.is_empty())
                .collect();
            let xr: &DMatrix<f64> = x;
            let out = par_map(self.pool.as_deref(), &items, |b| {
                let mut ys = gather(xr, &b.skel);
                let mut yr = gather(xr, &b.redund);
                op(b, &mut ys, &mut yr);
                (ys, yr)
            });
            for (b, (ys, yr)) in items.iter().zip(out) {
                scatter(x, &b.skel, &ys);
                scatter(x, &b.redund, &yr);
            }
        }
    }

    fn depth(&self) -> u8 {
        self.tree.depth()
    }

    fn apply_u(&self, x: &mut DMatrix<f64>) {
        self.sweep_levels(x, (1..=self.depth()).rev(), |b, ys, yr| {
            *yr -= b.mats.t.tr_mul(ys);
            *ys -= &b.mats.l * &*yr;
        });
    }

    fn apply_u_inv(&self, x: &mut DMatrix<f64>) {
        self.sweep_levels(x, 1..=self.depth(), |b, ys, yr| {
            *ys += &b.mats.l * &*yr;
            *yr += b.mats.t.tr_mul(ys);
        });
    }

    fn apply_v(&self, x: &mut DMatrix<f64>) {
        self.sweep_levels(x, 1..=self.depth(), |b, zs, zr| {
            *zr -= &b.mats.r * &*zs;
            *zs -= &b.mats.t * &*zr;
        });
    }

    fn apply_v_inv(&self, x: &mut DMatrix<f64>) {
        self.sweep_levels(x, (1..=self.depth()).rev(), |b, zs, zr| {
            *zs += &b.mats.t * &*zr;
            *zr += &b.mats.r * &*zs;
        });
    }

    fn apply_vt(&self, x: &mut DMatrix<f64>) {
        self.sweep_levels(x, (1..=self.depth()).rev(), |b, vs, vr| {
            *vr -= b.mats.t.tr_mul(vs);
            *vs -= b.mats.r.tr_mul(vr);
        });
    }

    /// Block-diagonal solve with the `X_RR` blocks, in place on redundant rows.
    fn solve_rr(&self, x: &mut DMatrix<f64>) {
        let xr: &DMatrix<f64> = x;
        let out = self.par_boxes(|b| b.mats.lu.solve(&gather(xr, &b.redund)));
        for (b, v) in self.boxes.values().zip(out) {
            scatter(x, &b.redund, &v);
        }
    }

    fn check_len(&self, got: usize, expected: usize) -> Result<(), SkelError> {
        if got == expected {
            Ok(())
        } else {
            Err(SkelError::Dimension { got, expected })
        }
    }

    /// `Â x` for the compressed top-left operator.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>, SkelError> {
        self.check_len(x.len(), self.n_dofs())?;
        let mut z = DMatrix::from_column_slice(x.len(), 1, x);
        self.apply_v_inv(&mut z);
        let xr: &DMatrix<f64> = &z;
        let out = self.par_boxes(|b| &b.mats.x_rr * gather(xr, &b.redund));
        for (b, v) in self.boxes.values().zip(out) {
            scatter(&mut z, &b.redund, &v);
        }
        let s = &self.root.active;
        let v = &self.root.x_ss * gather(&z, s);
        scatter(&mut z, s, &v);
        self.apply_u_inv(&mut z);
        Ok(z.as_slice().to_vec())
    }

    /// Solves the full system. For augmented problems `rhs` holds only the boundary
    /// data `f`; the returned pair is `(μ, λ)` with `λ` empty otherwise.
    pub fn solve(&self, rhs: &[f64]) -> Result<(Vec<f64>, Vec<f64>), SkelError> {
        let n = self.n_dofs();
        self.check_len(rhs.len(), n)?;
        let mut y = DMatrix::from_column_slice(n, 1, rhs);
        self.apply_u(&mut y);
        let s = &self.root.active;
        let lambda = match &self.aug {
            None => {
                let mut z = y.clone();
                self.solve_rr(&mut z);
                let zs = self.root.lu.as_ref().expect("plain root factored").solve(&gather(&y, s));
                scatter(&mut z, s, &zs);
                y = z;
                Vec::new()
            }
            Some(a) => {
                let p = a.w.ncols();
                let mut t = y.clone();
                self.solve_rr(&mut t);
                let zt: &DMatrix<f64> = &a.zt;
                let tr: &DMatrix<f64> = &t;
                let parts = self.par_boxes(|b| gather(zt, &b.redund).transpose() * gather(tr, &b.redund));
                let mut rhs_l = DMatrix::<f64>::zeros(p, 1);
                for c in parts {
                    rhs_l -= c;
                }
                let ns = s.len();
                let mut c = DMatrix::zeros(ns + p, 1);
                c.view_mut((0, 0), (ns, 1)).copy_from(&gather(&y, s));
                c.view_mut((ns, 0), (p, 1)).copy_from(&rhs_l);
                a.corner.solve_in_place(&mut c);
                let lam = c.rows(ns, p).into_owned();
                // z_R = X_RR^{-1} (y_R - W_R λ)
                let wl = &a.w * &lam;
                let mut z = &y - wl;
                self.solve_rr(&mut z);
                scatter(&mut z, s, &c.rows(0, ns).into_owned());
                y = z;
                lam.as_slice().to_vec()
            }
        };
        self.apply_v(&mut y);
        Ok((y.as_slice().to_vec(), lambda))
    }

    /// Solution values at interior `targets`.
    pub fn evaluate(&self, targets: &[Point], mu: &[f64], lambda: &[f64]) -> Result<Vec<f64>, SkelError> {
        Ok(self.kernel().evaluate(targets, mu, lambda)?)
    }

    /// Relative residual `‖A x - b‖ / ‖b‖` of a solution, computed with the dense
    /// operator applied directly.
    pub fn residual(&self, rhs: &[f64], mu: &[f64], lambda: &[f64]) -> f64 {
        let k = self.kernel();
        let mut x = mu.to_vec();
        x.extend_from_slice(lambda);
        let ax = k.full_matvec(&x);
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, v) in ax.iter().enumerate() {
            let b = rhs.get(i).copied().unwrap_or(0.0);
            num += (v - b) * (v - b);
            den += b * b;
        }
        (num / den).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::Lu;
    use crate::geometry::presets;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        norm(&d) / norm(b)
    }

    fn opts(tol: f64, cap: usize) -> FactorOptions {
        FactorOptions {
            tol,
            leaf_cap: cap,
            ..Default::default()
        }
    }

    #[test]
    fn laplace_circle_matches_dense() {
        let b = Arc::new(Boundary::build(&presets::circle(256)).unwrap());
        let f = Factorization::factor_default_root(Pde::LaplaceNeumann, b.clone(), opts(1e-10, 16)).unwrap();
        assert!(f.tree().depth() >= 2);
        let k = Kernel::new(Pde::LaplaceNeumann, &b);
        let a = k.assemble();
        let rhs = random_vec(256, 1);
        let (mu, lam) = f.solve(&rhs).unwrap();
        assert!(lam.is_empty());
        let dense = Lu::factor(&a).unwrap().solve(&DMatrix::from_column_slice(256, 1, &rhs));
        assert!(rel_diff(&mu, dense.as_slice()) < 1e-8);
    }

    #[test]
    fn apply_matches_dense_and_inverts_solve() {
        let b = Arc::new(Boundary::build(&presets::starfish(256)).unwrap());
        let tol = 1e-10;
        let f = Factorization::factor_default_root(Pde::LaplaceNeumann, b.clone(), opts(tol, 16)).unwrap();
        let a = Kernel::new(Pde::LaplaceNeumann, &b).assemble();
        for s in 0..10 {
            let x = random_vec(256, s);
            let ax = f.apply(&x).unwrap();
            let exact = &a * DMatrix::from_column_slice(256, 1, &x);
            let err = rel_diff(&ax, exact.as_slice()) * norm(exact.as_slice()) / (a.norm() * norm(&x));
            assert!(err < 10.0 * tol, "{err:e}");
            let (back, _) = f.solve(&ax).unwrap();
            assert!(rel_diff(&back, &x) < 1e-12);
        }
        assert_eq!(f.apply(&vec![0.0; 256]).unwrap(), vec![0.0; 256]);
        let (x, y) = (random_vec(256, 20), random_vec(256, 21));
        let combo: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        let (ax, ay) = (f.apply(&x).unwrap(), f.apply(&y).unwrap());
        let lin: Vec<f64> = ax.iter().zip(&ay).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        assert!(rel_diff(&f.apply(&combo).unwrap(), &lin) < 1e-14);
        assert!(f.apply(&[1.0]).is_err());
    }

    #[test]
    fn stokes_augmented_matches_dense() {
        let b = Arc::new(Boundary::build(&presets::starfish_with_holes(512, 0.4, 2.9)).unwrap());
        let f = Factorization::factor_default_root(Pde::StokesDirichlet, b.clone(), opts(1e-10, 16)).unwrap();
        let k = Kernel::new(Pde::StokesDirichlet, &b);
        assert_eq!(f.n_aug(), 6);
        let full = k.assemble_full();
        let n = k.n_dofs();
        let rhs = random_vec(n, 3);
        let (mu, lam) = f.solve(&rhs).unwrap();
        let mut b_full = rhs.clone();
        b_full.extend([0.0; 6]);
        let dense = Lu::factor(&full).unwrap().solve(&DMatrix::from_column_slice(n + 6, 1, &b_full));
        let mut ours = mu.clone();
        ours.extend(&lam);
        assert!(rel_diff(&ours, dense.as_slice()) < 1e-8, "{:e}", rel_diff(&ours, dense.as_slice()));
    }

    #[test]
    fn workers_do_not_change_bits() {
        let b = Arc::new(Boundary::build(&presets::starfish_with_holes(600, 0.4, 2.9)).unwrap());
        let f1 = Factorization::factor_default_root(Pde::StokesDirichlet, b.clone(), opts(1e-8, 16)).unwrap();
        let f4 = Factorization::factor_default_root(
            Pde::StokesDirichlet,
            b.clone(),
            FactorOptions { workers: 4, ..opts(1e-8, 16) },
        )
        .unwrap();
        let rhs = random_vec(1200, 9);
        assert_eq!(f1.solve(&rhs).unwrap(), f4.solve(&rhs).unwrap());
    }

    #[test]
    fn zero_propagation_agrees_within_tolerance() {
        let tol = 1e-8;
        let b = Arc::new(Boundary::build(&presets::starfish(1024)).unwrap());
        let f = Factorization::factor_default_root(Pde::LaplaceNeumann, b.clone(), opts(tol, 16)).unwrap();
        let g = Factorization::factor_default_root(
            Pde::LaplaceNeumann,
            b.clone(),
            FactorOptions { propagate_zeros: true, ..opts(tol, 16) },
        )
        .unwrap();
        let rhs = random_vec(1024, 4);
        let (x, _) = f.solve(&rhs).unwrap();
        let (y, _) = g.solve(&rhs).unwrap();
        assert!(rel_diff(&x, &y) <= 10.0 * tol, "{:e}", rel_diff(&x, &y));
    }

    #[test]
    fn single_dof_box_is_noop() {
        let b = Arc::new(Boundary::build(&presets::circle(64)).unwrap());
        let f = Factorization::factor_default_root(Pde::LaplaceNeumann, b.clone(), opts(1e-10, 1)).unwrap();
        for bx in f.boxes().filter(|bx| bx.active.len() == 1) {
            assert!(bx.redund.is_empty());
            assert_eq!(bx.interp().ncols(), 0);
        }
    }

    fn far_rows_error(k: &DMatrix<f64>, b: &BoxFactors, outside: &[usize]) -> f64 {
        let ks = sub(k, outside, &b.skel);
        let kr = sub(k, outside, &b.redund);
        let err_rows = (&kr - &ks * b.interp()).norm();
        let ks = sub(k, &b.skel, outside).transpose();
        let kr = sub(k, &b.redund, outside).transpose();
        let err_cols = (&kr - &ks * b.interp()).norm();
        let scale = sub(k, outside, &b.active).norm().max(sub(k, &b.active, outside).norm());
        err_rows.max(err_cols) / scale
    }

    #[test]
    fn leaf_interpolation_holds_for_all_outside_dofs() {
        for (pde, tol) in [(Pde::LaplaceNeumann, 1e-10), (Pde::StokesDirichlet, 1e-10), (Pde::StokesDirichlet, 1e-6)] {
            let b = Arc::new(Boundary::build(&presets::starfish_with_holes(768, 0.4, 2.9)).unwrap());
            let f = Factorization::factor_default_root(pde, b.clone(), opts(tol, 48)).unwrap();
            let k = Kernel::new(pde, &b).assemble();
            let mut worst: f64 = 0.0;
            let mut checked = 0;
            for bx in f.boxes().filter(|bx| f.tree().get(bx.key).unwrap().is_leaf() && !bx.redund.is_empty()) {
                let mine: BTreeSet<usize> = bx.active.iter().copied().collect();
                let outside: Vec<usize> = (0..k.nrows()).filter(|d| !mine.contains(d)).collect();
                worst = worst.max(far_rows_error(&k, bx, &outside));
                checked += 1;
            }
            assert!(checked > 0);
            assert!(worst <= 10.0 * tol, "{pde:?} tol {tol:e}: {worst:e}");
        }
    }

    fn moved_hole(n: usize, theta: f64) -> crate::geometry::Perturbation {
        let (_, n_hole) = presets::starfish_split(n);
        crate::geometry::Perturbation {
            edits: vec![crate::geometry::Edit::ReshapeHole {
                curve: crate::geometry::CurveId(1),
                knots: presets::starfish_hole(theta, n_hole).knots,
                center: None,
            }],
        }
    }

    #[test]
    fn update_equals_fresh_factorization() {
        let n = 1200;
        let b = Arc::new(Boundary::build(&presets::starfish_with_holes(n, 0.4, 2.9)).unwrap());
        let root = RootBox::enclosing(&b);
        let o = opts(1e-10, 16);
        let f = Factorization::factor(Pde::StokesDirichlet, b.clone(), root, o.clone()).unwrap();
        let (nb, delta) = b.apply_perturbation(&moved_hole(n, 0.55)).unwrap();
        let nb = Arc::new(nb);
        let up = f.update(nb.clone(), &delta).unwrap();
        let fresh = Factorization::factor(Pde::StokesDirichlet, nb.clone(), root, o).unwrap();
        assert!(up.stats().recompressed() < fresh.stats().recompressed());
        assert!(up.boxes().zip(f.boxes()).any(|(a, b)| a.shares_matrices(b)));
        let shape = |t: &Tree| t.boxes().map(|b| (b.key, b.nodes.clone())).collect::<Vec<_>>();
        assert_eq!(shape(up.tree()), shape(fresh.tree()));
        let sets = |f: &Factorization| f.boxes().map(|b| (b.key, b.skel.clone(), b.redund.clone())).collect::<Vec<_>>();
        assert_eq!(sets(&up), sets(&fresh));
        assert_eq!(up.root_skeleton(), fresh.root_skeleton());
        let rhs = random_vec(2 * n, 5);
        assert_eq!(up.solve(&rhs).unwrap(), fresh.solve(&rhs).unwrap());
    }

    #[test]
    fn empty_perturbation_changes_nothing() {
        let b = Arc::new(Boundary::build(&presets::starfish_with_holes(600, 0.4, 2.9)).unwrap());
        let f = Factorization::factor_default_root(Pde::StokesDirichlet, b.clone(), opts(1e-8, 16)).unwrap();
        let (nb, delta) = b.apply_perturbation(&crate::geometry::Perturbation::default()).unwrap();
        assert!(delta.is_empty());
        let up = f.update(Arc::new(nb), &delta).unwrap();
        assert_eq!(up.stats().recompressed(), 0);
        let rhs = random_vec(1200, 2);
        assert_eq!(up.solve(&rhs).unwrap(), f.solve(&rhs).unwrap());
    }
}
