//! Adaptive quadtree over boundary nodes.
//!
//! Boxes are addressed by `(level, ix, iy)` inside a fixed root square. A box is
//! subdivided while it owns more than `leaf_cap` nodes; empty boxes are pruned.
//! Children are ordered SW, SE, NW, NE.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::geometry::{Boundary, PerturbationDelta, Point};

pub const DEFAULT_LEAF_CAP: usize = 64;
/// Guard against unbounded refinement when nodes coincide.
pub const MAX_DEPTH: u8 = 24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("node {node} at ({x}, {y}) lies outside the root box; refactor with a larger root")]
    OutsideRoot { node: usize, x: f64, y: f64 },
    #[error("leaf capacity must be positive")]
    ZeroLeafCap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BoxKey {
    pub level: u8,
    pub ix: u32,
    pub iy: u32,
}

impl BoxKey {
    pub const ROOT: BoxKey = BoxKey {
        level: 0,
        ix: 0,
        iy: 0,
    };

    pub fn parent(self) -> Option<BoxKey> {
        (self.level > 0).then(|| BoxKey {
            level: self.level - 1,
            ix: self.ix >> 1,
            iy: self.iy >> 1,
        })
    }

    /// Child in position 0..4 (SW, SE, NW, NE).
    pub fn child(self, pos: u32) -> BoxKey {
        BoxKey {
            level: self.level + 1,
            ix: 2 * self.ix + (pos & 1),
            iy: 2 * self.iy + (pos >> 1),
        }
    }

    fn child_pos(self) -> u32 {
        (self.ix & 1) | ((self.iy & 1) << 1)
    }

    /// Same-level cells within Chebyshev distance 1, including `self`, that lie in the grid.
    pub fn neighborhood(self) -> impl Iterator<Item = BoxKey> {
        let n = 1i64 << self.level;
        let (ix, iy) = (self.ix as i64, self.iy as i64);
        (-1..=1).flat_map(move |dy| {
            (-1..=1).filter_map(move |dx| {
                let (x, y) = (ix + dx, iy + dy);
                (x >= 0 && y >= 0 && x < n && y < n).then_some(BoxKey {
                    level: self.level,
                    ix: x as u32,
                    iy: y as u32,
                })
            })
        })
    }
}

/// Fixed square containing every node of a problem family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RootBox {
    pub center: Point,
    pub half_width: f64,
}

impl RootBox {
    /// Bounding square of the boundary, inflated by 10%.
    pub fn enclosing(b: &Boundary) -> RootBox {
        let (lo, hi) = b.bounding_box();
        let half = 0.5 * (hi.x - lo.x).max(hi.y - lo.y) * 1.1;
        RootBox {
            center: (lo + hi) * 0.5,
            half_width: half.max(f64::MIN_POSITIVE),
        }
    }

    pub fn contains(&self, p: Point) -> bool {
        (p.x - self.center.x).abs() <= self.half_width
            && (p.y - self.center.y).abs() <= self.half_width
    }

    pub fn box_half_width(&self, level: u8) -> f64 {
        self.half_width / (1u64 << level) as f64
    }

    pub fn box_center(&self, key: BoxKey) -> Point {
        let w = 2.0 * self.box_half_width(key.level);
        let lo = self.center - Point::new(self.half_width, self.half_width);
        lo + Point::new((key.ix as f64 + 0.5) * w, (key.iy as f64 + 0.5) * w)
    }

    /// Cell at `level` containing `p` (which must be inside the root).
    pub fn cell(&self, p: Point, level: u8) -> BoxKey {
        let n = (1u64 << level) as f64;
        let side = 2.0 * self.half_width;
        let u = (p.x - (self.center.x - self.half_width)) / side;
        let v = (p.y - (self.center.y - self.half_width)) / side;
        let max = (1u64 << level) - 1;
        BoxKey {
            level,
            ix: ((u * n).floor().max(0.0) as u64).min(max) as u32,
            iy: ((v * n).floor().max(0.0) as u64).min(max) as u32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeBox {
    pub key: BoxKey,
    /// Existing children in SW, SE, NW, NE order; empty for leaves.
    pub children: Vec<BoxKey>,
    /// Owned node indices, ascending (leaves only).
    pub nodes: Vec<usize>,
    /// Nodes in the subtree.
    pub count: usize,
}

impl TreeBox {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    root: RootBox,
    leaf_cap: usize,
    boxes: BTreeMap<BoxKey, TreeBox>,
}

impl Tree {
    pub fn build(positions: &[Point], leaf_cap: usize, root: RootBox) -> Result<Tree, TreeError> {
        if leaf_cap == 0 {
            return Err(TreeError::ZeroLeafCap);
        }
        check_inside(positions, 0..positions.len(), &root)?;
        let mut t = Tree {
            root,
            leaf_cap,
            boxes: BTreeMap::new(),
        };
        t.build_subtree(BoxKey::ROOT, (0..positions.len()).collect(), positions);
        Ok(t)
    }

    /// Inserts the subtree rooted at `key` owning `nodes` (ascending).
    fn build_subtree(&mut self, key: BoxKey, nodes: Vec<usize>, positions: &[Point]) {
        let count = nodes.len();
        if count <= self.leaf_cap || key.level >= MAX_DEPTH {
            self.boxes.insert(
                key,
                TreeBox {
                    key,
                    children: Vec::new(),
                    nodes,
                    count,
                },
            );
            return;
        }
        let mut parts: [Vec<usize>; 4] = Default::default();
        for n in nodes {
            let c = self.root.cell(positions[n], key.level + 1);
            parts[c.child_pos() as usize].push(n);
        }
        let mut children = Vec::new();
        for (pos, part) in parts.into_iter().enumerate() {
            if !part.is_empty() {
                let ck = key.child(pos as u32);
                children.push(ck);
                self.build_subtree(ck, part, positions);
            }
        }
        self.boxes.insert(
            key,
            TreeBox {
                key,
                children,
                nodes: Vec::new(),
                count,
            },
        );
    }

    pub fn root_box(&self) -> &RootBox {
        &self.root
    }

    pub fn leaf_cap(&self) -> usize {
        self.leaf_cap
    }

    pub fn get(&self, key: BoxKey) -> Option<&TreeBox> {
        self.boxes.get(&key)
    }

    pub fn contains(&self, key: BoxKey) -> bool {
        self.boxes.contains_key(&key)
    }

    pub fn boxes(&self) -> impl Iterator<Item = &TreeBox> {
        self.boxes.values()
    }

    pub fn n_boxes(&self) -> usize {
        self.boxes.len()
    }

    /// Deepest level present.
    pub fn depth(&self) -> u8 {
        self.boxes.keys().next_back().map_or(0, |k| k.level)
    }

    /// Boxes at `level` in key order.
    pub fn level(&self, level: u8) -> impl Iterator<Item = &TreeBox> {
        let lo = BoxKey { level, ix: 0, iy: 0 };
        let hi = BoxKey {
            level,
            ix: u32::MAX,
            iy: u32::MAX,
        };
        self.boxes.range(lo..=hi).map(|(_, b)| b)
    }

    pub fn leaves(&self) -> impl Iterator<Item = &TreeBox> {
        self.boxes.values().filter(|b| b.is_leaf())
    }

    /// Boxes whose active sets at `level` cover the 3x3 neighborhood of `key`: the
    /// same-level box in each cell, or the shallower leaf covering it. Excludes `key`.
    pub fn near_boxes(&self, key: BoxKey) -> Vec<BoxKey> {
        let mut out = BTreeSet::new();
        for cell in key.neighborhood() {
            if cell == key {
                continue;
            }
            let mut k = Some(cell);
            while let Some(c) = k {
                if let Some(b) = self.boxes.get(&c) {
                    if c == cell || b.is_leaf() {
                        out.insert(c);
                    }
                    break;
                }
                k = c.parent();
            }
        }
        out.into_iter().collect()
    }

    /// Boxes needing recompression after nodes at `positions` moved, appeared or
    /// disappeared.
    ///
    /// At each level the hot cells are the cells holding a modified position plus the
    /// parents of boxes marked one level down; every existing box within Chebyshev
    /// distance 1 of a hot cell is marked. Marking parents of marked colleagues (not
    /// just ancestors of modified boxes) keeps the rule sound for exact reuse.
    pub fn mark_dirty(&self, positions: &[Point]) -> BTreeSet<BoxKey> {
        let mut marked = BTreeSet::new();
        if positions.is_empty() {
            return marked;
        }
        let mut below: BTreeSet<BoxKey> = BTreeSet::new();
        for level in (0..=self.depth()).rev() {
            let mut hot: BTreeSet<BoxKey> = positions
                .iter()
                .filter(|p| self.root.contains(**p))
                .map(|&p| self.root.cell(p, level))
                .collect();
            hot.extend(below.iter().filter_map(|k| k.parent()));
            let mut here = BTreeSet::new();
            for h in &hot {
                for c in h.neighborhood() {
                    if self.boxes.contains_key(&c) {
                        here.insert(c);
                    }
                }
            }
            marked.extend(here.iter().copied());
            below = here;
        }
        marked.insert(BoxKey::ROOT);
        marked
    }

    /// Updates the tree for a perturbed boundary. The result equals a fresh build over
    /// `new_positions` with the same root and leaf cap.
    pub fn refit(&self, new_positions: &[Point], delta: &PerturbationDelta) -> Result<Tree, TreeError> {
        check_inside(new_positions, delta.new_nodes.iter().copied(), &self.root)?;
        let mut t = self.clone();
        if delta.is_empty() {
            return Ok(t);
        }
        let mut affected: BTreeSet<BoxKey> = BTreeSet::new();
        let mark_path = |affected: &mut BTreeSet<BoxKey>, mut k: BoxKey| loop {
            affected.insert(k);
            match k.parent() {
                Some(p) => k = p,
                None => break,
            }
        };

        // renumber surviving nodes; leaves that lost nodes are affected
        let leaf_keys: Vec<BoxKey> = t.leaves().map(|b| b.key).collect();
        for k in leaf_keys {
            let b = t.boxes.get_mut(&k).unwrap();
            let before = b.nodes.len();
            b.nodes = b.nodes.iter().filter_map(|&n| delta.remap[n]).collect();
            if b.nodes.len() != before {
                mark_path(&mut affected, k);
            }
        }

        // route new nodes to the deepest existing box on their path
        let mut pending: BTreeMap<BoxKey, Vec<usize>> = BTreeMap::new();
        for &n in &delta.new_nodes {
            let p = new_positions[n];
            let mut k = BoxKey::ROOT;
            loop {
                let b = &t.boxes[&k];
                if b.is_leaf() {
                    break;
                }
                let c = t.root.cell(p, k.level + 1);
                if t.boxes.contains_key(&c) {
                    k = c;
                } else {
                    break;
                }
            }
            pending.entry(k).or_default().push(n);
            mark_path(&mut affected, k);
        }

        // subtree counts, deepest first
        for &k in affected.iter().rev() {
            let b = &t.boxes[&k];
            let own = pending.get(&k).map_or(0, Vec::len);
            let count = if b.is_leaf() {
                b.nodes.len() + own
            } else {
                b.children.iter().map(|c| t.boxes[c].count).sum::<usize>() + own
            };
            t.boxes.get_mut(&k).unwrap().count = count;
        }

        t.fix(BoxKey::ROOT, &affected, &mut pending, new_positions);
        Ok(t)
    }

    fn fix(
        &mut self,
        key: BoxKey,
        affected: &BTreeSet<BoxKey>,
        pending: &mut BTreeMap<BoxKey, Vec<usize>>,
        positions: &[Point],
    ) {
        if !affected.contains(&key) {
            return;
        }
        let count = self.boxes[&key].count;
        if count == 0 && key != BoxKey::ROOT {
            self.remove_subtree(key);
            return;
        }
        let split = count > self.leaf_cap && key.level < MAX_DEPTH;
        let is_leaf = self.boxes[&key].is_leaf();
        let mut own = pending.remove(&key).unwrap_or_default();
        if !split || is_leaf {
            // becomes (or stays) a leaf, or a leaf that must split: rebuild from scratch
            let mut nodes = self.collect_nodes(key, pending);
            nodes.append(&mut own);
            nodes.sort_unstable();
            self.remove_subtree(key);
            self.build_subtree(key, nodes, positions);
            return;
        }
        let mut fresh: [Vec<usize>; 4] = Default::default();
        for n in own {
            let c = self.root.cell(positions[n], key.level + 1);
            fresh[c.child_pos() as usize].push(n);
        }
        for (pos, mut part) in fresh.into_iter().enumerate() {
            if !part.is_empty() {
                part.sort_unstable();
                self.build_subtree(key.child(pos as u32), part, positions);
            }
        }
        let children: Vec<BoxKey> = self.boxes[&key].children.clone();
        for c in children {
            self.fix(c, affected, pending, positions);
        }
        let children: Vec<BoxKey> = (0..4)
            .map(|p| key.child(p))
            .filter(|c| self.boxes.contains_key(c))
            .collect();
        self.boxes.get_mut(&key).unwrap().children = children;
    }

    /// Nodes owned by the subtree, including those still pending below `key`.
    fn collect_nodes(&self, key: BoxKey, pending: &mut BTreeMap<BoxKey, Vec<usize>>) -> Vec<usize> {
        let b = &self.boxes[&key];
        let mut out = pending.remove(&key).unwrap_or_default();
        if b.is_leaf() {
            out.extend_from_slice(&b.nodes);
        } else {
            for &c in &b.children {
                out.extend(self.collect_nodes(c, pending));
            }
        }
        out
    }

    fn remove_subtree(&mut self, key: BoxKey) {
        if let Some(b) = self.boxes.remove(&key) {
            for c in b.children {
                self.remove_subtree(c);
            }
        }
    }
}

fn check_inside(
    positions: &[Point],
    nodes: impl IntoIterator<Item = usize>,
    root: &RootBox,
) -> Result<(), TreeError> {
    for n in nodes {
        let p = positions[n];
        if !root.contains(p) {
            return Err(TreeError::OutsideRoot { node: n, x: p.x, y: p.y });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{presets, CurveId, Edit, Perturbation};
    use proptest::prelude::*;

    fn unit_root() -> RootBox {
        RootBox {
            center: Point::default(),
            half_width: 1.0,
        }
    }

    #[test]
    fn four_quadrant_points() {
        let pts = [
            Point::new(-0.5, -0.5),
            Point::new(0.5, -0.5),
            Point::new(-0.5, 0.5),
            Point::new(0.5, 0.5),
        ];
        let t = Tree::build(&pts, 1, unit_root()).unwrap();
        assert_eq!(t.depth(), 1);
        let leaves: Vec<_> = t.leaves().collect();
        assert_eq!(leaves.len(), 4);
        // SW, SE, NW, NE
        let root = t.get(BoxKey::ROOT).unwrap();
        let owners: Vec<usize> = root.children.iter().map(|c| t.get(*c).unwrap().nodes[0]).collect();
        assert_eq!(owners, vec![0, 1, 2, 3]);
    }

    #[test]
    fn single_point_is_root_only() {
        let t = Tree::build(&[Point::new(0.1, 0.2)], 10, unit_root()).unwrap();
        assert_eq!(t.depth(), 0);
        assert_eq!(t.n_boxes(), 1);
    }

    #[test]
    fn outside_root_is_rejected() {
        let err = Tree::build(&[Point::new(2.0, 0.0)], 4, unit_root()).unwrap_err();
        assert!(matches!(err, TreeError::OutsideRoot { node: 0, .. }));
    }

    #[test]
    fn circle_leaves_partition_nodes() {
        let b = Boundary::build(&presets::circle(4096)).unwrap();
        let t = Tree::build(b.positions(), 64, RootBox::enclosing(&b)).unwrap();
        let mut all: Vec<usize> = Vec::new();
        for l in t.leaves() {
            assert!(l.nodes.len() <= 64);
            assert!(!l.nodes.is_empty());
            all.extend(&l.nodes);
        }
        all.sort();
        assert_eq!(all, (0..4096).collect::<Vec<_>>());
    }

    #[test]
    fn empty_marking_marks_nothing() {
        let b = Boundary::build(&presets::circle(1024)).unwrap();
        let t = Tree::build(b.positions(), 16, RootBox::enclosing(&b)).unwrap();
        assert!(t.mark_dirty(&[]).is_empty());
    }

    #[test]
    fn single_leaf_marking_is_bounded_per_level() {
        let b = Boundary::build(&presets::circle(8192)).unwrap();
        let t = Tree::build(b.positions(), 16, RootBox::enclosing(&b)).unwrap();
        let leaf = t.leaves().nth(17).unwrap();
        let pos: Vec<Point> = leaf.nodes.iter().map(|&n| b.positions()[n]).collect();
        let m = t.mark_dirty(&pos);
        for l in 0..=t.depth() {
            let c = m.iter().filter(|k| k.level == l).count();
            assert!(c <= 25, "level {l}: {c}");
        }
        assert!(m.contains(&BoxKey::ROOT));
        assert!(m.contains(&leaf.key));
    }

    #[test]
    fn marking_everything_marks_every_box() {
        let b = Boundary::build(&presets::starfish(2000)).unwrap();
        let t = Tree::build(b.positions(), 16, RootBox::enclosing(&b)).unwrap();
        let m = t.mark_dirty(b.positions());
        assert_eq!(m.len(), t.n_boxes());
    }

    #[test]
    fn refit_after_delete_matches_fresh_build() {
        let b = Boundary::build(&presets::starfish_with_holes(3000, 0.0, 2.5)).unwrap();
        let root = RootBox::enclosing(&b);
        let t = Tree::build(b.positions(), 32, root).unwrap();
        let p = Perturbation {
            edits: vec![Edit::DeleteHole { curve: CurveId(2) }],
        };
        let (nb, d) = b.apply_perturbation(&p).unwrap();
        let refit = t.refit(nb.positions(), &d).unwrap();
        assert_eq!(refit, Tree::build(nb.positions(), 32, root).unwrap());
    }

    #[test]
    fn noop_refit_is_identical() {
        let b = Boundary::build(&presets::starfish(1000)).unwrap();
        let t = Tree::build(b.positions(), 16, RootBox::enclosing(&b)).unwrap();
        let (nb, d) = b.apply_perturbation(&Perturbation::default()).unwrap();
        assert_eq!(t.refit(nb.positions(), &d).unwrap(), t);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn refit_matches_fresh_build(
            t1 in 0.0f64..std::f64::consts::TAU, step in 0.8f64..5.4, dt in -0.6f64..0.6,
            cap in 4usize..80, n in 300usize..2500, add in any::<bool>(),
        ) {
            let t2 = t1 + step;
            let b = Boundary::build(&presets::starfish_with_holes(n, t1, t2)).unwrap();
            let root = RootBox::enclosing(&b);
            let tree = Tree::build(b.positions(), cap, root).unwrap();
            let path = presets::hole_path();
            let mut edits = vec![Edit::MoveHole {
                curve: CurveId(1),
                translation: path.position(t1 + dt) - path.position(t1),
            }];
            if add {
                edits.push(Edit::DeleteHole { curve: CurveId(2) });
                edits.push(Edit::AddHole {
                    spec: presets::starfish_hole(t1 + std::f64::consts::PI, n / 6),
                    center: None,
                });
            }
            let Ok((nb, d)) = b.apply_perturbation(&Perturbation { edits }) else {
                return Ok(());
            };
            let refit = tree.refit(nb.positions(), &d).unwrap();
            prop_assert_eq!(refit, Tree::build(nb.positions(), cap, root).unwrap());
        }
    }
}
