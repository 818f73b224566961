use crate::error::{Error, Result};
use crate::scalar::Marker;

/// Axis-aligned leaf cell. Each dimension is the half-open `[lo, hi)`,
/// except that the top cell along a dimension is closed (`closed_hi`).
#[derive(Clone, Debug, PartialEq)]
pub struct Region<S> {
    pub lo: Vec<S>,
    pub hi: Vec<S>,
    pub closed_hi: Vec<bool>,
}

impl<S: Marker> Region<S> {
    pub fn dims(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, point: &[S]) -> bool {
        (0..self.dims()).all(|d| {
            let x = point[d];
            x >= self.lo[d] && (x < self.hi[d] || (self.closed_hi[d] && x == self.hi[d]))
        })
    }

    /// True when no point can fall in the cell.
    pub fn is_void(&self) -> bool {
        (0..self.dims())
            .any(|d| self.lo[d] > self.hi[d] || (self.lo[d] == self.hi[d] && !self.closed_hi[d]))
    }

    pub(crate) fn child(&self, dim: usize, cuts: &[S], k: usize) -> Self {
        let mut out = self.clone();
        if k > 0 {
            out.lo[dim] = cuts[k - 1];
        }
        if k < cuts.len() {
            out.hi[dim] = cuts[k];
            out.closed_hi[dim] = false;
        }
        out
    }

    /// Two regions are neighbours when they touch along exactly one
    /// dimension and their extents overlap with positive length in all
    /// others.
    pub fn shares_boundary(&self, other: &Self) -> bool {
        let mut touching = 0;
        for d in 0..self.dims() {
            if self.hi[d] == other.lo[d] || other.hi[d] == self.lo[d] {
                touching += 1;
            } else if self.lo[d].max(other.lo[d]) >= self.hi[d].min(other.hi[d]) {
                return false;
            }
        }
        touching == 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum SplitNode<S> {
    Leaf(usize),
    Split {
        dim: usize,
        cuts: Vec<S>,
        children: Vec<SplitNode<S>>,
    },
}

impl<S: Marker> SplitNode<S> {
    fn relabel(&mut self, map: &[usize]) {
        match self {
            SplitNode::Leaf(id) => *id = map[*id],
            SplitNode::Split { children, .. } => children.iter_mut().for_each(|c| c.relabel(map)),
        }
    }

    fn collect(&self, serpentine: bool, reversed: bool, out: &mut Vec<usize>) {
        match self {
            SplitNode::Leaf(id) => out.push(*id),
            SplitNode::Split { children, .. } if serpentine => {
                // reversed traversal is the exact mirror of the forward one
                let flag = |t: usize| (t % 2 == 1) != reversed;
                if reversed {
                    for t in (0..children.len()).rev() {
                        children[t].collect(true, flag(t), out);
                    }
                } else {
                    for (t, c) in children.iter().enumerate() {
                        c.collect(true, flag(t), out);
                    }
                }
            }
            SplitNode::Split { children, .. } => {
                children.iter().for_each(|c| c.collect(false, false, out))
            }
        }
    }
}

/// Ordinal numbering of leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LeafOrder {
    /// Boustrophedon: sibling order alternates direction so that
    /// consecutive leaves are spatial neighbours.
    #[default]
    Serpentine,
    /// Depth-first, children in increasing coordinate order.
    Lexicographic,
}

/// Leaf cells plus a split tree for point location. Leaf ids are ordinal
/// indices `0..m`.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry<S> {
    root: SplitNode<S>,
    regions: Vec<Region<S>>,
    bounds: Region<S>,
}

impl<S: Marker> Geometry<S> {
    /// `root` references provisional ids indexing `regions`; the leaves are
    /// renumbered according to `order`.
    pub(crate) fn from_tree(
        mut root: SplitNode<S>,
        regions: Vec<Region<S>>,
        bounds: Region<S>,
        order: LeafOrder,
    ) -> (Self, Vec<usize>) {
        let mut visit = Vec::with_capacity(regions.len());
        root.collect(order == LeafOrder::Serpentine, false, &mut visit);
        let mut ordinal = vec![0; regions.len()];
        for (pos, &prov) in visit.iter().enumerate() {
            ordinal[prov] = pos;
        }
        root.relabel(&ordinal);
        let mut slots: Vec<Option<Region<S>>> = regions.into_iter().map(Some).collect();
        let regions = visit
            .iter()
            .map(|&prov| slots[prov].take().expect("each leaf visited once"))
            .collect();
        (
            Self {
                root,
                regions,
                bounds,
            },
            visit,
        )
    }

    pub fn leaf_count(&self) -> usize {
        self.regions.len()
    }

    pub fn dims(&self) -> usize {
        self.bounds.dims()
    }

    pub fn regions(&self) -> &[Region<S>] {
        &self.regions
    }

    /// Bounding box of all leaves.
    pub fn bounds(&self) -> &Region<S> {
        &self.bounds
    }

    /// Ordinal id of the leaf containing `point`, or `None` outside the
    /// bounding box.
    pub fn locate(&self, point: &[S]) -> Option<usize> {
        if !self.bounds.contains(point) {
            return None;
        }
        let mut node = &self.root;
        loop {
            match node {
                SplitNode::Leaf(id) => return Some(*id),
                SplitNode::Split {
                    dim,
                    cuts,
                    children,
                } => {
                    let x = point[*dim];
                    node = &children[cuts.partition_point(|c| *c <= x)];
                }
            }
        }
    }

    /// Rebuilds a split tree from leaf boxes alone (e.g. read back from a
    /// leaf table). The boxes must form a guillotine partition, which both
    /// partition schemes produce; leaf ids are the positions in `regions`.
    pub fn from_regions(regions: Vec<Region<S>>) -> Result<Self> {
        let first = regions
            .first()
            .ok_or_else(|| Error::LeafTable("no leaves".into()))?;
        let p = first.dims();
        if regions
            .iter()
            .any(|r| r.dims() != p || r.hi.len() != p || r.closed_hi.len() != p)
        {
            return Err(Error::LeafTable("leaves disagree on dimension".into()));
        }
        let mut bounds = first.clone();
        for r in &regions[1..] {
            for d in 0..p {
                bounds.lo[d] = bounds.lo[d].min(r.lo[d]);
                bounds.hi[d] = bounds.hi[d].max(r.hi[d]);
            }
        }
        bounds.closed_hi = vec![true; p];
        let live: Vec<usize> = (0..regions.len())
            .filter(|&i| !regions[i].is_void())
            .collect();
        if live.is_empty() {
            return Err(Error::LeafTable("every leaf is empty".into()));
        }
        let root = guillotine(&regions, live)?;
        Ok(Self {
            root,
            regions,
            bounds,
        })
    }
}

fn guillotine<S: Marker>(regions: &[Region<S>], mut ids: Vec<usize>) -> Result<SplitNode<S>> {
    if ids.len() == 1 {
        return Ok(SplitNode::Leaf(ids[0]));
    }
    let p = regions[ids[0]].dims();
    for dim in 0..p {
        ids.sort_by(|&a, &b| {
            regions[a].lo[dim]
                .partial_cmp(&regions[b].lo[dim])
                .expect("finite bounds")
                .then(a.cmp(&b))
        });
        let mut cuts = Vec::new();
        let mut starts = vec![0];
        let mut reach = regions[ids[0]].hi[dim];
        for (k, &id) in ids.iter().enumerate().skip(1) {
            let lo = regions[id].lo[dim];
            if lo > regions[ids[k - 1]].lo[dim] && reach <= lo {
                cuts.push(lo);
                starts.push(k);
            }
            reach = reach.max(regions[id].hi[dim]);
        }
        if cuts.is_empty() {
            continue;
        }
        starts.push(ids.len());
        let children = starts
            .windows(2)
            .map(|w| guillotine(regions, ids[w[0]..w[1]].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        return Ok(SplitNode::Split {
            dim,
            cuts,
            children,
        });
    }
    Err(Error::LeafTable(format!(
        "leaves {:?} overlap or do not form a guillotine partition",
        ids.iter().map(|i| i + 1).collect::<Vec<_>>()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_tree() -> (SplitNode<f64>, Vec<Region<f64>>, Region<f64>) {
        // 2x2 grid on [0,2]^2; provisional ids in lexicographic order
        let bounds = Region {
            lo: vec![0.0, 0.0],
            hi: vec![2.0, 2.0],
            closed_hi: vec![true, true],
        };
        let mut regions = Vec::new();
        let mut slabs = Vec::new();
        for i in 0..2 {
            let slab = bounds.child(0, &[1.0], i);
            let mut leaves = Vec::new();
            for j in 0..2 {
                leaves.push(SplitNode::Leaf(regions.len()));
                regions.push(slab.child(1, &[1.0], j));
            }
            slabs.push(SplitNode::Split {
                dim: 1,
                cuts: vec![1.0],
                children: leaves,
            });
        }
        let root = SplitNode::Split {
            dim: 0,
            cuts: vec![1.0],
            children: slabs,
        };
        (root, regions, bounds)
    }

    #[test]
    fn serpentine_reverses_alternate_slabs() {
        let (root, regions, bounds) = grid_tree();
        let (g, visit) = Geometry::from_tree(root, regions, bounds, LeafOrder::Serpentine);
        assert_eq!(visit, vec![0, 1, 3, 2]);
        assert_eq!(g.locate(&[1.5, 1.5]), Some(2));
        assert_eq!(g.locate(&[1.5, 0.5]), Some(3));
        for w in g.regions().windows(2) {
            assert!(w[0].shares_boundary(&w[1]));
        }
    }

    #[test]
    fn lexicographic_keeps_build_order() {
        let (root, regions, bounds) = grid_tree();
        let (_, visit) = Geometry::from_tree(root, regions, bounds, LeafOrder::Lexicographic);
        assert_eq!(visit, vec![0, 1, 2, 3]);
    }

    #[test]
    fn boundary_points_go_up_and_top_edge_is_closed() {
        let (root, regions, bounds) = grid_tree();
        let (g, _) = Geometry::from_tree(root, regions, bounds, LeafOrder::Lexicographic);
        assert_eq!(g.locate(&[1.0, 0.0]), Some(2));
        assert_eq!(g.locate(&[2.0, 2.0]), Some(3));
        assert_eq!(g.locate(&[2.0 + 1e-9, 1.0]), None);
        assert_eq!(g.locate(&[-1e-9, 1.0]), None);
    }

    #[test]
    fn rebuilds_tree_from_boxes() {
        let (root, regions, bounds) = grid_tree();
        let (g, _) = Geometry::from_tree(root, regions, bounds, LeafOrder::Serpentine);
        let rebuilt = Geometry::from_regions(g.regions().to_vec()).unwrap();
        for p in [[0.2, 0.2], [0.2, 1.7], [1.0, 1.0], [2.0, 0.0], [1.9, 2.0]] {
            assert_eq!(rebuilt.locate(&p), g.locate(&p));
        }
    }

    #[test]
    fn overlapping_boxes_are_rejected() {
        let a = Region {
            lo: vec![0.0],
            hi: vec![2.0],
            closed_hi: vec![false],
        };
        let b = Region {
            lo: vec![1.0],
            hi: vec![3.0],
            closed_hi: vec![true],
        };
        assert!(Geometry::from_regions(vec![a, b]).is_err());
    }
}
