use std::cmp::Ordering;

use super::geometry::{Geometry, LeafOrder, Region, SplitNode};
use super::{order_dimensions, DimOrder, LeafBinning, PartitionSpec, Scheme, SplitRule};
use crate::error::{Error, Result};
use crate::ingest::{Cohort, MarkerMatrix};
use crate::scalar::Marker;

pub fn build_partition<S: Marker>(
    matrix: &MarkerMatrix<S>,
    spec: &PartitionSpec,
) -> Result<LeafBinning<S>> {
    match spec.scheme {
        Scheme::Sequential => build_sequential_partition(matrix, spec),
        Scheme::Adaptive => build_adaptive_partition(matrix, spec),
    }
}

/// Splits the first dimension at pooled sample quantiles of levels
/// k/m̃, then each slab along the next dimension at the slab's own
/// quantiles, and so on through every dimension.
///
/// The k-th cut of a cell holding `n` points is the order statistic at
/// 0-based index ⌈k·n/m̃⌉, so with distinct values the part below it holds
/// exactly ⌈k·n/m̃⌉ points.
pub fn build_sequential_partition<S: Marker>(
    matrix: &MarkerMatrix<S>,
    spec: &PartitionSpec,
) -> Result<LeafBinning<S>> {
    if spec.scheme != Scheme::Sequential {
        return Err(Error::InvalidSpec("expected the sequential scheme".into()));
    }
    if spec.resolution < 2 {
        return Err(Error::InvalidSpec(format!(
            "bins per dimension must be at least 2, got {}",
            spec.resolution
        )));
    }
    let leaves = spec
        .leaf_count(matrix.dims())
        .ok_or_else(|| Error::InvalidSpec("leaf count overflows".into()))?;
    if matrix.rows() < leaves {
        return Err(Error::TooFewPoints {
            points: matrix.rows(),
            leaves,
        });
    }
    let order = resolve_order(matrix, &spec.dim_order)?;
    let mut b = Builder::new(matrix, leaves);
    let mut rows: Vec<u32> = (0..matrix.rows() as u32).collect();
    let bounds = b.bounding_box();
    let root = b.sequential(&mut rows, bounds.clone(), &order, spec.resolution, 0);
    Ok(b.finish(root, bounds, spec.leaf_order, order))
}

/// Median splits: each cell is halved at the median of one dimension, for
/// `m̃` levels, giving 2^m̃ leaves numbered depth first.
pub fn build_adaptive_partition<S: Marker>(
    matrix: &MarkerMatrix<S>,
    spec: &PartitionSpec,
) -> Result<LeafBinning<S>> {
    if spec.scheme != Scheme::Adaptive {
        return Err(Error::InvalidSpec("expected the adaptive scheme".into()));
    }
    if spec.resolution < 1 {
        return Err(Error::InvalidSpec(
            "at least one split level is required".into(),
        ));
    }
    let leaves = spec
        .leaf_count(matrix.dims())
        .ok_or_else(|| Error::InvalidSpec("leaf count overflows".into()))?;
    if matrix.rows() < leaves {
        return Err(Error::TooFewPoints {
            points: matrix.rows(),
            leaves,
        });
    }
    let order = resolve_order(matrix, &spec.dim_order)?;
    let mut b = Builder::new(matrix, leaves);
    let mut rows: Vec<u32> = (0..matrix.rows() as u32).collect();
    let bounds = b.bounding_box();
    let root = b.adaptive(&mut rows, bounds.clone(), &order, spec, 0)?;
    Ok(b.finish(root, bounds, spec.leaf_order, order))
}

fn resolve_order<S: Marker>(matrix: &MarkerMatrix<S>, order: &DimOrder) -> Result<Vec<usize>> {
    match order {
        DimOrder::ByVariance => Ok(order_dimensions(matrix)),
        DimOrder::Explicit(list) => {
            let mut seen = list.clone();
            seen.sort_unstable();
            if seen != (0..matrix.dims()).collect::<Vec<_>>() {
                return Err(Error::InvalidSpec(format!(
                    "dimension order {list:?} is not a permutation of 0..{}",
                    matrix.dims()
                )));
            }
            Ok(list.clone())
        }
    }
}

struct Builder<'a, S> {
    matrix: &'a MarkerMatrix<S>,
    regions: Vec<Region<S>>,
    x: Vec<u64>,
    x_tilde: Vec<u64>,
}

impl<'a, S: Marker> Builder<'a, S> {
    fn new(matrix: &'a MarkerMatrix<S>, leaves: usize) -> Self {
        Self {
            matrix,
            regions: Vec::with_capacity(leaves),
            x: Vec::with_capacity(leaves),
            x_tilde: Vec::with_capacity(leaves),
        }
    }

    fn bounding_box(&self) -> Region<S> {
        let p = self.matrix.dims();
        let mut lo = self.matrix.row(0).to_vec();
        let mut hi = lo.clone();
        for r in 1..self.matrix.rows() {
            for (d, &v) in self.matrix.row(r).iter().enumerate() {
                lo[d] = lo[d].min(v);
                hi[d] = hi[d].max(v);
            }
        }
        Region {
            lo,
            hi,
            closed_hi: vec![true; p],
        }
    }

    fn leaf(&mut self, rows: &[u32], cell: Region<S>) -> SplitNode<S> {
        let cohorts = self.matrix.cohorts();
        let x = rows
            .iter()
            .filter(|&&r| cohorts[r as usize] == Cohort::Two)
            .count() as u64;
        self.x.push(x);
        self.x_tilde.push(rows.len() as u64 - x);
        self.regions.push(cell);
        SplitNode::Leaf(self.regions.len() - 1)
    }

    /// Sorts `rows` by their value along `dim` (row index breaks ties).
    fn sort_along(&self, rows: &mut [u32], dim: usize) {
        let m = self.matrix;
        let mut keyed: Vec<(S, u32)> = rows
            .iter()
            .map(|&r| (m.value(r as usize, dim), r))
            .collect();
        keyed.sort_unstable_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
        });
        rows.iter_mut().zip(keyed).for_each(|(r, (_, k))| *r = k);
    }

    /// Recurses into the children delimited by `cuts`; `rows` must be sorted
    /// along `dim`.
    fn descend<F>(
        &mut self,
        rows: &mut [u32],
        cell: &Region<S>,
        dim: usize,
        cuts: Vec<S>,
        mut recurse: F,
    ) -> Result<SplitNode<S>>
    where
        F: FnMut(&mut Self, &mut [u32], Region<S>) -> Result<SplitNode<S>>,
    {
        let m = self.matrix;
        let mut children = Vec::with_capacity(cuts.len() + 1);
        let mut rest = rows;
        for k in 0..=cuts.len() {
            let take = if k < cuts.len() {
                rest.partition_point(|&r| m.value(r as usize, dim) < cuts[k])
            } else {
                rest.len()
            };
            let (head, tail) = rest.split_at_mut(take);
            children.push(recurse(self, head, cell.child(dim, &cuts, k))?);
            rest = tail;
        }
        Ok(SplitNode::Split {
            dim,
            cuts,
            children,
        })
    }

    fn sequential(
        &mut self,
        rows: &mut [u32],
        cell: Region<S>,
        order: &[usize],
        bins: usize,
        depth: usize,
    ) -> SplitNode<S> {
        if depth == order.len() {
            return self.leaf(rows, cell);
        }
        let dim = order[depth];
        self.sort_along(rows, dim);
        let n = rows.len();
        let cuts: Vec<S> = (1..bins)
            .map(|k| {
                if n == 0 {
                    cell.lo[dim]
                } else {
                    let idx = (k * n).div_ceil(bins).min(n - 1);
                    self.matrix.value(rows[idx] as usize, dim)
                }
            })
            .collect();
        self.descend(rows, &cell, dim, cuts, |b, sub, child| {
            Ok(b.sequential(sub, child, order, bins, depth + 1))
        })
        .expect("sequential recursion is infallible")
    }

    fn adaptive(
        &mut self,
        rows: &mut [u32],
        cell: Region<S>,
        order: &[usize],
        spec: &PartitionSpec,
        depth: usize,
    ) -> Result<SplitNode<S>> {
        if depth == spec.resolution {
            return Ok(self.leaf(rows, cell));
        }
        let dim = match spec.split_rule {
            SplitRule::WithinCell => self.widest_dim(rows)?,
            SplitRule::GlobalOrder => {
                let d = order[depth % order.len()];
                if self.variance(rows, d) <= 0.0 {
                    return Err(Error::ConstantDimension { dim: d });
                }
                d
            }
        };
        self.sort_along(rows, dim);
        let idx = rows.len().div_ceil(2);
        let cut = self.matrix.value(rows[idx] as usize, dim);
        self.descend(rows, &cell, dim, vec![cut], |b, sub, child| {
            b.adaptive(sub, child, order, spec, depth + 1)
        })
    }

    fn variance(&self, rows: &[u32], dim: usize) -> f64 {
        if rows.len() < 2 {
            return 0.0;
        }
        let vals = rows
            .iter()
            .map(|&r| self.matrix.value(r as usize, dim).to_f64().unwrap());
        let n = rows.len() as f64;
        let mean = vals.clone().sum::<f64>() / n;
        vals.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    }

    /// Dimension of largest within-cell variance; ties go to the lower
    /// column index.
    fn widest_dim(&self, rows: &[u32]) -> Result<usize> {
        let mut best = (0, self.variance(rows, 0));
        for d in 1..self.matrix.dims() {
            let v = self.variance(rows, d);
            if v > best.1 {
                best = (d, v);
            }
        }
        if best.1 <= 0.0 {
            return Err(Error::ConstantDimension { dim: best.0 });
        }
        Ok(best.0)
    }

    fn finish(
        self,
        root: SplitNode<S>,
        bounds: Region<S>,
        leaf_order: LeafOrder,
        dim_order: Vec<usize>,
    ) -> LeafBinning<S> {
        let (geometry, visit) = Geometry::from_tree(root, self.regions, bounds, leaf_order);
        let x = visit.iter().map(|&i| self.x[i]).collect();
        let x_tilde = visit.iter().map(|&i| self.x_tilde[i]).collect();
        LeafBinning::from_counts(
            geometry,
            x,
            x_tilde,
            dim_order,
            self.matrix.marker_names().to_vec(),
        )
        .expect("builder keeps counts aligned with leaves")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::assign_and_count;

    fn matrix(values: Vec<f64>, dims: usize) -> MarkerMatrix<f64> {
        let rows = values.len() / dims;
        let cohort = (0..rows)
            .map(|i| if i % 2 == 0 { Cohort::One } else { Cohort::Two })
            .collect();
        let names = (0..dims).map(|d| format!("m{d}")).collect();
        MarkerMatrix::new(names, values, cohort).unwrap()
    }

    #[test]
    fn sequential_1d_exact_quantiles() {
        let m = matrix((1..=8).map(f64::from).collect(), 1);
        let b = build_sequential_partition(&m, &PartitionSpec::sequential(4)).unwrap();
        assert_eq!(b.m(), 4);
        assert_eq!(b.n(), &[2, 2, 2, 2]);
        let lows: Vec<f64> = b.regions().iter().map(|r| r.lo[0]).collect();
        assert_eq!(lows, vec![1.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn sequential_2d_nested_medians() {
        // 16 points in general position
        let pts: Vec<f64> = (0..16)
            .flat_map(|i| {
                let i = i as f64;
                [i * 1.37 % 5.1, (i * 2.91 + 0.3) % 4.3]
            })
            .collect();
        let m = matrix(pts, 2);
        let b = build_sequential_partition(&m, &PartitionSpec::sequential(2)).unwrap();
        assert_eq!(b.m(), 4);
        assert_eq!(b.n(), &[4, 4, 4, 4]);
        assert_eq!(
            assign_and_count(b.geometry(), &m, b.dim_order().to_vec()).unwrap(),
            b
        );
    }

    #[test]
    fn sequential_errors() {
        let m = matrix((0..10).map(f64::from).collect(), 1);
        assert!(matches!(
            build_sequential_partition(&m, &PartitionSpec::sequential(11)),
            Err(Error::TooFewPoints { .. })
        ));
        assert!(matches!(
            build_sequential_partition(&m, &PartitionSpec::sequential(1)),
            Err(Error::InvalidSpec(_))
        ));
        let two = matrix((0..30).map(f64::from).collect(), 2);
        assert!(matches!(
            build_sequential_partition(&two, &PartitionSpec::sequential(4)),
            Err(Error::TooFewPoints {
                points: 15,
                leaves: 16
            })
        ));
    }

    #[test]
    fn duplicates_fall_on_one_side() {
        let m = matrix(vec![1.0, 3.0, 3.0, 3.0], 1);
        let b = build_sequential_partition(&m, &PartitionSpec::sequential(2)).unwrap();
        assert_eq!(b.n(), &[1, 3]);
        assert_eq!(b.count_spread(), 2);
        // zero-width cells when several cuts coincide
        let m = matrix(vec![1.0, 2.0, 3.0, 3.0, 3.0, 3.0], 1);
        let b = build_sequential_partition(&m, &PartitionSpec::sequential(3)).unwrap();
        assert_eq!(b.n(), &[2, 0, 4]);
        assert_eq!(assign_and_count(b.geometry(), &m, vec![0]).unwrap(), b);
    }

    #[test]
    fn adaptive_single_split() {
        let m = matrix(vec![4.0, 1.0, 3.0, 2.0], 1);
        let b = build_adaptive_partition(&m, &PartitionSpec::adaptive(1)).unwrap();
        assert_eq!(b.n(), &[2, 2]);
        assert_eq!(b.regions()[1].lo[0], 3.0);
    }

    #[test]
    fn adaptive_levels_give_power_of_two_leaves() {
        let pts: Vec<f64> = (0..40)
            .flat_map(|i| {
                let i = i as f64;
                [i.sin() * 3.0, (i * 0.7).cos(), i * 0.01]
            })
            .collect();
        let m = matrix(pts, 3);
        let b = build_adaptive_partition(&m, &PartitionSpec::adaptive(3)).unwrap();
        assert_eq!(b.m(), 8);
        assert_eq!(b.totals().0, 40);
        assert_eq!(
            assign_and_count(b.geometry(), &m, b.dim_order().to_vec()).unwrap(),
            b
        );
    }

    #[test]
    fn adaptive_rejects_identical_points() {
        let m = matrix(vec![2.0; 8], 2);
        assert!(matches!(
            build_adaptive_partition(&m, &PartitionSpec::adaptive(1)),
            Err(Error::ConstantDimension { .. })
        ));
        let m = matrix((0..4).map(f64::from).collect(), 1);
        assert!(matches!(
            build_adaptive_partition(&m, &PartitionSpec::adaptive(3)),
            Err(Error::TooFewPoints { .. })
        ));
    }

    #[test]
    fn global_order_errors_on_constant_dimension() {
        let m = matrix(vec![0.0, 5.0, 1.0, 5.0, 2.0, 5.0, 3.0, 5.0], 2);
        let mut spec = PartitionSpec::adaptive(2);
        spec.split_rule = SplitRule::GlobalOrder;
        spec.dim_order = DimOrder::Explicit(vec![0, 1]);
        assert!(matches!(
            build_adaptive_partition(&m, &spec),
            Err(Error::ConstantDimension { dim: 1 })
        ));
    }

    #[test]
    fn explicit_order_must_be_a_permutation() {
        let m = matrix((0..8).map(f64::from).collect(), 2);
        let mut spec = PartitionSpec::sequential(2);
        spec.dim_order = DimOrder::Explicit(vec![0, 0]);
        assert!(build_sequential_partition(&m, &spec).is_err());
    }
}
