//! Partitioning the pooled sample space into ordinal leaf bins and counting
//! each cohort per leaf.

mod build;
mod geometry;
mod table;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::{Cohort, MarkerMatrix};
use crate::scalar::Marker;

pub use build::{build_adaptive_partition, build_partition, build_sequential_partition};
pub use geometry::{Geometry, LeafOrder, Region};
pub use table::{LeafStatus, LeafTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    /// Quantile slabs along each dimension in turn.
    Sequential,
    /// Recursive median splits along the locally widest dimension.
    Adaptive,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum DimOrder {
    #[default]
    ByVariance,
    Explicit(Vec<usize>),
}

/// How the adaptive scheme chooses the dimension to split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SplitRule {
    /// Largest variance among the points of the cell being split.
    #[default]
    WithinCell,
    /// Cycle through the global dimension order by depth.
    GlobalOrder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionSpec {
    pub scheme: Scheme,
    /// Bins per dimension (sequential) or number of split levels (adaptive).
    pub resolution: usize,
    pub dim_order: DimOrder,
    pub leaf_order: LeafOrder,
    pub split_rule: SplitRule,
}

impl PartitionSpec {
    pub fn sequential(bins_per_dim: usize) -> Self {
        Self {
            scheme: Scheme::Sequential,
            resolution: bins_per_dim,
            dim_order: DimOrder::ByVariance,
            leaf_order: LeafOrder::Serpentine,
            split_rule: SplitRule::WithinCell,
        }
    }

    pub fn adaptive(splits: usize) -> Self {
        Self {
            scheme: Scheme::Adaptive,
            resolution: splits,
            dim_order: DimOrder::ByVariance,
            leaf_order: LeafOrder::Lexicographic,
            split_rule: SplitRule::WithinCell,
        }
    }

    /// m = m̃^p (sequential) or 2^m̃ (adaptive); `None` on overflow.
    pub fn leaf_count(&self, dims: usize) -> Option<usize> {
        match self.scheme {
            Scheme::Sequential => self.resolution.checked_pow(dims as u32),
            Scheme::Adaptive => 1usize.checked_shl(self.resolution as u32),
        }
    }
}

/// Target pooled count per leaf, n ≈ {2(N₁+N₂)}^{1/3}.
pub fn target_leaf_size(total: usize) -> f64 {
    (2.0 * total as f64).cbrt()
}

/// Bins per dimension giving roughly `target` pooled points per leaf
/// (default [`target_leaf_size`]); never below 2.
pub fn default_bins_per_dim(total: usize, dims: usize, target: Option<f64>) -> usize {
    let n = target.unwrap_or_else(|| target_leaf_size(total));
    let per_dim = (total as f64 / n).powf(1.0 / dims as f64).round() as usize;
    per_dim.max(2)
}

/// Pooled sample variance of each column, accumulated in `f64`.
pub fn column_variances<S: Marker>(matrix: &MarkerMatrix<S>) -> Vec<f64> {
    let n = matrix.rows() as f64;
    (0..matrix.dims())
        .map(|d| {
            if matrix.rows() < 2 {
                return 0.0;
            }
            let mean = matrix.column(d).map(|v| v.to_f64().unwrap()).sum::<f64>() / n;
            matrix
                .column(d)
                .map(|v| (v.to_f64().unwrap() - mean).powi(2))
                .sum::<f64>()
                / (n - 1.0)
        })
        .collect()
}

/// Column indices by descending pooled variance; ties keep column order.
pub fn order_dimensions<S: Marker>(matrix: &MarkerMatrix<S>) -> Vec<usize> {
    let var = column_variances(matrix);
    let mut order: Vec<usize> = (0..var.len()).collect();
    order.sort_by(|&a, &b| var[b].partial_cmp(&var[a]).expect("finite variance"));
    order
}

/// Leaf geometry with per-leaf pooled (nᵢ), cohort-2 (Xᵢ) and cohort-1 (X̃ᵢ)
/// counts, indexed by ordinal leaf id.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafBinning<S> {
    geometry: Geometry<S>,
    n: Vec<u64>,
    x: Vec<u64>,
    x_tilde: Vec<u64>,
    dim_order: Vec<usize>,
    marker_names: Vec<String>,
}

impl<S: Marker> LeafBinning<S> {
    pub fn from_counts(
        geometry: Geometry<S>,
        x: Vec<u64>,
        x_tilde: Vec<u64>,
        dim_order: Vec<usize>,
        marker_names: Vec<String>,
    ) -> Result<Self> {
        let m = geometry.leaf_count();
        if x.len() != m || x_tilde.len() != m {
            return Err(Error::Shape(format!(
                "{m} leaves but {} / {} counts",
                x.len(),
                x_tilde.len()
            )));
        }
        let n = x.iter().zip(&x_tilde).map(|(a, b)| a + b).collect();
        Ok(Self {
            geometry,
            n,
            x,
            x_tilde,
            dim_order,
            marker_names,
        })
    }

    pub fn m(&self) -> usize {
        self.n.len()
    }

    pub fn geometry(&self) -> &Geometry<S> {
        &self.geometry
    }

    pub fn regions(&self) -> &[Region<S>] {
        self.geometry.regions()
    }

    pub fn n(&self) -> &[u64] {
        &self.n
    }

    /// Cohort-2 counts.
    pub fn x(&self) -> &[u64] {
        &self.x
    }

    /// Cohort-1 counts.
    pub fn x_tilde(&self) -> &[u64] {
        &self.x_tilde
    }

    /// Dimension order the partition was built with.
    pub fn dim_order(&self) -> &[usize] {
        &self.dim_order
    }

    pub fn marker_names(&self) -> &[String] {
        &self.marker_names
    }

    /// (N, N₁, N₂).
    pub fn totals(&self) -> (u64, u64, u64) {
        (
            self.n.iter().sum(),
            self.x_tilde.iter().sum(),
            self.x.iter().sum(),
        )
    }

    /// max nᵢ − min nᵢ.
    pub fn count_spread(&self) -> u64 {
        let max = self.n.iter().max().copied().unwrap_or(0);
        let min = self.n.iter().min().copied().unwrap_or(0);
        max - min
    }

    /// Same geometry with the cohort counts swapped.
    pub fn flipped(&self) -> Self {
        let mut out = self.clone();
        std::mem::swap(&mut out.x, &mut out.x_tilde);
        out
    }
}

/// Assigns every row to its leaf and tabulates cohort counts.
pub fn assign_and_count<S: Marker>(
    geometry: &Geometry<S>,
    matrix: &MarkerMatrix<S>,
    dim_order: Vec<usize>,
) -> Result<LeafBinning<S>> {
    if geometry.dims() != matrix.dims() {
        return Err(Error::Shape(format!(
            "geometry has {} dims, data has {}",
            geometry.dims(),
            matrix.dims()
        )));
    }
    let m = geometry.leaf_count();
    let cohorts = matrix.cohorts();
    const CHUNK: usize = 1 << 16;
    let (x, x_tilde) = (0..matrix.rows())
        .into_par_iter()
        .with_min_len(CHUNK)
        .try_fold(
            || (vec![0u64; m], vec![0u64; m]),
            |(mut x, mut xt), row| {
                let leaf = geometry
                    .locate(matrix.row(row))
                    .ok_or(Error::Unassigned { row })?;
                match cohorts[row] {
                    Cohort::Two => x[leaf] += 1,
                    Cohort::One => xt[leaf] += 1,
                }
                Ok::<_, Error>((x, xt))
            },
        )
        .try_reduce(
            || (vec![0u64; m], vec![0u64; m]),
            |(mut a, mut at), (b, bt)| {
                a.iter_mut().zip(b).for_each(|(u, v)| *u += v);
                at.iter_mut().zip(bt).for_each(|(u, v)| *u += v);
                Ok((a, at))
            },
        )?;
    LeafBinning::from_counts(
        geometry.clone(),
        x,
        x_tilde,
        dim_order,
        matrix.marker_names().to_vec(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(values: Vec<f64>, dims: usize, cohort: Vec<Cohort>) -> MarkerMatrix<f64> {
        let names = (0..dims).map(|d| format!("m{d}")).collect();
        MarkerMatrix::new(names, values, cohort).unwrap()
    }

    #[test]
    fn dimension_order_by_variance() {
        // variances 1, 9, 4
        let m = matrix(
            vec![0.0, 0.0, 0.0, 1.0, 3.0, 2.0, 2.0, 6.0, 4.0],
            3,
            vec![Cohort::One; 3],
        );
        assert_eq!(order_dimensions(&m), vec![1, 2, 0]);
        let tie = matrix(vec![0.0, 0.0, 2.0, 2.0], 2, vec![Cohort::One; 2]);
        assert_eq!(order_dimensions(&tie), vec![0, 1]);
        let one = matrix(vec![1.0, 5.0], 1, vec![Cohort::One; 2]);
        assert_eq!(order_dimensions(&one), vec![0]);
    }

    #[test]
    fn sizing_rule() {
        // {2 * 2 * 1,474,560}^{1/3} ≈ 180.6
        let n = target_leaf_size(2 * 1_474_560);
        assert!((n - 180.6).abs() < 0.1, "{n}");
        assert_eq!(default_bins_per_dim(1_000_000, 2, None), 89);
        assert_eq!(default_bins_per_dim(10, 1, Some(100.0)), 2);
    }

    #[test]
    fn leaf_counts_per_scheme() {
        assert_eq!(PartitionSpec::sequential(8).leaf_count(2), Some(64));
        assert_eq!(PartitionSpec::adaptive(3).leaf_count(5), Some(8));
        assert_eq!(PartitionSpec::sequential(1 << 20).leaf_count(4), None);
    }

    #[test]
    fn counts_two_leaves() {
        let m = matrix(
            vec![0.0, 1.0, 2.0, 3.0],
            1,
            vec![Cohort::One, Cohort::Two, Cohort::Two, Cohort::One],
        );
        let b = build_sequential_partition(&m, &PartitionSpec::sequential(2)).unwrap();
        assert_eq!(b.n(), &[2, 2]);
        assert_eq!(b.x(), &[1, 1]);
        assert_eq!(b.x_tilde(), &[1, 1]);
        let again = assign_and_count(b.geometry(), &m, vec![0]).unwrap();
        assert_eq!(again, b);
    }

    #[test]
    fn point_outside_geometry_is_unassigned() {
        let m = matrix(vec![0.0, 1.0, 2.0, 3.0], 1, vec![Cohort::One; 4]);
        let b = build_sequential_partition(&m, &PartitionSpec::sequential(2)).unwrap();
        let other = matrix(vec![1.0, 9.0], 1, vec![Cohort::Two; 2]);
        assert!(matches!(
            assign_and_count(b.geometry(), &other, vec![0]),
            Err(Error::Unassigned { row: 1 })
        ));
    }
}
