//! Property checks shared by the property-test target and the acceptance
//! summary. Each runs a deterministic proptest runner for [`CASES`] cases and
//! returns the shrunk failure, if any, as a string.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::fmt::Debug;

use num_rational::BigRational;
use num_traits::{One, Zero};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

use team_core::ingest::{Cohort, MarkerMatrix};
use team_core::nulldist::{
    binomial_dist, build_layer_null, convolve, threshold_count, truncate_renormalize, DiscreteDist,
    LayeredNull, NullCache,
};
use team_core::partition::{build_partition, LeafBinning, PartitionSpec};
use team_core::team::{
    bh_with_floor, find_threshold, reject_nodes, run_team, run_team_counts, StopRule, TeamResult,
};

pub const CASES: u32 = 1000;

pub fn check<S>(
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String>
where
    S: Strategy,
    S::Value: Debug,
{
    let config = Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner =
        TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn rational(num: i64, den: i64) -> BigRational {
    BigRational::new(num.into(), den.into())
}

fn dist_f64() -> impl Strategy<Value = DiscreteDist<f64>> {
    prop::collection::vec(0.0f64..1.0, 1..40).prop_filter_map("zero mass", |w| {
        let total: f64 = w.iter().sum();
        (total > 1e-6)
            .then(|| DiscreteDist::from_pmf(w.iter().map(|v| v / total).collect()).unwrap())
    })
}

fn dist_exact() -> impl Strategy<Value = DiscreteDist<BigRational>> {
    prop::collection::vec(0i64..20, 1..12).prop_filter_map("zero mass", |w| {
        let total: i64 = w.iter().sum();
        (total > 0).then(|| {
            DiscreteDist::from_pmf(w.iter().map(|&v| rational(v, total)).collect()).unwrap()
        })
    })
}

fn close(a: f64, b: f64, tol: f64) -> Result<(), TestCaseError> {
    prop_assert!((a - b).abs() <= tol, "{a} vs {b}");
    Ok(())
}

pub fn pmf_normalization() -> Result<(), String> {
    check((0u64..3000, 0.0005f64..0.9995), |(n, theta)| {
        let d = binomial_dist(n, &theta).unwrap();
        prop_assert_eq!(d.support_max(), n as usize);
        prop_assert!(d.pmf().iter().all(|&p| p >= 0.0));
        close(d.pmf().iter().sum(), 1.0, 1e-12)?;
        close(d.tail()[0] + d.pmf()[0], 1.0, 1e-12)?;
        Ok(())
    })?;
    check((0u64..40, 1i64..50), |(n, num)| {
        let theta = rational(num, 50);
        let d = binomial_dist(n, &theta).unwrap();
        let total = d.pmf().iter().fold(BigRational::zero(), |a, b| a + b);
        prop_assert_eq!(total, BigRational::one());
        Ok(())
    })
}

pub fn ccdf_monotonicity() -> Result<(), String> {
    check((dist_f64(), dist_f64(), 0.0f64..0.3), |(a, b, c)| {
        let ba = threshold_count(&a, &c).unwrap();
        let bb = threshold_count(&b, &c).unwrap();
        for d in [a.clone(), convolve(&a, &b)] {
            prop_assert_eq!(d.ccdf(-1), 1.0);
            prop_assert_eq!(d.ccdf(d.support_max() as i64), 0.0);
            for x in -1..=d.support_max() as i64 {
                prop_assert!(d.ccdf(x + 1) <= d.ccdf(x));
                close(d.ccdf(x) + d.cdf(x), 1.0, 1e-12)?;
            }
        }
        if let (Some(ba), Some(bb)) = (ba, bb) {
            let ta = truncate_renormalize(&a, Some(ba)).unwrap();
            prop_assert!(ta.support_max() <= ba);
            close(ta.pmf().iter().sum(), 1.0, 1e-12)?;
            // b̂ is the largest count whose tail still exceeds ĉ
            prop_assert!(a.ccdf(ba as i64) > c);
            prop_assert!(a.ccdf(ba as i64 + 1) <= c);
            let _ = bb;
        }
        Ok(())
    })
}

pub fn convolution_algebra() -> Result<(), String> {
    check(
        (dist_f64(), dist_f64(), dist_f64(), 0usize..5),
        |(a, b, c, k)| {
            let ab = convolve(&a, &b);
            let ba = convolve(&b, &a);
            prop_assert_eq!(ab.support_max(), a.support_max() + b.support_max());
            for (x, y) in ab.pmf().iter().zip(ba.pmf()) {
                close(*x, *y, 1e-14)?;
            }
            let left = convolve(&ab, &c);
            let right = convolve(&a, &convolve(&b, &c));
            for (x, y) in left.pmf().iter().zip(right.pmf()) {
                close(*x, *y, 1e-13)?;
            }
            let shifted = convolve(&a, &DiscreteDist::point_mass(k));
            for (i, p) in a.pmf().iter().enumerate() {
                close(shifted.pmf()[i + k], *p, 1e-15)?;
            }
            let mean = |d: &DiscreteDist<f64>| {
                d.pmf()
                    .iter()
                    .enumerate()
                    .map(|(i, p)| i as f64 * p)
                    .sum::<f64>()
            };
            close(mean(&ab), mean(&a) + mean(&b), 1e-9)?;
            Ok(())
        },
    )?;
    check((dist_exact(), dist_exact(), dist_exact()), |(a, b, c)| {
        prop_assert_eq!(convolve(&a, &b), convolve(&b, &a));
        prop_assert_eq!(
            convolve(&convolve(&a, &b), &c),
            convolve(&a, &convolve(&b, &c))
        );
        let total = convolve(&a, &b)
            .pmf()
            .iter()
            .fold(BigRational::zero(), |s, p| s + p);
        prop_assert_eq!(total, BigRational::one());
        Ok(())
    })
}

/// Rows with a few distinct values per column so ties and empty cells occur.
fn matrix() -> impl Strategy<Value = (MarkerMatrix<f64>, usize)> {
    (1usize..=3, 40usize..300, any::<bool>()).prop_flat_map(|(dims, rows, coarse)| {
        let value = if coarse {
            (0i32..6).prop_map(f64::from).boxed()
        } else {
            (-5.0f64..5.0).boxed()
        };
        let max_bins = ((rows as f64).powf(1.0 / dims as f64).floor() as usize).clamp(2, 6);
        (
            prop::collection::vec(value, rows * dims),
            prop::collection::vec(any::<bool>(), rows),
            2usize..=max_bins,
        )
            .prop_map(move |(values, two, bins)| {
                let names = (0..dims).map(|d| format!("M{d}")).collect();
                let cohort = two
                    .into_iter()
                    .map(|t| if t { Cohort::Two } else { Cohort::One })
                    .collect();
                (MarkerMatrix::new(names, values, cohort).unwrap(), bins)
            })
    })
}

pub fn count_conservation() -> Result<(), String> {
    check(matrix(), |(m, bins)| {
        let b: LeafBinning<f64> = build_partition(&m, &PartitionSpec::sequential(bins)).unwrap();
        prop_assert_eq!(b.m(), bins.pow(m.dims() as u32));
        let (n, n1, n2) = b.totals();
        let (c1, c2) = m.cohort_sizes();
        prop_assert_eq!(n as usize, m.rows());
        prop_assert_eq!((n1, n2), (c1, c2));
        for i in 0..b.m() {
            prop_assert_eq!(b.x()[i] + b.x_tilde()[i], b.n()[i]);
        }
        let mut located = vec![0u64; b.m()];
        for r in 0..m.rows() {
            let leaf = b.geometry().locate(m.row(r));
            prop_assert!(leaf.is_some(), "row {r} unlocated");
            located[leaf.unwrap()] += 1;
        }
        prop_assert_eq!(&located[..], b.n());
        prop_assert_eq!(b.flipped().flipped(), b.clone());
        Ok(())
    })
}

fn counts() -> impl Strategy<Value = (Vec<u64>, Vec<u64>)> {
    (8usize..160).prop_flat_map(|m| {
        prop::collection::vec((0u64..80, 0.0f64..1.0, 0.0f64..1.0), m).prop_map(|cells| {
            cells
                .into_iter()
                .map(|(n, u, lift)| {
                    // a fifth of the cells lean strongly towards cohort 2
                    let p = if lift < 0.2 { 0.9 } else { 0.5 };
                    let x = (0..n).filter(|i| ((*i as f64 + u) / n as f64) < p).count() as u64;
                    (n, x)
                })
                .unzip()
        })
    })
}

fn run(n: &[u64], x: &[u64], alpha: f64, layers: usize) -> Option<TeamResult<f64>> {
    run_team_counts(n, x, alpha, &StopRule::layers(layers)).ok()
}

pub fn rejection_disjointness() -> Result<(), String> {
    check((counts(), 0.01f64..0.3), |((n, x), alpha)| {
        let Some(r) = run(&n, &x, alpha, 5) else {
            return Ok(());
        };
        let mut seen = BTreeSet::new();
        for layer in &r.layers {
            for &leaf in &layer.rejected_leaves {
                prop_assert!(seen.insert(leaf), "leaf {leaf} rejected twice");
                prop_assert_eq!(r.leaf_layer[leaf], layer.layer);
            }
        }
        let flagged = r.leaf_layer.iter().filter(|&&l| l > 0).count();
        prop_assert_eq!(flagged, seen.len());
        prop_assert_eq!(r.rejected_leaves(), seen.into_iter().collect::<Vec<_>>());
        // empty leaves are never rejected
        for (i, &l) in r.leaf_layer.iter().enumerate() {
            if n[i] == 0 {
                prop_assert_eq!(l, 0);
            }
        }
        Ok(())
    })
}

pub fn alpha_monotonicity() -> Result<(), String> {
    check((counts(), 0.005f64..0.5, 0.0f64..1.0), |((n, x), a1, t)| {
        let a2 = a1 + t * (0.99 - a1);
        let (Some(r1), Some(r2)) = (run(&n, &x, a1, 1), run(&n, &x, a2, 1)) else {
            return Ok(());
        };
        let small: BTreeSet<_> = r1.rejected_leaves().into_iter().collect();
        let large: BTreeSet<_> = r2.rejected_leaves().into_iter().collect();
        prop_assert!(small.is_subset(&large));
        Ok(())
    })
}

pub fn determinism() -> Result<(), String> {
    check(matrix(), |(m, bins)| {
        let spec = PartitionSpec::sequential(bins);
        let once = || {
            let b = build_partition(&m, &spec).ok()?;
            let r: TeamResult<f64> = run_team(&b, 0.1, &StopRule::layers(4)).ok()?;
            Some((b, r))
        };
        let (a, b) = (once(), once());
        match (a, b) {
            (Some((ba, ra)), Some((bb, rb))) => {
                prop_assert_eq!(ba, bb);
                prop_assert_eq!(ra.leaf_layer, rb.leaf_layer);
                prop_assert_eq!(ra.leaf_pvalue, rb.leaf_pvalue);
                prop_assert_eq!(ra.stop_layer, rb.stop_layer);
            }
            (None, None) => {}
            _ => prop_assert!(false, "one run failed and the other did not"),
        }
        Ok(())
    })
}

pub fn memoization_transparency() -> Result<(), String> {
    let case = (
        prop::collection::vec(0u64..30, 2..24),
        0.05f64..0.95,
        0.001f64..0.3,
    );
    check(case, |(leaves, theta, c)| {
        let mut cache = NullCache::new(theta).unwrap();
        let ids = cache.leaves(&leaves).unwrap();
        let distinct: BTreeSet<_> = leaves.iter().collect();
        prop_assert_eq!(cache.len(), distinct.len());
        let fresh: Vec<_> = leaves
            .iter()
            .map(|&n| std::sync::Arc::new(LayeredNull::leaf(n, &theta).unwrap()))
            .collect();
        for (id, f) in ids.iter().zip(&fresh) {
            prop_assert_eq!(&**cache.get(*id), &**f);
        }
        let pairs: Vec<_> = ids.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        let Ok(parents) = cache.parents(&pairs, &c) else {
            return Ok(());
        };
        for (k, id) in parents.iter().enumerate() {
            let direct = build_layer_null(&fresh[2 * k], &fresh[2 * k + 1], &c).unwrap();
            prop_assert_eq!(&cache.get(*id).dist, &direct.dist);
        }
        Ok(())
    })
}

/// Sorted-vector BH with the a_N floor, written without the library's scan.
pub fn bh_reference(p: &[f64], alpha: f64) -> Vec<usize> {
    let m = p.len() as f64;
    let floor = 1.0 / (m * m.ln());
    let mut sorted = p.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k_star = sorted
        .iter()
        .enumerate()
        .filter(|(i, &v)| v <= alpha * (i + 1) as f64 / m)
        .map(|(i, _)| i + 1)
        .max()
        .unwrap_or(0);
    let cut = (alpha * k_star.max(1) as f64 / m).max(floor);
    (0..p.len()).filter(|&i| p[i] <= cut).collect()
}

pub fn layer_one_bh_oracle() -> Result<(), String> {
    let pvals = (2usize..400).prop_flat_map(|m| {
        prop::collection::vec(prop_oneof![0.0f64..1.0, 0.0f64..0.001, Just(1.0)], m)
    });
    check((pvals, 0.001f64..0.5), |(p, alpha)| {
        let t = find_threshold(&p, alpha).unwrap();
        let got = reject_nodes(&p, &t.c_hat);
        prop_assert_eq!(&got, &bh_reference(&p, alpha));
        prop_assert_eq!(&got, &bh_with_floor(&p, alpha));
        Ok(())
    })?;
    check((counts(), 0.01f64..0.3), |((n, x), alpha)| {
        let Some(r) = run(&n, &x, alpha, 1) else {
            return Ok(());
        };
        let expected = bh_reference(&r.leaf_pvalue, alpha);
        prop_assert_eq!(r.rejected_leaves(), expected);
        Ok(())
    })
}

/// Every suite, by name.
pub type Suite = fn() -> Result<(), String>;

pub fn all() -> Vec<(&'static str, Suite)> {
    vec![
        ("PMF normalization", pmf_normalization),
        ("CCDF monotonicity", ccdf_monotonicity),
        ("convolution algebra", convolution_algebra),
        ("count conservation", count_conservation),
        ("per-layer rejection disjointness", rejection_disjointness),
        ("layer-1 alpha monotonicity", alpha_monotonicity),
        ("end-to-end determinism", determinism),
        ("null memoization transparency", memoization_transparency),
        ("layer-1 BH oracle", layer_one_bh_oracle),
    ]
}
