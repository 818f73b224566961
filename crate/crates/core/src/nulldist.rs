//! Exact discrete nulls: binomial leaves, survival tables, truncation and
//! convolution, and the recursively conditioned node nulls.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Probability;

/// Distribution on `0..=support_max` with a precomputed survival table.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDist<P> {
    pmf: Vec<P>,
    /// `tail[x] = P(Z > x)`.
    tail: Vec<P>,
}

impl<P: Probability> DiscreteDist<P> {
    /// Validates a pmf: nonempty, nonnegative, summing to one within
    /// [`Probability::mass_tolerance`].
    pub fn from_pmf(pmf: Vec<P>) -> Result<Self> {
        if pmf.is_empty() {
            return Err(Error::InvalidDistribution("empty support".into()));
        }
        if let Some(k) = pmf.iter().position(|p| p.is_negative()) {
            return Err(Error::InvalidDistribution(format!(
                "negative mass {:?} at {k}",
                pmf[k]
            )));
        }
        let total = pmf.iter().fold(P::zero(), |acc, p| acc + p.clone());
        let gap = if total > P::one() {
            total.clone() - P::one()
        } else {
            P::one() - total.clone()
        };
        if gap > P::mass_tolerance() {
            return Err(Error::InvalidDistribution(format!(
                "mass sums to {}",
                total.to_real()
            )));
        }
        Ok(Self::from_parts(pmf))
    }

    fn from_parts(pmf: Vec<P>) -> Self {
        let mut tail = vec![P::zero(); pmf.len()];
        // accumulate from the top so small masses are added first
        for x in (0..pmf.len() - 1).rev() {
            tail[x] = tail[x + 1].clone() + pmf[x + 1].clone();
        }
        Self { pmf, tail }
    }

    pub fn point_mass(at: usize) -> Self {
        let mut pmf = vec![P::zero(); at + 1];
        pmf[at] = P::one();
        Self::from_parts(pmf)
    }

    pub fn support_max(&self) -> usize {
        self.pmf.len() - 1
    }

    pub fn pmf(&self) -> &[P] {
        &self.pmf
    }

    /// Survival table, `tail()[x] = P(Z > x)`.
    pub fn tail(&self) -> &[P] {
        &self.tail
    }

    /// G(x) = P(Z > x); one below the support, zero at or above its top.
    pub fn ccdf(&self, x: i64) -> P {
        if x < 0 {
            P::one()
        } else if x as u64 >= self.support_max() as u64 {
            P::zero()
        } else {
            self.tail[x as usize].clone()
        }
    }

    /// P(Z ≤ x).
    pub fn cdf(&self, x: i64) -> P {
        P::one() - self.ccdf(x)
    }
}

/// Binom(n, θ).
///
/// Built by the ratio recurrence outward from the mode and normalised, which
/// never overflows in floating point and is exact for rationals.
pub fn binomial_dist<P: Probability>(n: u64, theta: &P) -> Result<DiscreteDist<P>> {
    if !(*theta > P::zero() && *theta < P::one()) {
        return Err(Error::InvalidProbability(theta.to_real()));
    }
    let len = n as usize + 1;
    if n == 0 {
        return Ok(DiscreteDist::point_mass(0));
    }
    let odds = theta.clone() / (P::one() - theta.clone());
    let mode = (((n + 1) as f64 * theta.to_real()).floor() as usize).min(n as usize);
    let mut w = vec![P::zero(); len];
    w[mode] = P::one();
    for k in mode..n as usize {
        let step = P::from_count(n - k as u64) * odds.clone() / P::from_count(k as u64 + 1);
        w[k + 1] = w[k].clone() * step;
    }
    for k in (1..=mode).rev() {
        let step = P::from_count(k as u64) / (P::from_count(n - k as u64 + 1) * odds.clone());
        w[k - 1] = w[k].clone() * step;
    }
    // sum smallest first
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by_key(|&k| std::cmp::Reverse(k.abs_diff(mode)));
    let total = order.iter().fold(P::zero(), |acc, &k| acc + w[k].clone());
    Ok(DiscreteDist::from_parts(
        w.into_iter().map(|v| v / total.clone()).collect(),
    ))
}

/// b̂ = max{z : G(z) > ĉ}, or `None` (the −1 case) when even G(0) ≤ ĉ.
/// A count survives iff it is at most b̂.
pub fn threshold_count<P: Probability>(dist: &DiscreteDist<P>, c_hat: &P) -> Result<Option<usize>> {
    if !(*c_hat > P::zero() && *c_hat < P::one()) {
        return Err(Error::InvalidProbability(c_hat.to_real()));
    }
    let above = dist.tail.partition_point(|g| g > c_hat);
    Ok(above.checked_sub(1))
}

/// Conditions on Z ≤ b̂: restricts the support to `0..=b̂` and renormalises.
/// `None` (b̂ = −1) and zero-probability events are errors.
pub fn truncate_renormalize<P: Probability>(
    dist: &DiscreteDist<P>,
    bhat: Option<usize>,
) -> Result<DiscreteDist<P>> {
    let b = bhat.ok_or(Error::EmptyConditioning)?;
    if b >= dist.support_max() {
        return Ok(dist.clone());
    }
    let mass = dist.cdf(b as i64);
    if mass <= P::zero() {
        return Err(Error::EmptyConditioning);
    }
    Ok(DiscreteDist::from_parts(
        dist.pmf[..=b]
            .iter()
            .map(|p| p.clone() / mass.clone())
            .collect(),
    ))
}

/// Distribution of the sum of independent draws, by direct summation.
pub fn convolve<P: Probability>(a: &DiscreteDist<P>, b: &DiscreteDist<P>) -> DiscreteDist<P> {
    let mut out = vec![P::zero(); a.pmf.len() + b.pmf.len() - 1];
    for (i, pa) in a.pmf.iter().enumerate() {
        if pa.is_zero() {
            continue;
        }
        for (j, pb) in b.pmf.iter().enumerate() {
            out[i + j] = out[i + j].clone() + pa.clone() * pb.clone();
        }
    }
    DiscreteDist::from_parts(out)
}

/// Node null under θ₀ at some layer, conditioned on its children having
/// survived the layer below.
#[derive(Clone, Debug, PartialEq)]
pub struct LayeredNull<P> {
    pub layer: usize,
    pub dist: Arc<DiscreteDist<P>>,
    pub children: Option<[Arc<LayeredNull<P>>; 2]>,
}

impl<P: Probability> LayeredNull<P> {
    /// Layer-1 null Binom(n, θ₀).
    pub fn leaf(n: u64, theta0: &P) -> Result<Self> {
        Ok(Self {
            layer: 1,
            dist: Arc::new(binomial_dist(n, theta0)?),
            children: None,
        })
    }

    /// b̂ of this node at its layer's threshold.
    pub fn bhat(&self, c_hat: &P) -> Result<Option<usize>> {
        threshold_count(&self.dist, c_hat)
    }

    /// P-value-like statistic G(x).
    pub fn pvalue(&self, x: u64) -> P {
        self.dist.ccdf(x as i64)
    }
}

/// Null of a parent node: each child truncated at its own b̂ under
/// `c_hat_prev`, then convolved.
pub fn build_layer_null<P: Probability>(
    child1: &Arc<LayeredNull<P>>,
    child2: &Arc<LayeredNull<P>>,
    c_hat_prev: &P,
) -> Result<LayeredNull<P>> {
    if child1.layer != child2.layer {
        return Err(Error::InvalidDistribution(format!(
            "children from layers {} and {}",
            child1.layer, child2.layer
        )));
    }
    let b1 = child1.bhat(c_hat_prev)?;
    let b2 = child2.bhat(c_hat_prev)?;
    Ok(LayeredNull {
        layer: child1.layer + 1,
        dist: Arc::new(truncated_sum(&child1.dist, b1, &child2.dist, b2)?),
        children: Some([child1.clone(), child2.clone()]),
    })
}

/// Z₁ + Z₂ with each Zⱼ conditioned on Zⱼ ≤ b̂ⱼ.
pub fn truncated_sum<P: Probability>(
    a: &DiscreteDist<P>,
    ba: Option<usize>,
    b: &DiscreteDist<P>,
    bb: Option<usize>,
) -> Result<DiscreteDist<P>> {
    Ok(convolve(
        &truncate_renormalize(a, ba)?,
        &truncate_renormalize(b, bb)?,
    ))
}

/// Handle to a null held by a [`NullCache`].
pub type NullId = usize;

/// Memoised nulls for one run. Nodes with equal leaf counts share a layer-1
/// null, and a parent null depends only on its children's nulls and their
/// b̂ values, which form the key. Lookups return exactly the value a fresh
/// build would produce.
#[derive(Debug)]
pub struct NullCache<P> {
    theta0: P,
    nulls: Vec<Arc<LayeredNull<P>>>,
    leaves: HashMap<u64, NullId>,
    parents: HashMap<(NullId, NullId, usize, usize), NullId>,
}

impl<P: Probability> NullCache<P> {
    pub fn new(theta0: P) -> Result<Self> {
        if !(theta0 > P::zero() && theta0 < P::one()) {
            return Err(Error::InvalidProbability(theta0.to_real()));
        }
        Ok(Self {
            theta0,
            nulls: Vec::new(),
            leaves: HashMap::new(),
            parents: HashMap::new(),
        })
    }

    pub fn theta0(&self) -> &P {
        &self.theta0
    }

    pub fn get(&self, id: NullId) -> &Arc<LayeredNull<P>> {
        &self.nulls[id]
    }

    pub fn len(&self) -> usize {
        self.nulls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nulls.is_empty()
    }

    /// Layer-1 nulls for each leaf count, built in parallel for counts not
    /// seen before.
    pub fn leaves(&mut self, counts: &[u64]) -> Result<Vec<NullId>> {
        let mut fresh: Vec<u64> = counts
            .iter()
            .copied()
            .filter(|n| !self.leaves.contains_key(n))
            .collect();
        fresh.sort_unstable();
        fresh.dedup();
        let theta0 = &self.theta0;
        let built = fresh
            .par_iter()
            .map(|&n| LayeredNull::leaf(n, theta0))
            .collect::<Result<Vec<_>>>()?;
        for (n, null) in fresh.into_iter().zip(built) {
            self.leaves.insert(n, self.nulls.len());
            self.nulls.push(Arc::new(null));
        }
        Ok(counts.iter().map(|n| self.leaves[n]).collect())
    }

    /// Parent nulls for each pair of child ids, at the children's layer
    /// threshold `c_hat_prev`.
    pub fn parents(&mut self, pairs: &[(NullId, NullId)], c_hat_prev: &P) -> Result<Vec<NullId>> {
        let mut bhat: HashMap<NullId, usize> = HashMap::new();
        for &(a, b) in pairs {
            for id in [a, b] {
                if let std::collections::hash_map::Entry::Vacant(e) = bhat.entry(id) {
                    let b = self.nulls[id]
                        .bhat(c_hat_prev)?
                        .ok_or(Error::EmptyConditioning)?;
                    e.insert(b);
                }
            }
        }
        let keys: Vec<_> = pairs
            .iter()
            .map(|&(a, b)| (a, b, bhat[&a], bhat[&b]))
            .collect();
        let mut fresh: Vec<_> = keys
            .iter()
            .copied()
            .filter(|k| !self.parents.contains_key(k))
            .collect();
        fresh.sort_unstable();
        fresh.dedup();
        let nulls = &self.nulls;
        let built = fresh
            .par_iter()
            .map(|&(a, b, ba, bb)| {
                let (ca, cb) = (&nulls[a], &nulls[b]);
                Ok(LayeredNull {
                    layer: ca.layer + 1,
                    dist: Arc::new(truncated_sum(&ca.dist, Some(ba), &cb.dist, Some(bb))?),
                    children: Some([ca.clone(), cb.clone()]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        for (key, null) in fresh.into_iter().zip(built) {
            self.parents.insert(key, self.nulls.len());
            self.nulls.push(Arc::new(null));
        }
        Ok(keys.iter().map(|k| self.parents[k]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::BigRational;

    fn q(n: i64, d: i64) -> BigRational {
        BigRational::new(n.into(), d.into())
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len(), "{a:?} vs {b:?}");
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn binomial_small_cases() {
        close(
            binomial_dist(2, &0.5).unwrap().pmf(),
            &[0.25, 0.5, 0.25],
            1e-15,
        );
        close(binomial_dist(1, &0.3).unwrap().pmf(), &[0.7, 0.3], 1e-15);
        assert_eq!(binomial_dist(0, &0.3).unwrap().pmf(), &[1.0]);
        assert!(matches!(
            binomial_dist(3, &1.0),
            Err(Error::InvalidProbability(_))
        ));
        assert!(binomial_dist(3, &0.0f64).is_err());
    }

    #[test]
    fn binomial_exact_rational() {
        let d = binomial_dist(3, &q(1, 3)).unwrap();
        assert_eq!(d.pmf(), &[q(8, 27), q(12, 27), q(6, 27), q(1, 27)]);
    }

    #[test]
    fn binomial_large_n_is_normalised() {
        let d = binomial_dist(5000, &0.48).unwrap();
        let total: f64 = d.pmf().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(d.pmf().iter().all(|p| *p >= 0.0));
        let mean: f64 = d.pmf().iter().enumerate().map(|(k, p)| k as f64 * p).sum();
        assert!((mean - 2400.0).abs() < 1e-8);
    }

    #[test]
    fn ccdf_values() {
        let d = binomial_dist(2, &0.5).unwrap();
        assert_eq!(d.ccdf(0), 0.75);
        assert_eq!(d.ccdf(1), 0.25);
        assert_eq!(d.ccdf(2), 0.0);
        assert_eq!(d.ccdf(-1), 1.0);
        assert_eq!(d.ccdf(99), 0.0);
        assert_eq!(binomial_dist(4, &0.5).unwrap().ccdf(2), 0.3125);
    }

    #[test]
    fn threshold_counts() {
        let d = binomial_dist(2, &0.5).unwrap();
        assert_eq!(threshold_count(&d, &0.3).unwrap(), Some(0));
        assert_eq!(threshold_count(&d, &0.2).unwrap(), Some(1));
        assert_eq!(threshold_count(&d, &0.9).unwrap(), None);
        // equality does not survive
        assert_eq!(threshold_count(&d, &0.25).unwrap(), Some(0));
        assert!(threshold_count(&d, &0.0).is_err());
        assert!(threshold_count(&d, &1.0).is_err());
    }

    #[test]
    fn truncation() {
        let d = binomial_dist(2, &q(1, 2)).unwrap();
        assert_eq!(
            truncate_renormalize(&d, Some(1)).unwrap().pmf(),
            &[q(1, 3), q(2, 3)]
        );
        assert_eq!(truncate_renormalize(&d, Some(2)).unwrap(), d);
        assert_eq!(truncate_renormalize(&d, Some(0)).unwrap().pmf(), &[q(1, 1)]);
        assert!(matches!(
            truncate_renormalize(&d, None),
            Err(Error::EmptyConditioning)
        ));
    }

    #[test]
    fn convolution() {
        let a = DiscreteDist::from_pmf(vec![q(1, 3), q(2, 3)]).unwrap();
        assert_eq!(convolve(&a, &a).pmf(), &[q(1, 9), q(4, 9), q(4, 9)]);
        assert_eq!(convolve(&a, &DiscreteDist::point_mass(0)), a);
        let c = convolve(
            &binomial_dist(3, &0.37).unwrap(),
            &binomial_dist(5, &0.37).unwrap(),
        );
        close(c.pmf(), binomial_dist(8, &0.37).unwrap().pmf(), 1e-12);
    }

    #[test]
    fn layer_two_worked_example() {
        let leaf = Arc::new(LayeredNull::leaf(2, &q(1, 2)).unwrap());
        let parent = build_layer_null(&leaf, &leaf, &q(1, 5)).unwrap();
        assert_eq!(parent.layer, 2);
        assert_eq!(parent.dist.pmf(), &[q(1, 9), q(4, 9), q(4, 9)]);
        assert_eq!(parent.pvalue(0), q(8, 9));
        assert_eq!(parent.pvalue(1), q(4, 9));
        assert_eq!(parent.pvalue(2), q(0, 1));

        let parent = build_layer_null(&leaf, &leaf, &q(3, 10)).unwrap();
        assert_eq!(parent.dist.pmf(), &[q(1, 1)]);
        assert_eq!(parent.pvalue(0), q(0, 1));

        let err = build_layer_null(&leaf, &leaf, &q(9, 10));
        assert!(matches!(err, Err(Error::EmptyConditioning)));
    }

    #[test]
    fn untruncated_parent_is_binomial() {
        let theta = 0.41;
        let a = binomial_dist(7, &theta).unwrap();
        let b = binomial_dist(12, &theta).unwrap();
        let p = truncated_sum(&a, Some(7), &b, Some(12)).unwrap();
        close(p.pmf(), binomial_dist(19, &theta).unwrap().pmf(), 1e-12);
    }

    #[test]
    fn cache_matches_direct_build() {
        let theta = 0.45;
        let mut cache = NullCache::new(theta).unwrap();
        let ids = cache.leaves(&[10, 12, 10, 12]).unwrap();
        assert_eq!(ids[0], ids[2]);
        assert_eq!(cache.len(), 2);
        let parents = cache
            .parents(&[(ids[0], ids[1]), (ids[2], ids[3])], &0.05)
            .unwrap();
        assert_eq!(parents[0], parents[1]);
        let a = Arc::new(LayeredNull::leaf(10, &theta).unwrap());
        let b = Arc::new(LayeredNull::leaf(12, &theta).unwrap());
        let direct = build_layer_null(&a, &b, &0.05).unwrap();
        assert_eq!(*cache.get(parents[0]).dist, *direct.dist);
    }
}
