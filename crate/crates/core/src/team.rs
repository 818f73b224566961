//! The layer loop: test nodes, reject, pair the survivors, repeat.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nulldist::{NullCache, NullId};
use crate::partition::LeafBinning;
use crate::scalar::{Marker, Probability};

/// A node on some layer: a run of `2^(layer-1)` leaves (0-based ordinals,
/// increasing) with pooled and cohort-2 counts summed over them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Node {
    pub leaves: Vec<usize>,
    pub n: u64,
    pub x: u64,
    /// Indices of the two children in the previous layer's node list.
    pub children: Option<[usize; 2]>,
}

impl Node {
    pub fn leaf(id: usize, n: u64, x: u64) -> Self {
        Self {
            leaves: vec![id],
            n,
            x,
            children: None,
        }
    }

    /// Smallest leaf ordinal.
    pub fn first_leaf(&self) -> usize {
        self.leaves[0]
    }
}

/// Layer threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct Threshold<P> {
    pub c_hat: P,
    /// a_N = 1/(m log m).
    pub a_floor: P,
    /// False when no feasible c exists and `c_hat` fell back to the floor.
    pub attained: bool,
}

/// a_N = 1/(m log m); undefined for m < 2.
pub fn floor_level(m: usize) -> Result<f64> {
    if m < 2 {
        return Err(Error::TooFewNodes { layer: 0, nodes: m });
    }
    let m = m as f64;
    Ok(1.0 / (m * m.ln()))
}

/// ĉ = sup{c ∈ [a_N, α] : c ≤ α·max(#{P ≤ c}, 1)/m}, or a_N when the set
/// is empty.
///
/// The supremum sits on a corner c = kα/m with P₍ₖ₎ ≤ kα/m (k = 1 always
/// qualifies because of the max(·, 1)), so it is found by scanning the sorted
/// values from the top.
pub fn find_threshold<P: Probability>(pvalues: &[P], alpha: f64) -> Result<Threshold<P>> {
    let m = pvalues.len();
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidProbability(alpha));
    }
    let a_floor = P::from_real(floor_level(m)?);
    let mut sorted: Vec<&P> = pvalues.iter().collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("p-values are comparable"));
    let alpha = P::from_real(alpha);
    let m_p = P::from_count(m as u64);
    for k in (1..=m).rev() {
        let corner = alpha.clone() * P::from_count(k as u64) / m_p.clone();
        if corner < a_floor {
            break;
        }
        if k == 1 || *sorted[k - 1] <= corner {
            return Ok(Threshold {
                c_hat: corner,
                a_floor,
                attained: true,
            });
        }
    }
    Ok(Threshold {
        c_hat: a_floor.clone(),
        a_floor,
        attained: false,
    })
}

/// Indices with P ≤ ĉ.
pub fn reject_nodes<P: Probability>(pvalues: &[P], c_hat: &P) -> Vec<usize> {
    (0..pvalues.len())
        .filter(|&i| pvalues[i] <= *c_hat)
        .collect()
}

/// Pairs consecutive survivors (already in leaf order). Returns the parents
/// and the unpaired last node, if any.
pub fn aggregate_pairs(survivors: &[(usize, &Node)]) -> (Vec<Node>, Option<usize>) {
    let parents = survivors
        .chunks_exact(2)
        .map(|pair| {
            let (i, a) = pair[0];
            let (j, b) = pair[1];
            let mut leaves = Vec::with_capacity(a.leaves.len() + b.leaves.len());
            leaves.extend_from_slice(&a.leaves);
            leaves.extend_from_slice(&b.leaves);
            Node {
                leaves,
                n: a.n + b.n,
                x: a.x + b.x,
                children: Some([i, j]),
            }
        })
        .collect();
    let leftover = (survivors.len() % 2 == 1).then(|| survivors[survivors.len() - 1].0);
    (parents, leftover)
}

/// Union of the rejected nodes' leaves, sorted.
pub fn map_to_leaves(nodes: &[Node], rejected: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = rejected
        .iter()
        .flat_map(|&i| nodes[i].leaves.iter().copied())
        .collect();
    out.sort_unstable();
    out
}

/// When to stop adding layers. Every rule that is set is checked after each
/// layer and the first to fire stops the run; the run also stops when fewer
/// than two nodes could be formed on the next layer.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StopRule {
    pub max_layers: Option<usize>,
    /// From layer 2 on, stop when a layer rejects fewer nodes than this.
    pub min_rejections: Option<usize>,
    /// From layer 2 on, stop when this layer's node rejections over the
    /// previous layer's fall below this. Not checked after a layer with no
    /// rejections.
    pub rejection_ratio: Option<f64>,
}

impl StopRule {
    pub fn layers(max_layers: usize) -> Self {
        Self {
            max_layers: Some(max_layers),
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxLayers,
    MinRejections,
    RejectionRatio,
    TooFewNodes,
}

/// Smallest L with m / 2^(L-1) < 2000.
pub fn default_max_layers(m: usize) -> usize {
    let mut l = 1;
    while m >> (l - 1) >= 2000 {
        l += 1;
    }
    l
}

/// Checks the configured rules after `layer` (1-based) given node rejection
/// counts for layers `1..=layer`.
pub fn should_stop(history: &[usize], rule: &StopRule, layer: usize) -> Option<StopReason> {
    if rule.max_layers.is_some_and(|l| layer >= l) {
        return Some(StopReason::MaxLayers);
    }
    if layer < 2 {
        return None;
    }
    let now = history[layer - 1];
    if rule.min_rejections.is_some_and(|r| now < r) {
        return Some(StopReason::MinRejections);
    }
    let before = history[layer - 2];
    if let Some(rho) = rule.rejection_ratio {
        if before > 0 && (now as f64) / (before as f64) < rho {
            return Some(StopReason::RejectionRatio);
        }
    }
    None
}

/// Computes the P-value-like statistic of every node on a layer.
pub trait NodeTester<P> {
    /// `nodes` are the layer's nodes; their `children` index the previous
    /// call's nodes. `prev_c_hat` is the previous layer's threshold (`None`
    /// on layer 1).
    fn pvalues(&mut self, layer: usize, nodes: &[Node], prev_c_hat: Option<&P>) -> Result<Vec<P>>;
}

/// The standard test: Binom(n, θ₀) nulls on the leaves, conditioned and
/// convolved upward.
pub struct ConditionalNullTest<P> {
    cache: NullCache<P>,
    ids: Vec<NullId>,
}

impl<P: Probability> ConditionalNullTest<P> {
    pub fn new(theta0: P) -> Result<Self> {
        Ok(Self {
            cache: NullCache::new(theta0)?,
            ids: Vec::new(),
        })
    }

    pub fn cache(&self) -> &NullCache<P> {
        &self.cache
    }

    /// Null ids of the most recently tested layer.
    pub fn null_ids(&self) -> &[NullId] {
        &self.ids
    }
}

impl<P: Probability> NodeTester<P> for ConditionalNullTest<P> {
    fn pvalues(&mut self, layer: usize, nodes: &[Node], prev_c_hat: Option<&P>) -> Result<Vec<P>> {
        let ids = if layer == 1 {
            let counts: Vec<u64> = nodes.iter().map(|nd| nd.n).collect();
            self.cache.leaves(&counts)?
        } else {
            let c = prev_c_hat.ok_or_else(|| {
                Error::InvalidDistribution("parent layer tested without a threshold".into())
            })?;
            let pairs: Vec<(NullId, NullId)> = nodes
                .iter()
                .map(|nd| {
                    let [a, b] = nd.children.expect("parent nodes have children");
                    (self.ids[a], self.ids[b])
                })
                .collect();
            self.cache.parents(&pairs, c)?
        };
        let cache = &self.cache;
        let p = nodes
            .par_iter()
            .zip(&ids)
            .map(|(nd, &id)| cache.get(id).pvalue(nd.x))
            .collect();
        self.ids = ids;
        Ok(p)
    }
}

/// Tester returning whatever a closure says; for walkthroughs and oracles.
pub struct StubTester<F>(pub F);

impl<P, F> NodeTester<P> for StubTester<F>
where
    F: FnMut(usize, &[Node]) -> Vec<P>,
{
    fn pvalues(&mut self, layer: usize, nodes: &[Node], _: Option<&P>) -> Result<Vec<P>> {
        Ok((self.0)(layer, nodes))
    }
}

/// Summary of one layer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerRecord<P> {
    pub layer: usize,
    /// m^(ℓ): nodes tested.
    pub nodes: usize,
    pub c_hat: P,
    pub a_floor: P,
    pub attained: bool,
    /// Indices of the rejected nodes in this layer's node order.
    pub rejected_nodes: Vec<usize>,
    /// Leaves newly rejected on this layer, sorted.
    pub rejected_leaves: Vec<usize>,
    /// Leaves of the node left unpaired when forming the next layer.
    pub leftover: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TeamResult<P> {
    pub theta0: P,
    pub alpha: f64,
    /// Per leaf, the 1-based layer that rejected it, 0 if never.
    pub leaf_layer: Vec<usize>,
    /// Per leaf, its layer-1 statistic.
    pub leaf_pvalue: Vec<P>,
    pub layers: Vec<LayerRecord<P>>,
    pub stop_layer: usize,
    pub stop_reason: StopReason,
}

impl<P> TeamResult<P> {
    /// Overall rejection set, sorted leaf ordinals.
    pub fn rejected_leaves(&self) -> Vec<usize> {
        (0..self.leaf_layer.len())
            .filter(|&i| self.leaf_layer[i] > 0)
            .collect()
    }

    pub fn rejection_count(&self) -> usize {
        self.leaf_layer.iter().filter(|&&l| l > 0).count()
    }
}

/// Runs the procedure on a binning with `f64` probabilities.
pub fn run_team<S: Marker>(
    binning: &LeafBinning<S>,
    alpha: f64,
    rule: &StopRule,
) -> Result<TeamResult<f64>> {
    run_team_counts(binning.n(), binning.x(), alpha, rule)
}

/// Runs the procedure on raw leaf counts (`n` pooled, `x` cohort 2) with the
/// conditional null test, θ₀ = N₂/N.
pub fn run_team_counts<P: Probability>(
    n: &[u64],
    x: &[u64],
    alpha: f64,
    rule: &StopRule,
) -> Result<TeamResult<P>> {
    let theta0: P = pooled_theta(n, x)?;
    let mut tester = ConditionalNullTest::new(theta0.clone())?;
    run_team_with(n, x, theta0, alpha, rule, &mut tester)
}

/// θ₀ = N₂/N, rejecting empty cohorts.
pub fn pooled_theta<P: Probability>(n: &[u64], x: &[u64]) -> Result<P> {
    let total: u64 = n.iter().sum();
    let n2: u64 = x.iter().sum();
    if n2 == 0 || n2 >= total {
        return Err(Error::DegenerateCohorts {
            n1: total.saturating_sub(n2),
            n2,
        });
    }
    Ok(P::from_count(n2) / P::from_count(total))
}

/// The layer loop with a caller-supplied tester. Leaves with n = 0 count
/// towards m on layer 1 but get P = 1 and never join a parent.
pub fn run_team_with<P: Probability, T: NodeTester<P>>(
    n: &[u64],
    x: &[u64],
    theta0: P,
    alpha: f64,
    rule: &StopRule,
    tester: &mut T,
) -> Result<TeamResult<P>> {
    let m = n.len();
    if x.len() != m {
        return Err(Error::Shape(format!(
            "{m} leaf totals but {} counts",
            x.len()
        )));
    }
    if let Some(i) = (0..m).find(|&i| x[i] > n[i]) {
        return Err(Error::Shape(format!("leaf {} has X > n", i + 1)));
    }
    if m < 2 {
        return Err(Error::TooFewNodes { layer: 1, nodes: m });
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidProbability(alpha));
    }

    let mut nodes: Vec<Node> = (0..m).map(|i| Node::leaf(i, n[i], x[i])).collect();
    let mut leaf_layer = vec![0usize; m];
    let mut leaf_pvalue = Vec::new();
    let mut layers: Vec<LayerRecord<P>> = Vec::new();
    let mut history = Vec::new();
    let mut prev_c_hat: Option<P> = None;
    let mut layer = 1;
    let stop_reason = loop {
        let mut p = tester.pvalues(layer, &nodes, prev_c_hat.as_ref())?;
        if p.len() != nodes.len() {
            return Err(Error::Shape(format!(
                "tester returned {} values for {} nodes",
                p.len(),
                nodes.len()
            )));
        }
        if layer == 1 {
            for (pi, nd) in p.iter_mut().zip(&nodes) {
                if nd.n == 0 {
                    *pi = P::one();
                }
            }
            leaf_pvalue = p.clone();
        }
        let threshold = find_threshold(&p, alpha).map_err(|e| match e {
            Error::TooFewNodes { nodes, .. } => Error::TooFewNodes { layer, nodes },
            e => e,
        })?;
        let rejected = reject_nodes(&p, &threshold.c_hat);
        let leaves = map_to_leaves(&nodes, &rejected);
        for &leaf in &leaves {
            debug_assert_eq!(leaf_layer[leaf], 0);
            leaf_layer[leaf] = layer;
        }
        history.push(rejected.len());
        layers.push(LayerRecord {
            layer,
            nodes: nodes.len(),
            c_hat: threshold.c_hat.clone(),
            a_floor: threshold.a_floor,
            attained: threshold.attained,
            rejected_nodes: rejected.clone(),
            rejected_leaves: leaves,
            leftover: None,
        });
        if let Some(reason) = should_stop(&history, rule, layer) {
            break reason;
        }

        let mut is_rejected = vec![false; nodes.len()];
        rejected.iter().for_each(|&i| is_rejected[i] = true);
        let survivors: Vec<(usize, &Node)> = nodes
            .iter()
            .enumerate()
            .filter(|&(i, nd)| !is_rejected[i] && nd.n > 0)
            .collect();
        if survivors.len() < 4 {
            break StopReason::TooFewNodes;
        }
        let (parents, leftover) = aggregate_pairs(&survivors);
        layers.last_mut().expect("pushed above").leftover =
            leftover.map(|i| nodes[i].leaves.clone());
        nodes = parents;
        prev_c_hat = Some(threshold.c_hat);
        layer += 1;
    };
    Ok(TeamResult {
        theta0,
        alpha,
        leaf_layer,
        leaf_pvalue,
        layers,
        stop_layer: layer,
        stop_reason,
    })
}

/// Reference BH step-up with the a_N floor, by sorting; used as an oracle.
pub fn bh_with_floor(pvalues: &[f64], alpha: f64) -> Vec<usize> {
    let m = pvalues.len();
    let floor = 1.0 / (m as f64 * (m as f64).ln());
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| pvalues[a].total_cmp(&pvalues[b]));
    let mut cut = floor;
    for k in (1..=m).rev() {
        let level = alpha * k as f64 / m as f64;
        if level < floor {
            break;
        }
        if k == 1 || pvalues[idx[k - 1]] <= level {
            cut = level;
            break;
        }
    }
    (0..m).filter(|&i| pvalues[i] <= cut).collect()
}
