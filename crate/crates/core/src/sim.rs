//! Simulation studies: mixture generators, exact per-leaf truth, error
//! metrics and a replication runner. Everything here is `f64`.

use std::f64::consts::{PI, SQRT_2};
use std::sync::OnceLock;
use std::time::Instant;

use libm::erfc;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc_inv;

use crate::error::{Error, Result};
use crate::ingest::{Cohort, MarkerMatrix};
use crate::partition::{
    build_sequential_partition, default_bins_per_dim, LeafBinning, PartitionSpec, Region,
};
use crate::team::{default_max_layers, run_team, StopRule, TeamResult};

/// RNG stream for cohort 1 draws.
pub const STREAM_COHORT1: u64 = 1;
/// RNG stream for cohort 2 mixture draws.
pub const STREAM_COHORT2: u64 = 2;
/// RNG stream for the uniform patch added to cohort 2.
pub const STREAM_PATCH: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Covariance matrix, row-major nested; `[[σ²]]` in one dimension.
    pub cov: Vec<Vec<f64>>,
}

impl Component {
    pub fn new(weight: f64, mean: &[f64], cov: &[&[f64]]) -> Self {
        Self {
            weight,
            mean: mean.to_vec(),
            cov: cov.iter().map(|r| r.to_vec()).collect(),
        }
    }

    fn sd(&self, d: usize) -> f64 {
        self.cov[d][d].sqrt()
    }

    fn rho(&self) -> f64 {
        self.cov[0][1] / (self.sd(0) * self.sd(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mixture {
    pub components: Vec<Component>,
}

/// Axis-aligned box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Rect {
    pub fn area(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).product()
    }

    fn intersection(&self, lo: &[f64], hi: &[f64]) -> f64 {
        (0..self.lo.len())
            .map(|d| (self.hi[d].min(hi[d]) - self.lo[d].max(lo[d])).max(0.0))
            .product()
    }
}

/// Extra cohort-2 points uniform over a union of disjoint boxes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniformPatch {
    pub count: usize,
    pub rects: Vec<Rect>,
}

impl UniformPatch {
    pub fn area(&self) -> f64 {
        self.rects.iter().map(Rect::area).sum()
    }

    /// Points per unit area.
    pub fn density(&self) -> f64 {
        self.count as f64 / self.area()
    }
}

/// Two-cohort simulation design. Cohort 1 draws `n1` points from `f1`;
/// cohort 2 draws `n2` from `f2` plus the patch points, if any.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSetting {
    pub name: String,
    pub n1: usize,
    pub n2: usize,
    pub f1: Mixture,
    pub f2: Mixture,
    #[serde(default)]
    pub patch: Option<UniformPatch>,
    #[serde(default)]
    pub bins_per_dim: Option<usize>,
    #[serde(default)]
    pub max_layers: Option<usize>,
}

impl SimSetting {
    fn one_dim(name: &str, f1_tail: (f64, f64), f2_tail: (f64, f64)) -> Self {
        let mix = |(mu, sd): (f64, f64)| Mixture {
            components: vec![
                Component::new(0.97, &[0.4], &[&[0.04 * 0.04]]),
                Component::new(0.03, &[mu], &[&[sd * sd]]),
            ],
        };
        Self {
            name: name.into(),
            n1: 1_474_560,
            n2: 1_474_560,
            f1: mix(f1_tail),
            f2: mix(f2_tail),
            patch: None,
            bins_per_dim: Some(1 << 14),
            max_layers: Some(5),
        }
    }

    /// Local shift of a small component.
    pub fn s1() -> Self {
        Self::one_dim("S1", (0.88, 0.01), (0.89, 0.01))
    }

    /// Local dispersion difference.
    pub fn s2() -> Self {
        Self::one_dim("S2", (0.8, 0.02), (0.8, 0.03))
    }

    /// Local shift plus dispersion difference.
    pub fn s3() -> Self {
        Self::one_dim("S3", (0.8, 0.04), (0.82, 0.05))
    }

    /// Five-component bivariate mixture with uniform extra cohort-2 points.
    pub fn s4() -> Self {
        let f = Mixture {
            components: vec![
                Component::new(0.03, &[9.0, 9.0], &[&[2.1, 0.6], &[0.6, 0.9]]),
                Component::new(0.14, &[3.4, 2.9], &[&[0.71, 0.14], &[0.14, 2.12]]),
                Component::new(0.17, &[8.7, -5.8], &[&[2.08, 0.87], &[0.87, 1.39]]),
                Component::new(0.26, &[-0.4, 3.5], &[&[2.8, 0.6], &[0.6, 1.2]]),
                Component::new(0.40, &[-6.0, -6.5], &[&[1.34, -0.45], &[-0.45, 3.13]]),
            ],
        };
        let rect = |x: (f64, f64), y: (f64, f64)| Rect {
            lo: vec![x.0, y.0],
            hi: vec![x.1, y.1],
        };
        Self {
            name: "S4".into(),
            n1: 500_000,
            n2: 495_000,
            f1: f.clone(),
            f2: f,
            patch: Some(UniformPatch {
                count: 5_000,
                rects: vec![
                    rect((6.0, 8.5), (9.0, 11.0)),
                    rect((8.0, 10.0), (7.0, 8.0)),
                    rect((10.0, 11.0), (9.0, 12.0)),
                ],
            }),
            bins_per_dim: Some(90),
            max_layers: Some(4),
        }
    }

    /// Identical standard normal cohorts.
    pub fn null(n: usize, leaves: usize) -> Self {
        let f = Mixture {
            components: vec![Component::new(1.0, &[0.0], &[&[1.0]])],
        };
        Self {
            name: "null".into(),
            n1: n,
            n2: n,
            f1: f.clone(),
            f2: f,
            patch: None,
            bins_per_dim: Some(leaves),
            max_layers: None,
        }
    }

    /// `S1`..`S4` (case-insensitive) or `null`.
    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_uppercase().as_str() {
            "S1" => Ok(Self::s1()),
            "S2" => Ok(Self::s2()),
            "S3" => Ok(Self::s3()),
            "S4" => Ok(Self::s4()),
            "NULL" => Ok(Self::null(100_000, 1 << 10)),
            _ => Err(Error::InvalidSetting(format!("unknown setting {name:?}"))),
        }
    }

    pub fn dims(&self) -> usize {
        self.f1.components.first().map_or(0, |c| c.mean.len())
    }

    /// Cohort-2 total including patch points.
    pub fn total_n2(&self) -> usize {
        self.n2 + self.patch.as_ref().map_or(0, |p| p.count)
    }

    /// θ₀ = N₂/N.
    pub fn theta0(&self) -> f64 {
        let n2 = self.total_n2() as f64;
        n2 / (self.n1 as f64 + n2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSetting(m));
        let p = self.dims();
        if !(1..=2).contains(&p) {
            return bad(format!("only 1 or 2 dimensions are supported, got {p}"));
        }
        if self.n1 == 0 || self.total_n2() == 0 {
            return bad("both cohorts need points".into());
        }
        for (label, mix) in [("f1", &self.f1), ("f2", &self.f2)] {
            if mix.components.is_empty() {
                return bad(format!("{label} has no components"));
            }
            let mut total = 0.0;
            for (j, c) in mix.components.iter().enumerate() {
                if c.weight.is_nan() || c.weight < 0.0 {
                    return bad(format!("{label} component {j} has negative weight"));
                }
                total += c.weight;
                if c.mean.len() != p || c.cov.len() != p || c.cov.iter().any(|r| r.len() != p) {
                    return bad(format!("{label} component {j} is not {p}-dimensional"));
                }
                if c.mean
                    .iter()
                    .chain(c.cov.iter().flatten())
                    .any(|v| !v.is_finite())
                {
                    return bad(format!("{label} component {j} has non-finite parameters"));
                }
                let pd = if p == 1 {
                    c.cov[0][0] > 0.0
                } else {
                    c.cov[0][1] == c.cov[1][0]
                        && c.cov[0][0] > 0.0
                        && c.cov[0][0] * c.cov[1][1] - c.cov[0][1] * c.cov[1][0] > 0.0
                };
                if !pd {
                    return bad(format!(
                        "{label} component {j} covariance is not symmetric positive definite"
                    ));
                }
            }
            if (total - 1.0).abs() > 1e-9 {
                return bad(format!("{label} weights sum to {total}"));
            }
        }
        if let Some(patch) = &self.patch {
            if patch.rects.is_empty() {
                return bad("patch has no rectangles".into());
            }
            for r in &patch.rects {
                if r.lo.len() != p
                    || r.hi.len() != p
                    || r.lo
                        .iter()
                        .zip(&r.hi)
                        .any(|(l, h)| l.partial_cmp(h) != Some(std::cmp::Ordering::Less))
                {
                    return bad("patch rectangle is malformed".into());
                }
            }
        }
        if self.bins_per_dim.is_some_and(|b| b < 2) || self.max_layers == Some(0) {
            return bad("bins per dimension must be ≥ 2 and layers ≥ 1".into());
        }
        Ok(())
    }
}

/// Uniform on the open interval (0, 1) from 53 random bits.
fn open_unit(rng: &mut impl RngCore) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Φ⁻¹(u), polished with one Halley step against an accurate Φ.
pub fn normal_quantile(u: f64) -> f64 {
    let x = -SQRT_2 * erfc_inv(2.0 * u);
    if !x.is_finite() {
        return x;
    }
    let e = normal_cdf(x) - u;
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    if pdf == 0.0 {
        return x;
    }
    let t = e / pdf;
    x - t / (1.0 + 0.5 * x * t)
}

/// Standard normal by inversion.
fn std_normal(rng: &mut impl RngCore) -> f64 {
    normal_quantile(open_unit(rng))
}

fn draw_mixture(mix: &Mixture, n: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
    let p = mix.components[0].mean.len();
    let mut cum = Vec::with_capacity(mix.components.len());
    let mut acc = 0.0;
    for c in &mix.components {
        acc += c.weight;
        cum.push(acc);
    }
    // lower Cholesky factors
    let chol: Vec<[f64; 3]> = mix
        .components
        .iter()
        .map(|c| {
            let l11 = c.sd(0);
            if p == 1 {
                return [l11, 0.0, 0.0];
            }
            let l21 = c.cov[1][0] / l11;
            [l11, l21, (c.cov[1][1] - l21 * l21).sqrt()]
        })
        .collect();
    for _ in 0..n {
        let u = rng.gen::<f64>() * acc;
        let j = cum.partition_point(|&w| w <= u).min(cum.len() - 1);
        let c = &mix.components[j];
        let [l11, l21, l22] = chol[j];
        let z1 = std_normal(rng);
        out.push(c.mean[0] + l11 * z1);
        if p == 2 {
            let z2 = std_normal(rng);
            out.push(c.mean[1] + l21 * z1 + l22 * z2);
        }
    }
}

fn draw_patch(patch: &UniformPatch, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
    let total = patch.area();
    let mut cum = Vec::new();
    let mut acc = 0.0;
    for r in &patch.rects {
        acc += r.area() / total;
        cum.push(acc);
    }
    for _ in 0..patch.count {
        let u = rng.gen::<f64>();
        let j = cum.partition_point(|&w| w <= u).min(cum.len() - 1);
        let r = &patch.rects[j];
        for d in 0..r.lo.len() {
            out.push(r.lo[d] + (r.hi[d] - r.lo[d]) * rng.gen::<f64>());
        }
    }
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws both cohorts: cohort 1 rows first, then cohort 2 mixture rows,
/// then patch rows. Deterministic in `seed`.
pub fn generate_cohorts(setting: &SimSetting, seed: u64) -> Result<MarkerMatrix<f64>> {
    setting.validate()?;
    let p = setting.dims();
    let (mut v1, mut v2) = rayon::join(
        || {
            let mut out = Vec::with_capacity(setting.n1 * p);
            draw_mixture(
                &setting.f1,
                setting.n1,
                &mut stream(seed, STREAM_COHORT1),
                &mut out,
            );
            out
        },
        || {
            let mut out = Vec::with_capacity(setting.total_n2() * p);
            draw_mixture(
                &setting.f2,
                setting.n2,
                &mut stream(seed, STREAM_COHORT2),
                &mut out,
            );
            if let Some(patch) = &setting.patch {
                draw_patch(patch, &mut stream(seed, STREAM_PATCH), &mut out);
            }
            out
        },
    );
    v1.append(&mut v2);
    let mut cohort = vec![Cohort::One; setting.n1];
    cohort.resize(setting.n1 + setting.total_n2(), Cohort::Two);
    let names = if p == 1 {
        vec!["Y".to_string()]
    } else {
        (1..=p).map(|d| format!("Y{d}")).collect()
    };
    MarkerMatrix::new(names, v1, cohort)
}

/// Φ(x).
pub fn normal_cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        1.0
    } else if x == f64::NEG_INFINITY {
        0.0
    } else {
        0.5 * erfc(-x / SQRT_2)
    }
}

/// P(a ≤ Z < b) for standard normal Z, using the upper tail when both
/// limits are positive so that far-tail masses keep relative accuracy.
pub fn normal_mass(a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    if a > 0.0 {
        (normal_cdf(-a) - normal_cdf(-b)).max(0.0)
    } else {
        (normal_cdf(b) - normal_cdf(a)).max(0.0)
    }
}

fn gauss_legendre_10() -> &'static ([f64; 10], [f64; 10]) {
    static RULE: OnceLock<([f64; 10], [f64; 10])> = OnceLock::new();
    RULE.get_or_init(|| {
        const N: usize = 10;
        let mut x = [0.0; N];
        let mut w = [0.0; N];
        for i in 0..N {
            let mut t = (PI * (i as f64 + 0.75) / (N as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, t);
                for k in 2..=N {
                    let k = k as f64;
                    let p2 = ((2.0 * k - 1.0) * t * p1 - (k - 1.0) * p0) / k;
                    p0 = p1;
                    p1 = p2;
                }
                dp = N as f64 * (t * p1 - p0) / (t * t - 1.0);
                let step = p1 / dp;
                t -= step;
                if step.abs() < 1e-16 {
                    break;
                }
            }
            x[i] = t;
            w[i] = 2.0 / ((1.0 - t * t) * dp * dp);
        }
        (x, w)
    })
}

fn gl(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let (x, w) = gauss_legendre_10();
    let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
    half * x
        .iter()
        .zip(w)
        .map(|(xi, wi)| wi * f(mid + half * xi))
        .sum::<f64>()
}

fn adaptive(f: &impl Fn(f64) -> f64, a: f64, b: f64, whole: f64, rel: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (left, right) = (gl(f, a, m), gl(f, m, b));
    let both = left + right;
    if depth == 0 || (both - whole).abs() <= rel * both.abs() || both == 0.0 && whole == 0.0 {
        both
    } else {
        adaptive(f, a, m, left, rel, depth - 1) + adaptive(f, m, b, right, rel, depth - 1)
    }
}

/// Integrates a smooth `f` over `[a, b]` by adaptive 10-point
/// Gauss–Legendre to relative tolerance `rel`.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, rel: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    adaptive(&f, a, b, gl(&f, a, b), rel, 40)
}

/// Half-width, in standard deviations, beyond which a Gaussian's mass is
/// below the smallest normal `f64`.
const TRUNCATE_SD: f64 = 38.0;

/// Mass of one Gaussian component over the box `[lo, hi)`; infinite limits
/// are allowed.
pub fn gaussian_box_mass(c: &Component, lo: &[f64], hi: &[f64]) -> f64 {
    let (mx, sx) = (c.mean[0], c.sd(0));
    if c.mean.len() == 1 {
        return normal_mass((lo[0] - mx) / sx, (hi[0] - mx) / sx);
    }
    let (my, sy) = (c.mean[1], c.sd(1));
    let rho = c.rho();
    let s = sy * (1.0 - rho * rho).sqrt();
    let a = lo[0].max(mx - TRUNCATE_SD * sx);
    let b = hi[0].min(mx + TRUNCATE_SD * sx);
    if b <= a {
        return 0.0;
    }
    let inner = |x: f64| {
        let zx = (x - mx) / sx;
        let m = my + rho * sy * zx;
        (-0.5 * zx * zx).exp() / (sx * (2.0 * PI).sqrt())
            * normal_mass((lo[1] - m) / s, (hi[1] - m) / s)
    };
    // start from pieces no wider than one sd so no peak is stepped over
    let pieces = ((b - a) / sx).ceil().max(1.0) as usize;
    let h = (b - a) / pieces as f64;
    (0..pieces)
        .map(|k| {
            let end = if k + 1 == pieces {
                b
            } else {
                a + (k + 1) as f64 * h
            };
            integrate(inner, a + k as f64 * h, end, 1e-10)
        })
        .sum()
}

fn mixture_mass(mix: &Mixture, lo: &[f64], hi: &[f64]) -> f64 {
    mix.components
        .iter()
        .map(|c| c.weight * gaussian_box_mass(c, lo, hi))
        .sum()
}

/// Per-leaf ground truth: θᵢ = E₂/(E₁ + E₂) from expected cohort counts,
/// and whether θᵢ > θ₀ (decided on the exact sign, which `theta` may not
/// resolve where a shared component dominates).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LeafTruth {
    pub theta0: f64,
    pub theta: Vec<f64>,
    pub alternative: Vec<bool>,
}

impl LeafTruth {
    pub fn alternatives(&self) -> usize {
        self.alternative.iter().filter(|&&a| a).count()
    }
}

/// Integrates the setting's densities over each leaf. Leaves on the outer
/// boundary of the binning are extended to ±∞.
pub fn leaf_truth(setting: &SimSetting, binning: &LeafBinning<f64>) -> Result<LeafTruth> {
    setting.validate()?;
    let p = setting.dims();
    if binning.geometry().dims() != p {
        return Err(Error::Shape(format!(
            "setting has {p} dims, binning has {}",
            binning.geometry().dims()
        )));
    }
    let bounds = binning.geometry().bounds();
    let theta0 = setting.theta0();
    let (n1, n2) = (setting.n1 as f64, setting.n2 as f64);
    let n2_total = setting.total_n2() as f64;
    // θᵢ > θ₀ ⟺ N₁E₂ − N₂E₁ > 0. Components present in both mixtures enter
    // that difference through one coefficient, so a shared bulk cancels
    // exactly instead of swamping a far-tail difference in rounding.
    let mut terms: Vec<(f64, &Component)> = Vec::new();
    for c in &setting.f2.components {
        terms.push((n1 * n2 * c.weight, c));
    }
    for c in &setting.f1.components {
        let coef = -n2_total * n1 * c.weight;
        match terms
            .iter_mut()
            .find(|(_, t)| t.mean == c.mean && t.cov == c.cov)
        {
            Some(t) => t.0 += coef,
            None => terms.push((coef, c)),
        }
    }
    let (theta, alternative): (Vec<f64>, Vec<bool>) = binning
        .regions()
        .par_iter()
        .map(|r: &Region<f64>| {
            let lo: Vec<f64> = (0..p)
                .map(|d| {
                    if r.lo[d] <= bounds.lo[d] {
                        f64::NEG_INFINITY
                    } else {
                        r.lo[d]
                    }
                })
                .collect();
            let hi: Vec<f64> = (0..p)
                .map(|d| {
                    if r.hi[d] >= bounds.hi[d] {
                        f64::INFINITY
                    } else {
                        r.hi[d]
                    }
                })
                .collect();
            let e1 = n1 * mixture_mass(&setting.f1, &lo, &hi);
            let mut e2 = n2 * mixture_mass(&setting.f2, &lo, &hi);
            let patch = setting.patch.as_ref().map_or(0.0, |patch| {
                patch.density()
                    * patch
                        .rects
                        .iter()
                        .map(|q| q.intersection(&lo, &hi))
                        .sum::<f64>()
            });
            e2 += patch;
            let theta = if e1 + e2 > 0.0 {
                e2 / (e1 + e2)
            } else {
                theta0
            };
            let excess = n1 * patch
                + terms
                    .iter()
                    .filter(|(coef, _)| *coef != 0.0)
                    .map(|(coef, c)| coef * gaussian_box_mass(c, &lo, &hi))
                    .sum::<f64>();
            (theta, excess > 0.0)
        })
        .unzip();
    Ok(LeafTruth {
        theta0,
        theta,
        alternative,
    })
}

/// Compares Σ Xᵢ with Σ nᵢθᵢ.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConservationCheck {
    pub observed: f64,
    pub expected: f64,
    pub sd: f64,
}

impl ConservationCheck {
    /// Within four standard deviations.
    pub fn holds(&self) -> bool {
        (self.observed - self.expected).abs() <= 4.0 * self.sd
    }
}

pub fn conservation_check(binning: &LeafBinning<f64>, truth: &LeafTruth) -> ConservationCheck {
    let mut expected = 0.0;
    let mut var = 0.0;
    for (&n, &t) in binning.n().iter().zip(&truth.theta) {
        expected += n as f64 * t;
        var += n as f64 * t * (1.0 - t);
    }
    ConservationCheck {
        observed: binning.x().iter().sum::<u64>() as f64,
        expected,
        sd: var.sqrt(),
    }
}

/// Error metrics when stopping after `layer`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub layer: usize,
    pub fdp: f64,
    pub false_negatives: usize,
    pub discoveries: usize,
    pub true_positives: usize,
}

/// FDP = V/(R ∨ 1) etc. for leaves rejected on layers `1..=layer`.
pub fn compute_metrics(
    leaf_layer: &[usize],
    alternative: &[bool],
    layer: usize,
) -> Result<Metrics> {
    if leaf_layer.len() != alternative.len() {
        return Err(Error::Shape(format!(
            "{} leaves in result, {} in truth",
            leaf_layer.len(),
            alternative.len()
        )));
    }
    let mut discoveries = 0;
    let mut true_positives = 0;
    let mut false_negatives = 0;
    for (&l, &alt) in leaf_layer.iter().zip(alternative) {
        let rejected = l > 0 && l <= layer;
        discoveries += usize::from(rejected);
        true_positives += usize::from(rejected && alt);
        false_negatives += usize::from(!rejected && alt);
    }
    Ok(Metrics {
        layer,
        fdp: (discoveries - true_positives) as f64 / discoveries.max(1) as f64,
        false_negatives,
        discoveries,
        true_positives,
    })
}

/// Analysis parameters for the replication runner; unset fields fall back
/// to the setting, then to the sizing rules.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub alpha: f64,
    pub bins_per_dim: Option<usize>,
    pub max_layers: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            bins_per_dim: None,
            max_layers: None,
        }
    }
}

impl PipelineConfig {
    /// (bins per dimension, layers).
    pub fn resolve(&self, setting: &SimSetting) -> (usize, usize) {
        let total = setting.n1 + setting.total_n2();
        let p = setting.dims();
        let bins = self
            .bins_per_dim
            .or(setting.bins_per_dim)
            .unwrap_or_else(|| default_bins_per_dim(total, p, None));
        let m = bins.saturating_pow(p as u32);
        let layers = self
            .max_layers
            .or(setting.max_layers)
            .unwrap_or_else(|| default_max_layers(m));
        (bins, layers)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RepMetrics {
    pub rep: usize,
    pub seed: u64,
    pub alternatives: usize,
    /// One entry per stopping layer `1..=L`.
    pub layers: Vec<Metrics>,
    /// Whole replication, generation included.
    pub wall_ms: f64,
    /// Partition and testing only.
    pub analysis_ms: f64,
}

/// Seed of replication `rep`, a SplitMix64 scramble of (seed, rep).
pub fn rep_seed(seed: u64, rep: usize) -> u64 {
    let mut z = seed
        ^ (rep as u64)
            .wrapping_add(1)
            .wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One generate → partition → test → score pass.
pub fn run_once(
    setting: &SimSetting,
    config: &PipelineConfig,
    rep: usize,
    seed: u64,
) -> Result<RepMetrics> {
    let start = Instant::now();
    let data = generate_cohorts(setting, seed)?;
    let (bins, layers) = config.resolve(setting);
    let analysis = Instant::now();
    let binning = build_sequential_partition(&data, &PartitionSpec::sequential(bins))?;
    drop(data);
    let result: TeamResult<f64> = run_team(&binning, config.alpha, &StopRule::layers(layers))?;
    let analysis_ms = analysis.elapsed().as_secs_f64() * 1e3;
    let truth = leaf_truth(setting, &binning)?;
    let metrics = (1..=layers)
        .map(|l| compute_metrics(&result.leaf_layer, &truth.alternative, l))
        .collect::<Result<Vec<_>>>()?;
    Ok(RepMetrics {
        rep,
        seed,
        alternatives: truth.alternatives(),
        layers: metrics,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        analysis_ms,
    })
}

/// Independent replications with seeds from [`rep_seed`], in rep order.
pub fn run_replications(
    setting: &SimSetting,
    reps: usize,
    config: &PipelineConfig,
    seed: u64,
) -> Result<Vec<RepMetrics>> {
    if reps == 0 {
        return Err(Error::InvalidSetting(
            "at least one replication is required".into(),
        ));
    }
    setting.validate()?;
    (0..reps)
        .into_par_iter()
        .map(|rep| run_once(setting, config, rep, rep_seed(seed, rep)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub reps: usize,
    pub mean_fdp: f64,
    pub sd_fdp: f64,
    pub mean_false_negatives: f64,
    pub sd_false_negatives: f64,
    pub mean_discoveries: f64,
    pub sd_discoveries: f64,
    pub mean_alternatives: f64,
}

fn mean_sd(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    let sd = if n > 1.0 {
        (v.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Mean and sd of each metric per stopping layer.
pub fn summarize(reps: &[RepMetrics]) -> Vec<LayerSummary> {
    let layers = reps.iter().map(|r| r.layers.len()).min().unwrap_or(0);
    (0..layers)
        .map(|l| {
            let at = |f: fn(&Metrics) -> f64| reps.iter().map(move |r| f(&r.layers[l]));
            let (mean_fdp, sd_fdp) = mean_sd(at(|m| m.fdp));
            let (mean_false_negatives, sd_false_negatives) =
                mean_sd(at(|m| m.false_negatives as f64));
            let (mean_discoveries, sd_discoveries) = mean_sd(at(|m| m.discoveries as f64));
            LayerSummary {
                layer: l + 1,
                reps: reps.len(),
                mean_fdp,
                sd_fdp,
                mean_false_negatives,
                sd_false_negatives,
                mean_discoveries,
                sd_discoveries,
                mean_alternatives: mean_sd(reps.iter().map(|r| r.alternatives as f64)).0,
            }
        })
        .collect()
}

/// Result of the small-sample independence check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IndependenceCheck {
    /// Conditioning counts (n₁, n₂) of the first two bins.
    pub conditioned_on: (usize, usize),
    /// Replications that matched the conditioning counts.
    pub matched: usize,
    /// Total variation between the empirical law of (X₁, X₂) and
    /// Binom(n₁, θ₀) ⊗ Binom(n₂, θ₀).
    pub tv: f64,
}

/// Draws `reps` samples of N = `n` points (half per cohort, identical
/// densities) into `m` equiprobable bins, keeps replications whose first
/// two bins hold exactly n/m points each, and measures how far the joint
/// law of their cohort-2 counts is from a product of binomials.
pub fn independence_check(n: usize, m: usize, reps: usize, seed: u64) -> Result<IndependenceCheck> {
    if m < 2 || n < 2 * m || !n.is_multiple_of(2) {
        return Err(Error::InvalidSetting(format!(
            "need even N ≥ 2m, got N = {n}, m = {m}"
        )));
    }
    let k = n / m;
    let chunks = rayon::current_num_threads().max(1) * 4;
    let per = reps.div_ceil(chunks);
    let tables: Vec<(usize, Vec<u64>)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(rep_seed(seed, c), 0);
            let mut table = vec![0u64; (k + 1) * (k + 1)];
            let mut matched = 0;
            let todo = per.min(reps.saturating_sub(c * per));
            for _ in 0..todo {
                let (mut n1, mut n2, mut x1, mut x2) = (0, 0, 0, 0);
                for i in 0..n {
                    let bin = rng.gen_range(0..m);
                    let two = usize::from(i >= n / 2);
                    match bin {
                        0 => {
                            n1 += 1;
                            x1 += two;
                        }
                        1 => {
                            n2 += 1;
                            x2 += two;
                        }
                        _ => {}
                    }
                }
                if n1 == k && n2 == k {
                    matched += 1;
                    table[x1 * (k + 1) + x2] += 1;
                }
            }
            (matched, table)
        })
        .collect();
    let matched: usize = tables.iter().map(|t| t.0).sum();
    let mut table = vec![0u64; (k + 1) * (k + 1)];
    for (_, t) in &tables {
        table.iter_mut().zip(t).for_each(|(a, b)| *a += b);
    }
    let binom = crate::nulldist::binomial_dist(k as u64, &0.5f64)?;
    let mut tv = 0.0;
    for a in 0..=k {
        for b in 0..=k {
            let emp = table[a * (k + 1) + b] as f64 / matched.max(1) as f64;
            tv += (emp - binom.pmf()[a] * binom.pmf()[b]).abs();
        }
    }
    Ok(IndependenceCheck {
        conditioned_on: (k, k),
        matched,
        tv: 0.5 * tv,
    })
}
