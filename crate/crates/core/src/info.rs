//! Histogram entropy estimators and the fusion diagnostics built on them:
//! joint entropy / mutual information, KL divergence between layer
//! activations, Han's per-dimension entropy curve, the Jensen bound on fused
//! entropy and a simulator for the dimension regimes of fused features.
//!
//! All entropies are in bits.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, ensure, Result};
use crate::fusion::FusionPair;
use crate::model::ForwardTrace;
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 64;
pub const KL_SMOOTHING: f64 = 1e-9;
/// Largest dimension for exhaustive subset enumeration in [`han_curve`].
pub const HAN_MAX_EXHAUSTIVE: usize = 12;

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * libm::log2(p)
    } else {
        0.0
    }
}

/// Entropy of a probability vector; errors unless it is non-negative and sums to 1.
pub fn entropy_of_masses(masses: &[f64]) -> Result<f64> {
    ensure!(masses.iter().all(|&p| p >= 0.0 && p.is_finite()), Data, "masses must be finite and non-negative");
    let total: f64 = masses.iter().sum();
    ensure!(libm::fabs(total - 1.0) <= 1e-12, Data, "masses sum to {} instead of 1", total);
    Ok(-masses.iter().map(|&p| plogp(p)).sum::<f64>())
}

/// Equal-width bin edges over `[lo, hi]`; a degenerate range is widened to unit width.
pub fn equal_width_edges(lo: f64, hi: f64, bins: usize) -> Result<Vec<f64>> {
    ensure!(bins > 0, Config, "bin count must be positive");
    ensure!(lo.is_finite() && hi.is_finite() && lo <= hi, Data, "invalid value range [{}, {}]", lo, hi);
    let (lo, hi) = if lo == hi { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
    let step = (hi - lo) / bins as f64;
    let mut e: Vec<f64> = (0..bins).map(|i| lo + step * i as f64).collect();
    e.push(hi);
    Ok(e)
}

fn min_max(values: &[f64]) -> Result<(f64, f64)> {
    ensure!(!values.is_empty(), Data, "no samples");
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        ensure!(v.is_finite(), Data, "non-finite sample");
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok((lo, hi))
}

/// Bin index of `v`; values outside the edges go to the end bins.
fn bin_of(edges: &[f64], v: f64) -> usize {
    let n = edges.len() - 1;
    let (lo, hi) = (edges[0], edges[n]);
    if v <= lo {
        return 0;
    }
    if v >= hi {
        return n - 1;
    }
    let i = ((v - lo) / (hi - lo) * n as f64) as usize;
    // Guard against rounding at interior edges.
    let mut i = i.min(n - 1);
    while i > 0 && v < edges[i] {
        i -= 1;
    }
    while i + 1 < n && v >= edges[i + 1] {
        i += 1;
    }
    i
}

/// Discretize continuous samples into equal-width bins over their own range.
pub fn discretize(values: &[f64], bins: usize) -> Result<(Vec<u32>, Vec<f64>)> {
    let (lo, hi) = min_max(values)?;
    let edges = equal_width_edges(lo, hi, bins)?;
    Ok((values.iter().map(|&v| bin_of(&edges, v) as u32).collect(), edges))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    edges: Vec<f64>,
    masses: Vec<f64>,
}

impl Histogram {
    pub fn new(edges: Vec<f64>, masses: Vec<f64>) -> Result<Self> {
        ensure!(edges.len() == masses.len() + 1 && !masses.is_empty(), Data, "{} edges for {} bins", edges.len(), masses.len());
        ensure!(edges.windows(2).all(|w| w[0] < w[1]), Data, "bin edges must increase");
        entropy_of_masses(&masses)?;
        Ok(Self { edges, masses })
    }

    /// Histogram over unit-width bins `[i, i + 1)`.
    pub fn from_masses(masses: Vec<f64>) -> Result<Self> {
        let edges = (0..=masses.len()).map(|i| i as f64).collect();
        Self::new(edges, masses)
    }

    pub fn from_samples_with_edges(values: &[f64], edges: Vec<f64>) -> Result<Self> {
        ensure!(!values.is_empty(), Data, "histogram of zero samples");
        ensure!(edges.len() >= 2, Data, "need at least one bin");
        let mut counts = vec![0usize; edges.len() - 1];
        for &v in values {
            ensure!(v.is_finite(), Data, "non-finite sample");
            counts[bin_of(&edges, v)] += 1;
        }
        let n = values.len() as f64;
        let mut masses: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
        renormalize(&mut masses);
        Self::new(edges, masses)
    }

    /// Equal-width bins over the observed min/max.
    pub fn from_samples(values: &[f64], bins: usize) -> Result<Self> {
        let (lo, hi) = min_max(values)?;
        Self::from_samples_with_edges(values, equal_width_edges(lo, hi, bins)?)
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn bins(&self) -> usize {
        self.masses.len()
    }

    pub fn entropy(&self) -> f64 {
        -self.masses.iter().map(|&p| plogp(p)).sum::<f64>()
    }
}

/// Absorb the float residue of a normalization into the largest mass.
fn renormalize(masses: &mut [f64]) {
    let total: f64 = masses.iter().sum();
    if total > 0.0 {
        masses.iter_mut().for_each(|p| *p /= total);
        let resid = 1.0 - masses.iter().sum::<f64>();
        if let Some(m) = masses.iter_mut().max_by(|a, b| a.total_cmp(b)) {
            *m += resid;
        }
    }
}

pub fn entropy(h: &Histogram) -> f64 {
    h.entropy()
}

/// `Σ p log2(p / q')` with `q' = (q + ε) / Σ(q + ε)`.
pub fn kl_divergence(p: &Histogram, q: &Histogram, smoothing: f64) -> Result<f64> {
    ensure!(p.edges == q.edges, Data, "KL needs identical bin edges");
    ensure!(smoothing >= 0.0, Config, "smoothing must be non-negative");
    if p.masses == q.masses {
        return Ok(0.0);
    }
    let total: f64 = q.masses.iter().map(|&v| v + smoothing).sum();
    let mut kl = 0.0;
    for (&pi, &qi) in p.masses.iter().zip(&q.masses) {
        if pi > 0.0 {
            let qs = (qi + smoothing) / total;
            ensure!(qs > 0.0, Numeric, "KL is infinite: q has an empty bin where p has mass");
            kl += pi * libm::log2(pi / qs);
        }
    }
    Ok(kl.max(0.0))
}

/// A two-variable probability table, rows indexing `a` and columns `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointTable {
    rows: usize,
    cols: usize,
    masses: Vec<f64>,
}

impl JointTable {
    pub fn new(rows: usize, cols: usize, masses: Vec<f64>) -> Result<Self> {
        ensure!(rows > 0 && cols > 0 && masses.len() == rows * cols, Data, "joint table {}x{} with {} masses", rows, cols, masses.len());
        entropy_of_masses(&masses)?;
        Ok(Self { rows, cols, masses })
    }

    /// Empirical table of paired symbols.
    pub fn from_symbols(a: &[u32], b: &[u32], rows: usize, cols: usize) -> Result<Self> {
        ensure!(a.len() == b.len(), Data, "sample counts differ: {} vs {}", a.len(), b.len());
        ensure!(!a.is_empty(), Data, "joint table of zero samples");
        let mut counts = vec![0usize; rows * cols];
        for (&x, &y) in a.iter().zip(b) {
            ensure!((x as usize) < rows && (y as usize) < cols, Data, "symbol ({}, {}) outside {}x{}", x, y, rows, cols);
            counts[x as usize * cols + y as usize] += 1;
        }
        let n = a.len() as f64;
        let mut masses: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
        renormalize(&mut masses);
        Self::new(rows, cols, masses)
    }

    pub fn marginal_a(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.masses[r * self.cols..(r + 1) * self.cols].iter().sum()).collect()
    }

    pub fn marginal_b(&self) -> Vec<f64> {
        (0..self.cols).map(|c| (0..self.rows).map(|r| self.masses[r * self.cols + c]).sum()).collect()
    }

    pub fn entropy_a(&self) -> f64 {
        -self.marginal_a().iter().map(|&p| plogp(p)).sum::<f64>()
    }

    pub fn entropy_b(&self) -> f64 {
        -self.marginal_b().iter().map(|&p| plogp(p)).sum::<f64>()
    }

    pub fn joint_entropy(&self) -> f64 {
        -self.masses.iter().map(|&p| plogp(p)).sum::<f64>()
    }

    /// `Σ p(a, b) log2(p(a, b) / (p(a) p(b)))`, computed from the table directly.
    pub fn mutual_information(&self) -> f64 {
        let (pa, pb) = (self.marginal_a(), self.marginal_b());
        let mut mi = 0.0;
        for r in 0..self.rows {
            for c in 0..self.cols {
                let p = self.masses[r * self.cols + c];
                if p > 0.0 {
                    mi += p * libm::log2(p / (pa[r] * pb[c]));
                }
            }
        }
        mi
    }
}

/// Joint table of two continuous sample sets, each binned over its own range.
pub fn joint_table(a: &[f64], b: &[f64], bins: usize) -> Result<JointTable> {
    ensure!(a.len() == b.len(), Data, "sample counts differ: {} vs {}", a.len(), b.len());
    let (sa, _) = discretize(a, bins)?;
    let (sb, _) = discretize(b, bins)?;
    JointTable::from_symbols(&sa, &sb, bins, bins)
}

pub fn joint_entropy(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    Ok(joint_table(a, b, bins)?.joint_entropy())
}

pub fn mutual_information(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    Ok(joint_table(a, b, bins)?.mutual_information())
}

/// `N x D` symbols with per-dimension alphabet sizes and optional sample weights
/// (an exact distribution can be given as its support with probabilities).
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSampleSet {
    rows: Vec<Vec<u32>>,
    alphabet: Vec<u32>,
    weights: Option<Vec<f64>>,
}

impl DiscreteSampleSet {
    pub fn new(rows: Vec<Vec<u32>>, alphabet: Vec<u32>) -> Result<Self> {
        Self::build(rows, alphabet, None)
    }

    pub fn weighted(rows: Vec<Vec<u32>>, alphabet: Vec<u32>, weights: Vec<f64>) -> Result<Self> {
        ensure!(weights.len() == rows.len(), Data, "{} weights for {} samples", weights.len(), rows.len());
        ensure!(weights.iter().all(|&w| w >= 0.0 && w.is_finite()) && weights.iter().sum::<f64>() > 0.0, Data, "weights must be non-negative with positive sum");
        Self::build(rows, alphabet, Some(weights))
    }

    fn build(rows: Vec<Vec<u32>>, alphabet: Vec<u32>, weights: Option<Vec<f64>>) -> Result<Self> {
        ensure!(!rows.is_empty(), Data, "sample set needs at least one sample");
        ensure!(!alphabet.is_empty(), Data, "sample set needs at least one dimension");
        for (i, r) in rows.iter().enumerate() {
            ensure!(r.len() == alphabet.len(), Data, "sample {} has {} dims, expected {}", i, r.len(), alphabet.len());
            for (d, (&s, &a)) in r.iter().zip(&alphabet).enumerate() {
                ensure!(s < a, Data, "sample {} dim {}: symbol {} >= alphabet {}", i, d, s, a);
            }
        }
        Ok(Self { rows, alphabet, weights })
    }

    /// The full product distribution of independent uniform dimensions.
    pub fn uniform_product(alphabet: Vec<u32>) -> Result<Self> {
        let mut rows = vec![Vec::new()];
        for &a in &alphabet {
            rows = rows.into_iter().flat_map(|r| (0..a).map(move |s| { let mut r = r.clone(); r.push(s); r })).collect();
        }
        Self::new(rows, alphabet)
    }

    pub fn dims(&self) -> usize {
        self.alphabet.len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Vec<u32>] {
        &self.rows
    }

    pub fn alphabet(&self) -> &[u32] {
        &self.alphabet
    }

    /// Entropy of the marginal over the given dimensions.
    pub fn subset_entropy(&self, dims: &[usize]) -> Result<f64> {
        ensure!(dims.iter().all(|&d| d < self.dims()), Usage, "subset {:?} outside {} dims", dims, self.dims());
        let mut mass: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
        let total: f64 = self.weights.as_ref().map_or(self.rows.len() as f64, |w| w.iter().sum());
        for (i, r) in self.rows.iter().enumerate() {
            let key: Vec<u32> = dims.iter().map(|&d| r[d]).collect();
            *mass.entry(key).or_insert(0.0) += self.weights.as_ref().map_or(1.0, |w| w[i]);
        }
        Ok(-mass.values().map(|&m| plogp(m / total)).sum::<f64>())
    }

    pub fn entropy(&self) -> Result<f64> {
        let all: Vec<usize> = (0..self.dims()).collect();
        self.subset_entropy(&all)
    }
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    if k > n {
        return out;
    }
    loop {
        out.push(cur.clone());
        let Some(i) = (0..k).rev().find(|&i| cur[i] != i + n - k) else { break };
        cur[i] += 1;
        for j in i + 1..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HanMode {
    /// All `(D choose k)` subsets; requires `D <= 12`.
    #[default]
    Exhaustive,
    /// At most `subsets` random subsets per `k`; exact when that covers all of them.
    Sampled { subsets: usize, seed: u64 },
}

/// `(k, H̄^k / k)` for `k = 1..=D`, where `H̄^k` is the mean entropy over k-subsets.
pub fn han_curve(x: &DiscreteSampleSet, mode: HanMode) -> Result<Vec<(usize, f64)>> {
    let d = x.dims();
    let mut rng = match mode {
        HanMode::Exhaustive => {
            ensure!(d <= HAN_MAX_EXHAUSTIVE, Usage, "{} dimensions exceed the exhaustive limit of {}; use sampled mode", d, HAN_MAX_EXHAUSTIVE);
            None
        }
        HanMode::Sampled { subsets, seed } => {
            ensure!(subsets > 0, Usage, "sampled mode needs at least one subset per k");
            Some((ChaCha8Rng::seed_from_u64(seed), subsets))
        }
    };
    let mut out = Vec::with_capacity(d);
    for k in 1..=d {
        let sets: Vec<Vec<usize>> = match &mut rng {
            None => combinations(d, k),
            Some((rng, m)) => {
                let total = binomial(d, k);
                if total <= *m as f64 {
                    combinations(d, k)
                } else {
                    (0..*m)
                        .map(|_| {
                            let mut idx: Vec<usize> = (0..d).collect();
                            for i in 0..k {
                                let j = rng.random_range(i..d);
                                idx.swap(i, j);
                            }
                            let mut s = idx[..k].to_vec();
                            s.sort_unstable();
                            s
                        })
                        .collect()
                }
            }
        };
        let mut acc = 0.0;
        for s in &sets {
            acc += x.subset_entropy(s)?;
        }
        out.push((k, acc / sets.len() as f64 / k as f64));
    }
    Ok(out)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Whether a curve is non-increasing within `tol`.
pub fn is_non_increasing(curve: &[(usize, f64)], tol: f64) -> bool {
    curve.windows(2).all(|w| w[1].1 <= w[0].1 + tol)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JensenCheck {
    pub h_fused: f64,
    pub h_joint: f64,
    pub bound_holds: bool,
}

/// Entropy of `fuse(a, b)` against the joint entropy of `(a, b)` on paired
/// discrete samples, optionally weighted.
pub fn jensen_bound_check(a: &[u32], b: &[u32], weights: Option<&[f64]>, fuse: impl Fn(u32, u32) -> u64) -> Result<JensenCheck> {
    ensure!(a.len() == b.len() && !a.is_empty(), Data, "need equal, non-zero sample counts ({} vs {})", a.len(), b.len());
    if let Some(w) = weights {
        ensure!(w.len() == a.len() && w.iter().all(|&v| v >= 0.0) && w.iter().sum::<f64>() > 0.0, Data, "bad weights");
    }
    let mut joint: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    let mut fused: BTreeMap<u64, f64> = BTreeMap::new();
    let mut total = 0.0;
    for i in 0..a.len() {
        let w = weights.map_or(1.0, |w| w[i]);
        *joint.entry((a[i], b[i])).or_insert(0.0) += w;
        *fused.entry(fuse(a[i], b[i])).or_insert(0.0) += w;
        total += w;
    }
    let h = |m: &mut dyn Iterator<Item = f64>| -m.map(|v| plogp(v / total)).sum::<f64>();
    let h_joint = h(&mut joint.values().copied());
    let h_fused = h(&mut fused.values().copied());
    Ok(JensenCheck { h_fused, h_joint, bound_holds: h_fused <= h_joint + 1e-9 })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Regime {
    /// All `a + b` dimensions independent: `n* = a + b`.
    Independent,
    /// Each `b` dimension copies an `a` dimension with the given probability.
    Correlated { copy_prob: f64 },
    /// Every `b` dimension is a copy of an `a` dimension: `n* = a`.
    Dependent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusedDim {
    Fixed(usize),
    /// Use `n = n*`.
    Matched,
}

/// Which side of the comparison `(1/n*) H̄^{n*}` vs `(1/n) H̄^n` holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// `(1/n*) H̄^{n*} < (1/n) H̄^n`: the fused dimension is too small.
    Less,
    /// Within the relative tolerance.
    Approx,
    /// `(1/n*) H̄^{n*} > (1/n) H̄^n`: the fused dimension is redundant.
    Greater,
}

pub const APPROX_TOLERANCE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct Prop1Outcome {
    pub n_star: usize,
    pub n: usize,
    pub per_dim_optimal: f64,
    pub per_dim_fused: f64,
    pub expected: Direction,
    pub observed: Direction,
}

impl Prop1Outcome {
    pub fn holds(&self) -> bool {
        self.expected == self.observed
    }
}

/// Number of samples drawn by [`proposition1_sim`].
pub const PROP1_SAMPLES: usize = 4096;

/// Build `f^a` and `f^b` from fair bits under `regime`, form the minimal lossless
/// representation `f^{n*}` and an `n`-dimensional fused feature `f^n` (packing
/// dimensions into groups when `n < n*`, duplicating them cyclically when
/// `n > n*`), and compare their per-dimension average entropies.
pub fn proposition1_sim(regime: Regime, a: usize, b: usize, n: FusedDim, seed: u64) -> Result<Prop1Outcome> {
    ensure!(a > 0 && b > 0 && a + b <= 16, Config, "need 0 < a, b and a + b <= 16, got ({}, {})", a, b);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Source of each b dimension: Some(i) copies a-dimension i.
    let sources: Vec<Option<usize>> = (0..b)
        .map(|j| match regime {
            Regime::Independent => None,
            Regime::Dependent => Some(j % a),
            Regime::Correlated { copy_prob } => (rng.random::<f64>() < copy_prob).then_some(j % a),
        })
        .collect();
    if let Regime::Correlated { copy_prob } = regime {
        ensure!((0.0..=1.0).contains(&copy_prob), Config, "copy probability {} outside [0, 1]", copy_prob);
    }
    let informative: Vec<usize> = (0..a).chain((0..b).filter(|&j| sources[j].is_none()).map(|j| a + j)).collect();
    let n_star = informative.len();
    let n = match n {
        FusedDim::Fixed(n) => n,
        FusedDim::Matched => n_star,
    };
    ensure!(n > 0 && n <= 16, Config, "fused dimension {} outside 1..=16", n);

    let mut full_rows = Vec::with_capacity(PROP1_SAMPLES);
    for _ in 0..PROP1_SAMPLES {
        let fa: Vec<u32> = (0..a).map(|_| rng.random_range(0..2u32)).collect();
        let fb: Vec<u32> = sources.iter().map(|s| s.map_or_else(|| rng.random_range(0..2u32), |i| fa[i])).collect();
        full_rows.push([fa, fb].concat());
    }
    let optimal: Vec<Vec<u32>> = full_rows.iter().map(|r| informative.iter().map(|&d| r[d]).collect()).collect();
    let opt_set = DiscreteSampleSet::new(optimal.clone(), vec![2; n_star])?;

    let (fused_rows, fused_alpha): (Vec<Vec<u32>>, Vec<u32>) = if n <= n_star {
        let groups: Vec<Vec<usize>> = (0..n).map(|g| (0..n_star).filter(|d| d % n == g).collect()).collect();
        let alpha = groups.iter().map(|g| 1u32 << g.len()).collect();
        let rows = optimal.iter().map(|r| groups.iter().map(|g| g.iter().fold(0u32, |acc, &d| acc * 2 + r[d])).collect()).collect();
        (rows, alpha)
    } else {
        let rows = optimal.iter().map(|r| (0..n).map(|k| r[k % n_star]).collect()).collect();
        (rows, vec![2; n])
    };
    let fused_set = DiscreteSampleSet::new(fused_rows, fused_alpha)?;

    let per_dim_optimal = opt_set.entropy()? / n_star as f64;
    let per_dim_fused = fused_set.entropy()? / n as f64;
    let expected = match n.cmp(&n_star) {
        core::cmp::Ordering::Less => Direction::Less,
        core::cmp::Ordering::Equal => Direction::Approx,
        core::cmp::Ordering::Greater => Direction::Greater,
    };
    let scale = per_dim_optimal.abs().max(per_dim_fused.abs());
    let observed = if libm::fabs(per_dim_optimal - per_dim_fused) <= APPROX_TOLERANCE * scale {
        Direction::Approx
    } else if per_dim_optimal < per_dim_fused {
        Direction::Less
    } else {
        Direction::Greater
    };
    Ok(Prop1Outcome { n_star, n, per_dim_optimal, per_dim_fused, expected, observed })
}

// ----- layer diagnostics ---------------------------------------------------------

/// Stage features of both branches, as consumed by fusion. ViT stages 1 and 2
/// are taken after FEB.
#[derive(Clone, Debug, PartialEq)]
pub struct StageFeatures {
    pub cnn: Vec<Tensor>,
    pub vit: Vec<Tensor>,
}

impl StageFeatures {
    pub fn new(cnn: Vec<Tensor>, vit: Vec<Tensor>) -> Result<Self> {
        ensure!(!cnn.is_empty() && !vit.is_empty(), Usage, "diagnostics need at least one stage per branch");
        for t in cnn.iter().chain(&vit) {
            ensure!(t.rank() == 4 && !t.is_empty(), Usage, "stage features must be non-empty (B, C, H, W) maps, got {:?}", t.shape());
        }
        Ok(Self { cnn, vit })
    }

    pub fn from_trace(t: &ForwardTrace) -> Result<Self> {
        let vit = vec![t.vit_enhanced[0].clone(), t.vit_enhanced[1].clone(), t.vit[2].clone(), t.vit[3].clone()];
        Self::new(t.cnn.to_vec(), vit)
    }

    /// Concatenate the batches of several feature sets.
    pub fn concat(parts: &[StageFeatures]) -> Result<Self> {
        ensure!(!parts.is_empty(), Usage, "no feature sets to concatenate");
        let cat = |get: &dyn Fn(&StageFeatures) -> &Vec<Tensor>| -> Result<Vec<Tensor>> {
            (0..get(&parts[0]).len())
                .map(|i| {
                    let items: Vec<Tensor> = parts.iter().flat_map(|p| (0..get(p)[i].shape()[0]).map(move |b| get(p)[i].batch_item(b))).collect::<Result<_>>()?;
                    Tensor::stack_batch(&items)
                })
                .collect()
        };
        Self::new(cat(&|p| &p.cnn)?, cat(&|p| &p.vit)?)
    }
}

/// KL between two layers' pooled activation histograms on shared edges.
pub fn layer_kl(p: &Tensor, q: &Tensor, bins: usize, smoothing: f64) -> Result<f64> {
    let (lp, hp) = min_max(p.data())?;
    let (lq, hq) = min_max(q.data())?;
    let edges = equal_width_edges(lp.min(lq), hp.max(hq), bins)?;
    let hp = Histogram::from_samples_with_edges(p.data(), edges.clone())?;
    let hq = Histogram::from_samples_with_edges(q.data(), edges)?;
    kl_divergence(&hp, &hq, smoothing)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairChoice {
    pub pair: FusionPair,
    pub kl: f64,
    /// `(vit stage, KL)` for every candidate, in stage order.
    pub candidates: Vec<(usize, f64)>,
}

/// For each CNN stage in `cnn_stages`, the shallower ViT stage with the smallest
/// `KL(P_cnn || P_vit)`. Ties go to the lowest ViT stage.
pub fn select_stagger_pairs(f: &StageFeatures, cnn_stages: &[usize], bins: usize) -> Result<Vec<PairChoice>> {
    let mut out = Vec::new();
    for &i in cnn_stages {
        ensure!(i >= 2 && i <= f.cnn.len(), Usage, "CNN stage {} has no shallower ViT candidate in {} stages", i, f.cnn.len());
        let mut candidates = Vec::new();
        let mut best: Option<(usize, f64)> = None;
        for j in 1..i.min(f.vit.len() + 1) {
            let kl = layer_kl(&f.cnn[i - 1], &f.vit[j - 1], bins, KL_SMOOTHING)?;
            candidates.push((j, kl));
            if best.is_none_or(|(_, b)| kl < b) {
                best = Some((j, kl));
            }
        }
        let Some((j, kl)) = best else { bail!(Usage, "no ViT candidate for CNN stage {}", i) };
        out.push(PairChoice { pair: FusionPair::stagger(i, j)?, kl, candidates });
    }
    Ok(out)
}

/// Paired per-location samples of two maps: the finer one is average-pooled
/// onto the coarser grid, then channels are averaged.
pub fn paired_location_means(a: &Tensor, b: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (ba, _, ha, wa) = a.dims4()?;
    let (bb, _, hb, wb) = b.dims4()?;
    ensure!(ba == bb, Data, "batch sizes differ: {} vs {}", ba, bb);
    let (a, b) = if ha >= hb {
        ensure!(ha % hb == 0 && wa % wb == 0 && ha / hb == wa / wb, Data, "grids {}x{} and {}x{} are not nested", ha, wa, hb, wb);
        (a.avg_pool(ha / hb)?, b.clone())
    } else {
        ensure!(hb % ha == 0 && wb % wa == 0 && hb / ha == wb / wa, Data, "grids {}x{} and {}x{} are not nested", ha, wa, hb, wb);
        (a.clone(), b.avg_pool(hb / ha)?)
    };
    Ok((channel_means(&a)?, channel_means(&b)?))
}

/// Mean over channels at every `(b, y, x)`.
pub fn channel_means(t: &Tensor) -> Result<Vec<f64>> {
    let (b, c, h, w) = t.dims4()?;
    let hw = h * w;
    let mut out = vec![0.0; b * hw];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &t.data()[(bi * c + ci) * hw..][..hw];
            for (o, &v) in out[bi * hw..][..hw].iter_mut().zip(plane) {
                *o += v;
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= c as f64);
    Ok(out)
}

/// Per-location means over at most `groups` contiguous, near-equal channel groups.
fn channel_group_means(t: &Tensor, groups: usize) -> Result<Vec<Vec<f64>>> {
    let (b, c, h, w) = t.dims4()?;
    ensure!(groups > 0, Usage, "need at least one channel group");
    let groups = groups.min(c);
    (0..groups)
        .map(|g| {
            let (lo, hi) = (g * c / groups, (g + 1) * c / groups);
            let mut items = Vec::with_capacity(b);
            for bi in 0..b {
                let start = (bi * c + lo) * h * w;
                items.push(Tensor::new(&[1, hi - lo, h, w], t.data()[start..(bi * c + hi) * h * w].to_vec())?);
            }
            channel_means(&Tensor::stack_batch(&items)?)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairRow {
    pub pair: FusionPair,
    pub h_a: f64,
    pub h_b: f64,
    pub h_joint: f64,
    pub mi: f64,
    pub kl: f64,
}

impl PairRow {
    pub fn name(&self) -> String {
        format!("cnn{}-vit{}", self.pair.cnn_stage, self.pair.vit_stage)
    }

    /// `|H(a) + H(b) - I(a; b) - H(a, b)|`.
    pub fn identity_error(&self) -> f64 {
        libm::fabs(self.h_a + self.h_b - self.mi - self.h_joint)
    }
}

pub fn pair_row(f: &StageFeatures, cnn_stage: usize, vit_stage: usize, bins: usize) -> Result<PairRow> {
    let (ca, vb) = (&f.cnn[cnn_stage - 1], &f.vit[vit_stage - 1]);
    let (a, b) = paired_location_means(ca, vb)?;
    let table = joint_table(&a, &b, bins)?;
    Ok(PairRow {
        pair: FusionPair { cnn_stage, vit_stage },
        h_a: table.entropy_a(),
        h_b: table.entropy_b(),
        h_joint: table.joint_entropy(),
        mi: table.mutual_information(),
        kl: layer_kl(ca, vb, bins, KL_SMOOTHING)?,
    })
}

pub const HAN_GROUPS: usize = 4;
pub const HAN_BINS: usize = 4;

/// Han curve of up to `HAN_GROUPS` CNN plus `HAN_GROUPS` ViT channel-group means
/// of a pair, each discretized into `HAN_BINS` bins.
pub fn pair_han_curve(f: &StageFeatures, pair: FusionPair) -> Result<Vec<(usize, f64)>> {
    let (ca, vb) = (&f.cnn[pair.cnn_stage - 1], &f.vit[pair.vit_stage - 1]);
    let (_, _, ha, _) = ca.dims4()?;
    let (_, _, hb, _) = vb.dims4()?;
    let (ca, vb) = if ha >= hb { (ca.avg_pool(ha / hb)?, vb.clone()) } else { (ca.clone(), vb.avg_pool(hb / ha)?) };
    let mut dims = channel_group_means(&ca, HAN_GROUPS)?;
    dims.extend(channel_group_means(&vb, HAN_GROUPS)?);
    let symbols = dims.iter().map(|d| discretize(d, HAN_BINS).map(|(s, _)| s)).collect::<Result<Vec<_>>>()?;
    let n = symbols[0].len();
    let rows = (0..n).map(|i| symbols.iter().map(|s| s[i]).collect()).collect();
    let set = DiscreteSampleSet::new(rows, vec![HAN_BINS as u32; symbols.len()])?;
    han_curve(&set, HanMode::Exhaustive)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsReport {
    pub bins: usize,
    pub rows: Vec<PairRow>,
    pub selected: Vec<PairChoice>,
    pub han: Vec<(usize, f64)>,
    pub histograms: Vec<(String, Histogram)>,
}

/// Every (CNN stage, ViT stage) row, the KL-selected stagger pairs for CNN
/// stages 3 and 4, the Han curve of the first selected pair and one pooled
/// activation histogram per stage.
pub fn diagnose(f: &StageFeatures, bins: usize) -> Result<DiagnosticsReport> {
    ensure!(f.cnn.len() == 4 && f.vit.len() == 4, Usage, "diagnostics expect 4 stages per branch");
    let mut rows = Vec::new();
    for i in 1..=4 {
        for j in 1..=4 {
            rows.push(pair_row(f, i, j, bins)?);
        }
    }
    let selected = select_stagger_pairs(f, &[3, 4], bins)?;
    let han = pair_han_curve(f, selected[0].pair)?;
    let histograms = layer_histograms(f, bins, false)?;
    Ok(DiagnosticsReport { bins, rows, selected, han, histograms })
}

impl DiagnosticsReport {
    pub const HEADER: &'static str = "pair,H_a,H_b,H_joint,MI,KL,bins";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.12},{:.12},{:.12},{:.12},{:.12},{}", r.name(), r.h_a, r.h_b, r.h_joint, r.mi, r.kl, self.bins);
        }
        s
    }

    pub fn selected_csv(&self) -> String {
        let mut s = String::from("cnn_stage,vit_stage,KL\n");
        for c in &self.selected {
            let _ = writeln!(s, "{},{},{:.12}", c.pair.cnn_stage, c.pair.vit_stage, c.kl);
        }
        s
    }

    pub fn han_csv(&self) -> String {
        let mut s = String::from("k,per_dim_entropy\n");
        for (k, v) in &self.han {
            let _ = writeln!(s, "{k},{v:.12}");
        }
        s
    }

    pub fn histograms_csv(&self) -> String {
        histograms_csv(&self.histograms)
    }
}

/// `layer,bin_lo,bin_hi,mass` rows.
pub fn histograms_csv(hists: &[(String, Histogram)]) -> String {
    let mut s = String::from("layer,bin_lo,bin_hi,mass\n");
    for (name, h) in hists {
        for (i, m) in h.masses().iter().enumerate() {
            let _ = writeln!(s, "{name},{:.12},{:.12},{:.12}", h.edges()[i], h.edges()[i + 1], m);
        }
    }
    s
}

/// One histogram per stage (`cnn1`, `vit3`, ...), or per channel of every
/// stage (`cnn1/c0`, ...) when `per_channel` is set.
pub fn layer_histograms(f: &StageFeatures, bins: usize, per_channel: bool) -> Result<Vec<(String, Histogram)>> {
    let mut out = Vec::new();
    let layers = f.cnn.iter().enumerate().map(|(i, t)| (format!("cnn{}", i + 1), t)).chain(f.vit.iter().enumerate().map(|(i, t)| (format!("vit{}", i + 1), t)));
    for (name, t) in layers {
        if !per_channel {
            out.push((name, Histogram::from_samples(t.data(), bins)?));
            continue;
        }
        let (b, c, h, w) = t.dims4()?;
        for ci in 0..c {
            let vals: Vec<f64> = (0..b).flat_map(|bi| t.data()[(bi * c + ci) * h * w..][..h * w].iter().copied()).collect();
            out.push((format!("{name}/c{ci}"), Histogram::from_samples(&vals, bins)?));
        }
    }
    Ok(out)
}
