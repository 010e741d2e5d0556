//! Packing sets, families of overlapping supports, and the Fano-type lower
//! bound they yield for eigenvector estimation.

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::{constants_q, C1};
use crate::model::{orthonormality_error, SparsityBall};
use crate::risk::h;
use crate::rng::StreamSeed;
use crate::{Error, Result};

/// Limits for greedy constructions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GreedyOptions {
    /// Stop once this many members are accepted.
    pub max_members: usize,
    /// Enumerate every candidate when there are at most this many.
    pub exhaustive_limit: u64,
    /// Randomized search stops after this many candidates in total...
    pub candidate_budget: u64,
    /// ...or after this many consecutive rejections.
    pub stall_limit: u64,
    pub seed: u64,
}

impl Default for GreedyOptions {
    fn default() -> Self {
        GreedyOptions {
            max_members: 4096,
            exhaustive_limit: 1_000_000,
            candidate_budget: 1_000_000,
            stall_limit: 20_000,
            seed: 0,
        }
    }
}

/// A vector with `m0` nonzero entries `+-1/sqrt(m0)`, stored as its sorted
/// support with a sign flag per entry.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SignedSupport {
    pub support: Vec<usize>,
    pub negative: Vec<bool>,
}

impl SignedSupport {
    /// `m0 ||a - b||^2`: one per coordinate in exactly one support, four per
    /// shared coordinate with opposite signs.
    pub fn scaled_sq_distance(&self, other: &SignedSupport) -> usize {
        let (mut i, mut j, mut shared, mut flipped) = (0, 0, 0, 0);
        while i < self.support.len() && j < other.support.len() {
            match self.support[i].cmp(&other.support[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    shared += 1;
                    flipped += (self.negative[i] != other.negative[j]) as usize;
                    i += 1;
                    j += 1;
                }
            }
        }
        self.support.len() + other.support.len() - 2 * shared + 4 * flipped
    }

    pub fn to_vector(&self, m: usize) -> Array1<f64> {
        let mut v = Array1::zeros(m);
        let a = 1.0 / (self.support.len() as f64).sqrt();
        for (&k, &neg) in self.support.iter().zip(&self.negative) {
            v[k] = if neg { -a } else { a };
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackingSet {
    pub m: usize,
    pub m0: usize,
    pub points: Vec<SignedSupport>,
    /// Every candidate was visited and none can be added.
    pub maximal: bool,
}

impl PackingSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn vector(&self, j: usize) -> Array1<f64> {
        self.points[j].to_vector(self.m)
    }

    pub fn admits(&self, candidate: &SignedSupport) -> bool {
        self.points.iter().all(|p| p.scaled_sq_distance(candidate) >= self.m0)
    }
}

fn ln_binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

/// Number of candidates, saturating at `u64::MAX`.
fn candidate_count(ln_count: f64) -> u64 {
    if ln_count >= 63.0 * std::f64::consts::LN_2 {
        u64::MAX
    } else {
        ln_count.exp().round() as u64
    }
}

/// Advances `set` to the next `k`-subset of `0..n` in lexicographic order.
fn next_combination(set: &mut [usize], n: usize) -> bool {
    let k = set.len();
    for i in (0..k).rev() {
        if set[i] < n - k + i {
            set[i] += 1;
            for j in i + 1..k {
                set[j] = set[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Greedy packing in `R^m` with `m0 = floor(2m/9)` nonzeros per point and
/// pairwise distance at least 1.
pub fn build_packing(m: usize) -> Result<PackingSet> {
    build_packing_with(m, &GreedyOptions::default())
}

pub fn build_packing_with(m: usize, opts: &GreedyOptions) -> Result<PackingSet> {
    if m < 5 {
        return Err(Error::Precondition(format!("packing needs m >= 5, got {m}")));
    }
    let m0 = 2 * m / 9;
    let mut set = PackingSet {
        m,
        m0,
        points: Vec::new(),
        maximal: false,
    };
    let ln_total = ln_binomial(m, m0) + m0 as f64 * std::f64::consts::LN_2;
    if candidate_count(ln_total) <= opts.exhaustive_limit {
        // supports in lexicographic order; signs counted with + before -
        let mut support: Vec<usize> = (0..m0).collect();
        loop {
            for pattern in 0u64..(1u64 << m0) {
                let negative = (0..m0).map(|i| pattern >> (m0 - 1 - i) & 1 == 1).collect();
                let candidate = SignedSupport {
                    support: support.clone(),
                    negative,
                };
                if set.admits(&candidate) {
                    set.points.push(candidate);
                    if set.points.len() >= opts.max_members {
                        return Ok(set);
                    }
                }
            }
            if !next_combination(&mut support, m) {
                break;
            }
        }
        set.maximal = true;
    } else {
        let mut rng = StreamSeed::new(opts.seed, m as u64, 0).rng();
        let (mut tried, mut stall) = (0u64, 0u64);
        while tried < opts.candidate_budget && stall < opts.stall_limit && set.points.len() < opts.max_members {
            let mut support = sample(&mut rng, m, m0).into_vec();
            support.sort_unstable();
            let negative = (0..m0).map(|_| rng.random::<bool>()).collect();
            let candidate = SignedSupport { support, negative };
            tried += 1;
            if set.admits(&candidate) {
                set.points.push(candidate);
                stall = 0;
            } else {
                stall += 1;
            }
        }
    }
    Ok(set)
}

/// `m`-subsets of `0..N` meeting pairwise in at most `k - 1` elements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsetFamily {
    #[serde(rename = "N")]
    pub dim: usize,
    pub m: usize,
    pub k: usize,
    pub sets: Vec<Vec<usize>>,
    pub maximal: bool,
}

impl MsetFamily {
    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn admits(&self, candidate: &[usize]) -> bool {
        self.sets.iter().all(|s| intersection_size(s, candidate) < self.k)
    }
}

pub fn intersection_size(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut count) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                count += 1;
                i += 1;
                j += 1;
            }
        }
    }
    count
}

pub fn build_mset_family(dim: usize, m: usize, k: usize) -> Result<MsetFamily> {
    build_mset_family_with(dim, m, k, &GreedyOptions::default())
}

pub fn build_mset_family_with(dim: usize, m: usize, k: usize, opts: &GreedyOptions) -> Result<MsetFamily> {
    if !(1 <= k && k <= m && m <= dim) {
        return Err(Error::Precondition(format!("need 1 <= k <= m <= N, got k = {k}, m = {m}, N = {dim}")));
    }
    let mut family = MsetFamily {
        dim,
        m,
        k,
        sets: Vec::new(),
        maximal: false,
    };
    if candidate_count(ln_binomial(dim, m)) <= opts.exhaustive_limit {
        let mut set: Vec<usize> = (0..m).collect();
        loop {
            if family.admits(&set) {
                family.sets.push(set.clone());
                if family.sets.len() >= opts.max_members {
                    return Ok(family);
                }
            }
            if !next_combination(&mut set, dim) {
                break;
            }
        }
        family.maximal = true;
    } else {
        let mut rng = StreamSeed::new(opts.seed, dim as u64, m as u64).rng();
        let (mut tried, mut stall) = (0u64, 0u64);
        while tried < opts.candidate_budget && stall < opts.stall_limit && family.sets.len() < opts.max_members {
            let mut set = sample(&mut rng, dim, m).into_vec();
            set.sort_unstable();
            tried += 1;
            if family.admits(&set) {
                family.sets.push(set);
                stall = 0;
            } else {
                stall += 1;
            }
        }
    }
    Ok(family)
}

fn xlnx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// `E(x) = -x ln x - (1 - x) ln(1 - x)` on `(0, 1)`.
pub fn shannon_entropy(x: f64) -> Result<f64> {
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::Precondition(format!("entropy argument must lie in (0, 1), got {x}")));
    }
    Ok(-xlnx(x) - xlnx(1.0 - x))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MsetBounds {
    /// `C(N, k) / C(m, k)^2`
    pub exact_lower: f64,
    /// `exp[N E(k/N) - 2m E(k/m)]`
    pub entropy_approx: f64,
    pub ln_exact_lower: f64,
    pub ln_entropy_approx: f64,
}

/// Lower bounds on the size of a maximal family of `m`-sets meeting pairwise in
/// fewer than `k` elements.
pub fn mset_cardinality_bounds(dim: usize, m: usize, k: usize) -> Result<MsetBounds> {
    if !(1 <= k && k <= m && m <= dim) {
        return Err(Error::Precondition(format!("need 1 <= k <= m <= N, got k = {k}, m = {m}, N = {dim}")));
    }
    let ln_exact = ln_binomial(dim, k) - 2.0 * ln_binomial(m, k);
    let entropy = |x: f64| -xlnx(x) - xlnx(1.0 - x);
    let ln_entropy = dim as f64 * entropy(k as f64 / dim as f64) - 2.0 * m as f64 * entropy(k as f64 / m as f64);
    Ok(MsetBounds {
        exact_lower: ln_exact.exp(),
        entropy_approx: ln_entropy.exp(),
        ln_exact_lower: ln_exact,
        ln_entropy_approx: ln_entropy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportMode {
    /// Perturb on coordinates `M..M+m`.
    FixedBlock,
    /// Perturb on each set of an `m`-set family over `M..N`.
    Scattered,
}

impl SupportMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fixed_block" | "fixed-block" => Ok(SupportMode::FixedBlock),
            "scattered" => Ok(SupportMode::Scattered),
            other => Err(Error::config("mode", format!("unknown support mode '{other}'"))),
        }
    }
}

/// Hypotheses `theta^j` equal to the standard basis except in column `nu`,
/// which is `sqrt(1 - r^2) e_nu + r sum_l z_l e_{s_l}` for a packing point
/// `z` placed on a support `s`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HypothesisFamily {
    pub dim: usize,
    pub lambdas: Vec<f64>,
    pub nu: usize,
    pub r: f64,
    pub mode: SupportMode,
    pub packing: PackingSet,
    /// Coordinate blocks the packing is placed on.
    pub supports: Vec<Vec<usize>>,
}

/// Parameters of a hypothesis family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    #[serde(rename = "N")]
    pub dim: usize,
    pub nu: usize,
    pub q: f64,
    #[serde(rename = "C")]
    pub c: f64,
    pub mode: SupportMode,
    pub m: usize,
    pub r: f64,
}

pub fn build_hypothesis_family(lambdas: &[f64], spec: &FamilySpec) -> Result<HypothesisFamily> {
    build_hypothesis_family_with(lambdas, spec, &GreedyOptions::default())
}

pub fn build_hypothesis_family_with(lambdas: &[f64], spec: &FamilySpec, opts: &GreedyOptions) -> Result<HypothesisFamily> {
    let rank = lambdas.len();
    let FamilySpec { dim, nu, q, c, mode, m, r } = *spec;
    if nu >= rank {
        return Err(Error::Precondition(format!("component {nu} out of range (M = {rank})")));
    }
    if m + rank > dim {
        return Err(Error::InfeasibleConstruction(format!("m + M = {} exceeds N = {dim}", m + rank)));
    }
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::Precondition(format!("r must lie in (0, 1), got {r}")));
    }
    let ball = SparsityBall::new(q, c)?;
    let a_q = constants_q(q)?.a_q;
    let used = a_q * m as f64 * (r * r / m as f64).powf(q / 2.0);
    if used > ball.c_bar_q() {
        return Err(Error::BallViolation(format!(
            "a_q m (r^2/m)^(q/2) = {used} exceeds C^q - 1 = {}",
            ball.c_bar_q()
        )));
    }
    let packing = build_packing_with(m, opts)?;
    let supports = match mode {
        SupportMode::FixedBlock => vec![(rank..rank + m).collect()],
        SupportMode::Scattered => {
            let k = packing.m0 / 2 + 1;
            let family = build_mset_family_with(dim - rank, m, k.min(m), opts)?;
            family
                .sets
                .into_iter()
                .map(|s| s.into_iter().map(|i| i + rank).collect())
                .collect()
        }
    };
    Ok(HypothesisFamily {
        dim,
        lambdas: lambdas.to_vec(),
        nu,
        r,
        mode,
        packing,
        supports,
    })
}

impl HypothesisFamily {
    pub fn rank(&self) -> usize {
        self.lambdas.len()
    }

    pub fn len(&self) -> usize {
        self.supports.len() * self.packing.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The base hypothesis `[e_1 : ... : e_M]`.
    pub fn base(&self) -> Array2<f64> {
        let mut t = Array2::zeros((self.dim, self.rank()));
        for mu in 0..self.rank() {
            t[[mu, mu]] = 1.0;
        }
        t
    }

    /// Column `nu` of member `j`.
    pub fn direction(&self, j: usize) -> Result<Array1<f64>> {
        if j >= self.len() {
            return Err(Error::Precondition(format!("member {j} out of range ({} members)", self.len())));
        }
        let block = &self.supports[j / self.packing.len()];
        let point = &self.packing.points[j % self.packing.len()];
        let mut v = Array1::zeros(self.dim);
        v[self.nu] = (1.0 - self.r * self.r).sqrt();
        let a = self.r / (self.packing.m0 as f64).sqrt();
        for (&l, &neg) in point.support.iter().zip(&point.negative) {
            v[block[l]] = if neg { -a } else { a };
        }
        Ok(v)
    }

    /// The full `N x M` matrix of member `j`.
    pub fn member(&self, j: usize) -> Result<Array2<f64>> {
        let mut t = self.base();
        t.column_mut(self.nu).assign(&self.direction(j)?);
        Ok(t)
    }

    /// `K(theta^j, theta^0) = n h(lambda_nu) r^2 / 2` for every member.
    pub fn kl_to_base(&self, n: usize) -> Result<f64> {
        Ok(0.5 * n as f64 * h(self.lambdas[self.nu])? * self.r * self.r)
    }
}

fn eta(lambda: f64) -> f64 {
    lambda / (1.0 + lambda)
}

/// Kullback-Leibler divergence between the `n`-sample laws of two spiked
/// models sharing the spikes `lambdas`:
/// `(n/2) [sum_nu eta_nu lambda_nu - sum_{nu, mu} eta_nu lambda_mu <theta1_mu, theta2_nu>^2]`
/// with `eta(l) = l / (1 + l)`.
pub fn kl_divergence(theta1: ArrayView2<f64>, theta2: ArrayView2<f64>, lambdas: &[f64], n: usize) -> Result<f64> {
    if theta1.dim() != theta2.dim() || theta1.ncols() != lambdas.len() {
        return Err(Error::Precondition(format!(
            "shape mismatch: {:?}, {:?}, {} spikes",
            theta1.dim(),
            theta2.dim(),
            lambdas.len()
        )));
    }
    for t in [&theta1, &theta2] {
        let err = orthonormality_error(t);
        if err > 1e-8 {
            return Err(Error::Precondition(format!("columns not orthonormal (error {err})")));
        }
    }
    let cross = theta1.t().dot(&theta2);
    let mut total = 0.0;
    for (nu, &l_nu) in lambdas.iter().enumerate() {
        total += eta(l_nu) * l_nu;
        for (mu, &l_mu) in lambdas.iter().enumerate() {
            total -= eta(l_nu) * l_mu * cross[[mu, nu]].powi(2);
        }
    }
    Ok(0.5 * n as f64 * total)
}

/// `1 - (mean KL + ln 2) / ln J`, clamped to `[0, 1]`.
pub fn fano_bound(kl_values: &[f64], j: usize) -> Result<f64> {
    if j < 2 || kl_values.is_empty() {
        return Err(Error::Precondition(format!("need J >= 2 and some KL values, got J = {j}")));
    }
    let mean = kl_values.iter().sum::<f64>() / kl_values.len() as f64;
    Ok((1.0 - (mean + std::f64::consts::LN_2) / (j as f64).ln()).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LowerBound {
    pub family_size: usize,
    pub r2: f64,
    pub kl_per_member: f64,
    /// `(KL + ln 2) / ln |F|`
    pub fano_a: f64,
    /// `(r^2 / 4) max(0, 1 - a)`
    pub lower_bound: f64,
    pub a_at_most_three_quarters: bool,
    /// `ln |F| / (c_1 m)`
    pub log_size_ratio: f64,
}

pub fn risk_lower_bound(family: &HypothesisFamily, n: usize) -> Result<LowerBound> {
    let size = family.len();
    if size < 2 {
        return Err(Error::InfeasibleConstruction(format!("family has {size} member(s); need at least 2")));
    }
    let kl = family.kl_to_base(n)?;
    let ln_size = (size as f64).ln();
    let a = (kl + std::f64::consts::LN_2) / ln_size;
    let r2 = family.r * family.r;
    Ok(LowerBound {
        family_size: size,
        r2,
        kl_per_member: kl,
        fano_a: a,
        lower_bound: r2 / 4.0 * (1.0 - a).max(0.0),
        a_at_most_three_quarters: a <= 0.75,
        log_size_ratio: ln_size / (C1 * family.packing.m as f64),
    })
}

/// Block size and radius that balance distinguishability against the
/// divergence budget: `m = min(floor(n h), N - M, floor(A_q Cbar^q (n h)^{q/2}))`
/// and `r^2 = c_1 m / (n h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FamilyRecipe {
    pub m: usize,
    pub r2: f64,
}

pub fn family_recipe(dim: usize, rank: usize, n: usize, lambda: f64, q: f64, c: f64) -> Result<FamilyRecipe> {
    let k = constants_q(q)?;
    let ball = SparsityBall::new(q, c)?;
    if rank >= dim {
        return Err(Error::Precondition(format!("need M < N, got M = {rank}, N = {dim}")));
    }
    let nh = n as f64 * h(lambda)?;
    let sparse_cap = (k.big_a_q * ball.c_bar_q() * nh.powf(q / 2.0)).floor();
    let m = nh.floor().min((dim - rank) as f64).min(sparse_cap);
    if m < 5.0 {
        return Err(Error::InfeasibleConstruction(format!("recipe gives m = {m}; packing needs m >= 5")));
    }
    let m = m as usize;
    Ok(FamilyRecipe {
        m,
        r2: C1 * m as f64 / nh,
    })
}
