//! Problem instances, worlds, votes and reward functions.
//!
//! A world is a vector of binary factor values `x_i ∈ {-1, +1}`. The ground
//! truth is the sign of the latent sum `ψ = Σ β_i x_i`; a population whose
//! attention is split according to `ρ` votes `V = Σ ρ_i x_i`. Zero is
//! resolved to `+1` for both signs.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, streams};

/// Default cap on `n` for exhaustive enumeration of all `2^n` worlds.
pub const DEFAULT_EXACT_LIMIT: usize = 20;

/// Default lower integration limit for agreement shares.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Ties `|ψ| <= TIE_TOL` are treated as zero when screening sampled weights.
const TIE_TOL: f64 = 1e-12;

/// Sign with the tie rule `sign(0) = +1`.
#[inline]
pub fn sign(v: f64) -> i8 {
    if v >= 0.0 {
        1
    } else {
        -1
    }
}

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn simplex_tolerance(n: usize) -> f64 {
    1e-12 + n as f64 * 2.3e-16
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scheme {
    /// `f(z) = 1`.
    Binary,
    /// `f(z) = 1/z`: a fixed pot shared by the correct voters.
    Market,
    /// `f(z) = 1` when `z < 1/2`, else 0.
    Minority,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Binary, Scheme::Market, Scheme::Minority];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Binary => "binary",
            Scheme::Market => "market",
            Scheme::Minority => "minority",
        }
    }

    /// Payout multiplier without argument checks. Callers floor `z`.
    #[inline]
    pub fn payoff(self, z: f64) -> f64 {
        match self {
            Scheme::Binary => 1.0,
            Scheme::Market => 1.0 / z,
            Scheme::Minority => {
                if z < 0.5 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "binary" => Ok(Scheme::Binary),
            "market" => Ok(Scheme::Market),
            "minority" => Ok(Scheme::Minority),
            other => Err(Error::InvalidArgument(format!("unknown reward scheme '{other}'"))),
        }
    }
}

/// A reward scheme together with the floor `ε` applied to agreement shares.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardSpec {
    pub scheme: Scheme,
    pub epsilon: f64,
}

impl RewardSpec {
    pub fn new(scheme: Scheme) -> Self {
        Self {
            scheme,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn with_epsilon(scheme: Scheme, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 0.5) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must lie in (0, 0.5), got {epsilon}"
            )));
        }
        Ok(Self { scheme, epsilon })
    }

    /// Reward paid to a correct voter whose camp holds share `z ∈ (0, 1]`.
    pub fn reward(&self, z: f64) -> Result<f64> {
        if !(z > 0.0 && z <= 1.0 + 1e-12) {
            return Err(Error::InvalidArgument(format!(
                "agreement share must lie in (0, 1], got {z}"
            )));
        }
        Ok(self.scheme.payoff(z))
    }
}

/// Pairwise factor covariance `q_ij = <x_i x_j>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariance {
    n: usize,
    data: Vec<f64>,
}

/// A group of factors sharing one latent bit, with pairwise covariance `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationBlock {
    pub members: Vec<usize>,
    pub c: f64,
}

impl Covariance {
    /// Row-major `n × n` matrix; must be symmetric with unit diagonal and
    /// entries in `[-1, 1]`.
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::InvalidArgument(format!(
                "covariance needs {} entries, got {}",
                n * n,
                data.len()
            )));
        }
        for i in 0..n {
            if (data[i * n + i] - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!("q[{i}][{i}] must be 1")));
            }
            for j in 0..i {
                let (a, b) = (data[i * n + j], data[j * n + i]);
                if (a - b).abs() > 1e-12 {
                    return Err(Error::InvalidArgument(format!("q is not symmetric at ({i},{j})")));
                }
                if !(-1.0..=1.0).contains(&a) {
                    return Err(Error::InvalidArgument(format!("q[{i}][{j}] = {a} outside [-1, 1]")));
                }
            }
        }
        Ok(Self { n, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { n, data }
    }

    /// Consecutive blocks of `block_size` factors (the last may be shorter)
    /// with covariance `c` inside a block and zero across blocks.
    pub fn block_equicorrelated(n: usize, block_size: usize, c: f64) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::InvalidArgument("block size must be positive".into()));
        }
        if !(-1.0..=1.0).contains(&c) {
            return Err(Error::InvalidArgument(format!("c = {c} outside [-1, 1]")));
        }
        let mut q = Self::identity(n);
        for i in 0..n {
            for j in 0..n {
                if i != j && i / block_size == j / block_size {
                    q.data[i * n + j] = c;
                }
            }
        }
        Ok(q)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Decomposes `q` into block-equicorrelated groups, the family the
    /// correlated sampler supports: connected components of the nonzero
    /// off-diagonal pattern, each with one common covariance `c ∈ [0, 1)`.
    pub fn blocks(&self) -> Result<Vec<CorrelationBlock>> {
        let n = self.n;
        let mut component = vec![usize::MAX; n];
        let mut out = Vec::new();
        for start in 0..n {
            if component[start] != usize::MAX {
                continue;
            }
            let id = out.len();
            let mut members = vec![start];
            component[start] = id;
            let mut head = 0;
            while head < members.len() {
                let i = members[head];
                head += 1;
                for j in 0..n {
                    if j != i && self.get(i, j) != 0.0 && component[j] == usize::MAX {
                        component[j] = id;
                        members.push(j);
                    }
                }
            }
            members.sort_unstable();
            let c = if members.len() > 1 {
                self.get(members[0], members[1])
            } else {
                0.0
            };
            if !(0.0..1.0).contains(&c) {
                return Err(Error::UnsupportedCovariance(format!(
                    "block covariance {c} outside [0, 1)"
                )));
            }
            for (a, &i) in members.iter().enumerate() {
                for &j in &members[a + 1..] {
                    if (self.get(i, j) - c).abs() > 1e-12 {
                        return Err(Error::UnsupportedCovariance(format!(
                            "factors {i} and {j} share a block but q = {} != {c}",
                            self.get(i, j)
                        )));
                    }
                }
            }
            out.push(CorrelationBlock { members, c });
        }
        Ok(out)
    }
}

/// The problem instance: positive factor weights, sorted descending and
/// summing to one, plus an optional factor covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    beta: Vec<f64>,
    covariance: Option<Covariance>,
}

impl FactorModel {
    /// Validates weights that are already normalized and sorted.
    pub fn new(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::InvalidArgument("a model needs at least one factor".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
            return Err(Error::InvalidArgument(format!("weights must be positive, got {b}")));
        }
        if beta.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument("weights must be sorted descending".into()));
        }
        let total = compensated_sum(beta.iter().copied());
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidArgument(format!("weights must sum to 1, got {total}")));
        }
        Ok(Self { beta, covariance: None })
    }

    /// Sorts and normalizes arbitrary positive weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let mut beta = weights.to_vec();
        beta.sort_by(|a, b| b.total_cmp(a));
        let total = compensated_sum(beta.iter().copied());
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::InvalidArgument("weights must have a positive sum".into()));
        }
        beta.iter_mut().for_each(|b| *b /= total);
        Self::new(beta)
    }

    /// Draws `n` weights i.i.d. uniform on (0, 1), then sorts and normalizes.
    /// For `n <= DEFAULT_EXACT_LIMIT` draws with a tied world (`ψ = 0`) are
    /// rejected and redrawn.
    pub fn sample(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("n must be at least 1".into()));
        }
        let mut rng = stream_rng(seed, streams::FACTOR_WEIGHTS);
        loop {
            let raw: Vec<f64> = (0..n)
                .map(|_| loop {
                    let u: f64 = rng.random();
                    if u > 0.0 {
                        break u;
                    }
                })
                .collect();
            let model = Self::from_weights(&raw)?;
            if n > DEFAULT_EXACT_LIMIT || !model.has_tied_world() {
                return Ok(model);
            }
        }
    }

    pub fn with_covariance(mut self, q: Covariance) -> Result<Self> {
        if q.n() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                actual: q.n(),
            });
        }
        self.covariance = Some(q);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn covariance(&self) -> Option<&Covariance> {
        self.covariance.as_ref()
    }

    pub fn is_independent(&self) -> bool {
        self.covariance.is_none()
    }

    /// `Σ β_i²`.
    pub fn sum_sq(&self) -> f64 {
        self.beta.iter().map(|b| b * b).sum()
    }

    pub fn psi(&self, x: &[i8]) -> f64 {
        self.beta.iter().zip(x).map(|(b, &s)| b * f64::from(s)).sum()
    }

    pub fn world(&self, x: Vec<i8>) -> Result<WorldSample> {
        if x.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                actual: x.len(),
            });
        }
        if x.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::InvalidArgument("factor values must be ±1".into()));
        }
        let psi = self.psi(&x);
        Ok(WorldSample { y: sign(psi), psi, x })
    }

    fn check_enumerable(&self, limit: usize) -> Result<()> {
        if self.n() > limit {
            return Err(Error::SizeLimit { n: self.n(), limit });
        }
        Ok(())
    }

    /// All `2^n` worlds. World `k` sets `x_i = +1` exactly when bit `i` of
    /// `k` is clear, so world 0 is all `+1`.
    pub fn enumerate_worlds(&self, limit: usize) -> Result<impl Iterator<Item = WorldSample> + '_> {
        self.check_enumerable(limit)?;
        let n = self.n();
        Ok((0u64..1 << n).map(move |mask| {
            let x: Vec<i8> = (0..n).map(|i| if mask >> i & 1 == 0 { 1 } else { -1 }).collect();
            let psi = self.psi(&x);
            WorldSample { y: sign(psi), psi, x }
        }))
    }

    fn has_tied_world(&self) -> bool {
        let mut tied = false;
        for_each_sign_mask(self.n(), |mask| {
            tied |= masked_sum(&self.beta, mask).abs() <= TIE_TOL;
        });
        tied
    }

    /// One world of independent fair ±1 factors.
    pub fn sample_world<R: RngCore + ?Sized>(&self, rng: &mut R) -> Result<WorldSample> {
        if !self.is_independent() {
            return Err(Error::CorrelatedModel);
        }
        let mut x = Vec::with_capacity(self.n());
        let mut bits = 0u64;
        for i in 0..self.n() {
            if i % 64 == 0 {
                bits = rng.next_u64();
            }
            x.push(if bits >> (i % 64) & 1 == 0 { 1 } else { -1 });
        }
        let psi = self.psi(&x);
        Ok(WorldSample { y: sign(psi), psi, x })
    }
}

/// Visits every mask in `0..2^n`; bit `i` set means `x_i = -1`.
pub(crate) fn for_each_sign_mask<F: FnMut(u64)>(n: usize, mut f: F) {
    for mask in 0u64..1 << n {
        f(mask);
    }
}

/// `Σ w_i x_i` where bit `i` of `mask` set means `x_i = -1`.
#[inline]
pub(crate) fn masked_sum(w: &[f64], mask: u64) -> f64 {
    w.iter()
        .enumerate()
        .map(|(i, &v)| if mask >> i & 1 == 0 { v } else { -v })
        .sum()
}

/// Population attention shares over factors: a point of the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention(Vec<f64>);

/// Starting allocations for the replicator flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InitKind {
    /// `ρ_i = 1/n`.
    Uniform,
    /// Half the population on the largest-weight factor, the rest spread
    /// evenly over the others.
    Concentrated,
}

impl InitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            InitKind::Uniform => "uniform",
            InitKind::Concentrated => "concentrated",
        }
    }
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "uniform" => Ok(InitKind::Uniform),
            "concentrated" => Ok(InitKind::Concentrated),
            other => Err(Error::InvalidArgument(format!("unknown init kind '{other}'"))),
        }
    }
}

impl Attention {
    pub fn new(rho: Vec<f64>) -> Result<Self> {
        if rho.is_empty() {
            return Err(Error::InvalidArgument("attention needs at least one factor".into()));
        }
        if let Some(r) = rho.iter().find(|r| !(**r >= 0.0 && r.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "attention shares must be >= 0, got {r}"
            )));
        }
        let total = compensated_sum(rho.iter().copied());
        if (total - 1.0).abs() > simplex_tolerance(rho.len()) {
            return Err(Error::InvalidArgument(format!("attention must sum to 1, got {total}")));
        }
        Ok(Self(rho))
    }

    /// Rescales nonnegative weights onto the simplex.
    pub fn normalized(weights: &[f64]) -> Result<Self> {
        let total = compensated_sum(weights.iter().copied());
        if !(total > 0.0 && total.is_finite()) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::InvalidArgument(
                "weights must be nonnegative with positive sum".into(),
            ));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    /// `ρ = δ_i`.
    pub fn vertex(n: usize, i: usize) -> Self {
        let mut rho = vec![0.0; n];
        rho[i] = 1.0;
        Self(rho)
    }

    pub fn initial(n: usize, kind: InitKind) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("n must be at least 1".into()));
        }
        Ok(match kind {
            InitKind::Uniform => Self::uniform(n),
            InitKind::Concentrated if n == 1 => Self(vec![1.0]),
            InitKind::Concentrated => {
                let rest = 0.5 / (n - 1) as f64;
                let mut rho = vec![rest; n];
                rho[0] = 0.5;
                Self(rho)
            }
        })
    }

    /// The ideal allocation `ρ = β`.
    pub fn matching(model: &FactorModel) -> Self {
        Self(model.beta().to_vec())
    }

    pub fn n(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub(crate) fn from_vec_unchecked(rho: Vec<f64>) -> Self {
        Self(rho)
    }

    pub fn l1_distance(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| (a - b).abs()).sum()
    }

    pub fn argmax(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

/// One realization of the factor values.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldSample {
    pub x: Vec<i8>,
    pub psi: f64,
    pub y: i8,
}

impl WorldSample {
    pub fn negated(&self) -> WorldSample {
        WorldSample {
            x: self.x.iter().map(|s| -s).collect(),
            psi: -self.psi,
            y: sign(-self.psi),
        }
    }
}

/// Outcome of the collective vote in one world.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteSummary {
    pub v: f64,
    pub y_hat: i8,
    /// `z_i`: attention mass voting the same way as observers of factor `i`.
    pub z: Vec<f64>,
}

pub fn collective_vote(attention: &Attention, world: &WorldSample) -> Result<VoteSummary> {
    if attention.n() != world.x.len() {
        return Err(Error::DimensionMismatch {
            expected: world.x.len(),
            actual: attention.n(),
        });
    }
    let mut v = 0.0;
    let (mut plus, mut minus) = (0.0, 0.0);
    for (&r, &s) in attention.as_slice().iter().zip(&world.x) {
        v += r * f64::from(s);
        if s > 0 {
            plus += r;
        } else {
            minus += r;
        }
    }
    let z = world.x.iter().map(|&s| if s > 0 { plus } else { minus }).collect();
    Ok(VoteSummary { v, y_hat: sign(v), z })
}
