//! Monte Carlo estimators and the finite-population imitation model.
//!
//! Worlds are drawn in fixed-size batches. Batch `k` of a run seeded with
//! `seed` uses the generator `stream_rng(derive_seed(seed, k), WORLDS)`, so
//! estimates do not depend on how batches are scheduled over threads, and
//! partial sums are combined in batch order.

use rand::{Rng, RngCore};
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::model::{sign, Attention, FactorModel, RewardSpec, Scheme, WorldSample};
use crate::rng::{derive_seed, stream_rng, streams};

/// Worlds per batch.
pub const BATCH: usize = 1 << 14;

/// Smallest sample count the estimators accept.
pub const MIN_SAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl McEstimate {
    /// Mean and standard error from a sum and a sum of squares.
    pub fn from_sums(sum: f64, sum_sq: f64, samples: usize) -> Self {
        let n = samples as f64;
        let mean = sum / n;
        let var = if samples > 1 {
            ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        Self {
            value: mean,
            std_error: (var / n).sqrt(),
            samples,
        }
    }

    /// Number of standard errors separating the estimate from `target`.
    pub fn z_score(&self, target: f64) -> f64 {
        let d = (self.value - target).abs();
        if d == 0.0 {
            0.0
        } else {
            d / self.std_error
        }
    }
}

#[derive(Debug, Clone)]
enum Structure {
    Independent,
    /// Members of each block copy a shared bit with probability `p`.
    Blocks(Vec<(Vec<usize>, f64)>),
}

/// Draws factor vectors for a model, independent or block-correlated.
///
/// Worlds are bit-packed: bit `i` set means `x_i = −1`.
#[derive(Debug, Clone)]
pub struct WorldSampler {
    n: usize,
    words: usize,
    structure: Structure,
}

impl WorldSampler {
    pub fn new(model: &FactorModel) -> Result<Self> {
        let n = model.n();
        let structure = match model.covariance() {
            None => Structure::Independent,
            Some(q) => Structure::Blocks(
                q.blocks()?
                    .into_iter()
                    .map(|b| (b.members, 0.5 * (1.0 + b.c.sqrt())))
                    .collect(),
            ),
        };
        Ok(Self {
            n,
            words: n.div_ceil(64),
            structure,
        })
    }

    pub fn words(&self) -> usize {
        self.words
    }

    pub fn fill<R: RngCore + ?Sized>(&self, rng: &mut R, bits: &mut [u64]) {
        match &self.structure {
            Structure::Independent => {
                for w in bits.iter_mut() {
                    *w = rng.next_u64();
                }
                let tail = self.n % 64;
                if tail != 0 {
                    bits[self.words - 1] &= (1u64 << tail) - 1;
                }
            }
            Structure::Blocks(blocks) => {
                bits.iter_mut().for_each(|w| *w = 0);
                for (members, p) in blocks {
                    let latent_negative = rng.next_u64() & 1 == 1;
                    for &i in members {
                        let copy = rng.random::<f64>() < *p;
                        if copy != latent_negative {
                            continue;
                        }
                        // Negative when copying a negative bit or flipping a positive one.
                        bits[i / 64] |= 1 << (i % 64);
                    }
                }
            }
        }
    }

    pub fn sample<R: RngCore + ?Sized>(&self, model: &FactorModel, rng: &mut R) -> WorldSample {
        let mut bits = vec![0u64; self.words];
        self.fill(rng, &mut bits);
        let x: Vec<i8> = (0..self.n)
            .map(|i| if bits[i / 64] >> (i % 64) & 1 == 1 { -1 } else { 1 })
            .collect();
        let psi = model.psi(&x);
        WorldSample { y: sign(psi), psi, x }
    }
}

/// `Σ w_i x_i` for a bit-packed world.
#[inline]
fn signed_sum(w: &[f64], bits: &[u64]) -> f64 {
    let mut acc = 0.0;
    for (chunk, &word) in w.chunks(64).zip(bits) {
        for (j, &v) in chunk.iter().enumerate() {
            let neg = (word >> j) & 1;
            acc += f64::from_bits(v.to_bits() ^ (neg << 63));
        }
    }
    acc
}

/// `Σ w_i [x_i = −1]` for a bit-packed world.
#[inline]
fn negative_mass(w: &[f64], bits: &[u64]) -> f64 {
    let mut acc = 0.0;
    for (chunk, &word) in w.chunks(64).zip(bits) {
        for (j, &v) in chunk.iter().enumerate() {
            acc += v * ((word >> j) & 1) as f64;
        }
    }
    acc
}

/// Calls `f(i)` for every factor whose value matches the sign `negative`.
#[inline]
fn for_each_on_side<F: FnMut(usize)>(bits: &[u64], n: usize, negative: bool, mut f: F) {
    for (k, &word) in bits.iter().enumerate() {
        let mut w = if negative { word } else { !word };
        if k == bits.len() - 1 && n % 64 != 0 {
            w &= (1u64 << (n % 64)) - 1;
        }
        while w != 0 {
            let j = w.trailing_zeros() as usize;
            f(k * 64 + j);
            w &= w - 1;
        }
    }
}

/// One drawn world as seen by a particular attention vector.
pub struct WorldView<'a> {
    pub bits: &'a [u64],
    pub n: usize,
    pub psi: f64,
    /// Attention mass voting `−1`.
    pub minus: f64,
}

impl WorldView<'_> {
    /// True when the ground truth is `−1`.
    pub fn y_negative(&self) -> bool {
        self.psi < 0.0
    }

    /// Share of the population in the correct camp.
    pub fn z_correct(&self) -> f64 {
        if self.y_negative() {
            self.minus
        } else {
            1.0 - self.minus
        }
    }

    pub fn is_negative(&self, i: usize) -> bool {
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn is_correct(&self, i: usize) -> bool {
        self.is_negative(i) == self.y_negative()
    }

    pub fn for_each_correct<F: FnMut(usize)>(&self, f: F) {
        for_each_on_side(self.bits, self.n, self.y_negative(), f)
    }
}

/// Runs `visit` over `samples` worlds and returns one accumulator per batch,
/// in batch order.
pub fn fold_worlds<A, M, V>(
    model: &FactorModel,
    attention: &[f64],
    samples: usize,
    seed: u64,
    make: M,
    visit: V,
) -> Result<Vec<A>>
where
    A: Send,
    M: Fn() -> A + Sync,
    V: Fn(&mut A, &WorldView) + Sync,
{
    if attention.len() != model.n() {
        return Err(Error::DimensionMismatch {
            expected: model.n(),
            actual: attention.len(),
        });
    }
    let sampler = WorldSampler::new(model)?;
    let batches = samples.div_ceil(BATCH);
    let beta = model.beta();
    Ok((0..batches)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(derive_seed(seed, k as u64), streams::WORLDS);
            let count = BATCH.min(samples - k * BATCH);
            let mut bits = vec![0u64; sampler.words()];
            let mut acc = make();
            for _ in 0..count {
                sampler.fill(&mut rng, &mut bits);
                let view = WorldView {
                    bits: &bits,
                    n: model.n(),
                    psi: signed_sum(beta, &bits),
                    minus: negative_mass(attention, &bits),
                };
                visit(&mut acc, &view);
            }
            acc
        })
        .collect())
}

fn check_samples(samples: usize) -> Result<()> {
    if samples < MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "at least {MIN_SAMPLES} samples are required, got {samples}"
        )));
    }
    Ok(())
}

/// Per-world sums behind reward and field estimates.
#[derive(Debug, Clone)]
struct RewardSums {
    /// `Σ R_i`, `Σ R_i²` and `Σ R_i Π` per factor.
    e: Vec<f64>,
    e2: Vec<f64>,
    e_pi: Vec<f64>,
    /// `Π = Σ_j ρ_j R_j`, the mean payout of the world.
    pi: f64,
    pi2: f64,
}

impl RewardSums {
    fn new(n: usize) -> Self {
        Self {
            e: vec![0.0; n],
            e2: vec![0.0; n],
            e_pi: vec![0.0; n],
            pi: 0.0,
            pi2: 0.0,
        }
    }

    fn merge(mut self, other: &Self) -> Self {
        for i in 0..self.e.len() {
            self.e[i] += other.e[i];
            self.e2[i] += other.e2[i];
            self.e_pi[i] += other.e_pi[i];
        }
        self.pi += other.pi;
        self.pi2 += other.pi2;
        self
    }
}

fn reward_sums(
    model: &FactorModel,
    attention: &Attention,
    spec: &RewardSpec,
    samples: usize,
    seed: u64,
) -> Result<RewardSums> {
    let n = model.n();
    let parts = fold_worlds(
        model,
        attention.as_slice(),
        samples,
        seed,
        || RewardSums::new(n),
        |acc, w| {
            let z = w.z_correct();
            let p = spec.scheme.payoff(z.max(spec.epsilon));
            if p == 0.0 {
                return;
            }
            let pi = p * z;
            acc.pi += pi;
            acc.pi2 += pi * pi;
            w.for_each_correct(|i| {
                acc.e[i] += p;
                acc.e2[i] += p * p;
                acc.e_pi[i] += p * pi;
            });
        },
    )?;
    Ok(parts.iter().fold(RewardSums::new(n), |acc, part| acc.merge(part)))
}

/// Sampled `E(R_i)` with standard errors.
pub fn mc_expected_rewards(
    model: &FactorModel,
    attention: &Attention,
    spec: &RewardSpec,
    samples: usize,
    seed: u64,
) -> Result<Vec<McEstimate>> {
    check_samples(samples)?;
    let sums = reward_sums(model, attention, spec, samples, seed)?;
    Ok(sums
        .e
        .iter()
        .zip(&sums.e2)
        .map(|(&s, &s2)| McEstimate::from_sums(s, s2, samples))
        .collect())
}

/// Sampled unnormalized replicator field `ρ_i (E_i − Σ_j ρ_j E_j)` with
/// standard errors that account for the shared mean-payout term.
pub fn mc_replicator_field(
    model: &FactorModel,
    attention: &Attention,
    spec: &RewardSpec,
    samples: usize,
    seed: u64,
) -> Result<Vec<McEstimate>> {
    check_samples(samples)?;
    let s = reward_sums(model, attention, spec, samples, seed)?;
    let n = samples as f64;
    let pi_mean = s.pi / n;
    let pi_var = s.pi2 / n - pi_mean * pi_mean;
    Ok(attention
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let e_mean = s.e[i] / n;
            let e_var = s.e2[i] / n - e_mean * e_mean;
            let cov = s.e_pi[i] / n - e_mean * pi_mean;
            let var = (e_var + pi_var - 2.0 * cov).max(0.0) * n / (n - 1.0);
            McEstimate {
                value: r * (e_mean - pi_mean),
                std_error: r * (var / n).sqrt(),
                samples,
            }
        })
        .collect())
}

/// Sampled collective accuracy with its binomial standard error.
pub fn mc_accuracy(model: &FactorModel, attention: &Attention, samples: usize, seed: u64) -> Result<McEstimate> {
    check_samples(samples)?;
    let parts = fold_worlds(
        model,
        attention.as_slice(),
        samples,
        seed,
        || 0u64,
        |hits, w| {
            // V = 1 − 2·minus; ties count as +1.
            let v_negative = w.minus > 0.5;
            *hits += u64::from(v_negative == w.y_negative());
        },
    )?;
    let hits: u64 = parts.iter().sum();
    let p = hits as f64 / samples as f64;
    Ok(McEstimate {
        value: p,
        std_error: (p * (1.0 - p) / samples as f64).sqrt(),
        samples,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinitePopulationConfig {
    pub population: u64,
    pub rounds: usize,
    /// Probability that an agent reconsiders its factor in a round.
    pub imitation_rate: f64,
    pub seed: u64,
    /// Rounds between recorded states.
    pub record_every: usize,
    /// Payoff difference at which imitation becomes certain. `None` uses
    /// `default_payoff_scale`.
    pub payoff_scale: Option<f64>,
}

/// Imitation scale `S` per scheme: the largest payoff for binary and
/// minority rewards; for market rewards, whose payoff `1/z` is unbounded,
/// a share of one tenth or less saturates the switching probability.
pub fn default_payoff_scale(scheme: Scheme) -> f64 {
    match scheme {
        Scheme::Binary | Scheme::Minority => 1.0,
        Scheme::Market => 10.0,
    }
}

impl FinitePopulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population == 0 || self.rounds == 0 || self.record_every == 0 {
            return Err(Error::InvalidArgument(
                "population, rounds and record_every must be positive".into(),
            ));
        }
        if let Some(scale) = self.payoff_scale {
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "payoff_scale must be positive, got {scale}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.imitation_rate) {
            return Err(Error::InvalidArgument(format!(
                "imitation_rate must lie in [0, 1], got {}",
                self.imitation_rate
            )));
        }
        Ok(())
    }

    /// True when the population is smaller than the number of factors.
    pub fn is_undersized(&self, n: usize) -> bool {
        (self.population as usize) < n
    }
}

/// Agent counts closest to `N ρ`, rounding by largest remainder.
pub fn apportion(attention: &Attention, population: u64) -> Vec<u64> {
    let rho = attention.as_slice();
    let exact: Vec<f64> = rho.iter().map(|r| r * population as f64).collect();
    let mut counts: Vec<u64> = exact.iter().map(|e| e.floor() as u64).collect();
    let assigned: u64 = counts.iter().sum();
    let mut order: Vec<usize> = (0..rho.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(population.saturating_sub(assigned) as usize) {
        counts[i] += 1;
    }
    counts
}

fn binomial<R: Rng + ?Sized>(rng: &mut R, trials: u64, p: f64) -> u64 {
    if trials == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return trials;
    }
    Binomial::new(trials, p).expect("valid binomial").sample(rng)
}

/// Agent-based pairwise proportional imitation.
///
/// Each round one world is drawn and every agent is paid `f(z)` if its
/// factor matches the truth, where `z` is its camp's share of the
/// population, floored at `1/N`. Each agent then, with probability
/// `imitation_rate`, compares itself with a uniformly drawn peer and copies
/// the peer's factor with probability `min(1, max(0, π_peer − π_own) / S)`.
/// Agents on the same factor are exchangeable, so the update is simulated
/// on per-factor counts with binomial and multinomial draws; this is exact
/// in distribution.
pub fn finite_population_run(
    model: &FactorModel,
    spec: &RewardSpec,
    init: &Attention,
    cfg: &FinitePopulationConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    if !model.is_independent() {
        return Err(Error::CorrelatedModel);
    }
    if init.n() != model.n() {
        return Err(Error::DimensionMismatch {
            expected: model.n(),
            actual: init.n(),
        });
    }
    let n = model.n();
    let big_n = cfg.population;
    let inv_n = 1.0 / big_n as f64;
    let mut counts = apportion(init, big_n);
    let mut rng = stream_rng(cfg.seed, streams::POPULATION);
    let sampler = WorldSampler::new(model)?;
    let mut bits = vec![0u64; sampler.words()];
    let mut traj = Trajectory::new();
    let state = |counts: &[u64]| Attention::from_vec_unchecked(counts.iter().map(|&c| c as f64 * inv_n).collect());
    traj.push(model, 0.0, state(&counts))?;

    let scale = cfg.payoff_scale.unwrap_or_else(|| default_payoff_scale(spec.scheme));
    let mut correct: Vec<usize> = Vec::with_capacity(n);
    let mut inflow = vec![0u64; n];
    for round in 1..=cfg.rounds {
        sampler.fill(&mut rng, &mut bits);
        let psi = signed_sum(model.beta(), &bits);
        let y_negative = psi < 0.0;
        correct.clear();
        for_each_on_side(&bits, n, y_negative, |i| correct.push(i));
        let correct_count: u64 = correct.iter().map(|&i| counts[i]).sum();
        let z = (correct_count as f64 * inv_n).max(inv_n);
        let payoff = spec.scheme.payoff(z);
        if payoff > 0.0 && correct_count > 0 && correct_count < big_n && cfg.imitation_rate > 0.0 {
            // Wrong agents earn 0 and correct ones `payoff`, so only wrong
            // agents switch: they meet a correct peer with probability C/N.
            let gain = (payoff / scale).min(1.0);
            let switch_p = cfg.imitation_rate * correct_count as f64 * inv_n * gain;
            let mut movers = 0u64;
            for i in 0..n {
                let wrong = (bits[i / 64] >> (i % 64) & 1 == 1) != y_negative;
                if wrong && counts[i] > 0 {
                    let m = binomial(&mut rng, counts[i], switch_p);
                    counts[i] -= m;
                    movers += m;
                }
            }
            // Movers pick their new factor in proportion to its count among
            // correct agents.
            inflow.iter_mut().for_each(|v| *v = 0);
            let mut remaining_mass = correct_count;
            let mut remaining = movers;
            for &i in &correct {
                if remaining == 0 {
                    break;
                }
                let take = if remaining_mass == counts[i] {
                    remaining
                } else {
                    binomial(&mut rng, remaining, counts[i] as f64 / remaining_mass as f64)
                };
                inflow[i] = take;
                remaining -= take;
                remaining_mass -= counts[i];
            }
            for &i in &correct {
                counts[i] += inflow[i];
            }
        }
        debug_assert_eq!(counts.iter().sum::<u64>(), big_n);
        if round % cfg.record_every == 0 || round == cfg.rounds {
            traj.push(model, round as f64, state(&counts))?;
            traj.steps = round;
        }
    }
    Ok(traj)
}

/// Mean attention over the recorded states with `t >= from`.
pub fn time_average(traj: &Trajectory, from: f64) -> Result<Attention> {
    let selected: Vec<&Attention> = traj
        .times
        .iter()
        .zip(&traj.states)
        .filter(|(t, _)| **t >= from)
        .map(|(_, s)| s)
        .collect();
    if selected.is_empty() {
        return Err(Error::InvalidArgument(format!("no recorded states after t = {from}")));
    }
    let n = selected[0].n();
    let mut mean = vec![0.0; n];
    for s in &selected {
        for (m, r) in mean.iter_mut().zip(s.as_slice()) {
            *m += r;
        }
    }
    Attention::normalized(&mean)
}
