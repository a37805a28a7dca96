//! Expected reward per factor, `E(R_i)`, for a population allocation.
//!
//! Small models are enumerated exactly. Large models use the normal
//! approximation: conditioned on `x_i = +1`, the latent sum `ψ` and the
//! agreement share `z_i` are jointly Gaussian, so
//!
//! `E(R_i) = ∫ f(z) N(z; μ_z, K_zz) Φ(m(z) / s) dz`
//!
//! with `m(z) = μ_ψ + (z − μ_z) K_ψz / K_zz` and `s² = K_ψψ − K_ψz² / K_zz`.
//! Every factor depends on its own `(β_i, ρ_i)` and three global sums only,
//! so a full reward vector costs `O(n)` quadratures after an `O(n)` setup.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Attention, FactorModel, RewardSpec, Scheme, DEFAULT_EXACT_LIMIT};
use crate::normal;
use crate::quadrature::{integrate, QuadratureConfig};

/// Below this many factors `Auto` evaluates rewards by enumeration.
pub const DEFAULT_APPROX_THRESHOLD: usize = 10;

/// Gaussian tail cut-off for the `z` integration window, in standard deviations.
const WINDOW_SIGMAS: f64 = 9.0;

/// Market integrals below this share switch to the variable `u = ln z`.
const LOG_SWITCH: f64 = 0.05;

/// Ratio above which a leave-one-out sum is recomputed directly.
const DOMINANCE: f64 = 0.5;

/// Attention at or below which a factor's reward is taken as that of a
/// factor with no attention. The induced error is of order `ρ_i`.
const DORMANT: f64 = 1e-12;

/// Dormant factors needed before interpolation pays off.
const MIN_DORMANT: usize = 64;

const CHEB_NODES: usize = 24;

/// Largest accepted disagreement between the fit and direct evaluation.
const DORMANT_FIT_TOL: f64 = 1e-9;

/// Moments of `(ψ, z_i)` conditioned on `x_i = +1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalMoments {
    pub mu_psi: f64,
    pub mu_z: f64,
    pub k_psi_psi: f64,
    pub k_zz: f64,
    pub k_psi_z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EvalMode {
    Exact,
    Approx,
    MonteCarlo,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Exact => "exact",
            EvalMode::Approx => "approx",
            EvalMode::MonteCarlo => "monte-carlo",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Requested evaluation path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardMode {
    Auto,
    Exact,
    Approx,
    MonteCarlo { samples: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedRewards {
    pub values: Vec<f64>,
    pub mode: EvalMode,
}

/// Settings shared by every reward evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardConfig {
    pub mode: RewardMode,
    pub quadrature: QuadratureConfig,
    pub exact_limit: usize,
    pub approx_threshold: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            mode: RewardMode::Auto,
            quadrature: QuadratureConfig::default(),
            exact_limit: DEFAULT_EXACT_LIMIT,
            approx_threshold: DEFAULT_APPROX_THRESHOLD,
        }
    }
}

fn check_dims(model: &FactorModel, attention: &Attention) -> Result<()> {
    if model.n() != attention.n() {
        return Err(Error::DimensionMismatch {
            expected: model.n(),
            actual: attention.n(),
        });
    }
    Ok(())
}

fn check_index(model: &FactorModel, i: usize) -> Result<()> {
    if i >= model.n() {
        return Err(Error::InvalidArgument(format!(
            "factor index {i} out of range for n = {}",
            model.n()
        )));
    }
    Ok(())
}

/// Number of masks handled per parallel work item during enumeration.
const ENUM_CHUNK: u64 = 1 << 12;

/// `E(R_i) = 2^{-n} Σ_worlds f(z_i) [Y = x_i]` by enumeration.
pub fn expected_rewards_exact(
    model: &FactorModel,
    attention: &Attention,
    spec: &RewardSpec,
    limit: usize,
) -> Result<ExpectedRewards> {
    check_dims(model, attention)?;
    if !model.is_independent() {
        return Err(Error::CorrelatedModel);
    }
    let n = model.n();
    if n > limit {
        return Err(Error::SizeLimit { n, limit });
    }
    let beta = model.beta();
    let rho = attention.as_slice();
    let total: u64 = 1 << n;
    let chunk = |start: u64| {
        let mut acc = vec![0.0; n];
        let end = (start + ENUM_CHUNK).min(total);
        for mask in start..end {
            let (mut psi, mut minus) = (0.0, 0.0);
            for i in 0..n {
                if mask >> i & 1 == 0 {
                    psi += beta[i];
                } else {
                    psi -= beta[i];
                    minus += rho[i];
                }
            }
            // Votes observing the `-1` side hold share `minus`.
            let y_negative = psi < 0.0;
            let z = if y_negative { minus } else { 1.0 - minus };
            let payoff = spec.scheme.payoff(z.max(spec.epsilon));
            if payoff == 0.0 {
                continue;
            }
            for (i, a) in acc.iter_mut().enumerate() {
                if (mask >> i & 1 == 1) == y_negative {
                    *a += payoff;
                }
            }
        }
        acc
    };
    let starts: Vec<u64> = (0..total).step_by(ENUM_CHUNK as usize).collect();
    let partials: Vec<Vec<f64>> = starts.into_par_iter().map(chunk).collect();
    let mut values = vec![0.0; n];
    for part in partials {
        for (v, p) in values.iter_mut().zip(part) {
            *v += p;
        }
    }
    let scale = 1.0 / total as f64;
    values.iter_mut().for_each(|v| *v *= scale);
    Ok(ExpectedRewards {
        values,
        mode: EvalMode::Exact,
    })
}

/// Direct `O(n)` evaluation of the conditional moments of factor `i`.
pub fn conditional_moments(model: &FactorModel, attention: &Attention, i: usize) -> Result<ConditionalMoments> {
    check_dims(model, attention)?;
    check_index(model, i)?;
    let (beta, rho) = (model.beta(), attention.as_slice());
    let (mut bb, mut rr, mut br) = (0.0, 0.0, 0.0);
    for j in (0..model.n()).filter(|&j| j != i) {
        bb += beta[j] * beta[j];
        rr += rho[j] * rho[j];
        br += beta[j] * rho[j];
    }
    Ok(ConditionalMoments {
        mu_psi: beta[i],
        mu_z: 0.5 * (1.0 + rho[i]),
        k_psi_psi: bb,
        k_zz: 0.25 * rr,
        k_psi_z: 0.5 * br,
    })
}

/// `Φ(β_i / √(Σ_{j≠i} β_j²))`: the probability that `ψ` agrees with `x_i`
/// under the normal approximation.
pub fn expected_reward_binary_approx(model: &FactorModel, i: usize) -> Result<f64> {
    check_index(model, i)?;
    let sums = GlobalSums::new(model.beta(), model.beta());
    Ok(binary_closed_form(sums.loo_bb(model.beta(), i), model.beta()[i]))
}

fn binary_closed_form(rest_var: f64, beta_i: f64) -> f64 {
    if rest_var <= 0.0 {
        return 1.0;
    }
    normal::cdf(beta_i / rest_var.sqrt())
}

/// Sums over all factors, plus the residual `d = ρ − λβ` of the projection
/// of `ρ` on `β`, used to form the conditional variance without
/// cancellation when `ρ` is nearly proportional to `β`.
struct GlobalSums {
    bb: f64,
    rr: f64,
    br: f64,
    lambda: f64,
    d_beta: f64,
    dd: f64,
}

impl GlobalSums {
    fn new(beta: &[f64], rho: &[f64]) -> Self {
        let (mut bb, mut rr, mut br) = (0.0, 0.0, 0.0);
        for (&b, &r) in beta.iter().zip(rho) {
            bb += b * b;
            rr += r * r;
            br += b * r;
        }
        let lambda = br / bb;
        let (mut d_beta, mut dd) = (0.0, 0.0);
        for (&b, &r) in beta.iter().zip(rho) {
            let d = r - lambda * b;
            d_beta += d * b;
            dd += d * d;
        }
        Self {
            bb,
            rr,
            br,
            lambda,
            d_beta,
            dd,
        }
    }

    fn loo_bb(&self, beta: &[f64], i: usize) -> f64 {
        let b2 = beta[i] * beta[i];
        if b2 > DOMINANCE * self.bb {
            beta.iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, b)| b * b)
                .sum()
        } else {
            self.bb - b2
        }
    }

    fn loo_rr(&self, rho: &[f64], i: usize) -> f64 {
        let r2 = rho[i] * rho[i];
        if r2 > DOMINANCE * self.rr {
            rho.iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, r)| r * r)
                .sum()
        } else {
            self.rr - r2
        }
    }

    /// `(Σ_{j≠i} d_j β_j, Σ_{j≠i} d_j²)`.
    fn loo_residual(&self, beta: &[f64], rho: &[f64], i: usize) -> (f64, f64) {
        let d_i = rho[i] - self.lambda * beta[i];
        let d_beta = self.d_beta - d_i * beta[i];
        if d_i * d_i > DOMINANCE * self.dd {
            let dd = beta
                .iter()
                .zip(rho)
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, (b, r))| {
                    let d = r - self.lambda * b;
                    d * d
                })
                .sum();
            (d_beta, dd)
        } else {
            (d_beta, self.dd - d_i * d_i)
        }
    }
}

/// Parameters of the one-dimensional reward integral for one factor.
#[derive(Debug, Clone, Copy)]
struct Integrand {
    beta_i: f64,
    mu_z: f64,
    sd_z: f64,
    /// `dm/dz = K_ψz / K_zz`.
    slope: f64,
    /// Conditional standard deviation of `ψ` given `z`.
    s: f64,
}

impl Integrand {
    fn build(sums: &GlobalSums, beta: &[f64], rho: &[f64], i: usize) -> Result<Self> {
        let rest_rr = sums.loo_rr(rho, i);
        if rest_rr <= 0.0 {
            return Err(Error::DegenerateAttention { index: i });
        }
        let (d_beta, dd) = sums.loo_residual(beta, rho, i);
        Ok(Self::from_parts(
            beta[i],
            rho[i],
            sums.loo_bb(beta, i),
            rest_rr,
            sums.br - beta[i] * rho[i],
            d_beta,
            dd,
        ))
    }

    /// Integrand of a factor with weight `b` and no attention.
    fn dormant(sums: &GlobalSums, b: f64) -> Self {
        let d_i = -sums.lambda * b;
        Self::from_parts(
            b,
            0.0,
            sums.bb - b * b,
            sums.rr,
            sums.br,
            sums.d_beta - d_i * b,
            sums.dd - d_i * d_i,
        )
    }

    fn from_parts(beta_i: f64, rho_i: f64, rest_bb: f64, rest_rr: f64, rest_br: f64, d_beta: f64, dd: f64) -> Self {
        // Lagrange identity: A·R − B² = A·D − (Σ dβ)² for ρ = λβ + d.
        let q = if rest_bb > 0.0 {
            (dd - d_beta * d_beta / rest_bb).max(0.0)
        } else {
            0.0
        };
        let s2 = rest_bb * q / rest_rr;
        Self {
            beta_i,
            mu_z: 0.5 * (1.0 + rho_i),
            sd_z: 0.5 * rest_rr.sqrt(),
            slope: 2.0 * rest_br / rest_rr,
            s: s2.max(0.0).sqrt(),
        }
    }

    #[inline]
    fn mean_psi(&self, z: f64) -> f64 {
        self.beta_i + (z - self.mu_z) * self.slope
    }

    /// `P(ψ > 0 | z)`.
    #[inline]
    fn p_correct(&self, z: f64) -> f64 {
        let m = self.mean_psi(z);
        if self.s > 0.0 {
            normal::cdf(m / self.s)
        } else if m > 0.0 {
            1.0
        } else if m < 0.0 {
            0.0
        } else {
            0.5
        }
    }

    #[inline]
    fn weight(&self, z: f64) -> f64 {
        normal::density(z, self.mu_z, self.sd_z) * self.p_correct(z)
    }

    /// Points where the integrand changes character: the centre of the `z`
    /// density and the transition of `Φ(m(z)/s)`.
    fn features(&self) -> Vec<f64> {
        let mut pts = vec![self.mu_z - 3.0 * self.sd_z, self.mu_z, self.mu_z + 3.0 * self.sd_z];
        if self.slope != 0.0 {
            let z0 = self.mu_z - self.beta_i / self.slope;
            pts.push(z0);
            let w = self.s / self.slope.abs();
            if w > 0.0 {
                for k in [-8.0, -2.0, 2.0, 8.0] {
                    pts.push(z0 + k * w);
                }
            }
        }
        pts
    }
}

fn approx_single(integrand: &Integrand, spec: &RewardSpec, quad: &QuadratureConfig) -> f64 {
    let upper: f64 = match spec.scheme {
        Scheme::Minority => 0.5,
        _ => 1.0,
    };
    let lo = spec.epsilon.max(integrand.mu_z - WINDOW_SIGMAS * integrand.sd_z);
    let hi = upper.min(integrand.mu_z + WINDOW_SIGMAS * integrand.sd_z);
    if !(hi > lo) {
        return 0.0;
    }
    let mut pts: Vec<f64> = vec![lo, hi];
    pts.extend(integrand.features().into_iter().filter(|p| *p > lo && *p < hi));
    let scheme = spec.scheme;
    if scheme == Scheme::Market && lo < LOG_SWITCH {
        let split = LOG_SWITCH.min(hi);
        let log_pts: Vec<f64> = pts
            .iter()
            .filter(|p| **p <= split)
            .chain(std::iter::once(&split))
            .map(|p| p.ln())
            .collect();
        // dz / z = du, so the market integrand loses its 1/z factor.
        let head = integrate(|u: f64| integrand.weight(u.exp()), &sorted(log_pts), quad).value;
        if split >= hi {
            return head;
        }
        let tail_pts: Vec<f64> = pts.into_iter().filter(|p| *p >= split).chain([split]).collect();
        let tail = integrate(|z: f64| integrand.weight(z) / z, &sorted(tail_pts), quad).value;
        return head + tail;
    }
    integrate(|z: f64| scheme.payoff(z) * integrand.weight(z), &sorted(pts), quad).value
}

fn sorted(mut pts: Vec<f64>) -> Vec<f64> {
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    pts
}

/// Normal-approximation reward of factor `i` by quadrature.
pub fn expected_reward_approx(
    model: &FactorModel,
    attention: &Attention,
    spec: &RewardSpec,
    i: usize,
    quad: &QuadratureConfig,
) -> Result<f64> {
    check_dims(model, attention)?;
    check_index(model, i)?;
    if !model.is_independent() {
        return Err(Error::CorrelatedModel);
    }
    let sums = GlobalSums::new(model.beta(), attention.as_slice());
    let integrand = Integrand::build(&sums, model.beta(), attention.as_slice(), i)?;
    Ok(approx_single(&integrand, spec, quad))
}

/// Normal-approximation rewards for every factor. Binary rewards use the
/// closed form, the other schemes quadrature.
pub fn expected_rewards_approx(
    model: &FactorModel,
    attention: &Attention,
    spec: &RewardSpec,
    quad: &QuadratureConfig,
) -> Result<ExpectedRewards> {
    check_dims(model, attention)?;
    if !model.is_independent() {
        return Err(Error::CorrelatedModel);
    }
    let (beta, rho) = (model.beta(), attention.as_slice());
    let values = if spec.scheme == Scheme::Binary {
        let sums = GlobalSums::new(beta, beta);
        (0..model.n())
            .map(|i| binary_closed_form(sums.loo_bb(beta, i), beta[i]))
            .collect()
    } else {
        let sums = GlobalSums::new(beta, rho);
        let dormant: Vec<usize> = (0..model.n()).filter(|&i| rho[i] <= DORMANT).collect();
        let mut values = vec![f64::NAN; model.n()];
        let direct = match dormant_rewards(&sums, beta, &dormant, spec, quad) {
            Some(interp) => {
                for (&i, v) in dormant.iter().zip(interp) {
                    values[i] = v;
                }
                (0..model.n()).filter(|&i| rho[i] > DORMANT).collect()
            }
            None => (0..model.n()).collect::<Vec<usize>>(),
        };
        let computed = direct
            .par_iter()
            .map(|&i| Integrand::build(&sums, beta, rho, i).map(|g| approx_single(&g, spec, quad)))
            .collect::<Result<Vec<f64>>>()?;
        for (&i, v) in direct.iter().zip(computed) {
            values[i] = v;
        }
        values
    };
    Ok(ExpectedRewards {
        values,
        mode: EvalMode::Approx,
    })
}

/// Rewards of factors without attention depend on `β_i` alone, so they are
/// interpolated from a Chebyshev fit in `β`. Returns `None` when the set is
/// too small to benefit or the fit disagrees with direct evaluation.
fn dormant_rewards(
    sums: &GlobalSums,
    beta: &[f64],
    dormant: &[usize],
    spec: &RewardSpec,
    quad: &QuadratureConfig,
) -> Option<Vec<f64>> {
    if dormant.len() < MIN_DORMANT {
        return None;
    }
    let (lo, hi) = dormant.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
        (lo.min(beta[i]), hi.max(beta[i]))
    });
    if hi * hi > DOMINANCE * sums.bb {
        return None;
    }
    let g = |b: f64| approx_single(&Integrand::dormant(sums, b), spec, quad);
    let nodes: Vec<f64> = (0..CHEB_NODES)
        .map(|k| {
            let x = (std::f64::consts::PI * k as f64 / (CHEB_NODES - 1) as f64).cos();
            0.5 * (lo + hi) + 0.5 * (hi - lo) * x
        })
        .collect();
    let fit: Vec<f64> = nodes.par_iter().map(|&b| g(b)).collect();
    let interp = |b: f64| -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (k, (&x, &f)) in nodes.iter().zip(&fit).enumerate() {
            if b == x {
                return f;
            }
            let mut w = if k % 2 == 0 { 1.0 } else { -1.0 };
            if k == 0 || k == CHEB_NODES - 1 {
                w *= 0.5;
            }
            let c = w / (b - x);
            num += c * f;
            den += c;
        }
        num / den
    };
    // Spot checks between nodes guard against a non-smooth reward profile.
    for k in [0, CHEB_NODES / 2, CHEB_NODES - 2] {
        let b = 0.5 * (nodes[k] + nodes[k + 1]);
        if (interp(b) - g(b)).abs() > DORMANT_FIT_TOL {
            return None;
        }
    }
    Some(dormant.iter().map(|&i| interp(beta[i])).collect())
}

/// Evaluates rewards along the path selected by `cfg.mode`.
pub fn expected_rewards(
    model: &FactorModel,
    attention: &Attention,
    spec: &RewardSpec,
    cfg: &RewardConfig,
) -> Result<ExpectedRewards> {
    check_dims(model, attention)?;
    match cfg.mode {
        RewardMode::Exact => expected_rewards_exact(model, attention, spec, cfg.exact_limit),
        RewardMode::Auto if model.n() < cfg.approx_threshold => {
            expected_rewards_exact(model, attention, spec, cfg.exact_limit)
        }
        RewardMode::Auto | RewardMode::Approx => {
            match expected_rewards_approx(model, attention, spec, &cfg.quadrature) {
                Err(Error::DegenerateAttention { .. }) if model.n() <= cfg.exact_limit => {
                    expected_rewards_exact(model, attention, spec, cfg.exact_limit)
                }
                other => other,
            }
        }
        RewardMode::MonteCarlo { samples, seed } => {
            let est = crate::mc::mc_expected_rewards(model, attention, spec, samples, seed)?;
            Ok(ExpectedRewards {
                values: est.iter().map(|e| e.value).collect(),
                mode: EvalMode::MonteCarlo,
            })
        }
    }
}
