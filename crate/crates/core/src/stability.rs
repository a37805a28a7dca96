//! Numerical checks of stationarity and linear stability of the replicator
//! flow, and the correlated-factor world sampler.
//!
//! Rates near the ideal allocation `ρ = β` come from Monte Carlo rewards:
//! the minority reward there is a rare event driven by the Gaussian tails
//! the analytic predictions rely on.

use std::f64::consts::PI;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::mc::{fold_worlds, mc_replicator_field, McEstimate, WorldSampler};
use crate::model::{Attention, FactorModel, RewardSpec, Scheme, WorldSample};
use crate::normal;
use crate::rewards::{expected_rewards, RewardConfig};

/// Predicted against measured rate of one experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityReport {
    pub predicted_rate: f64,
    pub measured_rate: f64,
    pub relative_error: f64,
    pub passed: bool,
}

impl StabilityReport {
    pub fn new(predicted: f64, measured: f64, tolerance: f64) -> Self {
        let relative_error = (measured - predicted).abs() / predicted.abs().max(1e-12);
        Self {
            predicted_rate: predicted,
            measured_rate: measured,
            relative_error,
            passed: relative_error <= tolerance,
        }
    }
}

/// `max_i |ρ_i (E_i − Σ_j ρ_j E_j)|` at `candidate`.
pub fn stationarity_check(
    model: &FactorModel,
    spec: &RewardSpec,
    candidate: &Attention,
    rewards: &RewardConfig,
) -> Result<f64> {
    let e = expected_rewards(model, candidate, spec, rewards)?;
    let field = crate::dynamics::raw_field(candidate, &e)?;
    Ok(field.iter().fold(0.0, |m, v| m.max(v.abs())))
}

/// `σ_B = √(Σ β_i²)`.
pub fn sigma_b(model: &FactorModel) -> f64 {
    model.sum_sq().sqrt()
}

/// Predicted `dΔ/dt = −½ φ(β_i − β_j; 0, σ_B) Δ` for the pair perturbation.
pub fn two_factor_prediction(model: &FactorModel, i: usize, j: usize, delta: f64) -> f64 {
    let gap = (model.beta()[i] - model.beta()[j]).abs();
    -0.5 * normal::density(gap, 0.0, sigma_b(model)) * delta
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoFactorConfig {
    pub samples: usize,
    pub seed: u64,
    pub tolerance: f64,
    /// Unperturbed factors whose growth rate must stay small.
    pub side_factors: usize,
    /// Largest accepted `|g_l| / |g_i|` for unperturbed `l`.
    pub side_ratio: f64,
}

impl Default for TwoFactorConfig {
    fn default() -> Self {
        Self {
            samples: 400_000,
            seed: 0,
            tolerance: 0.25,
            side_factors: 5,
            side_ratio: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoFactorReport {
    pub i: usize,
    pub j: usize,
    pub delta: f64,
    pub report: StabilityReport,
    pub measured_std_error: f64,
    /// Measured rate has the sign opposite to `Δ`.
    pub restoring: bool,
    /// Largest `(|g_l| − 3 se) / |g_i|` over the checked unperturbed factors.
    pub side_ratio: f64,
}

/// Moves `Δ` of attention from factor `j` to factor `i` starting at `ρ = β`
/// and measures the rate at which the gap closes.
///
/// The rate is measured per capita, `(g_i − g_j)/2` with
/// `g_k = E_k − Σ_l ρ_l E_l`, which is what the pair prediction describes.
pub fn two_factor_perturbation(
    model: &FactorModel,
    i: usize,
    j: usize,
    delta: f64,
    cfg: &TwoFactorConfig,
) -> Result<TwoFactorReport> {
    let n = model.n();
    if i >= n || j >= n || i == j {
        return Err(Error::InvalidArgument(format!(
            "need distinct factors below {n}, got ({i}, {j})"
        )));
    }
    let beta = model.beta();
    let limit = beta[j].min(0.01);
    if !(0.0..=limit).contains(&delta) {
        return Err(Error::InvalidArgument(format!(
            "delta must lie in [0, {limit:e}] for factors ({i}, {j}), got {delta:e}"
        )));
    }
    let mut rho = beta.to_vec();
    rho[i] += delta;
    rho[j] -= delta;
    let spec = RewardSpec::new(Scheme::Minority);
    let side: Vec<usize> = (0..cfg.side_factors)
        .map(|k| (k * n) / cfg.side_factors.max(1))
        .filter(|l| *l != i && *l != j)
        .collect();
    let tracked: Vec<usize> = [i, j].into_iter().chain(side.iter().copied()).collect();

    // Per tracked factor: Σ g, Σ g², plus Σ d and Σ d² for the pair rate.
    let width = tracked.len();
    let parts = fold_worlds(
        model,
        &rho,
        cfg.samples,
        cfg.seed,
        || vec![0.0; 2 * width + 2],
        |acc, w| {
            let z = w.z_correct();
            let p = spec.scheme.payoff(z.max(spec.epsilon));
            if p == 0.0 {
                return;
            }
            let pi = p * z;
            for (slot, &k) in tracked.iter().enumerate() {
                let g = if w.is_correct(k) { p - pi } else { -pi };
                acc[2 * slot] += g;
                acc[2 * slot + 1] += g * g;
            }
            let d = 0.5 * p * (f64::from(u8::from(w.is_correct(i))) - f64::from(u8::from(w.is_correct(j))));
            acc[2 * width] += d;
            acc[2 * width + 1] += d * d;
        },
    )?;
    let mut sums = vec![0.0; 2 * width + 2];
    for part in &parts {
        for (s, p) in sums.iter_mut().zip(part) {
            *s += p;
        }
    }
    let estimate = |slot: usize| McEstimate::from_sums(sums[2 * slot], sums[2 * slot + 1], cfg.samples);
    let rate = estimate(width);
    let g_i = estimate(0);
    let side_ratio = (2..width)
        .map(|slot| {
            let g = estimate(slot);
            (g.value.abs() - 3.0 * g.std_error).max(0.0) / g_i.value.abs().max(1e-300)
        })
        .fold(0.0, f64::max);

    let predicted = two_factor_prediction(model, i, j, delta);
    let mut report = StabilityReport::new(predicted, rate.value, cfg.tolerance);
    let restoring = delta == 0.0 || rate.value < 0.0;
    report.passed &= restoring && side_ratio <= cfg.side_ratio;
    if delta == 0.0 {
        report.passed = rate.value == 0.0;
    }
    Ok(TwoFactorReport {
        i,
        j,
        delta,
        report,
        measured_std_error: rate.std_error,
        restoring,
        side_ratio,
    })
}

/// Zero-sum perturbation shape `δ_i = β_i (s_i − Σ_j s_j β_j)`.
pub fn perturbation_shape(model: &FactorModel, signs: &[f64]) -> Result<Vec<f64>> {
    if signs.len() != model.n() {
        return Err(Error::DimensionMismatch {
            expected: model.n(),
            actual: signs.len(),
        });
    }
    let beta = model.beta();
    let m: f64 = signs.iter().zip(beta).map(|(s, b)| s * b).sum();
    Ok(beta.iter().zip(signs).map(|(b, s)| b * (s - m)).collect())
}

/// Shape with independent random signs.
pub fn random_sign_shape(model: &FactorModel, seed: u64) -> Result<Vec<f64>> {
    let mut rng = crate::rng::stream_rng(seed, crate::rng::streams::PERTURBATION);
    let mut word = 0u64;
    let signs: Vec<f64> = (0..model.n())
        .map(|i| {
            if i % 64 == 0 {
                word = rng.next_u64();
            }
            if word >> (i % 64) & 1 == 1 {
                -1.0
            } else {
                1.0
            }
        })
        .collect();
    perturbation_shape(model, &signs)
}

/// Shape whose direction grows with `β`: `s_i = n β_i − 1`.
pub fn beta_correlated_shape(model: &FactorModel) -> Result<Vec<f64>> {
    let n = model.n() as f64;
    let signs: Vec<f64> = model.beta().iter().map(|b| n * b - 1.0).collect();
    perturbation_shape(model, &signs)
}

/// Predicted field `Δ̇_i = β_i / (2 √(2π) σ_B) · (−Δ_i + Σ_j β_j Δ_j)`.
pub fn extensive_prediction(model: &FactorModel, delta: &[f64]) -> Vec<f64> {
    let beta = model.beta();
    let c = 1.0 / (2.0 * (2.0 * PI).sqrt() * sigma_b(model));
    let mean: f64 = beta.iter().zip(delta).map(|(b, d)| b * d).sum();
    beta.iter().zip(delta).map(|(b, d)| c * b * (mean - d)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtensiveConfig {
    /// Samples at scale `k` are `ceil(budget / k)`: the signal shrinks with
    /// `k`, so smaller perturbations need more worlds.
    pub budget: f64,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for ExtensiveConfig {
    fn default() -> Self {
        Self {
            budget: 2e6,
            seed: 0,
            tolerance: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtensiveReport {
    pub k: f64,
    pub samples: usize,
    /// `predicted_rate = ‖p‖`, `measured_rate = ⟨m, p⟩ / ‖p‖`.
    pub report: StabilityReport,
    /// `‖m − p‖ / ‖p‖`, the componentwise disagreement.
    pub residual_error: f64,
    /// `‖se‖ / ‖p‖`: the part of the residual explained by sampling noise.
    pub noise_level: f64,
}

/// Measures the replicator field at `ρ = β + k δ` for each scale `k` and
/// compares it with the linear prediction.
pub fn extensive_perturbation(
    model: &FactorModel,
    shape: &[f64],
    k_values: &[f64],
    cfg: &ExtensiveConfig,
) -> Result<Vec<ExtensiveReport>> {
    let beta = model.beta();
    if shape.len() != model.n() {
        return Err(Error::DimensionMismatch {
            expected: model.n(),
            actual: shape.len(),
        });
    }
    let total: f64 = shape.iter().sum();
    let scale: f64 = shape.iter().map(|d| d.abs()).sum();
    if total.abs() > 1e-12 * scale.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "perturbation must sum to zero, got {total:e}"
        )));
    }
    if k_values.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidArgument("k values must be strictly decreasing".into()));
    }
    let spec = RewardSpec::new(Scheme::Minority);
    let mut out = Vec::with_capacity(k_values.len());
    for &k in k_values {
        if !(k > 0.0) {
            return Err(Error::InvalidArgument(format!("k must be positive, got {k}")));
        }
        let rho: Vec<f64> = beta.iter().zip(shape).map(|(b, d)| b + k * d).collect();
        if let Some(i) = rho.iter().position(|r| *r < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "perturbation at k = {k} leaves factor {i} negative"
            )));
        }
        let delta: Vec<f64> = shape.iter().map(|d| k * d).collect();
        let predicted = extensive_prediction(model, &delta);
        let samples = (cfg.budget / k).ceil() as usize;
        let state = Attention::normalized(&rho)?;
        let measured = mc_replicator_field(model, &state, &spec, samples, cfg.seed)?;
        let norm = predicted.iter().map(|p| p * p).sum::<f64>().sqrt();
        let proj = measured.iter().zip(&predicted).map(|(m, p)| m.value * p).sum::<f64>() / norm;
        let resid = measured
            .iter()
            .zip(&predicted)
            .map(|(m, p)| (m.value - p).powi(2))
            .sum::<f64>()
            .sqrt();
        let noise = measured.iter().map(|m| m.std_error.powi(2)).sum::<f64>().sqrt();
        let residual_error = resid / norm;
        let mut report = StabilityReport::new(norm, proj, cfg.tolerance);
        report.passed = residual_error <= cfg.tolerance;
        out.push(ExtensiveReport {
            k,
            samples,
            report,
            residual_error,
            noise_level: noise / norm,
        });
    }
    Ok(out)
}

/// Largest share of `Σ δ²` carried by a single factor.
pub fn spread_diagnostic(shape: &[f64]) -> f64 {
    let total: f64 = shape.iter().map(|d| d * d).sum();
    shape.iter().map(|d| d * d / total).fold(0.0, f64::max)
}

/// One world of a block-correlated model.
pub fn sample_correlated_world<R: RngCore + ?Sized>(model: &FactorModel, rng: &mut R) -> Result<WorldSample> {
    if model.is_independent() {
        return Err(Error::InvalidArgument("model has no covariance".into()));
    }
    Ok(WorldSampler::new(model)?.sample(model, rng))
}

/// `σ_B′ = √(Σ_jl β_j β_l q_jl)` and `σ_Δ′ = √(Σ_jl Δ_j Δ_l q_jl)`.
pub fn correlated_sigmas(model: &FactorModel, delta: &[f64]) -> Result<(f64, f64)> {
    let n = model.n();
    if delta.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: delta.len(),
        });
    }
    let beta = model.beta();
    let q = |j: usize, l: usize| match model.covariance() {
        Some(c) => c.get(j, l),
        None => f64::from(u8::from(j == l)),
    };
    let (mut bb, mut dd) = (0.0, 0.0);
    for j in 0..n {
        for l in 0..n {
            let c = q(j, l);
            if c != 0.0 {
                bb += beta[j] * beta[l] * c;
                dd += delta[j] * delta[l] * c;
            }
        }
    }
    Ok((bb.max(0.0).sqrt(), dd.max(0.0).sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelatedReport {
    pub field: Vec<McEstimate>,
    pub max_abs: f64,
    /// Largest `|value| / std_error`, zero for exactly vanishing components.
    pub max_z: f64,
    /// Every component lies within `z_tol` standard errors of zero.
    pub passed: bool,
}

/// Monte Carlo replicator field at `ρ = β` over correlated worlds.
pub fn correlated_stationarity_check(
    model: &FactorModel,
    spec: &RewardSpec,
    samples: usize,
    seed: u64,
    z_tol: f64,
) -> Result<CorrelatedReport> {
    let field = mc_replicator_field(model, &Attention::matching(model), spec, samples, seed)?;
    let max_abs = field.iter().fold(0.0f64, |m, e| m.max(e.value.abs()));
    let max_z = field.iter().fold(0.0f64, |m, e| {
        let z = if e.value == 0.0 {
            0.0
        } else if e.std_error == 0.0 {
            f64::INFINITY
        } else {
            e.value.abs() / e.std_error
        };
        m.max(z)
    });
    Ok(CorrelatedReport {
        field,
        max_abs,
        max_z,
        passed: max_z <= z_tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Covariance;
    use crate::rng::{stream_rng, streams};

    #[test]
    fn optimum_and_vertex_are_stationary() {
        let cfg = RewardConfig::default();
        let m = FactorModel::sample(500, 1).unwrap();
        let minority =
            stationarity_check(&m, &RewardSpec::new(Scheme::Minority), &Attention::matching(&m), &cfg).unwrap();
        assert!(minority < 1e-6, "{minority}");
        let binary =
            stationarity_check(&m, &RewardSpec::new(Scheme::Binary), &Attention::vertex(500, 0), &cfg).unwrap();
        assert!(binary < 1e-12);
        let small = FactorModel::sample(5, 1).unwrap();
        let moving =
            stationarity_check(&small, &RewardSpec::new(Scheme::Binary), &Attention::uniform(5), &cfg).unwrap();
        assert!(moving > 0.0);
    }

    #[test]
    fn pair_prediction_is_symmetric() {
        let m = FactorModel::sample(100, 3).unwrap();
        assert_eq!(
            two_factor_prediction(&m, 3, 70, 1e-3),
            two_factor_prediction(&m, 70, 3, 1e-3)
        );
    }

    #[test]
    fn zero_perturbation_has_zero_rate() {
        let m = FactorModel::sample(200, 3).unwrap();
        let r = two_factor_perturbation(
            &m,
            5,
            100,
            0.0,
            &TwoFactorConfig {
                samples: 20_000,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.report.measured_rate, 0.0);
        assert!(r.report.passed);
    }

    #[test]
    fn pair_perturbation_is_restoring() {
        let m = FactorModel::sample(400, 3).unwrap();
        let cfg = TwoFactorConfig {
            samples: 200_000,
            ..Default::default()
        };
        let r = two_factor_perturbation(&m, 10, 200, 1e-3, &cfg).unwrap();
        assert!(r.restoring);
        assert!(r.report.relative_error < 0.25, "{r:?}");
        assert!(two_factor_perturbation(&m, 10, 200, 0.5, &cfg).is_err());
        assert!(two_factor_perturbation(&m, 10, 10, 1e-4, &cfg).is_err());
    }

    #[test]
    fn shapes_sum_to_zero_and_are_spread() {
        let m = FactorModel::sample(2000, 4).unwrap();
        for shape in [random_sign_shape(&m, 1).unwrap(), beta_correlated_shape(&m).unwrap()] {
            assert!(shape.iter().sum::<f64>().abs() < 1e-12);
            assert!(spread_diagnostic(&shape) < 0.05);
        }
    }

    #[test]
    fn infeasible_perturbations_are_rejected() {
        let m = FactorModel::sample(50, 4).unwrap();
        let shape = random_sign_shape(&m, 1).unwrap();
        let cfg = ExtensiveConfig::default();
        assert!(extensive_perturbation(&m, &shape, &[5.0], &cfg).is_err());
        assert!(extensive_perturbation(&m, &shape, &[0.1, 0.2], &cfg).is_err());
        let mut bad = shape.clone();
        bad[0] += 1e-3;
        assert!(extensive_perturbation(&m, &bad, &[0.1], &cfg).is_err());
    }

    #[test]
    fn beta_correlated_field_tracks_prediction() {
        let m = FactorModel::sample(1000, 6).unwrap();
        let shape = beta_correlated_shape(&m).unwrap();
        let cfg = ExtensiveConfig {
            budget: 4e5,
            seed: 2,
            tolerance: 0.25,
        };
        let reports = extensive_perturbation(&m, &shape, &[0.1], &cfg).unwrap();
        assert!(reports[0].report.passed, "{reports:?}");
    }

    #[test]
    fn correlated_sampler_moments() {
        let m = FactorModel::sample(20, 2)
            .unwrap()
            .with_covariance(Covariance::block_equicorrelated(20, 10, 0.81).unwrap())
            .unwrap();
        let mut rng = stream_rng(1, streams::WORLDS);
        let draws = 1_000_000;
        let (mut within, mut across) = (0.0, 0.0);
        let mut means = [0.0; 20];
        for _ in 0..draws {
            let w = sample_correlated_world(&m, &mut rng).unwrap();
            within += f64::from(w.x[2] * w.x[7]);
            across += f64::from(w.x[2] * w.x[15]);
            for (acc, x) in means.iter_mut().zip(&w.x) {
                *acc += f64::from(*x);
            }
        }
        let d = f64::from(draws);
        assert!((within / d - 0.81).abs() < 0.01);
        assert!((across / d).abs() < 0.01);
        assert!(means.iter().all(|s| (s / d).abs() < 3.0 / d.sqrt()));
        assert!(sample_correlated_world(&FactorModel::sample(3, 1).unwrap(), &mut rng).is_err());
    }

    #[test]
    fn uncorrelated_blocks_match_independent_draws() {
        let base = FactorModel::sample(8, 2).unwrap();
        let m = base
            .clone()
            .with_covariance(Covariance::block_equicorrelated(8, 4, 0.0).unwrap())
            .unwrap();
        let mut rng = stream_rng(2, streams::WORLDS);
        let draws = 200_000;
        let mut pair = 0.0;
        for _ in 0..draws {
            let w = sample_correlated_world(&m, &mut rng).unwrap();
            pair += f64::from(w.x[0] * w.x[1]);
        }
        assert!((pair / f64::from(draws)).abs() < 0.01);
        let spec = RewardSpec::new(Scheme::Minority);
        let indep = stationarity_check(&base, &spec, &Attention::matching(&base), &RewardConfig::default()).unwrap();
        let corr = correlated_stationarity_check(&m, &spec, 50_000, 1, 3.0).unwrap();
        assert_eq!((indep, corr.max_abs), (0.0, 0.0));
    }

    #[test]
    fn correlated_sigma_examples() {
        let m = FactorModel::sample(10, 1).unwrap();
        let delta = random_sign_shape(&m, 2).unwrap();
        let (b, d) = correlated_sigmas(&m, &delta).unwrap();
        assert!((b - sigma_b(&m)).abs() < 1e-15);
        assert!((d - delta.iter().map(|x| x * x).sum::<f64>().sqrt()).abs() < 1e-15);

        let one = m
            .clone()
            .with_covariance(Covariance::block_equicorrelated(10, 10, 1.0).unwrap())
            .unwrap();
        assert!((correlated_sigmas(&one, &delta).unwrap().0 - 1.0).abs() < 1e-14);

        let eq = FactorModel::from_weights(&[1.0; 10]).unwrap();
        let two = eq
            .clone()
            .with_covariance(Covariance::block_equicorrelated(10, 5, 0.5).unwrap())
            .unwrap();
        let beta = eq.beta();
        let mut off = 0.0;
        for j in 0..10 {
            for l in 0..10 {
                if j != l && j / 5 == l / 5 {
                    off += beta[j] * beta[l];
                }
            }
        }
        let want = eq.sum_sq() + 0.5 * off;
        assert!((correlated_sigmas(&two, &delta).unwrap().0.powi(2) - want).abs() < 1e-15);
    }

    #[test]
    fn binary_field_is_not_stationary_under_correlation() {
        let m = FactorModel::sample(100, 2)
            .unwrap()
            .with_covariance(Covariance::block_equicorrelated(100, 10, 0.3).unwrap())
            .unwrap();
        let minority = correlated_stationarity_check(&m, &RewardSpec::new(Scheme::Minority), 20_000, 1, 3.0).unwrap();
        assert!(minority.passed);
        let binary = correlated_stationarity_check(&m, &RewardSpec::new(Scheme::Binary), 20_000, 1, 3.0).unwrap();
        assert!(!binary.passed);
    }
}
