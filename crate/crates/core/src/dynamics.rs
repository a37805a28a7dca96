//! Replicator dynamics on the attention simplex.
//!
//! `ρ̇_i = ρ_i (Ê_i − 1)` where `Ê` is the expected reward rescaled so the
//! mean reward per agent `Σ ρ_j E_j` is one. Integration uses the
//! Bogacki–Shampine 3(2) embedded pair:
//!
//! ```text
//!   0   |
//!   1/2 | 1/2
//!   3/4 | 0    3/4
//!   1   | 2/9  1/3  4/9
//!   ----+---------------------
//!       | 2/9  1/3  4/9  0      (order 3, propagated)
//!       | 7/24 1/4  1/3  1/8    (order 2, error estimate)
//! ```
//!
//! The last stage is evaluated at the new state and reused as the first
//! stage of the next step.

use crate::accuracy::{collective_accuracy, diversity};
use crate::error::{Error, Result};
use crate::model::{Attention, FactorModel, RewardSpec};
use crate::rewards::{expected_rewards, ExpectedRewards, RewardConfig};

/// Mean rewards below this value are not normalized.
pub const NORMALIZATION_FLOOR: f64 = 1e-12;

/// Accepted steps over which the equilibrium criterion must hold.
pub const EQUILIBRIUM_WINDOW: usize = 10;

/// Steps shorter than this abort the integration.
pub const MIN_STEP: f64 = 1e-14;

/// Bound on h times the local Lipschitz estimate.
pub const STABILITY_LIMIT: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub t_max: f64,
    /// Threshold on `max_i |ρ_i (E_i − Σ ρ_j E_j)|`, the unnormalized field.
    pub equilibrium_tol: f64,
    /// Entries below the floor are raised to it before renormalizing.
    pub simplex_floor: f64,
    /// Logarithmically spaced record times per decade.
    pub records_per_decade: usize,
    /// First record time after `t = 0`.
    pub first_record: f64,
    /// Rescale rewards to unit mean before forming the field.
    pub normalize_rewards: bool,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-6,
            abs_tol: 1e-9,
            t_max: 1e6,
            equilibrium_tol: 1e-9,
            simplex_floor: 0.0,
            records_per_decade: 50,
            first_record: 1e-2,
            normalize_rewards: true,
            max_steps: 1_000_000,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")))
            }
        };
        positive("rel_tol", self.rel_tol)?;
        positive("abs_tol", self.abs_tol)?;
        positive("t_max", self.t_max)?;
        positive("equilibrium_tol", self.equilibrium_tol)?;
        positive("first_record", self.first_record)?;
        if self.records_per_decade == 0 {
            return Err(Error::InvalidArgument("records_per_decade must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.simplex_floor) {
            return Err(Error::InvalidArgument(format!(
                "simplex_floor must lie in [0, 1), got {}",
                self.simplex_floor
            )));
        }
        Ok(())
    }

    /// `0` followed by log-spaced times up to and including `t_max`.
    pub fn record_schedule(&self) -> Vec<f64> {
        let mut times = vec![0.0];
        let per = self.records_per_decade as f64;
        let start = self.first_record.log10();
        let mut k = 0u32;
        loop {
            let t = 10f64.powf(start + f64::from(k) / per);
            if t >= self.t_max * (1.0 - 1e-12) {
                break;
            }
            times.push(t);
            k += 1;
        }
        times.push(self.t_max);
        times
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Attention>,
    pub accuracy: Vec<f64>,
    pub diversity: Vec<f64>,
    pub converged_at: Option<f64>,
    /// Accepted integration steps.
    pub steps: usize,
}

impl Trajectory {
    pub fn new() -> Self {
        Self {
            times: Vec::new(),
            states: Vec::new(),
            accuracy: Vec::new(),
            diversity: Vec::new(),
            converged_at: None,
            steps: 0,
        }
    }

    pub fn push(&mut self, model: &FactorModel, t: f64, state: Attention) -> Result<()> {
        self.accuracy.push(collective_accuracy(model, &state)?);
        self.diversity.push(diversity(&state));
        self.times.push(t);
        self.states.push(state);
        Ok(())
    }

    pub fn final_state(&self) -> &Attention {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn final_accuracy(&self) -> f64 {
        *self.accuracy.last().expect("trajectory has at least one state")
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

impl Default for Trajectory {
    fn default() -> Self {
        Self::new()
    }
}

/// Replicator field with rewards rescaled to unit mean, or the raw field
/// `ρ_i (E_i − Σ ρ_j E_j)` when the mean reward is below the normalization
/// floor.
pub fn replicator_rhs(attention: &Attention, rewards: &ExpectedRewards) -> Result<Vec<f64>> {
    if attention.n() != rewards.values.len() {
        return Err(Error::DimensionMismatch {
            expected: attention.n(),
            actual: rewards.values.len(),
        });
    }
    if let Some(e) = rewards.values.iter().find(|e| !(**e >= 0.0)) {
        return Err(Error::InvalidArgument(format!("rewards must be nonnegative, got {e}")));
    }
    Ok(field(attention.as_slice(), &rewards.values, true).0)
}

/// Unnormalized replicator field `ρ_i (E_i − Σ ρ_j E_j)`.
pub fn raw_field(attention: &Attention, rewards: &ExpectedRewards) -> Result<Vec<f64>> {
    if attention.n() != rewards.values.len() {
        return Err(Error::DimensionMismatch {
            expected: attention.n(),
            actual: rewards.values.len(),
        });
    }
    Ok(field(attention.as_slice(), &rewards.values, false).0)
}

/// Returns the field and `max_i |ρ_i (E_i − Ē)|`.
fn field(rho: &[f64], e: &[f64], normalize: bool) -> (Vec<f64>, f64) {
    let mean: f64 = rho.iter().zip(e).map(|(r, e)| r * e).sum();
    let raw: Vec<f64> = rho.iter().zip(e).map(|(r, e)| r * (e - mean)).collect();
    let raw_max = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if normalize && mean >= NORMALIZATION_FLOOR {
        let inv = 1.0 / mean;
        (raw.iter().map(|v| v * inv).collect(), raw_max)
    } else {
        (raw, raw_max)
    }
}

pub fn initial_allocation(n: usize, kind: crate::model::InitKind) -> Result<Attention> {
    Attention::initial(n, kind)
}

/// Tracks the sustained-derivative equilibrium criterion.
#[derive(Debug, Clone)]
pub struct EquilibriumDetector {
    tol: f64,
    window: usize,
    run: usize,
}

impl EquilibriumDetector {
    pub fn new(tol: f64, window: usize) -> Self {
        Self { tol, window, run: 0 }
    }

    /// Feeds one derivative magnitude; true once `window` consecutive
    /// samples have been below the tolerance.
    pub fn observe(&mut self, max_derivative: f64) -> bool {
        if max_derivative < self.tol {
            self.run += 1;
        } else {
            self.run = 0;
        }
        self.run >= self.window
    }
}

/// First time at which `EQUILIBRIUM_WINDOW` consecutive samples of
/// `(t, max |ρ̇|)` lie below `tol`.
pub fn detect_equilibrium(samples: &[(f64, f64)], tol: f64) -> Option<f64> {
    let mut det = EquilibriumDetector::new(tol, EQUILIBRIUM_WINDOW);
    samples.iter().find(|(_, d)| det.observe(*d)).map(|(t, _)| *t)
}

struct Rhs<'a> {
    model: &'a FactorModel,
    spec: &'a RewardSpec,
    rewards: &'a RewardConfig,
    normalize: bool,
}

impl Rhs<'_> {
    fn eval(&self, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        let att = Attention::from_vec_unchecked(y.to_vec());
        let e = expected_rewards(self.model, &att, self.spec, self.rewards)?;
        Ok(field(y, &e.values, self.normalize))
    }
}

fn error_norm(err: &[f64], y0: &[f64], y1: &[f64], cfg: &IntegratorConfig) -> f64 {
    let sum: f64 = err
        .iter()
        .zip(y0.iter().zip(y1))
        .map(|(e, (a, b))| {
            let scale = cfg.abs_tol + cfg.rel_tol * a.abs().max(b.abs());
            (e / scale).powi(2)
        })
        .sum();
    (sum / err.len() as f64).sqrt()
}

/// Clamps to the floor and renormalizes; returns whether any entry moved.
fn repair(y: &mut [f64], floor: f64) -> bool {
    let mut clamped = false;
    for v in y.iter_mut() {
        if *v < floor {
            *v = floor;
            clamped = true;
        }
    }
    let total: f64 = y.iter().sum();
    y.iter_mut().for_each(|v| *v /= total);
    clamped
}

fn local_lipschitz(y0: &[f64], y1: &[f64], f0: &[f64], f1: &[f64]) -> f64 {
    let dy: f64 = y0.iter().zip(y1).map(|(a, b)| (b - a).powi(2)).sum();
    let df: f64 = f0.iter().zip(f1).map(|(a, b)| (b - a).powi(2)).sum();
    if dy > 0.0 {
        (df / dy).sqrt()
    } else {
        0.0
    }
}

fn axpy(y: &[f64], h: f64, terms: &[(f64, &[f64])]) -> Vec<f64> {
    let mut out = y.to_vec();
    for (c, k) in terms {
        for (o, v) in out.iter_mut().zip(k.iter()) {
            *o += h * c * v;
        }
    }
    out
}

/// Integrates the replicator flow from `init` until equilibrium or `t_max`.
pub fn integrate(
    model: &FactorModel,
    spec: &RewardSpec,
    init: &Attention,
    cfg: &IntegratorConfig,
    rewards: &RewardConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    if init.n() != model.n() {
        return Err(Error::DimensionMismatch {
            expected: model.n(),
            actual: init.n(),
        });
    }
    let rhs = Rhs {
        model,
        spec,
        rewards,
        normalize: cfg.normalize_rewards,
    };
    let schedule = cfg.record_schedule();
    let mut traj = Trajectory::new();
    let mut y = init.as_slice().to_vec();
    repair(&mut y, cfg.simplex_floor);
    let mut t = 0.0;
    traj.push(model, t, Attention::from_vec_unchecked(y.clone()))?;
    let mut next_record = 1;

    let (mut k1, _) = rhs.eval(&y)?;
    let mut detector = EquilibriumDetector::new(cfg.equilibrium_tol, EQUILIBRIUM_WINDOW);
    let f_norm = k1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut h = if f_norm > 0.0 {
        (0.01 / f_norm).min(cfg.first_record)
    } else {
        cfg.first_record
    };

    while t < cfg.t_max {
        if traj.steps >= cfg.max_steps {
            close(&mut traj, model, t, y)?;
            return Err(Error::StepBudget {
                t,
                steps: traj.steps,
                trajectory: Box::new(traj),
            });
        }
        let target = schedule[next_record];
        let landing = t + h >= target;
        let step = if landing { target - t } else { h };
        if step < MIN_STEP {
            close(&mut traj, model, t, y)?;
            return Err(Error::StepUnderflow {
                t,
                dt: step,
                trajectory: Box::new(traj),
            });
        }

        let (k2, _) = rhs.eval(&axpy(&y, step, &[(0.5, &k1)]))?;
        let (k3, _) = rhs.eval(&axpy(&y, step, &[(0.75, &k2)]))?;
        let y_new = axpy(&y, step, &[(2.0 / 9.0, &k1), (1.0 / 3.0, &k2), (4.0 / 9.0, &k3)]);
        let (k4, raw4) = rhs.eval(&y_new)?;
        let err: Vec<f64> = (0..y.len())
            .map(|i| step * (-5.0 / 72.0 * k1[i] + 1.0 / 12.0 * k2[i] + 1.0 / 9.0 * k3[i] - 0.125 * k4[i]))
            .collect();
        let norm = error_norm(&err, &y, &y_new, cfg);
        if !norm.is_finite() || norm > 1.0 {
            let factor = if norm.is_finite() {
                (0.9 * norm.powf(-1.0 / 3.0)).max(0.2)
            } else {
                0.2
            };
            h = step * factor;
            continue;
        }

        let lipschitz = local_lipschitz(&y, &y_new, &k1, &k4);
        t = if landing { target } else { t + step };
        y = y_new;
        traj.steps += 1;
        let raw_max;
        if repair(&mut y, cfg.simplex_floor) {
            (k1, raw_max) = rhs.eval(&y)?;
        } else {
            (k1, raw_max) = (k4, raw4);
        }
        let grow = if norm > 0.0 {
            (0.9 * norm.powf(-1.0 / 3.0)).min(5.0)
        } else {
            5.0
        };
        // A step shortened to land on a record time does not limit growth.
        h = if landing { h.max(step * grow) } else { step * grow };
        // Stay inside the real and imaginary stability interval near equilibria.
        if lipschitz > 0.0 {
            h = h.min(STABILITY_LIMIT / lipschitz);
        }

        let converged = detector.observe(raw_max);
        if landing {
            traj.push(model, t, Attention::from_vec_unchecked(y.clone()))?;
            next_record += 1;
        }
        if converged {
            traj.converged_at = Some(t);
            break;
        }
    }
    close(&mut traj, model, t, y)?;
    Ok(traj)
}

/// Records the final state unless it was just recorded.
fn close(traj: &mut Trajectory, model: &FactorModel, t: f64, y: Vec<f64>) -> Result<()> {
    if *traj.times.last().expect("initial state recorded") < t {
        traj.push(model, t, Attention::from_vec_unchecked(y))?;
    }
    Ok(())
}
