//! The five experiment commands. Each runs its jobs on the rayon pool,
//! collects results in job order and writes its CSV files from one thread.

use std::fmt;
use std::fs;
use std::io;
use std::path::PathBuf;

use rayon::prelude::*;

use cilab_core::dynamics::integrate;
use cilab_core::mc::{self, FinitePopulationConfig};
use cilab_core::model::Covariance;
use cilab_core::rewards::expected_rewards_exact;
use cilab_core::rng::{derive_seed, stream_rng, streams};
use cilab_core::stability::{self, ExtensiveConfig, TwoFactorConfig};
use cilab_core::{
    accuracy, collective_accuracy, diversity, Attention, FactorModel, InitKind, RewardSpec, Scheme, Trajectory,
};
use rand::Rng;

use crate::analysis::mean_std;
use crate::config::{Command, ConfigError, RunConfig};
use crate::format::{fmt_bool, fmt_g, CsvOut};
use crate::manifest;

/// Label of the scoring-only comparison line.
pub const UNIFORM_BASELINE: &str = "uniform-baseline";

#[derive(Debug)]
pub enum RunError {
    Config(ConfigError),
    Io(io::Error),
    Model(cilab_core::Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 1,
            RunError::Io(_) | RunError::Model(_) => 2,
        }
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "config error: {e}"),
            RunError::Io(e) => write!(f, "i/o error: {e}"),
            RunError::Model(e) => write!(f, "numerical error: {e}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e)
    }
}

impl From<io::Error> for RunError {
    fn from(e: io::Error) -> Self {
        RunError::Io(e)
    }
}

impl From<cilab_core::Error> for RunError {
    fn from(e: cilab_core::Error) -> Self {
        RunError::Model(e)
    }
}

pub type RunResult<T> = std::result::Result<T, RunError>;

/// What a command produced.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub files: Vec<PathBuf>,
    /// Failed checks; only the oracle command treats these as fatal.
    pub failed_checks: usize,
    /// Human-readable summary lines.
    pub lines: Vec<String>,
}

/// Runs `cfg.command` and writes its artifacts plus `manifest.json`.
pub fn run(cfg: &RunConfig) -> RunResult<Report> {
    fs::create_dir_all(&cfg.out).map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", cfg.out.display())))?;
    let mut report = match cfg.command {
        Command::Simulate => simulate(cfg)?,
        Command::Sweep => sweep(cfg)?,
        Command::Scatter => scatter(cfg)?,
        Command::Stability => stability_grid(cfg)?,
        Command::Oracle => oracle(cfg)?,
    };
    let path = manifest::write(cfg, &report.files)?;
    report.files.push(path);
    Ok(report)
}

fn spec_for(cfg: &RunConfig, scheme: Scheme) -> RunResult<RewardSpec> {
    Ok(RewardSpec::with_epsilon(scheme, cfg.epsilon)?)
}

/// Integrates the replicator flow for one `(scheme, n, seed, init)` cell.
/// A flow that stalls (step underflow or exhausted budget) keeps its last
/// valid state, is reported as not converged and logged to stderr.
pub fn run_dynamics(
    cfg: &RunConfig,
    scheme: Scheme,
    n: usize,
    seed: u64,
    init: InitKind,
) -> RunResult<(FactorModel, Trajectory)> {
    let model = FactorModel::sample(n, seed)?;
    let spec = spec_for(cfg, scheme)?;
    let start = Attention::initial(n, init)?;
    let traj = match integrate(&model, &spec, &start, &cfg.integrator, &cfg.rewards) {
        Ok(traj) => traj,
        Err(e @ (cilab_core::Error::StepUnderflow { .. } | cilab_core::Error::StepBudget { .. })) => {
            eprintln!(
                "warning: {}: {e}; keeping the last valid state",
                run_id(scheme.as_str(), n, init, seed)
            );
            e.into_partial().expect("stalled flows carry their trajectory")
        }
        Err(e) => return Err(e.into()),
    };
    Ok((model, traj))
}

pub fn run_id(scheme: &str, n: usize, init: InitKind, seed: u64) -> String {
    format!("{scheme}-n{n}-{init}-s{seed}")
}

fn single_init(cfg: &RunConfig) -> RunResult<InitKind> {
    match cfg.inits.as_slice() {
        [one] => Ok(*one),
        _ => Err(ConfigError(format!("init: {} takes a single init kind", cfg.command.as_str())).into()),
    }
}

pub const TRAJECTORY_HEADER: [&str; 9] = [
    "run_id",
    "scheme",
    "n",
    "init",
    "seed",
    "t",
    "accuracy",
    "diversity",
    "converged",
];
pub const EQUILIBRIUM_HEADER: [&str; 6] = ["scheme", "n", "seed", "factor_index", "beta", "rho_eq"];
pub const SWEEP_HEADER: [&str; 9] = [
    "kind",
    "scheme",
    "n",
    "seed",
    "accuracy",
    "diversity",
    "converged",
    "mean",
    "stddev",
];
pub const STABILITY_HEADER: [&str; 9] = [
    "experiment",
    "scheme",
    "n",
    "seed",
    "params",
    "predicted_rate",
    "measured_rate",
    "relative_error",
    "passed",
];
pub const ORACLE_HEADER: [&str; 9] = [
    "check",
    "scheme",
    "n",
    "seed",
    "item",
    "reference",
    "value",
    "std_error",
    "passed",
];

fn equilibrium_rows(out: &mut CsvOut, scheme: &str, model: &FactorModel, seed: u64, rho: &[f64]) -> io::Result<()> {
    for (i, (b, r)) in model.beta().iter().zip(rho).enumerate() {
        out.row(&[
            scheme.to_string(),
            model.n().to_string(),
            seed.to_string(),
            i.to_string(),
            fmt_g(*b),
            fmt_g(*r),
        ])?;
    }
    Ok(())
}

/// Trajectories for every `(n, scheme, init, seed)`; final states go to one
/// equilibrium file per init kind.
pub fn simulate(cfg: &RunConfig) -> RunResult<Report> {
    let mut jobs = Vec::new();
    for &n in &cfg.n_values {
        for &scheme in &cfg.schemes {
            for &init in &cfg.inits {
                for &seed in &cfg.seeds {
                    jobs.push((n, scheme, init, seed));
                }
            }
        }
    }
    let results: Vec<(FactorModel, Trajectory)> = jobs
        .par_iter()
        .map(|&(n, scheme, init, seed)| run_dynamics(cfg, scheme, n, seed, init))
        .collect::<RunResult<_>>()?;

    let traj_path = cfg.out.join("trajectory.csv");
    let mut traj_out = CsvOut::create(&traj_path, &TRAJECTORY_HEADER)?;
    let mut report = Report::default();
    for (&(n, scheme, init, seed), (_, traj)) in jobs.iter().zip(&results) {
        let id = run_id(scheme.as_str(), n, init, seed);
        let converged = fmt_bool(traj.converged_at.is_some());
        for k in 0..traj.len() {
            traj_out.row(&[
                id.clone(),
                scheme.to_string(),
                n.to_string(),
                init.to_string(),
                seed.to_string(),
                fmt_g(traj.times[k]),
                fmt_g(traj.accuracy[k]),
                fmt_g(traj.diversity[k]),
                converged.clone(),
            ])?;
        }
        report.lines.push(format!(
            "{id}: accuracy {:.4}, diversity {:.4}, {}",
            traj.final_accuracy(),
            diversity(traj.final_state()),
            match traj.converged_at {
                Some(t) => format!("converged at t = {t:.4e}"),
                None => format!("not converged by t = {:.4e}", traj.times.last().copied().unwrap_or(0.0)),
            }
        ));
    }
    traj_out.finish()?;
    report.files.push(traj_path);

    for &init in &cfg.inits {
        let path = cfg.out.join(format!("equilibrium_{init}.csv"));
        let mut out = CsvOut::create(&path, &EQUILIBRIUM_HEADER)?;
        for (&(_, scheme, kind, seed), (model, traj)) in jobs.iter().zip(&results) {
            if kind == init {
                equilibrium_rows(&mut out, scheme.as_str(), model, seed, traj.final_state().as_slice())?;
            }
        }
        out.finish()?;
        report.files.push(path);
    }
    Ok(report)
}

/// Equilibrium accuracy for one sweep cell; `None` scheme scores the
/// uniform allocation without dynamics.
struct CellResult {
    accuracy: f64,
    diversity: f64,
    converged: Option<bool>,
    model: FactorModel,
    rho: Vec<f64>,
}

fn cell(cfg: &RunConfig, scheme: Option<Scheme>, n: usize, seed: u64, init: InitKind) -> RunResult<CellResult> {
    match scheme {
        Some(s) => {
            let (model, traj) = run_dynamics(cfg, s, n, seed, init)?;
            Ok(CellResult {
                accuracy: traj.final_accuracy(),
                diversity: diversity(traj.final_state()),
                converged: Some(traj.converged_at.is_some()),
                rho: traj.final_state().as_slice().to_vec(),
                model,
            })
        }
        None => {
            let model = FactorModel::sample(n, seed)?;
            let uniform = Attention::uniform(n);
            Ok(CellResult {
                accuracy: collective_accuracy(&model, &uniform)?,
                diversity: 1.0,
                converged: None,
                rho: uniform.into_vec(),
                model,
            })
        }
    }
}

fn scheme_label(s: Option<Scheme>) -> &'static str {
    s.map_or(UNIFORM_BASELINE, Scheme::as_str)
}

fn with_baseline(cfg: &RunConfig) -> Vec<Option<Scheme>> {
    cfg.schemes.iter().copied().map(Some).chain([None]).collect()
}

/// Equilibrium accuracy over the `n` grid, with per-`(scheme, n)` summaries.
pub fn sweep(cfg: &RunConfig) -> RunResult<Report> {
    let init = single_init(cfg)?;
    let schemes = with_baseline(cfg);
    let mut jobs = Vec::new();
    for &n in &cfg.n_values {
        for &scheme in &schemes {
            for &seed in &cfg.seeds {
                jobs.push((n, scheme, seed));
            }
        }
    }
    let results: Vec<CellResult> = jobs
        .par_iter()
        .map(|&(n, scheme, seed)| cell(cfg, scheme, n, seed, init))
        .collect::<RunResult<_>>()?;

    let path = cfg.out.join("sweep.csv");
    let mut out = CsvOut::create(&path, &SWEEP_HEADER)?;
    let mut report = Report::default();
    for (group, chunk) in jobs.chunks(cfg.seeds.len()).zip(results.chunks(cfg.seeds.len())) {
        let (n, scheme, _) = group[0];
        let label = scheme_label(scheme);
        for (&(_, _, seed), r) in group.iter().zip(chunk) {
            out.row(&[
                "run".into(),
                label.into(),
                n.to_string(),
                seed.to_string(),
                fmt_g(r.accuracy),
                fmt_g(r.diversity),
                r.converged.map(fmt_bool).unwrap_or_default(),
                String::new(),
                String::new(),
            ])?;
        }
        let acc: Vec<f64> = chunk.iter().map(|r| r.accuracy).collect();
        let (mean, sd) = mean_std(&acc);
        out.row(&[
            "summary".into(),
            label.into(),
            n.to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            fmt_g(mean),
            fmt_g(sd),
        ])?;
        report
            .lines
            .push(format!("{label} n={n}: accuracy {mean:.4} ± {sd:.4}"));
    }
    out.finish()?;
    report.files.push(path);
    Ok(report)
}

/// Equilibrium attention against `β` for every scheme and the baseline.
pub fn scatter(cfg: &RunConfig) -> RunResult<Report> {
    let init = single_init(cfg)?;
    let schemes = with_baseline(cfg);
    let mut jobs = Vec::new();
    for &scheme in &schemes {
        for &n in &cfg.n_values {
            for &seed in &cfg.seeds {
                jobs.push((scheme, n, seed));
            }
        }
    }
    let results: Vec<CellResult> = jobs
        .par_iter()
        .map(|&(scheme, n, seed)| cell(cfg, scheme, n, seed, init))
        .collect::<RunResult<_>>()?;
    let path = cfg.out.join("equilibrium.csv");
    let mut out = CsvOut::create(&path, &EQUILIBRIUM_HEADER)?;
    let mut report = Report::default();
    for (&(scheme, n, seed), r) in jobs.iter().zip(&results) {
        equilibrium_rows(&mut out, scheme_label(scheme), &r.model, seed, &r.rho)?;
        report.lines.push(format!(
            "{} n={n} seed={seed}: accuracy {:.4}, diversity {:.4}",
            scheme_label(scheme),
            r.accuracy,
            r.diversity
        ));
    }
    out.finish()?;
    report.files.push(path);
    Ok(report)
}

/// One row of stability.csv.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityRow {
    pub experiment: String,
    pub scheme: Scheme,
    pub n: usize,
    pub seed: u64,
    pub params: String,
    pub predicted_rate: f64,
    pub measured_rate: f64,
    pub relative_error: f64,
    pub passed: bool,
}

impl StabilityRow {
    fn fields(&self) -> Vec<String> {
        vec![
            self.experiment.clone(),
            self.scheme.to_string(),
            self.n.to_string(),
            self.seed.to_string(),
            self.params.clone(),
            fmt_g(self.predicted_rate),
            fmt_g(self.measured_rate),
            fmt_g(self.relative_error),
            fmt_bool(self.passed),
        ]
    }
}

/// `(i, j)` pairs whose donor factor `j` can give up `2 Δ` of attention.
pub fn two_factor_pairs(model: &FactorModel, pairs: usize, delta: f64) -> Vec<(usize, usize)> {
    let eligible = model.beta().iter().take_while(|b| **b >= 2.0 * delta).count();
    if eligible < 2 || pairs == 0 {
        return Vec::new();
    }
    let half = eligible / 2;
    (0..pairs)
        .map(|k| {
            let i = k * half / pairs;
            let j = half + k * (eligible - half) / pairs;
            (i, j)
        })
        .collect()
}

pub fn stationarity_rows(cfg: &RunConfig, seed: u64) -> RunResult<Vec<StabilityRow>> {
    let n = cfg.stability.n;
    let model = FactorModel::sample(n, seed)?;
    let cases = [
        (Scheme::Minority, Attention::matching(&model), 1e-6, "candidate=beta"),
        (Scheme::Binary, Attention::vertex(n, 0), 1e-12, "candidate=vertex"),
    ];
    cases
        .into_iter()
        .map(|(scheme, candidate, tol, label)| {
            let spec = spec_for(cfg, scheme)?;
            let max = stability::stationarity_check(&model, &spec, &candidate, &cfg.rewards)?;
            Ok(StabilityRow {
                experiment: "stationarity".into(),
                scheme,
                n,
                seed,
                params: format!("{label};threshold={}", fmt_g(tol)),
                predicted_rate: 0.0,
                measured_rate: max,
                relative_error: max / 1e-12,
                passed: max < tol,
            })
        })
        .collect()
}

pub fn two_factor_rows(cfg: &RunConfig, seed: u64) -> RunResult<Vec<StabilityRow>> {
    let st = &cfg.stability;
    let model = FactorModel::sample(st.n, seed)?;
    let pairs = two_factor_pairs(&model, st.pairs, st.delta);
    if pairs.is_empty() {
        return Err(ConfigError(format!("delta: no factor pair can absorb delta = {}", st.delta)).into());
    }
    let reports: Vec<_> = pairs
        .par_iter()
        .enumerate()
        .map(|(k, &(i, j))| {
            let tf = TwoFactorConfig {
                samples: st.two_factor_samples,
                seed: derive_seed(seed, k as u64),
                tolerance: st.tolerance,
                ..TwoFactorConfig::default()
            };
            stability::two_factor_perturbation(&model, i, j, st.delta, &tf)
        })
        .collect::<cilab_core::Result<_>>()?;
    Ok(reports
        .into_iter()
        .map(|r| StabilityRow {
            experiment: "two_factor".into(),
            scheme: Scheme::Minority,
            n: st.n,
            seed,
            params: format!(
                "i={};j={};delta={};std_error={};side_ratio={}",
                r.i,
                r.j,
                fmt_g(r.delta),
                fmt_g(r.measured_std_error),
                fmt_g(r.side_ratio)
            ),
            predicted_rate: r.report.predicted_rate,
            measured_rate: r.report.measured_rate,
            relative_error: r.report.relative_error,
            passed: r.report.passed,
        })
        .collect())
}

/// Extensive perturbation rows per shape, plus one trend row per shape
/// comparing the residual at the largest and smallest `k`.
pub fn extensive_rows(cfg: &RunConfig, seed: u64) -> RunResult<Vec<StabilityRow>> {
    let st = &cfg.stability;
    let model = FactorModel::sample(st.extensive_n, seed)?;
    let shapes = [
        ("extensive_random", stability::random_sign_shape(&model, seed)?),
        ("extensive_beta", stability::beta_correlated_shape(&model)?),
    ];
    let ext = ExtensiveConfig {
        budget: st.budget,
        seed,
        tolerance: st.tolerance,
    };
    let mut rows = Vec::new();
    for (name, shape) in &shapes {
        let reports = stability::extensive_perturbation(&model, shape, &st.k_values, &ext)?;
        let spread = stability::spread_diagnostic(shape);
        for r in &reports {
            rows.push(StabilityRow {
                experiment: name.to_string(),
                scheme: Scheme::Minority,
                n: st.extensive_n,
                seed,
                params: format!(
                    "k={};samples={};residual_error={};noise_level={};max_share={}",
                    fmt_g(r.k),
                    r.samples,
                    fmt_g(r.residual_error),
                    fmt_g(r.noise_level),
                    fmt_g(spread)
                ),
                predicted_rate: r.report.predicted_rate,
                measured_rate: r.report.measured_rate,
                relative_error: r.report.relative_error,
                passed: r.report.passed,
            });
        }
        let (first, last) = (&reports[0], &reports[reports.len() - 1]);
        rows.push(StabilityRow {
            experiment: format!("{name}_trend"),
            scheme: Scheme::Minority,
            n: st.extensive_n,
            seed,
            params: format!("k_first={};k_last={}", fmt_g(first.k), fmt_g(last.k)),
            predicted_rate: first.residual_error,
            measured_rate: last.residual_error,
            relative_error: (last.residual_error - first.residual_error) / first.residual_error.max(1e-12),
            passed: last.residual_error <= first.residual_error,
        });
    }
    Ok(rows)
}

/// Correlated stationarity for minority rewards and the binary negative control.
pub fn correlated_rows(cfg: &RunConfig, seed: u64) -> RunResult<Vec<StabilityRow>> {
    let st = &cfg.stability;
    let q = Covariance::block_equicorrelated(st.correlated_n, st.block_size, st.correlation)?;
    let model = FactorModel::sample(st.correlated_n, seed)?.with_covariance(q)?;
    let mut rows = Vec::new();
    for (experiment, scheme, expected) in [
        ("correlated_stationarity", Scheme::Minority, "pass"),
        ("correlated_negative_control", Scheme::Binary, "fail"),
    ] {
        let spec = spec_for(cfg, scheme)?;
        let r = stability::correlated_stationarity_check(&model, &spec, st.correlated_samples, seed, st.z_tol)?;
        rows.push(StabilityRow {
            experiment: experiment.into(),
            scheme,
            n: st.correlated_n,
            seed,
            params: format!(
                "block_size={};c={};samples={};max_z={};expected={expected}",
                st.block_size,
                fmt_g(st.correlation),
                st.correlated_samples,
                fmt_g(r.max_z)
            ),
            predicted_rate: 0.0,
            measured_rate: r.max_abs,
            relative_error: r.max_abs / 1e-12,
            passed: r.passed,
        });
    }
    Ok(rows)
}

pub fn stability_grid(cfg: &RunConfig) -> RunResult<Report> {
    let path = cfg.out.join("stability.csv");
    let mut out = CsvOut::create(&path, &STABILITY_HEADER)?;
    let mut report = Report::default();
    for &seed in &cfg.seeds {
        let mut rows = stationarity_rows(cfg, seed)?;
        rows.extend(two_factor_rows(cfg, seed)?);
        rows.extend(extensive_rows(cfg, seed)?);
        rows.extend(correlated_rows(cfg, seed)?);
        for r in &rows {
            out.row(&r.fields())?;
            report.lines.push(format!(
                "{} {} seed={}: {} ({})",
                r.experiment,
                r.scheme,
                r.seed,
                if r.passed { "pass" } else { "fail" },
                r.params
            ));
        }
    }
    out.finish()?;
    report.files.push(path);
    Ok(report)
}

/// One row of oracle.csv.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleRow {
    pub check: String,
    pub scheme: String,
    pub n: usize,
    pub seed: u64,
    pub item: String,
    pub reference: f64,
    pub value: f64,
    pub std_error: Option<f64>,
    pub passed: bool,
}

impl OracleRow {
    fn fields(&self) -> Vec<String> {
        vec![
            self.check.clone(),
            self.scheme.clone(),
            self.n.to_string(),
            self.seed.to_string(),
            self.item.clone(),
            fmt_g(self.reference),
            fmt_g(self.value),
            self.std_error.map(fmt_g).unwrap_or_default(),
            fmt_bool(self.passed),
        ]
    }
}

/// Attention drawn uniformly from the simplex interior, reproducibly.
pub fn random_attention(n: usize, seed: u64) -> RunResult<Attention> {
    let mut rng = stream_rng(seed, streams::ATTENTION);
    let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
    Ok(Attention::normalized(&w)?)
}

/// Exact against sampled rewards on random small instances; every factor
/// must agree within `z_max` standard errors.
pub fn exact_vs_mc_rows(cfg: &RunConfig, base_seed: u64, z_max: f64) -> RunResult<Vec<OracleRow>> {
    let n = cfg.oracle.n;
    let jobs: Vec<(u64, Scheme)> = (0..cfg.oracle.instances as u64)
        .flat_map(|k| cfg.schemes.iter().map(move |&s| (base_seed + k, s)))
        .collect();
    let per_job: Vec<Vec<OracleRow>> = jobs
        .par_iter()
        .map(|&(seed, scheme)| {
            let model = FactorModel::sample(n, seed)?;
            let att = random_attention(n, seed)?;
            let spec = spec_for(cfg, scheme)?;
            let exact = expected_rewards_exact(&model, &att, &spec, cilab_core::model::DEFAULT_EXACT_LIMIT)?;
            let mc_seed = derive_seed(seed, scheme as u64);
            let est = mc::mc_expected_rewards(&model, &att, &spec, cfg.mc_samples, mc_seed)?;
            Ok(exact
                .values
                .iter()
                .zip(&est)
                .enumerate()
                .map(|(i, (&e, m))| OracleRow {
                    check: "rewards_exact_vs_mc".into(),
                    scheme: scheme.to_string(),
                    n,
                    seed,
                    item: i.to_string(),
                    reference: e,
                    value: m.value,
                    std_error: Some(m.std_error),
                    passed: m.z_score(e).abs() <= z_max,
                })
                .collect())
        })
        .collect::<RunResult<_>>()?;
    Ok(per_job.into_iter().flatten().collect())
}

/// Normal-approximation accuracy against sampled accuracy at large `n`.
pub fn accuracy_rows(cfg: &RunConfig, seed: u64) -> RunResult<Vec<OracleRow>> {
    let mut rows = Vec::new();
    for &n in &cfg.oracle.accuracy_n {
        let model = FactorModel::sample(n, seed)?;
        for (label, att) in [
            ("uniform", Attention::uniform(n)),
            ("random", random_attention(n, seed)?),
        ] {
            let approx = accuracy::collective_accuracy_approx(&model, &att)?;
            let est = mc::mc_accuracy(&model, &att, cfg.mc_samples, derive_seed(seed, n as u64))?;
            rows.push(OracleRow {
                check: "accuracy_approx_vs_mc".into(),
                scheme: String::new(),
                n,
                seed,
                item: label.into(),
                reference: approx,
                value: est.value,
                std_error: Some(est.std_error),
                passed: (approx - est.value).abs() <= (3.0 * est.std_error).max(0.01),
            });
        }
    }
    Ok(rows)
}

/// First seed at or after `from` whose `n`-factor model has a single best
/// factor under binary rewards, ahead of the rest by at least 0.1 at the
/// uniform allocation. Small models often tie, which splits the flow.
pub fn unique_leader_seed(n: usize, from: u64) -> RunResult<u64> {
    let spec = RewardSpec::new(Scheme::Binary);
    for seed in from..from + 10_000 {
        let model = FactorModel::sample(n, seed)?;
        let e = expected_rewards_exact(
            &model,
            &Attention::uniform(n),
            &spec,
            cilab_core::model::DEFAULT_EXACT_LIMIT,
        )?
        .values;
        if e[1..].iter().all(|v| e[0] - v >= 0.1) {
            return Ok(seed);
        }
    }
    Err(ConfigError(format!("no seed with a unique binary leader for n = {n}")).into())
}

/// Agent-based runs against their mean-field predictions.
pub fn finite_population_rows(cfg: &RunConfig, seed: u64) -> RunResult<Vec<OracleRow>> {
    let o = &cfg.oracle;
    let fp = |scheme_seed: u64| FinitePopulationConfig {
        population: o.population,
        rounds: o.rounds,
        imitation_rate: o.imitation_rate,
        seed: scheme_seed,
        record_every: 10,
        payoff_scale: None,
    };
    let binary_seed = unique_leader_seed(5, seed)?;
    let model = FactorModel::sample(5, binary_seed)?;
    let traj = mc::finite_population_run(
        &model,
        &spec_for(cfg, Scheme::Binary)?,
        &Attention::uniform(5),
        &fp(binary_seed),
    )?;
    let top = traj.final_state().as_slice()[0];
    let model50 = FactorModel::sample(50, seed)?;
    let traj50 = mc::finite_population_run(
        &model50,
        &spec_for(cfg, Scheme::Minority)?,
        &Attention::uniform(50),
        &fp(seed),
    )?;
    let avg = mc::time_average(&traj50, 0.75 * o.rounds as f64)?;
    let l1 = avg.l1_distance(model50.beta());
    Ok(vec![
        OracleRow {
            check: "finite_population_vertex".into(),
            scheme: Scheme::Binary.to_string(),
            n: 5,
            seed: binary_seed,
            item: "rho_top".into(),
            reference: 0.95,
            value: top,
            std_error: None,
            passed: top > 0.95,
        },
        OracleRow {
            check: "finite_population_proportional".into(),
            scheme: Scheme::Minority.to_string(),
            n: 50,
            seed,
            item: "l1_to_beta".into(),
            reference: 0.1,
            value: l1,
            std_error: None,
            passed: l1 < 0.1,
        },
    ])
}

pub fn oracle(cfg: &RunConfig) -> RunResult<Report> {
    let path = cfg.out.join("oracle.csv");
    let mut out = CsvOut::create(&path, &ORACLE_HEADER)?;
    let mut report = Report::default();
    for &seed in &cfg.seeds {
        let mut rows = exact_vs_mc_rows(cfg, seed, 4.0)?;
        rows.extend(accuracy_rows(cfg, seed)?);
        rows.extend(finite_population_rows(cfg, seed)?);
        let mut failed_by_check: Vec<(String, usize, usize)> = Vec::new();
        for r in &rows {
            out.row(&r.fields())?;
            match failed_by_check.iter_mut().find(|(c, _, _)| *c == r.check) {
                Some(entry) => {
                    entry.1 += 1;
                    entry.2 += usize::from(!r.passed);
                }
                None => failed_by_check.push((r.check.clone(), 1, usize::from(!r.passed))),
            }
        }
        for (check, total, failed) in failed_by_check {
            report.failed_checks += failed;
            report
                .lines
                .push(format!("{check} seed={seed}: {}/{total} passed", total - failed));
        }
    }
    out.finish()?;
    report.files.push(path);
    Ok(report)
}
