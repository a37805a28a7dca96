//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. The full-scale check runs only when
//! `CILAB_FULL=1` is set.

use std::fs;
use std::path::Path;
use std::process::{Command as Process, ExitCode};
use std::time::Instant;

use cilab::analysis::{fraction_below, mean_std, regression};
use cilab::config::{Command, RunConfig, Settings};
use cilab::experiments::{self, RunResult};
use cilab_core::accuracy::{collective_accuracy_approx, collective_accuracy_exact};
use cilab_core::dynamics::integrate;
use cilab_core::rewards::expected_rewards_exact;
use cilab_core::{
    collective_accuracy, diversity, Attention, FactorModel, InitKind, IntegratorConfig, RewardConfig, RewardSpec,
    Scheme, Trajectory, DEFAULT_EXACT_LIMIT,
};

/// Horizon for market runs at n = 1000. Their shape is settled long before
/// the field drops below the equilibrium tolerance.
const MARKET_HORIZON: f64 = 2e3;
const SHAPE_N: usize = 1000;
const SHAPE_SEEDS: u64 = 10;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn config(command: Command, pairs: &[(&str, &str)]) -> RunConfig {
    let mut s = Settings::new();
    for (k, v) in pairs {
        s.set(k, v).expect("valid setting");
    }
    RunConfig::resolve(command, &s).expect("valid configuration")
}

fn run(model: &FactorModel, scheme: Scheme, init: InitKind, t_max: f64) -> Trajectory {
    let cfg = IntegratorConfig {
        t_max,
        ..IntegratorConfig::default()
    };
    let start = Attention::initial(model.n(), init).expect("valid init");
    integrate(model, &RewardSpec::new(scheme), &start, &cfg, &RewardConfig::default()).expect("integration succeeds")
}

fn optimality_identity() -> RunResult<Outcome> {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let n = 3 + (seed as usize % 14);
        let model = FactorModel::sample(n, seed)?;
        let c = collective_accuracy_exact(&model, &Attention::matching(&model), DEFAULT_EXACT_LIMIT)?;
        worst = worst.max((1.0 - c).abs());
    }
    let model = FactorModel::sample(1000, 0)?;
    let approx = collective_accuracy_approx(&model, &Attention::matching(&model))?;
    Ok(outcome(
        worst == 0.0 && approx >= 1.0 - 1e-9,
        format!("exact max |1 - C| = {worst:e} over 20 instances; approx at n=1000 = {approx:.12}"),
    ))
}

fn exact_vs_mc() -> RunResult<Outcome> {
    let cfg = config(
        Command::Oracle,
        &[("oracle_instances", "20"), ("oracle_n", "10"), ("mc_samples", "1e6")],
    );
    let rows = experiments::exact_vs_mc_rows(&cfg, 0, 4.0)?;
    let worst = rows
        .iter()
        .map(|r| ((r.value - r.reference) / r.std_error.unwrap_or(f64::NAN)).abs())
        .filter(|z| z.is_finite())
        .fold(0.0f64, f64::max);
    let failed = rows.iter().filter(|r| !r.passed).count();
    Ok(outcome(
        failed == 0,
        format!(
            "{} rewards at n=10, {failed} beyond 4 standard errors, max |z| = {worst:.2}",
            rows.len()
        ),
    ))
}

fn hand_fixture() -> RunResult<Outcome> {
    let model = FactorModel::new(vec![0.6, 0.25, 0.15])?;
    let att = Attention::uniform(3);
    let binary = expected_rewards_exact(&model, &att, &RewardSpec::new(Scheme::Binary), DEFAULT_EXACT_LIMIT)?.values;
    let market = expected_rewards_exact(&model, &att, &RewardSpec::new(Scheme::Market), DEFAULT_EXACT_LIMIT)?.values;
    let c = collective_accuracy_exact(&model, &att, DEFAULT_EXACT_LIMIT)?;
    let diff = |got: &[f64], want: &[f64]| got.iter().zip(want).fold(0.0f64, |m, (g, w)| m.max((g - w).abs()));
    let err = diff(&binary, &[1.0, 0.5, 0.5])
        .max(diff(&market, &[1.75, 0.625, 0.625]))
        .max((c - 0.75).abs());
    Ok(outcome(
        err <= 1e-12,
        format!("binary {binary:?}, market {market:?}, C = {c}, max error {err:e}"),
    ))
}

fn uniform_baseline() -> RunResult<Outcome> {
    let cfg = config(Command::Oracle, &[("accuracy_n", "1000"), ("mc_samples", "1e6")]);
    let row = experiments::accuracy_rows(&cfg, 0)?
        .into_iter()
        .find(|r| r.item == "uniform")
        .expect("uniform row");
    let gap = (row.reference - row.value).abs();
    let inside = |v: f64| (0.80..=0.86).contains(&v);
    Ok(outcome(
        gap <= 0.01 && inside(row.reference) && inside(row.value),
        format!(
            "approx {:.5}, sampled {:.5} ± {:.5}",
            row.reference,
            row.value,
            row.std_error.unwrap_or(0.0)
        ),
    ))
}

struct ShapeRuns {
    models: Vec<FactorModel>,
    binary: Vec<Trajectory>,
    market: Vec<Trajectory>,
    minority: Vec<Trajectory>,
    seconds: [f64; 3],
}

fn shape_runs() -> RunResult<ShapeRuns> {
    let models: Vec<FactorModel> = (0..SHAPE_SEEDS)
        .map(|s| FactorModel::sample(SHAPE_N, s))
        .collect::<Result<_, _>>()?;
    let all = |scheme, t_max| {
        let start = Instant::now();
        let runs: Vec<Trajectory> = models
            .iter()
            .map(|m| run(m, scheme, InitKind::Uniform, t_max))
            .collect();
        (runs, start.elapsed().as_secs_f64())
    };
    let (binary, b) = all(Scheme::Binary, 1e6);
    let (minority, n) = all(Scheme::Minority, 1e6);
    let (market, m) = all(Scheme::Market, MARKET_HORIZON);
    Ok(ShapeRuns {
        models,
        binary,
        market,
        minority,
        seconds: [b, m, n],
    })
}

fn equilibrium_shapes(r: &ShapeRuns) -> RunResult<Outcome> {
    let mut binary_top = f64::INFINITY;
    let (mut minority_l1, mut slope_lo, mut slope_hi) = (0.0f64, f64::INFINITY, f64::NEG_INFINITY);
    let mut market_small = f64::INFINITY;
    let mut ordered = 0;
    for (k, model) in r.models.iter().enumerate() {
        let top = Attention::new(model.beta().to_vec())?.argmax();
        binary_top = binary_top.min(r.binary[k].final_state().as_slice()[top]);

        let rho = r.minority[k].final_state();
        minority_l1 = minority_l1.max(rho.l1_distance(model.beta()));
        let (slope, _) = regression(model.beta(), rho.as_slice());
        slope_lo = slope_lo.min(slope);
        slope_hi = slope_hi.max(slope);

        let market = r.market[k].final_state();
        market_small = market_small.min(fraction_below(market.as_slice(), 1e-6));
        let acc = |t: &Trajectory| collective_accuracy(model, t.final_state());
        let (b, m, n) = (acc(&r.binary[k])?, acc(&r.market[k])?, acc(&r.minority[k])?);
        ordered += usize::from(b < m && m < n);
    }
    let seeds = r.models.len();
    let passed = binary_top > 0.99
        && minority_l1 < 0.05
        && (0.9..=1.1).contains(&slope_lo)
        && (0.9..=1.1).contains(&slope_hi)
        && market_small >= 0.5
        && ordered == seeds;
    Ok(outcome(
        passed,
        format!(
            "binary min rho_top {binary_top:.5}; minority max L1 {minority_l1:.4}, slopes [{slope_lo:.4}, {slope_hi:.4}]; \
             market min share below 1e-6 {market_small:.3} at t={MARKET_HORIZON}; accuracy ordered in {ordered}/{seeds} seeds; \
             runtime binary {:.0}s, market {:.0}s, minority {:.0}s",
            r.seconds[0], r.seconds[1], r.seconds[2]
        ),
    ))
}

fn diversity_ordering(r: &ShapeRuns) -> Outcome {
    let mean = |runs: &[Trajectory]| mean_std(&runs.iter().map(|t| diversity(t.final_state())).collect::<Vec<_>>()).0;
    let (b, m, n) = (mean(&r.binary), mean(&r.market), mean(&r.minority));
    outcome(
        n > m && m > b,
        format!("mean diversity minority {n:.4} > market {m:.4} > binary {b:.4}"),
    )
}

fn full_scale() -> RunResult<Option<Outcome>> {
    if std::env::var("CILAB_FULL").map(|v| v == "1").unwrap_or(false) {
        let model = FactorModel::sample(10_000, 0)?;
        let market = run(&model, Scheme::Market, InitKind::Uniform, MARKET_HORIZON);
        let minority = run(&model, Scheme::Minority, InitKind::Uniform, 1e6);
        let m = collective_accuracy(&model, market.final_state())?;
        let n = collective_accuracy(&model, minority.final_state())?;
        return Ok(Some(outcome(
            (0.60..=0.70).contains(&m) && n >= 0.95,
            format!("n=10000: market {m:.4}, minority {n:.4}"),
        )));
    }
    Ok(None)
}

fn init_independence(r: &ShapeRuns) -> Outcome {
    let concentrated = run(&r.models[0], Scheme::Minority, InitKind::Concentrated, 1e6);
    let l1 = concentrated
        .final_state()
        .l1_distance(r.minority[0].final_state().as_slice());
    outcome(
        l1 < 0.05,
        format!("minority n=1000 uniform vs concentrated L1 = {l1:.2e}"),
    )
}

fn stability_outcome(rows: &[experiments::StabilityRow], label: &str) -> Outcome {
    let failed = rows.iter().filter(|r| !r.passed).count();
    let worst = rows
        .iter()
        .filter(|r| !r.experiment.ends_with("_trend"))
        .map(|r| r.relative_error.abs())
        .fold(0.0f64, f64::max);
    outcome(
        failed == 0 && !rows.is_empty(),
        format!(
            "{} {label} rows, {failed} failed, max relative error {worst:.3}",
            rows.len()
        ),
    )
}

fn two_factor() -> RunResult<Outcome> {
    let cfg = config(Command::Stability, &[]);
    let rows = experiments::two_factor_rows(&cfg, 0)?;
    let signs = rows
        .iter()
        .all(|r| r.measured_rate.signum() == r.predicted_rate.signum());
    let base = stability_outcome(&rows, "pair");
    Ok(outcome(
        base.passed && signs,
        format!("{}, signs agree: {signs}", base.detail),
    ))
}

fn extensive() -> RunResult<Outcome> {
    let cfg = config(Command::Stability, &[]);
    let rows = experiments::extensive_rows(&cfg, 0)?;
    Ok(stability_outcome(&rows, "shape/k and trend"))
}

fn correlated() -> RunResult<Outcome> {
    let cfg = config(Command::Stability, &[]);
    let rows = experiments::correlated_rows(&cfg, 0)?;
    let control = rows.iter().find(|r| r.experiment == "correlated_negative_control");
    let main: Vec<_> = rows
        .iter()
        .filter(|r| r.experiment == "correlated_stationarity")
        .cloned()
        .collect();
    let o = stability_outcome(&main, "minority");
    let control = control.map(|c| {
        if c.passed {
            "passes (unexpected)"
        } else {
            "fails as expected"
        }
    });
    Ok(outcome(
        o.passed,
        format!("{}; binary control {}", o.detail, control.unwrap_or("missing")),
    ))
}

fn finite_population() -> RunResult<Outcome> {
    let cfg = config(Command::Oracle, &[]);
    let rows = experiments::finite_population_rows(&cfg, 0)?;
    let detail = rows
        .iter()
        .map(|r| format!("{} n={} {} = {:.4}", r.scheme, r.n, r.item, r.value))
        .collect::<Vec<_>>()
        .join("; ");
    Ok(outcome(rows.iter().all(|r| r.passed), format!("N=1e5: {detail}")))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().expect("temporary directory");
    let runs = ["a", "b"].map(|name| {
        let out = dir.path().join(name);
        let status = Process::new(env!("CARGO_BIN_EXE_cilab"))
            .args(["sweep", "--n", "3..6,40", "--seeds", "2", "--set", "t_max=1e4", "--out"])
            .arg(&out)
            .output()
            .expect("binary runs");
        (status.status.success(), out)
    });
    let read = |p: &Path| fs::read(p.join("sweep.csv")).unwrap_or_default();
    let same = runs.iter().all(|r| r.0) && read(&runs[0].1) == read(&runs[1].1) && !read(&runs[0].1).is_empty();
    outcome(
        same,
        "two sweep runs over n = 3..6,40 with seeds 0,1 compared byte for byte".into(),
    )
}

fn report<E: std::fmt::Display>(name: &str, started: Instant, result: Result<Outcome, E>, failures: &mut usize) {
    let secs = started.elapsed().as_secs_f64();
    match result {
        Ok(o) => {
            *failures += usize::from(!o.passed);
            println!(
                "{} {name}: {} [{secs:.1}s]",
                if o.passed { "PASS" } else { "FAIL" },
                o.detail
            );
        }
        Err(e) => {
            *failures += 1;
            println!("FAIL {name}: error {e} [{secs:.1}s]");
        }
    }
}

fn main() -> ExitCode {
    let mut failures = 0;
    let t = Instant::now();
    report("optimality identity", t, optimality_identity(), &mut failures);
    let t = Instant::now();
    report("exact vs sampled rewards", t, exact_vs_mc(), &mut failures);
    let t = Instant::now();
    report("hand-enumerated fixture", t, hand_fixture(), &mut failures);
    let t = Instant::now();
    report("uniform-baseline accuracy", t, uniform_baseline(), &mut failures);

    let t = Instant::now();
    match shape_runs() {
        Ok(runs) => {
            report("equilibrium shapes n=1000", t, equilibrium_shapes(&runs), &mut failures);
            report(
                "diversity ordering n=1000",
                t,
                Ok::<_, String>(diversity_ordering(&runs)),
                &mut failures,
            );
            let t = Instant::now();
            report(
                "init independence",
                t,
                Ok::<_, String>(init_independence(&runs)),
                &mut failures,
            );
        }
        Err(e) => {
            for name in [
                "equilibrium shapes n=1000",
                "diversity ordering n=1000",
                "init independence",
            ] {
                report::<String>(name, t, Err(e.to_string()), &mut failures);
            }
        }
    }
    let t = Instant::now();
    match full_scale() {
        Ok(Some(o)) => report("full-scale spot check", t, Ok::<_, String>(o), &mut failures),
        Ok(None) => println!("SKIP full-scale spot check: set CILAB_FULL=1 to run"),
        Err(e) => report("full-scale spot check", t, Err(e), &mut failures),
    }

    let t = Instant::now();
    report("two-factor stability", t, two_factor(), &mut failures);
    let t = Instant::now();
    report("extensive perturbation", t, extensive(), &mut failures);
    let t = Instant::now();
    report("correlated stationarity", t, correlated(), &mut failures);
    let t = Instant::now();
    report("finite population", t, finite_population(), &mut failures);
    let t = Instant::now();
    report("determinism", t, Ok::<_, String>(determinism()), &mut failures);

    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
