//! Flat `key = value` configuration shared by the config file and the CLI.
//!
//! Values are layered: built-in defaults, then the config file, then flags.
//! The fully resolved key set is what the manifest records.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use cilab_core::{InitKind, IntegratorConfig, QuadratureConfig, RewardConfig, RewardMode, Scheme};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Sweep,
    Scatter,
    Stability,
    Oracle,
}

impl Command {
    pub const ALL: [Command; 5] = [
        Command::Simulate,
        Command::Sweep,
        Command::Scatter,
        Command::Stability,
        Command::Oracle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Sweep => "sweep",
            Command::Scatter => "scatter",
            Command::Stability => "stability",
            Command::Oracle => "oracle",
        }
    }
}

impl FromStr for Command {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        Command::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .map_or_else(|| err(format!("unknown command '{s}'")), Ok)
    }
}

/// Every recognised key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("scheme", "comma-separated reward schemes"),
    ("n", "comma-separated factor counts; overrides n_grid"),
    ("n_grid", "'decades' or a list of values and ranges a..b:step"),
    ("max_n", "upper end of the decade grid"),
    ("seeds", "number of seeds, starting at seed_base"),
    ("seed_base", "first seed when seed_list is empty"),
    ("seed_list", "explicit comma-separated seeds"),
    ("init", "uniform, concentrated or both"),
    ("full", "full-scale sizes"),
    ("out", "output directory"),
    ("threads", "worker threads, 0 for all cores"),
    ("t_max", "integration horizon"),
    ("rel_tol", "relative step tolerance"),
    ("abs_tol", "absolute step tolerance"),
    ("equilibrium_tol", "largest field component at equilibrium"),
    ("simplex_floor", "smallest retained attention share"),
    ("normalize_rewards", "divide rewards by their attention-weighted mean"),
    ("records_per_decade", "recorded states per decade of time"),
    ("max_steps", "step budget per trajectory"),
    ("reward_mode", "auto, exact, approx or mc"),
    ("epsilon", "lower limit on the agreeing share z"),
    ("quad_abs_tol", "quadrature absolute tolerance"),
    ("max_panels", "quadrature panel cap"),
    ("mc_samples", "Monte Carlo worlds per estimate"),
    ("pairs", "two-factor perturbation pairs"),
    ("delta", "two-factor perturbation size"),
    ("stability_n", "factors in the two-factor experiment"),
    ("two_factor_samples", "worlds per two-factor field estimate"),
    ("tolerance", "relative tolerance of the perturbation checks"),
    ("extensive_n", "factors in the extensive experiment"),
    ("k_values", "decreasing perturbation scales"),
    ("budget", "extensive worlds are budget / k"),
    ("correlated_n", "factors in the correlated experiment"),
    ("block_size", "correlated block size"),
    ("correlation", "within-block correlation"),
    ("correlated_samples", "worlds for the correlated field"),
    ("z_tol", "standard errors allowed in the correlated check"),
    ("oracle_n", "factor count of the exact-vs-MC grid"),
    ("oracle_instances", "random instances in the exact-vs-MC grid"),
    ("accuracy_n", "factor counts of the accuracy cross-check"),
    ("population", "agents in the finite-population runs"),
    ("rounds", "rounds in the finite-population runs"),
    ("imitation_rate", "per-round imitation probability"),
];

fn command_default(command: Command, key: &str, full: bool) -> Option<&'static str> {
    use Command::*;
    let v = match (command, key) {
        (Simulate, "n") => {
            if full {
                "100,1000,10000"
            } else {
                "10,100,1000"
            }
        }
        (Scatter, "n") => {
            if full {
                "10000"
            } else {
                "1000"
            }
        }
        (Simulate | Stability | Oracle, "seeds") => "1",
        (Simulate, "init") => "both",
        _ => return None,
    };
    Some(v)
}

fn base_default(key: &str, full: bool) -> &'static str {
    match key {
        "scheme" => "binary,market,minority",
        "n" => "",
        "n_grid" => "decades",
        "max_n" => {
            if full {
                "10000"
            } else {
                "1000"
            }
        }
        "seeds" => "10",
        "seed_base" => "0",
        "seed_list" => "",
        "init" => "uniform",
        "full" => "false",
        "out" => "out",
        "threads" => "0",
        "t_max" => "1e6",
        "rel_tol" => "1e-6",
        "abs_tol" => "1e-9",
        "equilibrium_tol" => "1e-9",
        "simplex_floor" => "0",
        "normalize_rewards" => "true",
        "records_per_decade" => "50",
        "max_steps" => "1000000",
        "reward_mode" => "auto",
        "epsilon" => "1e-6",
        "quad_abs_tol" => "1e-10",
        "max_panels" => "4096",
        "mc_samples" => "1000000",
        "pairs" => "10",
        "delta" => "1e-3",
        "stability_n" => "1000",
        "two_factor_samples" => "400000",
        "tolerance" => "0.25",
        "extensive_n" => "2000",
        "k_values" => "0.4,0.2,0.1",
        "budget" => "2e6",
        "correlated_n" => "500",
        "block_size" => "10",
        "correlation" => "0.3",
        "correlated_samples" => "1000000",
        "z_tol" => "3",
        "oracle_n" => "8",
        "oracle_instances" => "20",
        "accuracy_n" => "100,1000",
        "population" => "100000",
        "rounds" => "20000",
        "imitation_rate" => "0.1",
        _ => unreachable!("unknown key {key}"),
    }
}

/// Raw key/value layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings(BTreeMap<String, String>);

impl Settings {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut out = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return err(format!("line {}: expected key=value, got '{line}'", lineno + 1));
            };
            out.set(key.trim(), value.trim())
                .map_err(|e| ConfigError(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(out)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return err(format!("unknown key '{key}'"));
        }
        self.0.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    /// Entries of `other` replace those of `self`.
    pub fn overlay(&mut self, other: &Settings) {
        for (k, v) in &other.0 {
            self.0.insert(k.clone(), v.clone());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError(format!("{key}: cannot parse '{v}'")))
}

/// Accepts plain and scientific notation for counts, e.g. `1e6`.
fn parse_count(key: &str, v: &str) -> Result<usize, ConfigError> {
    if let Ok(n) = v.parse::<usize>() {
        return Ok(n);
    }
    let x: f64 = parse_value(key, v)?;
    if x >= 0.0 && x.fract() == 0.0 && x <= usize::MAX as f64 {
        Ok(x as usize)
    } else {
        err(format!("{key}: '{v}' is not a non-negative integer"))
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => err(format!("{key}: expected true or false, got '{v}'")),
    }
}

fn parse_list<T, F>(key: &str, v: &str, f: F) -> Result<Vec<T>, ConfigError>
where
    F: Fn(&str, &str) -> Result<T, ConfigError>,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| f(key, s))
        .collect()
}

/// Values equally spaced within each decade, from 3 up to `max`:
/// 3..9, 10..90 by 10, 100..900 by 100 and so on, then `max` itself.
pub fn decade_grid(max: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (3..10).filter(|&v| v <= max).collect();
    let mut step = 10;
    while step <= max {
        out.extend((1..10).map(|k| k * step).filter(|&v| v <= max));
        step *= 10;
    }
    if out.last() != Some(&max) && max >= 3 {
        out.push(max);
    }
    out
}

/// Parses `a`, `a..b` and `a..b:step` items separated by commas.
pub fn parse_grid(key: &str, spec: &str) -> Result<Vec<usize>, ConfigError> {
    let mut out = Vec::new();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if let Some((lo, rest)) = item.split_once("..") {
            let (hi, step) = match rest.split_once(':') {
                Some((hi, step)) => (hi, parse_count(key, step)?),
                None => (rest, 1),
            };
            let (lo, hi) = (parse_count(key, lo)?, parse_count(key, hi)?);
            if step == 0 || hi < lo {
                return err(format!("{key}: bad range '{item}'"));
            }
            out.extend((lo..=hi).step_by(step));
        } else {
            out.push(parse_count(key, item)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilitySettings {
    pub pairs: usize,
    pub delta: f64,
    pub n: usize,
    pub two_factor_samples: usize,
    pub tolerance: f64,
    pub extensive_n: usize,
    pub k_values: Vec<f64>,
    pub budget: f64,
    pub correlated_n: usize,
    pub block_size: usize,
    pub correlation: f64,
    pub correlated_samples: usize,
    pub z_tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSettings {
    pub n: usize,
    pub instances: usize,
    pub accuracy_n: Vec<usize>,
    pub population: u64,
    pub rounds: usize,
    pub imitation_rate: f64,
}

/// Fully resolved, validated configuration of one command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub schemes: Vec<Scheme>,
    pub n_values: Vec<usize>,
    pub seeds: Vec<u64>,
    pub inits: Vec<InitKind>,
    pub full: bool,
    pub out: PathBuf,
    pub threads: usize,
    pub integrator: IntegratorConfig,
    pub rewards: RewardConfig,
    pub epsilon: f64,
    pub mc_samples: usize,
    pub stability: StabilitySettings,
    pub oracle: OracleSettings,
    /// Every key with its effective value.
    pub resolved: Settings,
}

impl RunConfig {
    pub fn resolve(command: Command, user: &Settings) -> Result<Self, ConfigError> {
        let full = match user.get("full") {
            Some(v) => parse_bool("full", v)?,
            None => false,
        };
        let mut s = Settings::new();
        for (key, _) in KEYS {
            let v = command_default(command, key, full).unwrap_or_else(|| base_default(key, full));
            s.0.insert(key.to_string(), v.to_string());
        }
        s.overlay(user);
        let get = |k: &str| s.get(k).expect("every key has a default");

        let schemes = parse_list("scheme", get("scheme"), |k, v| {
            v.parse::<Scheme>()
                .map_err(|_| ConfigError(format!("{k}: unknown scheme '{v}'")))
        })?;
        if schemes.is_empty() {
            return err("scheme: at least one scheme is required");
        }

        let n_values = if !get("n").is_empty() {
            parse_grid("n", get("n"))?
        } else if get("n_grid") == "decades" {
            decade_grid(parse_count("max_n", get("max_n"))?)
        } else {
            parse_grid("n_grid", get("n_grid"))?
        };
        if n_values.is_empty() || n_values.contains(&0) {
            return err("n: factor counts must be positive and non-empty");
        }

        let seeds: Vec<u64> = if !get("seed_list").is_empty() {
            parse_list("seed_list", get("seed_list"), parse_value)?
        } else {
            let base: u64 = parse_value("seed_base", get("seed_base"))?;
            let count = parse_count("seeds", get("seeds"))? as u64;
            (base..base + count).collect()
        };
        if seeds.is_empty() {
            return err("seeds: at least one seed is required");
        }

        let inits = match get("init") {
            "both" => vec![InitKind::Uniform, InitKind::Concentrated],
            v => vec![v
                .parse::<InitKind>()
                .map_err(|_| ConfigError(format!("init: expected uniform, concentrated or both, got '{v}'")))?],
        };

        let f = |k: &str| parse_value::<f64>(k, get(k));
        let c = |k: &str| parse_count(k, get(k));
        let integrator = IntegratorConfig {
            rel_tol: f("rel_tol")?,
            abs_tol: f("abs_tol")?,
            t_max: f("t_max")?,
            equilibrium_tol: f("equilibrium_tol")?,
            simplex_floor: f("simplex_floor")?,
            records_per_decade: c("records_per_decade")?,
            normalize_rewards: parse_bool("normalize_rewards", get("normalize_rewards"))?,
            max_steps: c("max_steps")?,
            ..IntegratorConfig::default()
        };
        integrator.validate().map_err(|e| ConfigError(e.to_string()))?;

        let epsilon = f("epsilon")?;
        if !(epsilon > 0.0 && epsilon < 0.5) {
            return err(format!("epsilon: must lie in (0, 0.5), got {epsilon}"));
        }
        let quadrature = QuadratureConfig {
            abs_tol: f("quad_abs_tol")?,
            max_panels: c("max_panels")?,
        };
        if !(quadrature.abs_tol > 0.0) || quadrature.max_panels == 0 {
            return err("quad_abs_tol and max_panels must be positive");
        }
        let mc_samples = c("mc_samples")?;
        if mc_samples < cilab_core::mc::MIN_SAMPLES {
            return err(format!("mc_samples: at least {} required", cilab_core::mc::MIN_SAMPLES));
        }
        let mode = match get("reward_mode") {
            "auto" => RewardMode::Auto,
            "exact" => RewardMode::Exact,
            "approx" => RewardMode::Approx,
            "mc" => RewardMode::MonteCarlo {
                samples: mc_samples,
                seed: seeds[0],
            },
            v => return err(format!("reward_mode: expected auto, exact, approx or mc, got '{v}'")),
        };
        let rewards = RewardConfig {
            mode,
            quadrature,
            ..RewardConfig::default()
        };

        let k_values = parse_list("k_values", get("k_values"), parse_value::<f64>)?;
        if k_values.is_empty() || k_values.windows(2).any(|w| w[1] >= w[0]) || k_values.iter().any(|k| !(*k > 0.0)) {
            return err("k_values: expected a strictly decreasing list of positive scales");
        }
        let stability = StabilitySettings {
            pairs: c("pairs")?,
            delta: f("delta")?,
            n: c("stability_n")?,
            two_factor_samples: c("two_factor_samples")?,
            tolerance: f("tolerance")?,
            extensive_n: c("extensive_n")?,
            k_values,
            budget: f("budget")?,
            correlated_n: c("correlated_n")?,
            block_size: c("block_size")?,
            correlation: f("correlation")?,
            correlated_samples: c("correlated_samples")?,
            z_tol: f("z_tol")?,
        };
        if stability.n < 2 || stability.extensive_n < 2 || stability.block_size == 0 {
            return err("stability_n and extensive_n need at least two factors, block_size at least one");
        }
        let oracle = OracleSettings {
            n: c("oracle_n")?,
            instances: c("oracle_instances")?,
            accuracy_n: parse_list("accuracy_n", get("accuracy_n"), parse_count)?,
            population: c("population")? as u64,
            rounds: c("rounds")?,
            imitation_rate: f("imitation_rate")?,
        };
        if !(0.0..=1.0).contains(&oracle.imitation_rate) {
            return err("imitation_rate: must lie in [0, 1]");
        }

        let cfg = Self {
            command,
            schemes,
            n_values,
            seeds,
            inits,
            full,
            out: PathBuf::from(get("out")),
            threads: c("threads")?,
            integrator,
            rewards,
            epsilon,
            mc_samples,
            stability,
            oracle,
            resolved: s.clone(),
        };
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decade_grid_layout() {
        let g = decade_grid(1000);
        assert_eq!(&g[..7], &[3, 4, 5, 6, 7, 8, 9]);
        assert_eq!(&g[7..16], &[10, 20, 30, 40, 50, 60, 70, 80, 90]);
        assert_eq!(*g.last().unwrap(), 1000);
        assert_eq!(g.len(), 7 + 9 + 9 + 1);
        assert_eq!(*decade_grid(10000).last().unwrap(), 10000);
        assert_eq!(decade_grid(10000).len(), 7 + 9 + 9 + 9 + 1);
    }

    #[test]
    fn explicit_grids() {
        assert_eq!(
            parse_grid("n", "3..5, 10..30:10, 1e3").unwrap(),
            vec![3, 4, 5, 10, 20, 30, 1000]
        );
        assert!(parse_grid("n", "5..3").is_err());
        assert!(parse_grid("n", "x").is_err());
    }

    #[test]
    fn file_parsing() {
        let s = Settings::parse("# comment\nscheme = minority\n\nn=5 # trailing\n").unwrap();
        assert_eq!(s.get("scheme"), Some("minority"));
        assert_eq!(s.get("n"), Some("5"));
        assert!(Settings::parse("bogus = 1").unwrap_err().0.contains("line 1"));
        assert!(Settings::parse("scheme minority").is_err());
    }

    #[test]
    fn defaults_per_command() {
        let sim = RunConfig::resolve(Command::Simulate, &Settings::new()).unwrap();
        assert_eq!(sim.n_values, vec![10, 100, 1000]);
        assert_eq!(sim.inits.len(), 2);
        assert_eq!(sim.schemes.len(), 3);
        assert_eq!(sim.seeds, vec![0]);
        let sweep = RunConfig::resolve(Command::Sweep, &Settings::new()).unwrap();
        assert_eq!(sweep.seeds.len(), 10);
        assert_eq!(*sweep.n_values.last().unwrap(), 1000);
        let mut full = Settings::new();
        full.set("full", "true").unwrap();
        assert_eq!(
            *RunConfig::resolve(Command::Sweep, &full)
                .unwrap()
                .n_values
                .last()
                .unwrap(),
            10000
        );
        assert_eq!(
            RunConfig::resolve(Command::Scatter, &full).unwrap().n_values,
            vec![10000]
        );
    }

    #[test]
    fn overrides_and_validation() {
        let mut s = Settings::new();
        s.set("seed_list", "7, 9").unwrap();
        s.set("t_max", "100").unwrap();
        let cfg = RunConfig::resolve(Command::Sweep, &s).unwrap();
        assert_eq!(cfg.seeds, vec![7, 9]);
        assert_eq!(cfg.integrator.t_max, 100.0);
        assert_eq!(cfg.resolved.get("t_max"), Some("100"));
        for (k, v) in [
            ("t_max", "-1"),
            ("scheme", "lottery"),
            ("init", "random"),
            ("k_values", "0.1,0.2"),
            ("epsilon", "0.7"),
        ] {
            let mut s = Settings::new();
            s.set(k, v).unwrap();
            assert!(RunConfig::resolve(Command::Sweep, &s).is_err(), "{k}={v}");
        }
    }
}
