use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cilab::config::{Command, RunConfig, Settings};
use cilab::{run, RunError};

#[derive(Parser)]
#[command(name = "cilab", version = cilab::manifest::VERSION, about = "Collective prediction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand, Clone, Copy)]
enum Sub {
    /// Trajectories of accuracy and diversity over time
    Simulate,
    /// Equilibrium accuracy across the n grid
    Sweep,
    /// Equilibrium attention against factor weights
    Scatter,
    /// Perturbation and stationarity experiments
    Stability,
    /// Cross-validation of exact, approximate and sampled estimators
    Oracle,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Uniform,
    Concentrated,
    Both,
}

#[derive(clap::Args)]
struct Common {
    /// Reward scheme; repeat for several
    #[arg(long = "scheme", global = true)]
    schemes: Vec<String>,
    /// Single factor count
    #[arg(long, global = true, conflicts_with = "n_grid")]
    n: Option<String>,
    /// Factor grid: 'decades' or values and ranges like 3..9,10..90:10
    #[arg(long, global = true)]
    n_grid: Option<String>,
    /// Number of seeds
    #[arg(long, global = true, conflicts_with = "seed_list")]
    seeds: Option<u64>,
    /// Explicit seeds
    #[arg(long, global = true, value_delimiter = ',', num_args = 1..)]
    seed_list: Vec<u64>,
    #[arg(long, value_enum, global = true)]
    init: Option<InitArg>,
    /// Full-scale sizes (n up to 10000)
    #[arg(long, global = true)]
    full: bool,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Flat key=value file; flags take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (0 uses every core)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Any configuration key, as key=value; repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Sub {
    fn command(self) -> Command {
        match self {
            Sub::Simulate => Command::Simulate,
            Sub::Sweep => Command::Sweep,
            Sub::Scatter => Command::Scatter,
            Sub::Stability => Command::Stability,
            Sub::Oracle => Command::Oracle,
        }
    }
}

fn settings(common: &Common) -> Result<Settings, RunError> {
    let mut s = match &common.config {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).map_err(|e| cilab::ConfigError(format!("{}: {e}", path.display())))?;
            Settings::parse(&text).map_err(|e| cilab::ConfigError(format!("{}: {e}", path.display())))?
        }
        None => Settings::new(),
    };
    let mut flags = Settings::new();
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| cilab::ConfigError(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        flags.set(k.trim(), v.trim())?;
    }
    if !common.schemes.is_empty() {
        flags.set("scheme", &common.schemes.join(","))?;
    }
    if let Some(n) = &common.n {
        flags.set("n", n)?;
    }
    if let Some(g) = &common.n_grid {
        flags.set("n_grid", g)?;
        flags.set("n", "")?;
    }
    if let Some(k) = common.seeds {
        flags.set("seeds", &k.to_string())?;
        flags.set("seed_list", "")?;
    }
    if !common.seed_list.is_empty() {
        let list: Vec<String> = common.seed_list.iter().map(u64::to_string).collect();
        flags.set("seed_list", &list.join(","))?;
    }
    if let Some(init) = common.init {
        let v = match init {
            InitArg::Uniform => "uniform",
            InitArg::Concentrated => "concentrated",
            InitArg::Both => "both",
        };
        flags.set("init", v)?;
    }
    if common.full {
        flags.set("full", "true")?;
    }
    if let Some(out) = &common.out {
        flags.set("out", &out.display().to_string())?;
    }
    if let Some(t) = common.threads {
        flags.set("threads", &t.to_string())?;
    }
    s.overlay(&flags);
    Ok(s)
}

fn execute(cli: &Cli) -> Result<cilab::Report, RunError> {
    let cfg = RunConfig::resolve(cli.command.command(), &settings(&cli.common)?)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| cilab::ConfigError(format!("threads: {e}")))?;
    }
    run(&cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(report) => {
            for line in &report.lines {
                println!("{line}");
            }
            for f in &report.files {
                println!("wrote {}", f.display());
            }
            if cli.command.command() == Command::Oracle && report.failed_checks > 0 {
                eprintln!("cilab: {} oracle checks failed", report.failed_checks);
                return ExitCode::from(3);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("cilab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
