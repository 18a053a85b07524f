use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::LevelFilter;

use eloevo::commands::{
    cmd_replay, cmd_report, cmd_run, noiselab_exact, noiselab_mc, noiselab_sweep, PluginSpec,
    PoolSource, RunConfig,
};
use eloevo::noiselab::{NoiseLabConfig, SingleElimRule, Split};
use eloevo::{Error, KFactor, Mode};

#[derive(Parser)]
#[command(
    name = "eloevo",
    version,
    about = "Evolve agents under a fixed evaluation budget with Elo selection"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Run an evolution and write a run directory.
    Run(RunArgs),
    /// Selection-noise statistics.
    Noiselab {
        #[command(subcommand)]
        command: NoiseCommand,
    },
    /// Verify a run directory by recomputing it from the event log.
    Replay { dir: PathBuf },
    /// Summarize a run, or print one iteration's comparative report.
    Report {
        dir: PathBuf,
        #[arg(long)]
        iteration: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Default,
    Koth,
}

#[derive(Args)]
struct RunArgs {
    /// Output run directory (must not exist or be empty).
    #[arg(long)]
    out: PathBuf,
    /// JSON run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON array of {"example_id", "payload_ref"}.
    #[arg(long, conflicts_with = "pool_size")]
    pool: Option<PathBuf>,
    /// Generate this many placeholder examples instead of reading a pool.
    #[arg(long)]
    pool_size: Option<usize>,
    /// "builtin:synthetic" or a command line.
    #[arg(long)]
    evaluator: Option<String>,
    #[arg(long)]
    mutator: Option<String>,
    #[arg(long)]
    seed_artifact: Option<PathBuf>,
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    sample_size: Option<u32>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(0..=1))]
    deep_focus: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k_factor: Option<f64>,
    #[arg(long)]
    clone_penalty: Option<f64>,
    #[arg(long)]
    parallelism: Option<usize>,
    /// Accuracy of the generated synthetic seed agent.
    #[arg(long)]
    seed_accuracy: Option<f64>,
    #[arg(long)]
    clone_rate: Option<f64>,
    #[arg(long)]
    strategy: Option<PathBuf>,
    #[arg(long)]
    objective: Option<PathBuf>,
    #[arg(long)]
    background: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct LabArgs {
    /// Comma-separated true accuracies; the highest is the best agent.
    #[arg(long, value_delimiter = ',', default_values_t = [0.70, 0.69, 0.68])]
    acc: Vec<f64>,
    #[arg(long, default_value_t = 50_000)]
    trials: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 32.0)]
    k_factor: f64,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// last-round or champion-defense.
    #[arg(long, default_value = "last-round")]
    single_elim: SingleElimRule,
}

impl LabArgs {
    fn config(&self, rounds: u32, n: u32) -> NoiseLabConfig {
        NoiseLabConfig {
            accuracies: self.acc.clone(),
            n,
            rounds,
            k_factor: self.k_factor,
            trials: self.trials,
            rng_seed: self.seed,
            workers: self.workers,
            single_elim: self.single_elim,
        }
    }
}

#[derive(Subcommand)]
enum NoiseCommand {
    /// Exact tie and top-1 probabilities.
    Exact {
        #[arg(long, default_value_t = 20)]
        n: u32,
        #[arg(long, value_delimiter = ',', default_values_t = [0.70, 0.69, 0.68])]
        acc: Vec<f64>,
    },
    /// Monte Carlo over several ROUNDSxN splits of one budget.
    Sweep {
        #[arg(long)]
        budget: u64,
        #[arg(long, value_delimiter = ',', required = true)]
        splits: Vec<Split>,
        #[arg(long)]
        csv: bool,
        #[command(flatten)]
        lab: LabArgs,
    },
    /// Monte Carlo for one split.
    Mc {
        #[arg(long)]
        rounds: u32,
        #[arg(long)]
        n: u32,
        #[command(flatten)]
        lab: LabArgs,
    },
}

fn build_config(args: &RunArgs) -> Result<(RunConfig, PoolSource), Error> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let plugin = |s: &str| s.parse::<PluginSpec>().map_err(Error::Config);
    if let Some(s) = &args.evaluator {
        cfg.evaluator = plugin(s)?;
    }
    if let Some(s) = &args.mutator {
        cfg.mutator = plugin(s)?;
    }
    let e = &mut cfg.engine;
    if let Some(v) = args.budget {
        e.budget = v;
    }
    if let Some(v) = args.sample_size {
        e.sample_size = v;
    }
    if let Some(v) = args.mode {
        e.mode = match v {
            ModeArg::Default => Mode::Default,
            ModeArg::Koth => Mode::Koth,
        };
    }
    if let Some(v) = args.deep_focus {
        e.deep_focus_rounds = v;
    }
    if let Some(v) = args.seed {
        e.rng_seed = v;
    }
    if let Some(v) = args.k_factor {
        e.k_factor = KFactor::new(v)?;
    }
    if let Some(v) = args.clone_penalty {
        e.clone_penalty = v;
    }
    if let Some(v) = args.parallelism {
        e.parallelism = v;
    }
    if let Some(v) = args.seed_accuracy {
        cfg.seed_accuracy = v;
    }
    if let Some(v) = args.clone_rate {
        cfg.clone_rate = v;
    }
    for (slot, value) in [
        (&mut cfg.seed_artifact, &args.seed_artifact),
        (&mut cfg.strategy, &args.strategy),
        (&mut cfg.objective, &args.objective),
        (&mut cfg.background, &args.background),
    ] {
        if value.is_some() {
            *slot = value.clone();
        }
    }
    let pool = match (&args.pool, args.pool_size) {
        (Some(path), _) => PoolSource::File(path.clone()),
        (None, Some(n)) => PoolSource::Generated(n),
        (None, None) if cfg.evaluator == PluginSpec::Synthetic => PoolSource::Generated(200),
        (None, None) => {
            return Err(Error::Config(
                "--pool is required with a command evaluator".into(),
            ))
        }
    };
    Ok((cfg, pool))
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Run(args) => {
            let (cfg, pool) = build_config(&args)?;
            let summary = cmd_run(&cfg, &pool, &args.out)?;
            print!("{}", summary.render());
        }
        Command::Noiselab { command } => match command {
            NoiseCommand::Exact { n, acc } => print!("{}", noiselab_exact(n, &acc)?),
            NoiseCommand::Sweep {
                budget,
                splits,
                csv,
                lab,
            } => {
                print!(
                    "{}",
                    noiselab_sweep(budget, &splits, &lab.config(1, 1), csv)?
                )
            }
            NoiseCommand::Mc { rounds, n, lab } => {
                print!("{}", noiselab_mc(&lab.config(rounds, n))?)
            }
        },
        Command::Replay { dir } => {
            let report = cmd_replay(&dir)?;
            println!("{report}");
            if !report.is_ok() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Report { dir, iteration } => print!("{}", cmd_report(&dir, iteration)?),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => LevelFilter::Warn,
        1 => LevelFilter::Info,
        _ => LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) | Error::InvalidKFactor(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
