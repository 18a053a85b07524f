//! Entry points behind the command-line subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::engine::{
    standings, AgentRecord, Engine, EngineConfig, IterationRecord, SessionDocs, Standing,
};
use crate::error::{Error, Result};
use crate::evaluation::{validate_pool, BudgetLedger, Evaluator, ExampleRef};
use crate::noiselab::{
    budget_sweep, elo_ranking_accuracy, exact_tie_probability, exact_top1_probability,
    exact_top_tie_probability, single_elim_accuracy, sweep_csv, sweep_table, NoiseLabConfig, Split,
    TieMode,
};
use crate::plugin::{
    Mutator, SubprocessEvaluator, SubprocessMutator, DEFAULT_CREATE_TIMEOUT,
    DEFAULT_EVALUATE_TIMEOUT, DEFAULT_REFINE_TIMEOUT,
};
use crate::replay::{replay, ReplayReport};
use crate::store::{self, RunStore};
use crate::synthetic::{
    SyntheticAgentSpec, SyntheticEvaluator, SyntheticMutator, SyntheticMutatorConfig,
};

pub const BUILTIN_SYNTHETIC: &str = "builtin:synthetic";

pub const DEFAULT_STRATEGY: &str = include_str!("../assets/strategy.md");

/// Evaluator or mutator: the built-in synthetic double or an external command.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "PluginValue", into = "PluginValue")]
pub enum PluginSpec {
    #[default]
    Synthetic,
    Command(Vec<String>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum PluginValue {
    Text(String),
    Argv(Vec<String>),
}

impl TryFrom<PluginValue> for PluginSpec {
    type Error = String;

    fn try_from(value: PluginValue) -> std::result::Result<Self, String> {
        match value {
            PluginValue::Text(s) => s.parse(),
            PluginValue::Argv(argv) if argv.is_empty() => Err("empty plugin command".into()),
            PluginValue::Argv(argv) => Ok(PluginSpec::Command(argv)),
        }
    }
}

impl From<PluginSpec> for PluginValue {
    fn from(spec: PluginSpec) -> Self {
        match spec {
            PluginSpec::Synthetic => PluginValue::Text(BUILTIN_SYNTHETIC.into()),
            PluginSpec::Command(argv) => PluginValue::Argv(argv),
        }
    }
}

impl std::str::FromStr for PluginSpec {
    type Err = String;

    /// `builtin:synthetic`, or a command line split on whitespace.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if s == BUILTIN_SYNTHETIC {
            return Ok(PluginSpec::Synthetic);
        }
        if let Some(other) = s.strip_prefix("builtin:") {
            return Err(format!("unknown builtin plugin {other:?}"));
        }
        let argv: Vec<String> = s.split_whitespace().map(str::to_string).collect();
        if argv.is_empty() {
            return Err("empty plugin command".into());
        }
        Ok(PluginSpec::Command(argv))
    }
}

/// The run configuration document (`config.json` in the run directory).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub engine: EngineConfig,
    pub evaluator: PluginSpec,
    pub mutator: PluginSpec,
    pub evaluate_timeout_secs: u64,
    pub create_timeout_secs: u64,
    pub refine_timeout_secs: u64,
    /// Directory copied as the first agent. Required for command evaluators.
    pub seed_artifact: Option<PathBuf>,
    /// Accuracy of the generated seed agent when no seed artifact is given.
    pub seed_accuracy: f64,
    /// Exact-copy rate of the synthetic mutator.
    pub clone_rate: f64,
    pub strategy: Option<PathBuf>,
    pub objective: Option<PathBuf>,
    pub background: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: store::SCHEMA_VERSION,
            engine: EngineConfig::default(),
            evaluator: PluginSpec::Synthetic,
            mutator: PluginSpec::Synthetic,
            evaluate_timeout_secs: DEFAULT_EVALUATE_TIMEOUT.as_secs(),
            create_timeout_secs: DEFAULT_CREATE_TIMEOUT.as_secs(),
            refine_timeout_secs: DEFAULT_REFINE_TIMEOUT.as_secs(),
            seed_artifact: None,
            seed_accuracy: 0.5,
            clone_rate: SyntheticMutatorConfig::default().clone_rate,
            strategy: None,
            objective: None,
            background: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        if cfg.schema_version != store::SCHEMA_VERSION {
            return Err(Error::config(format!(
                "{}: schema_version {} is not supported (expected {})",
                path.display(),
                cfg.schema_version,
                store::SCHEMA_VERSION
            )));
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.engine.validate()?;
        if !(0.0..=1.0).contains(&self.seed_accuracy) {
            return Err(Error::config("seed accuracy must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.clone_rate) {
            return Err(Error::config("clone rate must lie in [0, 1]"));
        }
        if self.seed_artifact.is_none() && self.evaluator != PluginSpec::Synthetic {
            return Err(Error::config(
                "a seed artifact is required with a command evaluator",
            ));
        }
        if let Some(dir) = &self.seed_artifact {
            if !dir.is_dir() {
                return Err(Error::config(format!(
                    "seed artifact {} is not a directory",
                    dir.display()
                )));
            }
        }
        Ok(())
    }
}

/// Where the example pool comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum PoolSource {
    File(PathBuf),
    /// `count` generated examples `ex_0000`, `ex_0001`, ...
    Generated(usize),
}

pub fn load_pool(source: &PoolSource) -> Result<Vec<ExampleRef>> {
    let pool = match source {
        PoolSource::File(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config(format!("cannot read pool {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::config(format!("{}: {e}", path.display())))?
        }
        PoolSource::Generated(count) => generated_pool(*count),
    };
    validate_pool(&pool)?;
    Ok(pool)
}

pub fn generated_pool(count: usize) -> Vec<ExampleRef> {
    (0..count)
        .map(|i| ExampleRef::new(format!("ex_{i:04}"), format!("synthetic/{i}")))
        .collect()
}

fn resolve_command(argv: &[String], role: &str) -> Result<()> {
    let program = Path::new(&argv[0]);
    let found = if program.components().count() > 1 {
        program.is_file()
    } else {
        std::env::var_os("PATH")
            .map(|paths| std::env::split_paths(&paths).any(|dir| dir.join(program).is_file()))
            .unwrap_or(false)
    };
    if found {
        Ok(())
    } else {
        Err(Error::Plugin(format!(
            "{role} command {} not found",
            argv[0]
        )))
    }
}

fn read_doc(path: &Option<PathBuf>) -> Result<Option<String>> {
    path.as_ref()
        .map(|p| {
            std::fs::read_to_string(p)
                .map_err(|e| Error::config(format!("cannot read {}: {e}", p.display())))
        })
        .transpose()
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub root: PathBuf,
    pub best: AgentRecord,
    pub standings: Vec<Standing>,
    pub iterations: u64,
    pub spent: u64,
    pub budget: u64,
}

impl RunSummary {
    pub fn best_path(&self) -> PathBuf {
        self.root.join(&self.best.artifact_dir)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>9}  note", "agent", "elo");
        for s in &self.standings {
            let _ = writeln!(
                out,
                "{:<12} {:>9}  {}",
                s.agent_id,
                s.rating.to_string(),
                if s.clone { "clone" } else { "" }
            );
        }
        let _ = writeln!(
            out,
            "{} iterations, {}/{} evaluations used",
            self.iterations, self.spent, self.budget
        );
        let _ = writeln!(
            out,
            "best agent: {} ({})",
            self.best.agent_id,
            self.best_path().display()
        );
        out
    }
}

/// Validates everything, then creates the run directory and runs the engine.
/// Nothing is written to `out` when validation fails.
pub fn cmd_run(cfg: &RunConfig, pool: &PoolSource, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let examples = load_pool(pool)?;
    for (spec, role) in [(&cfg.evaluator, "evaluator"), (&cfg.mutator, "mutator")] {
        if let PluginSpec::Command(argv) = spec {
            resolve_command(argv, role)?;
        }
    }
    let docs = SessionDocs {
        strategy: match read_doc(&cfg.strategy)? {
            Some(text) => text,
            None => DEFAULT_STRATEGY.to_string(),
        },
        objective: read_doc(&cfg.objective)?,
        background: read_doc(&cfg.background)?,
    };
    let evaluator: Box<dyn Evaluator> = match &cfg.evaluator {
        PluginSpec::Synthetic => Box::new(SyntheticEvaluator::new(cfg.engine.rng_seed)),
        PluginSpec::Command(argv) => Box::new(SubprocessEvaluator::new(
            argv.clone(),
            Duration::from_secs(cfg.evaluate_timeout_secs),
        )),
    };
    let mutator: Box<dyn Mutator> = match &cfg.mutator {
        PluginSpec::Synthetic => Box::new(SyntheticMutator::new(SyntheticMutatorConfig {
            clone_rate: cfg.clone_rate,
            ..Default::default()
        })),
        PluginSpec::Command(argv) => Box::new(SubprocessMutator::new(
            argv.clone(),
            Duration::from_secs(cfg.create_timeout_secs),
            Duration::from_secs(cfg.refine_timeout_secs),
        )),
    };

    let store = RunStore::create(out)?;
    store.write_json(store::CONFIG_FILE, cfg)?;
    store.write_json(store::POOL_FILE, &examples)?;
    let root = store.root().to_path_buf();
    let engine = Engine::new(
        cfg.engine.clone(),
        examples,
        store,
        evaluator,
        mutator,
        docs,
    )?;
    let outcome = match &cfg.seed_artifact {
        Some(dir) => engine.run(dir)?,
        None => {
            let spec_accuracy = cfg.seed_accuracy;
            engine.run_seeded(&|target| {
                SyntheticAgentSpec {
                    true_accuracy: spec_accuracy,
                    behavior_id: "agent_0000".into(),
                }
                .save(target)
                .map_err(Error::config)
            })?
        }
    };
    Ok(RunSummary {
        root,
        standings: standings(&outcome.agents),
        best: outcome.best,
        iterations: outcome.iterations.len() as u64,
        spent: outcome.spent,
        budget: outcome.budget,
    })
}

pub fn cmd_replay(root: &Path) -> Result<ReplayReport> {
    replay(root)
}

/// Text report of a finished run, or the comparative report of one iteration.
pub fn cmd_report(root: &Path, iteration: Option<u64>) -> Result<String> {
    if let Some(index) = iteration {
        let rel = store::iteration_dir(index).join("report.txt");
        return std::fs::read_to_string(root.join(&rel)).map_err(|_| {
            Error::integrity(format!(
                "no report for iteration {index} under {}",
                root.display()
            ))
        });
    }
    let ledger: BudgetLedger = store::read_json(root, store::LEDGER_FILE)?;
    let mut records = Vec::new();
    let mut index = 0;
    while root.join(store::iteration_dir(index)).is_dir() {
        let record: IterationRecord =
            store::read_json(root, store::iteration_dir(index).join("iteration.json"))?;
        records.push(record);
        index += 1;
    }
    let mut agents = Vec::new();
    let agents_dir = root.join("agents");
    let mut ids: Vec<String> = std::fs::read_dir(&agents_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    ids.sort();
    for id in ids {
        let agent: AgentRecord = store::read_json(root, store::agent_dir(&id).join("agent.json"))?;
        agents.push(agent);
    }

    let mut out = String::new();
    let _ = writeln!(out, "# Run {}", root.display());
    let _ = writeln!(out);
    let _ = writeln!(out, "## Iterations");
    for r in &records {
        let means: Vec<String> = r
            .competitor_ids
            .iter()
            .map(|id| format!("{id}={:.3}", r.mean_scores[id]))
            .collect();
        let mut line = format!(
            "{:>4}  {}  winner {}",
            r.index,
            means.join(" "),
            r.winner_id
        );
        if let Some(c) = &r.clone_flagged {
            let _ = write!(line, "  clone {c}");
        }
        let _ = writeln!(out, "{line}");
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "## Standings");
    for s in standings(&agents) {
        let _ = writeln!(
            out,
            "{:<12} {:>9}{}",
            s.agent_id,
            s.rating.to_string(),
            if s.clone { "  clone" } else { "" }
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "## Budget");
    let _ = writeln!(out, "{}/{} evaluations used", ledger.spent, ledger.total);
    for d in &ledger.per_phase {
        let _ = writeln!(
            out,
            "{:>4}  {:<10} {}",
            d.iteration,
            format!("{:?}", d.phase).to_lowercase(),
            d.count
        );
    }
    Ok(out)
}

/// Exact tie and top-1 probabilities for one depth.
pub fn noiselab_exact(n: u32, accuracies: &[f64]) -> Result<String> {
    if accuracies.len() < 2 {
        return Err(Error::config("need at least two accuracies"));
    }
    let mut out = String::new();
    let _ = writeln!(
        out,
        "pairwise tie ({}, {}): {:.4}",
        accuracies[0],
        accuracies[1],
        exact_tie_probability(n, accuracies[0], accuracies[1])?
    );
    let _ = writeln!(
        out,
        "top-two tie: {:.4}",
        exact_top_tie_probability(n, accuracies)?
    );
    for mode in [TieMode::Strict, TieMode::RandomShare, TieMode::Inclusive] {
        let _ = writeln!(
            out,
            "top1 ({}): {:.4}",
            mode.as_str(),
            exact_top1_probability(n, accuracies, mode)?
        );
    }
    Ok(out)
}

/// Monte Carlo estimates for a single split.
pub fn noiselab_mc(cfg: &NoiseLabConfig) -> Result<String> {
    let elo = elo_ranking_accuracy(cfg)?;
    let single = single_elim_accuracy(cfg)?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} rounds x {} tasks, {} trials, seed {}",
        cfg.rounds, cfg.n, cfg.trials, cfg.rng_seed
    );
    let _ = writeln!(
        out,
        "elo:          {:.2}% (se {:.2}%)",
        100.0 * elo.p,
        100.0 * elo.se
    );
    let _ = writeln!(
        out,
        "single elim:  {:.2}% (se {:.2}%) [{}]",
        100.0 * single.p,
        100.0 * single.se,
        cfg.single_elim.describe()
    );
    Ok(out)
}

pub fn noiselab_sweep(
    budget: u64,
    splits: &[Split],
    base: &NoiseLabConfig,
    csv: bool,
) -> Result<String> {
    let rows = budget_sweep(budget, splits, base)?;
    Ok(if csv {
        sweep_csv(&rows)
    } else {
        sweep_table(&rows, base)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plugin_spec_parsing() {
        assert_eq!(
            "builtin:synthetic".parse::<PluginSpec>().unwrap(),
            PluginSpec::Synthetic
        );
        assert_eq!(
            "python3 eval.py".parse::<PluginSpec>().unwrap(),
            PluginSpec::Command(vec!["python3".into(), "eval.py".into()])
        );
        assert!("builtin:llm".parse::<PluginSpec>().is_err());
        assert!("  ".parse::<PluginSpec>().is_err());
        let json: PluginSpec = serde_json::from_str(r#"["a", "b c"]"#).unwrap();
        assert_eq!(json, PluginSpec::Command(vec!["a".into(), "b c".into()]));
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_fields() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        assert!(serde_json::from_str::<RunConfig>(r#"{"budgte": 3}"#).is_err());
        let partial: RunConfig = serde_json::from_str(r#"{"engine": {"budget": 300}}"#).unwrap();
        assert_eq!(partial.engine.budget, 300);
        assert_eq!(partial.engine.sample_size, 20);
    }

    #[test]
    fn missing_pool_creates_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let err = cmd_run(
            &RunConfig::default(),
            &PoolSource::File(dir.path().join("missing.json")),
            &out,
        );
        assert!(matches!(err, Err(Error::Config(_))));
        assert!(!out.exists());
    }

    #[test]
    fn missing_plugin_command_creates_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let cfg = RunConfig {
            mutator: PluginSpec::Command(vec!["/definitely/not/here".into()]),
            ..Default::default()
        };
        let err = cmd_run(&cfg, &PoolSource::Generated(50), &out);
        assert!(matches!(err, Err(Error::Plugin(_))));
        assert!(!out.exists());
    }

    #[test]
    fn exact_text_lists_every_mode() {
        let text = noiselab_exact(20, &[0.70, 0.69, 0.68]).unwrap();
        assert!(text.contains("top-two tie: 0.1965"), "{text}");
        assert!(text.contains("top1 (inclusive): 0.4499"), "{text}");
    }
}
