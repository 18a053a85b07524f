//! The evolution loop.
//!
//! Each iteration samples fresh examples, evaluates the competitors on them,
//! updates Elo ratings pairwise, picks a winner and writes a comparative
//! report. While budget remains, the next competitors are chosen (previous
//! winner, a freshly evolved agent, and a random pick among the top two other
//! agents by rating) and the new agent goes through Deep Focus refinement on
//! the examples of the iteration before the one just completed.
//!
//! King-of-the-Hill mode runs the same loop with two competitors, champion and
//! challenger, and the champion keeps its title on ties.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{
    mean_score, DebitContext, EvalOutcome, EvalSubject, Evaluation, Evaluator, ExampleRef, Phase,
};
use crate::plugin::{MutationPhase, Mutator};
use crate::rating::{apply_round, scores_tie, KFactor, Rating};
use crate::reports::{build_report, render_text, ComparativeReport, ReportOptions, ScoreKind};
use crate::store::{self, Event, RunStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Default,
    Koth,
}

impl Mode {
    pub fn competitor_count(self) -> u64 {
        match self {
            Mode::Default => 3,
            Mode::Koth => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub mode: Mode,
    pub sample_size: u32,
    pub deep_focus_rounds: u32,
    pub k_factor: KFactor,
    pub clone_penalty: f64,
    pub budget: u64,
    pub rng_seed: u64,
    pub parallelism: usize,
    pub score_kind: ScoreKind,
    pub report: ReportOptions,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            mode: Mode::Default,
            sample_size: 20,
            deep_focus_rounds: 1,
            k_factor: KFactor::default(),
            clone_penalty: 200.0,
            budget: 1500,
            rng_seed: 0,
            parallelism: 1,
            score_kind: ScoreKind::Binary,
            report: ReportOptions::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_size == 0 {
            return Err(Error::config("sample size must be at least 1"));
        }
        if self.deep_focus_rounds > 1 {
            return Err(Error::config("deep focus rounds must be 0 or 1"));
        }
        if !(self.clone_penalty.is_finite() && self.clone_penalty >= 0.0) {
            return Err(Error::config("clone penalty must be a non-negative number"));
        }
        if self.parallelism == 0 {
            return Err(Error::config("parallelism must be at least 1"));
        }
        let floor = self.tournament_cost();
        if self.budget < floor {
            return Err(Error::config(format!(
                "budget {} is below one iteration ({} competitors x {} examples = {floor})",
                self.budget,
                self.mode.competitor_count(),
                self.sample_size
            )));
        }
        Ok(())
    }

    fn n(&self) -> u64 {
        u64::from(self.sample_size)
    }

    /// Worst-case tournament debits of a full iteration.
    pub fn tournament_cost(&self) -> u64 {
        self.mode.competitor_count() * self.n()
    }

    /// Worst-case debits of a full iteration including Deep Focus.
    pub fn worst_case_iteration_cost(&self) -> u64 {
        self.tournament_cost() + u64::from(self.deep_focus_rounds) * self.n()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub agent_id: String,
    /// Relative to the run root.
    pub artifact_dir: String,
    pub parent_ids: Vec<String>,
    pub created_iteration: u64,
    pub rating: Rating,
    pub clone: bool,
    /// Bumped when Deep Focus revises the artifact; part of the cache key.
    #[serde(default)]
    pub revision: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: u64,
    pub example_ids: Vec<String>,
    /// True when the pool was smaller than the sample size.
    #[serde(default)]
    pub with_replacement: bool,
    pub competitor_ids: Vec<String>,
    pub new_agent_id: Option<String>,
    pub clone_flagged: Option<String>,
    pub mean_scores: BTreeMap<String, f64>,
    pub elo_before: BTreeMap<String, Rating>,
    pub elo_after: BTreeMap<String, Rating>,
    pub winner_id: String,
    pub report_ref: String,
    pub deep_focus_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EloSnapshot {
    pub before: BTreeMap<String, Rating>,
    pub after: BTreeMap<String, Rating>,
}

/// Draws `n` examples: distinct when the pool is large enough, otherwise
/// independent draws with replacement. The flag reports which happened.
pub fn sample_examples<R: Rng + ?Sized>(
    pool: &[ExampleRef],
    n: usize,
    rng: &mut R,
) -> (Vec<ExampleRef>, bool) {
    if n <= pool.len() {
        let picked = index::sample(rng, pool.len(), n);
        (picked.into_iter().map(|i| pool[i].clone()).collect(), false)
    } else {
        let picked = (0..n)
            .map(|_| pool[rng.random_range(0..pool.len())].clone())
            .collect();
        (picked, true)
    }
}

/// Returns an agent with the maximal mean score; several maxima are broken
/// uniformly at random. `means` is in slot order.
pub fn pick_winner<R: Rng + ?Sized>(means: &[(String, f64)], rng: &mut R) -> Option<String> {
    let best = means
        .iter()
        .map(|(_, m)| *m)
        .fold(f64::NEG_INFINITY, f64::max);
    let winners: Vec<&String> = means
        .iter()
        .filter(|(_, m)| scores_tie(*m, best))
        .map(|(a, _)| a)
        .collect();
    match winners.len() {
        0 => None,
        1 => Some(winners[0].clone()),
        len => Some(winners[rng.random_range(0..len)].clone()),
    }
}

/// Uniform pick among the two highest-rated non-clone agents other than the
/// winner. Rating ties rank the earlier-created agent first.
pub fn pick_third<R: Rng + ?Sized>(
    population: &[AgentRecord],
    winner_id: &str,
    rng: &mut R,
) -> Option<String> {
    let mut eligible: Vec<&AgentRecord> = population
        .iter()
        .filter(|a| !a.clone && a.agent_id != winner_id)
        .collect();
    eligible.sort_by(|a, b| {
        b.rating
            .value()
            .total_cmp(&a.rating.value())
            .then(a.created_iteration.cmp(&b.created_iteration))
            .then(a.agent_id.cmp(&b.agent_id))
    });
    match eligible.len() {
        0 => None,
        1 => Some(eligible[0].agent_id.clone()),
        _ => Some(eligible[rng.random_range(0..2)].agent_id.clone()),
    }
}

/// Slot order: previous winner, new agent, third.
pub fn select_competitors<R: Rng + ?Sized>(
    population: &[AgentRecord],
    winner_id: &str,
    new_agent_id: &str,
    rng: &mut R,
) -> Vec<String> {
    let mut slots = vec![winner_id.to_string(), new_agent_id.to_string()];
    slots.extend(pick_third(population, winner_id, rng));
    slots
}

/// Challenger takes the title only with a strictly higher mean.
pub fn koth_winner(champion: (&str, f64), challenger: (&str, f64)) -> String {
    if challenger.1 > champion.1 && !scores_tie(challenger.1, champion.1) {
        challenger.0.to_string()
    } else {
        champion.0.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloneCheck {
    Clone,
    Distinct,
    /// Some outcome had no fingerprint.
    Skipped,
}

/// Compares the new agent's prediction fingerprints against each competitor.
pub fn check_clone(
    new_outcomes: &[EvalOutcome],
    competitor_outcomes: &[&[EvalOutcome]],
) -> CloneCheck {
    let fingerprints = |list: &[EvalOutcome]| -> Option<Vec<String>> {
        list.iter().map(|o| o.fingerprint.clone()).collect()
    };
    let Some(mine) = fingerprints(new_outcomes) else {
        return CloneCheck::Skipped;
    };
    let mut skipped = false;
    for other in competitor_outcomes {
        match fingerprints(other) {
            Some(theirs) if theirs == mine => return CloneCheck::Clone,
            Some(_) => {}
            None => skipped = true,
        }
    }
    if skipped {
        CloneCheck::Skipped
    } else {
        CloneCheck::Distinct
    }
}

pub fn detect_clone(new_outcomes: &[EvalOutcome], competitor_outcomes: &[&[EvalOutcome]]) -> bool {
    match check_clone(new_outcomes, competitor_outcomes) {
        CloneCheck::Clone => true,
        CloneCheck::Distinct => false,
        CloneCheck::Skipped => {
            log::warn!("clone check skipped: evaluator did not supply fingerprints");
            false
        }
    }
}

/// The non-clone agent with the highest rating; ties go to the earliest created.
pub fn best_agent(agents: &[AgentRecord]) -> Option<&AgentRecord> {
    agents
        .iter()
        .filter(|a| !a.clone)
        .fold(None, |best: Option<&AgentRecord>, a| match best {
            Some(b) if b.rating.value() >= a.rating.value() => Some(b),
            _ => Some(a),
        })
}

/// All random choices of a run, in the order the engine makes them.
/// Replay drives an identical referee to re-derive every choice.
pub struct Referee {
    rng: ChaCha8Rng,
}

impl Referee {
    pub fn new(seed: u64) -> Self {
        Referee {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn sample(&mut self, pool: &[ExampleRef], n: usize) -> (Vec<ExampleRef>, bool) {
        sample_examples(pool, n, &mut self.rng)
    }

    /// Winner of a finished tournament. `means` is in slot order; clone
    /// agents are passed in but never win.
    pub fn winner(
        &mut self,
        mode: Mode,
        means: &[(String, f64)],
        clones: &[String],
    ) -> Result<String> {
        let eligible: Vec<(String, f64)> = means
            .iter()
            .filter(|(a, _)| !clones.contains(a))
            .cloned()
            .collect();
        match (mode, eligible.as_slice()) {
            (_, []) => Err(Error::config("no eligible competitor to win the iteration")),
            (Mode::Koth, [champion, challenger]) => Ok(koth_winner(
                (&champion.0, champion.1),
                (&challenger.0, challenger.1),
            )),
            (Mode::Koth, [only]) => Ok(only.0.clone()),
            _ => Ok(pick_winner(&eligible, &mut self.rng).expect("non-empty")),
        }
    }

    pub fn third(&mut self, population: &[AgentRecord], winner_id: &str) -> Option<String> {
        pick_third(population, winner_id, &mut self.rng)
    }
}

/// Documents placed in every mutator session.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SessionDocs {
    pub strategy: String,
    pub objective: Option<String>,
    pub background: Option<String>,
}

/// Contents of `session.json` in a mutator session directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub agent_id: String,
    /// Iteration the new agent will debut in.
    pub iteration: u64,
    pub run_seed: u64,
    pub parent_ids: Vec<String>,
    pub score_kind: ScoreKind,
    pub phase: MutationPhase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standing {
    pub agent_id: String,
    pub rating: Rating,
    pub clone: bool,
    pub created_iteration: u64,
}

pub fn standings(agents: &[AgentRecord]) -> Vec<Standing> {
    let mut rows: Vec<Standing> = agents
        .iter()
        .map(|a| Standing {
            agent_id: a.agent_id.clone(),
            rating: a.rating,
            clone: a.clone,
            created_iteration: a.created_iteration,
        })
        .collect();
    rows.sort_by(|a, b| {
        b.rating
            .value()
            .total_cmp(&a.rating.value())
            .then(a.created_iteration.cmp(&b.created_iteration))
    });
    rows
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub best: AgentRecord,
    pub agents: Vec<AgentRecord>,
    pub iterations: Vec<IterationRecord>,
    pub spent: u64,
    pub budget: u64,
}

pub struct Engine {
    cfg: EngineConfig,
    pool: Vec<ExampleRef>,
    pool_index: HashMap<String, usize>,
    store: RunStore,
    eval: Evaluation,
    mutator: Box<dyn Mutator>,
    docs: SessionDocs,
    referee: Referee,
    agents: Vec<AgentRecord>,
    iterations: Vec<IterationRecord>,
    reports: Vec<ComparativeReport>,
    next_agent: u64,
}

fn outcome_locator(iteration: u64, agent: &str, example: &str) -> String {
    format!(
        "{}#{example}",
        store::rel_string(
            &store::iteration_dir(iteration)
                .join("outcomes")
                .join(format!("{agent}.json"))
        )
    )
}

impl Engine {
    pub fn new(
        cfg: EngineConfig,
        pool: Vec<ExampleRef>,
        store: RunStore,
        evaluator: Box<dyn Evaluator>,
        mutator: Box<dyn Mutator>,
        docs: SessionDocs,
    ) -> Result<Self> {
        cfg.validate()?;
        crate::evaluation::validate_pool(&pool)?;
        let pool_index = pool
            .iter()
            .enumerate()
            .map(|(i, e)| (e.example_id.clone(), i))
            .collect();
        Ok(Engine {
            eval: Evaluation::new(evaluator, cfg.budget, cfg.parallelism),
            referee: Referee::new(cfg.rng_seed),
            cfg,
            pool,
            pool_index,
            store,
            mutator,
            docs,
            agents: Vec::new(),
            iterations: Vec::new(),
            reports: Vec::new(),
            next_agent: 0,
        })
    }

    fn agent(&self, id: &str) -> &AgentRecord {
        self.agents
            .iter()
            .find(|a| a.agent_id == id)
            .expect("known agent")
    }

    fn agent_mut(&mut self, id: &str) -> &mut AgentRecord {
        self.agents
            .iter_mut()
            .find(|a| a.agent_id == id)
            .expect("known agent")
    }

    fn subject(&self, id: &str) -> EvalSubject {
        let a = self.agent(id);
        EvalSubject {
            agent_id: a.agent_id.clone(),
            revision: a.revision,
            artifact_dir: self.store.path(&a.artifact_dir),
        }
    }

    fn allocate_id(&mut self) -> String {
        let id = format!("agent_{:04}", self.next_agent);
        self.next_agent += 1;
        id
    }

    fn save_agent(&self, id: &str) -> Result<()> {
        self.store
            .write_json(store::agent_dir(id).join("agent.json"), self.agent(id))
    }

    fn register_seed(&mut self, seed: &dyn Fn(&Path) -> Result<()>) -> Result<()> {
        let id = self.allocate_id();
        let rel = store::artifact_dir(&id);
        let target = self.store.path(&rel);
        seed(&target)?;
        if !store::dir_has_files(&target) {
            return Err(Error::config("seed artifact is empty"));
        }
        let agent = AgentRecord {
            agent_id: id.clone(),
            artifact_dir: store::rel_string(&rel),
            parent_ids: Vec::new(),
            created_iteration: 0,
            rating: Rating::initial(),
            clone: false,
            revision: 0,
        };
        self.agents.push(agent.clone());
        self.store.append(&Event::AgentCreated { agent })?;
        self.save_agent(&id)
    }

    /// Runs the loop with a copy of `seed_artifact` as the first agent.
    pub fn run(self, seed_artifact: &Path) -> Result<RunOutcome> {
        if !seed_artifact.is_dir() {
            return Err(Error::config(format!(
                "seed artifact {} is not a directory",
                seed_artifact.display()
            )));
        }
        self.run_seeded(&|target| store::copy_dir(seed_artifact, target))
    }

    /// Runs the loop until the next iteration is no longer affordable.
    /// `seed` writes the first agent's artifact into the directory it is given.
    pub fn run_seeded(mut self, seed: &dyn Fn(&Path) -> Result<()>) -> Result<RunOutcome> {
        self.store.append(&Event::RunStarted {
            schema_version: store::SCHEMA_VERSION,
            config: self.cfg.clone(),
            pool_size: self.pool.len(),
        })?;
        self.register_seed(seed)?;

        let n = self.cfg.n();
        let mut competitors = vec![self.agents[0].agent_id.clone()];
        let mut debut: Option<String> = None;
        let mut deep_focus_ref: Option<String> = None;

        loop {
            let index = self.iterations.len() as u64;
            if self.eval.remaining() < competitors.len() as u64 * n {
                break;
            }
            let record =
                self.tournament(index, &competitors, debut.take(), deep_focus_ref.take())?;
            let winner = record.winner_id.clone();
            self.iterations.push(record);

            let third_available = self.cfg.mode == Mode::Default
                && self.agents.iter().any(|a| !a.clone && a.agent_id != winner);
            let next_count = 2 + u64::from(third_available);
            let deep_focus_cost = if self.cfg.deep_focus_rounds == 1 && index >= 1 {
                n
            } else {
                0
            };
            if self.eval.remaining() < next_count * n + deep_focus_cost {
                break;
            }

            let third = match self.cfg.mode {
                Mode::Default => self.referee.third(&self.agents, &winner),
                Mode::Koth => None,
            };
            self.store.append(&Event::CompetitorsSelected {
                iteration: index + 1,
                winner_id: winner.clone(),
                third_id: third.clone(),
            })?;

            competitors = vec![winner.clone()];
            match self.evolve(index, &winner, third.as_deref())? {
                Some(new_id) => {
                    deep_focus_ref = self.deep_focus(index, &new_id)?;
                    competitors.push(new_id.clone());
                    debut = Some(new_id);
                }
                None => log::warn!("iteration {}: mutation failed, no new agent", index + 1),
            }
            competitors.extend(third);
        }

        let best = best_agent(&self.agents)
            .cloned()
            .ok_or_else(|| Error::config("no eligible agent"))?;
        self.store
            .write_json(store::LEDGER_FILE, self.eval.ledger())?;
        self.store.append(&Event::RunFinished {
            best_agent_id: best.agent_id.clone(),
            iterations: self.iterations.len() as u64,
            spent: self.eval.ledger().spent,
        })?;
        Ok(RunOutcome {
            best,
            spent: self.eval.ledger().spent,
            budget: self.cfg.budget,
            agents: self.agents,
            iterations: self.iterations,
        })
    }

    fn tournament(
        &mut self,
        index: u64,
        competitors: &[String],
        debut: Option<String>,
        deep_focus_ref: Option<String>,
    ) -> Result<IterationRecord> {
        let (examples, with_replacement) = self
            .referee
            .sample(&self.pool, self.cfg.sample_size as usize);
        if with_replacement {
            log::info!(
                "iteration {index}: pool smaller than sample size, drawing with replacement"
            );
        }
        let subjects: Vec<EvalSubject> = competitors.iter().map(|id| self.subject(id)).collect();
        let ctx = DebitContext {
            iteration: index,
            phase: Phase::Tournament,
        };
        let outcomes = self
            .eval
            .evaluate_many(&subjects, &examples, ctx, &mut self.store)?;

        let mut clone_flagged = None;
        if let Some(new_id) = debut.as_deref() {
            let pos = competitors
                .iter()
                .position(|c| c == new_id)
                .expect("debut agent competes");
            let others: Vec<&[EvalOutcome]> = outcomes
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != pos)
                .map(|(_, o)| o.as_slice())
                .collect();
            if detect_clone(&outcomes[pos], &others) {
                let penalty = self.cfg.clone_penalty;
                let agent = self.agent_mut(new_id);
                agent.rating = agent.rating.penalized(penalty);
                agent.clone = true;
                clone_flagged = Some(new_id.to_string());
                log::info!(
                    "iteration {index}: {new_id} duplicates a competitor's predictions, penalized"
                );
            }
        }

        let means: Vec<(String, f64)> = competitors
            .iter()
            .zip(&outcomes)
            .map(|(id, o)| Ok((id.clone(), mean_score(o)?)))
            .collect::<Result<_>>()?;
        let mean_map: BTreeMap<String, f64> = means.iter().cloned().collect();
        let elo_before: BTreeMap<String, Rating> = competitors
            .iter()
            .map(|id| (id.clone(), self.agent(id).rating))
            .collect();
        let elo_after = if competitors.len() >= 2 {
            apply_round(&elo_before, &mean_map, self.cfg.k_factor)?
        } else {
            elo_before.clone()
        };
        for (id, rating) in &elo_after {
            self.agent_mut(id).rating = *rating;
        }

        let clones: Vec<String> = competitors
            .iter()
            .filter(|id| self.agent(id).clone)
            .cloned()
            .collect();
        let winner_id = self.referee.winner(self.cfg.mode, &means, &clones)?;

        let labelled: Vec<(String, Vec<EvalOutcome>)> =
            competitors.iter().cloned().zip(outcomes).collect();
        let mut report = build_report(
            index,
            &labelled,
            self.cfg.score_kind,
            &self.cfg.report,
            &|a, e| outcome_locator(index, a, e),
        )?;
        report.ratings = elo_after
            .iter()
            .map(|(a, r)| (a.clone(), r.value()))
            .collect();

        let dir = store::iteration_dir(index);
        self.store
            .write_json(dir.join("examples.json"), &examples)?;
        for (id, list) in &labelled {
            self.store
                .write_json(dir.join("outcomes").join(format!("{id}.json")), list)?;
        }
        self.store.write_text(
            dir.join("report.txt"),
            &render_text(&report, &self.cfg.report),
        )?;
        self.store.write_json(dir.join("report.json"), &report)?;
        self.store.write_json(
            dir.join("elo.json"),
            &EloSnapshot {
                before: elo_before.clone(),
                after: elo_after.clone(),
            },
        )?;

        let record = IterationRecord {
            index,
            example_ids: examples.iter().map(|e| e.example_id.clone()).collect(),
            with_replacement,
            competitor_ids: competitors.to_vec(),
            new_agent_id: debut,
            clone_flagged,
            mean_scores: mean_map,
            elo_before,
            elo_after,
            winner_id,
            report_ref: store::rel_string(&dir.join("report.txt")),
            deep_focus_ref,
        };
        self.store.write_json(dir.join("iteration.json"), &record)?;
        self.store.append(&Event::IterationCompleted {
            record: record.clone(),
        })?;
        for id in competitors {
            self.save_agent(id)?;
        }
        self.reports.push(report);
        Ok(record)
    }

    fn write_session(
        &self,
        session: &Path,
        info: &SessionInfo,
        source_iteration: u64,
    ) -> Result<()> {
        let rel = |p: &Path| p.strip_prefix(self.store.root()).unwrap_or(p).to_path_buf();
        let session_rel = rel(session);
        self.store
            .write_json(session_rel.join("session.json"), info)?;
        self.store.write_json(
            session_rel.join("elo_standings.json"),
            &standings(&self.agents),
        )?;
        self.store
            .write_text(session_rel.join("strategy.md"), &self.docs.strategy)?;
        if let Some(objective) = &self.docs.objective {
            self.store
                .write_text(session_rel.join("objective.md"), objective)?;
        }
        if let Some(background) = &self.docs.background {
            self.store
                .write_text(session_rel.join("background.md"), background)?;
        }

        let source = &self.iterations[source_iteration as usize];
        let report = &self.reports[source_iteration as usize];
        self.store.write_text(
            session_rel.join("report.txt"),
            &render_text(report, &self.cfg.report),
        )?;
        self.store
            .write_json(session_rel.join("report.json"), report)?;

        let mut shown: Vec<&String> = source.competitor_ids.iter().collect();
        for p in &info.parent_ids {
            if !shown.contains(&p) {
                shown.push(p);
            }
        }
        for id in shown {
            let agent = self.agent(id);
            let target = session.join("competitors").join(id);
            store::copy_dir(&self.store.path(&agent.artifact_dir), &target)?;
            store::make_read_only(&target)?;
        }
        let outcomes_dir = store::iteration_dir(source_iteration).join("outcomes");
        for id in &source.competitor_ids {
            let list: Vec<EvalOutcome> =
                store::read_json(self.store.root(), outcomes_dir.join(format!("{id}.json")))?;
            for o in list {
                self.store.write_json(
                    session_rel
                        .join("diagnostics")
                        .join(id)
                        .join(format!("{}.json", sanitize(&o.example_id))),
                    &o,
                )?;
            }
        }
        Ok(())
    }

    /// Creates a new agent from the just-finished iteration. `None` on
    /// mutation failure.
    fn evolve(
        &mut self,
        finished: u64,
        winner: &str,
        third: Option<&str>,
    ) -> Result<Option<String>> {
        let id = self.allocate_id();
        let session_rel = store::session_dir(&id);
        let session = self.store.path(&session_rel);
        let mut parent_ids = vec![winner.to_string()];
        parent_ids.extend(third.map(str::to_string));
        let info = SessionInfo {
            agent_id: id.clone(),
            iteration: finished + 1,
            run_seed: self.cfg.rng_seed,
            parent_ids: parent_ids.clone(),
            score_kind: self.cfg.score_kind,
            phase: MutationPhase::Create,
        };
        self.write_session(&session, &info, finished)?;

        let failure = match self.mutator.mutate(&session, MutationPhase::Create) {
            Err(reason) => Some(reason),
            Ok(()) if !store::dir_has_files(&session.join("artifact")) => {
                Some("mutator produced no files under artifact/".to_string())
            }
            Ok(()) => None,
        };
        if let Some(reason) = failure {
            self.store.append(&Event::MutationFailed {
                iteration: finished + 1,
                phase: MutationPhase::Create,
                reason,
            })?;
            return Ok(None);
        }

        let rel = store::artifact_dir(&id);
        store::copy_dir(&session.join("artifact"), &self.store.path(&rel))?;
        let agent = AgentRecord {
            agent_id: id.clone(),
            artifact_dir: store::rel_string(&rel),
            parent_ids,
            created_iteration: finished + 1,
            rating: Rating::initial(),
            clone: false,
            revision: 0,
        };
        self.agents.push(agent.clone());
        self.store.append(&Event::AgentCreated { agent })?;
        self.save_agent(&id)?;
        Ok(Some(id))
    }

    /// Tests the draft on the examples of the iteration before `finished`,
    /// reports it against that iteration's competitors and lets the mutator
    /// revise it in the same session. Returns the report locator if run.
    fn deep_focus(&mut self, finished: u64, draft_id: &str) -> Result<Option<String>> {
        let iteration = finished + 1;
        let n = self.cfg.n();
        let skip = |engine: &mut Self, source: Option<u64>, note: &str| -> Result<Option<String>> {
            engine.store.append(&Event::DeepFocus {
                iteration,
                agent_id: draft_id.to_string(),
                source_iteration: source,
                debits: 0,
                revised: false,
                note: note.to_string(),
            })?;
            Ok(None)
        };
        if self.cfg.deep_focus_rounds == 0 {
            return Ok(None);
        }
        let Some(source_index) = finished.checked_sub(1) else {
            return skip(self, None, "no earlier iteration to test on");
        };
        if self.eval.remaining() < n {
            log::warn!(
                "deep focus for {draft_id} skipped: {} evaluations left",
                self.eval.remaining()
            );
            return skip(self, Some(source_index), "insufficient budget");
        }

        let source = self.iterations[source_index as usize].clone();
        let examples: Vec<ExampleRef> = source
            .example_ids
            .iter()
            .map(|id| self.pool[self.pool_index[id]].clone())
            .collect();
        let mut ids = source.competitor_ids.clone();
        ids.push(draft_id.to_string());
        let subjects: Vec<EvalSubject> = ids.iter().map(|id| self.subject(id)).collect();
        let spent_before = self.eval.ledger().spent;
        let ctx = DebitContext {
            iteration,
            phase: Phase::DeepFocus,
        };
        let outcomes = self
            .eval
            .evaluate_many(&subjects, &examples, ctx, &mut self.store)?;
        let debits = self.eval.ledger().spent - spent_before;

        let labelled: Vec<(String, Vec<EvalOutcome>)> = ids.into_iter().zip(outcomes).collect();
        let mut report = build_report(
            source_index,
            &labelled,
            self.cfg.score_kind,
            &self.cfg.report,
            &|a, e| format!("deep_focus#{a}/{e}"),
        )?;
        report.ratings = self
            .agents
            .iter()
            .filter(|a| labelled.iter().any(|(id, _)| id == &a.agent_id))
            .map(|a| (a.agent_id.clone(), a.rating.value()))
            .collect();

        let session_rel = store::session_dir(draft_id);
        let session = self.store.path(&session_rel);
        let report_rel = session_rel.join("deep_focus_report.txt");
        self.store
            .write_text(&report_rel, &render_text(&report, &self.cfg.report))?;
        self.store
            .write_json(session_rel.join("deep_focus_report.json"), &report)?;
        let mut info: SessionInfo =
            store::read_json(self.store.root(), session_rel.join("session.json"))?;
        info.phase = MutationPhase::Refine;
        self.store
            .write_json(session_rel.join("session.json"), &info)?;

        let before = store::hash_dir(&session.join("artifact"))?;
        let (revised, note) = match self.mutator.mutate(&session, MutationPhase::Refine) {
            Err(reason) => {
                log::warn!("refine phase for {draft_id} failed, keeping draft: {reason}");
                (false, format!("refine failed: {reason}"))
            }
            Ok(()) if !store::dir_has_files(&session.join("artifact")) => {
                log::warn!("refine phase for {draft_id} removed the artifact, keeping draft");
                (false, "refine left no artifact; draft kept".to_string())
            }
            Ok(()) => {
                let after = store::hash_dir(&session.join("artifact"))?;
                if after == before {
                    (false, "no revision".to_string())
                } else {
                    (true, "revised".to_string())
                }
            }
        };
        if revised {
            let target = self.store.path(store::artifact_dir(draft_id));
            fs::remove_dir_all(&target)?;
            store::copy_dir(&session.join("artifact"), &target)?;
            let agent = self.agent_mut(draft_id);
            agent.revision += 1;
            let revision = agent.revision;
            self.store.append(&Event::AgentRevised {
                agent_id: draft_id.to_string(),
                revision,
                iteration,
            })?;
            self.save_agent(draft_id)?;
        }
        self.store.append(&Event::DeepFocus {
            iteration,
            agent_id: draft_id.to_string(),
            source_iteration: Some(source_index),
            debits,
            revised,
            note,
        })?;
        Ok(Some(store::rel_string(&report_rel)))
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Absolute artifact directory of an agent inside a run root.
pub fn artifact_path(root: &Path, agent: &AgentRecord) -> PathBuf {
    root.join(&agent.artifact_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(n: usize) -> Vec<ExampleRef> {
        (0..n)
            .map(|i| ExampleRef::new(format!("x{i}"), format!("p{i}")))
            .collect()
    }

    fn agent(id: &str, rating: f64, created: u64) -> AgentRecord {
        AgentRecord {
            agent_id: id.into(),
            artifact_dir: format!("agents/{id}/artifact"),
            parent_ids: vec![],
            created_iteration: created,
            rating: Rating::new(rating).unwrap(),
            clone: false,
            revision: 0,
        }
    }

    fn fp(agent: &str, prints: &[&str]) -> Vec<EvalOutcome> {
        prints
            .iter()
            .enumerate()
            .map(|(i, p)| EvalOutcome {
                agent_id: agent.into(),
                example_id: format!("e{i}"),
                score: 1.0,
                fingerprint: (!p.is_empty()).then(|| p.to_string()),
                diagnostics: String::new(),
                agent_stdout: String::new(),
                failed: false,
            })
            .collect()
    }

    #[test]
    fn sample_is_distinct_when_pool_is_large() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (s, repl) = sample_examples(&pool(400), 20, &mut rng);
        assert!(!repl);
        let mut ids: Vec<_> = s.iter().map(|e| e.example_id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 20);
    }

    #[test]
    fn small_pool_samples_with_replacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (s, repl) = sample_examples(&pool(5), 20, &mut rng);
        assert!(repl);
        assert_eq!(s.len(), 20);
    }

    #[test]
    fn sampling_is_reproducible() {
        let a = sample_examples(&pool(100), 20, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_examples(&pool(100), 20, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn consecutive_samples_differ() {
        for seed in 0..1000 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ids = |s: Vec<ExampleRef>| {
                let mut v: Vec<String> = s.into_iter().map(|e| e.example_id).collect();
                v.sort();
                v
            };
            let a = ids(sample_examples(&pool(100), 20, &mut rng).0);
            let b = ids(sample_examples(&pool(100), 20, &mut rng).0);
            assert_ne!(a, b, "seed {seed}");
        }
    }

    #[test]
    fn unique_argmax_wins() {
        let means = vec![("A".into(), 0.8), ("B".into(), 0.6), ("C".into(), 0.6)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(pick_winner(&means, &mut rng).unwrap(), "A");
    }

    #[test]
    fn tied_winners_split_evenly() {
        let means2 = vec![("A".into(), 0.7), ("B".into(), 0.7), ("C".into(), 0.5)];
        let means3 = vec![("A".into(), 0.7), ("B".into(), 0.7), ("C".into(), 0.7)];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let trials = 30_000;
        let mut count2 = HashMap::new();
        let mut count3 = HashMap::new();
        for _ in 0..trials {
            *count2
                .entry(pick_winner(&means2, &mut rng).unwrap())
                .or_insert(0) += 1;
            *count3
                .entry(pick_winner(&means3, &mut rng).unwrap())
                .or_insert(0) += 1;
        }
        assert!(!count2.contains_key("C"));
        assert!((f64::from(count2["A"]) / f64::from(trials) - 0.5).abs() < 0.01);
        for id in ["A", "B", "C"] {
            assert!((f64::from(count3[id]) / f64::from(trials) - 1.0 / 3.0).abs() < 0.01);
        }
    }

    #[test]
    fn third_slot_comes_from_top_two() {
        let pop = vec![
            agent("W", 1550.0, 0),
            agent("X", 1520.0, 1),
            agent("Y", 1510.0, 2),
            agent("Z", 1400.0, 3),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = HashMap::new();
        for _ in 0..2000 {
            let slots = select_competitors(&pop, "W", "N", &mut rng);
            assert_eq!(&slots[..2], ["W", "N"]);
            *seen.entry(slots[2].clone()).or_insert(0) += 1;
        }
        assert_eq!(seen.len(), 2);
        assert!((f64::from(seen["X"]) / 2000.0 - 0.5).abs() < 0.05);
    }

    #[test]
    fn lone_seed_gives_two_slots() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(
            select_competitors(&[agent("W", 1500.0, 0)], "W", "N", &mut rng),
            ["W", "N"]
        );
    }

    #[test]
    fn clones_are_not_selectable() {
        let mut pop = vec![
            agent("W", 1550.0, 0),
            agent("X", 1520.0, 1),
            agent("Y", 1510.0, 2),
            agent("Z", 1400.0, 3),
        ];
        pop[1].clone = true;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let third = pick_third(&pop, "W", &mut rng).unwrap();
            assert!(third == "Y" || third == "Z");
        }
    }

    #[test]
    fn clone_detection() {
        let base: Vec<&str> = (0..20)
            .map(|i| if i % 3 == 0 { "a" } else { "b" })
            .collect();
        let new = fp("N", &base);
        let same = fp("C1", &base);
        let mut changed = base.clone();
        changed[7] = "z";
        let differ = fp("C2", &changed);
        assert!(detect_clone(&new, &[&same, &differ]));
        assert!(!detect_clone(&new, &[&differ]));
        let blank = fp("N", &[""; 20]);
        assert_eq!(check_clone(&blank, &[&same]), CloneCheck::Skipped);
        assert!(!detect_clone(&blank, &[&same]));
    }

    #[test]
    fn koth_ties_go_to_champion() {
        assert_eq!(koth_winner(("champ", 0.70), ("chall", 0.75)), "chall");
        assert_eq!(koth_winner(("champ", 0.70), ("chall", 0.70)), "champ");
        assert_eq!(koth_winner(("champ", 0.70), ("chall", 0.65)), "champ");
    }

    #[test]
    fn best_agent_prefers_rating_then_age() {
        let mut pop = vec![
            agent("A", 1500.0, 0),
            agent("B", 1600.0, 1),
            agent("C", 1600.0, 2),
            agent("D", 1700.0, 3),
        ];
        pop[3].clone = true;
        assert_eq!(best_agent(&pop).unwrap().agent_id, "B");
    }

    #[test]
    fn referee_never_crowns_a_clone() {
        let mut referee = Referee::new(1);
        let means = vec![("W".to_string(), 0.6), ("N".to_string(), 0.6)];
        for _ in 0..50 {
            let w = referee
                .winner(Mode::Default, &means, &["N".to_string()])
                .unwrap();
            assert_eq!(w, "W");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn population() -> impl Strategy<Value = Vec<AgentRecord>> {
            prop::collection::vec((1400u32..1600, any::<bool>()), 1..8).prop_map(|rows| {
                rows.into_iter()
                    .enumerate()
                    .map(|(i, (r, clone))| AgentRecord {
                        clone,
                        ..agent(&format!("a{i}"), f64::from(r), i as u64)
                    })
                    .collect()
            })
        }

        proptest! {
            #[test]
            fn third_matches_brute_force(pop in population(), w in 0usize..8, seed in any::<u64>()) {
                let winner = pop[w % pop.len()].agent_id.clone();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let got = pick_third(&pop, &winner, &mut rng);
                let candidates: Vec<&AgentRecord> = pop.iter().filter(|a| !a.clone && a.agent_id != winner).collect();
                match got {
                    None => prop_assert!(candidates.is_empty()),
                    Some(id) => {
                        let me = candidates.iter().find(|a| a.agent_id == id).expect("eligible pick");
                        let better = candidates
                            .iter()
                            .filter(|a| a.rating.value() > me.rating.value()
                                || (a.rating.value() == me.rating.value() && a.created_iteration < me.created_iteration))
                            .count();
                        prop_assert!(better < 2);
                    }
                }
            }

            #[test]
            fn winner_has_the_top_mean(means in prop::collection::vec(0u32..=20, 1..5), seed in any::<u64>()) {
                let labelled: Vec<(String, f64)> = means
                    .iter()
                    .enumerate()
                    .map(|(i, m)| (format!("a{i}"), f64::from(*m) / 20.0))
                    .collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let w = pick_winner(&labelled, &mut rng).unwrap();
                let top = labelled.iter().map(|(_, m)| *m).fold(f64::MIN, f64::max);
                prop_assert_eq!(labelled.iter().find(|(a, _)| *a == w).unwrap().1, top);
            }
        }
    }

    #[test]
    fn config_validation() {
        let ok = EngineConfig::default();
        assert!(ok.validate().is_ok());
        assert_eq!(ok.worst_case_iteration_cost(), 80);
        let low = EngineConfig {
            budget: 59,
            ..ok.clone()
        };
        assert!(low.validate().is_err());
        let koth = EngineConfig {
            mode: Mode::Koth,
            budget: 59,
            ..ok.clone()
        };
        assert!(koth.validate().is_ok());
        assert_eq!(koth.worst_case_iteration_cost(), 60);
        assert!(EngineConfig {
            deep_focus_rounds: 2,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(EngineConfig {
            sample_size: 0,
            ..ok
        }
        .validate()
        .is_err());
    }
}
