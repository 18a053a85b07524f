//! Store verification by replay.
//!
//! The event log alone determines a run: with the pool and the recorded
//! evaluation outcomes, a fresh referee seeded from the config re-draws every
//! example sample, winner and third-slot pick. Replay recomputes ratings,
//! clone flags, winners and the budget ledger and compares them with the
//! snapshots the engine wrote.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use crate::engine::{
    best_agent, detect_clone, AgentRecord, EloSnapshot, EngineConfig, IterationRecord, Mode,
    Referee,
};
use crate::error::{Error, Result};
use crate::evaluation::{mean_score, BudgetLedger, EvalOutcome, ExampleRef};
use crate::rating::apply_round;
use crate::store::{self, Event};

#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub iteration: Option<u64>,
    pub detail: String,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.iteration {
            Some(i) => write!(f, "divergence at iteration {i}: {}", self.detail),
            None => write!(f, "divergence: {}", self.detail),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub iterations: u64,
    pub agents: usize,
    pub evaluations: u64,
    pub divergence: Option<Divergence>,
}

impl ReplayReport {
    pub fn is_ok(&self) -> bool {
        self.divergence.is_none()
    }
}

impl fmt::Display for ReplayReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.divergence {
            None => write!(
                f,
                "replay OK ({} iterations, {} agents, {} evaluations)",
                self.iterations, self.agents, self.evaluations
            ),
            Some(d) => write!(f, "{d}"),
        }
    }
}

struct Replayer<'a> {
    root: &'a Path,
    cfg: EngineConfig,
    pool: Vec<ExampleRef>,
    referee: Referee,
    agents: Vec<AgentRecord>,
    cache: HashMap<(String, u32, String), EvalOutcome>,
    ledger: BudgetLedger,
    iterations: Vec<IterationRecord>,
    last_selection: Option<(String, Option<String>)>,
    pending_debut: Option<String>,
    finished: bool,
}

type Step = std::result::Result<(), Divergence>;

fn diverge(iteration: Option<u64>, detail: impl Into<String>) -> Divergence {
    Divergence {
        iteration,
        detail: detail.into(),
    }
}

impl<'a> Replayer<'a> {
    fn agent_index(&self, id: &str) -> Result<usize> {
        self.agents
            .iter()
            .position(|a| a.agent_id == id)
            .ok_or_else(|| Error::integrity(format!("event references unknown agent {id}")))
    }

    fn apply(&mut self, line: usize, event: Event) -> Result<Step> {
        if self.finished {
            return Err(Error::integrity(format!(
                "event log line {line}: record after run_finished"
            )));
        }
        match event {
            Event::RunStarted { .. } => {
                return Err(Error::integrity(format!(
                    "event log line {line}: repeated run_started"
                )));
            }
            Event::AgentCreated { agent } => {
                if self.agents.iter().any(|a| a.agent_id == agent.agent_id) {
                    return Err(Error::integrity(format!(
                        "event log line {line}: duplicate agent {}",
                        agent.agent_id
                    )));
                }
                if !self.root.join(&agent.artifact_dir).is_dir() {
                    return Err(Error::integrity(format!(
                        "missing artifact directory {}",
                        agent.artifact_dir
                    )));
                }
                if agent.created_iteration > 0 {
                    self.pending_debut = Some(agent.agent_id.clone());
                }
                self.agents.push(agent);
            }
            Event::AgentRevised {
                agent_id, revision, ..
            } => {
                let i = self.agent_index(&agent_id)?;
                self.agents[i].revision = revision;
            }
            Event::Evaluated(record) => {
                self.agent_index(&record.outcome.agent_id)?;
                self.ledger
                    .debit(record.iteration, record.phase, 1)
                    .map_err(|_| {
                        Error::integrity(format!(
                            "event log line {line}: evaluation beyond the budget"
                        ))
                    })?;
                let key = (
                    record.outcome.agent_id.clone(),
                    record.revision,
                    record.outcome.example_id.clone(),
                );
                if self.cache.insert(key, record.outcome).is_some() {
                    return Err(Error::integrity(format!(
                        "event log line {line}: evaluation of a cached outcome"
                    )));
                }
            }
            Event::IterationCompleted { record } => return self.iteration(record),
            Event::CompetitorsSelected {
                iteration,
                winner_id,
                third_id,
            } => {
                let Some(prev) = self.iterations.last() else {
                    return Err(Error::integrity(format!(
                        "event log line {line}: selection before any iteration"
                    )));
                };
                if winner_id != prev.winner_id {
                    return Ok(Err(diverge(
                        Some(iteration),
                        format!(
                            "slot 1 holds {winner_id}, previous winner was {}",
                            prev.winner_id
                        ),
                    )));
                }
                let third = match self.cfg.mode {
                    Mode::Default => self.referee.third(&self.agents, &winner_id),
                    Mode::Koth => None,
                };
                if third != third_id {
                    return Ok(Err(diverge(
                        Some(iteration),
                        format!("third slot recorded {third_id:?}, recomputed {third:?}"),
                    )));
                }
                self.last_selection = Some((winner_id, third_id));
            }
            Event::MutationFailed { .. } | Event::DeepFocus { .. } => {}
            Event::RunFinished {
                best_agent_id,
                iterations,
                spent,
            } => {
                self.finished = true;
                let best = best_agent(&self.agents).map(|a| a.agent_id.clone());
                if best.as_deref() != Some(best_agent_id.as_str()) {
                    return Ok(Err(diverge(
                        None,
                        format!("best agent recorded {best_agent_id}, recomputed {best:?}"),
                    )));
                }
                if iterations != self.iterations.len() as u64 {
                    return Ok(Err(diverge(None, "iteration count mismatch")));
                }
                if spent != self.ledger.spent {
                    return Ok(Err(diverge(
                        None,
                        format!("spent recorded {spent}, recomputed {}", self.ledger.spent),
                    )));
                }
            }
        }
        Ok(Ok(()))
    }

    fn iteration(&mut self, record: IterationRecord) -> Result<Step> {
        let index = self.iterations.len() as u64;
        let at = Some(index);
        if record.index != index {
            return Ok(Err(diverge(
                at,
                format!("record carries index {}", record.index),
            )));
        }
        let (examples, with_replacement) = self
            .referee
            .sample(&self.pool, self.cfg.sample_size as usize);
        let ids: Vec<String> = examples.iter().map(|e| e.example_id.clone()).collect();
        if ids != record.example_ids || with_replacement != record.with_replacement {
            return Ok(Err(diverge(at, "sampled examples differ")));
        }

        let expected_slots: Vec<String> = match (index, self.last_selection.take()) {
            (0, _) => vec![self.agents[0].agent_id.clone()],
            (_, Some((winner, third))) => {
                let mut slots = vec![winner];
                slots.extend(self.pending_debut.clone());
                slots.extend(third);
                slots
            }
            (_, None) => return Ok(Err(diverge(at, "no competitor selection recorded"))),
        };
        if expected_slots != record.competitor_ids {
            return Ok(Err(diverge(
                at,
                format!(
                    "competitors {:?}, expected {expected_slots:?}",
                    record.competitor_ids
                ),
            )));
        }
        let debut = if index == 0 {
            None
        } else {
            self.pending_debut.take()
        };
        if debut != record.new_agent_id {
            return Ok(Err(diverge(at, "new agent mismatch")));
        }

        let mut outcomes = Vec::with_capacity(record.competitor_ids.len());
        for id in &record.competitor_ids {
            let agent = &self.agents[self.agent_index(id)?];
            let list: Vec<EvalOutcome> = ids
                .iter()
                .map(|e| {
                    self.cache
                        .get(&(id.clone(), agent.revision, e.clone()))
                        .cloned()
                        .ok_or_else(|| {
                            Error::integrity(format!("iteration {index}: no outcome for {id}/{e}"))
                        })
                })
                .collect::<Result<_>>()?;
            let stored: Vec<EvalOutcome> = store::read_json(
                self.root,
                store::iteration_dir(index)
                    .join("outcomes")
                    .join(format!("{id}.json")),
            )?;
            if stored != list {
                return Ok(Err(diverge(
                    at,
                    format!("outcome file of {id} differs from the log"),
                )));
            }
            outcomes.push(list);
        }

        let mut clone_flagged = None;
        if let Some(new_id) = &debut {
            let pos = record
                .competitor_ids
                .iter()
                .position(|c| c == new_id)
                .expect("checked above");
            let others: Vec<&[EvalOutcome]> = outcomes
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != pos)
                .map(|(_, o)| o.as_slice())
                .collect();
            if detect_clone(&outcomes[pos], &others) {
                let i = self.agent_index(new_id)?;
                self.agents[i].rating = self.agents[i].rating.penalized(self.cfg.clone_penalty);
                self.agents[i].clone = true;
                clone_flagged = Some(new_id.clone());
            }
        }
        if clone_flagged != record.clone_flagged {
            return Ok(Err(diverge(at, "clone flag differs")));
        }

        let mut means = Vec::new();
        for (id, list) in record.competitor_ids.iter().zip(&outcomes) {
            means.push((id.clone(), mean_score(list)?));
        }
        let mean_map: BTreeMap<String, f64> = means.iter().cloned().collect();
        if mean_map != record.mean_scores {
            return Ok(Err(diverge(at, "mean scores differ")));
        }
        let mut before = BTreeMap::new();
        for id in &record.competitor_ids {
            before.insert(id.clone(), self.agents[self.agent_index(id)?].rating);
        }
        let after = if before.len() >= 2 {
            apply_round(&before, &mean_map, self.cfg.k_factor)?
        } else {
            before.clone()
        };
        if before != record.elo_before || after != record.elo_after {
            return Ok(Err(diverge(
                at,
                "Elo ratings differ from the iteration record",
            )));
        }
        let snapshot: EloSnapshot =
            store::read_json(self.root, store::iteration_dir(index).join("elo.json"))?;
        if snapshot.before != before || snapshot.after != after {
            return Ok(Err(diverge(
                at,
                "Elo snapshot differs from the recomputed ratings",
            )));
        }
        for (id, rating) in &after {
            let i = self.agent_index(id)?;
            self.agents[i].rating = *rating;
        }

        let clones: Vec<String> = record
            .competitor_ids
            .iter()
            .filter(|id| self.agents.iter().any(|a| &a.agent_id == *id && a.clone))
            .cloned()
            .collect();
        let winner = self.referee.winner(self.cfg.mode, &means, &clones)?;
        if winner != record.winner_id {
            return Ok(Err(diverge(
                at,
                format!("winner recorded {}, recomputed {winner}", record.winner_id),
            )));
        }
        let stored: IterationRecord = store::read_json(
            self.root,
            store::iteration_dir(index).join("iteration.json"),
        )?;
        if stored != record {
            return Ok(Err(diverge(
                at,
                "iteration.json differs from the event log",
            )));
        }
        if !self.root.join(&record.report_ref).is_file() {
            return Err(Error::integrity(format!(
                "missing report {}",
                record.report_ref
            )));
        }
        self.iterations.push(record);
        Ok(Ok(()))
    }

    fn finish(&self) -> Result<Step> {
        if !self.finished {
            return Err(Error::integrity(
                "event log has no run_finished record (incomplete run)",
            ));
        }
        let ledger: BudgetLedger = store::read_json(self.root, store::LEDGER_FILE)?;
        if ledger != self.ledger {
            return Ok(Err(diverge(
                None,
                "ledger.json differs from the recomputed ledger",
            )));
        }
        if !ledger.is_consistent() || ledger.spent > self.cfg.budget {
            return Ok(Err(diverge(None, "ledger exceeds the budget")));
        }
        for agent in &self.agents {
            let stored: AgentRecord = store::read_json(
                self.root,
                store::agent_dir(&agent.agent_id).join("agent.json"),
            )?;
            if &stored != agent {
                return Ok(Err(diverge(
                    None,
                    format!(
                        "agent.json of {} differs from the replayed state",
                        agent.agent_id
                    ),
                )));
            }
        }
        Ok(Ok(()))
    }
}

/// Replays the run stored at `root`.
///
/// Structural damage (missing files, unparsable records, impossible event
/// order) is an integrity error; a store that parses but disagrees with the
/// recomputation yields a report carrying the first divergence.
pub fn replay(root: &Path) -> Result<ReplayReport> {
    if !root.join(store::EVENTS_FILE).is_file() {
        return Err(Error::integrity(format!(
            "{} has no event log",
            root.display()
        )));
    }
    let events = store::read_events(root)?;
    let mut events = events.into_iter().enumerate();
    let cfg = match events.next() {
        Some((
            _,
            Event::RunStarted {
                schema_version,
                config,
                ..
            },
        )) => {
            if schema_version != store::SCHEMA_VERSION {
                return Err(Error::integrity(format!(
                    "unsupported schema version {schema_version}"
                )));
            }
            config
        }
        Some(_) => return Err(Error::integrity("event log line 1: expected run_started")),
        None => return Err(Error::integrity("event log is empty")),
    };
    let pool: Vec<ExampleRef> = store::read_json(root, store::POOL_FILE)?;
    let mut replayer = Replayer {
        root,
        referee: Referee::new(cfg.rng_seed),
        ledger: BudgetLedger::new(cfg.budget),
        cfg,
        pool,
        agents: Vec::new(),
        cache: HashMap::new(),
        iterations: Vec::new(),
        last_selection: None,
        pending_debut: None,
        finished: false,
    };
    let mut divergence = None;
    for (i, event) in events {
        if let Err(d) = replayer.apply(i + 1, event)? {
            divergence = Some(d);
            break;
        }
    }
    if divergence.is_none() {
        divergence = replayer.finish()?.err();
    }
    Ok(ReplayReport {
        iterations: replayer.iterations.len() as u64,
        agents: replayer.agents.len(),
        evaluations: replayer.ledger.spent,
        divergence,
    })
}
