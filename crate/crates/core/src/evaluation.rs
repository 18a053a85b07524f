//! Evaluation orchestration: evaluator plugins, the outcome cache and the
//! global budget ledger.
//!
//! One evaluation is one `(agent, example)` attempt that missed the cache.
//! Failed attempts still cost budget and are recorded as score-0 outcomes.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::thread;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExampleRef {
    pub example_id: String,
    pub payload_ref: String,
}

impl ExampleRef {
    pub fn new(example_id: impl Into<String>, payload_ref: impl Into<String>) -> Self {
        ExampleRef {
            example_id: example_id.into(),
            payload_ref: payload_ref.into(),
        }
    }
}

/// Checks that a pool is non-empty with unique, non-empty ids.
pub fn validate_pool(pool: &[ExampleRef]) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::config("example pool is empty"));
    }
    let mut seen = HashSet::with_capacity(pool.len());
    for example in pool {
        if example.example_id.is_empty() {
            return Err(Error::config("example pool contains an empty example_id"));
        }
        if !seen.insert(example.example_id.as_str()) {
            return Err(Error::config(format!(
                "duplicate example_id {:?} in pool",
                example.example_id
            )));
        }
    }
    Ok(())
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// Result of evaluating one agent on one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub agent_id: String,
    pub example_id: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    #[serde(default)]
    pub diagnostics: String,
    #[serde(default)]
    pub agent_stdout: String,
    /// Set when the evaluator crashed, timed out or gave no usable reply.
    #[serde(default, skip_serializing_if = "is_false")]
    pub failed: bool,
}

impl EvalOutcome {
    pub fn failure(agent_id: &str, example_id: &str, reason: &str) -> Self {
        EvalOutcome {
            agent_id: agent_id.to_string(),
            example_id: example_id.to_string(),
            score: 0.0,
            fingerprint: None,
            diagnostics: format!("evaluation failed: {reason}"),
            agent_stdout: String::new(),
            failed: true,
        }
    }
}

/// Arithmetic mean of the outcome scores.
pub fn mean_score(outcomes: &[EvalOutcome]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::Arity {
            what: "mean_score",
            min: 1,
            got: 0,
        });
    }
    let sum: f64 = outcomes.iter().map(|o| o.score).sum();
    Ok(sum / outcomes.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Tournament,
    DeepFocus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Debit {
    pub iteration: u64,
    pub phase: Phase,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub total: u64,
    pub spent: u64,
    pub per_phase: Vec<Debit>,
}

impl BudgetLedger {
    pub fn new(total: u64) -> Self {
        BudgetLedger {
            total,
            spent: 0,
            per_phase: Vec::new(),
        }
    }

    pub fn remaining(&self) -> u64 {
        self.total - self.spent
    }

    /// Charges `count` evaluations. Consecutive debits for the same
    /// iteration and phase are merged into one entry.
    pub fn debit(&mut self, iteration: u64, phase: Phase, count: u64) -> Result<()> {
        if count > self.remaining() {
            return Err(Error::BudgetExhausted {
                needed: count,
                remaining: self.remaining(),
            });
        }
        if count == 0 {
            return Ok(());
        }
        self.spent += count;
        match self.per_phase.last_mut() {
            Some(last) if last.iteration == iteration && last.phase == phase => last.count += count,
            _ => self.per_phase.push(Debit {
                iteration,
                phase,
                count,
            }),
        }
        Ok(())
    }

    pub fn is_consistent(&self) -> bool {
        self.spent <= self.total
            && self.per_phase.iter().map(|d| d.count).sum::<u64>() == self.spent
    }
}

/// One line of evaluator output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    pub example_id: String,
    pub score: f64,
    #[serde(default)]
    pub fingerprint: Option<String>,
    #[serde(default)]
    pub diagnostics: Option<String>,
    #[serde(default)]
    pub agent_stdout: Option<String>,
}

/// Scores an agent artifact on a batch of examples.
///
/// `Err` means the whole batch failed (crash, timeout, unreadable output);
/// the reason is copied into each outcome's diagnostics. Examples missing
/// from an `Ok` reply are individually marked failed.
pub trait Evaluator: Send + Sync {
    fn evaluate(
        &self,
        artifact_dir: &Path,
        examples: &[ExampleRef],
    ) -> std::result::Result<Vec<ScoredExample>, String>;
}

/// What is being evaluated: an agent at a given artifact revision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalSubject {
    pub agent_id: String,
    pub revision: u32,
    pub artifact_dir: PathBuf,
}

/// A freshly computed (cache-missing) outcome, as persisted in the run store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub iteration: u64,
    pub phase: Phase,
    pub revision: u32,
    pub outcome: EvalOutcome,
}

/// Receives every newly computed outcome before `evaluate_*` returns.
pub trait OutcomeSink {
    fn record(&mut self, record: &EvaluationRecord) -> Result<()>;
}

impl OutcomeSink for Vec<EvaluationRecord> {
    fn record(&mut self, record: &EvaluationRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

type CacheKey = (String, u32, String);

#[derive(Debug, Default, Clone)]
pub struct OutcomeCache {
    entries: HashMap<CacheKey, EvalOutcome>,
}

impl OutcomeCache {
    pub fn get(&self, agent_id: &str, revision: u32, example_id: &str) -> Option<&EvalOutcome> {
        // HashMap<(String, ..)> cannot be queried by borrowed tuple; the
        // allocation is negligible next to an evaluation.
        self.entries
            .get(&(agent_id.to_string(), revision, example_id.to_string()))
    }

    /// Keeps the first observed outcome for a key.
    pub fn insert(&mut self, revision: u32, outcome: EvalOutcome) {
        let key = (
            outcome.agent_id.clone(),
            revision,
            outcome.example_id.clone(),
        );
        self.entries.entry(key).or_insert(outcome);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DebitContext {
    pub iteration: u64,
    pub phase: Phase,
}

/// Evaluator plus cache plus ledger. All ledger and cache mutation happens on
/// the calling thread; only evaluator invocations run concurrently.
pub struct Evaluation {
    evaluator: Box<dyn Evaluator>,
    ledger: BudgetLedger,
    cache: OutcomeCache,
    parallelism: usize,
}

impl Evaluation {
    pub fn new(evaluator: Box<dyn Evaluator>, budget: u64, parallelism: usize) -> Self {
        Evaluation {
            evaluator,
            ledger: BudgetLedger::new(budget),
            cache: OutcomeCache::default(),
            parallelism: parallelism.max(1),
        }
    }

    pub fn ledger(&self) -> &BudgetLedger {
        &self.ledger
    }

    pub fn remaining(&self) -> u64 {
        self.ledger.remaining()
    }

    pub fn cache(&self) -> &OutcomeCache {
        &self.cache
    }

    /// Distinct example ids in `examples` that `subject` has no cached outcome for.
    fn uncached(&self, subject: &EvalSubject, examples: &[ExampleRef]) -> Vec<ExampleRef> {
        let mut seen = HashSet::new();
        examples
            .iter()
            .filter(|e| {
                self.cache
                    .get(&subject.agent_id, subject.revision, &e.example_id)
                    .is_none()
                    && seen.insert(e.example_id.clone())
            })
            .cloned()
            .collect()
    }

    pub fn uncached_count(&self, subjects: &[EvalSubject], examples: &[ExampleRef]) -> u64 {
        subjects
            .iter()
            .map(|s| self.uncached(s, examples).len() as u64)
            .sum()
    }

    pub fn evaluate_batch(
        &mut self,
        subject: &EvalSubject,
        examples: &[ExampleRef],
        ctx: DebitContext,
        sink: &mut dyn OutcomeSink,
    ) -> Result<Vec<EvalOutcome>> {
        let mut all = self.evaluate_many(std::slice::from_ref(subject), examples, ctx, sink)?;
        Ok(all.pop().unwrap_or_default())
    }

    /// Evaluates several subjects on the same examples.
    ///
    /// The budget check covers every subject at once: if the combined
    /// cache misses exceed the remaining budget nothing is invoked or debited.
    pub fn evaluate_many(
        &mut self,
        subjects: &[EvalSubject],
        examples: &[ExampleRef],
        ctx: DebitContext,
        sink: &mut dyn OutcomeSink,
    ) -> Result<Vec<Vec<EvalOutcome>>> {
        let pending: Vec<Vec<ExampleRef>> = subjects
            .iter()
            .map(|s| self.uncached(s, examples))
            .collect();
        let needed: u64 = pending.iter().map(|p| p.len() as u64).sum();
        if needed > self.ledger.remaining() {
            return Err(Error::BudgetExhausted {
                needed,
                remaining: self.ledger.remaining(),
            });
        }

        let replies = self.invoke(subjects, &pending);
        self.ledger.debit(ctx.iteration, ctx.phase, needed)?;

        for ((subject, batch), reply) in subjects.iter().zip(&pending).zip(replies) {
            for outcome in collect_outcomes(&subject.agent_id, batch, reply) {
                let record = EvaluationRecord {
                    iteration: ctx.iteration,
                    phase: ctx.phase,
                    revision: subject.revision,
                    outcome,
                };
                sink.record(&record)?;
                self.cache.insert(record.revision, record.outcome);
            }
        }

        subjects
            .iter()
            .map(|s| {
                examples
                    .iter()
                    .map(|e| {
                        self.cache
                            .get(&s.agent_id, s.revision, &e.example_id)
                            .cloned()
                            .ok_or_else(|| {
                                Error::integrity(format!(
                                    "missing outcome for {}/{}",
                                    s.agent_id, e.example_id
                                ))
                            })
                    })
                    .collect()
            })
            .collect()
    }

    fn invoke(
        &self,
        subjects: &[EvalSubject],
        pending: &[Vec<ExampleRef>],
    ) -> Vec<std::result::Result<Vec<ScoredExample>, String>> {
        let jobs: Vec<(usize, &EvalSubject, &Vec<ExampleRef>)> = subjects
            .iter()
            .zip(pending)
            .enumerate()
            .filter(|(_, (_, p))| !p.is_empty())
            .map(|(i, (s, p))| (i, s, p))
            .collect();
        let mut replies: Vec<std::result::Result<Vec<ScoredExample>, String>> =
            vec![Ok(Vec::new()); subjects.len()];
        let evaluator = self.evaluator.as_ref();
        for chunk in jobs.chunks(self.parallelism) {
            let results: Vec<(usize, _)> = thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|(i, subject, batch)| {
                        let i = *i;
                        (
                            i,
                            scope.spawn(move || evaluator.evaluate(&subject.artifact_dir, batch)),
                        )
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|(i, h)| {
                        (
                            i,
                            h.join()
                                .unwrap_or_else(|_| Err("evaluator panicked".to_string())),
                        )
                    })
                    .collect()
            });
            for (i, r) in results {
                replies[i] = r;
            }
        }
        replies
    }

    /// Restores a persisted outcome without debiting or invoking anything.
    pub fn restore(&mut self, record: &EvaluationRecord) {
        self.cache.insert(record.revision, record.outcome.clone());
    }
}

fn collect_outcomes(
    agent_id: &str,
    batch: &[ExampleRef],
    reply: std::result::Result<Vec<ScoredExample>, String>,
) -> Vec<EvalOutcome> {
    match reply {
        Err(reason) => batch
            .iter()
            .map(|e| EvalOutcome::failure(agent_id, &e.example_id, &reason))
            .collect(),
        Ok(lines) => {
            let mut by_id: HashMap<String, ScoredExample> = HashMap::new();
            for line in lines {
                by_id.entry(line.example_id.clone()).or_insert(line);
            }
            batch
                .iter()
                .map(|e| match by_id.remove(&e.example_id) {
                    None => EvalOutcome::failure(
                        agent_id,
                        &e.example_id,
                        "no result line for this example",
                    ),
                    Some(line) if !line.score.is_finite() => {
                        EvalOutcome::failure(agent_id, &e.example_id, "non-finite score")
                    }
                    Some(line) => EvalOutcome {
                        agent_id: agent_id.to_string(),
                        example_id: e.example_id.clone(),
                        score: line.score,
                        fingerprint: line.fingerprint,
                        diagnostics: line.diagnostics.unwrap_or_default(),
                        agent_stdout: line.agent_stdout.unwrap_or_default(),
                        failed: false,
                    },
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    struct Counting {
        calls: Arc<AtomicUsize>,
        fail: bool,
    }

    impl Evaluator for Counting {
        fn evaluate(
            &self,
            _dir: &Path,
            examples: &[ExampleRef],
        ) -> std::result::Result<Vec<ScoredExample>, String> {
            self.calls.fetch_add(examples.len(), Ordering::SeqCst);
            if self.fail {
                return Err("boom".into());
            }
            Ok(examples
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != 3 || examples.len() < 10)
                .map(|(i, e)| ScoredExample {
                    example_id: e.example_id.clone(),
                    score: (i % 2) as f64,
                    fingerprint: Some(format!("p{i}")),
                    diagnostics: None,
                    agent_stdout: Some("hello".into()),
                })
                .collect())
        }
    }

    fn examples(n: usize) -> Vec<ExampleRef> {
        (0..n)
            .map(|i| ExampleRef::new(format!("e{i}"), format!("data/{i}")))
            .collect()
    }

    fn subject(id: &str) -> EvalSubject {
        EvalSubject {
            agent_id: id.into(),
            revision: 0,
            artifact_dir: PathBuf::from("/nonexistent"),
        }
    }

    const CTX: DebitContext = DebitContext {
        iteration: 0,
        phase: Phase::Tournament,
    };

    fn service(fail: bool, budget: u64) -> (Evaluation, Arc<AtomicUsize>) {
        let calls = Arc::new(AtomicUsize::new(0));
        let eval = Counting {
            calls: calls.clone(),
            fail,
        };
        (Evaluation::new(Box::new(eval), budget, 2), calls)
    }

    #[test]
    fn remaining_examples() {
        let mut ledger = BudgetLedger::new(1500);
        assert_eq!(ledger.remaining(), 1500);
        ledger.debit(0, Phase::Tournament, 80).unwrap();
        assert_eq!(ledger.remaining(), 1420);
        ledger.debit(1, Phase::Tournament, 1420).unwrap();
        assert_eq!(ledger.remaining(), 0);
        assert!(ledger.is_consistent());
    }

    #[test]
    fn mean_score_examples() {
        let outcome = |s: f64| EvalOutcome {
            agent_id: "A".into(),
            example_id: "e".into(),
            score: s,
            fingerprint: None,
            diagnostics: String::new(),
            agent_stdout: String::new(),
            failed: false,
        };
        let m = |s: &[f64]| mean_score(&s.iter().map(|&x| outcome(x)).collect::<Vec<_>>()).unwrap();
        assert_eq!(m(&[1.0, 0.0, 1.0, 0.0]), 0.5);
        assert_eq!(m(&[1.0; 20]), 1.0);
        assert!((m(&[0.9, 1.0, 0.0]) - 1.9 / 3.0).abs() < 1e-15);
        assert!(matches!(mean_score(&[]), Err(Error::Arity { .. })));
    }

    #[test]
    fn batch_debits_once_and_caches() {
        let (mut svc, calls) = service(false, 1500);
        let mut sink = Vec::new();
        let ex = examples(20);
        let first = svc
            .evaluate_batch(&subject("A"), &ex, CTX, &mut sink)
            .unwrap();
        assert_eq!(first.len(), 20);
        assert_eq!(svc.ledger().spent, 20);
        assert_eq!(sink.len(), 20);

        let again = svc
            .evaluate_batch(&subject("A"), &ex, CTX, &mut sink)
            .unwrap();
        assert_eq!(again, first);
        assert_eq!(svc.ledger().spent, 20);
        assert_eq!(calls.load(Ordering::SeqCst), 20);
        assert_eq!(sink.len(), 20);
    }

    #[test]
    fn outcomes_follow_input_order() {
        let (mut svc, _) = service(false, 100);
        let ex = examples(5);
        let mut reversed = ex.clone();
        reversed.reverse();
        let out = svc
            .evaluate_batch(&subject("A"), &reversed, CTX, &mut Vec::new())
            .unwrap();
        let ids: Vec<_> = out.iter().map(|o| o.example_id.as_str()).collect();
        assert_eq!(ids, ["e4", "e3", "e2", "e1", "e0"]);
    }

    #[test]
    fn insufficient_budget_invokes_nothing() {
        let (mut svc, calls) = service(false, 5);
        let err = svc
            .evaluate_batch(&subject("A"), &examples(20), CTX, &mut Vec::new())
            .unwrap_err();
        assert!(matches!(
            err,
            Error::BudgetExhausted {
                needed: 20,
                remaining: 5
            }
        ));
        assert_eq!(svc.ledger().spent, 0);
        assert_eq!(calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn crashed_batch_scores_zero_and_still_debits() {
        let (mut svc, _) = service(true, 100);
        let out = svc
            .evaluate_batch(&subject("A"), &examples(4), CTX, &mut Vec::new())
            .unwrap();
        assert_eq!(svc.ledger().spent, 4);
        assert!(out
            .iter()
            .all(|o| o.failed && o.score == 0.0 && o.diagnostics.contains("boom")));
    }

    #[test]
    fn missing_reply_line_becomes_failure() {
        let (mut svc, _) = service(false, 100);
        let out = svc
            .evaluate_batch(&subject("A"), &examples(12), CTX, &mut Vec::new())
            .unwrap();
        assert!(out[3].failed);
        assert!(out[3].diagnostics.contains("no result line"));
        assert!(!out[2].failed);
        assert_eq!(svc.ledger().spent, 12);
    }

    #[test]
    fn duplicate_examples_in_batch_debit_once() {
        let (mut svc, _) = service(false, 100);
        let mut ex = examples(3);
        ex.push(ex[0].clone());
        let out = svc
            .evaluate_batch(&subject("A"), &ex, CTX, &mut Vec::new())
            .unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out[0], out[3]);
        assert_eq!(svc.ledger().spent, 3);
    }

    #[test]
    fn many_subjects_share_one_budget_check() {
        let (mut svc, calls) = service(false, 50);
        let subjects = [subject("A"), subject("B"), subject("C")];
        let err = svc
            .evaluate_many(&subjects, &examples(20), CTX, &mut Vec::new())
            .unwrap_err();
        assert!(matches!(err, Error::BudgetExhausted { needed: 60, .. }));
        assert_eq!(calls.load(Ordering::SeqCst), 0);

        let out = svc
            .evaluate_many(&subjects[..2], &examples(20), CTX, &mut Vec::new())
            .unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(svc.ledger().spent, 40);
    }

    #[test]
    fn revisions_are_cached_separately() {
        let (mut svc, _) = service(false, 100);
        let ex = examples(5);
        svc.evaluate_batch(&subject("A"), &ex, CTX, &mut Vec::new())
            .unwrap();
        let mut revised = subject("A");
        revised.revision = 1;
        svc.evaluate_batch(&revised, &ex, CTX, &mut Vec::new())
            .unwrap();
        assert_eq!(svc.ledger().spent, 10);
    }

    #[test]
    fn pool_validation() {
        assert!(validate_pool(&[]).is_err());
        assert!(validate_pool(&[ExampleRef::new("", "x")]).is_err());
        assert!(validate_pool(&[ExampleRef::new("a", "x"), ExampleRef::new("a", "y")]).is_err());
        assert!(validate_pool(&examples(3)).is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ledger_conservation(ops in proptest::collection::vec((0u64..5, any::<bool>(), 0u64..40), 0..30)) {
                let mut ledger = BudgetLedger::new(300);
                for (it, df, count) in ops {
                    let phase = if df { Phase::DeepFocus } else { Phase::Tournament };
                    let _ = ledger.debit(it, phase, count);
                    prop_assert!(ledger.is_consistent());
                }
            }
        }
    }
}
