//! Comparative error reports.
//!
//! Binary tasks list, per agent, the examples only that agent solved and the
//! examples it failed while some competitor solved them. Continuous tasks
//! list the examples with the largest spread of scores between agents.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::EvalOutcome;

/// Scores at or above this count as solved in binary reports; evaluators
/// emit 0.9 for a correct answer that blew its cost budget.
pub const SOLVED_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    #[default]
    Binary,
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportOptions {
    /// Maximum entries per divergence list (and length of `top_deltas`).
    pub divergence_cap: usize,
    /// Maximum bytes of diagnostics or agent stdout inlined per example.
    pub excerpt_bytes: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            divergence_cap: 10,
            excerpt_bytes: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaEntry {
    pub example_id: String,
    pub scores: BTreeMap<String, f64>,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Excerpt {
    pub agent_id: String,
    pub example_id: String,
    pub score: f64,
    pub diagnostics: String,
    pub agent_stdout: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparativeReport {
    pub iteration: u64,
    pub kind: ScoreKind,
    /// Agents in competitor slot order.
    pub agents: Vec<String>,
    pub per_agent_means: BTreeMap<String, f64>,
    #[serde(default)]
    pub ratings: BTreeMap<String, f64>,
    #[serde(default)]
    pub unique_solved: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub unique_failed: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub top_deltas: Vec<DeltaEntry>,
    /// agent -> example -> locator of the stored outcome.
    #[serde(default)]
    pub diagnostics_index: BTreeMap<String, BTreeMap<String, String>>,
    /// Diagnostics for the divergent examples, untruncated.
    #[serde(default)]
    pub excerpts: Vec<Excerpt>,
}

impl ComparativeReport {
    pub fn has_divergence(&self) -> bool {
        match self.kind {
            ScoreKind::Binary => self
                .unique_solved
                .values()
                .chain(self.unique_failed.values())
                .any(|v| !v.is_empty()),
            ScoreKind::Continuous => self.top_deltas.iter().any(|d| d.delta > 0.0),
        }
    }
}

fn solved(score: f64) -> bool {
    score >= SOLVED_THRESHOLD
}

fn push_unique(list: &mut Vec<String>, id: &str) {
    if !list.iter().any(|x| x == id) {
        list.push(id.to_string());
    }
}

/// Builds the report for agents (in slot order) evaluated on the same examples.
///
/// `locate` maps `(agent, example)` to where the full outcome is stored.
pub fn build_report(
    iteration: u64,
    outcomes: &[(String, Vec<EvalOutcome>)],
    kind: ScoreKind,
    opts: &ReportOptions,
    locate: &dyn Fn(&str, &str) -> String,
) -> Result<ComparativeReport> {
    let Some((_, reference)) = outcomes.first() else {
        return Err(Error::Arity {
            what: "a comparative report",
            min: 1,
            got: 0,
        });
    };
    let ids: Vec<&str> = reference.iter().map(|o| o.example_id.as_str()).collect();
    for (agent, list) in outcomes {
        let other: Vec<&str> = list.iter().map(|o| o.example_id.as_str()).collect();
        if other != ids {
            return Err(Error::Alignment(format!(
                "agent {agent} was evaluated on a different example set"
            )));
        }
    }

    let agents: Vec<String> = outcomes.iter().map(|(a, _)| a.clone()).collect();
    let per_agent_means = outcomes
        .iter()
        .map(|(a, list)| {
            let mean = if list.is_empty() {
                0.0
            } else {
                list.iter().map(|o| o.score).sum::<f64>() / list.len() as f64
            };
            (a.clone(), mean)
        })
        .collect();

    let mut report = ComparativeReport {
        iteration,
        kind,
        agents: agents.clone(),
        per_agent_means,
        ratings: BTreeMap::new(),
        unique_solved: BTreeMap::new(),
        unique_failed: BTreeMap::new(),
        top_deltas: Vec::new(),
        diagnostics_index: BTreeMap::new(),
        excerpts: Vec::new(),
    };

    // (position, agent index) pairs worth quoting diagnostics for.
    let mut divergent: Vec<(usize, usize)> = Vec::new();
    match kind {
        ScoreKind::Binary => {
            for a in &agents {
                report.unique_solved.insert(a.clone(), Vec::new());
                report.unique_failed.insert(a.clone(), Vec::new());
            }
            for (pos, id) in ids.iter().enumerate() {
                let flags: Vec<bool> = outcomes.iter().map(|(_, l)| solved(l[pos].score)).collect();
                let n_solved = flags.iter().filter(|&&f| f).count();
                if n_solved == 0 || n_solved == flags.len() {
                    continue;
                }
                for (i, (agent, _)) in outcomes.iter().enumerate() {
                    if flags[i] && n_solved == 1 {
                        push_unique(
                            report.unique_solved.get_mut(agent).expect("agent entry"),
                            id,
                        );
                    } else if !flags[i] {
                        push_unique(
                            report.unique_failed.get_mut(agent).expect("agent entry"),
                            id,
                        );
                    }
                    divergent.push((pos, i));
                }
            }
        }
        ScoreKind::Continuous => {
            let mut deltas: Vec<(usize, DeltaEntry)> = ids
                .iter()
                .enumerate()
                .map(|(pos, id)| {
                    let scores: Vec<f64> = outcomes.iter().map(|(_, l)| l[pos].score).collect();
                    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
                    let entry = DeltaEntry {
                        example_id: id.to_string(),
                        scores: agents.iter().cloned().zip(scores).collect(),
                        delta: hi - lo,
                    };
                    (pos, entry)
                })
                .collect();
            // Stable: equal deltas keep example order.
            deltas.sort_by(|a, b| b.1.delta.total_cmp(&a.1.delta));
            let mut seen = Vec::new();
            for (pos, entry) in deltas {
                if report.top_deltas.len() >= opts.divergence_cap {
                    break;
                }
                if seen.contains(&entry.example_id) {
                    continue;
                }
                seen.push(entry.example_id.clone());
                if entry.delta > 0.0 {
                    divergent.extend((0..agents.len()).map(|i| (pos, i)));
                }
                report.top_deltas.push(entry);
            }
        }
    }

    for (agent, list) in outcomes {
        let index = report.diagnostics_index.entry(agent.clone()).or_default();
        for o in list {
            index
                .entry(o.example_id.clone())
                .or_insert_with(|| locate(agent, &o.example_id));
        }
    }

    let mut quoted = Vec::new();
    for (pos, i) in divergent {
        let (agent, list) = &outcomes[i];
        let o = &list[pos];
        if quoted.contains(&(i, o.example_id.clone())) {
            continue;
        }
        quoted.push((i, o.example_id.clone()));
        if o.diagnostics.is_empty() && o.agent_stdout.is_empty() {
            continue;
        }
        report.excerpts.push(Excerpt {
            agent_id: agent.clone(),
            example_id: o.example_id.clone(),
            score: o.score,
            diagnostics: o.diagnostics.clone(),
            agent_stdout: o.agent_stdout.clone(),
        });
    }
    Ok(report)
}

/// Cuts `text` to at most `cap` bytes on a character boundary, appending a
/// marker with the number of bytes dropped.
pub fn truncate_excerpt(text: &str, cap: usize) -> String {
    if text.len() <= cap {
        return text.to_string();
    }
    let mut end = cap;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}...[truncated {} bytes]", &text[..end], text.len() - end)
}

fn write_list(out: &mut String, label: &str, agent: &str, ids: &[String], cap: usize) {
    if ids.is_empty() {
        return;
    }
    let shown: Vec<&str> = ids.iter().take(cap).map(String::as_str).collect();
    let _ = write!(out, "  {label} {agent}: {}", shown.join(", "));
    if ids.len() > cap {
        let _ = write!(out, " (+{} more)", ids.len() - cap);
    }
    out.push('\n');
}

pub fn render_text(report: &ComparativeReport, opts: &ReportOptions) -> String {
    let mut out = String::new();
    let kind = match report.kind {
        ScoreKind::Binary => "binary",
        ScoreKind::Continuous => "continuous",
    };
    let _ = writeln!(
        out,
        "# Comparative report: iteration {} ({kind})",
        report.iteration
    );

    out.push_str("\n## Standings\n");
    if report.ratings.is_empty() {
        out.push_str("  (no ratings recorded)\n");
    } else {
        let mut standings: Vec<(&String, &f64)> = report.ratings.iter().collect();
        standings.sort_by(|a, b| b.1.total_cmp(a.1).then(a.0.cmp(b.0)));
        for (rank, (agent, rating)) in standings.iter().enumerate() {
            let _ = writeln!(out, "  {:>2}. {agent}  {rating:.2}", rank + 1);
        }
    }

    out.push_str("\n## Mean scores\n");
    for agent in &report.agents {
        let _ = writeln!(out, "  {agent}  {:.4}", report.per_agent_means[agent]);
    }

    out.push_str("\n## Divergence\n");
    if !report.has_divergence() {
        out.push_str("  no divergence\n");
    } else {
        match report.kind {
            ScoreKind::Binary => {
                for agent in &report.agents {
                    write_list(
                        &mut out,
                        "uniquely solved by",
                        agent,
                        &report.unique_solved[agent],
                        opts.divergence_cap,
                    );
                }
                for agent in &report.agents {
                    write_list(
                        &mut out,
                        "failed (solved by another) by",
                        agent,
                        &report.unique_failed[agent],
                        opts.divergence_cap,
                    );
                }
            }
            ScoreKind::Continuous => {
                for entry in report.top_deltas.iter().take(opts.divergence_cap) {
                    let scores: Vec<String> = report
                        .agents
                        .iter()
                        .map(|a| format!("{a}={}", entry.scores[a]))
                        .collect();
                    let _ = writeln!(
                        out,
                        "  {}  delta {}  [{}]",
                        entry.example_id,
                        entry.delta,
                        scores.join(", ")
                    );
                }
            }
        }
    }

    if !report.excerpts.is_empty() {
        out.push_str("\n## Diagnostics\n");
        for e in &report.excerpts {
            let _ = writeln!(
                out,
                "### {} / {} (score {})",
                e.agent_id, e.example_id, e.score
            );
            if !e.diagnostics.is_empty() {
                let _ = writeln!(
                    out,
                    "diagnostics:\n{}",
                    truncate_excerpt(&e.diagnostics, opts.excerpt_bytes)
                );
            }
            if !e.agent_stdout.is_empty() {
                let _ = writeln!(
                    out,
                    "agent_stdout:\n{}",
                    truncate_excerpt(&e.agent_stdout, opts.excerpt_bytes)
                );
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn outcome(agent: &str, example: &str, score: f64) -> EvalOutcome {
        EvalOutcome {
            agent_id: agent.into(),
            example_id: example.into(),
            score,
            fingerprint: None,
            diagnostics: format!("{agent} on {example}"),
            agent_stdout: String::new(),
            failed: false,
        }
    }

    fn binary(agent: &str, solved: &[u32], all: &[u32]) -> (String, Vec<EvalOutcome>) {
        let list = all
            .iter()
            .map(|e| {
                outcome(
                    agent,
                    &e.to_string(),
                    if solved.contains(e) { 1.0 } else { 0.0 },
                )
            })
            .collect();
        (agent.to_string(), list)
    }

    fn locate(a: &str, e: &str) -> String {
        format!("{a}#{e}")
    }

    /// Set algebra over solved sets, independent of the report code.
    fn brute_force(
        solved: &[(&str, BTreeSet<u32>)],
        all: &[u32],
    ) -> (Vec<BTreeSet<u32>>, Vec<BTreeSet<u32>>) {
        let mut only = Vec::new();
        let mut failed = Vec::new();
        for (i, (_, mine)) in solved.iter().enumerate() {
            let others: BTreeSet<u32> = solved
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .flat_map(|(_, (_, s))| s.iter().copied())
                .collect();
            only.push(mine.difference(&others).copied().collect());
            let all_set: BTreeSet<u32> = all.iter().copied().collect();
            let missed: BTreeSet<u32> = all_set.difference(mine).copied().collect();
            failed.push(missed.intersection(&others).copied().collect());
        }
        (only, failed)
    }

    #[test]
    fn binary_unique_sets() {
        let all = [1, 2, 3, 4];
        let outcomes = vec![
            binary("A", &[1, 2, 3], &all),
            binary("B", &[2, 3, 4], &all),
            binary("C", &[2, 3], &all),
        ];
        let report = build_report(
            0,
            &outcomes,
            ScoreKind::Binary,
            &ReportOptions::default(),
            &locate,
        )
        .unwrap();
        let ids = |v: &Vec<String>| {
            v.iter()
                .map(|s| s.parse::<u32>().unwrap())
                .collect::<BTreeSet<_>>()
        };
        let (only, failed) = brute_force(
            &[
                ("A", [1, 2, 3].into()),
                ("B", [2, 3, 4].into()),
                ("C", [2, 3].into()),
            ],
            &all,
        );
        for (i, a) in ["A", "B", "C"].iter().enumerate() {
            assert_eq!(ids(&report.unique_solved[*a]), only[i]);
            assert_eq!(ids(&report.unique_failed[*a]), failed[i]);
        }
        assert_eq!(ids(&report.unique_solved["A"]), [1].into());
        assert_eq!(ids(&report.unique_failed["C"]), [1, 4].into());
    }

    #[test]
    fn identical_outcomes_have_no_divergence() {
        let all = [1, 2, 3];
        let outcomes = vec![binary("A", &[1], &all), binary("B", &[1], &all)];
        let report = build_report(
            0,
            &outcomes,
            ScoreKind::Binary,
            &ReportOptions::default(),
            &locate,
        )
        .unwrap();
        assert!(!report.has_divergence());
        assert!(render_text(&report, &ReportOptions::default()).contains("no divergence"));
    }

    #[test]
    fn over_budget_correct_counts_as_solved() {
        let outcomes = vec![
            ("A".to_string(), vec![outcome("A", "e", 0.9)]),
            ("B".to_string(), vec![outcome("B", "e", 0.0)]),
        ];
        let report = build_report(
            0,
            &outcomes,
            ScoreKind::Binary,
            &ReportOptions::default(),
            &locate,
        )
        .unwrap();
        assert_eq!(report.unique_solved["A"], vec!["e"]);
    }

    #[test]
    fn continuous_top_deltas() {
        let outcomes = vec![
            (
                "A".to_string(),
                vec![outcome("A", "e1", -90.0), outcome("A", "e2", -95.0)],
            ),
            (
                "B".to_string(),
                vec![outcome("B", "e1", -100.0), outcome("B", "e2", -96.0)],
            ),
        ];
        let report = build_report(
            0,
            &outcomes,
            ScoreKind::Continuous,
            &ReportOptions::default(),
            &locate,
        )
        .unwrap();
        let got: Vec<(&str, f64)> = report
            .top_deltas
            .iter()
            .map(|d| (d.example_id.as_str(), d.delta))
            .collect();
        assert_eq!(got, [("e1", 10.0), ("e2", 1.0)]);
    }

    #[test]
    fn continuous_cap() {
        let opts = ReportOptions {
            divergence_cap: 3,
            ..Default::default()
        };
        let mk = |agent: &str, f: f64| {
            (
                agent.to_string(),
                (0..8)
                    .map(|i| outcome(agent, &format!("e{i}"), f * i as f64))
                    .collect::<Vec<_>>(),
            )
        };
        let report = build_report(
            0,
            &[mk("A", 1.0), mk("B", 2.0)],
            ScoreKind::Continuous,
            &opts,
            &locate,
        )
        .unwrap();
        let got: Vec<&str> = report
            .top_deltas
            .iter()
            .map(|d| d.example_id.as_str())
            .collect();
        assert_eq!(got, ["e7", "e6", "e5"]);
    }

    #[test]
    fn misaligned_examples_are_rejected() {
        let outcomes = vec![binary("A", &[1], &[1, 2]), binary("B", &[1], &[1, 3])];
        let err = build_report(
            0,
            &outcomes,
            ScoreKind::Binary,
            &ReportOptions::default(),
            &locate,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Alignment(_)));
    }

    #[test]
    fn unique_id_is_listed_once_under_solver() {
        let all = [1, 2];
        let outcomes = vec![binary("A", &[1, 2], &all), binary("B", &[2], &all)];
        let report = build_report(
            0,
            &outcomes,
            ScoreKind::Binary,
            &ReportOptions::default(),
            &locate,
        )
        .unwrap();
        let text = render_text(&report, &ReportOptions::default());
        let line = text
            .lines()
            .find(|l| l.contains("uniquely solved by A"))
            .unwrap();
        assert_eq!(line.matches('1').count(), 1);
        assert!(!text.contains("uniquely solved by B"));
    }

    #[test]
    fn truncation_marker() {
        let text = "x".repeat(100);
        let cut = truncate_excerpt(&text, 10);
        assert!(cut.starts_with(&"x".repeat(10)));
        assert!(!cut.starts_with(&"x".repeat(11)));
        assert!(cut.ends_with("...[truncated 90 bytes]"));
        assert_eq!(truncate_excerpt("short", 10), "short");
        // Never splits a multi-byte character.
        assert!(truncate_excerpt("ééééé", 3).starts_with('é'));
    }

    #[test]
    fn rendering_is_deterministic() {
        let all = [1, 2, 3];
        let outcomes = vec![binary("A", &[1], &all), binary("B", &[2], &all)];
        let r1 = build_report(
            4,
            &outcomes,
            ScoreKind::Binary,
            &ReportOptions::default(),
            &locate,
        )
        .unwrap();
        let r2 = build_report(
            4,
            &outcomes,
            ScoreKind::Binary,
            &ReportOptions::default(),
            &locate,
        )
        .unwrap();
        let opts = ReportOptions::default();
        assert_eq!(render_text(&r1, &opts), render_text(&r2, &opts));
        assert_eq!(r1.diagnostics_index["A"]["2"], "A#2");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn unique_solved_sets_are_disjoint(grid in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 12), 2..5)) {
                let all: Vec<u32> = (0..12).collect();
                let outcomes: Vec<_> = grid.iter().enumerate().map(|(i, row)| {
                    let solved: Vec<u32> = row.iter().enumerate().filter(|(_, &s)| s).map(|(e, _)| e as u32).collect();
                    binary(&format!("a{i}"), &solved, &all)
                }).collect();
                let report = build_report(0, &outcomes, ScoreKind::Binary, &ReportOptions::default(), &locate).unwrap();
                let lists: Vec<&Vec<String>> = report.unique_solved.values().collect();
                for i in 0..lists.len() {
                    for j in (i + 1)..lists.len() {
                        prop_assert!(lists[i].iter().all(|x| !lists[j].contains(x)));
                    }
                }
            }

            #[test]
            fn delta_is_max_pairwise_gap(grid in proptest::collection::vec(proptest::collection::vec(-100.0f64..100.0, 6), 2..4)) {
                let outcomes: Vec<_> = grid.iter().enumerate().map(|(i, row)| {
                    let agent = format!("a{i}");
                    let list = row.iter().enumerate().map(|(e, &s)| outcome(&agent, &format!("e{e}"), s)).collect();
                    (agent, list)
                }).collect();
                let report = build_report(0, &outcomes, ScoreKind::Continuous, &ReportOptions::default(), &locate).unwrap();
                for entry in &report.top_deltas {
                    let e: usize = entry.example_id[1..].parse().unwrap();
                    let mut best: f64 = 0.0;
                    for a in &grid { for b in &grid { best = best.max((a[e] - b[e]).abs()); } }
                    prop_assert_eq!(entry.delta, best);
                }
                for w in report.top_deltas.windows(2) {
                    prop_assert!(w[0].delta >= w[1].delta);
                }
            }
        }
    }
}
