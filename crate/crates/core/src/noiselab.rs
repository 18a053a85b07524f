//! Selection-noise analysis for agents with close true accuracies.
//!
//! Single-round quantities (tie rates, top-1 probabilities) are computed
//! exactly from binomial distributions. Multi-round ranking accuracy under a
//! depth/breadth budget split is estimated by Monte Carlo, with one ChaCha
//! stream per trial so results do not depend on the worker count.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rating::{round_deltas, INITIAL_RATING};

/// Probability mass function of Bin(n, p) over 0..=n.
///
/// Coefficients come from the exact multiplicative recurrence
/// C(n, k+1) = C(n, k) (n-k) / (k+1), which is exact in f64 while
/// C(n, k) < 2^53 and correctly rounded well beyond that.
pub fn binomial_pmf(n: u32, p: f64) -> Vec<f64> {
    let mut coeff = 1.0f64;
    (0..=n)
        .map(|k| {
            let c = coeff;
            coeff = coeff * f64::from(n - k) / f64::from(k + 1);
            c * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
        })
        .collect()
}

fn cumulative(pmf: &[f64]) -> Vec<f64> {
    pmf.iter()
        .scan(0.0, |acc, &x| {
            *acc += x;
            Some(*acc)
        })
        .collect()
}

fn validate(n: u32, accuracies: &[f64], min_agents: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::config("n must be at least 1"));
    }
    if accuracies.len() < min_agents {
        return Err(Error::Arity {
            what: "accuracies",
            min: min_agents,
            got: accuracies.len(),
        });
    }
    if let Some(p) = accuracies.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::config(format!("accuracy {p} is outside [0, 1]")));
    }
    Ok(())
}

/// Probability that two agents with accuracies `p1` and `p2` score the same
/// number of correct answers out of `n`.
pub fn exact_tie_probability(n: u32, p1: f64, p2: f64) -> Result<f64> {
    validate(n, &[p1, p2], 2)?;
    let (a, b) = (binomial_pmf(n, p1), binomial_pmf(n, p2));
    Ok(a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>().min(1.0))
}

/// Probability that the highest score among all agents is shared by at least
/// two of them (the top two tie). Equals [`exact_tie_probability`] for two
/// agents.
pub fn exact_top_tie_probability(n: u32, accuracies: &[f64]) -> Result<f64> {
    validate(n, accuracies, 2)?;
    let pmfs: Vec<Vec<f64>> = accuracies.iter().map(|&p| binomial_pmf(n, p)).collect();
    let cdfs: Vec<Vec<f64>> = pmfs.iter().map(|p| cumulative(p)).collect();
    let below = |i: usize, k: usize| if k == 0 { 0.0 } else { cdfs[i][k - 1] };
    let m = accuracies.len();
    let mut total = 0.0;
    for k in 0..=n as usize {
        // P(max = k) minus P(exactly one agent at k, everyone else below).
        let at_most: f64 = (0..m).map(|i| cdfs[i][k]).product();
        let strictly_below: f64 = (0..m).map(|i| below(i, k)).product();
        let single: f64 = (0..m)
            .map(|i| {
                pmfs[i][k]
                    * (0..m)
                        .filter(|&j| j != i)
                        .map(|j| below(j, k))
                        .product::<f64>()
            })
            .sum();
        total += at_most - strictly_below - single;
    }
    Ok(total.clamp(0.0, 1.0))
}

/// How a shared top score counts when asking whether the first agent is #1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieMode {
    /// Only a strictly highest score counts.
    Strict,
    /// A shared top score counts as 1 / (number of agents sharing it).
    RandomShare,
    /// A shared top score counts fully.
    Inclusive,
}

impl TieMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TieMode::Strict => "strict",
            TieMode::RandomShare => "random-share",
            TieMode::Inclusive => "inclusive",
        }
    }
}

impl FromStr for TieMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(TieMode::Strict),
            "random" | "random-share" => Ok(TieMode::RandomShare),
            "inclusive" => Ok(TieMode::Inclusive),
            other => Err(Error::config(format!("unknown tie mode {other:?}"))),
        }
    }
}

/// Probability that the first-listed agent is ranked #1 after one round of
/// `n` tasks.
pub fn exact_top1_probability(n: u32, accuracies: &[f64], mode: TieMode) -> Result<f64> {
    validate(n, accuracies, 2)?;
    let pmfs: Vec<Vec<f64>> = accuracies.iter().map(|&p| binomial_pmf(n, p)).collect();
    let cdfs: Vec<Vec<f64>> = pmfs.iter().map(|p| cumulative(p)).collect();
    let mut total = 0.0;
    for k in 0..=n as usize {
        let lead = pmfs[0][k];
        if lead == 0.0 {
            continue;
        }
        // Coefficient t of this polynomial = P(exactly t rivals also at k,
        // all other rivals below k).
        let mut poly = vec![1.0];
        for i in 1..accuracies.len() {
            let below = if k == 0 { 0.0 } else { cdfs[i][k - 1] };
            let at = pmfs[i][k];
            let mut next = vec![0.0; poly.len() + 1];
            for (t, c) in poly.iter().enumerate() {
                next[t] += c * below;
                next[t + 1] += c * at;
            }
            poly = next;
        }
        let share: f64 = match mode {
            TieMode::Strict => poly[0],
            TieMode::Inclusive => poly.iter().sum(),
            TieMode::RandomShare => poly
                .iter()
                .enumerate()
                .map(|(t, c)| c / (t as f64 + 1.0))
                .sum(),
        };
        total += lead * share;
    }
    Ok(total.clamp(0.0, 1.0))
}

/// Rule used for the single-elimination baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SingleElimRule {
    /// Memoryless: each round crowns its strict top scorer (a shared top
    /// score crowns nobody) and only the final round's verdict survives.
    LastRound,
    /// A champion defends against one challenger per round, challengers
    /// alternating among the others; a loss or a tie dethrones.
    ChampionDefense,
}

impl FromStr for SingleElimRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last-round" => Ok(SingleElimRule::LastRound),
            "champion-defense" => Ok(SingleElimRule::ChampionDefense),
            other => Err(Error::config(format!(
                "unknown single-elimination rule {other:?}"
            ))),
        }
    }
}

impl SingleElimRule {
    pub fn describe(self) -> &'static str {
        match self {
            SingleElimRule::LastRound => {
                "last-round: each round keeps only its strict top scorer, earlier rounds are discarded"
            }
            SingleElimRule::ChampionDefense => {
                "champion-defense: random initial champion, alternating challengers, loss or tie dethrones"
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseLabConfig {
    pub accuracies: Vec<f64>,
    /// Tasks per round.
    pub n: u32,
    pub rounds: u32,
    pub k_factor: f64,
    pub trials: u64,
    pub rng_seed: u64,
    /// Worker threads; 0 uses the rayon default.
    pub workers: usize,
    pub single_elim: SingleElimRule,
}

impl Default for NoiseLabConfig {
    fn default() -> Self {
        NoiseLabConfig {
            accuracies: vec![0.70, 0.69, 0.68],
            n: 20,
            rounds: 30,
            k_factor: 32.0,
            trials: 50_000,
            rng_seed: 1,
            workers: 0,
            single_elim: SingleElimRule::LastRound,
        }
    }
}

impl NoiseLabConfig {
    fn validate(&self) -> Result<()> {
        validate(self.n, &self.accuracies, 2)?;
        if self.rounds == 0 {
            return Err(Error::config("rounds must be at least 1"));
        }
        if self.trials == 0 {
            return Err(Error::config("trials must be at least 1"));
        }
        if !(self.k_factor.is_finite() && self.k_factor > 0.0) {
            return Err(Error::InvalidKFactor(self.k_factor));
        }
        Ok(())
    }

    fn best_index(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.accuracies.iter().enumerate() {
            if *p > self.accuracies[best] {
                best = i;
            }
        }
        best
    }
}

/// A Monte Carlo success fraction with its binomial standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub p: f64,
    pub se: f64,
    pub trials: u64,
}

impl Estimate {
    fn from_counts(successes: u64, trials: u64) -> Self {
        let p = successes as f64 / trials as f64;
        Estimate {
            p,
            se: (p * (1.0 - p) / trials as f64).sqrt(),
            trials,
        }
    }
}

fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

fn samplers(cfg: &NoiseLabConfig) -> Result<Vec<Binomial>> {
    cfg.accuracies
        .iter()
        .map(|&p| Binomial::new(u64::from(cfg.n), p).map_err(|e| Error::config(e.to_string())))
        .collect()
}

fn count_successes(cfg: &NoiseLabConfig, trial: impl Fn(u64) -> bool + Sync + Send) -> Result<u64> {
    let run = || {
        (0..cfg.trials)
            .into_par_iter()
            .filter(|&t| trial(t))
            .count() as u64
    };
    if cfg.workers == 0 {
        Ok(run())
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::config(e.to_string()))?;
        Ok(pool.install(run))
    }
}

fn strict_leader(values: &[f64]) -> Option<usize> {
    let mut leader = 0;
    let mut shared = false;
    for i in 1..values.len() {
        if values[i] > values[leader] {
            leader = i;
            shared = false;
        } else if values[i] == values[leader] {
            shared = true;
        }
    }
    (!shared).then_some(leader)
}

/// Fraction of trials in which the truly best agent ends with the strictly
/// highest Elo rating after `rounds` rounds of `n` tasks.
pub fn elo_ranking_accuracy(cfg: &NoiseLabConfig) -> Result<Estimate> {
    cfg.validate()?;
    let dists = samplers(cfg)?;
    let best = cfg.best_index();
    let m = cfg.accuracies.len();
    let successes = count_successes(cfg, |t| {
        let mut rng = trial_rng(cfg.rng_seed, t);
        let mut ratings = vec![INITIAL_RATING; m];
        let mut scores = vec![0.0; m];
        let mut deltas = vec![0.0; m];
        for _ in 0..cfg.rounds {
            for (s, d) in scores.iter_mut().zip(&dists) {
                *s = d.sample(&mut rng) as f64;
            }
            round_deltas(&ratings, &scores, cfg.k_factor, &mut deltas);
            ratings.iter_mut().zip(&deltas).for_each(|(r, d)| *r += d);
        }
        strict_leader(&ratings) == Some(best)
    })?;
    Ok(Estimate::from_counts(successes, cfg.trials))
}

/// Fraction of trials in which the single-elimination baseline ends with the
/// truly best agent on top.
pub fn single_elim_accuracy(cfg: &NoiseLabConfig) -> Result<Estimate> {
    cfg.validate()?;
    let dists = samplers(cfg)?;
    let best = cfg.best_index();
    let m = cfg.accuracies.len();
    let successes = match cfg.single_elim {
        SingleElimRule::LastRound => count_successes(cfg, |t| {
            let mut rng = trial_rng(cfg.rng_seed, t);
            let mut scores = vec![0.0; m];
            let mut crowned = None;
            for _ in 0..cfg.rounds {
                for (s, d) in scores.iter_mut().zip(&dists) {
                    *s = d.sample(&mut rng) as f64;
                }
                crowned = strict_leader(&scores);
            }
            crowned == Some(best)
        })?,
        SingleElimRule::ChampionDefense => count_successes(cfg, |t| {
            let mut rng = trial_rng(cfg.rng_seed, t);
            let mut champion = rng.random_range(0..m);
            for round in 0..cfg.rounds as usize {
                let others: Vec<usize> = (0..m).filter(|&i| i != champion).collect();
                let challenger = others[round % others.len()];
                let held = dists[champion].sample(&mut rng);
                let challenged = dists[challenger].sample(&mut rng);
                if challenged >= held {
                    champion = challenger;
                }
            }
            champion == best
        })?,
    };
    Ok(Estimate::from_counts(successes, cfg.trials))
}

/// One depth/breadth split of a fixed budget: `rounds` rounds of `n` tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub rounds: u32,
    pub n: u32,
}

impl FromStr for Split {
    type Err = Error;

    /// Parses `ROUNDSxN`, e.g. `10x60`.
    fn from_str(s: &str) -> Result<Self> {
        let (r, n) = s
            .split_once(['x', 'X', '×'])
            .ok_or_else(|| Error::config(format!("split {s:?} is not ROUNDSxN")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<u32>()
                .map_err(|_| Error::config(format!("split {s:?} is not ROUNDSxN")))
        };
        Ok(Split {
            rounds: parse(r)?,
            n: parse(n)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rounds: u32,
    pub n: u32,
    pub single_elim: Estimate,
    pub elo: Estimate,
}

/// Runs both estimators for every split; each split must use the whole budget.
pub fn budget_sweep(budget: u64, splits: &[Split], base: &NoiseLabConfig) -> Result<Vec<SweepRow>> {
    for s in splits {
        if u64::from(s.rounds) * u64::from(s.n) != budget {
            return Err(Error::config(format!(
                "split {}x{} uses {} evaluations, budget is {budget}",
                s.rounds,
                s.n,
                u64::from(s.rounds) * u64::from(s.n)
            )));
        }
    }
    splits
        .iter()
        .map(|s| {
            let cfg = NoiseLabConfig {
                rounds: s.rounds,
                n: s.n,
                ..base.clone()
            };
            Ok(SweepRow {
                rounds: s.rounds,
                n: s.n,
                single_elim: single_elim_accuracy(&cfg)?,
                elo: elo_ranking_accuracy(&cfg)?,
            })
        })
        .collect()
}

pub const CSV_HEADER: &str = "rounds,n,single_elim,single_elim_se,elo,elo_se";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            r.rounds, r.n, r.single_elim.p, r.single_elim.se, r.elo.p, r.elo.se
        );
    }
    out
}

pub fn sweep_table(rows: &[SweepRow], base: &NoiseLabConfig) -> String {
    let mut out = String::new();
    let accs: Vec<String> = base.accuracies.iter().map(|a| a.to_string()).collect();
    let _ = writeln!(
        out,
        "# accuracies [{}], K={}, trials={}, seed={}",
        accs.join(", "),
        base.k_factor,
        base.trials,
        base.rng_seed
    );
    let _ = writeln!(
        out,
        "# single elimination rule: {}",
        base.single_elim.describe()
    );
    let _ = writeln!(
        out,
        "{:>7} {:>5} {:>12} {:>9} {:>8} {:>9}",
        "rounds", "n", "single_elim", "se", "elo", "se"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:>7} {:>5} {:>11.2}% {:>8.2}% {:>7.2}% {:>8.2}%",
            r.rounds,
            r.n,
            100.0 * r.single_elim.p,
            100.0 * r.single_elim.se,
            100.0 * r.elo.p,
            100.0 * r.elo.se
        );
    }
    out
}
