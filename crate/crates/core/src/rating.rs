//! Elo rating kernel.
//!
//! Ratings live on the chess scale (new agents start at 1500). A round between
//! several competitors is decomposed into every unordered pair; all expected
//! scores come from the pre-round ratings and the deltas are applied together,
//! so a round is order-independent and conserves total rating mass.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rating assigned to every newly created agent.
pub const INITIAL_RATING: f64 = 1500.0;

/// Relative tolerance under which two mean scores count as a tie.
pub const TIE_RELATIVE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rating(f64);

impl Rating {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() {
            Ok(Rating(value))
        } else {
            Err(Error::InvalidRating(value))
        }
    }

    pub fn initial() -> Self {
        Rating(INITIAL_RATING)
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Subtracts `penalty` points (used for clone discarding).
    pub fn penalized(self, penalty: f64) -> Self {
        Rating(self.0 - penalty)
    }
}

impl Default for Rating {
    fn default() -> Self {
        Rating::initial()
    }
}

impl std::fmt::Display for Rating {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2}", self.0)
    }
}

/// Result of a single pairwise comparison from one side's perspective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchOutcome {
    Loss,
    Tie,
    Win,
}

impl MatchOutcome {
    pub fn score(self) -> f64 {
        match self {
            MatchOutcome::Loss => 0.0,
            MatchOutcome::Tie => 0.5,
            MatchOutcome::Win => 1.0,
        }
    }

    pub fn reversed(self) -> Self {
        match self {
            MatchOutcome::Loss => MatchOutcome::Win,
            MatchOutcome::Tie => MatchOutcome::Tie,
            MatchOutcome::Win => MatchOutcome::Loss,
        }
    }

    /// Outcome for the side scoring `a` against the side scoring `b`.
    pub fn compare(a: f64, b: f64) -> Self {
        if scores_tie(a, b) {
            MatchOutcome::Tie
        } else if a > b {
            MatchOutcome::Win
        } else {
            MatchOutcome::Loss
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct KFactor(f64);

impl KFactor {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 {
            Ok(KFactor(value))
        } else {
            Err(Error::InvalidKFactor(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for KFactor {
    fn default() -> Self {
        KFactor(32.0)
    }
}

impl TryFrom<f64> for KFactor {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        KFactor::new(value)
    }
}

impl From<KFactor> for f64 {
    fn from(k: KFactor) -> f64 {
        k.0
    }
}

/// Two mean scores tie when they are equal or within a relative 1e-9.
///
/// Means of binary scores over the same example count differ by at least
/// `1/n`, so the tolerance never merges distinct binary results.
pub fn scores_tie(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= TIE_RELATIVE_TOLERANCE * a.abs().max(b.abs())
}

/// Logistic expected score of `a` against `b`.
pub fn expected_score(a: Rating, b: Rating) -> Result<f64> {
    let (ra, rb) = (Rating::new(a.0)?.0, Rating::new(b.0)?.0);
    Ok(expected_raw(ra, rb))
}

#[inline]
fn expected_raw(ra: f64, rb: f64) -> f64 {
    1.0 / (1.0 + 10f64.powf((rb - ra) / 400.0))
}

/// Single pairwise update; returns the new `(a, b)` ratings.
pub fn update_pair(
    a: Rating,
    b: Rating,
    outcome_a: MatchOutcome,
    k: KFactor,
) -> Result<(Rating, Rating)> {
    let expected = expected_score(a, b)?;
    let delta = k.0 * (outcome_a.score() - expected);
    Ok((Rating(a.0 + delta), Rating(b.0 - delta)))
}

/// Writes the batch rating deltas of one round into `deltas`.
///
/// `ratings`, `scores` and `deltas` are parallel slices. Every unordered pair
/// is compared; expected scores use the ratings as passed in.
pub fn round_deltas(ratings: &[f64], scores: &[f64], k: f64, deltas: &mut [f64]) {
    debug_assert_eq!(ratings.len(), scores.len());
    debug_assert_eq!(ratings.len(), deltas.len());
    deltas.iter_mut().for_each(|d| *d = 0.0);
    for i in 0..ratings.len() {
        for j in (i + 1)..ratings.len() {
            // Evaluate each pair from a position-independent side so that
            // permuting the inputs gives bit-identical deltas.
            let (lo, hi) = match ratings[i]
                .total_cmp(&ratings[j])
                .then(scores[i].total_cmp(&scores[j]))
            {
                std::cmp::Ordering::Greater => (j, i),
                _ => (i, j),
            };
            let outcome = MatchOutcome::compare(scores[lo], scores[hi]);
            let delta = k * (outcome.score() - expected_raw(ratings[lo], ratings[hi]));
            deltas[lo] += delta;
            deltas[hi] -= delta;
        }
    }
}

/// One tournament round over the given agents.
///
/// Every agent in `ratings` must have a mean score. Agents absent from
/// `ratings` but present in `mean_scores` are an error, as are fewer than two
/// agents.
pub fn apply_round(
    ratings: &BTreeMap<String, Rating>,
    mean_scores: &BTreeMap<String, f64>,
    k: KFactor,
) -> Result<BTreeMap<String, Rating>> {
    if ratings.len() < 2 {
        return Err(Error::Arity {
            what: "an Elo round",
            min: 2,
            got: ratings.len(),
        });
    }
    let mut current = Vec::with_capacity(ratings.len());
    let mut scores = Vec::with_capacity(ratings.len());
    for (agent, rating) in ratings {
        Rating::new(rating.0)?;
        let score = mean_scores
            .get(agent)
            .ok_or_else(|| Error::config(format!("no mean score for agent {agent}")))?;
        current.push(rating.0);
        scores.push(*score);
    }
    if mean_scores.len() != ratings.len() {
        return Err(Error::config(
            "mean scores given for agents without ratings",
        ));
    }
    let mut deltas = vec![0.0; current.len()];
    round_deltas(&current, &scores, k.0, &mut deltas);
    Ok(ratings
        .keys()
        .zip(current.iter().zip(&deltas))
        .map(|(agent, (r, d))| (agent.clone(), Rating(r + d)))
        .collect())
}
