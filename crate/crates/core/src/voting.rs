//! Answer aggregation over finished traces.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::normalize_answer;
use crate::engine::SimulationResult;

#[derive(Debug, Error, PartialEq)]
pub enum VoteError {
    #[error("no ballots")]
    NoBallots,
    #[error("ballot weight {0} is negative or not finite")]
    InvalidWeight(f64),
    #[error("no results to score")]
    NoResults,
    #[error("question {0} has no gold answer")]
    MissingGold(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ballot {
    pub trace_id: String,
    /// Normalized answer.
    pub answer: String,
    pub weight: f64,
}

impl Ballot {
    /// Builds a ballot, normalizing `answer`.
    pub fn new(trace_id: &str, answer: &str, weight: f64) -> Self {
        Ballot {
            trace_id: trace_id.to_string(),
            answer: normalize_answer(answer),
            weight,
        }
    }
}

/// Weight sums closer than this (relative) count as tied, so float rounding
/// in the sums cannot decide a vote.
const TIE_TOLERANCE: f64 = 1e-12;

fn cmp_weight(a: f64, b: f64) -> std::cmp::Ordering {
    if (a - b).abs() <= TIE_TOLERANCE * a.abs().max(b.abs()) {
        std::cmp::Ordering::Equal
    } else {
        a.total_cmp(&b)
    }
}

fn tally(ballots: &[Ballot]) -> Result<BTreeMap<&str, (usize, f64)>, VoteError> {
    if ballots.is_empty() {
        return Err(VoteError::NoBallots);
    }
    let mut out: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for b in ballots {
        if !(b.weight >= 0.0 && b.weight.is_finite()) {
            return Err(VoteError::InvalidWeight(b.weight));
        }
        let e = out.entry(b.answer.as_str()).or_default();
        e.0 += 1;
        e.1 += b.weight;
    }
    Ok(out)
}

/// Most frequent answer; ties go to the larger total weight, then to the
/// lexicographically smallest answer.
pub fn majority_vote(ballots: &[Ballot]) -> Result<String, VoteError> {
    let mut best: Option<(&str, usize, f64)> = None;
    for (answer, (count, weight)) in tally(ballots)? {
        let better = match best {
            None => true,
            Some((_, c, w)) => count > c || (count == c && cmp_weight(weight, w).is_gt()),
        };
        if better {
            best = Some((answer, count, weight));
        }
    }
    Ok(best.expect("non-empty tally").0.to_string())
}

/// Answer with the largest total weight; ties go to the lexicographically
/// smallest answer.
pub fn weighted_vote(ballots: &[Ballot]) -> Result<String, VoteError> {
    let mut best: Option<(&str, f64)> = None;
    for (answer, (_, weight)) in tally(ballots)? {
        if best.is_none_or(|(_, w)| cmp_weight(weight, w).is_gt()) {
            best = Some((answer, weight));
        }
    }
    Ok(best.expect("non-empty tally").0.to_string())
}

/// Fraction of results whose chosen answer matches the gold answer after
/// normalization. A result without a chosen answer counts as wrong.
pub fn accuracy(results: &[SimulationResult], gold: &BTreeMap<String, String>) -> Result<f64, VoteError> {
    if results.is_empty() {
        return Err(VoteError::NoResults);
    }
    let mut hits = 0usize;
    for r in results {
        let g = gold
            .get(&r.question_id)
            .ok_or_else(|| VoteError::MissingGold(r.question_id.clone()))?;
        if r.chosen_answer.as_deref().is_some_and(|c| normalize_answer(c) == normalize_answer(g)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}
