use std::collections::BTreeMap;

use super::{score_step, ScorerError, ScorerWeights};
use crate::corpus::Corpus;

#[derive(Debug, Clone, PartialEq)]
pub struct RankAccReport {
    pub value: f64,
    pub eligible: usize,
    /// Questions lacking either a correct or an incorrect trace.
    pub skipped: Vec<String>,
}

/// Pairwise ranking accuracy: per question, the fraction of (correct,
/// incorrect) pairs where the correct trace scores strictly higher, averaged
/// over questions that have both kinds of trace. Ties count as misses.
pub fn rank_acc(per_question: &BTreeMap<String, Vec<(f64, bool)>>) -> Result<RankAccReport, ScorerError> {
    let mut sum = 0.0;
    let mut eligible = 0usize;
    let mut skipped = Vec::new();
    for (qid, scored) in per_question {
        let mut pos: Vec<f64> = scored.iter().filter(|(_, c)| *c).map(|(s, _)| *s).collect();
        let mut neg: Vec<f64> = scored.iter().filter(|(_, c)| !*c).map(|(s, _)| *s).collect();
        if pos.is_empty() || neg.is_empty() {
            skipped.push(qid.clone());
            continue;
        }
        pos.sort_by(f64::total_cmp);
        neg.sort_by(f64::total_cmp);
        // for each positive, count negatives strictly below it (two-pointer sweep)
        let mut below = 0usize;
        let mut wins = 0u64;
        for p in &pos {
            while below < neg.len() && neg[below] < *p {
                below += 1;
            }
            wins += below as u64;
        }
        sum += wins as f64 / (pos.len() as f64 * neg.len() as f64);
        eligible += 1;
    }
    if eligible == 0 {
        return Err(ScorerError::NoEligibleQuestions);
    }
    Ok(RankAccReport {
        value: sum / eligible as f64,
        eligible,
        skipped,
    })
}

/// Number of leading steps scored at prefix fraction `fraction` of an
/// `n`-step trace: `ceil(fraction · n)`, at least one and at most `n`.
pub fn prefix_step_count(fraction: f64, n: usize) -> usize {
    let raw = (fraction * n as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(n)
}

/// RankAcc when each trace is scored by the mean over its first
/// `ceil(k · N)` step scores, for every requested fraction `k`.
pub fn rank_acc_prefix_curve(
    corpus: &Corpus,
    weights: Option<&ScorerWeights>,
    fractions: &[f64],
) -> Result<Vec<(f64, RankAccReport)>, ScorerError> {
    if let Some(bad) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(ScorerError::InvalidArgument(format!("prefix fraction {bad} outside (0, 1]")));
    }
    // prefix sums of step scores per trace, computed once
    let mut prefixes: BTreeMap<&str, Vec<(Vec<f64>, bool)>> = BTreeMap::new();
    for (qid, q) in &corpus.questions {
        let mut traces = Vec::with_capacity(q.traces.len());
        for t in &q.traces {
            let mut acc = 0.0;
            let mut sums = Vec::with_capacity(t.steps.len());
            for s in &t.steps {
                acc += score_step(weights, s)?;
                sums.push(acc);
            }
            traces.push((sums, t.correct));
        }
        prefixes.insert(qid, traces);
    }
    fractions
        .iter()
        .map(|&k| {
            let per_question = prefixes
                .iter()
                .map(|(qid, traces)| {
                    let scored = traces
                        .iter()
                        .map(|(sums, correct)| {
                            let n = prefix_step_count(k, sums.len());
                            (sums[n - 1] / n as f64, *correct)
                        })
                        .collect();
                    (qid.to_string(), scored)
                })
                .collect();
            Ok((k, rank_acc(&per_question)?))
        })
        .collect()
}
