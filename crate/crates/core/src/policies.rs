//! Pruning and termination policies plugged into the engine hooks.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Step;
use crate::engine::{
    assemble, run_stage, validate_input, EngineConfig, Mode, SimError, SimInput, SimTrace, SimulationResult, VoteRule,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerSource {
    /// Score step features with trained MLP weights.
    Mlp,
    /// Use the corpus's precomputed step scores.
    Precomputed,
}

fn default_keep_percentile() -> f64 {
    0.10
}

fn default_similarity_threshold() -> f64 {
    0.95
}

fn default_check_interval() -> usize {
    1
}

/// Policy selection. In TOML each policy is keyed by its tag, e.g.
/// `{ step = { scorer_source = "precomputed" } }`; `"sc"` and `{ sc = {} }`
/// are both accepted for the parameterless baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum PolicyConfig {
    /// Self-consistency: no pruning, preempt under memory pressure.
    Sc,
    Step {
        scorer_source: ScorerSource,
    },
    DeepConf {
        warmup_count: usize,
        #[serde(default = "default_keep_percentile")]
        keep_percentile: f64,
    },
    SlimSc {
        #[serde(default = "default_similarity_threshold")]
        similarity_threshold: f64,
        #[serde(default = "default_check_interval")]
        check_interval_steps: usize,
    },
}

impl PolicyConfig {
    pub fn label(&self) -> &'static str {
        match self {
            PolicyConfig::Sc => "sc",
            PolicyConfig::Step { .. } => "step",
            PolicyConfig::DeepConf { .. } => "deepconf",
            PolicyConfig::SlimSc { .. } => "slimsc",
        }
    }

    /// Label carrying the parameters, used for report rows.
    pub fn describe(&self) -> String {
        match *self {
            PolicyConfig::Sc => "sc".into(),
            PolicyConfig::Step { scorer_source } => match scorer_source {
                ScorerSource::Mlp => "step-mlp".into(),
                ScorerSource::Precomputed => "step-precomputed".into(),
            },
            PolicyConfig::DeepConf {
                warmup_count,
                keep_percentile,
            } => format!("deepconf-n{warmup_count}-k{keep_percentile}"),
            PolicyConfig::SlimSc {
                similarity_threshold,
                check_interval_steps,
            } => format!("slimsc-t{similarity_threshold}-i{check_interval_steps}"),
        }
    }

    /// Checks parameters against the number of traces per question.
    pub fn validate(&self, num_traces: usize) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        match *self {
            PolicyConfig::Sc | PolicyConfig::Step { .. } => Ok(()),
            PolicyConfig::DeepConf {
                warmup_count,
                keep_percentile,
            } => {
                if warmup_count == 0 || warmup_count > num_traces {
                    return bad(format!("deepconf warmup_count {warmup_count} must lie in 1..={num_traces}"));
                }
                if !(keep_percentile > 0.0 && keep_percentile <= 1.0) {
                    return bad(format!("deepconf keep_percentile {keep_percentile} outside (0, 1]"));
                }
                Ok(())
            }
            PolicyConfig::SlimSc {
                similarity_threshold,
                check_interval_steps,
            } => {
                if check_interval_steps == 0 {
                    return bad("slimsc check_interval_steps must be at least 1".into());
                }
                if similarity_threshold.is_nan() {
                    return bad("slimsc similarity_threshold is NaN".into());
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneReason {
    MemoryPressure,
    ConfidenceBelowThreshold,
    SimilarityRedundant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneDecision {
    pub slot: usize,
    pub trace_id: String,
    pub reason: PruneReason,
    pub score_at_prune: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HookAction {
    Continue,
    Terminate,
}

/// STEP victim: lowest trace score, then larger resident KV, then smallest id.
pub fn step_on_memory_full(running: &[&SimTrace]) -> Result<PruneDecision, SimError> {
    let victim = running
        .iter()
        .min_by(|a, b| {
            a.score_state
                .score_or_neutral()
                .total_cmp(&b.score_state.score_or_neutral())
                .then_with(|| b.kv_tokens_resident.cmp(&a.kv_tokens_resident))
                .then_with(|| a.id().cmp(b.id()))
        })
        .ok_or(SimError::NoRunningTraces)?;
    Ok(PruneDecision {
        slot: victim.slot,
        trace_id: victim.id().to_string(),
        reason: PruneReason::MemoryPressure,
        score_at_prune: victim.score_state.score_or_neutral(),
    })
}

/// Nearest-rank cutoff keeping the top `keep_percentile` share of warmup
/// traces: the k-th largest score with `k = ceil(keep · n)`.
pub fn deepconf_threshold(warmup_scores: &[f64], keep_percentile: f64) -> Result<f64, SimError> {
    if warmup_scores.is_empty() {
        return Err(SimError::InvalidConfig("deepconf threshold needs warmup scores".into()));
    }
    if !(keep_percentile > 0.0 && keep_percentile <= 1.0) {
        return Err(SimError::InvalidConfig(format!("keep_percentile {keep_percentile} outside (0, 1]")));
    }
    let mut sorted = warmup_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len();
    let k = ((keep_percentile * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    Ok(sorted[k - 1])
}

/// Folds the step's mean confidence into the trace's running minimum and
/// asks for termination once it falls below `threshold`.
pub fn deepconf_step_hook(trace: &mut SimTrace, step: &Step, threshold: f64) -> Result<HookAction, SimError> {
    let conf = step.mean_token_confidence.ok_or_else(|| SimError::MissingConfidence {
        trace_id: trace.id().to_string(),
    })?;
    let low = trace.min_confidence.map_or(conf, |m| m.min(conf));
    trace.min_confidence = Some(low);
    Ok(if low < threshold {
        HookAction::Terminate
    } else {
        HookAction::Continue
    })
}

/// Cosine similarity; zero vectors are dissimilar to everything.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Pairwise redundancy sweep over `active` in the given order. For every pair
/// whose mean-key cosine exceeds `threshold`, one member is pruned by a fair
/// coin; traces pruned earlier in the sweep are skipped.
pub fn slimsc_check<R: Rng>(active: &[&SimTrace], threshold: f64, rng: &mut R) -> Result<Vec<PruneDecision>, SimError> {
    let keys = active
        .iter()
        .map(|t| {
            t.mean_similarity_key().ok_or_else(|| SimError::MissingSimilarityKey {
                trace_id: t.id().to_string(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut pruned = vec![false; active.len()];
    let mut out = Vec::new();
    for i in 0..active.len() {
        for j in i + 1..active.len() {
            if pruned[i] || pruned[j] {
                continue;
            }
            if keys[i].len() != keys[j].len() {
                return Err(SimError::MissingSimilarityKey {
                    trace_id: active[j].id().to_string(),
                });
            }
            let sim = cosine(&keys[i], &keys[j]);
            if sim.partial_cmp(&threshold) == Some(Ordering::Greater) {
                let pick = if rng.random_bool(0.5) { i } else { j };
                pruned[pick] = true;
                out.push(PruneDecision {
                    slot: active[pick].slot,
                    trace_id: active[pick].id().to_string(),
                    reason: PruneReason::SimilarityRedundant,
                    score_at_prune: sim,
                });
            }
        }
    }
    Ok(out)
}

fn warmup_statistic(trace: &crate::corpus::Trace) -> Result<f64, SimError> {
    trace
        .steps
        .iter()
        .map(|s| s.mean_token_confidence)
        .try_fold(f64::INFINITY, |acc, c| c.map(|c| acc.min(c)))
        .ok_or_else(|| SimError::MissingConfidence {
            trace_id: trace.trace_id.clone(),
        })
}

/// Two serialized stages: the first `warmup_count` traces run to completion
/// without pruning and set the confidence cutoff; the rest then run with
/// early termination below it. With `keep_percentile` 1.0 no cutoff applies.
pub fn run_deepconf(
    input: &SimInput,
    warmup_count: usize,
    keep_percentile: f64,
    cfg: &EngineConfig,
    seed: u64,
) -> Result<SimulationResult, SimError> {
    let policy = PolicyConfig::DeepConf {
        warmup_count,
        keep_percentile,
    };
    validate_input(input, cfg)?;
    policy.validate(input.traces.len())?;
    let (warm, rest) = input.traces.split_at(warmup_count);
    let mut stages = vec![("warmup".to_string(), run_stage(warm, cfg, Mode::Preempt, seed)?)];
    if !rest.is_empty() {
        let threshold = if keep_percentile >= 1.0 {
            f64::NEG_INFINITY
        } else {
            let stats = warm.iter().map(|t| warmup_statistic(t)).collect::<Result<Vec<_>, _>>()?;
            deepconf_threshold(&stats, keep_percentile)?
        };
        log::debug!("{}: deepconf threshold {threshold}", input.question_id);
        let outcome = run_stage(rest, cfg, Mode::ConfidenceCutoff { threshold }, seed.wrapping_add(1))?;
        stages.push(("prune".to_string(), outcome));
    }
    Ok(assemble(input, &policy, cfg, stages, VoteRule::Majority))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Trace;
    use crate::scorer::TraceScoreState;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plain(id: &str) -> Trace {
        Trace {
            question_id: "q".into(),
            trace_id: id.into(),
            steps: vec![Step::with_tokens(1)],
            correct: true,
            final_answer: "1".into(),
        }
    }

    fn with_score(trace: &Trace, slot: usize, score: f64, kv: u64) -> SimTrace<'_> {
        let mut s = SimTrace::new(slot, trace);
        s.score_state = TraceScoreState::default().update(score);
        s.kv_tokens_resident = kv;
        s
    }

    #[test]
    fn argmin_victim() {
        let ts = [plain("A"), plain("B"), plain("C")];
        let sims = [
            with_score(&ts[0], 0, 0.8, 1),
            with_score(&ts[1], 1, 0.3, 1),
            with_score(&ts[2], 2, 0.6, 1),
        ];
        let refs: Vec<&SimTrace> = sims.iter().collect();
        let d = step_on_memory_full(&refs).unwrap();
        assert_eq!((d.trace_id.as_str(), d.reason), ("B", PruneReason::MemoryPressure));
        assert!((d.score_at_prune - 0.3).abs() < 1e-15);
    }

    #[test]
    fn tie_prefers_larger_kv_then_id() {
        let ts = [plain("A"), plain("B")];
        let sims = [with_score(&ts[0], 0, 0.5, 100), with_score(&ts[1], 1, 0.5, 200)];
        let refs: Vec<&SimTrace> = sims.iter().collect();
        assert_eq!(step_on_memory_full(&refs).unwrap().trace_id, "B");
        let sims = [with_score(&ts[1], 1, 0.5, 7), with_score(&ts[0], 0, 0.5, 7)];
        let refs: Vec<&SimTrace> = sims.iter().collect();
        assert_eq!(step_on_memory_full(&refs).unwrap().trace_id, "A");
        assert!(step_on_memory_full(&[]).is_err());
    }

    #[test]
    fn unscored_traces_sit_at_neutral() {
        let ts = [plain("A"), plain("B")];
        let fresh = SimTrace::new(0, &ts[0]);
        let low = with_score(&ts[1], 1, 0.4, 0);
        assert_eq!(step_on_memory_full(&[&fresh, &low]).unwrap().trace_id, "B");
        let high = with_score(&ts[1], 1, 0.6, 0);
        assert_eq!(step_on_memory_full(&[&fresh, &high]).unwrap().trace_id, "A");
    }

    #[test]
    fn nearest_rank_threshold() {
        let scores: Vec<f64> = (1..=10).map(|i| f64::from(i) / 10.0).collect();
        // sorted descending the top 10% is one trace: the largest score
        assert_eq!(deepconf_threshold(&scores, 0.10).unwrap(), 1.0);
        assert_eq!(deepconf_threshold(&scores, 0.25).unwrap(), 0.8);
        assert_eq!(deepconf_threshold(&scores, 1.0).unwrap(), 0.1);
        assert_eq!(deepconf_threshold(&[0.7; 5], 0.3).unwrap(), 0.7);
        assert!(deepconf_threshold(&[], 0.1).is_err());
    }

    #[test]
    fn confidence_hook_tracks_minimum() {
        let t = plain("A");
        let mut sim = SimTrace::new(0, &t);
        let step = |c: f64| Step {
            mean_token_confidence: Some(c),
            ..Step::with_tokens(1)
        };
        assert_eq!(deepconf_step_hook(&mut sim, &step(0.9), 0.5).unwrap(), HookAction::Continue);
        assert_eq!(deepconf_step_hook(&mut sim, &step(0.7), 0.5).unwrap(), HookAction::Continue);
        assert_eq!(deepconf_step_hook(&mut sim, &step(0.4), 0.5).unwrap(), HookAction::Terminate);
        assert_eq!(sim.min_confidence, Some(0.4));
        let mut other = SimTrace::new(1, &t);
        assert_eq!(deepconf_step_hook(&mut other, &step(0.0), 0.0).unwrap(), HookAction::Continue);
        assert!(matches!(
            deepconf_step_hook(&mut other, &Step::with_tokens(1), 0.5),
            Err(SimError::MissingConfidence { .. })
        ));
    }

    fn keyed<'a>(t: &'a Trace, slot: usize, key: &[f64]) -> SimTrace<'a> {
        let mut s = SimTrace::new(slot, t);
        s.steps_completed = 1;
        s.key_sum = key.to_vec();
        s
    }

    #[test]
    fn identical_pair_loses_one_member() {
        let ts = [plain("a"), plain("b")];
        for seed in 0..20 {
            let sims = [keyed(&ts[0], 0, &[1.0, 2.0]), keyed(&ts[1], 1, &[1.0, 2.0])];
            let refs: Vec<&SimTrace> = sims.iter().collect();
            let out = slimsc_check(&refs, 0.95, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(out.len(), 1);
            assert_eq!(out[0].reason, PruneReason::SimilarityRedundant);
        }
    }

    #[test]
    fn orthogonal_keys_survive() {
        let ts = [plain("a"), plain("b")];
        let sims = [keyed(&ts[0], 0, &[1.0, 0.0]), keyed(&ts[1], 1, &[0.0, 3.0])];
        let refs: Vec<&SimTrace> = sims.iter().collect();
        assert!(slimsc_check(&refs, 0.95, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().is_empty());
    }

    #[test]
    fn three_identical_lose_two() {
        let ts = [plain("a"), plain("b"), plain("c")];
        for seed in 0..32 {
            let sims: Vec<SimTrace> = ts.iter().enumerate().map(|(i, t)| keyed(t, i, &[0.3, 0.3, 0.1])).collect();
            let refs: Vec<&SimTrace> = sims.iter().collect();
            let out = slimsc_check(&refs, 0.95, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut ids: Vec<&str> = out.iter().map(|d| d.trace_id.as_str()).collect();
            assert_eq!(ids.len(), 2);
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), 2);
        }
    }

    #[test]
    fn missing_key_is_an_error() {
        let ts = [plain("a"), plain("b")];
        let sims = [keyed(&ts[0], 0, &[1.0]), SimTrace::new(1, &ts[1])];
        let refs: Vec<&SimTrace> = sims.iter().collect();
        assert!(matches!(
            slimsc_check(&refs, 0.95, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(SimError::MissingSimilarityKey { .. })
        ));
    }

    #[test]
    fn policy_toml_shapes() {
        #[derive(Deserialize)]
        struct Doc {
            policies: Vec<PolicyConfig>,
        }
        let doc: Doc = toml::from_str(
            r#"policies = [
                { sc = {} },
                "sc",
                { step = { scorer_source = "precomputed" } },
                { deepconf = { warmup_count = 16 } },
                { slimsc = { check_interval_steps = 4 } },
            ]"#,
        )
        .unwrap();
        assert_eq!(
            doc.policies,
            vec![
                PolicyConfig::Sc,
                PolicyConfig::Sc,
                PolicyConfig::Step {
                    scorer_source: ScorerSource::Precomputed
                },
                PolicyConfig::DeepConf {
                    warmup_count: 16,
                    keep_percentile: 0.1
                },
                PolicyConfig::SlimSc {
                    similarity_threshold: 0.95,
                    check_interval_steps: 4
                },
            ]
        );
        assert!(PolicyConfig::DeepConf {
            warmup_count: 9,
            keep_percentile: 0.1
        }
        .validate(8)
        .is_err());
    }

    proptest! {
        #[test]
        fn victim_invariant_under_increasing_maps(scores in proptest::collection::vec(0u16..200, 1..8)) {
            let ts: Vec<Trace> = (0..scores.len()).map(|i| plain(&format!("t{i}"))).collect();
            let base: Vec<SimTrace> = ts
                .iter()
                .zip(&scores)
                .enumerate()
                .map(|(i, (t, s))| with_score(t, i, f64::from(*s) / 200.0, i as u64 % 3))
                .collect();
            let mapped: Vec<SimTrace> = ts
                .iter()
                .zip(&scores)
                .enumerate()
                .map(|(i, (t, s))| with_score(t, i, (f64::from(*s) / 200.0).powi(3) / 2.0 + 0.25, i as u64 % 3))
                .collect();
            let a = step_on_memory_full(&base.iter().collect::<Vec<_>>()).unwrap();
            let b = step_on_memory_full(&mapped.iter().collect::<Vec<_>>()).unwrap();
            prop_assert_eq!(a.trace_id, b.trace_id);
        }
    }
}
