use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, ExperimentError};
use crate::corpus::{Corpus, Question};
use crate::engine::{simulate, timing_report, EngineConfig, SimEvent, SimInput, TimingReport};
use crate::policies::PolicyConfig;
use crate::scorer::ScorerWeights;

/// One simulated (policy, budgets, seed, question) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub policy: String,
    pub trace_budget: usize,
    pub memory_budget: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_multiplier: Option<f64>,
    pub seed: u64,
    pub question_id: String,
    pub chosen_answer: Option<String>,
    pub correct: bool,
    pub tokens: u64,
    pub iterations: u64,
    pub finished_traces: usize,
    pub prune_count: usize,
    pub preemptions: u64,
    pub end_to_end_seconds: f64,
    /// Per-trace means within the question.
    pub mean_wait_seconds: f64,
    pub mean_decode_seconds: f64,
    pub mean_reconstruct_seconds: f64,
    /// Breakdown of the question's summed trace times.
    pub timing: TimingReport,
    #[serde(skip)]
    pub events: Vec<SimEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub trace_budget: usize,
    pub question_id: String,
    pub reason: String,
}

/// Aggregate over questions and seeds for one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub policy: String,
    pub trace_budget: usize,
    pub memory_budget: u64,
    pub memory_multiplier: Option<f64>,
    /// Simulated (question, seed) pairs.
    pub questions: usize,
    pub skipped_questions: usize,
    pub accuracy: f64,
    pub mean_tokens_per_question: f64,
    pub mean_end_to_end_seconds: f64,
    pub mean_wait_seconds: f64,
    pub mean_decode_seconds: f64,
    pub mean_reconstruct_seconds: f64,
    pub wait_fraction: f64,
    pub decode_fraction: f64,
    pub reconstruct_fraction: f64,
    pub prune_count: u64,
    pub preemptions: u64,
}

#[derive(Debug, Clone, Default)]
pub struct GridOutput {
    pub rows: Vec<ReportRow>,
    pub runs: Vec<RunRecord>,
    pub skipped: Vec<SkipRecord>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a stream seed from several coordinates.
pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED, |acc, &p| splitmix(acc ^ splitmix(p)))
}

struct Job<'a> {
    policy: &'a PolicyConfig,
    trace_budget: usize,
    memory: (u64, Option<f64>),
    seed: u64,
    question_index: usize,
    question_id: &'a str,
    question: &'a Question,
}

fn run_job(job: &Job, engine: &EngineConfig, scorer: Option<&ScorerWeights>) -> Result<RunRecord, ExperimentError> {
    let coords = [job.seed, job.trace_budget as u64, job.question_index as u64];
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&coords));
    let traces = sample(&mut rng, job.question.traces.len(), job.trace_budget)
        .into_iter()
        .map(|i| &job.question.traces[i])
        .collect();
    let input = SimInput::new(job.question_id, job.question.gold_answer.clone(), traces);
    let cfg = EngineConfig {
        memory_budget_tokens: job.memory.0,
        ..engine.clone()
    };
    let sim_seed = mix_seed(&[job.seed, job.trace_budget as u64, job.question_index as u64, 1]);
    let r = simulate(&input, job.policy, &cfg, scorer, sim_seed).map_err(|source| ExperimentError::Simulation {
        question_id: job.question_id.to_string(),
        source,
    })?;
    let n = r.traces.len() as f64;
    Ok(RunRecord {
        policy: job.policy.describe(),
        trace_budget: job.trace_budget,
        memory_budget: job.memory.0,
        memory_multiplier: job.memory.1,
        seed: job.seed,
        question_id: job.question_id.to_string(),
        chosen_answer: r.chosen_answer.clone(),
        correct: r.correct,
        tokens: r.total_tokens_generated,
        iterations: r.iterations,
        finished_traces: r.finished_answers().len(),
        prune_count: r.prune_count(),
        preemptions: r.preemptions,
        end_to_end_seconds: r.end_to_end_seconds,
        mean_wait_seconds: r.wait_seconds / n,
        mean_decode_seconds: r.decode_seconds / n,
        mean_reconstruct_seconds: r.reconstruct_seconds / n,
        timing: timing_report(&r),
        events: r.events,
    })
}

fn aggregate(records: &[RunRecord], skipped: usize) -> ReportRow {
    let first = &records[0];
    let n = records.len() as f64;
    let mean = |f: fn(&RunRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let wait = mean(|r| r.mean_wait_seconds);
    let decode = mean(|r| r.mean_decode_seconds);
    let recon = mean(|r| r.mean_reconstruct_seconds);
    let e2e = mean(|r| r.end_to_end_seconds);
    let breakdown = TimingReport::from_parts(decode, wait, recon, e2e);
    ReportRow {
        policy: first.policy.clone(),
        trace_budget: first.trace_budget,
        memory_budget: first.memory_budget,
        memory_multiplier: first.memory_multiplier,
        questions: records.len(),
        skipped_questions: skipped,
        accuracy: mean(|r| if r.correct { 1.0 } else { 0.0 }),
        mean_tokens_per_question: mean(|r| r.tokens as f64),
        mean_end_to_end_seconds: e2e,
        mean_wait_seconds: wait,
        mean_decode_seconds: decode,
        mean_reconstruct_seconds: recon,
        wait_fraction: breakdown.wait_fraction,
        decode_fraction: breakdown.decode_fraction,
        reconstruct_fraction: breakdown.reconstruct_fraction,
        prune_count: records.iter().map(|r| r.prune_count as u64).sum(),
        preemptions: records.iter().map(|r| r.preemptions).sum(),
    }
}

/// Runs every grid cell over `corpus`. Questions with fewer traces than a
/// trace budget, or without a gold answer, are skipped for that budget and
/// listed in the output. Questions run in parallel; results are merged in
/// grid order, so the output does not depend on the thread count.
pub fn run_grid(
    config: &ExperimentConfig,
    corpus: &Corpus,
    scorer: Option<&ScorerWeights>,
) -> Result<GridOutput, ExperimentError> {
    config.validate()?;
    if config.needs_trained_scorer() {
        let w = scorer.ok_or_else(|| {
            ExperimentError::Config("STEP with scorer_source = \"mlp\" needs scorer_weights_path".into())
        })?;
        if w.input_dim != corpus.feature_dim {
            return Err(ExperimentError::Config(format!(
                "scorer expects {}-dimensional features but the corpus has {}",
                w.input_dim, corpus.feature_dim
            )));
        }
    }

    let mut skipped = Vec::new();
    let mut eligible: Vec<Vec<(usize, &str, &Question)>> = Vec::new();
    for &budget in &config.trace_budgets {
        let mut ok = Vec::new();
        for (qi, (qid, q)) in corpus.questions.iter().enumerate() {
            let reason = if q.traces.len() < budget {
                Some(format!("{} traces, budget {budget}", q.traces.len()))
            } else if q.gold_answer.is_none() {
                Some("no gold answer".to_string())
            } else {
                None
            };
            match reason {
                Some(reason) => {
                    log::warn!("skipping question {qid} at trace budget {budget}: {reason}");
                    skipped.push(SkipRecord {
                        trace_budget: budget,
                        question_id: qid.clone(),
                        reason,
                    });
                }
                None => ok.push((qi, qid.as_str(), q)),
            }
        }
        eligible.push(ok);
    }

    let mut jobs = Vec::new();
    let mut groups = Vec::new();
    for policy in &config.policies {
        for (bi, &budget) in config.trace_budgets.iter().enumerate() {
            for memory in config.memory_budgets() {
                let start = jobs.len();
                for &seed in &config.seeds {
                    for &(question_index, question_id, question) in &eligible[bi] {
                        jobs.push(Job {
                            policy,
                            trace_budget: budget,
                            memory,
                            seed,
                            question_index,
                            question_id,
                            question,
                        });
                    }
                }
                groups.push((start..jobs.len(), corpus.questions.len() - eligible[bi].len()));
            }
        }
    }

    let runs = jobs
        .par_iter()
        .map(|job| run_job(job, &config.engine, scorer))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = groups
        .into_iter()
        .filter(|(range, _)| !range.is_empty())
        .map(|(range, skips)| aggregate(&runs[range], skips))
        .collect();
    Ok(GridOutput { rows, runs, skipped })
}
