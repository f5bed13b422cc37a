//! Discrete-event simulation of parallel trace decoding under a KV budget.
//!
//! Each engine iteration runs five phases in order:
//!
//! 1. admission: waiting traces resume in FIFO order while their KV plus one
//!    new token fits next to the demand of the running set; the resumed KV is
//!    rebuilt at `prefill_tokens_per_second`.
//! 2. memory pressure: while the running set needs more new-token KV than is
//!    free, the policy either prunes (STEP) or preempts (baselines) one trace.
//! 3. decode: every running trace emits one token; waiting traces accrue wait.
//! 4. step boundaries: traces that just closed a step are scored or checked.
//! 5. completion: traces that emitted their last token finish and free KV.
//!
//! Time is tracked as integer iteration and token counts and only converted
//! to seconds when results are built, so bulk-advanced iterations give
//! exactly the same numbers as single-stepped ones.

mod ledger;
mod timing;

use std::collections::VecDeque;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Question, Trace};
use crate::policies::{self, HookAction, PolicyConfig, PruneReason};
use crate::scorer::{score_step, ScorerWeights, TraceScoreState};
use crate::voting::{majority_vote, weighted_vote, Ballot};

pub use ledger::{LedgerError, MemoryLedger};
pub use timing::{timing_report, TimingReport};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("no traces to simulate")]
    EmptyInput,
    #[error("duplicate trace_id {0}")]
    DuplicateTrace(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("exceeded max_iterations ({limit})")]
    MaxIterations { limit: u64 },
    #[error("trace {trace_id} needs {needed} KV tokens but capacity is {capacity}")]
    CapacityExceeded {
        trace_id: String,
        needed: u64,
        capacity: u64,
    },
    #[error("STEP with the mlp scorer source needs scorer weights")]
    MissingScorer,
    #[error("trace {trace_id}: step cannot be scored: {source}")]
    Unscoreable {
        trace_id: String,
        source: crate::scorer::ScorerError,
    },
    #[error("trace {trace_id}: step lacks mean_token_confidence")]
    MissingConfidence { trace_id: String },
    #[error("trace {trace_id}: step lacks a usable similarity_key")]
    MissingSimilarityKey { trace_id: String },
    #[error("policy hook called with no running traces")]
    NoRunningTraces,
    #[error("ledger fault: {0}")]
    Ledger(#[from] LedgerError),
}

fn default_max_iterations() -> u64 {
    10_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    /// KV-cache capacity in tokens.
    pub memory_budget_tokens: u64,
    /// Wall time of one iteration in which every running trace emits a token.
    pub decode_seconds_per_iteration: f64,
    /// Throughput of KV reconstruction when a preempted trace resumes.
    pub prefill_tokens_per_second: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: u64,
    /// Keep the per-event log in the result.
    #[serde(default)]
    pub record_events: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            memory_budget_tokens: 4096,
            decode_seconds_per_iteration: 0.02,
            prefill_tokens_per_second: 10_000.0,
            max_iterations: default_max_iterations(),
            record_events: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.memory_budget_tokens == 0 || self.max_iterations == 0 {
            return Err(SimError::InvalidConfig(
                "memory_budget_tokens and max_iterations must be positive".into(),
            ));
        }
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !positive(self.decode_seconds_per_iteration) || !positive(self.prefill_tokens_per_second) {
            return Err(SimError::InvalidConfig(
                "decode_seconds_per_iteration and prefill_tokens_per_second must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn decode_seconds(&self, iterations: u64) -> f64 {
        iterations as f64 * self.decode_seconds_per_iteration
    }

    pub fn reconstruct_seconds(&self, tokens: u64) -> f64 {
        tokens as f64 / self.prefill_tokens_per_second
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceStatus {
    Running,
    Waiting,
    Pruned,
    Finished,
}

/// Runtime state of one trace inside a simulation.
#[derive(Debug, Clone)]
pub struct SimTrace<'a> {
    /// Position of the trace in the simulated set.
    pub slot: usize,
    pub trace: &'a Trace,
    pub status: TraceStatus,
    pub tokens_emitted: u64,
    pub kv_tokens_resident: u64,
    pub steps_completed: usize,
    pub score_state: TraceScoreState,
    /// Iteration at which the trace last entered the running set.
    pub started_at: u64,
    pub decode_iterations: u64,
    pub wait_iterations: u64,
    pub reconstructed_tokens: u64,
    pub preemption_count: u32,
    /// Lowest per-step mean confidence seen so far.
    pub min_confidence: Option<f64>,
    /// Sum of similarity keys over completed steps.
    pub key_sum: Vec<f64>,
    step_ends: Vec<u64>,
    total_tokens: u64,
}

impl<'a> SimTrace<'a> {
    pub fn new(slot: usize, trace: &'a Trace) -> Self {
        let step_ends = trace.step_ends();
        let total_tokens = step_ends.last().copied().unwrap_or(0);
        SimTrace {
            slot,
            trace,
            status: TraceStatus::Running,
            tokens_emitted: 0,
            kv_tokens_resident: 0,
            steps_completed: 0,
            score_state: TraceScoreState::default(),
            started_at: 0,
            decode_iterations: 0,
            wait_iterations: 0,
            reconstructed_tokens: 0,
            preemption_count: 0,
            min_confidence: None,
            key_sum: Vec::new(),
            step_ends,
            total_tokens,
        }
    }

    pub fn id(&self) -> &str {
        &self.trace.trace_id
    }

    pub fn total_tokens(&self) -> u64 {
        self.total_tokens
    }

    pub fn is_running(&self) -> bool {
        self.status == TraceStatus::Running
    }

    /// All tokens emitted; the trace finishes at the end of this iteration.
    pub fn is_complete(&self) -> bool {
        self.tokens_emitted == self.total_tokens
    }

    fn next_step_end(&self) -> u64 {
        self.step_ends[self.steps_completed]
    }

    /// Mean similarity key over completed steps.
    pub fn mean_similarity_key(&self) -> Option<Vec<f64>> {
        if self.steps_completed == 0 || self.key_sum.is_empty() {
            return None;
        }
        let n = self.steps_completed as f64;
        Some(self.key_sum.iter().map(|v| v / n).collect())
    }
}

/// Traces of one question handed to the simulator.
#[derive(Debug, Clone)]
pub struct SimInput<'a> {
    pub question_id: String,
    pub gold_answer: Option<String>,
    pub traces: Vec<&'a Trace>,
}

impl<'a> SimInput<'a> {
    pub fn new(question_id: impl Into<String>, gold_answer: Option<String>, traces: Vec<&'a Trace>) -> Self {
        SimInput {
            question_id: question_id.into(),
            gold_answer,
            traces,
        }
    }

    pub fn from_question(question_id: &str, question: &'a Question) -> Self {
        SimInput::new(question_id, question.gold_answer.clone(), question.traces.iter().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Resume,
    Preempt,
    Prune,
    Decode,
    Step,
    Finish,
}

/// One log record. `decode` events use `"*"` as trace id and carry the
/// resident KV after the iteration's tokens were written.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEvent {
    pub iteration: u64,
    pub kind: EventKind,
    pub trace_id: String,
    pub resident: u64,
}

/// Writes events as line-delimited JSON:
/// `{"iteration":3,"kind":"preempt","trace_id":"t01","resident":120}`.
pub fn write_event_log<W: Write>(events: &[SimEvent], mut out: W) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRecord {
    pub iteration: u64,
    pub trace_id: String,
    pub score: f64,
    pub reason: PruneReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceOutcome {
    pub trace_id: String,
    pub status: TraceStatus,
    pub tokens_emitted: u64,
    pub total_tokens: u64,
    pub steps_completed: usize,
    pub decode_iterations: u64,
    pub wait_iterations: u64,
    pub reconstructed_tokens: u64,
    pub decode_seconds: f64,
    pub wait_seconds: f64,
    pub reconstruct_seconds: f64,
    pub preemption_count: u32,
    /// Prefix-mean trace score (STEP runs only).
    pub trace_score: Option<f64>,
    pub confidence: Option<f64>,
    /// Final answer, present only when the trace finished.
    pub answer: Option<String>,
}

/// Totals of one serialized engine run (DeepConf has two).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub name: String,
    pub traces: usize,
    pub iterations: u64,
    pub tokens: u64,
    pub decode_seconds: f64,
    pub wait_seconds: f64,
    pub reconstruct_seconds: f64,
    pub end_to_end_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub question_id: String,
    pub policy: String,
    pub traces: Vec<TraceOutcome>,
    pub chosen_answer: Option<String>,
    pub correct: bool,
    pub iterations: u64,
    /// Sums over traces.
    pub decode_seconds: f64,
    pub wait_seconds: f64,
    pub reconstruct_seconds: f64,
    /// Iterations times the iteration cost plus all reconstruction time.
    pub end_to_end_seconds: f64,
    pub total_tokens_generated: u64,
    pub preemptions: u64,
    pub peak_resident: u64,
    pub memory_budget_tokens: u64,
    pub prune_log: Vec<PruneRecord>,
    pub stages: Vec<StageSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<SimEvent>,
}

impl SimulationResult {
    pub fn finished_answers(&self) -> Vec<&str> {
        self.traces.iter().filter_map(|t| t.answer.as_deref()).collect()
    }

    pub fn prune_count(&self) -> usize {
        self.prune_log.len()
    }
}

/// Per-run hook behaviour derived from the policy.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Mode<'w> {
    /// Preempt on memory pressure, nothing at step boundaries.
    Preempt,
    /// Prune the lowest-scored trace on memory pressure.
    Prune { weights: Option<&'w ScorerWeights> },
    /// Preempt on pressure; terminate traces whose confidence drops below the cutoff.
    ConfidenceCutoff { threshold: f64 },
    /// Preempt on pressure; prune near-duplicate traces every `interval` steps.
    Similarity { threshold: f64, interval: usize },
}

/// Raw outcome of one engine run before voting.
pub(crate) struct StageOutcome {
    pub traces: Vec<TraceOutcome>,
    pub iterations: u64,
    pub reconstructed_tokens: u64,
    pub decode_iterations: u64,
    pub wait_iterations: u64,
    pub preemptions: u64,
    pub peak_resident: u64,
    pub prune_log: Vec<PruneRecord>,
    pub events: Vec<SimEvent>,
}

struct Stage<'a, 'c, 'w> {
    cfg: &'c EngineConfig,
    mode: Mode<'w>,
    sims: Vec<SimTrace<'a>>,
    ledger: MemoryLedger,
    waiting: VecDeque<usize>,
    /// Completed iterations; hooks after decode see `iteration - 1`.
    iteration: u64,
    rng: ChaCha8Rng,
    peak_resident: u64,
    prune_log: Vec<PruneRecord>,
    events: Vec<SimEvent>,
}

impl<'a, 'c, 'w> Stage<'a, 'c, 'w> {
    fn new(traces: &[&'a Trace], cfg: &'c EngineConfig, mode: Mode<'w>, seed: u64) -> Self {
        Stage {
            cfg,
            mode,
            sims: traces.iter().enumerate().map(|(i, t)| SimTrace::new(i, t)).collect(),
            ledger: MemoryLedger::new(cfg.memory_budget_tokens),
            waiting: VecDeque::new(),
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            peak_resident: 0,
            prune_log: Vec::new(),
            events: Vec::new(),
        }
    }

    fn log(&mut self, iteration: u64, kind: EventKind, slot: Option<usize>) {
        if self.cfg.record_events {
            let trace_id = slot.map_or_else(|| "*".to_string(), |s| self.sims[s].id().to_string());
            self.events.push(SimEvent {
                iteration,
                kind,
                trace_id,
                resident: self.ledger.resident(),
            });
        }
    }

    fn running_count(&self) -> u64 {
        self.sims.iter().filter(|s| s.is_running()).count() as u64
    }

    fn run(mut self) -> Result<StageOutcome, SimError> {
        while self
            .sims
            .iter()
            .any(|s| matches!(s.status, TraceStatus::Running | TraceStatus::Waiting))
        {
            if self.iteration >= self.cfg.max_iterations {
                return Err(SimError::MaxIterations {
                    limit: self.cfg.max_iterations,
                });
            }
            self.admit()?;
            self.relieve_pressure()?;
            self.decode()?;
            self.step_boundaries()?;
            self.complete()?;
        }
        Ok(self.into_outcome())
    }

    fn head_admissible(&self, extra_resident: u64) -> bool {
        self.waiting.front().is_some_and(|&slot| {
            let kv = self.sims[slot].tokens_emitted;
            self.ledger.resident() + extra_resident + self.running_count() + kv + 1 <= self.ledger.capacity()
        })
    }

    fn admit(&mut self) -> Result<(), SimError> {
        while self.head_admissible(0) {
            let slot = self.waiting.pop_front().expect("non-empty queue");
            let kv = self.sims[slot].tokens_emitted;
            self.ledger.reserve(kv)?;
            let it = self.iteration;
            let sim = &mut self.sims[slot];
            sim.status = TraceStatus::Running;
            sim.kv_tokens_resident = kv;
            sim.started_at = it;
            sim.reconstructed_tokens += kv;
            self.log(it, EventKind::Resume, Some(slot));
        }
        if self.running_count() == 0 {
            if let Some(&slot) = self.waiting.front() {
                return Err(SimError::CapacityExceeded {
                    trace_id: self.sims[slot].id().to_string(),
                    needed: self.sims[slot].tokens_emitted + 1,
                    capacity: self.ledger.capacity(),
                });
            }
        }
        Ok(())
    }

    fn relieve_pressure(&mut self) -> Result<(), SimError> {
        loop {
            let running: Vec<&SimTrace> = self.sims.iter().filter(|s| s.is_running()).collect();
            let demand = running.len() as u64;
            if self.ledger.resident() + demand <= self.ledger.capacity() {
                return Ok(());
            }
            if running.len() <= 1 {
                let only = running.first().ok_or(SimError::NoRunningTraces)?;
                return Err(SimError::CapacityExceeded {
                    trace_id: only.id().to_string(),
                    needed: only.kv_tokens_resident + 1,
                    capacity: self.ledger.capacity(),
                });
            }
            match self.mode {
                Mode::Prune { .. } => {
                    let decision = policies::step_on_memory_full(&running)?;
                    self.prune(decision.slot, decision.reason, decision.score_at_prune)?;
                }
                _ => {
                    let victim = select_preemption_victim(&running)?.slot;
                    self.preempt(victim)?;
                }
            }
        }
    }

    fn prune(&mut self, slot: usize, reason: PruneReason, score: f64) -> Result<(), SimError> {
        let kv = self.sims[slot].kv_tokens_resident;
        self.ledger.release(kv)?;
        let sim = &mut self.sims[slot];
        sim.status = TraceStatus::Pruned;
        sim.kv_tokens_resident = 0;
        // pruning during phase 2 belongs to the upcoming iteration, later
        // prunes to the iteration that just decoded
        let it = self.hook_iteration(reason);
        self.prune_log.push(PruneRecord {
            iteration: it,
            trace_id: self.sims[slot].id().to_string(),
            score,
            reason,
        });
        self.log(it, EventKind::Prune, Some(slot));
        Ok(())
    }

    fn hook_iteration(&self, reason: PruneReason) -> u64 {
        match reason {
            PruneReason::MemoryPressure => self.iteration,
            _ => self.iteration - 1,
        }
    }

    fn preempt(&mut self, slot: usize) -> Result<(), SimError> {
        let kv = self.sims[slot].kv_tokens_resident;
        self.ledger.release(kv)?;
        let sim = &mut self.sims[slot];
        sim.status = TraceStatus::Waiting;
        sim.kv_tokens_resident = 0;
        sim.preemption_count += 1;
        self.waiting.push_back(slot);
        self.log(self.iteration, EventKind::Preempt, Some(slot));
        Ok(())
    }

    /// Runs one decode iteration, or several at once while nothing but
    /// token emission can happen.
    fn decode(&mut self) -> Result<(), SimError> {
        let running: Vec<usize> = self.sims.iter().filter(|s| s.is_running()).map(|s| s.slot).collect();
        let n = running.len() as u64;
        let fits = self.ledger.free() / n;
        let to_boundary = running
            .iter()
            .map(|&i| self.sims[i].next_step_end() - self.sims[i].tokens_emitted)
            .min()
            .expect("at least one running trace");
        let remaining = self.cfg.max_iterations - self.iteration;
        let mut span = fits.min(to_boundary).min(remaining).max(1);
        if span > 1 && self.head_admissible(n) {
            span = 1;
        }

        for &i in &running {
            let sim = &mut self.sims[i];
            sim.tokens_emitted += span;
            sim.kv_tokens_resident += span;
            sim.decode_iterations += span;
        }
        for &i in &self.waiting {
            self.sims[i].wait_iterations += span;
        }
        if self.cfg.record_events {
            for k in 0..span {
                self.ledger.reserve(n)?;
                self.log(self.iteration + k, EventKind::Decode, None);
            }
        } else {
            self.ledger.reserve(n * span)?;
        }
        self.iteration += span;
        self.peak_resident = self.peak_resident.max(self.ledger.resident());
        debug_assert!(self.ledger.resident() <= self.ledger.capacity());
        Ok(())
    }

    fn step_boundaries(&mut self) -> Result<(), SimError> {
        let it = self.iteration - 1;
        let mut similarity_due = false;
        for slot in 0..self.sims.len() {
            let sim = &self.sims[slot];
            if !sim.is_running() || sim.tokens_emitted != sim.next_step_end() {
                continue;
            }
            let step = &sim.trace.steps[sim.steps_completed];
            self.sims[slot].steps_completed += 1;
            self.log(it, EventKind::Step, Some(slot));
            let sim = &mut self.sims[slot];
            match self.mode {
                Mode::Preempt => {}
                Mode::Prune { weights } => {
                    let score = score_step(weights, step).map_err(|source| SimError::Unscoreable {
                        trace_id: sim.id().to_string(),
                        source,
                    })?;
                    sim.score_state = sim.score_state.update(score);
                }
                Mode::ConfidenceCutoff { threshold } => {
                    let action = policies::deepconf_step_hook(sim, step, threshold)?;
                    if action == HookAction::Terminate && !sim.is_complete() {
                        let score = sim.min_confidence.unwrap_or(0.0);
                        self.prune(slot, PruneReason::ConfidenceBelowThreshold, score)?;
                    }
                }
                Mode::Similarity { interval, .. } => {
                    let key = step
                        .similarity_key
                        .as_ref()
                        .filter(|k| !k.is_empty() && (sim.key_sum.is_empty() || sim.key_sum.len() == k.len()))
                        .ok_or_else(|| SimError::MissingSimilarityKey {
                            trace_id: sim.id().to_string(),
                        })?;
                    if sim.key_sum.is_empty() {
                        sim.key_sum = vec![0.0; key.len()];
                    }
                    sim.key_sum.iter_mut().zip(key).for_each(|(a, b)| *a += b);
                    if sim.steps_completed % interval == 0 {
                        similarity_due = true;
                    }
                }
            }
        }
        if let (true, Mode::Similarity { threshold, .. }) = (similarity_due, self.mode) {
            let mut active: Vec<&SimTrace> = self
                .sims
                .iter()
                .filter(|s| s.is_running() && s.steps_completed > 0 && !s.is_complete())
                .collect();
            active.sort_by(|a, b| a.id().cmp(b.id()));
            let decisions = policies::slimsc_check(&active, threshold, &mut self.rng)?;
            for d in decisions {
                self.prune(d.slot, d.reason, d.score_at_prune)?;
            }
        }
        Ok(())
    }

    fn complete(&mut self) -> Result<(), SimError> {
        let it = self.iteration - 1;
        for slot in 0..self.sims.len() {
            let sim = &mut self.sims[slot];
            if sim.is_running() && sim.is_complete() {
                sim.status = TraceStatus::Finished;
                let kv = sim.kv_tokens_resident;
                self.ledger.release(kv)?;
                self.log(it, EventKind::Finish, Some(slot));
            }
        }
        Ok(())
    }

    fn into_outcome(self) -> StageOutcome {
        let cfg = self.cfg;
        let traces: Vec<TraceOutcome> = self
            .sims
            .iter()
            .map(|s| TraceOutcome {
                trace_id: s.id().to_string(),
                status: s.status,
                tokens_emitted: s.tokens_emitted,
                total_tokens: s.total_tokens,
                steps_completed: s.steps_completed,
                decode_iterations: s.decode_iterations,
                wait_iterations: s.wait_iterations,
                reconstructed_tokens: s.reconstructed_tokens,
                decode_seconds: cfg.decode_seconds(s.decode_iterations),
                wait_seconds: cfg.decode_seconds(s.wait_iterations),
                reconstruct_seconds: cfg.reconstruct_seconds(s.reconstructed_tokens),
                preemption_count: s.preemption_count,
                trace_score: matches!(self.mode, Mode::Prune { .. }).then(|| s.score_state.score_or_neutral()),
                confidence: s.min_confidence,
                answer: (s.status == TraceStatus::Finished).then(|| s.trace.final_answer.clone()),
            })
            .collect();
        StageOutcome {
            iterations: self.iteration,
            reconstructed_tokens: traces.iter().map(|t| t.reconstructed_tokens).sum(),
            decode_iterations: traces.iter().map(|t| t.decode_iterations).sum(),
            wait_iterations: traces.iter().map(|t| t.wait_iterations).sum(),
            preemptions: traces.iter().map(|t| u64::from(t.preemption_count)).sum(),
            traces,
            peak_resident: self.peak_resident,
            prune_log: self.prune_log,
            events: self.events,
        }
    }
}

/// Baseline preemption victim: the running trace that (re)started most
/// recently, ties going to the lexicographically smallest trace id.
pub fn select_preemption_victim<'s, 'a>(running: &[&'s SimTrace<'a>]) -> Result<&'s SimTrace<'a>, SimError> {
    running
        .iter()
        .copied()
        .max_by(|a, b| a.started_at.cmp(&b.started_at).then_with(|| b.id().cmp(a.id())))
        .ok_or(SimError::NoRunningTraces)
}

pub(crate) fn validate_input(input: &SimInput, cfg: &EngineConfig) -> Result<(), SimError> {
    cfg.validate()?;
    if input.traces.is_empty() {
        return Err(SimError::EmptyInput);
    }
    let mut ids: Vec<&str> = input.traces.iter().map(|t| t.trace_id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(SimError::DuplicateTrace(w[0].to_string()));
    }
    if let Some(t) = input.traces.iter().find(|t| t.steps.is_empty() || t.steps.iter().any(|s| s.num_tokens == 0)) {
        return Err(SimError::InvalidConfig(format!("trace {} has an empty step or no steps", t.trace_id)));
    }
    Ok(())
}

pub(crate) fn run_stage(
    traces: &[&Trace],
    cfg: &EngineConfig,
    mode: Mode<'_>,
    seed: u64,
) -> Result<StageOutcome, SimError> {
    Stage::new(traces, cfg, mode, seed).run()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum VoteRule {
    Majority,
    ScoreWeighted,
}

/// Combines serialized stages into one result and votes over finished traces.
pub(crate) fn assemble(
    input: &SimInput,
    policy: &PolicyConfig,
    cfg: &EngineConfig,
    stages: Vec<(String, StageOutcome)>,
    rule: VoteRule,
) -> SimulationResult {
    let mut traces = Vec::new();
    let mut prune_log = Vec::new();
    let mut events = Vec::new();
    let mut summaries = Vec::new();
    let (mut iterations, mut recon, mut dec, mut wait, mut preemptions, mut peak) = (0u64, 0u64, 0u64, 0u64, 0u64, 0u64);
    for (name, s) in stages {
        let offset = iterations;
        summaries.push(StageSummary {
            name,
            traces: s.traces.len(),
            iterations: s.iterations,
            tokens: s.traces.iter().map(|t| t.tokens_emitted).sum(),
            decode_seconds: cfg.decode_seconds(s.decode_iterations),
            wait_seconds: cfg.decode_seconds(s.wait_iterations),
            reconstruct_seconds: cfg.reconstruct_seconds(s.reconstructed_tokens),
            end_to_end_seconds: cfg.decode_seconds(s.iterations) + cfg.reconstruct_seconds(s.reconstructed_tokens),
        });
        iterations += s.iterations;
        recon += s.reconstructed_tokens;
        dec += s.decode_iterations;
        wait += s.wait_iterations;
        preemptions += s.preemptions;
        peak = peak.max(s.peak_resident);
        prune_log.extend(s.prune_log.into_iter().map(|mut p| {
            p.iteration += offset;
            p
        }));
        events.extend(s.events.into_iter().map(|mut e| {
            e.iteration += offset;
            e
        }));
        traces.extend(s.traces);
    }

    let ballots: Vec<Ballot> = traces
        .iter()
        .filter_map(|t| {
            t.answer.as_ref().map(|a| Ballot::new(&t.trace_id, a, t.trace_score.unwrap_or(1.0)))
        })
        .collect();
    let chosen_answer = match rule {
        VoteRule::Majority => majority_vote(&ballots).ok(),
        VoteRule::ScoreWeighted => weighted_vote(&ballots).ok(),
    };
    let correct = match (&chosen_answer, &input.gold_answer) {
        (Some(c), Some(g)) => crate::corpus::normalize_answer(c) == crate::corpus::normalize_answer(g),
        _ => false,
    };
    SimulationResult {
        question_id: input.question_id.clone(),
        policy: policy.label().to_string(),
        total_tokens_generated: traces.iter().map(|t| t.tokens_emitted).sum(),
        traces,
        chosen_answer,
        correct,
        iterations,
        decode_seconds: cfg.decode_seconds(dec),
        wait_seconds: cfg.decode_seconds(wait),
        reconstruct_seconds: cfg.reconstruct_seconds(recon),
        end_to_end_seconds: cfg.decode_seconds(iterations) + cfg.reconstruct_seconds(recon),
        preemptions,
        peak_resident: peak,
        memory_budget_tokens: cfg.memory_budget_tokens,
        prune_log,
        stages: summaries,
        events,
    }
}

/// Simulates one question's traces under `policy`.
///
/// DeepConf runs as two serialized stages (warmup, then thresholded
/// generation); every other policy is a single engine run.
pub fn simulate(
    input: &SimInput,
    policy: &PolicyConfig,
    cfg: &EngineConfig,
    scorer: Option<&ScorerWeights>,
    seed: u64,
) -> Result<SimulationResult, SimError> {
    validate_input(input, cfg)?;
    policy.validate(input.traces.len())?;
    let single = |mode: Mode<'_>, rule: VoteRule| -> Result<SimulationResult, SimError> {
        let outcome = run_stage(&input.traces, cfg, mode, seed)?;
        Ok(assemble(input, policy, cfg, vec![("main".into(), outcome)], rule))
    };
    match *policy {
        PolicyConfig::Sc => single(Mode::Preempt, VoteRule::Majority),
        PolicyConfig::Step { scorer_source } => {
            let weights = match scorer_source {
                policies::ScorerSource::Mlp => Some(scorer.ok_or(SimError::MissingScorer)?),
                policies::ScorerSource::Precomputed => None,
            };
            single(Mode::Prune { weights }, VoteRule::ScoreWeighted)
        }
        PolicyConfig::DeepConf {
            warmup_count,
            keep_percentile,
        } => policies::run_deepconf(input, warmup_count, keep_percentile, cfg, seed),
        PolicyConfig::SlimSc {
            similarity_threshold,
            check_interval_steps,
        } => single(
            Mode::Similarity {
                threshold: similarity_threshold,
                interval: check_interval_steps,
            },
            VoteRule::Majority,
        ),
    }
}
