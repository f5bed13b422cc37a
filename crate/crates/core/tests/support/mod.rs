//! Brute-force reference scheduler and random instance builders.
//!
//! The reference advances one iteration at a time, keeps no running
//! aggregates and recomputes resident KV, trace scores, confidences and mean
//! similarity keys from scratch whenever it needs them.

#![allow(dead_code)]

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stepsim_core::engine::{EventKind, SimEvent};
use stepsim_core::policies::PruneReason;
use stepsim_core::{PolicyConfig, Step, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefStatus {
    Running,
    Waiting,
    Pruned,
    Finished,
}

#[derive(Debug, Clone)]
struct RefTrace<'a> {
    trace: &'a Trace,
    status: RefStatus,
    emitted: u64,
    kv: u64,
    steps_done: usize,
    started_at: u64,
    decode: u64,
    wait: u64,
    recon: u64,
    preemptions: u32,
}

impl<'a> RefTrace<'a> {
    fn total(&self) -> u64 {
        self.trace.steps.iter().map(|s| s.num_tokens as u64).sum()
    }

    fn boundary_after(&self, k: usize) -> u64 {
        self.trace.steps[..=k].iter().map(|s| s.num_tokens as u64).sum()
    }

    fn done_steps(&self) -> &'a [Step] {
        &self.trace.steps[..self.steps_done]
    }

    fn score(&self) -> f64 {
        let s = self.done_steps();
        if s.is_empty() {
            return 0.5;
        }
        let mut sum = 0.0;
        for step in s {
            sum += step.precomputed_score.unwrap();
        }
        sum / s.len() as f64
    }

    fn min_conf(&self) -> f64 {
        self.done_steps()
            .iter()
            .map(|s| s.mean_token_confidence.unwrap())
            .fold(f64::INFINITY, f64::min)
    }

    fn mean_key(&self) -> Vec<f64> {
        let s = self.done_steps();
        let dim = s[0].similarity_key.as_ref().unwrap().len();
        let mut out = vec![0.0; dim];
        for step in s {
            for (o, v) in out.iter_mut().zip(step.similarity_key.as_ref().unwrap()) {
                *o += v;
            }
        }
        out.iter().map(|v| v / s.len() as f64).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum RefMode {
    Preempt,
    Prune,
    Cutoff(f64),
    Similar { threshold: f64, interval: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefOutcome {
    pub trace_id: String,
    pub status: RefStatus,
    pub tokens: u64,
    pub decode: u64,
    pub wait: u64,
    pub recon: u64,
    pub preemptions: u32,
    pub score: f64,
    pub answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefPrune {
    pub iteration: u64,
    pub trace_id: String,
    pub score: f64,
    pub reason: PruneReason,
}

#[derive(Debug, Clone, Default)]
pub struct RefRun {
    pub iterations: u64,
    pub events: Vec<SimEvent>,
    pub prunes: Vec<RefPrune>,
    pub traces: Vec<RefOutcome>,
    pub chosen: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefError(pub String);

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

struct Sched<'a> {
    ts: Vec<RefTrace<'a>>,
    queue: VecDeque<usize>,
    cap: u64,
    it: u64,
    events: Vec<SimEvent>,
    prunes: Vec<RefPrune>,
}

impl<'a> Sched<'a> {
    fn resident(&self) -> u64 {
        self.ts.iter().filter(|t| t.status == RefStatus::Running).map(|t| t.kv).sum()
    }

    fn running(&self) -> Vec<usize> {
        (0..self.ts.len()).filter(|&i| self.ts[i].status == RefStatus::Running).collect()
    }

    fn event(&mut self, iteration: u64, kind: EventKind, i: Option<usize>) {
        let trace_id = match i {
            Some(i) => self.ts[i].trace.trace_id.clone(),
            None => "*".into(),
        };
        let resident = self.resident();
        self.events.push(SimEvent {
            iteration,
            kind,
            trace_id,
            resident,
        });
    }

    fn prune(&mut self, i: usize, iteration: u64, score: f64, reason: PruneReason) {
        self.ts[i].status = RefStatus::Pruned;
        self.ts[i].kv = 0;
        self.prunes.push(RefPrune {
            iteration,
            trace_id: self.ts[i].trace.trace_id.clone(),
            score,
            reason,
        });
        self.event(iteration, EventKind::Prune, Some(i));
    }

    fn id(&self, i: usize) -> &str {
        &self.ts[i].trace.trace_id
    }
}

/// Runs one engine stage step by step.
pub fn reference_stage(traces: &[&Trace], cap: u64, mode: RefMode, seed: u64) -> Result<RefRun, RefError> {
    let mut s = Sched {
        ts: traces
            .iter()
            .map(|t| RefTrace {
                trace: t,
                status: RefStatus::Running,
                emitted: 0,
                kv: 0,
                steps_done: 0,
                started_at: 0,
                decode: 0,
                wait: 0,
                recon: 0,
                preemptions: 0,
            })
            .collect(),
        queue: VecDeque::new(),
        cap,
        it: 0,
        events: Vec::new(),
        prunes: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    while s
        .ts
        .iter()
        .any(|t| t.status == RefStatus::Running || t.status == RefStatus::Waiting)
    {
        if s.it > 100_000 {
            return Err(RefError("runaway".into()));
        }
        // admission
        while let Some(&head) = s.queue.front() {
            let need = s.resident() + s.running().len() as u64 + s.ts[head].emitted + 1;
            if need > s.cap {
                break;
            }
            s.queue.pop_front();
            let t = &mut s.ts[head];
            t.status = RefStatus::Running;
            t.kv = t.emitted;
            t.recon += t.emitted;
            t.started_at = s.it;
            s.event(s.it, EventKind::Resume, Some(head));
        }
        if s.running().is_empty() {
            return Err(RefError("capacity".into()));
        }

        // memory pressure
        while s.resident() + s.running().len() as u64 > s.cap {
            let run = s.running();
            if run.len() == 1 {
                return Err(RefError("capacity".into()));
            }
            match mode {
                RefMode::Prune => {
                    let mut best = run[0];
                    for &i in &run[1..] {
                        let (a, b) = (s.ts[i].score(), s.ts[best].score());
                        let better = a < b
                            || (a == b && s.ts[i].kv > s.ts[best].kv)
                            || (a == b && s.ts[i].kv == s.ts[best].kv && s.id(i) < s.id(best));
                        if better {
                            best = i;
                        }
                    }
                    let score = s.ts[best].score();
                    s.prune(best, s.it, score, PruneReason::MemoryPressure);
                }
                _ => {
                    let mut victim = run[0];
                    for &i in &run[1..] {
                        let (a, b) = (s.ts[i].started_at, s.ts[victim].started_at);
                        if a > b || (a == b && s.id(i) < s.id(victim)) {
                            victim = i;
                        }
                    }
                    let t = &mut s.ts[victim];
                    t.status = RefStatus::Waiting;
                    t.kv = 0;
                    t.preemptions += 1;
                    s.queue.push_back(victim);
                    s.event(s.it, EventKind::Preempt, Some(victim));
                }
            }
        }

        // decode one token
        for t in s.ts.iter_mut() {
            match t.status {
                RefStatus::Running => {
                    t.emitted += 1;
                    t.kv += 1;
                    t.decode += 1;
                }
                RefStatus::Waiting => t.wait += 1,
                _ => {}
            }
        }
        s.event(s.it, EventKind::Decode, None);
        let at = s.it;
        s.it += 1;

        // step boundaries
        let mut due = false;
        for i in 0..s.ts.len() {
            let t = &s.ts[i];
            if t.status != RefStatus::Running || t.emitted != t.boundary_after(t.steps_done) {
                continue;
            }
            s.ts[i].steps_done += 1;
            s.event(at, EventKind::Step, Some(i));
            let t = &s.ts[i];
            match mode {
                RefMode::Cutoff(threshold) => {
                    let low = t.min_conf();
                    if low < threshold && t.emitted < t.total() {
                        s.prune(i, at, low, PruneReason::ConfidenceBelowThreshold);
                    }
                }
                RefMode::Similar { interval, .. } => {
                    if t.steps_done % interval == 0 {
                        due = true;
                    }
                }
                _ => {}
            }
        }
        if let (true, RefMode::Similar { threshold, .. }) = (due, mode) {
            let mut active: Vec<usize> = (0..s.ts.len())
                .filter(|&i| {
                    let t = &s.ts[i];
                    t.status == RefStatus::Running && t.steps_done > 0 && t.emitted < t.total()
                })
                .collect();
            active.sort_by(|&a, &b| s.id(a).cmp(s.id(b)));
            let keys: Vec<Vec<f64>> = active.iter().map(|&i| s.ts[i].mean_key()).collect();
            let mut gone = vec![false; active.len()];
            let mut chosen = Vec::new();
            for a in 0..active.len() {
                for b in a + 1..active.len() {
                    if gone[a] || gone[b] {
                        continue;
                    }
                    let c = cos(&keys[a], &keys[b]);
                    if c > threshold {
                        let p = if rng.random_bool(0.5) { a } else { b };
                        gone[p] = true;
                        chosen.push((active[p], c));
                    }
                }
            }
            for (i, c) in chosen {
                s.prune(i, at, c, PruneReason::SimilarityRedundant);
            }
        }

        // completion
        for i in 0..s.ts.len() {
            if s.ts[i].status == RefStatus::Running && s.ts[i].emitted == s.ts[i].total() {
                s.ts[i].status = RefStatus::Finished;
                s.ts[i].kv = 0;
                s.event(at, EventKind::Finish, Some(i));
            }
        }
    }

    let traces = s
        .ts
        .iter()
        .map(|t| RefOutcome {
            trace_id: t.trace.trace_id.clone(),
            status: t.status,
            tokens: t.emitted,
            decode: t.decode,
            wait: t.wait,
            recon: t.recon,
            preemptions: t.preemptions,
            score: t.score(),
            answer: (t.status == RefStatus::Finished).then(|| t.trace.final_answer.clone()),
        })
        .collect();
    Ok(RefRun {
        iterations: s.it,
        events: s.events,
        prunes: s.prunes,
        traces,
        chosen: None,
    })
}

/// Majority by count, ties to the larger weight and then the smaller answer.
pub fn reference_vote(ballots: &[(String, f64)], weighted: bool) -> Option<String> {
    let mut tally: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for (a, w) in ballots {
        let e = tally.entry(a.as_str()).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += w;
    }
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs());
    let mut best: Option<(&str, usize, f64)> = None;
    for (a, (c, w)) in tally {
        best = match best {
            None => Some((a, c, w)),
            Some((ba, bc, bw)) => {
                let wins = if weighted {
                    !close(w, bw) && w > bw
                } else {
                    c > bc || (c == bc && !close(w, bw) && w > bw)
                };
                if wins {
                    Some((a, c, w))
                } else {
                    Some((ba, bc, bw))
                }
            }
        };
    }
    best.map(|(a, _, _)| a.to_string())
}

fn kth_largest(mut xs: Vec<f64>, keep: f64) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    let mut k = 1;
    while (k as f64) < keep * n as f64 - 1e-9 {
        k += 1;
    }
    xs[n - k.min(n)]
}

fn merge(into: &mut RefRun, stage: RefRun) {
    let offset = into.iterations;
    into.iterations += stage.iterations;
    into.events.extend(stage.events.into_iter().map(|mut e| {
        e.iteration += offset;
        e
    }));
    into.prunes.extend(stage.prunes.into_iter().map(|mut p| {
        p.iteration += offset;
        p
    }));
    into.traces.extend(stage.traces);
}

/// Full reference run of a policy, including DeepConf's two stages and the vote.
pub fn reference_run(traces: &[&Trace], cap: u64, policy: &PolicyConfig, seed: u64) -> Result<RefRun, RefError> {
    let mut run = RefRun::default();
    let mut weighted = false;
    match *policy {
        PolicyConfig::Sc => merge(&mut run, reference_stage(traces, cap, RefMode::Preempt, seed)?),
        PolicyConfig::Step { .. } => {
            weighted = true;
            merge(&mut run, reference_stage(traces, cap, RefMode::Prune, seed)?)
        }
        PolicyConfig::DeepConf {
            warmup_count,
            keep_percentile,
        } => {
            let (warm, rest) = traces.split_at(warmup_count);
            merge(&mut run, reference_stage(warm, cap, RefMode::Preempt, seed)?);
            if !rest.is_empty() {
                let threshold = if keep_percentile >= 1.0 {
                    f64::NEG_INFINITY
                } else {
                    let stats = warm
                        .iter()
                        .map(|t| {
                            t.steps
                                .iter()
                                .map(|s| s.mean_token_confidence.unwrap())
                                .fold(f64::INFINITY, f64::min)
                        })
                        .collect();
                    kth_largest(stats, keep_percentile)
                };
                merge(&mut run, reference_stage(rest, cap, RefMode::Cutoff(threshold), seed + 1)?);
            }
        }
        PolicyConfig::SlimSc {
            similarity_threshold,
            check_interval_steps,
        } => merge(
            &mut run,
            reference_stage(
                traces,
                cap,
                RefMode::Similar {
                    threshold: similarity_threshold,
                    interval: check_interval_steps,
                },
                seed,
            )?,
        ),
    }
    let ballots: Vec<(String, f64)> = run
        .traces
        .iter()
        .filter_map(|t| t.answer.clone().map(|a| (a, if weighted { t.score } else { 1.0 })))
        .collect();
    run.chosen = reference_vote(&ballots, weighted);
    Ok(run)
}

/// Small random trace set with tied scores, confidences and keys.
pub fn random_instance(rng: &mut ChaCha8Rng, max_traces: usize, max_tokens: u32) -> Vec<Trace> {
    let n = rng.random_range(1..=max_traces);
    (0..n)
        .map(|i| {
            let total = rng.random_range(1..=max_tokens);
            let mut left = total;
            let mut steps = Vec::new();
            while left > 0 {
                let k = rng.random_range(1..=left.min(6));
                left -= k;
                let mut s = Step::with_tokens(k);
                s.precomputed_score = Some([0.1, 0.3, 0.5, 0.7, 0.9][rng.random_range(0..5)]);
                s.mean_token_confidence = Some([0.2, 0.4, 0.6, 0.8][rng.random_range(0..4)]);
                s.similarity_key = Some((0..2).map(|_| rng.random_range(0..3) as f64).collect());
                steps.push(s);
            }
            Trace {
                question_id: "q".into(),
                trace_id: ["tc", "ta", "td", "tb", "tf", "te"][i % 6].to_string(),
                steps,
                correct: false,
                final_answer: ["1", "2", "3"][rng.random_range(0..3)].to_string(),
            }
        })
        .collect()
}

/// One random configuration of each policy for `n` traces.
pub fn random_policies(rng: &mut ChaCha8Rng, n: usize) -> Vec<PolicyConfig> {
    vec![
        PolicyConfig::Sc,
        PolicyConfig::Step {
            scorer_source: stepsim_core::policies::ScorerSource::Precomputed,
        },
        PolicyConfig::DeepConf {
            warmup_count: rng.random_range(1..=n),
            keep_percentile: [0.1, 0.25, 0.5, 0.75, 1.0][rng.random_range(0..5)],
        },
        PolicyConfig::SlimSc {
            similarity_threshold: [0.5, 0.9, 0.99, 1.5][rng.random_range(0..4)],
            check_interval_steps: rng.random_range(1..=3),
        },
    ]
}
