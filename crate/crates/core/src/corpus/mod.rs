//! Trace data model and corpus files.
//!
//! A corpus file is UTF-8, one JSON object per line. The first line is a
//! header `{"feature_dim": d}`; every following line is one trace:
//!
//! ```text
//! {"question_id": "q0", "gold_answer": "42", "trace_id": "t3", "correct": true,
//!  "final_answer": "42", "steps": [{"num_tokens": 17, "feature": [..],
//!  "precomputed_score": 0.8, "mean_token_confidence": 2.1, "similarity_key": [..]}]}
//! ```
//!
//! Step fields other than `num_tokens` are optional. Unknown fields are ignored.

mod answer;
mod synthetic;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use answer::normalize_answer;
pub use synthetic::{generate_synthetic, SyntheticConfig};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("no records")]
    NoRecords,
    #[error("trace {question_id}/{trace_id}: feature length {found} does not match feature_dim {expected}")]
    DimensionMismatch {
        question_id: String,
        trace_id: String,
        expected: usize,
        found: usize,
    },
    #[error("trace {question_id}/{trace_id}: correct={correct} contradicts gold answer {gold:?} vs final answer {answer:?}")]
    LabelMismatch {
        question_id: String,
        trace_id: String,
        correct: bool,
        gold: String,
        answer: String,
    },
    #[error("trace {question_id}/{trace_id}: {reason}")]
    InvalidTrace {
        question_id: String,
        trace_id: String,
        reason: String,
    },
    #[error("question {question_id}: {reason}")]
    InvalidQuestion { question_id: String, reason: String },
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
}

/// One delimiter-bounded reasoning step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub num_tokens: u32,
    /// Stand-in for the last-layer hidden state at the step-end token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precomputed_score: Option<f64>,
    /// Mean token confidence over the step; only the confidence baseline reads it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_token_confidence: Option<f64>,
    /// Embedding used by the similarity baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity_key: Option<Vec<f64>>,
}

impl Step {
    pub fn with_tokens(num_tokens: u32) -> Self {
        Step {
            num_tokens,
            feature: None,
            precomputed_score: None,
            mean_token_confidence: None,
            similarity_key: None,
        }
    }

    pub fn is_scoreable(&self) -> bool {
        self.feature.is_some() || self.precomputed_score.is_some()
    }
}

/// One sampled reasoning trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub question_id: String,
    pub trace_id: String,
    pub steps: Vec<Step>,
    pub correct: bool,
    pub final_answer: String,
}

impl Trace {
    pub fn total_tokens(&self) -> u64 {
        self.steps.iter().map(|s| u64::from(s.num_tokens)).sum()
    }

    /// Cumulative token index at which each step ends.
    pub fn step_ends(&self) -> Vec<u64> {
        self.steps
            .iter()
            .scan(0u64, |acc, s| {
                *acc += u64::from(s.num_tokens);
                Some(*acc)
            })
            .collect()
    }

    fn check(&self, feature_dim: usize) -> Result<(), CorpusError> {
        let invalid = |reason: String| CorpusError::InvalidTrace {
            question_id: self.question_id.clone(),
            trace_id: self.trace_id.clone(),
            reason,
        };
        if self.steps.is_empty() {
            return Err(invalid("trace has no steps".into()));
        }
        for (i, step) in self.steps.iter().enumerate() {
            if step.num_tokens == 0 {
                return Err(invalid(format!("step {i} has zero tokens")));
            }
            if let Some(f) = &step.feature {
                if f.len() != feature_dim {
                    return Err(CorpusError::DimensionMismatch {
                        question_id: self.question_id.clone(),
                        trace_id: self.trace_id.clone(),
                        expected: feature_dim,
                        found: f.len(),
                    });
                }
                if f.iter().any(|v| !v.is_finite()) {
                    return Err(invalid(format!("step {i} feature is not finite")));
                }
            }
            if let Some(p) = step.precomputed_score {
                if !(0.0..=1.0).contains(&p) {
                    return Err(invalid(format!("step {i} precomputed_score {p} outside [0,1]")));
                }
            }
            if let Some(c) = step.mean_token_confidence {
                if !(c >= 0.0 && c.is_finite()) {
                    return Err(invalid(format!("step {i} mean_token_confidence {c} is negative")));
                }
            }
            if let Some(k) = &step.similarity_key {
                if k.iter().any(|v| !v.is_finite()) {
                    return Err(invalid(format!("step {i} similarity_key is not finite")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Question {
    pub gold_answer: Option<String>,
    pub traces: Vec<Trace>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    /// Hidden-state feature dimension; 0 when the corpus carries no features.
    pub feature_dim: usize,
    pub questions: BTreeMap<String, Question>,
}

impl Corpus {
    pub fn new(feature_dim: usize) -> Self {
        Corpus {
            feature_dim,
            questions: BTreeMap::new(),
        }
    }

    pub fn num_traces(&self) -> usize {
        self.questions.values().map(|q| q.traces.len()).sum()
    }

    pub fn traces(&self) -> impl Iterator<Item = &Trace> {
        self.questions.values().flat_map(|q| q.traces.iter())
    }

    pub fn gold_answers(&self) -> BTreeMap<String, String> {
        self.questions
            .iter()
            .filter_map(|(id, q)| q.gold_answer.clone().map(|g| (id.clone(), g)))
            .collect()
    }

    /// Adds a trace after checking step, dimension and label invariants.
    ///
    /// The corpus is left untouched when the trace is rejected.
    pub fn insert_trace(&mut self, gold_answer: Option<String>, trace: Trace) -> Result<(), CorpusError> {
        trace.check(self.feature_dim)?;
        let existing = self.questions.get(&trace.question_id);
        let known_gold = existing.and_then(|q| q.gold_answer.clone());
        let gold = match (known_gold, gold_answer) {
            (Some(a), Some(b)) if a != b => {
                return Err(CorpusError::InvalidQuestion {
                    question_id: trace.question_id.clone(),
                    reason: format!("conflicting gold answers {a:?} and {b:?}"),
                })
            }
            (a, b) => a.or(b),
        };
        if let Some(gold) = &gold {
            let siblings = existing.map(|q| q.traces.as_slice()).unwrap_or_default();
            for t in siblings.iter().chain(std::iter::once(&trace)) {
                let matches = normalize_answer(&t.final_answer) == normalize_answer(gold);
                if matches != t.correct {
                    return Err(CorpusError::LabelMismatch {
                        question_id: t.question_id.clone(),
                        trace_id: t.trace_id.clone(),
                        correct: t.correct,
                        gold: gold.clone(),
                        answer: t.final_answer.clone(),
                    });
                }
            }
        }
        if existing.is_some_and(|q| q.traces.iter().any(|t| t.trace_id == trace.trace_id)) {
            return Err(CorpusError::InvalidTrace {
                question_id: trace.question_id.clone(),
                trace_id: trace.trace_id.clone(),
                reason: "duplicate trace_id within question".into(),
            });
        }
        let question = self.questions.entry(trace.question_id.clone()).or_default();
        question.gold_answer = gold;
        question.traces.push(trace);
        Ok(())
    }

    /// True when every step of every trace can be scored without a trained scorer.
    pub fn has_precomputed_scores(&self) -> bool {
        self.traces().all(|t| t.steps.iter().all(|s| s.precomputed_score.is_some()))
    }

    pub fn has_features(&self) -> bool {
        self.feature_dim > 0 && self.traces().all(|t| t.steps.iter().all(|s| s.feature.is_some()))
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    feature_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct TraceRecord {
    question_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_answer: Option<String>,
    trace_id: String,
    correct: bool,
    final_answer: String,
    steps: Vec<Step>,
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let file = File::open(path)?;
    read_corpus(BufReader::new(file))
}

pub fn read_corpus<R: BufRead>(reader: R) -> Result<Corpus, CorpusError> {
    let mut corpus: Option<Corpus> = None;
    let mut records = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        };
        match corpus.as_mut() {
            None => {
                let header: Header = serde_json::from_str(&line).map_err(parse_err)?;
                corpus = Some(Corpus::new(header.feature_dim));
            }
            Some(c) => {
                let rec: TraceRecord = serde_json::from_str(&line).map_err(parse_err)?;
                let trace = Trace {
                    question_id: rec.question_id,
                    trace_id: rec.trace_id,
                    steps: rec.steps,
                    correct: rec.correct,
                    final_answer: rec.final_answer,
                };
                c.insert_trace(rec.gold_answer, trace)?;
                records += 1;
            }
        }
    }
    match corpus {
        Some(c) if records > 0 => Ok(c),
        _ => Err(CorpusError::NoRecords),
    }
}

pub fn write_corpus<W: Write>(corpus: &Corpus, mut out: W) -> Result<(), CorpusError> {
    let header = Header {
        feature_dim: corpus.feature_dim,
    };
    serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for (qid, q) in &corpus.questions {
        for t in &q.traces {
            let rec = TraceRecord {
                question_id: qid.clone(),
                gold_answer: q.gold_answer.clone(),
                trace_id: t.trace_id.clone(),
                correct: t.correct,
                final_answer: t.final_answer.clone(),
                steps: t.steps.clone(),
            };
            serde_json::to_writer(&mut out, &rec).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let file = File::create(path)?;
    write_corpus(corpus, BufWriter::new(file))
}
