//! Experiment grids: policy × trace budget × memory budget × seed over the
//! questions of a corpus, aggregated into report rows.
//!
//! Configs are TOML. Any field can be overridden with a dotted
//! `key=value` assignment, e.g. `engine.memory_budget_tokens=2048` or
//! `corpus.synthetic.seed=7`; values are parsed as TOML and fall back to a
//! plain string.

mod commands;
mod grid;
mod output;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{generate_synthetic, load_corpus, Corpus, CorpusError, SyntheticConfig};
use crate::engine::{EngineConfig, SimError};
use crate::policies::{PolicyConfig, ScorerSource};
use crate::scorer::ScorerError;

pub use commands::{balance_traces, history_path, rankacc_command, split_questions, train_command, TrainSummary};
pub use grid::{run_grid, GridOutput, ReportRow, RunRecord, SkipRecord};
pub use output::{read_summary, render_report, run_experiment, write_outputs, Summary};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error("question {question_id}: {source}")]
    Simulation { question_id: String, source: SimError },
    #[error("invalid override {0:?}: expected key=value")]
    Override(String),
}

impl ExperimentError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            ExperimentError::Config(_) | ExperimentError::Override(_) | ExperimentError::Toml(_) => "config",
            ExperimentError::Io { .. } => "io",
            ExperimentError::Json(_) => "format",
            ExperimentError::Corpus(_) => "corpus",
            ExperimentError::Scorer(_) => "scorer",
            ExperimentError::Simulation { .. } => "simulation",
        }
    }
}

/// Exactly one of `path` and `synthetic` must be set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
}

impl CorpusSpec {
    pub fn load(&self) -> Result<Corpus, ExperimentError> {
        match (&self.path, &self.synthetic) {
            (Some(p), None) => Ok(load_corpus(p)?),
            (None, Some(s)) => Ok(generate_synthetic(s)?),
            _ => Err(ExperimentError::Config(
                "corpus needs exactly one of `path` or `synthetic`".into(),
            )),
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub policies: Vec<PolicyConfig>,
    /// Traces sampled per question.
    pub trace_budgets: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Multipliers applied to `engine.memory_budget_tokens`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_sweep: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scorer_weights_path: Option<PathBuf>,
    #[serde(default)]
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub engine: EngineConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.policies.is_empty() {
            return bad("at least one policy is required".into());
        }
        if self.trace_budgets.is_empty() || self.trace_budgets.contains(&0) {
            return bad("trace_budgets must be a non-empty list of positive counts".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.corpus.path.is_some() == self.corpus.synthetic.is_some() {
            return bad("corpus needs exactly one of `path` or `synthetic`".into());
        }
        if let Some(sweep) = &self.memory_sweep {
            if sweep.is_empty() || sweep.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
                return bad("memory_sweep multipliers must be positive".into());
            }
        }
        self.engine
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        for p in &self.policies {
            for &b in &self.trace_budgets {
                p.validate(b)
                    .map_err(|e| ExperimentError::Config(format!("{} at trace budget {b}: {e}", p.describe())))?;
            }
        }
        Ok(())
    }

    pub fn needs_trained_scorer(&self) -> bool {
        self.policies.iter().any(|p| {
            matches!(
                p,
                PolicyConfig::Step {
                    scorer_source: ScorerSource::Mlp
                }
            )
        })
    }

    /// Memory budgets to run, each with its multiplier when sweeping.
    pub fn memory_budgets(&self) -> Vec<(u64, Option<f64>)> {
        match &self.memory_sweep {
            None => vec![(self.engine.memory_budget_tokens, None)],
            Some(sweep) => sweep
                .iter()
                .map(|&m| (((self.engine.memory_budget_tokens as f64) * m).round().max(1.0) as u64, Some(m)))
                .collect(),
        }
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, ExperimentError> {
        let config: ExperimentConfig = from_toml_with_overrides(Some(text), overrides)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("experiment config serializes to TOML")
    }
}

/// Parses a TOML document (empty when `text` is `None`), applies dotted
/// overrides and deserializes the result.
pub fn from_toml_with_overrides<T: serde::de::DeserializeOwned>(
    text: Option<&str>,
    overrides: &[String],
) -> Result<T, ExperimentError> {
    let mut table: toml::Table = match text {
        Some(t) => toml::from_str(t)?,
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    Ok(toml::Value::Table(table).try_into()?)
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
pub fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `a.b.c=value` to a TOML table, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ExperimentError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ExperimentError::Override(assignment.to_string()))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ExperimentError::Override(assignment.to_string()));
    }
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ExperimentError::Override(format!("{assignment} ({p} is not a table)")))?;
    }
    cur.insert(last.to_string(), parse_override_value(raw.trim()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
output_dir = "out"
policies = ["sc", { step = { scorer_source = "precomputed" } }]
trace_budgets = [4]

[corpus.synthetic]
num_questions = 3
traces_per_question = 4

[engine]
memory_budget_tokens = 100
decode_seconds_per_iteration = 0.01
prefill_tokens_per_second = 1000.0
"#;

    #[test]
    fn parses_and_overrides() {
        let c = ExperimentConfig::from_toml_str(BASE, &[]).unwrap();
        assert_eq!(c.seeds, vec![0]);
        assert_eq!(c.corpus.synthetic.as_ref().unwrap().traces_per_question, 4);
        let o = ExperimentConfig::from_toml_str(
            BASE,
            &[
                "engine.memory_budget_tokens=64".into(),
                "seeds=[1, 2]".into(),
                "corpus.synthetic.seed=9".into(),
                "output_dir=elsewhere/x".into(),
                "memory_sweep=[0.5, 1.0]".into(),
            ],
        )
        .unwrap();
        assert_eq!(o.engine.memory_budget_tokens, 64);
        assert_eq!(o.seeds, vec![1, 2]);
        assert_eq!(o.corpus.synthetic.as_ref().unwrap().seed, 9);
        assert_eq!(o.output_dir, PathBuf::from("elsewhere/x"));
        assert_eq!(o.memory_budgets(), vec![(32, Some(0.5)), (64, Some(1.0))]);
    }

    #[test]
    fn round_trips_through_toml() {
        let c = ExperimentConfig::from_toml_str(BASE, &[]).unwrap();
        let again = ExperimentConfig::from_toml_str(&c.to_toml_string(), &[]).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn rejects_bad_configs() {
        for o in [
            "trace_budgets=[]",
            "policies=[]",
            "engine.memory_budget_tokens=0",
            "corpus.path=\"x.jsonl\"",
            "memory_sweep=[-1.0]",
            "policies=[{ deepconf = { warmup_count = 5 } }]",
            "bogus=1",
        ] {
            assert!(ExperimentConfig::from_toml_str(BASE, &[o.to_string()]).is_err(), "{o}");
        }
        assert!(matches!(
            ExperimentConfig::from_toml_str(BASE, &["noequals".into()]),
            Err(ExperimentError::Override(_))
        ));
        assert!(ExperimentConfig::from_toml_str(BASE, &["output_dir.x=1".into()]).is_err());
    }
}
