use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::grid::{run_grid, GridOutput, ReportRow, SkipRecord};
use super::{ExperimentConfig, ExperimentError};
use crate::engine::write_event_log;
use crate::scorer::load_weights;

pub const REPORT_FILE: &str = "report.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const DETAILS_FILE: &str = "details.jsonl";
pub const EVENTS_DIR: &str = "events";

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub rows: Vec<ReportRow>,
    pub skipped: Vec<SkipRecord>,
}

/// Loads the corpus and optional scorer named by `config`, runs the grid and
/// writes all artifacts under `config.output_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<GridOutput, ExperimentError> {
    config.validate()?;
    let corpus = config.corpus.load()?;
    let scorer = config.scorer_weights_path.as_ref().map(load_weights).transpose()?;
    let out = run_grid(config, &corpus, scorer.as_ref())?;
    write_outputs(config, &out)?;
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from(
        "policy,trace_budget,memory_budget,memory_multiplier,questions,skipped_questions,accuracy,\
         mean_tokens_per_question,mean_end_to_end_seconds,mean_wait_seconds,mean_decode_seconds,\
         mean_reconstruct_seconds,wait_fraction,decode_fraction,reconstruct_fraction,prune_count,preemptions\n",
    );
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.policy,
            r.trace_budget,
            r.memory_budget,
            opt(r.memory_multiplier),
            r.questions,
            r.skipped_questions,
            r.accuracy,
            r.mean_tokens_per_question,
            r.mean_end_to_end_seconds,
            r.mean_wait_seconds,
            r.mean_decode_seconds,
            r.mean_reconstruct_seconds,
            r.wait_fraction,
            r.decode_fraction,
            r.reconstruct_fraction,
            r.prune_count,
            r.preemptions
        )
        .expect("writing to a String");
    }
    s
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), ExperimentError> {
    fs::write(path, contents).map_err(|e| ExperimentError::io(path, e))
}

/// Writes `report.csv`, `summary.json`, `details.jsonl` and, when the
/// engine recorded events, one JSONL log per run under `events/`.
pub fn write_outputs(config: &ExperimentConfig, out: &GridOutput) -> Result<(), ExperimentError> {
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
    write_file(&dir.join(REPORT_FILE), report_csv(&out.rows).as_bytes())?;

    let summary = Summary {
        config: config.clone(),
        rows: out.rows.clone(),
        skipped: out.skipped.clone(),
    };
    let mut json = serde_json::to_vec_pretty(&summary)?;
    json.push(b'\n');
    write_file(&dir.join(SUMMARY_FILE), &json)?;

    let mut details = Vec::new();
    for r in &out.runs {
        serde_json::to_writer(&mut details, r)?;
        details.push(b'\n');
    }
    write_file(&dir.join(DETAILS_FILE), &details)?;

    if config.engine.record_events {
        let events_dir = dir.join(EVENTS_DIR);
        fs::create_dir_all(&events_dir).map_err(|e| ExperimentError::io(&events_dir, e))?;
        for r in &out.runs {
            let name = format!(
                "{}_n{}_m{}_s{}_{}.jsonl",
                r.policy, r.trace_budget, r.memory_budget, r.seed, r.question_id
            );
            let path = events_dir.join(name);
            let file = File::create(&path).map_err(|e| ExperimentError::io(&path, e))?;
            write_event_log(&r.events, BufWriter::new(file)).map_err(|e| ExperimentError::io(&path, e))?;
        }
    }
    Ok(())
}

pub fn read_summary(dir: &Path) -> Result<Summary, ExperimentError> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| ExperimentError::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Human-readable report: the config followed by the accuracy / token /
/// latency table and the wait / decode / reconstruct breakdown.
pub fn render_report(summary: &Summary) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# config\n{}", summary.config.to_toml_string());
    let _ = writeln!(
        s,
        "# results (latency in seconds per question; wait/decode/reconstruct are per-trace means)"
    );
    let _ = writeln!(
        s,
        "{:<24} {:>6} {:>8} {:>6} {:>9} {:>10} {:>10} {:>10} {:>10} {:>7} {:>7} {:>7} {:>7}",
        "policy", "traces", "memory", "acc%", "tokens", "e2e", "wait", "decode", "recon", "wait%", "dec%", "rec%", "pruned"
    );
    for r in &summary.rows {
        let _ = writeln!(
            s,
            "{:<24} {:>6} {:>8} {:>6.1} {:>9.1} {:>10.3} {:>10.3} {:>10.3} {:>10.4} {:>7.1} {:>7.1} {:>7.1} {:>7}",
            r.policy,
            r.trace_budget,
            r.memory_budget,
            100.0 * r.accuracy,
            r.mean_tokens_per_question,
            r.mean_end_to_end_seconds,
            r.mean_wait_seconds,
            r.mean_decode_seconds,
            r.mean_reconstruct_seconds,
            100.0 * r.wait_fraction,
            100.0 * r.decode_fraction,
            100.0 * r.reconstruct_fraction,
            r.prune_count
        );
    }
    if !summary.skipped.is_empty() {
        let _ = writeln!(s, "# skipped {} question/budget pairs", summary.skipped.len());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SyntheticConfig;
    use crate::engine::EngineConfig;
    use crate::experiment::CorpusSpec;
    use crate::policies::{PolicyConfig, ScorerSource};

    fn config(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            output_dir: dir.to_path_buf(),
            policies: vec![
                PolicyConfig::Sc,
                PolicyConfig::Step {
                    scorer_source: ScorerSource::Precomputed,
                },
            ],
            trace_budgets: vec![4],
            seeds: vec![0],
            memory_sweep: None,
            scorer_weights_path: None,
            corpus: CorpusSpec {
                path: None,
                synthetic: Some(SyntheticConfig {
                    num_questions: 3,
                    traces_per_question: 5,
                    mean_steps_correct: 3.0,
                    mean_steps_incorrect: 4.0,
                    mean_tokens_per_step: 4.0,
                    ..SyntheticConfig::default()
                }),
            },
            engine: EngineConfig {
                memory_budget_tokens: 40,
                record_events: true,
                ..EngineConfig::default()
            },
        }
    }

    #[test]
    fn writes_byte_identical_reports() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_experiment(&config(a.path())).unwrap();
        run_experiment(&config(b.path())).unwrap();
        for f in [REPORT_FILE, DETAILS_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        let summary = read_summary(a.path()).unwrap();
        assert_eq!(summary.rows.len(), 2);
        assert_eq!(summary.config, config(a.path()));
        let text = render_report(&summary);
        assert!(text.contains("step-precomputed"));
        assert_eq!(fs::read_dir(a.path().join(EVENTS_DIR)).unwrap().count(), 6);
        let csv = fs::read_to_string(a.path().join(REPORT_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }
}
