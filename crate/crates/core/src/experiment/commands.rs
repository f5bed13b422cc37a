use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::corpus::{Corpus, Trace};
use crate::scorer::{
    build_step_samples, rank_acc_prefix_curve, save_weights, train_scorer, EpochStats, RankAccReport, ScorerError,
    ScorerWeights, TrainConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub correct_traces: usize,
    pub incorrect_traces: usize,
    /// Traces kept per class after downsampling the majority class.
    pub kept_per_class: usize,
    pub step_samples: usize,
    pub alpha: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
}

/// Splits a corpus by question into (train, held-out). At least one
/// question lands on each side.
pub fn split_questions(corpus: &Corpus, holdout_fraction: f64, seed: u64) -> Result<(Corpus, Corpus), ExperimentError> {
    let n = corpus.questions.len();
    if n < 2 || !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(ExperimentError::Config(format!(
            "cannot hold out a {holdout_fraction} share of {n} questions"
        )));
    }
    let mut ids: Vec<&String> = corpus.questions.keys().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_hold = ((n as f64 * holdout_fraction).round() as usize).clamp(1, n - 1);
    let mut train = Corpus::new(corpus.feature_dim);
    let mut held = Corpus::new(corpus.feature_dim);
    for (i, id) in ids.into_iter().enumerate() {
        let target = if i < n_hold { &mut held } else { &mut train };
        target.questions.insert(id.clone(), corpus.questions[id].clone());
    }
    Ok((train, held))
}

/// Downsamples the majority class so both labels keep the same number of
/// traces. The result follows corpus order.
pub fn balance_traces(corpus: &Corpus, seed: u64) -> Result<Vec<&Trace>, ScorerError> {
    let traces: Vec<&Trace> = corpus.traces().collect();
    let mut pos: Vec<usize> = (0..traces.len()).filter(|&i| traces[i].correct).collect();
    let mut neg: Vec<usize> = (0..traces.len()).filter(|&i| !traces[i].correct).collect();
    if pos.is_empty() {
        return Err(ScorerError::NoPositives);
    }
    if neg.is_empty() {
        return Err(ScorerError::NoNegatives);
    }
    let keep = pos.len().min(neg.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for class in [&mut pos, &mut neg] {
        if class.len() > keep {
            class.shuffle(&mut rng);
            class.truncate(keep);
        }
    }
    let mut kept: Vec<usize> = pos.into_iter().chain(neg).collect();
    kept.sort_unstable();
    Ok(kept.into_iter().map(|i| traces[i]).collect())
}

/// Path of the training history written next to `weights_path`.
pub fn history_path(weights_path: &Path) -> PathBuf {
    let mut name = weights_path.file_name().unwrap_or_default().to_os_string();
    name.push(".history.json");
    weights_path.with_file_name(name)
}

/// Balances, trains and writes the weights plus a JSON history next to them.
pub fn train_command(
    corpus: &Corpus,
    config: &TrainConfig,
    out_path: &Path,
) -> Result<(ScorerWeights, TrainSummary), ExperimentError> {
    if !corpus.has_features() {
        return Err(ExperimentError::Config(
            "training needs a `feature` vector on every step; this corpus has none".into(),
        ));
    }
    let correct = corpus.traces().filter(|t| t.correct).count();
    let incorrect = corpus.num_traces() - correct;
    let balanced = balance_traces(corpus, config.seed)?;
    let samples = build_step_samples(balanced.iter().copied())?;
    log::info!(
        "training on {} traces ({} step samples) from {correct} correct / {incorrect} incorrect",
        balanced.len(),
        samples.len()
    );
    let outcome = train_scorer(&samples, config)?;
    let summary = TrainSummary {
        correct_traces: correct,
        incorrect_traces: incorrect,
        kept_per_class: balanced.len() / 2,
        step_samples: samples.len(),
        alpha: outcome.alpha,
        best_epoch: outcome.best_epoch,
        history: outcome.history,
    };
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| ExperimentError::io(parent, e))?;
    }
    save_weights(&outcome.weights, out_path)?;
    let hist = history_path(out_path);
    let mut json = serde_json::to_vec_pretty(&summary)?;
    json.push(b'\n');
    fs::write(&hist, json).map_err(|e| ExperimentError::io(&hist, e))?;
    Ok((outcome.weights, summary))
}

/// RankAcc prefix curve, optionally written as CSV
/// (`fraction,rank_acc,eligible_questions,skipped_questions`).
pub fn rankacc_command(
    corpus: &Corpus,
    weights: Option<&ScorerWeights>,
    fractions: &[f64],
    out_path: Option<&Path>,
) -> Result<Vec<(f64, RankAccReport)>, ExperimentError> {
    if let Some(w) = weights {
        if w.input_dim != corpus.feature_dim {
            return Err(ExperimentError::Config(format!(
                "scorer expects {}-dimensional features but the corpus has {}",
                w.input_dim, corpus.feature_dim
            )));
        }
    }
    let curve = rank_acc_prefix_curve(corpus, weights, fractions)?;
    if let Some(path) = out_path {
        let mut csv = String::from("fraction,rank_acc,eligible_questions,skipped_questions\n");
        for (k, r) in &curve {
            let _ = writeln!(csv, "{k},{},{},{}", r.value, r.eligible, r.skipped.len());
        }
        fs::write(path, csv).map_err(|e| ExperimentError::io(path, e))?;
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, Step, SyntheticConfig};

    fn corpus(p_correct: f64) -> Corpus {
        generate_synthetic(&SyntheticConfig {
            num_questions: 10,
            traces_per_question: 10,
            p_correct,
            mean_steps_correct: 3.0,
            mean_steps_incorrect: 4.0,
            feature_dim: 4,
            class_separation: 4.0,
            seed: 8,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn balancing_equalizes_classes() {
        let c = corpus(0.8);
        let kept = balance_traces(&c, 1).unwrap();
        let pos = kept.iter().filter(|t| t.correct).count();
        assert_eq!(pos * 2, kept.len());
        assert_eq!(pos, c.traces().filter(|t| !t.correct).count());
        assert_eq!(balance_traces(&c, 1).unwrap(), kept);
    }

    #[test]
    fn split_keeps_questions_whole() {
        let c = corpus(0.5);
        let (train, held) = split_questions(&c, 0.2, 3).unwrap();
        assert_eq!(held.questions.len(), 2);
        assert_eq!(train.questions.len(), 8);
        assert!(held.questions.keys().all(|k| !train.questions.contains_key(k)));
        assert!(split_questions(&c, 1.0, 3).is_err());
    }

    #[test]
    fn train_writes_reproducible_weights() {
        let c = corpus(0.5);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            hidden_dim: 8,
            max_epochs: 3,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        let (_, summary) = train_command(&c, &cfg, &a).unwrap();
        train_command(&c, &cfg, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert!(history_path(&a).exists());
        assert_eq!(summary.history.len(), 3);
    }

    #[test]
    fn featureless_corpus_is_rejected() {
        let mut c = Corpus::new(0);
        let trace = Trace {
            question_id: "q".into(),
            trace_id: "t".into(),
            steps: vec![Step::with_tokens(3)],
            correct: true,
            final_answer: "1".into(),
        };
        c.insert_trace(Some("1".into()), trace).unwrap();
        let err = train_command(&c, &TrainConfig::default(), Path::new("unused.bin")).unwrap_err();
        assert!(err.to_string().contains("feature"));
    }

    #[test]
    fn oracle_scores_rank_perfectly() {
        let mut c = corpus(0.5);
        for q in c.questions.values_mut() {
            for t in &mut q.traces {
                let label = if t.correct { 1.0 } else { 0.0 };
                t.steps.iter_mut().for_each(|s| s.precomputed_score = Some(label));
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        let curve = rankacc_command(&c, None, &[0.25, 0.5, 1.0], Some(&path)).unwrap();
        assert!(curve.iter().all(|(_, r)| r.value == 1.0));
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 4);
    }
}
