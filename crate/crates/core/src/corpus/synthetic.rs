use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, Step, Trace};

/// Parameters of a synthetic trace corpus.
///
/// Correct and incorrect traces draw their step features from two isotropic
/// Gaussians whose means sit `class_separation` apart along a fixed unit
/// direction. Each step also carries the Bayes posterior of its class as
/// `precomputed_score`, a per-step confidence and an answer-dependent
/// similarity key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_questions: usize,
    pub traces_per_question: usize,
    pub p_correct: f64,
    /// Per-question correctness rate is drawn uniformly from
    /// `p_correct ± p_correct_spread`, clamped into (0, 1).
    #[serde(default)]
    pub p_correct_spread: f64,
    pub mean_steps_correct: f64,
    pub mean_steps_incorrect: f64,
    pub mean_tokens_per_step: f64,
    pub feature_dim: usize,
    pub class_separation: f64,
    pub noise_scale: f64,
    pub answer_cardinality: usize,
    pub seed: u64,
    /// Shift between the mean step confidence of correct and incorrect traces.
    #[serde(default = "default_confidence_separation")]
    pub confidence_separation: f64,
    #[serde(default = "default_similarity_dim")]
    pub similarity_dim: usize,
    #[serde(default = "default_similarity_noise")]
    pub similarity_noise: f64,
}

fn default_confidence_separation() -> f64 {
    0.4
}

fn default_similarity_dim() -> usize {
    8
}

fn default_similarity_noise() -> f64 {
    0.6
}

const CONFIDENCE_MEAN: f64 = 1.5;
const CONFIDENCE_STD: f64 = 0.3;

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_questions: 50,
            traces_per_question: 32,
            p_correct: 0.5,
            p_correct_spread: 0.0,
            mean_steps_correct: 20.0,
            mean_steps_incorrect: 24.0,
            mean_tokens_per_step: 20.0,
            feature_dim: 16,
            class_separation: 1.0,
            noise_scale: 1.0,
            answer_cardinality: 4,
            seed: 0,
            confidence_separation: default_confidence_separation(),
            similarity_dim: default_similarity_dim(),
            similarity_noise: default_similarity_noise(),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InvalidConfig(m.to_string()));
        if self.num_questions == 0 || self.traces_per_question == 0 {
            return bad("num_questions and traces_per_question must be positive");
        }
        if !(self.p_correct > 0.0 && self.p_correct < 1.0) {
            return bad("p_correct must lie in (0, 1)");
        }
        if !(self.p_correct_spread >= 0.0 && self.p_correct_spread.is_finite()) {
            return bad("p_correct_spread must be >= 0");
        }
        if !(self.mean_steps_correct >= 1.0 && self.mean_steps_incorrect >= 1.0) {
            return bad("mean step counts must be >= 1");
        }
        if !(self.mean_tokens_per_step >= 1.0 && self.mean_tokens_per_step.is_finite()) {
            return bad("mean_tokens_per_step must be >= 1");
        }
        if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
            return bad("class_separation must be >= 0");
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be > 0");
        }
        if self.answer_cardinality < 2 {
            return bad("answer_cardinality must be >= 2");
        }
        if !(self.confidence_separation.is_finite() && self.similarity_noise >= 0.0) {
            return bad("confidence_separation must be finite and similarity_noise >= 0");
        }
        Ok(())
    }
}

/// Draws `1 + Poisson(mean - 1)`, so the mean is exact and the value is >= 1.
fn shifted_poisson(rng: &mut ChaCha8Rng, mean: f64) -> u32 {
    let lambda = mean - 1.0;
    if lambda <= 0.0 {
        return 1;
    }
    let draw: f64 = Poisson::new(lambda).expect("positive rate").sample(rng);
    1 + draw as u32
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Corpus, CorpusError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.feature_dim;
    let sigma = config.noise_scale;
    let half_sep = config.class_separation / 2.0;
    let direction = if d > 0 { random_unit(&mut rng, d) } else { Vec::new() };
    let noise = Normal::new(0.0, sigma).expect("positive noise");
    let conf_noise = Normal::new(0.0, CONFIDENCE_STD).expect("positive std");
    let key_noise = Normal::new(0.0, config.similarity_noise.max(f64::MIN_POSITIVE)).expect("std");
    let width = (config.num_questions - 1).to_string().len().max(3);
    let trace_width = (config.traces_per_question - 1).to_string().len().max(2);

    let mut corpus = Corpus::new(d);
    for qi in 0..config.num_questions {
        let question_id = format!("q{qi:0width$}");
        let base: u32 = rng.random_range(0..100_000);
        let answers: Vec<String> = (0..config.answer_cardinality as u32).map(|k| (base + k).to_string()).collect();
        let gold = answers[0].clone();
        let centroids: Vec<Vec<f64>> = answers
            .iter()
            .map(|_| random_unit(&mut rng, config.similarity_dim.max(1)))
            .collect();
        let p = if config.p_correct_spread > 0.0 {
            let lo = (config.p_correct - config.p_correct_spread).max(0.01);
            let hi = (config.p_correct + config.p_correct_spread).min(0.99);
            rng.random_range(lo..=hi)
        } else {
            config.p_correct
        };

        for ti in 0..config.traces_per_question {
            let correct = rng.random_bool(p);
            let answer_idx = if correct {
                0
            } else {
                rng.random_range(1..config.answer_cardinality)
            };
            let mean_steps = if correct {
                config.mean_steps_correct
            } else {
                config.mean_steps_incorrect
            };
            let n_steps = shifted_poisson(&mut rng, mean_steps);
            let sign = if correct { 1.0 } else { -1.0 };
            let mut steps = Vec::with_capacity(n_steps as usize);
            for _ in 0..n_steps {
                let num_tokens = shifted_poisson(&mut rng, config.mean_tokens_per_step);
                // projection of the step feature onto the class direction
                let (feature, projection) = if d > 0 {
                    let f: Vec<f64> = direction
                        .iter()
                        .map(|u| sign * half_sep * u + noise.sample(&mut rng))
                        .collect();
                    let proj = f.iter().zip(&direction).map(|(a, b)| a * b).sum::<f64>();
                    (Some(f), proj)
                } else {
                    (None, sign * half_sep + noise.sample(&mut rng))
                };
                // log-odds of the positive class under the two Gaussians
                let score = sigmoid(config.class_separation * projection / (sigma * sigma));
                let confidence =
                    (CONFIDENCE_MEAN + sign * config.confidence_separation / 2.0 + conf_noise.sample(&mut rng)).max(0.0);
                let key: Vec<f64> = centroids[answer_idx]
                    .iter()
                    .map(|c| c + key_noise.sample(&mut rng))
                    .collect();
                steps.push(Step {
                    num_tokens,
                    feature,
                    precomputed_score: Some(score),
                    mean_token_confidence: Some(confidence),
                    similarity_key: Some(key),
                });
            }
            let trace = Trace {
                question_id: question_id.clone(),
                trace_id: format!("t{ti:0trace_width$}"),
                steps,
                correct,
                final_answer: answers[answer_idx].clone(),
            };
            corpus.insert_trace(Some(gold.clone()), trace)?;
        }
    }
    Ok(corpus)
}
