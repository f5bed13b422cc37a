//! Two-layer MLP step scorer and trace-level scoring.
//!
//! A step-end feature `h` (length `d`) is scored as
//! `sigmoid(W2 · relu(W1 · h + b1) + b2)` with a hidden layer of width `m`.
//! Trace scores are the running mean of their step scores.

mod io;
mod loss;
mod rank;
mod train;

use rand::Rng;
use thiserror::Error;

use crate::corpus::Step;

pub use io::{load_weights, read_weights, save_weights, write_weights, WEIGHTS_FORMAT_VERSION};
pub use loss::{
    class_weight_alpha, loss_gradient, weighted_bce_loss, weighted_bce_loss_with_epsilon, StepSample,
    DEFAULT_LOSS_EPSILON,
};
pub use rank::{rank_acc, rank_acc_prefix_curve, prefix_step_count, RankAccReport};
pub use train::{build_step_samples, train_scorer, EpochStats, TrainConfig, TrainOutcome};

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("step has neither a feature nor a precomputed score")]
    Unscoreable,
    #[error("no positive (label 1) samples")]
    NoPositives,
    #[error("no negative (label 0) samples")]
    NoNegatives,
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no question has both correct and incorrect traces")]
    NoEligibleQuestions,
    #[error("weights file: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Parameters of the step scorer. Matrices are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerWeights {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// `hidden_dim × input_dim`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `1 × hidden_dim`
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl ScorerWeights {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        ScorerWeights {
            input_dim,
            hidden_dim,
            w1: vec![0.0; hidden_dim * input_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; hidden_dim],
            b2: 0.0,
        }
    }

    /// Uniform fan-in initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` per layer.
    pub fn init_uniform<R: Rng>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let mut w = Self::zeros(input_dim, hidden_dim);
        let a1 = 1.0 / (input_dim.max(1) as f64).sqrt();
        let a2 = 1.0 / (hidden_dim.max(1) as f64).sqrt();
        for v in w.w1.iter_mut().chain(w.b1.iter_mut()) {
            *v = rng.random_range(-a1..=a1);
        }
        for v in w.w2.iter_mut() {
            *v = rng.random_range(-a2..=a2);
        }
        w.b2 = rng.random_range(-a2..=a2);
        w
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    /// Checks shape consistency and finiteness.
    pub fn validate(&self) -> Result<(), ScorerError> {
        let (d, m) = (self.input_dim, self.hidden_dim);
        if m == 0 {
            return Err(ScorerError::InvalidArgument("hidden_dim must be positive".into()));
        }
        for (len, want) in [(self.w1.len(), m * d), (self.b1.len(), m), (self.w2.len(), m)] {
            if len != want {
                return Err(ScorerError::DimensionMismatch { expected: want, found: len });
            }
        }
        if self.params().any(|v| !v.is_finite()) {
            return Err(ScorerError::InvalidArgument("non-finite parameter".into()));
        }
        Ok(())
    }

    /// All parameters in file order: W1, b1, W2, b2.
    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .copied()
            .chain(std::iter::once(self.b2))
    }

    pub(crate) fn param_blocks_mut(&mut self) -> [&mut [f64]; 4] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            std::slice::from_mut(&mut self.b2),
        ]
    }

    /// Pre-activation of the output unit.
    fn logit(&self, h: &[f64]) -> f64 {
        let d = self.input_dim;
        let mut z = self.b2;
        for j in 0..self.hidden_dim {
            let row = &self.w1[j * d..(j + 1) * d];
            let a = self.b1[j] + row.iter().zip(h).map(|(w, x)| w * x).sum::<f64>();
            if a > 0.0 {
                z += self.w2[j] * a;
            }
        }
        z
    }
}

const LARGEST_BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Scores one feature vector. The result is kept inside the open interval (0, 1).
pub fn mlp_forward(w: &ScorerWeights, h: &[f64]) -> Result<f64, ScorerError> {
    if h.len() != w.input_dim {
        return Err(ScorerError::DimensionMismatch {
            expected: w.input_dim,
            found: h.len(),
        });
    }
    Ok(sigmoid(w.logit(h)).clamp(f64::MIN_POSITIVE, LARGEST_BELOW_ONE))
}

/// Scores a step: the MLP when weights and a feature are both available,
/// otherwise the stored precomputed score.
pub fn score_step(w: Option<&ScorerWeights>, step: &Step) -> Result<f64, ScorerError> {
    match (w, &step.feature, step.precomputed_score) {
        (Some(w), Some(h), _) => mlp_forward(w, h),
        (_, _, Some(p)) => Ok(p),
        _ => Err(ScorerError::Unscoreable),
    }
}

/// Running mean of step scores for one trace.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TraceScoreState {
    pub steps_seen: u32,
    pub running_sum: f64,
}

/// Score assumed for a trace that has not completed any step.
pub const NEUTRAL_TRACE_SCORE: f64 = 0.5;

impl TraceScoreState {
    #[must_use]
    pub fn update(self, step_score: f64) -> Self {
        TraceScoreState {
            steps_seen: self.steps_seen + 1,
            running_sum: self.running_sum + step_score,
        }
    }

    pub fn current_score(&self) -> Option<f64> {
        (self.steps_seen > 0).then(|| self.running_sum / f64::from(self.steps_seen))
    }

    pub fn score_or_neutral(&self) -> f64 {
        self.current_score().unwrap_or(NEUTRAL_TRACE_SCORE)
    }
}

pub fn update_trace_score(state: TraceScoreState, step_score: f64) -> TraceScoreState {
    state.update(step_score)
}

/// Relative per-step FLOP overhead of the scorer against one decoding pass:
/// `2m(d+1) / (2 · n_params · tokens_per_step)`.
pub fn overhead_ratio(hidden_dim: u64, input_dim: u64, n_params: f64, tokens_per_step: f64) -> Result<f64, ScorerError> {
    if hidden_dim == 0 || !(n_params > 0.0) || !(tokens_per_step > 0.0) {
        return Err(ScorerError::InvalidArgument(
            "overhead_ratio needs m > 0, n_params > 0 and tokens_per_step > 0".into(),
        ));
    }
    let scorer_flops = 2.0 * hidden_dim as f64 * (input_dim as f64 + 1.0);
    Ok(scorer_flops / (2.0 * n_params * tokens_per_step))
}
