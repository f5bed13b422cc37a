use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{accumulate, class_weight_alpha, weighted_bce_loss_with_epsilon, StepSample, DEFAULT_LOSS_EPSILON};
use super::{ScorerError, ScorerWeights};
use crate::corpus::Trace;

/// Scorer training hyperparameters. Defaults follow the reference training
/// recipe (512 hidden units, batch 128, 20 epochs, patience 5, Adam at 1e-4
/// with 1e-5 weight decay).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub learning_rate: f64,
    /// L2 coefficient added to the gradient of every parameter.
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub validation_fraction: f64,
    pub loss_epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_dim: 512,
            batch_size: 128,
            max_epochs: 20,
            early_stop_patience: 5,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            validation_fraction: 0.1,
            loss_epsilon: DEFAULT_LOSS_EPSILON,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ScorerError> {
        let bad = |m: &str| Err(ScorerError::InvalidArgument(m.to_string()));
        if self.hidden_dim == 0 || self.batch_size == 0 || self.max_epochs == 0 || self.early_stop_patience == 0 {
            return bad("hidden_dim, batch_size, max_epochs and early_stop_patience must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate must be positive and weight_decay non-negative");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_epsilon > 0.0) {
            return bad("adam coefficients out of range");
        }
        if !(self.loss_epsilon > 0.0 && self.loss_epsilon < 0.5) {
            return bad("loss_epsilon must lie in (0, 0.5)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation loss.
    pub weights: ScorerWeights,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub alpha: f64,
}

/// Propagates each trace's label to all of its step features.
pub fn build_step_samples<'a>(traces: impl IntoIterator<Item = &'a Trace>) -> Result<Vec<StepSample>, ScorerError> {
    let mut out = Vec::new();
    for t in traces {
        for s in &t.steps {
            let feature = s.feature.clone().ok_or(ScorerError::Unscoreable)?;
            out.push(StepSample {
                feature,
                label: t.correct,
            });
        }
    }
    Ok(out)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, w: &mut ScorerWeights, grad: &ScorerWeights, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let grads = grad.params();
        let params = w.param_blocks_mut().into_iter().flat_map(|b| b.iter_mut());
        for (((p, g), m), v) in params.zip(grads).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            let g = g + cfg.weight_decay * *p;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_epsilon);
        }
    }
}

/// Mini-batch Adam with early stopping on a seeded validation split.
pub fn train_scorer(samples: &[StepSample], config: &TrainConfig) -> Result<TrainOutcome, ScorerError> {
    config.validate()?;
    class_weight_alpha(samples)?;
    let d = samples[0].feature.len();
    if let Some(bad) = samples.iter().find(|s| s.feature.len() != d) {
        return Err(ScorerError::DimensionMismatch {
            expected: d,
            found: bad.feature.len(),
        });
    }
    if samples.len() < 2 {
        return Err(ScorerError::InvalidArgument("need at least two samples".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((samples.len() as f64 * config.validation_fraction).round() as usize).clamp(1, samples.len() - 1);
    let val: Vec<StepSample> = order[..n_val].iter().map(|&i| samples[i].clone()).collect();
    let mut train_idx: Vec<usize> = order[n_val..].to_vec();
    let positives = train_idx.iter().filter(|&&i| samples[i].label).count();
    if positives == 0 {
        return Err(ScorerError::NoPositives);
    }
    if positives == train_idx.len() {
        return Err(ScorerError::NoNegatives);
    }
    // same ratio as class_weight_alpha, restricted to the training split
    let alpha = (train_idx.len() - positives) as f64 / positives as f64;

    let mut weights = ScorerWeights::init_uniform(d, config.hidden_dim, &mut rng);
    let mut adam = Adam::new(weights.num_params());
    let mut grad = ScorerWeights::zeros(d, config.hidden_dim);
    let mut scratch = vec![0.0; config.hidden_dim];
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, weights.clone());
    let mut stale = 0;

    for epoch in 1..=config.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in train_idx.chunks(config.batch_size) {
            for block in grad.param_blocks_mut() {
                block.fill(0.0);
            }
            for &i in batch {
                let s = &samples[i];
                epoch_loss += accumulate(
                    &weights,
                    &s.feature,
                    s.label,
                    alpha,
                    config.loss_epsilon,
                    &mut grad,
                    &mut scratch,
                );
            }
            let inv = 1.0 / batch.len() as f64;
            for block in grad.param_blocks_mut() {
                block.iter_mut().for_each(|g| *g *= inv);
            }
            adam.step(&mut weights, &grad, config);
        }
        let train_loss = epoch_loss / train_idx.len() as f64;
        let val_loss = weighted_bce_loss_with_epsilon(&weights, &val, alpha, config.loss_epsilon)?;
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, epoch, weights.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.early_stop_patience {
                break;
            }
        }
    }
    let (_, best_epoch, weights) = best;
    Ok(TrainOutcome {
        weights,
        history,
        best_epoch,
        alpha,
    })
}
