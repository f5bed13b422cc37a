use super::{sigmoid, ScorerError, ScorerWeights};

/// Probabilities are clamped to `[eps, 1 - eps]` before taking logs.
pub const DEFAULT_LOSS_EPSILON: f64 = 1e-7;

/// One training example: a step feature carrying its trace's correctness label.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSample {
    pub feature: Vec<f64>,
    pub label: bool,
}

/// Ratio of negative to positive samples, used to up-weight the positive term.
pub fn class_weight_alpha(samples: &[StepSample]) -> Result<f64, ScorerError> {
    let positives = samples.iter().filter(|s| s.label).count();
    let negatives = samples.len() - positives;
    if positives == 0 {
        return Err(ScorerError::NoPositives);
    }
    if negatives == 0 {
        return Err(ScorerError::NoNegatives);
    }
    Ok(negatives as f64 / positives as f64)
}

pub fn weighted_bce_loss(w: &ScorerWeights, batch: &[StepSample], alpha: f64) -> Result<f64, ScorerError> {
    weighted_bce_loss_with_epsilon(w, batch, alpha, DEFAULT_LOSS_EPSILON)
}

pub fn weighted_bce_loss_with_epsilon(
    w: &ScorerWeights,
    batch: &[StepSample],
    alpha: f64,
    epsilon: f64,
) -> Result<f64, ScorerError> {
    check_batch(w, batch, alpha)?;
    let mut total = 0.0;
    for s in batch {
        let p = sigmoid(w.logit(&s.feature)).clamp(epsilon, 1.0 - epsilon);
        total += if s.label { alpha * p.ln() } else { (1.0 - p).ln() };
    }
    Ok(-total / batch.len() as f64)
}

/// Analytic gradient of [`weighted_bce_loss`] with respect to every parameter.
pub fn loss_gradient(w: &ScorerWeights, batch: &[StepSample], alpha: f64) -> Result<ScorerWeights, ScorerError> {
    check_batch(w, batch, alpha)?;
    let mut grad = ScorerWeights::zeros(w.input_dim, w.hidden_dim);
    let mut scratch = vec![0.0; w.hidden_dim];
    for s in batch {
        accumulate(w, &s.feature, s.label, alpha, DEFAULT_LOSS_EPSILON, &mut grad, &mut scratch);
    }
    let inv = 1.0 / batch.len() as f64;
    for block in grad.param_blocks_mut() {
        block.iter_mut().for_each(|g| *g *= inv);
    }
    Ok(grad)
}

fn check_batch(w: &ScorerWeights, batch: &[StepSample], alpha: f64) -> Result<(), ScorerError> {
    if batch.is_empty() {
        return Err(ScorerError::EmptyBatch);
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(ScorerError::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    if let Some(bad) = batch.iter().find(|s| s.feature.len() != w.input_dim) {
        return Err(ScorerError::DimensionMismatch {
            expected: w.input_dim,
            found: bad.feature.len(),
        });
    }
    Ok(())
}

/// Adds one sample's (unnormalised) loss gradient into `grad` and returns its loss.
///
/// `hidden` is scratch space of length `hidden_dim`.
pub(crate) fn accumulate(
    w: &ScorerWeights,
    h: &[f64],
    label: bool,
    alpha: f64,
    epsilon: f64,
    grad: &mut ScorerWeights,
    hidden: &mut [f64],
) -> f64 {
    let d = w.input_dim;
    let mut z = w.b2;
    for j in 0..w.hidden_dim {
        let row = &w.w1[j * d..(j + 1) * d];
        let a = w.b1[j] + row.iter().zip(h).map(|(wi, x)| wi * x).sum::<f64>();
        hidden[j] = if a > 0.0 { a } else { 0.0 };
        z += w.w2[j] * hidden[j];
    }
    let raw = sigmoid(z);
    let p = raw.clamp(epsilon, 1.0 - epsilon);
    let (loss, dz) = if label {
        (-alpha * p.ln(), -alpha * (1.0 - raw))
    } else {
        (-(1.0 - p).ln(), raw)
    };
    // the clamp is flat outside [eps, 1 - eps]
    if raw < epsilon || raw > 1.0 - epsilon || dz == 0.0 {
        return loss;
    }
    grad.b2 += dz;
    for j in 0..w.hidden_dim {
        if hidden[j] <= 0.0 {
            continue;
        }
        grad.w2[j] += dz * hidden[j];
        let da = dz * w.w2[j];
        grad.b1[j] += da;
        let row = &mut grad.w1[j * d..(j + 1) * d];
        for (g, x) in row.iter_mut().zip(h) {
            *g += da * x;
        }
    }
    loss
}
