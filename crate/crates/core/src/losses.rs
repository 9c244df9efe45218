//! Evaluation-only loss functions: supervised contrastive loss, cross
//! entropy and their weighted hybrid. No gradients, no training; these exist
//! to score feature sets and for property tests.

use crate::error::{Error, Result};

/// A batch of feature vectors with class labels for the contrastive loss.
///
/// Vectors are used as given; callers that want cosine behaviour should
/// L2-normalize before building the batch.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    features: Vec<Vec<f64>>,
    labels: Vec<u32>,
    temperature: f64,
}

impl ContrastiveBatch {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<u32>, temperature: f64) -> Result<Self> {
        if features.len() < 2 || !features.len().is_multiple_of(2) {
            return Err(Error::Parameter(format!(
                "batch size must be even and >= 2, got {}",
                features.len()
            )));
        }
        if features.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} features vs {} labels",
                features.len(),
                labels.len()
            )));
        }
        let dim = features[0].len();
        if dim == 0 {
            return Err(Error::Dimension("feature vectors must be non-empty".into()));
        }
        for (i, f) in features.iter().enumerate() {
            if f.len() != dim {
                return Err(Error::Dimension(format!(
                    "feature {i} has dimension {}, expected {dim}",
                    f.len()
                )));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("feature {i} is not finite")));
            }
        }
        if !temperature.is_finite() || temperature <= 0.0 {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(ContrastiveBatch {
            features,
            labels,
            temperature,
        })
    }

    /// Conventional default temperature for this loss family.
    pub const DEFAULT_TEMPERATURE: f64 = 0.07;
}

/// Supervised contrastive loss over the batch.
///
/// `L = -sum_i (1/|P(i)|) sum_{p in P(i)} log( exp(z_i.z_p / tau)
///      / sum_{a != i} exp(z_i.z_a / tau) )`
/// where `P(i)` are the other samples sharing sample i's label. Samples with
/// no positive partner are excluded from the outer sum. The log-sum-exp is
/// computed with max subtraction; summation order is index-ascending.
pub fn contrastive_loss(batch: &ContrastiveBatch) -> f64 {
    let n = batch.features.len();
    let tau = batch.temperature;
    let mut loss = 0.0;

    // Pairwise scaled dot products.
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sim[i * n + j] = dot(&batch.features[i], &batch.features[j]) / tau;
            }
        }
    }

    for i in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&p| p != i && batch.labels[p] == batch.labels[i])
            .collect();
        if positives.is_empty() {
            continue;
        }

        let mut max_sim = f64::NEG_INFINITY;
        for a in 0..n {
            if a != i {
                max_sim = max_sim.max(sim[i * n + a]);
            }
        }
        let mut denom = 0.0;
        for a in 0..n {
            if a != i {
                denom += (sim[i * n + a] - max_sim).exp();
            }
        }
        let log_denom = max_sim + denom.ln();

        let mut inner = 0.0;
        for &p in &positives {
            inner += sim[i * n + p] - log_denom;
        }
        loss -= inner / positives.len() as f64;
    }
    loss
}

/// Mean negative log-likelihood `-(1/T) sum_i ln q[i][labels[i]]`.
///
/// Rows must be probability vectors (non-negative, summing to 1 within
/// 1e-9); probabilities are clamped below at 1e-12 before the logarithm.
pub fn cross_entropy(probabilities: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probabilities.is_empty() {
        return Err(Error::Parameter("empty probability matrix".into()));
    }
    if probabilities.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} probability rows vs {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    let classes = probabilities[0].len();
    let mut total = 0.0;
    for (i, row) in probabilities.iter().enumerate() {
        if row.len() != classes {
            return Err(Error::Dimension(format!(
                "row {i} has {} entries, expected {classes}",
                row.len()
            )));
        }
        if row.iter().any(|&q| !q.is_finite() || q < 0.0) {
            return Err(Error::Validation(format!(
                "row {i} contains a negative or non-finite probability"
            )));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "row {i} sums to {sum}, expected 1"
            )));
        }
        let label = labels[i];
        if label >= classes {
            return Err(Error::Parameter(format!(
                "label {label} out of range for {classes} classes (row {i})"
            )));
        }
        total -= row[label].max(1e-12).ln();
    }
    Ok(total / probabilities.len() as f64)
}

/// Weighted combination `w * ce + (1 - w) * tc`; the default weight is 0.8.
pub fn hybrid_loss(ce: f64, tc: f64, w: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Parameter(format!("weight {w} outside [0, 1]")));
    }
    Ok(w * ce + (1.0 - w) * tc)
}

pub const DEFAULT_HYBRID_WEIGHT: f64 = 0.8;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
