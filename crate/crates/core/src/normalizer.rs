//! Utterance-level mean normalization.
//!
//! The time-averaged feature vector of an utterance carries most of the
//! speaker identity. Subtracting it removes any constant per-utterance offset
//! exactly, so `normalize(X + c) == normalize(X)` for every constant row `c`.
//! The subtracted mean is returned so it can be re-injected at reconstruction
//! time.

use crate::featureio::{FeatureError, FeatureMatrix};

/// Arithmetic mean over the frames of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceMean {
    pub mean: Vec<f64>,
}

impl UtteranceMean {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Column means accumulated in f64.
pub fn compute_mean(features: &FeatureMatrix) -> Result<UtteranceMean, FeatureError> {
    let n = features.frames();
    if n == 0 {
        return Err(FeatureError::Empty);
    }
    let mut sum = vec![0.0f64; features.dim()];
    for row in features.rows() {
        for (s, v) in sum.iter_mut().zip(row) {
            *s += v;
        }
    }
    let inv = 1.0 / n as f64;
    Ok(UtteranceMean {
        mean: sum.into_iter().map(|s| s * inv).collect(),
    })
}

/// Subtracts the utterance mean from every frame.
pub fn normalize(features: &FeatureMatrix) -> Result<(FeatureMatrix, UtteranceMean), FeatureError> {
    let mean = compute_mean(features)?;
    let data = features
        .rows()
        .flat_map(|row| row.iter().zip(&mean.mean).map(|(v, m)| v - m))
        .collect();
    let out = FeatureMatrix::new(features.dim(), data)?.with_frame_rate(features.frame_rate_hz());
    Ok((out, mean))
}

/// Inverse of [`normalize`]: adds `mean` back onto every frame.
pub fn denormalize(features: &FeatureMatrix, mean: &UtteranceMean) -> Result<FeatureMatrix, FeatureError> {
    features.add_row(&mean.mean)
}
