//! Deterministic inverse of tokenization and the vector-space speaker
//! de-identification / anonymization operations.
//!
//! `lookup_reconstruct` replaces each token by its cluster center; the result
//! is the speaker-agnostic `V_agn`. `reconstruct_with_prompt` adds back the
//! utterance mean of a prompt, which is exactly the statistic the normalizer
//! removed. `anonymize` blends speaker-specific frames `V_spe` with `V_agn`.

use thiserror::Error;

use crate::featureio::{FeatureError, FeatureMatrix};
use crate::normalizer::{self, compute_mean};
use crate::quantizer::{self, Codebook, QuantizerError, TokenSequence};

/// Prompt length used when slicing a prompt from an utterance: 3 s at 50 frames/s.
pub const DEFAULT_PROMPT_FRAMES: usize = 150;
pub const DEFAULT_LAMBDA: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReconstructError {
    #[error("token {token} at index {index} is not a base token (k = {k})")]
    TokenOutOfRange { index: usize, token: u32, k: usize },
    #[error("token sequence is empty")]
    EmptyTokens,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("lambda {0} is outside [0, 1]")]
    LambdaOutOfRange(f64),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
}

/// `V_agn`: the center of every token, in order.
pub fn lookup_reconstruct(tokens: &TokenSequence, codebook: &Codebook) -> Result<FeatureMatrix, ReconstructError> {
    lookup_ids(tokens.tokens(), codebook)
}

pub(crate) fn lookup_ids(tokens: &[u32], codebook: &Codebook) -> Result<FeatureMatrix, ReconstructError> {
    if tokens.is_empty() {
        return Err(ReconstructError::EmptyTokens);
    }
    let mut data = Vec::with_capacity(tokens.len() * codebook.dim());
    for (index, &t) in tokens.iter().enumerate() {
        if t as usize >= codebook.k() {
            return Err(ReconstructError::TokenOutOfRange {
                index,
                token: t,
                k: codebook.k(),
            });
        }
        data.extend_from_slice(codebook.center(t as usize));
    }
    Ok(FeatureMatrix::new(codebook.dim(), data)?)
}

/// Center lookup plus the prompt's utterance mean on every frame.
pub fn reconstruct_with_prompt(
    tokens: &TokenSequence,
    codebook: &Codebook,
    prompt: &FeatureMatrix,
) -> Result<FeatureMatrix, ReconstructError> {
    if prompt.dim() != codebook.dim() {
        return Err(ReconstructError::ShapeMismatch(format!(
            "prompt dim {} != codebook dim {}",
            prompt.dim(),
            codebook.dim()
        )));
    }
    let speaker = compute_mean(prompt)?;
    Ok(lookup_reconstruct(tokens, codebook)?.add_row(&speaker.mean)?)
}

/// Speaker de-identification: reconstruction from tokens and codebook alone.
pub fn deidentify(tokens: &TokenSequence, codebook: &Codebook) -> Result<FeatureMatrix, ReconstructError> {
    lookup_reconstruct(tokens, codebook)
}

/// `lambda * v_spe + (1 - lambda) * v_agn`, frame by frame.
pub fn anonymize(v_spe: &FeatureMatrix, v_agn: &FeatureMatrix, lambda: f64) -> Result<FeatureMatrix, ReconstructError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(ReconstructError::LambdaOutOfRange(lambda));
    }
    if v_spe.dim() != v_agn.dim() || v_spe.frames() != v_agn.frames() {
        return Err(ReconstructError::ShapeMismatch(format!(
            "v_spe is {}x{}, v_agn is {}x{}",
            v_spe.frames(),
            v_spe.dim(),
            v_agn.frames(),
            v_agn.dim()
        )));
    }
    // Endpoints are returned as-is so they are exact identities.
    if lambda == 1.0 {
        return Ok(v_spe.clone());
    }
    if lambda == 0.0 {
        return Ok(v_agn.clone());
    }
    let data = v_spe
        .data()
        .iter()
        .zip(v_agn.data())
        .map(|(s, a)| lambda * s + (1.0 - lambda) * a)
        .collect();
    Ok(FeatureMatrix::new(v_spe.dim(), data)?.with_frame_rate(v_spe.frame_rate_hz()))
}

/// The frame-aligned triple used for anonymization of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerVectors {
    pub v_spe: FeatureMatrix,
    pub v_agn: FeatureMatrix,
    pub tokens: TokenSequence,
}

impl SpeakerVectors {
    /// Normalizes and tokenizes `features`, then looks the tokens up.
    pub fn extract(features: &FeatureMatrix, codebook: &Codebook) -> Result<Self, ReconstructError> {
        let (normalized, _) = normalizer::normalize(features)?;
        let tokens = quantizer::tokenize(&normalized, codebook)?;
        let v_agn = lookup_reconstruct(&tokens, codebook)?;
        Ok(Self {
            v_spe: features.clone(),
            v_agn,
            tokens,
        })
    }

    pub fn anonymized(&self, lambda: f64) -> Result<FeatureMatrix, ReconstructError> {
        anonymize(&self.v_spe, &self.v_agn, lambda)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cb() -> Codebook {
        Codebook::from_centers(&[[1.0, 0.0], [0.0, 2.0], [-3.0, 1.0]]).unwrap()
    }

    fn toks(t: &[u32]) -> TokenSequence {
        TokenSequence::new(t.to_vec(), 3).unwrap()
    }

    #[test]
    fn lookup_is_center_table() {
        let out = lookup_reconstruct(&toks(&[0, 0, 1]), &cb()).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0, 1.0, 0.0, 0.0, 2.0]);
        assert_eq!(deidentify(&toks(&[0, 0, 1]), &cb()).unwrap(), out);
    }

    #[test]
    fn centers_are_a_fixed_point() {
        let codebook = cb();
        let frames = FeatureMatrix::from_rows(&codebook.centers().collect::<Vec<_>>()).unwrap();
        let t = quantizer::tokenize(&frames, &codebook).unwrap();
        assert_eq!(lookup_reconstruct(&t, &codebook).unwrap(), frames);
    }

    #[test]
    fn out_of_range_and_empty() {
        let t = TokenSequence::new(vec![3], 4).unwrap();
        assert!(matches!(lookup_reconstruct(&t, &cb()), Err(ReconstructError::TokenOutOfRange { token: 3, .. })));
        assert_eq!(lookup_reconstruct(&toks(&[]), &cb()), Err(ReconstructError::EmptyTokens));
    }

    #[test]
    fn zero_mean_prompt_equals_lookup() {
        let prompt = FeatureMatrix::from_rows(&[[1.0, -1.0], [-1.0, 1.0]]).unwrap();
        let a = reconstruct_with_prompt(&toks(&[2, 1]), &cb(), &prompt).unwrap();
        assert_eq!(a, lookup_reconstruct(&toks(&[2, 1]), &cb()).unwrap());
    }

    #[test]
    fn prompt_shift_is_constant_row() {
        let prompt = FeatureMatrix::from_rows(&[[3.0, 5.0], [1.0, 1.0], [2.0, 0.0]]).unwrap();
        let mean = compute_mean(&prompt).unwrap().mean;
        let t = toks(&[2, 0, 1, 1]);
        let a = reconstruct_with_prompt(&t, &cb(), &prompt).unwrap();
        let b = lookup_reconstruct(&t, &cb()).unwrap();
        for (ra, rb) in a.rows().zip(b.rows()) {
            for d in 0..2 {
                assert_eq!(ra[d] - rb[d], mean[d]);
            }
        }
        let wrong = FeatureMatrix::from_rows(&[[1.0]]).unwrap();
        assert!(reconstruct_with_prompt(&t, &cb(), &wrong).is_err());
    }

    #[test]
    fn anonymize_endpoints_and_midpoint() {
        let spe = FeatureMatrix::from_rows(&[[2.0, 2.0]]).unwrap();
        let agn = FeatureMatrix::from_rows(&[[0.0, 0.0]]).unwrap();
        assert_eq!(anonymize(&spe, &agn, 1.0).unwrap(), spe);
        assert_eq!(anonymize(&spe, &agn, 0.0).unwrap(), agn);
        assert_eq!(anonymize(&spe, &agn, 0.5).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(anonymize(&spe, &agn, 1.5), Err(ReconstructError::LambdaOutOfRange(1.5)));
        let two = FeatureMatrix::from_rows(&[[0.0, 0.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(anonymize(&spe, &two, 0.5), Err(ReconstructError::ShapeMismatch(_))));
    }

    #[test]
    fn deidentified_output_ignores_speaker() {
        let codebook = cb();
        let base = FeatureMatrix::from_rows(&[[1.0, 0.0], [0.0, 2.0], [-3.0, 1.0], [1.0, 0.1]]).unwrap();
        let other = base.add_row(&[40.0, -12.0]).unwrap();
        let a = SpeakerVectors::extract(&base, &codebook).unwrap();
        let b = SpeakerVectors::extract(&other, &codebook).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.v_agn, b.v_agn);
        assert_ne!(a.v_spe, b.v_spe);
    }
}
