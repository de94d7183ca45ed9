//! Desk-scale probes: speaker leakage, cluster purity, bitrate and a
//! versioned JSON report tying them together.
//!
//! The leakage probe averages each utterance into one vector, fits one mean
//! per speaker on a seeded 80% split and classifies the remaining 20% by the
//! nearest speaker mean. Squared distances within a relative `1e-9` of the
//! best count as ties and go to the lowest speaker index. That way
//! representations with no speaker signal (exactly zero means after
//! normalization) score exactly chance instead of following rounding noise.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::bpe::{bitrate_report, BitrateStats, BpeError, BpeModel};
use crate::featureio::{FeatureError, FeatureMatrix, UtteranceRecord};
use crate::normalizer::{compute_mean, normalize};
use crate::quantizer::{quantization_error, tokenize, Codebook, QuantizerError, TokenSequence};
use crate::reconstructor::{ReconstructError, SpeakerVectors};
use crate::rng::SplitMix64;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_HOLDOUT_FRACTION: f64 = 0.2;
pub const DEFAULT_LAMBDAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("speaker {speaker} has {count} utterance(s); at least 2 are needed for a held-out split")]
    TooFewUtterances { speaker: String, count: usize },
    #[error("representation {0} needs a codebook")]
    MissingCodebook(String),
    #[error("utterance {utterance}: {tokens} tokens but {labels} labels")]
    LengthMismatch { utterance: usize, tokens: usize, labels: usize },
    #[error("holdout fraction {0} must lie in (0, 1)")]
    BadHoldout(f64),
    #[error("report does not match schema: {0}")]
    Schema(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
    #[error(transparent)]
    Reconstruct(#[from] ReconstructError),
    #[error(transparent)]
    Bpe(#[from] BpeError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Representation {
    Raw,
    Normalized,
    Deidentified,
    /// `λ · raw + (1 - λ) · deidentified`.
    Anonymized(f64),
}

impl Representation {
    pub fn label(&self) -> String {
        match self {
            Self::Raw => "raw".into(),
            Self::Normalized => "normalized".into(),
            Self::Deidentified => "deidentified".into(),
            Self::Anonymized(l) => format!("anonymized({l:.2})"),
        }
    }

    /// Frame-level features of one utterance under this representation.
    pub fn apply(&self, features: &FeatureMatrix, codebook: Option<&Codebook>) -> Result<FeatureMatrix, EvalError> {
        let need = || codebook.ok_or_else(|| EvalError::MissingCodebook(self.label()));
        Ok(match *self {
            Self::Raw => features.clone(),
            Self::Normalized => normalize(features)?.0,
            Self::Deidentified => SpeakerVectors::extract(features, need()?)?.v_agn,
            Self::Anonymized(l) => SpeakerVectors::extract(features, need()?)?.anonymized(l)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe: String,
    pub accuracy: f64,
    pub chance_level: f64,
    pub num_classes: usize,
    /// Held-out utterances scored.
    pub num_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { holdout_fraction: DEFAULT_HOLDOUT_FRACTION, seed: 0 }
    }
}

/// Per-speaker utterance indices, speakers in sorted id order.
fn group_by_speaker(records: &[UtteranceRecord]) -> Vec<(String, Vec<usize>)> {
    let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        map.entry(&r.speaker_id).or_default().push(i);
    }
    map.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

type FitHeldOut = (Vec<usize>, Vec<usize>);

/// Seeded `(fit, held_out)` split of each speaker's utterances.
fn split(groups: &[(String, Vec<usize>)], cfg: &ProbeConfig) -> Result<Vec<FitHeldOut>, EvalError> {
    if !(cfg.holdout_fraction > 0.0 && cfg.holdout_fraction < 1.0) {
        return Err(EvalError::BadHoldout(cfg.holdout_fraction));
    }
    groups
        .iter()
        .enumerate()
        .map(|(s, (speaker, idx))| {
            if idx.len() < 2 {
                return Err(EvalError::TooFewUtterances { speaker: speaker.clone(), count: idx.len() });
            }
            let mut shuffled = idx.clone();
            let mut rng = SplitMix64::derive(cfg.seed, s as u64);
            for i in (1..shuffled.len()).rev() {
                shuffled.swap(i, rng.below(i as u64 + 1) as usize);
            }
            let n_hold = ((idx.len() as f64 * cfg.holdout_fraction).round() as usize).clamp(1, idx.len() - 1);
            let mut held = shuffled.split_off(shuffled.len() - n_hold);
            shuffled.sort_unstable();
            held.sort_unstable();
            Ok((shuffled, held))
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_of(vectors: &[&[f64]]) -> Vec<f64> {
    let mut m = vec![0.0; vectors[0].len()];
    for v in vectors {
        m.iter_mut().zip(*v).for_each(|(a, b)| *a += b);
    }
    m.iter_mut().for_each(|a| *a /= vectors.len() as f64);
    m
}

/// One mean vector per utterance under `rep`, in corpus order.
pub fn utterance_means(
    records: &[UtteranceRecord],
    rep: Representation,
    codebook: Option<&Codebook>,
) -> Result<Vec<Vec<f64>>, EvalError> {
    records
        .par_iter()
        .map(|r| Ok(compute_mean(&rep.apply(&r.features, codebook)?)?.mean))
        .collect()
}

/// Nearest-speaker-mean accuracy on held-out utterances.
pub fn speaker_leakage_probe(
    records: &[UtteranceRecord],
    rep: Representation,
    codebook: Option<&Codebook>,
    cfg: &ProbeConfig,
) -> Result<ProbeReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let groups = group_by_speaker(records);
    if groups.len() == 1 {
        return Ok(ProbeReport {
            probe: rep.label(),
            accuracy: 1.0,
            chance_level: 1.0,
            num_classes: 1,
            num_samples: records.len(),
        });
    }
    let splits = split(&groups, cfg)?;
    let means = utterance_means(records, rep, codebook)?;
    let centroids: Vec<Vec<f64>> = splits
        .iter()
        .map(|(fit, _)| mean_of(&fit.iter().map(|&i| means[i].as_slice()).collect::<Vec<_>>()))
        .collect();
    let scale = centroids.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / centroids.len() as f64;
    let tol = TIE_TOLERANCE * scale.max(1.0);

    let (mut correct, mut total) = (0usize, 0usize);
    for (speaker, (_, held)) in splits.iter().enumerate() {
        for &i in held {
            let d: Vec<f64> = centroids.iter().map(|c| sq_dist(&means[i], c)).collect();
            let best = d.iter().cloned().fold(f64::INFINITY, f64::min);
            let predicted = d.iter().position(|&x| x <= best + tol).expect("at least one class");
            correct += usize::from(predicted == speaker);
            total += 1;
        }
    }
    Ok(ProbeReport {
        probe: rep.label(),
        accuracy: correct as f64 / total as f64,
        chance_level: 1.0 / groups.len() as f64,
        num_classes: groups.len(),
        num_samples: total,
    })
}

/// Standard cluster purity: Σ over tokens of the majority label count,
/// divided by the number of frames.
pub fn content_purity(tokens: &[TokenSequence], labels: &[Vec<u32>]) -> Result<f64, EvalError> {
    if tokens.len() != labels.len() {
        return Err(EvalError::LengthMismatch { utterance: tokens.len().min(labels.len()), tokens: tokens.len(), labels: labels.len() });
    }
    let mut counts: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    let mut frames = 0usize;
    for (u, (t, l)) in tokens.iter().zip(labels).enumerate() {
        if t.len() != l.len() {
            return Err(EvalError::LengthMismatch { utterance: u, tokens: t.len(), labels: l.len() });
        }
        for (&tok, &lab) in t.tokens().iter().zip(l) {
            *counts.entry((tok, lab)).or_default() += 1;
        }
        frames += t.len();
    }
    if frames == 0 {
        return Err(EvalError::EmptyCorpus);
    }
    let mut best: BTreeMap<u32, usize> = BTreeMap::new();
    for ((tok, _), c) in counts {
        let b = best.entry(tok).or_default();
        *b = (*b).max(c);
    }
    Ok(best.values().sum::<usize>() as f64 / frames as f64)
}

/// The operating point quoted for the full-scale codec: 50 tokens/s over
/// 300 clusters, 16 tokens/s over an 8192-entry BPE vocabulary.
pub fn reference_operating_point() -> BitrateStats {
    BitrateStats::from_rates(50.0, 300, 16.0, 8192)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CodebookSummary {
    pub k: usize,
    pub dim: usize,
    /// Inertia recorded at training time, if known.
    pub training_inertia: Option<f64>,
    /// Mean squared distance to the nearest center over the report corpus.
    pub mean_quantization_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub schema_version: u32,
    pub num_utterances: usize,
    pub num_speakers: usize,
    pub num_frames: usize,
    pub frame_rate_hz: f64,
    pub codebook: CodebookSummary,
    pub bitrate: BitrateStats,
    pub reference_operating_point: BitrateStats,
    pub leakage: Vec<ProbeReport>,
    pub purity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportConfig {
    pub probe: ProbeConfig,
    pub lambdas: Vec<f64>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { probe: ProbeConfig::default(), lambdas: DEFAULT_LAMBDAS.to_vec() }
    }
}

/// Everything measurable from a corpus, a codebook and a BPE model.
/// `content_units` enables the purity figure.
pub fn pipeline_report(
    records: &[UtteranceRecord],
    codebook: &Codebook,
    bpe: &BpeModel,
    content_units: Option<&[Vec<u32>]>,
    cfg: &ReportConfig,
) -> Result<PipelineReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let tokenized: Vec<(TokenSequence, f64)> = records
        .par_iter()
        .map(|r| {
            let (n, _) = normalize(&r.features)?;
            Ok((tokenize(&n, codebook)?, quantization_error(&n, codebook)?))
        })
        .collect::<Result<_, EvalError>>()?;
    let num_frames: usize = records.iter().map(|r| r.features.frames()).sum();
    let frame_rate_hz = records[0].features.frame_rate_hz();
    let tokens: Vec<TokenSequence> = tokenized.iter().map(|t| t.0.clone()).collect();
    let bitrate = bitrate_report(&tokens, bpe, frame_rate_hz)?;

    let mut reps = vec![Representation::Raw, Representation::Normalized, Representation::Deidentified];
    reps.extend(cfg.lambdas.iter().map(|&l| Representation::Anonymized(l)));
    let leakage =
        reps.into_iter().map(|r| speaker_leakage_probe(records, r, Some(codebook), &cfg.probe)).collect::<Result<_, _>>()?;
    let purity = content_units.map(|labels| content_purity(&tokens, labels)).transpose()?;

    Ok(PipelineReport {
        schema_version: REPORT_SCHEMA_VERSION,
        num_utterances: records.len(),
        num_speakers: group_by_speaker(records).len(),
        num_frames,
        frame_rate_hz,
        codebook: CodebookSummary {
            k: codebook.k(),
            dim: codebook.dim(),
            training_inertia: codebook.inertia,
            mean_quantization_error: tokenized.iter().map(|t| t.1).sum::<f64>() / num_frames as f64,
        },
        bitrate,
        reference_operating_point: reference_operating_point(),
        leakage,
        purity,
    })
}

/// JSON Schema of [`PipelineReport`]. [`validate_report`] understands the
/// subset used here: `type`, `required`, `properties`, `items`, `minimum`,
/// `maximum` and `const`.
pub const REPORT_SCHEMA: &str = r##"{
  "$schema": "https://json-schema.org/draft/2020-12/schema",
  "title": "vectok pipeline report",
  "type": "object",
  "required": ["schema_version", "num_utterances", "num_speakers", "num_frames", "frame_rate_hz",
               "codebook", "bitrate", "reference_operating_point", "leakage", "purity"],
  "properties": {
    "schema_version": { "const": 1 },
    "num_utterances": { "type": "integer", "minimum": 1 },
    "num_speakers": { "type": "integer", "minimum": 1 },
    "num_frames": { "type": "integer", "minimum": 1 },
    "frame_rate_hz": { "type": "number", "minimum": 0 },
    "codebook": {
      "type": "object",
      "required": ["k", "dim", "training_inertia", "mean_quantization_error"],
      "properties": {
        "k": { "type": "integer", "minimum": 1 },
        "dim": { "type": "integer", "minimum": 1 },
        "training_inertia": { "type": ["number", "null"], "minimum": 0 },
        "mean_quantization_error": { "type": "number", "minimum": 0 }
      }
    },
    "bitrate": { "$ref": "#/$defs/bitrate" },
    "reference_operating_point": { "$ref": "#/$defs/bitrate" },
    "leakage": {
      "type": "array",
      "items": {
        "type": "object",
        "required": ["probe", "accuracy", "chance_level", "num_classes", "num_samples"],
        "properties": {
          "probe": { "type": "string" },
          "accuracy": { "type": "number", "minimum": 0, "maximum": 1 },
          "chance_level": { "type": "number", "minimum": 0, "maximum": 1 },
          "num_classes": { "type": "integer", "minimum": 1 },
          "num_samples": { "type": "integer", "minimum": 1 }
        }
      }
    },
    "purity": { "type": ["number", "null"], "minimum": 0, "maximum": 1 }
  },
  "$defs": {
    "bitrate": {
      "type": "object",
      "required": ["base_vocab_size", "bpe_vocab_size", "tokens_per_sec_base", "tokens_per_sec_bpe",
                   "bits_per_sec_base", "bits_per_sec_bpe", "compression_ratio"],
      "properties": {
        "base_vocab_size": { "type": "integer", "minimum": 1 },
        "bpe_vocab_size": { "type": "integer", "minimum": 1 },
        "tokens_per_sec_base": { "type": "number", "minimum": 0 },
        "tokens_per_sec_bpe": { "type": "number", "minimum": 0 },
        "bits_per_sec_base": { "type": "number", "minimum": 0 },
        "bits_per_sec_bpe": { "type": "number", "minimum": 0 },
        "compression_ratio": { "type": "number", "minimum": 0 }
      }
    }
  }
}"##;

fn type_matches(name: &str, v: &Value) -> bool {
    match name {
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "number" => v.is_number(),
        "integer" => v.is_u64() || v.is_i64(),
        "boolean" => v.is_boolean(),
        "null" => v.is_null(),
        _ => false,
    }
}

fn check(schema: &Value, v: &Value, root: &Value, path: &str) -> Result<(), String> {
    if let Some(r) = schema.get("$ref").and_then(Value::as_str) {
        let target = r.strip_prefix("#/").ok_or_else(|| format!("unsupported $ref {r}"))?;
        let resolved = target.split('/').try_fold(root, |s, k| s.get(k)).ok_or_else(|| format!("dangling $ref {r}"))?;
        return check(resolved, v, root, path);
    }
    if let Some(c) = schema.get("const") {
        if c != v {
            return Err(format!("{path}: expected {c}, found {v}"));
        }
    }
    if let Some(t) = schema.get("type") {
        let ok = match t {
            Value::String(s) => type_matches(s, v),
            Value::Array(options) => options.iter().filter_map(Value::as_str).any(|s| type_matches(s, v)),
            _ => false,
        };
        if !ok {
            return Err(format!("{path}: expected type {t}, found {v}"));
        }
    }
    if let Some(x) = v.as_f64() {
        if let Some(min) = schema.get("minimum").and_then(Value::as_f64) {
            if x < min {
                return Err(format!("{path}: {x} is below {min}"));
            }
        }
        if let Some(max) = schema.get("maximum").and_then(Value::as_f64) {
            if x > max {
                return Err(format!("{path}: {x} is above {max}"));
            }
        }
    }
    if let (Some(req), Some(obj)) = (schema.get("required").and_then(Value::as_array), v.as_object()) {
        for key in req.iter().filter_map(Value::as_str) {
            if !obj.contains_key(key) {
                return Err(format!("{path}: missing key {key}"));
            }
        }
    }
    if let (Some(props), Some(obj)) = (schema.get("properties").and_then(Value::as_object), v.as_object()) {
        for (key, sub) in props {
            if let Some(child) = obj.get(key) {
                check(sub, child, root, &format!("{path}.{key}"))?;
            }
        }
    }
    if let (Some(items), Some(arr)) = (schema.get("items"), v.as_array()) {
        for (i, child) in arr.iter().enumerate() {
            check(items, child, root, &format!("{path}[{i}]"))?;
        }
    }
    Ok(())
}

/// Checks a report document against [`REPORT_SCHEMA`].
pub fn validate_report(doc: &Value) -> Result<(), EvalError> {
    let schema: Value = serde_json::from_str(REPORT_SCHEMA).expect("embedded schema is valid JSON");
    check(&schema, doc, &schema, "$").map_err(EvalError::Schema)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterPoint {
    pub x: f64,
    pub y: f64,
    pub speaker: String,
}

/// Leading eigenvector of a symmetric matrix by power iteration, with a
/// fixed start vector so the result is reproducible.
fn leading_eigvec(m: &[f64], d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + i as f64 / d as f64).collect();
    for _ in 0..500 {
        let mut w: Vec<f64> = (0..d).map(|r| (0..d).map(|c| m[r * d + c] * v[c]).sum()).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return v.iter().map(|x| x / (d as f64).sqrt()).collect();
        }
        w.iter_mut().for_each(|x| *x /= norm);
        let delta = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        if delta < 1e-12 {
            break;
        }
    }
    v
}

/// Projects per-utterance means onto their first two principal axes.
pub fn pca_scatter(
    records: &[UtteranceRecord],
    rep: Representation,
    codebook: Option<&Codebook>,
) -> Result<Vec<ScatterPoint>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let means = utterance_means(records, rep, codebook)?;
    let d = means[0].len();
    let center = mean_of(&means.iter().map(Vec::as_slice).collect::<Vec<_>>());
    let centered: Vec<Vec<f64>> = means.iter().map(|m| m.iter().zip(&center).map(|(a, b)| a - b).collect()).collect();
    let mut cov = vec![0.0; d * d];
    for x in &centered {
        for r in 0..d {
            for c in 0..d {
                cov[r * d + c] += x[r] * x[c];
            }
        }
    }
    let pc1 = leading_eigvec(&cov, d);
    let lambda1: f64 = (0..d).map(|r| pc1[r] * (0..d).map(|c| cov[r * d + c] * pc1[c]).sum::<f64>()).sum();
    for r in 0..d {
        for c in 0..d {
            cov[r * d + c] -= lambda1 * pc1[r] * pc1[c];
        }
    }
    let pc2 = leading_eigvec(&cov, d);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    Ok(centered
        .iter()
        .zip(records)
        .map(|(x, r)| ScatterPoint { x: dot(x, &pc1), y: dot(x, &pc2), speaker: r.speaker_id.clone() })
        .collect())
}

/// Tab-separated `x y speaker_id` rows with a header line.
pub fn write_scatter<W: Write>(mut w: W, points: &[ScatterPoint]) -> std::io::Result<()> {
    writeln!(w, "x\ty\tspeaker_id")?;
    for p in points {
        writeln!(w, "{:.9}\t{:.9}\t{}", p.x, p.y, p.speaker)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpe::{train_bpe, BpeTrainParams};
    use crate::featureio::{generate_synthetic_corpus, SyntheticCorpus, SyntheticCorpusSpec};
    use crate::quantizer::{train_kmeans, KMeansParams};

    fn small_corpus(seed: u64) -> SyntheticCorpus {
        generate_synthetic_corpus(&SyntheticCorpusSpec {
            num_speakers: 4,
            num_content_units: 10,
            dim: 8,
            frames_per_utterance: 60,
            utterances_per_speaker: 10,
            seed,
            ..SyntheticCorpusSpec::default()
        })
        .unwrap()
    }

    fn codebook_for(c: &SyntheticCorpus, k: usize) -> Codebook {
        let normalized: Vec<FeatureMatrix> = c.records.iter().map(|r| normalize(&r.features).unwrap().0).collect();
        train_kmeans(&normalized, &KMeansParams { k, seed: 1, ..KMeansParams::default() }).unwrap()
    }

    #[test]
    fn raw_leaks_and_normalized_does_not() {
        let c = small_corpus(3);
        let cfg = ProbeConfig::default();
        let raw = speaker_leakage_probe(&c.records, Representation::Raw, None, &cfg).unwrap();
        assert_eq!(raw.accuracy, 1.0);
        assert_eq!((raw.num_classes, raw.num_samples), (4, 8));
        let norm = speaker_leakage_probe(&c.records, Representation::Normalized, None, &cfg).unwrap();
        assert_eq!(norm.accuracy, 0.25);
        assert_eq!(norm.chance_level, 0.25);
    }

    #[test]
    fn probe_edge_cases() {
        let c = small_corpus(4);
        let one: Vec<UtteranceRecord> = c.records.iter().filter(|r| r.speaker_id == c.records[0].speaker_id).cloned().collect();
        let r = speaker_leakage_probe(&one, Representation::Raw, None, &ProbeConfig::default()).unwrap();
        assert_eq!((r.accuracy, r.chance_level), (1.0, 1.0));

        let mut sparse = c.records.clone();
        let lonely = sparse.iter().position(|r| r.speaker_id == c.records.last().unwrap().speaker_id).unwrap();
        sparse.truncate(lonely + 1);
        assert!(matches!(
            speaker_leakage_probe(&sparse, Representation::Raw, None, &ProbeConfig::default()),
            Err(EvalError::TooFewUtterances { count: 1, .. })
        ));
        assert!(matches!(
            speaker_leakage_probe(&c.records, Representation::Deidentified, None, &ProbeConfig::default()),
            Err(EvalError::MissingCodebook(_))
        ));
        assert!(matches!(speaker_leakage_probe(&[], Representation::Raw, None, &ProbeConfig::default()), Err(EvalError::EmptyCorpus)));
    }

    #[test]
    fn anonymization_endpoints_match_named_representations() {
        let c = small_corpus(5);
        let cb = codebook_for(&c, 10);
        let cfg = ProbeConfig { seed: 2, ..ProbeConfig::default() };
        let probe = |r| speaker_leakage_probe(&c.records, r, Some(&cb), &cfg).unwrap().accuracy;
        assert_eq!(probe(Representation::Anonymized(1.0)), probe(Representation::Raw));
        assert_eq!(probe(Representation::Anonymized(0.0)), probe(Representation::Deidentified));
    }

    #[test]
    fn purity_bounds() {
        let labels: Vec<Vec<u32>> = (0..20).map(|u| (0..50).map(|t| (u * 7 + t) % 10).collect()).collect();
        let same: Vec<TokenSequence> = labels.iter().map(|l| TokenSequence::new(l.clone(), 10).unwrap()).collect();
        assert_eq!(content_purity(&same, &labels).unwrap(), 1.0);
        // Relabelled clusters are still pure.
        let permuted: Vec<TokenSequence> =
            labels.iter().map(|l| TokenSequence::new(l.iter().map(|&x| (x * 3 + 1) % 10).collect(), 10).unwrap()).collect();
        assert_eq!(content_purity(&permuted, &labels).unwrap(), 1.0);

        let mut rng = SplitMix64::new(1);
        let big_labels: Vec<Vec<u32>> = (0..100).map(|_| (0..1000).map(|_| rng.below(10) as u32).collect()).collect();
        let random: Vec<TokenSequence> =
            (0..100).map(|_| TokenSequence::new((0..1000).map(|_| rng.below(10) as u32).collect(), 10).unwrap()).collect();
        let p = content_purity(&random, &big_labels).unwrap();
        assert!((p - 0.1).abs() < 0.01, "{p}");

        assert!(matches!(content_purity(&same[..2], &labels[..3]), Err(EvalError::LengthMismatch { .. })));
        let short = vec![TokenSequence::new(vec![1, 2], 10).unwrap()];
        assert!(matches!(content_purity(&short, &[vec![1]]), Err(EvalError::LengthMismatch { utterance: 0, .. })));
    }

    #[test]
    fn operating_point_arithmetic() {
        let p = reference_operating_point();
        assert_eq!(p.bits_per_sec_base, 450.0);
        assert_eq!(p.bits_per_sec_bpe, 208.0);
        assert_eq!(p.compression_ratio, 3.125);
    }

    #[test]
    fn report_is_valid_and_deterministic() {
        let c = small_corpus(6);
        let cb = codebook_for(&c, 12);
        let tokens: Vec<TokenSequence> =
            c.records.iter().map(|r| tokenize(&normalize(&r.features).unwrap().0, &cb).unwrap()).collect();
        let bpe = train_bpe(&tokens, &BpeTrainParams { target_vocab_size: 40, ..BpeTrainParams::default() }).unwrap();
        let cfg = ReportConfig::default();
        let report = pipeline_report(&c.records, &cb, &bpe, Some(&c.content_units), &cfg).unwrap();
        let doc = serde_json::to_value(&report).unwrap();
        validate_report(&doc).unwrap();
        assert_eq!(report.leakage.len(), 8);
        assert!(report.purity.unwrap() > 0.5);
        assert!(report.bitrate.compression_ratio > 1.0);
        let again = pipeline_report(&c.records, &cb, &bpe, Some(&c.content_units), &cfg).unwrap();
        assert_eq!(serde_json::to_string(&report).unwrap(), serde_json::to_string(&again).unwrap());

        assert!(matches!(pipeline_report(&[], &cb, &bpe, None, &cfg), Err(EvalError::EmptyCorpus)));

        let mut broken = doc.clone();
        broken["leakage"][0]["accuracy"] = Value::from(1.5);
        assert!(matches!(validate_report(&broken), Err(EvalError::Schema(_))));
        let mut missing = doc.clone();
        missing["bitrate"].as_object_mut().unwrap().remove("compression_ratio");
        assert!(validate_report(&missing).is_err());
        let mut version = doc;
        version["schema_version"] = Value::from(2);
        assert!(validate_report(&version).is_err());
    }

    #[test]
    fn scatter_is_deterministic_and_tabular() {
        let c = small_corpus(7);
        let pts = pca_scatter(&c.records, Representation::Raw, None).unwrap();
        assert_eq!(pts.len(), c.records.len());
        assert_eq!(pts, pca_scatter(&c.records, Representation::Raw, None).unwrap());
        let mut buf = Vec::new();
        write_scatter(&mut buf, &pts).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), pts.len() + 1);
        assert!(text.starts_with("x\ty\tspeaker_id\n"));
    }
}
