//! Feature and token containers, their binary file formats, corpus manifests,
//! and a synthetic feature-corpus generator that stands in for a speech encoder.
//!
//! # Wire formats
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! VTKF  "VTKF" | version u32 = 1 | dim u32 | frames u64 | frames*dim f32 (row-major)
//! VTKT  "VTKT" | version u32 = 1 | vocab u32 | count u64 | count u32 tokens
//! ```
//!
//! The codebook format (`VTKC`) lives in [`crate::quantizer`].
//!
//! Manifests are UTF-8 text, one utterance per line:
//! `utterance_id<TAB>speaker_id<TAB>path`. Relative paths are resolved
//! against the manifest's directory.

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};
use thiserror::Error;

use crate::quantizer::TokenSequence;
use crate::rng::SplitMix64;

pub const FEATURE_MAGIC: [u8; 4] = *b"VTKF";
pub const TOKEN_MAGIC: [u8; 4] = *b"VTKT";
pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_FRAME_RATE_HZ: f64 = 50.0;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated stream while reading {0}")]
    Truncated(&'static str),
    #[error("non-finite value at frame {frame}, dim {dim}")]
    NonFinite { frame: usize, dim: usize },
    #[error("token {token} at index {index} is out of range for vocab size {vocab_size}")]
    TokenOutOfRange {
        index: usize,
        token: u32,
        vocab_size: u32,
    },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("feature matrix has no frames")]
    Empty,
    #[error("feature dimensionality must be positive")]
    ZeroDim,
    #[error("data length {len} is not a multiple of dim {dim}")]
    Shape { len: usize, dim: usize },
    #[error("non-finite value at frame {frame}, dim {dim}")]
    NonFinite { frame: usize, dim: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
}

/// Per-utterance sequence of frame vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f64>,
    frame_rate_hz: f64,
}

impl FeatureMatrix {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self, FeatureError> {
        if dim == 0 {
            return Err(FeatureError::ZeroDim);
        }
        if !data.len().is_multiple_of(dim) {
            return Err(FeatureError::Shape {
                len: data.len(),
                dim,
            });
        }
        if data.is_empty() {
            return Err(FeatureError::Empty);
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite {
                frame: i / dim,
                dim: i % dim,
            });
        }
        Ok(Self {
            dim,
            data,
            frame_rate_hz: DEFAULT_FRAME_RATE_HZ,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, FeatureError> {
        let first = rows.first().ok_or(FeatureError::Empty)?;
        let dim = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(FeatureError::DimMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(dim, data)
    }

    pub fn with_frame_rate(mut self, hz: f64) -> Self {
        self.frame_rate_hz = hz;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frames(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    pub fn duration_secs(&self) -> f64 {
        self.frames() as f64 / self.frame_rate_hz
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Frames `start..end` as a new matrix (e.g. a prompt slice).
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self, FeatureError> {
        let end = end.min(self.frames());
        if start >= end {
            return Err(FeatureError::Empty);
        }
        Ok(Self {
            dim: self.dim,
            data: self.data[start * self.dim..end * self.dim].to_vec(),
            frame_rate_hz: self.frame_rate_hz,
        })
    }

    /// Applies `f` to every element, re-checking finiteness.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self, FeatureError> {
        Ok(Self::new(self.dim, self.data.iter().map(|&v| f(v)).collect())?
            .with_frame_rate(self.frame_rate_hz))
    }

    /// Adds `offset` to every frame.
    pub fn add_row(&self, offset: &[f64]) -> Result<Self, FeatureError> {
        if offset.len() != self.dim {
            return Err(FeatureError::DimMismatch {
                expected: self.dim,
                got: offset.len(),
            });
        }
        let data = self
            .rows()
            .flat_map(|r| r.iter().zip(offset).map(|(a, b)| a + b))
            .collect();
        Ok(Self::new(self.dim, data)?.with_frame_rate(self.frame_rate_hz))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub features: FeatureMatrix,
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<(), FormatError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FormatError::Truncated(what),
        _ => FormatError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &'static str) -> Result<u32, FormatError> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &'static str) -> Result<u64, FormatError> {
    let mut b = [0u8; 8];
    read_exact_or(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn check_magic<R: Read>(r: &mut R, expected: [u8; 4]) -> Result<(), FormatError> {
    let mut found = [0u8; 4];
    read_exact_or(r, &mut found, "magic")?;
    if found != expected {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(&expected).into_owned(),
            found: String::from_utf8_lossy(&found).into_owned(),
        });
    }
    let version = read_u32(r, "version")?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    Ok(())
}

/// Reads `count` little-endian f32 values, widening to f64.
pub(crate) fn read_f32_block<R: Read>(
    r: &mut R,
    count: usize,
    what: &'static str,
) -> Result<Vec<f64>, FormatError> {
    let mut out = Vec::with_capacity(count.min(1 << 24));
    let mut buf = [0u8; 4 * 1024];
    let mut remaining = count;
    while remaining > 0 {
        let n = remaining.min(1024);
        read_exact_or(r, &mut buf[..4 * n], what)?;
        out.extend(
            buf[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64),
        );
        remaining -= n;
    }
    Ok(out)
}

/// Narrows to f32 and writes, rejecting anything that is not finite in f32.
pub(crate) fn write_f32_block<W: Write>(w: &mut W, values: &[f64], dim: usize) -> Result<(), FormatError> {
    for (i, &v) in values.iter().enumerate() {
        let narrowed = v as f32;
        if !narrowed.is_finite() {
            return Err(FormatError::NonFinite {
                frame: i / dim,
                dim: i % dim,
            });
        }
        w.write_all(&narrowed.to_le_bytes())?;
    }
    Ok(())
}

/// Writes a `VTKF` stream and returns the number of bytes written.
pub fn write_features<W: Write>(features: &FeatureMatrix, mut w: W) -> Result<u64, FormatError> {
    // Validate before emitting anything so a rejected matrix leaves no partial file.
    for (i, &v) in features.data.iter().enumerate() {
        if !(v as f32).is_finite() {
            return Err(FormatError::NonFinite {
                frame: i / features.dim,
                dim: i % features.dim,
            });
        }
    }
    w.write_all(&FEATURE_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(features.dim as u32).to_le_bytes())?;
    w.write_all(&(features.frames() as u64).to_le_bytes())?;
    write_f32_block(&mut w, &features.data, features.dim)?;
    w.flush()?;
    Ok(20 + 4 * features.data.len() as u64)
}

pub fn read_features<R: Read>(mut r: R) -> Result<FeatureMatrix, FormatError> {
    check_magic(&mut r, FEATURE_MAGIC)?;
    let dim = read_u32(&mut r, "dim")? as usize;
    let frames = read_u64(&mut r, "frames")? as usize;
    if dim == 0 || frames == 0 {
        return Err(FormatError::InvalidHeader(format!(
            "dim={dim}, frames={frames}; both must be positive"
        )));
    }
    let data = read_f32_block(&mut r, frames * dim, "feature payload")?;
    FeatureMatrix::new(dim, data).map_err(|e| match e {
        FeatureError::NonFinite { frame, dim } => FormatError::NonFinite { frame, dim },
        other => FormatError::InvalidHeader(other.to_string()),
    })
}

pub fn write_tokens<W: Write>(tokens: &TokenSequence, mut w: W) -> Result<u64, FormatError> {
    tokens.validate().map_err(|(index, token)| FormatError::TokenOutOfRange {
        index,
        token,
        vocab_size: tokens.vocab_size(),
    })?;
    w.write_all(&TOKEN_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&tokens.vocab_size().to_le_bytes())?;
    w.write_all(&(tokens.len() as u64).to_le_bytes())?;
    for t in tokens.tokens() {
        w.write_all(&t.to_le_bytes())?;
    }
    w.flush()?;
    Ok(20 + 4 * tokens.len() as u64)
}

pub fn read_tokens<R: Read>(mut r: R) -> Result<TokenSequence, FormatError> {
    check_magic(&mut r, TOKEN_MAGIC)?;
    let vocab_size = read_u32(&mut r, "vocab_size")?;
    let count = read_u64(&mut r, "count")? as usize;
    let mut tokens = Vec::with_capacity(count.min(1 << 24));
    for _ in 0..count {
        tokens.push(read_u32(&mut r, "token payload")?);
    }
    TokenSequence::new(tokens, vocab_size).map_err(|e| match e {
        crate::quantizer::QuantizerError::TokenOutOfRange { index, token, vocab_size } => {
            FormatError::TokenOutOfRange { index, token, vocab_size }
        }
        other => FormatError::InvalidHeader(other.to_string()),
    })
}

pub fn save_features(path: &Path, features: &FeatureMatrix) -> Result<u64, FormatError> {
    write_features(features, BufWriter::new(File::create(path)?))
}

pub fn load_features(path: &Path) -> Result<FeatureMatrix, FormatError> {
    read_features(BufReader::new(File::open(path)?))
}

pub fn save_tokens(path: &Path, tokens: &TokenSequence) -> Result<u64, FormatError> {
    write_tokens(tokens, BufWriter::new(File::create(path)?))
}

pub fn load_tokens(path: &Path) -> Result<TokenSequence, FormatError> {
    read_tokens(BufReader::new(File::open(path)?))
}

/// One line of a corpus manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub speaker_id: String,
    pub path: PathBuf,
}

pub fn write_manifest<W: Write>(entries: &[ManifestEntry], mut w: W) -> Result<(), FormatError> {
    for e in entries {
        writeln!(w, "{}\t{}\t{}", e.utterance_id, e.speaker_id, e.path.display())?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a manifest; relative paths are joined onto `base_dir`.
pub fn read_manifest<R: BufRead>(r: R, base_dir: &Path) -> Result<Vec<ManifestEntry>, FormatError> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(FormatError::Manifest {
                line: i + 1,
                reason: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let utterance_id = fields[0].to_string();
        if utterance_id.is_empty() {
            return Err(FormatError::Manifest {
                line: i + 1,
                reason: "empty utterance id".into(),
            });
        }
        if !seen.insert(utterance_id.clone()) {
            return Err(FormatError::Manifest {
                line: i + 1,
                reason: format!("duplicate utterance id {utterance_id:?}"),
            });
        }
        let path = PathBuf::from(fields[2]);
        entries.push(ManifestEntry {
            utterance_id,
            speaker_id: fields[1].to_string(),
            path: if path.is_absolute() { path } else { base_dir.join(path) },
        });
    }
    Ok(entries)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>, FormatError> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    read_manifest(BufReader::new(File::open(path)?), base)
}

/// Loads every feature file named in a manifest.
pub fn load_feature_corpus(manifest: &Path) -> Result<Vec<UtteranceRecord>, FormatError> {
    load_manifest(manifest)?
        .into_iter()
        .map(|e| {
            Ok(UtteranceRecord {
                features: load_features(&e.path)?,
                utterance_id: e.utterance_id,
                speaker_id: e.speaker_id,
            })
        })
        .collect()
}

/// Parameters of the synthetic generator.
///
/// Each frame is `content_center[c_t] + speaker_offset[s] + N(0, noise_scale²)`,
/// where `c_t` follows a random walk over content units with geometric dwell
/// times of mean `mean_dwell_frames`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticCorpusSpec {
    pub num_speakers: usize,
    pub num_content_units: usize,
    pub dim: usize,
    pub frames_per_utterance: usize,
    pub utterances_per_speaker: usize,
    pub speaker_offset_scale: f64,
    pub noise_scale: f64,
    pub mean_dwell_frames: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            num_speakers: 8,
            num_content_units: 40,
            dim: 32,
            frames_per_utterance: 150,
            utterances_per_speaker: 20,
            speaker_offset_scale: 5.0,
            noise_scale: 0.1,
            mean_dwell_frames: 3.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error("invalid synthetic corpus spec: {0}")]
    Invalid(String),
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        let bad = |m: &str| Err(SpecError::Invalid(m.to_string()));
        if self.num_speakers == 0 {
            return bad("num_speakers must be >= 1");
        }
        if self.num_content_units == 0 {
            return bad("num_content_units must be >= 1");
        }
        if self.dim == 0 || self.frames_per_utterance == 0 || self.utterances_per_speaker == 0 {
            return bad("dim, frames_per_utterance and utterances_per_speaker must be positive");
        }
        if !(self.speaker_offset_scale >= 0.0 && self.speaker_offset_scale.is_finite()) {
            return bad("speaker_offset_scale must be finite and >= 0");
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be finite and >= 0");
        }
        if !(self.mean_dwell_frames >= 1.0 && self.mean_dwell_frames.is_finite()) {
            return bad("mean_dwell_frames must be finite and >= 1");
        }
        Ok(())
    }
}

/// Generated utterances plus the ground truth the generator used.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub records: Vec<UtteranceRecord>,
    /// Per-utterance, per-frame content unit labels.
    pub content_units: Vec<Vec<u32>>,
    pub content_centers: Vec<Vec<f64>>,
    pub speaker_offsets: Vec<Vec<f64>>,
}

impl SyntheticCorpus {
    pub fn features(&self) -> impl Iterator<Item = &FeatureMatrix> {
        self.records.iter().map(|r| &r.features)
    }
}

fn gaussian_vec(rng: &mut SplitMix64, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<SyntheticCorpus, SpecError> {
    spec.validate()?;
    let mut rng = SplitMix64::new(spec.seed);
    let content_centers: Vec<Vec<f64>> = (0..spec.num_content_units)
        .map(|_| gaussian_vec(&mut rng, spec.dim, 1.0))
        .collect();
    let speaker_offsets: Vec<Vec<f64>> = (0..spec.num_speakers)
        .map(|_| gaussian_vec(&mut rng, spec.dim, spec.speaker_offset_scale))
        .collect();
    let dwell = Geometric::new(1.0 / spec.mean_dwell_frames)
        .map_err(|e| SpecError::Invalid(e.to_string()))?;
    let c = spec.num_content_units as u64;

    let mut records = Vec::with_capacity(spec.num_speakers * spec.utterances_per_speaker);
    let mut content_units = Vec::with_capacity(records.capacity());
    for (s, offset) in speaker_offsets.iter().enumerate() {
        for u in 0..spec.utterances_per_speaker {
            let mut units = Vec::with_capacity(spec.frames_per_utterance);
            let mut unit = rng.below(c) as u32;
            while units.len() < spec.frames_per_utterance {
                let run = 1 + dwell.sample(&mut rng) as usize;
                let run = run.min(spec.frames_per_utterance - units.len());
                units.extend(std::iter::repeat_n(unit, run));
                if c > 1 {
                    // Uniform over the other units.
                    let step = 1 + rng.below(c - 1) as u32;
                    unit = (unit + step) % c as u32;
                }
            }
            let mut data = Vec::with_capacity(spec.frames_per_utterance * spec.dim);
            for &unit in &units {
                let center = &content_centers[unit as usize];
                for d in 0..spec.dim {
                    let mut v = center[d] + offset[d];
                    if spec.noise_scale > 0.0 {
                        let z: f64 = rng.sample(StandardNormal);
                        v += spec.noise_scale * z;
                    }
                    data.push(v);
                }
            }
            records.push(UtteranceRecord {
                utterance_id: format!("spk{s:03}_utt{u:04}"),
                speaker_id: format!("spk{s:03}"),
                features: FeatureMatrix::new(spec.dim, data).expect("generator produces finite frames"),
            });
            content_units.push(units);
        }
    }
    Ok(SyntheticCorpus {
        records,
        content_units,
        content_centers,
        speaker_offsets,
    })
}

/// How target units relate to source units in a synthetic translation corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitMapping {
    Identity,
    /// Seeded random permutation of the unit inventory.
    Permutation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslationCorpusSpec {
    pub num_pairs: usize,
    pub num_units: u32,
    pub min_len: usize,
    pub max_len: usize,
    pub mapping: UnitMapping,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslationCorpus {
    pub pairs: Vec<(Vec<u32>, Vec<u32>)>,
    /// `mapping[i]` is the target unit for source unit `i`.
    pub mapping: Vec<u32>,
}

/// Source/target token pairs related by a fixed unit-to-unit mapping.
pub fn generate_translation_corpus(spec: &TranslationCorpusSpec) -> Result<TranslationCorpus, SpecError> {
    if spec.num_units == 0 || spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(SpecError::Invalid(
            "need num_units >= 1 and 1 <= min_len <= max_len".into(),
        ));
    }
    let mut rng = SplitMix64::new(spec.seed);
    let mut mapping: Vec<u32> = (0..spec.num_units).collect();
    if spec.mapping == UnitMapping::Permutation {
        // Fisher-Yates
        for i in (1..mapping.len()).rev() {
            let j = rng.below(i as u64 + 1) as usize;
            mapping.swap(i, j);
        }
    }
    let span = (spec.max_len - spec.min_len + 1) as u64;
    let pairs = (0..spec.num_pairs)
        .map(|_| {
            let len = spec.min_len + rng.below(span) as usize;
            let src: Vec<u32> = (0..len).map(|_| rng.below(spec.num_units as u64) as u32).collect();
            let tgt = src.iter().map(|&u| mapping[u as usize]).collect();
            (src, tgt)
        })
        .collect();
    Ok(TranslationCorpus { pairs, mapping })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fm(rows: &[&[f64]]) -> FeatureMatrix {
        FeatureMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn single_frame_file_size() {
        let m = fm(&[&[0.0, 0.0]]);
        let mut buf = Vec::new();
        let n = write_features(&m, &mut buf).unwrap();
        // magic 4 + version 4 + dim 4 + frames 8 + 2 * f32
        assert_eq!(n, 28);
        assert_eq!(buf.len(), 28);
        assert_eq!(&buf[..4], b"VTKF");
    }

    #[test]
    fn nan_is_rejected_with_position() {
        let m = FeatureMatrix {
            dim: 2,
            data: vec![0.0, f64::NAN],
            frame_rate_hz: 50.0,
        };
        let err = write_features(&m, Vec::new()).unwrap_err();
        assert!(matches!(err, FormatError::NonFinite { frame: 0, dim: 1 }), "{err}");
        assert_eq!(
            FeatureMatrix::new(2, vec![0.0, f64::NAN]).unwrap_err(),
            FeatureError::NonFinite { frame: 0, dim: 1 }
        );
    }

    #[test]
    fn bad_magic() {
        let mut buf = Vec::new();
        write_features(&fm(&[&[1.0]]), &mut buf).unwrap();
        buf[..4].copy_from_slice(b"XXXX");
        assert!(matches!(read_features(&buf[..]), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn unsupported_version() {
        let mut buf = Vec::new();
        write_features(&fm(&[&[1.0]]), &mut buf).unwrap();
        buf[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(read_features(&buf[..]), Err(FormatError::UnsupportedVersion(7))));
    }

    #[test]
    fn truncated_payload() {
        let mut buf = Vec::new();
        write_features(&fm(&[&[1.0, 2.0]]), &mut buf).unwrap();
        // Claim two frames while carrying one.
        buf[12..20].copy_from_slice(&2u64.to_le_bytes());
        assert!(matches!(read_features(&buf[..]), Err(FormatError::Truncated(_))));
    }

    #[test]
    fn tokens_roundtrip_and_range() {
        let seq = TokenSequence::new(vec![0, 1, 2], 300).unwrap();
        let mut buf = Vec::new();
        write_tokens(&seq, &mut buf).unwrap();
        assert_eq!(read_tokens(&buf[..]).unwrap(), seq);

        let empty = TokenSequence::new(vec![], 300).unwrap();
        let mut buf = Vec::new();
        assert_eq!(write_tokens(&empty, &mut buf).unwrap(), 20);
        assert_eq!(read_tokens(&buf[..]).unwrap(), empty);

        assert!(TokenSequence::new(vec![300], 300).is_err());
        // Hand-built file with an out-of-range token.
        let mut raw = Vec::new();
        raw.extend_from_slice(b"VTKT");
        raw.extend_from_slice(&1u32.to_le_bytes());
        raw.extend_from_slice(&300u32.to_le_bytes());
        raw.extend_from_slice(&1u64.to_le_bytes());
        raw.extend_from_slice(&300u32.to_le_bytes());
        assert!(matches!(
            read_tokens(&raw[..]),
            Err(FormatError::TokenOutOfRange { token: 300, .. })
        ));
    }

    #[test]
    fn manifest_roundtrip_and_validation() {
        let entries = vec![
            ManifestEntry {
                utterance_id: "a".into(),
                speaker_id: "s1".into(),
                path: PathBuf::from("/x/a.vtkf"),
            },
            ManifestEntry {
                utterance_id: "b".into(),
                speaker_id: "".into(),
                path: PathBuf::from("rel/b.vtkf"),
            },
        ];
        let mut buf = Vec::new();
        write_manifest(&entries, &mut buf).unwrap();
        let back = read_manifest(&buf[..], Path::new("/base")).unwrap();
        assert_eq!(back[0], entries[0]);
        assert_eq!(back[1].path, PathBuf::from("/base/rel/b.vtkf"));
        assert_eq!(back[1].speaker_id, "");

        let dup = "a\ts\tp\na\ts\tq\n";
        assert!(matches!(
            read_manifest(dup.as_bytes(), Path::new(".")),
            Err(FormatError::Manifest { line: 2, .. })
        ));
        assert!(read_manifest("\ts\tp\n".as_bytes(), Path::new(".")).is_err());
    }

    #[test]
    fn degenerate_generator_repeats_single_center() {
        let spec = SyntheticCorpusSpec {
            num_speakers: 2,
            num_content_units: 1,
            noise_scale: 0.0,
            speaker_offset_scale: 0.0,
            utterances_per_speaker: 2,
            frames_per_utterance: 10,
            ..Default::default()
        };
        let corpus = generate_synthetic_corpus(&spec).unwrap();
        let center = &corpus.content_centers[0];
        for rec in &corpus.records {
            for row in rec.features.rows() {
                assert_eq!(row, center.as_slice());
            }
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = SyntheticCorpusSpec {
            utterances_per_speaker: 3,
            ..Default::default()
        };
        let a = generate_synthetic_corpus(&spec).unwrap();
        let b = generate_synthetic_corpus(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_corpus(&SyntheticCorpusSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.records[0].features, c.records[0].features);
    }

    #[test]
    fn noiseless_frames_of_one_speaker_and_unit_are_equal() {
        let spec = SyntheticCorpusSpec {
            noise_scale: 0.0,
            utterances_per_speaker: 3,
            ..Default::default()
        };
        let corpus = generate_synthetic_corpus(&spec).unwrap();
        let mut seen: std::collections::HashMap<(String, u32), Vec<f64>> = Default::default();
        for (rec, units) in corpus.records.iter().zip(&corpus.content_units) {
            for (row, &u) in rec.features.rows().zip(units) {
                let key = (rec.speaker_id.clone(), u);
                match seen.get(&key) {
                    Some(prev) => assert_eq!(prev.as_slice(), row),
                    None => {
                        seen.insert(key, row.to_vec());
                    }
                }
            }
        }
    }

    #[test]
    fn dwell_times_produce_repeats() {
        let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec::default()).unwrap();
        let units = &corpus.content_units[0];
        let runs = 1 + units.windows(2).filter(|w| w[0] != w[1]).count();
        let mean_run = units.len() as f64 / runs as f64;
        assert!(mean_run > 2.0 && mean_run < 4.5, "mean run {mean_run}");
    }

    #[test]
    fn translation_corpus_mappings() {
        let spec = TranslationCorpusSpec {
            num_pairs: 10,
            num_units: 12,
            min_len: 3,
            max_len: 6,
            mapping: UnitMapping::Permutation,
            seed: 9,
        };
        let corpus = generate_translation_corpus(&spec).unwrap();
        let mut sorted = corpus.mapping.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..12).collect::<Vec<_>>());
        for (s, t) in &corpus.pairs {
            assert!(s.len() >= 3 && s.len() <= 6);
            assert!(s.iter().zip(t).all(|(&a, &b)| corpus.mapping[a as usize] == b));
        }
        let id = generate_translation_corpus(&TranslationCorpusSpec {
            mapping: UnitMapping::Identity,
            ..spec
        })
        .unwrap();
        assert!(id.pairs.iter().all(|(s, t)| s == t));
    }

    proptest! {
        #[test]
        fn feature_roundtrip_bit_exact(
            dim in 1usize..6,
            rows in 1usize..20,
            seed in any::<u64>(),
        ) {
            let mut rng = SplitMix64::new(seed);
            let data: Vec<f64> = (0..dim * rows)
                .map(|_| ((rng.next_f64() - 0.5) * 1e4) as f32 as f64)
                .collect();
            let m = FeatureMatrix::new(dim, data).unwrap();
            let mut buf = Vec::new();
            write_features(&m, &mut buf).unwrap();
            let back = read_features(&buf[..]).unwrap();
            prop_assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back.dim(), dim);
        }

        #[test]
        fn token_roundtrip(tokens in proptest::collection::vec(0u32..500, 0..200)) {
            let seq = TokenSequence::new(tokens, 500).unwrap();
            let mut buf = Vec::new();
            write_tokens(&seq, &mut buf).unwrap();
            prop_assert_eq!(read_tokens(&buf[..]).unwrap(), seq);
        }
    }
}
