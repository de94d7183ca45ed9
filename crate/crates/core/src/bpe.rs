//! Byte-pair encoding over semantic-token streams.
//!
//! Training counts adjacent pairs *with* overlap (`[7,7,7]` holds two `(7,7)`
//! pairs), merges the most frequent pair, and applies the merge left to right
//! without overlap. Equal counts are broken toward the smallest `(left, right)`.
//! Pairs never span utterance boundaries.
//!
//! Model files are plain text:
//!
//! ```text
//! vectok-bpe 1
//! base_vocab_size 300
//! merges 2
//! 7 7 300
//! 300 300 301
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::quantizer::TokenSequence;

const MODEL_HEADER: &str = "vectok-bpe";
const MODEL_VERSION: u32 = 1;
pub const DEFAULT_MIN_PAIR_FREQUENCY: usize = 2;

#[derive(Debug, Error)]
pub enum BpeError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("target vocab size {target} must exceed the base vocab size {base}")]
    TargetTooSmall { target: u32, base: u32 },
    #[error("corpus sequences disagree on base vocab size ({0} vs {1})")]
    MixedVocab(u32, u32),
    #[error("token {token} at index {index} is outside the vocabulary (size {vocab_size})")]
    UnknownToken {
        index: usize,
        token: u32,
        vocab_size: u32,
    },
    #[error("malformed model file at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Merge {
    pub left: u32,
    pub right: u32,
    pub new_id: u32,
}

/// Ordered merge rules plus the expansion of every merged id into base tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    base_vocab_size: u32,
    merges: Vec<Merge>,
    /// `expansions[i]` expands id `base_vocab_size + i`.
    expansions: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpeTrainParams {
    pub target_vocab_size: u32,
    pub min_pair_frequency: usize,
}

impl Default for BpeTrainParams {
    fn default() -> Self {
        Self {
            target_vocab_size: 8192,
            min_pair_frequency: DEFAULT_MIN_PAIR_FREQUENCY,
        }
    }
}

fn apply_merge(seq: &[u32], m: &Merge, out: &mut Vec<u32>) {
    out.clear();
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == m.left && seq[i + 1] == m.right {
            out.push(m.new_id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
}

pub fn train_bpe<'a>(
    corpus: impl IntoIterator<Item = &'a TokenSequence>,
    params: &BpeTrainParams,
) -> Result<BpeModel, BpeError> {
    let mut base = None;
    let mut seqs: Vec<Vec<u32>> = Vec::new();
    for s in corpus {
        match base {
            None => base = Some(s.vocab_size()),
            Some(b) if b != s.vocab_size() => return Err(BpeError::MixedVocab(b, s.vocab_size())),
            _ => {}
        }
        seqs.push(s.tokens().to_vec());
    }
    let base = base.ok_or(BpeError::EmptyCorpus)?;
    if params.target_vocab_size <= base {
        return Err(BpeError::TargetTooSmall {
            target: params.target_vocab_size,
            base,
        });
    }

    let mut model = BpeModel::identity(base);
    let mut scratch = Vec::new();
    let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
    while model.vocab_size() < params.target_vocab_size {
        counts.clear();
        for s in &seqs {
            for w in s.windows(2) {
                *counts.entry((w[0], w[1])).or_insert(0) += 1;
            }
        }
        let best = counts
            .iter()
            .filter(|(_, &c)| c >= params.min_pair_frequency.max(1))
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some((&(left, right), _)) = best else { break };
        let merge = Merge {
            left,
            right,
            new_id: model.vocab_size(),
        };
        for s in seqs.iter_mut() {
            apply_merge(s, &merge, &mut scratch);
            std::mem::swap(s, &mut scratch);
        }
        model.push_merge(merge);
    }
    Ok(model)
}

impl BpeModel {
    /// A model with no merges: encoding and decoding are the identity.
    pub fn identity(base_vocab_size: u32) -> Self {
        Self {
            base_vocab_size,
            merges: Vec::new(),
            expansions: Vec::new(),
        }
    }

    fn expand_into(&self, id: u32, out: &mut Vec<u32>) {
        if id < self.base_vocab_size {
            out.push(id);
        } else {
            out.extend_from_slice(&self.expansions[(id - self.base_vocab_size) as usize]);
        }
    }

    fn push_merge(&mut self, m: Merge) {
        let mut exp = Vec::new();
        self.expand_into(m.left, &mut exp);
        self.expand_into(m.right, &mut exp);
        self.merges.push(m);
        self.expansions.push(exp);
    }

    pub fn base_vocab_size(&self) -> u32 {
        self.base_vocab_size
    }

    pub fn vocab_size(&self) -> u32 {
        self.base_vocab_size + self.merges.len() as u32
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    /// Base-token string for any id in the vocabulary.
    pub fn expansion(&self, id: u32) -> Option<Vec<u32>> {
        (id < self.vocab_size()).then(|| {
            let mut v = Vec::new();
            self.expand_into(id, &mut v);
            v
        })
    }

    pub fn encode(&self, tokens: &TokenSequence) -> Result<TokenSequence, BpeError> {
        Ok(TokenSequence::new(self.encode_ids(tokens.tokens())?, self.vocab_size())
            .expect("merged ids are within the vocabulary"))
    }

    pub fn encode_ids(&self, tokens: &[u32]) -> Result<Vec<u32>, BpeError> {
        if let Some(i) = tokens.iter().position(|&t| t >= self.base_vocab_size) {
            return Err(BpeError::UnknownToken {
                index: i,
                token: tokens[i],
                vocab_size: self.base_vocab_size,
            });
        }
        let mut cur = tokens.to_vec();
        let mut next = Vec::with_capacity(cur.len());
        for m in &self.merges {
            if cur.len() < 2 {
                break;
            }
            if !cur.windows(2).any(|w| w[0] == m.left && w[1] == m.right) {
                continue;
            }
            apply_merge(&cur, m, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    pub fn decode(&self, tokens: &TokenSequence) -> Result<TokenSequence, BpeError> {
        Ok(TokenSequence::new(self.decode_ids(tokens.tokens())?, self.base_vocab_size)
            .expect("expansions contain only base ids"))
    }

    pub fn decode_ids(&self, tokens: &[u32]) -> Result<Vec<u32>, BpeError> {
        let mut out = Vec::with_capacity(tokens.len() * 2);
        for (i, &t) in tokens.iter().enumerate() {
            if t >= self.vocab_size() {
                return Err(BpeError::UnknownToken {
                    index: i,
                    token: t,
                    vocab_size: self.vocab_size(),
                });
            }
            self.expand_into(t, &mut out);
        }
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), BpeError> {
        writeln!(w, "{MODEL_HEADER} {MODEL_VERSION}")?;
        writeln!(w, "base_vocab_size {}", self.base_vocab_size)?;
        writeln!(w, "merges {}", self.merges.len())?;
        for m in &self.merges {
            writeln!(w, "{} {} {}", m.left, m.right, m.new_id)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, BpeError> {
        let mut lines = r.lines().enumerate();
        let mut next_line = |what: &str| -> Result<(usize, String), BpeError> {
            match lines.next() {
                Some((i, l)) => Ok((i + 1, l?)),
                None => Err(BpeError::Parse {
                    line: 0,
                    reason: format!("missing {what}"),
                }),
            }
        };
        let parse_err = |line: usize, reason: String| BpeError::Parse { line, reason };

        let (ln, header) = next_line("header")?;
        match header.split_whitespace().collect::<Vec<_>>().as_slice() {
            [MODEL_HEADER, v] if v.parse::<u32>().ok() == Some(MODEL_VERSION) => {}
            _ => return Err(parse_err(ln, format!("expected '{MODEL_HEADER} {MODEL_VERSION}'"))),
        }
        let mut keyed = |key: &str| -> Result<u64, BpeError> {
            let (ln, l) = next_line(key)?;
            match l.split_whitespace().collect::<Vec<_>>().as_slice() {
                [k, v] if *k == key => v.parse().map_err(|_| parse_err(ln, format!("bad {key} value"))),
                _ => Err(parse_err(ln, format!("expected '{key} <n>'"))),
            }
        };
        let base = keyed("base_vocab_size")? as u32;
        let count = keyed("merges")? as usize;
        let mut model = BpeModel::identity(base);
        for _ in 0..count {
            let (ln, l) = next_line("merge line")?;
            let fields: Vec<u32> = l
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|_| parse_err(ln, "merge fields must be integers".into()))?;
            let [left, right, new_id] = fields[..] else {
                return Err(parse_err(ln, "expected 'left right new'".into()));
            };
            if new_id != model.vocab_size() {
                return Err(parse_err(ln, format!("expected new id {}, found {new_id}", model.vocab_size())));
            }
            if left >= new_id || right >= new_id {
                return Err(parse_err(ln, "merge references an id not yet defined".into()));
            }
            model.push_merge(Merge { left, right, new_id });
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), BpeError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BpeError> {
        Self::read_from(std::io::BufReader::new(fs::File::open(path)?))
    }
}

/// `ceil(log2(vocab_size))`, the bits needed to address one token.
pub fn bits_per_token(vocab_size: u32) -> u32 {
    if vocab_size <= 1 {
        0
    } else {
        32 - (vocab_size - 1).leading_zeros()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BitrateStats {
    pub base_vocab_size: u32,
    pub bpe_vocab_size: u32,
    pub tokens_per_sec_base: f64,
    pub tokens_per_sec_bpe: f64,
    pub bits_per_sec_base: f64,
    pub bits_per_sec_bpe: f64,
    /// Base tokens/sec divided by BPE tokens/sec.
    pub compression_ratio: f64,
}

impl BitrateStats {
    pub fn from_rates(base_rate: f64, base_vocab_size: u32, bpe_rate: f64, bpe_vocab_size: u32) -> Self {
        Self {
            base_vocab_size,
            bpe_vocab_size,
            tokens_per_sec_base: base_rate,
            tokens_per_sec_bpe: bpe_rate,
            bits_per_sec_base: base_rate * bits_per_token(base_vocab_size) as f64,
            bits_per_sec_bpe: bpe_rate * bits_per_token(bpe_vocab_size) as f64,
            compression_ratio: base_rate / bpe_rate,
        }
    }
}

/// Token and bit rates before and after BPE for a base-token corpus.
///
/// Each base token is one frame at `frame_rate_hz`.
pub fn bitrate_report<'a>(
    corpus: impl IntoIterator<Item = &'a TokenSequence>,
    model: &BpeModel,
    frame_rate_hz: f64,
) -> Result<BitrateStats, BpeError> {
    let (mut base_tokens, mut bpe_tokens) = (0usize, 0usize);
    for s in corpus {
        base_tokens += s.len();
        bpe_tokens += model.encode_ids(s.tokens())?.len();
    }
    if base_tokens == 0 {
        return Err(BpeError::EmptyCorpus);
    }
    let seconds = base_tokens as f64 / frame_rate_hz;
    Ok(BitrateStats::from_rates(
        base_tokens as f64 / seconds,
        model.base_vocab_size(),
        bpe_tokens as f64 / seconds,
        model.vocab_size(),
    ))
}
