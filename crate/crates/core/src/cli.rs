//! The `vectok` command line: one subcommand per pipeline stage.
//!
//! Every flag can also be set through an environment variable named
//! `VECTOK_<FLAG>` (upper case, dashes as underscores). All outputs land
//! under `--out-dir`. Each command also writes `config.<command>.json`, the
//! parsed flags, and `run-manifest.<command>.json` with input and output
//! SHA-256 digests. The manifest is the only file carrying a timestamp.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3
//! numerical failure (training diverged).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bpe::{bitrate_report, train_bpe, BpeModel, BpeTrainParams};
use crate::eval::{pipeline_report, validate_report, ProbeConfig, ReportConfig};
use crate::featureio::{
    generate_synthetic_corpus, generate_translation_corpus, load_features, load_manifest, load_tokens,
    save_features, save_tokens, write_manifest, FeatureMatrix, ManifestEntry, SyntheticCorpusSpec,
    TranslationCorpusSpec, UnitMapping, UtteranceRecord,
};
use crate::neural::{
    train_invk, AugmentationPolicy, Dtype, InvKConfig, InvKExample, InvKModel, NeuralError, TrainConfig,
};
use crate::normalizer::normalize;
use crate::quantizer::{load_codebook, save_codebook, tokenize, train_kmeans_traced, Codebook, KMeansParams, TokenSequence};
use crate::reconstructor::{lookup_reconstruct, reconstruct_with_prompt, SpeakerVectors, DEFAULT_LAMBDA, DEFAULT_PROMPT_FRAMES};
use crate::seqlm::{
    rescore_select, s2st_pipeline, sample_candidates, train_lm, Conditioning, ConditioningLayout, LikelihoodScorer,
    RescoreHook, SampleConfig, SeqLm, SeqLmConfig, SeqLmError, DEFAULT_CANDIDATES,
};

/// Bad flags or missing inputs; maps to exit code 1.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Debug, Parser, Serialize)]
#[command(name = "vectok", version, about = "Speech-vector / semantic-token codec toolkit")]
pub struct Cli {
    /// Worker threads; 1 guarantees bit-identical reruns.
    #[arg(long, global = true, env = "VECTOK_THREADS")]
    pub threads: Option<usize>,
    /// Directory receiving every output.
    #[arg(long, global = true, env = "VECTOK_OUT_DIR", default_value = "out")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic speaker/content corpus (and optional token pairs).
    GenCorpus(GenCorpusArgs),
    /// Train the k-means codebook on normalized features.
    TrainKmeans(TrainKmeansArgs),
    /// Normalize and tokenize every utterance of a manifest.
    Tokenize(TokenizeArgs),
    /// Learn BPE merges over token streams.
    TrainBpe(TrainBpeArgs),
    /// BPE-encode a token manifest.
    Encode(CodecArgs),
    /// Expand a BPE-encoded token manifest back to base tokens.
    Decode(CodecArgs),
    /// Look tokens up in the codebook, optionally adding a prompt's speaker mean.
    Reconstruct(ReconstructArgs),
    /// Replace an utterance by its speaker-free center lookup.
    Deidentify(DeidentifyArgs),
    /// Interpolate between an utterance and its speaker-free lookup.
    Anonymize(AnonymizeArgs),
    /// Train the prompt-conditioned inverse model.
    InvkTrain(InvkTrainArgs),
    /// Run a trained inverse model.
    InvkInfer(InvkInferArgs),
    /// Train the token language model.
    LmTrain(LmTrainArgs),
    /// Draw and rescore candidates from a token language model.
    LmSample(LmSampleArgs),
    /// Translate a token file and render it in a prompt's voice.
    S2st(S2stArgs),
    /// Write the JSON pipeline report.
    Report(ReportArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::GenCorpus(_) => "gen-corpus",
            Self::TrainKmeans(_) => "train-kmeans",
            Self::Tokenize(_) => "tokenize",
            Self::TrainBpe(_) => "train-bpe",
            Self::Encode(_) => "encode",
            Self::Decode(_) => "decode",
            Self::Reconstruct(_) => "reconstruct",
            Self::Deidentify(_) => "deidentify",
            Self::Anonymize(_) => "anonymize",
            Self::InvkTrain(_) => "invk-train",
            Self::InvkInfer(_) => "invk-infer",
            Self::LmTrain(_) => "lm-train",
            Self::LmSample(_) => "lm-sample",
            Self::S2st(_) => "s2st",
            Self::Report(_) => "report",
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MappingArg {
    Identity,
    Permutation,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DtypeArg {
    F32,
    F64,
}

impl From<DtypeArg> for Dtype {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::F32 => Dtype::F32,
            DtypeArg::F64 => Dtype::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Tts,
    S2st,
}

#[derive(Debug, Args, Serialize)]
pub struct GenCorpusArgs {
    #[arg(long, env = "VECTOK_SPEAKERS", default_value_t = 8)]
    pub speakers: usize,
    #[arg(long, env = "VECTOK_UNITS", default_value_t = 40)]
    pub units: usize,
    #[arg(long, env = "VECTOK_DIM", default_value_t = 32)]
    pub dim: usize,
    #[arg(long, env = "VECTOK_FRAMES", default_value_t = 150)]
    pub frames: usize,
    #[arg(long, env = "VECTOK_UTTERANCES", default_value_t = 20)]
    pub utterances: usize,
    #[arg(long, env = "VECTOK_OFFSET_SCALE", default_value_t = 5.0)]
    pub offset_scale: f64,
    #[arg(long, env = "VECTOK_NOISE", default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, env = "VECTOK_DWELL", default_value_t = 3.0)]
    pub dwell: f64,
    #[arg(long, env = "VECTOK_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Also emit this many source/target token pairs (`pairs.tsv`, plus one
    /// source token file per pair under `pair_sources/`).
    #[arg(long, env = "VECTOK_PAIRS", default_value_t = 0)]
    pub pairs: usize,
    #[arg(long, env = "VECTOK_PAIR_UNITS", default_value_t = 40)]
    pub pair_units: u32,
    #[arg(long, env = "VECTOK_PAIR_MIN_LEN", default_value_t = 8)]
    pub pair_min_len: usize,
    #[arg(long, env = "VECTOK_PAIR_MAX_LEN", default_value_t = 24)]
    pub pair_max_len: usize,
    #[arg(long, env = "VECTOK_MAPPING", value_enum, default_value_t = MappingArg::Identity)]
    pub mapping: MappingArg,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainKmeansArgs {
    #[arg(long, env = "VECTOK_MANIFEST")]
    pub manifest: PathBuf,
    #[arg(long, env = "VECTOK_K", default_value_t = 300)]
    pub k: usize,
    #[arg(long, env = "VECTOK_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "VECTOK_MAX_ITERS", default_value_t = 300)]
    pub max_iters: usize,
    #[arg(long, env = "VECTOK_TOL", default_value_t = 1e-6)]
    pub tol: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct TokenizeArgs {
    #[arg(long, env = "VECTOK_MANIFEST")]
    pub manifest: PathBuf,
    #[arg(long, env = "VECTOK_CODEBOOK")]
    pub codebook: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainBpeArgs {
    /// Token manifest written by `tokenize`.
    #[arg(long, env = "VECTOK_TOKENS", required_unless_present = "pairs")]
    pub tokens: Option<PathBuf>,
    /// Pair file written by `gen-corpus --pairs`; both sides are used.
    #[arg(long, env = "VECTOK_PAIRS", conflicts_with = "tokens")]
    pub pairs: Option<PathBuf>,
    /// Base vocabulary of a pair file.
    #[arg(long, env = "VECTOK_BASE_VOCAB", requires = "pairs")]
    pub base_vocab: Option<u32>,
    #[arg(long, env = "VECTOK_VOCAB", default_value_t = 8192)]
    pub vocab: u32,
    #[arg(long, env = "VECTOK_MIN_FREQUENCY", default_value_t = 2)]
    pub min_frequency: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct CodecArgs {
    #[arg(long, env = "VECTOK_TOKENS")]
    pub tokens: PathBuf,
    #[arg(long, env = "VECTOK_BPE")]
    pub bpe: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReconstructArgs {
    #[arg(long, env = "VECTOK_TOKENS")]
    pub tokens: PathBuf,
    #[arg(long, env = "VECTOK_CODEBOOK")]
    pub codebook: PathBuf,
    #[arg(long, env = "VECTOK_PROMPT")]
    pub prompt: Option<PathBuf>,
    /// Use only the first N prompt frames (0 = all).
    #[arg(long, env = "VECTOK_PROMPT_FRAMES", default_value_t = DEFAULT_PROMPT_FRAMES)]
    pub prompt_frames: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct DeidentifyArgs {
    #[arg(long, env = "VECTOK_FEATURES")]
    pub features: PathBuf,
    #[arg(long, env = "VECTOK_CODEBOOK")]
    pub codebook: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AnonymizeArgs {
    #[arg(long, env = "VECTOK_FEATURES")]
    pub features: PathBuf,
    #[arg(long, env = "VECTOK_CODEBOOK")]
    pub codebook: PathBuf,
    #[arg(long, env = "VECTOK_LAMBDA", default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct OptimArgs {
    #[arg(long, env = "VECTOK_STEPS", default_value_t = 200)]
    pub steps: usize,
    #[arg(long, env = "VECTOK_LR", default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, env = "VECTOK_WARMUP", default_value_t = 20)]
    pub warmup: usize,
    #[arg(long, env = "VECTOK_WEIGHT_DECAY", default_value_t = 0.01)]
    pub weight_decay: f64,
    /// Examples per step (0 = whole corpus).
    #[arg(long, env = "VECTOK_BATCH_SIZE", default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, env = "VECTOK_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "VECTOK_DTYPE", value_enum, default_value_t = DtypeArg::F32)]
    pub dtype: DtypeArg,
}

impl OptimArgs {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            learning_rate: self.lr,
            warmup_steps: self.warmup,
            cosine: true,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct InvkTrainArgs {
    #[arg(long, env = "VECTOK_MANIFEST")]
    pub manifest: PathBuf,
    #[arg(long, env = "VECTOK_CODEBOOK")]
    pub codebook: PathBuf,
    #[arg(long, env = "VECTOK_PROMPT_FRAMES", default_value_t = DEFAULT_PROMPT_FRAMES)]
    pub prompt_frames: usize,
    /// Train on the first N utterances only (0 = all).
    #[arg(long, env = "VECTOK_MAX_UTTERANCES", default_value_t = 0)]
    pub max_utterances: usize,
    #[arg(long, env = "VECTOK_ALPHA", default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, env = "VECTOK_BETA", default_value_t = 0.1)]
    pub beta: f64,
    #[arg(long, env = "VECTOK_D_MODEL", default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, env = "VECTOK_HEADS", default_value_t = 2)]
    pub heads: usize,
    #[arg(long, env = "VECTOK_LAYERS", default_value_t = 2)]
    pub layers: usize,
    #[arg(long, env = "VECTOK_FF", default_value_t = 256)]
    pub ff: usize,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct InvkInferArgs {
    #[arg(long, env = "VECTOK_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, env = "VECTOK_TOKENS")]
    pub tokens: PathBuf,
    #[arg(long, env = "VECTOK_PROMPT")]
    pub prompt: PathBuf,
    #[arg(long, env = "VECTOK_PROMPT_FRAMES", default_value_t = DEFAULT_PROMPT_FRAMES)]
    pub prompt_frames: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct LmTrainArgs {
    #[arg(long, env = "VECTOK_MODE", value_enum)]
    pub mode: ModeArg,
    #[arg(long, env = "VECTOK_BPE")]
    pub bpe: PathBuf,
    /// TTS: base-token manifest from `tokenize`.
    #[arg(long, env = "VECTOK_TOKENS")]
    pub tokens: Option<PathBuf>,
    /// TTS: per-utterance content units (`content_units.tsv`).
    #[arg(long, env = "VECTOK_UNITS")]
    pub units: Option<PathBuf>,
    /// S2ST: pair file from `gen-corpus --pairs`.
    #[arg(long, env = "VECTOK_PAIRS")]
    pub pairs: Option<PathBuf>,
    /// TTS: BPE tokens of the prompt utterance kept as context.
    #[arg(long, env = "VECTOK_PROMPT_TOKENS", default_value_t = 16)]
    pub prompt_tokens: usize,
    #[arg(long, env = "VECTOK_MAX_UTTERANCES", default_value_t = 0)]
    pub max_utterances: usize,
    #[arg(long, env = "VECTOK_D_MODEL", default_value_t = 128)]
    pub d_model: usize,
    #[arg(long, env = "VECTOK_HEADS", default_value_t = 4)]
    pub heads: usize,
    #[arg(long, env = "VECTOK_LAYERS", default_value_t = 4)]
    pub layers: usize,
    #[arg(long, env = "VECTOK_FF", default_value_t = 512)]
    pub ff: usize,
    #[arg(long, env = "VECTOK_TIED_HEAD")]
    pub tied_head: bool,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct SamplingArgs {
    #[arg(long, env = "VECTOK_CANDIDATES", default_value_t = DEFAULT_CANDIDATES)]
    pub candidates: usize,
    /// 0 decodes greedily.
    #[arg(long, env = "VECTOK_TEMPERATURE", default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, env = "VECTOK_TOP_K")]
    pub top_k: Option<usize>,
    #[arg(long, env = "VECTOK_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Defaults to 4 × condition length + 64.
    #[arg(long, env = "VECTOK_MAX_LEN")]
    pub max_len: Option<usize>,
}

impl SamplingArgs {
    fn config(&self) -> SampleConfig {
        SampleConfig {
            n_candidates: self.candidates,
            temperature: self.temperature,
            top_k: self.top_k,
            seed: self.seed,
            max_len: self.max_len,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct LmSampleArgs {
    #[arg(long, env = "VECTOK_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, env = "VECTOK_BPE")]
    pub bpe: PathBuf,
    #[arg(long, env = "VECTOK_MODE", value_enum)]
    pub mode: ModeArg,
    /// S2ST: source base-token file.
    #[arg(long, env = "VECTOK_SOURCE")]
    pub source: Option<PathBuf>,
    /// TTS: space-separated condition units.
    #[arg(long, env = "VECTOK_UNITS", allow_hyphen_values = true)]
    pub units: Option<String>,
    /// TTS: base-token file of the prompt utterance.
    #[arg(long, env = "VECTOK_PROMPT")]
    pub prompt: Option<PathBuf>,
    #[arg(long, env = "VECTOK_PROMPT_TOKENS", default_value_t = 16)]
    pub prompt_tokens: usize,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct S2stArgs {
    #[arg(long, env = "VECTOK_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, env = "VECTOK_BPE")]
    pub bpe: PathBuf,
    #[arg(long, env = "VECTOK_CODEBOOK")]
    pub codebook: PathBuf,
    #[arg(long, env = "VECTOK_SOURCE")]
    pub source: PathBuf,
    #[arg(long, env = "VECTOK_PROMPT")]
    pub prompt: PathBuf,
    #[arg(long, env = "VECTOK_PROMPT_FRAMES", default_value_t = DEFAULT_PROMPT_FRAMES)]
    pub prompt_frames: usize,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    #[arg(long, env = "VECTOK_MANIFEST")]
    pub manifest: PathBuf,
    #[arg(long, env = "VECTOK_CODEBOOK")]
    pub codebook: PathBuf,
    #[arg(long, env = "VECTOK_BPE")]
    pub bpe: PathBuf,
    /// Per-utterance content units; enables the purity figure.
    #[arg(long, env = "VECTOK_UNITS")]
    pub units: Option<PathBuf>,
    #[arg(long, env = "VECTOK_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "VECTOK_HOLDOUT", default_value_t = 0.2)]
    pub holdout: f64,
}

/// Tracks every file read and written by one command.
struct Ctx {
    out_dir: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Ctx {
    /// Validates an input path given through `--flag`.
    fn input(&mut self, path: &Path, flag: &str) -> Result<PathBuf> {
        if !path.is_file() {
            return Err(UsageError(format!("--{flag}: no such file: {}", path.display())).into());
        }
        self.inputs.push(path.to_path_buf());
        Ok(path.to_path_buf())
    }

    fn referenced(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    fn out(&mut self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let p = self.out_dir.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        self.outputs.push(p.clone());
        Ok(p)
    }

    fn write_text(&mut self, rel: &str, text: &str) -> Result<()> {
        let p = self.out(rel)?;
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_text(rel, &text)
    }

    fn features(&mut self, rel: impl AsRef<Path>, m: &FeatureMatrix) -> Result<()> {
        let p = self.out(rel)?;
        save_features(&p, m).with_context(|| format!("writing {}", p.display()))?;
        Ok(())
    }

    fn tokens(&mut self, rel: impl AsRef<Path>, t: &TokenSequence) -> Result<()> {
        let p = self.out(rel)?;
        save_tokens(&p, t).with_context(|| format!("writing {}", p.display()))?;
        Ok(())
    }
}

fn digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn load_records(ctx: &mut Ctx, manifest: &Path) -> Result<Vec<UtteranceRecord>> {
    let entries = load_manifest(manifest).with_context(|| format!("reading manifest {}", manifest.display()))?;
    if entries.is_empty() {
        bail!("manifest {} lists no utterances", manifest.display());
    }
    entries
        .into_iter()
        .map(|e| {
            ctx.referenced(&e.path);
            let features = load_features(&e.path).with_context(|| format!("reading {}", e.path.display()))?;
            Ok(UtteranceRecord { utterance_id: e.utterance_id, speaker_id: e.speaker_id, features })
        })
        .collect()
}

fn load_token_manifest(ctx: &mut Ctx, manifest: &Path) -> Result<Vec<(ManifestEntry, TokenSequence)>> {
    let entries = load_manifest(manifest).with_context(|| format!("reading manifest {}", manifest.display()))?;
    if entries.is_empty() {
        bail!("manifest {} lists no utterances", manifest.display());
    }
    entries
        .into_iter()
        .map(|e| {
            ctx.referenced(&e.path);
            let t = load_tokens(&e.path).with_context(|| format!("reading {}", e.path.display()))?;
            Ok((e, t))
        })
        .collect()
}

fn write_token_manifest(ctx: &mut Ctx, dir: &str, items: &[(ManifestEntry, TokenSequence)]) -> Result<()> {
    let mut entries = Vec::with_capacity(items.len());
    for (e, t) in items {
        let file = format!("{}.vtkt", e.utterance_id);
        ctx.tokens(format!("{dir}/{file}"), t)?;
        entries.push(ManifestEntry { utterance_id: e.utterance_id.clone(), speaker_id: e.speaker_id.clone(), path: file.into() });
    }
    let mut buf = Vec::new();
    write_manifest(&entries, &mut buf)?;
    ctx.write_text(&format!("{dir}/manifest.tsv"), &String::from_utf8(buf)?)
}

fn parse_ids(text: &str, what: &str) -> Result<Vec<u32>> {
    text.split_whitespace().map(|t| t.parse::<u32>().map_err(|e| anyhow!("{what}: bad id {t:?}: {e}"))).collect()
}

/// `utterance_id \t u u u …` lines.
fn read_units(ctx: &mut Ctx, path: &Path, flag: &str) -> Result<BTreeMap<String, Vec<u32>>> {
    let path = ctx.input(path, flag)?;
    let file = fs::File::open(&path)?;
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, units) = line.split_once('\t').ok_or_else(|| anyhow!("{}:{}: expected id<TAB>units", path.display(), i + 1))?;
        out.insert(id.to_string(), parse_ids(units, &format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

/// `source ids \t target ids` lines.
fn read_pairs(ctx: &mut Ctx, path: &Path) -> Result<Vec<(Vec<u32>, Vec<u32>)>> {
    let path = ctx.input(path, "pairs")?;
    let text = fs::read_to_string(&path)?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (s, t) = line.split_once('\t').ok_or_else(|| anyhow!("{}:{}: expected source<TAB>target", path.display(), i + 1))?;
        let where_ = format!("{}:{}", path.display(), i + 1);
        pairs.push((parse_ids(s, &where_)?, parse_ids(t, &where_)?));
    }
    if pairs.is_empty() {
        bail!("{} holds no pairs", path.display());
    }
    Ok(pairs)
}

fn load_bpe(ctx: &mut Ctx, path: &Path) -> Result<BpeModel> {
    let path = ctx.input(path, "bpe")?;
    BpeModel::load(&path).with_context(|| format!("reading BPE model {}", path.display()))
}

fn load_cb(ctx: &mut Ctx, path: &Path) -> Result<Codebook> {
    let path = ctx.input(path, "codebook")?;
    load_codebook(&path).with_context(|| format!("reading codebook {}", path.display()))
}

fn load_prompt(ctx: &mut Ctx, path: &Path, frames: usize) -> Result<FeatureMatrix> {
    let path = ctx.input(path, "prompt")?;
    let m = load_features(&path).with_context(|| format!("reading prompt {}", path.display()))?;
    Ok(if frames > 0 && m.frames() > frames { m.slice_frames(0, frames)? } else { m })
}

fn load_token_file(ctx: &mut Ctx, path: &Path, flag: &str) -> Result<TokenSequence> {
    let path = ctx.input(path, flag)?;
    load_tokens(&path).with_context(|| format!("reading tokens {}", path.display()))
}

fn join_ids(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

fn gen_corpus(ctx: &mut Ctx, a: &GenCorpusArgs) -> Result<()> {
    let spec = SyntheticCorpusSpec {
        num_speakers: a.speakers,
        num_content_units: a.units,
        dim: a.dim,
        frames_per_utterance: a.frames,
        utterances_per_speaker: a.utterances,
        speaker_offset_scale: a.offset_scale,
        noise_scale: a.noise,
        mean_dwell_frames: a.dwell,
        seed: a.seed,
    };
    spec.validate().map_err(|e| UsageError(e.to_string()))?;
    let corpus = generate_synthetic_corpus(&spec)?;
    let mut entries = Vec::new();
    let mut units = String::new();
    for (r, u) in corpus.records.iter().zip(&corpus.content_units) {
        let file = format!("features/{}.vtkf", r.utterance_id);
        ctx.features(format!("corpus/{file}"), &r.features)?;
        entries.push(ManifestEntry { utterance_id: r.utterance_id.clone(), speaker_id: r.speaker_id.clone(), path: file.into() });
        units.push_str(&format!("{}\t{}\n", r.utterance_id, join_ids(u)));
    }
    let mut buf = Vec::new();
    write_manifest(&entries, &mut buf)?;
    ctx.write_text("corpus/manifest.tsv", &String::from_utf8(buf)?)?;
    ctx.write_text("corpus/content_units.tsv", &units)?;
    ctx.write_json("corpus/spec.json", &spec)?;
    if a.pairs > 0 {
        let tspec = TranslationCorpusSpec {
            num_pairs: a.pairs,
            num_units: a.pair_units,
            min_len: a.pair_min_len,
            max_len: a.pair_max_len,
            mapping: match a.mapping {
                MappingArg::Identity => UnitMapping::Identity,
                MappingArg::Permutation => UnitMapping::Permutation,
            },
            seed: a.seed,
        };
        let tc = generate_translation_corpus(&tspec).map_err(|e| UsageError(e.to_string()))?;
        let text: String = tc.pairs.iter().map(|(s, t)| format!("{}\t{}\n", join_ids(s), join_ids(t))).collect();
        ctx.write_text("corpus/pairs.tsv", &text)?;
        for (i, (src, _)) in tc.pairs.iter().enumerate() {
            ctx.tokens(format!("corpus/pair_sources/pair{i:05}.vtkt"), &TokenSequence::new(src.clone(), a.pair_units)?)?;
        }
        ctx.write_text("corpus/pair_mapping.txt", &format!("{}\n", join_ids(&tc.mapping)))?;
    }
    Ok(())
}

fn train_kmeans_cmd(ctx: &mut Ctx, a: &TrainKmeansArgs) -> Result<()> {
    let manifest = ctx.input(&a.manifest, "manifest")?;
    let records = load_records(ctx, &manifest)?;
    let normalized: Vec<FeatureMatrix> = records.iter().map(|r| Ok(normalize(&r.features)?.0)).collect::<Result<_>>()?;
    let params = KMeansParams { k: a.k, seed: a.seed, max_iters: a.max_iters, tol: a.tol };
    let run = train_kmeans_traced(&normalized, &params)?;
    let p = ctx.out("codebook.vtkc")?;
    save_codebook(&p, &run.codebook)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        k: usize,
        dim: usize,
        frames: usize,
        iterations: usize,
        inertia_history: &'a [f64],
    }
    ctx.write_json(
        "kmeans.json",
        &Summary {
            k: run.codebook.k(),
            dim: run.codebook.dim(),
            frames: run.assignments.len(),
            iterations: run.inertia_history.len().saturating_sub(1),
            inertia_history: &run.inertia_history,
        },
    )
}

fn tokenize_cmd(ctx: &mut Ctx, a: &TokenizeArgs) -> Result<()> {
    let manifest = ctx.input(&a.manifest, "manifest")?;
    let cb = load_cb(ctx, &a.codebook)?;
    let records = load_records(ctx, &manifest)?;
    let items = records
        .into_iter()
        .map(|r| {
            let t = tokenize(&normalize(&r.features)?.0, &cb).with_context(|| format!("tokenizing {}", r.utterance_id))?;
            Ok((ManifestEntry { utterance_id: r.utterance_id, speaker_id: r.speaker_id, path: PathBuf::new() }, t))
        })
        .collect::<Result<Vec<_>>>()?;
    write_token_manifest(ctx, "tokens", &items)
}

fn train_bpe_cmd(ctx: &mut Ctx, a: &TrainBpeArgs) -> Result<()> {
    let params = BpeTrainParams { target_vocab_size: a.vocab, min_pair_frequency: a.min_frequency };
    let corpus: Vec<TokenSequence> = match (&a.tokens, &a.pairs) {
        (Some(tokens), _) => {
            let manifest = ctx.input(tokens, "tokens")?;
            load_token_manifest(ctx, &manifest)?.into_iter().map(|(_, t)| t).collect()
        }
        (None, Some(pairs)) => {
            let base = a.base_vocab.ok_or_else(|| UsageError("--base-vocab is required with --pairs".into()))?;
            read_pairs(ctx, pairs)?
                .into_iter()
                .flat_map(|(s, t)| [s, t])
                .map(|s| TokenSequence::new(s, base).map_err(anyhow::Error::from))
                .collect::<Result<_>>()?
        }
        (None, None) => return Err(UsageError("one of --tokens or --pairs is required".into()).into()),
    };
    let model = train_bpe(&corpus, &params)?;
    let p = ctx.out("bpe.model")?;
    model.save(&p)?;
    let rate = corpus.iter().find(|_| a.tokens.is_some()).map(|_| bitrate_report(&corpus, &model, 50.0)).transpose()?;
    #[derive(Serialize)]
    struct Summary {
        base_vocab_size: u32,
        vocab_size: u32,
        merges: usize,
        bitrate_at_50hz: Option<crate::bpe::BitrateStats>,
    }
    ctx.write_json(
        "bpe.json",
        &Summary { base_vocab_size: model.base_vocab_size(), vocab_size: model.vocab_size(), merges: model.merges().len(), bitrate_at_50hz: rate },
    )
}

fn codec_cmd(ctx: &mut Ctx, a: &CodecArgs, encode: bool) -> Result<()> {
    let manifest = ctx.input(&a.tokens, "tokens")?;
    let bpe = load_bpe(ctx, &a.bpe)?;
    let items = load_token_manifest(ctx, &manifest)?
        .into_iter()
        .map(|(e, t)| {
            let out = if encode { bpe.encode(&t) } else { bpe.decode(&t) };
            Ok((e.clone(), out.with_context(|| format!("utterance {}", e.utterance_id))?))
        })
        .collect::<Result<Vec<_>>>()?;
    write_token_manifest(ctx, if encode { "encoded" } else { "decoded" }, &items)
}

fn reconstruct_cmd(ctx: &mut Ctx, a: &ReconstructArgs) -> Result<()> {
    let tokens = load_token_file(ctx, &a.tokens, "tokens")?;
    let cb = load_cb(ctx, &a.codebook)?;
    let out = match &a.prompt {
        Some(p) => {
            let prompt = load_prompt(ctx, p, a.prompt_frames)?;
            reconstruct_with_prompt(&tokens, &cb, &prompt)?
        }
        None => lookup_reconstruct(&tokens, &cb)?,
    };
    ctx.features("reconstructed.vtkf", &out)
}

fn deidentify_cmd(ctx: &mut Ctx, a: &DeidentifyArgs) -> Result<()> {
    let path = ctx.input(&a.features, "features")?;
    let features = load_features(&path)?;
    let cb = load_cb(ctx, &a.codebook)?;
    let sv = SpeakerVectors::extract(&features, &cb)?;
    ctx.tokens("deidentified.vtkt", &sv.tokens)?;
    ctx.features("deidentified.vtkf", &sv.v_agn)
}

fn anonymize_cmd(ctx: &mut Ctx, a: &AnonymizeArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.lambda) {
        return Err(UsageError(format!("--lambda must lie in [0, 1], got {}", a.lambda)).into());
    }
    let path = ctx.input(&a.features, "features")?;
    let features = load_features(&path)?;
    let cb = load_cb(ctx, &a.codebook)?;
    let sv = SpeakerVectors::extract(&features, &cb)?;
    ctx.features("anonymized.vtkf", &sv.anonymized(a.lambda)?)
}

/// For each utterance, the next utterance of the same speaker (cyclically);
/// a speaker with one utterance prompts itself.
fn prompt_partner(records: &[(String, String)]) -> Vec<usize> {
    let mut by_speaker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, (_, s)) in records.iter().enumerate() {
        by_speaker.entry(s).or_default().push(i);
    }
    let mut partner = vec![0; records.len()];
    for idx in by_speaker.values() {
        for (j, &i) in idx.iter().enumerate() {
            partner[i] = idx[(j + 1) % idx.len()];
        }
    }
    partner
}

fn invk_train_cmd(ctx: &mut Ctx, a: &InvkTrainArgs) -> Result<()> {
    let manifest = ctx.input(&a.manifest, "manifest")?;
    let cb = load_cb(ctx, &a.codebook)?;
    let mut records = load_records(ctx, &manifest)?;
    if a.max_utterances > 0 {
        records.truncate(a.max_utterances);
    }
    let ids: Vec<(String, String)> = records.iter().map(|r| (r.utterance_id.clone(), r.speaker_id.clone())).collect();
    let partner = prompt_partner(&ids);
    let corpus = records
        .iter()
        .zip(&partner)
        .map(|(r, &p)| {
            let tokens = tokenize(&normalize(&r.features)?.0, &cb)?;
            let pf = &records[p].features;
            let prompt = if a.prompt_frames > 0 && pf.frames() > a.prompt_frames { pf.slice_frames(0, a.prompt_frames)? } else { pf.clone() };
            Ok(InvKExample { tokens, target: r.features.clone(), prompt })
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = InvKConfig { d_model: a.d_model, heads: a.heads, layers: a.layers, ff: a.ff, seed: a.optim.seed };
    let mut model = InvKModel::new(&cb, cfg).map_err(|e| UsageError(e.to_string()))?;
    let policy = AugmentationPolicy { mask_prob: a.alpha, replace_prob: a.beta };
    policy.validate().map_err(|e| UsageError(e.to_string()))?;
    let curve = train_invk(&mut model, &corpus, policy, &a.optim.train_config())?;
    let p = ctx.out("invk.vtkm")?;
    model.save(fs::File::create(&p)?, a.optim.dtype.into())?;
    #[derive(Serialize)]
    struct Summary<'a> {
        num_parameters: usize,
        num_examples: usize,
        loss_curve: &'a [f64],
    }
    ctx.write_json("invk-train.json", &Summary { num_parameters: model.num_parameters(), num_examples: corpus.len(), loss_curve: &curve })
}

fn invk_infer_cmd(ctx: &mut Ctx, a: &InvkInferArgs) -> Result<()> {
    let path = ctx.input(&a.checkpoint, "checkpoint")?;
    let model = InvKModel::load(fs::File::open(&path)?).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let tokens = load_token_file(ctx, &a.tokens, "tokens")?;
    let prompt = load_prompt(ctx, &a.prompt, a.prompt_frames)?;
    ctx.features("invk-output.vtkf", &model.forward(&tokens, &prompt)?)
}

/// Collapses runs, turning frame-level labels into a unit sequence.
fn collapse_runs(units: &[u32]) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::new();
    for &u in units {
        if out.last() != Some(&u) {
            out.push(u);
        }
    }
    out
}

fn lm_train_cmd(ctx: &mut Ctx, a: &LmTrainArgs) -> Result<()> {
    let bpe = load_bpe(ctx, &a.bpe)?;
    let (layouts, cond_vocab) = match a.mode {
        ModeArg::S2st => {
            let pairs = a.pairs.as_ref().ok_or_else(|| UsageError("--pairs is required with --mode s2st".into()))?;
            let mut pairs = read_pairs(ctx, pairs)?;
            if a.max_utterances > 0 {
                pairs.truncate(a.max_utterances);
            }
            let layouts = pairs
                .iter()
                .map(|(s, t)| Ok(ConditioningLayout::s2st(bpe.encode_ids(s)?, bpe.encode_ids(t)?)))
                .collect::<Result<Vec<_>>>()?;
            (layouts, 0)
        }
        ModeArg::Tts => {
            let tokens = a.tokens.as_ref().ok_or_else(|| UsageError("--tokens is required with --mode tts".into()))?;
            let units = a.units.as_ref().ok_or_else(|| UsageError("--units is required with --mode tts".into()))?;
            let manifest = ctx.input(tokens, "tokens")?;
            let units = read_units(ctx, units, "units")?;
            let mut items = load_token_manifest(ctx, &manifest)?;
            if a.max_utterances > 0 {
                items.truncate(a.max_utterances);
            }
            let ids: Vec<(String, String)> = items.iter().map(|(e, _)| (e.utterance_id.clone(), e.speaker_id.clone())).collect();
            let partner = prompt_partner(&ids);
            let encoded = items.iter().map(|(_, t)| Ok(bpe.encode_ids(t.tokens())?)).collect::<Result<Vec<_>>>()?;
            let mut cond_vocab = 0;
            let layouts = items
                .iter()
                .zip(&partner)
                .enumerate()
                .map(|(i, ((e, _), &p))| {
                    let u = units.get(&e.utterance_id).ok_or_else(|| anyhow!("no content units for {}", e.utterance_id))?;
                    let u = collapse_runs(u);
                    cond_vocab = cond_vocab.max(u.iter().max().map_or(0, |m| m + 1));
                    let prompt = encoded[p][..encoded[p].len().min(a.prompt_tokens)].to_vec();
                    Ok(ConditioningLayout::tts(u, prompt, encoded[i].clone()))
                })
                .collect::<Result<Vec<_>>>()?;
            (layouts, cond_vocab)
        }
    };
    let cfg = SeqLmConfig {
        token_vocab: bpe.vocab_size(),
        cond_vocab,
        d_model: a.d_model,
        heads: a.heads,
        layers: a.layers,
        ff: a.ff,
        tied_head: a.tied_head,
        seed: a.optim.seed,
    };
    let mut model = SeqLm::new(cfg).map_err(|e| UsageError(e.to_string()))?;
    let curve = train_lm(&mut model, &layouts, &a.optim.train_config())?;
    let p = ctx.out("lm.vtkm")?;
    model.save(fs::File::create(&p)?, a.optim.dtype.into())?;
    #[derive(Serialize)]
    struct Summary<'a> {
        mode: ModeArg,
        num_parameters: usize,
        num_sequences: usize,
        nll_curve: &'a [f64],
    }
    ctx.write_json("lm-train.json", &Summary { mode: a.mode, num_parameters: model.num_parameters(), num_sequences: layouts.len(), nll_curve: &curve })
}

fn load_lm(ctx: &mut Ctx, path: &Path) -> Result<SeqLm> {
    let path = ctx.input(path, "checkpoint")?;
    SeqLm::load(fs::File::open(&path)?).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn lm_sample_cmd(ctx: &mut Ctx, a: &LmSampleArgs) -> Result<()> {
    let model = load_lm(ctx, &a.checkpoint)?;
    let bpe = load_bpe(ctx, &a.bpe)?;
    if model.config().token_vocab != bpe.vocab_size() {
        bail!(SeqLmError::VocabMismatch { model: model.config().token_vocab, bpe: bpe.vocab_size() });
    }
    let cond = match a.mode {
        ModeArg::S2st => {
            let src = a.source.as_ref().ok_or_else(|| UsageError("--source is required with --mode s2st".into()))?;
            let src = load_token_file(ctx, src, "source")?;
            Conditioning::S2st { source: bpe.encode_ids(src.tokens())? }
        }
        ModeArg::Tts => {
            let units = a.units.as_ref().ok_or_else(|| UsageError("--units is required with --mode tts".into()))?;
            let prompt = a.prompt.as_ref().ok_or_else(|| UsageError("--prompt is required with --mode tts".into()))?;
            let prompt = bpe.encode_ids(load_token_file(ctx, prompt, "prompt")?.tokens())?;
            Conditioning::Tts { units: parse_ids(units, "--units")?, prompt: prompt[..prompt.len().min(a.prompt_tokens)].to_vec() }
        }
    };
    let sc = a.sampling.config();
    let candidates = sample_candidates(&model, &cond, &sc)?;
    let scorer = LikelihoodScorer { model: &model };
    let (best, chosen) = rescore_select(&candidates, &cond, &scorer)?;
    let mut table = String::from("index\tscore\ttruncated\ttokens\n");
    for (i, c) in candidates.iter().enumerate() {
        table.push_str(&format!("{i}\t{:.9}\t{}\t{}\n", scorer.score(&cond, c), c.truncated, join_ids(&c.tokens)));
    }
    ctx.write_text("candidates.tsv", &table)?;
    let base = bpe.decode_ids(&chosen.tokens)?;
    ctx.tokens("selected.vtkt", &TokenSequence::new(base, bpe.base_vocab_size())?)?;
    ctx.write_text("selected.txt", &format!("{best}\t{}\n", join_ids(&chosen.tokens)))
}

fn s2st_cmd(ctx: &mut Ctx, a: &S2stArgs) -> Result<()> {
    let model = load_lm(ctx, &a.checkpoint)?;
    let bpe = load_bpe(ctx, &a.bpe)?;
    let cb = load_cb(ctx, &a.codebook)?;
    let source = load_token_file(ctx, &a.source, "source")?;
    let prompt = load_prompt(ctx, &a.prompt, a.prompt_frames)?;
    let out = s2st_pipeline(&model, &source, &bpe, &cb, &prompt, &a.sampling.config())?;
    ctx.tokens("s2st.vtkt", &out.tokens)?;
    ctx.features("s2st.vtkf", &out.features)
}

fn report_cmd(ctx: &mut Ctx, a: &ReportArgs) -> Result<()> {
    let manifest = ctx.input(&a.manifest, "manifest")?;
    let cb = load_cb(ctx, &a.codebook)?;
    let bpe = load_bpe(ctx, &a.bpe)?;
    let records = load_records(ctx, &manifest)?;
    let units = match &a.units {
        Some(p) => {
            let map = read_units(ctx, p, "units")?;
            Some(
                records
                    .iter()
                    .map(|r| map.get(&r.utterance_id).cloned().ok_or_else(|| anyhow!("no content units for {}", r.utterance_id)))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        None => None,
    };
    let cfg = ReportConfig { probe: ProbeConfig { holdout_fraction: a.holdout, seed: a.seed }, ..ReportConfig::default() };
    let report = pipeline_report(&records, &cb, &bpe, units.as_deref(), &cfg)?;
    let doc = serde_json::to_value(&report)?;
    validate_report(&doc)?;
    ctx.write_json("report.json", &doc)
}

fn dispatch(ctx: &mut Ctx, cmd: &Command) -> Result<()> {
    match cmd {
        Command::GenCorpus(a) => gen_corpus(ctx, a),
        Command::TrainKmeans(a) => train_kmeans_cmd(ctx, a),
        Command::Tokenize(a) => tokenize_cmd(ctx, a),
        Command::TrainBpe(a) => train_bpe_cmd(ctx, a),
        Command::Encode(a) => codec_cmd(ctx, a, true),
        Command::Decode(a) => codec_cmd(ctx, a, false),
        Command::Reconstruct(a) => reconstruct_cmd(ctx, a),
        Command::Deidentify(a) => deidentify_cmd(ctx, a),
        Command::Anonymize(a) => anonymize_cmd(ctx, a),
        Command::InvkTrain(a) => invk_train_cmd(ctx, a),
        Command::InvkInfer(a) => invk_infer_cmd(ctx, a),
        Command::LmTrain(a) => lm_train_cmd(ctx, a),
        Command::LmSample(a) => lm_sample_cmd(ctx, a),
        Command::S2st(a) => s2st_cmd(ctx, a),
        Command::Report(a) => report_cmd(ctx, a),
    }
}

#[derive(Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    threads: Option<usize>,
    config: &'a Cli,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    unix_time: u64,
}

fn digests(paths: &[PathBuf]) -> Result<Vec<FileDigest>> {
    let mut seen = std::collections::BTreeSet::new();
    paths
        .iter()
        .filter(|p| seen.insert((*p).clone()))
        .map(|p| Ok(FileDigest { path: p.display().to_string(), sha256: digest(p)? }))
        .collect()
}

/// Runs a parsed command; returns the files it wrote.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let mut ctx = Ctx { out_dir: cli.out_dir.clone(), inputs: Vec::new(), outputs: Vec::new() };
    let name = cli.command.name();
    let mut work = || dispatch(&mut ctx, &cli.command);
    match cli.threads {
        Some(0) => return Err(UsageError("--threads must be at least 1".into()).into()),
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build()?.install(work)?,
        None => work()?,
    }
    ctx.write_json(&format!("config.{name}.json"), cli)?;
    let manifest = RunManifest {
        tool: "vectok",
        version: env!("CARGO_PKG_VERSION"),
        command: name,
        threads: cli.threads,
        config: cli,
        inputs: digests(&ctx.inputs)?,
        outputs: digests(&ctx.outputs)?,
        unix_time: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    let path = ctx.out(format!("run-manifest.{name}.json"))?;
    let mut f = fs::File::create(&path)?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    writeln!(f)?;
    Ok(ctx.outputs)
}

/// Exit code for a failed run.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        let diverged = matches!(cause.downcast_ref::<NeuralError>(), Some(NeuralError::Divergence { .. }))
            || matches!(cause.downcast_ref::<SeqLmError>(), Some(SeqLmError::Neural(NeuralError::Divergence { .. })));
        if diverged {
            return 3;
        }
    }
    2
}

/// Parses `args`, runs the command and reports errors on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
