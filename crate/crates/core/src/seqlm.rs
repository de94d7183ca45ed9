//! Decoder-only language model over (BPE) semantic tokens.
//!
//! One architecture serves both conditioning modes:
//!
//! ```text
//! TTS   BOS  u₁ … uₘ  SEP  p₁ … pₖ  SEP  z₁ … zₜ  EOS
//! S2ST  BOS  s₁ … sₙ  SEP  z₁ … zₜ  EOS
//! ```
//!
//! Only `z₁ … zₜ EOS` are scored. Model ids are laid out as
//! `[tokens | condition units | BOS EOS PAD SEP]`.
//!
//! Inference uses a per-layer key/value cache, so drawing many candidates
//! costs one step per emitted token. Candidates get independent RNG streams
//! derived from `(seed, index)`, so a parallel draw matches a serial one.

use std::io::{Read, Write};

use rand::seq::index::sample;
use rayon::prelude::*;
use thiserror::Error;

use crate::bpe::{BpeError, BpeModel};
use crate::featureio::FeatureMatrix;
use crate::neural::{
    causal_mask, log_sum_exp, read_checkpoint, rms_norm_row, sinusoidal, sinusoidal_row, write_checkpoint, AdamW,
    BlockShape, Dtype, Graph, LayerCache, Linear, NeuralError, ParamId, ParamStore, Tensor, TrainConfig,
    TransformerBlock, Var,
};
use crate::quantizer::{Codebook, TokenSequence};
use crate::reconstructor::{reconstruct_with_prompt, ReconstructError};
use crate::rng::SplitMix64;

pub const LM_CHECKPOINT_KIND: u32 = 2;
pub const DEFAULT_CANDIDATES: usize = 256;
const NUM_SPECIALS: u32 = 4;

#[derive(Debug, Error)]
pub enum SeqLmError {
    #[error("target segment is empty")]
    EmptyTarget,
    #[error("no candidates to select from")]
    EmptyCandidates,
    #[error("{segment} id {token} out of range (limit {limit})")]
    TokenOutOfRange { segment: &'static str, token: u32, limit: u32 },
    #[error("model vocabulary {model} does not match BPE vocabulary {bpe}")]
    VocabMismatch { model: u32, bpe: u32 },
    #[error("n_candidates must be at least 1")]
    NoCandidatesRequested,
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Bpe(#[from] BpeError),
    #[error(transparent)]
    Reconstruct(#[from] ReconstructError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqLmConfig {
    /// Size of the (BPE) token vocabulary being modelled.
    pub token_vocab: u32,
    /// Number of condition-unit ids (TTS only; 0 for pure S2ST).
    pub cond_vocab: u32,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff: usize,
    pub tied_head: bool,
    pub seed: u64,
}

impl SeqLmConfig {
    pub fn new(token_vocab: u32, cond_vocab: u32) -> Self {
        Self { token_vocab, cond_vocab, d_model: 128, heads: 4, layers: 4, ff: 512, tied_head: false, seed: 0 }
    }

    pub fn vocab_size(&self) -> u32 {
        self.token_vocab + self.cond_vocab + NUM_SPECIALS
    }

    pub fn bos(&self) -> u32 {
        self.token_vocab + self.cond_vocab
    }

    pub fn eos(&self) -> u32 {
        self.bos() + 1
    }

    pub fn pad(&self) -> u32 {
        self.bos() + 2
    }

    pub fn sep(&self) -> u32 {
        self.bos() + 3
    }

    /// Model id of condition unit `u`.
    pub fn cond_id(&self, u: u32) -> u32 {
        self.token_vocab + u
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Conditioning {
    /// Condition units `u`, then the prompt's BPE tokens.
    Tts { units: Vec<u32>, prompt: Vec<u32> },
    /// Source-language tokens.
    S2st { source: Vec<u32> },
}

impl Conditioning {
    /// Number of condition ids, not counting BOS/SEP.
    pub fn len(&self) -> usize {
        match self {
            Self::Tts { units, prompt } => units.len() + prompt.len(),
            Self::S2st { source } => source.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditioningLayout {
    pub condition: Conditioning,
    pub target: Vec<u32>,
}

impl ConditioningLayout {
    pub fn tts(units: Vec<u32>, prompt: Vec<u32>, target: Vec<u32>) -> Self {
        Self { condition: Conditioning::Tts { units, prompt }, target }
    }

    pub fn s2st(source: Vec<u32>, target: Vec<u32>) -> Self {
        Self { condition: Conditioning::S2st { source }, target }
    }
}

fn check_ids(ids: &[u32], limit: u32, segment: &'static str) -> Result<(), SeqLmError> {
    match ids.iter().find(|&&t| t >= limit) {
        Some(&token) => Err(SeqLmError::TokenOutOfRange { segment, token, limit }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone)]
pub struct SeqLm {
    cfg: SeqLmConfig,
    store: ParamStore,
    embedding: ParamId,
    blocks: Vec<TransformerBlock>,
    final_norm: ParamId,
    head: Option<Linear>,
}

/// Running key/value state of one decoding stream.
#[derive(Debug, Clone)]
pub struct DecodeState {
    caches: Vec<LayerCache>,
    pos: usize,
    logits: Vec<f64>,
}

impl DecodeState {
    /// Next-token logits over the whole model vocabulary.
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn position(&self) -> usize {
        self.pos
    }
}

impl SeqLm {
    pub fn new(cfg: SeqLmConfig) -> Result<Self, SeqLmError> {
        if cfg.token_vocab == 0 {
            return Err(NeuralError::EmptyInput("token vocabulary").into());
        }
        if cfg.d_model == 0 || cfg.heads == 0 || !cfg.d_model.is_multiple_of(cfg.heads) {
            return Err(NeuralError::ShapeMismatch(format!("d_model {} with {} heads", cfg.d_model, cfg.heads)).into());
        }
        let mut rng = SplitMix64::new(cfg.seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let v = cfg.vocab_size() as usize;
        let embedding = store.add_normal("embedding", v, d, 1.0, &mut rng);
        let shape = BlockShape { d_model: d, heads: cfg.heads, ff: cfg.ff };
        let blocks = (0..cfg.layers)
            .map(|i| TransformerBlock::new(&mut store, &mut rng, &format!("block{i}"), shape, cfg.layers))
            .collect();
        let final_norm = store.add_const("final_norm", 1, d, 1.0);
        let head = (!cfg.tied_head).then(|| Linear::new(&mut store, &mut rng, "head", d, v, 1.0 / (d as f64).sqrt(), true));
        Ok(Self { cfg, store, embedding, blocks, final_norm, head })
    }

    pub fn config(&self) -> &SeqLmConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// `BOS condition… SEP` as model ids.
    pub fn prefix_ids(&self, cond: &Conditioning) -> Result<Vec<u32>, SeqLmError> {
        let c = &self.cfg;
        let mut ids = vec![c.bos()];
        match cond {
            Conditioning::Tts { units, prompt } => {
                check_ids(units, c.cond_vocab, "condition unit")?;
                check_ids(prompt, c.token_vocab, "prompt token")?;
                ids.extend(units.iter().map(|&u| c.cond_id(u)));
                ids.push(c.sep());
                ids.extend_from_slice(prompt);
            }
            Conditioning::S2st { source } => {
                check_ids(source, c.token_vocab, "source token")?;
                ids.extend_from_slice(source);
            }
        }
        ids.push(c.sep());
        Ok(ids)
    }

    /// Input ids and per-position labels; only target tokens and the final
    /// EOS carry a label.
    pub fn training_pair(&self, layout: &ConditioningLayout) -> Result<(Vec<u32>, Vec<Option<usize>>), SeqLmError> {
        if layout.target.is_empty() {
            return Err(SeqLmError::EmptyTarget);
        }
        check_ids(&layout.target, self.cfg.token_vocab, "target token")?;
        let mut full = self.prefix_ids(&layout.condition)?;
        let first_label = full.len() - 1;
        full.extend_from_slice(&layout.target);
        full.push(self.cfg.eos());
        let labels = (0..full.len() - 1).map(|i| (i >= first_label).then(|| full[i + 1] as usize)).collect();
        full.pop();
        Ok((full, labels))
    }

    fn forward_graph(&self, g: &mut Graph, ids: &[u32]) -> Var {
        let s = &self.store;
        let table = g.param(s, self.embedding);
        let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let x = g.gather(table, &idx);
        let pe = g.input(sinusoidal(ids.len(), self.cfg.d_model));
        let mut x = g.add(x, pe);
        let mask = causal_mask(ids.len());
        for block in &self.blocks {
            x = block.forward(g, s, x, Some(&mask));
        }
        let gain = g.param(s, self.final_norm);
        let x = g.rms_norm(x, gain);
        match &self.head {
            Some(head) => head.forward(g, s, x),
            None => {
                let logits = g.matmul_bt(x, table);
                g.scale(logits, 1.0 / (self.cfg.d_model as f64).sqrt())
            }
        }
    }

    /// Full-sequence logits, `len × vocab_size`.
    pub fn logits(&self, ids: &[u32]) -> Result<Tensor, SeqLmError> {
        if ids.is_empty() {
            return Err(NeuralError::EmptyInput("ids").into());
        }
        check_ids(ids, self.cfg.vocab_size(), "model id")?;
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, ids);
        Ok(g.value(out).clone())
    }

    /// Mean negative log-likelihood per target token (EOS included).
    pub fn lm_loss(&self, layout: &ConditioningLayout) -> Result<f64, SeqLmError> {
        let (ids, labels) = self.training_pair(layout)?;
        let mut g = Graph::new();
        let logits = self.forward_graph(&mut g, &ids);
        let loss = g.cross_entropy(logits, &labels);
        Ok(g.value(loss).data[0])
    }

    /// Loss, label count and detached parameter gradients of one layout.
    fn loss_and_grads(&self, layout: &ConditioningLayout) -> Result<(f64, usize, Vec<Vec<f64>>), SeqLmError> {
        let (ids, labels) = self.training_pair(layout)?;
        let count = labels.iter().flatten().count();
        let mut g = Graph::new();
        let logits = self.forward_graph(&mut g, &ids);
        let loss = g.cross_entropy(logits, &labels);
        let value = g.value(loss).data[0];
        if !value.is_finite() {
            return Ok((value, count, Vec::new()));
        }
        g.backward(loss)?;
        Ok((value, count, g.param_grads(&self.store)))
    }

    /// Zeroes the stored gradients and fills them for one layout.
    pub fn compute_gradients(&mut self, layout: &ConditioningLayout) -> Result<f64, SeqLmError> {
        let (loss, _, grads) = self.loss_and_grads(layout)?;
        self.store.zero_grads();
        self.store.add_grads(&grads, 1.0);
        Ok(loss)
    }

    fn head_logits(&self, x: &[f64]) -> Vec<f64> {
        let h = rms_norm_row(x, &self.store.get(self.final_norm).value);
        match &self.head {
            Some(head) => head.apply(&self.store, &h),
            None => {
                let table = self.store.get(self.embedding);
                let scale = 1.0 / (self.cfg.d_model as f64).sqrt();
                table.value.chunks_exact(table.cols).map(|e| e.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() * scale).collect()
            }
        }
    }

    /// Feeds `ids` through the cache and returns the resulting state.
    pub fn start(&self, ids: &[u32]) -> Result<DecodeState, SeqLmError> {
        if ids.is_empty() {
            return Err(NeuralError::EmptyInput("ids").into());
        }
        check_ids(ids, self.cfg.vocab_size(), "model id")?;
        let mut state = DecodeState { caches: vec![LayerCache::default(); self.blocks.len()], pos: 0, logits: Vec::new() };
        for &t in ids {
            self.advance(&mut state, t);
        }
        Ok(state)
    }

    /// Appends one id (assumed in range) and refreshes the next-token logits.
    pub fn advance(&self, state: &mut DecodeState, token: u32) {
        let table = self.store.get(self.embedding);
        let d = self.cfg.d_model;
        let t = token as usize;
        let pe = sinusoidal_row(state.pos, d);
        let mut x: Vec<f64> = table.value[t * d..(t + 1) * d].iter().zip(&pe).map(|(a, b)| a + b).collect();
        for (block, cache) in self.blocks.iter().zip(&mut state.caches) {
            x = block.step(&self.store, &x, cache);
        }
        state.logits = self.head_logits(&x);
        state.pos += 1;
    }

    fn hyper(&self) -> Vec<u32> {
        let c = &self.cfg;
        vec![c.token_vocab, c.cond_vocab, c.d_model as u32, c.heads as u32, c.layers as u32, c.ff as u32, c.tied_head as u32]
    }

    pub fn save<W: Write>(&self, w: W, dtype: Dtype) -> Result<(), SeqLmError> {
        write_checkpoint(w, LM_CHECKPOINT_KIND, &self.hyper(), &self.store, dtype).map_err(NeuralError::from)?;
        Ok(())
    }

    pub fn load<R: Read>(r: R) -> Result<Self, SeqLmError> {
        let ckpt = read_checkpoint(r).map_err(NeuralError::from)?;
        let mismatch = |m: String| SeqLmError::Neural(NeuralError::CheckpointMismatch(m));
        if ckpt.kind != LM_CHECKPOINT_KIND {
            return Err(mismatch(format!("checkpoint kind {} is not a token LM", ckpt.kind)));
        }
        let [token_vocab, cond_vocab, d, heads, layers, ff, tied] = ckpt.hyper[..] else {
            return Err(mismatch(format!("expected 7 hyperparameters, found {}", ckpt.hyper.len())));
        };
        let cfg = SeqLmConfig {
            token_vocab,
            cond_vocab,
            d_model: d as usize,
            heads: heads as usize,
            layers: layers as usize,
            ff: ff as usize,
            tied_head: tied != 0,
            seed: 0,
        };
        let mut model = Self::new(cfg)?;
        ckpt.bind(&mut model.store)?;
        Ok(model)
    }
}

/// AdamW over token-weighted mean NLL. Per-example gradients are computed in
/// parallel and summed in corpus order, so the trajectory does not depend on
/// the thread count. Returns the per-step mean NLL.
pub fn train_lm(model: &mut SeqLm, corpus: &[ConditioningLayout], cfg: &TrainConfig) -> Result<Vec<f64>, SeqLmError> {
    if corpus.is_empty() {
        return Err(NeuralError::EmptyCorpus.into());
    }
    for layout in corpus {
        model.training_pair(layout)?;
    }
    let mut opt = AdamW::new(&model.store);
    let mut curve = Vec::with_capacity(cfg.steps);
    let n = corpus.len();
    for step in 0..cfg.steps {
        let batch: Vec<usize> = if cfg.batch_size == 0 || cfg.batch_size >= n {
            (0..n).collect()
        } else {
            let mut rng = SplitMix64::derive(cfg.seed, step as u64);
            let mut idx = sample(&mut rng, n, cfg.batch_size).into_vec();
            idx.sort_unstable();
            idx
        };
        let model_ref = &*model;
        let results: Vec<_> =
            batch.par_iter().map(|&i| model_ref.loss_and_grads(&corpus[i])).collect::<Result<_, _>>()?;
        let total: usize = results.iter().map(|r| r.1).sum();
        let mut nll = 0.0;
        model.store.zero_grads();
        for (loss, count, grads) in &results {
            if !loss.is_finite() {
                return Err(NeuralError::Divergence { step }.into());
            }
            let w = *count as f64 / total as f64;
            nll += loss * w;
            model.store.add_grads(grads, w);
        }
        if !model.store.grad_norm().is_finite() {
            return Err(NeuralError::Divergence { step }.into());
        }
        opt.step(&mut model.store, cfg, cfg.lr_at(step));
        curve.push(nll);
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleConfig {
    pub n_candidates: usize,
    /// 0 means greedy decoding.
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub seed: u64,
    /// Maximum emitted tokens; `None` means `4 × condition length + 64`.
    pub max_len: Option<usize>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { n_candidates: DEFAULT_CANDIDATES, temperature: 1.0, top_k: None, seed: 0, max_len: None }
    }
}

impl SampleConfig {
    pub fn max_len_for(&self, cond: &Conditioning) -> usize {
        self.max_len.unwrap_or(4 * cond.len() + 64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// Emitted token ids, EOS excluded.
    pub tokens: Vec<u32>,
    /// True when `max_len` was reached before EOS.
    pub truncated: bool,
}

/// Picks the next id among tokens and EOS only.
fn choose(logits: &[f64], token_vocab: u32, eos: u32, sc: &SampleConfig, rng: &mut SplitMix64) -> u32 {
    let mut allowed: Vec<(u32, f64)> = (0..token_vocab).chain([eos]).map(|i| (i, logits[i as usize])).collect();
    if sc.temperature <= 0.0 {
        let mut best = allowed[0];
        for &c in &allowed[1..] {
            if c.1 > best.1 {
                best = c;
            }
        }
        return best.0;
    }
    if let Some(k) = sc.top_k.filter(|&k| k > 0 && k < allowed.len()) {
        allowed.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        allowed.truncate(k);
    }
    let max = allowed.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = allowed.iter().map(|c| ((c.1 - max) / sc.temperature).exp()).collect();
    let mut u = rng.next_f64() * weights.iter().sum::<f64>();
    for (c, w) in allowed.iter().zip(&weights) {
        if u < *w {
            return c.0;
        }
        u -= w;
    }
    allowed.last().expect("at least EOS is allowed").0
}

/// Independent ancestral samples; candidate `i` uses stream `(seed, i)`.
pub fn sample_candidates(model: &SeqLm, cond: &Conditioning, sc: &SampleConfig) -> Result<Vec<Candidate>, SeqLmError> {
    if sc.n_candidates == 0 {
        return Err(SeqLmError::NoCandidatesRequested);
    }
    let prefix = model.prefix_ids(cond)?;
    let start = model.start(&prefix)?;
    let max_len = sc.max_len_for(cond);
    let (vocab, eos) = (model.cfg.token_vocab, model.cfg.eos());
    Ok((0..sc.n_candidates)
        .into_par_iter()
        .map(|i| {
            let mut rng = SplitMix64::derive(sc.seed, i as u64);
            let mut state = start.clone();
            let mut tokens = Vec::new();
            loop {
                if tokens.len() == max_len {
                    return Candidate { tokens, truncated: true };
                }
                let next = choose(&state.logits, vocab, eos, sc, &mut rng);
                if next == eos {
                    return Candidate { tokens, truncated: false };
                }
                tokens.push(next);
                model.advance(&mut state, next);
            }
        })
        .collect())
}

/// Scores a candidate; higher is better. Must be pure.
pub trait RescoreHook {
    fn score(&self, cond: &Conditioning, candidate: &Candidate) -> f64;
}

impl<F: Fn(&Conditioning, &Candidate) -> f64> RescoreHook for F {
    fn score(&self, cond: &Conditioning, candidate: &Candidate) -> f64 {
        self(cond, candidate)
    }
}

/// Mean log-probability per emitted token (plus EOS when the candidate
/// terminated) under a model.
#[derive(Debug, Clone, Copy)]
pub struct LikelihoodScorer<'a> {
    pub model: &'a SeqLm,
}

impl RescoreHook for LikelihoodScorer<'_> {
    fn score(&self, cond: &Conditioning, candidate: &Candidate) -> f64 {
        let m = self.model;
        let Ok(mut ids) = m.prefix_ids(cond) else { return f64::NEG_INFINITY };
        let first = ids.len() - 1;
        ids.extend_from_slice(&candidate.tokens);
        let mut next: Vec<u32> = candidate.tokens.clone();
        if !candidate.truncated {
            next.push(m.cfg.eos());
        } else if next.is_empty() {
            return f64::NEG_INFINITY;
        } else {
            ids.pop();
        }
        let Ok(logits) = m.logits(&ids) else { return f64::NEG_INFINITY };
        let total: f64 = next.iter().enumerate().map(|(j, &t)| {
            let row = logits.row(first + j);
            row[t as usize] - log_sum_exp(row)
        }).sum();
        total / next.len() as f64
    }
}

/// Highest-scoring candidate; ties go to the earliest.
pub fn rescore_select<'c, H: RescoreHook + ?Sized>(
    candidates: &'c [Candidate],
    cond: &Conditioning,
    hook: &H,
) -> Result<(usize, &'c Candidate), SeqLmError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let s = hook.score(cond, c);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    let (i, _) = best.ok_or(SeqLmError::EmptyCandidates)?;
    Ok((i, &candidates[i]))
}

#[derive(Debug, Clone)]
pub struct S2stOutput {
    pub features: FeatureMatrix,
    /// Chosen target in base-token ids.
    pub tokens: TokenSequence,
    pub candidate: Candidate,
    pub candidate_index: usize,
}

/// Source base tokens → BPE → sample + rescore → BPE decode → vectors in the
/// prompt speaker's voice.
pub fn s2st_pipeline(
    model: &SeqLm,
    source: &TokenSequence,
    bpe: &BpeModel,
    codebook: &Codebook,
    prompt: &FeatureMatrix,
    sc: &SampleConfig,
) -> Result<S2stOutput, SeqLmError> {
    if model.cfg.token_vocab != bpe.vocab_size() {
        return Err(SeqLmError::VocabMismatch { model: model.cfg.token_vocab, bpe: bpe.vocab_size() });
    }
    let cond = Conditioning::S2st { source: bpe.encode_ids(source.tokens())? };
    let candidates = sample_candidates(model, &cond, sc)?;
    let (index, best) = rescore_select(&candidates, &cond, &LikelihoodScorer { model })?;
    let base = bpe.decode_ids(&best.tokens)?;
    if base.is_empty() {
        return Err(SeqLmError::EmptyTarget);
    }
    let tokens = TokenSequence::new(base, bpe.base_vocab_size()).map_err(ReconstructError::from)?;
    let features = reconstruct_with_prompt(&tokens, codebook, prompt)?;
    Ok(S2stOutput { features, tokens, candidate: best.clone(), candidate_index: index })
}

/// Seconds of audio covered by a window of `window` positions at a stream
/// rate of `tokens_per_sec`.
pub fn context_seconds(window: usize, tokens_per_sec: f64) -> f64 {
    window as f64 / tokens_per_sec
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn toy(token_vocab: u32, cond_vocab: u32, seed: u64) -> SeqLm {
        SeqLm::new(SeqLmConfig { d_model: 16, heads: 2, layers: 2, ff: 32, seed, ..SeqLmConfig::new(token_vocab, cond_vocab) })
            .unwrap()
    }

    #[test]
    fn layouts_and_labels() {
        let m = toy(10, 3, 0);
        let c = m.config().clone();
        let tts = ConditioningLayout::tts(vec![2, 0], vec![7], vec![4, 5]);
        let (ids, labels) = m.training_pair(&tts).unwrap();
        assert_eq!(ids, vec![c.bos(), c.cond_id(2), c.cond_id(0), c.sep(), 7, c.sep(), 4, 5]);
        assert_eq!(labels, vec![None, None, None, None, None, Some(4), Some(5), Some(c.eos() as usize)]);
        let s2st = ConditioningLayout::s2st(vec![1, 2, 3], vec![9]);
        let (ids, labels) = m.training_pair(&s2st).unwrap();
        assert_eq!(ids, vec![c.bos(), 1, 2, 3, c.sep(), 9]);
        assert_eq!(labels.iter().flatten().count(), 2);
        assert!(matches!(m.training_pair(&ConditioningLayout::s2st(vec![1], vec![])), Err(SeqLmError::EmptyTarget)));
        assert!(matches!(
            m.training_pair(&ConditioningLayout::tts(vec![3], vec![], vec![1])),
            Err(SeqLmError::TokenOutOfRange { segment: "condition unit", .. })
        ));
    }

    #[test]
    fn future_tokens_do_not_change_past_logits() {
        let m = toy(12, 0, 1);
        let a = [12, 3, 4, 5, 6, 7, 8];
        let mut b = a;
        b[5] = 0;
        b[6] = 11;
        let (la, lb) = (m.logits(&a).unwrap(), m.logits(&b).unwrap());
        for t in 0..5 {
            assert_eq!(la.row(t), lb.row(t), "position {t}");
        }
        assert_ne!(la.row(5), lb.row(5));
    }

    #[test]
    fn cached_steps_match_full_forward() {
        let m = toy(12, 2, 2);
        let ids = [m.config().bos(), 12, 13, m.config().sep(), 4, 4, 9, 1];
        let full = m.logits(&ids).unwrap();
        let mut state = m.start(&ids[..1]).unwrap();
        for t in 0..ids.len() {
            if t > 0 {
                m.advance(&mut state, ids[t]);
            }
            for (a, b) in state.logits().iter().zip(full.row(t)) {
                assert!((a - b).abs() < 1e-10);
            }
            let mut p = state.logits().to_vec();
            crate::neural::softmax_in_place(&mut p);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut m = toy(7, 0, 3);
        let head = m.head.clone().unwrap();
        m.params_mut().get_mut(head.w).value.iter_mut().for_each(|v| *v = 0.0);
        let layout = ConditioningLayout::s2st(vec![1, 2], vec![3, 4, 5]);
        let v = m.config().vocab_size() as f64;
        assert!((m.lm_loss(&layout).unwrap() - v.ln()).abs() < 1e-12);
    }

    #[test]
    fn certain_predictions_cost_nothing() {
        let m = toy(1, 0, 4);
        let layout = ConditioningLayout::s2st(vec![0], vec![0, 0, 0]);
        let (ids, labels) = m.training_pair(&layout).unwrap();
        let v = m.config().vocab_size() as usize;
        let mut logits = Tensor::zeros(ids.len(), v);
        for (r, l) in labels.iter().enumerate() {
            if let Some(l) = l {
                logits.data[r * v + l] = 1e3;
            }
        }
        let mut g = Graph::new();
        let x = g.input(logits);
        let loss = g.cross_entropy(x, &labels);
        assert_eq!(g.value(loss).data[0], 0.0);
    }

    #[test]
    fn condition_tokens_shift_loss_without_being_scored() {
        let m = toy(9, 0, 5);
        let a = m.lm_loss(&ConditioningLayout::s2st(vec![1, 2, 3], vec![4, 5])).unwrap();
        let b = m.lm_loss(&ConditioningLayout::s2st(vec![8, 8, 0], vec![4, 5])).unwrap();
        assert!(a > 0.0 && b > 0.0);
        assert_ne!(a, b);
    }

    #[test]
    fn gradients_match_central_differences() {
        for tied in [false, true] {
            let mut m = SeqLm::new(SeqLmConfig { d_model: 8, heads: 2, layers: 1, ff: 12, tied_head: tied, seed: 6, ..SeqLmConfig::new(5, 2) })
                .unwrap();
            let mut rng = SplitMix64::new(7);
            let ids: Vec<ParamId> = m.params().iter().map(|(id, _)| id).collect();
            for &id in &ids {
                m.params_mut().get_mut(id).value.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
            }
            let layout = ConditioningLayout::tts(vec![1], vec![0], vec![3, 2, 4]);
            m.compute_gradients(&layout).unwrap();
            let h = 1e-4;
            for id in ids {
                let grads = m.params().get(id).grad.clone();
                let name = m.params().get(id).name.clone();
                for (i, &a) in grads.iter().enumerate() {
                    let orig = m.params().get(id).value[i];
                    m.params_mut().get_mut(id).value[i] = orig + h;
                    let up = m.lm_loss(&layout).unwrap();
                    m.params_mut().get_mut(id).value[i] = orig - h;
                    let down = m.lm_loss(&layout).unwrap();
                    m.params_mut().get_mut(id).value[i] = orig;
                    let n = (up - down) / (2.0 * h);
                    let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
                    assert!(err < 1e-4, "tied={tied} {name}[{i}]: {a} vs {n}");
                }
            }
        }
    }

    #[test]
    fn small_corpus_is_memorized_and_reloads() {
        let corpus: Vec<ConditioningLayout> =
            (0..3).map(|i| ConditioningLayout::s2st(vec![i], (0..8).map(|j| (i * 3 + j * 5) % 10).collect())).collect();
        let mut m = toy(10, 0, 8);
        let cfg = TrainConfig { steps: 300, learning_rate: 3e-3, cosine: true, warmup_steps: 20, ..TrainConfig::default() };
        let curve = train_lm(&mut m, &corpus, &cfg).unwrap();
        assert!(curve[0] > 1.5);
        assert!(*curve.last().unwrap() < 0.1, "{:?}", &curve[curve.len() - 5..]);

        let mut buf = Vec::new();
        m.save(&mut buf, Dtype::F64).unwrap();
        let back = SeqLm::load(buf.as_slice()).unwrap();
        for l in &corpus {
            assert_eq!(back.lm_loss(l).unwrap(), m.lm_loss(l).unwrap());
        }

        let cond = corpus[1].condition.clone();
        let greedy = SampleConfig { n_candidates: 3, temperature: 0.0, ..SampleConfig::default() };
        let c = sample_candidates(&m, &cond, &greedy).unwrap();
        assert!(c.iter().all(|x| x == &c[0]));
        assert_eq!(c[0].tokens, corpus[1].target);
        assert!(!c[0].truncated);
    }

    #[test]
    fn training_is_thread_count_independent() {
        let corpus: Vec<ConditioningLayout> =
            (0..5).map(|i| ConditioningLayout::s2st(vec![i, i + 1], vec![(i * 7) % 9, 3, i])).collect();
        let cfg = TrainConfig { steps: 5, batch_size: 3, seed: 2, ..TrainConfig::default() };
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let mut m = toy(9, 0, 1);
                let curve = train_lm(&mut m, &corpus, &cfg).unwrap();
                (curve, m.params().iter().map(|(_, p)| p.value.clone()).collect::<Vec<_>>())
            })
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn sampling_is_seeded_and_bounded() {
        let m = toy(6, 0, 9);
        let cond = Conditioning::S2st { source: vec![1, 2] };
        let sc = SampleConfig { n_candidates: 16, seed: 5, max_len: Some(4), ..SampleConfig::default() };
        let a = sample_candidates(&m, &cond, &sc).unwrap();
        let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = serial.install(|| sample_candidates(&m, &cond, &sc).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        assert!(a.iter().all(|c| c.tokens.len() <= 4 && c.tokens.iter().all(|&t| t < 6)));
        assert!(a.iter().all(|c| c.truncated == (c.tokens.len() == 4)));
        let top1 = SampleConfig { top_k: Some(1), ..sc.clone() };
        let g = SampleConfig { temperature: 0.0, ..sc.clone() };
        assert_eq!(sample_candidates(&m, &cond, &top1).unwrap()[0], sample_candidates(&m, &cond, &g).unwrap()[0]);
        assert_eq!(SampleConfig::default().max_len_for(&cond), 72);
        assert_eq!(SampleConfig::default().n_candidates, 256);
        assert!(matches!(
            sample_candidates(&m, &cond, &SampleConfig { n_candidates: 0, ..sc }),
            Err(SeqLmError::NoCandidatesRequested)
        ));
    }

    #[test]
    fn selection_rules() {
        let cond = Conditioning::S2st { source: vec![0] };
        let cand = |n: usize| Candidate { tokens: vec![1; n], truncated: false };
        let list = vec![cand(4), cand(2), cand(5), cand(2)];
        let shortest = |_: &Conditioning, c: &Candidate| -(c.tokens.len() as f64);
        assert_eq!(rescore_select(&list, &cond, &shortest).unwrap().0, 1);
        assert_eq!(rescore_select(&list[2..3], &cond, &shortest).unwrap().1, &list[2]);
        let flat = |_: &Conditioning, _: &Candidate| 0.0;
        assert_eq!(rescore_select(&list, &cond, &flat).unwrap().0, 0);
        assert!(matches!(rescore_select(&[], &cond, &flat), Err(SeqLmError::EmptyCandidates)));
    }

    #[test]
    fn likelihood_scorer_matches_loss() {
        let m = toy(6, 0, 10);
        let layout = ConditioningLayout::s2st(vec![1, 4], vec![2, 3, 5]);
        let cand = Candidate { tokens: layout.target.clone(), truncated: false };
        let score = LikelihoodScorer { model: &m }.score(&layout.condition, &cand);
        assert!((score + m.lm_loss(&layout).unwrap()).abs() < 1e-10);
    }

    proptest! {
        #[test]
        fn compression_extends_context(window in 1usize..4096, rate in 1.0f64..100.0, ratio in 1.0001f64..8.0) {
            prop_assert!(context_seconds(window, rate / ratio) > context_seconds(window, rate));
        }
    }
}
