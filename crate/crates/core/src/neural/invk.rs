//! Prompt-conditioned "inverse k-means": maps a token sequence plus a few
//! seconds of speaker prompt back to feature vectors.
//!
//! Layout of one forward pass:
//!
//! ```text
//! prompt (P × dim) ─ in_proj ─ + segment ──┐
//!                                          ├─ concat ─ blocks ─ norm ─ out_proj ─ (P+N) × dim
//! tokens (N) ─ table ─ in_proj ─ + sinus ──┘
//! ```
//!
//! The token table is `(k + 2) × dim` and starts as the codebook centers;
//! row `k` is MASK and row `k + 1` is padding. Prompt rows carry no position
//! code, so permuting the prompt permutes its own outputs and leaves token
//! outputs unchanged. Attention is bidirectional.

use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::RngCore;

use super::graph::{Graph, Tensor, Var};
use super::layers::{sinusoidal, BlockShape, Linear, TransformerBlock};
use super::params::{read_checkpoint, write_checkpoint, AdamW, Dtype, ParamId, ParamStore, TrainConfig};
use super::ssim::ssim_graph;
use super::NeuralError;
use crate::featureio::FeatureMatrix;
use crate::quantizer::{Codebook, TokenSequence};
use crate::rng::SplitMix64;

pub const INVK_CHECKPOINT_KIND: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvKConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff: usize,
    pub seed: u64,
}

impl Default for InvKConfig {
    fn default() -> Self {
        Self { d_model: 64, heads: 2, layers: 2, ff: 256, seed: 0 }
    }
}

impl InvKConfig {
    fn validate(&self) -> Result<(), NeuralError> {
        if self.d_model == 0 || self.heads == 0 || self.ff == 0 {
            return Err(NeuralError::ShapeMismatch("d_model, heads and ff must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(NeuralError::ShapeMismatch(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// Token corruption applied during training: MASK with probability
/// `mask_prob`, a different random base token with probability `replace_prob`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationPolicy {
    pub mask_prob: f64,
    pub replace_prob: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self { mask_prob: 0.1, replace_prob: 0.1 }
    }
}

impl AugmentationPolicy {
    pub const NONE: Self = Self { mask_prob: 0.0, replace_prob: 0.0 };

    pub fn validate(&self) -> Result<(), NeuralError> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if !ok(self.mask_prob) || !ok(self.replace_prob) || self.mask_prob + self.replace_prob > 1.0 {
            return Err(NeuralError::InvalidPolicy(format!(
                "mask {} / replace {} must lie in [0, 1] and sum to at most 1",
                self.mask_prob, self.replace_prob
            )));
        }
        Ok(())
    }
}

/// Corrupts base-vocabulary tokens. The result has vocabulary `k + 2`, where
/// id `k` is MASK. With `k == 1` there is no other token, so replacement is a
/// no-op.
pub fn augment(tokens: &TokenSequence, policy: AugmentationPolicy, seed: u64) -> TokenSequence {
    let k = tokens.vocab_size();
    let mut rng = SplitMix64::new(seed);
    let out = tokens
        .tokens()
        .iter()
        .map(|&t| {
            let u = rng.next_f64();
            if u < policy.mask_prob {
                k
            } else if u < policy.mask_prob + policy.replace_prob && k > 1 {
                let r = rng.below(k as u64 - 1) as u32;
                if r >= t { r + 1 } else { r }
            } else {
                t
            }
        })
        .collect();
    TokenSequence::new(out, k + 2).expect("augmented ids stay below k + 2")
}

/// One training triple. `target` has one row per token.
#[derive(Debug, Clone)]
pub struct InvKExample {
    pub tokens: TokenSequence,
    pub target: FeatureMatrix,
    pub prompt: FeatureMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub mse: f64,
    pub ssim: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct InvKModel {
    k: usize,
    dim: usize,
    cfg: InvKConfig,
    store: ParamStore,
    embedding: ParamId,
    in_proj: Linear,
    segment: ParamId,
    blocks: Vec<TransformerBlock>,
    final_norm: ParamId,
    out_proj: Linear,
}

impl InvKModel {
    pub fn new(codebook: &Codebook, cfg: InvKConfig) -> Result<Self, NeuralError> {
        let mut model = Self::with_layout(codebook.k(), codebook.dim(), cfg)?;
        let table = &mut model.store.get_mut(model.embedding).value;
        for (j, c) in codebook.centers().enumerate() {
            table[j * codebook.dim()..(j + 1) * codebook.dim()].copy_from_slice(c);
        }
        Ok(model)
    }

    fn with_layout(k: usize, dim: usize, cfg: InvKConfig) -> Result<Self, NeuralError> {
        cfg.validate()?;
        if k == 0 || dim == 0 {
            return Err(NeuralError::EmptyInput("codebook"));
        }
        let mut rng = SplitMix64::new(cfg.seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let embedding = store.add("embedding", k + 2, dim, vec![0.0; (k + 2) * dim], false);
        let in_proj = Linear::new(&mut store, &mut rng, "in_proj", dim, d, 1.0 / (dim as f64).sqrt(), true);
        let segment = store.add_normal("prompt_segment", 1, d, 0.02, &mut rng);
        let shape = BlockShape { d_model: d, heads: cfg.heads, ff: cfg.ff };
        let blocks = (0..cfg.layers)
            .map(|i| TransformerBlock::new(&mut store, &mut rng, &format!("block{i}"), shape, cfg.layers))
            .collect();
        let final_norm = store.add_const("final_norm", 1, d, 1.0);
        let out_proj = Linear::new(&mut store, &mut rng, "out_proj", d, dim, 1.0 / (d as f64).sqrt(), true);
        Ok(Self { k, dim, cfg, store, embedding, in_proj, segment, blocks, final_norm, out_proj })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn config(&self) -> &InvKConfig {
        &self.cfg
    }

    pub fn mask_id(&self) -> u32 {
        self.k as u32
    }

    pub fn pad_id(&self) -> u32 {
        self.k as u32 + 1
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

    /// Raw table row for `token`, bypassing every other layer.
    pub fn embed_only(&self, token: u32) -> &[f64] {
        let t = token as usize;
        &self.store.get(self.embedding).value[t * self.dim..(t + 1) * self.dim]
    }

    fn check_inputs(&self, ids: &[u32], limit: u32, prompt: &FeatureMatrix) -> Result<(), NeuralError> {
        if ids.is_empty() {
            return Err(NeuralError::EmptyInput("tokens"));
        }
        if prompt.frames() == 0 {
            return Err(NeuralError::EmptyInput("prompt"));
        }
        if prompt.dim() != self.dim {
            return Err(NeuralError::ShapeMismatch(format!(
                "prompt dim {} but model dim {}",
                prompt.dim(),
                self.dim
            )));
        }
        if let Some((index, &token)) = ids.iter().enumerate().find(|(_, &t)| t >= limit) {
            return Err(NeuralError::TokenOutOfRange { index, token, limit });
        }
        Ok(())
    }

    /// Records the forward pass; returns `(P + N) × dim`.
    fn forward_graph(&self, g: &mut Graph, ids: &[u32], prompt: &FeatureMatrix) -> Var {
        let s = &self.store;
        let p = g.input(Tensor::new(prompt.frames(), self.dim, prompt.data().to_vec()));
        let hp = self.in_proj.forward(g, s, p);
        let seg = g.param(s, self.segment);
        let hp = g.add_row(hp, seg);

        let table = g.param(s, self.embedding);
        let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let e = g.gather(table, &idx);
        let ht = self.in_proj.forward(g, s, e);
        let pe = g.input(sinusoidal(ids.len(), self.cfg.d_model));
        let ht = g.add(ht, pe);

        let mut x = g.concat_rows(&[hp, ht]);
        for block in &self.blocks {
            x = block.forward(g, s, x, None);
        }
        let gain = g.param(s, self.final_norm);
        let x = g.rms_norm(x, gain);
        self.out_proj.forward(g, s, x)
    }

    fn run(&self, ids: &[u32], prompt: &FeatureMatrix, keep_prompt: bool) -> Result<FeatureMatrix, NeuralError> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, ids, prompt);
        let v = g.value(out);
        let skip = if keep_prompt { 0 } else { prompt.frames() * self.dim };
        Ok(FeatureMatrix::new(self.dim, v.data[skip..].to_vec())?)
    }

    /// One predicted vector per token; `tokens` must be base-vocabulary ids.
    pub fn forward(&self, tokens: &TokenSequence, prompt: &FeatureMatrix) -> Result<FeatureMatrix, NeuralError> {
        self.check_inputs(tokens.tokens(), self.k as u32, prompt)?;
        self.run(tokens.tokens(), prompt, false)
    }

    /// Like [`forward`](Self::forward) but accepts MASK / padding ids.
    pub fn forward_ids(&self, ids: &[u32], prompt: &FeatureMatrix) -> Result<FeatureMatrix, NeuralError> {
        self.check_inputs(ids, self.k as u32 + 2, prompt)?;
        self.run(ids, prompt, false)
    }

    /// Output for every position, prompt rows first.
    pub fn forward_full(&self, tokens: &TokenSequence, prompt: &FeatureMatrix) -> Result<FeatureMatrix, NeuralError> {
        self.check_inputs(tokens.tokens(), self.k as u32, prompt)?;
        self.run(tokens.tokens(), prompt, true)
    }

    fn check_example(&self, ex: &InvKExample) -> Result<(), NeuralError> {
        self.check_inputs(ex.tokens.tokens(), self.k as u32, &ex.prompt)?;
        if ex.target.frames() != ex.tokens.len() || ex.target.dim() != self.dim {
            return Err(NeuralError::ShapeMismatch(format!(
                "target is {}x{}, expected {}x{}",
                ex.target.frames(),
                ex.target.dim(),
                ex.tokens.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Loss on `ids` (possibly augmented) against `ex.target`; gradients are
    /// added into the parameter store.
    fn accumulate(&mut self, ids: &[u32], ex: &InvKExample) -> Result<LossParts, NeuralError> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, ids, &ex.prompt);
        let p = ex.prompt.frames();
        let pred = g.slice_rows(out, p, p + ids.len());
        let target = Tensor::new(ex.target.frames(), self.dim, ex.target.data().to_vec());
        let (mse, ssim, total) = loss_graph(&mut g, pred, &target);
        let parts = LossParts { mse: g.value(mse).data[0], ssim: g.value(ssim).data[0], total: g.value(total).data[0] };
        if parts.total.is_finite() {
            g.backward(total)?;
            g.accumulate_param_grads(&mut self.store);
        }
        Ok(parts)
    }

    /// Zeroes the gradients, then fills them with d(loss)/d(param) for one
    /// example without augmentation.
    pub fn compute_gradients(&mut self, ex: &InvKExample) -> Result<LossParts, NeuralError> {
        self.check_example(ex)?;
        self.store.zero_grads();
        let ids = ex.tokens.tokens().to_vec();
        self.accumulate(&ids, ex)
    }

    /// Evaluation loss, no augmentation.
    pub fn loss(&self, ex: &InvKExample) -> Result<LossParts, NeuralError> {
        self.check_example(ex)?;
        let pred = self.run(ex.tokens.tokens(), &ex.prompt, false)?;
        loss_invk(&pred, &ex.target, 0)
    }

    fn hyper(&self) -> Vec<u32> {
        [self.k, self.dim, self.cfg.d_model, self.cfg.heads, self.cfg.layers, self.cfg.ff]
            .iter()
            .map(|&v| v as u32)
            .collect()
    }

    pub fn save<W: Write>(&self, w: W, dtype: Dtype) -> Result<(), NeuralError> {
        Ok(write_checkpoint(w, INVK_CHECKPOINT_KIND, &self.hyper(), &self.store, dtype)?)
    }

    pub fn load<R: Read>(r: R) -> Result<Self, NeuralError> {
        let ckpt = read_checkpoint(r)?;
        if ckpt.kind != INVK_CHECKPOINT_KIND {
            return Err(NeuralError::CheckpointMismatch(format!("checkpoint kind {} is not an inverse model", ckpt.kind)));
        }
        let [k, dim, d_model, heads, layers, ff] = ckpt.hyper[..] else {
            return Err(NeuralError::CheckpointMismatch(format!("expected 6 hyperparameters, found {}", ckpt.hyper.len())));
        };
        let cfg = InvKConfig { d_model: d_model as usize, heads: heads as usize, layers: layers as usize, ff: ff as usize, seed: 0 };
        let mut model = Self::with_layout(k as usize, dim as usize, cfg)?;
        ckpt.bind(&mut model.store)?;
        Ok(model)
    }
}

/// `(mse, ssim, mse + 1 - ssim)` on the tape.
fn loss_graph(g: &mut Graph, pred: Var, target: &Tensor) -> (Var, Var, Var) {
    let y = g.input(target.clone());
    let diff = g.sub(pred, y);
    let sq = g.mul(diff, diff);
    let mse = g.mean(sq);
    let ssim = ssim_graph(g, pred, target);
    let neg = g.scale(ssim, -1.0);
    let total = g.add(mse, neg);
    let total = g.add_scalar(total, 1.0);
    (mse, ssim, total)
}

/// MSE plus `1 - SSIM`, ignoring the first `prompt_len` rows of both inputs.
pub fn loss_invk(predicted: &FeatureMatrix, target: &FeatureMatrix, prompt_len: usize) -> Result<LossParts, NeuralError> {
    if predicted.dim() != target.dim() || predicted.frames() != target.frames() {
        return Err(NeuralError::ShapeMismatch(format!(
            "predicted {}x{} vs target {}x{}",
            predicted.frames(),
            predicted.dim(),
            target.frames(),
            target.dim()
        )));
    }
    if prompt_len >= target.frames() {
        return Err(NeuralError::EmptyInput("no rows left after the prompt"));
    }
    let dim = target.dim();
    let tail = |m: &FeatureMatrix| Tensor::new(m.frames() - prompt_len, dim, m.data()[prompt_len * dim..].to_vec());
    let mut g = Graph::new();
    let x = g.input(tail(predicted));
    let (mse, ssim, total) = loss_graph(&mut g, x, &tail(target));
    Ok(LossParts { mse: g.value(mse).data[0], ssim: g.value(ssim).data[0], total: g.value(total).data[0] })
}

/// AdamW training with fresh augmentation per step and example. Returns the
/// mean batch loss of every step.
pub fn train_invk(
    model: &mut InvKModel,
    corpus: &[InvKExample],
    policy: AugmentationPolicy,
    cfg: &TrainConfig,
) -> Result<Vec<f64>, NeuralError> {
    policy.validate()?;
    if corpus.is_empty() {
        return Err(NeuralError::EmptyCorpus);
    }
    for ex in corpus {
        model.check_example(ex)?;
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
        model.store.zero_grads();
        let mut total = 0.0;
        for &i in &batch {
            let ex = &corpus[i];
            let seed = SplitMix64::derive(cfg.seed ^ 0x5EED_A06E, (step * n + i) as u64).next_u64();
            let ids = augment(&ex.tokens, policy, seed).into_tokens();
            let parts = model.accumulate(&ids, ex)?;
            if !parts.total.is_finite() {
                return Err(NeuralError::Divergence { step });
            }
            total += parts.total;
        }
        model.store.scale_grads(1.0 / batch.len() as f64);
        if !model.store.grad_norm().is_finite() {
            return Err(NeuralError::Divergence { step });
        }
        opt.step(&mut model.store, cfg, cfg.lr_at(step));
        curve.push(total / batch.len() as f64);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::layers::sinusoidal_row;
    use rand::Rng;

    fn codebook(k: usize, dim: usize, seed: u64) -> Codebook {
        let mut rng = SplitMix64::new(seed);
        let rows: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        Codebook::from_centers(&rows).unwrap()
    }

    fn features(frames: usize, dim: usize, seed: u64) -> FeatureMatrix {
        let mut rng = SplitMix64::new(seed);
        FeatureMatrix::new(dim, (0..frames * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn toy_cfg() -> InvKConfig {
        InvKConfig { d_model: 8, heads: 2, layers: 1, ff: 12, seed: 3 }
    }

    /// Moves every parameter off its structured initial value.
    fn jitter(model: &mut InvKModel, seed: u64) {
        let mut rng = SplitMix64::new(seed);
        let ids: Vec<ParamId> = model.params().iter().map(|(id, _)| id).collect();
        for id in ids {
            for v in &mut model.params_mut().get_mut(id).value {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }

    fn example(cb: &Codebook, tokens: &[u32], prompt_frames: usize, seed: u64) -> InvKExample {
        let tokens = TokenSequence::new(tokens.to_vec(), cb.k() as u32).unwrap();
        InvKExample { target: features(tokens.len(), cb.dim(), seed), prompt: features(prompt_frames, cb.dim(), seed + 1), tokens }
    }

    #[test]
    fn table_starts_at_the_centers() {
        let cb = codebook(5, 4, 1);
        let model = InvKModel::new(&cb, toy_cfg()).unwrap();
        for j in 0..5 {
            assert_eq!(model.embed_only(j), cb.center(j as usize));
        }
        assert_eq!(model.embed_only(model.mask_id()), &[0.0; 4]);
        assert_eq!(model.params().get(model.embedding).rows, 7);
        assert!(model.num_parameters() > 0);
    }

    #[test]
    fn forward_shape_and_determinism() {
        let cb = codebook(6, 5, 2);
        let a = InvKModel::new(&cb, toy_cfg()).unwrap();
        let b = InvKModel::new(&cb, toy_cfg()).unwrap();
        let toks = TokenSequence::new(vec![0, 3, 3, 5, 1, 2, 2], 6).unwrap();
        let prompt = features(4, 5, 9);
        let ya = a.forward(&toks, &prompt).unwrap();
        assert_eq!((ya.frames(), ya.dim()), (7, 5));
        assert_eq!(ya.data(), b.forward(&toks, &prompt).unwrap().data());
        assert_eq!(a.forward_full(&toks, &prompt).unwrap().frames(), 11);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let cb = codebook(3, 2, 2);
        let m = InvKModel::new(&cb, toy_cfg()).unwrap();
        let prompt = features(2, 2, 1);
        let empty = TokenSequence::new(vec![], 3).unwrap();
        assert!(matches!(m.forward(&empty, &prompt), Err(NeuralError::EmptyInput(_))));
        let toks = TokenSequence::new(vec![1], 3).unwrap();
        assert!(matches!(m.forward(&toks, &features(2, 3, 1)), Err(NeuralError::ShapeMismatch(_))));
        assert!(matches!(m.forward_ids(&[5], &prompt), Err(NeuralError::TokenOutOfRange { token: 5, .. })));
        assert!(m.forward_ids(&[m.mask_id(), m.pad_id()], &prompt).is_ok());
    }

    #[test]
    fn prompt_order_only_permutes_prompt_outputs() {
        let cb = codebook(4, 3, 4);
        let mut model = InvKModel::new(&cb, toy_cfg()).unwrap();
        jitter(&mut model, 8);
        let toks = TokenSequence::new(vec![0, 1, 2, 3, 1], 4).unwrap();
        let prompt = features(5, 3, 5);
        let order = [3, 0, 4, 2, 1];
        let rows: Vec<&[f64]> = order.iter().map(|&i| prompt.row(i)).collect();
        let shuffled = FeatureMatrix::from_rows(&rows).unwrap();
        let a = model.forward_full(&toks, &prompt).unwrap();
        let b = model.forward_full(&toks, &shuffled).unwrap();
        for t in 5..10 {
            for (x, y) in a.row(t).iter().zip(b.row(t)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        for (dst, &src) in order.iter().enumerate() {
            for (x, y) in a.row(src).iter().zip(b.row(dst)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    // Hand evaluation at d = 2 with one head, one block, one prompt frame and
    // one token. Every step is spelled out on 2-vectors.
    #[test]
    fn two_dimensional_forward_matches_hand_computation() {
        let cb = Codebook::from_centers(&[[0.5, -1.0], [2.0, 0.25]]).unwrap();
        let cfg = InvKConfig { d_model: 2, heads: 1, layers: 1, ff: 3, seed: 11 };
        let mut model = InvKModel::new(&cb, cfg).unwrap();
        jitter(&mut model, 12);
        let p = |name: &str| -> Vec<f64> {
            model.params().iter().find(|(_, q)| q.name == name).unwrap().1.value.clone()
        };
        // x · W for W stored row-major as in × out.
        let lin = |x: &[f64], w: &[f64], b: &[f64]| -> Vec<f64> {
            let out = b.len();
            (0..out).map(|o| b[o] + x.iter().enumerate().map(|(i, xi)| xi * w[i * out + o]).sum::<f64>()).collect()
        };
        let norm = |x: &[f64], g: &[f64]| -> Vec<f64> {
            let r = ((x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64) + 1e-6).sqrt();
            x.iter().zip(g).map(|(v, g)| v / r * g).collect()
        };
        let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
        let add = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + y).collect() };

        let prompt = [0.3, -0.7];
        let token = 1u32;
        let emb = &p("embedding")[2..4];
        let (w_in, b_in) = (p("in_proj.w"), p("in_proj.b"));
        let h0 = add(&lin(&prompt, &w_in, &b_in), &p("prompt_segment"));
        let pe = sinusoidal_row(0, 2);
        assert_eq!(pe, vec![0.0, 1.0]);
        let h1 = add(&lin(emb, &w_in, &b_in), &pe);

        let zero = [0.0, 0.0];
        let n0 = norm(&h0, &p("block0.attn_norm"));
        let n1 = norm(&h1, &p("block0.attn_norm"));
        let q = |x: &[f64]| lin(x, &p("block0.attn.q.w"), &zero);
        let k = |x: &[f64]| lin(x, &p("block0.attn.k.w"), &zero);
        let v = |x: &[f64]| lin(x, &p("block0.attn.v.w"), &zero);
        let dot = |a: &[f64], b: &[f64]| a[0] * b[0] + a[1] * b[1];
        let scale = 1.0 / 2f64.sqrt();
        let (k0, k1, v0, v1) = (k(&n0), k(&n1), v(&n0), v(&n1));
        let attend = |qi: Vec<f64>| -> Vec<f64> {
            let (s0, s1) = (dot(&qi, &k0) * scale, dot(&qi, &k1) * scale);
            let m = s0.max(s1);
            let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
            let (a0, a1) = (e0 / (e0 + e1), e1 / (e0 + e1));
            vec![a0 * v0[0] + a1 * v1[0], a0 * v0[1] + a1 * v1[1]]
        };
        let block = |h: &[f64], ctx: Vec<f64>| -> Vec<f64> {
            let x = add(h, &lin(&ctx, &p("block0.attn.o.w"), &p("block0.attn.o.b")));
            let f = lin(&norm(&x, &p("block0.ff_norm")), &p("block0.ff.in.w"), &p("block0.ff.in.b"));
            let f: Vec<f64> = f.into_iter().map(gelu).collect();
            add(&x, &lin(&f, &p("block0.ff.out.w"), &p("block0.ff.out.b")))
        };
        let y1 = block(&h1, attend(q(&n1)));
        let expected = lin(&norm(&y1, &p("final_norm")), &p("out_proj.w"), &p("out_proj.b"));

        let toks = TokenSequence::new(vec![token], 2).unwrap();
        let got = model.forward(&toks, &FeatureMatrix::from_rows(&[prompt]).unwrap()).unwrap();
        for (a, b) in got.row(0).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn loss_components() {
        let t = features(10, 6, 1);
        let same = loss_invk(&t, &t, 0).unwrap();
        assert_eq!(same.mse, 0.0);
        assert!((same.ssim - 1.0).abs() < 1e-12);
        assert!(same.total.abs() < 1e-12);

        let flat = FeatureMatrix::new(3, vec![0.25; 12]).unwrap();
        let shifted = flat.map(|v| v + 1.0).unwrap();
        assert!((loss_invk(&shifted, &flat, 0).unwrap().mse - 1.0).abs() < 1e-12);

        let other = features(10, 6, 2);
        let parts = loss_invk(&other, &t, 3).unwrap();
        assert!((parts.total - (parts.mse + 1.0 - parts.ssim)).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&parts.ssim));
        // Rows inside the prompt never matter.
        let mut data = other.data().to_vec();
        data[..18].iter_mut().for_each(|v| *v = 100.0);
        let masked = FeatureMatrix::new(6, data).unwrap();
        assert_eq!(loss_invk(&masked, &t, 3).unwrap(), parts);

        assert!(matches!(loss_invk(&features(9, 6, 1), &t, 0), Err(NeuralError::ShapeMismatch(_))));
    }

    #[test]
    fn zero_loss_has_zero_gradient() {
        let t = features(9, 5, 4);
        let target = Tensor::new(9, 5, t.data().to_vec());
        let mut g = Graph::new();
        let x = g.input(target.clone());
        let (_, _, total) = loss_graph(&mut g, x, &target);
        g.backward(total).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn gradients_match_central_differences() {
        let cb = codebook(5, 3, 21);
        let mut model = InvKModel::new(&cb, InvKConfig { d_model: 4, heads: 2, layers: 1, ff: 6, seed: 5 }).unwrap();
        jitter(&mut model, 22);
        let ex = example(&cb, &[4, 0, 2, 2], 3, 23);
        model.compute_gradients(&ex).unwrap();
        let analytic: Vec<(String, Vec<f64>)> =
            model.params().iter().map(|(_, p)| (p.name.clone(), p.grad.clone())).collect();
        let ids: Vec<ParamId> = model.params().iter().map(|(id, _)| id).collect();
        let h = 1e-4;
        let mut worst = 0.0f64;
        for (id, (name, grads)) in ids.into_iter().zip(analytic) {
            for i in 0..grads.len() {
                let orig = model.params().get(id).value[i];
                model.params_mut().get_mut(id).value[i] = orig + h;
                let up = model.loss(&ex).unwrap().total;
                model.params_mut().get_mut(id).value[i] = orig - h;
                let down = model.loss(&ex).unwrap().total;
                model.params_mut().get_mut(id).value[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let err = (grads[i] - numeric).abs() / grads[i].abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-4, "{name}[{i}]: analytic {} numeric {numeric}", grads[i]);
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn augmentation_edges_and_rates() {
        let toks = TokenSequence::new((0..1000).map(|i| i % 7).collect(), 7).unwrap();
        assert_eq!(augment(&toks, AugmentationPolicy::NONE, 1).tokens(), toks.tokens());
        let all = augment(&toks, AugmentationPolicy { mask_prob: 1.0, replace_prob: 0.0 }, 1);
        assert!(all.tokens().iter().all(|&t| t == 7));
        assert_eq!(all.vocab_size(), 9);

        let big = TokenSequence::new((0..100_000).map(|i| (i * 31 % 300) as u32).collect(), 300).unwrap();
        let policy = AugmentationPolicy::default();
        let out = augment(&big, policy, 42);
        assert_eq!(out.tokens(), augment(&big, policy, 42).tokens());
        let masked = out.tokens().iter().filter(|&&t| t == 300).count() as f64 / 1e5;
        let replaced = out.tokens().iter().zip(big.tokens()).filter(|(a, b)| **a != 300 && a != b).count() as f64 / 1e5;
        assert!((masked - 0.1).abs() <= 0.005, "mask rate {masked}");
        assert!((replaced - 0.1).abs() <= 0.005, "replace rate {replaced}");

        let bad = AugmentationPolicy { mask_prob: 0.7, replace_prob: 0.4 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn overfits_a_single_triple() {
        let cb = codebook(8, 6, 31);
        let mut model = InvKModel::new(&cb, InvKConfig { d_model: 32, heads: 2, layers: 2, ff: 64, seed: 1 }).unwrap();
        let ex = example(&cb, &[0, 1, 1, 2, 3, 3, 3, 4, 5, 6, 7, 7], 6, 32);
        let cfg = TrainConfig { steps: 500, learning_rate: 2e-3, cosine: true, warmup_steps: 25, ..TrainConfig::default() };
        let curve = train_invk(&mut model, std::slice::from_ref(&ex), AugmentationPolicy::NONE, &cfg).unwrap();
        let initial = curve[0];
        let last = model.loss(&ex).unwrap().total;
        assert!(last < 0.01 * initial, "initial {initial} final {last}");
        let window = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let means: Vec<f64> = curve.chunks(50).map(window).collect();
        assert!(means.windows(2).all(|w| w[1] <= w[0]), "{means:?}");
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_reload() {
        let cb = codebook(5, 4, 41);
        let corpus: Vec<InvKExample> = (0..3).map(|i| example(&cb, &[0, 1, 2, 3, 4, 0], 4, 50 + i)).collect();
        let cfg = TrainConfig { steps: 20, batch_size: 2, seed: 9, ..TrainConfig::default() };
        let run = || {
            let mut m = InvKModel::new(&cb, toy_cfg()).unwrap();
            let curve = train_invk(&mut m, &corpus, AugmentationPolicy::default(), &cfg).unwrap();
            (m, curve)
        };
        let (model, c1) = run();
        let (_, c2) = run();
        assert_eq!(c1, c2);

        let ex = &corpus[0];
        let mut buf = Vec::new();
        model.save(&mut buf, Dtype::F64).unwrap();
        let back = InvKModel::load(buf.as_slice()).unwrap();
        assert_eq!(back.forward(&ex.tokens, &ex.prompt).unwrap().data(), model.forward(&ex.tokens, &ex.prompt).unwrap().data());

        let mut rounded = model.clone();
        rounded.params_mut().round_to_f32();
        let mut buf = Vec::new();
        model.save(&mut buf, Dtype::F32).unwrap();
        let back = InvKModel::load(buf.as_slice()).unwrap();
        assert_eq!(back.forward(&ex.tokens, &ex.prompt).unwrap().data(), rounded.forward(&ex.tokens, &ex.prompt).unwrap().data());
    }

    #[test]
    fn nan_aborts_with_step_index() {
        let cb = codebook(3, 2, 1);
        let mut model = InvKModel::new(&cb, toy_cfg()).unwrap();
        let id = model.out_proj.w;
        model.params_mut().get_mut(id).value[0] = f64::NAN;
        let ex = example(&cb, &[0, 1, 2], 2, 3);
        let err = train_invk(&mut model, &[ex], AugmentationPolicy::NONE, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, NeuralError::Divergence { step: 0 }));
    }
}
