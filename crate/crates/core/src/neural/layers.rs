//! Building blocks shared by the inverse model and the token LM.

use super::graph::{gelu, softmax_in_place, Graph, Tensor, Var, RMS_EPS};
use super::params::{ParamId, ParamStore};
use crate::rng::SplitMix64;

/// `x · W + b` with `W: in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut SplitMix64, name: &str, fan_in: usize, fan_out: usize, std: f64, bias: bool) -> Self {
        let w = store.add_normal(&format!("{name}.w"), fan_in, fan_out, std, rng);
        let b = bias.then(|| store.add_const(&format!("{name}.b"), 1, fan_out, 0.0));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    /// Graph-free forward of a single row.
    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let w = store.get(self.w);
        let mut out = match self.b {
            Some(b) => store.get(b).value.clone(),
            None => vec![0.0; w.cols],
        };
        for (i, &xv) in x.iter().enumerate() {
            for (o, wv) in out.iter_mut().zip(&w.value[i * w.cols..(i + 1) * w.cols]) {
                *o += xv * wv;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShape {
    pub d_model: usize,
    pub heads: usize,
    pub ff: usize,
}

/// Pre-norm self-attention block: `x + Attn(Norm(x))`, then `x + FF(Norm(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub shape: BlockShape,
    pub attn_norm: ParamId,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ff_norm: ParamId,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

/// Cached keys and values of one layer for incremental decoding.
#[derive(Debug, Clone, Default)]
pub struct LayerCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, rng: &mut SplitMix64, name: &str, shape: BlockShape, num_layers: usize) -> Self {
        assert!(shape.d_model.is_multiple_of(shape.heads), "d_model must be divisible by heads");
        let d = shape.d_model;
        let std = 1.0 / (d as f64).sqrt();
        let resid_std = std / (2.0 * num_layers as f64).sqrt();
        Self {
            shape,
            attn_norm: store.add_const(&format!("{name}.attn_norm"), 1, d, 1.0),
            wq: Linear::new(store, rng, &format!("{name}.attn.q"), d, d, std, false),
            wk: Linear::new(store, rng, &format!("{name}.attn.k"), d, d, std, false),
            wv: Linear::new(store, rng, &format!("{name}.attn.v"), d, d, std, false),
            wo: Linear::new(store, rng, &format!("{name}.attn.o"), d, d, resid_std, true),
            ff_norm: store.add_const(&format!("{name}.ff_norm"), 1, d, 1.0),
            ff_in: Linear::new(store, rng, &format!("{name}.ff.in"), d, shape.ff, std, true),
            ff_out: Linear::new(store, rng, &format!("{name}.ff.out"), shape.ff, d, 1.0 / (shape.ff as f64).sqrt() / (2.0 * num_layers as f64).sqrt(), true),
        }
    }

    /// `mask` is an additive n×n attention mask (`None` = full attention).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mask: Option<&Tensor>) -> Var {
        let dh = self.shape.d_model / self.shape.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let gain = g.param(store, self.attn_norm);
        let h = g.rms_norm(x, gain);
        let q = self.wq.forward(g, store, h);
        let k = self.wk.forward(g, store, h);
        let v = self.wv.forward(g, store, h);
        let mut heads = Vec::with_capacity(self.shape.heads);
        for head in 0..self.shape.heads {
            let (a, b) = (head * dh, (head + 1) * dh);
            let (qh, kh, vh) = (g.slice_cols(q, a, b), g.slice_cols(k, a, b), g.slice_cols(v, a, b));
            let scores = g.matmul_bt(qh, kh);
            let scores = g.scale(scores, scale);
            let probs = match mask {
                Some(m) => g.masked_softmax(scores, m),
                None => g.softmax(scores),
            };
            heads.push(g.matmul(probs, vh));
        }
        let attn = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        let attn = self.wo.forward(g, store, attn);
        let x = g.add(x, attn);

        let gain = g.param(store, self.ff_norm);
        let h = g.rms_norm(x, gain);
        let h = self.ff_in.forward(g, store, h);
        let h = g.gelu(h);
        let h = self.ff_out.forward(g, store, h);
        g.add(x, h)
    }

    /// Causal single-position step: appends this position's key/value to
    /// `cache` and attends over everything cached so far.
    pub fn step(&self, store: &ParamStore, x: &[f64], cache: &mut LayerCache) -> Vec<f64> {
        let dh = self.shape.d_model / self.shape.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let h = rms_norm_row(x, &store.get(self.attn_norm).value);
        let q = self.wq.apply(store, &h);
        cache.keys.push(self.wk.apply(store, &h));
        cache.values.push(self.wv.apply(store, &h));
        let mut attn = vec![0.0; self.shape.d_model];
        for head in 0..self.shape.heads {
            let r = head * dh..(head + 1) * dh;
            let mut scores: Vec<f64> = cache
                .keys
                .iter()
                .map(|k| q[r.clone()].iter().zip(&k[r.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            softmax_in_place(&mut scores);
            for (p, v) in scores.iter().zip(&cache.values) {
                for (o, vv) in attn[r.clone()].iter_mut().zip(&v[r.clone()]) {
                    *o += p * vv;
                }
            }
        }
        let attn = self.wo.apply(store, &attn);
        let x: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();
        let h = rms_norm_row(&x, &store.get(self.ff_norm).value);
        let h: Vec<f64> = self.ff_in.apply(store, &h).into_iter().map(gelu).collect();
        let h = self.ff_out.apply(store, &h);
        x.iter().zip(&h).map(|(a, b)| a + b).collect()
    }
}

pub fn rms_norm_row(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

/// Standard sinusoidal position code for one position.
pub fn sinusoidal_row(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            if i % 2 == 0 { angle.sin() } else { angle.cos() }
        })
        .collect()
}

pub fn sinusoidal(n: usize, d: usize) -> Tensor {
    Tensor::new(n, d, (0..n).flat_map(|p| sinusoidal_row(p, d)).collect())
}

/// Additive mask allowing position `i` to see positions `0..=i`.
pub fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = f64::NEG_INFINITY;
        }
    }
    Tensor::new(n, n, data)
}
