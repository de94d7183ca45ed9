//! Tape-based reverse-mode differentiation over row-major f64 matrices.
//!
//! A [`Graph`] records every operation as it runs. [`Graph::backward`] walks
//! the tape in reverse and accumulates gradients; parameter leaves then hand
//! their gradients to a [`ParamStore`]. Scalars are 1×1 matrices.

use super::params::{ParamId, ParamStore};
use super::NeuralError;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data does not match shape {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(1, 1, vec![v])
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// a [r, c] + b [1, c]
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Softmax { x: Var },
    Gather { table: Var, ids: Vec<usize> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Mean(Var),
    WindowMean { x: Var, win_r: usize, win_c: usize },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf; receives a gradient but feeds no parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(Tensor::new(p.rows, p.cols, p.value.clone()), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols, y.rows, "matmul shape mismatch {:?} x {:?}", x.shape(), y.shape());
        let out = matmul(x, y);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols, y.cols, "matmul_bt shape mismatch {:?} x {:?}ᵀ", x.shape(), y.shape());
        let out = matmul_bt(x, y);
        self.push(out, Op::MatMulBt(a, b))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::new(x.rows, x.cols, data);
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |p, q| p / q, Op::Div(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert!(r.rows == 1 && r.cols == x.cols, "add_row expects a 1x{} row", x.cols);
        let data = x.data.chunks_exact(x.cols).flat_map(|xr| xr.iter().zip(&r.data).map(|(p, q)| p + q)).collect();
        let out = Tensor::new(x.rows, x.cols, data);
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.rows, x.cols, x.data.iter().map(|v| v * s).collect());
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.rows, x.cols, x.data.iter().map(|v| v + s).collect());
        self.push(out, Op::AddScalar(a))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.rows, x.cols, x.data.iter().map(|&v| gelu(v)).collect());
        self.push(out, Op::Gelu(a))
    }

    /// Row-wise RMS normalization with a learned 1×c gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Var {
        let (xv, g) = (self.value(x), self.value(gain));
        assert!(g.rows == 1 && g.cols == xv.cols);
        let mut inv_rms = Vec::with_capacity(xv.rows);
        let mut data = Vec::with_capacity(xv.data.len());
        for r in xv.data.chunks_exact(xv.cols) {
            let ms = r.iter().map(|v| v * v).sum::<f64>() / xv.cols as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(inv);
            data.extend(r.iter().zip(&g.data).map(|(v, w)| v * inv * w));
        }
        let out = Tensor::new(xv.rows, xv.cols, data);
        self.push(out, Op::RmsNorm { x, gain, inv_rms })
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut data = xv.data.clone();
        for r in data.chunks_exact_mut(xv.cols) {
            softmax_in_place(r);
        }
        let out = Tensor::new(xv.rows, xv.cols, data);
        self.push(out, Op::Softmax { x })
    }

    /// Adds `mask` (0 or -inf entries) and applies a row-wise softmax.
    /// The mask is a constant; masked entries get probability exactly 0.
    pub fn masked_softmax(&mut self, x: Var, mask: &Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), mask.shape());
        let data = xv.data.iter().zip(&mask.data).map(|(a, m)| a + m).collect();
        let shifted = Tensor::new(xv.rows, xv.cols, data);
        let tmp = self.push(shifted, Op::AddScalar(x));
        self.softmax(tmp)
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * t.cols);
        for &i in ids {
            assert!(i < t.rows, "gather index {i} out of range for {} rows", t.rows);
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(ids.len(), t.cols, data);
        self.push(out, Op::Gather { table, ids: ids.to_vec() })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        assert!(start < end && end <= xv.rows);
        let out = Tensor::new(end - start, xv.cols, xv.data[start * xv.cols..end * xv.cols].to_vec());
        self.push(out, Op::SliceRows { x, start })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        assert!(start < end && end <= xv.cols);
        let data = xv.data.chunks_exact(xv.cols).flat_map(|r| r[start..end].iter().copied()).collect();
        let out = Tensor::new(xv.rows, end - start, data);
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols);
            rows += v.rows;
            data.extend_from_slice(&v.data);
        }
        self.push(Tensor::new(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.rows, rows);
                data.extend_from_slice(v.row(r));
            }
        }
        self.push(Tensor::new(rows, cols, data), Op::ConcatCols(parts.to_vec()))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data.iter().sum::<f64>() / xv.data.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// Mean over every `win_r × win_c` window fully inside `x` (stride 1).
    pub fn window_mean(&mut self, x: Var, win_r: usize, win_c: usize) -> Var {
        let out = window_mean(self.value(x), win_r, win_c);
        self.push(out, Op::WindowMean { x, win_r, win_c })
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`; rows with `None` are excluded.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len());
        let mut probs = lv.data.clone();
        let mut total = 0.0;
        let mut count = 0;
        for ((r, l), t) in probs.chunks_exact_mut(lv.cols).zip(lv.data.chunks_exact(lv.cols)).zip(targets) {
            softmax_in_place(r);
            if let Some(t) = *t {
                assert!(t < lv.cols);
                total += log_sum_exp(l) - l[t];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count })
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<(), NeuralError> {
        if loss.0 >= self.nodes.len() {
            return Err(NeuralError::NoForward);
        }
        let lv = self.value(loss);
        if lv.rows != 1 || lv.cols != 1 {
            return Err(NeuralError::NonScalarLoss(lv.rows, lv.cols));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameter-leaf gradients laid out like `store`, without touching it.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                for (acc, v) in out[id.0].iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
        out
    }

    /// Adds parameter-leaf gradients into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                for (acc, v) in store.get_mut(*id).grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        let n = self.nodes[v.0].value.data.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // Ops whose backward needs this node's value take a copy up front.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Input);
        match &op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                let gt = Tensor::new(av.rows, bv.cols, g.to_vec());
                let ga = matmul_bt(&gt, &bv);
                let gb = matmul_at(&av, &gt);
                self.acc(*a, |s| add_into(s, &ga.data));
                self.acc(*b, |s| add_into(s, &gb.data));
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                let gt = Tensor::new(av.rows, bv.rows, g.to_vec());
                let ga = matmul(&gt, &bv);
                let gb = matmul_at(&gt, &av);
                self.acc(*a, |s| add_into(s, &ga.data));
                self.acc(*b, |s| add_into(s, &gb.data));
            }
            Op::Add(a, b) => {
                self.acc(*a, |s| add_into(s, g));
                self.acc(*b, |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                self.acc(*a, |s| add_into(s, g));
                self.acc(*b, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data.clone(), self.value(*b).data.clone());
                self.acc(*a, |s| s.iter_mut().zip(g).zip(&bv).for_each(|((x, y), q)| *x += y * q));
                self.acc(*b, |s| s.iter_mut().zip(g).zip(&av).for_each(|((x, y), p)| *x += y * p));
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data.clone(), self.value(*b).data.clone());
                self.acc(*a, |s| s.iter_mut().zip(g).zip(&bv).for_each(|((x, y), q)| *x += y / q));
                self.acc(*b, |s| {
                    s.iter_mut().zip(g).zip(av.iter().zip(&bv)).for_each(|((x, y), (p, q))| *x -= y * p / (q * q))
                });
            }
            Op::AddRow(a, row) => {
                let cols = self.value(*a).cols;
                self.acc(*a, |s| add_into(s, g));
                self.acc(*row, |s| {
                    for gr in g.chunks_exact(cols) {
                        add_into(s, gr);
                    }
                });
            }
            Op::Scale(a, k) => {
                let k = *k;
                self.acc(*a, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += k * y));
            }
            Op::AddScalar(a) => self.acc(*a, |s| add_into(s, g)),
            Op::Gelu(a) => {
                let av = self.value(*a).data.clone();
                self.acc(*a, |s| s.iter_mut().zip(g).zip(&av).for_each(|((x, y), v)| *x += y * gelu_grad(*v)));
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (self.value(*x).clone(), self.value(*gain).data.clone());
                let c = xv.cols;
                let mut gx = vec![0.0; xv.data.len()];
                let mut gg = vec![0.0; c];
                for (r, inv) in inv_rms.iter().enumerate() {
                    let xr = &xv.data[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    // y = x * inv * w ; dy/dx = inv*w - x * inv^3 * (Σ g*w*x)/c
                    let dot: f64 = (0..c).map(|j| gr[j] * gv[j] * xr[j]).sum();
                    for j in 0..c {
                        gg[j] += gr[j] * xr[j] * inv;
                        gx[r * c + j] = gr[j] * gv[j] * inv - xr[j] * inv.powi(3) * dot / c as f64;
                    }
                }
                self.acc(*x, |s| add_into(s, &gx));
                self.acc(*gain, |s| add_into(s, &gg));
            }
            Op::Softmax { x } => {
                let p = &self.nodes[i].value;
                let c = p.cols;
                let mut gx = vec![0.0; p.data.len()];
                for (r, (pr, gr)) in p.data.chunks_exact(c).zip(g.chunks_exact(c)).enumerate() {
                    let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[r * c + j] = pr[j] * (gr[j] - dot);
                    }
                }
                self.acc(*x, |s| add_into(s, &gx));
            }
            Op::Gather { table, ids } => {
                let c = self.value(*table).cols;
                self.acc(*table, |s| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut s[id * c..(id + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = self.value(*x).cols;
                let off = start * c;
                self.acc(*x, |s| add_into(&mut s[off..off + g.len()], g));
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).cols;
                let w = self.nodes[i].value.cols;
                let start = *start;
                self.acc(*x, |s| {
                    for (r, gr) in g.chunks_exact(w).enumerate() {
                        add_into(&mut s[r * c + start..r * c + start + w], gr);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).data.len();
                    self.acc(p, |s| add_into(s, &g[off..off + n]));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].value.cols;
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols;
                    self.acc(p, |s| {
                        for (r, sr) in s.chunks_exact_mut(w).enumerate() {
                            add_into(sr, &g[r * total + col..r * total + col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).data.len() as f64;
                let d = g[0] / n;
                self.acc(*x, |s| s.iter_mut().for_each(|v| *v += d));
            }
            Op::WindowMean { x, win_r, win_c } => {
                let (win_r, win_c) = (*win_r, *win_c);
                let xc = self.value(*x).cols;
                let oc = self.nodes[i].value.cols;
                let scale = 1.0 / (win_r * win_c) as f64;
                self.acc(*x, |s| {
                    for (oi, &gv) in g.iter().enumerate() {
                        let (r0, c0) = (oi / oc, oi % oc);
                        for r in r0..r0 + win_r {
                            for v in &mut s[r * xc + c0..r * xc + c0 + win_c] {
                                *v += gv * scale;
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if *count > 0 {
                    let c = self.value(*logits).cols;
                    let scale = g[0] / *count as f64;
                    let mut gl = vec![0.0; probs.len()];
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for j in 0..c {
                                gl[r * c + j] = scale * (probs[r * c + j] - if j == t { 1.0 } else { 0.0 });
                            }
                        }
                    }
                    self.acc(*logits, |s| add_into(s, &gl));
                }
            }
        }
        self.nodes[i].op = op;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn log_sum_exp(r: &[f64]) -> f64 {
    let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(r: &mut [f64]) {
    let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in r.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in r.iter_mut() {
        *v /= sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        let orow = &mut out[i * b.cols..(i + 1) * b.cols];
        for (k, &av) in a.row(i).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(b.row(k)) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(a.rows, b.cols, out)
}

/// a · bᵀ
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Vec::with_capacity(a.rows * b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.push(ar.iter().zip(b.row(j)).map(|(x, y)| x * y).sum());
        }
    }
    Tensor::new(a.rows, b.rows, out)
}

/// aᵀ · b
pub fn matmul_at(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = vec![0.0; a.cols * b.cols];
    for r in 0..a.rows {
        let br = b.row(r);
        for (i, &av) in a.row(r).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, bv) in out[i * b.cols..(i + 1) * b.cols].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(a.cols, b.cols, out)
}

pub fn window_mean(x: &Tensor, win_r: usize, win_c: usize) -> Tensor {
    assert!(win_r >= 1 && win_c >= 1 && win_r <= x.rows && win_c <= x.cols);
    let (or, oc) = (x.rows - win_r + 1, x.cols - win_c + 1);
    let scale = 1.0 / (win_r * win_c) as f64;
    let mut out = Vec::with_capacity(or * oc);
    for r0 in 0..or {
        for c0 in 0..oc {
            let mut s = 0.0;
            for r in r0..r0 + win_r {
                s += x.data[r * x.cols + c0..r * x.cols + c0 + win_c].iter().sum::<f64>();
            }
            out.push(s * scale);
        }
    }
    Tensor::new(or, oc, out)
}
