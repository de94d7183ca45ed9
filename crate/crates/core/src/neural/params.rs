//! Parameter storage, the AdamW optimizer, learning-rate schedules and the
//! `VTKM` checkpoint container.
//!
//! ```text
//! "VTKM" | version u32 = 1 | kind u32 | dtype u32 (1 = f32, 2 = f64)
//!        | n_hyper u32 | n_hyper × u32 hyperparameters
//!        | n_params u32 | per parameter: rows u32, cols u32, rows*cols values (LE)
//! ```

use std::io::{Read, Write};

use rand_distr::{Distribution, StandardNormal};

use super::NeuralError;
use crate::featureio::{check_magic, FormatError, FORMAT_VERSION};
use crate::rng::SplitMix64;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"VTKM";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    /// Subject to decoupled weight decay.
    pub decay: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, value: Vec<f64>, decay: bool) -> ParamId {
        assert_eq!(value.len(), rows * cols);
        self.params.push(Param {
            name: name.into(),
            rows,
            cols,
            grad: vec![0.0; value.len()],
            value,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    /// Gaussian init with standard deviation `std`.
    pub fn add_normal(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut SplitMix64) -> ParamId {
        let value = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        self.add(name, rows, cols, value, true)
    }

    pub fn add_const(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, rows, cols, vec![v; rows * cols], false)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }

    /// `grad += s * other`, parameter by parameter.
    pub fn add_grads(&mut self, other: &[Vec<f64>], s: f64) {
        for (p, o) in self.params.iter_mut().zip(other) {
            p.grad.iter_mut().zip(o).for_each(|(g, v)| *g += s * v);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.iter().flat_map(|p| &p.grad).map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Rounds every value through f32, matching what an f32 checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            p.value.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
}

/// Decoded checkpoint contents, before a model re-binds them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: u32,
    pub dtype: Dtype,
    pub hyper: Vec<u32>,
    pub tensors: Vec<(usize, usize, Vec<f64>)>,
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    kind: u32,
    hyper: &[u32],
    store: &ParamStore,
    dtype: Dtype,
) -> Result<(), FormatError> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&kind.to_le_bytes())?;
    w.write_all(&(dtype as u32).to_le_bytes())?;
    w.write_all(&(hyper.len() as u32).to_le_bytes())?;
    for h in hyper {
        w.write_all(&h.to_le_bytes())?;
    }
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, p) in store.iter() {
        w.write_all(&(p.rows as u32).to_le_bytes())?;
        w.write_all(&(p.cols as u32).to_le_bytes())?;
        for &v in &p.value {
            match dtype {
                Dtype::F32 => w.write_all(&(v as f32).to_le_bytes())?,
                Dtype::F64 => w.write_all(&v.to_le_bytes())?,
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R, what: &'static str) -> Result<[u8; N], FormatError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => FormatError::Truncated(what),
        _ => FormatError::Io(e),
    })?;
    Ok(b)
}

fn read_u32<R: Read>(r: &mut R, what: &'static str) -> Result<u32, FormatError> {
    Ok(u32::from_le_bytes(read_array(r, what)?))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint, FormatError> {
    check_magic(&mut r, CHECKPOINT_MAGIC)?;
    let kind = read_u32(&mut r, "checkpoint kind")?;
    let dtype = match read_u32(&mut r, "dtype")? {
        1 => Dtype::F32,
        2 => Dtype::F64,
        other => return Err(FormatError::InvalidHeader(format!("unknown dtype code {other}"))),
    };
    let n_hyper = read_u32(&mut r, "hyperparameter count")? as usize;
    let hyper = (0..n_hyper).map(|_| read_u32(&mut r, "hyperparameters")).collect::<Result<Vec<_>, _>>()?;
    let n_params = read_u32(&mut r, "parameter count")? as usize;
    let mut tensors = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let rows = read_u32(&mut r, "parameter shape")? as usize;
        let cols = read_u32(&mut r, "parameter shape")? as usize;
        let mut value = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            value.push(match dtype {
                Dtype::F32 => f32::from_le_bytes(read_array(&mut r, "parameter values")?) as f64,
                Dtype::F64 => f64::from_le_bytes(read_array(&mut r, "parameter values")?),
            });
        }
        tensors.push((rows, cols, value));
    }
    Ok(Checkpoint { kind, dtype, hyper, tensors })
}

impl Checkpoint {
    /// Copies tensors into a freshly constructed store of the same layout.
    pub fn bind(&self, store: &mut ParamStore) -> Result<(), NeuralError> {
        if self.tensors.len() != store.len() {
            return Err(NeuralError::CheckpointMismatch(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (p, (rows, cols, value)) in store.params.iter_mut().zip(&self.tensors) {
            if (p.rows, p.cols) != (*rows, *cols) {
                return Err(NeuralError::CheckpointMismatch(format!(
                    "{}: expected {}x{}, found {rows}x{cols}",
                    p.name, p.rows, p.cols
                )));
            }
            p.value.copy_from_slice(value);
        }
        Ok(())
    }
}

/// Optimizer and schedule settings shared by both trainable models.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Cosine decay from `learning_rate` to `min_lr_ratio * learning_rate`.
    pub cosine: bool,
    pub min_lr_ratio: f64,
    /// Examples per step; 0 means the whole corpus.
    pub batch_size: usize,
    pub clip_grad_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 0,
            cosine: false,
            min_lr_ratio: 0.1,
            batch_size: 0,
            clip_grad_norm: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if !self.cosine {
            return self.learning_rate;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let floor = self.min_lr_ratio * self.learning_rate;
        floor + 0.5 * (self.learning_rate - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            m: store.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: store.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, cfg: &TrainConfig, lr: f64) {
        if let Some(max) = cfg.clip_grad_norm {
            let norm = store.grad_norm();
            if norm > max {
                store.scale_grads(max / norm);
            }
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for ((p, m), v) in store.params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
                if p.decay {
                    p.value[i] -= lr * cfg.weight_decay * p.value[i];
                }
                p.value[i] -= lr * update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig { steps: 100, warmup_steps: 10, cosine: true, learning_rate: 1.0, min_lr_ratio: 0.0, ..Default::default() };
        assert!((cfg.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at(10) - 1.0).abs() < 1e-12);
        assert!((cfg.lr_at(55) - 0.5).abs() < 1e-12);
        assert!(cfg.lr_at(100).abs() < 1e-12);
    }

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", 1, 2, vec![3.0, -2.0], false);
        let cfg = TrainConfig { steps: 2000, learning_rate: 0.05, cosine: true, min_lr_ratio: 0.0, clip_grad_norm: None, ..Default::default() };
        let mut opt = AdamW::new(&store);
        for step in 0..cfg.steps {
            store.zero_grads();
            let p = store.get_mut(id);
            for i in 0..2 {
                p.grad[i] = 2.0 * (p.value[i] - 1.0);
            }
            opt.step(&mut store, &cfg, cfg.lr_at(step));
        }
        assert!(store.get(id).value.iter().all(|v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn checkpoint_roundtrip_both_dtypes() {
        let mut rng = SplitMix64::new(5);
        let mut store = ParamStore::new();
        store.add_normal("w", 3, 4, 0.7, &mut rng);
        store.add_const("g", 1, 4, 1.0);
        for dtype in [Dtype::F64, Dtype::F32] {
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, 7, &[1, 2, 3], &store, dtype).unwrap();
            let ck = read_checkpoint(&buf[..]).unwrap();
            assert_eq!(ck.kind, 7);
            assert_eq!(ck.hyper, vec![1, 2, 3]);
            let mut fresh = store.clone();
            fresh.get_mut(ParamId(0)).value.iter_mut().for_each(|v| *v = 0.0);
            ck.bind(&mut fresh).unwrap();
            let mut expected = store.clone();
            if dtype == Dtype::F32 {
                expected.round_to_f32();
            }
            assert_eq!(fresh, expected);
            buf.truncate(buf.len() - 1);
            assert!(matches!(read_checkpoint(&buf[..]), Err(FormatError::Truncated(_))));
        }
    }
}
