//! K-means codebook training and nearest-center tokenization.
//!
//! Training runs k-means++ seeding followed by full-batch Lloyd iterations.
//! Inputs are expected to be mean-normalized already (see
//! [`crate::normalizer`]); the quantizer itself does not normalize.
//!
//! Assignment ties go to the smallest center index, both during training and
//! in [`tokenize`]. The assignment step is data-parallel over frames; the
//! center update is a sequential, fixed-order reduction, so results do not
//! depend on the thread count.
//!
//! # `VTKC` layout
//!
//! ```text
//! "VTKC" | version u32 = 1 | k u32 | dim u32 | k*dim f32 centers (row-major, LE)
//! ```

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::featureio::{self, FeatureError, FeatureMatrix, FormatError, FORMAT_VERSION};
use crate::rng::SplitMix64;

pub const CODEBOOK_MAGIC: [u8; 4] = *b"VTKC";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantizerError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("need at least k={k} distinct frames, found {distinct}")]
    TooFewDistinct { k: usize, distinct: usize },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("non-finite value in frame {frame}")]
    NonFinite { frame: usize },
    #[error("dimension mismatch: codebook dim {expected}, features dim {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("token {token} at index {index} is out of range for vocab size {vocab_size}")]
    TokenOutOfRange {
        index: usize,
        token: u32,
        vocab_size: u32,
    },
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// Token IDs of one utterance with the vocabulary they are drawn from.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    tokens: Vec<u32>,
    vocab_size: u32,
}

impl TokenSequence {
    pub fn new(tokens: Vec<u32>, vocab_size: u32) -> Result<Self, QuantizerError> {
        let seq = Self { tokens, vocab_size };
        seq.validate()
            .map_err(|(index, token)| QuantizerError::TokenOutOfRange {
                index,
                token,
                vocab_size,
            })?;
        Ok(seq)
    }

    /// First `(index, token)` that is out of range, if any.
    pub fn validate(&self) -> Result<(), (usize, u32)> {
        match self.tokens.iter().position(|&t| t >= self.vocab_size) {
            Some(i) => Err((i, self.tokens[i])),
            None => Ok(()),
        }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<u32> {
        self.tokens
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// K cluster centers; doubles as the token → vector lookup table.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    dim: usize,
    centers: Vec<f64>,
    /// Number of frames the codebook was fit on (0 when loaded from a file).
    pub trained_on_frames: u64,
    /// Final training inertia, when known.
    pub inertia: Option<f64>,
}

impl Codebook {
    pub fn from_centers<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, QuantizerError> {
        let m = FeatureMatrix::from_rows(rows)?;
        Ok(Self {
            k: m.frames(),
            dim: m.dim(),
            centers: m.into_data(),
            trained_on_frames: 0,
            inertia: None,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn center(&self, j: usize) -> &[f64] {
        &self.centers[j * self.dim..(j + 1) * self.dim]
    }

    pub fn centers(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.centers.chunks_exact(self.dim)
    }

    /// Index and squared distance of the nearest center; ties → smallest index.
    pub fn nearest(&self, x: &[f64]) -> (u32, f64) {
        nearest_center(&self.centers, self.dim, x)
    }
}

#[inline]
fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_center(centers: &[f64], dim: usize, x: &[f64]) -> (u32, f64) {
    let mut best = (0u32, f64::INFINITY);
    for (j, c) in centers.chunks_exact(dim).enumerate() {
        let d = squared_distance(x, c);
        if d < best.1 {
            best = (j as u32, d);
        }
    }
    best
}

fn assign(points: &[f64], centers: &[f64], dim: usize) -> Vec<(u32, f64)> {
    points
        .par_chunks_exact(dim)
        .with_min_len(256)
        .map(|x| nearest_center(centers, dim, x))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once the relative inertia improvement drops below this.
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            k: 300,
            seed: 0,
            max_iters: 300,
            tol: 1e-6,
        }
    }
}

/// Training outcome with the per-iteration inertia trace.
#[derive(Debug, Clone)]
pub struct KMeansRun {
    pub codebook: Codebook,
    /// Inertia after each assignment step, starting from the seeded centers.
    pub inertia_history: Vec<f64>,
    /// Final assignment of every training frame.
    pub assignments: Vec<u32>,
}

pub fn train_kmeans<'a>(
    corpus: impl IntoIterator<Item = &'a FeatureMatrix>,
    params: &KMeansParams,
) -> Result<Codebook, QuantizerError> {
    train_kmeans_traced(corpus, params).map(|run| run.codebook)
}

fn canonical_bits(row: &[f64]) -> Vec<u64> {
    // +0.0 and -0.0 are the same point.
    row.iter().map(|v| (v + 0.0).to_bits()).collect()
}

pub fn train_kmeans_traced<'a>(
    corpus: impl IntoIterator<Item = &'a FeatureMatrix>,
    params: &KMeansParams,
) -> Result<KMeansRun, QuantizerError> {
    let k = params.k;
    if k == 0 {
        return Err(QuantizerError::ZeroK);
    }
    let mut dim = None;
    let mut points = Vec::new();
    for m in corpus {
        match dim {
            None => dim = Some(m.dim()),
            Some(d) if d != m.dim() => {
                return Err(QuantizerError::DimMismatch {
                    expected: d,
                    got: m.dim(),
                })
            }
            _ => {}
        }
        points.extend_from_slice(m.data());
    }
    let dim = dim.ok_or(QuantizerError::EmptyCorpus)?;
    if let Some(i) = points.iter().position(|v| !v.is_finite()) {
        return Err(QuantizerError::NonFinite { frame: i / dim });
    }
    let n = points.len() / dim;
    let distinct: HashSet<Vec<u64>> = points.chunks_exact(dim).map(canonical_bits).collect();
    if distinct.len() < k {
        return Err(QuantizerError::TooFewDistinct {
            k,
            distinct: distinct.len(),
        });
    }

    let mut rng = SplitMix64::new(params.seed);
    let mut centers = kmeans_plus_plus(&points, dim, k, &mut rng);
    let mut assignment = assign(&points, &centers, dim);
    reseed_empty(&points, dim, &mut centers, &mut assignment);

    let mut history = vec![total_inertia(&assignment)];
    for _ in 0..params.max_iters {
        let prev = *history.last().expect("non-empty");
        let prev_centers = centers.clone();
        update_centers(&points, dim, &assignment, &mut centers);
        let mut next = assign(&points, &centers, dim);
        reseed_empty(&points, dim, &mut centers, &mut next);
        let inertia = total_inertia(&next);
        if inertia > prev {
            // Only reachable through rounding once converged; keep the better state.
            centers = prev_centers;
            break;
        }
        assignment = next;
        history.push(inertia);
        if prev == 0.0 || (prev - inertia) <= params.tol * prev {
            break;
        }
    }

    let inertia = *history.last().expect("non-empty");
    Ok(KMeansRun {
        codebook: Codebook {
            k,
            dim,
            centers,
            trained_on_frames: n as u64,
            inertia: Some(inertia),
        },
        inertia_history: history,
        assignments: assignment.into_iter().map(|(j, _)| j).collect(),
    })
}

fn total_inertia(assignment: &[(u32, f64)]) -> f64 {
    assignment.iter().map(|&(_, d)| d).sum()
}

/// D²-weighted seeding. Points already chosen have weight zero, so with at
/// least k distinct points every center is distinct.
fn kmeans_plus_plus(points: &[f64], dim: usize, k: usize, rng: &mut SplitMix64) -> Vec<f64> {
    let n = points.len() / dim;
    let mut centers = Vec::with_capacity(k * dim);
    let first = rng.below(n as u64) as usize;
    centers.extend_from_slice(&points[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = points
        .par_chunks_exact(dim)
        .map(|x| squared_distance(x, &centers[..dim]))
        .collect();
    while centers.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let target = rng.next_f64() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            acc += w;
            if acc > target && w > 0.0 {
                pick = Some(i);
                break;
            }
        }
        // Rounding can leave `target` above the running sum; fall back to the last positive weight.
        let pick = pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("distinct points remain"));
        let c = points[pick * dim..(pick + 1) * dim].to_vec();
        d2.par_iter_mut()
            .zip(points.par_chunks_exact(dim))
            .for_each(|(d, x)| *d = d.min(squared_distance(x, &c)));
        centers.extend_from_slice(&c);
    }
    centers
}

fn update_centers(points: &[f64], dim: usize, assignment: &[(u32, f64)], centers: &mut [f64]) {
    let k = centers.len() / dim;
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (x, &(j, _)) in points.chunks_exact(dim).zip(assignment) {
        let j = j as usize;
        counts[j] += 1;
        for (s, v) in sums[j * dim..(j + 1) * dim].iter_mut().zip(x) {
            *s += v;
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            let inv = 1.0 / counts[j] as f64;
            for d in 0..dim {
                centers[j * dim + d] = sums[j * dim + d] * inv;
            }
        }
    }
}

/// Moves every empty center onto the frame farthest from its own center,
/// taking frames only from clusters that keep at least one member.
fn reseed_empty(points: &[f64], dim: usize, centers: &mut [f64], assignment: &mut Vec<(u32, f64)>) {
    let k = centers.len() / dim;
    for _ in 0..=k {
        let mut counts = vec![0usize; k];
        for &(j, _) in assignment.iter() {
            counts[j as usize] += 1;
        }
        let empty: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
        if empty.is_empty() {
            return;
        }
        let mut taken = HashSet::new();
        for j in empty {
            let mut best: Option<(usize, f64)> = None;
            for (i, &(owner, d)) in assignment.iter().enumerate() {
                if d > 0.0 && counts[owner as usize] > 1 && !taken.contains(&i) && best.is_none_or(|(_, bd)| d > bd) {
                    best = Some((i, d));
                }
            }
            let Some((i, _)) = best else { return };
            taken.insert(i);
            counts[assignment[i].0 as usize] -= 1;
            centers[j * dim..(j + 1) * dim].copy_from_slice(&points[i * dim..(i + 1) * dim]);
        }
        *assignment = assign(points, centers, dim);
    }
}

/// Nearest-center token for every frame; output length equals the frame count.
pub fn tokenize(features: &FeatureMatrix, codebook: &Codebook) -> Result<TokenSequence, QuantizerError> {
    if features.dim() != codebook.dim {
        return Err(QuantizerError::DimMismatch {
            expected: codebook.dim,
            got: features.dim(),
        });
    }
    let tokens = assign(features.data(), &codebook.centers, codebook.dim)
        .into_iter()
        .map(|(j, _)| j)
        .collect();
    Ok(TokenSequence {
        tokens,
        vocab_size: codebook.k as u32,
    })
}

/// Sum of squared distances from each frame to its nearest center.
pub fn quantization_error(features: &FeatureMatrix, codebook: &Codebook) -> Result<f64, QuantizerError> {
    if features.dim() != codebook.dim {
        return Err(QuantizerError::DimMismatch {
            expected: codebook.dim,
            got: features.dim(),
        });
    }
    Ok(total_inertia(&assign(features.data(), &codebook.centers, codebook.dim)))
}

/// Seeded subset of `count` frames drawn without replacement, in corpus order.
pub fn subsample_frames<'a>(
    corpus: impl IntoIterator<Item = &'a FeatureMatrix>,
    count: usize,
    seed: u64,
) -> Result<FeatureMatrix, QuantizerError> {
    let mut dim = None;
    let mut rows: Vec<&[f64]> = Vec::new();
    for m in corpus {
        if let Some(d) = dim {
            if d != m.dim() {
                return Err(QuantizerError::DimMismatch { expected: d, got: m.dim() });
            }
        }
        dim = Some(m.dim());
        rows.extend(m.rows());
    }
    if rows.is_empty() {
        return Err(QuantizerError::EmptyCorpus);
    }
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    let count = count.min(rows.len());
    let mut rng = SplitMix64::new(seed);
    for i in 0..count {
        let j = i + rng.below((idx.len() - i) as u64) as usize;
        idx.swap(i, j);
    }
    let mut chosen = idx[..count].to_vec();
    chosen.sort_unstable();
    let picked: Vec<&[f64]> = chosen.into_iter().map(|i| rows[i]).collect();
    Ok(FeatureMatrix::from_rows(&picked)?)
}

pub fn write_codebook<W: Write>(codebook: &Codebook, mut w: W) -> Result<u64, FormatError> {
    w.write_all(&CODEBOOK_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(codebook.k as u32).to_le_bytes())?;
    w.write_all(&(codebook.dim as u32).to_le_bytes())?;
    featureio::write_f32_block(&mut w, &codebook.centers, codebook.dim)?;
    w.flush()?;
    Ok(16 + 4 * codebook.centers.len() as u64)
}

pub fn read_codebook<R: Read>(mut r: R) -> Result<Codebook, FormatError> {
    featureio::check_magic(&mut r, CODEBOOK_MAGIC)?;
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => FormatError::Truncated("codebook header"),
        _ => FormatError::Io(e),
    })?;
    let k = u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
    let dim = u32::from_le_bytes([b[4], b[5], b[6], b[7]]) as usize;
    if k == 0 || dim == 0 {
        return Err(FormatError::InvalidHeader(format!("k={k}, dim={dim}; both must be positive")));
    }
    let centers = featureio::read_f32_block(&mut r, k * dim, "codebook centers")?;
    if let Some(i) = centers.iter().position(|v| !v.is_finite()) {
        return Err(FormatError::NonFinite { frame: i / dim, dim: i % dim });
    }
    Ok(Codebook {
        k,
        dim,
        centers,
        trained_on_frames: 0,
        inertia: None,
    })
}

pub fn save_codebook(path: &Path, codebook: &Codebook) -> Result<u64, FormatError> {
    write_codebook(codebook, BufWriter::new(File::create(path)?))
}

pub fn load_codebook(path: &Path) -> Result<Codebook, FormatError> {
    read_codebook(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(values: &[f64]) -> FeatureMatrix {
        FeatureMatrix::new(1, values.to_vec()).unwrap()
    }

    /// Exhaustive optimum over all 2-partitions of a tiny 1-D set.
    fn best_two_partition(xs: &[f64]) -> (f64, [f64; 2]) {
        let n = xs.len();
        let mut best = (f64::INFINITY, [0.0, 0.0]);
        for mask in 1u32..(1 << n) - 1 {
            let (mut a, mut b) = (vec![], vec![]);
            for (i, &x) in xs.iter().enumerate() {
                if mask & (1 << i) != 0 { a.push(x) } else { b.push(x) }
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let (ma, mb) = (mean(&a), mean(&b));
            let cost = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>()
                + b.iter().map(|x| (x - mb).powi(2)).sum::<f64>();
            if cost < best.0 {
                best = (cost, [ma.min(mb), ma.max(mb)]);
            }
        }
        best
    }

    #[test]
    fn four_point_instance_matches_enumeration() {
        let xs = [0.0, 0.2, 9.8, 10.0];
        let (cost, centers) = best_two_partition(&xs);
        assert!((cost - 0.04).abs() < 1e-12);
        for seed in 0..10 {
            let cb = train_kmeans([&column(&xs)], &KMeansParams { k: 2, seed, ..Default::default() }).unwrap();
            let mut got = [cb.center(0)[0], cb.center(1)[0]];
            got.sort_by(f64::total_cmp);
            assert!((got[0] - centers[0]).abs() < 1e-12 && (got[1] - centers[1]).abs() < 1e-12, "{got:?}");
            assert!((cb.inertia.unwrap() - cost).abs() < 1e-12);
        }
    }

    #[test]
    fn k1_is_global_mean() {
        let m = FeatureMatrix::from_rows(&[[1.0, 2.0], [3.0, 6.0], [5.0, 1.0]]).unwrap();
        let cb = train_kmeans([&m], &KMeansParams { k: 1, ..Default::default() }).unwrap();
        assert!((cb.center(0)[0] - 3.0).abs() < 1e-12);
        assert!((cb.center(0)[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn k_equal_distinct_points_is_exact() {
        let m = FeatureMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [5.0, 5.0], [0.0, 1.0]]).unwrap();
        let cb = train_kmeans([&m], &KMeansParams { k: 3, seed: 4, ..Default::default() }).unwrap();
        assert_eq!(cb.inertia, Some(0.0));
        for c in cb.centers() {
            assert!(m.rows().any(|r| r == c));
        }
    }

    #[test]
    fn too_few_distinct_points() {
        let m = FeatureMatrix::from_rows(&[[1.0], [1.0], [2.0]]).unwrap();
        let err = train_kmeans([&m], &KMeansParams { k: 3, ..Default::default() }).unwrap_err();
        assert_eq!(err, QuantizerError::TooFewDistinct { k: 3, distinct: 2 });
    }

    #[test]
    fn tokenize_exact_and_tie_rule() {
        let rows: Vec<[f64; 1]> = (0..10).map(|j| [j as f64]).collect();
        let cb = Codebook::from_centers(&rows).unwrap();
        let t = tokenize(&column(&[5.0]), &cb).unwrap();
        assert_eq!(t.tokens(), &[5]);

        let cb = Codebook::from_centers(&[[9.0], [9.0], [0.0], [9.0], [9.0], [9.0], [9.0], [4.0]]).unwrap();
        // 2.0 is equidistant from centers 2 (0.0) and 7 (4.0).
        assert_eq!(tokenize(&column(&[2.0]), &cb).unwrap().tokens(), &[2]);
    }

    #[test]
    fn tokenize_rejects_dim_mismatch() {
        let cb = Codebook::from_centers(&[[0.0, 0.0]]).unwrap();
        assert!(matches!(tokenize(&column(&[1.0]), &cb), Err(QuantizerError::DimMismatch { .. })));
    }

    #[test]
    fn codebook_file_roundtrip_and_size() {
        let mut rng = SplitMix64::new(1);
        let rows: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..32).map(|_| (rng.next_f64() * 4.0 - 2.0) as f32 as f64).collect())
            .collect();
        let cb = Codebook::from_centers(&rows).unwrap();
        let mut buf = Vec::new();
        let n = write_codebook(&cb, &mut buf).unwrap();
        assert_eq!(n as usize, 12 + 4 + 300 * 32 * 4);
        assert_eq!(buf.len(), n as usize);
        assert_eq!(read_codebook(&buf[..]).unwrap(), cb);

        buf.truncate(buf.len() - 3);
        assert!(matches!(read_codebook(&buf[..]), Err(FormatError::Truncated(_))));
        buf[0] = b'Q';
        assert!(matches!(read_codebook(&buf[..]), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn subsample_is_seeded_subset() {
        let m = FeatureMatrix::new(1, (0..100).map(f64::from).collect()).unwrap();
        let a = subsample_frames([&m], 10, 5).unwrap();
        assert_eq!(a, subsample_frames([&m], 10, 5).unwrap());
        assert_eq!(a.frames(), 10);
        assert!(a.data().windows(2).all(|w| w[0] < w[1]));
    }
}
