//! src/dst partitioning, row-normalized cosine similarity, best-match
//! extraction, top-r selection, and multiply-add accounting for matching.

use std::cmp::Ordering;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensors::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimilarityError {
    #[error("dst ratio {0} must lie strictly between 0 and 1")]
    InvalidRatio(f64),
    #[error("degenerate partition: {dst} dst and {src} src tokens")]
    DegeneratePartition { dst: usize, src: usize },
    #[error("frame_len {frame_len} does not divide sequence length {seq_len}")]
    Geometry { seq_len: usize, frame_len: usize },
    #[error("merge budget {requested} exceeds {available} available matches")]
    Budget { requested: usize, available: usize },
    #[error("layout error: {0}")]
    Layout(String),
}

/// Total zero-norm rows seen by [`cosine_sim`] in this process.
static ZERO_NORM_WARNINGS: AtomicUsize = AtomicUsize::new(0);

pub fn zero_norm_warnings() -> usize {
    ZERO_NORM_WARNINGS.load(AtomicOrdering::Relaxed)
}

// ---------------------------------------------------------------------------
// Partition
// ---------------------------------------------------------------------------

/// How dst tokens are picked inside each frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PartitionMode {
    /// Frame position `j` is dst iff `j % stride == 0`.
    #[default]
    Stride,
    /// `round(frame_len / stride)` positions per frame drawn from a seeded RNG.
    Random { seed: u64 },
}

/// Disjoint split of `[0, N)` into dst and src tokens, defined on original
/// token indices so every block layout sees the same split.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    is_dst: Vec<bool>,
    dst: Vec<usize>,
    src: Vec<usize>,
    dst_ratio: f64,
    stride: usize,
    anchor_first_frame: bool,
}

impl Partition {
    pub fn seq_len(&self) -> usize {
        self.is_dst.len()
    }

    pub fn dst_indices(&self) -> &[usize] {
        &self.dst
    }

    pub fn src_indices(&self) -> &[usize] {
        &self.src
    }

    #[inline]
    pub fn is_dst(&self, token: usize) -> bool {
        self.is_dst[token]
    }

    pub fn dst_ratio(&self) -> f64 {
        self.dst_ratio
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn anchor_first_frame(&self) -> bool {
        self.anchor_first_frame
    }
}

/// Converts a dst ratio into the per-frame stride `round(1/α)`.
pub fn dst_stride(dst_ratio: f64) -> Result<usize, SimilarityError> {
    if !(dst_ratio > 0.0 && dst_ratio < 1.0) {
        return Err(SimilarityError::InvalidRatio(dst_ratio));
    }
    Ok((1.0 / dst_ratio).round() as usize)
}

pub fn partition_src_dst(
    seq_len: usize,
    frame_len: usize,
    dst_ratio: f64,
    anchor_first_frame: bool,
    mode: PartitionMode,
) -> Result<Partition, SimilarityError> {
    let stride = dst_stride(dst_ratio)?;
    if frame_len == 0 || seq_len % frame_len != 0 {
        return Err(SimilarityError::Geometry { seq_len, frame_len });
    }
    let num_frames = seq_len / frame_len;
    let mut is_dst = vec![false; seq_len];
    match mode {
        PartitionMode::Stride => {
            for (i, d) in is_dst.iter_mut().enumerate() {
                *d = (i % frame_len) % stride == 0;
            }
        }
        PartitionMode::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let per_frame = ((frame_len as f64 / stride as f64).round() as usize).min(frame_len);
            for f in 0..num_frames {
                for j in rand::seq::index::sample(&mut rng, frame_len, per_frame) {
                    is_dst[f * frame_len + j] = true;
                }
            }
        }
    }
    if anchor_first_frame {
        is_dst[..frame_len.min(seq_len)].iter_mut().for_each(|d| *d = true);
    }
    let (mut dst, mut src) = (Vec::new(), Vec::new());
    for (i, &d) in is_dst.iter().enumerate() {
        if d {
            dst.push(i);
        } else {
            src.push(i);
        }
    }
    if dst.is_empty() || src.is_empty() {
        return Err(SimilarityError::DegeneratePartition { dst: dst.len(), src: src.len() });
    }
    Ok(Partition { is_dst, dst, src, dst_ratio, stride, anchor_first_frame })
}

// ---------------------------------------------------------------------------
// Cosine similarity
// ---------------------------------------------------------------------------

/// `N_s × N_d` cosine similarities with maps back to token indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SimMatrix {
    values: Vec<f32>,
    rows: usize,
    cols: usize,
    pub src_index: Vec<usize>,
    pub dst_index: Vec<usize>,
    /// Rows (src or dst) with zero norm, treated as similarity 0.
    pub zero_norm_rows: usize,
}

impl SimMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Test hook: overwrites a single entry.
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.values[i * self.cols + j] = v;
    }

    /// Replaces the default `0..n` index maps.
    pub fn with_indices(mut self, src_index: Vec<usize>, dst_index: Vec<usize>) -> Self {
        assert_eq!(src_index.len(), self.rows);
        assert_eq!(dst_index.len(), self.cols);
        self.src_index = src_index;
        self.dst_index = dst_index;
        self
    }
}

/// Unit-normalizes one row in `f64`. Zero rows stay zero and report `false`.
pub fn normalize_row(row: &[f32], out: &mut [f64]) -> bool {
    let norm = row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 {
        out.iter_mut().for_each(|o| *o = 0.0);
        return false;
    }
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x as f64 / norm;
    }
    true
}

fn normalized(m: &Matrix) -> (Vec<f64>, usize) {
    let mut out = vec![0.0; m.rows() * m.cols()];
    let mut zeros = 0;
    for (i, chunk) in out.chunks_exact_mut(m.cols().max(1)).enumerate().take(m.rows()) {
        if !normalize_row(m.row(i), chunk) {
            zeros += 1;
        }
    }
    (out, zeros)
}

/// Dot product of two unit rows, rounded to `f32` and clamped to `[-1, 1]`.
#[inline]
pub fn unit_dot(a: &[f64], b: &[f64]) -> f32 {
    let s: f64 = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    (s as f32).clamp(-1.0, 1.0)
}

/// `RowNorm(src) · RowNorm(dst)ᵀ`. Each entry depends only on its own pair of
/// rows, so any sub-block recomputed from the same rows is bit-identical.
pub fn cosine_sim(src: &Matrix, dst: &Matrix) -> SimMatrix {
    assert_eq!(src.cols(), dst.cols(), "src and dst widths differ");
    let d = src.cols();
    let (sn, sz) = normalized(src);
    let (dn, dz) = normalized(dst);
    let zeros = sz + dz;
    if zeros > 0 {
        ZERO_NORM_WARNINGS.fetch_add(zeros, AtomicOrdering::Relaxed);
    }
    let (rows, cols) = (src.rows(), dst.rows());
    let mut values = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let a = &sn[i * d..(i + 1) * d];
        for j in 0..cols {
            values.push(unit_dot(a, &dn[j * d..(j + 1) * d]));
        }
    }
    SimMatrix {
        values,
        rows,
        cols,
        src_index: (0..rows).collect(),
        dst_index: (0..cols).collect(),
        zero_norm_rows: zeros,
    }
}

// ---------------------------------------------------------------------------
// Matching
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub src: usize,
    pub dst: usize,
    pub score: f32,
}

/// One best-match pair per src row plus the top-r selection flags.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
    pub selected: Vec<bool>,
}

impl MatchSet {
    pub fn from_pairs(pairs: Vec<Match>) -> Self {
        let selected = vec![false; pairs.len()];
        Self { pairs, selected }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Number of selected pairs.
    pub fn r(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    pub fn selected_pairs(&self) -> impl Iterator<Item = &Match> {
        self.pairs.iter().zip(&self.selected).filter(|(_, &s)| s).map(|(p, _)| p)
    }

    pub fn selected_scores(&self) -> Vec<f32> {
        self.selected_pairs().map(|p| p.score).collect()
    }

    /// Appends another set, keeping its selection flags.
    pub fn extend(&mut self, other: MatchSet) {
        self.pairs.extend(other.pairs);
        self.selected.extend(other.selected);
    }
}

/// Per src row, the argmax dst column; ties go to the lowest column.
pub fn best_match(sim: &SimMatrix) -> MatchSet {
    if sim.cols() == 0 {
        return MatchSet::default();
    }
    let pairs = (0..sim.rows())
        .map(|i| {
            let row = sim.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            Match { src: sim.src_index[i], dst: sim.dst_index[best], score: row[best] }
        })
        .collect();
    MatchSet::from_pairs(pairs)
}

/// Descending score, ties to the lower src index.
pub fn match_order(a: &Match, b: &Match) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.src.cmp(&b.src))
}

/// Flags the `r` highest-scoring pairs. Any previous selection is replaced.
pub fn select_top_r(m: &MatchSet, r: usize) -> Result<MatchSet, SimilarityError> {
    if r > m.len() {
        return Err(SimilarityError::Budget { requested: r, available: m.len() });
    }
    let mut order: Vec<usize> = (0..m.len()).collect();
    order.sort_by(|&a, &b| match_order(&m.pairs[a], &m.pairs[b]));
    let mut selected = vec![false; m.len()];
    for &i in order.iter().take(r) {
        selected[i] = true;
    }
    Ok(MatchSet { pairs: m.pairs.clone(), selected })
}

// ---------------------------------------------------------------------------
// Cost model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostLayout {
    Global,
    Blocked { block_size: usize },
}

/// Multiply-adds spent building similarity matrices.
///
/// With `α = 1/s` (the partition stride), a block of `n_b` tokens costs
/// `α(1−α)·n_b²·d_head`, and `N/n_b` blocks cost `α(1−α)·N·n_b·d_head`.
/// The product is evaluated in integers and floored once at the end, so
/// `N` need not be a multiple of `n_b`.
pub fn matching_cost(
    seq_len: usize,
    head_dim: usize,
    dst_ratio: f64,
    layout: CostLayout,
) -> Result<u64, SimilarityError> {
    let s = dst_stride(dst_ratio)? as u128;
    let n_b = match layout {
        CostLayout::Global => seq_len,
        CostLayout::Blocked { block_size } => {
            if block_size == 0 || block_size > seq_len {
                return Err(SimilarityError::Layout(format!(
                    "block size {block_size} outside [1, {seq_len}]"
                )));
            }
            block_size
        }
    };
    let num = seq_len as u128 * n_b as u128 * head_dim as u128 * (s - 1);
    Ok((num / (s * s)) as u64)
}
