//! Temporal reordering: stacks spatial blocks of `n_s` tokens from `n_t`
//! consecutive frames into contiguous merging blocks of `n_b = n_s·n_t`.

use thiserror::Error;

use crate::tensors::{Matrix, TokenTensor};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LayoutError {
    #[error("spatial block {n_s} does not divide frame_len {frame_len}")]
    Spatial { n_s: usize, frame_len: usize },
    #[error("temporal span {n_t} does not divide num_frames {num_frames}")]
    Temporal { n_t: usize, num_frames: usize },
    #[error("layout built for {layout} tokens (frame_len {layout_frame_len}), tensor has {tensor} (frame_len {tensor_frame_len})")]
    Mismatch { layout: usize, layout_frame_len: usize, tensor: usize, tensor_frame_len: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    frame_len: usize,
    num_frames: usize,
    n_s: usize,
    n_t: usize,
    perm: Vec<usize>,
    inv_perm: Vec<usize>,
}

impl BlockLayout {
    pub fn build(frame_len: usize, num_frames: usize, n_s: usize, n_t: usize) -> Result<Self, LayoutError> {
        if n_s == 0 || frame_len == 0 || frame_len % n_s != 0 {
            return Err(LayoutError::Spatial { n_s, frame_len });
        }
        if n_t == 0 || num_frames == 0 || num_frames % n_t != 0 {
            return Err(LayoutError::Temporal { n_t, num_frames });
        }
        let n = frame_len * num_frames;
        let mut perm = Vec::with_capacity(n);
        for g in 0..num_frames / n_t {
            for b in 0..frame_len / n_s {
                for tau in 0..n_t {
                    let base = (g * n_t + tau) * frame_len + b * n_s;
                    perm.extend(base..base + n_s);
                }
            }
        }
        let mut inv_perm = vec![0; n];
        for (i, &p) in perm.iter().enumerate() {
            inv_perm[p] = i;
        }
        Ok(Self { frame_len, num_frames, n_s, n_t, perm, inv_perm })
    }

    /// One block covering the whole sequence in original order.
    pub fn global(frame_len: usize, num_frames: usize) -> Result<Self, LayoutError> {
        Self::build(frame_len, num_frames, frame_len, num_frames)
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn seq_len(&self) -> usize {
        self.perm.len()
    }

    pub fn spatial_block(&self) -> usize {
        self.n_s
    }

    pub fn temporal_span(&self) -> usize {
        self.n_t
    }

    pub fn block_size(&self) -> usize {
        self.n_s * self.n_t
    }

    pub fn num_blocks(&self) -> usize {
        self.seq_len() / self.block_size()
    }

    /// Reordered position `i` holds original token `perm()[i]`.
    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn inv_perm(&self) -> &[usize] {
        &self.inv_perm
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| i == p)
    }

    /// Reordered positions of block `k`.
    pub fn block_range(&self, k: usize) -> std::ops::Range<usize> {
        let nb = self.block_size();
        k * nb..(k + 1) * nb
    }

    /// Block that owns original token `token`.
    #[inline]
    pub fn block_of(&self, token: usize) -> usize {
        self.inv_perm[token] / self.block_size()
    }

    /// Original token indices of block `k`.
    pub fn block_tokens(&self, k: usize) -> &[usize] {
        &self.perm[self.block_range(k)]
    }

    fn check(&self, t: &TokenTensor) -> Result<(), LayoutError> {
        if t.seq_len() != self.seq_len() || t.frame_len() != self.frame_len {
            return Err(LayoutError::Mismatch {
                layout: self.seq_len(),
                layout_frame_len: self.frame_len,
                tensor: t.seq_len(),
                tensor_frame_len: t.frame_len(),
            });
        }
        Ok(())
    }

    /// Output row `i` is input row `index[i]`, per head.
    fn gather(t: &TokenTensor, index: &[usize]) -> TokenTensor {
        let mut out = TokenTensor::zeros(t.num_heads(), t.seq_len(), t.head_dim(), t.frame_len());
        for h in 0..t.num_heads() {
            for (i, &src) in index.iter().enumerate() {
                out.row_mut(h, i).copy_from_slice(t.row(h, src));
            }
        }
        out
    }

    pub fn apply_perm(&self, t: &TokenTensor) -> Result<TokenTensor, LayoutError> {
        self.check(t)?;
        Ok(Self::gather(t, &self.perm))
    }

    pub fn apply_inverse(&self, t: &TokenTensor) -> Result<TokenTensor, LayoutError> {
        self.check(t)?;
        Ok(Self::gather(t, &self.inv_perm))
    }

    pub fn permute_rows(&self, m: &Matrix) -> Matrix {
        assert_eq!(m.rows(), self.seq_len());
        m.gather_rows(&self.perm)
    }

    pub fn unpermute_rows(&self, m: &Matrix) -> Matrix {
        assert_eq!(m.rows(), self.seq_len());
        m.gather_rows(&self.inv_perm)
    }
}

/// Every `(n_s, n_t)` pair whose layout is valid for the geometry.
pub fn divisor_layouts(frame_len: usize, num_frames: usize) -> Vec<(usize, usize)> {
    let divisors = |n: usize| (1..=n).filter(move |d| n % d == 0);
    divisors(frame_len)
        .flat_map(|s| divisors(num_frames).map(move |t| (s, t)))
        .collect()
}
