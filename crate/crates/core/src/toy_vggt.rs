//! Desk-scale stand-in for an alternating frame/global attention stack with
//! per-layer rotary embeddings, and a synthetic multi-frame scene generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::merge_engine::{attention, exact_attention, merged_attention, HttmConfig, MergeDiagnostics, MergeError};
use crate::reorder::BlockLayout;
use crate::tensors::{Matrix, TensorError, TokenTensor};

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("head_dim {0} must be even for rotary embeddings")]
    OddDimension(usize),
    #[error("invalid scene: {0}")]
    Scene(String),
    #[error("invalid stack: {0}")]
    Stack(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("reference output has zero norm")]
    DegenerateNorm,
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

// ---------------------------------------------------------------------------
// Scenes
// ---------------------------------------------------------------------------

/// Within-patch coherence of frame tokens before the shared component.
const PATCH_COHERENCE: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub num_frames: usize,
    pub frame_len: usize,
    pub d_model: usize,
    /// ρ_s: 1 makes every token of a frame identical.
    pub spatial_redundancy: f64,
    /// ρ_t: 1 repeats frames exactly, 0 draws them independently.
    pub temporal_continuity: f64,
    /// Consecutive tokens sharing a mixture component.
    pub patch_len: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(num_frames: usize, frame_len: usize, d_model: usize) -> Self {
        Self {
            num_frames,
            frame_len,
            d_model,
            spatial_redundancy: 0.3,
            temporal_continuity: 0.9,
            patch_len: 8,
            seed: 0,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.num_frames * self.frame_len
    }

    pub fn validate(&self) -> Result<(), ToyError> {
        if self.num_frames == 0 || self.frame_len == 0 || self.d_model == 0 || self.patch_len == 0 {
            return Err(ToyError::Scene("sizes must be positive".into()));
        }
        for (name, v) in [("spatial_redundancy", self.spatial_redundancy), ("temporal_continuity", self.temporal_continuity)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ToyError::Scene(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Generated input tokens, `N × d_model`, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub tokens: Matrix,
    pub frame_len: usize,
    pub num_frames: usize,
}

impl Scene {
    pub fn frame(&self, f: usize) -> &[f32] {
        let w = self.frame_len * self.tokens.cols();
        &self.tokens.as_slice()[f * w..(f + 1) * w]
    }

    /// The tokens as a single-head tensor.
    pub fn as_tensor(&self) -> TokenTensor {
        TokenTensor::new(self.tokens.as_slice().to_vec(), 1, self.tokens.rows(), self.tokens.cols(), self.frame_len)
            .expect("scene shape")
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dist: &Normal<f64>, d: usize) -> Vec<f64> {
    (0..d).map(|_| dist.sample(rng)).collect()
}

/// One frame from the patch mixture, unit-norm tokens.
fn draw_frame(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let d = spec.d_model;
    let dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid normal");
    let shared = gaussian(rng, &dist, d);
    let ws = spec.spatial_redundancy.sqrt();
    let wl = (1.0 - spec.spatial_redundancy).sqrt();
    let wn = (1.0 - PATCH_COHERENCE * PATCH_COHERENCE).sqrt();
    let mut center = Vec::new();
    (0..spec.frame_len)
        .map(|j| {
            if j % spec.patch_len == 0 {
                center = gaussian(rng, &dist, d);
            }
            let noise = gaussian(rng, &dist, d);
            let mut tok: Vec<f64> = (0..d)
                .map(|c| ws * shared[c] + wl * (PATCH_COHERENCE * center[c] + wn * noise[c]))
                .collect();
            normalize(&mut tok);
            tok
        })
        .collect()
}

/// Frame 0 comes from a seeded patch mixture; frame `t+1` mixes frame `t`
/// with an independent draw as `ρ_t·f_t + (1−ρ_t)·fresh`, renormalized.
pub fn gen_scene(spec: &SceneSpec) -> Result<Scene, ToyError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rho = spec.temporal_continuity;
    let mut frames: Vec<Vec<Vec<f64>>> = vec![draw_frame(spec, &mut rng)];
    for _ in 1..spec.num_frames {
        let prev = frames.last().unwrap();
        let next = if rho == 1.0 {
            prev.clone()
        } else {
            let fresh = draw_frame(spec, &mut rng);
            prev.iter()
                .zip(fresh)
                .map(|(p, f)| {
                    let mut t: Vec<f64> = p.iter().zip(f).map(|(a, b)| rho * a + (1.0 - rho) * b).collect();
                    normalize(&mut t);
                    t
                })
                .collect()
        };
        frames.push(next);
    }
    let data: Vec<f32> = frames.into_iter().flatten().flatten().map(|x| x as f32).collect();
    let tokens = Matrix::new(data, spec.seq_len(), spec.d_model)?;
    Ok(Scene { tokens, frame_len: spec.frame_len, num_frames: spec.num_frames })
}

// ---------------------------------------------------------------------------
// Rotary embeddings
// ---------------------------------------------------------------------------

/// Rotates consecutive coordinate pairs `(2j, 2j+1)` by `pos·base^(−2j/d)`.
pub fn rope_apply(tokens: &Matrix, positions: &[usize], base: f64) -> Result<Matrix, ToyError> {
    let d = tokens.cols();
    if d % 2 != 0 {
        return Err(ToyError::OddDimension(d));
    }
    if positions.len() != tokens.rows() {
        return Err(ToyError::Shape(format!("{} positions for {} tokens", positions.len(), tokens.rows())));
    }
    let freqs: Vec<f64> = (0..d / 2).map(|j| base.powf(-2.0 * j as f64 / d as f64)).collect();
    let mut out = tokens.clone();
    for (n, &pos) in positions.iter().enumerate() {
        if pos == 0 {
            continue;
        }
        let row = out.row_mut(n);
        for (j, &f) in freqs.iter().enumerate() {
            let (sin, cos) = (pos as f64 * f).sin_cos();
            let (a, b) = (row[2 * j] as f64, row[2 * j + 1] as f64);
            row[2 * j] = (a * cos - b * sin) as f32;
            row[2 * j + 1] = (a * sin + b * cos) as f32;
        }
    }
    Ok(out)
}

/// Positions restarting at 0 in every frame.
pub fn frame_positions(seq_len: usize, frame_len: usize) -> Vec<usize> {
    (0..seq_len).map(|i| i % frame_len).collect()
}

pub fn absolute_positions(seq_len: usize) -> Vec<usize> {
    (0..seq_len).collect()
}

// ---------------------------------------------------------------------------
// Stack
// ---------------------------------------------------------------------------

/// Rotary positions used by the global-attention layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlobalRope {
    /// `0..N` across the whole sequence.
    Absolute,
    /// Restart at 0 in every frame, as in the frame layers.
    PerFrame,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackConfig {
    /// Each pair is one frame-attention layer followed by one global layer.
    pub num_layer_pairs: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub rope_base: f64,
    pub weights_seed: u64,
    pub global_rope: GlobalRope,
}

impl StackConfig {
    pub fn new(num_layer_pairs: usize, num_heads: usize, head_dim: usize) -> Self {
        Self { num_layer_pairs, num_heads, head_dim, rope_base: 100.0, weights_seed: 0, global_rope: GlobalRope::Absolute }
    }

    pub fn inner_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Frame,
    Global,
}

/// HTTM settings for the global-attention layers.
#[derive(Debug, Clone)]
pub struct StackMerge {
    pub layout: BlockLayout,
    pub config: HttmConfig,
}

struct LayerWeights {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let dist = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("valid normal");
    let data = (0..rows * cols).map(|_| dist.sample(rng) as f32).collect();
    Matrix::new(data, rows, cols).expect("shape")
}

fn layer_weights(cfg: &StackConfig, d_model: usize) -> Vec<LayerWeights> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.weights_seed);
    let inner = cfg.inner_dim();
    (0..2 * cfg.num_layer_pairs)
        .map(|_| LayerWeights {
            wq: random_matrix(&mut rng, d_model, inner),
            wk: random_matrix(&mut rng, d_model, inner),
            wv: random_matrix(&mut rng, d_model, inner),
            wo: random_matrix(&mut rng, inner, d_model),
        })
        .collect()
}

fn rms_norm(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let ms = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        row.iter_mut().for_each(|v| *v = (*v as f64 * inv) as f32);
    }
    out
}

fn rope_heads(t: &TokenTensor, positions: &[usize], base: f64) -> Result<TokenTensor, ToyError> {
    let heads = (0..t.num_heads())
        .map(|i| rope_apply(&t.head(i).to_matrix(), positions, base))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TokenTensor::from_heads(&heads, t.frame_len())?)
}

fn frame_attention(q: &TokenTensor, k: &TokenTensor, v: &TokenTensor) -> Result<Matrix, ToyError> {
    let (fl, nf, d) = (q.frame_len(), q.num_frames(), q.head_dim());
    let heads: Vec<Matrix> = (0..q.num_heads())
        .into_par_iter()
        .map(|i| {
            let (qh, kh, vh) = (q.head(i), k.head(i), v.head(i));
            let mut out = Vec::with_capacity(q.seq_len() * d);
            for f in 0..nf {
                let span = |t: crate::tensors::HeadSlice<'_>| {
                    Matrix::new(t.as_slice()[f * fl * d..(f + 1) * fl * d].to_vec(), fl, d).expect("frame")
                };
                out.extend_from_slice(attention(&span(qh), &span(kh), &span(vh)).as_slice());
            }
            Matrix::new(out, q.seq_len(), d).expect("head")
        })
        .collect();
    Ok(TokenTensor::from_heads(&heads, fl)?.to_concat())
}

#[derive(Debug, Clone)]
pub struct LayerRecord {
    pub kind: LayerKind,
    /// Residual-stream output of the exact path after this layer.
    pub exact_output: Matrix,
    /// Exact-path queries before rotary embedding.
    pub q_pre_rope: TokenTensor,
    /// Exact-path queries after rotary embedding.
    pub q_snapshot: TokenTensor,
    /// Relative Frobenius error of the merged path's output after this layer.
    pub merged_rel_error: Option<f64>,
    pub merge_diagnostics: Option<MergeDiagnostics>,
}

#[derive(Debug, Clone)]
pub struct StackRun {
    pub layers: Vec<LayerRecord>,
    pub exact_output: Matrix,
    pub merged_output: Option<Matrix>,
}

impl StackRun {
    /// End-to-end relative error of the merged path, if any.
    pub fn end_to_end_error(&self) -> Option<f64> {
        self.layers.last().and_then(|l| l.merged_rel_error)
    }

    /// Diagnostics of the first merged global layer.
    pub fn first_merge(&self) -> Option<&MergeDiagnostics> {
        self.layers.iter().find_map(|l| l.merge_diagnostics.as_ref())
    }
}

struct LayerOut {
    x: Matrix,
    q_pre: TokenTensor,
    q_rot: TokenTensor,
    diag: Option<MergeDiagnostics>,
}

fn run_layer(
    x: &Matrix,
    w: &LayerWeights,
    kind: LayerKind,
    frame_len: usize,
    cfg: &StackConfig,
    merge: Option<&StackMerge>,
) -> Result<LayerOut, ToyError> {
    let xn = rms_norm(x);
    let split = |m: Matrix| TokenTensor::from_concat(&m, cfg.num_heads, frame_len);
    let q = split(xn.matmul(&w.wq))?;
    let k = split(xn.matmul(&w.wk))?;
    let v = split(xn.matmul(&w.wv))?;
    let n = x.rows();
    let positions = match kind {
        LayerKind::Frame => frame_positions(n, frame_len),
        LayerKind::Global => match cfg.global_rope {
            GlobalRope::Absolute => absolute_positions(n),
            GlobalRope::PerFrame => frame_positions(n, frame_len),
        },
    };
    let q_rot = rope_heads(&q, &positions, cfg.rope_base)?;
    let k_rot = rope_heads(&k, &positions, cfg.rope_base)?;
    let (attn, diag) = match (kind, merge) {
        (LayerKind::Frame, _) => (frame_attention(&q_rot, &k_rot, &v)?, None),
        (LayerKind::Global, None) => (exact_attention(&q_rot, &k_rot, &v)?, None),
        (LayerKind::Global, Some(m)) => {
            let out = merged_attention(&q_rot, &k_rot, &v, &m.layout, &m.config)?;
            (out.output, Some(out.diagnostics))
        }
    };
    let delta = attn.matmul(&w.wo);
    let data: Vec<f32> = x.as_slice().iter().zip(delta.as_slice()).map(|(a, b)| a + b).collect();
    let out = Matrix::new(data, x.rows(), x.cols())?;
    Ok(LayerOut { x: out, q_pre: q, q_rot, diag })
}

/// Runs the exact stack and, when `merge` is given, a second pass with HTTM
/// on every global-attention layer.
pub fn run_stack(
    input: &Matrix,
    frame_len: usize,
    cfg: &StackConfig,
    merge: Option<&StackMerge>,
) -> Result<StackRun, ToyError> {
    if cfg.num_heads == 0 || cfg.head_dim == 0 {
        return Err(ToyError::Stack("num_heads and head_dim must be positive".into()));
    }
    if frame_len == 0 || input.rows() % frame_len != 0 {
        return Err(ToyError::Shape(format!("frame_len {frame_len} does not divide {}", input.rows())));
    }
    if let Some(m) = merge {
        if m.layout.seq_len() != input.rows() || m.layout.frame_len() != frame_len {
            return Err(ToyError::Shape("merge layout does not match the input geometry".into()));
        }
    }
    let weights = layer_weights(cfg, input.cols());
    let mut exact = input.clone();
    let mut merged = merge.map(|_| input.clone());
    let mut layers = Vec::with_capacity(weights.len());
    for (li, w) in weights.iter().enumerate() {
        let kind = if li % 2 == 0 { LayerKind::Frame } else { LayerKind::Global };
        let e = run_layer(&exact, w, kind, frame_len, cfg, None)?;
        let mut rec = LayerRecord {
            kind,
            exact_output: e.x.clone(),
            q_pre_rope: e.q_pre,
            q_snapshot: e.q_rot,
            merged_rel_error: None,
            merge_diagnostics: None,
        };
        exact = e.x;
        if let Some(mx) = merged.as_mut() {
            let m = run_layer(mx, w, kind, frame_len, cfg, merge)?;
            *mx = m.x;
            rec.merged_rel_error = Some(output_error(&exact, mx)?.rel_frobenius);
            rec.merge_diagnostics = m.diag;
        }
        layers.push(rec);
    }
    Ok(StackRun { layers, exact_output: exact, merged_output: merged })
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutputError {
    /// `‖exact − merged‖_F / ‖exact‖_F`.
    pub rel_frobenius: f64,
    /// Largest `‖exact_i − merged_i‖ / ‖exact_i‖` over rows with non-zero norm.
    pub max_row_rel: f64,
}

pub fn output_error(exact: &Matrix, merged: &Matrix) -> Result<OutputError, ToyError> {
    if exact.rows() != merged.rows() || exact.cols() != merged.cols() {
        return Err(ToyError::Shape("outputs differ in shape".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    let mut max_row: f64 = 0.0;
    for i in 0..exact.rows() {
        let (mut rn, mut rd) = (0.0, 0.0);
        for (&a, &b) in exact.row(i).iter().zip(merged.row(i)) {
            rn += (a as f64 - b as f64).powi(2);
            rd += (a as f64).powi(2);
        }
        if rd > 0.0 {
            max_row = max_row.max((rn / rd).sqrt());
        }
        num += rn;
        den += rd;
    }
    if den == 0.0 {
        return Err(ToyError::DegenerateNorm);
    }
    Ok(OutputError { rel_frobenius: (num / den).sqrt(), max_row_rel: max_row })
}

/// Mean cosine similarity between token `n` and token `n + lag`, averaged
/// over heads and all valid `n`.
pub fn lag_similarity(t: &TokenTensor, lag: usize) -> f64 {
    let n = t.seq_len();
    if lag >= n {
        return 0.0;
    }
    let cos = |a: &[f32], b: &[f32]| {
        let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
        let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    };
    let mut total = 0.0;
    for h in 0..t.num_heads() {
        for i in 0..n - lag {
            total += cos(t.row(h, i), t.row(h, i + lag));
        }
    }
    total / (t.num_heads() * (n - lag)) as f64
}
