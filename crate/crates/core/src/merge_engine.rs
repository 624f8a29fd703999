//! Head-wise temporal token merging around scaled-dot-product attention.
//!
//! Pipeline per head: temporal reorder, block-wise merge of Q and K (V reuses
//! the K plan), global outlier filtering of merged queries, attention on the
//! reduced sequences, copy-unmerge along the Q plan, inverse reorder. Heads
//! are then concatenated on the channel axis.
//!
//! All plan indices are *positions in the reordered sequence*: position `p`
//! holds original token `layout.perm()[p]`.

use rayon::prelude::*;
use thiserror::Error;

use crate::reorder::{BlockLayout, LayoutError};
use crate::similarity::{
    best_match, cosine_sim, partition_src_dst, select_top_r, MatchSet, Partition, PartitionMode,
    SimilarityError,
};
use crate::tensors::{HeadSlice, Matrix, TensorError, TokenTensor};

#[derive(Debug, Error)]
pub enum MergeError {
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("block {block}: merge budget {requested} exceeds {available} mergeable src tokens")]
    Budget { block: usize, requested: usize, available: usize },
    #[error("plan built for {plan} tokens applied to {rows} rows")]
    PlanMismatch { plan: usize, rows: usize },
    #[error("{name} = {value} outside [0, 1)")]
    InvalidFraction { name: &'static str, value: f64 },
    #[error("q, k and v disagree in shape")]
    ShapeMismatch,
}

// ---------------------------------------------------------------------------
// Settings
// ---------------------------------------------------------------------------

/// Merge settings for one of Q or K.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeSettings {
    /// Fraction of each block's tokens merged away: `r_b = round(ratio·n_b)`.
    pub merge_ratio: f64,
    /// dst fraction α. `None` picks the largest `1/s` that leaves enough src.
    pub dst_ratio: Option<f64>,
    pub anchor_first_frame: bool,
    pub mode: PartitionMode,
}

impl MergeSettings {
    pub fn new(merge_ratio: f64) -> Self {
        Self { merge_ratio, dst_ratio: None, anchor_first_frame: false, mode: PartitionMode::Stride }
    }

    pub fn none() -> Self {
        Self::new(0.0)
    }

    pub fn with_dst_ratio(mut self, dst_ratio: f64) -> Self {
        self.dst_ratio = Some(dst_ratio);
        self
    }

    pub fn anchored(mut self, anchor: bool) -> Self {
        self.anchor_first_frame = anchor;
        self
    }

    pub fn with_mode(mut self, mode: PartitionMode) -> Self {
        self.mode = mode;
        self
    }

    /// α actually used for partitioning.
    pub fn resolved_dst_ratio(&self) -> f64 {
        if let Some(a) = self.dst_ratio {
            return a;
        }
        if self.merge_ratio <= 0.0 {
            return 0.5;
        }
        // smallest stride s with (s-1)/s >= merge_ratio
        let s = (1.0 / (1.0 - self.merge_ratio) - 1e-9).ceil().max(2.0);
        1.0 / s
    }

    pub fn partition(&self, seq_len: usize, frame_len: usize) -> Result<Partition, SimilarityError> {
        partition_src_dst(seq_len, frame_len, self.resolved_dst_ratio(), self.anchor_first_frame, self.mode)
    }

    fn partition_if_merging(&self, seq_len: usize, frame_len: usize) -> Result<Option<Partition>, SimilarityError> {
        if self.merge_ratio == 0.0 {
            return Ok(None);
        }
        self.partition(seq_len, frame_len).map(Some)
    }

    fn check(&self) -> Result<(), MergeError> {
        if !(0.0..1.0).contains(&self.merge_ratio) {
            return Err(MergeError::InvalidFraction { name: "merge_ratio", value: self.merge_ratio });
        }
        Ok(())
    }
}

/// Full HTTM configuration for one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HttmConfig {
    pub q: MergeSettings,
    pub kv: MergeSettings,
    /// Global outlier budget `d` as a fraction of `h·N` query tokens.
    pub outlier_fraction: f64,
}

impl HttmConfig {
    pub fn new(q_merge: f64, kv_merge: f64, outlier_fraction: f64) -> Self {
        Self { q: MergeSettings::new(q_merge), kv: MergeSettings::new(kv_merge), outlier_fraction }
    }

    /// No merging and no filtering.
    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn with_dst_ratio(mut self, dst_ratio: f64) -> Self {
        self.q.dst_ratio = Some(dst_ratio);
        self.kv.dst_ratio = Some(dst_ratio);
        self
    }

    pub fn with_mode(mut self, mode: PartitionMode) -> Self {
        self.q.mode = mode;
        self.kv.mode = mode;
        self
    }

    pub fn anchored(mut self, anchor: bool) -> Self {
        self.q.anchor_first_frame = anchor;
        self.kv.anchor_first_frame = anchor;
        self
    }

    fn check(&self) -> Result<(), MergeError> {
        self.q.check()?;
        self.kv.check()?;
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(MergeError::InvalidFraction { name: "outlier_fraction", value: self.outlier_fraction });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Merge plans
// ---------------------------------------------------------------------------

/// Constituency record of one head's merge.
#[derive(Debug, Clone, PartialEq)]
pub struct MergePlan {
    seq_len: usize,
    /// For each reduced token, its constituent positions. The first entry is
    /// the group's representative (the dst for merged groups).
    groups: Vec<Vec<usize>>,
    /// Reduced index of every position.
    origin_of: Vec<usize>,
    /// Best-match pairs (positions) with the top-r selection flags.
    pub matches: MatchSet,
    /// Multiply-adds spent on similarity matrices for this plan.
    pub matching_madds: u64,
}

impl MergePlan {
    /// Plan that keeps every token.
    pub fn identity(seq_len: usize) -> Self {
        Self::from_groups(seq_len, (0..seq_len).map(|p| vec![p]).collect(), MatchSet::default(), 0)
    }

    fn from_groups(seq_len: usize, groups: Vec<Vec<usize>>, matches: MatchSet, matching_madds: u64) -> Self {
        let mut origin_of = vec![usize::MAX; seq_len];
        for (m, g) in groups.iter().enumerate() {
            for &p in g {
                origin_of[p] = m;
            }
        }
        debug_assert!(origin_of.iter().all(|&m| m != usize::MAX));
        Self { seq_len, groups, origin_of, matches, matching_madds }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Reduced length `M`.
    pub fn reduced_len(&self) -> usize {
        self.groups.len()
    }

    /// `r = N − M`.
    pub fn r(&self) -> usize {
        self.seq_len - self.groups.len()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// Groups with more than one constituent.
    pub fn merged_groups(&self) -> impl Iterator<Item = &Vec<usize>> {
        self.groups.iter().filter(|g| g.len() > 1)
    }

    pub fn origin_of(&self) -> &[usize] {
        &self.origin_of
    }

    pub fn is_merged(&self, pos: usize) -> bool {
        self.groups[self.origin_of[pos]].len() > 1
    }

    /// Similarity scores of the selected matches.
    pub fn selected_scores(&self) -> Vec<f32> {
        self.matches.selected_scores()
    }
}

/// Mean of each group's rows, accumulated in `f64`.
pub fn group_means(rows: &Matrix, plan: &MergePlan) -> Result<Matrix, MergeError> {
    if rows.rows() != plan.seq_len {
        return Err(MergeError::PlanMismatch { plan: plan.seq_len, rows: rows.rows() });
    }
    let d = rows.cols();
    let mut out = Matrix::zeros(plan.reduced_len(), d);
    let mut acc = vec![0f64; d];
    for (m, g) in plan.groups.iter().enumerate() {
        if g.len() == 1 {
            out.row_mut(m).copy_from_slice(rows.row(g[0]));
            continue;
        }
        acc.iter_mut().for_each(|a| *a = 0.0);
        for &p in g {
            for (a, &x) in acc.iter_mut().zip(rows.row(p)) {
                *a += x as f64;
            }
        }
        let inv = 1.0 / g.len() as f64;
        for (o, a) in out.row_mut(m).iter_mut().zip(&acc) {
            *o = (a * inv) as f32;
        }
    }
    Ok(out)
}

/// Block-wise merge plan for rows already in reordered order.
pub fn plan_blocks(
    rows: &Matrix,
    layout: &BlockLayout,
    partition: &Partition,
    merge_ratio: f64,
) -> Result<MergePlan, MergeError> {
    let n = layout.seq_len();
    if rows.rows() != n || partition.seq_len() != n {
        return Err(MergeError::PlanMismatch { plan: n, rows: rows.rows() });
    }
    let nb = layout.block_size();
    let r_b = (merge_ratio * nb as f64).round() as usize;
    if r_b == 0 {
        return Ok(MergePlan::identity(n));
    }
    let perm = layout.perm();
    let d = rows.cols();
    let mut groups = Vec::with_capacity(n - r_b * layout.num_blocks());
    let mut matches = MatchSet::default();
    let mut madds = 0u64;
    let mut merged_into = vec![usize::MAX; nb];

    for k in 0..layout.num_blocks() {
        let range = layout.block_range(k);
        let start = range.start;
        let (mut src, mut dst) = (Vec::new(), Vec::new());
        for p in range.clone() {
            if partition.is_dst(perm[p]) {
                dst.push(p);
            } else {
                src.push(p);
            }
        }
        let available = if dst.is_empty() { 0 } else { src.len() };
        if r_b > available {
            return Err(MergeError::Budget { block: k, requested: r_b, available });
        }
        let sim = cosine_sim(&rows.gather_rows(&src), &rows.gather_rows(&dst))
            .with_indices(src.clone(), dst.clone());
        madds += (src.len() * dst.len() * d) as u64;
        let selected = select_top_r(&best_match(&sim), r_b)?;

        merged_into.iter_mut().for_each(|x| *x = usize::MAX);
        for m in selected.selected_pairs() {
            merged_into[m.src - start] = m.dst;
        }
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); nb];
        for p in range.clone() {
            let into = merged_into[p - start];
            if into != usize::MAX {
                members[into - start].push(p);
            }
        }
        for p in range {
            if merged_into[p - start] != usize::MAX {
                continue;
            }
            let mut g = vec![p];
            g.append(&mut members[p - start]);
            groups.push(g);
        }
        matches.extend(selected);
    }
    Ok(MergePlan::from_groups(n, groups, matches, madds))
}

fn plan_for(
    rows: &Matrix,
    layout: &BlockLayout,
    partition: Option<&Partition>,
    settings: &MergeSettings,
) -> Result<MergePlan, MergeError> {
    match partition {
        Some(p) => plan_blocks(rows, layout, p, settings.merge_ratio),
        None => Ok(MergePlan::identity(rows.rows())),
    }
}

/// Merges one head. Returns the reduced rows (reordered, block-concatenated)
/// and the plan.
pub fn merge_head(
    tokens: HeadSlice<'_>,
    layout: &BlockLayout,
    frame_len: usize,
    settings: &MergeSettings,
) -> Result<(Matrix, MergePlan), MergeError> {
    settings.check()?;
    let partition = settings.partition_if_merging(tokens.seq_len(), frame_len)?;
    let rows = layout.permute_rows(&tokens.to_matrix());
    let plan = plan_for(&rows, layout, partition.as_ref(), settings)?;
    let reduced = group_means(&rows, &plan)?;
    Ok((reduced, plan))
}

/// Values follow the key plan: group means over exactly its groups.
pub fn merge_values_with_key_plan(values: &Matrix, key_plan: &MergePlan) -> Result<Matrix, MergeError> {
    group_means(values, key_plan)
}

// ---------------------------------------------------------------------------
// Outlier filtering
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierMask {
    mask: Vec<bool>,
    num_heads: usize,
    seq_len: usize,
    pub budget: f64,
}

impl OutlierMask {
    pub fn empty(num_heads: usize, seq_len: usize, budget: f64) -> Self {
        Self { mask: vec![false; num_heads * seq_len], num_heads, seq_len, budget }
    }

    #[inline]
    pub fn get(&self, head: usize, pos: usize) -> bool {
        self.mask[head * self.seq_len + pos]
    }

    pub fn popcount(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn head_count(&self, head: usize) -> usize {
        self.mask[head * self.seq_len..(head + 1) * self.seq_len].iter().filter(|&&m| m).count()
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    /// Flagged `(head, position)` pairs in ascending order.
    pub fn flagged(&self) -> Vec<(usize, usize)> {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| (i / self.seq_len, i % self.seq_len))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    /// Reduced queries per head after restoring outliers.
    pub reduced: Vec<Matrix>,
    pub plans: Vec<MergePlan>,
    pub mask: OutlierMask,
    /// Per-head, per-position L2 deviation before filtering.
    pub deviations: Vec<Vec<f64>>,
    pub max_deviation_before: f64,
    pub max_deviation_after: f64,
    /// Groups whose every constituent was flagged.
    pub dissolved_groups: usize,
}

/// `‖q_p − merged(q_p)‖₂` per position; zero for unmerged positions.
pub fn deviations(rows: &Matrix, plan: &MergePlan) -> Result<Vec<f64>, MergeError> {
    let merged = group_means(rows, plan)?;
    Ok((0..plan.seq_len)
        .map(|p| {
            let m = plan.origin_of[p];
            if plan.groups[m].len() < 2 {
                return 0.0;
            }
            rows.row(p)
                .iter()
                .zip(merged.row(m))
                .map(|(&a, &b)| {
                    let diff = a as f64 - b as f64;
                    diff * diff
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Global top-`round(d·h·N)` positive deviations, ties to lower `(head, pos)`.
pub fn select_outliers(deviations: &[Vec<f64>], fraction: f64) -> OutlierMask {
    let h = deviations.len();
    let n = deviations.first().map_or(0, |d| d.len());
    let mut mask = OutlierMask::empty(h, n, fraction);
    let budget = (fraction * (h * n) as f64).round() as usize;
    if budget == 0 {
        return mask;
    }
    let mut candidates: Vec<(usize, usize, f64)> = deviations
        .iter()
        .enumerate()
        .flat_map(|(hi, d)| d.iter().enumerate().filter(|(_, &v)| v > 0.0).map(move |(p, &v)| (hi, p, v)))
        .collect();
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    for &(hi, p, _) in candidates.iter().take(budget) {
        mask.mask[hi * n + p] = true;
    }
    mask
}

fn restore_outliers(plan: &MergePlan, flagged: impl Fn(usize) -> bool) -> (MergePlan, usize) {
    let mut groups = Vec::with_capacity(plan.groups.len());
    let mut dissolved = 0;
    for g in &plan.groups {
        if g.len() < 2 || !g.iter().any(|&p| flagged(p)) {
            groups.push(g.clone());
            continue;
        }
        let remaining: Vec<usize> = g.iter().copied().filter(|&p| !flagged(p)).collect();
        if remaining.is_empty() {
            dissolved += 1;
        } else {
            groups.push(remaining);
        }
        groups.extend(g.iter().copied().filter(|&p| flagged(p)).map(|p| vec![p]));
    }
    groups.sort_by_key(|g| g[0]);
    (MergePlan::from_groups(plan.seq_len, groups, plan.matches.clone(), plan.matching_madds), dissolved)
}

fn max_deviation(rows: &Matrix, plan: &MergePlan) -> Result<f64, MergeError> {
    Ok(deviations(rows, plan)?.into_iter().fold(0.0, f64::max))
}

/// Adaptive outlier filtering of merged queries under a global budget.
///
/// `queries` holds the original (unmerged) queries in the plans' position
/// order. Flagged tokens leave their group, the group mean is recomputed from
/// what remains, and each flagged token becomes its own reduced token.
pub fn filter_outliers(
    queries: &TokenTensor,
    plans: &[MergePlan],
    fraction: f64,
) -> Result<FilterOutcome, MergeError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(MergeError::InvalidFraction { name: "outlier_fraction", value: fraction });
    }
    if plans.len() != queries.num_heads() {
        return Err(MergeError::PlanMismatch { plan: plans.len(), rows: queries.num_heads() });
    }
    let heads: Vec<Matrix> = queries.heads().map(|h| h.to_matrix()).collect();
    let devs = heads
        .par_iter()
        .zip(plans.par_iter())
        .map(|(rows, plan)| deviations(rows, plan))
        .collect::<Result<Vec<_>, _>>()?;
    let max_before = devs.iter().flatten().copied().fold(0.0, f64::max);

    let mask = select_outliers(&devs, fraction);

    let updated: Vec<(MergePlan, usize, Matrix, f64)> = heads
        .par_iter()
        .zip(plans.par_iter())
        .enumerate()
        .map(|(hi, (rows, plan))| {
            let (p, dissolved) = if mask.head_count(hi) == 0 {
                (plan.clone(), 0)
            } else {
                restore_outliers(plan, |pos| mask.get(hi, pos))
            };
            let reduced = group_means(rows, &p)?;
            let after = max_deviation(rows, &p)?;
            Ok((p, dissolved, reduced, after))
        })
        .collect::<Result<Vec<_>, MergeError>>()?;

    let mut out = FilterOutcome {
        reduced: Vec::with_capacity(updated.len()),
        plans: Vec::with_capacity(updated.len()),
        mask,
        deviations: devs,
        max_deviation_before: max_before,
        max_deviation_after: 0.0,
        dissolved_groups: 0,
    };
    for (p, dissolved, reduced, after) in updated {
        out.plans.push(p);
        out.reduced.push(reduced);
        out.dissolved_groups += dissolved;
        out.max_deviation_after = out.max_deviation_after.max(after);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Row-wise `softmax(q·kᵀ/√d)`.
pub fn attention_weights(q: &Matrix, k: &Matrix) -> Matrix {
    assert_eq!(q.cols(), k.cols());
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut out = Matrix::zeros(q.rows(), k.rows());
    let mut scores = vec![0f64; k.rows()];
    for i in 0..q.rows() {
        let qi = q.row(i);
        for (j, s) in scores.iter_mut().enumerate() {
            *s = qi.iter().zip(k.row(j)).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() * scale;
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        for (o, s) in out.row_mut(i).iter_mut().zip(&scores) {
            *o = (s / total) as f32;
        }
    }
    out
}

/// Scaled-dot-product attention `softmax(q·kᵀ/√d)·v`.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Matrix {
    assert_eq!(k.rows(), v.rows());
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut out = Matrix::zeros(q.rows(), v.cols());
    let mut scores = vec![0f64; k.rows()];
    let mut acc = vec![0f64; v.cols()];
    for i in 0..q.rows() {
        let qi = q.row(i);
        for (j, s) in scores.iter_mut().enumerate() {
            *s = qi.iter().zip(k.row(j)).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() * scale;
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (j, &w) in scores.iter().enumerate() {
            for (a, &x) in acc.iter_mut().zip(v.row(j)) {
                *a += w * x as f64;
            }
        }
        for (o, a) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = (a / total) as f32;
        }
    }
    out
}

fn check_qkv(q: &TokenTensor, k: &TokenTensor, v: &TokenTensor) -> Result<(), MergeError> {
    let shape = |t: &TokenTensor| (t.num_heads(), t.seq_len(), t.head_dim(), t.frame_len());
    if shape(q) != shape(k) || shape(q) != shape(v) {
        return Err(MergeError::ShapeMismatch);
    }
    Ok(())
}

/// Exact multi-head attention, heads concatenated into `N × (h·d_head)`.
pub fn exact_attention(q: &TokenTensor, k: &TokenTensor, v: &TokenTensor) -> Result<Matrix, MergeError> {
    check_qkv(q, k, v)?;
    let heads: Vec<Matrix> = (0..q.num_heads())
        .into_par_iter()
        .map(|i| attention(&q.head(i).to_matrix(), &k.head(i).to_matrix(), &v.head(i).to_matrix()))
        .collect();
    Ok(TokenTensor::from_heads(&heads, q.frame_len())?.to_concat())
}

#[derive(Debug, Clone)]
pub struct MergeDiagnostics {
    pub q_plans: Vec<MergePlan>,
    pub k_plans: Vec<MergePlan>,
    pub mask: OutlierMask,
    pub outlier_counts: Vec<usize>,
    pub deviations: Vec<Vec<f64>>,
    pub max_deviation_before: f64,
    pub max_deviation_after: f64,
    pub dissolved_groups: usize,
    pub matching_madds: u64,
    /// `Σ_heads 2·M_q·M_k·d_head` for the reduced attention.
    pub attention_madds: u64,
}

impl MergeDiagnostics {
    /// Per-head merged count `r = N − M_q` after filtering.
    pub fn q_r(&self) -> Vec<usize> {
        self.q_plans.iter().map(|p| p.r()).collect()
    }

    pub fn total_q_len(&self) -> usize {
        self.q_plans.iter().map(|p| p.reduced_len()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct MergedAttentionOutput {
    /// `N × (h·d_head)`, original token order.
    pub output: Matrix,
    /// Per-head reduced outputs `Õ⁽ⁱ⁾` (`M_q × d_head`).
    pub per_head_reduced: Vec<Matrix>,
    pub diagnostics: MergeDiagnostics,
}

struct HeadPlans {
    q_plans: Vec<MergePlan>,
    k_plans: Vec<MergePlan>,
    filter: FilterOutcome,
}

fn attend_with_plans(
    q: &TokenTensor,
    k: &TokenTensor,
    v: &TokenTensor,
    layout: &BlockLayout,
    plans: HeadPlans,
) -> Result<MergedAttentionOutput, MergeError> {
    let h = q.num_heads();
    let d = q.head_dim();
    let results = (0..h)
        .into_par_iter()
        .map(|i| {
            let qp = &plans.q_plans[i];
            let kp = &plans.k_plans[i];
            let q_red = &plans.filter.reduced[i];
            let k_rows = k.head(i).to_matrix();
            let v_rows = v.head(i).to_matrix();
            let k_red = group_means(&k_rows, kp)?;
            let v_red = merge_values_with_key_plan(&v_rows, kp)?;
            let o_red = attention(q_red, &k_red, &v_red);
            let unmerged = o_red.gather_rows(qp.origin_of());
            let madds = 2 * (q_red.rows() * k_red.rows() * d) as u64;
            Ok((layout.unpermute_rows(&unmerged), o_red, madds))
        })
        .collect::<Result<Vec<_>, MergeError>>()?;

    let mut heads = Vec::with_capacity(h);
    let mut reduced = Vec::with_capacity(h);
    let mut attention_madds = 0;
    for (full, red, madds) in results {
        heads.push(full);
        reduced.push(red);
        attention_madds += madds;
    }
    let output = TokenTensor::from_heads(&heads, q.frame_len())?.to_concat();
    let matching_madds = plans.q_plans.iter().chain(&plans.k_plans).map(|p| p.matching_madds).sum::<u64>();
    let f = plans.filter;
    let outlier_counts = (0..f.mask.num_heads()).map(|i| f.mask.head_count(i)).collect();
    Ok(MergedAttentionOutput {
        output,
        per_head_reduced: reduced,
        diagnostics: MergeDiagnostics {
            q_plans: plans.q_plans,
            k_plans: plans.k_plans,
            outlier_counts,
            mask: f.mask,
            deviations: f.deviations,
            max_deviation_before: f.max_deviation_before,
            max_deviation_after: f.max_deviation_after,
            dissolved_groups: f.dissolved_groups,
            matching_madds,
            attention_madds,
        },
    })
}

/// Head-wise merged attention.
pub fn merged_attention(
    q: &TokenTensor,
    k: &TokenTensor,
    v: &TokenTensor,
    layout: &BlockLayout,
    cfg: &HttmConfig,
) -> Result<MergedAttentionOutput, MergeError> {
    check_qkv(q, k, v)?;
    cfg.check()?;
    let (n, frame_len) = (q.seq_len(), q.frame_len());
    let q_part = cfg.q.partition_if_merging(n, frame_len)?;
    let kv_part = cfg.kv.partition_if_merging(n, frame_len)?;
    let qr = layout.apply_perm(q)?;
    let kr = layout.apply_perm(k)?;
    let vr = layout.apply_perm(v)?;

    let planned = (0..q.num_heads())
        .into_par_iter()
        .map(|i| {
            let qp = plan_for(&qr.head(i).to_matrix(), layout, q_part.as_ref(), &cfg.q)?;
            let kp = plan_for(&kr.head(i).to_matrix(), layout, kv_part.as_ref(), &cfg.kv)?;
            Ok((qp, kp))
        })
        .collect::<Result<Vec<_>, MergeError>>()?;
    let (q_plans, k_plans): (Vec<_>, Vec<_>) = planned.into_iter().unzip();
    let filter = filter_outliers(&qr, &q_plans, cfg.outlier_fraction)?;
    let q_plans = filter.plans.clone();
    attend_with_plans(&qr, &kr, &vr, layout, HeadPlans { q_plans, k_plans, filter })
}

fn head_average(t: &TokenTensor) -> TokenTensor {
    let (h, n, d) = (t.num_heads(), t.seq_len(), t.head_dim());
    let mut avg = vec![0f64; n * d];
    for i in 0..h {
        for (a, &x) in avg.iter_mut().zip(t.head(i).as_slice()) {
            *a += x as f64;
        }
    }
    let data = avg.into_iter().map(|a| (a / h as f64) as f32).collect();
    TokenTensor::new(data, 1, n, d, t.frame_len()).expect("shape preserved")
}

/// Baseline that shares one plan across all heads, computed on
/// head-averaged features.
pub fn uniform_merge_baseline(
    q: &TokenTensor,
    k: &TokenTensor,
    v: &TokenTensor,
    layout: &BlockLayout,
    cfg: &HttmConfig,
) -> Result<MergedAttentionOutput, MergeError> {
    check_qkv(q, k, v)?;
    cfg.check()?;
    let (n, frame_len, h) = (q.seq_len(), q.frame_len(), q.num_heads());
    let q_part = cfg.q.partition_if_merging(n, frame_len)?;
    let kv_part = cfg.kv.partition_if_merging(n, frame_len)?;
    let qr = layout.apply_perm(q)?;
    let kr = layout.apply_perm(k)?;
    let vr = layout.apply_perm(v)?;
    let q_avg = head_average(&qr);
    let k_avg = head_average(&kr);

    let qp = plan_for(&q_avg.head(0).to_matrix(), layout, q_part.as_ref(), &cfg.q)?;
    let kp = plan_for(&k_avg.head(0).to_matrix(), layout, kv_part.as_ref(), &cfg.kv)?;
    let shared = filter_outliers(&q_avg, std::slice::from_ref(&qp), cfg.outlier_fraction)?;
    let q_shared = shared.plans[0].clone();

    let reduced = (0..h)
        .map(|i| group_means(&qr.head(i).to_matrix(), &q_shared))
        .collect::<Result<Vec<_>, _>>()?;
    let filter = FilterOutcome {
        reduced,
        plans: vec![q_shared.clone(); h],
        mask: shared.mask,
        deviations: shared.deviations,
        max_deviation_before: shared.max_deviation_before,
        max_deviation_after: shared.max_deviation_after,
        dissolved_groups: shared.dissolved_groups,
    };
    let plans = HeadPlans { q_plans: vec![q_shared; h], k_plans: vec![kp; h], filter };
    attend_with_plans(&qr, &kr, &vr, layout, plans)
}

/// Number of rows that are bit-identical to at least one other row.
pub fn duplicate_rows(m: &Matrix) -> usize {
    use std::collections::HashMap;
    let mut counts: HashMap<Vec<u32>, usize> = HashMap::new();
    for i in 0..m.rows() {
        let key = m.row(i).iter().map(|x| x.to_bits()).collect();
        *counts.entry(key).or_default() += 1;
    }
    counts.values().filter(|&&c| c > 1).sum()
}
