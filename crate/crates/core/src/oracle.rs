//! Ground-truth global matching and executable checks of the block-wise
//! merging propositions: block similarity matrices are submatrices of the
//! global one, blocked quality never beats global quality, and quality grows
//! with nested block size while cost grows linearly.

use std::collections::HashSet;

use thiserror::Error;

use crate::reorder::{BlockLayout, LayoutError};
use crate::similarity::{
    best_match, cosine_sim, match_order, select_top_r, Match, MatchSet, Partition, SimMatrix,
    SimilarityError,
};
use crate::tensors::{HeadSlice, Matrix};

/// Largest sequence for which the all-pairs matrix `W` is materialized.
pub const MAX_ORACLE_TOKENS: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("{n} tokens exceeds the all-pairs guard of {max}")]
    Guard { n: usize, max: usize },
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("quality undefined for an empty selection")]
    EmptySelection,
    #[error("partition covers {partition} tokens, input has {tokens}")]
    Mismatch { partition: usize, tokens: usize },
}

fn guard(n: usize) -> Result<(), OracleError> {
    if n > MAX_ORACLE_TOKENS {
        return Err(OracleError::Guard { n, max: MAX_ORACLE_TOKENS });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalMatchResult {
    /// All-pairs `W` over `(S, D)`; `None` for block-restricted results.
    pub sim: Option<SimMatrix>,
    /// Best match per src (original token indices), with the top-r flags.
    pub matches: MatchSet,
    pub r: usize,
    /// Mean similarity of the selected pairs; 1.0 when `r = 0`.
    pub quality: f64,
    /// Set when `r = 0` and `quality` is the vacuous convention.
    pub vacuous: bool,
}

impl GlobalMatchResult {
    fn from_selection(sim: Option<SimMatrix>, matches: MatchSet, r: usize) -> Self {
        let quality = mean_quality(&matches);
        Self { sim, matches, r, quality: quality.unwrap_or(1.0), vacuous: quality.is_none() }
    }

    pub fn selected_pairs(&self) -> Vec<(usize, usize)> {
        self.matches.selected_pairs().map(|m| (m.src, m.dst)).collect()
    }

    pub fn selected_scores(&self) -> Vec<f32> {
        self.matches.selected_scores()
    }
}

/// Mean of the selected scores, summed in descending order. Summing two
/// pointwise-ordered sequences in the same order keeps the sums ordered,
/// so comparisons between oracle results are exact.
pub fn mean_quality(m: &MatchSet) -> Option<f64> {
    let mut picked: Vec<&Match> = m.selected_pairs().collect();
    if picked.is_empty() {
        return None;
    }
    picked.sort_by(|a, b| match_order(a, b));
    let sum: f64 = picked.iter().map(|p| p.score as f64).sum();
    Some(sum / picked.len() as f64)
}

fn rows_of(tokens: &HeadSlice<'_>, index: &[usize]) -> Matrix {
    Matrix::from_rows(index.iter().map(|&i| tokens.row(i)), tokens.head_dim())
}

fn check_partition(tokens: &HeadSlice<'_>, partition: &Partition) -> Result<(), OracleError> {
    if partition.seq_len() != tokens.seq_len() {
        return Err(OracleError::Mismatch { partition: partition.seq_len(), tokens: tokens.seq_len() });
    }
    Ok(())
}

/// Full `W`, per-src best match, global top-r.
pub fn global_merge_oracle(
    tokens: HeadSlice<'_>,
    partition: &Partition,
    r: usize,
) -> Result<GlobalMatchResult, OracleError> {
    guard(tokens.seq_len())?;
    check_partition(&tokens, partition)?;
    let src = partition.src_indices().to_vec();
    let dst = partition.dst_indices().to_vec();
    let w = cosine_sim(&rows_of(&tokens, &src), &rows_of(&tokens, &dst)).with_indices(src, dst);
    let selected = select_top_r(&best_match(&w), r)?;
    Ok(GlobalMatchResult::from_selection(Some(w), selected, r))
}

/// Within-block best matches for every block, in block order.
pub fn block_best_matches(
    tokens: HeadSlice<'_>,
    layout: &BlockLayout,
    partition: &Partition,
) -> Result<MatchSet, OracleError> {
    check_partition(&tokens, partition)?;
    let mut all = MatchSet::default();
    for k in 0..layout.num_blocks() {
        let (src, dst) = block_split(layout, partition, k);
        if dst.is_empty() || src.is_empty() {
            continue;
        }
        let sim = cosine_sim(&rows_of(&tokens, &src), &rows_of(&tokens, &dst)).with_indices(src, dst);
        all.extend(best_match(&sim));
    }
    Ok(all)
}

/// Top-r over the union of within-block best matches, budget shared across
/// blocks.
pub fn blocked_oracle_selection(
    tokens: HeadSlice<'_>,
    layout: &BlockLayout,
    partition: &Partition,
    r: usize,
) -> Result<GlobalMatchResult, OracleError> {
    let all = block_best_matches(tokens, layout, partition)?;
    let selected = select_top_r(&all, r)?;
    Ok(GlobalMatchResult::from_selection(None, selected, r))
}

/// src and dst original indices of block `k`, each ascending.
pub fn block_split(layout: &BlockLayout, partition: &Partition, k: usize) -> (Vec<usize>, Vec<usize>) {
    let mut toks = layout.block_tokens(k).to_vec();
    toks.sort_unstable();
    toks.into_iter().partition(|&t| !partition.is_dst(t))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubmatrixReport {
    pub holds: bool,
    pub max_abs_discrepancy: f64,
    pub entries_checked: usize,
}

/// Test hook that corrupts one entry of one block matrix before comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub block: usize,
    pub delta: f32,
}

/// Compares every block similarity entry with the corresponding entry of `W`.
pub fn check_submatrix(
    tokens: HeadSlice<'_>,
    layout: &BlockLayout,
    partition: &Partition,
    perturb: Option<Perturbation>,
) -> Result<SubmatrixReport, OracleError> {
    guard(tokens.seq_len())?;
    check_partition(&tokens, partition)?;
    let global = global_merge_oracle(tokens, partition, 0)?;
    let w = global.sim.expect("global oracle keeps W");
    let n = tokens.seq_len();
    let mut row_of = vec![usize::MAX; n];
    let mut col_of = vec![usize::MAX; n];
    for (i, &s) in w.src_index.iter().enumerate() {
        row_of[s] = i;
    }
    for (j, &d) in w.dst_index.iter().enumerate() {
        col_of[d] = j;
    }

    // Block rows are taken in reordered position order, as the merge engine does.
    let reordered = Matrix::from_rows(layout.perm().iter().map(|&t| tokens.row(t)), tokens.head_dim());
    let mut max = 0f64;
    let mut checked = 0;
    for k in 0..layout.num_blocks() {
        let range = layout.block_range(k);
        let (src, dst): (Vec<usize>, Vec<usize>) =
            range.partition(|&p| !partition.is_dst(layout.perm()[p]));
        if src.is_empty() || dst.is_empty() {
            continue;
        }
        let mut block = cosine_sim(&reordered.gather_rows(&src), &reordered.gather_rows(&dst));
        if let Some(pt) = perturb.filter(|pt| pt.block == k) {
            let v = block.get(0, 0);
            block.set(0, 0, v + pt.delta);
        }
        for (i, &sp) in src.iter().enumerate() {
            for (j, &dp) in dst.iter().enumerate() {
                let g = w.get(row_of[layout.perm()[sp]], col_of[layout.perm()[dp]]);
                max = max.max((block.get(i, j) as f64 - g as f64).abs());
                checked += 1;
            }
        }
    }
    Ok(SubmatrixReport { holds: max <= 1e-7, max_abs_discrepancy: max, entries_checked: checked })
}

/// `H_blk = |M*_blk ∩ M*|`.
pub fn overlap_count(global: &GlobalMatchResult, blocked: &GlobalMatchResult) -> usize {
    let g: HashSet<(usize, usize)> = global.selected_pairs().into_iter().collect();
    blocked.selected_pairs().into_iter().filter(|p| g.contains(p)).count()
}

/// Fraction of the globally selected pairs whose src and dst share a block,
/// i.e. that lie inside `E_blk`.
pub fn fraction_in_blocks(global: &GlobalMatchResult, layout: &BlockLayout) -> f64 {
    let pairs = global.selected_pairs();
    if pairs.is_empty() {
        return 1.0;
    }
    let inside = pairs.iter().filter(|(s, d)| layout.block_of(*s) == layout.block_of(*d)).count();
    inside as f64 / pairs.len() as f64
}

/// q-quantile of the scores with linear interpolation between order
/// statistics at position `q·(n−1)`.
pub fn quality_metric(scores: &[f32], q: f64) -> Result<f64, OracleError> {
    if scores.is_empty() {
        return Err(OracleError::EmptySelection);
    }
    let mut s: Vec<f64> = scores.iter().map(|&x| x as f64).collect();
    s.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(s[lo] + (s[hi] - s[lo]) * (pos - lo as f64))
}

pub const DEFAULT_QUANTILE: f64 = 0.10;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::{partition_src_dst, PartitionMode};
    use crate::tensors::TokenTensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tokens(n: usize, d: usize, seed: u64) -> TokenTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        TokenTensor::new(data, 1, n, d, n).unwrap()
    }

    #[test]
    fn identical_tokens_have_unit_quality() {
        let t = TokenTensor::new(vec![0.5; 16 * 3], 1, 16, 3, 16).unwrap();
        let p = partition_src_dst(16, 16, 0.25, false, PartitionMode::Stride).unwrap();
        for r in [1, 5, 12] {
            let res = global_merge_oracle(t.head(0), &p, r).unwrap();
            assert_eq!(res.quality, 1.0);
            assert!(!res.vacuous);
        }
    }

    #[test]
    fn zero_budget_is_vacuous() {
        let t = random_tokens(16, 3, 0);
        let p = partition_src_dst(16, 16, 0.25, false, PartitionMode::Stride).unwrap();
        let res = global_merge_oracle(t.head(0), &p, 0).unwrap();
        assert!(res.vacuous);
        assert_eq!(res.quality, 1.0);
    }

    #[test]
    fn global_quality_matches_exhaustive_sort_seed_13() {
        let t = random_tokens(64, 8, 13);
        let p = partition_src_dst(64, 64, 0.25, false, PartitionMode::Stride).unwrap();
        let r = 20;
        let res = global_merge_oracle(t.head(0), &p, r).unwrap();

        let norm = |v: &[f32]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let mut best: Vec<f64> = p
            .src_indices()
            .iter()
            .map(|&s| {
                p.dst_indices()
                    .iter()
                    .map(|&d| {
                        let (a, b) = (t.row(0, s), t.row(0, d));
                        a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>() / (norm(a) * norm(b))
                    })
                    .fold(f64::MIN, f64::max)
            })
            .collect();
        best.sort_by(|a, b| b.total_cmp(a));
        let expected = best[..r].iter().sum::<f64>() / r as f64;
        assert!((res.quality - expected).abs() < 1e-6);
    }

    #[test]
    fn full_block_equals_global() {
        let t = random_tokens(32, 4, 1);
        let p = partition_src_dst(32, 32, 0.25, false, PartitionMode::Stride).unwrap();
        let layout = BlockLayout::global(32, 1).unwrap();
        let g = global_merge_oracle(t.head(0), &p, 10).unwrap();
        let b = blocked_oracle_selection(t.head(0), &layout, &p, 10).unwrap();
        assert_eq!(g.matches, b.matches);
        assert_eq!(g.quality, b.quality);
        let rep = check_submatrix(t.head(0), &layout, &p, None).unwrap();
        assert_eq!(rep.max_abs_discrepancy, 0.0);
        assert_eq!(rep.entries_checked, 8 * 24);
    }

    #[test]
    fn cross_block_similarity_lowers_blocked_quality() {
        // Pairs (0,1),(2,3),... form blocks of 2 under n_s = 2. Token 2k+1 is
        // src; its only good dst is token 2k+2, which sits in the next block.
        let n = 8;
        let d = n;
        let mut data = vec![0f32; n * d];
        for i in 0..n {
            let base = if i % 2 == 1 { (i + 1) % n } else { i };
            data[i * d + base] = 1.0;
            data[i * d + (i % d)] += 0.05;
        }
        let t = TokenTensor::new(data, 1, n, d, n).unwrap();
        let p = partition_src_dst(n, n, 0.5, false, PartitionMode::Stride).unwrap();
        let layout = BlockLayout::build(n, 1, 2, 1).unwrap();
        let g = global_merge_oracle(t.head(0), &p, 3).unwrap();
        let b = blocked_oracle_selection(t.head(0), &layout, &p, 3).unwrap();
        assert!(b.quality < g.quality, "{} vs {}", b.quality, g.quality);
    }

    #[test]
    fn nested_layouts_never_lose_quality() {
        for seed in 0..20 {
            let t = random_tokens(128, 8, seed);
            let p = partition_src_dst(128, 16, 0.25, false, PartitionMode::Stride).unwrap();
            let mut last = f64::NEG_INFINITY;
            for nt in [1, 2, 4, 8] {
                let layout = BlockLayout::build(16, 8, 16, nt).unwrap();
                let q = blocked_oracle_selection(t.head(0), &layout, &p, 40).unwrap().quality;
                assert!(q >= last);
                last = q;
            }
        }
    }

    #[test]
    fn perturbation_is_detected() {
        let t = random_tokens(32, 4, 3);
        let p = partition_src_dst(32, 8, 0.25, false, PartitionMode::Stride).unwrap();
        let layout = BlockLayout::build(8, 4, 8, 2).unwrap();
        let rep = check_submatrix(t.head(0), &layout, &p, Some(Perturbation { block: 1, delta: 1e-3 }))
            .unwrap();
        assert!(!rep.holds);
        assert!(rep.max_abs_discrepancy > 1e-4);
    }

    #[test]
    fn guard_rejects_large_inputs() {
        let n = MAX_ORACLE_TOKENS + 4;
        let data = vec![1.0; n];
        let t = TokenTensor::new(data, 1, n, 1, 4).unwrap();
        let p = partition_src_dst(n, 4, 0.25, false, PartitionMode::Stride).unwrap();
        assert!(matches!(global_merge_oracle(t.head(0), &p, 0), Err(OracleError::Guard { .. })));
    }

    #[test]
    fn quantile_cases() {
        assert_eq!(quality_metric(&[1.0; 7], 0.1).unwrap(), 1.0);
        assert_eq!(quality_metric(&[0.0, 1.0], 0.5).unwrap(), 0.5);
        assert!(matches!(quality_metric(&[], 0.1), Err(OracleError::EmptySelection)));
    }

    #[test]
    fn quantile_matches_sort_and_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let scores: Vec<f32> = (0..100).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // position 0.1 * 99 = 9.9
        let expected = sorted[9] as f64 + 0.9 * (sorted[10] as f64 - sorted[9] as f64);
        assert!((quality_metric(&scores, 0.1).unwrap() - expected).abs() < 1e-12);
    }
}
