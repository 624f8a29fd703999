//! Head-wise temporal token merging (HTTM) for multi-head attention.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensors`]: token containers and the binary dump format
//! - [`similarity`]: src/dst partitioning, cosine similarity, matching, cost model
//! - [`reorder`]: temporal reordering into spatio-temporal merging blocks
//! - [`merge_engine`]: head-wise merging, outlier filtering, merged attention
//! - [`oracle`]: global matching reference and block-wise merging properties
//! - [`toy_vggt`]: synthetic scenes and an alternating frame/global attention stack
//! - [`config`] and [`cli`]: the batch front-end

pub mod cli;
pub mod config;
pub mod merge_engine;
pub mod oracle;
pub mod reorder;
pub mod similarity;
pub mod tensors;
pub mod toy_vggt;

pub use merge_engine::{
    exact_attention, merged_attention, uniform_merge_baseline, HttmConfig, MergePlan, MergeSettings,
    MergedAttentionOutput, OutlierMask,
};
pub use reorder::BlockLayout;
pub use similarity::{Partition, PartitionMode};
pub use tensors::{HeadSlice, Matrix, TokenTensor};
pub use toy_vggt::{GlobalRope, SceneSpec, StackConfig};
