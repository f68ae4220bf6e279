//! Pattern memories: the gradient-free space-aware [`MemoryQueue`], the learnable
//! [`MemoryMatrix`], and the top-k assembly they share.

mod matrix;
mod queue;
mod regions;
mod shrinkage;

pub use matrix::MemoryMatrix;
pub use queue::{AccessKind, MemoryQueue, QueueAccess};
pub use regions::{partition_regions, RegionMap};
pub use shrinkage::{gumbel_shrinkage, hard_shrinkage, topk_mask, Shrinkage};

use tch::{Kind, Tensor};

use crate::error::{Result, SquidError};

const NORM_EPS: f64 = 1e-8;

/// Unit-normalizes vectors along the last dimension.
pub fn l2_normalize(x: &Tensor) -> Tensor {
    let norm = x.linalg_norm(2.0, [-1i64].as_slice(), true, None::<Kind>).clamp_min(NORM_EPS);
    x / norm
}

/// Cosine similarity between every query row and every pattern row.
///
/// `queries` is `[.., n, d]`, `patterns` is `[.., m, d]`; the result is `[.., n, m]`.
pub fn cosine_similarity(queries: &Tensor, patterns: &Tensor) -> Tensor {
    l2_normalize(queries).matmul(&l2_normalize(patterns).transpose(-1, -2))
}

/// Similarity-weighted assembly of `patterns` for each query.
///
/// `queries` is `[g, n, d]` and `patterns` is `[g, m, d]`: every group of queries
/// only sees its own group of patterns. Returns `[g, n, d]`.
pub fn assemble(queries: &Tensor, patterns: &Tensor, k: i64, shrinkage: Shrinkage) -> Result<Tensor> {
    let (qs, ps) = (queries.size(), patterns.size());
    if qs.len() != 3 || ps.len() != 3 || qs[0] != ps[0] || qs[2] != ps[2] {
        return Err(SquidError::shape(format!("[g, n, d] queries against [g, m, d] patterns, patterns {ps:?}"), format!("{qs:?}")));
    }
    let weights = shrinkage.apply(&cosine_similarity(queries, patterns), k)?;
    Ok(weights.matmul(patterns))
}
