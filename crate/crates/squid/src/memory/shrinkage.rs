//! Top-k sparse assembly weights.
//!
//! The forward value keeps the `k` largest similarities and renormalizes them
//! with a softmax restricted to the survivors. [`gumbel_shrinkage`] routes the
//! backward pass through the full softmax instead (straight-through), so every
//! candidate receives gradient. [`hard_shrinkage`] keeps the true gradient of the
//! restricted softmax, which only reaches the survivors.

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Result, SquidError};

/// How sparse assembly weights are produced from raw similarities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Shrinkage {
    /// Top-k forward, full-softmax backward.
    #[default]
    Gumbel,
    /// Top-k forward and backward.
    Hard,
}

impl Shrinkage {
    pub fn apply(self, w: &Tensor, k: i64) -> Result<Tensor> {
        match self {
            Shrinkage::Gumbel => gumbel_shrinkage(w, k),
            Shrinkage::Hard => hard_shrinkage(w, k),
        }
    }
}

fn check(w: &Tensor, k: i64) -> Result<i64> {
    if k <= 0 {
        return Err(SquidError::InvalidArgument(format!("top-k must be positive, got {k}")));
    }
    let n = *w.size().last().ok_or(SquidError::Empty("similarity vector"))?;
    if n == 0 || w.numel() == 0 {
        return Err(SquidError::Empty("similarity vector"));
    }
    Ok(k.min(n))
}

/// Boolean mask of the `k` largest entries along the last dimension.
pub fn topk_mask(w: &Tensor, k: i64) -> Tensor {
    let (_, idx) = w.topk(k, -1, true, false);
    w.zeros_like().scatter_value(-1, &idx, 1.0).to_kind(Kind::Bool)
}

/// Softmax restricted to the top-k entries of the last dimension; everything
/// else is exactly zero.
pub fn hard_shrinkage(w: &Tensor, k: i64) -> Result<Tensor> {
    let k = check(w, k)?;
    let keep = topk_mask(&w.detach(), k);
    Ok(w.masked_fill(&keep.logical_not(), f64::NEG_INFINITY).softmax(-1, w.kind()))
}

/// `sg(hs(w) - softmax(w)) + softmax(w)`: sparse forward value, softmax gradient.
pub fn gumbel_shrinkage(w: &Tensor, k: i64) -> Result<Tensor> {
    let soft = w.softmax(-1, w.kind());
    let hard = hard_shrinkage(&w.detach(), k)?;
    Ok((hard - &soft).detach() + soft)
}
