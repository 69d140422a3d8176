//! Scaled dot-product attention weights and the attention masks used by the
//! Q-Former and the toy decoder.

use ndarray::{Array2, ArrayView2};

use crate::autograd::softmax_rows_owned;

/// `softmax(q·kᵀ/√d + mask)` for a single head. Every row sums to one; keys
/// masked with `-inf` receive exactly zero weight.
pub fn attention_weights(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    mask: Option<ArrayView2<f64>>,
) -> Array2<f64> {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut scores = q.as_standard_layout().dot(&k.t());
    scores *= scale;
    if let Some(m) = mask {
        scores += &m;
    }
    softmax_rows_owned(scores)
}

/// How the query block and the text block of a joint sequence see each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointMask {
    /// Queries see queries, text sees text (bidirectionally).
    Unimodal,
    /// Like [`JointMask::Unimodal`] but the text block is causal.
    UnimodalCausal,
    /// Queries see queries only; text sees every query and earlier text.
    MultimodalCausal,
    /// Everything sees everything.
    Bidirectional,
}

/// Builds the `(nq+nt)×(nq+nt)` additive mask for a joint sequence of
/// `num_queries` query rows followed by `text_valid.len()` text rows.
/// Text positions whose `text_valid` flag is false are padding and are never
/// attended to.
pub fn joint_mask(num_queries: usize, text_valid: &[bool], kind: JointMask) -> Array2<f64> {
    let nt = text_valid.len();
    let n = num_queries + nt;
    Array2::from_shape_fn((n, n), |(i, j)| {
        let i_query = i < num_queries;
        let j_query = j < num_queries;
        if !j_query && !text_valid[j - num_queries] {
            return f64::NEG_INFINITY;
        }
        let visible = match (kind, i_query, j_query) {
            (JointMask::Bidirectional, _, _) => true,
            (_, true, true) => true,
            (_, true, false) => false,
            (JointMask::MultimodalCausal, false, true) => true,
            (_, false, true) => false,
            (JointMask::Unimodal, false, false) => true,
            (JointMask::UnimodalCausal | JointMask::MultimodalCausal, false, false) => j <= i,
        };
        if visible {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    })
}

/// Lower-triangular additive mask for `n` positions.
pub fn causal_mask(n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(i, j)| if j <= i { 0.0 } else { f64::NEG_INFINITY })
}
