//! Scaled dot-product attention over an explicit list of (query, key) pairs.
//!
//! Both the graph layers (pairs = edges) and the subspace fusion (pairs =
//! all token pairs of one user) are expressed with this one routine.

use std::sync::Arc;

use crate::error::Result;
use crate::numerics::{Tape, Var};
use crate::scalar::Scalar;

/// Attention pairs: row `e` lets `query[e]` attend to `key[e]`.
#[derive(Clone, Debug)]
pub struct PairIndex {
    pub query: Arc<[usize]>,
    pub key: Arc<[usize]>,
}

impl PairIndex {
    pub fn new(query: Vec<usize>, key: Vec<usize>) -> Self {
        debug_assert_eq!(query.len(), key.len());
        PairIndex {
            query: query.into(),
            key: key.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.query.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query.is_empty()
    }
}

pub struct AttentionOutput {
    /// `n_out x d_v`; rows with no pairs are zero.
    pub out: Var,
    /// `E x 1` weights, summing to one per query.
    pub alpha: Var,
}

/// `out[v] = Σ_{e: query[e]=v} softmax_e(q_v·k_u · scale) · value_u`.
///
/// Returns `None` when there are no pairs at all.
pub fn pair_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    pairs: &PairIndex,
    n_out: usize,
    scale: T,
) -> Result<Option<AttentionOutput>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let alpha = tape.pair_softmax(q, k, pairs.query.clone(), pairs.key.clone(), scale)?;
    let out = tape.pair_aggregate(alpha, v, pairs.query.clone(), pairs.key.clone(), n_out)?;
    Ok(Some(AttentionOutput { out, alpha }))
}
