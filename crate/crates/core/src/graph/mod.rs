//! Graph mode: two-hop context, optional synthetic minority nodes and the
//! stacked message-passing layers.

pub mod layers;
pub mod neighborhood;
pub mod oversample;

use std::sync::Arc;

use rand::Rng;

pub use layers::{gate_name, graph_layer, init_layer, layer_prefix, AttentionTrace};
pub use neighborhood::{mean_operator, oriented_messages, two_hop_neighbors, GraphStructure};
pub use oversample::{
    interpolate, minority_class, mixing_operator, oversample, synthetic_count, SyntheticNode,
};

use crate::config::TrainConfig;
use crate::encoders::{apply_affine, init_affine};
use crate::error::{Error, Result};
use crate::numerics::{DropoutCtx, ParamStore, SparseRows, Tape, Var};
use crate::scalar::Scalar;

pub const PROJ_PREFIX: &str = "graph.proj";

pub fn init_graph<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    cfg: &TrainConfig,
    n_relations: usize,
    rng: &mut R,
) -> Result<()> {
    if cfg.layers == 0 {
        return Err(Error::Config("graph mode needs at least one layer".into()));
    }
    init_affine(store, PROJ_PREFIX, 2 * cfg.hidden, cfg.hidden, rng)?;
    for l in 0..cfg.layers {
        init_layer(store, cfg, n_relations, l, rng)?;
    }
    Ok(())
}

/// `[q ‖ h0]` for the real nodes, where `q` is the two-hop mean of `h0`.
pub fn context_input<T: Scalar>(tape: &mut Tape<T>, structure: &GraphStructure<T>, h0: Var) -> Result<Var> {
    let q = tape.sparse_matmul(structure.two_hop.clone(), h0)?;
    tape.concat_cols(&[q, h0])
}

/// Appends the rows produced by `mixing` (synthetic nodes) below `x`.
pub fn append_synthetic<T: Scalar>(tape: &mut Tape<T>, x: Var, mixing: Option<&Arc<SparseRows<T>>>) -> Result<Var> {
    match mixing {
        Some(m) if !m.rows.is_empty() => {
            let synth = tape.sparse_matmul(m.clone(), x)?;
            tape.concat_rows(&[x, synth])
        }
        _ => Ok(x),
    }
}

/// Node representations `x_G` for every node of `structure` (real first,
/// then synthetic).
#[allow(clippy::too_many_arguments)]
pub fn graph_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &TrainConfig,
    structure: &GraphStructure<T>,
    h0: Var,
    mixing: Option<&Arc<SparseRows<T>>>,
    dropout: &mut DropoutCtx<'_>,
    mut traces: Option<&mut Vec<AttentionTrace>>,
) -> Result<Var> {
    if cfg.layers == 0 {
        return Err(Error::Config("graph mode needs at least one layer".into()));
    }
    let n_mixed = mixing.map_or(0, |m| m.rows.len());
    if structure.n_real + n_mixed != structure.n_nodes {
        return Err(Error::Consistency(format!(
            "structure has {} nodes but {} real + {} synthetic were supplied",
            structure.n_nodes, structure.n_real, n_mixed
        )));
    }
    let xcat = context_input(tape, structure, h0)?;
    let xcat = append_synthetic(tape, xcat, mixing)?;
    let mut x = apply_affine(tape, store, PROJ_PREFIX, xcat)?;
    for l in 0..cfg.layers {
        x = graph_layer(tape, store, cfg, structure, x, l, dropout, traces.as_deref_mut())?;
    }
    Ok(x)
}
