//! Message-passing layers: the local relational transformer and the GCN,
//! GAT and RGT-style substitutes used for ablation. All share the gated
//! residual `x' = β·H + (1 - β)·x` with `β = sigmoid(gate)`.

use std::sync::Arc;

use rand::Rng;

use crate::attention::{pair_attention, PairIndex};
use crate::config::{GraphLayerKind, TrainConfig};
use crate::encoders::{apply_affine, apply_affines, init_affine};
use crate::error::Result;
use crate::numerics::{DropoutCtx, Matrix, ParamKind, ParamStore, Tape, Var};
use crate::scalar::Scalar;

use super::neighborhood::GraphStructure;

/// Attention weights recorded during a forward pass.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub layer: usize,
    /// `None` for relation-agnostic layers.
    pub relation: Option<usize>,
    pub head: usize,
    pub centers: Arc<[usize]>,
    pub alpha: Var,
}

pub fn layer_prefix(layer: usize) -> String {
    format!("graph.layer{layer}")
}

pub fn gate_name(layer: usize) -> String {
    format!("{}.gate", layer_prefix(layer))
}

fn head_prefix(layer: usize, relation: Option<usize>, head: usize) -> String {
    match relation {
        Some(r) => format!("{}.rel{r}.head{head}", layer_prefix(layer)),
        None => format!("{}.head{head}", layer_prefix(layer)),
    }
}

fn init_qkv<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    hidden: usize,
    head_dim: usize,
    rng: &mut R,
) -> Result<()> {
    for part in ["q", "k", "v"] {
        init_affine(store, &format!("{prefix}.{part}"), hidden, head_dim, rng)?;
    }
    Ok(())
}

pub fn init_layer<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    cfg: &TrainConfig,
    n_relations: usize,
    layer: usize,
    rng: &mut R,
) -> Result<()> {
    let (d, dk) = (cfg.hidden, cfg.head_dim());
    let p = layer_prefix(layer);
    match cfg.graph_layer {
        GraphLayerKind::Local => {
            for r in 0..n_relations {
                for i in 0..cfg.heads {
                    init_qkv(store, &head_prefix(layer, Some(r), i), d, dk, rng)?;
                }
            }
            store.insert_xavier(format!("{p}.out.w"), d, d, rng)?;
        }
        GraphLayerKind::Gat => {
            for i in 0..cfg.heads {
                init_qkv(store, &head_prefix(layer, None, i), d, dk, rng)?;
            }
            store.insert_xavier(format!("{p}.out.w"), d, d, rng)?;
        }
        GraphLayerKind::Gcn => init_affine(store, &format!("{p}.gcn"), d, d, rng)?,
        GraphLayerKind::Rgt => {
            for r in 0..n_relations {
                init_affine(store, &format!("{p}.rel{r}.v"), d, d, rng)?;
            }
            init_affine(store, &format!("{p}.sem"), d, d, rng)?;
            store.insert_xavier(format!("{p}.sem.q"), d, 1, rng)?;
            store.insert_xavier(format!("{p}.out.w"), d, d, rng)?;
        }
    }
    store.insert(gate_name(layer), Matrix::zeros(1, 1), ParamKind::Gate)
}

/// Multi-head attention over `pairs` with per-head parameters under
/// `head_prefix(layer, relation, i)`; returns one `n x d_k` block per head.
fn multi_head<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &TrainConfig,
    x: Var,
    pairs: &PairIndex,
    n_nodes: usize,
    layer: usize,
    relation: Option<usize>,
    traces: &mut Option<&mut Vec<AttentionTrace>>,
) -> Result<Vec<Option<Var>>> {
    if pairs.is_empty() {
        return Ok(vec![None; cfg.heads]);
    }
    let scale = T::one() / T::from_count(cfg.head_dim()).sqrt();
    let prefixes: Vec<String> = (0..cfg.heads)
        .flat_map(|i| {
            let hp = head_prefix(layer, relation, i);
            ["q", "k", "v"].map(|part| format!("{hp}.{part}"))
        })
        .collect();
    let qkv = apply_affines(tape, store, &prefixes, x)?;
    let mut heads = Vec::with_capacity(cfg.heads);
    for i in 0..cfg.heads {
        let (q, k, v) = (qkv[3 * i], qkv[3 * i + 1], qkv[3 * i + 2]);
        let att = pair_attention(tape, q, k, v, pairs, n_nodes, scale)?.expect("non-empty pairs");
        if let Some(t) = traces.as_deref_mut() {
            t.push(AttentionTrace {
                layer,
                relation,
                head: i,
                centers: pairs.query.clone(),
                alpha: att.alpha,
            });
        }
        heads.push(Some(att.out));
    }
    Ok(heads)
}

fn zero_block<T: Scalar>(tape: &mut Tape<T>, rows: usize, cols: usize) -> Var {
    tape.constant(Matrix::zeros(rows, cols))
}

/// Sums optional per-relation head outputs; `None` if all are absent.
fn sum_opt<T: Scalar>(tape: &mut Tape<T>, parts: impl IntoIterator<Item = Option<Var>>) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for p in parts.into_iter().flatten() {
        acc = Some(match acc {
            Some(a) => tape.add(a, p)?,
            None => p,
        });
    }
    Ok(acc)
}

/// One message-passing layer followed by the gated residual.
#[allow(clippy::too_many_arguments)]
pub fn graph_layer<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &TrainConfig,
    structure: &GraphStructure<T>,
    x: Var,
    layer: usize,
    dropout: &mut DropoutCtx<'_>,
    mut traces: Option<&mut Vec<AttentionTrace>>,
) -> Result<Var> {
    let n = structure.n_nodes;
    let (d, dk) = (cfg.hidden, cfg.head_dim());
    let p = layer_prefix(layer);

    let h = match cfg.graph_layer {
        GraphLayerKind::Local => {
            // per head: Σ_r Σ_{u ∈ N_r(v)} α·V
            let mut per_rel = Vec::with_capacity(structure.relations.len());
            for (r, pairs) in structure.relations.iter().enumerate() {
                per_rel.push(multi_head(tape, store, cfg, x, pairs, n, layer, Some(r), &mut traces)?);
            }
            let mut heads = Vec::with_capacity(cfg.heads);
            for i in 0..cfg.heads {
                let z = sum_opt(tape, per_rel.iter().map(|hs| hs[i]))?;
                heads.push(match z {
                    Some(z) => z,
                    None => zero_block(tape, n, dk),
                });
            }
            let z = tape.concat_cols(&heads)?;
            let wo = tape.param(store, &format!("{p}.out.w"))?;
            tape.matmul(z, wo)?
        }
        GraphLayerKind::Gat => {
            let hs = multi_head(tape, store, cfg, x, &structure.union, n, layer, None, &mut traces)?;
            let heads: Vec<Var> = hs
                .into_iter()
                .map(|h| h.unwrap_or_else(|| zero_block(tape, n, dk)))
                .collect();
            let z = tape.concat_cols(&heads)?;
            let wo = tape.param(store, &format!("{p}.out.w"))?;
            tape.matmul(z, wo)?
        }
        GraphLayerKind::Gcn => {
            let agg = tape.sparse_matmul(structure.union_mean.clone(), x)?;
            apply_affine(tape, store, &format!("{p}.gcn"), agg)?
        }
        GraphLayerKind::Rgt => rgt_aggregate(tape, store, structure, x, layer, d)?,
    };
    let h = dropout.apply(tape, h)?;

    let gate = tape.param(store, &gate_name(layer))?;
    let beta = tape.sigmoid(gate);
    let one_minus = tape.scale(beta, -T::one());
    let one_minus = tape.add_const(one_minus, T::one());
    let mixed = tape.scale_by(h, beta)?;
    let kept = tape.scale_by(x, one_minus)?;
    tape.add(mixed, kept)
}

/// Uniform neighbor means per relation, combined with relation weights from
/// a node-averaged semantic score.
fn rgt_aggregate<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    structure: &GraphStructure<T>,
    x: Var,
    layer: usize,
    d: usize,
) -> Result<Var> {
    let p = layer_prefix(layer);
    let n = structure.n_nodes;
    if structure.relations.is_empty() {
        return Ok(zero_block(tape, n, d));
    }
    let q = tape.param(store, &format!("{p}.sem.q"))?;
    let mut zs = Vec::new();
    let mut scores = Vec::new();
    for (r, mean) in structure.relation_means.iter().enumerate() {
        let v = apply_affine(tape, store, &format!("{p}.rel{r}.v"), x)?;
        let z = tape.sparse_matmul(mean.clone(), v)?;
        let s = apply_affine(tape, store, &format!("{p}.sem"), z)?;
        let s = tape.tanh(s);
        let s = tape.mean_rows(s);
        let s = tape.matmul(s, q)?;
        zs.push(z);
        scores.push(s);
    }
    let scores = tape.concat_cols(&scores)?;
    let weights = tape.softmax_rows(scores);
    let mut acc: Option<Var> = None;
    for (r, z) in zs.into_iter().enumerate() {
        let w = tape.slice_cols(weights, r, 1)?;
        let term = tape.scale_by(z, w)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    let h = acc.expect("at least one relation");
    let wo = tape.param(store, &format!("{p}.out.w"))?;
    tape.matmul(h, wo)
}
