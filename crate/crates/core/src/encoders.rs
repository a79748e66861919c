//! Metadata, text and initial node-feature encoders.

use rand::Rng;

use crate::data::{UserRecord, META_DIM};
use crate::error::{Error, Result};
use crate::numerics::{Activation, DropoutCtx, ParamKind, ParamStore, Tape, Var};
use crate::scalar::Scalar;

pub const META_PREFIX: &str = "enc.meta";
pub const TEXT_PREFIX: &str = "enc.text";
pub const NODE_PREFIX: &str = "enc.node";

/// Registers `{prefix}.w` (`fan_in x fan_out`, Xavier) and `{prefix}.b` (zeros).
pub fn init_affine<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert_xavier(format!("{prefix}.w"), fan_in, fan_out, rng)?;
    store.insert_zeros(format!("{prefix}.b"), 1, fan_out, ParamKind::Bias)
}

/// `x·W + b` with the parameters registered under `prefix`.
pub fn apply_affine<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    let (_, cols) = tape.shape(x);
    let (fan_in, _) = tape.shape(w);
    if cols != fan_in {
        return Err(Error::shape(prefix_op(prefix), tape.shape(x), tape.shape(w)));
    }
    tape.affine(x, w, b)
}

/// Several affine maps of the same input evaluated as one wide product.
/// Returns one output per prefix, in order.
pub fn apply_affines<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefixes: &[String],
    x: Var,
) -> Result<Vec<Var>> {
    if prefixes.len() == 1 {
        return Ok(vec![apply_affine(tape, store, &prefixes[0], x)?]);
    }
    let mut ws = Vec::with_capacity(prefixes.len());
    let mut bs = Vec::with_capacity(prefixes.len());
    for p in prefixes {
        ws.push(tape.param(store, &format!("{p}.w"))?);
        bs.push(tape.param(store, &format!("{p}.b"))?);
    }
    let w = tape.concat_cols(&ws)?;
    let b = tape.concat_cols(&bs)?;
    if tape.shape(x).1 != tape.shape(w).0 {
        return Err(Error::shape("affine", tape.shape(x), tape.shape(w)));
    }
    let y = tape.affine(x, w, b)?;
    let mut out = Vec::with_capacity(prefixes.len());
    let mut start = 0;
    for &wi in &ws {
        let width = tape.shape(wi).1;
        out.push(tape.slice_cols(y, start, width)?);
        start += width;
    }
    Ok(out)
}

fn prefix_op(prefix: &str) -> &'static str {
    match prefix {
        p if p.starts_with(META_PREFIX) => "encode_metadata",
        p if p.starts_with(TEXT_PREFIX) => "encode_text",
        p if p.starts_with(NODE_PREFIX) => "initial_node_feature",
        _ => "affine",
    }
}

/// Two affine layers with a nonlinearity (and dropout) in between.
pub fn mlp2<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    act: Activation,
    dropout: &mut DropoutCtx<'_>,
) -> Result<Var> {
    let h = apply_affine(tape, store, &format!("{prefix}.l1"), x)?;
    let h = tape.activation(h, act);
    let h = dropout.apply(tape, h)?;
    apply_affine(tape, store, &format!("{prefix}.l2"), h)
}

pub fn init_mlp2<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut R,
) -> Result<()> {
    init_affine(store, &format!("{prefix}.l1"), input, hidden, rng)?;
    init_affine(store, &format!("{prefix}.l2"), hidden, hidden, rng)
}

/// Registers the metadata MLP, the text MLP and the initial node map.
pub fn init_encoders<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    text_dim: usize,
    hidden: usize,
    rng: &mut R,
) -> Result<()> {
    init_mlp2(store, META_PREFIX, META_DIM, hidden, rng)?;
    init_mlp2(store, TEXT_PREFIX, 2 * text_dim, hidden, rng)?;
    init_affine(store, NODE_PREFIX, 2 * hidden, hidden, rng)
}

/// `x_M` from z-scored numeric metadata with the categorical bits appended (`n x 8`).
pub fn encode_metadata<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    meta: Var,
    act: Activation,
    dropout: &mut DropoutCtx<'_>,
) -> Result<Var> {
    if tape.shape(meta).1 != META_DIM {
        return Err(Error::shape("encode_metadata", tape.shape(meta), (tape.shape(meta).0, META_DIM)));
    }
    mlp2(tape, store, META_PREFIX, meta, act, dropout)
}

/// `[description ‖ mean(tweets)]`; an empty tweet list pools to zero.
pub fn text_input(desc: &[f64], tweets: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = desc.len();
    let mut pooled = vec![0.0; d];
    for t in tweets {
        if t.len() != d {
            return Err(Error::shape("encode_text", (1, d), (1, t.len())));
        }
        for (p, &x) in pooled.iter_mut().zip(t) {
            *p += x;
        }
    }
    if !tweets.is_empty() {
        let n = tweets.len() as f64;
        pooled.iter_mut().for_each(|p| *p /= n);
    }
    let mut out = desc.to_vec();
    out.extend(pooled);
    Ok(out)
}

pub fn user_text_input(u: &UserRecord) -> Result<Vec<f64>> {
    text_input(&u.description_embedding, &u.tweet_embeddings)
}

/// `x_T` from the pooled text rows produced by [`text_input`] (`n x 2·d_text`).
pub fn encode_text<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    text: Var,
    act: Activation,
    dropout: &mut DropoutCtx<'_>,
) -> Result<Var> {
    mlp2(tape, store, TEXT_PREFIX, text, act, dropout)
}

/// `h = W_D·[x_M ‖ x_T] + b_D`.
pub fn initial_node_feature<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, x_meta: Var, x_text: Var) -> Result<Var> {
    if tape.shape(x_meta) != tape.shape(x_text) {
        return Err(Error::shape("initial_node_feature", tape.shape(x_meta), tape.shape(x_text)));
    }
    let cat = tape.concat_cols(&[x_meta, x_text])?;
    apply_affine(tape, store, NODE_PREFIX, cat)
}
