//! Invariant / specific subspace projection, token fusion and the detection head.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{pair_attention, PairIndex};
use crate::config::TrainConfig;
use crate::encoders::{apply_affine, apply_affines, init_affine};
use crate::error::{Error, Result};
use crate::numerics::{Activation, Matrix, ParamStore, Tape, Var};
use crate::scalar::Scalar;

pub const INVARIANT_PREFIX: &str = "sub.inv";
pub const FUSE_PREFIX: &str = "fuse";
pub const DETECT_PREFIX: &str = "detect";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    G,
    T,
    M,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::G, Mode::T, Mode::M];
    /// Unordered mode pairs used by the similarity and cross-mode difference terms.
    pub const PAIRS: [(Mode, Mode); 3] = [(Mode::G, Mode::T), (Mode::G, Mode::M), (Mode::T, Mode::M)];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn tag(self) -> &'static str {
        match self {
            Mode::G => "G",
            Mode::T => "T",
            Mode::M => "M",
        }
    }
}

pub fn specific_prefix(mode: Mode) -> String {
    format!("sub.spec.{}", mode.tag())
}

/// The six projected matrices, each `n x d_h`.
#[derive(Clone, Copy, Debug)]
pub struct SubspaceBundle {
    pub invariant: [Var; 3],
    pub specific: [Var; 3],
}

impl SubspaceBundle {
    pub fn inv(&self, m: Mode) -> Var {
        self.invariant[m.index()]
    }

    pub fn spec(&self, m: Mode) -> Var {
        self.specific[m.index()]
    }

    /// `[h^i_G, h^i_T, h^i_M, h^s_G, h^s_T, h^s_M]`.
    pub fn tokens(&self) -> [Var; 6] {
        let [a, b, c] = self.invariant;
        let [d, e, f] = self.specific;
        [a, b, c, d, e, f]
    }
}

pub fn init_projectors<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, hidden: usize, rng: &mut R) -> Result<()> {
    for m in Mode::ALL {
        init_affine(store, &specific_prefix(m), hidden, hidden, rng)?;
    }
    init_affine(store, INVARIANT_PREFIX, hidden, hidden, rng)
}

/// Per-mode specific projectors and one shared invariant projector.
pub fn project<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: [Var; 3],
    act: Activation,
) -> Result<SubspaceBundle> {
    let mut invariant = x;
    let mut specific = x;
    for m in Mode::ALL {
        let xm = x[m.index()];
        let s = apply_affine(tape, store, &specific_prefix(m), xm)?;
        specific[m.index()] = tape.activation(s, act);
        let i = apply_affine(tape, store, INVARIANT_PREFIX, xm)?;
        invariant[m.index()] = tape.activation(i, act);
    }
    Ok(SubspaceBundle { invariant, specific })
}

pub fn init_fusion<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    hidden: usize,
    heads: usize,
    rng: &mut R,
) -> Result<()> {
    if heads == 0 || !hidden.is_multiple_of(heads) {
        return Err(Error::Config(format!("heads ({heads}) must divide hidden ({hidden})")));
    }
    for i in 0..heads {
        for part in ["q", "k", "v"] {
            init_affine(store, &format!("{FUSE_PREFIX}.head{i}.{part}"), hidden, hidden / heads, rng)?;
        }
    }
    store.insert_xavier(format!("{FUSE_PREFIX}.out.w"), hidden, hidden, rng)
}

/// All `P x P` position pairs of each user. Tokens are stacked
/// position-major, so token `p` of user `u` is row `p·n + u`.
pub fn token_pairs(n_users: usize, positions: usize) -> PairIndex {
    let cap = n_users * positions * positions;
    let (mut query, mut key) = (Vec::with_capacity(cap), Vec::with_capacity(cap));
    for p in 0..positions {
        for u in 0..n_users {
            for k in 0..positions {
                query.push(p * n_users + u);
                key.push(k * n_users + u);
            }
        }
    }
    PairIndex::new(query, key)
}

pub struct FusionOutput {
    /// `n x P·d_h`, positions concatenated in input order.
    pub h_out: Var,
    /// Per head, `(n·P²) x 1` weights ordered as [`token_pairs`].
    pub alpha: Vec<Var>,
}

/// Multi-head self-attention across the `P` tokens of each user, no
/// positional encoding.
pub fn fuse<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    heads: usize,
    tokens: &[Var],
) -> Result<FusionOutput> {
    let Some(&first) = tokens.first() else {
        return Err(Error::Empty("fusion needs at least one token".into()));
    };
    let (n, d) = tape.shape(first);
    for &t in tokens {
        if tape.shape(t) != (n, d) {
            return Err(Error::shape("fuse", (n, d), tape.shape(t)));
        }
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("heads ({heads}) must divide hidden ({d})")));
    }
    let p = tokens.len();
    let stacked = tape.concat_rows(tokens)?;
    let pairs = token_pairs(n, p);
    let scale = T::one() / T::from_count(d / heads).sqrt();

    let mut outs = Vec::with_capacity(heads);
    let mut alpha = Vec::with_capacity(heads);
    let prefixes: Vec<String> = (0..heads)
        .flat_map(|i| ["q", "k", "v"].map(|part| format!("{FUSE_PREFIX}.head{i}.{part}")))
        .collect();
    let qkv = apply_affines(tape, store, &prefixes, stacked)?;
    for i in 0..heads {
        let (q, k, v) = (qkv[3 * i], qkv[3 * i + 1], qkv[3 * i + 2]);
        let att = pair_attention(tape, q, k, v, &pairs, n * p, scale)?.expect("n·P² pairs");
        outs.push(att.out);
        alpha.push(att.alpha);
    }
    let z = tape.concat_cols(&outs)?;
    let wo = tape.param(store, &format!("{FUSE_PREFIX}.out.w"))?;
    let z = tape.matmul(z, wo)?;

    let mut blocks = Vec::with_capacity(p);
    for pos in 0..p {
        let idx: Arc<[usize]> = (pos * n..(pos + 1) * n).collect();
        blocks.push(tape.gather_rows(z, idx)?);
    }
    let h_out = tape.concat_cols(&blocks)?;
    Ok(FusionOutput { h_out, alpha })
}

pub fn init_detector<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, input: usize, rng: &mut R) -> Result<()> {
    init_affine(store, DETECT_PREFIX, input, 1, rng)
}

/// `ŷ = sigmoid(h_out·w + b)`, an `n x 1` column of bot probabilities.
pub fn detect<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, h_out: Var) -> Result<Var> {
    let logit = apply_affine(tape, store, DETECT_PREFIX, h_out)?;
    Ok(tape.sigmoid(logit))
}

/// Hard labels with `ŷ ≥ 0.5` counted as bot.
pub fn hard_labels<T: Scalar>(probs: &Matrix<T>) -> Vec<bool> {
    probs.data().iter().map(|&p| p >= T::lit(0.5)).collect()
}

/// Number of fused tokens for the configured variant.
pub fn fusion_positions(cfg: &TrainConfig) -> usize {
    use crate::config::Variant;
    match cfg.variant {
        Variant::Full => 6,
        Variant::Sf | Variant::If | Variant::Base => 3,
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn store(d: usize, heads: usize) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        init_projectors(&mut s, d, &mut rng).unwrap();
        init_fusion(&mut s, d, heads, &mut rng).unwrap();
        init_detector(&mut s, 6 * d, &mut rng).unwrap();
        s
    }

    #[test]
    fn shared_invariant_projection_is_bitwise_equal() {
        let s = store(4, 2);
        let mut tape = Tape::new();
        let x = Matrix::from_f64_rows(&[vec![0.3, -1.0, 2.0, 0.5], vec![1.0, 0.0, -0.2, 0.7]]).unwrap();
        let v = tape.constant(x);
        let b = project(&mut tape, &s, [v, v, v], Activation::Relu).unwrap();
        assert_eq!(tape.value(b.inv(Mode::G)), tape.value(b.inv(Mode::T)));
        assert_eq!(tape.value(b.inv(Mode::T)), tape.value(b.inv(Mode::M)));
    }

    #[test]
    fn identical_tokens_give_uniform_attention() {
        let s = store(4, 2);
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_f64_rows(&[vec![0.3, -1.0, 2.0, 0.5]]).unwrap());
        let out = fuse(&mut tape, &s, 2, &[x; 6]).unwrap();
        for a in &out.alpha {
            for &w in tape.value(*a).data() {
                assert!((w - 1.0 / 6.0).abs() < 1e-12);
            }
        }
        let h = tape.value(out.h_out);
        for p in 1..6 {
            for c in 0..4 {
                assert!((h.get(0, p * 4 + c) - h.get(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_detector_gives_half() {
        let mut s = store(2, 1);
        s.value_mut("detect.w").unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
        let mut tape = Tape::new();
        let h = tape.constant(Matrix::filled(3, 12, 0.7));
        let y = detect(&mut tape, &s, h).unwrap();
        assert!(tape.value(y).data().iter().all(|&p| p == 0.5));
        assert_eq!(hard_labels(tape.value(y)), vec![true; 3]);
    }
}
