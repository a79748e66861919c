//! Training objective: task cross-entropy with L2, CMD similarity between
//! invariant subspaces, soft orthogonality, and reconstruction.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::encoders::{apply_affine, init_affine};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamStore, Tape, Var};
use crate::scalar::Scalar;
use crate::subspace::{Mode, SubspaceBundle};

pub const DECODER_PREFIX: &str = "dec";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta_w: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub cmd_order: usize,
}

impl LossWeights {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        LossWeights {
            alpha: cfg.alpha,
            beta_w: cfg.beta_w,
            gamma: cfg.gamma,
            lambda: cfg.l2_lambda,
            cmd_order: cfg.cmd_order,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta_w", self.beta_w), ("gamma", self.gamma), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.cmd_order == 0 {
            return Err(Error::Config("cmd order must be at least 1".into()));
        }
        Ok(())
    }
}

/// Central moment discrepancy of order `k` between the row samples of `x`
/// and `y`, normalized by the joint value range.
pub fn cmd<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var, k: usize) -> Result<Var> {
    let (nx, dx) = tape.shape(x);
    let (ny, dy) = tape.shape(y);
    if nx == 0 || ny == 0 {
        return Err(Error::Empty("cmd needs at least one row per sample".into()));
    }
    if dx != dy {
        return Err(Error::shape("cmd", (nx, dx), (ny, dy)));
    }
    if k == 0 {
        return Err(Error::Config("cmd order must be at least 1".into()));
    }
    let joint = tape.concat_rows(&[x, y])?;
    let hi = tape.max_all(joint)?;
    let lo = tape.min_all(joint)?;
    if tape.value(hi).item() == tape.value(lo).item() {
        return Ok(tape.constant(Matrix::scalar(T::zero())));
    }
    let range = tape.sub(hi, lo)?;

    let mx = tape.mean_rows(x);
    let my = tape.mean_rows(y);
    let diff = tape.sub(mx, my)?;
    let n1 = tape.norm2(diff);
    let inv = tape.powi(range, -1);
    let mut total = tape.mul(n1, inv)?;
    if k >= 2 {
        let cx = tape.center_cols(x)?;
        let cy = tape.center_cols(y)?;
        for order in 2..=k {
            let px = tape.powi(cx, order as i32);
            let py = tape.powi(cy, order as i32);
            let mpx = tape.mean_rows(px);
            let mpy = tape.mean_rows(py);
            let d = tape.sub(mpx, mpy)?;
            let nk = tape.norm2(d);
            let inv = tape.powi(range, -(order as i32));
            let term = tape.mul(nk, inv)?;
            total = tape.add(total, term)?;
        }
    }
    Ok(total)
}

/// Value-only CMD.
pub fn cmd_value<T: Scalar>(x: &Matrix<T>, y: &Matrix<T>, k: usize) -> Result<T> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let out = cmd(&mut tape, a, b, k)?;
    Ok(tape.value(out).item())
}

/// Mean CMD over the three invariant pairs.
pub fn sim_loss<T: Scalar>(tape: &mut Tape<T>, bundle: &SubspaceBundle, k: usize) -> Result<Var> {
    let mut acc = None;
    for (a, b) in Mode::PAIRS {
        let c = cmd(tape, bundle.inv(a), bundle.inv(b), k)?;
        acc = Some(match acc {
            Some(s) => tape.add(s, c)?,
            None => c,
        });
    }
    let acc = acc.expect("three pairs");
    Ok(tape.scale(acc, T::one() / T::lit(3.0)))
}

/// Column-centered, row-normalized copy used by the orthogonality terms.
pub fn normalize_for_diff<T: Scalar>(tape: &mut Tape<T>, h: Var) -> Result<Var> {
    let c = tape.center_cols(h)?;
    Ok(tape.row_normalize(c))
}

/// `‖AᵀB‖²_F`.
pub fn cross_gram_sq<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let at = tape.transpose(a);
    let g = tape.matmul(at, b)?;
    let g2 = tape.powi(g, 2);
    Ok(tape.sum(g2))
}

/// Soft orthogonality between invariant and specific parts: same-mode terms
/// plus the three cross-mode pairs.
pub fn diff_loss<T: Scalar>(tape: &mut Tape<T>, bundle: &SubspaceBundle) -> Result<Var> {
    let n = tape.shape(bundle.inv(Mode::G)).0;
    if n < 2 {
        return Err(Error::Empty(format!("diff loss needs a batch of at least 2 rows, got {n}")));
    }
    let mut inv = [bundle.invariant[0]; 3];
    let mut spec = [bundle.specific[0]; 3];
    for m in Mode::ALL {
        inv[m.index()] = normalize_for_diff(tape, bundle.inv(m))?;
        spec[m.index()] = normalize_for_diff(tape, bundle.spec(m))?;
    }
    let mut total = cross_gram_sq(tape, inv[0], spec[0])?;
    for m in [Mode::T, Mode::M] {
        let t = cross_gram_sq(tape, inv[m.index()], spec[m.index()])?;
        total = tape.add(total, t)?;
    }
    for (a, b) in Mode::PAIRS {
        let t = cross_gram_sq(tape, inv[a.index()], spec[b.index()])?;
        total = tape.add(total, t)?;
    }
    Ok(total)
}

pub fn decoder_prefix(mode: Mode) -> String {
    format!("{DECODER_PREFIX}.{}", mode.tag())
}

pub fn init_decoders<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, hidden: usize, rng: &mut R) -> Result<()> {
    for m in Mode::ALL {
        init_affine(store, &decoder_prefix(m), hidden, hidden, rng)?;
    }
    Ok(())
}

/// Mean squared reconstruction error of `x_m` from `h^i_m + h^s_m`,
/// averaged over modes, rows and columns.
pub fn recon_loss<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    bundle: &SubspaceBundle,
    targets: [Var; 3],
) -> Result<Var> {
    let (n, d) = tape.shape(targets[0]);
    let mut total = None;
    for m in Mode::ALL {
        let h = tape.add(bundle.inv(m), bundle.spec(m))?;
        let xh = apply_affine(tape, store, &decoder_prefix(m), h)?;
        let e = tape.sub(targets[m.index()], xh)?;
        let e2 = tape.powi(e, 2);
        let s = tape.sum(e2);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let denom = T::lit(3.0) * T::from_count(n * d);
    Ok(tape.scale(total.expect("three modes"), T::one() / denom))
}

/// `λ·Σ‖W‖²` over weight parameters (biases and gates excluded).
pub fn l2_penalty<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, lambda: f64) -> Result<Var> {
    let mut total = tape.constant(Matrix::scalar(T::zero()));
    if lambda == 0.0 {
        return Ok(total);
    }
    for name in store.weight_names() {
        let w = tape.param(store, &name)?;
        let w2 = tape.powi(w, 2);
        let s = tape.sum(w2);
        total = tape.add(total, s)?;
    }
    Ok(tape.scale(total, T::lit(lambda)))
}

/// Checks every target is exactly 0 or 1.
pub fn validate_labels(labels: &[f64]) -> Result<()> {
    match labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        Some(y) => Err(Error::Label(y.to_string())),
        None => Ok(()),
    }
}

/// Summed clipped cross-entropy plus the L2 penalty.
pub fn task_loss<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    probs: Var,
    labels: &[f64],
    lambda: f64,
) -> Result<Var> {
    validate_labels(labels)?;
    let targets: Arc<[T]> = labels.iter().map(|&y| T::lit(y)).collect();
    let ce = tape.bce_sum(probs, targets)?;
    let l2 = l2_penalty(tape, store, lambda)?;
    tape.add(ce, l2)
}

/// Loss components of one step; absent parts contribute nothing.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub task: Var,
    pub sim: Option<Var>,
    pub diff: Option<Var>,
    pub recon: Option<Var>,
}

/// Scalar values of each component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub task: f64,
    pub sim: f64,
    pub diff: f64,
    pub recon: f64,
    pub total: f64,
}

impl LossParts {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> LossValues {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().as_f64());
        LossValues {
            task: get(Some(self.task)),
            sim: get(self.sim),
            diff: get(self.diff),
            recon: get(self.recon),
            total: 0.0,
        }
    }
}

/// `task + α·sim + β·diff + γ·recon`; a non-finite part aborts with its name.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, parts: &LossParts, w: &LossWeights) -> Result<Var> {
    let named = [
        ("task", Some(parts.task), 1.0),
        ("sim", parts.sim, w.alpha),
        ("diff", parts.diff, w.beta_w),
        ("recon", parts.recon, w.gamma),
    ];
    for (name, v, _) in named {
        if let Some(v) = v {
            if !tape.value(v).item().is_finite() {
                return Err(Error::NonFinite { part: name.into() });
            }
        }
    }
    let mut total = parts.task;
    for (_, v, weight) in &named[1..] {
        if let Some(v) = *v {
            if *weight != 0.0 {
                let t = tape.scale(v, T::lit(*weight));
                total = tape.add(total, t)?;
            }
        }
    }
    Ok(total)
}
