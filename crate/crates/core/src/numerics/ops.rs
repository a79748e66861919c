use std::sync::Arc;

use rand::{Rng, RngCore};

use super::matrix::Matrix;
use super::tape::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `x·W + b` with `b` broadcast over the rows of `x`.
pub fn affine<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if b.rows() != 1 || b.cols() != w.cols() {
        return Err(Error::shape("affine bias", w.shape(), b.shape()));
    }
    let mut out = x.matmul(w)?;
    for r in 0..out.rows() {
        for (o, &bias) in out.row_mut(r).iter_mut().zip(b.data()) {
            *o += bias;
        }
    }
    Ok(out)
}

pub fn activate<T: Scalar>(x: &Matrix<T>, act: Activation) -> Matrix<T> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.activation(v, act);
    tape.value(y).clone()
}

pub fn relu<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub use super::tape::softmax_rows;

/// Inverted dropout mask: entries are `0` with probability `rate` and
/// `1 / (1 - rate)` otherwise.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Result<Matrix<T>> {
    check_rate(rate)?;
    let keep = T::lit(1.0 / (1.0 - rate));
    let data = (0..rows * cols)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Value-level dropout. Identity when not training or when `rate == 0`.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(x: &Matrix<T>, rate: f64, training: bool, rng: &mut R) -> Result<Matrix<T>> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.rows(), x.cols(), rate, rng)?;
    x.hadamard(&mask)
}

/// Dropout recorded on a tape.
pub fn dropout_var<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: Var,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let (r, c) = tape.shape(x);
    let mask = dropout_mask(r, c, rate, rng)?;
    tape.mask(x, Arc::new(mask))
}

/// Dropout state threaded through a forward pass; `eval()` disables it.
pub struct DropoutCtx<'a> {
    rate: f64,
    rng: Option<&'a mut dyn RngCore>,
}

impl<'a> DropoutCtx<'a> {
    pub fn eval() -> Self {
        DropoutCtx { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, rng: &'a mut dyn RngCore) -> Result<Self> {
        check_rate(rate)?;
        Ok(DropoutCtx { rate, rng: Some(rng) })
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn apply<T: Scalar>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => dropout_var(tape, x, self.rate, true, rng),
            _ => Ok(x),
        }
    }
}
