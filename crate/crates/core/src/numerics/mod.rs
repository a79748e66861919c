//! Dense matrices, reverse-mode differentiation, Adam and finite-difference
//! gradient checking.

mod adam;
mod gradcheck;
mod matrix;
mod ops;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig};
pub use gradcheck::{grad_check, relative_error, value_and_grads, GradCheckReport, ParamCheck, RELATIVE_FLOOR};
pub use matrix::Matrix;
pub use ops::{activate, affine, dropout, dropout_mask, dropout_var, relu, softmax_rows, DropoutCtx};
pub use params::{xavier_uniform, Grads, Param, ParamKind, ParamStore};
pub use tape::{sigmoid, Activation, Adjoints, SparseRows, Tape, Var};

#[allow(unused_imports)]
pub(crate) use tape::clip_prob;
