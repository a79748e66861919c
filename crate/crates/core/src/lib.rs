//! Social-bot detection on heterogeneous user graphs with metadata, text and
//! relation modes fused through invariant and specific subspaces.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for callers that do not care.

pub mod attention;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod graph;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod scalar;
pub mod subspace;
pub mod synthgen;

pub use config::{EdgeDirection, GraphLayerKind, TrainConfig, Variant};
pub use data::{HeteroGraph, Label, Split, UserRecord};
pub use error::{Error, Result};
pub use scalar::{Scalar, Strided};
pub use synthgen::{generate, RelationSpec, SynthConfig};

pub type Matrix64 = numerics::Matrix<f64>;
pub type Matrix32 = numerics::Matrix<f32>;
pub type Tape64 = numerics::Tape<f64>;
pub type Tape32 = numerics::Tape<f32>;
pub type ParamStore64 = numerics::ParamStore<f64>;
pub type ParamStore32 = numerics::ParamStore<f32>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
pub type Prepared64 = pipeline::Prepared<f64>;
pub type TrainOutcome64 = pipeline::TrainOutcome<f64>;
