use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Role of a parameter; only `Weight` entries enter the L2 penalty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Scalar gates such as the residual mix of the graph layers.
    Gate,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param<T> {
    pub value: Matrix<T>,
    pub kind: ParamKind,
    /// Adam first moment.
    pub m: Matrix<T>,
    /// Adam second moment.
    pub v: Matrix<T>,
    pub step: u64,
}

/// Named trainable parameters with their optimizer state.
///
/// Keys are dotted paths such as `graph.layer0.rel1.head0.wq`. Iteration
/// order is the lexicographic key order, which keeps every traversal
/// deterministic.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

/// Gradients keyed like the owning [`ParamStore`].
pub type Grads<T> = BTreeMap<String, Matrix<T>>;

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix<T>, kind: ParamKind) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Consistency(format!("duplicate parameter `{name}`")));
        }
        let (r, c) = value.shape();
        self.params.insert(
            name,
            Param {
                value,
                kind,
                m: Matrix::zeros(r, c),
                v: Matrix::zeros(r, c),
                step: 0,
            },
        );
        Ok(())
    }

    /// Xavier-uniform weight matrix of shape `fan_in x fan_out`.
    pub fn insert_xavier<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<()> {
        self.insert(name, xavier_uniform(fan_in, fan_out, rng), ParamKind::Weight)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize, kind: ParamKind) -> Result<()> {
        self.insert(name, Matrix::zeros(rows, cols), kind)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<T>> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn value(&self, name: &str) -> Result<&Matrix<T>> {
        self.get(name)
            .ok_or_else(|| Error::Consistency(format!("unknown parameter `{name}`")))
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Matrix<T>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Consistency(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Zero gradient for every parameter.
    pub fn zero_grads(&self) -> Grads<T> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), Matrix::zeros(p.value.rows(), p.value.cols())))
            .collect()
    }

    /// Names of the parameters that carry the L2 penalty.
    pub fn weight_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Weight)
            .map(|(k, _)| k.clone())
            .collect()
    }
}

pub fn xavier_uniform<T: Scalar, R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Matrix<T> {
    let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::lit(rng.gen_range(-bound..=bound)))
        .collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("xavier shape")
}
