use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter in `store`.
///
/// Weight decay is not applied here; the L2 term is part of the task loss
/// and therefore already present in `grads`.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, grads: &Grads<T>, cfg: &AdamConfig) -> Result<()> {
    for (name, p) in store.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Consistency(format!("missing gradient for `{name}`")))?;
        if g.shape() != p.value.shape() {
            return Err(Error::shape("adam_step", p.value.shape(), g.shape()));
        }
    }

    let (lr, b1, b2, eps) = (T::lit(cfg.lr), T::lit(cfg.beta1), T::lit(cfg.beta2), T::lit(cfg.eps));
    for (name, p) in store.iter_mut() {
        let g = &grads[name];
        p.step += 1;
        let t = i32::try_from(p.step).unwrap_or(i32::MAX);
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let (value, m, v) = (p.value.data_mut(), p.m.data_mut(), p.v.data_mut());
        for (((w, mi), vi), &gi) in value.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Matrix, ParamKind};

    fn store(values: &[(&str, f64)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (n, v) in values {
            s.insert(*n, Matrix::scalar(*v), ParamKind::Weight).unwrap();
        }
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(&[("p", 0.0)]);
        let mut g = s.zero_grads();
        g.insert("p".into(), Matrix::scalar(1.0));
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        adam_step(&mut s, &g, &cfg).unwrap();
        // m̂ = 1, v̂ = 1, so Δ = -0.1 / (1 + 1e-8).
        let p = s.value("p").unwrap().item();
        assert!((p + 0.1 / (1.0 + 1e-8)).abs() < 1e-15, "{p}");
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut s = store(&[("a", 0.3), ("b", -2.0)]);
        let g = s.zero_grads();
        for _ in 0..5 {
            adam_step(&mut s, &g, &AdamConfig::default()).unwrap();
        }
        assert_eq!(s.value("a").unwrap().item(), 0.3);
        assert_eq!(s.value("b").unwrap().item(), -2.0);
        let p = s.param("a").unwrap();
        assert_eq!(p.step, 5);
        assert_eq!(p.m.item(), 0.0);
        assert_eq!(p.v.item(), 0.0);
    }

    #[test]
    fn identical_params_identical_updates() {
        let mut s = store(&[("a", 1.0), ("b", 1.0)]);
        let mut g = s.zero_grads();
        g.insert("a".into(), Matrix::scalar(0.7));
        g.insert("b".into(), Matrix::scalar(0.7));
        for _ in 0..3 {
            adam_step(&mut s, &g, &AdamConfig::default()).unwrap();
        }
        assert_eq!(s.value("a").unwrap(), s.value("b").unwrap());
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut s = store(&[("a", 1.0), ("b", 1.0)]);
        let mut g = s.zero_grads();
        g.remove("b");
        let err = adam_step(&mut s, &g, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Consistency(_)));
        // nothing was updated
        assert_eq!(s.param("a").unwrap().step, 0);
    }
}
