//! Minority-class synthesis by interpolating between same-class neighbors in
//! embedding space.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::numerics::{Matrix, SparseRows};
use crate::scalar::Scalar;

/// A synthetic node at `(1 - delta)·x[seed] + delta·x[partner]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticNode {
    pub seed: usize,
    pub partner: usize,
    pub delta: f64,
    pub label: Label,
}

impl SyntheticNode {
    pub fn interpolate<T: Scalar>(&self, x: &Matrix<T>) -> Vec<T> {
        interpolate(x.row(self.seed), x.row(self.partner), self.delta)
    }
}

pub fn interpolate<T: Scalar>(x_seed: &[T], x_partner: &[T], delta: f64) -> Vec<T> {
    let d = T::lit(delta);
    x_seed
        .iter()
        .zip(x_partner)
        .map(|(&a, &b)| (T::one() - d) * a + d * b)
        .collect()
}

/// The train label with fewer members; bots win ties.
pub fn minority_class(train_labels: &[Label]) -> Option<Label> {
    if train_labels.is_empty() {
        return None;
    }
    let bots = train_labels.iter().filter(|&&l| l == Label::Bot).count();
    let humans = train_labels.len() - bots;
    Some(if bots <= humans { Label::Bot } else { Label::Human })
}

/// `⌊ω·m⌋`. The tiny slack keeps `ω = (a - m) / m` from flooring to `a - m - 1`.
pub fn synthetic_count(scale: f64, minority: usize) -> usize {
    (scale * minority as f64 + 1e-9).floor() as usize
}

/// Draws `⌊ω·|minority|⌋` synthetic nodes.
///
/// `train` holds `(node, label)` for the labeled training nodes and
/// `embeddings` one row per node. Each synthetic node picks a random minority
/// seed, one of its `k` nearest same-class training nodes (Euclidean) as
/// partner, and `δ ~ U[0, 1]`. Fewer than two minority nodes disables
/// oversampling.
pub fn oversample<T: Scalar, R: Rng + ?Sized>(
    embeddings: &Matrix<T>,
    train: &[(usize, Label)],
    scale: f64,
    k: usize,
    rng: &mut R,
) -> Vec<SyntheticNode> {
    let labels: Vec<Label> = train.iter().map(|t| t.1).collect();
    let Some(minority) = minority_class(&labels) else {
        return Vec::new();
    };
    let members: Vec<usize> = train.iter().filter(|t| t.1 == minority).map(|t| t.0).collect();
    let count = synthetic_count(scale, members.len());
    if count == 0 {
        return Vec::new();
    }
    if members.len() < 2 || k == 0 {
        log::warn!(
            "oversampling disabled: minority class {minority:?} has {} training member(s)",
            members.len()
        );
        return Vec::new();
    }

    let neighbors: Vec<Vec<usize>> = members
        .iter()
        .map(|&v| nearest_same_class(embeddings, v, &members, k))
        .collect();

    (0..count)
        .map(|_| {
            let which = rng.gen_range(0..members.len());
            let partners = &neighbors[which];
            let partner = partners[rng.gen_range(0..partners.len())];
            SyntheticNode {
                seed: members[which],
                partner,
                delta: rng.gen::<f64>(),
                label: minority,
            }
        })
        .collect()
}

fn nearest_same_class<T: Scalar>(x: &Matrix<T>, v: usize, members: &[usize], k: usize) -> Vec<usize> {
    let mut dists: Vec<(f64, usize)> = members
        .iter()
        .filter(|&&u| u != v)
        .map(|&u| {
            let d: f64 = x
                .row(v)
                .iter()
                .zip(x.row(u))
                .map(|(&a, &b)| (a - b).as_f64().powi(2))
                .sum();
            (d, u)
        })
        .collect();
    dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    dists.into_iter().take(k).map(|(_, u)| u).collect()
}

/// Operator producing synthetic rows from real rows: row `k` mixes
/// `seed` and `partner` with weights `1 - δ` and `δ`.
pub fn mixing_operator<T: Scalar>(synthetic: &[SyntheticNode], n_real: usize) -> Arc<SparseRows<T>> {
    Arc::new(SparseRows {
        n_cols: n_real,
        rows: synthetic
            .iter()
            .map(|s| vec![(s.seed, T::one() - T::lit(s.delta)), (s.partner, T::lit(s.delta))])
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn fixture(minority: usize, majority: usize) -> (Matrix<f64>, Vec<(usize, Label)>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = minority + majority;
        let x = Matrix::from_vec(n, 3, (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let train = (0..n).map(|i| (i, Label::from_bit(i < minority))).collect();
        (x, train)
    }

    #[test]
    fn zero_scale_gives_nothing() {
        let (x, train) = fixture(10, 30);
        assert!(oversample(&x, &train, 0.0, 5, &mut ChaCha8Rng::seed_from_u64(0)).is_empty());
    }

    #[test]
    fn count_follows_floor_rule() {
        let (x, train) = fixture(40, 100);
        let s = oversample(&x, &train, 0.25, 5, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(s.len(), 10);
        assert!(s.iter().all(|n| n.label == Label::Bot && n.seed < 40 && n.partner < 40 && n.seed != n.partner));
        assert_eq!(synthetic_count(0.3, 7), 2);
        assert_eq!(synthetic_count(60.0 / 40.0, 40), 60);
    }

    #[test]
    fn interpolation_endpoints() {
        let a = [1.0, -2.0];
        let b = [3.0, 5.0];
        assert_eq!(interpolate(&a, &b, 0.0), a.to_vec());
        assert_eq!(interpolate(&a, &b, 1.0), b.to_vec());
    }

    #[test]
    fn partner_is_among_nearest() {
        let (x, train) = fixture(12, 20);
        let s = oversample(&x, &train, 2.0, 3, &mut ChaCha8Rng::seed_from_u64(5));
        let members: Vec<usize> = (0..12).collect();
        for n in &s {
            assert!(nearest_same_class(&x, n.seed, &members, 3).contains(&n.partner));
        }
    }

    #[test]
    fn tiny_minority_disables() {
        let (x, train) = fixture(1, 20);
        assert!(oversample(&x, &train, 1.0, 5, &mut ChaCha8Rng::seed_from_u64(0)).is_empty());
    }
}
