use std::collections::BTreeSet;
use std::sync::Arc;

use crate::attention::PairIndex;
use crate::config::EdgeDirection;
use crate::data::HeteroGraph;
use crate::numerics::SparseRows;
use crate::scalar::Scalar;

use super::oversample::SyntheticNode;

/// Per-relation `(source, center)` message lists, deduplicated and sorted.
pub fn oriented_messages(g: &HeteroGraph, direction: EdgeDirection) -> Vec<Vec<(usize, usize)>> {
    let mut per_rel: Vec<BTreeSet<(usize, usize)>> = vec![BTreeSet::new(); g.relations().len()];
    for e in g.edges() {
        let set = &mut per_rel[e.relation];
        if matches!(direction, EdgeDirection::In | EdgeDirection::Both) {
            set.insert((e.src, e.dst));
        }
        if matches!(direction, EdgeDirection::Out | EdgeDirection::Both) {
            set.insert((e.dst, e.src));
        }
    }
    // keyed by center first so that each center's neighbors are contiguous
    per_rel
        .into_iter()
        .map(|s| {
            let mut v: Vec<(usize, usize)> = s.into_iter().collect();
            v.sort_by_key(|&(src, center)| (center, src));
            v
        })
        .collect()
}

/// Relation-union neighbors within two hops, excluding the node itself.
pub fn two_hop_neighbors(g: &HeteroGraph, direction: EdgeDirection) -> Vec<Vec<usize>> {
    let n = g.num_users();
    let mut one_hop: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for rel in oriented_messages(g, direction) {
        for (src, center) in rel {
            one_hop[center].insert(src);
        }
    }
    (0..n)
        .map(|v| {
            let mut reach: BTreeSet<usize> = one_hop[v].clone();
            for &u in &one_hop[v] {
                reach.extend(one_hop[u].iter().copied());
            }
            reach.remove(&v);
            reach.into_iter().collect()
        })
        .collect()
}

/// Row-stochastic operator averaging over each row's listed neighbors;
/// rows without neighbors are empty (aggregate to zero).
pub fn mean_operator<T: Scalar>(neighbors: &[Vec<usize>], n_cols: usize) -> SparseRows<T> {
    SparseRows {
        n_cols,
        rows: neighbors
            .iter()
            .map(|ns| {
                let w = T::one() / T::from_count(ns.len().max(1));
                ns.iter().map(|&j| (j, w)).collect()
            })
            .collect(),
    }
}

/// Edge lists and fixed aggregation operators over real plus synthetic nodes.
#[derive(Clone, Debug)]
pub struct GraphStructure<T> {
    pub n_real: usize,
    pub n_nodes: usize,
    pub relation_names: Vec<String>,
    /// Per relation: query = center, key = source.
    pub relations: Vec<PairIndex>,
    /// Relation-union neighborhood without duplicate pairs.
    pub union: PairIndex,
    pub relation_means: Vec<Arc<SparseRows<T>>>,
    pub union_mean: Arc<SparseRows<T>>,
    /// Two-hop mean over real nodes (`n_real x n_real`).
    pub two_hop: Arc<SparseRows<T>>,
}

impl<T: Scalar> GraphStructure<T> {
    /// Structure over real nodes only.
    pub fn new(g: &HeteroGraph, direction: EdgeDirection) -> Self {
        Self::with_synthetic(g, direction, &[])
    }

    /// Appends synthetic nodes after the real ones. Each receives messages
    /// from its seed's neighbors under every relation but never sends any.
    pub fn with_synthetic(g: &HeteroGraph, direction: EdgeDirection, synthetic: &[SyntheticNode]) -> Self {
        let n_real = g.num_users();
        let n_nodes = n_real + synthetic.len();
        let mut per_rel = oriented_messages(g, direction);
        for rel in &mut per_rel {
            let mut by_center: Vec<Vec<usize>> = vec![Vec::new(); n_real];
            for &(src, center) in rel.iter() {
                by_center[center].push(src);
            }
            for (k, s) in synthetic.iter().enumerate() {
                for &src in &by_center[s.seed] {
                    rel.push((src, n_real + k));
                }
            }
        }

        let mut union_set = BTreeSet::new();
        for rel in &per_rel {
            union_set.extend(rel.iter().map(|&(src, center)| (center, src)));
        }
        let union: Vec<(usize, usize)> = union_set.into_iter().map(|(c, s)| (s, c)).collect();

        let neighbors_of = |pairs: &[(usize, usize)]| {
            let mut ns = vec![Vec::new(); n_nodes];
            for &(src, center) in pairs {
                ns[center].push(src);
            }
            ns
        };
        let to_index = |pairs: &[(usize, usize)]| {
            PairIndex::new(pairs.iter().map(|p| p.1).collect(), pairs.iter().map(|p| p.0).collect())
        };

        GraphStructure {
            n_real,
            n_nodes,
            relation_names: g.relations().to_vec(),
            relation_means: per_rel
                .iter()
                .map(|p| Arc::new(mean_operator(&neighbors_of(p), n_nodes)))
                .collect(),
            union_mean: Arc::new(mean_operator(&neighbors_of(&union), n_nodes)),
            relations: per_rel.iter().map(|p| to_index(p)).collect(),
            union: to_index(&union),
            two_hop: Arc::new(mean_operator(&two_hop_neighbors(g, direction), n_real)),
        }
    }

    pub fn n_synthetic(&self) -> usize {
        self.n_nodes - self.n_real
    }

    /// Sources delivering to `center` under relation `r`.
    pub fn in_neighbors(&self, r: usize, center: usize) -> Vec<usize> {
        let idx = &self.relations[r];
        idx.query
            .iter()
            .zip(idx.key.iter())
            .filter(|(&c, _)| c == center)
            .map(|(_, &s)| s)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Edge, HeteroGraph, Split, UserRecord};

    fn graph(n: usize, relations: &[&str], edges: &[(usize, usize, usize)]) -> HeteroGraph {
        let users = (0..n)
            .map(|i| UserRecord {
                id: format!("u{i}"),
                numeric_meta: [0.0; 5],
                categorical_meta: [0.0; 3],
                description_embedding: vec![0.0],
                tweet_embeddings: vec![],
                label: None,
                split: Split::None,
            })
            .collect();
        let edges = edges.iter().map(|&(relation, src, dst)| Edge { relation, src, dst }).collect();
        HeteroGraph::new(users, relations.iter().map(|s| s.to_string()).collect(), edges).unwrap()
    }

    #[test]
    fn two_hop_sets() {
        // path a - b - c with edges in both directions
        let g = graph(4, &["r"], &[(0, 0, 1), (0, 1, 0), (0, 1, 2), (0, 2, 1)]);
        let n = two_hop_neighbors(&g, EdgeDirection::In);
        assert_eq!(n[0], vec![1, 2]);
        assert_eq!(n[1], vec![0, 2]);
        assert_eq!(n[3], Vec::<usize>::new());
        // directed: 0 -> 1 -> 2, center 2 hears 1 directly and 0 via 1
        let g = graph(3, &["r"], &[(0, 0, 1), (0, 1, 2)]);
        assert_eq!(two_hop_neighbors(&g, EdgeDirection::In)[2], vec![0, 1]);
        assert_eq!(two_hop_neighbors(&g, EdgeDirection::Out)[0], vec![1, 2]);
        assert!(two_hop_neighbors(&g, EdgeDirection::In)[0].is_empty());
    }

    #[test]
    fn two_hop_unions_relations() {
        let g = graph(3, &["a", "b"], &[(0, 1, 0), (1, 2, 1)]);
        assert_eq!(two_hop_neighbors(&g, EdgeDirection::In)[0], vec![1, 2]);
    }

    #[test]
    fn synthetic_nodes_inherit_incoming_messages_only() {
        let g = graph(3, &["a", "b"], &[(0, 1, 0), (1, 2, 0), (0, 0, 2)]);
        let synth = [SyntheticNode {
            seed: 0,
            partner: 2,
            delta: 0.5,
            label: crate::data::Label::Bot,
        }];
        let s: GraphStructure<f64> = GraphStructure::with_synthetic(&g, EdgeDirection::In, &synth);
        assert_eq!(s.n_nodes, 4);
        assert_eq!(s.in_neighbors(0, 3), vec![1]);
        assert_eq!(s.in_neighbors(1, 3), vec![2]);
        // no real node hears from the synthetic one
        assert!(s.relations.iter().all(|r| !r.key.contains(&3)));
        assert!(!s.union.key.contains(&3));
    }
}
