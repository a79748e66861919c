//! Users, typed relations, splits and metadata normalization.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Followers, following, statuses, active days, screen-name length.
pub const NUMERIC_META: usize = 5;
/// Protected, verified, default profile image.
pub const CATEGORICAL_META: usize = 3;
pub const META_DIM: usize = NUMERIC_META + CATEGORICAL_META;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Human,
    Bot,
}

impl Label {
    pub fn as_target(self) -> f64 {
        match self {
            Label::Human => 0.0,
            Label::Bot => 1.0,
        }
    }

    pub fn from_bit(bot: bool) -> Self {
        if bot {
            Label::Bot
        } else {
            Label::Human
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    #[default]
    None,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserRecord {
    pub id: String,
    pub numeric_meta: [f64; NUMERIC_META],
    pub categorical_meta: [f64; CATEGORICAL_META],
    pub description_embedding: Vec<f64>,
    pub tweet_embeddings: Vec<Vec<f64>>,
    pub label: Option<Label>,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Edge {
    pub relation: usize,
    pub src: usize,
    pub dst: usize,
}

/// Users connected by directed, relation-typed edges.
#[derive(Clone, Debug, PartialEq)]
pub struct HeteroGraph {
    users: Vec<UserRecord>,
    relations: Vec<String>,
    edges: Vec<Edge>,
    text_dim: usize,
}

// --- on-disk schema -------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    relations: Vec<String>,
    users: Vec<UserJson>,
    edges: Vec<EdgeJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    splits: Option<SplitsJson>,
}

#[derive(Serialize, Deserialize)]
struct UserJson {
    id: String,
    numeric_meta: Vec<f64>,
    categorical_meta: Vec<f64>,
    description_embedding: Vec<f64>,
    tweet_embeddings: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<Label>,
}

#[derive(Serialize, Deserialize)]
struct EdgeJson {
    relation: String,
    src: String,
    dst: String,
}

#[derive(Default, Serialize, Deserialize)]
struct SplitsJson {
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

impl HeteroGraph {
    /// Validates and assembles a graph.
    pub fn new(users: Vec<UserRecord>, relations: Vec<String>, edges: Vec<Edge>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &relations {
            if !seen.insert(r.as_str()) {
                return Err(Error::load(r.clone(), "duplicate relation name"));
            }
        }
        let mut ids = HashSet::new();
        let mut text_dim = None;
        for u in &users {
            if !ids.insert(u.id.as_str()) {
                return Err(Error::load(u.id.clone(), "duplicate user id"));
            }
            if u.numeric_meta.iter().any(|x| !x.is_finite()) {
                return Err(Error::load(u.id.clone(), "non-finite numeric_meta"));
            }
            if u.categorical_meta.iter().any(|&x| x != 0.0 && x != 1.0) {
                return Err(Error::load(u.id.clone(), "categorical_meta entries must be 0 or 1"));
            }
            let d = *text_dim.get_or_insert(u.description_embedding.len());
            let ragged = u.description_embedding.len() != d || u.tweet_embeddings.iter().any(|t| t.len() != d);
            if ragged {
                return Err(Error::load(u.id.clone(), format!("embedding dimension differs from {d}")));
            }
            let non_finite = u.description_embedding.iter().chain(u.tweet_embeddings.iter().flatten());
            if non_finite.into_iter().any(|x| !x.is_finite()) {
                return Err(Error::load(u.id.clone(), "non-finite embedding value"));
            }
            if u.split != Split::None && u.label.is_none() {
                return Err(Error::load(u.id.clone(), "unlabeled user assigned to a split"));
            }
        }
        for e in &edges {
            if e.relation >= relations.len() {
                return Err(Error::load(format!("edge {}->{}", e.src, e.dst), "unknown relation index"));
            }
            if e.src >= users.len() || e.dst >= users.len() {
                return Err(Error::load(format!("edge {}->{}", e.src, e.dst), "dangling endpoint"));
            }
        }
        Ok(HeteroGraph {
            text_dim: text_dim.unwrap_or(0),
            users,
            relations,
            edges,
        })
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: DatasetFile = serde_json::from_str(s)?;
        Self::from_file(file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    fn from_file(file: DatasetFile) -> Result<Self> {
        let rel_index: HashMap<&str, usize> = file
            .relations
            .iter()
            .enumerate()
            .map(|(i, r)| (r.as_str(), i))
            .collect();
        let mut users = Vec::with_capacity(file.users.len());
        for u in file.users {
            let numeric_meta: [f64; NUMERIC_META] = u
                .numeric_meta
                .try_into()
                .map_err(|v: Vec<f64>| Error::load(u.id.clone(), format!("numeric_meta has {} entries, expected {NUMERIC_META}", v.len())))?;
            let categorical_meta: [f64; CATEGORICAL_META] = u.categorical_meta.try_into().map_err(|v: Vec<f64>| {
                Error::load(u.id.clone(), format!("categorical_meta has {} entries, expected {CATEGORICAL_META}", v.len()))
            })?;
            users.push(UserRecord {
                id: u.id,
                numeric_meta,
                categorical_meta,
                description_embedding: u.description_embedding,
                tweet_embeddings: u.tweet_embeddings,
                label: u.label,
                split: Split::None,
            });
        }
        let user_index: HashMap<String, usize> = users.iter().enumerate().map(|(i, u)| (u.id.clone(), i)).collect();
        let lookup = |id: &str| user_index.get(id).copied().ok_or_else(|| Error::load(id, "unknown user id"));

        let mut edges = Vec::with_capacity(file.edges.len());
        for e in &file.edges {
            let relation = *rel_index
                .get(e.relation.as_str())
                .ok_or_else(|| Error::load(format!("{}->{}", e.src, e.dst), format!("unknown relation `{}`", e.relation)))?;
            edges.push(Edge {
                relation,
                src: lookup(&e.src)?,
                dst: lookup(&e.dst)?,
            });
        }
        if let Some(splits) = file.splits {
            for (ids, split) in [(&splits.train, Split::Train), (&splits.val, Split::Val), (&splits.test, Split::Test)] {
                for id in ids {
                    let i = lookup(id)?;
                    if users[i].split != Split::None {
                        return Err(Error::load(id.clone(), "user listed in more than one split"));
                    }
                    users[i].split = split;
                }
            }
        }
        Self::new(users, file.relations, edges)
    }

    fn to_file(&self) -> DatasetFile {
        let mut splits = SplitsJson::default();
        for u in &self.users {
            match u.split {
                Split::Train => splits.train.push(u.id.clone()),
                Split::Val => splits.val.push(u.id.clone()),
                Split::Test => splits.test.push(u.id.clone()),
                Split::None => {}
            }
        }
        let any_split = !(splits.train.is_empty() && splits.val.is_empty() && splits.test.is_empty());
        DatasetFile {
            relations: self.relations.clone(),
            users: self
                .users
                .iter()
                .map(|u| UserJson {
                    id: u.id.clone(),
                    numeric_meta: u.numeric_meta.to_vec(),
                    categorical_meta: u.categorical_meta.to_vec(),
                    description_embedding: u.description_embedding.clone(),
                    tweet_embeddings: u.tweet_embeddings.clone(),
                    label: u.label,
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeJson {
                    relation: self.relations[e.relation].clone(),
                    src: self.users[e.src].id.clone(),
                    dst: self.users[e.dst].id.clone(),
                })
                .collect(),
            splits: any_split.then_some(splits),
        }
    }

    /// Canonical JSON: fixed key order, users and edges in graph order.
    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_file())?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn users(&self) -> &[UserRecord] {
        &self.users
    }

    pub fn user(&self, i: usize) -> &UserRecord {
        &self.users[i]
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn text_dim(&self) -> usize {
        self.text_dim
    }

    pub fn relation_index(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r == name)
    }

    pub fn labeled(&self) -> Vec<usize> {
        (0..self.users.len()).filter(|&i| self.users[i].label.is_some()).collect()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.users.len()).filter(|&i| self.users[i].split == split).collect()
    }

    pub fn has_splits(&self) -> bool {
        self.users.iter().any(|u| u.split != Split::None)
    }

    /// Keeps only the named relations (in the given order) and their edges.
    pub fn with_relations(&self, names: &[String]) -> Result<Self> {
        let mut map = vec![None; self.relations.len()];
        for (new, name) in names.iter().enumerate() {
            let old = self
                .relation_index(name)
                .ok_or_else(|| Error::Config(format!("relation `{name}` not in dataset {:?}", self.relations)))?;
            if map[old].is_some() {
                return Err(Error::Config(format!("relation `{name}` listed twice")));
            }
            map[old] = Some(new);
        }
        let edges = self
            .edges
            .iter()
            .filter_map(|e| map[e.relation].map(|relation| Edge { relation, ..*e }))
            .collect();
        Ok(HeteroGraph {
            users: self.users.clone(),
            relations: names.to_vec(),
            edges,
            text_dim: self.text_dim,
        })
    }

    pub fn set_split(&mut self, i: usize, split: Split) -> Result<()> {
        if split != Split::None && self.users[i].label.is_none() {
            return Err(Error::Split(format!("user `{}` is unlabeled", self.users[i].id)));
        }
        self.users[i].split = split;
        Ok(())
    }
}

/// Proportions of the labeled users that go to train, test and validation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub test: f64,
    pub val: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn seven_two_one(seed: u64) -> Self {
        SplitSpec {
            train: 0.7,
            test: 0.2,
            val: 0.1,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.train > 0.0 && self.test > 0.0 && self.val > 0.0;
        if !ok || (self.train + self.test + self.val - 1.0).abs() > 1e-9 {
            return Err(Error::Split(format!(
                "ratios must be positive and sum to 1, got {}:{}:{}",
                self.train, self.test, self.val
            )));
        }
        Ok(())
    }

    /// `(train, test, val)` sizes for `n` labeled users.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let train = (self.train * n as f64).round() as usize;
        let test = ((self.test * n as f64).round() as usize).min(n - train);
        (train, test, n - train - test)
    }
}

pub const MIN_LABELED_FOR_SPLIT: usize = 10;

/// Seeded shuffle of the labeled users into train/test/val; unlabeled users
/// get [`Split::None`].
pub fn assign_splits(g: &HeteroGraph, spec: &SplitSpec) -> Result<HeteroGraph> {
    spec.validate()?;
    let mut labeled = g.labeled();
    if labeled.len() < MIN_LABELED_FOR_SPLIT {
        return Err(Error::Split(format!(
            "need at least {MIN_LABELED_FOR_SPLIT} labeled users, found {}",
            labeled.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    labeled.shuffle(&mut rng);
    let (n_train, n_test, _) = spec.sizes(labeled.len());

    let mut out = g.clone();
    for u in &mut out.users {
        u.split = Split::None;
    }
    for (pos, &i) in labeled.iter().enumerate() {
        out.users[i].split = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_test {
            Split::Test
        } else {
            Split::Val
        };
    }
    Ok(out)
}

/// Per-feature statistics of the numeric metadata on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZScoreStats {
    pub mean: [f64; NUMERIC_META],
    pub std: [f64; NUMERIC_META],
}

pub const CONSTANT_FEATURE_STD: f64 = 1e-12;

impl ZScoreStats {
    pub fn is_constant(&self, feature: usize) -> bool {
        self.std[feature] < CONSTANT_FEATURE_STD
    }
}

/// Fits population mean and standard deviation over the users of `split`.
pub fn zscore_fit(g: &HeteroGraph, split: Split) -> Result<ZScoreStats> {
    let rows: Vec<[f64; NUMERIC_META]> = g.split_indices(split).into_iter().map(|i| g.user(i).numeric_meta).collect();
    zscore_fit_rows(&rows)
}

pub fn zscore_fit_rows(rows: &[[f64; NUMERIC_META]]) -> Result<ZScoreStats> {
    if rows.is_empty() {
        return Err(Error::Empty("z-score fit on an empty split".into()));
    }
    let n = rows.len() as f64;
    let mut mean = [0.0; NUMERIC_META];
    let mut std = [0.0; NUMERIC_META];
    for f in 0..NUMERIC_META {
        mean[f] = rows.iter().map(|r| r[f]).sum::<f64>() / n;
        std[f] = (rows.iter().map(|r| (r[f] - mean[f]).powi(2)).sum::<f64>() / n).sqrt();
    }
    Ok(ZScoreStats { mean, std })
}

/// `(x - mean) / std` per feature; constant features map to 0.
pub fn zscore_apply(stats: &ZScoreStats, x: &[f64; NUMERIC_META]) -> [f64; NUMERIC_META] {
    let mut out = [0.0; NUMERIC_META];
    for f in 0..NUMERIC_META {
        out[f] = if stats.is_constant(f) {
            0.0
        } else {
            (x[f] - stats.mean[f]) / stats.std[f]
        };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "relations": ["follower"],
        "users": [
            {"id": "a", "numeric_meta": [1,2,3,4,5], "categorical_meta": [0,1,0],
             "description_embedding": [0.1, 0.2], "tweet_embeddings": [[1.0, 2.0]], "label": "bot"},
            {"id": "b", "numeric_meta": [0,0,0,0,0], "categorical_meta": [1,1,1],
             "description_embedding": [0.0, 0.0], "tweet_embeddings": []}
        ],
        "edges": [{"relation": "follower", "src": "a", "dst": "b"}]
    }"#;

    fn user(id: &str, meta0: f64, label: Option<Label>) -> UserRecord {
        UserRecord {
            id: id.into(),
            numeric_meta: [meta0, 0.0, 0.0, 0.0, 0.0],
            categorical_meta: [0.0; 3],
            description_embedding: vec![0.0; 2],
            tweet_embeddings: vec![],
            label,
            split: Split::None,
        }
    }

    fn labeled_graph(n: usize) -> HeteroGraph {
        let users = (0..n)
            .map(|i| user(&format!("u{i}"), i as f64, Some(Label::from_bit(i % 3 == 0))))
            .collect();
        HeteroGraph::new(users, vec!["follower".into()], vec![]).unwrap()
    }

    #[test]
    fn loads_minimal_file() {
        let g = HeteroGraph::from_json_str(MINIMAL).unwrap();
        assert_eq!(g.num_users(), 2);
        assert_eq!(g.edges().len(), 1);
        assert_eq!(g.text_dim(), 2);
        assert_eq!(g.user(0).label, Some(Label::Bot));
        assert_eq!(g.user(1).label, None);
    }

    #[test]
    fn dangling_endpoint_names_the_id() {
        let bad = MINIMAL.replace(r#""dst": "b""#, r#""dst": "u99""#);
        let err = HeteroGraph::from_json_str(&bad).unwrap_err().to_string();
        assert!(err.contains("u99"), "{err}");
    }

    #[test]
    fn unknown_relation_and_ragged_embeddings_rejected() {
        let bad = MINIMAL.replace(r#""relation": "follower""#, r#""relation": "reply""#);
        assert!(HeteroGraph::from_json_str(&bad).unwrap_err().to_string().contains("reply"));
        let ragged = MINIMAL.replace("[[1.0, 2.0]]", "[[1.0, 2.0, 3.0]]");
        let err = HeteroGraph::from_json_str(&ragged).unwrap_err().to_string();
        assert!(err.contains("`a`"), "{err}");
        let cat = MINIMAL.replace("[0,1,0]", "[0,2,0]");
        assert!(HeteroGraph::from_json_str(&cat).is_err());
    }

    #[test]
    fn canonical_round_trip() {
        let g = HeteroGraph::from_json_str(MINIMAL).unwrap();
        let s = g.to_json_string().unwrap();
        let again = HeteroGraph::from_json_str(&s).unwrap();
        assert_eq!(again, g);
        assert_eq!(again.to_json_string().unwrap(), s);
    }

    #[test]
    fn pinned_splits_survive_round_trip() {
        let g = assign_splits(&labeled_graph(12), &SplitSpec::seven_two_one(4)).unwrap();
        let again = HeteroGraph::from_json_str(&g.to_json_string().unwrap()).unwrap();
        assert_eq!(again, g);
    }

    #[test]
    fn ten_labeled_users_split_seven_two_one() {
        let g = assign_splits(&labeled_graph(10), &SplitSpec::seven_two_one(1)).unwrap();
        assert_eq!(g.split_indices(Split::Train).len(), 7);
        assert_eq!(g.split_indices(Split::Test).len(), 2);
        assert_eq!(g.split_indices(Split::Val).len(), 1);
    }

    #[test]
    fn splits_are_seeded() {
        let base = labeled_graph(100);
        let a = assign_splits(&base, &SplitSpec::seven_two_one(1)).unwrap();
        let a2 = assign_splits(&base, &SplitSpec::seven_two_one(1)).unwrap();
        let b = assign_splits(&base, &SplitSpec::seven_two_one(2)).unwrap();
        assert_eq!(a, a2);
        assert_ne!(a.split_indices(Split::Train), b.split_indices(Split::Train));
        for g in [&a, &b] {
            let sizes = [Split::Train, Split::Test, Split::Val].map(|s| g.split_indices(s).len());
            assert_eq!(sizes, [70, 20, 10]);
        }
    }

    #[test]
    fn unlabeled_users_stay_unsplit() {
        let mut users: Vec<UserRecord> = (0..12).map(|i| user(&format!("u{i}"), 0.0, Some(Label::Human))).collect();
        users.push(user("free", 0.0, None));
        let g = HeteroGraph::new(users, vec![], vec![]).unwrap();
        let g = assign_splits(&g, &SplitSpec::seven_two_one(0)).unwrap();
        assert_eq!(g.user(12).split, Split::None);
        assert!(assign_splits(&labeled_graph(9), &SplitSpec::seven_two_one(0)).is_err());
    }

    #[test]
    fn zscore_examples() {
        let rows = [[1.0, 5.0, 0.0, 0.0, 0.0], [2.0, 5.0, 0.0, 0.0, 0.0], [3.0, 5.0, 0.0, 0.0, 0.0]];
        let stats = zscore_fit_rows(&rows).unwrap();
        let z: Vec<[f64; 5]> = rows.iter().map(|r| zscore_apply(&stats, r)).collect();
        // population std of {1,2,3} is sqrt(2/3)
        let expected = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((z[0][0] + expected).abs() < 1e-12);
        assert_eq!(z[1][0], 0.0);
        assert!((z[2][0] - 1.2247).abs() < 1e-4);
        assert!(z.iter().all(|r| r[1] == 0.0));
        assert!(stats.is_constant(1));
        let at_mean = zscore_apply(&stats, &[2.0, 5.0, 0.0, 0.0, 0.0]);
        assert_eq!(at_mean[0], 0.0);
        assert!(zscore_fit_rows(&[]).is_err());
    }

    #[test]
    fn zscore_uses_train_split_only() {
        let mut g = labeled_graph(12);
        for i in 0..12 {
            g.set_split(i, if i < 6 { Split::Train } else { Split::Test }).unwrap();
        }
        let stats = zscore_fit(&g, Split::Train).unwrap();
        assert_eq!(stats.mean[0], 2.5);
    }
}
