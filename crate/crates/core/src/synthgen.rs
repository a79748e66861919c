//! Seeded synthetic social graphs with planted class signal in metadata,
//! text and per-relation edge homophily.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::{Edge, HeteroGraph, Label, Split, UserRecord, CATEGORICAL_META, NUMERIC_META};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationSpec {
    pub name: String,
    /// Probability that an edge follows the class pattern; the rest go to
    /// uniformly random users.
    pub signal: f64,
    /// Mean out-degree per user (Poisson).
    pub degree: f64,
}

impl RelationSpec {
    pub fn new(name: &str, signal: f64, degree: f64) -> Self {
        RelationSpec {
            name: name.into(),
            signal,
            degree,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_users: usize,
    pub bot_fraction: f64,
    pub relations: Vec<RelationSpec>,
    /// Distance between class means of the numeric metadata.
    pub meta_gap: f64,
    /// Distance between class means of the text embeddings.
    pub text_gap: f64,
    /// Class gap of a latent shared by metadata and text.
    pub shared_gap: f64,
    /// Spread of the shared latent around its class mean.
    pub shared_scale: f64,
    /// Bots carry the shared latent with the opposite sign in their text, so
    /// part of the class signal lives only in how metadata and text agree.
    pub shared_flip: bool,
    pub noise: f64,
    pub text_dim: usize,
    pub tweets_per_user: usize,
    /// When set, each user is trusted with this probability (exposed as the
    /// first categorical bit). Signal edges from trusted users point to their
    /// own class, from untrusted users to the other class.
    pub trusted_fraction: Option<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 500,
            bot_fraction: 0.2,
            relations: vec![
                RelationSpec::new("follower", 0.7, 5.0),
                RelationSpec::new("following", 0.3, 5.0),
                RelationSpec::new("mention", 0.5, 3.0),
            ],
            meta_gap: 1.0,
            text_gap: 1.0,
            shared_gap: 0.0,
            shared_scale: 1.0,
            shared_flip: false,
            noise: 1.0,
            text_dim: 16,
            tweets_per_user: 4,
            trusted_fraction: None,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.bot_fraction > 0.0 && self.bot_fraction < 1.0) {
            return fail(format!("bot_fraction {} outside (0, 1)", self.bot_fraction));
        }
        let bots = self.bot_count();
        if bots == 0 || bots == self.n_users {
            return fail(format!("{} users with bot_fraction {} leaves a class empty", self.n_users, self.bot_fraction));
        }
        if self.text_dim < 2 {
            return fail("text_dim must be at least 2".into());
        }
        for (name, v) in [
            ("meta_gap", self.meta_gap),
            ("text_gap", self.text_gap),
            ("shared_gap", self.shared_gap),
            ("shared_scale", self.shared_scale),
            ("noise", self.noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if let Some(t) = self.trusted_fraction {
            if !(0.0..=1.0).contains(&t) {
                return fail(format!("trusted_fraction {t} outside [0, 1]"));
            }
        }
        let mut names = BTreeSet::new();
        for r in &self.relations {
            if r.name.is_empty() || !names.insert(&r.name) {
                return fail(format!("relation name `{}` empty or repeated", r.name));
            }
            if !(0.0..=1.0).contains(&r.signal) {
                return fail(format!("relation `{}` signal {} outside [0, 1]", r.name, r.signal));
            }
            if !(r.degree >= 0.0 && r.degree.is_finite()) {
                return fail(format!("relation `{}` degree {} invalid", r.name, r.degree));
            }
        }
        Ok(())
    }

    pub fn bot_count(&self) -> usize {
        (self.bot_fraction * self.n_users as f64).round() as usize
    }
}

fn unit_direction<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `sign·gap/2·dir + latent·shared_dir + noise·N(0, I)`.
fn planted<R: Rng>(sign: f64, gap: f64, dir: &[f64], latent: f64, shared_dir: &[f64], noise: f64, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    dir.iter()
        .zip(shared_dir)
        .map(|(&d, &s)| sign * gap / 2.0 * d + latent * s + noise * normal.sample(rng))
        .collect()
}

/// Generates a fully labeled graph without split assignments.
pub fn generate(cfg: &SynthConfig) -> Result<HeteroGraph> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_users;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut is_bot = vec![false; n];
    is_bot[..cfg.bot_count()].iter_mut().for_each(|b| *b = true);
    is_bot.shuffle(&mut rng);

    let meta_dir = unit_direction(NUMERIC_META, &mut rng);
    let meta_shared = unit_direction(NUMERIC_META, &mut rng);
    let text_dir = unit_direction(cfg.text_dim, &mut rng);
    let text_shared = unit_direction(cfg.text_dim, &mut rng);

    let trusted: Vec<bool> = match cfg.trusted_fraction {
        Some(t) => (0..n).map(|_| rng.gen_bool(t)).collect(),
        None => vec![true; n],
    };

    let mut users = Vec::with_capacity(n);
    for i in 0..n {
        let sign = if is_bot[i] { 1.0 } else { -1.0 };
        let latent = sign * cfg.shared_gap / 2.0 + cfg.shared_scale * normal.sample(&mut rng);
        let text_latent = if cfg.shared_flip && is_bot[i] { -latent } else { latent };
        let numeric = planted(sign, cfg.meta_gap, &meta_dir, latent, &meta_shared, cfg.noise, &mut rng);
        let mut categorical = [0.0; CATEGORICAL_META];
        categorical[0] = if cfg.trusted_fraction.is_some() {
            f64::from(u8::from(trusted[i]))
        } else {
            f64::from(u8::from(rng.gen_bool(0.5)))
        };
        for c in categorical.iter_mut().skip(1) {
            *c = f64::from(u8::from(rng.gen_bool(0.5)));
        }
        let centroid = planted(sign, cfg.text_gap, &text_dir, text_latent, &text_shared, cfg.noise, &mut rng);
        let jitter = |c: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
            c.iter().map(|&x| x + cfg.noise * normal.sample(rng)).collect()
        };
        let description_embedding = jitter(&centroid, &mut rng);
        let tweet_embeddings = (0..cfg.tweets_per_user).map(|_| jitter(&centroid, &mut rng)).collect();
        users.push(UserRecord {
            id: format!("u{i}"),
            numeric_meta: numeric.try_into().expect("numeric width"),
            categorical_meta: categorical,
            description_embedding,
            tweet_embeddings,
            label: Some(Label::from_bit(is_bot[i])),
            split: Split::None,
        });
    }

    let bots: Vec<usize> = (0..n).filter(|&i| is_bot[i]).collect();
    let humans: Vec<usize> = (0..n).filter(|&i| !is_bot[i]).collect();
    let mut edges = Vec::new();
    for (r, spec) in cfg.relations.iter().enumerate() {
        let mut set = BTreeSet::new();
        let poisson = (spec.degree > 0.0).then(|| Poisson::new(spec.degree).expect("positive rate"));
        for src in 0..n {
            let k = poisson.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
            for _ in 0..k {
                let dst = if rng.gen_bool(spec.signal) {
                    let to_bots = is_bot[src] == trusted[src];
                    let pool = if to_bots { &bots } else { &humans };
                    *pool.choose(&mut rng).expect("both classes non-empty")
                } else {
                    rng.gen_range(0..n)
                };
                if dst != src {
                    set.insert((src, dst));
                }
            }
        }
        edges.extend(set.into_iter().map(|(src, dst)| Edge { relation: r, src, dst }));
    }

    HeteroGraph::new(users, cfg.relations.iter().map(|r| r.name.clone()).collect(), edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_bot_count() {
        let g = generate(&SynthConfig::default()).unwrap();
        let bots = g.users().iter().filter(|u| u.label == Some(Label::Bot)).count();
        assert_eq!(bots, 100);
    }

    #[test]
    fn same_seed_same_file() {
        let c = SynthConfig {
            n_users: 60,
            ..SynthConfig::default()
        };
        let a = generate(&c).unwrap().to_json_string().unwrap();
        let b = generate(&c).unwrap().to_json_string().unwrap();
        assert_eq!(a, b);
        let other = generate(&SynthConfig { seed: 1, ..c }).unwrap().to_json_string().unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn degenerate_configs_rejected() {
        assert!(generate(&SynthConfig {
            bot_fraction: 0.0,
            ..SynthConfig::default()
        })
        .is_err());
        assert!(generate(&SynthConfig {
            n_users: 3,
            bot_fraction: 0.1,
            ..SynthConfig::default()
        })
        .is_err());
        assert!(generate(&SynthConfig {
            text_dim: 1,
            ..SynthConfig::default()
        })
        .is_err());
    }
}
