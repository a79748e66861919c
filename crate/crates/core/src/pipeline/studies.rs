//! Repeated runs and the comparison tables built from them.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{GraphLayerKind, TrainConfig, Variant};
use crate::data::HeteroGraph;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::metrics::{mean_std, Metrics};
use super::train::{train_prepared, Prepared};

/// One line of the per-run metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub seed: u64,
    pub split: String,
    pub accuracy: f64,
    pub f1: f64,
    pub epoch_selected: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub epoch_selected: usize,
    pub n_synthetic: usize,
    pub val: Metrics,
    pub test: Metrics,
}

/// Test-split aggregate over repeats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatReport {
    pub name: String,
    pub runs: Vec<RunSummary>,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
}

impl RepeatReport {
    fn new(name: String, runs: Vec<RunSummary>) -> Self {
        let acc: Vec<f64> = runs.iter().map(|r| r.test.accuracy).collect();
        let f1: Vec<f64> = runs.iter().map(|r| r.test.f1).collect();
        let (accuracy_mean, accuracy_std) = mean_std(&acc);
        let (f1_mean, f1_std) = mean_std(&f1);
        RepeatReport {
            name,
            runs,
            accuracy_mean,
            accuracy_std,
            f1_mean,
            f1_std,
        }
    }

    /// Validation and test records for every run.
    pub fn records(&self) -> Vec<RunRecord> {
        let mut out = Vec::with_capacity(2 * self.runs.len());
        for (i, r) in self.runs.iter().enumerate() {
            for (split, m) in [("val", r.val), ("test", r.test)] {
                out.push(RunRecord {
                    run_id: format!("{}#{i}", self.name),
                    seed: r.seed,
                    split: split.into(),
                    accuracy: m.accuracy,
                    f1: m.f1,
                    epoch_selected: r.epoch_selected,
                });
            }
        }
        out
    }

    pub fn write_records<W: Write>(&self, mut w: W) -> Result<()> {
        for rec in self.records() {
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// `n` runs with seeds `cfg.seed, cfg.seed + 1, ...` on the same split,
/// executed in parallel.
pub fn run_repeats<T: Scalar>(g: &HeteroGraph, cfg: &TrainConfig, n: usize, name: &str) -> Result<RepeatReport> {
    if n == 0 {
        return Err(Error::Config("at least one repeat is required".into()));
    }
    let data = Prepared::<T>::new(g, cfg)?;
    let runs = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut c = cfg.clone();
            c.seed = cfg.seed.wrapping_add(i as u64);
            let out = train_prepared(&data, &c)?;
            log::info!(
                "{name} seed {}: test acc {:.4} f1 {:.4} (epoch {})",
                c.seed,
                out.test.accuracy,
                out.test.f1,
                out.epoch_selected
            );
            Ok(RunSummary {
                seed: c.seed,
                epoch_selected: out.epoch_selected,
                n_synthetic: out.n_synthetic,
                val: out.val,
                test: out.test,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RepeatReport::new(name.to_string(), runs))
}

/// Comparison table written as CSV.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub rows: Vec<RepeatReport>,
}

#[derive(Serialize)]
struct TableRow<'a> {
    name: &'a str,
    runs: usize,
    accuracy_mean: f64,
    accuracy_std: f64,
    f1_mean: f64,
    f1_std: f64,
}

impl Table {
    pub fn get(&self, name: &str) -> Option<&RepeatReport> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(TableRow {
                name: &r.name,
                runs: r.runs.len(),
                accuracy_mean: r.accuracy_mean,
                accuracy_std: r.accuracy_std,
                f1_mean: r.f1_mean,
                f1_std: r.f1_std,
            })?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_records<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.rows {
            r.write_records(&mut w)?;
        }
        Ok(())
    }
}

/// Row name for a relation subset, e.g. `follower+following`.
pub fn subset_name(subset: &[String]) -> String {
    if subset.is_empty() {
        "none".into()
    } else {
        subset.join("+")
    }
}

/// One repeated run per relation subset. An empty subset runs without the
/// graph mode.
pub fn ablate_relations<T: Scalar>(g: &HeteroGraph, cfg: &TrainConfig, subsets: &[Vec<String>]) -> Result<Table> {
    let mut rows = Vec::with_capacity(subsets.len());
    for subset in subsets {
        let mut c = cfg.clone();
        c.relations = Some(subset.clone());
        if subset.is_empty() {
            c.graph_branch = false;
        }
        rows.push(run_repeats::<T>(g, &c, cfg.repeats, &subset_name(subset))?);
    }
    Ok(Table { rows })
}

/// Row names and settings of the architecture ablation.
pub fn variant_grid() -> Vec<(&'static str, Variant, GraphLayerKind)> {
    vec![
        ("BotSAI", Variant::Full, GraphLayerKind::Local),
        ("BotSAI-BASE", Variant::Base, GraphLayerKind::Local),
        ("BotSAI-SF", Variant::Sf, GraphLayerKind::Local),
        ("BotSAI-IF", Variant::If, GraphLayerKind::Local),
        ("GCN", Variant::Full, GraphLayerKind::Gcn),
        ("GAT", Variant::Full, GraphLayerKind::Gat),
        ("RGT", Variant::Full, GraphLayerKind::Rgt),
    ]
}

pub fn ablate_variants<T: Scalar>(g: &HeteroGraph, cfg: &TrainConfig) -> Result<Table> {
    ablate_variants_subset::<T>(g, cfg, &variant_grid().iter().map(|v| v.0).collect::<Vec<_>>())
}

/// Runs only the named rows of [`variant_grid`], in grid order.
pub fn ablate_variants_subset<T: Scalar>(g: &HeteroGraph, cfg: &TrainConfig, names: &[&str]) -> Result<Table> {
    for n in names {
        if !variant_grid().iter().any(|v| v.0 == *n) {
            return Err(Error::Config(format!("unknown variant row `{n}`")));
        }
    }
    let mut rows = Vec::new();
    for (name, variant, layer) in variant_grid() {
        if !names.contains(&name) {
            continue;
        }
        let mut c = cfg.clone();
        c.variant = variant;
        c.graph_layer = layer;
        rows.push(run_repeats::<T>(g, &c, cfg.repeats, name)?);
    }
    Ok(Table { rows })
}

/// One repeated run per oversampling scale, in ascending order.
pub fn sweep_omega<T: Scalar>(g: &HeteroGraph, cfg: &TrainConfig, values: &[f64]) -> Result<Table> {
    let mut omegas = values.to_vec();
    if let Some(bad) = omegas.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(Error::Config(format!("oversampling scale must be finite and nonnegative, got {bad}")));
    }
    omegas.sort_by(f64::total_cmp);
    omegas.dedup();
    let mut rows = Vec::with_capacity(omegas.len());
    for w in omegas {
        let mut c = cfg.clone();
        c.oversample_scale = w;
        rows.push(run_repeats::<T>(g, &c, cfg.repeats, &format!("omega={w}"))?);
    }
    Ok(Table { rows })
}
