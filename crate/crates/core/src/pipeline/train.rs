use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{assign_splits, zscore_fit, HeteroGraph, Label, Split, SplitSpec, ZScoreStats};
use crate::error::{Error, Result};
use crate::graph::{mixing_operator, oversample, GraphStructure, SyntheticNode};
use crate::losses::{total_loss, LossValues, LossWeights};
use crate::model::{Model, ModelInputs};
use crate::numerics::{adam_step, clip_prob, DropoutCtx, SparseRows, Tape};
use crate::scalar::Scalar;

use super::metrics::Metrics;

/// A dataset ready for training: relation subset applied, splits assigned,
/// encoder inputs built.
#[derive(Clone, Debug)]
pub struct Prepared<T> {
    pub graph: HeteroGraph,
    pub stats: ZScoreStats,
    pub inputs: ModelInputs<T>,
    pub structure: GraphStructure<T>,
    pub train: Vec<(usize, Label)>,
    pub val: Vec<(usize, Label)>,
    pub test: Vec<(usize, Label)>,
}

fn labeled_in(g: &HeteroGraph, split: Split) -> Vec<(usize, Label)> {
    g.split_indices(split)
        .into_iter()
        .filter_map(|i| g.user(i).label.map(|l| (i, l)))
        .collect()
}

impl<T: Scalar> Prepared<T> {
    pub fn new(g: &HeteroGraph, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let g = match &cfg.relations {
            Some(r) => g.with_relations(r)?,
            None => g.clone(),
        };
        let graph = if g.has_splits() {
            g
        } else {
            assign_splits(&g, &SplitSpec::seven_two_one(cfg.split_seed))?
        };
        let train = labeled_in(&graph, Split::Train);
        let val = labeled_in(&graph, Split::Val);
        let test = labeled_in(&graph, Split::Test);
        for (name, s) in [("train", &train), ("val", &val), ("test", &test)] {
            if s.is_empty() {
                return Err(Error::Split(format!("{name} split has no labeled users")));
            }
        }
        let stats = zscore_fit(&graph, Split::Train)?;
        let inputs = ModelInputs::from_graph(&graph, &stats)?;
        let structure = GraphStructure::new(&graph, cfg.edge_direction);
        Ok(Prepared {
            graph,
            stats,
            inputs,
            structure,
            train,
            val,
            test,
        })
    }

    pub fn split(&self, split: Split) -> Result<&[(usize, Label)]> {
        match split {
            Split::Train => Ok(&self.train),
            Split::Val => Ok(&self.val),
            Split::Test => Ok(&self.test),
            Split::None => Err(Error::Split("cannot evaluate on unassigned users".into())),
        }
    }
}

/// The synthetic nodes of one training phase and the structures built for them.
pub struct OversamplePlan<T> {
    pub synthetic: Vec<SyntheticNode>,
    pub structure: GraphStructure<T>,
    pub mixing: Option<Arc<SparseRows<T>>>,
}

pub fn plan_oversampling<T: Scalar>(
    model: &Model<T>,
    data: &Prepared<T>,
    rng: &mut ChaCha8Rng,
) -> Result<OversamplePlan<T>> {
    let cfg = &model.cfg;
    let synthetic = if cfg.oversample_scale > 0.0 {
        let x = model.context_features(&data.inputs, &data.structure)?;
        oversample(&x, &data.train, cfg.oversample_scale, cfg.knn_k, rng)
    } else {
        Vec::new()
    };
    let structure = GraphStructure::with_synthetic(&data.graph, cfg.edge_direction, &synthetic);
    let mixing = (!synthetic.is_empty()).then(|| mixing_operator(&synthetic, data.structure.n_real));
    Ok(OversamplePlan {
        synthetic,
        structure,
        mixing,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Component means over the epoch's mini-batches.
    pub loss: LossValues,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub history: Vec<EpochRecord>,
    pub epoch_selected: usize,
    pub n_synthetic: usize,
    pub val: Metrics,
    pub test: Metrics,
}

/// Accuracy and mean cross-entropy of `probs` over the labeled `users`.
fn score(probs: &[f64], users: &[(usize, Label)]) -> Result<(Metrics, f64)> {
    let pred: Vec<bool> = users.iter().map(|&(i, _)| probs[i] >= 0.5).collect();
    let truth: Vec<bool> = users.iter().map(|&(_, l)| l == Label::Bot).collect();
    let m = Metrics::from_predictions(&pred, &truth)?;
    let ce = users
        .iter()
        .map(|&(i, l)| {
            let p = clip_prob(probs[i]);
            if l == Label::Bot {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / users.len() as f64;
    Ok((m, ce))
}

pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Prepared<T>, split: Split) -> Result<Metrics> {
    let probs = model.predict(&data.inputs, &data.structure)?;
    Ok(score(&probs, data.split(split)?)?.0)
}

pub fn train<T: Scalar>(g: &HeteroGraph, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    let data = Prepared::new(g, cfg)?;
    train_prepared(&data, cfg)
}

/// Mini-batches of at least two rows where possible, so the orthogonality
/// term always has something to center.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let n = out.len();
        let start = (n - 2) * size;
        out.truncate(n - 2);
        out.push(&order[start..]);
    }
    out
}

pub fn train_prepared<T: Scalar>(data: &Prepared<T>, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::<T>::init(cfg, data.graph.text_dim(), data.graph.relations().len(), &mut rng)?;
    let weights = LossWeights::from_config(cfg);
    weights.validate()?;
    let adam = cfg.adam();
    let n_real = data.structure.n_real;

    let mut plan = plan_oversampling(&model, data, &mut rng)?;
    let n_synthetic = plan.synthetic.len();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, crate::numerics::ParamStore<T>)> = None;
    let mut since_best = 0;

    for epoch in 0..cfg.max_epochs {
        if cfg.oversample_per_epoch && epoch > 0 {
            plan = plan_oversampling(&model, data, &mut rng)?;
        }
        let mut target = vec![0.0; n_real + plan.synthetic.len()];
        let mut order: Vec<usize> = Vec::with_capacity(data.train.len() + plan.synthetic.len());
        for &(i, l) in &data.train {
            target[i] = l.as_target();
            order.push(i);
        }
        for (k, s) in plan.synthetic.iter().enumerate() {
            target[n_real + k] = s.label.as_target();
            order.push(n_real + k);
        }
        order.shuffle(&mut rng);

        let mut sums = LossValues::default();
        let bs = batches(&order, cfg.batch_size);
        for batch in &bs {
            let labels: Vec<f64> = batch.iter().map(|&i| target[i]).collect();
            let mut tape = Tape::new();
            let grads = {
                let mut dropout = DropoutCtx::train(cfg.dropout, &mut rng)?;
                let fwd = model.forward_rows(
                    &mut tape,
                    &data.inputs,
                    &plan.structure,
                    plan.mixing.as_ref(),
                    &mut dropout,
                    None,
                    Some(batch),
                )?;
                let local: Vec<usize> = (0..batch.len()).collect();
                let parts = model.loss(&mut tape, &fwd, &local, &labels, &weights)?;
                let total = total_loss(&mut tape, &parts, &weights)?;
                let mut v = parts.values(&tape);
                v.total = tape.value(total).item().as_f64();
                sums.task += v.task;
                sums.sim += v.sim;
                sums.diff += v.diff;
                sums.recon += v.recon;
                sums.total += v.total;
                let adj = tape.backward(total)?;
                tape.param_grads(&model.store, &adj)
            };
            adam_step(&mut model.store, &grads, &adam)?;
        }
        let nb = bs.len().max(1) as f64;
        let loss = LossValues {
            task: sums.task / nb,
            sim: sums.sim / nb,
            diff: sums.diff / nb,
            recon: sums.recon / nb,
            total: sums.total / nb,
        };

        let probs = model.predict(&data.inputs, &data.structure)?;
        let (val, val_loss) = score(&probs, &data.val)?;
        log::debug!(
            "epoch {epoch}: loss {:.5} val acc {:.4} val ce {:.4}",
            loss.total,
            val.accuracy,
            val_loss
        );
        history.push(EpochRecord {
            epoch,
            loss,
            val_accuracy: val.accuracy,
            val_loss,
        });
        let improved = val_loss.is_finite() && best.as_ref().is_none_or(|b| val.accuracy > b.1);
        if improved {
            best = Some((epoch, val.accuracy, model.store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience.max(1) {
                break;
            }
        }
    }

    let (epoch_selected, _, store) = best.ok_or_else(|| Error::NonFinite {
        part: "validation loss".into(),
    })?;
    model.store = store;
    let probs = model.predict(&data.inputs, &data.structure)?;
    Ok(TrainOutcome {
        val: score(&probs, &data.val)?.0,
        test: score(&probs, &data.test)?.0,
        model,
        history,
        epoch_selected,
        n_synthetic,
    })
}
