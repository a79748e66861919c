use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::TrainConfig;
use crate::data::HeteroGraph;
use crate::error::Result;
use crate::losses::{total_loss, LossWeights};
use crate::model::Model;
use crate::numerics::{grad_check, DropoutCtx, GradCheckReport, ParamKind};

use super::train::{plan_oversampling, Prepared};

/// Finite-difference check of the full training objective near
/// initialization: every train and synthetic row in one batch, dropout masks
/// fixed by the seed.
///
/// Biases and gates are jittered off zero first. With zero biases, a row
/// that dropout or ReLU empties lands exactly on the next ReLU kink, where
/// central differences disagree with any one-sided derivative.
pub fn grad_check_model(g: &HeteroGraph, cfg: &TrainConfig, h: f64, tol: f64) -> Result<GradCheckReport> {
    let data = Prepared::<f64>::new(g, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::<f64>::init(cfg, data.graph.text_dim(), data.graph.relations().len(), &mut rng)?;
    let jitter = Normal::new(0.0, 0.1).expect("valid normal");
    let offsets: Vec<String> = model
        .store
        .iter()
        .filter(|(_, p)| p.kind != ParamKind::Weight)
        .map(|(n, _)| n.to_string())
        .collect();
    for name in offsets {
        for x in model.store.value_mut(&name)?.data_mut() {
            *x += jitter.sample(&mut rng);
        }
    }
    let plan = plan_oversampling(&model, &data, &mut rng)?;
    let weights = LossWeights::from_config(cfg);
    weights.validate()?;

    let n_real = data.structure.n_real;
    let mut rows: Vec<usize> = data.train.iter().map(|&(i, _)| i).collect();
    let mut labels: Vec<f64> = data.train.iter().map(|&(_, l)| l.as_target()).collect();
    for (k, s) in plan.synthetic.iter().enumerate() {
        rows.push(n_real + k);
        labels.push(s.label.as_target());
    }
    let local: Vec<usize> = (0..rows.len()).collect();
    let mask_seed = cfg.seed ^ 0x9e37_79b9;

    grad_check(
        |tape, store| {
            let m = Model {
                store: store.clone(),
                ..model.clone()
            };
            let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
            let mut dropout = DropoutCtx::train(cfg.dropout, &mut mask_rng)?;
            let fwd = m.forward_rows(
                tape,
                &data.inputs,
                &plan.structure,
                plan.mixing.as_ref(),
                &mut dropout,
                None,
                Some(&rows),
            )?;
            let parts = m.loss(tape, &fwd, &local, &labels, &weights)?;
            total_loss(tape, &parts, &weights)
        },
        &model.store,
        h,
        tol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate, RelationSpec, SynthConfig};

    #[test]
    fn full_objective_matches_finite_differences() {
        let g = generate(&SynthConfig {
            n_users: 10,
            bot_fraction: 0.3,
            relations: vec![RelationSpec::new("follower", 0.8, 2.0), RelationSpec::new("following", 0.3, 2.0)],
            text_dim: 4,
            seed: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            hidden: 8,
            heads: 2,
            layers: 2,
            ..TrainConfig::default()
        };
        let report = grad_check_model(&g, &cfg, 1e-5, 1e-4).unwrap();
        assert!(report.passed, "{:?}", report.worst());
        assert!(report.params.iter().any(|p| p.name.starts_with("graph.")));
    }
}
