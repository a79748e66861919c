//! The full detector: encoders, graph mode, subspaces, fusion and head.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{TrainConfig, Variant};
use crate::data::{zscore_apply, HeteroGraph, ZScoreStats, META_DIM, NUMERIC_META};
use crate::encoders::{encode_metadata, encode_text, init_encoders, initial_node_feature, user_text_input};
use crate::error::{Error, Result};
use crate::graph::{append_synthetic, context_input, graph_forward, init_graph, AttentionTrace, GraphStructure};
use crate::losses::{diff_loss, init_decoders, recon_loss, sim_loss, task_loss, LossParts, LossWeights};
use crate::numerics::{DropoutCtx, Matrix, ParamStore, SparseRows, Tape, Var};
use crate::scalar::Scalar;
use crate::subspace::{detect, fuse, init_detector, init_fusion, init_projectors, project, SubspaceBundle};

/// Per-user encoder inputs: z-scored metadata (`n x 8`) and pooled text
/// (`n x 2·d_text`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInputs<T> {
    pub meta: Matrix<T>,
    pub text: Matrix<T>,
}

impl<T: Scalar> ModelInputs<T> {
    pub fn from_graph(g: &HeteroGraph, stats: &ZScoreStats) -> Result<Self> {
        let n = g.num_users();
        let mut meta = Vec::with_capacity(n * META_DIM);
        let mut text = Vec::with_capacity(n * 2 * g.text_dim());
        for u in g.users() {
            meta.extend(zscore_apply(stats, &u.numeric_meta).iter().map(|&x| T::lit(x)));
            meta.extend(u.categorical_meta.iter().map(|&x| T::lit(x)));
            text.extend(user_text_input(u)?.into_iter().map(T::lit));
        }
        debug_assert_eq!(meta.len(), n * (NUMERIC_META + 3));
        Ok(ModelInputs {
            meta: Matrix::from_vec(n, META_DIM, meta)?,
            text: Matrix::from_vec(n, 2 * g.text_dim(), text)?,
        })
    }

    pub fn num_users(&self) -> usize {
        self.meta.rows()
    }
}

/// Trainable detector parameters plus the configuration they were built for.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Model<T> {
    pub cfg: TrainConfig,
    pub store: ParamStore<T>,
    pub text_dim: usize,
    pub n_relations: usize,
}

/// Everything one forward pass exposes.
pub struct Forward {
    /// `n_nodes x 1` bot probabilities.
    pub probs: Var,
    /// `x_G, x_T, x_M`, each `n_nodes x d_h`.
    pub modal: [Var; 3],
    /// Absent for the BASE variant.
    pub bundle: Option<SubspaceBundle>,
    pub fusion_alpha: Vec<Var>,
}

impl<T: Scalar> Model<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &TrainConfig, text_dim: usize, n_relations: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden;
        let mut store = ParamStore::new();
        init_encoders(&mut store, text_dim, d, rng)?;
        if cfg.graph_branch {
            init_graph(&mut store, cfg, n_relations, rng)?;
        }
        let tokens = match cfg.variant {
            Variant::Base => 3,
            Variant::Full => {
                init_projectors(&mut store, d, rng)?;
                init_fusion(&mut store, d, cfg.heads, rng)?;
                init_decoders(&mut store, d, rng)?;
                6
            }
            Variant::Sf | Variant::If => {
                init_projectors(&mut store, d, rng)?;
                init_fusion(&mut store, d, cfg.heads, rng)?;
                init_decoders(&mut store, d, rng)?;
                3
            }
        };
        init_detector(&mut store, tokens * d, rng)?;
        Ok(Model {
            cfg: cfg.clone(),
            store,
            text_dim,
            n_relations,
        })
    }

    /// Graph-mode input rows `[two-hop mean ‖ h0]` for the real nodes, used
    /// to pick oversampling partners.
    pub fn context_features(&self, inputs: &ModelInputs<T>, structure: &GraphStructure<T>) -> Result<Matrix<T>> {
        let mut tape = Tape::new();
        let mut dropout = DropoutCtx::eval();
        let (_, _, h0) = self.encode(&mut tape, inputs, &mut dropout)?;
        let x = if self.cfg.graph_branch {
            context_input(&mut tape, structure, h0)?
        } else {
            h0
        };
        Ok(tape.value(x).clone())
    }

    fn encode(&self, tape: &mut Tape<T>, inputs: &ModelInputs<T>, dropout: &mut DropoutCtx<'_>) -> Result<(Var, Var, Var)> {
        let act = self.cfg.activation;
        let meta = tape.constant(inputs.meta.clone());
        let text = tape.constant(inputs.text.clone());
        let x_m = encode_metadata(tape, &self.store, meta, act, dropout)?;
        let x_t = encode_text(tape, &self.store, text, act, dropout)?;
        let h0 = initial_node_feature(tape, &self.store, x_m, x_t)?;
        Ok((x_m, x_t, h0))
    }

    /// Forward over every node of `structure`. `mixing` must produce exactly
    /// the synthetic rows `structure` was built with.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        inputs: &ModelInputs<T>,
        structure: &GraphStructure<T>,
        mixing: Option<&Arc<SparseRows<T>>>,
        dropout: &mut DropoutCtx<'_>,
        traces: Option<&mut Vec<AttentionTrace>>,
    ) -> Result<Forward> {
        self.forward_rows(tape, inputs, structure, mixing, dropout, traces, None)
    }

    /// Like [`Model::forward`], but when `rows` is given the per-node head
    /// (projection, fusion, detection) only runs on those rows, and every
    /// output of [`Forward`] is indexed by position in `rows`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_rows(
        &self,
        tape: &mut Tape<T>,
        inputs: &ModelInputs<T>,
        structure: &GraphStructure<T>,
        mixing: Option<&Arc<SparseRows<T>>>,
        dropout: &mut DropoutCtx<'_>,
        traces: Option<&mut Vec<AttentionTrace>>,
        rows: Option<&[usize]>,
    ) -> Result<Forward> {
        if inputs.num_users() != structure.n_real {
            return Err(Error::Consistency(format!(
                "{} input rows for a graph of {} users",
                inputs.num_users(),
                structure.n_real
            )));
        }
        let (x_m, x_t, h0) = self.encode(tape, inputs, dropout)?;
        let x_g = if self.cfg.graph_branch {
            graph_forward(tape, &self.store, &self.cfg, structure, h0, mixing, dropout, traces)?
        } else {
            append_synthetic(tape, h0, mixing)?
        };
        let x_t = append_synthetic(tape, x_t, mixing)?;
        let x_m = append_synthetic(tape, x_m, mixing)?;
        let mut modal = [x_g, x_t, x_m];
        if let Some(rows) = rows {
            let idx: Arc<[usize]> = rows.into();
            for x in &mut modal {
                *x = tape.gather_rows(*x, idx.clone())?;
            }
        }

        let heads = self.cfg.heads;
        let (h_out, bundle, fusion_alpha) = match self.cfg.variant {
            Variant::Base => (tape.concat_cols(&modal)?, None, Vec::new()),
            v => {
                let b = project(tape, &self.store, modal, self.cfg.projector_activation)?;
                let tokens: Vec<Var> = match v {
                    Variant::Sf => b.specific.to_vec(),
                    Variant::If => b.invariant.to_vec(),
                    _ => b.tokens().to_vec(),
                };
                let f = fuse(tape, &self.store, heads, &tokens)?;
                (f.h_out, Some(b), f.alpha)
            }
        };
        let probs = detect(tape, &self.store, h_out)?;
        Ok(Forward {
            probs,
            modal,
            bundle,
            fusion_alpha,
        })
    }

    /// Loss components on the rows `batch` of a forward pass.
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        fwd: &Forward,
        batch: &[usize],
        labels: &[f64],
        weights: &LossWeights,
    ) -> Result<LossParts> {
        let idx: Arc<[usize]> = batch.into();
        let probs = tape.gather_rows(fwd.probs, idx.clone())?;
        let task = task_loss(tape, &self.store, probs, labels, weights.lambda)?;
        let Some(bundle) = fwd.bundle else {
            return Ok(LossParts {
                task,
                sim: None,
                diff: None,
                recon: None,
            });
        };
        let mut pick = |v: Var| tape.gather_rows(v, idx.clone());
        let mut inv = bundle.invariant;
        let mut spec = bundle.specific;
        let mut targets = fwd.modal;
        for m in 0..3 {
            inv[m] = pick(inv[m])?;
            spec[m] = pick(spec[m])?;
            targets[m] = pick(targets[m])?;
        }
        let b = SubspaceBundle {
            invariant: inv,
            specific: spec,
        };
        let sim = if weights.alpha > 0.0 {
            Some(sim_loss(tape, &b, weights.cmd_order)?)
        } else {
            None
        };
        let diff = if weights.beta_w > 0.0 && batch.len() >= 2 {
            Some(diff_loss(tape, &b)?)
        } else {
            None
        };
        let recon = if weights.gamma > 0.0 {
            Some(recon_loss(tape, &self.store, &b, targets)?)
        } else {
            None
        };
        Ok(LossParts { task, sim, diff, recon })
    }

    /// Bot probabilities of the real nodes in evaluation mode.
    pub fn predict(&self, inputs: &ModelInputs<T>, structure: &GraphStructure<T>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, inputs, structure, None, &mut DropoutCtx::eval(), None)?;
        let p = tape.value(fwd.probs);
        Ok(p.data()[..structure.n_real].iter().map(|x| x.as_f64()).collect())
    }
}
