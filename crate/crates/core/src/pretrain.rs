//! Contrastive graph-text pre-training.
//!
//! Three symmetric InfoNCE terms align node embeddings `V`, text embeddings
//! `T` and neighbor-summary embeddings `S` (mean of neighbor texts):
//! `L = L(V,T) + α (L(S,T) + L(V,S))`, each with logits scaled by `exp(τ)`.

use std::rc::Rc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    graph, text, GraphEncoderConfig, Propagation, PretrainedModel, Slot, TextEncoderConfig,
    Vocabulary,
};
use crate::error::{Result, ZptError};
use crate::optim::Adam;
use crate::params::Bound;
use crate::rng;
use crate::tagcore::TextAttributedGraph;
use crate::tensor::{softmax_rows, Csr, Mat, Tape, Var};

/// Upper bound on the logit scale `exp(τ)`.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Nodes per step. The default covers the whole desk-scale corpus in
    /// one step.
    pub batch_size: usize,
    pub seed: u64,
    pub tau_init: f64,
    pub vocab_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            learning_rate: 2e-5,
            epochs: 200,
            batch_size: 512,
            seed: 0,
            tau_init: (1.0f64 / 0.07).ln(),
            vocab_size: 5000,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(ZptError::config("pretrain.alpha", "must be finite and >= 0"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ZptError::config("pretrain.learning_rate", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(ZptError::config("pretrain.epochs", "must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(ZptError::config(
                "pretrain.batch_size",
                "contrastive batches need at least 2 nodes",
            ));
        }
        if !self.tau_init.is_finite() || self.tau_init > MAX_LOGIT_SCALE.ln() {
            return Err(ZptError::config(
                "pretrain.tau_init",
                format!("must be finite and exp(tau_init) <= {MAX_LOGIT_SCALE}"),
            ));
        }
        if self.vocab_size == 0 {
            return Err(ZptError::config("pretrain.vocab_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// One row of the pre-training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLogEntry {
    pub epoch: usize,
    pub step: usize,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
    pub exp_tau: f64,
}

/// Trained model plus its per-step log.
#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: PretrainedModel,
    pub log: Vec<PretrainLogEntry>,
}

impl PretrainOutcome {
    /// Mean total loss of each epoch, in order.
    pub fn epoch_means(&self) -> Vec<f64> {
        epoch_means(&self.log)
    }
}

pub fn epoch_means(log: &[PretrainLogEntry]) -> Vec<f64> {
    let epochs = log.iter().map(|e| e.epoch + 1).max().unwrap_or(0);
    let mut sums = vec![(0.0, 0usize); epochs];
    for e in log {
        sums[e.epoch].0 += e.total;
        sums[e.epoch].1 += 1;
    }
    sums.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
}

/// Row `v` is the mean of the neighbors' text embeddings, or `t_v` itself
/// for an isolated node.
pub fn summary_embeddings(graph: &TextAttributedGraph, text_embeddings: &Mat) -> Result<Mat> {
    if text_embeddings.nrows() != graph.num_nodes() {
        return Err(ZptError::Contract(format!(
            "{} text rows for {} nodes",
            text_embeddings.nrows(),
            graph.num_nodes()
        )));
    }
    let adj = graph.adjacency_lists();
    let mut out = Mat::zeros(text_embeddings.raw_dim());
    for (v, nbrs) in adj.iter().enumerate() {
        let mut row = out.row_mut(v);
        if nbrs.is_empty() {
            row.assign(&text_embeddings.row(v));
            continue;
        }
        for &u in nbrs {
            row += &text_embeddings.row(u);
        }
        row /= nbrs.len() as f64;
    }
    Ok(out)
}

/// `½ (CE(Λ, diag) + CE(Λᵀ, diag))` with row-wise softmax cross-entropy.
pub fn symmetric_contrastive_loss(logits: &Mat) -> Result<f64> {
    let (n, m) = logits.dim();
    if n != m {
        return Err(ZptError::Contract(format!("similarity logits are {n}x{m}, not square")));
    }
    let ce = |l: &Mat| {
        let p = softmax_rows(l);
        (0..n).map(|i| -p[[i, i]].ln()).sum::<f64>() / n as f64
    };
    Ok(0.5 * (ce(logits) + ce(&logits.t().to_owned())))
}

/// Symmetric contrastive loss between row-aligned, already normalized
/// `a` and `b` with logits `scale · a bᵀ`.
pub fn symmetric_contrastive_on_tape(tape: &mut Tape, a: Var, b: Var, scale: Var) -> Var {
    let n = tape.value(a).nrows();
    let targets = Rc::new((0..n).collect::<Vec<_>>());
    let ab = tape.matmul_t(a, b);
    let ab = tape.scale_by(ab, scale);
    let ba = tape.matmul_t(b, a);
    let ba = tape.scale_by(ba, scale);
    let l_ab = tape.cross_entropy(ab, targets.clone());
    let l_ba = tape.cross_entropy(ba, targets);
    let s = tape.add(l_ab, l_ba);
    tape.scale(s, 0.5)
}

/// Tape handles of the alignment loss terms.
#[derive(Clone, Copy, Debug)]
pub struct AlignmentTerms {
    pub node_text: Var,
    pub summary_text: Var,
    pub node_summary: Var,
    pub total: Var,
}

/// Builds `L₁ + α(L₂ + L₃)` on `tape`. `tau` is the 1×1 log-temperature.
pub fn alignment_on_tape(
    tape: &mut Tape,
    v: Var,
    t: Var,
    s: Var,
    tau: Var,
    alpha: f64,
) -> AlignmentTerms {
    let vn = tape.l2_normalize_rows(v);
    let tn = tape.l2_normalize_rows(t);
    let sn = tape.l2_normalize_rows(s);
    let scale = tape.exp(tau);
    let node_text = symmetric_contrastive_on_tape(tape, vn, tn, scale);
    let summary_text = symmetric_contrastive_on_tape(tape, sn, tn, scale);
    let node_summary = symmetric_contrastive_on_tape(tape, vn, sn, scale);
    let aux = tape.add(summary_text, node_summary);
    let aux = tape.scale(aux, alpha);
    let total = tape.add(node_text, aux);
    AlignmentTerms {
        node_text,
        summary_text,
        node_summary,
        total,
    }
}

/// Loss values of [`alignment_loss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentLoss {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
}

fn check_rows(m: &Mat, what: &str) -> Result<()> {
    for (i, r) in m.rows().into_iter().enumerate() {
        let n = r.dot(&r);
        if !(n > 0.0 && n.is_finite()) {
            return Err(ZptError::NumericalDomain(format!("{what} row {i} has zero or non-finite norm")));
        }
    }
    Ok(())
}

/// Alignment loss of row-aligned `V`, `T`, `S` batches.
pub fn alignment_loss(v: &Mat, t: &Mat, s: &Mat, tau: f64, alpha: f64) -> Result<AlignmentLoss> {
    alignment_loss_with_grads(v, t, s, tau, alpha).map(|(l, _)| l)
}

/// Alignment loss and its gradients with respect to `V`, `T`, `S` and `τ`.
pub fn alignment_loss_with_grads(
    v: &Mat,
    t: &Mat,
    s: &Mat,
    tau: f64,
    alpha: f64,
) -> Result<(AlignmentLoss, [Mat; 4])> {
    if v.dim() != t.dim() || v.dim() != s.dim() {
        return Err(ZptError::Contract("V, T and S must share a shape".into()));
    }
    check_rows(v, "V")?;
    check_rows(t, "T")?;
    check_rows(s, "S")?;
    let mut tape = Tape::new();
    let (vv, tv, sv) = (tape.param(v.clone()), tape.param(t.clone()), tape.param(s.clone()));
    let tauv = tape.param(Mat::from_elem((1, 1), tau));
    let terms = alignment_on_tape(&mut tape, vv, tv, sv, tauv, alpha);
    let loss = AlignmentLoss {
        l1: tape.scalar(terms.node_text),
        l2: tape.scalar(terms.summary_text),
        l3: tape.scalar(terms.node_summary),
        total: tape.scalar(terms.total),
    };
    let g = tape.backward(terms.total);
    let grads = [
        g.get_or_zeros(vv, v),
        g.get_or_zeros(tv, t),
        g.get_or_zeros(sv, s),
        g.get_or_zeros(tauv, &Mat::zeros((1, 1))),
    ];
    Ok((loss, grads))
}

/// Graph-level data reused by every pre-training step.
pub struct PretrainContext<'g> {
    graph: &'g TextAttributedGraph,
    prop: Propagation,
    adjacency: Vec<Vec<usize>>,
    tokens: Vec<Vec<Slot>>,
}

impl<'g> PretrainContext<'g> {
    pub fn new(graph: &'g TextAttributedGraph, model: &PretrainedModel) -> Self {
        let tokens = graph
            .texts()
            .iter()
            .map(|t| model.tokenize(t).into_iter().map(Slot::Token).collect())
            .collect();
        Self {
            graph,
            prop: Propagation::new(graph),
            adjacency: graph.adjacency_lists(),
            tokens,
        }
    }
}

/// Differentiable alignment loss of one node batch.
pub struct BatchObjective {
    pub tape: Tape,
    pub bound: Bound,
    pub terms: AlignmentTerms,
}

/// Full-graph GCN forward, text encoding of the batch and its neighbors,
/// then the alignment loss on the batch rows.
pub fn batch_objective(
    model: &PretrainedModel,
    ctx: &PretrainContext<'_>,
    batch: &[usize],
    alpha: f64,
) -> Result<BatchObjective> {
    let mut needed: Vec<usize> = batch.to_vec();
    for &v in batch {
        needed.extend_from_slice(&ctx.adjacency[v]);
    }
    needed.sort_unstable();
    needed.dedup();
    let pos_of = |v: usize| needed.binary_search(&v).expect("node is in the needed set");

    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, true);
    let x = tape.constant(ctx.graph.features().clone());
    let nodes = graph::forward(&model.graph_config, &mut tape, &bound, &ctx.prop, x);
    let seqs: Vec<Vec<Slot>> = needed.iter().map(|&v| ctx.tokens[v].clone()).collect();
    let texts = text::forward(
        &model.text_config,
        &mut tape,
        &bound,
        model.vocab.len(),
        None,
        &seqs,
    )?;

    let mut trips = Vec::new();
    for (r, &v) in batch.iter().enumerate() {
        let nbrs = &ctx.adjacency[v];
        if nbrs.is_empty() {
            trips.push((r, pos_of(v), 1.0));
        } else {
            let w = 1.0 / nbrs.len() as f64;
            trips.extend(nbrs.iter().map(|&u| (r, pos_of(u), w)));
        }
    }
    let pool = Csr::from_triplets(batch.len(), needed.len(), trips);
    let pool_t = Rc::new(pool.transpose());
    let s = tape.spmm(&pool, pool_t, texts);
    let v = tape.gather_rows(nodes, Rc::new(batch.to_vec()));
    let t = tape.gather_rows(texts, Rc::new(batch.iter().map(|&b| pos_of(b)).collect()));
    let tau = bound.var("tau");
    let terms = alignment_on_tape(&mut tape, v, t, s, tau, alpha);
    Ok(BatchObjective { tape, bound, terms })
}

/// Jointly trains both encoders from scratch on an unlabeled graph.
pub fn pretrain(
    graph: &TextAttributedGraph,
    config: &PretrainConfig,
    text_config: &TextEncoderConfig,
    graph_config: &GraphEncoderConfig,
) -> Result<PretrainOutcome> {
    config.validate()?;
    if graph.num_nodes() < 2 {
        return Err(ZptError::Contract("pre-training needs at least 2 nodes".into()));
    }
    let vocab = Vocabulary::build(graph.texts(), config.vocab_size);
    let mut model = PretrainedModel::init(
        vocab,
        text_config.clone(),
        graph_config.clone(),
        graph.feature_dim(),
        config.tau_init,
        config.seed,
    )?;
    let ctx = PretrainContext::new(graph, &model);
    let mut opt = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..graph.num_nodes()).collect();
    let mut log = Vec::new();
    let max_tau = MAX_LOGIT_SCALE.ln();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut r = rng::stream(config.seed, "pretrain-batches", epoch as u64);
        order.shuffle(&mut r);
        for batch in order.chunks(config.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let obj = batch_objective(&model, &ctx, batch, config.alpha)?;
            let total = obj.tape.scalar(obj.terms.total);
            if !total.is_finite() {
                return Err(ZptError::Training {
                    epoch,
                    step,
                    message: format!("alignment loss is {total}"),
                });
            }
            let grads = obj.tape.backward(obj.terms.total);
            let grads = obj.bound.grads(&model.params, &grads);
            opt.step(&mut model.params, &grads);
            let tau = model.params.get_mut("tau").expect("tau exists");
            tau[[0, 0]] = tau[[0, 0]].min(max_tau);
            if !model.params.all_finite() {
                return Err(ZptError::Training {
                    epoch,
                    step,
                    message: "non-finite parameter after update".into(),
                });
            }
            log.push(PretrainLogEntry {
                epoch,
                step,
                l1: obj.tape.scalar(obj.terms.node_text),
                l2: obj.tape.scalar(obj.terms.summary_text),
                l3: obj.tape.scalar(obj.terms.node_summary),
                total,
                exp_tau: model.tau().exp(),
            });
            step += 1;
        }
    }
    Ok(PretrainOutcome { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_pair_has_zero_loss() {
        assert_eq!(symmetric_contrastive_loss(&array![[3.7]]).unwrap(), 0.0);
    }

    #[test]
    fn scaled_identity_loss_decreases_to_zero() {
        let mut prev = f64::INFINITY;
        for c in [0.5, 1.0, 2.0, 5.0, 10.0, 40.0] {
            let l = symmetric_contrastive_loss(&(Mat::eye(3) * c)).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-15);
    }

    #[test]
    fn two_by_two_worked_value() {
        // -ln(e^2 / (e^2 + 1))
        let l = symmetric_contrastive_loss(&array![[2.0, 0.0], [0.0, 2.0]]).unwrap();
        assert!((l - 0.126_928).abs() < 1e-6);
    }

    #[test]
    fn non_square_logits_are_rejected() {
        assert!(matches!(
            symmetric_contrastive_loss(&Mat::zeros((2, 3))),
            Err(ZptError::Contract(_))
        ));
    }

    #[test]
    fn transpose_symmetry() {
        let l = array![[0.3, -1.2, 2.0], [0.1, 0.4, -0.5], [1.5, 0.0, 0.9]];
        let a = symmetric_contrastive_loss(&l).unwrap();
        let b = symmetric_contrastive_loss(&l.t().to_owned()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn orthonormal_batches_closed_form() {
        let i = Mat::eye(2);
        let l = alignment_loss(&i, &i, &i, 0.0, 0.1).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((l.l1 - 0.313_262).abs() < 1e-6);
        assert!((l.l1 - expected).abs() < 1e-12);
        assert!((l.total - expected * 1.2).abs() < 1e-12);
    }

    #[test]
    fn alpha_zero_leaves_only_node_text_term() {
        let v = array![[1.0, 0.2], [0.3, -1.0], [0.5, 0.5]];
        let t = array![[0.9, 0.1], [0.2, -0.7], [-0.5, 0.4]];
        let s = array![[0.1, 1.0], [1.0, 0.0], [0.3, 0.3]];
        let l = alignment_loss(&v, &t, &s, 1.0, 0.0).unwrap();
        assert_eq!(l.total, l.l1);
    }

    #[test]
    fn zero_rows_are_a_domain_error() {
        let v = array![[0.0, 0.0], [1.0, 0.0]];
        let t = Mat::eye(2);
        assert!(matches!(
            alignment_loss(&v, &t, &t, 0.0, 0.1),
            Err(ZptError::NumericalDomain(_))
        ));
    }

    #[test]
    fn summaries_average_neighbor_texts() {
        let g = TextAttributedGraph::new(
            vec![0, 1, 2, 3],
            vec![(0, 1), (0, 2)],
            Mat::zeros((4, 1)),
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            None,
        )
        .unwrap();
        let t = array![[9.0, 9.0], [1.0, 0.0], [0.0, 1.0], [4.0, 2.0]];
        let s = summary_embeddings(&g, &t).unwrap();
        assert_eq!(s.row(0).to_vec(), vec![0.5, 0.5]);
        assert_eq!(s.row(1), t.row(0));
        assert_eq!(s.row(3), t.row(3));
    }

    #[test]
    fn config_validation() {
        let bad = PretrainConfig {
            batch_size: 1,
            ..PretrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = PretrainConfig {
            alpha: -1.0,
            ..PretrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(PretrainConfig::default().validate().is_ok());
    }
}
