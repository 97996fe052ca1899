//! Central-difference gradient oracle shared by the gradient tests and the
//! acceptance suite. Each check returns one relative error per tensor.

#![allow(dead_code)]

use rand_distr::{Distribution, Normal};
use zpt_core::encoders::{GraphEncoderConfig, PretrainedModel, TextEncoderConfig, Vocabulary, EMBED_DIM};
use zpt_core::params::ParamSet;
use zpt_core::pretrain::{alignment_loss, alignment_loss_with_grads, batch_objective, PretrainContext};
use zpt_core::promptkit::{init_prompt, tuning_loss_with_grad, TuningSet};
use zpt_core::rng;
use zpt_core::tagcore::{generate_synthetic_tag, SyntheticTagSpec, TextAttributedGraph};
use zpt_core::tensor::Mat;
use zpt_core::ubcg::{ubcg_loss, ubcg_loss_with_grads, UbcgConfig, UbcgModel};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub type TensorErrors = Vec<(String, f64)>;

pub fn rel_err(analytic: &Mat, numeric: &Mat) -> f64 {
    let norm = |m: &Mat| m.mapv(|x| x * x).sum().sqrt();
    let diff = norm(&(analytic - numeric));
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` over every entry of every tensor in `params`.
pub fn numeric_grads(params: &ParamSet, mut f: impl FnMut(&ParamSet) -> f64) -> Vec<(String, Mat)> {
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    names
        .into_iter()
        .map(|name| {
            let mut g = Mat::zeros(params.get(&name).unwrap().raw_dim());
            for i in 0..g.len() {
                let base = work.get(&name).unwrap().as_slice().unwrap()[i];
                let mut at = |x: f64, work: &mut ParamSet| {
                    work.get_mut(&name).unwrap().as_slice_mut().unwrap()[i] = x;
                    f(work)
                };
                let d = (at(base + H, &mut work) - at(base - H, &mut work)) / (2.0 * H);
                work.get_mut(&name).unwrap().as_slice_mut().unwrap()[i] = base;
                g.as_slice_mut().unwrap()[i] = d;
            }
            (name, g)
        })
        .collect()
}

fn compare(analytic: &[Mat], numeric: &[(String, Mat)]) -> TensorErrors {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, (name, n))| (name.clone(), rel_err(a, n)))
        .collect()
}

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut r = rng::stream(seed, "grad-check", 0);
    let n = Normal::new(0.0, 1.0).unwrap();
    Mat::from_shape_simple_fn((rows, cols), || n.sample(&mut r))
}

/// Moves every tensor off its initial constants so gains, biases and
/// zero-initialized blocks get generic gradients.
fn jitter(params: &mut ParamSet, scale: f64, seed: u64) {
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for (k, name) in names.iter().enumerate() {
        let p = params.get_mut(name).unwrap();
        *p += &(gaussian(p.nrows(), p.ncols(), seed + k as u64) * scale);
    }
}

pub fn micro_graph() -> TextAttributedGraph {
    generate_synthetic_tag(&SyntheticTagSpec {
        num_classes: 2,
        nodes_per_class: 3,
        text_len: 4,
        intra_edge_prob: 0.7,
        inter_edge_prob: 0.2,
        feature_dim: 5,
        seed: 11,
        ..SyntheticTagSpec::default()
    })
    .unwrap()
}

pub fn micro_model(graph: &TextAttributedGraph) -> PretrainedModel {
    let text = TextEncoderConfig {
        layers: 1,
        width: 8,
        heads: 2,
        max_seq_len: 8,
        output_dim: EMBED_DIM,
        ffn_dim: 8,
    };
    let gcn = GraphEncoderConfig {
        layers: 2,
        hidden_dim: 6,
        leaky_slope: 0.01,
    };
    let vocab = Vocabulary::build(graph.texts(), 64);
    let mut model = PretrainedModel::init(vocab, text, gcn, graph.feature_dim(), 0.3, 5).unwrap();
    jitter(&mut model.params, 0.05, 100);
    model
}

/// Alignment loss with respect to `V`, `T`, `S` and `τ`.
pub fn alignment_errors() -> TensorErrors {
    let (v, t, s) = (gaussian(5, 6, 1), gaussian(5, 6, 2), gaussian(5, 6, 3));
    let (tau, alpha) = (0.4, 0.3);
    let (_, grads) = alignment_loss_with_grads(&v, &t, &s, tau, alpha).unwrap();
    let mut params = ParamSet::new();
    params.insert("V", v);
    params.insert("T", t);
    params.insert("S", s);
    params.insert("tau", Mat::from_elem((1, 1), tau));
    let numeric = numeric_grads(&params, |p| {
        let g = |n: &str| p.get(n).unwrap();
        alignment_loss(g("V"), g("T"), g("S"), g("tau")[[0, 0]], alpha).unwrap().total
    });
    compare(&grads, &numeric)
}

/// Full pre-training objective on a 4-node batch, all encoder tensors.
pub fn pretrain_errors() -> TensorErrors {
    let graph = micro_graph();
    let model = micro_model(&graph);
    let ctx = PretrainContext::new(&graph, &model);
    let batch = [0, 2, 3, 5];
    let alpha = 0.5;
    let obj = batch_objective(&model, &ctx, &batch, alpha).unwrap();
    let g = obj.tape.backward(obj.terms.total);
    let analytic = obj.bound.grads(&model.params, &g);
    let mut probe = model.clone();
    let numeric = numeric_grads(&model.params, |p| {
        probe.params = p.clone();
        let o = batch_objective(&probe, &ctx, &batch, alpha).unwrap();
        o.tape.scalar(o.terms.total)
    });
    compare(&analytic, &numeric)
}

pub fn micro_ubcg(bimodal: bool) -> UbcgModel {
    let mut model = UbcgModel::new(UbcgConfig {
        input_dim: 6,
        cond_dim: 6,
        enc_hidden: vec![5, 4],
        dec_hidden: vec![5],
        latent_dim: 3,
        seed: 2,
        bimodal,
        ..UbcgConfig::default()
    })
    .unwrap();
    jitter(&mut model.params, 0.1, 200);
    model
}

/// Generator loss of one pair, every encoder and decoder tensor.
pub fn ubcg_errors(bimodal: bool) -> TensorErrors {
    let model = micro_ubcg(bimodal);
    let row = |seed, n| gaussian(1, n, seed).into_raw_vec_and_offset().0;
    let (v, t, ev, et) = (row(7, 6), row(8, 6), row(9, 3), row(10, 3));
    let (_, analytic) = ubcg_loss_with_grads(&v, &t, &model, &ev, &et).unwrap();
    let mut probe = model.clone();
    let numeric = numeric_grads(&model.params, |p| {
        probe.params = p.clone();
        ubcg_loss(&v, &t, &probe, &ev, &et).unwrap().total()
    });
    compare(&analytic, &numeric)
}

/// Prompt-tuning cross-entropy with respect to the context vectors on a
/// 2-class task.
pub fn tuning_errors(lambda: f64) -> TensorErrors {
    let graph = micro_graph();
    let model = micro_model(&graph);
    let mut prompt = init_prompt(&graph.class_names(), 2, &model, 4).unwrap();
    prompt.context = gaussian(2, model.text_config.width, 12) * 0.5;
    let set = TuningSet {
        nodes: gaussian(6, EMBED_DIM, 13),
        texts: Some(gaussian(6, EMBED_DIM, 14)),
        labels: vec![0, 1, 0, 1, 1, 0],
    };
    let (_, analytic) = tuning_loss_with_grad(&prompt, &model, &set, lambda).unwrap();
    let mut params = ParamSet::new();
    params.insert("prompt.context", prompt.context.clone());
    let mut probe = prompt.clone();
    let numeric = numeric_grads(&params, |p| {
        probe.context = p.get("prompt.context").unwrap().clone();
        tuning_loss_with_grad(&probe, &model, &set, lambda).unwrap().0
    });
    compare(&[analytic], &numeric)
}

pub fn worst(errors: &TensorErrors) -> (String, f64) {
    errors
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a })
}
