use proptest::prelude::*;
use rand_distr::{Distribution, Normal};
use zpt_core::encoders::{GraphEncoderConfig, PretrainedModel, TextEncoderConfig, Vocabulary, EMBED_DIM};
use zpt_core::promptkit::{
    class_weights, classify, discrete_class_weights, hybrid_probability, init_prompt, tune_prompt, HybridConfig,
    TuningSet,
};
use zpt_core::rng;
use zpt_core::tensor::Mat;

const NAMES: [&str; 5] = ["theory", "learning", "genetics", "robotics", "databases"];

fn model() -> PretrainedModel {
    let texts = ["theory learning genetics robotics databases a paper of"];
    let vocab = Vocabulary::build(&texts, 100);
    PretrainedModel::init(vocab, TextEncoderConfig::default(), GraphEncoderConfig::default(), 4, 0.0, 8).unwrap()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn cosines(w: &Mat, x: &[f64]) -> Vec<f64> {
    let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    w.rows()
        .into_iter()
        .map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / (r.dot(&r).sqrt() * nx))
        .collect()
}

fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, len).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn weights(n: usize, d: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(vec_strategy(d), n)
        .prop_map(move |rows| Mat::from_shape_vec((n, d), rows.concat()).unwrap())
}

fn draw() -> impl Strategy<Value = (Mat, Vec<f64>, Vec<f64>)> {
    (2usize..7, 2usize..9).prop_flat_map(|(n, d)| (weights(n, d), vec_strategy(d), vec_strategy(d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn hybrid_probabilities_form_a_distribution((w, v, t) in draw(), lambda in 0.0f64..=1.0) {
        let p = hybrid_probability(&w, &v, &t, lambda).unwrap();
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn hybrid_is_the_convex_mix_of_its_endpoints((w, v, t) in draw()) {
        let node = softmax(&cosines(&w, &v));
        let text = softmax(&cosines(&w, &t));
        for lambda in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let p = hybrid_probability(&w, &v, &t, lambda).unwrap();
            for (k, &pk) in p.iter().enumerate() {
                let want = lambda * node[k] + (1.0 - lambda) * text[k];
                prop_assert!((pk - want).abs() < 1e-12, "lambda {} class {}", lambda, k);
            }
        }
    }

    #[test]
    fn classification_ignores_positive_scaling(
        (w, v, t) in draw(),
        lambda in 0.0f64..=1.0,
        sv in 0.01f64..100.0,
        st in 0.01f64..100.0,
        sw in 0.01f64..100.0,
    ) {
        let base = classify(&w, &v, &t, lambda).unwrap();
        let v2: Vec<f64> = v.iter().map(|x| x * sv).collect();
        let t2: Vec<f64> = t.iter().map(|x| x * st).collect();
        let mut w2 = w.clone();
        w2.row_mut(0).mapv_inplace(|x| x * sw);
        let p = hybrid_probability(&w, &v, &t, lambda).unwrap();
        let mut sorted = p.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        // near-ties may flip under rounding
        prop_assume!(sorted[0] - sorted[1] > 1e-9);
        prop_assert_eq!(classify(&w, &v2, &t2, lambda).unwrap(), base);
        prop_assert_eq!(classify(&w2, &v, &t, lambda).unwrap(), base);
    }
}

#[test]
fn empty_context_reproduces_the_text_path() {
    let m = model();
    let prompt = init_prompt(&NAMES, 0, &m, 1).unwrap();
    let w = class_weights(&prompt, &m).unwrap();
    let reference = m.encode_text(&NAMES).unwrap();
    let bare = discrete_class_weights("{class name}", &NAMES, &m).unwrap();
    for (a, b) in w.iter().zip(reference.iter()) {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
    }
    assert_eq!(reference, bare);
}

#[test]
fn prompt_init_is_seeded_and_per_class() {
    let m = model();
    let a = init_prompt(&NAMES, 4, &m, 3).unwrap();
    assert_eq!(a.class_tokens.len(), 5);
    assert_eq!(a.context.dim(), (4, m.text_config.width));
    assert_eq!(a, init_prompt(&NAMES, 4, &m, 3).unwrap());
    assert_ne!(a.context, init_prompt(&NAMES, 4, &m, 4).unwrap().context);
}

fn separable_set(model: &PretrainedModel) -> TuningSet {
    // samples cluster around the untuned class weights, with shared noise
    let w = discrete_class_weights("{class name}", &NAMES[..3], model).unwrap();
    let mut r = rng::stream(6, "tuning-set", 0);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let per = 40;
    let mut nodes = Mat::zeros((3 * per, EMBED_DIM));
    let mut labels = Vec::new();
    for c in 0..3 {
        let norm = w.row(c).dot(&w.row(c)).sqrt();
        for i in 0..per {
            let mut row = nodes.row_mut(c * per + i);
            row.assign(&(&w.row(c) / norm));
            row.mapv_inplace(|x| x + noise.sample(&mut r));
            labels.push(c);
        }
    }
    TuningSet {
        texts: Some(nodes.clone()),
        nodes,
        labels,
    }
}

#[test]
fn tuning_lowers_the_loss_and_touches_only_the_context() {
    let m = model();
    let before = m.clone();
    let prompt = init_prompt(&NAMES[..3], 4, &m, 2).unwrap();
    let set = separable_set(&m);
    let config = HybridConfig {
        epochs: 5,
        ..HybridConfig::default()
    };
    let out = tune_prompt(&prompt, &set, &m, &config).unwrap();
    assert!(out.epoch_losses.last() < out.epoch_losses.first(), "{:?}", out.epoch_losses);
    assert_eq!(m, before);
    assert_eq!(out.prompt.class_tokens, prompt.class_tokens);
    assert_eq!(out.prompt.class_names, prompt.class_names);
    assert_ne!(out.prompt.context, prompt.context);
    let again = tune_prompt(&prompt, &set, &m, &config).unwrap();
    assert_eq!(again.prompt, out.prompt);
}

#[test]
fn classes_without_samples_are_rejected() {
    let m = model();
    let prompt = init_prompt(&NAMES[..3], 2, &m, 2).unwrap();
    let mut set = separable_set(&m);
    set.labels.iter_mut().for_each(|y| *y = (*y).min(1));
    assert!(tune_prompt(&prompt, &set, &m, &HybridConfig::default()).is_err());
}
