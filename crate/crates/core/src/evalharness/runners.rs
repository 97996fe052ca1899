//! ZPT and the baseline/ablation runners, one task at a time.

use std::rc::Rc;

use ndarray::{concatenate, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{TaskMetrics, ZeroShotTask};
use crate::encoders::{l2_normalize, PretrainedModel};
use crate::error::{Result, ZptError};
use crate::optim::Adam;
use crate::par;
use crate::params::ParamSet;
use crate::promptkit::{
    class_weights, classify_batch, discrete_class_weights, init_prompt, instantiate, tune_prompt,
    ContinuousPrompt, HybridConfig, TuningSet, CLASS_SLOT,
};
use crate::rng;
use crate::tagcore::TextAttributedGraph;
use crate::tensor::{Mat, Tape};
use crate::ubcg::{generate_class_samples, SyntheticSamples, UbcgModel};

/// Frozen-encoder embeddings of every node, in graph row order.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphEmbeddings {
    pub nodes: Mat,
    pub texts: Mat,
}

impl GraphEmbeddings {
    pub fn compute(model: &PretrainedModel, graph: &TextAttributedGraph) -> Result<Self> {
        Ok(Self {
            nodes: model.encode_nodes(graph)?,
            texts: model.encode_text(graph.texts())?,
        })
    }

    pub fn select(&self, rows: &[usize]) -> (Mat, Mat) {
        (self.nodes.select(Axis(0), rows), self.texts.select(Axis(0), rows))
    }
}

/// Settings of the ZPT runner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZptConfig {
    pub samples_per_class: usize,
    /// Number of learnable context vectors `M`.
    pub context_len: usize,
    /// Context words wrapped around each class name for both the generator
    /// condition and the prompt's class tokens. `None` uses bare names.
    pub context_template: Option<String>,
    pub hybrid: HybridConfig,
}

impl Default for ZptConfig {
    fn default() -> Self {
        Self {
            samples_per_class: 200,
            context_len: 4,
            context_template: None,
            hybrid: HybridConfig::default(),
        }
    }
}

impl ZptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_class == 0 {
            return Err(ZptError::config("zpt.samples_per_class", "must be at least 1"));
        }
        if let Some(t) = &self.context_template {
            instantiate(t, "x")?;
        }
        self.hybrid.validate()
    }

    /// Class descriptions for `names` under the configured context words.
    pub fn class_texts(&self, names: &[String]) -> Result<Vec<String>> {
        match &self.context_template {
            Some(t) => names.iter().map(|n| instantiate(t, n)).collect(),
            None => Ok(names.to_vec()),
        }
    }
}

/// Outcome of one ZPT task run.
#[derive(Clone, Debug)]
pub struct ZptRun {
    pub metrics: TaskMetrics,
    pub predictions: Vec<usize>,
    pub prompt: ContinuousPrompt,
    pub tune_losses: Vec<f64>,
}

/// Condition embeddings of `class_texts` and `count` generated pairs per
/// class. Each class draws from its own stream keyed by its index.
pub fn generate_task_samples(
    model: &PretrainedModel,
    ubcg: &UbcgModel,
    class_texts: &[String],
    count: usize,
    seed: u64,
) -> Result<(Mat, Vec<SyntheticSamples>)> {
    let cond = model.encode_text(class_texts)?;
    let samples = par::map_indexed(class_texts.len(), |c| {
        let row = cond.row(c).to_vec();
        generate_class_samples(&row, count, ubcg, rng::derive_seed(seed, "class-samples", c as u64))
    });
    let samples = samples.into_iter().collect::<Result<Vec<_>>>()?;
    Ok((cond, samples))
}

/// Stacks per-class samples into one labeled set.
pub fn stack_samples(samples: &[SyntheticSamples], with_texts: bool) -> TuningSet {
    let nodes: Vec<_> = samples.iter().map(|s| s.nodes.view()).collect();
    let texts: Vec<_> = samples.iter().map(|s| s.texts.view()).collect();
    let labels = samples
        .iter()
        .enumerate()
        .flat_map(|(c, s)| std::iter::repeat(c).take(s.len()))
        .collect();
    TuningSet {
        nodes: concatenate(Axis(0), &nodes).expect("equal widths"),
        texts: with_texts.then(|| concatenate(Axis(0), &texts).expect("equal widths")),
        labels,
    }
}

fn tuning_config(hybrid: &HybridConfig, seed: u64, lambda: f64) -> HybridConfig {
    HybridConfig {
        lambda,
        seed: rng::derive_seed(seed, "tune", 0),
        ..hybrid.clone()
    }
}

/// Full ZPT on one task: condition the generator on class-name embeddings,
/// tune the prompt on the generated pairs, classify the queries.
pub fn run_zpt(
    graph: &TextAttributedGraph,
    emb: &GraphEmbeddings,
    model: &PretrainedModel,
    ubcg: &UbcgModel,
    task: &ZeroShotTask,
    config: &ZptConfig,
    seed: u64,
) -> Result<ZptRun> {
    config.validate()?;
    let texts = config.class_texts(&task.class_names)?;
    let (_, samples) = generate_task_samples(model, ubcg, &texts, config.samples_per_class, seed)?;
    let set = stack_samples(&samples, true);
    let prompt = init_prompt(&texts, config.context_len, model, rng::derive_seed(seed, "prompt", 0))?;
    let hybrid = tuning_config(&config.hybrid, seed, config.hybrid.lambda);
    let tuned = tune_prompt(&prompt, &set, model, &hybrid)?;
    let w = class_weights(&tuned.prompt, model)?;
    let (v, t) = emb.select(&task.query_rows(graph)?);
    let predictions = classify_batch(&w, &v, &t, config.hybrid.lambda)?;
    Ok(ZptRun {
        metrics: TaskMetrics::score(&predictions, &task.truth, task.num_classes())?,
        predictions,
        prompt: tuned.prompt,
        tune_losses: tuned.epoch_losses,
    })
}

/// Zero-shot classification with a handcrafted template, no tuning.
pub fn run_discrete(
    graph: &TextAttributedGraph,
    emb: &GraphEmbeddings,
    model: &PretrainedModel,
    task: &ZeroShotTask,
    template: &str,
    lambda: f64,
) -> Result<TaskMetrics> {
    let w = discrete_class_weights(template, &task.class_names, model)?;
    let (v, t) = emb.select(&task.query_rows(graph)?);
    let preds = classify_batch(&w, &v, &t, lambda)?;
    TaskMetrics::score(&preds, &task.truth, task.num_classes())
}

/// ZPT with a generator trained on the node direction only: generated node
/// embeddings alone drive tuning and inference (`λ = 1`).
pub fn run_node_only_ablation(
    graph: &TextAttributedGraph,
    emb: &GraphEmbeddings,
    model: &PretrainedModel,
    ubcg: &UbcgModel,
    task: &ZeroShotTask,
    config: &ZptConfig,
    seed: u64,
) -> Result<ZptRun> {
    config.validate()?;
    if ubcg.config.bimodal {
        return Err(ZptError::Contract(
            "node-only ablation needs a generator trained without the text direction".into(),
        ));
    }
    let texts = config.class_texts(&task.class_names)?;
    let (_, samples) = generate_task_samples(model, ubcg, &texts, config.samples_per_class, seed)?;
    let set = stack_samples(&samples, false);
    let prompt = init_prompt(&texts, config.context_len, model, rng::derive_seed(seed, "prompt", 0))?;
    let hybrid = tuning_config(&config.hybrid, seed, 1.0);
    let tuned = tune_prompt(&prompt, &set, model, &hybrid)?;
    let w = class_weights(&tuned.prompt, model)?;
    let (v, t) = emb.select(&task.query_rows(graph)?);
    let predictions = classify_batch(&w, &v, &t, 1.0)?;
    Ok(ZptRun {
        metrics: TaskMetrics::score(&predictions, &task.truth, task.num_classes())?,
        predictions,
        prompt: tuned.prompt,
        tune_losses: tuned.epoch_losses,
    })
}

/// Settings of the linear softmax baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimpleClassifierConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for SimpleClassifierConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            epochs: 20,
            batch_size: 64,
        }
    }
}

/// Linear softmax classifier `x·W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    pub weights: Mat,
    pub bias: Mat,
}

impl LinearClassifier {
    /// Fits by minibatch Adam on mean cross-entropy, starting from zero.
    pub fn fit(
        x: &Mat,
        labels: &[usize],
        num_classes: usize,
        config: &SimpleClassifierConfig,
        seed: u64,
    ) -> Result<Self> {
        if x.nrows() != labels.len() || labels.is_empty() {
            return Err(ZptError::Contract("classifier inputs are not aligned".into()));
        }
        if config.epochs == 0 || config.batch_size == 0 || !(config.learning_rate > 0.0) {
            return Err(ZptError::config("simple", "epochs, batch_size and learning_rate must be positive"));
        }
        let mut params = ParamSet::new();
        params.insert("w", Mat::zeros((x.ncols(), num_classes)));
        params.insert("b", Mat::zeros((1, num_classes)));
        let mut opt = Adam::new(config.learning_rate);
        let mut order: Vec<usize> = (0..labels.len()).collect();
        for epoch in 0..config.epochs {
            let mut r = rng::stream(seed, "simple-batches", epoch as u64);
            order.shuffle(&mut r);
            for batch in order.chunks(config.batch_size) {
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape, true);
                let xb = tape.constant(x.select(Axis(0), batch));
                let logits = tape.matmul(xb, bound.var("w"));
                let logits = tape.add_row(logits, bound.var("b"));
                let targets = Rc::new(batch.iter().map(|&i| labels[i]).collect());
                let loss = tape.cross_entropy(logits, targets);
                let grads = tape.backward(loss);
                let g = bound.grads(&params, &grads);
                opt.step(&mut params, &g);
            }
        }
        Ok(Self {
            weights: params.get("w")?.clone(),
            bias: params.get("b")?.clone(),
        })
    }

    pub fn predict(&self, x: &Mat) -> Vec<usize> {
        let logits = x.dot(&self.weights) + &self.bias;
        logits
            .rows()
            .into_iter()
            .map(|r| crate::promptkit::argmax(&r.to_vec()))
            .collect()
    }
}

/// `[v/‖v‖, t/‖t‖]` per row.
pub fn joint_features(v: &Mat, t: &Mat) -> Result<Mat> {
    let v = l2_normalize(v)?;
    let t = l2_normalize(t)?;
    Ok(concatenate(Axis(1), &[v.view(), t.view()]).expect("equal rows"))
}

/// Linear classifier trained directly on generated pairs and applied to the
/// real query pairs.
pub fn run_simple_classifier(
    graph: &TextAttributedGraph,
    emb: &GraphEmbeddings,
    samples: &TuningSet,
    task: &ZeroShotTask,
    config: &SimpleClassifierConfig,
    seed: u64,
) -> Result<TaskMetrics> {
    let texts = samples
        .texts
        .as_ref()
        .ok_or_else(|| ZptError::Contract("simple classifier needs generated text embeddings".into()))?;
    let x = joint_features(&samples.nodes, texts)?;
    let clf = LinearClassifier::fit(&x, &samples.labels, task.num_classes(), config, seed)?;
    let (v, t) = emb.select(&task.query_rows(graph)?);
    let preds = clf.predict(&joint_features(&v, &t)?);
    TaskMetrics::score(&preds, &task.truth, task.num_classes())
}

/// Settings of the pseudo-label tuning baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoLabelConfig {
    /// Discrete template used to pseudo-label the graph.
    pub template: String,
    pub max_per_class: usize,
    pub context_len: usize,
    pub hybrid: HybridConfig,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            template: "a paper of {class name}".into(),
            max_per_class: 200,
            context_len: 4,
            hybrid: HybridConfig {
                learning_rate: 2e-5,
                epochs: 1,
                ..HybridConfig::default()
            },
        }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<()> {
        instantiate(&self.template, "x")
            .map_err(|_| ZptError::config("pseudo.template", format!("must contain {CLASS_SLOT} once")))?;
        if self.max_per_class == 0 {
            return Err(ZptError::config("pseudo.max_per_class", "must be at least 1"));
        }
        self.hybrid.validate()
    }
}

/// Outcome of one pseudo-label run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoRun {
    pub metrics: TaskMetrics,
    /// Pseudo-labeled nodes used per class.
    pub used_per_class: Vec<usize>,
    /// True when some class had no pseudo-labeled node and the untuned
    /// discrete weights were used instead.
    pub fell_back: bool,
}

/// Labels every graph node with the discrete zero-shot classifier, tunes the
/// prompt on up to `max_per_class` real nodes per pseudo-class, and
/// classifies the queries.
pub fn run_pseudo_label(
    graph: &TextAttributedGraph,
    emb: &GraphEmbeddings,
    model: &PretrainedModel,
    task: &ZeroShotTask,
    config: &PseudoLabelConfig,
    seed: u64,
) -> Result<PseudoRun> {
    config.validate()?;
    let n = task.num_classes();
    let lambda = config.hybrid.lambda;
    let w_discrete = discrete_class_weights(&config.template, &task.class_names, model)?;
    let pseudo = classify_batch(&w_discrete, &emb.nodes, &emb.texts, lambda)?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (row, &c) in pseudo.iter().enumerate() {
        by_class[c].push(row);
    }
    let mut r = rng::stream(seed, "pseudo-sample", 0);
    let chosen: Vec<Vec<usize>> = by_class
        .iter()
        .map(|rows| {
            let mut pick: Vec<usize> = rows.choose_multiple(&mut r, config.max_per_class).copied().collect();
            pick.sort_unstable();
            pick
        })
        .collect();
    let used_per_class: Vec<usize> = chosen.iter().map(Vec::len).collect();
    let (v, t) = emb.select(&task.query_rows(graph)?);
    let fell_back = used_per_class.contains(&0);
    let w = if fell_back {
        w_discrete
    } else {
        let rows: Vec<usize> = chosen.concat();
        let labels = chosen
            .iter()
            .enumerate()
            .flat_map(|(c, rows)| std::iter::repeat(c).take(rows.len()))
            .collect();
        let (sv, st) = emb.select(&rows);
        let set = TuningSet {
            nodes: sv,
            texts: Some(st),
            labels,
        };
        let prompt = init_prompt(&task.class_names, config.context_len, model, rng::derive_seed(seed, "prompt", 0))?;
        let hybrid = tuning_config(&config.hybrid, seed, lambda);
        class_weights(&tune_prompt(&prompt, &set, model, &hybrid)?.prompt, model)?
    };
    let preds = classify_batch(&w, &v, &t, lambda)?;
    Ok(PseudoRun {
        metrics: TaskMetrics::score(&preds, &task.truth, n)?,
        used_per_class,
        fell_back,
    })
}
