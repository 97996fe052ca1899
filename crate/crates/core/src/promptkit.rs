//! Class weights from discrete and continuous prompts, the hybrid
//! node/text class probability, prompt tuning and classification.

use std::rc::Rc;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoders::vocab::{BOS, EOS, PAD};
use crate::encoders::{cosine_similarity_matrix, l2_normalize, text, PretrainedModel, Slot};
use crate::error::{Result, ZptError};
use crate::optim::Adam;
use crate::params::ParamSet;
use crate::rng;
use crate::tensor::{softmax_rows, Mat, Tape, Var};

/// Placeholder substituted by the class name in prompt templates.
pub const CLASS_SLOT: &str = "{class name}";

/// Discrete prompt templates compared by the template sweep.
pub const TEMPLATES: [&str; 6] = [
    "{class name}",
    "a {class name}",
    "an {class name}",
    "a paper of {class name}",
    "a research of {class name}",
    "a research paper of {class name}",
];

/// Tuning and inference settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HybridConfig {
    /// Weight of the node-embedding term; `1 - lambda` weighs the text term.
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            learning_rate: 1e-2,
            epochs: 10,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl HybridConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ZptError::config("hybrid.learning_rate", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(ZptError::config("hybrid.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(ZptError::config("hybrid.batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(ZptError::config("hybrid.lambda", format!("{lambda} is outside [0, 1]")));
    }
    Ok(())
}

/// Substitutes `name` into `template`, which must contain [`CLASS_SLOT`]
/// exactly once.
pub fn instantiate(template: &str, name: &str) -> Result<String> {
    match template.matches(CLASS_SLOT).count() {
        1 => Ok(template.replace(CLASS_SLOT, name)),
        n => Err(ZptError::config(
            "template",
            format!("`{template}` must contain `{CLASS_SLOT}` exactly once, found {n}"),
        )),
    }
}

/// Shared learnable context vectors followed by each class's frozen
/// class-name tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousPrompt {
    /// `M × width` context vectors.
    pub context: Mat,
    /// Token ids of each class description, without BOS/EOS.
    pub class_tokens: Vec<Vec<usize>>,
    pub class_names: Vec<String>,
}

impl ContinuousPrompt {
    pub fn context_len(&self) -> usize {
        self.context.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.class_tokens.len()
    }

    /// `[BOS, ctx_1..ctx_M, class tokens.., EOS]` per class, padded to a
    /// common length.
    fn sequences(&self) -> Vec<Vec<Slot>> {
        let m = self.context_len();
        let len = self.class_tokens.iter().map(Vec::len).max().unwrap_or(0) + m + 2;
        self.class_tokens
            .iter()
            .map(|toks| {
                let mut s = Vec::with_capacity(len);
                s.push(Slot::Token(BOS));
                s.extend((0..m).map(Slot::Context));
                s.extend(toks.iter().copied().map(Slot::Token));
                s.push(Slot::Token(EOS));
                s.resize(len, Slot::Token(PAD));
                s
            })
            .collect()
    }
}

/// Builds a prompt for `class_texts` (bare class names, or class names
/// already wrapped in context words) with `m` context vectors drawn from
/// `N(0, 0.02²)`.
pub fn init_prompt<S: AsRef<str>>(
    class_texts: &[S],
    m: usize,
    model: &PretrainedModel,
    seed: u64,
) -> Result<ContinuousPrompt> {
    if class_texts.is_empty() {
        return Err(ZptError::config("class_names", "at least one class is required"));
    }
    let budget = model.text_config.max_seq_len.saturating_sub(2);
    let mut class_tokens = Vec::with_capacity(class_texts.len());
    for name in class_texts {
        let toks = model.vocab.word_ids(name.as_ref());
        if toks.is_empty() {
            return Err(ZptError::config("class_names", "class name has no tokens"));
        }
        if m + toks.len() > budget {
            return Err(ZptError::config(
                "prompt.context_len",
                format!(
                    "{m} context vectors plus {} tokens of `{}` exceed the budget of {budget}",
                    toks.len(),
                    name.as_ref()
                ),
            ));
        }
        class_tokens.push(toks);
    }
    let width = model.text_config.width;
    let mut r = rng::stream(seed, "prompt-context", 0);
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let context = Mat::from_shape_simple_fn((m, width), || normal.sample(&mut r));
    Ok(ContinuousPrompt {
        context,
        class_tokens,
        class_names: class_texts.iter().map(|s| s.as_ref().to_owned()).collect(),
    })
}

/// `N × 128` class weights, one encoder pass per class prompt.
pub fn class_weights(prompt: &ContinuousPrompt, model: &PretrainedModel) -> Result<Mat> {
    check_prompt(prompt, model)?;
    model.encode_slots(Some(&prompt.context), &prompt.sequences())
}

fn check_prompt(prompt: &ContinuousPrompt, model: &PretrainedModel) -> Result<()> {
    if prompt.context.ncols() != model.text_config.width {
        return Err(ZptError::Contract(format!(
            "context width {} does not match encoder width {}",
            prompt.context.ncols(),
            model.text_config.width
        )));
    }
    if prompt.context.iter().any(|v| !v.is_finite()) {
        return Err(ZptError::NumericalDomain("non-finite context vector".into()));
    }
    let budget = model.text_config.max_seq_len.saturating_sub(2);
    if prompt.class_tokens.iter().any(|t| t.len() + prompt.context_len() > budget) {
        return Err(ZptError::config("prompt.context_len", "prompt exceeds the length budget"));
    }
    Ok(())
}

/// Class weights as a differentiable function of the context vectors.
fn class_weights_on_tape(
    prompt: &ContinuousPrompt,
    model: &PretrainedModel,
    tape: &mut Tape,
    context: Var,
) -> Result<Var> {
    let bound = model.params.bind(tape, false);
    text::forward(
        &model.text_config,
        tape,
        &bound,
        model.vocab.len(),
        Some(context),
        &prompt.sequences(),
    )
}

/// `w_y = encode_text(template with class name y)`.
pub fn discrete_class_weights<S: AsRef<str>>(
    template: &str,
    class_names: &[S],
    model: &PretrainedModel,
) -> Result<Mat> {
    let texts: Vec<String> = class_names
        .iter()
        .map(|n| instantiate(template, n.as_ref()))
        .collect::<Result<_>>()?;
    model.encode_text(&texts)
}

/// Row-wise `λ·softmax(cos(W, v)) + (1-λ)·softmax(cos(W, t))` for a batch
/// of query pairs.
pub fn hybrid_probabilities(w: &Mat, v: &Mat, t: &Mat, lambda: f64) -> Result<Mat> {
    check_lambda(lambda)?;
    if v.dim() != t.dim() {
        return Err(ZptError::Contract("node and text batches must be aligned".into()));
    }
    let pn = softmax_rows(&cosine_similarity_matrix(v, w)?);
    let pt = softmax_rows(&cosine_similarity_matrix(t, w)?);
    Ok(pn * lambda + pt * (1.0 - lambda))
}

/// Hybrid class probabilities for one `(v, t)` pair.
pub fn hybrid_probability(w: &Mat, v: &[f64], t: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let v = Mat::from_shape_vec((1, v.len()), v.to_vec())
        .map_err(|e| ZptError::Contract(e.to_string()))?;
    let t = Mat::from_shape_vec((1, t.len()), t.to_vec())
        .map_err(|e| ZptError::Contract(e.to_string()))?;
    Ok(hybrid_probabilities(w, &v, &t, lambda)?.row(0).to_vec())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

pub fn classify(w: &Mat, v: &[f64], t: &[f64], lambda: f64) -> Result<usize> {
    Ok(argmax(&hybrid_probability(w, v, t, lambda)?))
}

/// Predicted class per query row.
pub fn classify_batch(w: &Mat, v: &Mat, t: &Mat, lambda: f64) -> Result<Vec<usize>> {
    let p = hybrid_probabilities(w, v, t, lambda)?;
    Ok(p.rows().into_iter().map(|r| argmax(r.as_slice().expect("standard layout"))).collect())
}

/// Labeled `(v, t)` pairs used to tune a prompt. `texts` may be absent when
/// only the node term is used (`lambda = 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct TuningSet {
    pub nodes: Mat,
    pub texts: Option<Mat>,
    pub labels: Vec<usize>,
}

impl TuningSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check(&self, num_classes: usize, lambda: f64) -> Result<()> {
        if self.nodes.nrows() != self.labels.len()
            || self.texts.as_ref().is_some_and(|t| t.dim() != self.nodes.dim())
        {
            return Err(ZptError::Contract("tuning set rows are not aligned".into()));
        }
        if self.texts.is_none() && lambda != 1.0 {
            return Err(ZptError::config(
                "hybrid.lambda",
                "a node-only tuning set requires lambda = 1",
            ));
        }
        let mut counts = vec![0usize; num_classes];
        for &y in &self.labels {
            if y >= num_classes {
                return Err(ZptError::Contract(format!("label {y} outside {num_classes} classes")));
            }
            counts[y] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(ZptError::config("samples", format!("class {c} has no samples")));
        }
        Ok(())
    }
}

/// Mean cross-entropy of the hybrid probability over a batch, built on
/// `tape` as a function of `context`. Node and text rows must already be
/// unit-normalized.
pub fn tuning_loss_on_tape(
    prompt: &ContinuousPrompt,
    model: &PretrainedModel,
    tape: &mut Tape,
    context: Var,
    nodes_unit: &Mat,
    texts_unit: Option<&Mat>,
    labels: Rc<Vec<usize>>,
    lambda: f64,
) -> Result<Var> {
    let w = class_weights_on_tape(prompt, model, tape, context)?;
    let wn = tape.l2_normalize_rows(w);
    let v = tape.constant(nodes_unit.clone());
    let node_logits = tape.matmul_t(v, wn);
    let text_logits = match texts_unit {
        Some(t) => {
            let t = tape.constant(t.clone());
            tape.matmul_t(t, wn)
        }
        None => node_logits,
    };
    Ok(tape.hybrid_nll(node_logits, text_logits, lambda, labels))
}

/// Tuning loss and its gradient with respect to the context vectors.
pub fn tuning_loss_with_grad(
    prompt: &ContinuousPrompt,
    model: &PretrainedModel,
    set: &TuningSet,
    lambda: f64,
) -> Result<(f64, Mat)> {
    check_prompt(prompt, model)?;
    check_lambda(lambda)?;
    set.check(prompt.num_classes(), lambda)?;
    let nodes = l2_normalize(&set.nodes)?;
    let texts = set.texts.as_ref().map(l2_normalize).transpose()?;
    let mut tape = Tape::new();
    let ctx = tape.param(prompt.context.clone());
    let loss = tuning_loss_on_tape(
        prompt,
        model,
        &mut tape,
        ctx,
        &nodes,
        texts.as_ref(),
        Rc::new(set.labels.clone()),
        lambda,
    )?;
    let value = tape.scalar(loss);
    let grads = tape.backward(loss);
    Ok((value, grads.get_or_zeros(ctx, &prompt.context)))
}

/// Tuned prompt and the mean loss of each epoch.
#[derive(Clone, Debug)]
pub struct TuneOutcome {
    pub prompt: ContinuousPrompt,
    pub epoch_losses: Vec<f64>,
}

/// Minimizes the hybrid cross-entropy over shuffled minibatches, updating
/// only the context vectors.
pub fn tune_prompt(
    prompt: &ContinuousPrompt,
    samples: &TuningSet,
    model: &PretrainedModel,
    config: &HybridConfig,
) -> Result<TuneOutcome> {
    config.validate()?;
    check_prompt(prompt, model)?;
    samples.check(prompt.num_classes(), config.lambda)?;
    let mut prompt = prompt.clone();
    if prompt.context_len() == 0 {
        return Ok(TuneOutcome {
            prompt,
            epoch_losses: Vec::new(),
        });
    }
    let nodes = l2_normalize(&samples.nodes)?;
    let texts = samples.texts.as_ref().map(l2_normalize).transpose()?;
    let mut params = ParamSet::new();
    params.insert("prompt.context", prompt.context.clone());
    let mut opt = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut r = rng::stream(config.seed, "prompt-batches", epoch as u64);
        order.shuffle(&mut r);
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let bn = nodes.select(Axis(0), batch);
            let bt = texts.as_ref().map(|t| t.select(Axis(0), batch));
            let labels: Vec<usize> = batch.iter().map(|&i| samples.labels[i]).collect();
            prompt.context = params.get("prompt.context")?.clone();
            let mut tape = Tape::new();
            let ctx = tape.param(prompt.context.clone());
            let loss = tuning_loss_on_tape(
                &prompt,
                model,
                &mut tape,
                ctx,
                &bn,
                bt.as_ref(),
                Rc::new(labels),
                config.lambda,
            )?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(ZptError::Training {
                    epoch,
                    step,
                    message: format!("tuning loss is {value}"),
                });
            }
            let grads = tape.backward(loss);
            opt.step(&mut params, &[grads.get_or_zeros(ctx, &prompt.context)]);
            sum += value * batch.len() as f64;
            count += batch.len();
            step += 1;
        }
        epoch_losses.push(sum / count as f64);
    }
    prompt.context = params.get("prompt.context")?.clone();
    Ok(TuneOutcome {
        prompt,
        epoch_losses,
    })
}
