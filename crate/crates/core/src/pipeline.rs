//! Stage orchestration shared by the command-line driver and the tests:
//! corpus, pre-training, generator training and evaluation in every mode.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, SeedBundle};
use crate::encoders::PretrainedModel;
use crate::error::{Result, ZptError};
use crate::evalharness::{
    evaluate_zpt, generate_task_samples, run_discrete, run_node_only_ablation, run_pseudo_label,
    run_simple_classifier, sample_tasks, stack_samples, GraphEmbeddings, LabeledPairs, Metrics, Summary,
    TaskMetrics, ZeroShotTask,
};
use crate::pretrain::{pretrain, PretrainOutcome};
use crate::promptkit::TEMPLATES;
use crate::rng;
use crate::tagcore::{generate_synthetic_tag, TextAttributedGraph};
use crate::ubcg::{train_ubcg, UbcgModel, UbcgOutcome};

/// Context words used by `zpt-context` when none are configured.
pub const DEFAULT_CONTEXT_TEMPLATE: &str = "a paper of {class name}";

/// Evaluation method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Zpt,
    ZptContext,
    Discrete,
    NodeOnly,
    Simple,
    Pseudo,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Zpt,
        Mode::ZptContext,
        Mode::Discrete,
        Mode::NodeOnly,
        Mode::Simple,
        Mode::Pseudo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Zpt => "zpt",
            Mode::ZptContext => "zpt-context",
            Mode::Discrete => "discrete",
            Mode::NodeOnly => "node-only",
            Mode::Simple => "simple",
            Mode::Pseudo => "pseudo",
        }
    }

    /// Whether the mode draws synthetic samples from a generator.
    pub fn needs_generator(self) -> bool {
        !matches!(self, Mode::Discrete | Mode::Pseudo)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = ZptError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            let valid: Vec<&str> = Mode::ALL.iter().map(|m| m.as_str()).collect();
            ZptError::config("mode", format!("unknown mode `{s}`; valid modes: {}", valid.join(", ")))
        })
    }
}

pub fn build_corpus(config: &RunConfig) -> Result<TextAttributedGraph> {
    generate_synthetic_tag(&config.synthetic)
}

pub fn run_pretrain(graph: &TextAttributedGraph, config: &RunConfig) -> Result<PretrainOutcome> {
    let c = config.resolved();
    pretrain(graph, &c.pretrain, &c.text_encoder, &c.graph_encoder)
}

/// Trains the generator on the frozen encoders' embeddings of every node.
pub fn run_train_ubcg(emb: &GraphEmbeddings, config: &RunConfig) -> Result<UbcgOutcome> {
    train_ubcg(&emb.nodes, &emb.texts, &config.resolved().ubcg)
}

pub fn tasks_for(graph: &TextAttributedGraph, config: &RunConfig) -> Result<Vec<ZeroShotTask>> {
    let t = &config.tasks;
    sample_tasks(graph, t.n_way, t.num_tasks, t.queries_per_class, config.seed)
}

/// Discrete-prompt accuracy of every built-in template over `tasks`.
pub fn template_sweep(
    graph: &TextAttributedGraph,
    emb: &GraphEmbeddings,
    model: &PretrainedModel,
    tasks: &[ZeroShotTask],
    lambda: f64,
) -> Result<Vec<(String, Metrics)>> {
    TEMPLATES
        .iter()
        .map(|&tmpl| {
            let per_task = tasks
                .iter()
                .map(|task| run_discrete(graph, emb, model, task, tmpl, lambda))
                .collect::<Result<Vec<_>>>()?;
            Ok((tmpl.to_string(), Metrics::from_tasks(per_task)))
        })
        .collect()
}

/// Template with the highest (`best`) or lowest mean accuracy; ties go to
/// the earlier template.
pub fn pick_template(sweep: &[(String, Metrics)], best: bool) -> String {
    let mut chosen = &sweep[0];
    for entry in &sweep[1..] {
        let (a, b) = (entry.1.accuracy.mean, chosen.1.accuracy.mean);
        if (best && a > b) || (!best && a < b) {
            chosen = entry;
        }
    }
    chosen.0.clone()
}

/// Seed of task `i` for the synthetic-sample methods, shared so that ZPT,
/// the ablation and the simple classifier see identical generated samples.
pub fn task_seed(seed: u64, i: usize) -> u64 {
    rng::derive_seed(seed, "zpt-task", i as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task: usize,
    pub classes: Vec<String>,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// JSON evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub mode: Mode,
    pub lambda: f64,
    pub samples_per_class: usize,
    /// Discrete template in effect (discrete, pseudo and zpt-context modes).
    pub template: Option<String>,
    pub tasks: Vec<TaskRow>,
    pub accuracy: Summary,
    pub macro_f1: Summary,
    pub seeds: SeedBundle,
    pub config: RunConfig,
    /// Pseudo-label runs: tasks that fell back to untuned discrete weights.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub fallback_tasks: Vec<usize>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Short hex digest of everything that determines a run's outputs.
pub fn run_id(config: &RunConfig, mode: Mode, template: Option<&str>) -> String {
    let mut h = Sha256::new();
    h.update(config.to_toml().as_bytes());
    h.update(mode.as_str().as_bytes());
    h.update(template.unwrap_or("").as_bytes());
    hex::encode(&h.finalize()[..6])
}

/// Inputs shared by every evaluation mode.
pub struct EvalInputs<'a> {
    pub graph: &'a TextAttributedGraph,
    pub emb: &'a GraphEmbeddings,
    pub model: &'a PretrainedModel,
    /// Required by the generator-based modes; `node-only` needs one trained
    /// without the text direction.
    pub ubcg: Option<&'a UbcgModel>,
    pub tasks: &'a [ZeroShotTask],
}

/// Runs `mode` over all tasks. `template` overrides the discrete template
/// (discrete, pseudo) or the context words (zpt-context); otherwise discrete
/// and pseudo use the best template of the sweep.
pub fn evaluate_mode(inputs: &EvalInputs<'_>, config: &RunConfig, mode: Mode, template: Option<&str>) -> Result<EvalReport> {
    let config = config.resolved();
    config.validate()?;
    let EvalInputs {
        graph,
        emb,
        model,
        ubcg,
        tasks,
    } = *inputs;
    let seed = config.seed;
    let lambda = config.zpt.hybrid.lambda;
    let generator = || {
        ubcg.ok_or_else(|| ZptError::config("ubcg", format!("mode {mode} needs a trained generator checkpoint")))
    };
    let discrete_template = || -> Result<String> {
        match template {
            Some(t) => {
                crate::promptkit::instantiate(t, "x")?;
                Ok(t.to_string())
            }
            None => Ok(pick_template(&template_sweep(graph, emb, model, tasks, lambda)?, true)),
        }
    };
    let mut used_template = None;
    let mut fallback_tasks = Vec::new();
    let per_task: Vec<TaskMetrics> = match mode {
        Mode::Zpt | Mode::ZptContext => {
            let mut zc = config.zpt.clone();
            if mode == Mode::ZptContext {
                let t = template
                    .map(str::to_string)
                    .or_else(|| zc.context_template.clone())
                    .unwrap_or_else(|| DEFAULT_CONTEXT_TEMPLATE.to_string());
                used_template = Some(t.clone());
                zc.context_template = Some(t);
            } else {
                used_template = zc.context_template.clone();
            }
            evaluate_zpt(graph, emb, model, generator()?, tasks, &zc, seed)?.per_task
        }
        Mode::Discrete => {
            let t = discrete_template()?;
            let m = tasks
                .iter()
                .map(|task| run_discrete(graph, emb, model, task, &t, lambda))
                .collect::<Result<Vec<_>>>()?;
            used_template = Some(t);
            m
        }
        Mode::NodeOnly => tasks
            .iter()
            .enumerate()
            .map(|(i, task)| {
                run_node_only_ablation(graph, emb, model, generator()?, task, &config.zpt, task_seed(seed, i))
                    .map(|r| r.metrics)
            })
            .collect::<Result<Vec<_>>>()?,
        Mode::Simple => tasks
            .iter()
            .enumerate()
            .map(|(i, task)| {
                let s = task_seed(seed, i);
                let texts = config.zpt.class_texts(&task.class_names)?;
                let (_, samples) = generate_task_samples(model, generator()?, &texts, config.zpt.samples_per_class, s)?;
                let set = stack_samples(&samples, true);
                run_simple_classifier(graph, emb, &set, task, &config.simple, s)
            })
            .collect::<Result<Vec<_>>>()?,
        Mode::Pseudo => {
            let mut pc = config.pseudo.clone();
            pc.template = discrete_template()?;
            used_template = Some(pc.template.clone());
            let mut out = Vec::with_capacity(tasks.len());
            for (i, task) in tasks.iter().enumerate() {
                let run = run_pseudo_label(graph, emb, model, task, &pc, rng::derive_seed(seed, "pseudo-task", i as u64))?;
                if run.fell_back {
                    fallback_tasks.push(i);
                }
                out.push(run.metrics);
            }
            out
        }
    };
    let metrics = Metrics::from_tasks(per_task);
    let rows = tasks
        .iter()
        .zip(&metrics.per_task)
        .enumerate()
        .map(|(i, (task, m))| TaskRow {
            task: i,
            classes: task.class_names.clone(),
            accuracy: m.accuracy,
            macro_f1: m.macro_f1,
        })
        .collect();
    Ok(EvalReport {
        run_id: run_id(&config, mode, used_template.as_deref()),
        mode,
        lambda,
        samples_per_class: config.zpt.samples_per_class,
        template: used_template,
        tasks: rows,
        accuracy: metrics.accuracy,
        macro_f1: metrics.macro_f1,
        seeds: config.seeds(),
        config,
        fallback_tasks,
    })
}

/// Real pairs of every labeled node and `samples_per_class` generated pairs
/// per class, conditioned on the configured class descriptions.
pub fn projection_pairs(
    graph: &TextAttributedGraph,
    emb: &GraphEmbeddings,
    model: &PretrainedModel,
    ubcg: &UbcgModel,
    config: &RunConfig,
) -> Result<(LabeledPairs, LabeledPairs)> {
    let names = graph.class_names();
    let labels = graph
        .labels()
        .ok_or_else(|| ZptError::Contract("projection needs a labeled graph".into()))?;
    let real_labels = labels
        .iter()
        .map(|l| names.iter().position(|n| n == l).expect("label among class names"))
        .collect();
    let texts = config.zpt.class_texts(&names)?;
    let seed = rng::derive_seed(config.seed, "projection", 0);
    let (_, samples) = generate_task_samples(model, ubcg, &texts, config.zpt.samples_per_class, seed)?;
    let set = stack_samples(&samples, true);
    let real = LabeledPairs {
        nodes: emb.nodes.clone(),
        texts: emb.texts.clone(),
        labels: real_labels,
        class_names: names.clone(),
    };
    let synth = LabeledPairs {
        nodes: set.nodes,
        texts: set.texts.expect("stacked with texts"),
        labels: set.labels,
        class_names: names,
    };
    Ok((real, synth))
}
