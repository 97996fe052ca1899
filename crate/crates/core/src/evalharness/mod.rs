//! N-way zero-shot task sampling, metrics, the method runners and the
//! projection export.

pub mod projection;
pub mod runners;
pub mod sweep;

pub use projection::{centroid_report, export_projection, tsne, CentroidReport, LabeledPairs, TsneConfig};
pub use runners::{
    generate_task_samples, run_discrete, run_node_only_ablation, run_pseudo_label, run_simple_classifier,
    run_zpt, stack_samples, GraphEmbeddings, PseudoLabelConfig, PseudoRun, SimpleClassifierConfig, ZptConfig,
    ZptRun,
};
pub use sweep::{evaluate_zpt, run_sensitivity, SweepConfig, SweepPoint, SweepReport};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ZptError};
use crate::rng;
use crate::tagcore::TextAttributedGraph;
use crate::tensor::Mat;

/// One N-way task: class names and labeled query nodes. `truth[i]` indexes
/// `class_names`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotTask {
    pub class_names: Vec<String>,
    pub query_ids: Vec<u64>,
    pub truth: Vec<usize>,
}

impl ZeroShotTask {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Row indices of the query nodes in `graph`.
    pub fn query_rows(&self, graph: &TextAttributedGraph) -> Result<Vec<usize>> {
        self.query_ids
            .iter()
            .map(|&id| {
                graph
                    .index_of(id)
                    .ok_or_else(|| ZptError::Contract(format!("query node {id} is not in the graph")))
            })
            .collect()
    }
}

/// Task-sampling settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub n_way: usize,
    pub num_tasks: usize,
    pub queries_per_class: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            num_tasks: 10,
            queries_per_class: 20,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("tasks.n_way", self.n_way),
            ("tasks.num_tasks", self.num_tasks),
            ("tasks.queries_per_class", self.queries_per_class),
        ] {
            if v == 0 {
                return Err(ZptError::config(field, "must be at least 1"));
            }
        }
        Ok(())
    }
}

/// Samples `num_tasks` tasks of `n` classes each. Classes are drawn from a
/// stream of shuffled rounds over all classes, so every class appears once
/// before any class repeats.
pub fn sample_tasks(
    graph: &TextAttributedGraph,
    n: usize,
    num_tasks: usize,
    queries_per_class: usize,
    seed: u64,
) -> Result<Vec<ZeroShotTask>> {
    let labels = graph
        .labels()
        .ok_or_else(|| ZptError::config("data", "task sampling needs node labels"))?;
    let names = graph.class_names();
    let mut members: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
    for (id, label) in graph.node_ids().iter().zip(labels) {
        members.entry(label.as_str()).or_default().push(*id);
    }
    if n == 0 || names.len() < n {
        return Err(ZptError::config(
            "tasks.n_way",
            format!("{n}-way tasks need at least {n} classes, graph has {}", names.len()),
        ));
    }
    if queries_per_class == 0 {
        return Err(ZptError::config("tasks.queries_per_class", "must be at least 1"));
    }
    if num_tasks * n < names.len() {
        return Err(ZptError::config(
            "tasks.num_tasks",
            format!("{num_tasks} tasks of {n} classes cannot cover {} classes", names.len()),
        ));
    }
    if let Some(small) = names.iter().find(|c| members[c.as_str()].len() < queries_per_class) {
        return Err(ZptError::config(
            "tasks.queries_per_class",
            format!("class `{small}` has fewer than {queries_per_class} nodes"),
        ));
    }

    let mut r = rng::stream(seed, "tasks", 0);
    let mut queue: Vec<usize> = Vec::new();
    let mut tasks = Vec::with_capacity(num_tasks);
    for _ in 0..num_tasks {
        let mut chosen: Vec<usize> = Vec::with_capacity(n);
        while chosen.len() < n {
            if queue.is_empty() {
                let mut round: Vec<usize> = (0..names.len()).collect();
                round.shuffle(&mut r);
                queue = round;
            }
            // take the first queued class not already in this task
            match queue.iter().position(|c| !chosen.contains(c)) {
                Some(pos) => chosen.push(queue.remove(pos)),
                None => {
                    let mut round: Vec<usize> = (0..names.len()).collect();
                    round.shuffle(&mut r);
                    queue.extend(round);
                }
            }
        }
        chosen.sort_unstable();
        let mut query_ids = Vec::with_capacity(n * queries_per_class);
        let mut truth = Vec::with_capacity(n * queries_per_class);
        for (k, &c) in chosen.iter().enumerate() {
            let pool = &members[names[c].as_str()];
            for &id in pool.choose_multiple(&mut r, queries_per_class) {
                query_ids.push(id);
                truth.push(k);
            }
        }
        tasks.push(ZeroShotTask {
            class_names: chosen.iter().map(|&c| names[c].clone()).collect(),
            query_ids,
            truth,
        });
    }
    Ok(tasks)
}

fn check_lengths(preds: &[usize], truth: &[usize]) -> Result<()> {
    if preds.len() != truth.len() {
        return Err(ZptError::Contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(ZptError::Contract("no predictions to score".into()));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(preds, truth)?;
    let hits = preds.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Unweighted mean of per-class F1 over `num_classes` classes. A class that
/// is neither predicted nor present scores 0.
pub fn macro_f1(preds: &[usize], truth: &[usize], num_classes: usize) -> Result<f64> {
    check_lengths(preds, truth)?;
    if let Some(bad) = preds.iter().chain(truth).find(|&&i| i >= num_classes) {
        return Err(ZptError::Contract(format!("class index {bad} outside {num_classes} classes")));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fneg = vec![0usize; num_classes];
    for (&p, &t) in preds.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let total: f64 = (0..num_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fneg[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / num_classes as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

impl TaskMetrics {
    pub fn score(preds: &[usize], truth: &[usize], num_classes: usize) -> Result<Self> {
        Ok(Self {
            accuracy: accuracy(preds, truth)?,
            macro_f1: macro_f1(preds, truth, num_classes)?,
        })
    }
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Per-task scores and their aggregate over tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_task: Vec<TaskMetrics>,
    pub accuracy: Summary,
    pub macro_f1: Summary,
}

impl Metrics {
    pub fn from_tasks(per_task: Vec<TaskMetrics>) -> Self {
        let acc: Vec<f64> = per_task.iter().map(|m| m.accuracy).collect();
        let f1: Vec<f64> = per_task.iter().map(|m| m.macro_f1).collect();
        Self {
            accuracy: Summary::of(&acc),
            macro_f1: Summary::of(&f1),
            per_task,
        }
    }
}

/// Scores `classifier` on every task. The classifier receives the task and
/// the node and text embeddings of its queries (rows in query order) and
/// returns one class index per query.
pub fn evaluate<F>(tasks: &[ZeroShotTask], graph: &TextAttributedGraph, emb: &GraphEmbeddings, mut classifier: F) -> Result<Metrics>
where
    F: FnMut(&ZeroShotTask, &Mat, &Mat) -> Result<Vec<usize>>,
{
    let mut per_task = Vec::with_capacity(tasks.len());
    for task in tasks {
        let rows = task.query_rows(graph)?;
        let (v, t) = emb.select(&rows);
        let preds = classifier(task, &v, &t)?;
        per_task.push(TaskMetrics::score(&preds, &task.truth, task.num_classes())?);
    }
    Ok(Metrics::from_tasks(per_task))
}
