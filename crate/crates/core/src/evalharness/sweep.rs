//! Multi-task ZPT evaluation and sensitivity sweeps over the generator
//! latent size, samples per class and the fusion weight λ.

use serde::{Deserialize, Serialize};

use super::runners::{run_zpt, GraphEmbeddings, ZptConfig};
use super::{Metrics, ZeroShotTask};
use crate::encoders::PretrainedModel;
use crate::error::Result;
use crate::rng;
use crate::tagcore::TextAttributedGraph;
use crate::ubcg::{train_ubcg, UbcgConfig, UbcgModel};

/// ZPT over every task; task `i` uses a seed derived from `(seed, i)`.
pub fn evaluate_zpt(
    graph: &TextAttributedGraph,
    emb: &GraphEmbeddings,
    model: &PretrainedModel,
    ubcg: &UbcgModel,
    tasks: &[ZeroShotTask],
    config: &ZptConfig,
    seed: u64,
) -> Result<Metrics> {
    let per_task = tasks
        .iter()
        .enumerate()
        .map(|(i, task)| {
            let s = rng::derive_seed(seed, "zpt-task", i as u64);
            run_zpt(graph, emb, model, ubcg, task, config, s).map(|r| r.metrics)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Metrics::from_tasks(per_task))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Values swept by [`run_sensitivity`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub latent_dims: Vec<usize>,
    pub samples_per_class: Vec<usize>,
    pub lambdas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            latent_dims: vec![4, 8, 16, 32, 64],
            samples_per_class: vec![100, 200, 400, 800],
            lambdas: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub latent_dim: Vec<SweepPoint>,
    pub samples_per_class: Vec<SweepPoint>,
    pub lambda: Vec<SweepPoint>,
}

impl SweepReport {
    /// Best λ-sweep accuracy minus the accuracy at `lambda`, if swept.
    pub fn lambda_gap(&self, lambda: f64) -> Option<f64> {
        let at = self.lambda.iter().find(|p| (p.value - lambda).abs() < 1e-12)?;
        let best = self.lambda.iter().map(|p| p.accuracy).fold(f64::NEG_INFINITY, f64::max);
        Some(best - at.accuracy)
    }

    /// Plain-text comparison table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (name, points) in [
            ("latent_dim", &self.latent_dim),
            ("samples_per_class", &self.samples_per_class),
            ("lambda", &self.lambda),
        ] {
            out.push_str(&format!("{name:<18} {:>8} {:>8}\n", "acc", "macro_f1"));
            for p in points {
                out.push_str(&format!("{:<18} {:>8.4} {:>8.4}\n", p.value, p.accuracy, p.macro_f1));
            }
            out.push('\n');
        }
        out
    }
}

fn point(value: f64, m: &Metrics) -> SweepPoint {
    SweepPoint {
        value,
        accuracy: m.accuracy.mean,
        macro_f1: m.macro_f1.mean,
    }
}

/// Runs the three one-at-a-time sweeps around `base`. The latent sweep
/// retrains the generator on `(nodes, texts)` for each size; the other two
/// reuse `ubcg`.
#[allow(clippy::too_many_arguments)]
pub fn run_sensitivity(
    graph: &TextAttributedGraph,
    emb: &GraphEmbeddings,
    model: &PretrainedModel,
    ubcg: &UbcgModel,
    ubcg_config: &UbcgConfig,
    tasks: &[ZeroShotTask],
    base: &ZptConfig,
    sweep: &SweepConfig,
    seed: u64,
) -> Result<SweepReport> {
    let mut latent_dim = Vec::new();
    for &l in &sweep.latent_dims {
        let cfg = UbcgConfig {
            latent_dim: l,
            ..ubcg_config.clone()
        };
        let trained = train_ubcg(&emb.nodes, &emb.texts, &cfg)?.model;
        let m = evaluate_zpt(graph, emb, model, &trained, tasks, base, seed)?;
        latent_dim.push(point(l as f64, &m));
    }
    let mut samples_per_class = Vec::new();
    for &k in &sweep.samples_per_class {
        let cfg = ZptConfig {
            samples_per_class: k,
            ..base.clone()
        };
        let m = evaluate_zpt(graph, emb, model, ubcg, tasks, &cfg, seed)?;
        samples_per_class.push(point(k as f64, &m));
    }
    let mut lambda = Vec::new();
    for &lam in &sweep.lambdas {
        let mut cfg = base.clone();
        cfg.hybrid.lambda = lam;
        let m = evaluate_zpt(graph, emb, model, ubcg, tasks, &cfg, seed)?;
        lambda.push(point(lam, &m));
    }
    Ok(SweepReport {
        latent_dim,
        samples_per_class,
        lambda,
    })
}
