//! 2-D projection of real and synthetic embeddings plus centroid
//! diagnostics in the original embedding space.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoders::{cosine, l2_normalize};
use crate::error::{Result, ZptError};
use crate::par;
use crate::rng;
use crate::tensor::Mat;

/// Row-aligned node/text embeddings with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPairs {
    pub nodes: Mat,
    pub texts: Mat,
    /// Index into `class_names` per row.
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl LabeledPairs {
    fn check(&self, what: &str) -> Result<()> {
        if self.nodes.dim() != self.texts.dim() || self.nodes.nrows() != self.labels.len() {
            return Err(ZptError::Contract(format!("{what} pairs are not row-aligned")));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.class_names.len()) {
            return Err(ZptError::Contract(format!("{what} label {bad} has no class name")));
        }
        Ok(())
    }
}

/// Per-class centroid comparison for one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCentroid {
    pub class: String,
    /// `1 - cos` between the real and synthetic centroids of this class.
    pub cosine_distance: f64,
    /// Real class whose centroid is cosine-nearest to this synthetic centroid.
    pub nearest_real_class: String,
    pub matches: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidReport {
    pub node: Vec<ClassCentroid>,
    pub text: Vec<ClassCentroid>,
    pub node_matches: usize,
    pub text_matches: usize,
}

fn centroids(m: &Mat, labels: &[usize], k: usize) -> Vec<Option<Vec<f64>>> {
    let mut sums = vec![vec![0.0; m.ncols()]; k];
    let mut counts = vec![0usize; k];
    for (row, &y) in m.rows().into_iter().zip(labels) {
        for (s, v) in sums[y].iter_mut().zip(row) {
            *s += v;
        }
        counts[y] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
        .collect()
}

fn compare(real: &Mat, real_y: &[usize], synth: &Mat, synth_y: &[usize], names: &[String]) -> Result<Vec<ClassCentroid>> {
    let k = names.len();
    let rc = centroids(real, real_y, k);
    let sc = centroids(synth, synth_y, k);
    let mut out = Vec::new();
    for c in 0..k {
        let (Some(r), Some(s)) = (&rc[c], &sc[c]) else { continue };
        let mut best = (f64::NEG_INFINITY, 0);
        for (j, other) in rc.iter().enumerate() {
            if let Some(o) = other {
                let sim = cosine(s, o)?;
                if sim > best.0 {
                    best = (sim, j);
                }
            }
        }
        out.push(ClassCentroid {
            class: names[c].clone(),
            cosine_distance: 1.0 - cosine(r, s)?,
            nearest_real_class: names[best.1].clone(),
            matches: best.1 == c,
        });
    }
    Ok(out)
}

/// Centroid diagnostics for both modalities. Both sets must share
/// `class_names`.
pub fn centroid_report(real: &LabeledPairs, synth: &LabeledPairs) -> Result<CentroidReport> {
    real.check("real")?;
    synth.check("synthetic")?;
    if real.class_names != synth.class_names {
        return Err(ZptError::Contract("real and synthetic class names differ".into()));
    }
    let node = compare(&real.nodes, &real.labels, &synth.nodes, &synth.labels, &real.class_names)?;
    let text = compare(&real.texts, &real.labels, &synth.texts, &synth.labels, &real.class_names)?;
    Ok(CentroidReport {
        node_matches: node.iter().filter(|c| c.matches).count(),
        text_matches: text.iter().filter(|c| c.matches).count(),
        node,
        text,
    })
}

/// t-SNE settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    /// Step size; `None` picks `max(n / exaggeration / 4, 50)`.
    pub learning_rate: Option<f64>,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 300,
            learning_rate: None,
            exaggeration: 12.0,
            exaggeration_iters: 100,
        }
    }
}

/// Conditional affinities of row `i` with the bandwidth found by bisection
/// to match `perplexity`.
fn row_affinities(d2: &[f64], i: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let (mut lo, mut hi, mut beta) = (0.0, f64::INFINITY, 1.0);
    let mut p = vec![0.0; d2.len()];
    for _ in 0..64 {
        let mut z = 0.0;
        for (j, (&d, pj)) in d2.iter().zip(p.iter_mut()).enumerate() {
            *pj = if j == i { 0.0 } else { (-beta * d).exp() };
            z += *pj;
        }
        let z = z.max(f64::MIN_POSITIVE);
        let mut h = 0.0;
        for (j, pj) in p.iter_mut().enumerate() {
            *pj /= z;
            if j != i && *pj > 0.0 {
                h -= *pj * pj.ln();
            }
        }
        if (h - target).abs() < 1e-5 {
            break;
        }
        if h > target {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
    p
}

/// Exact t-SNE to two dimensions on unit-normalized rows. Deterministic
/// given `seed`.
pub fn tsne(x: &Mat, config: &TsneConfig, seed: u64) -> Result<Mat> {
    let n = x.nrows();
    if n < 2 {
        return Err(ZptError::Contract("projection needs at least 2 points".into()));
    }
    let xn = l2_normalize(x)?;
    let gram = xn.dot(&xn.t());
    let perplexity = config.perplexity.min((n - 1) as f64 / 3.0).max(1.0);
    let cond: Vec<Vec<f64>> = par::map_indexed(n, |i| {
        let d2: Vec<f64> = (0..n).map(|j| (2.0 - 2.0 * gram[[i, j]]).max(0.0)).collect();
        row_affinities(&d2, i, perplexity)
    });
    let mut p = Mat::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            p[[i, j]] = ((cond[i][j] + cond[j][i]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let lr = config
        .learning_rate
        .unwrap_or_else(|| (n as f64 / config.exaggeration / 4.0).max(50.0));
    let mut r = rng::stream(seed, "tsne-init", 0);
    let normal = Normal::new(0.0, 1e-4).expect("valid std");
    let mut y = Mat::from_shape_simple_fn((n, 2), || normal.sample(&mut r));
    let mut velocity = Mat::zeros((n, 2));
    let mut gains = Mat::ones((n, 2));
    for it in 0..config.iterations {
        let exag = if it < config.exaggeration_iters { config.exaggeration } else { 1.0 };
        let momentum = if it < config.exaggeration_iters { 0.5 } else { 0.8 };
        // Student-t kernel rows; normalizer summed in a fixed order
        let kernel: Vec<Vec<f64>> = par::map_indexed(n, |i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        let dx = y[[i, 0]] - y[[j, 0]];
                        let dy = y[[i, 1]] - y[[j, 1]];
                        1.0 / (1.0 + dx * dx + dy * dy)
                    }
                })
                .collect()
        });
        let z: f64 = kernel.iter().map(|row| row.iter().sum::<f64>()).sum();
        let grads: Vec<[f64; 2]> = par::map_indexed(n, |i| {
            let mut g = [0.0, 0.0];
            for j in 0..n {
                let k = kernel[i][j];
                let coef = 4.0 * (exag * p[[i, j]] - k / z) * k;
                g[0] += coef * (y[[i, 0]] - y[[j, 0]]);
                g[1] += coef * (y[[i, 1]] - y[[j, 1]]);
            }
            g
        });
        for (i, g) in grads.iter().enumerate() {
            for d in 0..2 {
                let same_sign = (g[d] > 0.0) == (velocity[[i, d]] > 0.0);
                gains[[i, d]] = if same_sign { (gains[[i, d]] * 0.8f64).max(0.01) } else { gains[[i, d]] + 0.2 };
                velocity[[i, d]] = momentum * velocity[[i, d]] - lr * gains[[i, d]] * g[d];
                y[[i, d]] += velocity[[i, d]];
            }
        }
        let mean = y.mean_axis(ndarray::Axis(0)).expect("non-empty");
        y -= &mean;
    }
    Ok(y)
}

/// Path of the centroid report written next to `csv_path`.
pub fn report_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("centroids.json")
}

/// Projects each modality (real and synthetic rows together) to 2-D and
/// writes a CSV with columns `modality,class,source,x,y`, plus the centroid
/// report as JSON next to it.
pub fn export_projection(
    real: &LabeledPairs,
    synth: &LabeledPairs,
    csv_path: &Path,
    seed: u64,
) -> Result<CentroidReport> {
    let report = centroid_report(real, synth)?;
    let present: std::collections::BTreeSet<usize> = real.labels.iter().chain(&synth.labels).copied().collect();
    if present.len() < 2 {
        return Err(ZptError::Contract("projection needs at least 2 classes".into()));
    }
    let mut csv = String::from("modality,class,source,x,y\n");
    for (modality, r, s) in [("node", &real.nodes, &synth.nodes), ("text", &real.texts, &synth.texts)] {
        let all = ndarray::concatenate(ndarray::Axis(0), &[r.view(), s.view()]).expect("equal widths");
        let y = tsne(&all, &TsneConfig::default(), rng::derive_seed(seed, modality, 0))?;
        let labels = real.labels.iter().map(|&l| (l, "real")).chain(synth.labels.iter().map(|&l| (l, "synthetic")));
        for (row, (label, source)) in labels.enumerate() {
            writeln!(
                csv,
                "{modality},{},{source},{:.6},{:.6}",
                real.class_names[label],
                y[[row, 0]],
                y[[row, 1]]
            )
            .expect("write to string");
        }
    }
    std::fs::write(csv_path, csv).map_err(|e| ZptError::io(csv_path, e))?;
    let rp = report_path(csv_path);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&rp, json).map_err(|e| ZptError::io(&rp, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn pairs(nodes: Mat, labels: Vec<usize>) -> LabeledPairs {
        LabeledPairs {
            texts: nodes.clone(),
            nodes,
            labels,
            class_names: vec!["a".into(), "b".into()],
        }
    }

    #[test]
    fn centroid_report_flags_matches() {
        let real = pairs(array![[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]], vec![0, 0, 1, 1]);
        let synth = pairs(array![[0.8, 0.3], [0.2, 0.7]], vec![0, 1]);
        let rep = centroid_report(&real, &synth).unwrap();
        assert_eq!(rep.node_matches, 2);
        let swapped = pairs(array![[0.8, 0.3], [0.2, 0.7]], vec![1, 0]);
        let rep = centroid_report(&real, &swapped).unwrap();
        assert_eq!(rep.node_matches, 0);
        assert_eq!(rep.node[0].nearest_real_class, "b");
    }

    #[test]
    fn tsne_separates_two_blobs() {
        let mut r = rng::stream(9, "blobs", 0);
        let noise = Normal::new(0.0, 0.15).unwrap();
        let mut x = Mat::from_shape_simple_fn((120, 8), || noise.sample(&mut r));
        for i in 0..120 {
            x[[i, usize::from(i >= 60)]] += 1.0;
        }
        let cfg = TsneConfig { perplexity: 10.0, ..TsneConfig::default() };
        let y = tsne(&x, &cfg, 1).unwrap();
        assert_eq!(y, tsne(&x, &cfg, 1).unwrap());
        // every point's nearest projected neighbor comes from its own blob
        for i in 0..120 {
            let nearest = (0..120)
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    let d = |j: usize| (y[[i, 0]] - y[[j, 0]]).powi(2) + (y[[i, 1]] - y[[j, 1]]).powi(2);
                    d(a).partial_cmp(&d(b)).unwrap()
                })
                .unwrap();
            assert_eq!(i < 60, nearest < 60, "point {i}");
        }
    }
}
