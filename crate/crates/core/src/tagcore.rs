//! Text-attributed graphs: data model, on-disk format, and the seeded
//! planted-partition generator used as the verification corpus.
//!
//! On disk a graph is a directory holding `nodes.jsonl` (one JSON object per
//! node: `id`, `text`, optional `label`, optional `features`), `edges.tsv`
//! (two tab-separated node ids per line) and `meta.json` (`feature_dim`,
//! `num_nodes`).

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ZptError};
use crate::rng;
use crate::tensor::Mat;

/// Undirected, unweighted graph whose nodes carry features and raw text.
#[derive(Clone, Debug)]
pub struct TextAttributedGraph {
    node_ids: Vec<u64>,
    edges: Vec<(u64, u64)>,
    features: Mat,
    texts: Vec<String>,
    labels: Option<Vec<String>>,
    index: HashMap<u64, usize>,
}

impl PartialEq for TextAttributedGraph {
    fn eq(&self, other: &Self) -> bool {
        self.node_ids == other.node_ids
            && self.edges == other.edges
            && self.features == other.features
            && self.texts == other.texts
            && self.labels == other.labels
    }
}

impl TextAttributedGraph {
    /// Validates and builds a graph. Edges are canonicalized to
    /// `(min, max)` and deduplicated, keeping first-occurrence order.
    pub fn new(
        node_ids: Vec<u64>,
        edges: Vec<(u64, u64)>,
        features: Mat,
        texts: Vec<String>,
        labels: Option<Vec<String>>,
    ) -> Result<Self> {
        let n = node_ids.len();
        if texts.len() != n {
            return Err(ZptError::Contract(format!(
                "{} texts for {n} nodes",
                texts.len()
            )));
        }
        if features.nrows() != n {
            return Err(ZptError::Contract(format!(
                "{} feature rows for {n} nodes",
                features.nrows()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(ZptError::Contract(format!("{} labels for {n} nodes", l.len())));
            }
            if let Some(pos) = l.iter().position(|s| s.is_empty()) {
                return Err(ZptError::Contract(format!("empty label for node {}", node_ids[pos])));
            }
        }
        let mut index = HashMap::with_capacity(n);
        for (i, &id) in node_ids.iter().enumerate() {
            if index.insert(id, i).is_some() {
                return Err(ZptError::Contract(format!("duplicate node id {id}")));
            }
        }
        let mut seen = HashSet::with_capacity(edges.len());
        let mut canon = Vec::with_capacity(edges.len());
        for (a, b) in edges {
            for end in [a, b] {
                if !index.contains_key(&end) {
                    return Err(ZptError::Contract(format!(
                        "edge ({a}, {b}) references unknown node {end}"
                    )));
                }
            }
            if a == b {
                return Err(ZptError::Contract(format!("self-loop on node {a}")));
            }
            let e = (a.min(b), a.max(b));
            if seen.insert(e) {
                canon.push(e);
            }
        }
        Ok(Self {
            node_ids,
            edges: canon,
            features,
            texts,
            labels,
            index,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn node_ids(&self) -> &[u64] {
        &self.node_ids
    }

    pub fn edges(&self) -> &[(u64, u64)] {
        &self.edges
    }

    pub fn features(&self) -> &Mat {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    /// Row index of node `id`.
    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.index.get(&id).copied()
    }

    /// Edges as row-index pairs.
    pub fn edge_indices(&self) -> Vec<(usize, usize)> {
        self.edges
            .iter()
            .map(|(a, b)| (self.index[a], self.index[b]))
            .collect()
    }

    /// Sorted neighbor row indices for every row.
    pub fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes()];
        for (a, b) in self.edge_indices() {
            adj[a].push(b);
            adj[b].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// Distinct labels in first-appearance order.
    pub fn class_names(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.labels
            .iter()
            .flatten()
            .filter(|l| seen.insert(l.as_str()))
            .cloned()
            .collect()
    }
}

/// Neighbor sets keyed by node id.
pub fn neighbor_sets(graph: &TextAttributedGraph) -> BTreeMap<u64, BTreeSet<u64>> {
    let mut out: BTreeMap<u64, BTreeSet<u64>> =
        graph.node_ids.iter().map(|&id| (id, BTreeSet::new())).collect();
    for &(a, b) in &graph.edges {
        out.get_mut(&a).expect("validated").insert(b);
        out.get_mut(&b).expect("validated").insert(a);
    }
    out
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRecord {
    id: u64,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    feature_dim: usize,
    num_nodes: usize,
}

/// Lowercased whitespace tokens.
pub fn word_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Bag-of-words counts over the `dim` most frequent tokens (ties broken
/// alphabetically).
pub fn bag_of_words_features(texts: &[String], dim: usize) -> Mat {
    let mut freq: HashMap<String, usize> = HashMap::new();
    for t in texts {
        for w in word_tokens(t) {
            *freq.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let column: HashMap<String, usize> = ranked
        .into_iter()
        .take(dim)
        .enumerate()
        .map(|(i, (w, _))| (w, i))
        .collect();
    let mut x = Mat::zeros((texts.len(), dim));
    for (r, t) in texts.iter().enumerate() {
        for w in word_tokens(t) {
            if let Some(&c) = column.get(&w) {
                x[[r, c]] += 1.0;
            }
        }
    }
    x
}

/// Reads a graph directory.
pub fn load_tag(dir: impl AsRef<Path>) -> Result<TextAttributedGraph> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| ZptError::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&meta_text)
        .map_err(|e| ZptError::load("meta.json", e.to_string()))?;

    let nodes_path = dir.join("nodes.jsonl");
    let file = fs::File::open(&nodes_path).map_err(|e| ZptError::io(&nodes_path, e))?;
    let mut records = Vec::with_capacity(meta.num_nodes);
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ZptError::io(&nodes_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: NodeRecord = serde_json::from_str(&line)
            .map_err(|e| ZptError::load(format!("nodes.jsonl:{}", i + 1), e.to_string()))?;
        if let Some(f) = &rec.features {
            if f.len() != meta.feature_dim {
                return Err(ZptError::load(
                    format!("nodes.jsonl:{}", i + 1),
                    format!("{} features, meta.json says {}", f.len(), meta.feature_dim),
                ));
            }
        }
        records.push(rec);
    }
    if records.len() != meta.num_nodes {
        return Err(ZptError::load(
            "nodes.jsonl",
            format!("{} node records, meta.json says {}", records.len(), meta.num_nodes),
        ));
    }
    let with_features = records.iter().filter(|r| r.features.is_some()).count();
    if with_features != 0 && with_features != records.len() {
        return Err(ZptError::load(
            "nodes.jsonl",
            "features must be given for every node or for none",
        ));
    }
    let with_labels = records.iter().filter(|r| r.label.is_some()).count();
    if with_labels != 0 && with_labels != records.len() {
        return Err(ZptError::load(
            "nodes.jsonl",
            "labels must be given for every node or for none",
        ));
    }

    let edges_path = dir.join("edges.tsv");
    let file = fs::File::open(&edges_path).map_err(|e| ZptError::io(&edges_path, e))?;
    let ids: HashSet<u64> = records.iter().map(|r| r.id).collect();
    let mut edges = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ZptError::io(&edges_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let loc = format!("edges.tsv:{}", i + 1);
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 2 {
            return Err(ZptError::load(loc, "expected two tab-separated node ids"));
        }
        let parse = |s: &str| {
            s.trim()
                .parse::<u64>()
                .map_err(|e| ZptError::load(loc.clone(), format!("bad node id {s:?}: {e}")))
        };
        let (a, b) = (parse(parts[0])?, parse(parts[1])?);
        for end in [a, b] {
            if !ids.contains(&end) {
                return Err(ZptError::load(
                    loc,
                    format!("dangling edge endpoint: node {end} is not in nodes.jsonl"),
                ));
            }
        }
        edges.push((a, b));
    }

    let texts: Vec<String> = records.iter().map(|r| r.text.clone()).collect();
    let features = if with_features > 0 {
        let flat: Vec<f64> = records
            .iter()
            .flat_map(|r| r.features.as_ref().expect("checked").iter().copied())
            .collect();
        Mat::from_shape_vec((records.len(), meta.feature_dim), flat).expect("checked lengths")
    } else {
        bag_of_words_features(&texts, meta.feature_dim)
    };
    let labels = (with_labels > 0).then(|| {
        records
            .iter()
            .map(|r| r.label.clone().expect("checked"))
            .collect()
    });
    let node_ids = records.iter().map(|r| r.id).collect();
    TextAttributedGraph::new(node_ids, edges, features, texts, labels)
        .map_err(|e| ZptError::load(dir.display().to_string(), e.to_string()))
}

/// Writes a graph directory, creating it if needed.
pub fn save_tag(graph: &TextAttributedGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| ZptError::io(dir, e))?;

    let nodes_path = dir.join("nodes.jsonl");
    let file = fs::File::create(&nodes_path).map_err(|e| ZptError::io(&nodes_path, e))?;
    let mut w = BufWriter::new(file);
    for (i, &id) in graph.node_ids.iter().enumerate() {
        let rec = NodeRecord {
            id,
            text: graph.texts[i].clone(),
            label: graph.labels.as_ref().map(|l| l[i].clone()),
            features: Some(graph.features.row(i).to_vec()),
        };
        let line = serde_json::to_string(&rec).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| ZptError::io(&nodes_path, e))?;
    }
    w.flush().map_err(|e| ZptError::io(&nodes_path, e))?;

    let edges_path = dir.join("edges.tsv");
    let file = fs::File::create(&edges_path).map_err(|e| ZptError::io(&edges_path, e))?;
    let mut w = BufWriter::new(file);
    for (a, b) in &graph.edges {
        writeln!(w, "{a}\t{b}").map_err(|e| ZptError::io(&edges_path, e))?;
    }
    w.flush().map_err(|e| ZptError::io(&edges_path, e))?;

    let meta_path = dir.join("meta.json");
    let meta = Meta {
        feature_dim: graph.feature_dim(),
        num_nodes: graph.num_nodes(),
    };
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, text + "\n").map_err(|e| ZptError::io(&meta_path, e))
}

const TOPIC_WORDS: [&str; 60] = [
    "theory", "proof", "lemma", "complexity", "bound", "theorem", //
    "learning", "neural", "training", "network", "gradient", "model", //
    "genetics", "gene", "protein", "dna", "mutation", "genome", //
    "robotics", "robot", "sensor", "motion", "planning", "manipulator", //
    "databases", "query", "transaction", "schema", "storage", "index", //
    "vision", "image", "pixel", "camera", "segmentation", "detection", //
    "security", "encryption", "attack", "privacy", "malware", "cipher", //
    "networking", "protocol", "routing", "packet", "bandwidth", "latency", //
    "compilers", "parser", "grammar", "bytecode", "register", "optimizer", //
    "economics", "market", "price", "auction", "trade", "equilibrium",
];

const BACKGROUND_WORDS: [&str; 40] = [
    "a", "an", "the", "of", "paper", "research", "study", "we", "method", "results", //
    "approach", "new", "analysis", "using", "based", "problem", "data", "show", "present",
    "propose", "system", "algorithm", "performance", "framework", "novel", "efficient",
    "experimental", "evaluation", "work", "this", "for", "and", "in", "on", "with", "by",
    "general", "simple", "large", "real",
];

/// Default 100-token vocabulary: ten six-word topic groups, then shared
/// background words.
pub fn default_vocab() -> Vec<String> {
    TOPIC_WORDS
        .iter()
        .chain(BACKGROUND_WORDS.iter())
        .map(|s| s.to_string())
        .collect()
}

fn default_topic_prob() -> f64 {
    0.6
}

/// Parameters of the planted-partition text-attributed graph generator.
///
/// Class `c` owns the topic tokens `vocab[c*tokens_per_class..(c+1)*tokens_per_class]`
/// and is named after the first of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTagSpec {
    pub num_classes: usize,
    pub nodes_per_class: usize,
    pub vocab: Vec<String>,
    pub tokens_per_class: usize,
    pub text_len: usize,
    pub intra_edge_prob: f64,
    pub inter_edge_prob: f64,
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub seed: u64,
    /// Chance that a text token is drawn from the node's class topic tokens
    /// rather than the background.
    #[serde(default = "default_topic_prob")]
    pub topic_prob: f64,
}

impl Default for SyntheticTagSpec {
    fn default() -> Self {
        Self {
            num_classes: 5,
            nodes_per_class: 100,
            vocab: default_vocab(),
            tokens_per_class: 6,
            text_len: 8,
            intra_edge_prob: 0.05,
            inter_edge_prob: 0.002,
            feature_dim: 100,
            feature_noise: 0.1,
            seed: 7,
            topic_prob: default_topic_prob(),
        }
    }
}

impl SyntheticTagSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(ZptError::config("num_classes", "must be at least 1"));
        }
        if self.nodes_per_class == 0 {
            return Err(ZptError::config("nodes_per_class", "must be at least 1"));
        }
        if self.tokens_per_class == 0 {
            return Err(ZptError::config("tokens_per_class", "must be at least 1"));
        }
        if self.num_classes * self.tokens_per_class > self.vocab.len() {
            return Err(ZptError::config(
                "tokens_per_class",
                format!(
                    "{} classes x {} topic tokens exceed the {}-token vocab",
                    self.num_classes,
                    self.tokens_per_class,
                    self.vocab.len()
                ),
            ));
        }
        let distinct: HashSet<&String> = self.vocab.iter().collect();
        if distinct.len() != self.vocab.len() {
            return Err(ZptError::config("vocab", "tokens must be distinct"));
        }
        if self.vocab.iter().any(|t| t.is_empty() || t.contains(char::is_whitespace)) {
            return Err(ZptError::config("vocab", "tokens must be non-empty single words"));
        }
        if self.text_len == 0 {
            return Err(ZptError::config("text_len", "must be at least 1"));
        }
        for (name, p) in [
            ("intra_edge_prob", self.intra_edge_prob),
            ("inter_edge_prob", self.inter_edge_prob),
            ("topic_prob", self.topic_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ZptError::config(name, format!("{p} is not in [0, 1]")));
            }
        }
        if self.intra_edge_prob <= self.inter_edge_prob {
            return Err(ZptError::config(
                "intra_edge_prob",
                "must exceed inter_edge_prob for a detectable partition",
            ));
        }
        if self.feature_dim == 0 {
            return Err(ZptError::config("feature_dim", "must be at least 1"));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(ZptError::config("feature_noise", "must be a finite non-negative number"));
        }
        Ok(())
    }

    /// Name of class `c`.
    pub fn class_name(&self, c: usize) -> &str {
        &self.vocab[c * self.tokens_per_class]
    }
}

/// Samples a planted-partition graph. Node `c * nodes_per_class + k` belongs
/// to class `c`.
pub fn generate_synthetic_tag(spec: &SyntheticTagSpec) -> Result<TextAttributedGraph> {
    spec.validate()?;
    let k = spec.num_classes;
    let n = k * spec.nodes_per_class;
    let tpc = spec.tokens_per_class;
    let background: Vec<usize> = (k * tpc..spec.vocab.len()).collect();
    let background: Vec<usize> = if background.is_empty() {
        (0..spec.vocab.len()).collect()
    } else {
        background
    };

    let mut text_rng = rng::stream(spec.seed, "synthetic-text", 0);
    let mut token_ids = Vec::with_capacity(n);
    let mut texts = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for node in 0..n {
        let class = node / spec.nodes_per_class;
        let ids: Vec<usize> = (0..spec.text_len)
            .map(|_| {
                if text_rng.gen_bool(spec.topic_prob) {
                    class * tpc + text_rng.gen_range(0..tpc)
                } else {
                    *background.choose(&mut text_rng).expect("non-empty")
                }
            })
            .collect();
        texts.push(
            ids.iter()
                .map(|&i| spec.vocab[i].as_str())
                .collect::<Vec<_>>()
                .join(" "),
        );
        labels.push(spec.class_name(class).to_string());
        token_ids.push(ids);
    }

    let mut edge_rng = rng::stream(spec.seed, "synthetic-edges", 0);
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let same = a / spec.nodes_per_class == b / spec.nodes_per_class;
            let p = if same {
                spec.intra_edge_prob
            } else {
                spec.inter_edge_prob
            };
            if edge_rng.gen::<f64>() < p {
                edges.push((a as u64, b as u64));
            }
        }
    }

    let mut noise_rng = rng::stream(spec.seed, "synthetic-features", 0);
    let noise = Normal::new(0.0, spec.feature_noise.max(f64::MIN_POSITIVE)).expect("valid");
    let mut features = Mat::zeros((n, spec.feature_dim));
    for (r, ids) in token_ids.iter().enumerate() {
        for &t in ids {
            features[[r, t % spec.feature_dim]] += 1.0;
        }
        if spec.feature_noise > 0.0 {
            for c in 0..spec.feature_dim {
                features[[r, c]] += noise.sample(&mut noise_rng);
            }
        }
    }

    TextAttributedGraph::new(
        (0..n as u64).collect(),
        edges,
        features,
        texts,
        Some(labels),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(edges: Vec<(u64, u64)>, n: usize) -> TextAttributedGraph {
        TextAttributedGraph::new(
            (0..n as u64).collect(),
            edges,
            Mat::zeros((n, 2)),
            (0..n).map(|i| format!("node {i}")).collect(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn path_graph_neighbors() {
        let g = tiny(vec![(0, 1), (1, 2)], 3);
        let ns = neighbor_sets(&g);
        assert_eq!(ns[&1], BTreeSet::from([0, 2]));
        assert_eq!(ns[&0], BTreeSet::from([1]));
    }

    #[test]
    fn edgeless_and_triangle_neighbors() {
        let g = tiny(vec![], 3);
        assert!(neighbor_sets(&g).values().all(|s| s.is_empty()));
        let g = tiny(vec![(0, 1), (1, 2), (2, 0)], 3);
        assert!(neighbor_sets(&g).values().all(|s| s.len() == 2));
    }

    #[test]
    fn edges_are_canonicalized_and_deduplicated() {
        let g = tiny(vec![(1, 0), (0, 1), (2, 1)], 3);
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
    }

    #[test]
    fn invalid_graphs_are_rejected() {
        let bad = TextAttributedGraph::new(vec![0, 1], vec![(0, 5)], Mat::zeros((2, 1)), vec!["a".into(), "b".into()], None);
        assert!(matches!(bad, Err(ZptError::Contract(_))));
        let bad = TextAttributedGraph::new(vec![0, 1], vec![], Mat::zeros((2, 1)), vec!["a".into()], None);
        assert!(bad.is_err());
        let bad = TextAttributedGraph::new(vec![0], vec![], Mat::zeros((1, 1)), vec!["a".into()], Some(vec![String::new()]));
        assert!(bad.is_err());
        let bad = TextAttributedGraph::new(vec![0, 1], vec![(1, 1)], Mat::zeros((2, 1)), vec!["a".into(), "b".into()], None);
        assert!(bad.is_err());
    }

    #[test]
    fn bag_of_words_orders_by_frequency() {
        let x = bag_of_words_features(&["b a b".into(), "c".into()], 2);
        // column 0 = "b" (2 occurrences), column 1 = "a" (tie with c, alphabetical)
        assert_eq!(x.row(0).to_vec(), vec![2.0, 1.0]);
        assert_eq!(x.row(1).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn oversized_topic_blocks_are_rejected() {
        let spec = SyntheticTagSpec {
            tokens_per_class: 30,
            ..SyntheticTagSpec::default()
        };
        assert!(matches!(
            generate_synthetic_tag(&spec),
            Err(ZptError::Config { field, .. }) if field == "tokens_per_class"
        ));
    }

    #[test]
    fn class_names_are_vocabulary_tokens() {
        let spec = SyntheticTagSpec::default();
        let g = generate_synthetic_tag(&spec).unwrap();
        assert_eq!(g.num_nodes(), 500);
        assert_eq!(
            g.class_names(),
            vec!["theory", "learning", "genetics", "robotics", "databases"]
        );
        for t in g.texts() {
            assert_eq!(t.split_whitespace().count(), spec.text_len);
        }
    }
}
